//! Static text used to build haystacks, needles and queries.

/// Shared prefix prepended to every chunk.
pub const SYSTEM_PROMPT: &str = "You are a helpful assistant. Some special magic numbers are hidden within the following text. Make sure to memorize it. I will quiz you about the numbers afterwards.\n";

/// Repetitive noise haystack.
pub const NOISE_SENTENCES: &[&str] = &[
    "The grass is green.",
    "The sky is blue.",
    "The sun is yellow.",
    "Here we go.",
    "There and back again.",
];

/// Essay-style haystack sentences.
pub const ESSAY_SENTENCES: &[&str] = &[
    "Most people learn the most when they work on problems they actually care about.",
    "A small team can often move faster than a large one because it spends less time on coordination.",
    "The best way to understand a city is to walk through it slowly and without a plan.",
    "Good writing is usually the result of many rounds of cutting rather than adding.",
    "When a river floods, the soil it leaves behind can make the land more fertile for years.",
    "Old maps are interesting because they show what people believed as much as what they knew.",
    "Some of the most useful tools are the ones that nobody notices until they stop working.",
    "A garden rewards patience more than almost any other hobby.",
    "It is easier to start a habit on a quiet morning than in the middle of a busy week.",
    "The first version of a program is rarely the one that people end up using.",
    "Many good ideas look like bad ideas at first, which is why so few people work on them.",
    "The library was quiet except for the sound of pages turning and a clock on the wall.",
    "A long walk after dinner can make a hard problem feel much smaller.",
    "Teachers often say that the questions students ask matter more than the answers they give.",
    "The market opened early, and the smell of fresh bread drifted across the square.",
    "Building something simple that works is harder than building something complex that almost works.",
    "The mountain road was narrow, and every turn showed a different view of the valley below.",
    "People tend to remember stories far better than they remember lists of facts.",
    "A careful reader will notice when an argument changes its meaning halfway through.",
    "The old train station had been turned into a museum about the history of the region.",
    "Every craft has a set of small habits that separate the beginner from the expert.",
    "The weather changed quickly, and the clear sky turned grey within an hour.",
    "It is often better to ask for help early than to struggle alone for a week.",
    "A good meeting ends with everyone knowing what they will do next.",
    "The island could only be reached by boat, and the boat only ran twice a day.",
    "Curiosity is one of the few traits that seems to grow stronger with use.",
    "The kitchen was small, but it had everything a careful cook would need.",
    "Most of the work in any project happens after the exciting part is over.",
    "The painter mixed her colors slowly, testing each one on a scrap of paper.",
    "A clear goal makes it much easier to decide what not to do.",
    "The children built a fort out of blankets and refused to come out for hours.",
    "Reading old letters can tell you a great deal about how people lived and what they feared.",
    "The bridge was built over ten years and is still in use today.",
    "Simple rules followed consistently often beat clever rules followed for a short time.",
    "The forest was so dense that very little light reached the ground.",
    "A friend who tells you the truth is worth more than many who only agree with you.",
    "The engineers tested the design again and again before they were satisfied.",
    "Some problems only become clear after you have tried to solve them once and failed.",
    "The festival filled the streets with music, food and people from every part of the country.",
    "Writing down a plan forces you to notice the parts you have not thought through.",
];

/// Word lists for needle keys (`adjective-noun`).
pub const KEY_ADJECTIVES: &[&str] = &[
    "amber", "bold", "calm", "daring", "eager", "fancy", "gentle", "hollow", "idle", "jolly", "keen", "lively",
    "misty", "noble", "odd", "proud", "quiet", "rapid", "silent", "tidy", "urban", "vivid", "wild", "young", "zesty",
    "brave", "clever", "dusty", "frozen", "golden",
];

pub const KEY_NOUNS: &[&str] = &[
    "harbor", "meadow", "castle", "river", "forest", "lantern", "valley", "garden", "island", "canyon", "mirror",
    "comet", "orchard", "bridge", "tower", "desert", "falcon", "glacier", "marble", "pepper", "violin", "window",
    "anchor", "beacon", "cellar", "dragon", "ember", "feather", "parrot", "summit",
];
