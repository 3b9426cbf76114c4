use kvreuse_core::bench::{
    emit_report, render_report, run_suite, BenchReport, ReportFormat, Strategy, SuiteConfig, TaskKind, CSV_COLUMNS,
};

fn small_config() -> SuiteConfig {
    SuiteConfig {
        tasks: TaskKind::ALL.to_vec(),
        cases: 6,
        length_tokens: 256,
        ratios: vec![0.0, 0.5, 1.0],
        ..SuiteConfig::default()
    }
}

fn significant_digits(field: &str) -> usize {
    let mantissa = field.split(['e', 'E']).next().unwrap();
    let digits: String = mantissa.chars().filter(char::is_ascii_digit).collect();
    digits.trim_start_matches('0').trim_end_matches('0').len()
}

#[test]
fn suite_rows_metrics_and_formats() {
    let config = small_config();
    let report = run_suite(&config).unwrap();
    let per_case = 3 + 3 * config.ratios.len();
    assert_eq!(report.rows.len(), config.cases * per_case);

    for r in &report.rows {
        assert!(r.kl >= 0.0);
        assert!((0.0..=1.0).contains(&r.needle_coverage));
        match (r.strategy, r.ratio) {
            (Strategy::Full, None) => assert_eq!(r.kl, 0.0),
            (Strategy::Cacheclip, Some(1.0)) => assert!(r.kl <= 1e-6, "{}", r.kl),
            (s, None) => assert!(!s.uses_ratio()),
            _ => {}
        }
        if r.ratio == Some(1.0) {
            assert_eq!(r.needle_coverage, 1.0, "{:?} {}", r.strategy, r.case_id);
            assert_eq!(r.effective_ratio, 1.0);
        }
        if r.strategy == Strategy::Cacheblend && r.ratio.is_some_and(|x| x > 0.0) {
            assert!(r.first_window_fraction.is_some());
        }
    }
    assert_eq!(report.cacheblend_clustering.len(), config.ratios.len());

    let json = render_report(&report, ReportFormat::Json).unwrap();
    let parsed: BenchReport = serde_json::from_str(&json).unwrap();
    assert_eq!(parsed, report);
    assert_eq!(render_report(&parsed, ReportFormat::Json).unwrap(), json);

    let csv = render_report(&report, ReportFormat::Csv).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&header[..CSV_COLUMNS.len()], &CSV_COLUMNS[..]);
    let body: Vec<&str> = lines.collect();
    assert_eq!(body.len(), report.rows.len());
    for line in &body {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), header.len());
        for idx in [6, 7, 8, 20] {
            assert!(significant_digits(fields[idx]) <= 6, "{}", fields[idx]);
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.csv");
    emit_report(&report, ReportFormat::Csv, &path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), csv);
    assert!(emit_report(&report, ReportFormat::Json, dir.path().join("missing/dir/r.json")).is_err());
}

#[test]
fn identical_configs_give_identical_bytes() {
    let config = SuiteConfig {
        cases: 2,
        strategies: vec![Strategy::Full, Strategy::Cacheclip, Strategy::Random],
        ..small_config()
    };
    let a = render_report(&run_suite(&config).unwrap(), ReportFormat::Json).unwrap();
    let b = render_report(&run_suite(&config).unwrap(), ReportFormat::Json).unwrap();
    assert_eq!(a, b);
}

#[test]
fn invalid_suites_are_rejected() {
    let mut c = small_config();
    c.strategies.clear();
    assert!(run_suite(&c).is_err());
    let mut c = small_config();
    c.ratios = vec![1.5];
    assert!(run_suite(&c).is_err());
    let mut c = small_config();
    c.primary.manifest = Some("/nonexistent/manifest.json".into());
    assert!(run_suite(&c).is_err());
}
