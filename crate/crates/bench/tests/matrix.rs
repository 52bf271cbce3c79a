use std::path::PathBuf;

use offgrid_bench::{emit_report, run_matrix, ClockMode, Format, MatrixConfig, CSV_HEADER};
use offgrid_core::client::StrategyChoice;
use offgrid_core::netsim::preset;
use offgrid_core::TransmissionStrategy::{Eager, Lazy, Pipelined};
use offgrid_workloads::WorkloadSpec;

fn blob_matrix() -> MatrixConfig {
    let spec = WorkloadSpec::blob_detect(7, 4, 20_000, 2);
    MatrixConfig::new(
        spec,
        vec![
            StrategyChoice::Local,
            StrategyChoice::Remote(Eager),
            StrategyChoice::Remote(Lazy),
            StrategyChoice::Remote(Pipelined),
        ],
        vec![preset("3g").unwrap()],
    )
}

#[test]
fn every_strategy_matches_the_local_reference() {
    let report = run_matrix(&blob_matrix()).unwrap();
    assert_eq!(report.clock, "virtual");
    let strategies: Vec<_> = report.rows.iter().map(|r| r.strategy.as_str()).collect();
    assert_eq!(strategies, ["local", "eager", "lazy", "pipelined"]);
    for r in &report.rows {
        assert_eq!(r.fallbacks, 0, "{} fell back", r.strategy);
        assert!(r.wall_s > 0.0);
    }
    let local = &report.rows[0];
    assert_eq!(local.up_bytes, 0.0);
    assert_eq!(local.speedup, Some(1.0));
    // lazy fetches each of the four blobs once
    assert_eq!(report.rows[2].fetches, 4.0);
    assert_eq!(report.rows[1].fetches, 0.0);
}

#[test]
fn virtual_reports_are_reproducible() {
    let mut cfg = blob_matrix();
    cfg.trials = 2;
    let a = emit_report(&run_matrix(&cfg).unwrap().rows, Format::Csv);
    let b = emit_report(&run_matrix(&cfg).unwrap().rows, Format::Csv);
    assert_eq!(a, b);
    assert!(a.starts_with(CSV_HEADER));
    assert_eq!(a.lines().count(), 5);
}

#[test]
fn warm_cache_uploads_under_one_percent() {
    let mut cfg = blob_matrix();
    cfg.strategies = vec![StrategyChoice::Remote(Eager)];
    cfg.cache = vec![false, true];
    cfg.trials = 3;
    let rows = run_matrix(&cfg).unwrap().rows;
    assert_eq!(rows.len(), 2);
    let (cold, warm) = (&rows[0], &rows[1]);
    assert!(!cold.cache && warm.cache);
    assert!(warm.up_bytes < 0.01 * cold.up_bytes, "{} vs {}", warm.up_bytes, cold.up_bytes);
}

#[test]
fn local_cells_skip_the_cache_axis() {
    let mut cfg = blob_matrix();
    cfg.strategies = vec![StrategyChoice::Local];
    cfg.cache = vec![false, true];
    assert_eq!(run_matrix(&cfg).unwrap().rows.len(), 1);
}

#[test]
fn blackholed_cells_report_fallbacks() {
    let mut cfg = blob_matrix();
    cfg.strategies = vec![StrategyChoice::Remote(Pipelined)];
    cfg.blackhole_after = Some(5_000);
    let rows = run_matrix(&cfg).unwrap().rows;
    assert_eq!(rows[0].fallbacks, 1);
}

#[test]
fn rejects_empty_axes_and_zero_trials() {
    let mut cfg = blob_matrix();
    cfg.trials = 0;
    assert!(run_matrix(&cfg).is_err());
    let mut cfg = blob_matrix();
    cfg.links.clear();
    assert!(run_matrix(&cfg).is_err());
}

#[test]
fn csv_matches_golden_fixture() {
    let mut cfg = blob_matrix();
    cfg.strategies = vec![StrategyChoice::Local, StrategyChoice::Remote(Lazy)];
    cfg.clock = ClockMode::Virtual;
    let csv = emit_report(&run_matrix(&cfg).unwrap().rows, Format::Csv);
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/report.csv");
    if std::env::var_os("OFFGRID_REGEN_FIXTURES").is_some() {
        std::fs::write(&path, &csv).unwrap();
    }
    let golden = std::fs::read_to_string(&path).expect("fixture missing; set OFFGRID_REGEN_FIXTURES=1");
    assert_eq!(csv, golden);
}
