//! Experiment driver: runs a matrix of workload x placement x link x cache
//! cells, checks that every cell computed the same thing, and renders the
//! results as an aligned table or CSV.

use std::fmt::Write as _;

use offgrid_core::client::{ClientConfig, SpeedProfile, StrategyChoice};
use offgrid_core::netsim::Blackhole;
use offgrid_core::task::run_local;
use offgrid_core::{
    Clock, Digest, Invocation, LinkConfig, ObjectGraph, Placement, Server, ServerConfig, Testbed,
};
use offgrid_workloads::{build_graph, bundle, catalog, descriptors, ConfigError, WorkloadName, WorkloadSpec, PI_DOUBLE_TASK};
use thiserror::Error;

pub const CSV_HEADER: &str = "workload,strategy,link,cache,trials,wall_s,up_bytes,down_bytes,fetches,speedup";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Workload(#[from] ConfigError),
    #[error(transparent)]
    Runtime(#[from] offgrid_core::Error),
    #[error("invalid matrix: {0}")]
    Matrix(String),
    #[error("result mismatch in cell {cell}: {detail}")]
    Equivalence { cell: String, detail: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClockMode {
    Virtual,
    Real,
}

impl ClockMode {
    pub fn clock(self) -> Clock {
        match self {
            ClockMode::Virtual => Clock::virtual_time(),
            ClockMode::Real => Clock::real(),
        }
    }

    pub fn label(self) -> &'static str {
        self.clock().label()
    }
}

#[derive(Clone, Debug)]
pub struct MatrixConfig {
    pub workload: WorkloadSpec,
    pub strategies: Vec<StrategyChoice>,
    pub links: Vec<LinkConfig>,
    pub cache: Vec<bool>,
    pub trials: u32,
    pub speeds: SpeedProfile,
    pub clock: ClockMode,
    /// Remote pi runs use the double-precision implementation.
    pub pi_alternative: bool,
    /// Drop every frame once this many bytes have entered a cell's link
    /// after code registration.
    pub blackhole_after: Option<u64>,
}

impl MatrixConfig {
    pub fn new(workload: WorkloadSpec, strategies: Vec<StrategyChoice>, links: Vec<LinkConfig>) -> Self {
        MatrixConfig {
            workload,
            strategies,
            links,
            cache: vec![false],
            trials: 1,
            speeds: SpeedProfile {
                local: 5e7,
                server: 5e8,
            },
            clock: ClockMode::Virtual,
            pi_alternative: false,
            blackhole_after: None,
        }
    }

    fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::Matrix(m.to_string()));
        if self.trials == 0 {
            return bad("trials must be at least 1");
        }
        if self.strategies.is_empty() || self.links.is_empty() || self.cache.is_empty() {
            return bad("every matrix axis needs at least one value");
        }
        if !(self.speeds.local > 0.0 && self.speeds.server > 0.0) {
            return bad("speeds must be positive");
        }
        self.workload.validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentRow {
    pub workload: String,
    pub strategy: String,
    pub link: String,
    pub cache: bool,
    pub trials: u32,
    pub wall_s: f64,
    pub up_bytes: f64,
    pub down_bytes: f64,
    pub fetches: f64,
    /// Local mean wall time over this row's, when the report has a local row.
    pub speedup: Option<f64>,
    /// Mean execution time: server-reported when remote, wall time when local.
    pub exec_s: f64,
    /// Trials that fell back to local execution.
    pub fallbacks: u32,
    /// Code-registration traffic for the cell's session, not part of the
    /// per-trial counts.
    pub code_up_bytes: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rows: Vec<ExperimentRow>,
    /// `virtual` or `real`: which clock the wall times were read from.
    pub clock: &'static str,
}

/// What a correct run must produce.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outcome {
    pub ret: Vec<u8>,
    pub graph: Digest,
}

/// Pure local execution of `spec`, optionally with another implementation.
pub fn reference(spec: &WorkloadSpec, task_id: u32) -> Result<Outcome, BenchError> {
    let mut inst = build_graph(spec)?;
    let inv = Invocation {
        target: inst.target,
        params: inst.params,
    };
    let f = catalog()
        .remove(&task_id)
        .ok_or_else(|| BenchError::Matrix(format!("no implementation {task_id}")))?;
    let ret = run_local(&f, &mut inst.graph, &inv).map_err(|e| offgrid_core::Error::from(e))?;
    Ok(Outcome {
        ret,
        graph: inst.graph.canonical_hash(),
    })
}

struct Expected {
    local: Outcome,
    remote: Outcome,
}

impl Expected {
    fn check(&self, cell: &str, placement: Placement, ret: &[u8], graph: &ObjectGraph) -> Result<(), BenchError> {
        let want = match placement {
            Placement::Local => &self.local,
            Placement::Remote(_) => &self.remote,
        };
        let got = Outcome {
            ret: ret.to_vec(),
            graph: graph.canonical_hash(),
        };
        if &got == want {
            return Ok(());
        }
        let detail = if got.ret != want.ret {
            format!("{placement} run returned {} bytes differing from the reference", got.ret.len())
        } else {
            format!("{placement} run left graph hash {} instead of {}", got.graph, want.graph)
        };
        Err(BenchError::Equivalence {
            cell: cell.to_string(),
            detail,
        })
    }
}

fn expected(cfg: &MatrixConfig) -> Result<Expected, BenchError> {
    let local = reference(&cfg.workload, cfg.workload.task_id())?;
    let remote = if cfg.pi_alternative && cfg.workload.name == WorkloadName::PiMachin {
        reference(&cfg.workload, PI_DOUBLE_TASK)?
    } else {
        local.clone()
    };
    Ok(Expected { local, remote })
}

/// A fresh client/server pair over `link`, with tasks and code registered.
pub fn testbed(cfg: &MatrixConfig, link: &LinkConfig, strategy: StrategyChoice, cache: bool) -> Result<Testbed, BenchError> {
    let server = Server::new(
        catalog(),
        ServerConfig {
            speed: cfg.speeds.server,
            ..Default::default()
        },
    )?;
    let client_cfg = ClientConfig {
        strategy,
        cache_enabled: cache,
        ..Default::default()
    };
    let mut tb = Testbed::new(cfg.clock.clock(), link.clone(), server, cfg.speeds, client_cfg);
    for d in descriptors(cfg.pi_alternative) {
        tb.client_mut().register_task(d)?;
    }
    if strategy != StrategyChoice::Local {
        tb.client_mut().register_code(bundle())?;
    }
    Ok(tb)
}

#[derive(Default)]
struct Totals {
    wall: f64,
    up: f64,
    down: f64,
    fetches: f64,
    exec: f64,
    fallbacks: u32,
}

fn run_cell(
    cfg: &MatrixConfig,
    expected: &Expected,
    link: &LinkConfig,
    strategy: StrategyChoice,
    cache: bool,
) -> Result<ExperimentRow, BenchError> {
    let cell = format!("{}/{strategy}/{}/cache={}", cfg.workload.name, link.name, on_off(cache));
    let mut tb = testbed(cfg, link, strategy, cache)?;
    let code_up_bytes = tb.client().code_stats().bytes_up;
    let inst = build_graph(&cfg.workload)?;
    let mut warm = inst.graph.clone();
    if cache {
        // fill both caches; the measured trials then start from the state
        // the server already holds
        let (ret, m) = tb.client_mut().invoke(cfg.workload.task_id(), &mut warm, inst.target, &inst.params)?;
        expected.check(&cell, m.placement, &ret, &warm)?;
    }
    if let Some(n) = cfg.blackhole_after {
        let at = tb.link().entered() + n;
        tb.link().set_blackhole(Some(Blackhole::AfterBytes(at)));
    }
    let mut t = Totals::default();
    for _ in 0..cfg.trials {
        let mut g = if cache { warm.clone() } else { inst.graph.clone() };
        let (ret, m) = tb.client_mut().invoke(cfg.workload.task_id(), &mut g, inst.target, &inst.params)?;
        expected.check(&cell, m.placement, &ret, &g)?;
        t.wall += m.wall_time;
        t.up += m.bytes_up as f64;
        t.down += m.bytes_down as f64;
        t.fetches += m.fetch_round_trips as f64;
        t.exec += match m.placement {
            Placement::Local => m.wall_time,
            Placement::Remote(_) => m.server_exec,
        };
        t.fallbacks += m.fell_back() as u32;
        if cache {
            warm = g;
        }
    }
    let n = cfg.trials as f64;
    Ok(ExperimentRow {
        workload: cfg.workload.name.to_string(),
        strategy: strategy.to_string(),
        link: link.name.clone(),
        cache,
        trials: cfg.trials,
        wall_s: t.wall / n,
        up_bytes: t.up / n,
        down_bytes: t.down / n,
        fetches: t.fetches / n,
        speedup: None,
        exec_s: t.exec / n,
        fallbacks: t.fallbacks,
        code_up_bytes,
    })
}

/// Runs every cell sequentially and fills in speedups. Any cell whose
/// result differs from a pure local run aborts the whole report.
pub fn run_matrix(cfg: &MatrixConfig) -> Result<Report, BenchError> {
    cfg.validate()?;
    let expected = expected(cfg)?;
    let mut rows = Vec::new();
    for link in &cfg.links {
        for &strategy in &cfg.strategies {
            for &cache in &cfg.cache {
                // the cache only matters when something is shipped
                if cache && strategy == StrategyChoice::Local {
                    continue;
                }
                log::info!("cell {} {strategy} {} cache={cache}", cfg.workload.name, link.name);
                rows.push(run_cell(cfg, &expected, link, strategy, cache)?);
            }
        }
    }
    fill_speedups(&mut rows);
    Ok(Report {
        rows,
        clock: cfg.clock.label(),
    })
}

/// Sets each row's speedup from the local row of the same workload,
/// preferring one on the same link.
pub fn fill_speedups(rows: &mut [ExperimentRow]) {
    let locals: Vec<(String, String, f64)> = rows
        .iter()
        .filter(|r| r.strategy == "local")
        .map(|r| (r.workload.clone(), r.link.clone(), r.wall_s))
        .collect();
    for r in rows.iter_mut() {
        let same_workload = locals.iter().filter(|l| l.0 == r.workload);
        let base = same_workload
            .clone()
            .find(|l| l.1 == r.link)
            .or_else(|| same_workload.clone().next())
            .map(|l| l.2);
        r.speedup = base.filter(|_| r.wall_s > 0.0).map(|b| b / r.wall_s);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Table,
    Csv,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "table" => Ok(Format::Table),
            "csv" => Ok(Format::Csv),
            other => Err(format!("unknown format {other:?} (table, csv)")),
        }
    }
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

fn mean(x: f64) -> String {
    if x.fract() == 0.0 {
        format!("{x:.0}")
    } else {
        format!("{x:.2}")
    }
}

fn cells(r: &ExperimentRow, missing: &str) -> [String; 10] {
    [
        r.workload.clone(),
        r.strategy.clone(),
        r.link.clone(),
        on_off(r.cache).to_string(),
        r.trials.to_string(),
        format!("{:.6}", r.wall_s),
        mean(r.up_bytes),
        mean(r.down_bytes),
        mean(r.fetches),
        r.speedup.map_or_else(|| missing.to_string(), |s| format!("{s:.3}")),
    ]
}

/// Renders rows with a fixed column order. An empty row set yields the
/// header alone.
pub fn emit_report(rows: &[ExperimentRow], format: Format) -> String {
    let header: Vec<&str> = CSV_HEADER.split(',').collect();
    match format {
        Format::Csv => {
            let mut out = String::from(CSV_HEADER);
            out.push('\n');
            for r in rows {
                out.push_str(&cells(r, "").join(","));
                out.push('\n');
            }
            out
        }
        Format::Table => {
            let body: Vec<[String; 10]> = rows.iter().map(|r| cells(r, "-")).collect();
            let widths: Vec<usize> = (0..header.len())
                .map(|i| body.iter().map(|c| c[i].len()).chain([header[i].len()]).max().unwrap())
                .collect();
            let mut out = String::new();
            let line = |out: &mut String, items: Vec<&str>| {
                let parts: Vec<String> = items
                    .iter()
                    .zip(&widths)
                    .enumerate()
                    // text columns flush left, numbers flush right
                    .map(|(i, (s, w))| if i < 4 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                    .collect();
                let _ = writeln!(out, "{}", parts.join("  ").trim_end());
            };
            line(&mut out, header.clone());
            for c in &body {
                line(&mut out, c.iter().map(String::as_str).collect());
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(strategy: &str, wall: f64) -> ExperimentRow {
        ExperimentRow {
            workload: "w".into(),
            strategy: strategy.into(),
            link: "3g".into(),
            cache: false,
            trials: 2,
            wall_s: wall,
            up_bytes: 10.5,
            down_bytes: 3.0,
            fetches: 0.0,
            speedup: None,
            exec_s: 0.0,
            fallbacks: 0,
            code_up_bytes: 0,
        }
    }

    #[test]
    fn empty_report_is_header_only() {
        assert_eq!(emit_report(&[], Format::Csv), format!("{CSV_HEADER}\n"));
        assert_eq!(emit_report(&[], Format::Table).lines().count(), 1);
    }

    #[test]
    fn speedup_relative_to_local() {
        let mut rows = vec![row("local", 4.0), row("eager", 2.0)];
        fill_speedups(&mut rows);
        assert_eq!(rows[0].speedup, Some(1.0));
        assert_eq!(rows[1].speedup, Some(2.0));
        let mut lonely = vec![row("lazy", 1.0)];
        fill_speedups(&mut lonely);
        assert_eq!(lonely[0].speedup, None);
        assert!(emit_report(&lonely, Format::Csv).ends_with(",0,\n"));
    }

    #[test]
    fn table_columns_align() {
        let mut rows = vec![row("local", 4.0), row("pipelined", 0.25)];
        fill_speedups(&mut rows);
        let t = emit_report(&rows, Format::Table);
        // the last column is right-aligned, so aligned rows share a length
        let lens: Vec<usize> = t.lines().map(str::len).collect();
        assert!(lens.windows(2).all(|w| w[0] == w[1]), "{t}");
        let wall = t.lines().next().unwrap().find("wall_s").unwrap() + "wall_s".len();
        assert!(t.lines().skip(1).all(|l| l[..wall].ends_with("0000")), "{t}");
    }

    #[test]
    fn csv_row_format() {
        let csv = emit_report(&[row("eager", 1.5)], Format::Csv);
        assert_eq!(csv.lines().nth(1).unwrap(), "w,eager,3g,off,2,1.500000,10.50,3,0,");
    }
}
