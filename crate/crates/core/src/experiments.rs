//! The experiment suites: each is a shipped scenario plus a list of sweep
//! points, run in parallel and summarised in one CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::config::{apply_overrides, bundled, Algorithm, ScenarioSpec};
use crate::error::{Error, Result};
use crate::net::simulate;
use crate::trace::MetricsReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Sliding,
    SmallQueue,
    Convergence,
    ParamSweep,
    BandwidthSweep,
    DelaySweep,
    ParkingLot,
}

impl Suite {
    pub const ALL: [Suite; 7] = [
        Suite::Sliding,
        Suite::SmallQueue,
        Suite::Convergence,
        Suite::ParamSweep,
        Suite::BandwidthSweep,
        Suite::DelaySweep,
        Suite::ParkingLot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Sliding => "sliding",
            Suite::SmallQueue => "small-queue",
            Suite::Convergence => "convergence",
            Suite::ParamSweep => "param-sweep",
            Suite::BandwidthSweep => "bandwidth-sweep",
            Suite::DelaySweep => "delay-sweep",
            Suite::ParkingLot => "parking-lot",
        }
    }

    pub fn scenario(self) -> &'static str {
        match self {
            Suite::Sliding | Suite::ParamSweep | Suite::BandwidthSweep => "dumbbell3.cfg",
            Suite::SmallQueue => "smallqueue.cfg",
            Suite::Convergence => "convergence.cfg",
            Suite::DelaySweep => "dumbbell100g.cfg",
            Suite::ParkingLot => "parkinglot.cfg",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::UnknownSuite(s.to_string()))
    }
}

/// Capacities of the bandwidth sweep.
pub const BANDWIDTHS_BPS: [f64; 4] = [1e9, 10e9, 40e9, 100e9];
/// Per-link delays of the delay sweep.
pub const DELAYS_NS: [u64; 5] = [100, 1_000, 5_000, 10_000, 20_000];
/// Multipliers applied to each approach gain in the parameter sweep.
pub const PARAM_FACTORS: [f64; 3] = [0.5, 1.0, 2.0];
/// Buffer used at every capacity of the bandwidth sweep: 127 packets, one
/// packet per queue code.
pub const SWEEP_BUFFER_BYTES: u64 = 127 * 1500;

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub label: String,
    /// Extra summary columns, as `(name, value)`.
    pub params: Vec<(String, String)>,
    pub spec: ScenarioSpec,
    /// Why the point is left out of aggregate judgements, if it is.
    pub excluded: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct SuiteOptions {
    pub seed: Option<u64>,
    /// Keep only points using this algorithm.
    pub algorithm: Option<Algorithm>,
    pub overrides: Vec<String>,
}

fn base(suite: Suite) -> Result<ScenarioSpec> {
    ScenarioSpec::from_toml(bundled(suite.scenario()).expect("suite scenarios are bundled"))
}

fn point(label: String, params: Vec<(&str, String)>, spec: ScenarioSpec) -> SweepPoint {
    SweepPoint {
        label,
        params: params.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        spec,
        excluded: None,
    }
}

fn both_algorithms(spec: &ScenarioSpec) -> Vec<SweepPoint> {
    [Algorithm::Asm, Algorithm::Qcn]
        .into_iter()
        .map(|a| {
            let mut s = spec.clone();
            s.algorithm = a;
            let name = algorithm_name(a);
            point(name.to_string(), vec![], s)
        })
        .collect()
}

pub fn algorithm_name(a: Algorithm) -> &'static str {
    match a {
        Algorithm::Asm => "asm",
        Algorithm::Qcn => "qcn",
    }
}

/// Sets every link to `capacity_bps` and every flow to start at half of it.
pub fn at_capacity(spec: &ScenarioSpec, capacity_bps: f64) -> ScenarioSpec {
    let mut s = spec.clone();
    for l in &mut s.links {
        l.capacity_bps = capacity_bps;
    }
    for f in &mut s.flows {
        f.initial_rate_bps = capacity_bps / 2.0;
    }
    s.buffer_bytes = SWEEP_BUFFER_BYTES;
    // Ten times the slowest time constant at 1 Gb/s, shrinking with speed.
    s.duration_ns = (200e6 * 1e9 / capacity_bps).max(20e6) as u64;
    s
}

pub fn with_link_delay(spec: &ScenarioSpec, delay_ns: u64) -> ScenarioSpec {
    let mut s = spec.clone();
    for l in &mut s.links {
        l.delay_ns = delay_ns;
    }
    s
}

/// The approach gains scaled by `(a+, a-, b+, b-)` factors.
pub fn with_approach_factors(spec: &ScenarioSpec, f: [f64; 4]) -> ScenarioSpec {
    let mut s = spec.clone();
    for (c, k) in s.asm.caps_approach.iter_mut().zip(f) {
        *c *= k;
    }
    s
}

fn fmt_factor(f: f64) -> String {
    format!("{f}")
}

pub fn sweep_points(suite: Suite, opts: &SuiteOptions) -> Result<Vec<SweepPoint>> {
    let base = base(suite)?;
    let mut points = match suite {
        Suite::Sliding | Suite::ParkingLot => vec![point("asm".into(), vec![], base)],
        Suite::SmallQueue | Suite::Convergence => both_algorithms(&base),
        Suite::ParamSweep => {
            let mut v = Vec::with_capacity(81);
            for ap in PARAM_FACTORS {
                for am in PARAM_FACTORS {
                    for bp in PARAM_FACTORS {
                        for bm in PARAM_FACTORS {
                            let f = [ap, am, bp, bm];
                            let label = format!("ap{ap}_am{am}_bp{bp}_bm{bm}");
                            let params = ["a_plus", "a_minus", "b_plus", "b_minus"]
                                .iter()
                                .zip(f)
                                .map(|(k, x)| (*k, fmt_factor(x)))
                                .collect();
                            v.push(point(label, params, with_approach_factors(&base, f)));
                        }
                    }
                }
            }
            v
        }
        Suite::BandwidthSweep => BANDWIDTHS_BPS
            .iter()
            .map(|&c| {
                point(
                    format!("{}g", c / 1e9),
                    vec![("capacity_bps", format!("{c}"))],
                    at_capacity(&base, c),
                )
            })
            .collect(),
        Suite::DelaySweep => DELAYS_NS
            .iter()
            .flat_map(|&d| {
                let spec = with_link_delay(&base, d);
                both_algorithms(&spec).into_iter().map(move |mut p| {
                    p.label = format!("{}_{}ns", p.label, d);
                    p.params.push(("link_delay_ns".into(), d.to_string()));
                    p
                })
            })
            .collect(),
    };
    for p in &mut points {
        if let Some(seed) = opts.seed {
            p.spec.seed = seed;
        }
        p.spec = apply_overrides(&p.spec, &opts.overrides)?;
        p.params.insert(0, ("algorithm".into(), algorithm_name(p.spec.algorithm).into()));
        if suite == Suite::ParamSweep {
            let approach = p.spec.sliding_checks().map(|c| c[0]);
            if let Some(c) = approach.filter(|c| !c.holds) {
                p.excluded = Some(format!(
                    "approach gains fail the sliding condition (lhs_minus = {:.4}, lhs_plus = {:.4})",
                    c.lhs_minus, c.lhs_plus
                ));
            }
        }
    }
    if let Some(a) = opts.algorithm {
        points.retain(|p| p.spec.algorithm == a);
    }
    Ok(points)
}

#[derive(Debug, Clone)]
pub struct PointResult {
    pub label: String,
    pub params: Vec<(String, String)>,
    pub metrics: MetricsReport,
    pub trace_sha256: String,
    pub excluded: Option<String>,
    pub dir: PathBuf,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub suite: Suite,
    pub results: Vec<PointResult>,
    pub summary_path: PathBuf,
}

impl SuiteReport {
    pub fn get(&self, label: &str) -> Option<&PointResult> {
        self.results.iter().find(|r| r.label == label)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Runs one scenario and writes `trace.csv`, `metrics.txt` and the resolved
/// `scenario.cfg` into `dir`. Returns the metrics and the trace digest.
pub fn run_to_dir(spec: &ScenarioSpec, dir: &Path) -> Result<(MetricsReport, String)> {
    let out = simulate(spec)?;
    fs::create_dir_all(dir)?;
    let csv = out.trace.to_csv();
    fs::write(dir.join("trace.csv"), &csv)?;
    fs::write(dir.join("metrics.txt"), out.metrics.to_kv())?;
    fs::write(dir.join("scenario.cfg"), spec.to_toml())?;
    Ok((out.metrics, sha256_hex(csv.as_bytes())))
}

pub fn run_suite(suite: Suite, out_dir: &Path, opts: &SuiteOptions) -> Result<SuiteReport> {
    let points = sweep_points(suite, opts)?;
    log::info!("{}: {} points", suite.name(), points.len());
    let results = points
        .into_par_iter()
        .map(|p| {
            let dir = out_dir.join(&p.label);
            let (metrics, trace_sha256) = run_to_dir(&p.spec, &dir)?;
            Ok(PointResult {
                label: p.label,
                params: p.params,
                metrics,
                trace_sha256,
                excluded: p.excluded,
                dir,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let summary_path = out_dir.join("summary.csv");
    fs::write(&summary_path, summary_csv(&results))?;
    Ok(SuiteReport {
        suite,
        results,
        summary_path,
    })
}

pub fn summary_csv(results: &[PointResult]) -> String {
    let mut out = String::from("label");
    if let Some(first) = results.first() {
        for (k, _) in &first.params {
            let _ = write!(out, ",{k}");
        }
    }
    out.push_str(
        ",response_time_s,max_amplitude_pkts,avg_q_pkts,drain_count,throughput_ratio,drop_count,trace_sha256,excluded\n",
    );
    for r in results {
        out.push_str(&r.label);
        for (_, v) in &r.params {
            let _ = write!(out, ",{v}");
        }
        let m = &r.metrics;
        let resp = m.response_time.map_or("inf".to_string(), |t| format!("{t:.9}"));
        let _ = writeln!(
            out,
            ",{resp},{},{},{},{},{},{},{}",
            m.max_amplitude,
            m.avg_q,
            m.drain_count,
            m.throughput_ratio,
            m.drop_count,
            r.trace_sha256,
            r.excluded.as_deref().unwrap_or("").replace(',', ";")
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
            assert!(bundled(s.scenario()).is_some());
        }
        assert!(matches!("fig11".parse::<Suite>(), Err(Error::UnknownSuite(_))));
    }

    #[test]
    fn param_sweep_has_81_distinct_points() {
        let pts = sweep_points(Suite::ParamSweep, &SuiteOptions::default()).unwrap();
        assert_eq!(pts.len(), 81);
        let mut caps: Vec<String> = pts.iter().map(|p| format!("{:?}", p.spec.asm.caps_approach)).collect();
        caps.sort();
        caps.dedup();
        assert_eq!(caps.len(), 81);
        let default = pts.iter().find(|p| p.label == "ap1_am1_bp1_bm1").unwrap();
        assert_eq!(default.spec.asm.caps_approach, crate::asm::DEFAULT_CAPS_APPROACH);
    }

    #[test]
    fn sweep_points_follow_grids() {
        let bw = sweep_points(Suite::BandwidthSweep, &SuiteOptions::default()).unwrap();
        assert_eq!(bw.len(), 4);
        assert_eq!(bw[3].spec.duration_ns, 20_000_000);
        assert_eq!(bw[0].spec.duration_ns, 200_000_000);
        assert!(bw[3].spec.links.iter().all(|l| l.capacity_bps == 100e9));
        let delay = sweep_points(Suite::DelaySweep, &SuiteOptions::default()).unwrap();
        assert_eq!(delay.len(), 2 * DELAYS_NS.len());
        let only_qcn = SuiteOptions {
            algorithm: Some(Algorithm::Qcn),
            ..Default::default()
        };
        let delay = sweep_points(Suite::DelaySweep, &only_qcn).unwrap();
        assert!(delay.iter().all(|p| p.spec.algorithm == Algorithm::Qcn && p.label.starts_with("qcn_")));
    }

    #[test]
    fn options_reach_every_point() {
        let opts = SuiteOptions {
            seed: Some(42),
            algorithm: None,
            overrides: vec!["duration_ns=1000000".into()],
        };
        for p in sweep_points(Suite::SmallQueue, &opts).unwrap() {
            assert_eq!((p.spec.seed, p.spec.duration_ns), (42, 1_000_000));
        }
    }

    #[test]
    fn digest_of_empty_input() {
        assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }
}
