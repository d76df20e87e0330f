//! Latency timing, energy measurement and compression reports.
//!
//! Energy comes from cumulative microjoule counters (one directory per domain
//! holding `energy_uj` and `max_energy_range_uj`, as exposed by the Linux
//! powercap interface) or, when those are unavailable, from a fixed power
//! draw multiplied by wall time.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("runs must be at least 1")]
    NoRuns,
    #[error("energy counters unavailable: {0}")]
    CounterUnavailable(String),
    #[error("tdp_watts must be positive, got {0}")]
    BadTdp(f64),
    #[error("report has no rows")]
    EmptyReport,
    #[error("workload failed: {0}")]
    Workload(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = BenchError> = std::result::Result<T, E>;

pub const COUNTER_ROOT_ENV: &str = "SLIMBIO_COUNTER_ROOT";
pub const DEFAULT_COUNTER_ROOT: &str = "/sys/class/powercap";
pub const SAMPLE_PERIOD: Duration = Duration::from_millis(100);
pub const JOULES_PER_KWH: f64 = 3.6e6;

/// Only one measurement runs at a time in a process.
static MEASUREMENT: Mutex<()> = Mutex::new(());

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub runs: usize,
    pub warmup: usize,
    pub mean_s: f64,
    pub median_s: f64,
    pub p90_s: f64,
    pub min_s: f64,
}

impl LatencyStats {
    /// Median interpolates between the middle pair; p90 is nearest-rank.
    pub fn from_samples(samples: &[f64], warmup: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(BenchError::NoRuns);
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median = if n % 2 == 1 { s[n / 2] } else { (s[n / 2 - 1] + s[n / 2]) / 2.0 };
        let rank = ((0.9 * n as f64).ceil() as usize).clamp(1, n);
        Ok(Self {
            runs: n,
            warmup,
            mean_s: s.iter().sum::<f64>() / n as f64,
            median_s: median,
            p90_s: s[rank - 1],
            min_s: s[0],
        })
    }
}

/// Runs `work` `warmup` times unmeasured, then `runs` times under a monotonic
/// clock.
pub fn time_run<F, E>(mut work: F, runs: usize, warmup: usize) -> Result<LatencyStats>
where
    F: FnMut() -> Result<(), E>,
    E: std::fmt::Display,
{
    if runs == 0 {
        return Err(BenchError::NoRuns);
    }
    let wrap = |e: E| BenchError::Workload(e.to_string());
    for _ in 0..warmup {
        work().map_err(wrap)?;
    }
    let mut samples = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t0 = Instant::now();
        work().map_err(wrap)?;
        samples.push(t0.elapsed().as_secs_f64());
    }
    LatencyStats::from_samples(&samples, warmup)
}

/// Wraparound-safe difference of a cumulative counter.
pub fn counter_delta(prev: u64, curr: u64, max_range: u64) -> u64 {
    if curr >= prev {
        curr - prev
    } else {
        (max_range - prev) + curr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnergyBackend {
    CounterFile,
    TdpModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReading {
    pub backend: EnergyBackend,
    pub joules: f64,
    pub kwh: f64,
    pub samples: usize,
}

impl EnergyReading {
    pub fn new(backend: EnergyBackend, joules: f64, samples: usize) -> Self {
        Self {
            backend,
            joules,
            kwh: joules / JOULES_PER_KWH,
            samples,
        }
    }

    pub fn tdp(watts: f64, seconds: f64) -> Self {
        Self::new(EnergyBackend::TdpModel, watts * seconds, 0)
    }
}

#[derive(Debug, Clone)]
struct Domain {
    energy_file: PathBuf,
    max_range: u64,
    last: u64,
}

fn read_u64(path: &Path) -> Result<u64> {
    let text = fs::read_to_string(path)?;
    text.trim()
        .parse()
        .map_err(|_| BenchError::CounterUnavailable(format!("{} is not an integer", path.display())))
}

/// Reads every counter domain below a root directory. Subzones (names with
/// two or more colons, e.g. `intel-rapl:0:1`) are skipped because their
/// energy is already included in the parent zone.
#[derive(Debug, Clone)]
pub struct CounterReader {
    domains: Vec<Domain>,
    total_uj: u128,
    samples: usize,
}

impl CounterReader {
    pub fn open(root: &Path) -> Result<Self> {
        let unavailable = |why: String| BenchError::CounterUnavailable(format!("{}: {why}", root.display()));
        let mut dirs: Vec<PathBuf> = Vec::new();
        if root.join("energy_uj").is_file() {
            dirs.push(root.to_path_buf());
        } else {
            let entries = fs::read_dir(root).map_err(|e| unavailable(e.to_string()))?;
            for entry in entries.flatten() {
                let name = entry.file_name().to_string_lossy().into_owned();
                let path = entry.path();
                if name.matches(':').count() < 2 && path.join("energy_uj").is_file() {
                    dirs.push(path);
                }
            }
        }
        dirs.sort();
        if dirs.is_empty() {
            return Err(unavailable("no energy_uj counters".into()));
        }
        let mut domains = Vec::with_capacity(dirs.len());
        for d in dirs {
            let energy_file = d.join("energy_uj");
            let max_range = read_u64(&d.join("max_energy_range_uj")).map_err(|e| unavailable(e.to_string()))?;
            let last = read_u64(&energy_file).map_err(|e| unavailable(e.to_string()))?;
            domains.push(Domain {
                energy_file,
                max_range,
                last,
            });
        }
        Ok(Self {
            domains,
            total_uj: 0,
            samples: 0,
        })
    }

    /// Reads all counters once and accumulates the deltas since the last read.
    pub fn sample(&mut self) -> Result<()> {
        for d in &mut self.domains {
            let now = read_u64(&d.energy_file)?;
            self.total_uj += counter_delta(d.last, now.min(d.max_range), d.max_range) as u128;
            d.last = now;
        }
        self.samples += 1;
        Ok(())
    }

    pub fn domain_count(&self) -> usize {
        self.domains.len()
    }

    pub fn microjoules(&self) -> u128 {
        self.total_uj
    }

    pub fn reading(&self) -> EnergyReading {
        EnergyReading::new(EnergyBackend::CounterFile, self.total_uj as f64 / 1e6, self.samples)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
pub enum EnergyConfig {
    /// Counter files below `root`; falls back to `fallback_watts` when set.
    CounterFile {
        #[serde(default)]
        root: Option<PathBuf>,
        #[serde(default)]
        fallback_watts: Option<f64>,
    },
    TdpModel { tdp_watts: f64 },
}

impl Default for EnergyConfig {
    fn default() -> Self {
        EnergyConfig::CounterFile {
            root: None,
            fallback_watts: Some(45.0),
        }
    }
}

/// Counter directory: the environment variable wins over `configured`, which
/// wins over the system default.
pub fn counter_root(configured: Option<&Path>) -> PathBuf {
    if let Some(v) = std::env::var_os(COUNTER_ROOT_ENV) {
        return PathBuf::from(v);
    }
    configured.map_or_else(|| PathBuf::from(DEFAULT_COUNTER_ROOT), Path::to_path_buf)
}

/// Runs `work` once while measuring its energy. Counters are sampled every
/// 100 ms on a helper thread whose lifetime is contained in the measurement.
pub fn measure_energy<T, F>(work: F, cfg: &EnergyConfig) -> Result<(EnergyReading, T)>
where
    F: FnOnce() -> T,
{
    let _guard = MEASUREMENT.lock().unwrap_or_else(|p| p.into_inner());
    let (root, fallback) = match cfg {
        EnergyConfig::TdpModel { tdp_watts } => {
            if !(*tdp_watts > 0.0) {
                return Err(BenchError::BadTdp(*tdp_watts));
            }
            let t0 = Instant::now();
            let out = work();
            return Ok((EnergyReading::tdp(*tdp_watts, t0.elapsed().as_secs_f64()), out));
        }
        EnergyConfig::CounterFile { root, fallback_watts } => (counter_root(root.as_deref()), *fallback_watts),
    };
    let mut reader = match CounterReader::open(&root) {
        Ok(r) => r,
        Err(e) => match fallback {
            Some(w) if w > 0.0 => {
                log::warn!("{e}; estimating energy as {w} W x wall time");
                let t0 = Instant::now();
                let out = work();
                return Ok((EnergyReading::tdp(w, t0.elapsed().as_secs_f64()), out));
            }
            _ => return Err(e),
        },
    };
    let done = AtomicBool::new(false);
    let (out, sampler) = std::thread::scope(|s| {
        let done = &done;
        let sampler = s.spawn(move || -> Result<CounterReader> {
            while !done.load(Ordering::Acquire) {
                std::thread::park_timeout(SAMPLE_PERIOD);
                reader.sample()?;
            }
            Ok(reader)
        });
        let out = work();
        done.store(true, Ordering::Release);
        sampler.thread().unpark();
        (out, sampler.join().expect("sampler thread panicked"))
    });
    let mut reader = sampler?;
    reader.sample()?;
    Ok((reader.reading(), out))
}

/// Deployment mode of a report row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "fp32")]
    Fp32,
    #[serde(rename = "int8")]
    Int8,
    #[serde(rename = "prune")]
    Prune,
    #[serde(rename = "prune+int8")]
    PruneInt8,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Fp32 => "fp32",
            Mode::Int8 => "int8",
            Mode::Prune => "prune",
            Mode::PruneInt8 => "prune+int8",
        }
    }

    pub fn prunes(self) -> bool {
        matches!(self, Mode::Prune | Mode::PruneInt8)
    }

    pub fn quantizes(self) -> bool {
        matches!(self, Mode::Int8 | Mode::PruneInt8)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: String,
    pub mode: Mode,
    pub latency: LatencyStats,
    pub energy: EnergyReading,
    pub accuracy: f64,
    pub accuracy_metric: String,
    pub image_shape: Vec<usize>,
    pub model_bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<ReportRow>,
}

/// Percentage decrease from `base` to `new`.
pub fn reduction_pct(base: f64, new: f64) -> f64 {
    (base - new) / base * 100.0
}

impl BenchReport {
    /// Energy reduction of each row against the fp32 row of the same task.
    pub fn reductions(&self) -> Vec<Option<f64>> {
        self.rows
            .iter()
            .map(|r| {
                if r.mode == Mode::Fp32 {
                    return None;
                }
                self.rows
                    .iter()
                    .find(|b| b.task == r.task && b.mode == Mode::Fp32)
                    .filter(|b| b.energy.kwh > 0.0)
                    .map(|b| reduction_pct(b.energy.kwh, r.energy.kwh))
            })
            .collect()
    }

    fn image_size(r: &ReportRow) -> String {
        r.image_shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
    }

    /// Aligned text table; energies in 1e-3 kWh with reductions annotated.
    pub fn to_text(&self) -> Result<String> {
        if self.rows.is_empty() {
            return Err(BenchError::EmptyReport);
        }
        let header = ["task", "mode", "latency(s)", "energy(1e-3 kWh)", "accuracy", "metric", "image size", "model bytes"];
        let mut cells: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for (r, red) in self.rows.iter().zip(self.reductions()) {
            let mut energy = format!("{:.6}", r.energy.kwh * 1e3);
            if let Some(p) = red {
                let arrow = if p >= 0.0 { "down" } else { "up" };
                energy.push_str(&format!(" ({:.1}% {arrow})", p.abs()));
            }
            cells.push(vec![
                r.task.clone(),
                r.mode.name().into(),
                format!("{:.4}", r.latency.mean_s),
                energy,
                format!("{:.4}", r.accuracy),
                r.accuracy_metric.clone(),
                Self::image_size(r),
                r.model_bytes.to_string(),
            ]);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| cells.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &cells {
            let line: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            writeln!(out, "{}", line.join("  ").trim_end()).expect("write to string");
        }
        out.push_str("latency is the mean over measured runs\n");
        Ok(out)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "task,mode,latency_s,energy_kwh,accuracy,accuracy_metric,image_size,model_bytes,energy_reduction_pct\n",
        );
        for (r, red) in self.rows.iter().zip(self.reductions()) {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.task,
                r.mode.name(),
                r.latency.mean_s,
                r.energy.kwh,
                r.accuracy,
                r.accuracy_metric,
                Self::image_size(r),
                r.model_bytes,
                red.map(|p| p.to_string()).unwrap_or_default()
            )
            .expect("write to string");
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        let rows: Vec<serde_json::Value> = self
            .rows
            .iter()
            .zip(self.reductions())
            .map(|(r, red)| {
                let mut v = serde_json::to_value(r)?;
                v["energy_reduction_pct"] = serde_json::json!(red);
                Ok(v)
            })
            .collect::<Result<_, serde_json::Error>>()?;
        Ok(serde_json::to_string_pretty(&serde_json::json!({ "rows": rows }))?)
    }

    /// Writes report.txt, report.csv and report.json into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.txt"), self.to_text()?)?;
        fs::write(dir.join("report.csv"), self.to_csv())?;
        fs::write(dir.join("report.json"), self.to_json()?)?;
        Ok(())
    }

    /// Loads rows from a report.json written by [`BenchReport::write`].
    pub fn load(path: &Path) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_slice(&fs::read(path)?)?;
        let mut rows = Vec::new();
        for mut row in v["rows"].as_array().cloned().unwrap_or_default() {
            if let Some(obj) = row.as_object_mut() {
                obj.remove("energy_reduction_pct");
            }
            rows.push(serde_json::from_value(row)?);
        }
        Ok(Self { rows })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn latency_stats() {
        let one = LatencyStats::from_samples(&[0.5], 0).unwrap();
        assert_eq!((one.mean_s, one.median_s, one.p90_s, one.min_s), (0.5, 0.5, 0.5, 0.5));
        let s = LatencyStats::from_samples(&[4.0, 1.0, 3.0, 2.0], 1).unwrap();
        assert_eq!((s.mean_s, s.median_s, s.p90_s, s.min_s), (2.5, 2.5, 4.0, 1.0));
        let ten: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(LatencyStats::from_samples(&ten, 0).unwrap().p90_s, 9.0);
        assert!(LatencyStats::from_samples(&[], 0).is_err());
    }

    #[test]
    fn time_run_counts_executions() {
        let calls = Cell::new(0);
        let stats = time_run(
            || {
                calls.set(calls.get() + 1);
                Ok::<(), String>(())
            },
            3,
            2,
        )
        .unwrap();
        assert_eq!(calls.get(), 5);
        assert_eq!((stats.runs, stats.warmup), (3, 2));
        assert!(stats.min_s <= stats.median_s && stats.median_s <= stats.p90_s);
        assert!(matches!(time_run(|| Ok::<(), String>(()), 0, 0), Err(BenchError::NoRuns)));
    }

    #[test]
    fn sleeping_workload_latency() {
        let s = time_run(
            || {
                std::thread::sleep(Duration::from_millis(50));
                Ok::<(), String>(())
            },
            3,
            0,
        )
        .unwrap();
        assert!((0.045..=0.080).contains(&s.mean_s), "{s:?}");
    }

    #[test]
    fn counter_delta_examples() {
        assert_eq!(counter_delta(100, 250, 1000), 150);
        assert_eq!(counter_delta(900, 50, 1000), 150);
        assert_eq!(counter_delta(7, 7, 1000), 0);
    }

    #[test]
    fn tdp_reading() {
        let r = EnergyReading::tdp(45.0, 100.0);
        assert_eq!(r.joules, 4500.0);
        assert!((r.kwh - 1.25e-3).abs() < 1e-15);
    }

    fn write_domain(root: &Path, name: &str, value: u64, max: u64) {
        let d = root.join(name);
        fs::create_dir_all(&d).unwrap();
        fs::write(d.join("energy_uj"), format!("{value}\n")).unwrap();
        fs::write(d.join("max_energy_range_uj"), format!("{max}\n")).unwrap();
    }

    #[test]
    fn counter_fixture_linear_advance() {
        let dir = tempfile::tempdir().unwrap();
        write_domain(dir.path(), "intel-rapl:0", 5_000, 1_000_000);
        let mut r = CounterReader::open(dir.path()).unwrap();
        for i in 1..=10u64 {
            write_domain(dir.path(), "intel-rapl:0", 5_000 + 1000 * i, 1_000_000);
            r.sample().unwrap();
        }
        let reading = r.reading();
        assert_eq!(reading.samples, 10);
        assert!((reading.joules - 0.01).abs() < 1e-15);
    }

    #[test]
    fn counter_fixture_with_wrap_and_subzone() {
        let dir = tempfile::tempdir().unwrap();
        let max = 262_143;
        write_domain(dir.path(), "intel-rapl:0", 250_000, max);
        write_domain(dir.path(), "intel-rapl:1", 10, max);
        // subzone energy is part of its parent and must be ignored
        write_domain(dir.path(), "intel-rapl:0:0", 0, max);
        let mut r = CounterReader::open(dir.path()).unwrap();
        assert_eq!(r.domain_count(), 2);
        write_domain(dir.path(), "intel-rapl:0", 260_000, max);
        write_domain(dir.path(), "intel-rapl:1", 1_010, max);
        write_domain(dir.path(), "intel-rapl:0:0", 99_999, max);
        r.sample().unwrap();
        write_domain(dir.path(), "intel-rapl:0", 3_000, max);
        write_domain(dir.path(), "intel-rapl:1", 2_010, max);
        r.sample().unwrap();
        // 10_000 + (262_143 - 260_000 + 3_000) + 1_000 + 1_000
        assert_eq!(r.microjoules(), 10_000 + 5_143 + 2_000);
    }

    #[test]
    fn missing_counters_fall_back_or_fail() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope");
        let strict = EnergyConfig::CounterFile {
            root: Some(missing.clone()),
            fallback_watts: None,
        };
        if std::env::var_os(COUNTER_ROOT_ENV).is_none() {
            assert!(matches!(measure_energy(|| (), &strict), Err(BenchError::CounterUnavailable(_))));
            let lenient = EnergyConfig::CounterFile {
                root: Some(missing),
                fallback_watts: Some(10.0),
            };
            let (r, _) = measure_energy(|| std::thread::sleep(Duration::from_millis(20)), &lenient).unwrap();
            assert_eq!(r.backend, EnergyBackend::TdpModel);
            assert!(r.joules >= 0.2);
        }
        assert!(matches!(measure_energy(|| (), &EnergyConfig::TdpModel { tdp_watts: 0.0 }), Err(BenchError::BadTdp(_))));
    }

    #[test]
    fn sampler_thread_reads_fixture() {
        let dir = tempfile::tempdir().unwrap();
        write_domain(dir.path(), "intel-rapl:0", 0, 1 << 40);
        let cfg = EnergyConfig::CounterFile {
            root: Some(dir.path().to_path_buf()),
            fallback_watts: None,
        };
        if std::env::var_os(COUNTER_ROOT_ENV).is_some() {
            return;
        }
        let (r, v) = measure_energy(
            || {
                write_domain(dir.path(), "intel-rapl:0", 2_500_000, 1 << 40);
                std::thread::sleep(Duration::from_millis(250));
                42
            },
            &cfg,
        )
        .unwrap();
        assert_eq!(v, 42);
        assert_eq!(r.backend, EnergyBackend::CounterFile);
        assert!((r.joules - 2.5).abs() < 1e-12);
        assert!(r.samples >= 2);
    }

    fn row(task: &str, mode: Mode, kwh: f64) -> ReportRow {
        ReportRow {
            task: task.into(),
            mode,
            latency: LatencyStats::from_samples(&[1.0], 0).unwrap(),
            energy: EnergyReading::new(EnergyBackend::TdpModel, kwh * JOULES_PER_KWH, 0),
            accuracy: 0.8,
            accuracy_metric: "pearson".into(),
            image_shape: vec![1, 1, 8, 8],
            model_bytes: 100,
        }
    }

    #[test]
    fn report_reductions() {
        let single = BenchReport {
            rows: vec![row("a", Mode::Fp32, 1e-3)],
        };
        assert_eq!(single.reductions(), vec![None]);
        assert!(single.to_csv().ends_with(",100,\n"));

        let two = BenchReport {
            rows: vec![row("d", Mode::Fp32, 0.814e-3), row("d", Mode::Int8, 0.387e-3)],
        };
        let red = two.reductions()[1].unwrap();
        assert!((red - 52.5).abs() < 0.05, "{red}");
        assert!(two.to_text().unwrap().contains("(52.5% down)"));

        let mut rows = Vec::new();
        for task in ["a", "b"] {
            for (m, e) in [(Mode::Fp32, 2.0), (Mode::Int8, 1.0), (Mode::PruneInt8, 0.5)] {
                rows.push(row(task, m, e * if task == "a" { 1.0 } else { 4.0 }));
            }
        }
        let six = BenchReport { rows };
        let reds = six.reductions();
        assert_eq!(reds.len(), 6);
        assert_eq!(reds, vec![None, Some(50.0), Some(75.0), None, Some(50.0), Some(75.0)]);
        assert!(matches!(BenchReport::default().to_text(), Err(BenchError::EmptyReport)));
    }

    #[test]
    fn report_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rep = BenchReport {
            rows: vec![row("d", Mode::Fp32, 2e-3), row("d", Mode::PruneInt8, 1e-3)],
        };
        rep.write(dir.path()).unwrap();
        for f in ["report.txt", "report.csv", "report.json"] {
            assert!(dir.path().join(f).is_file());
        }
        assert_eq!(BenchReport::load(&dir.path().join("report.json")).unwrap(), rep);
        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(json["rows"][1]["energy_reduction_pct"], 50.0);
        assert_eq!(json["rows"][1]["mode"], "prune+int8");
    }

    /// Every annotated energy row of the published compression table:
    /// (fp32 energy, compressed energy, printed reduction %).
    const TABLE_ROWS: [(f64, f64, f64); 14] = [
        (0.814, 0.387, 52.5),
        (0.814, 0.384, 52.8),
        (0.280, 0.091, 67.4),
        (0.280, 0.085, 69.6),
        (18.044, 9.256, 48.7),
        (18.044, 6.840, 62.1),
        (5.677, 4.057, 28.5),
        (5.677, 3.650, 35.7),
        (1.922, 1.316, 31.5),
        (1.922, 1.307, 32.0),
        (0.526, 0.115, 78.1),
        (0.526, 0.102, 80.6),
        (97.272, 85.087, 12.5),
        (97.272, 81.744, 16.0),
    ];

    #[test]
    fn published_reductions_recompute() {
        for (base, new, printed) in TABLE_ROWS {
            let got = reduction_pct(base, new);
            assert!((got - printed).abs() <= 0.1, "{base} -> {new}: {got} vs {printed}");
        }
    }
}
