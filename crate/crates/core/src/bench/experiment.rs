//! Seeded Monte-Carlo sweeps and their CSV / JSON artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ConfigFile;
use super::{run_scheme, Scheme};
use crate::error::{Error, Result};
use crate::model::{dbm_to_watt, mix_seed, sample_channels, SystemConfig};

/// Column order of `results.csv`.
pub const CSV_HEADER: [&str; 12] = [
    "scheme",
    "sweep_name",
    "sweep_value",
    "trial",
    "seed",
    "maxmin_rate_bps_hz",
    "iters_outer",
    "iters_inner_total",
    "penalty_violation",
    "wall_ms",
    "status",
    "per_user_rates",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    None,
    EpsFactor,
    Delta,
    RfChains,
    Users,
    /// Power budget in dBm.
    PthDbm,
    /// Power budget in watts.
    Pth,
    /// Every user placed at this radius.
    Distance,
}

impl SweepVariable {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name.trim() {
            "" | "none" => SweepVariable::None,
            "eps_factor" | "eps" => SweepVariable::EpsFactor,
            "delta" => SweepVariable::Delta,
            "rf_chains" | "L" => SweepVariable::RfChains,
            "users" | "K" => SweepVariable::Users,
            "p_th_dbm" | "P_th_dbm" | "P_th" => SweepVariable::PthDbm,
            "p_th" => SweepVariable::Pth,
            "distance" | "r" => SweepVariable::Distance,
            other => return Err(Error::Config(format!("unknown sweep variable '{other}'"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepVariable::None => "none",
            SweepVariable::EpsFactor => "eps_factor",
            SweepVariable::Delta => "delta",
            SweepVariable::RfChains => "rf_chains",
            SweepVariable::Users => "users",
            SweepVariable::PthDbm => "p_th_dbm",
            SweepVariable::Pth => "p_th",
            SweepVariable::Distance => "distance",
        }
    }

    /// Writes `value` into `cfg`.
    pub fn apply(self, cfg: &mut SystemConfig, value: f64) -> Result<()> {
        let count = |v: f64| -> Result<usize> {
            if v >= 1.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                Ok(v as usize)
            } else {
                Err(Error::Config(format!("{} must be a positive integer, got {v}", self.name())))
            }
        };
        if !value.is_finite() {
            return Err(Error::Config(format!("{} value {value} is not finite", self.name())));
        }
        match self {
            SweepVariable::None => {}
            SweepVariable::EpsFactor => cfg.eps_factor = value,
            SweepVariable::Delta => cfg.set_delta(value),
            SweepVariable::RfChains => cfg.rf_chains = count(value)?,
            SweepVariable::Users => {
                let k = count(value)?;
                if cfg.sigma2.len() > 1 || cfg.delta.len() > 1 {
                    return Err(Error::Config("per-user sigma2/delta lists cannot be combined with a user sweep".into()));
                }
                cfg.users = k;
            }
            SweepVariable::PthDbm => cfg.p_th = dbm_to_watt(value),
            SweepVariable::Pth => cfg.p_th = value,
            SweepVariable::Distance => {
                cfg.placement.r_min = value;
                cfg.placement.r_max = value;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub schemes: Vec<Scheme>,
    pub variable: SweepVariable,
    pub values: Vec<f64>,
    pub trials: usize,
    pub base: SystemConfig,
    pub seed: u64,
    /// Same realizations at every sweep value.
    pub pair_across_values: bool,
}

impl ExperimentSpec {
    /// One run of `scheme` on the base configuration.
    pub fn single(base: SystemConfig, scheme: Scheme) -> Self {
        Self {
            schemes: vec![scheme],
            variable: SweepVariable::None,
            values: vec![0.0],
            trials: 1,
            seed: base.seed,
            base,
            pair_across_values: false,
        }
    }

    /// Sweep from `sweep_file`'s `[sweep]` section, or else from `config`'s.
    pub fn from_files(config: &ConfigFile, sweep_file: Option<&ConfigFile>) -> Result<Self> {
        let base = config.system_config()?;
        let sweep = sweep_file
            .and_then(|f| f.sweep.as_ref())
            .or(config.sweep.as_ref())
            .ok_or_else(|| Error::Config("no [sweep] section found".into()))?;
        let variable = SweepVariable::parse(&sweep.variable)?;
        let values = if sweep.values.is_empty() && variable == SweepVariable::None {
            vec![0.0]
        } else {
            sweep.values.clone()
        };
        let schemes = if sweep.schemes.is_empty() {
            Scheme::ALL.to_vec()
        } else {
            sweep.schemes.iter().map(|s| s.parse()).collect::<Result<Vec<_>>>()?
        };
        let spec = Self {
            schemes,
            variable,
            values,
            trials: sweep.trials,
            seed: sweep.seed.unwrap_or(base.seed),
            base,
            pair_across_values: sweep.pair_across_values,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schemes.is_empty() {
            return Err(Error::Config("no schemes selected".into()));
        }
        if self.values.is_empty() {
            return Err(Error::Config(format!("sweep over {} has no values", self.variable.name())));
        }
        for i in 0..self.values.len() {
            self.config_for(i)?;
        }
        Ok(())
    }

    /// Validated configuration at sweep point `value_index`.
    pub fn config_for(&self, value_index: usize) -> Result<SystemConfig> {
        let mut cfg = self.base.clone();
        self.variable.apply(&mut cfg, self.values[value_index])?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Seed of the realization used at `(value_index, trial)` by every scheme.
    pub fn derived_seed(&self, value_index: usize, trial: usize) -> u64 {
        if self.pair_across_values {
            mix_seed(&[self.seed, trial as u64])
        } else {
            mix_seed(&[self.seed, value_index as u64, trial as u64])
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub scheme: String,
    pub sweep_name: String,
    pub sweep_value: f64,
    pub trial: usize,
    pub seed: u64,
    pub maxmin_rate_bps_hz: f64,
    pub iters_outer: usize,
    pub iters_inner_total: usize,
    pub penalty_violation: f64,
    pub wall_ms: f64,
    pub status: String,
    /// `;`-separated per-user totals.
    pub per_user_rates: String,
}

/// Everything recorded for one solver run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub scheme: String,
    pub sweep_name: String,
    pub sweep_value: f64,
    pub value_index: usize,
    pub trial: usize,
    pub seed: u64,
    pub status: String,
    pub message: Option<String>,
    pub maxmin_rate_bps_hz: f64,
    pub per_user_rates: Vec<f64>,
    pub common_rates: Vec<f64>,
    pub transmit_power: f64,
    pub objective_trace: Vec<Vec<f64>>,
    pub penalty_violation_trace: Vec<f64>,
    pub rho_trace: Vec<f64>,
    pub inner_iters: Vec<usize>,
    pub sca_iters: usize,
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub scheme_index: usize,
    pub value_index: usize,
    pub row: ResultRow,
    pub trace: TraceRecord,
}

impl RunRecord {
    fn sort_key(&self) -> (usize, usize, usize) {
        (self.scheme_index, self.value_index, self.row.trial)
    }

    /// Canonical file name below `traces/`.
    pub fn trace_file_name(&self) -> String {
        format!("{}-v{}-t{}.json", self.row.scheme, self.value_index, self.row.trial)
    }
}

/// Runs one `(scheme, value, trial)` cell. Failures become rows with status `failed`.
pub fn run_trial(spec: &ExperimentSpec, scheme_index: usize, value_index: usize, trial: usize) -> RunRecord {
    let scheme = spec.schemes[scheme_index];
    let seed = spec.derived_seed(value_index, trial);
    let clock = Instant::now();
    let outcome = spec.config_for(value_index).and_then(|cfg| {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let ch = sample_channels(&cfg, &mut rng)?;
        run_scheme(scheme, &ch, &cfg, &mut rng)
    });
    let wall_ms = clock.elapsed().as_secs_f64() * 1e3;
    let sweep_name = spec.variable.name().to_string();
    let sweep_value = spec.values[value_index];
    let (row, trace) = match outcome {
        Ok(out) => {
            let rep = &out.report;
            let row = ResultRow {
                scheme: scheme.name().into(),
                sweep_name: sweep_name.clone(),
                sweep_value,
                trial,
                seed,
                maxmin_rate_bps_hz: out.maxmin(),
                iters_outer: rep.outer_iters,
                iters_inner_total: rep.inner_iters_total(),
                penalty_violation: rep.final_violation(),
                wall_ms,
                status: rep.status.as_str().into(),
                per_user_rates: out.per_user.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(";"),
            };
            let trace = TraceRecord {
                scheme: scheme.name().into(),
                sweep_name,
                sweep_value,
                value_index,
                trial,
                seed,
                status: rep.status.as_str().into(),
                message: rep.message.clone(),
                maxmin_rate_bps_hz: out.maxmin(),
                per_user_rates: out.per_user.clone(),
                common_rates: out.allocation.common.clone(),
                transmit_power: out.transmit_power(),
                objective_trace: rep.objective_trace.clone(),
                penalty_violation_trace: rep.penalty_violation_trace.clone(),
                rho_trace: rep.rho_trace.clone(),
                inner_iters: rep.inner_iters.clone(),
                sca_iters: rep.sca_iters,
            };
            (row, trace)
        }
        Err(e) => {
            let row = ResultRow {
                scheme: scheme.name().into(),
                sweep_name: sweep_name.clone(),
                sweep_value,
                trial,
                seed,
                maxmin_rate_bps_hz: f64::NAN,
                iters_outer: 0,
                iters_inner_total: 0,
                penalty_violation: f64::NAN,
                wall_ms,
                status: "failed".into(),
                per_user_rates: String::new(),
            };
            let trace = TraceRecord {
                scheme: scheme.name().into(),
                sweep_name,
                sweep_value,
                value_index,
                trial,
                seed,
                status: "failed".into(),
                message: Some(e.to_string()),
                maxmin_rate_bps_hz: f64::NAN,
                per_user_rates: Vec::new(),
                common_rates: Vec::new(),
                transmit_power: f64::NAN,
                objective_trace: Vec::new(),
                penalty_violation_trace: Vec::new(),
                rho_trace: Vec::new(),
                inner_iters: Vec::new(),
                sca_iters: 0,
            };
            (row, trace)
        }
    };
    RunRecord {
        scheme_index,
        value_index,
        row,
        trace,
    }
}

/// All cells of `spec`, canonically ordered by scheme, sweep value and trial.
pub fn run_records(spec: &ExperimentSpec, threads: Option<usize>) -> Result<Vec<RunRecord>> {
    spec.validate()?;
    let cells: Vec<(usize, usize, usize)> = (0..spec.schemes.len())
        .flat_map(|s| (0..spec.values.len()).flat_map(move |v| (0..spec.trials).map(move |t| (s, v, t))))
        .collect();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut records: Vec<RunRecord> =
        pool.install(|| cells.par_iter().map(|&(s, v, t)| run_trial(spec, s, v, t)).collect());
    records.sort_by_key(RunRecord::sort_key);
    Ok(records)
}

/// Mean and spread of one `(scheme, sweep value)` group over its successful trials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scheme: String,
    pub sweep_value: f64,
    pub trials: usize,
    pub failures: usize,
    pub mean_maxmin_rate: f64,
    /// Sample standard deviation; zero below two trials.
    pub std_maxmin_rate: f64,
}

pub fn summarize(spec: &ExperimentSpec, records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for (si, scheme) in spec.schemes.iter().enumerate() {
        for (vi, &value) in spec.values.iter().enumerate() {
            let group: Vec<&RunRecord> = records
                .iter()
                .filter(|r| r.scheme_index == si && r.value_index == vi)
                .collect();
            let ok: Vec<f64> = group
                .iter()
                .map(|r| r.row.maxmin_rate_bps_hz)
                .filter(|x| x.is_finite())
                .collect();
            let n = ok.len();
            let mean = if n > 0 { ok.iter().sum::<f64>() / n as f64 } else { f64::NAN };
            let std = if n > 1 {
                (ok.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            out.push(SummaryRow {
                scheme: scheme.name().into(),
                sweep_value: value,
                trials: n,
                failures: group.len() - n,
                mean_maxmin_rate: mean,
                std_maxmin_rate: std,
            });
        }
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub started_unix_s: f64,
    pub finished_unix_s: f64,
    pub elapsed_ms: f64,
    pub threads: Option<usize>,
    pub spec: ExperimentSpec,
    pub rows: usize,
    pub failures: usize,
    pub summary: Vec<SummaryRow>,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub threads: Option<usize>,
    /// Write one JSON trace per run below `traces/`.
    pub write_traces: bool,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub records: Vec<RunRecord>,
    pub summary: Vec<SummaryRow>,
    pub results_csv: PathBuf,
    pub manifest_json: PathBuf,
}

impl ExperimentOutput {
    pub fn rows(&self) -> Vec<ResultRow> {
        self.records.iter().map(|r| r.row.clone()).collect()
    }
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Writes rows under a fixed header, also when `rows` is empty.
pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(CSV_HEADER)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(Error::Config(format!("unexpected header in {}", path.display())));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Runs `spec` and writes `results.csv`, `manifest.json` and optionally `traces/` into `out_dir`.
pub fn run_experiment(spec: &ExperimentSpec, out_dir: &Path, opts: &RunOptions) -> Result<ExperimentOutput> {
    spec.validate()?;
    fs::create_dir_all(out_dir)?;
    let started = unix_now();
    let clock = Instant::now();
    let records = run_records(spec, opts.threads)?;
    let summary = summarize(spec, &records);

    let results_csv = out_dir.join("results.csv");
    let rows: Vec<ResultRow> = records.iter().map(|r| r.row.clone()).collect();
    write_results_csv(&results_csv, &rows)?;

    if opts.write_traces && !records.is_empty() {
        let dir = out_dir.join("traces");
        fs::create_dir_all(&dir)?;
        for rec in &records {
            write_json(&dir.join(rec.trace_file_name()), &rec.trace)?;
        }
    }

    let manifest = Manifest {
        tool: "nfrsma".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        started_unix_s: started,
        finished_unix_s: unix_now(),
        elapsed_ms: clock.elapsed().as_secs_f64() * 1e3,
        threads: opts.threads,
        spec: spec.clone(),
        rows: rows.len(),
        failures: rows.iter().filter(|r| r.status == "failed").count(),
        summary: summary.clone(),
    };
    let manifest_json = out_dir.join("manifest.json");
    write_json(&manifest_json, &manifest)?;

    Ok(ExperimentOutput {
        records,
        summary,
        results_csv,
        manifest_json,
    })
}

/// Single run of `scheme`; writes `results.csv`, `manifest.json` and `trace.json`.
pub fn run_solve(base: &SystemConfig, scheme: Scheme, out_dir: &Path, threads: Option<usize>) -> Result<ExperimentOutput> {
    let spec = ExperimentSpec::single(base.clone(), scheme);
    let out = run_experiment(
        &spec,
        out_dir,
        &RunOptions {
            threads,
            write_traces: false,
        },
    )?;
    if let Some(rec) = out.records.first() {
        write_json(&out_dir.join("trace.json"), &rec.trace)?;
    }
    Ok(out)
}
