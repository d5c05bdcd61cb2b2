//! Penalty-based block coordinate descent for the sub-connected hybrid design.
//!
//! The coupling `P = FW` is moved into the objective as `−(1/ρ)‖P − FW‖²`.
//! For fixed `ρ` the driver cycles through three blocks: `(P, c, R̂)` by the SCA
//! loop, the analog phases in closed form, and the digital matrix by least
//! squares. `ρ` then shrinks geometrically until the coupling gap is negligible.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ChannelSet, SystemConfig};
use crate::rates::{apply_analog, best_allocation, HybridBeamfocuser, LinkModel, RateAllocation};
use crate::subproblem::{run_sca, PenaltyTerm, ScaProblem, StreamMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverStatus {
    Converged,
    MaxIters,
    NumericError,
}

impl SolverStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SolverStatus::Converged => "converged",
            SolverStatus::MaxIters => "max_iters",
            SolverStatus::NumericError => "numeric_error",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub outer_iters: usize,
    /// Block-update passes per outer iteration.
    pub inner_iters: Vec<usize>,
    /// SCA steps summed over the whole run.
    pub sca_iters: usize,
    /// Penalized objective, one list per outer iteration: the value on entry
    /// and after every pass.
    pub objective_trace: Vec<Vec<f64>>,
    /// `‖P − FW‖²` at the end of each outer iteration.
    pub penalty_violation_trace: Vec<f64>,
    pub rho_trace: Vec<f64>,
    pub final_rate: f64,
    pub status: SolverStatus,
    pub message: Option<String>,
    pub wall_ms: f64,
}

impl SolverReport {
    pub fn new() -> Self {
        Self {
            outer_iters: 0,
            inner_iters: Vec::new(),
            sca_iters: 0,
            objective_trace: Vec::new(),
            penalty_violation_trace: Vec::new(),
            rho_trace: Vec::new(),
            final_rate: 0.0,
            status: SolverStatus::MaxIters,
            message: None,
            wall_ms: 0.0,
        }
    }

    pub fn inner_iters_total(&self) -> usize {
        self.inner_iters.iter().sum()
    }

    pub fn final_violation(&self) -> f64 {
        self.penalty_violation_trace.last().copied().unwrap_or(0.0)
    }

    /// Largest drop between consecutive entries of any single-`ρ` trace.
    pub fn worst_monotonicity_violation(&self) -> f64 {
        self.objective_trace
            .iter()
            .flat_map(|t| t.windows(2).map(|w| w[0] - w[1]))
            .fold(0.0, f64::max)
    }
}

impl Default for SolverReport {
    fn default() -> Self {
        Self::new()
    }
}

/// A finished hybrid design.
#[derive(Clone, Debug)]
pub struct HybridOutcome {
    pub beamfocuser: HybridBeamfocuser,
    pub allocation: RateAllocation,
    pub report: SolverReport,
}

/// Closed-form phase update `f_l = e^{j∠ψ_l}` with `ψ_l = P̂_l ŵ_l^H`.
///
/// Entries with `ψ = 0` keep their previous phase.
pub fn update_analog(
    p: &DMatrix<Complex64>,
    digital: &DMatrix<Complex64>,
    previous: &[DVector<Complex64>],
) -> Vec<DVector<Complex64>> {
    let l_chains = digital.nrows();
    let m = p.nrows() / l_chains;
    (0..l_chains)
        .map(|l| {
            let block = p.rows(l * m, m);
            let w = digital.row(l);
            DVector::from_fn(m, |i, _| {
                let psi: Complex64 = (0..w.len()).map(|j| block[(i, j)] * w[j].conj()).sum();
                if psi.norm() > 0.0 {
                    psi / psi.norm()
                } else {
                    previous[l][i]
                }
            })
        })
        .collect()
}

/// Least-squares digital update `W = (F^H F)^{-1} F^H P = (1/M) F^H P`.
pub fn update_digital(p: &DMatrix<Complex64>, analog: &[DVector<Complex64>]) -> DMatrix<Complex64> {
    let m = analog.first().map_or(0, |f| f.len());
    let mut w = DMatrix::zeros(analog.len(), p.ncols());
    for (l, f) in analog.iter().enumerate() {
        let norm2 = f.norm_squared();
        let block = p.rows(l * m, m);
        for j in 0..p.ncols() {
            w[(l, j)] = f.dotc(&block.column(j)) / norm2;
        }
    }
    w
}

/// Random unit-modulus phases and a power-normalized matched-filter digital stage.
pub fn initial_beamfocuser<R: Rng + ?Sized>(ch: &ChannelSet, cfg: &SystemConfig, rng: &mut R) -> HybridBeamfocuser {
    let m = cfg.block_len();
    let analog: Vec<DVector<Complex64>> = (0..cfg.rf_chains)
        .map(|_| {
            DVector::from_fn(m, |_, _| {
                Complex64::from_polar(1.0, rng.gen::<f64>() * std::f64::consts::TAU)
            })
        })
        .collect();
    let digital = matched_digital(ch, cfg, &analog);
    HybridBeamfocuser { analog, digital }
}

/// Unit-norm matched filters `ĥ_k/‖ĥ_k‖` in columns `1..=K`; column 0 holds
/// their normalized sum with norm `common_scale`.
pub fn matched_filters(ch: &ChannelSet, common_scale: f64) -> DMatrix<Complex64> {
    let n = ch.antennas();
    let mut p_mf = DMatrix::zeros(n, ch.users() + 1);
    let mut sum = DVector::zeros(n);
    for (k, h) in ch.h_hat.iter().enumerate() {
        let norm = h.norm();
        if norm > 0.0 {
            let u = h / Complex64::from(norm);
            sum += &u;
            p_mf.set_column(k + 1, &u);
        }
    }
    let sum_norm = sum.norm();
    if sum_norm > 0.0 {
        p_mf.set_column(0, &(sum * Complex64::from(common_scale / sum_norm)));
    }
    p_mf
}

/// `W = (1/M) F^H P_mf` scaled to full power.
pub fn matched_digital(ch: &ChannelSet, cfg: &SystemConfig, analog: &[DVector<Complex64>]) -> DMatrix<Complex64> {
    let mut w = update_digital(&matched_filters(ch, cfg.solver.common_init_scale), analog);
    scale_to_power(&mut w, analog, cfg.p_th);
    w
}

/// Rescales `W` so that `‖FW‖² = M‖W‖² = p_th`; leaves zero matrices alone.
pub fn scale_to_power(w: &mut DMatrix<Complex64>, analog: &[DVector<Complex64>], p_th: f64) {
    let m = analog.first().map_or(0, |f| f.len()) as f64;
    let power = m * w.norm_squared();
    if power > 0.0 {
        *w *= Complex64::from((p_th / power).sqrt());
    }
}

/// Rates of a hybrid design on the equivalent channel, with the best common split.
pub fn hybrid_allocation(ch: &ChannelSet, cfg: &SystemConfig, hb: &HybridBeamfocuser, mode: StreamMode) -> RateAllocation {
    let model = LinkModel::equivalent(ch, cfg, &hb.analog);
    best_allocation(&model, &hb.digital, &cfg.delta_vec(), mode.has_common())
}

/// Runs the penalty BCD from `init`.
pub fn run_pbcd(ch: &ChannelSet, cfg: &SystemConfig, init: &HybridBeamfocuser) -> Result<HybridOutcome> {
    run_pbcd_mode(ch, cfg, init, StreamMode::Rsma)
}

pub fn run_pbcd_mode(
    ch: &ChannelSet,
    cfg: &SystemConfig,
    init: &HybridBeamfocuser,
    mode: StreamMode,
) -> Result<HybridOutcome> {
    cfg.validate()?;
    if init.rf_chains() != cfg.rf_chains || init.block_len() != cfg.block_len() || init.digital.ncols() != ch.users() + 1 {
        return Err(Error::Domain("initial beamfocuser does not match the configuration".into()));
    }
    let clock = Instant::now();
    let settings = &cfg.solver;
    let model = LinkModel::direct(ch, cfg);
    let delta = cfg.delta_vec();
    let mut analog = init.analog.clone();
    let mut digital = init.digital.clone();
    if mode == StreamMode::Sdma {
        digital.column_mut(0).fill(Complex64::new(0.0, 0.0));
    }
    let mut fw = apply_analog(&analog, &digital);
    let mut p = fw.clone();
    let mut rho = settings.rho0;
    let mut report = SolverReport::new();

    let penalized = |p: &DMatrix<Complex64>, fw: &DMatrix<Complex64>, rho: f64| {
        best_allocation(&model, p, &delta, mode.has_common()).maxmin - (p - fw).norm_squared() / rho
    };

    'outer: for _ in 0..settings.max_outer_iters {
        report.outer_iters += 1;
        report.rho_trace.push(rho);
        let mut trace = vec![penalized(&p, &fw, rho)];
        let mut passes = 0;
        while passes < settings.max_inner_iters {
            passes += 1;
            let prob = ScaProblem {
                model: &model,
                delta: &delta,
                mode,
                penalty: Some(PenaltyTerm {
                    target: fw.clone(),
                    rho,
                }),
                p_th: cfg.p_th,
                noise_model: settings.noise_model,
                tol: settings.tol_sca,
                max_iters: settings.max_sca_iters,
                extrapolate: settings.extrapolate,
            };
            let sca = match run_sca(&prob, &p) {
                Ok(s) => s,
                Err(e) => {
                    report.status = SolverStatus::NumericError;
                    report.message = Some(e.to_string());
                    report.inner_iters.push(passes);
                    report.objective_trace.push(trace);
                    report.penalty_violation_trace.push((&p - &fw).norm_squared());
                    break 'outer;
                }
            };
            report.sca_iters += sca.iterations;
            p = sca.precoder;
            analog = update_analog(&p, &digital, &analog);
            digital = update_digital(&p, &analog);
            fw = apply_analog(&analog, &digital);
            let value = penalized(&p, &fw, rho);
            let previous = *trace.last().unwrap_or(&value);
            trace.push(value);
            if value - previous <= settings.tol_bcd * previous.abs().max(1.0) {
                break;
            }
        }
        report.inner_iters.push(passes);
        report.objective_trace.push(trace);
        let violation = (&p - &fw).norm_squared();
        report.penalty_violation_trace.push(violation);
        if violation < settings.tol_penalty * cfg.p_th {
            report.status = SolverStatus::Converged;
            break;
        }
        rho *= settings.alpha;
    }

    let beamfocuser = HybridBeamfocuser { analog, digital };
    let allocation = hybrid_allocation(ch, cfg, &beamfocuser, mode);
    report.final_rate = allocation.maxmin;
    report.wall_ms = clock.elapsed().as_secs_f64() * 1e3;
    Ok(HybridOutcome {
        beamfocuser,
        allocation,
        report,
    })
}
