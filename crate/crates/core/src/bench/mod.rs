//! Baselines, experiment harness, configuration files and result persistence.

pub mod config;
pub mod experiment;
pub mod verify;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{far_field_response, ChannelSet, SystemConfig};
use crate::pbcd::{initial_beamfocuser, matched_filters, run_pbcd_mode, HybridOutcome, SolverReport, SolverStatus};
use crate::rates::{apply_analog, best_allocation, HybridBeamfocuser, LinkModel, RateAllocation};
use crate::subproblem::{run_sca, ScaProblem, StreamMode};
use crate::twostage::run_twostage_with;

pub use config::{ConfigFile, SweepSection};
pub use experiment::{run_experiment, ExperimentSpec, ResultRow, SweepVariable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scheme {
    /// Penalty BCD on the sub-connected hybrid architecture.
    #[serde(rename = "RSMA-SHB")]
    RsmaShb,
    /// Two-stage design.
    #[serde(rename = "RSMA-SHB-Low")]
    RsmaShbLow,
    /// One RF chain per antenna.
    #[serde(rename = "RSMA-FD")]
    RsmaFd,
    /// Penalty BCD without a common stream.
    #[serde(rename = "SDMA-SHB")]
    SdmaShb,
    /// Two-stage design with planar-wave analog beams.
    #[serde(rename = "RSMA-SHB-far")]
    RsmaShbFar,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::RsmaShb,
        Scheme::RsmaShbLow,
        Scheme::RsmaFd,
        Scheme::SdmaShb,
        Scheme::RsmaShbFar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::RsmaShb => "RSMA-SHB",
            Scheme::RsmaShbLow => "RSMA-SHB-Low",
            Scheme::RsmaFd => "RSMA-FD",
            Scheme::SdmaShb => "SDMA-SHB",
            Scheme::RsmaShbFar => "RSMA-SHB-far",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|sc| sc.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                let names: Vec<_> = Scheme::ALL.iter().map(|s| s.name()).collect();
                Error::Config(format!("unknown scheme '{s}', expected one of {}", names.join(", ")))
            })
    }
}

/// Result of one scheme on one channel realization.
#[derive(Clone, Debug)]
pub struct SchemeOutcome {
    pub scheme: Scheme,
    /// Radiated precoder `FW` (hybrid schemes) or `P` (full digital).
    pub precoder: DMatrix<Complex64>,
    pub beamfocuser: Option<HybridBeamfocuser>,
    pub allocation: RateAllocation,
    /// `c_k + R_{k,p}` of every user.
    pub per_user: Vec<f64>,
    pub report: SolverReport,
}

impl SchemeOutcome {
    pub fn maxmin(&self) -> f64 {
        self.allocation.maxmin
    }

    pub fn transmit_power(&self) -> f64 {
        self.precoder.norm_squared()
    }

    fn from_hybrid(scheme: Scheme, ch: &ChannelSet, cfg: &SystemConfig, out: HybridOutcome) -> Self {
        let model = LinkModel::equivalent(ch, cfg, &out.beamfocuser.analog);
        let per_user = per_user_rates(&model, &out.beamfocuser.digital, &cfg.delta_vec(), &out.allocation);
        Self {
            scheme,
            precoder: apply_analog(&out.beamfocuser.analog, &out.beamfocuser.digital),
            per_user,
            beamfocuser: Some(out.beamfocuser),
            allocation: out.allocation,
            report: out.report,
        }
    }
}

fn per_user_rates(model: &LinkModel, p: &DMatrix<Complex64>, delta: &[f64], alloc: &RateAllocation) -> Vec<f64> {
    (0..model.users())
        .map(|k| alloc.common[k] + model.private_rate(p, delta[k], k))
        .collect()
}

/// Runs `scheme` on one realization. `rng` drives the random initializations.
pub fn run_scheme<R: Rng + ?Sized>(scheme: Scheme, ch: &ChannelSet, cfg: &SystemConfig, rng: &mut R) -> Result<SchemeOutcome> {
    match scheme {
        Scheme::RsmaShb => run_shb(ch, cfg, StreamMode::Rsma, rng),
        Scheme::SdmaShb => run_sdma(ch, cfg, rng),
        Scheme::RsmaShbLow => {
            let out = run_twostage_with(ch, cfg, &ch.response, StreamMode::Rsma, rng)?;
            Ok(SchemeOutcome::from_hybrid(scheme, ch, cfg, out.hybrid))
        }
        Scheme::RsmaShbFar => run_far_field(ch, cfg, rng),
        Scheme::RsmaFd => run_full_digital(ch, cfg),
    }
}

fn run_shb<R: Rng + ?Sized>(ch: &ChannelSet, cfg: &SystemConfig, mode: StreamMode, rng: &mut R) -> Result<SchemeOutcome> {
    let init = initial_beamfocuser(ch, cfg, rng);
    let out = run_pbcd_mode(ch, cfg, &init, mode)?;
    let scheme = if mode == StreamMode::Rsma { Scheme::RsmaShb } else { Scheme::SdmaShb };
    Ok(SchemeOutcome::from_hybrid(scheme, ch, cfg, out))
}

/// Penalty BCD with the common column pinned to zero and `c ≡ 0`.
pub fn run_sdma<R: Rng + ?Sized>(ch: &ChannelSet, cfg: &SystemConfig, rng: &mut R) -> Result<SchemeOutcome> {
    run_shb(ch, cfg, StreamMode::Sdma, rng)
}

/// Two-stage design whose analog stage is matched to planar-wave responses.
pub fn run_far_field<R: Rng + ?Sized>(ch: &ChannelSet, cfg: &SystemConfig, rng: &mut R) -> Result<SchemeOutcome> {
    let far: Vec<DVector<Complex64>> = ch
        .geometry
        .users
        .iter()
        .map(|u| far_field_response(cfg, u.theta))
        .collect();
    let out = run_twostage_with(ch, cfg, &far, StreamMode::Rsma, rng)?;
    Ok(SchemeOutcome::from_hybrid(Scheme::RsmaShbFar, ch, cfg, out.hybrid))
}

/// Matched filters at full power.
pub fn matched_precoder(ch: &ChannelSet, p_th: f64, common_scale: f64) -> DMatrix<Complex64> {
    let mut p = matched_filters(ch, common_scale);
    let power = p.norm_squared();
    if power > 0.0 {
        p *= Complex64::from((p_th / power).sqrt());
    }
    p
}

/// SCA directly on the antenna-domain precoder.
pub fn run_full_digital(ch: &ChannelSet, cfg: &SystemConfig) -> Result<SchemeOutcome> {
    run_full_digital_mode(ch, cfg, StreamMode::Rsma)
}

pub fn run_full_digital_mode(ch: &ChannelSet, cfg: &SystemConfig, mode: StreamMode) -> Result<SchemeOutcome> {
    cfg.validate()?;
    let clock = Instant::now();
    let model = LinkModel::direct(ch, cfg);
    let delta = cfg.delta_vec();
    let prob = ScaProblem {
        model: &model,
        delta: &delta,
        mode,
        penalty: None,
        p_th: cfg.p_th,
        noise_model: cfg.solver.noise_model,
        tol: cfg.solver.tol_sca,
        max_iters: cfg.solver.max_digital_iters,
        extrapolate: cfg.solver.extrapolate,
    };
    let sca = run_sca(&prob, &matched_precoder(ch, cfg.p_th, cfg.solver.common_init_scale))?;
    let allocation = best_allocation(&model, &sca.precoder, &delta, mode.has_common());
    let mut report = SolverReport::new();
    report.outer_iters = 1;
    report.inner_iters = vec![sca.iterations];
    report.sca_iters = sca.iterations;
    report.objective_trace = vec![sca.trace];
    report.penalty_violation_trace = vec![0.0];
    report.status = if sca.converged {
        SolverStatus::Converged
    } else {
        SolverStatus::MaxIters
    };
    report.final_rate = allocation.maxmin;
    report.wall_ms = clock.elapsed().as_secs_f64() * 1e3;
    Ok(SchemeOutcome {
        scheme: Scheme::RsmaFd,
        per_user: per_user_rates(&model, &sca.precoder, &delta, &allocation),
        precoder: sca.precoder,
        beamfocuser: None,
        allocation,
        report,
    })
}
