//! Quick self-checks behind `nfrsma verify`. Scaled-down versions of the
//! property suites; each returns a named pass/fail with a short detail line.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{run_scheme, Scheme};
use crate::model::{sample_channels, trial_rng, NoiseModel, SystemConfig};
use crate::pbcd::{initial_beamfocuser, run_pbcd, update_analog, update_digital};
use crate::rates::{analog_matrix, max_modulus, LinkModel};
use crate::subproblem::{solve_inner, verify_kkt, ConvexInstance, StreamMode, WarmStart};
use crate::surrogate::{build_surrogate, check_gradient_consistency, StreamKind};
use crate::twostage::{swap_optimize_table, GainTable, RfAllocation};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            detail,
        }
    }
}

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn random_model(rng: &mut ChaCha8Rng, n: usize, k: usize) -> LinkModel {
    LinkModel {
        channels: (0..k)
            .map(|_| DVector::from_fn(n, |_, _| c(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)))
            .collect(),
        eps2: (0..k).map(|_| 0.05 * rng.gen::<f64>()).collect(),
        sigma2: vec![0.1; k],
        power_scale: 1.0,
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<Complex64> {
    DMatrix::from_fn(rows, cols, |_, _| c(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
}

fn random_blocks(rng: &mut ChaCha8Rng, l: usize, m: usize) -> Vec<DVector<Complex64>> {
    (0..l)
        .map(|_| DVector::from_fn(m, |_, _| Complex64::from_polar(1.0, rng.gen_range(-3.2..3.2))))
        .collect()
}

pub fn check_minorization(pairs: usize) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut worst_gap, mut worst_tight) = (f64::NEG_INFINITY, 0.0f64);
    for _ in 0..pairs {
        let model = random_model(&mut rng, 8, 2);
        let p_tilde = random_matrix(&mut rng, 8, 3);
        let p = random_matrix(&mut rng, 8, 3);
        let delta = rng.gen::<f64>();
        for k in 0..2 {
            for kind in [StreamKind::Common, StreamKind::Private] {
                let s = match build_surrogate(&model, &p_tilde, delta, k, kind) {
                    Ok(s) => s,
                    Err(e) => return CheckResult::new("surrogate minorization", false, e.to_string()),
                };
                let mode = NoiseModel::Frozen;
                worst_gap = worst_gap.max(s.value(&p, mode) - s.target_rate(&model, &p, mode));
                worst_tight = worst_tight.max((s.value(&p_tilde, mode) - s.target_rate(&model, &p_tilde, mode)).abs());
            }
        }
    }
    CheckResult::new(
        "surrogate minorization",
        worst_gap <= 1e-9 && worst_tight <= 1e-8,
        format!("max f-R = {worst_gap:.3e}, max |f-R| at expansion = {worst_tight:.3e}"),
    )
}

pub fn check_gradients(instances: usize) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let model = random_model(&mut rng, 6, 2);
        let p = random_matrix(&mut rng, 6, 3);
        for k in 0..2 {
            for kind in [StreamKind::Common, StreamKind::Private] {
                for mode in [NoiseModel::Frozen, NoiseModel::Exact] {
                    match check_gradient_consistency(&model, &p, 0.3, k, kind, 1e-6, mode) {
                        Ok(e) => worst = worst.max(e),
                        Err(e) => return CheckResult::new("gradient consistency", false, e.to_string()),
                    }
                }
            }
        }
    }
    CheckResult::new("gradient consistency", worst <= 1e-5, format!("max relative error {worst:.3e}"))
}

pub fn check_analog_closed_form(samples: usize) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let grid: Vec<Complex64> = (0..3600)
        .map(|i| Complex64::from_polar(1.0, i as f64 * std::f64::consts::TAU / 3600.0))
        .collect();
    let one = DMatrix::from_element(1, 1, c(1.0, 0.0));
    let prev = vec![DVector::from_element(1, c(1.0, 0.0))];
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..samples {
        let psi = c(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
        let f = update_analog(&DMatrix::from_element(1, 1, psi), &one, &prev)[0][0];
        let closed = (psi.conj() * f).re;
        let best = grid.iter().map(|g| (psi.conj() * g).re).fold(f64::NEG_INFINITY, f64::max);
        worst = worst.max(best - closed);
    }
    CheckResult::new("analog closed form", worst <= 1e-6, format!("max grid excess {worst:.3e}"))
}

pub fn check_digital_least_squares(instances: usize) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (mut ortho, mut scaled) = (0.0f64, 0.0f64);
    for _ in 0..instances {
        let (l, m, k) = (4, 4, 3);
        let blocks = random_blocks(&mut rng, l, m);
        let f = analog_matrix(&blocks);
        let p = random_matrix(&mut rng, l * m, k);
        let w = update_digital(&p, &blocks);
        ortho = ortho.max(max_modulus(&(f.adjoint() * (&p - &f * &w))));
        let direct = f.adjoint() * &p / c(m as f64, 0.0);
        scaled = scaled.max(max_modulus(&(&w - direct)));
    }
    CheckResult::new(
        "digital least squares",
        ortho <= 1e-9 && scaled <= 1e-10,
        format!("max |F^H(P-FW)| = {ortho:.3e}, max |W - F^H P/M| = {scaled:.3e}"),
    )
}

pub fn check_subproblem_kkt(instances: usize) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let model = random_model(&mut rng, 6, 2);
        let mut p = random_matrix(&mut rng, 6, 3);
        p /= c(p.norm(), 0.0);
        let mode = if i % 2 == 0 { StreamMode::Rsma } else { StreamMode::Sdma };
        let inst = match ConvexInstance::new(&model, &p, &[0.2, 0.2], mode, None, 1.0, NoiseModel::Exact) {
            Ok(x) => x,
            Err(e) => return CheckResult::new("subproblem KKT", false, e.to_string()),
        };
        let sol = match solve_inner(&inst, &WarmStart { precoder: &p, common: None }) {
            Ok(x) => x,
            Err(e) => return CheckResult::new("subproblem KKT", false, e.to_string()),
        };
        let rep = verify_kkt(&inst, &sol);
        if !rep.within(1.0) {
            return CheckResult::new("subproblem KKT", false, format!("instance {i}: {rep:?}"));
        }
        worst = worst.max(rep.kkt_residual());
    }
    CheckResult::new("subproblem KKT", true, format!("max residual {worst:.3e}"))
}

pub fn check_pbcd(seeds: u64) -> CheckResult {
    let cfg = SystemConfig::with_dims(16, 4, 2);
    let (mut mono, mut viol) = (0.0f64, 0.0f64);
    for seed in 0..seeds {
        let mut rng = trial_rng(seed, 0);
        let run = sample_channels(&cfg, &mut rng).and_then(|ch| {
            let init = initial_beamfocuser(&ch, &cfg, &mut rng);
            run_pbcd(&ch, &cfg, &init)
        });
        match run {
            Ok(out) => {
                mono = mono.max(out.report.worst_monotonicity_violation());
                viol = viol.max(out.report.final_violation() / cfg.p_th);
            }
            Err(e) => return CheckResult::new("penalty BCD", false, e.to_string()),
        }
    }
    CheckResult::new(
        "penalty BCD",
        mono <= 1e-7 && viol <= 1e-6,
        format!("max trace drop {mono:.3e}, max violation/P_th {viol:.3e}"),
    )
}

pub fn check_swap(seeds: u64) -> CheckResult {
    let cfg = SystemConfig::with_dims(16, 4, 2);
    let mut swaps = 0;
    for seed in 0..seeds {
        let mut rng = trial_rng(seed, 1);
        let ch = match sample_channels(&cfg, &mut rng) {
            Ok(ch) => ch,
            Err(e) => return CheckResult::new("swap heuristic", false, e.to_string()),
        };
        let table = GainTable::from_responses(&ch.response, cfg.block_len(), cfg.rf_chains);
        let phi0 = match RfAllocation::balanced_random(cfg.rf_chains, cfg.users, &mut rng) {
            Ok(x) => x,
            Err(e) => return CheckResult::new("swap heuristic", false, e.to_string()),
        };
        let res = swap_optimize_table(&table, &phi0, false);
        if res.trace.windows(2).any(|w| w[1] <= w[0]) {
            return CheckResult::new("swap heuristic", false, format!("seed {seed}: non-increasing step"));
        }
        swaps += res.swaps;
    }
    CheckResult::new("swap heuristic", true, format!("{swaps} accepted swaps, all strictly improving"))
}

pub fn check_rsma_dominance(seeds: u64) -> CheckResult {
    let cfg = SystemConfig::with_dims(16, 4, 2);
    let mut worst = f64::INFINITY;
    for seed in 0..seeds {
        let mut rates = [0.0; 2];
        for (i, scheme) in [Scheme::RsmaShb, Scheme::SdmaShb].into_iter().enumerate() {
            let mut rng = trial_rng(seed, 2);
            let run = sample_channels(&cfg, &mut rng).and_then(|ch| run_scheme(scheme, &ch, &cfg, &mut rng));
            match run {
                Ok(out) => rates[i] = out.maxmin(),
                Err(e) => return CheckResult::new("RSMA vs SDMA", false, e.to_string()),
            }
        }
        worst = worst.min(rates[0] - rates[1]);
    }
    CheckResult::new(
        "RSMA vs SDMA",
        worst >= -1e-6,
        format!("min paired RSMA-SDMA gap {worst:.3e} bits/s/Hz"),
    )
}

/// Runs every check.
pub fn run_all() -> Vec<CheckResult> {
    vec![
        check_minorization(200),
        check_gradients(20),
        check_analog_closed_form(1000),
        check_digital_least_squares(100),
        check_subproblem_kkt(6),
        check_swap(20),
        check_pbcd(2),
        check_rsma_dominance(2),
    ]
}
