//! Low-complexity two-stage design.
//!
//! Stage 1 fixes the analog beamfocuser: every RF chain is assigned to a user
//! and its sub-array phases are matched to that user's array response. The
//! assignment starts from a balanced random draw and is improved by swapping
//! the users of chain pairs while the minimum array gain strictly grows.
//! Stage 2 runs the SCA loop on the digital matrix over the equivalent channel
//! `F^H ĥ_k`, with no penalty.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ChannelSet, SystemConfig};
use crate::pbcd::{hybrid_allocation, matched_digital, HybridOutcome, SolverReport, SolverStatus};
use crate::rates::{HybridBeamfocuser, LinkModel};
use crate::subproblem::{run_sca, ScaProblem, StreamMode};

/// Assignment of RF chains to users: `phi[l]` serves user `phi[l]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RfAllocation {
    pub phi: Vec<usize>,
}

impl RfAllocation {
    /// `⌊L/K⌋` chains per user, the `L mod K` leftover chains to distinct users
    /// drawn without replacement, then shuffled across chains.
    pub fn balanced_random<R: Rng + ?Sized>(chains: usize, users: usize, rng: &mut R) -> Result<Self> {
        if users == 0 {
            return Err(Error::Domain("allocation needs at least one user".into()));
        }
        let base = chains / users;
        let mut phi: Vec<usize> = (0..users).flat_map(|k| std::iter::repeat(k).take(base)).collect();
        phi.extend(index::sample(rng, users, chains % users).into_iter());
        phi.shuffle(rng);
        Ok(Self { phi })
    }

    pub fn chains(&self) -> usize {
        self.phi.len()
    }

    pub fn counts(&self, users: usize) -> Vec<usize> {
        let mut counts = vec![0; users];
        for &k in &self.phi {
            counts[k] += 1;
        }
        counts
    }

    pub fn is_balanced(&self, users: usize) -> bool {
        let lo = self.chains() / users;
        let hi = self.chains().div_ceil(users);
        self.phi.iter().all(|&k| k < users) && self.counts(users).iter().all(|&c| c >= lo && c <= hi)
    }
}

/// Phases of sub-array `l` matched to `response`: `f_l = a(lM .. (l+1)M)`.
pub fn matched_analog_block(response: &DVector<Complex64>, block_len: usize, l: usize) -> DVector<Complex64> {
    response.rows(l * block_len, block_len).map(|z| z / z.norm())
}

/// Analog blocks for an allocation.
pub fn matched_analog(responses: &[DVector<Complex64>], block_len: usize, alloc: &RfAllocation) -> Vec<DVector<Complex64>> {
    alloc
        .phi
        .iter()
        .enumerate()
        .map(|(l, &k)| matched_analog_block(&responses[k], block_len, l))
        .collect()
}

/// Array gain `Σ_l |a_k(block l)^H f_l|²` of every user.
pub fn array_gains(responses: &[DVector<Complex64>], blocks: &[DVector<Complex64>]) -> Vec<f64> {
    let m = blocks.first().map_or(0, |f| f.len());
    responses
        .iter()
        .map(|a| {
            blocks
                .iter()
                .enumerate()
                .map(|(l, f)| a.rows(l * m, m).dotc(f).norm_sqr())
                .sum()
        })
        .collect()
}

/// `min_k ‖a_k^H F‖²`.
pub fn min_array_gain(responses: &[DVector<Complex64>], blocks: &[DVector<Complex64>]) -> f64 {
    array_gains(responses, blocks).into_iter().fold(f64::INFINITY, f64::min)
}

/// `table[k][l][j]`: gain user `k` collects from chain `l` when that chain is matched to user `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct GainTable {
    pub table: Vec<Vec<Vec<f64>>>,
}

impl GainTable {
    pub fn from_responses(responses: &[DVector<Complex64>], block_len: usize, chains: usize) -> Self {
        let table = responses
            .iter()
            .map(|a| {
                (0..chains)
                    .map(|l| {
                        let own = a.rows(l * block_len, block_len);
                        responses
                            .iter()
                            .map(|b| own.dotc(&matched_analog_block(b, block_len, l)).norm_sqr())
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self { table }
    }

    pub fn users(&self) -> usize {
        self.table.len()
    }

    pub fn gains(&self, phi: &[usize]) -> Vec<f64> {
        self.table
            .iter()
            .map(|per_chain| phi.iter().enumerate().map(|(l, &j)| per_chain[l][j]).sum())
            .collect()
    }

    pub fn min_gain(&self, phi: &[usize]) -> f64 {
        self.gains(phi).into_iter().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SwapResult {
    pub allocation: RfAllocation,
    /// Minimum gain of the initial allocation, then after each accepted swap.
    pub trace: Vec<f64>,
    pub swaps: usize,
}

/// First-improving swap search over chain pairs `(l, l')`, `l < l'`, in
/// lexicographic order; the scan restarts after every accepted swap.
///
/// With `accept_ties` a swap that keeps the minimum gain unchanged is also
/// taken; the run is then capped since it may cycle.
pub fn swap_optimize_table(table: &GainTable, phi0: &RfAllocation, accept_ties: bool) -> SwapResult {
    let chains = phi0.chains();
    let mut phi = phi0.phi.clone();
    let mut gains = table.gains(&phi);
    let mut current = gains.iter().copied().fold(f64::INFINITY, f64::min);
    let mut trace = vec![current];
    let cap = if accept_ties { 16 * chains * chains * table.users().max(1) } else { usize::MAX };
    let mut swaps = 0;
    while swaps < cap {
        let mut accepted = false;
        'scan: for l in 0..chains {
            for l2 in l + 1..chains {
                let (a, b) = (phi[l], phi[l2]);
                if a == b {
                    continue;
                }
                let candidate: Vec<f64> = table
                    .table
                    .iter()
                    .zip(&gains)
                    .map(|(t, g)| g - t[l][a] - t[l2][b] + t[l][b] + t[l2][a])
                    .collect();
                let value = candidate.iter().copied().fold(f64::INFINITY, f64::min);
                if value > current || (accept_ties && value == current) {
                    phi.swap(l, l2);
                    // Recompute from scratch so rounding never accumulates.
                    gains = table.gains(&phi);
                    current = gains.iter().copied().fold(f64::INFINITY, f64::min);
                    trace.push(current);
                    swaps += 1;
                    accepted = true;
                    break 'scan;
                }
            }
        }
        if !accepted {
            break;
        }
    }
    SwapResult {
        allocation: RfAllocation { phi },
        trace,
        swaps,
    }
}

/// Swap search on array responses; returns the final allocation and its matched blocks.
pub fn swap_optimize(
    responses: &[DVector<Complex64>],
    block_len: usize,
    phi0: &RfAllocation,
    accept_ties: bool,
) -> (SwapResult, Vec<DVector<Complex64>>) {
    let table = GainTable::from_responses(responses, block_len, phi0.chains());
    let result = swap_optimize_table(&table, phi0, accept_ties);
    let blocks = matched_analog(responses, block_len, &result.allocation);
    (result, blocks)
}

#[derive(Clone, Debug)]
pub struct TwoStageOutcome {
    pub hybrid: HybridOutcome,
    pub rf_allocation: RfAllocation,
    pub swap_trace: Vec<f64>,
}

/// Runs both stages with the near-field array responses.
pub fn run_twostage<R: Rng + ?Sized>(ch: &ChannelSet, cfg: &SystemConfig, rng: &mut R) -> Result<TwoStageOutcome> {
    run_twostage_with(ch, cfg, &ch.response, StreamMode::Rsma, rng)
}

/// Two-stage design with stage 1 driven by `responses`; stage 2 always uses
/// the estimated channels in `ch`.
pub fn run_twostage_with<R: Rng + ?Sized>(
    ch: &ChannelSet,
    cfg: &SystemConfig,
    responses: &[DVector<Complex64>],
    mode: StreamMode,
    rng: &mut R,
) -> Result<TwoStageOutcome> {
    cfg.validate()?;
    if responses.len() != ch.users() || responses.iter().any(|a| a.len() != cfg.antennas) {
        return Err(Error::Domain("one length-N response per user required".into()));
    }
    let clock = Instant::now();
    let m = cfg.block_len();
    let phi0 = RfAllocation::balanced_random(cfg.rf_chains, ch.users(), rng)?;
    let (swap, analog) = swap_optimize(responses, m, &phi0, cfg.solver.swap_accept_ties);
    let start = matched_digital(ch, cfg, &analog);
    let digital = digital_stage(ch, cfg, &analog, &start, mode)?;
    let mut report = SolverReport::new();
    report.outer_iters = 1;
    report.inner_iters = vec![digital.iterations];
    report.sca_iters = digital.iterations;
    report.objective_trace = vec![digital.trace];
    report.penalty_violation_trace = vec![0.0];
    report.status = if digital.converged {
        SolverStatus::Converged
    } else {
        SolverStatus::MaxIters
    };
    let beamfocuser = HybridBeamfocuser {
        analog,
        digital: digital.precoder,
    };
    let allocation = hybrid_allocation(ch, cfg, &beamfocuser, mode);
    report.final_rate = allocation.maxmin;
    report.wall_ms = clock.elapsed().as_secs_f64() * 1e3;
    Ok(TwoStageOutcome {
        hybrid: HybridOutcome {
            beamfocuser,
            allocation,
            report,
        },
        rf_allocation: swap.allocation,
        swap_trace: swap.trace,
    })
}

/// SCA on `W` over the equivalent channel of a fixed analog stage.
pub fn digital_stage(
    ch: &ChannelSet,
    cfg: &SystemConfig,
    analog: &[DVector<Complex64>],
    start: &DMatrix<Complex64>,
    mode: StreamMode,
) -> Result<crate::subproblem::ScaOutcome> {
    let model = LinkModel::equivalent(ch, cfg, analog);
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
    run_sca(&prob, start)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{far_field_response, sample_channels, trial_rng};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn balanced_random_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (l, k) in [(8, 3), (4, 4), (2, 3), (16, 5), (7, 1)] {
            for _ in 0..20 {
                let a = RfAllocation::balanced_random(l, k, &mut rng).unwrap();
                assert_eq!(a.chains(), l);
                assert!(a.is_balanced(k), "{l} {k} {:?}", a.phi);
            }
        }
    }

    #[test]
    fn matched_block_gain_is_m() {
        let cfg = SystemConfig::with_dims(32, 4, 2);
        let mut rng = trial_rng(3, 0);
        let ch = sample_channels(&cfg, &mut rng).unwrap();
        for k in 0..2 {
            for l in 0..4 {
                let f = matched_analog_block(&ch.response[k], 8, l);
                assert!(f.iter().all(|z| (z.norm() - 1.0).abs() < 1e-12));
                let g = ch.response[k].rows(l * 8, 8).dotc(&f).norm();
                assert!((g - 8.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_element_blocks() {
        let a = DVector::from_vec(vec![Complex64::from_polar(1.0, 0.3), Complex64::from_polar(1.0, -1.1)]);
        let f = matched_analog_block(&a, 1, 1);
        assert_eq!(f.len(), 1);
        assert!((f[0].norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn matched_phase_beats_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let a = Complex64::from_polar(1.0, rng.gen::<f64>() * 2.0 * PI);
            let f = matched_analog_block(&DVector::from_element(1, a), 1, 0)[0];
            let value = (a.conj() * f).re;
            let grid = (0..3600)
                .map(|i| (a.conj() * Complex64::from_polar(1.0, i as f64 * 2.0 * PI / 3600.0)).re)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(value >= grid - 1e-6);
        }
    }

    #[test]
    fn single_user_gains() {
        let cfg = SystemConfig::with_dims(16, 4, 1);
        let mut rng = trial_rng(4, 0);
        let ch = sample_channels(&cfg, &mut rng).unwrap();
        let alloc = RfAllocation { phi: vec![0; 4] };
        let blocks = matched_analog(&ch.response, 4, &alloc);
        assert!((min_array_gain(&ch.response, &blocks) - 64.0).abs() < 1e-9);

        let one = SystemConfig::with_dims(16, 1, 1);
        let blocks = matched_analog(&ch.response, 16, &RfAllocation { phi: vec![0] });
        assert!((min_array_gain(&ch.response, &blocks) - 256.0).abs() < 1e-9);
        assert_eq!(one.block_len(), 16);
    }

    #[test]
    fn zero_phase_is_below_matched() {
        let cfg = SystemConfig::with_dims(16, 4, 2);
        let mut rng = trial_rng(6, 0);
        let ch = sample_channels(&cfg, &mut rng).unwrap();
        let flat: Vec<DVector<Complex64>> = (0..4).map(|_| DVector::from_element(4, Complex64::new(1.0, 0.0))).collect();
        for k in 0..2 {
            let own = matched_analog(&ch.response, 4, &RfAllocation { phi: vec![k; 4] });
            assert!(array_gains(&ch.response, &flat)[k] < array_gains(&ch.response, &own)[k]);
        }
    }

    fn abstract_table() -> GainTable {
        // User k gains 10 from chain k matched to it, 1 from the other chain matched to it.
        let mut table = vec![vec![vec![0.0; 2]; 2]; 2];
        for k in 0..2 {
            for l in 0..2 {
                table[k][l][k] = if l == k { 10.0 } else { 1.0 };
            }
        }
        GainTable { table }
    }

    #[test]
    fn constructed_swap() {
        let table = abstract_table();
        let result = swap_optimize_table(&table, &RfAllocation { phi: vec![1, 0] }, false);
        assert_eq!(result.swaps, 1);
        assert_eq!(result.trace, vec![1.0, 10.0]);
        assert_eq!(result.allocation.phi, vec![0, 1]);
    }

    #[test]
    fn optimal_allocation_is_fixed_point() {
        let table = abstract_table();
        let start = RfAllocation { phi: vec![0, 1] };
        let result = swap_optimize_table(&table, &start, false);
        assert_eq!(result.swaps, 0);
        assert_eq!(result.allocation, start);
    }

    #[test]
    fn table_matches_direct_gains() {
        let cfg = SystemConfig::with_dims(16, 4, 3);
        let mut rng = trial_rng(7, 0);
        let ch = sample_channels(&cfg, &mut rng).unwrap();
        let table = GainTable::from_responses(&ch.response, 4, 4);
        for _ in 0..10 {
            let alloc = RfAllocation::balanced_random(4, 3, &mut rng).unwrap();
            let blocks = matched_analog(&ch.response, 4, &alloc);
            let direct = array_gains(&ch.response, &blocks);
            for (a, b) in direct.iter().zip(table.gains(&alloc.phi)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn swaps_strictly_increase_and_stay_balanced() {
        let cfg = SystemConfig::with_dims(16, 4, 2);
        for seed in 0..20 {
            let mut rng = trial_rng(seed, 0);
            let ch = sample_channels(&cfg, &mut rng).unwrap();
            let phi0 = RfAllocation::balanced_random(4, 2, &mut rng).unwrap();
            let (res, blocks) = swap_optimize(&ch.response, 4, &phi0, false);
            assert!(res.trace.windows(2).all(|w| w[1] > w[0]));
            assert!(res.allocation.is_balanced(2));
            assert!((min_array_gain(&ch.response, &blocks) - res.trace.last().unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn two_stage_run_is_feasible_and_monotone() {
        let cfg = SystemConfig::with_dims(32, 4, 3);
        let mut rng = trial_rng(8, 0);
        let ch = sample_channels(&cfg, &mut rng).unwrap();
        let out = run_twostage(&ch, &cfg, &mut rng).unwrap();
        let hb = &out.hybrid.beamfocuser;
        let explicit = crate::rates::analog_matrix(&hb.analog) * &hb.digital;
        assert!((explicit.norm_squared() - hb.transmit_power()).abs() < 1e-12);
        assert!(hb.transmit_power() <= cfg.p_th + 1e-7);
        assert!(out.hybrid.report.worst_monotonicity_violation() <= 1e-7);
        assert!(out.hybrid.allocation.maxmin > 0.0);
        assert!(out.rf_allocation.is_balanced(3));
    }

    #[test]
    fn far_field_responses_are_accepted() {
        let cfg = SystemConfig::with_dims(16, 4, 2);
        let mut rng = trial_rng(9, 0);
        let ch = sample_channels(&cfg, &mut rng).unwrap();
        let far: Vec<_> = ch.geometry.users.iter().map(|u| far_field_response(&cfg, u.theta)).collect();
        let out = run_twostage_with(&ch, &cfg, &far, StreamMode::Rsma, &mut rng).unwrap();
        assert!(out.hybrid.allocation.maxmin > 0.0);
        let short = vec![DVector::zeros(3); 2];
        assert!(run_twostage_with(&ch, &cfg, &short, StreamMode::Rsma, &mut rng).is_err());
    }
}
