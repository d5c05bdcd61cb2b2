//! Rate lower bounds for the common and private streams.
//!
//! The CSI error enters as worst-case Gaussian noise, giving the effective
//! noise `σ̂²_k = ε²_k Σ_i ‖p_i‖² + σ²_k`. All rates are in bits/s/Hz.
//!
//! The private-rate numerator uses the private precoder `p_k`. Its interference
//! sum runs over `i = 0..K, i ≠ k`, with the common term weighted by `Δ_k`.

use std::ops::{Deref, DerefMut};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::model::{ChannelSet, SystemConfig};

/// Unconstrained precoder `P = [p_0, p_1, …, p_K]` (`N × (K+1)`), column 0 common.
#[derive(Clone, Debug, PartialEq)]
pub struct FullPrecoder(pub DMatrix<Complex64>);

impl FullPrecoder {
    pub fn zeros(antennas: usize, users: usize) -> Self {
        Self(DMatrix::zeros(antennas, users + 1))
    }

    pub fn power(&self) -> f64 {
        self.0.norm_squared()
    }

    pub fn is_power_feasible(&self, p_th: f64, tol: f64) -> bool {
        self.power() <= p_th + tol
    }
}

impl Deref for FullPrecoder {
    type Target = DMatrix<Complex64>;
    fn deref(&self) -> &Self::Target {
        &self.0
    }
}

impl DerefMut for FullPrecoder {
    fn deref_mut(&mut self) -> &mut Self::Target {
        &mut self.0
    }
}

/// Sub-connected hybrid beamfocuser: `L` analog phase vectors and an `L × (K+1)` digital matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridBeamfocuser {
    /// `f_l`, each of length `M`.
    pub analog: Vec<DVector<Complex64>>,
    pub digital: DMatrix<Complex64>,
}

impl HybridBeamfocuser {
    pub fn rf_chains(&self) -> usize {
        self.analog.len()
    }

    pub fn block_len(&self) -> usize {
        self.analog.first().map_or(0, |f| f.len())
    }

    pub fn antennas(&self) -> usize {
        self.rf_chains() * self.block_len()
    }

    /// Largest deviation of any phase-shifter modulus from one.
    pub fn unit_modulus_error(&self) -> f64 {
        self.analog
            .iter()
            .flat_map(|f| f.iter())
            .map(|z| (z.norm() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Explicit block-diagonal analog matrix `F` (`N × L`).
    pub fn analog_matrix(&self) -> DMatrix<Complex64> {
        analog_matrix(&self.analog)
    }

    /// `F·W`, computed block by block.
    pub fn precoder(&self) -> FullPrecoder {
        FullPrecoder(apply_analog(&self.analog, &self.digital))
    }

    pub fn transmit_power(&self) -> f64 {
        self.precoder().power()
    }
}

pub fn analog_matrix(blocks: &[DVector<Complex64>]) -> DMatrix<Complex64> {
    let l = blocks.len();
    let m = blocks.first().map_or(0, |f| f.len());
    let mut f = DMatrix::zeros(l * m, l);
    for (i, block) in blocks.iter().enumerate() {
        f.view_mut((i * m, i), (m, 1)).copy_from(block);
    }
    f
}

/// Largest entry modulus of a complex matrix.
pub fn max_modulus(m: &DMatrix<Complex64>) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Computes `blkdiag(f_1, …, f_L)·W` without forming the analog matrix.
pub fn apply_analog(blocks: &[DVector<Complex64>], digital: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    let m = blocks.first().map_or(0, |f| f.len());
    let cols = digital.ncols();
    let mut out = DMatrix::zeros(blocks.len() * m, cols);
    for (l, block) in blocks.iter().enumerate() {
        for j in 0..cols {
            let w = digital[(l, j)];
            for (i, f) in block.iter().enumerate() {
                out[(l * m + i, j)] = f * w;
            }
        }
    }
    out
}

/// Computes `F^H h` for a block-diagonal `F`.
pub fn analog_adjoint(blocks: &[DVector<Complex64>], h: &DVector<Complex64>) -> DVector<Complex64> {
    let m = blocks.first().map_or(0, |f| f.len());
    DVector::from_fn(blocks.len(), |l, _| block_inner(&blocks[l], h, l * m))
}

/// `f^H h(offset..offset+M)`.
fn block_inner(f: &DVector<Complex64>, h: &DVector<Complex64>, offset: usize) -> Complex64 {
    f.iter()
        .enumerate()
        .map(|(i, fi)| fi.conj() * h[offset + i])
        .sum()
}

/// Channels seen by a linear precoder, together with the noise statistics.
///
/// For the antenna domain (`power_scale = 1`) the precoder is `P`. For the
/// equivalent channel `h̄_k = F^H ĥ_k` of a fixed analog stage the precoder is
/// `W` and the radiated power is `M‖W‖²`, so `power_scale = M`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinkModel {
    pub channels: Vec<DVector<Complex64>>,
    pub eps2: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub power_scale: f64,
}

impl LinkModel {
    pub fn direct(ch: &ChannelSet, cfg: &SystemConfig) -> Self {
        Self {
            channels: ch.h_hat.clone(),
            eps2: ch.eps2(),
            sigma2: cfg.sigma2_vec(),
            power_scale: 1.0,
        }
    }

    /// Equivalent low-dimensional channels behind a unit-modulus analog stage.
    pub fn equivalent(ch: &ChannelSet, cfg: &SystemConfig, analog: &[DVector<Complex64>]) -> Self {
        let m = analog.first().map_or(0, |f| f.len());
        Self {
            channels: ch.h_hat.iter().map(|h| analog_adjoint(analog, h)).collect(),
            eps2: ch.eps2(),
            sigma2: cfg.sigma2_vec(),
            power_scale: m as f64,
        }
    }

    pub fn users(&self) -> usize {
        self.channels.len()
    }

    pub fn dim(&self) -> usize {
        self.channels.first().map_or(0, |h| h.len())
    }

    /// Radiated power of a precoder in this domain.
    pub fn radiated_power(&self, p: &DMatrix<Complex64>) -> f64 {
        self.power_scale * p.norm_squared()
    }

    pub fn noise(&self, p: &DMatrix<Complex64>, k: usize) -> f64 {
        self.eps2[k] * self.radiated_power(p) + self.sigma2[k]
    }

    /// `ĥ_k^H p_j` for every column `j`.
    pub fn gains(&self, p: &DMatrix<Complex64>, k: usize) -> Vec<Complex64> {
        let h = &self.channels[k];
        (0..p.ncols()).map(|j| h.dotc(&p.column(j))).collect()
    }

    pub fn common_rate(&self, p: &DMatrix<Complex64>, k: usize) -> f64 {
        let noise = self.noise(p, k);
        common_rate_from_gains(&self.gains(p, k), noise)
    }

    pub fn private_rate(&self, p: &DMatrix<Complex64>, delta_k: f64, k: usize) -> f64 {
        let noise = self.noise(p, k);
        private_rate_from_gains(&self.gains(p, k), delta_k, k, noise)
    }
}

fn common_rate_from_gains(g: &[Complex64], noise: f64) -> f64 {
    let signal = g[0].norm_sqr();
    let interference: f64 = g[1..].iter().map(|z| z.norm_sqr()).sum();
    (signal / (interference + noise)).ln_1p() / std::f64::consts::LN_2
}

/// `k` is the 0-based user index; the private column is `k + 1`.
fn private_rate_from_gains(g: &[Complex64], delta_k: f64, k: usize, noise: f64) -> f64 {
    let own = k + 1;
    let signal = g[own].norm_sqr();
    let mut interference = delta_k * g[0].norm_sqr();
    for (j, z) in g.iter().enumerate().skip(1) {
        if j != own {
            interference += z.norm_sqr();
        }
    }
    (signal / (interference + noise)).ln_1p() / std::f64::consts::LN_2
}

/// `ε²·‖P‖²_F + σ²`.
pub fn effective_noise(p: &FullPrecoder, eps: f64, sigma2: f64) -> f64 {
    eps * eps * p.power() + sigma2
}

/// Common-stream rate bound of user `k` (0-based).
pub fn common_rate_lb(model: &LinkModel, p: &DMatrix<Complex64>, k: usize) -> f64 {
    model.common_rate(p, k)
}

/// Private-stream rate bound of user `k` (0-based) with SIC residual `delta_k`.
pub fn private_rate_lb(model: &LinkModel, p: &DMatrix<Complex64>, delta_k: f64, k: usize) -> f64 {
    model.private_rate(p, delta_k, k)
}

/// Common-rate portions `c` and the max-min value `R̂`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateAllocation {
    pub common: Vec<f64>,
    pub maxmin: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaxMinReport {
    pub value: f64,
    /// `c_k + R̂_{k,p}` per user.
    pub per_user: Vec<f64>,
    pub common_rates: Vec<f64>,
    pub private_rates: Vec<f64>,
    /// `Σc − min_k R̂_{k,c}`; positive means the split overshoots the common rate.
    pub common_excess: f64,
    pub negative_share: bool,
    pub feasible: bool,
}

/// Minimum per-user total rate for a given common-rate split.
pub fn maxmin_objective(
    model: &LinkModel,
    p: &DMatrix<Complex64>,
    common: &[f64],
    delta: &[f64],
    tol_feas: f64,
) -> MaxMinReport {
    let k_users = model.users();
    let common_rates: Vec<f64> = (0..k_users).map(|k| model.common_rate(p, k)).collect();
    let private_rates: Vec<f64> = (0..k_users)
        .map(|k| model.private_rate(p, delta[k], k))
        .collect();
    let per_user: Vec<f64> = (0..k_users).map(|k| common[k] + private_rates[k]).collect();
    let value = per_user.iter().copied().fold(f64::INFINITY, f64::min);
    let min_common = common_rates.iter().copied().fold(f64::INFINITY, f64::min);
    let common_excess = common.iter().sum::<f64>() - min_common;
    let negative_share = common.iter().any(|&c| c < 0.0);
    MaxMinReport {
        value,
        per_user,
        common_rates,
        private_rates,
        common_excess,
        negative_share,
        feasible: common_excess <= tol_feas && !negative_share,
    }
}

/// Splits a common rate `total` across users to maximise `min_k (c_k + private_k)`.
pub fn water_fill(total: f64, private: &[f64]) -> RateAllocation {
    let total = total.max(0.0);
    let mut sorted: Vec<f64> = private.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut level = sorted.first().copied().unwrap_or(0.0) + total;
    let mut acc = 0.0;
    for (m, &r) in sorted.iter().enumerate() {
        acc += r;
        let candidate = (total + acc) / (m + 1) as f64;
        let next = sorted.get(m + 1).copied().unwrap_or(f64::INFINITY);
        if candidate <= next {
            level = candidate;
            break;
        }
    }
    let common: Vec<f64> = private.iter().map(|&r| (level - r).max(0.0)).collect();
    RateAllocation {
        common,
        maxmin: level,
    }
}

/// Best common-rate split for a fixed precoder.
pub fn best_allocation(model: &LinkModel, p: &DMatrix<Complex64>, delta: &[f64], with_common: bool) -> RateAllocation {
    let k_users = model.users();
    let private: Vec<f64> = (0..k_users)
        .map(|k| model.private_rate(p, delta[k], k))
        .collect();
    if !with_common {
        return RateAllocation {
            common: vec![0.0; k_users],
            maxmin: private.iter().copied().fold(f64::INFINITY, f64::min),
        };
    }
    let min_common = (0..k_users)
        .map(|k| model.common_rate(p, k))
        .fold(f64::INFINITY, f64::min);
    water_fill(min_common, &private)
}

/// Common and private rate bounds of user `k` for a hybrid beamfocuser,
/// evaluated on the equivalent channel `F^H ĥ_k`.
pub fn hybrid_rates(ch: &ChannelSet, cfg: &SystemConfig, hb: &HybridBeamfocuser, k: usize) -> (f64, f64) {
    let model = LinkModel::equivalent(ch, cfg, &hb.analog);
    (
        model.common_rate(&hb.digital, k),
        model.private_rate(&hb.digital, cfg.delta_of(k), k),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{sample_channels, trial_rng};
    use rand::Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn unit_model(h: Vec<DVector<Complex64>>, sigma2: f64) -> LinkModel {
        let k = h.len();
        LinkModel {
            channels: h,
            eps2: vec![0.0; k],
            sigma2: vec![sigma2; k],
            power_scale: 1.0,
        }
    }

    #[test]
    fn effective_noise_examples() {
        let mut p = FullPrecoder::zeros(2, 1);
        assert_eq!(effective_noise(&p, 0.0, 1.5), 1.5);
        assert_eq!(effective_noise(&p, 0.7, 1.5), 1.5);
        p[(0, 0)] = c(1.0, 0.0);
        p[(1, 1)] = c(1.0, 0.0);
        assert!((effective_noise(&p, 0.5f64.sqrt(), 1.0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn common_rate_unit_plugin() {
        let model = unit_model(vec![DVector::from_vec(vec![c(1.0, 0.0)])], 1.0);
        let p = DMatrix::from_row_slice(1, 2, &[c(1.0, 0.0), c(1.0, 0.0)]);
        assert!((common_rate_lb(&model, &p, 0) - 1.5f64.log2()).abs() < 1e-12);
        let p0 = DMatrix::from_row_slice(1, 2, &[c(0.0, 0.0), c(1.0, 0.0)]);
        assert_eq!(common_rate_lb(&model, &p0, 0), 0.0);
    }

    #[test]
    fn private_rate_examples() {
        let model = unit_model(vec![DVector::from_vec(vec![c(1.0, 0.0)])], 1.0);
        let p = DMatrix::from_row_slice(1, 2, &[c(0.0, 0.0), c(1.0, 0.0)]);
        assert!((private_rate_lb(&model, &p, 0.0, 0) - 1.0).abs() < 1e-12);
        let p = DMatrix::from_row_slice(1, 2, &[c(2.0, 0.0), c(1.0, 0.0)]);
        let expect = (1.0f64 + 1.0 / 1.2).log2();
        assert!((private_rate_lb(&model, &p, 0.05, 0) - expect).abs() < 1e-12);
        assert!((expect - 0.87447).abs() < 1e-5);
        // Δ = 1: common stream counts as a full interferer.
        let full = (1.0f64 + 1.0 / 5.0).log2();
        assert!((private_rate_lb(&model, &p, 1.0, 0) - full).abs() < 1e-12);
    }

    /// Symbol-by-symbol re-implementation with explicit loops.
    fn oracle_rates(h: &[DVector<Complex64>], p: &DMatrix<Complex64>, eps2: f64, s2: f64, delta: f64, k: usize) -> (f64, f64) {
        let n = p.nrows();
        let cols = p.ncols();
        let dot = |j: usize| {
            let mut acc = c(0.0, 0.0);
            for i in 0..n {
                acc += h[k][i].conj() * p[(i, j)];
            }
            acc.norm_sqr()
        };
        let mut power = 0.0;
        for j in 0..cols {
            for i in 0..n {
                power += p[(i, j)].norm_sqr();
            }
        }
        let noise = eps2 * power + s2;
        let mut int_c = 0.0;
        for i in 1..cols {
            int_c += dot(i);
        }
        let mut int_p = delta * dot(0);
        for i in 1..cols {
            if i != k + 1 {
                int_p += dot(i);
            }
        }
        (
            (1.0 + dot(0) / (int_c + noise)).log2(),
            (1.0 + dot(k + 1) / (int_p + noise)).log2(),
        )
    }

    #[test]
    fn rates_match_loop_oracle() {
        let mut rng = trial_rng(11, 0);
        for _ in 0..20 {
            let h: Vec<_> = (0..2)
                .map(|_| DVector::from_fn(4, |_, _| c(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)))
                .collect();
            let p = DMatrix::from_fn(4, 3, |_, _| c(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5));
            let model = LinkModel {
                channels: h.clone(),
                eps2: vec![0.01; 2],
                sigma2: vec![0.2; 2],
                power_scale: 1.0,
            };
            for k in 0..2 {
                let (oc, op) = oracle_rates(&h, &p, 0.01, 0.2, 0.3, k);
                assert!((model.common_rate(&p, k) - oc).abs() < 1e-12);
                assert!((model.private_rate(&p, 0.3, k) - op).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn maxmin_single_user_without_common_share() {
        let cfg = SystemConfig::with_dims(8, 2, 1);
        let ch = sample_channels(&cfg, &mut trial_rng(1, 1)).unwrap();
        let model = LinkModel::direct(&ch, &cfg);
        let p = DMatrix::from_fn(8, 2, |i, j| c((i + j) as f64 * 0.01, 0.002));
        let rep = maxmin_objective(&model, &p, &[0.0], &[0.05], 1e-9);
        assert!((rep.value - model.private_rate(&p, 0.05, 0)).abs() < 1e-15);
        assert!(rep.feasible);
        let rep = maxmin_objective(&model, &p, &[-0.1], &[0.05], 1e-9);
        assert!(!rep.feasible);
    }

    #[test]
    fn water_fill_levels() {
        let a = water_fill(1.0, &[1.0, 3.0]);
        assert!((a.maxmin - 2.0).abs() < 1e-12);
        assert!((a.common[0] - 1.0).abs() < 1e-12 && a.common[1] == 0.0);
        let a = water_fill(4.0, &[1.0, 3.0]);
        assert!((a.maxmin - 4.0).abs() < 1e-12);
        assert!((a.common.iter().sum::<f64>() - 4.0).abs() < 1e-12);
        let a = water_fill(0.0, &[2.0, 1.0]);
        assert_eq!(a.maxmin, 1.0);
    }

    #[test]
    fn hybrid_rates_match_materialized_precoder() {
        let cfg = SystemConfig::with_dims(16, 4, 3);
        let ch = sample_channels(&cfg, &mut trial_rng(5, 5)).unwrap();
        let mut rng = trial_rng(5, 6);
        let analog: Vec<_> = (0..4)
            .map(|_| DVector::from_fn(4, |_, _| Complex64::from_polar(1.0, rng.gen::<f64>() * 6.3)))
            .collect();
        let digital = DMatrix::from_fn(4, 4, |_, _| c(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5) * 0.05);
        let hb = HybridBeamfocuser { analog, digital };
        let direct = LinkModel::direct(&ch, &cfg);
        // Oracle: materialize blkdiag explicitly and multiply.
        let p = hb.analog_matrix() * &hb.digital;
        for k in 0..3 {
            let (rc, rp) = hybrid_rates(&ch, &cfg, &hb, k);
            assert!((rc - direct.common_rate(&p, k)).abs() < 1e-10);
            assert!((rp - direct.private_rate(&p, cfg.delta_of(k), k)).abs() < 1e-10);
        }
        assert!((hb.transmit_power() - 4.0 * hb.digital.norm_squared()).abs() < 1e-12);
    }

    #[test]
    fn identity_analog_matches_full_digital() {
        let cfg = SystemConfig::with_dims(8, 8, 2);
        let ch = sample_channels(&cfg, &mut trial_rng(2, 0)).unwrap();
        let analog: Vec<_> = (0..8).map(|_| DVector::from_element(1, c(1.0, 0.0))).collect();
        let digital = DMatrix::from_fn(8, 3, |i, j| c(0.01 * i as f64, 0.02 * j as f64));
        let hb = HybridBeamfocuser { analog, digital: digital.clone() };
        let direct = LinkModel::direct(&ch, &cfg);
        for k in 0..2 {
            let (rc, rp) = hybrid_rates(&ch, &cfg, &hb, k);
            assert!((rc - direct.common_rate(&digital, k)).abs() < 1e-12);
            assert!((rp - direct.private_rate(&digital, cfg.delta_of(k), k)).abs() < 1e-12);
        }
    }
}
