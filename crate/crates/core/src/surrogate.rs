//! Concave quadratic minorizers of the rate bounds.
//!
//! For user `k` and stream class `τ`, with gains `g_j = ĥ_k^H p̃_j` at the
//! expansion point and SIC weights `Δ_{k,j}` (`Δ_{k,0} = Δ_k` for the private
//! class, one otherwise):
//!
//! ```text
//! ũ = g_τ / (Σ_j Δ_{k,j}|g_j|² + σ̃²)        ṽ = 1 − ũ* g_τ
//! x = −(|ũ|²/(ṽ ln2)) ĥ ĥ^H                 y = (ũ*/(ṽ ln2)) ĥ^H
//! z = 1/ln2 − (|ũ|²σ̃² + 1)/(ṽ ln2) − log₂ ṽ
//! f(P) = Σ_j Δ_{k,j} p_j^H x p_j + 2Re(y p_τ) + z
//! ```
//!
//! `x` is rank one, so coefficients are stored in factored form and the
//! `N × N` matrix is only materialized on request.
//!
//! `σ̃²` is the effective noise at the expansion point. Under
//! [`NoiseModel::Exact`] the surrogate additionally subtracts
//! `ε²|ũ|²/(ṽ ln2)·(‖P‖² − ‖P̃‖²)`, which makes it a minorizer of the bound
//! with the noise still depending on `P`.

use std::f64::consts::LN_2;

use nalgebra::{DMatrix, DVector, RowDVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::model::NoiseModel;
use crate::rates::LinkModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StreamKind {
    Common,
    Private,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateCoeffs {
    /// 0-based user index.
    pub user: usize,
    pub kind: StreamKind,
    /// Channel `ĥ_k` in the precoder's domain.
    pub channel: DVector<Complex64>,
    /// Column whose gain appears in the linear term (0 common, `k+1` private).
    pub target: usize,
    /// `Δ_{k,j}` for each precoder column.
    pub weights: Vec<f64>,
    pub u: Complex64,
    pub v: f64,
    /// `|ũ|²/(ṽ ln2)`, so that `x = −quad_weight·ĥĥ^H`.
    pub quad_weight: f64,
    /// `ũ*/(ṽ ln2)`, so that `y = linear·ĥ^H`.
    pub linear: Complex64,
    /// `z`.
    pub constant: f64,
    /// `ε²|ũ|²/(ṽ ln2)`, the curvature of the noise correction in watts⁻¹.
    pub noise_curvature: f64,
    /// Radiated power at the expansion point.
    pub expansion_power: f64,
    pub power_scale: f64,
    /// `σ̃²` at the expansion point.
    pub expansion_noise: f64,
    pub expansion: DMatrix<Complex64>,
}

impl SurrogateCoeffs {
    /// Quadratic coefficient `x` as an explicit Hermitian `N × N` matrix.
    pub fn x_matrix(&self) -> DMatrix<Complex64> {
        let h = &self.channel;
        (h * h.adjoint()) * Complex64::from(-self.quad_weight)
    }

    /// Linear coefficient `y` as a row vector.
    pub fn y_row(&self) -> RowDVector<Complex64> {
        self.channel.adjoint() * self.linear
    }

    /// Quadratic form over `ĥ^H p_j` values plus the noise correction.
    fn value_from_gains(&self, gains: &[Complex64], radiated_power: f64, mode: NoiseModel) -> f64 {
        let quad: f64 = gains
            .iter()
            .zip(&self.weights)
            .map(|(g, w)| w * g.norm_sqr())
            .sum();
        let lin = 2.0 * (self.linear * gains[self.target]).re;
        let mut value = -self.quad_weight * quad + lin + self.constant;
        if mode == NoiseModel::Exact {
            value -= self.noise_curvature * (radiated_power - self.expansion_power);
        }
        value
    }

    pub fn value(&self, p: &DMatrix<Complex64>, mode: NoiseModel) -> f64 {
        let gains: Vec<Complex64> = (0..p.ncols())
            .map(|j| self.channel.dotc(&p.column(j)))
            .collect();
        self.value_from_gains(&gains, self.power_scale * p.norm_squared(), mode)
    }

    /// Wirtinger gradient `∂f/∂P*`. The real gradient with respect to
    /// `(Re P, Im P)` is `2·Re` and `2·Im` of the result.
    pub fn gradient(&self, p: &DMatrix<Complex64>, mode: NoiseModel) -> DMatrix<Complex64> {
        let h = &self.channel;
        let mut grad = DMatrix::zeros(p.nrows(), p.ncols());
        for j in 0..p.ncols() {
            let g = h.dotc(&p.column(j));
            let mut coef = Complex64::from(-self.quad_weight * self.weights[j]) * g;
            if j == self.target {
                coef += self.linear.conj();
            }
            let mut col = h * coef;
            if mode == NoiseModel::Exact {
                col -= p.column(j) * Complex64::from(self.noise_curvature * self.power_scale);
            }
            grad.set_column(j, &col);
        }
        grad
    }

    /// The rate bound this surrogate approximates, with the noise either frozen at
    /// the expansion point or recomputed from `p`.
    pub fn target_rate(&self, model: &LinkModel, p: &DMatrix<Complex64>, mode: NoiseModel) -> f64 {
        let k = self.user;
        let gains: Vec<Complex64> = (0..p.ncols())
            .map(|j| self.channel.dotc(&p.column(j)))
            .collect();
        let noise = match mode {
            NoiseModel::Frozen => self.expansion_noise,
            NoiseModel::Exact => model.noise(p, k),
        };
        let signal = gains[self.target].norm_sqr();
        let interference: f64 = gains
            .iter()
            .zip(&self.weights)
            .enumerate()
            .filter(|(j, _)| *j != self.target)
            .map(|(_, (g, w))| w * g.norm_sqr())
            .sum();
        (signal / (interference + noise)).ln_1p() / LN_2
    }
}

/// SIC weights `Δ_{k,j}` of a stream class for user `k` with `cols` precoder columns.
pub fn stream_weights(kind: StreamKind, delta_k: f64, cols: usize) -> Vec<f64> {
    let mut w = vec![1.0; cols];
    if kind == StreamKind::Private {
        w[0] = delta_k;
    }
    w
}

/// Builds the surrogate of user `k` (0-based), stream class `kind`, at expansion point `p_tilde`.
pub fn build_surrogate(
    model: &LinkModel,
    p_tilde: &DMatrix<Complex64>,
    delta_k: f64,
    k: usize,
    kind: StreamKind,
) -> Result<SurrogateCoeffs> {
    if p_tilde.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::Numeric("non-finite expansion point".into()));
    }
    let cols = p_tilde.ncols();
    let target = match kind {
        StreamKind::Common => 0,
        StreamKind::Private => k + 1,
    };
    let weights = stream_weights(kind, delta_k, cols);
    let h = &model.channels[k];
    let gains: Vec<Complex64> = (0..cols).map(|j| h.dotc(&p_tilde.column(j))).collect();
    let expansion_power = model.radiated_power(p_tilde);
    let noise = model.eps2[k] * expansion_power + model.sigma2[k];
    let interference: f64 = gains
        .iter()
        .zip(&weights)
        .enumerate()
        .filter(|(j, _)| *j != target)
        .map(|(_, (g, w))| w * g.norm_sqr())
        .sum();
    let total = interference + noise + gains[target].norm_sqr();
    let u = gains[target] / total;
    // ṽ = 1 − ũ*g_τ = (interference + noise)/total, without cancellation.
    let v = (interference + noise) / total;
    if !(v > 0.0) || !v.is_finite() {
        return Err(Error::Numeric(format!(
            "surrogate auxiliary v = {v} outside (0, 1] for user {k}"
        )));
    }
    let u2 = u.norm_sqr();
    let quad_weight = u2 / (v * LN_2);
    let linear = u.conj() / (v * LN_2);
    let constant = 1.0 / LN_2 - (u2 * noise + 1.0) / (v * LN_2) - v.log2();
    Ok(SurrogateCoeffs {
        user: k,
        kind,
        channel: h.clone(),
        target,
        weights,
        u,
        v,
        quad_weight,
        linear,
        constant,
        noise_curvature: model.eps2[k] * quad_weight,
        expansion_power,
        power_scale: model.power_scale,
        expansion_noise: noise,
        expansion: p_tilde.clone(),
    })
}

/// Surrogate value `f_{k,τ}(P)` in bits/s/Hz.
pub fn eval_surrogate(s: &SurrogateCoeffs, p: &DMatrix<Complex64>, mode: NoiseModel) -> f64 {
    s.value(p, mode)
}

/// Compares the analytic surrogate gradient with central finite differences
/// of the rate bound at the expansion point.
///
/// `rel_step` scales the step by `max(‖P̃‖_F, 1e-300)`. Returns the largest
/// `|∂f − ∂R̂| / (|∂R̂| + 1e-12)` over the probed real and imaginary coordinates.
pub fn check_gradient_consistency(
    model: &LinkModel,
    p_tilde: &DMatrix<Complex64>,
    delta_k: f64,
    k: usize,
    kind: StreamKind,
    rel_step: f64,
    mode: NoiseModel,
) -> Result<f64> {
    let s = build_surrogate(model, p_tilde, delta_k, k, kind)?;
    let grad = s.gradient(p_tilde, mode);
    let step = rel_step * p_tilde.norm().max(1e-300);
    let coords = p_tilde.len();
    // Probe every coordinate on small problems, a fixed stride otherwise.
    let stride = (coords / 64).max(1);
    let mut worst: f64 = 0.0;
    for idx in (0..coords).step_by(stride) {
        for imag in [false, true] {
            let dir = if imag {
                Complex64::new(0.0, step)
            } else {
                Complex64::new(step, 0.0)
            };
            let mut plus = p_tilde.clone();
            plus[idx] += dir;
            let mut minus = p_tilde.clone();
            minus[idx] -= dir;
            let fd = (s.target_rate(model, &plus, mode) - s.target_rate(model, &minus, mode)) / (2.0 * step);
            let analytic = if imag { 2.0 * grad[idx].im } else { 2.0 * grad[idx].re };
            worst = worst.max((analytic - fd).abs() / (fd.abs() + 1e-12));
        }
    }
    Ok(worst)
}
