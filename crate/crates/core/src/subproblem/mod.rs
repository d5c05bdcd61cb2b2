//! The convex inner step of the SCA loop and the loop itself.
//!
//! With the expansion point fixed, the step maximizes
//! `R̂ − (1/ρ)‖P − B‖²` over `(P, c, R̂)` subject to
//!
//! ```text
//! Σ_i c_i ≤ f_{k,c}(P)      c_k + f_{k,p}(P) ≥ R̂      c ≥ 0      μ‖P‖² ≤ P_th
//! ```
//!
//! where `B = FW` is the penalty target. Without a target the penalty term is
//! dropped, which gives the equivalent-channel digital problem when the link
//! model is built on `F^H ĥ_k`.
//!
//! Every surrogate depends on `P` only through `ĥ_k^H p_j` and `‖P‖²`. Writing
//! `P = QA + P⊥` with `Q` an orthonormal basis of `span{ĥ_k}`, the best `P⊥` for
//! a given norm is a multiple of the part of `B` outside that span. The problem
//! is therefore solved over `(A, t)` with `P = QA + t·B⊥`, whose size depends on
//! `K` only.

mod qcqp;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::NoiseModel;
use crate::rates::{best_allocation, LinkModel, RateAllocation};
use crate::surrogate::{build_surrogate, StreamKind, SurrogateCoeffs};

use qcqp::{IpmSettings, Qcqp, Quadratic};

/// Slack added to the common-rate constraint so that zero channels still leave an interior.
const COMMON_SLACK: f64 = 1e-9;
pub const TOL_KKT: f64 = 1e-6;

pub fn tol_feas(p_th: f64) -> f64 {
    1e-7 * p_th.max(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamMode {
    /// Common stream plus `K` private streams.
    Rsma,
    /// Private streams only; column 0 stays zero and `c ≡ 0`.
    Sdma,
}

impl StreamMode {
    pub fn has_common(self) -> bool {
        self == StreamMode::Rsma
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PenaltyTerm {
    pub target: DMatrix<Complex64>,
    pub rho: f64,
}

impl PenaltyTerm {
    pub fn value(&self, p: &DMatrix<Complex64>) -> f64 {
        (p - &self.target).norm_squared() / self.rho
    }
}

#[derive(Clone, Debug)]
pub struct ConvexInstance<'a> {
    pub model: &'a LinkModel,
    pub mode: StreamMode,
    /// Common-stream surrogates, empty under SDMA.
    pub common: Vec<SurrogateCoeffs>,
    pub private: Vec<SurrogateCoeffs>,
    pub penalty: Option<PenaltyTerm>,
    pub p_th: f64,
    pub noise_model: NoiseModel,
}

impl<'a> ConvexInstance<'a> {
    /// Builds every surrogate at `expansion`.
    pub fn new(
        model: &'a LinkModel,
        expansion: &DMatrix<Complex64>,
        delta: &[f64],
        mode: StreamMode,
        penalty: Option<PenaltyTerm>,
        p_th: f64,
        noise_model: NoiseModel,
    ) -> Result<Self> {
        let k_users = model.users();
        if expansion.ncols() != k_users + 1 || expansion.nrows() != model.dim() {
            return Err(Error::Domain(format!(
                "expansion point is {}x{}, expected {}x{}",
                expansion.nrows(),
                expansion.ncols(),
                model.dim(),
                k_users + 1
            )));
        }
        if delta.len() != k_users {
            return Err(Error::Domain("one SIC factor per user required".into()));
        }
        if let Some(pen) = &penalty {
            if pen.target.shape() != expansion.shape() || !(pen.rho > 0.0) {
                return Err(Error::Domain("penalty target shape or factor invalid".into()));
            }
        }
        let mut expansion = expansion.clone();
        if mode == StreamMode::Sdma {
            expansion.column_mut(0).fill(Complex64::new(0.0, 0.0));
        }
        let common = if mode.has_common() {
            (0..k_users)
                .map(|k| build_surrogate(model, &expansion, delta[k], k, StreamKind::Common))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let private = (0..k_users)
            .map(|k| {
                let d = if mode.has_common() { delta[k] } else { 0.0 };
                build_surrogate(model, &expansion, d, k, StreamKind::Private)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model,
            mode,
            common,
            private,
            penalty,
            p_th,
            noise_model,
        })
    }

    pub fn users(&self) -> usize {
        self.private.len()
    }

    fn active_columns(&self) -> Vec<usize> {
        let first = if self.mode.has_common() { 0 } else { 1 };
        (first..=self.users()).collect()
    }

    /// Objective `R̂ − (1/ρ)‖P − B‖²`.
    pub fn objective(&self, p: &DMatrix<Complex64>, maxmin: f64) -> f64 {
        maxmin - self.penalty.as_ref().map_or(0.0, |pen| pen.value(p))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Multipliers {
    pub common: Vec<f64>,
    pub private: Vec<f64>,
    pub nonneg: Vec<f64>,
    /// Multiplier of the normalized budget `(μ‖P‖² − P_th)/P_th ≤ 0`.
    pub power: f64,
}

#[derive(Clone, Debug)]
pub struct SubproblemSolution {
    pub precoder: DMatrix<Complex64>,
    pub common: Vec<f64>,
    pub maxmin: f64,
    pub objective: f64,
    pub multipliers: Multipliers,
    pub kkt_residual: f64,
    pub feasibility_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct WarmStart<'a> {
    pub precoder: &'a DMatrix<Complex64>,
    pub common: Option<&'a [f64]>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    /// Largest constraint violation (rates in bits/s/Hz, power in watts).
    pub feasibility: f64,
    pub nonneg_violation: f64,
    pub complementarity: f64,
    /// Relative norm of the Lagrangian gradient.
    pub stationarity: f64,
}

impl KktReport {
    pub fn kkt_residual(&self) -> f64 {
        self.stationarity.max(self.complementarity)
    }

    pub fn within(&self, p_th: f64) -> bool {
        self.feasibility <= tol_feas(p_th) && self.nonneg_violation == 0.0 && self.kkt_residual() <= TOL_KKT
    }
}

/// Coordinates of the reduced problem.
struct Reduced {
    basis: DMatrix<Complex64>,
    active: Vec<usize>,
    scale: f64,
    /// `B⊥` restricted to active columns, if not negligible.
    perp: Option<DMatrix<Complex64>>,
    /// `‖B⊥‖²/s²`.
    perp_norm2: f64,
    /// `Q^H B / s` on active columns.
    target_coords: DMatrix<Complex64>,
    /// `s·Q^H ĥ_k`.
    phi: Vec<DVector<Complex64>>,
    idx_t: Option<usize>,
    idx_c: Option<usize>,
    idx_r: usize,
    n: usize,
}

/// Orthonormal basis of the span of `vectors` by twice-applied Gram–Schmidt.
fn orthonormal_basis(vectors: &[DVector<Complex64>], dim: usize) -> DMatrix<Complex64> {
    let scale = vectors.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let mut cols: Vec<DVector<Complex64>> = Vec::new();
    if scale == 0.0 {
        return DMatrix::zeros(dim, 0);
    }
    for v in vectors {
        let mut w = v.clone();
        for _ in 0..2 {
            for q in &cols {
                let proj = q.dotc(&w);
                w.axpy(-proj, q, Complex64::new(1.0, 0.0));
            }
        }
        let norm = w.norm();
        if norm > 1e-10 * scale {
            cols.push(w / Complex64::from(norm));
        }
    }
    if cols.is_empty() {
        DMatrix::zeros(dim, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

impl Reduced {
    fn new(inst: &ConvexInstance) -> Self {
        let dim = inst.model.dim();
        let basis = orthonormal_basis(&inst.model.channels, dim);
        let r = basis.ncols();
        let active = inst.active_columns();
        let scale = (inst.p_th / inst.model.power_scale).sqrt();
        let k_users = inst.users();
        let phi = inst
            .private
            .iter()
            .map(|s| basis.adjoint() * &s.channel * Complex64::from(scale))
            .collect();
        let mut target_coords = DMatrix::zeros(r, active.len());
        let mut perp = None;
        let mut perp_norm2 = 0.0;
        if let Some(pen) = &inst.penalty {
            let b = pen.target.select_columns(&active);
            let coords = basis.adjoint() * &b;
            let rest = &b - &basis * &coords;
            target_coords = coords / Complex64::from(scale);
            let rest_norm2 = rest.norm_squared();
            if rest_norm2 > 1e-24 * b.norm_squared().max(1e-300) && rest_norm2 > 0.0 {
                perp_norm2 = rest_norm2 / (scale * scale);
                perp = Some(rest);
            }
        }
        let n_a = 2 * r * active.len();
        let mut n = n_a;
        let idx_t = perp.as_ref().map(|_| {
            n += 1;
            n - 1
        });
        let idx_c = if inst.mode.has_common() {
            n += k_users;
            Some(n - k_users)
        } else {
            None
        };
        let idx_r = n;
        n += 1;
        Self {
            basis,
            active,
            scale,
            perp,
            perp_norm2,
            target_coords,
            phi,
            idx_t,
            idx_c,
            idx_r,
            n,
        }
    }

    fn rank(&self) -> usize {
        self.basis.ncols()
    }

    fn a_index(&self, jpos: usize, i: usize) -> usize {
        2 * (jpos * self.rank() + i)
    }

    fn n_a(&self) -> usize {
        2 * self.rank() * self.active.len()
    }

    /// Real rows giving `Re` and `Im` of `φ_k^H a'_j`.
    fn gain_rows(&self, k: usize, jpos: usize) -> (DVector<f64>, DVector<f64>) {
        let mut u = DVector::zeros(self.n);
        let mut v = DVector::zeros(self.n);
        for (i, p) in self.phi[k].iter().enumerate() {
            let idx = self.a_index(jpos, i);
            u[idx] = p.re;
            u[idx + 1] = p.im;
            v[idx] = -p.im;
            v[idx + 1] = p.re;
        }
        (u, v)
    }

    /// Adds `weight·(‖a'‖² + t²β'²)`, i.e. `weight·μ‖P‖²/P_th`.
    fn add_power(&self, q: &mut Quadratic, weight: f64) {
        for i in 0..self.n_a() {
            q.add_diag(i, 2.0 * weight);
        }
        if let Some(t) = self.idx_t {
            q.add_diag(t, 2.0 * weight * self.perp_norm2);
        }
    }

    /// `−f(x)` for a surrogate.
    fn negated_surrogate(&self, s: &SurrogateCoeffs, p_th: f64, mode: NoiseModel) -> Quadratic {
        let mut q = Quadratic::zero(self.n);
        for (jpos, &j) in self.active.iter().enumerate() {
            let w = s.quad_weight * s.weights[j];
            if w == 0.0 {
                continue;
            }
            let (u, v) = self.gain_rows(s.user, jpos);
            q.add_square(&u, w);
            q.add_square(&v, w);
        }
        if let Some(jpos) = self.active.iter().position(|&j| j == s.target) {
            let (u, v) = self.gain_rows(s.user, jpos);
            q.grad.axpy(-2.0 * s.linear.re, &u, 1.0);
            q.grad.axpy(2.0 * s.linear.im, &v, 1.0);
        }
        q.constant = -s.constant;
        if mode == NoiseModel::Exact && s.noise_curvature > 0.0 {
            self.add_power(&mut q, s.noise_curvature * p_th);
            q.constant -= s.noise_curvature * s.expansion_power;
        }
        q
    }

    fn build(&self, inst: &ConvexInstance) -> Qcqp {
        let k_users = inst.users();
        let mut objective = Quadratic::zero(self.n);
        objective.grad[self.idx_r] = -1.0;
        if let Some(pen) = &inst.penalty {
            let w = self.scale * self.scale / pen.rho;
            self.add_power(&mut objective, w);
            for jpos in 0..self.active.len() {
                for i in 0..self.rank() {
                    let b = self.target_coords[(i, jpos)];
                    let idx = self.a_index(jpos, i);
                    objective.grad[idx] -= 2.0 * w * b.re;
                    objective.grad[idx + 1] -= 2.0 * w * b.im;
                }
            }
            if let Some(t) = self.idx_t {
                objective.grad[t] -= 2.0 * w * self.perp_norm2;
            }
            objective.constant = w * (self.target_coords.norm_squared() + self.perp_norm2);
        }

        let mut constraints = Vec::new();
        if let Some(c0) = self.idx_c {
            for s in &inst.common {
                let mut q = self.negated_surrogate(s, inst.p_th, inst.noise_model);
                for i in 0..k_users {
                    q.grad[c0 + i] += 1.0;
                }
                q.constant -= COMMON_SLACK;
                constraints.push(q);
            }
        }
        for (k, s) in inst.private.iter().enumerate() {
            let mut q = self.negated_surrogate(s, inst.p_th, inst.noise_model);
            q.grad[self.idx_r] += 1.0;
            if let Some(c0) = self.idx_c {
                q.grad[c0 + k] -= 1.0;
            }
            constraints.push(q);
        }
        if let Some(c0) = self.idx_c {
            for k in 0..k_users {
                let mut q = Quadratic::zero(self.n);
                q.grad[c0 + k] = -1.0;
                constraints.push(q);
            }
        }
        let mut power = Quadratic::zero(self.n);
        self.add_power(&mut power, 1.0);
        power.constant = -1.0;
        constraints.push(power);
        Qcqp {
            objective,
            constraints,
        }
    }

    /// Reduced coordinates of `(P, c, R̂)`; `P` is projected onto the reduced set.
    fn encode(&self, p: &DMatrix<Complex64>, common: &[f64], maxmin: f64) -> DVector<f64> {
        let mut x = DVector::zeros(self.n);
        let pa = p.select_columns(&self.active);
        let coords = self.basis.adjoint() * &pa / Complex64::from(self.scale);
        for jpos in 0..self.active.len() {
            for i in 0..self.rank() {
                let idx = self.a_index(jpos, i);
                x[idx] = coords[(i, jpos)].re;
                x[idx + 1] = coords[(i, jpos)].im;
            }
        }
        if let (Some(t), Some(perp)) = (self.idx_t, &self.perp) {
            let inner: Complex64 = perp.iter().zip(pa.iter()).map(|(b, q)| b.conj() * q).sum();
            x[t] = (inner.re / perp.norm_squared()).clamp(0.0, 1.0);
        }
        if let Some(c0) = self.idx_c {
            for (i, &c) in common.iter().enumerate() {
                x[c0 + i] = c;
            }
        }
        x[self.idx_r] = maxmin;
        x
    }

    fn decode_precoder(&self, x: &DVector<f64>, dim: usize, cols: usize) -> DMatrix<Complex64> {
        let r = self.rank();
        let mut p = DMatrix::zeros(dim, cols);
        for (jpos, &j) in self.active.iter().enumerate() {
            let coords = DVector::from_fn(r, |i, _| {
                let idx = self.a_index(jpos, i);
                Complex64::new(x[idx], x[idx + 1]) * self.scale
            });
            let mut col = &self.basis * coords;
            if let (Some(t), Some(perp)) = (self.idx_t, &self.perp) {
                col += perp.column(jpos) * Complex64::from(x[t]);
            }
            p.set_column(j, &col);
        }
        p
    }

    /// Strictly feasible start near the warm point.
    fn interior_start(&self, inst: &ConvexInstance, warm: &WarmStart) -> DVector<f64> {
        let k_users = inst.users();
        let mut x = self.encode(warm.precoder, &vec![0.0; k_users], 0.0);
        let n_a = self.n_a();
        let mut pw: f64 = x.rows(0, n_a).norm_squared();
        if let Some(t) = self.idx_t {
            pw += x[t] * x[t] * self.perp_norm2;
        }
        if pw > 0.98 {
            let shrink = (0.98 / pw).sqrt();
            x.rows_mut(0, n_a).scale_mut(shrink);
            if let Some(t) = self.idx_t {
                x[t] *= shrink;
            }
        }
        let p0 = self.decode_precoder(&x, inst.model.dim(), k_users + 1);
        let mode = inst.noise_model;
        if let Some(c0) = self.idx_c {
            let fc_min = inst
                .common
                .iter()
                .map(|s| s.value(&p0, mode) + COMMON_SLACK)
                .fold(f64::INFINITY, f64::min);
            if fc_min > 0.0 {
                let kf = k_users as f64;
                for i in 0..k_users {
                    let cw = warm.common.and_then(|c| c.get(i)).copied().unwrap_or(0.0).max(0.0);
                    x[c0 + i] = 0.5 * cw.min(fc_min / kf) + fc_min / (4.0 * kf);
                }
            }
        }
        let worst_private = inst
            .private
            .iter()
            .enumerate()
            .map(|(k, s)| self.idx_c.map_or(0.0, |c0| x[c0 + k]) + s.value(&p0, mode))
            .fold(f64::INFINITY, f64::min);
        x[self.idx_r] = worst_private - 1.0;
        x
    }
}

/// Solves the convex step from a warm start.
pub fn solve_inner(inst: &ConvexInstance, warm: &WarmStart) -> Result<SubproblemSolution> {
    let k_users = inst.users();
    if warm.precoder.shape() != (inst.model.dim(), k_users + 1) {
        return Err(Error::Domain("warm start has the wrong shape".into()));
    }
    let reduced = Reduced::new(inst);
    let prob = reduced.build(inst);
    let settings = IpmSettings::default();
    let start = reduced.interior_start(inst, warm);
    let start = prob.find_interior(&start, &settings).map_err(|e| match e {
        Error::Infeasible(msg) => Error::Numeric(format!("surrogate instance infeasible: {msg}")),
        other => other,
    })?;
    let sol = prob.solve_from(start, &settings, None)?;
    if sol.x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite interior-point iterate".into()));
    }

    let precoder = reduced.decode_precoder(&sol.x, inst.model.dim(), k_users + 1);
    let mut common = match reduced.idx_c {
        Some(c0) => (0..k_users).map(|i| sol.x[c0 + i].max(0.0)).collect(),
        None => vec![0.0; k_users],
    };
    let mode = inst.noise_model;
    if inst.mode.has_common() {
        let fc_min = inst
            .common
            .iter()
            .map(|s| s.value(&precoder, mode))
            .fold(f64::INFINITY, f64::min);
        let total: f64 = common.iter().sum();
        if total > fc_min {
            let ratio = if fc_min > 0.0 { fc_min / total } else { 0.0 };
            common.iter_mut().for_each(|c| *c *= ratio);
        }
    }
    let maxmin = inst
        .private
        .iter()
        .zip(&common)
        .map(|(s, c)| c + s.value(&precoder, mode))
        .fold(f64::INFINITY, f64::min);
    let m_common = inst.common.len();
    let lambda = &sol.lambda;
    let multipliers = Multipliers {
        common: lambda.rows(0, m_common).iter().copied().collect(),
        private: lambda.rows(m_common, k_users).iter().copied().collect(),
        nonneg: lambda.rows(m_common + k_users, m_common).iter().copied().collect(),
        power: lambda[lambda.len() - 1],
    };
    let mut out = SubproblemSolution {
        objective: inst.objective(&precoder, maxmin),
        precoder,
        common,
        maxmin,
        multipliers,
        kkt_residual: 0.0,
        feasibility_residual: 0.0,
        iterations: sol.iterations,
        converged: sol.converged,
    };
    let report = verify_kkt(inst, &out);
    out.kkt_residual = report.kkt_residual();
    out.feasibility_residual = report.feasibility.max(report.nonneg_violation);
    Ok(out)
}

/// Recomputes slacks, complementarity products and Lagrangian stationarity in
/// the full precoder space.
pub fn verify_kkt(inst: &ConvexInstance, sol: &SubproblemSolution) -> KktReport {
    let mode = inst.noise_model;
    let p = &sol.precoder;
    let mu = inst.model.power_scale;
    let lam = &sol.multipliers;
    let k_users = inst.users();
    let active = inst.active_columns();
    let c_sum: f64 = sol.common.iter().sum();

    let mut feasibility: f64 = 0.0;
    let mut complementarity: f64 = 0.0;
    let mut grad = DMatrix::<Complex64>::zeros(p.nrows(), p.ncols());
    let mut scale: f64 = 0.0;
    for (k, s) in inst.common.iter().enumerate() {
        let g = c_sum - s.value(p, mode);
        feasibility = feasibility.max(g);
        let l = lam.common.get(k).copied().unwrap_or(0.0);
        complementarity = complementarity.max((l * g).abs());
        let gf = s.gradient(p, mode) * Complex64::from(l);
        scale = scale.max(gf.norm());
        grad -= gf;
    }
    for (k, s) in inst.private.iter().enumerate() {
        let g = sol.maxmin - sol.common[k] - s.value(p, mode);
        feasibility = feasibility.max(g);
        let l = lam.private.get(k).copied().unwrap_or(0.0);
        complementarity = complementarity.max((l * g).abs());
        let gf = s.gradient(p, mode) * Complex64::from(l);
        scale = scale.max(gf.norm());
        grad -= gf;
    }
    let power = mu * p.norm_squared();
    feasibility = feasibility.max(power - inst.p_th);
    let g_pow = (power - inst.p_th) / inst.p_th;
    complementarity = complementarity.max((lam.power * g_pow).abs());
    let gp = p * Complex64::from(lam.power * mu / inst.p_th);
    scale = scale.max(gp.norm());
    grad += gp;
    if let Some(pen) = &inst.penalty {
        let gpen = (p - &pen.target) / Complex64::from(pen.rho);
        scale = scale.max(gpen.norm());
        grad += gpen;
    }
    let mut nonneg_violation: f64 = 0.0;
    for (k, &c) in sol.common.iter().enumerate() {
        nonneg_violation = nonneg_violation.max(-c);
        let l = lam.nonneg.get(k).copied().unwrap_or(0.0);
        complementarity = complementarity.max((l * c).abs());
    }

    let grad = grad.select_columns(&active);
    let scale_p = (2.0 * scale * (inst.p_th / mu).sqrt()).max(1.0);
    let mut stationarity = 2.0 * grad.norm() * (inst.p_th / mu).sqrt() / scale_p;
    let lp_sum: f64 = lam.private.iter().sum();
    stationarity = stationarity.max((lp_sum - 1.0).abs());
    if inst.mode.has_common() {
        let lc_sum: f64 = lam.common.iter().sum();
        for k in 0..k_users {
            let d = lc_sum - lam.private.get(k).copied().unwrap_or(0.0) - lam.nonneg.get(k).copied().unwrap_or(0.0);
            stationarity = stationarity.max(d.abs() / lc_sum.max(1.0));
        }
    }
    KktReport {
        feasibility: feasibility.max(0.0),
        nonneg_violation,
        complementarity,
        stationarity,
    }
}

/// One SCA run at fixed penalty.
#[derive(Clone, Debug)]
pub struct ScaProblem<'a> {
    pub model: &'a LinkModel,
    pub delta: &'a [f64],
    pub mode: StreamMode,
    pub penalty: Option<PenaltyTerm>,
    pub p_th: f64,
    pub noise_model: NoiseModel,
    pub tol: f64,
    pub max_iters: usize,
    /// Extrapolate along each accepted step; see [`crate::model::SolverSettings::extrapolate`].
    pub extrapolate: bool,
}

#[derive(Clone, Debug)]
pub struct ScaOutcome {
    pub precoder: DMatrix<Complex64>,
    pub allocation: RateAllocation,
    pub objective: f64,
    /// Objective at the start and after every accepted step.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub solver_iterations: usize,
    pub converged: bool,
    pub worst_kkt: f64,
}

impl ScaProblem<'_> {
    /// Penalized max-min objective with the best common-rate split.
    pub fn evaluate(&self, p: &DMatrix<Complex64>) -> (RateAllocation, f64) {
        let alloc = best_allocation(self.model, p, self.delta, self.mode.has_common());
        let pen = self.penalty.as_ref().map_or(0.0, |pen| pen.value(p));
        let j = alloc.maxmin - pen;
        (alloc, j)
    }
}

impl ScaProblem<'_> {
    /// Doubling search along `step.0 − prev`, scaled back into the power budget.
    fn extrapolate_step(
        &self,
        prev: &DMatrix<Complex64>,
        step: (DMatrix<Complex64>, RateAllocation, f64),
    ) -> (DMatrix<Complex64>, RateAllocation, f64) {
        let dir = &step.0 - prev;
        let mut best = step;
        let mut gamma = 1.0;
        for _ in 0..12 {
            let mut trial = &best.0 + &dir * Complex64::from(gamma);
            let power = self.model.radiated_power(&trial);
            if power > self.p_th {
                trial *= Complex64::from((self.p_th / power).sqrt());
            }
            let (alloc, value) = self.evaluate(&trial);
            if !(value > best.2) {
                break;
            }
            best = (trial, alloc, value);
            gamma *= 2.0;
        }
        best
    }
}

/// Minorize-maximize loop: rebuild surrogates at the current point, solve the
/// convex step, repeat until the relative increment falls below `tol`.
pub fn run_sca(prob: &ScaProblem, start: &DMatrix<Complex64>) -> Result<ScaOutcome> {
    let mut p = start.clone();
    if prob.mode == StreamMode::Sdma {
        p.column_mut(0).fill(Complex64::new(0.0, 0.0));
    }
    let (mut alloc, mut obj) = prob.evaluate(&p);
    let mut trace = vec![obj];
    let mut solver_iterations = 0;
    let mut converged = false;
    let mut worst_kkt: f64 = 0.0;
    let mut iterations = 0;
    while iterations < prob.max_iters {
        iterations += 1;
        let inst = ConvexInstance::new(
            prob.model,
            &p,
            prob.delta,
            prob.mode,
            prob.penalty.clone(),
            prob.p_th,
            prob.noise_model,
        )?;
        let warm = WarmStart {
            precoder: &p,
            common: Some(&alloc.common),
        };
        let sol = solve_inner(&inst, &warm)?;
        solver_iterations += sol.iterations;
        worst_kkt = worst_kkt.max(sol.kkt_residual);
        let (new_alloc, new_obj) = prob.evaluate(&sol.precoder);
        if !new_obj.is_finite() {
            return Err(Error::Numeric("non-finite SCA objective".into()));
        }
        if new_obj < obj {
            // Solver noise at the fixed point; keep the previous iterate.
            converged = true;
            break;
        }
        let mut next = (sol.precoder, new_alloc, new_obj);
        if prob.extrapolate {
            next = prob.extrapolate_step(&p, next);
        }
        let increment = next.2 - obj;
        (p, alloc, obj) = next;
        trace.push(obj);
        if increment <= prob.tol * obj.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    Ok(ScaOutcome {
        precoder: p,
        allocation: alloc,
        objective: obj,
        trace,
        iterations,
        solver_iterations,
        converged,
        worst_kkt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_model(rng: &mut ChaCha8Rng, n: usize, k: usize) -> LinkModel {
        LinkModel {
            channels: (0..k)
                .map(|_| DVector::from_fn(n, |_, _| c(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)))
                .collect(),
            eps2: (0..k).map(|_| 0.02 * rng.gen::<f64>()).collect(),
            sigma2: vec![0.05; k],
            power_scale: 1.0,
        }
    }

    fn random_p(rng: &mut ChaCha8Rng, n: usize, cols: usize, power: f64) -> DMatrix<Complex64> {
        let p = DMatrix::from_fn(n, cols, |_, _| c(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5));
        let norm = p.norm();
        p * Complex64::from(power.sqrt() / norm)
    }

    fn solve(inst: &ConvexInstance, p: &DMatrix<Complex64>) -> SubproblemSolution {
        solve_inner(
            inst,
            &WarmStart {
                precoder: p,
                common: None,
            },
        )
        .unwrap()
    }

    /// Grid over magnitudes of both columns inside `span{ĥ}` with the target
    /// phases aligned; valid for a single user.
    fn span_grid_oracle(inst: &ConvexInstance, steps: usize) -> f64 {
        let sc = &inst.common[0];
        let sp = &inst.private[0];
        let hn = sc.channel.norm();
        let radius = (inst.p_th / inst.model.power_scale).sqrt();
        let eval = |s: &SurrogateCoeffs, a: f64, b: f64| {
            // |ĥ^H p_0| = a‖ĥ‖, |ĥ^H p_1| = b‖ĥ‖ with aligned target phase.
            let g = [a * hn, b * hn];
            let quad = s.weights[0] * g[0] * g[0] + s.weights[1] * g[1] * g[1];
            let mut v = -s.quad_weight * quad + 2.0 * s.linear.norm() * g[s.target] + s.constant;
            if inst.noise_model == NoiseModel::Exact {
                v -= s.noise_curvature * (inst.model.power_scale * (a * a + b * b) - s.expansion_power);
            }
            v
        };
        let mut best = f64::NEG_INFINITY;
        for i in 0..=steps {
            let rad = radius * i as f64 / steps as f64;
            for jj in 0..=steps {
                let ang = std::f64::consts::FRAC_PI_2 * jj as f64 / steps as f64;
                let (a, b) = (rad * ang.cos(), rad * ang.sin());
                let val = eval(sc, a, b).max(0.0) + eval(sp, a, b);
                best = best.max(val);
            }
        }
        best
    }

    #[test]
    fn single_user_matches_span_grid() {
        for seed in 0..4 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = random_model(&mut rng, 6, 1);
            let pt = random_p(&mut rng, 6, 2, 0.5);
            for nm in [NoiseModel::Frozen, NoiseModel::Exact] {
                let inst = ConvexInstance::new(&model, &pt, &[0.1], StreamMode::Rsma, None, 1.0, nm).unwrap();
                let sol = solve(&inst, &pt);
                let oracle = span_grid_oracle(&inst, 1500);
                assert!((sol.maxmin - oracle).abs() < 1e-3, "seed {seed}: {} vs {oracle}", sol.maxmin);
            }
        }
    }

    #[test]
    fn zero_channels_give_zero() {
        let model = LinkModel {
            channels: vec![DVector::zeros(4); 2],
            eps2: vec![0.0; 2],
            sigma2: vec![1.0; 2],
            power_scale: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pt = random_p(&mut rng, 4, 3, 1.0);
        let inst = ConvexInstance::new(&model, &pt, &[0.1, 0.1], StreamMode::Rsma, None, 1.0, NoiseModel::Exact).unwrap();
        let sol = solve(&inst, &pt);
        assert!(sol.maxmin.abs() < 1e-8);
        assert!(sol.common.iter().all(|&x| x.abs() < 1e-8));
    }

    #[test]
    fn tight_and_kkt_clean() {
        for seed in 0..6 {
            let mut rng = ChaCha8Rng::seed_from_u64(10 + seed);
            let model = random_model(&mut rng, 8, 3);
            let pt = random_p(&mut rng, 8, 4, 1.0);
            let target = random_p(&mut rng, 8, 4, 1.0);
            for penalty in [None, Some(PenaltyTerm { target, rho: 0.5 })] {
                for mode in [StreamMode::Rsma, StreamMode::Sdma] {
                    let inst = ConvexInstance::new(
                        &model,
                        &pt,
                        &[0.05, 0.1, 0.2],
                        mode,
                        penalty.clone(),
                        1.0,
                        NoiseModel::Exact,
                    )
                    .unwrap();
                    let sol = solve(&inst, &pt);
                    let tight = inst
                        .private
                        .iter()
                        .zip(&sol.common)
                        .map(|(s, c)| c + s.value(&sol.precoder, NoiseModel::Exact))
                        .fold(f64::INFINITY, f64::min);
                    assert!((tight - sol.maxmin).abs() < 1e-6);
                    let report = verify_kkt(&inst, &sol);
                    assert!(report.within(1.0), "seed {seed} {mode:?}: {report:?}");
                    assert!(sol.converged);
                }
            }
        }
    }

    #[test]
    fn improves_on_expansion_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = random_model(&mut rng, 8, 3);
        let pt = random_p(&mut rng, 8, 4, 1.0);
        let delta = [0.05; 3];
        let inst = ConvexInstance::new(&model, &pt, &delta, StreamMode::Rsma, None, 1.0, NoiseModel::Exact).unwrap();
        let sol = solve(&inst, &pt);
        let before = best_allocation(&model, &pt, &delta, true).maxmin;
        let after = best_allocation(&model, &sol.precoder, &delta, true).maxmin;
        assert!(sol.maxmin >= before - 1e-8);
        assert!(after >= sol.maxmin - 1e-8);
    }

    #[test]
    fn monotone_in_power_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = random_model(&mut rng, 6, 2);
        let pt = random_p(&mut rng, 6, 3, 0.5);
        let mut last = f64::NEG_INFINITY;
        for p_th in [0.25, 0.5, 1.0, 2.0, 4.0] {
            let inst = ConvexInstance::new(&model, &pt, &[0.1, 0.1], StreamMode::Rsma, None, p_th, NoiseModel::Frozen).unwrap();
            let v = solve(&inst, &pt).maxmin;
            assert!(v >= last - 1e-7, "{p_th}: {v} < {last}");
            last = v;
        }
    }

    #[test]
    fn penalized_value_monotone_in_inverse_rho() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = random_model(&mut rng, 6, 2);
        let pt = random_p(&mut rng, 6, 3, 0.5);
        let target = random_p(&mut rng, 6, 3, 0.5);
        let mut last = f64::INFINITY;
        for rho in [100.0, 10.0, 1.0, 0.1, 0.01] {
            let pen = PenaltyTerm {
                target: target.clone(),
                rho,
            };
            let inst = ConvexInstance::new(&model, &pt, &[0.1, 0.1], StreamMode::Rsma, Some(pen), 1.0, NoiseModel::Exact).unwrap();
            let v = solve(&inst, &pt).objective;
            assert!(v <= last + 1e-7, "rho {rho}: {v} > {last}");
            last = v;
        }
    }

    #[test]
    fn identity_equivalent_channel_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let direct = random_model(&mut rng, 5, 2);
        let blocks: Vec<DVector<Complex64>> = (0..5).map(|_| DVector::from_element(1, c(1.0, 0.0))).collect();
        let equivalent = LinkModel {
            channels: direct
                .channels
                .iter()
                .map(|h| crate::rates::analog_adjoint(&blocks, h))
                .collect(),
            power_scale: 1.0,
            ..direct.clone()
        };
        let pt = random_p(&mut rng, 5, 3, 1.0);
        let a = ConvexInstance::new(&direct, &pt, &[0.1, 0.1], StreamMode::Rsma, None, 1.0, NoiseModel::Exact).unwrap();
        let b = ConvexInstance::new(&equivalent, &pt, &[0.1, 0.1], StreamMode::Rsma, None, 1.0, NoiseModel::Exact).unwrap();
        assert!((solve(&a, &pt).maxmin - solve(&b, &pt).maxmin).abs() < 1e-5);
    }

    #[test]
    fn kkt_flags_constructed_violations() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = random_model(&mut rng, 6, 2);
        let pt = random_p(&mut rng, 6, 3, 1.0);
        let inst = ConvexInstance::new(&model, &pt, &[0.1, 0.1], StreamMode::Rsma, None, 1.0, NoiseModel::Exact).unwrap();
        let sol = solve(&inst, &pt);
        assert!(verify_kkt(&inst, &sol).within(1.0));

        let mut grown = sol.clone();
        let factor = 1.01 / model.radiated_power(&sol.precoder).sqrt();
        grown.precoder *= Complex64::from(factor);
        assert!(verify_kkt(&inst, &grown).feasibility > 0.0);

        let mut negative = sol.clone();
        negative.common[1] = -0.1;
        assert!(verify_kkt(&inst, &negative).nonneg_violation > 0.0);
    }

    #[test]
    fn sca_trace_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = random_model(&mut rng, 8, 3);
        let start = random_p(&mut rng, 8, 4, 1.0);
        let delta = [0.05; 3];
        for mode in [StreamMode::Rsma, StreamMode::Sdma] {
            let prob = ScaProblem {
                model: &model,
                delta: &delta,
                mode,
                penalty: None,
                p_th: 1.0,
                noise_model: NoiseModel::Exact,
                tol: 1e-6,
                max_iters: 40,
                extrapolate: true,
            };
            let out = run_sca(&prob, &start).unwrap();
            assert!(out.trace.windows(2).all(|w| w[1] >= w[0] - 1e-7));
            assert!(model.radiated_power(&out.precoder) <= 1.0 + 1e-7);
            assert!(out.objective > out.trace[0]);
        }
    }

    #[test]
    fn sdma_ignores_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = random_model(&mut rng, 6, 2);
        let start = random_p(&mut rng, 6, 3, 1.0);
        let run = |d: f64| {
            let delta = [d, d];
            let prob = ScaProblem {
                model: &model,
                delta: &delta,
                mode: StreamMode::Sdma,
                penalty: None,
                p_th: 1.0,
                noise_model: NoiseModel::Exact,
                tol: 1e-6,
                max_iters: 10,
                extrapolate: true,
            };
            run_sca(&prob, &start).unwrap().precoder
        };
        assert_eq!(run(0.0), run(0.5));
    }

    #[test]
    fn ln2_scaling_sanity() {
        // A lone user with no interference: the surrogate optimum with frozen noise
        // and full power in the private column reaches log2(1 + G·P/σ²) at P̃ = optimum.
        let model = LinkModel {
            channels: vec![DVector::from_element(2, c(1.0, 0.0))],
            eps2: vec![0.0],
            sigma2: vec![1.0],
            power_scale: 1.0,
        };
        let mut pt = DMatrix::zeros(2, 2);
        pt[(0, 1)] = c(0.5f64.sqrt(), 0.0);
        pt[(1, 1)] = c(0.5f64.sqrt(), 0.0);
        let inst = ConvexInstance::new(&model, &pt, &[0.0], StreamMode::Sdma, None, 1.0, NoiseModel::Frozen).unwrap();
        let sol = solve(&inst, &pt);
        assert!((sol.maxmin - (3.0f64).ln() / LN_2).abs() < 1e-7);
    }
}
