//! Dense log-barrier interior-point method for small convex QCQPs:
//!
//! ```text
//! minimize    ½xᵀH₀x + g₀ᵀx
//! subject to  ½xᵀHᵢx + gᵢᵀx + cᵢ ≤ 0,   Hᵢ ⪰ 0
//! ```
//!
//! Damped Newton centering for a growing barrier weight `t`, and a phase-I
//! problem for starting points that are not strictly feasible.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// `½xᵀHx + gᵀx + c`. The Hessian is kept dense for the Newton system and,
/// while it is built through [`Quadratic::add_square`] and
/// [`Quadratic::add_diag`] only, also as `Σ 2sᵢrᵢrᵢᵀ + diag(d)` for cheap
/// evaluation.
#[derive(Clone, Debug)]
pub(crate) struct Quadratic {
    hess: Option<DMatrix<f64>>,
    pub grad: DVector<f64>,
    pub constant: f64,
    factors: Option<Factors>,
}

#[derive(Clone, Debug)]
struct Factors {
    squares: Vec<(DVector<f64>, f64)>,
    diag: DVector<f64>,
}

impl Quadratic {
    pub fn zero(n: usize) -> Self {
        Self {
            hess: None,
            grad: DVector::zeros(n),
            constant: 0.0,
            factors: Some(Factors {
                squares: Vec::new(),
                diag: DVector::zeros(n),
            }),
        }
    }

    pub fn hess(&self) -> Option<&DMatrix<f64>> {
        self.hess.as_ref()
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        let mut v = self.grad.dot(x) + self.constant;
        match (&self.factors, &self.hess) {
            (Some(f), _) => {
                for (r, s) in &f.squares {
                    let d = r.dot(x);
                    v += s * d * d;
                }
                v += 0.5 * f.diag.iter().zip(x.iter()).map(|(d, xi)| d * xi * xi).sum::<f64>();
            }
            (None, Some(h)) => {
                let quad: f64 = h.column_iter().zip(x.iter()).map(|(col, xj)| xj * col.dot(x)).sum();
                v += 0.5 * quad;
            }
            (None, None) => {}
        }
        v
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        match (&self.factors, &self.hess) {
            (Some(f), _) => {
                let mut g = f.diag.component_mul(x);
                g += &self.grad;
                for (r, s) in &f.squares {
                    g.axpy(2.0 * s * r.dot(x), r, 1.0);
                }
                g
            }
            (None, Some(h)) => h * x + &self.grad,
            (None, None) => self.grad.clone(),
        }
    }

    fn dense(&mut self) -> &mut DMatrix<f64> {
        let n = self.grad.len();
        self.hess.get_or_insert_with(|| DMatrix::zeros(n, n))
    }

    /// Adds `scale·(rowᵀx)²` to the function.
    pub fn add_square(&mut self, row: &DVector<f64>, scale: f64) {
        self.dense().ger(2.0 * scale, row, row, 1.0);
        if let Some(f) = &mut self.factors {
            f.squares.push((row.clone(), scale));
        }
    }

    /// Adds `½·value·x_i²` to the function.
    pub fn add_diag(&mut self, i: usize, value: f64) {
        self.dense()[(i, i)] += value;
        if let Some(f) = &mut self.factors {
            f.diag[i] += value;
        }
    }

    fn dim(&self) -> usize {
        self.grad.len()
    }

    /// Same function of the first `n` coordinates, embedded in `n + extra` coordinates.
    fn padded(&self, extra: usize) -> Self {
        let n = self.dim();
        let pad = |v: &DVector<f64>| {
            let mut big = DVector::zeros(n + extra);
            big.rows_mut(0, n).copy_from(v);
            big
        };
        let hess = self.hess.as_ref().map(|h| {
            let mut big = DMatrix::zeros(n + extra, n + extra);
            big.view_mut((0, 0), (n, n)).copy_from(h);
            big
        });
        let factors = self.factors.as_ref().map(|f| Factors {
            squares: f.squares.iter().map(|(r, s)| (pad(r), *s)).collect(),
            diag: pad(&f.diag),
        });
        Self {
            hess,
            grad: pad(&self.grad),
            constant: self.constant,
            factors,
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Qcqp {
    pub objective: Quadratic,
    pub constraints: Vec<Quadratic>,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct IpmSettings {
    /// Target duality gap `m/t`.
    pub tol_gap: f64,
    /// Newton decrement threshold for centering.
    pub tol_newton: f64,
    /// Total Newton step cap.
    pub max_iters: usize,
    pub t0: f64,
    /// Barrier parameter growth factor.
    pub mu: f64,
}

impl Default for IpmSettings {
    fn default() -> Self {
        Self {
            tol_gap: 1e-9,
            tol_newton: 1e-22,
            max_iters: 500,
            t0: 1.0,
            mu: 20.0,
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct IpmSolution {
    pub x: DVector<f64>,
    pub lambda: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl Qcqp {
    fn constraint_values(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.constraints.len(), self.constraints.iter().map(|c| c.value(x)))
    }

    fn strictly_feasible(&self, x: &DVector<f64>) -> bool {
        self.constraints.iter().all(|c| c.value(x) < 0.0)
    }

    /// Barrier function `t·f₀(x) − Σ log(−fᵢ(x))`, infinite outside the interior.
    fn barrier(&self, x: &DVector<f64>, t: f64) -> f64 {
        let mut v = t * self.objective.value(x);
        for c in &self.constraints {
            let f = c.value(x);
            if f >= 0.0 {
                return f64::INFINITY;
            }
            v -= (-f).ln();
        }
        v
    }

    /// Log-barrier interior-point method from a strictly feasible `x0`.
    ///
    /// `stop_early(x, gap)` is checked after every centering and may end the
    /// run before the duality-gap tolerance is met.
    pub fn solve_from(
        &self,
        x0: DVector<f64>,
        settings: &IpmSettings,
        stop_early: Option<&dyn Fn(&DVector<f64>, f64) -> bool>,
    ) -> Result<IpmSolution> {
        let m = self.constraints.len();
        let n = x0.len();
        if !self.strictly_feasible(&x0) {
            return Err(Error::Numeric("interior-point start is not strictly feasible".into()));
        }
        let mut x = x0;
        let mut t = settings.t0;
        let mut iterations = 0;
        let mut converged = false;
        while iterations < settings.max_iters {
            // Centering by damped Newton steps.
            let mut last_decrement = f64::INFINITY;
            loop {
                if iterations >= settings.max_iters {
                    break;
                }
                let f: Vec<f64> = self.constraints.iter().map(|c| c.value(&x)).collect();
                let mut grad = self.objective.gradient(&x) * t;
                let mut h = match self.objective.hess() {
                    Some(h0) => {
                        let mut h = h0.clone();
                        h *= t;
                        h
                    }
                    None => DMatrix::zeros(n, n),
                };
                for (c, &fi) in self.constraints.iter().zip(&f) {
                    let gi = c.gradient(&x);
                    let inv = 1.0 / -fi;
                    grad.axpy(inv, &gi, 1.0);
                    if let Some(hi) = c.hess() {
                        h.zip_apply(hi, |a, b| *a += inv * b);
                    }
                    h.ger(inv * inv, &gi, &gi, 1.0);
                }
                let dx = solve_psd(h, &(-&grad))?;
                let decrement = -grad.dot(&dx);
                iterations += 1;
                if !(decrement > settings.tol_newton) || decrement >= last_decrement && decrement < 1e-6 {
                    break;
                }
                last_decrement = decrement;
                if decrement < 0.1 {
                    // Inside the quadratic-convergence region of the barrier.
                    let trial = &x + &dx;
                    if self.strictly_feasible(&trial) {
                        x = trial;
                        continue;
                    }
                }
                let phi0 = self.barrier(&x, t);
                let mut step = 1.0;
                let mut accepted = false;
                for _ in 0..60 {
                    let trial = &x + &dx * step;
                    if self.barrier(&trial, t) <= phi0 - 0.25 * step * decrement {
                        x = trial;
                        accepted = true;
                        break;
                    }
                    step *= 0.5;
                }
                if !accepted {
                    break;
                }
            }
            let gap = m as f64 / t;
            if gap <= settings.tol_gap {
                converged = true;
                break;
            }
            if let Some(stop) = stop_early {
                if stop(&x, gap) {
                    break;
                }
            }
            t *= settings.mu;
        }
        let lambda = DVector::from_iterator(m, self.constraints.iter().map(|c| 1.0 / (-t * c.value(&x))));
        let lambda = self.polish_multipliers(&x, lambda);
        Ok(IpmSolution {
            x,
            lambda,
            iterations,
            converged,
        })
    }

    fn stationarity(&self, x: &DVector<f64>, lambda: &DVector<f64>) -> f64 {
        let mut r = self.objective.gradient(x);
        for (c, &l) in self.constraints.iter().zip(lambda.iter()) {
            r.axpy(l, &c.gradient(x), 1.0);
        }
        r.amax()
    }

    /// Refits the multipliers of the active constraints by least squares on
    /// the Lagrangian gradient. The barrier estimate `1/(−t·fᵢ)` loses digits
    /// when `fᵢ` is a small difference of large terms.
    fn polish_multipliers(&self, x: &DVector<f64>, lambda: DVector<f64>) -> DVector<f64> {
        let n = x.len();
        let big = lambda.amax().max(1.0);
        let active: Vec<usize> = (0..lambda.len()).filter(|&i| lambda[i] > 1e-6 * big).collect();
        if active.is_empty() || active.len() > n {
            return lambda;
        }
        let mut g = DMatrix::zeros(n, active.len());
        for (col, &i) in active.iter().enumerate() {
            g.set_column(col, &self.constraints[i].gradient(x));
        }
        let mut rhs = -self.objective.gradient(x);
        for i in 0..lambda.len() {
            if !active.contains(&i) {
                rhs.axpy(-lambda[i], &self.constraints[i].gradient(x), 1.0);
            }
        }
        let Ok(fit) = g.svd(true, true).solve(&rhs, 1e-13) else {
            return lambda;
        };
        if fit.iter().any(|&l| !(l >= 0.0)) {
            return lambda;
        }
        let mut polished = lambda.clone();
        for (col, &i) in active.iter().enumerate() {
            polished[i] = fit[col];
        }
        if self.stationarity(x, &polished) < self.stationarity(x, &lambda) {
            polished
        } else {
            lambda
        }
    }

    /// Finds a strictly feasible point by minimising the largest constraint value.
    pub fn find_interior(&self, x0: &DVector<f64>, settings: &IpmSettings) -> Result<DVector<f64>> {
        if self.strictly_feasible(x0) {
            return Ok(x0.clone());
        }
        let n = x0.len();
        let mut objective = Quadratic::zero(n + 1);
        objective.grad[n] = 1.0;
        let mut constraints: Vec<Quadratic> = self
            .constraints
            .iter()
            .map(|c| {
                let mut q = c.padded(1);
                q.grad[n] = -1.0;
                q
            })
            .collect();
        // Keeps the phase-I problem bounded: τ ≥ −1.
        let mut floor = Quadratic::zero(n + 1);
        floor.grad[n] = -1.0;
        floor.constant = -1.0;
        constraints.push(floor);
        let phase1 = Qcqp {
            objective,
            constraints,
        };
        let worst = self.constraint_values(x0).max();
        let mut start = DVector::zeros(n + 1);
        start.rows_mut(0, n).copy_from(x0);
        start[n] = worst.max(0.0) + 1.0;
        let stop = |x: &DVector<f64>, gap: f64| x[n] < 0.0 && gap < -0.5 * x[n];
        let sol = phase1.solve_from(start, settings, Some(&stop))?;
        let x = sol.x.rows(0, n).into_owned();
        if sol.x[n] < 0.0 && self.strictly_feasible(&x) {
            Ok(x)
        } else {
            Err(Error::Infeasible(format!(
                "no strictly feasible point (phase-I value {:.3e})",
                sol.x[n]
            )))
        }
    }
}

/// Solves `H x = b` for a symmetric positive (semi)definite `H`.
fn solve_psd(h: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let n = h.nrows();
    if n == 0 {
        return Ok(DVector::zeros(0));
    }
    let scale = (0..n).map(|i| h[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
    let mut reg = 0.0;
    for _ in 0..8 {
        let mut hr = h.clone();
        if reg > 0.0 {
            for i in 0..n {
                hr[(i, i)] += reg;
            }
        }
        if let Some(chol) = hr.cholesky() {
            let x = chol.solve(b);
            if x.iter().all(|v| v.is_finite()) {
                return Ok(x);
            }
        }
        reg = if reg == 0.0 { 1e-14 * scale } else { reg * 100.0 };
    }
    h.lu()
        .solve(b)
        .filter(|x| x.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Numeric("singular Newton system".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// minimize (x−2)² + (y−1)²  s.t.  x² + y² ≤ 1.
    fn disk_problem() -> Qcqp {
        let mut objective = Quadratic::zero(2);
        objective.add_diag(0, 2.0);
        objective.add_diag(1, 2.0);
        objective.grad = DVector::from_vec(vec![-4.0, -2.0]);
        let mut disk = Quadratic::zero(2);
        disk.add_diag(0, 2.0);
        disk.add_diag(1, 2.0);
        disk.constant = -1.0;
        Qcqp {
            objective,
            constraints: vec![disk],
        }
    }

    #[test]
    fn factored_evaluation_matches_dense() {
        let mut q = Quadratic::zero(3);
        q.add_square(&DVector::from_vec(vec![1.0, -2.0, 0.5]), 0.7);
        q.add_square(&DVector::from_vec(vec![0.0, 3.0, 1.0]), 1.3);
        q.add_diag(2, 0.4);
        q.grad = DVector::from_vec(vec![0.1, 0.2, -0.3]);
        q.constant = 2.0;
        let x = DVector::from_vec(vec![0.3, -1.1, 2.0]);
        let h = q.hess().unwrap().clone();
        let dense_value = 0.5 * x.dot(&(&h * &x)) + q.grad.dot(&x) + q.constant;
        let dense_grad = &h * &x + &q.grad;
        assert!((q.value(&x) - dense_value).abs() < 1e-12);
        assert!((q.gradient(&x) - dense_grad).amax() < 1e-12);
        let p = q.padded(2);
        let mut xp = DVector::zeros(5);
        xp.rows_mut(0, 3).copy_from(&x);
        xp[4] = 9.0;
        assert!((p.value(&xp) - dense_value).abs() < 1e-12);
    }

    #[test]
    fn projects_onto_disk() {
        let prob = disk_problem();
        let sol = prob
            .solve_from(DVector::zeros(2), &IpmSettings::default(), None)
            .unwrap();
        assert!(sol.converged);
        let expect = DVector::from_vec(vec![2.0, 1.0]) / 5f64.sqrt();
        assert!((&sol.x - expect).amax() < 1e-8);
        // λ = √5 − 1 from stationarity 2(x − a) + 2λx = 0.
        assert!((sol.lambda[0] - (5f64.sqrt() - 1.0)).abs() < 1e-6);
    }

    #[test]
    fn phase_one_recovers_interior_point() {
        let prob = disk_problem();
        let x = prob
            .find_interior(&DVector::from_vec(vec![3.0, -4.0]), &IpmSettings::default())
            .unwrap();
        assert!(x.norm() < 1.0);
    }

    #[test]
    fn phase_one_detects_infeasibility() {
        // x ≤ −1 and x ≥ 1.
        let mut a = Quadratic::zero(1);
        a.grad[0] = 1.0;
        a.constant = 1.0;
        let mut b = Quadratic::zero(1);
        b.grad[0] = -1.0;
        b.constant = 1.0;
        let prob = Qcqp {
            objective: Quadratic::zero(1),
            constraints: vec![a, b],
        };
        assert!(matches!(
            prob.find_interior(&DVector::zeros(1), &IpmSettings::default()),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn linear_objective_on_ball() {
        // maximize x + y on the unit disk.
        let mut objective = Quadratic::zero(2);
        objective.grad = DVector::from_vec(vec![-1.0, -1.0]);
        let mut disk = Quadratic::zero(2);
        disk.add_square(&DVector::from_vec(vec![1.0, 0.0]), 1.0);
        disk.add_square(&DVector::from_vec(vec![0.0, 1.0]), 1.0);
        disk.constant = -1.0;
        let prob = Qcqp {
            objective,
            constraints: vec![disk],
        };
        let sol = prob
            .solve_from(DVector::zeros(2), &IpmSettings::default(), None)
            .unwrap();
        let r = 0.5f64.sqrt();
        assert!((sol.x[0] - r).abs() < 1e-8 && (sol.x[1] - r).abs() < 1e-8);
    }
}
