//! System configuration, user placement and near-field channel generation.
//!
//! The base station carries a half-wavelength ULA centred at the origin along
//! the y-axis. Element `n` (1-based) sits at `ñ·d` with `ñ = (2n − N − 1)/2`.
//! Estimated channels follow the second-order (Fresnel) expansion of the
//! spherical wavefront, scaled by the free-space gain of the central link.

use std::f64::consts::PI;

use nalgebra::DVector;
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SPEED_OF_LIGHT: f64 = 2.997_924_58e8;

/// Converts a power level in dBm to watts.
pub fn dbm_to_watt(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn watt_to_dbm(watt: f64) -> f64 {
    10.0 * watt.log10() + 30.0
}

/// How the surrogate treats the CSI-error noise term `ε²‖P‖²`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    /// Noise frozen at the expansion point, exactly as in the closed-form coefficients.
    Frozen,
    /// Noise kept as a function of the precoder; the surrogate then minorizes the
    /// true rate bound and the SCA iteration is monotone on it.
    Exact,
}

/// Knobs of the iterative solvers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    /// Initial penalty factor ρ.
    pub rho0: f64,
    /// Penalty reduction factor, `ρ ← αρ` after each outer iteration.
    pub alpha: f64,
    /// Relative objective increment that stops a surrogate (SCA) loop.
    pub tol_sca: f64,
    /// Relative objective increment that stops the BCD inner loop.
    pub tol_bcd: f64,
    /// Penalty violation threshold as a fraction of `P_th`.
    pub tol_penalty: f64,
    pub max_sca_iters: usize,
    pub max_inner_iters: usize,
    pub max_outer_iters: usize,
    /// SCA cap for the digital-only designs (two-stage stage 2, full digital).
    pub max_digital_iters: usize,
    pub noise_model: NoiseModel,
    /// Accept swaps that leave the minimum array gain unchanged.
    pub swap_accept_ties: bool,
    /// Amplitude of the initial common beam relative to a private matched filter.
    pub common_init_scale: f64,
    /// After each surrogate step, also try `P + γ(P − P_prev)` for `γ = 1, 2, 4, …`
    /// and keep the best point that raises the true objective.
    pub extrapolate: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            rho0: 100.0,
            alpha: 0.5,
            tol_sca: 1e-5,
            tol_bcd: 1e-5,
            tol_penalty: 1e-6,
            max_sca_iters: 30,
            max_inner_iters: 200,
            max_outer_iters: 40,
            max_digital_iters: 200,
            noise_model: NoiseModel::Exact,
            swap_accept_ties: false,
            common_init_scale: 0.01,
            extrapolate: true,
        }
    }
}

/// Region in which users are dropped uniformly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Placement {
    pub r_min: f64,
    pub r_max: f64,
    pub theta_min: f64,
    pub theta_max: f64,
    /// Clip the radial interval to the Fresnel region `[1.2D, 2D²/λ]`.
    pub enforce_fresnel: bool,
}

impl Default for Placement {
    fn default() -> Self {
        Self {
            r_min: 10.0,
            r_max: 20.0,
            theta_min: -PI / 3.0,
            theta_max: PI / 3.0,
            enforce_fresnel: false,
        }
    }
}

/// All scalar parameters of one system instance, in linear units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    /// Antenna count `N`.
    pub antennas: usize,
    /// RF-chain count `L`; must divide `N`.
    pub rf_chains: usize,
    /// User count `K`.
    pub users: usize,
    pub carrier_hz: f64,
    /// Inter-element spacing in metres.
    pub spacing_m: f64,
    /// Transmit power budget in watts.
    pub p_th: f64,
    /// Noise power in watts; one shared entry or one per user.
    pub sigma2: Vec<f64>,
    /// `ε²_k = eps_factor·‖ĥ_k‖²`.
    pub eps_factor: f64,
    /// SIC imperfection factor; one shared entry or one per user.
    pub delta: Vec<f64>,
    pub placement: Placement,
    pub solver: SolverSettings,
    pub seed: u64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        let carrier_hz = 30e9;
        Self {
            antennas: 128,
            rf_chains: 8,
            users: 4,
            carrier_hz,
            spacing_m: SPEED_OF_LIGHT / carrier_hz / 2.0,
            p_th: dbm_to_watt(20.0),
            sigma2: vec![dbm_to_watt(-84.0)],
            eps_factor: 0.005,
            delta: vec![0.05],
            placement: Placement::default(),
            solver: SolverSettings::default(),
            seed: 1,
        }
    }
}

impl SystemConfig {
    /// Default system with a different array size, keeping half-wavelength spacing.
    pub fn with_dims(antennas: usize, rf_chains: usize, users: usize) -> Self {
        Self {
            antennas,
            rf_chains,
            users,
            ..Self::default()
        }
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_hz
    }

    /// Antennas per sub-array, `M = N/L`.
    pub fn block_len(&self) -> usize {
        self.antennas / self.rf_chains
    }

    /// Array aperture `D = (N − 1)d`.
    pub fn aperture(&self) -> f64 {
        (self.antennas as f64 - 1.0) * self.spacing_m
    }

    pub fn rayleigh_distance(&self) -> f64 {
        2.0 * self.aperture().powi(2) / self.wavelength()
    }

    /// Fresnel region `[1.2D, 2D²/λ]`.
    pub fn fresnel_region(&self) -> (f64, f64) {
        (1.2 * self.aperture(), self.rayleigh_distance())
    }

    pub fn sigma2_of(&self, k: usize) -> f64 {
        per_user(&self.sigma2, k)
    }

    pub fn delta_of(&self, k: usize) -> f64 {
        per_user(&self.delta, k)
    }

    /// Per-user noise powers, expanded to length `K`.
    pub fn sigma2_vec(&self) -> Vec<f64> {
        (0..self.users).map(|k| self.sigma2_of(k)).collect()
    }

    pub fn delta_vec(&self) -> Vec<f64> {
        (0..self.users).map(|k| self.delta_of(k)).collect()
    }

    /// Sets the same SIC factor for every user.
    pub fn set_delta(&mut self, delta: f64) {
        self.delta = vec![delta];
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.antennas == 0 || self.rf_chains == 0 {
            return fail("antenna and RF-chain counts must be positive".into());
        }
        if self.antennas % self.rf_chains != 0 {
            return fail(format!(
                "RF-chain count {} does not divide antenna count {}",
                self.rf_chains, self.antennas
            ));
        }
        if self.users == 0 {
            return fail("user count must be positive".into());
        }
        if !(self.carrier_hz > 0.0) || !(self.spacing_m > 0.0) {
            return fail("carrier frequency and spacing must be positive".into());
        }
        if !(self.p_th > 0.0) {
            return fail("power budget must be positive".into());
        }
        check_per_user("sigma2", &self.sigma2, self.users)?;
        if self.sigma2.iter().any(|s| !(*s > 0.0)) {
            return fail("noise power must be positive".into());
        }
        check_per_user("delta", &self.delta, self.users)?;
        if self.delta.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return fail("SIC factor must lie in [0, 1]".into());
        }
        if !(self.eps_factor >= 0.0) {
            return fail("eps_factor must be nonnegative".into());
        }
        let s = &self.solver;
        if !(s.alpha > 0.0 && s.alpha < 1.0) {
            return fail("penalty reduction factor must lie in (0, 1)".into());
        }
        if !(s.rho0 > 0.0) {
            return fail("initial penalty factor must be positive".into());
        }
        if !(s.tol_sca > 0.0 && s.tol_bcd > 0.0 && s.tol_penalty > 0.0) {
            return fail("tolerances must be positive".into());
        }
        if !(s.common_init_scale >= 0.0 && s.common_init_scale.is_finite()) {
            return fail("common_init_scale must be finite and nonnegative".into());
        }
        let p = &self.placement;
        if !(p.r_min > 0.0 && p.r_max >= p.r_min) {
            return fail("placement needs 0 < r_min <= r_max".into());
        }
        if !(p.theta_max >= p.theta_min) {
            return fail("placement needs theta_min <= theta_max".into());
        }
        Ok(())
    }
}

fn per_user(values: &[f64], k: usize) -> f64 {
    if values.len() == 1 {
        values[0]
    } else {
        values[k]
    }
}

fn check_per_user(name: &str, values: &[f64], users: usize) -> Result<()> {
    if values.len() == 1 || values.len() == users {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{name} needs 1 or {users} entries, got {}",
            values.len()
        )))
    }
}

/// Polar position of one user relative to the array centre.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserPosition {
    pub r: f64,
    pub theta: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UserGeometry {
    pub users: Vec<UserPosition>,
}

impl UserGeometry {
    pub fn in_fresnel_region(&self, cfg: &SystemConfig) -> bool {
        let (lo, hi) = cfg.fresnel_region();
        self.users.iter().all(|u| u.r >= lo && u.r <= hi)
    }
}

/// Estimated channels of one realization.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSet {
    /// Estimated channels `ĥ_k = β_k a(r_k, θ_k)`.
    pub h_hat: Vec<DVector<Complex64>>,
    /// Array responses `a(r_k, θ_k)` (unit-modulus entries).
    pub response: Vec<DVector<Complex64>>,
    /// Error-norm bounds `ε_k`.
    pub eps: Vec<f64>,
    pub geometry: UserGeometry,
    pub beta: Vec<Complex64>,
}

impl ChannelSet {
    pub fn users(&self) -> usize {
        self.h_hat.len()
    }

    pub fn antennas(&self) -> usize {
        self.h_hat.first().map_or(0, |h| h.len())
    }

    pub fn eps2(&self) -> Vec<f64> {
        self.eps.iter().map(|e| e * e).collect()
    }
}

/// Near-field array response under the second-order distance expansion.
pub fn near_field_response(cfg: &SystemConfig, r: f64, theta: f64) -> Result<DVector<Complex64>> {
    if !(r > 0.0) {
        return Err(Error::Domain(format!("distance must be positive, got {r}")));
    }
    let n = cfg.antennas;
    let k0 = 2.0 * PI / cfg.wavelength();
    let (s, c) = theta.sin_cos();
    Ok(DVector::from_fn(n, |i, _| {
        let x = element_offset(i, n) * cfg.spacing_m;
        let delta = x * s - x * x * c * c / (2.0 * r);
        Complex64::from_polar(1.0, k0 * delta)
    }))
}

/// Planar-wavefront array response.
pub fn far_field_response(cfg: &SystemConfig, theta: f64) -> DVector<Complex64> {
    let n = cfg.antennas;
    let k0 = 2.0 * PI / cfg.wavelength();
    let s = theta.sin();
    DVector::from_fn(n, |i, _| {
        let x = element_offset(i, n) * cfg.spacing_m;
        Complex64::from_polar(1.0, k0 * x * s)
    })
}

/// `ñ = (2n − N − 1)/2` for the 0-based element index `i = n − 1`.
fn element_offset(i: usize, n: usize) -> f64 {
    (2.0 * (i as f64 + 1.0) - n as f64 - 1.0) / 2.0
}

/// Free-space gain of the central link, `β = c/(4πfr)·e^{−j2πr/λ}`.
pub fn channel_gain(cfg: &SystemConfig, r: f64) -> Result<Complex64> {
    if !(r > 0.0) {
        return Err(Error::Domain(format!("distance must be positive, got {r}")));
    }
    let magnitude = SPEED_OF_LIGHT / (4.0 * PI * cfg.carrier_hz * r);
    let phase = -2.0 * PI * (r / cfg.wavelength()).fract();
    Ok(Complex64::from_polar(magnitude, phase))
}

/// Builds the estimated channels for a fixed geometry.
pub fn channels_from_geometry(cfg: &SystemConfig, geometry: &UserGeometry) -> Result<ChannelSet> {
    if geometry.users.is_empty() {
        return Err(Error::Domain("at least one user is required".into()));
    }
    let mut h_hat = Vec::with_capacity(geometry.users.len());
    let mut response = Vec::with_capacity(geometry.users.len());
    let mut beta = Vec::with_capacity(geometry.users.len());
    let mut eps = Vec::with_capacity(geometry.users.len());
    for u in &geometry.users {
        let a = near_field_response(cfg, u.r, u.theta)?;
        let b = channel_gain(cfg, u.r)?;
        let h = &a * b;
        eps.push(cfg.eps_factor.sqrt() * h.norm());
        h_hat.push(h);
        response.push(a);
        beta.push(b);
    }
    Ok(ChannelSet {
        h_hat,
        response,
        eps,
        geometry: geometry.clone(),
        beta,
    })
}

/// Drops `K` users uniformly in the configured sector and builds their channels.
pub fn sample_channels<R: Rng + ?Sized>(cfg: &SystemConfig, rng: &mut R) -> Result<ChannelSet> {
    if cfg.users == 0 {
        return Err(Error::Domain("user count must be positive".into()));
    }
    cfg.validate()?;
    let p = &cfg.placement;
    let (mut lo, mut hi) = (p.r_min, p.r_max);
    if p.enforce_fresnel {
        let (f_lo, f_hi) = cfg.fresnel_region();
        lo = lo.max(f_lo);
        hi = hi.min(f_hi);
        if lo > hi {
            return Err(Error::Config(format!(
                "placement [{}, {}] m does not intersect the Fresnel region [{f_lo:.3}, {f_hi:.3}] m",
                p.r_min, p.r_max
            )));
        }
    }
    let users = (0..cfg.users)
        .map(|_| UserPosition {
            r: lo + (hi - lo) * rng.gen::<f64>(),
            theta: p.theta_min + (p.theta_max - p.theta_min) * rng.gen::<f64>(),
        })
        .collect();
    channels_from_geometry(cfg, &UserGeometry { users })
}

/// Deterministic generator for trial `trial` of a run seeded with `seed`.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(mix_seed(&[seed, trial]))
}

/// SplitMix64-style combination of several words into one seed.
pub fn mix_seed(words: &[u64]) -> u64 {
    let mut state = 0x9E37_79B9_7F4A_7C15u64;
    for &w in words {
        state ^= w.wrapping_add(0x9E37_79B9_7F4A_7C15);
        state = splitmix(state);
    }
    state
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws a channel error uniformly from the ball `‖h̃‖ ≤ ε` in `C^N`.
///
/// Diagnostic only; optimization and reported rates never use it.
pub fn sample_channel_error<R: Rng + ?Sized>(n: usize, eps: f64, rng: &mut R) -> DVector<Complex64> {
    let dir = DVector::from_fn(n, |_, _| {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        Complex64::new(re, im)
    });
    let norm = dir.norm();
    if norm == 0.0 {
        return dir;
    }
    let radius = eps * rng.gen::<f64>().powf(1.0 / (2.0 * n as f64));
    dir * Complex64::from(radius / norm)
}
