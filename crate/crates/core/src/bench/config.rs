//! TOML configuration with `[system]`, `[solver]` and `[sweep]` sections.
//!
//! ```toml
//! [system]
//! antennas = 32
//! rf_chains = 4
//! users = 3
//! carrier_hz = 30e9
//! p_th_dbm = 20
//! sigma2_dbm = -84
//! eps_factor = 0.005
//! delta = 0.05
//! seed = 7
//!
//! [system.placement]
//! r_min = 10.0
//! r_max = 20.0
//! theta_min_deg = -60.0
//! theta_max_deg = 60.0
//!
//! [solver]
//! max_outer_iters = 40
//!
//! [sweep]
//! variable = "delta"
//! values = [0.0, 0.5]
//! trials = 20
//! schemes = ["RSMA-SHB", "SDMA-SHB"]
//! ```
//!
//! Power-like fields take either linear watts (`p_th`, `sigma2`) or dBm with
//! the `_dbm` suffix, never both. The element spacing defaults to half a
//! wavelength of the configured carrier.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{dbm_to_watt, Placement, SolverSettings, SystemConfig, SPEED_OF_LIGHT};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(f64),
    Many(Vec<f64>),
}

impl OneOrMany {
    fn into_vec(self) -> Vec<f64> {
        match self {
            OneOrMany::One(x) => vec![x],
            OneOrMany::Many(v) => v,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlacementSection {
    pub r_min: Option<f64>,
    pub r_max: Option<f64>,
    pub theta_min: Option<f64>,
    pub theta_max: Option<f64>,
    pub theta_min_deg: Option<f64>,
    pub theta_max_deg: Option<f64>,
    pub enforce_fresnel: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub antennas: Option<usize>,
    pub rf_chains: Option<usize>,
    pub users: Option<usize>,
    pub carrier_hz: Option<f64>,
    pub spacing_m: Option<f64>,
    pub p_th: Option<f64>,
    pub p_th_dbm: Option<f64>,
    pub sigma2: Option<OneOrMany>,
    pub sigma2_dbm: Option<OneOrMany>,
    pub eps_factor: Option<f64>,
    pub delta: Option<OneOrMany>,
    pub seed: Option<u64>,
    pub placement: Option<PlacementSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// One of `eps_factor`, `delta`, `rf_chains`, `users`, `p_th`, `p_th_dbm`, `distance`, `none`.
    #[serde(default = "none_variable")]
    pub variable: String,
    #[serde(default)]
    pub values: Vec<f64>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub schemes: Vec<String>,
    pub seed: Option<u64>,
    /// Reuse the same realizations for every sweep value.
    #[serde(default)]
    pub pair_across_values: bool,
}

fn none_variable() -> String {
    "none".into()
}

fn default_trials() -> usize {
    1
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub system: SystemSection,
    #[serde(default)]
    pub solver: SolverSettings,
    pub sweep: Option<SweepSection>,
}

fn pick_power(name: &str, watts: Option<f64>, dbm: Option<f64>) -> Result<Option<f64>> {
    match (watts, dbm) {
        (Some(_), Some(_)) => Err(Error::Config(format!("give either {name} or {name}_dbm, not both"))),
        (Some(w), None) => Ok(Some(w)),
        (None, Some(d)) => Ok(Some(dbm_to_watt(d))),
        (None, None) => Ok(None),
    }
}

fn pick_angle(name: &str, rad: Option<f64>, deg: Option<f64>) -> Result<Option<f64>> {
    match (rad, deg) {
        (Some(_), Some(_)) => Err(Error::Config(format!("give either {name} or {name}_deg, not both"))),
        (Some(r), None) => Ok(Some(r)),
        (None, Some(d)) => Ok(Some(d.to_radians())),
        (None, None) => Ok(None),
    }
}

impl ConfigFile {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Validated system configuration, defaults filled in.
    pub fn system_config(&self) -> Result<SystemConfig> {
        let s = &self.system;
        let mut cfg = SystemConfig::default();
        if let Some(n) = s.antennas {
            cfg.antennas = n;
        }
        if let Some(l) = s.rf_chains {
            cfg.rf_chains = l;
        }
        if let Some(k) = s.users {
            cfg.users = k;
        }
        if let Some(f) = s.carrier_hz {
            cfg.carrier_hz = f;
        }
        cfg.spacing_m = s.spacing_m.unwrap_or(SPEED_OF_LIGHT / cfg.carrier_hz / 2.0);
        if let Some(p) = pick_power("p_th", s.p_th, s.p_th_dbm)? {
            cfg.p_th = p;
        }
        match (&s.sigma2, &s.sigma2_dbm) {
            (Some(_), Some(_)) => return Err(Error::Config("give either sigma2 or sigma2_dbm, not both".into())),
            (Some(w), None) => cfg.sigma2 = w.clone().into_vec(),
            (None, Some(d)) => cfg.sigma2 = d.clone().into_vec().into_iter().map(dbm_to_watt).collect(),
            (None, None) => {}
        }
        if let Some(e) = s.eps_factor {
            cfg.eps_factor = e;
        }
        if let Some(d) = &s.delta {
            cfg.delta = d.clone().into_vec();
        }
        if let Some(seed) = s.seed {
            cfg.seed = seed;
        }
        if let Some(p) = &s.placement {
            let base = Placement::default();
            cfg.placement = Placement {
                r_min: p.r_min.unwrap_or(base.r_min),
                r_max: p.r_max.unwrap_or(base.r_max),
                theta_min: pick_angle("theta_min", p.theta_min, p.theta_min_deg)?.unwrap_or(base.theta_min),
                theta_max: pick_angle("theta_max", p.theta_max, p.theta_max_deg)?.unwrap_or(base.theta_max),
                enforce_fresnel: p.enforce_fresnel.unwrap_or(base.enforce_fresnel),
            };
        }
        cfg.solver = self.solver.clone();
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NoiseModel;

    #[test]
    fn parses_documented_example() {
        let text = r#"
            [system]
            antennas = 32
            rf_chains = 4
            users = 3
            carrier_hz = 30e9
            p_th_dbm = 20
            sigma2_dbm = -84
            eps_factor = 0.005
            delta = 0.05
            seed = 7

            [system.placement]
            r_min = 10.0
            r_max = 20.0
            theta_min_deg = -60.0
            theta_max_deg = 60.0

            [solver]
            max_outer_iters = 40
            noise_model = "frozen"

            [sweep]
            variable = "delta"
            values = [0.0, 0.5]
            trials = 20
            schemes = ["RSMA-SHB", "SDMA-SHB"]
        "#;
        let file = ConfigFile::from_toml_str(text).unwrap();
        let cfg = file.system_config().unwrap();
        assert_eq!((cfg.antennas, cfg.rf_chains, cfg.users, cfg.seed), (32, 4, 3, 7));
        assert!((cfg.p_th - 0.1).abs() < 1e-15);
        assert!((cfg.sigma2[0] - 10f64.powf(-11.4)).abs() < 1e-25);
        assert!((cfg.placement.theta_max - std::f64::consts::FRAC_PI_3).abs() < 1e-12);
        assert!((cfg.spacing_m - cfg.wavelength() / 2.0).abs() < 1e-15);
        assert_eq!(cfg.solver.noise_model, NoiseModel::Frozen);
        assert_eq!(cfg.solver.rho0, 100.0);
        let sweep = file.sweep.unwrap();
        assert_eq!(sweep.trials, 20);
        assert_eq!(sweep.values, vec![0.0, 0.5]);
    }

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ConfigFile::from_toml_str("").unwrap().system_config().unwrap();
        assert_eq!(cfg, SystemConfig::default());
    }

    #[test]
    fn rejects_duplicate_units_and_unknown_keys() {
        assert!(ConfigFile::from_toml_str("[system]\np_th = 0.1\np_th_dbm = 20\n")
            .unwrap()
            .system_config()
            .is_err());
        assert!(matches!(ConfigFile::from_toml_str("[system]\nantenas = 3\n"), Err(Error::Toml(_))));
        assert!(matches!(ConfigFile::from_toml_str("[solver]\nrho = 3\n"), Err(Error::Toml(_))));
    }

    #[test]
    fn rejects_invalid_dimensions() {
        let file = ConfigFile::from_toml_str("[system]\nantennas = 30\nrf_chains = 4\n").unwrap();
        assert!(matches!(file.system_config(), Err(Error::Config(_))));
    }

    #[test]
    fn per_user_lists() {
        let text = "[system]\nusers = 2\ndelta = [0.1, 0.2]\nsigma2 = [1e-12, 2e-12]\n";
        let cfg = ConfigFile::from_toml_str(text).unwrap().system_config().unwrap();
        assert_eq!(cfg.delta_vec(), vec![0.1, 0.2]);
        assert_eq!(cfg.sigma2_vec(), vec![1e-12, 2e-12]);
    }
}
