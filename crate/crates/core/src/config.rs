//! Scenario parameters, unit conversions and the physical layout of the
//! antennas and meta-atoms.
//!
//! The on-disk representation ([`ScenarioFile`]) uses dBm for powers and
//! degrees for angles; [`ScenarioConfig`] holds watts and radians. Every
//! length-type field left out of a file defaults to a multiple of the
//! wavelength derived from the configured carrier frequency.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 2.997_924_58e8;

pub fn dbm_to_watts(p_dbm: f64) -> f64 {
    10f64.powf(p_dbm / 10.0) * 1e-3
}

pub fn watts_to_dbm(p_w: f64) -> f64 {
    10.0 * (p_w / 1e-3).log10()
}

/// Linear power ratio from decibels.
pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// How the sensing threshold `Psi = alpha * Gamma` tracks the waveform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PsiMode {
    /// `alpha` is recomputed from the current covariance at every evaluation.
    #[default]
    Recompute,
    /// `alpha` is fixed at its value after initialization.
    Frozen,
}

/// Units of the sensing penalty `g_c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyScale {
    /// `g_c = min(P - Psi, 0)` in the power unit of the scenario.
    Absolute,
    /// `g_c = min(P - Psi, 0) / alpha`, i.e. measured in multiples of the
    /// omnidirectional gain. Independent of the power unit.
    #[default]
    Normalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArmijoParams {
    pub initial_step: f64,
    pub contraction: f64,
    pub sufficient_increase: f64,
    pub max_backtracks: usize,
}

impl Default for ArmijoParams {
    fn default() -> Self {
        Self {
            initial_step: 1.0,
            contraction: 0.5,
            sufficient_increase: 1e-4,
            max_backtracks: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSettings {
    /// Number of random phase draws screened at initialization.
    pub n_init: usize,
    pub max_iters: usize,
    /// Relative change in `F` below which the ascent stops.
    pub convergence_tol: f64,
    pub armijo: ArmijoParams,
    pub psi_mode: PsiMode,
    /// Upper bound on sensing-only correction rounds run after the ascent
    /// when the final state misses the gain threshold. Zero disables them.
    pub restoration_rounds: usize,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            n_init: 16,
            max_iters: 200,
            convergence_tol: 1e-4,
            armijo: ArmijoParams::default(),
            psi_mode: PsiMode::Recompute,
            restoration_rounds: 20,
        }
    }
}

/// Full physical and algorithmic parameterization of one scenario.
///
/// Powers are in watts, lengths in meters and angles in radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScenarioFile", into = "ScenarioFile")]
pub struct ScenarioConfig {
    pub carrier_frequency: f64,
    pub atoms_x: usize,
    pub atoms_z: usize,
    /// Number of metasurface layers `Q`.
    pub layers: usize,
    /// Number of antennas, equal to the number of users `K`.
    pub users: usize,
    pub sim_thickness: f64,
    pub atom_spacing: f64,
    pub atom_area: f64,
    pub total_power: f64,
    pub noise_power: f64,
    pub path_loss_exponent: f64,
    pub reference_distance: f64,
    pub user_positions: Vec<[f64; 3]>,
    pub target_theta: f64,
    pub target_phi: f64,
    /// Normalized beampattern gain threshold `Gamma`, dBi.
    pub gain_threshold_dbi: f64,
    /// Penalty factor `beta`.
    pub penalty: f64,
    pub penalty_scale: PenaltyScale,
    pub optimizer: OptimizerSettings,
    pub rng_seed: u64,
}

/// On-disk form of [`ScenarioConfig`]: powers in dBm, angles in degrees.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default = "default_frequency")]
    pub carrier_frequency: f64,
    #[serde(default = "default_atoms_per_axis")]
    pub atoms_x: usize,
    #[serde(default = "default_atoms_per_axis")]
    pub atoms_z: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_users")]
    pub users: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim_thickness: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atom_spacing: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atom_area: Option<f64>,
    #[serde(default = "default_total_power_dbm")]
    pub total_power_dbm: f64,
    #[serde(default = "default_noise_power_dbm")]
    pub noise_power_dbm: f64,
    #[serde(default = "default_path_loss_exponent")]
    pub path_loss_exponent: f64,
    #[serde(default = "default_reference_distance")]
    pub reference_distance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_positions: Option<Vec<[f64; 3]>>,
    #[serde(default = "default_target_theta_deg")]
    pub target_theta_deg: f64,
    #[serde(default = "default_target_phi_deg")]
    pub target_phi_deg: f64,
    #[serde(default = "default_gain_threshold_dbi")]
    pub gain_threshold_dbi: f64,
    #[serde(default = "default_penalty")]
    pub penalty: f64,
    #[serde(default)]
    pub penalty_scale: PenaltyScale,
    #[serde(default)]
    pub optimizer: OptimizerSettings,
    #[serde(default)]
    pub rng_seed: u64,
}

fn default_frequency() -> f64 {
    28e9
}
fn default_atoms_per_axis() -> usize {
    10
}
fn default_layers() -> usize {
    7
}
fn default_users() -> usize {
    4
}
fn default_total_power_dbm() -> f64 {
    15.0
}
fn default_noise_power_dbm() -> f64 {
    -104.0
}
fn default_path_loss_exponent() -> f64 {
    3.5
}
fn default_reference_distance() -> f64 {
    1.0
}
fn default_target_theta_deg() -> f64 {
    90.0
}
fn default_target_phi_deg() -> f64 {
    45.0
}
fn default_gain_threshold_dbi() -> f64 {
    8.0
}
fn default_penalty() -> f64 {
    2.0
}

/// Users at `(10k, 10, 10k)` meters, `k = 1..=users`.
pub fn default_user_positions(users: usize) -> Vec<[f64; 3]> {
    (1..=users)
        .map(|k| {
            let k = k as f64;
            [10.0 * k, 10.0, 10.0 * k]
        })
        .collect()
}

impl Default for ScenarioFile {
    fn default() -> Self {
        Self {
            carrier_frequency: default_frequency(),
            atoms_x: default_atoms_per_axis(),
            atoms_z: default_atoms_per_axis(),
            layers: default_layers(),
            users: default_users(),
            sim_thickness: None,
            atom_spacing: None,
            atom_area: None,
            total_power_dbm: default_total_power_dbm(),
            noise_power_dbm: default_noise_power_dbm(),
            path_loss_exponent: default_path_loss_exponent(),
            reference_distance: default_reference_distance(),
            user_positions: None,
            target_theta_deg: default_target_theta_deg(),
            target_phi_deg: default_target_phi_deg(),
            gain_threshold_dbi: default_gain_threshold_dbi(),
            penalty: default_penalty(),
            penalty_scale: PenaltyScale::default(),
            optimizer: OptimizerSettings::default(),
            rng_seed: 0,
        }
    }
}

impl TryFrom<ScenarioFile> for ScenarioConfig {
    type Error = Error;

    fn try_from(f: ScenarioFile) -> Result<Self> {
        if !(f.carrier_frequency.is_finite() && f.carrier_frequency > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "carrier_frequency must be positive, got {}",
                f.carrier_frequency
            )));
        }
        let lambda = SPEED_OF_LIGHT / f.carrier_frequency;
        let cfg = ScenarioConfig {
            carrier_frequency: f.carrier_frequency,
            atoms_x: f.atoms_x,
            atoms_z: f.atoms_z,
            layers: f.layers,
            users: f.users,
            sim_thickness: f.sim_thickness.unwrap_or(5.0 * lambda),
            atom_spacing: f.atom_spacing.unwrap_or(lambda / 2.0),
            atom_area: f.atom_area.unwrap_or((lambda / 2.0).powi(2)),
            total_power: dbm_to_watts(f.total_power_dbm),
            noise_power: dbm_to_watts(f.noise_power_dbm),
            path_loss_exponent: f.path_loss_exponent,
            reference_distance: f.reference_distance,
            user_positions: f
                .user_positions
                .unwrap_or_else(|| default_user_positions(f.users)),
            target_theta: f.target_theta_deg.to_radians(),
            target_phi: f.target_phi_deg.to_radians(),
            gain_threshold_dbi: f.gain_threshold_dbi,
            penalty: f.penalty,
            penalty_scale: f.penalty_scale,
            optimizer: f.optimizer,
            rng_seed: f.rng_seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl From<ScenarioConfig> for ScenarioFile {
    fn from(c: ScenarioConfig) -> Self {
        Self {
            carrier_frequency: c.carrier_frequency,
            atoms_x: c.atoms_x,
            atoms_z: c.atoms_z,
            layers: c.layers,
            users: c.users,
            sim_thickness: Some(c.sim_thickness),
            atom_spacing: Some(c.atom_spacing),
            atom_area: Some(c.atom_area),
            total_power_dbm: watts_to_dbm(c.total_power),
            noise_power_dbm: watts_to_dbm(c.noise_power),
            path_loss_exponent: c.path_loss_exponent,
            reference_distance: c.reference_distance,
            user_positions: Some(c.user_positions),
            target_theta_deg: c.target_theta.to_degrees(),
            target_phi_deg: c.target_phi.to_degrees(),
            gain_threshold_dbi: c.gain_threshold_dbi,
            penalty: c.penalty,
            penalty_scale: c.penalty_scale,
            optimizer: c.optimizer,
            rng_seed: c.rng_seed,
        }
    }
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioFile::default()
            .try_into()
            .expect("default scenario is valid")
    }
}

impl ScenarioConfig {
    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_frequency
    }

    /// Meta-atoms per layer, `M = M_x * M_z`.
    pub fn atoms(&self) -> usize {
        self.atoms_x * self.atoms_z
    }

    pub fn layer_spacing(&self) -> f64 {
        self.sim_thickness / self.layers as f64
    }

    pub fn gain_threshold_linear(&self) -> f64 {
        db_to_linear(self.gain_threshold_dbi)
    }

    pub fn noise_powers(&self) -> Vec<f64> {
        vec![self.noise_power; self.users]
    }

    /// Phase scale of the steering vector relative to a half-wavelength pitch.
    pub fn steering_pitch_factor(&self) -> f64 {
        2.0 * self.atom_spacing / self.wavelength()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.layers == 0 {
            return bad("layers (Q) must be at least 1".into());
        }
        if self.atoms() == 0 {
            return bad("atoms_x * atoms_z must be at least 1".into());
        }
        if self.users == 0 {
            return bad("users (K) must be at least 1".into());
        }
        if self.user_positions.len() != self.users {
            return bad(format!(
                "expected {} user positions, got {}",
                self.users,
                self.user_positions.len()
            ));
        }
        for (name, v) in [
            ("sim_thickness", self.sim_thickness),
            ("atom_spacing", self.atom_spacing),
            ("atom_area", self.atom_area),
            ("total_power", self.total_power),
            ("noise_power", self.noise_power),
            ("reference_distance", self.reference_distance),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if !(self.penalty.is_finite() && self.penalty >= 0.0) {
            return bad(format!("penalty must be non-negative and finite, got {}", self.penalty));
        }
        if !self.path_loss_exponent.is_finite() {
            return bad("path_loss_exponent must be finite".into());
        }
        if !(self.target_theta > 0.0 && self.target_theta < PI) {
            return bad(format!(
                "target theta {} deg outside (0, 180)",
                self.target_theta.to_degrees()
            ));
        }
        if !(self.target_phi > -PI / 2.0 && self.target_phi < PI / 2.0) {
            return bad(format!(
                "target phi {} deg outside (-90, 90)",
                self.target_phi.to_degrees()
            ));
        }
        if !self.gain_threshold_dbi.is_finite() {
            return bad("gain_threshold_dbi must be finite".into());
        }
        let opt = &self.optimizer;
        if opt.n_init == 0 {
            return bad("optimizer.n_init must be at least 1".into());
        }
        if !(opt.convergence_tol >= 0.0) {
            return bad("optimizer.convergence_tol must be non-negative".into());
        }
        let a = &opt.armijo;
        if !(a.initial_step > 0.0 && a.contraction > 0.0 && a.contraction < 1.0) {
            return bad("armijo needs initial_step > 0 and contraction in (0, 1)".into());
        }
        if !(a.sufficient_increase >= 0.0 && a.sufficient_increase < 1.0) {
            return bad("armijo sufficient_increase must lie in [0, 1)".into());
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        Ok(toml::from_str(s)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Hex SHA-256 of the canonical TOML rendering; embedded in output files.
    pub fn digest(&self) -> String {
        let text = self.to_toml_string().expect("config always serializes");
        let hash = Sha256::digest(text.as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Positions of the antennas and of every meta-atom.
#[derive(Debug, Clone)]
pub struct GeometryLayout {
    pub antenna_positions: Vec<Vector3<f64>>,
    /// `atom_positions[q][m]`, layer `q` is zero-based here.
    pub atom_positions: Vec<Vec<Vector3<f64>>>,
    pub layer_spacing: f64,
    pub atoms_x: usize,
    pub atoms_z: usize,
}

impl GeometryLayout {
    pub fn layers(&self) -> usize {
        self.atom_positions.len()
    }

    pub fn atoms(&self) -> usize {
        self.atoms_x * self.atoms_z
    }

    pub fn output_layer(&self) -> &[Vector3<f64>] {
        self.atom_positions.last().expect("at least one layer")
    }

    /// Center of the output layer, the reference point for user distances.
    pub fn output_center(&self) -> Vector3<f64> {
        let layer = self.output_layer();
        layer.iter().sum::<Vector3<f64>>() / layer.len() as f64
    }

    /// Grid index of atom `(ix, iz)`; `z` runs fastest, matching `a_x ⊗ a_z`.
    pub fn atom_index(&self, ix: usize, iz: usize) -> usize {
        ix * self.atoms_z + iz
    }
}

fn centered(i: usize, n: usize, pitch: f64) -> f64 {
    (i as f64 - (n as f64 - 1.0) / 2.0) * pitch
}

/// Lays out `Q` parallel layers along `+y`, layer `q` (1-based) at
/// `y = q * layer_spacing`, with the antennas on a centered line along `x`
/// at `y = 0`.
pub fn build_geometry(cfg: &ScenarioConfig) -> Result<GeometryLayout> {
    if cfg.layers == 0 {
        return Err(Error::InvalidConfig("layers (Q) must be at least 1".into()));
    }
    if cfg.atoms() == 0 {
        return Err(Error::InvalidConfig(
            "atoms_x * atoms_z must be at least 1".into(),
        ));
    }
    let spacing = cfg.layer_spacing();
    let pitch = cfg.atom_spacing;
    let atom_positions = (1..=cfg.layers)
        .map(|q| {
            let y = q as f64 * spacing;
            let mut layer = Vec::with_capacity(cfg.atoms());
            for ix in 0..cfg.atoms_x {
                for iz in 0..cfg.atoms_z {
                    layer.push(Vector3::new(
                        centered(ix, cfg.atoms_x, pitch),
                        y,
                        centered(iz, cfg.atoms_z, pitch),
                    ));
                }
            }
            layer
        })
        .collect();
    let antenna_positions = (0..cfg.users)
        .map(|k| Vector3::new(centered(k, cfg.users, pitch), 0.0, 0.0))
        .collect();
    Ok(GeometryLayout {
        antenna_positions,
        atom_positions,
        layer_spacing: spacing,
        atoms_x: cfg.atoms_x,
        atoms_z: cfg.atoms_z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn dbm_conversions() {
        assert_relative_eq!(dbm_to_watts(0.0), 0.001, max_relative = 1e-15);
        assert_relative_eq!(dbm_to_watts(15.0), 0.031_622_776_6, max_relative = 1e-10);
        assert_relative_eq!(dbm_to_watts(-104.0), 3.981_071_705_5e-14, max_relative = 1e-10);
    }

    proptest! {
        #[test]
        fn dbm_round_trip(x in -200.0f64..100.0) {
            let back = watts_to_dbm(dbm_to_watts(x));
            prop_assert!((back - x).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn defaults_match_reference_scenario() {
        let cfg = ScenarioConfig::default();
        assert_eq!(cfg.atoms(), 100);
        assert_eq!(cfg.users, 4);
        assert_eq!(cfg.layers, 7);
        assert_relative_eq!(cfg.wavelength(), 0.010_706_873_5, max_relative = 1e-8);
        assert_relative_eq!(cfg.sim_thickness, 5.0 * cfg.wavelength());
        assert_relative_eq!(cfg.total_power, dbm_to_watts(15.0));
        assert_eq!(cfg.user_positions[3], [40.0, 10.0, 40.0]);
        assert_relative_eq!(cfg.target_phi, PI / 4.0);
        assert_relative_eq!(cfg.penalty, 2.0);
    }

    #[test]
    fn layer_spacing_divides_thickness() {
        let mut cfg = ScenarioConfig::default();
        for q in 1..=9 {
            cfg.layers = q;
            assert_eq!(cfg.layer_spacing() * q as f64, cfg.sim_thickness);
        }
        cfg.layers = 7;
        assert_relative_eq!(cfg.layer_spacing(), 5.0 * cfg.wavelength() / 7.0);
        cfg.layers = 2;
        assert_relative_eq!(cfg.layer_spacing(), 0.026_767_18, max_relative = 1e-6);
    }

    #[test]
    fn toml_round_trip_keeps_units() {
        let mut cfg = ScenarioConfig::default();
        cfg.gain_threshold_dbi = 4.0;
        cfg.rng_seed = 99;
        let text = cfg.to_toml_string().unwrap();
        assert!(text.contains("target_phi_deg = 45"));
        let back = ScenarioConfig::from_toml_str(&text).unwrap();
        assert_eq!(back.rng_seed, 99);
        assert_relative_eq!(back.total_power, cfg.total_power, max_relative = 1e-12);
        assert_relative_eq!(back.target_theta, cfg.target_theta, max_relative = 1e-12);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg = ScenarioConfig::from_toml_str("layers = 3\nusers = 2\n").unwrap();
        assert_eq!(cfg.layers, 3);
        assert_eq!(cfg.user_positions.len(), 2);
        assert_eq!(cfg.optimizer.n_init, 16);
    }

    #[test]
    fn rejects_invalid_values() {
        for text in [
            "layers = 0",
            "atoms_x = 0",
            "users = 0",
            "penalty = -1.0",
            "target_theta_deg = 180.0",
            "target_phi_deg = -90.0",
            "users = 2\nuser_positions = [[1.0, 1.0, 1.0]]",
            "bogus_key = 1",
        ] {
            assert!(ScenarioConfig::from_toml_str(text).is_err(), "{text}");
        }
    }

    #[test]
    fn geometry_grid_properties() {
        let mut cfg = ScenarioConfig::default();
        cfg.atoms_x = 4;
        cfg.atoms_z = 3;
        cfg.layers = 3;
        let g = build_geometry(&cfg).unwrap();
        assert_eq!(g.layers(), 3);
        for (q, layer) in g.atom_positions.iter().enumerate() {
            assert_eq!(layer.len(), 12);
            let y = (q + 1) as f64 * cfg.layer_spacing();
            assert!(layer.iter().all(|p| p.y == y));
            // nearest neighbor distance equals the pitch, points distinct
            for (i, a) in layer.iter().enumerate() {
                let nearest = layer
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, b)| (a - b).norm())
                    .fold(f64::INFINITY, f64::min);
                assert_relative_eq!(nearest, cfg.atom_spacing, max_relative = 1e-12);
            }
            // mirror symmetry about the grid center
            for p in layer {
                assert!(layer.iter().any(|r| (r.x + p.x).abs() < 1e-15 && r.z == p.z));
                assert!(layer.iter().any(|r| (r.z + p.z).abs() < 1e-15 && r.x == p.x));
            }
        }
        assert_eq!(g.antenna_positions.len(), cfg.users);
        assert!(g.antenna_positions.iter().all(|p| p.y == 0.0));
        // z-fastest indexing
        let m = g.atom_index(1, 2);
        assert_eq!(m, 5);
        assert!(g.atom_positions[0][m].z > g.atom_positions[0][m - 1].z);
    }

    #[test]
    fn single_atom_sits_at_grid_center() {
        let mut cfg = ScenarioConfig::default();
        cfg.atoms_x = 1;
        cfg.atoms_z = 1;
        let g = build_geometry(&cfg).unwrap();
        for layer in &g.atom_positions {
            assert_eq!(layer.len(), 1);
            assert_eq!(layer[0].x, 0.0);
            assert_eq!(layer[0].z, 0.0);
        }
    }

    #[test]
    fn geometry_rejects_empty() {
        let mut cfg = ScenarioConfig::default();
        cfg.layers = 0;
        assert!(build_geometry(&cfg).is_err());
        let mut cfg = ScenarioConfig::default();
        cfg.atoms_z = 0;
        assert!(build_geometry(&cfg).is_err());
    }

    #[test]
    fn digest_is_stable_and_sensitive() {
        let a = ScenarioConfig::default();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.rng_seed = 1;
        assert_ne!(a.digest(), b.digest());
    }
}
