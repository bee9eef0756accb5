//! Seeded experiment drivers and their CSV/JSON artifacts.
//!
//! Every text artifact starts with `#` comment lines carrying the config
//! digest, the seed and the crate version, so identical inputs give
//! byte-identical files. Realization `r` under seed `s` always draws its
//! channel from `channel_rng(s, r)` and its multistart phases from
//! `optimizer_rng(s, r)`, whatever the thread schedule.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelModel, ChannelSet};
use crate::config::{build_geometry, GeometryLayout, ScenarioConfig};
use crate::error::{Error, Result};
use crate::objective::{central_difference_with, Problem, Stencil};
use crate::optimizer::{optimize, OptimizerTrace};
use crate::propagation::{build_propagation, PropagationSet};
use crate::rng::{channel_rng, optimizer_rng, stream};
use crate::wavefield::{effective_precoder, gain_from_precoder, steering_vector_scaled, SimState};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Relative slack on `P_target >= Psi` when counting a state as satisfying
/// the sensing constraint.
pub const CONSTRAINT_SLACK: f64 = 1e-6;

/// Geometry, couplings and channel statistics shared by all realizations of
/// one configuration.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub cfg: ScenarioConfig,
    pub layout: GeometryLayout,
    pub prop: PropagationSet,
    pub model: ChannelModel,
}

impl Scenario {
    pub fn new(cfg: &ScenarioConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = build_geometry(cfg)?;
        let prop = build_propagation(&layout, cfg)?;
        let model = ChannelModel::new(&layout, cfg)?;
        Ok(Self {
            cfg: cfg.clone(),
            layout,
            prop,
            model,
        })
    }

    pub fn channel(&self, seed: u64, realization: u64) -> ChannelSet {
        self.model.sample(&mut channel_rng(seed, realization))
    }

    pub fn problem(&self, seed: u64, realization: u64) -> Result<Problem> {
        Problem::new(self.prop.clone(), self.channel(seed, realization), &self.cfg)
    }

    pub fn run(&self, seed: u64, realization: u64) -> Result<(Problem, OptimizerTrace)> {
        let problem = self.problem(seed, realization)?;
        let trace = optimize(&problem, &self.cfg.optimizer, &mut optimizer_rng(seed, realization));
        Ok((problem, trace))
    }
}

/// Whether `P_target >= Psi (1 - CONSTRAINT_SLACK)`.
pub fn constraint_satisfied(target_gain: f64, psi: f64) -> bool {
    target_gain >= psi * (1.0 - CONSTRAINT_SLACK)
}

/// Provenance comment block placed at the top of every artifact.
pub fn header(cfg: &ScenarioConfig, seed: u64) -> String {
    format!(
        "# config_sha256={}\n# seed={seed}\n# version={ARTIFACT_VERSION}\n",
        cfg.digest()
    )
}

/// Writes `contents` to `path`, creating parent directories.
pub fn write_artifact(path: impl AsRef<Path>, contents: &str) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

/// Columns `iter,F,R,g_c,P_target,mu,backtracks`.
pub fn trace_csv(cfg: &ScenarioConfig, seed: u64, trace: &OptimizerTrace) -> String {
    let mut out = header(cfg, seed);
    out.push_str("iter,F,R,g_c,P_target,mu,backtracks\n");
    for r in &trace.records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.iter, r.objective, r.rate, r.penalty_term, r.target_gain, r.step, r.backtracks
        );
    }
    out
}

/// Optimized configuration as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalState {
    /// One row of phases per layer, radians.
    pub omega: Vec<Vec<f64>>,
    /// Per-user powers, watts.
    pub p: Vec<f64>,
    #[serde(rename = "Psi")]
    pub psi: f64,
    pub alpha: f64,
}

impl FinalState {
    pub fn from_trace(trace: &OptimizerTrace) -> Self {
        let omega = trace
            .state
            .omega
            .row_iter()
            .map(|row| row.iter().copied().collect())
            .collect();
        Self {
            omega,
            p: trace.state.p.iter().copied().collect(),
            psi: trace.report.psi,
            alpha: trace.report.alpha,
        }
    }

    pub fn to_state(&self) -> Result<SimState> {
        let layers = self.omega.len();
        let atoms = self.omega.first().map_or(0, Vec::len);
        if layers == 0 || atoms == 0 || self.omega.iter().any(|row| row.len() != atoms) {
            return Err(Error::InvalidState("phase rows are empty or ragged".into()));
        }
        if self.p.is_empty() || self.p.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidState("powers must be finite and non-negative".into()));
        }
        if self.omega.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::InvalidState("phases must be finite".into()));
        }
        let omega = DMatrix::from_fn(layers, atoms, |q, m| self.omega[q][m]);
        Ok(SimState::new(omega, DVector::from_vec(self.p.clone())))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// One per-iteration curve of the ascent.
#[derive(Debug, Clone)]
pub struct ConvergenceCurve {
    pub layers: usize,
    pub seed: u64,
    pub trace: OptimizerTrace,
}

impl ConvergenceCurve {
    /// Columns `iter,F,R,g_c`.
    pub fn to_csv(&self, cfg: &ScenarioConfig) -> String {
        let mut out = header(cfg, self.seed);
        let _ = writeln!(out, "# layers={}", self.layers);
        out.push_str("iter,F,R,g_c\n");
        for r in &self.trace.records {
            let _ = writeln!(out, "{},{},{},{}", r.iter, r.objective, r.rate, r.penalty_term);
        }
        out
    }

    pub fn file_name(&self) -> String {
        format!("convergence_q{}_seed{}.csv", self.layers, self.seed)
    }
}

/// Runs realization 0 under each seed for every layer count, in the order
/// `layers x seeds`.
pub fn run_convergence(cfg: &ScenarioConfig, layers: &[usize], seeds: &[u64]) -> Result<Vec<ConvergenceCurve>> {
    let mut curves = Vec::with_capacity(layers.len() * seeds.len());
    for &q in layers {
        let mut c = cfg.clone();
        c.layers = q;
        let scenario = Scenario::new(&c)?;
        let traces = seeds
            .par_iter()
            .map(|&seed| scenario.run(seed, 0).map(|(_, t)| t))
            .collect::<Result<Vec<_>>>()?;
        curves.extend(seeds.iter().zip(traces).map(|(&seed, trace)| ConvergenceCurve {
            layers: q,
            seed,
            trace,
        }));
    }
    Ok(curves)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    /// Number of metasurface layers `Q`.
    Layers,
    /// Normalized gain threshold `Gamma`, dBi.
    GainThreshold,
}

impl SweepVariable {
    pub fn column(self) -> &'static str {
        match self {
            SweepVariable::Layers => "Q",
            SweepVariable::GainThreshold => "Gamma_dBi",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub variable: SweepVariable,
    pub values: Vec<f64>,
    /// Channel realizations per sweep value.
    pub n_ch: usize,
    pub base: ScenarioConfig,
    pub seed: u64,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::InvalidConfig("sweep value list is empty".into()));
        }
        if self.n_ch == 0 {
            return Err(Error::InvalidConfig("n_ch must be at least 1".into()));
        }
        for &v in &self.values {
            self.config_for(v)?.validate()?;
        }
        Ok(())
    }

    /// Base config with the swept parameter set to `value`.
    pub fn config_for(&self, value: f64) -> Result<ScenarioConfig> {
        let mut cfg = self.base.clone();
        match self.variable {
            SweepVariable::Layers => {
                if !(value >= 1.0 && value.fract() == 0.0) {
                    return Err(Error::InvalidConfig(format!("layer count {value} is not a positive integer")));
                }
                cfg.layers = value as usize;
            }
            SweepVariable::GainThreshold => {
                if !value.is_finite() {
                    return Err(Error::InvalidConfig(format!("gain threshold {value} is not finite")));
                }
                cfg.gain_threshold_dbi = value;
            }
        }
        Ok(cfg)
    }
}

/// Converged outcome of one channel realization.
#[derive(Debug, Clone, PartialEq)]
pub struct RealizationResult {
    pub realization: u64,
    /// Sum rate at the final state, bits/s/Hz.
    pub se: f64,
    /// `P_target / alpha`, dBi.
    pub gain_dbi: f64,
    pub satisfied: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub mean_se: f64,
    /// Population standard deviation over realizations.
    pub std_se: f64,
    pub mean_gain_dbi: f64,
    pub satisfaction_rate: f64,
    pub realizations: Vec<RealizationResult>,
}

impl SweepRow {
    fn aggregate(value: f64, realizations: Vec<RealizationResult>) -> Self {
        let n = realizations.len() as f64;
        let mean_se = realizations.iter().map(|r| r.se).sum::<f64>() / n;
        let var = realizations.iter().map(|r| (r.se - mean_se).powi(2)).sum::<f64>() / n;
        let mean_gain_dbi = realizations.iter().map(|r| r.gain_dbi).sum::<f64>() / n;
        let satisfied = realizations.iter().filter(|r| r.satisfied).count() as f64;
        Self {
            value,
            mean_se,
            std_se: var.sqrt(),
            mean_gain_dbi,
            satisfaction_rate: satisfied / n,
            realizations,
        }
    }
}

/// Optimizes `n_ch` matched realizations for every sweep value.
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    spec.values
        .iter()
        .map(|&value| {
            let scenario = Scenario::new(&spec.config_for(value)?)?;
            let results = (0..spec.n_ch as u64)
                .into_par_iter()
                .map(|r| {
                    let (_, trace) = scenario.run(spec.seed, r)?;
                    let rep = &trace.report;
                    Ok(RealizationResult {
                        realization: r,
                        se: rep.rate,
                        gain_dbi: rep.normalized_gain_dbi(),
                        satisfied: constraint_satisfied(rep.target_gain, rep.psi),
                        iterations: trace.iterations,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SweepRow::aggregate(value, results))
        })
        .collect()
}

/// Averaged table, one row per sweep value.
pub fn sweep_csv(spec: &SweepSpec, rows: &[SweepRow]) -> String {
    let mut out = header(&spec.base, spec.seed);
    let _ = writeln!(out, "# n_ch={}", spec.n_ch);
    let _ = writeln!(
        out,
        "{},mean_SE,std_SE,mean_gain_dBi,satisfaction_rate",
        spec.variable.column()
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.value, r.mean_se, r.std_se, r.mean_gain_dbi, r.satisfaction_rate
        );
    }
    out
}

/// Per-realization table behind [`sweep_csv`].
pub fn sweep_realizations_csv(spec: &SweepSpec, rows: &[SweepRow]) -> String {
    let mut out = header(&spec.base, spec.seed);
    let _ = writeln!(
        out,
        "{},realization,SE,gain_dBi,satisfied,iterations",
        spec.variable.column()
    );
    for row in rows {
        for r in &row.realizations {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                row.value, r.realization, r.se, r.gain_dbi, r.satisfied as u8, r.iterations
            );
        }
    }
    out
}

/// One beampattern sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamSample {
    pub theta_deg: f64,
    pub phi_deg: f64,
    /// `a^H R_t a`, watts.
    pub gain: f64,
}

impl BeamSample {
    /// Gain relative to the omnidirectional level `alpha`, dBi.
    pub fn gain_dbi(&self, alpha: f64) -> f64 {
        10.0 * (self.gain / alpha).log10()
    }
}

/// Angles on a `step_deg` lattice strictly inside the steering domain:
/// `theta` in (0, 180) and `phi` in (-90, 90). A 1 degree step gives
/// `theta = 1..=179` and `phi = -89..=89`.
pub fn angle_grid(step_deg: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(step_deg > 0.0 && step_deg < 90.0) {
        return Err(Error::InvalidConfig(format!("grid step {step_deg} deg outside (0, 90)")));
    }
    let interior = |lo: f64, hi: f64| -> Vec<f64> {
        (1..)
            .map(|k| lo + k as f64 * step_deg)
            .take_while(|&x| x < hi - 1e-9)
            .collect()
    };
    Ok((interior(0.0, 180.0), interior(-90.0, 90.0)))
}

/// Beampattern `P(theta, phi) = sum_k p_k |a^H G w_k|^2` of a state.
pub struct Beampattern {
    b: DMatrix<Complex64>,
    p: DVector<f64>,
    atoms_x: usize,
    atoms_z: usize,
    pitch_factor: f64,
    pub alpha: f64,
}

impl Beampattern {
    pub fn new(cfg: &ScenarioConfig, prop: &PropagationSet, state: &SimState) -> Result<Self> {
        let b = effective_precoder(state, prop)?;
        let gram = b.adjoint() * &b;
        let p = &state.p;
        let mut frob_sq = 0.0;
        for k in 0..p.len() {
            for j in 0..p.len() {
                frob_sq += p[k] * p[j] * gram[(k, j)].norm_sqr();
            }
        }
        Ok(Self {
            b,
            p: p.clone(),
            atoms_x: cfg.atoms_x,
            atoms_z: cfg.atoms_z,
            pitch_factor: cfg.steering_pitch_factor(),
            alpha: frob_sq.sqrt() / (cfg.atoms() as f64).sqrt(),
        })
    }

    pub fn sample(&self, theta_deg: f64, phi_deg: f64) -> Result<BeamSample> {
        let sv = steering_vector_scaled(
            theta_deg.to_radians(),
            phi_deg.to_radians(),
            self.atoms_x,
            self.atoms_z,
            self.pitch_factor,
        )?;
        Ok(BeamSample {
            theta_deg,
            phi_deg,
            gain: gain_from_precoder(&sv.a, &self.b, &self.p),
        })
    }

    /// Full grid, `theta` outer and `phi` inner.
    pub fn grid(&self, step_deg: f64) -> Result<Vec<BeamSample>> {
        let (thetas, phis) = angle_grid(step_deg)?;
        let pairs: Vec<(f64, f64)> = thetas
            .iter()
            .flat_map(|&t| phis.iter().map(move |&f| (t, f)))
            .collect();
        pairs.par_iter().map(|&(t, f)| self.sample(t, f)).collect()
    }

    /// `theta` fixed, `phi` swept over the grid.
    pub fn theta_cut(&self, theta_deg: f64, step_deg: f64) -> Result<Vec<BeamSample>> {
        angle_grid(step_deg)?.1.into_iter().map(|f| self.sample(theta_deg, f)).collect()
    }

    /// `phi` fixed, `theta` swept over the grid.
    pub fn phi_cut(&self, phi_deg: f64, step_deg: f64) -> Result<Vec<BeamSample>> {
        angle_grid(step_deg)?.0.into_iter().map(|t| self.sample(t, phi_deg)).collect()
    }

    /// Columns `theta_deg,phi_deg,gain,gain_dBi`.
    pub fn csv(&self, cfg: &ScenarioConfig, seed: u64, samples: &[BeamSample]) -> String {
        let mut out = header(cfg, seed);
        let _ = writeln!(out, "# alpha={}", self.alpha);
        out.push_str("theta_deg,phi_deg,gain,gain_dBi\n");
        for s in samples {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                s.theta_deg,
                s.phi_deg,
                s.gain,
                s.gain_dbi(self.alpha)
            );
        }
        out
    }
}

/// Artifacts of one beampattern run, keyed by file name.
pub fn beampattern_artifacts(
    cfg: &ScenarioConfig,
    prop: &PropagationSet,
    state: &SimState,
    seed: u64,
    step_deg: f64,
    prefix: &str,
) -> Result<Vec<(String, String)>> {
    let bp = Beampattern::new(cfg, prop, state)?;
    let theta_c = cfg.target_theta.to_degrees();
    let phi_c = cfg.target_phi.to_degrees();
    Ok(vec![
        (format!("{prefix}beampattern.csv"), bp.csv(cfg, seed, &bp.grid(step_deg)?)),
        (format!("{prefix}beampattern_theta_cut.csv"), bp.csv(cfg, seed, &bp.theta_cut(theta_c, step_deg)?)),
        (format!("{prefix}beampattern_phi_cut.csv"), bp.csv(cfg, seed, &bp.phi_cut(phi_c, step_deg)?)),
    ])
}

/// Same config with the sensing penalty switched off.
pub fn comm_only(cfg: &ScenarioConfig) -> ScenarioConfig {
    let mut c = cfg.clone();
    c.penalty = 0.0;
    c
}

/// Interleaved `re,im` columns, one CSV row per matrix row.
pub fn complex_matrix_csv(cfg: &ScenarioConfig, seed: u64, name: &str, m: &DMatrix<Complex64>) -> String {
    let mut out = header(cfg, seed);
    let _ = writeln!(out, "# matrix={name} rows={} cols={}", m.nrows(), m.ncols());
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|z| format!("{},{}", z.re, z.im)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn real_matrix_csv(cfg: &ScenarioConfig, seed: u64, name: &str, m: &DMatrix<f64>) -> String {
    let mut out = header(cfg, seed);
    let _ = writeln!(out, "# matrix={name} rows={} cols={}", m.nrows(), m.ncols());
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// `W_1` and every inter-layer `W_q`.
pub fn propagation_artifacts(cfg: &ScenarioConfig, prop: &PropagationSet) -> Vec<(String, String)> {
    let seed = cfg.rng_seed;
    let mut files = vec![("w1.csv".to_string(), complex_matrix_csv(cfg, seed, "W_1", &prop.w1))];
    for q in 2..=prop.layers() {
        let name = format!("W_{q}");
        files.push((format!("w{q}.csv"), complex_matrix_csv(cfg, seed, &name, prop.layer_matrix(q))));
    }
    files
}

/// Channel rows `h_k^H`, the correlation matrix and the path losses.
pub fn channel_artifacts(cfg: &ScenarioConfig, seed: u64, realization: u64, chan: &ChannelSet) -> Vec<(String, String)> {
    let mut ups = header(cfg, seed);
    ups.push_str("user,upsilon\n");
    for (k, u) in chan.upsilon.iter().enumerate() {
        let _ = writeln!(ups, "{k},{u}");
    }
    vec![
        (
            format!("channel_r{realization}.csv"),
            complex_matrix_csv(cfg, seed, "H", &chan.h),
        ),
        ("correlation.csv".to_string(), real_matrix_csv(cfg, seed, "R_Q", &chan.correlation)),
        ("path_loss.csv".to_string(), ups),
    ]
}

/// Worst-case agreement between closed-form and finite-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub trials: usize,
    /// Largest `|analytic - fd| / max(|analytic|, |fd|, floor / rel)`.
    pub max_relative_error: f64,
    /// Components checked across all trials.
    pub components: usize,
    /// Components outside `max(rel * scale, floor)`.
    pub failures: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Dimensions and tolerances of a gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckSpec {
    pub atoms_x: usize,
    pub atoms_z: usize,
    pub layers: usize,
    pub users: usize,
    pub trials: usize,
    pub seed: u64,
    pub rel: f64,
    pub floor: f64,
}

impl Default for GradCheckSpec {
    fn default() -> Self {
        Self {
            atoms_x: 4,
            atoms_z: 4,
            layers: 3,
            users: 2,
            trials: 10,
            seed: 0,
            rel: 1e-5,
            floor: 1e-10,
        }
    }
}

/// Compares [`Problem::gradient`] with a fourth-order central stencil at
/// random states of independent instances built from `base`. Even trials sit
/// far above the gain threshold and odd ones far below it, so both branches
/// of the penalty are covered.
pub fn grad_check(base: &ScenarioConfig, spec: &GradCheckSpec) -> Result<GradCheckReport> {
    let GradCheckSpec {
        trials, seed, rel, floor, ..
    } = *spec;
    let mut cfg = base.clone();
    cfg.atoms_x = spec.atoms_x;
    cfg.atoms_z = spec.atoms_z;
    cfg.layers = spec.layers;
    cfg.users = spec.users;
    if cfg.user_positions.len() != spec.users {
        cfg.user_positions = crate::config::default_user_positions(spec.users);
    }
    let scenario = Scenario::new(&cfg)?;
    let outcomes: Vec<(f64, usize, usize)> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut pb = scenario.problem(seed, t)?;
            pb.gain_threshold = if t % 2 == 0 { 1e-3 } else { 1e3 };
            let mut rng = stream(seed, 2 * trials as u64 + t);
            let omega = DMatrix::from_fn(pb.layers(), pb.atoms(), |_, _| {
                rng.random::<f64>() * std::f64::consts::TAU
            });
            let raw: Vec<f64> = (0..pb.users()).map(|_| 0.1 + rng.random::<f64>()).collect();
            let sum: f64 = raw.iter().sum();
            let p = DVector::from_iterator(raw.len(), raw.iter().map(|x| x * pb.total_power / sum));
            let state = SimState::new(omega, p);
            let analytic = pb.gradient(&state);
            let fd = central_difference_with(
                |s| pb.objective(s).objective,
                &state,
                1e-3,
                1e-3 * pb.total_power / pb.users() as f64,
                Stencil::Fourth,
            );
            let mut worst = 0.0f64;
            let mut count = 0;
            let mut failures = 0;
            let pairs = analytic
                .d_omega
                .iter()
                .zip(fd.d_omega.iter())
                .chain(analytic.d_p.iter().zip(fd.d_p.iter()));
            for (a, f) in pairs {
                let err = (a - f).abs();
                let scale = a.abs().max(f.abs());
                worst = worst.max(err / scale.max(floor / rel));
                if err > (rel * scale).max(floor) || !err.is_finite() {
                    failures += 1;
                }
                count += 1;
            }
            Ok((worst, count, failures))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradCheckReport {
        trials,
        max_relative_error: outcomes.iter().map(|o| o.0).fold(0.0, f64::max),
        components: outcomes.iter().map(|o| o.1).sum(),
        failures: outcomes.iter().map(|o| o.2).sum(),
    })
}
