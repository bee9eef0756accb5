//! Sum rate, sensing penalty and their closed-form gradients.
//!
//! With `G = L^q Phi_q K^q` split around layer `q`, every scalar of the form
//! `c = u^H G w` is affine in `e^{j Omega^q_m}` and
//! `d|c|^2 / dOmega^q_m = 2 Im[(e^{j Omega^q_m} u^H L^q_{:,m} K^q_{m,:} w)^* c]`.
//! The rows `u^H L^q` and columns `K^q w` are produced for all layers by one
//! backward and one forward sweep, so a full gradient costs about as much as
//! two objective evaluations.

use std::f64::consts::LOG2_E;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::channel::ChannelSet;
use crate::config::{PenaltyScale, PsiMode, ScenarioConfig};
use crate::error::{Error, Result};
use crate::propagation::PropagationSet;
use crate::wavefield::{effective_precoder, scale_cols, scale_rows, steering_vector_scaled, SimState, SteeringVector};

/// `gamma_k = |h_k^H G w_k|^2 p_k / (sum_{k' != k} |h_k^H G w_k'|^2 p_k' + N_k)`.
pub fn sinr(
    h: &DMatrix<Complex64>,
    g: &DMatrix<Complex64>,
    w1: &DMatrix<Complex64>,
    p: &DVector<f64>,
    noise: &[f64],
) -> Vec<f64> {
    let c = h * g * w1;
    sinr_from_couplings(&c, p, noise)
}

fn sinr_from_couplings(c: &DMatrix<Complex64>, p: &DVector<f64>, noise: &[f64]) -> Vec<f64> {
    let k_users = p.len();
    (0..k_users)
        .map(|k| {
            let interference: f64 = (0..k_users)
                .filter(|&j| j != k)
                .map(|j| c[(k, j)].norm_sqr() * p[j])
                .sum();
            c[(k, k)].norm_sqr() * p[k] / (interference + noise[k])
        })
        .collect()
}

/// How `alpha` in `Psi = Gamma * alpha` is obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PsiRule {
    /// `alpha = ||R_t||_F / sqrt(M)` at the evaluated state.
    Recompute,
    /// `alpha` held at a fixed value.
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveReport {
    pub gamma: Vec<f64>,
    /// Sum rate, bits/s/Hz.
    pub rate: f64,
    /// `g_c = min(P_target - Psi, 0)`, divided by the reference `alpha`
    /// under [`PenaltyScale::Normalized`].
    pub penalty_term: f64,
    /// `F = R + beta g_c`.
    pub objective: f64,
    pub target_gain: f64,
    pub psi: f64,
    /// `||R_t||_F / sqrt(M)` at this state.
    pub alpha: f64,
}

impl ObjectiveReport {
    /// Target gain relative to the omnidirectional level `alpha`, dBi.
    pub fn normalized_gain_dbi(&self) -> f64 {
        10.0 * (self.target_gain / self.alpha).log10()
    }

    pub fn constraint_active(&self) -> bool {
        self.target_gain <= self.psi
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientPair {
    /// `Q x M`, `dF / dOmega^q_m`.
    pub d_omega: DMatrix<f64>,
    /// `dF / dp_k`.
    pub d_p: DVector<f64>,
}

impl GradientPair {
    pub fn zeros(layers: usize, atoms: usize, users: usize) -> Self {
        Self {
            d_omega: DMatrix::zeros(layers, atoms),
            d_p: DVector::zeros(users),
        }
    }

    pub fn norm_squared(&self) -> f64 {
        self.d_omega.norm_squared() + self.d_p.norm_squared()
    }

    pub fn is_finite(&self) -> bool {
        self.d_omega.iter().chain(self.d_p.iter()).all(|x| x.is_finite())
    }
}

/// Everything needed to evaluate and differentiate `F` for one channel
/// realization.
#[derive(Debug, Clone)]
pub struct Problem {
    pub prop: PropagationSet,
    pub chan: ChannelSet,
    pub steering: SteeringVector,
    pub noise: Vec<f64>,
    pub total_power: f64,
    /// Penalty factor `beta`.
    pub penalty: f64,
    /// Linear `Gamma`.
    pub gain_threshold: f64,
    pub penalty_scale: PenaltyScale,
    pub psi: PsiRule,
    pub psi_mode: PsiMode,
}

/// Cached forward quantities at one state.
struct Evaluation {
    /// `G W_1`, `M x K`.
    b: DMatrix<Complex64>,
    /// `c[(k, k')] = h_k^H G w_k'`.
    couplings: DMatrix<Complex64>,
    /// `a^H G w_k`.
    sensing: Vec<Complex64>,
    /// `(G w_k)^H (G w_k')`.
    gram: DMatrix<Complex64>,
    /// Interference plus noise per user.
    interference: Vec<f64>,
    report: ObjectiveReport,
    /// `||R_t||_F^2`.
    frob_sq: f64,
}

impl Problem {
    pub fn new(prop: PropagationSet, chan: ChannelSet, cfg: &ScenarioConfig) -> Result<Self> {
        if chan.h.ncols() != prop.atoms() || chan.h.nrows() != prop.users() {
            return Err(Error::Dimension(format!(
                "channel is {}x{}, propagation has {} users and {} atoms",
                chan.h.nrows(),
                chan.h.ncols(),
                prop.users(),
                prop.atoms()
            )));
        }
        if cfg.atoms() != prop.atoms() {
            return Err(Error::Dimension("config atom count differs from propagation".into()));
        }
        let steering = steering_vector_scaled(
            cfg.target_theta,
            cfg.target_phi,
            cfg.atoms_x,
            cfg.atoms_z,
            cfg.steering_pitch_factor(),
        )?;
        Ok(Self {
            prop,
            chan,
            steering,
            noise: cfg.noise_powers(),
            total_power: cfg.total_power,
            penalty: cfg.penalty,
            gain_threshold: cfg.gain_threshold_linear(),
            penalty_scale: cfg.penalty_scale,
            psi: PsiRule::Recompute,
            psi_mode: cfg.optimizer.psi_mode,
        })
    }

    pub fn layers(&self) -> usize {
        self.prop.layers()
    }

    pub fn atoms(&self) -> usize {
        self.prop.atoms()
    }

    pub fn users(&self) -> usize {
        self.prop.users()
    }

    fn evaluate(&self, state: &SimState) -> Evaluation {
        let b = effective_precoder(state, &self.prop).expect("state matches problem dimensions");
        let couplings = &self.chan.h * &b;
        let a = &self.steering.a;
        let sensing: Vec<Complex64> = b.column_iter().map(|col| a.dotc(&col)).collect();
        let gram = b.adjoint() * &b;
        let p = &state.p;
        let k_users = p.len();

        let interference: Vec<f64> = (0..k_users)
            .map(|k| {
                (0..k_users)
                    .filter(|&j| j != k)
                    .map(|j| couplings[(k, j)].norm_sqr() * p[j])
                    .sum::<f64>()
                    + self.noise[k]
            })
            .collect();
        let gamma: Vec<f64> = (0..k_users)
            .map(|k| couplings[(k, k)].norm_sqr() * p[k] / interference[k])
            .collect();
        let rate: f64 = gamma.iter().map(|g| g.ln_1p()).sum::<f64>() * LOG2_E;

        let target_gain: f64 = sensing.iter().zip(p.iter()).map(|(s, pk)| pk * s.norm_sqr()).sum();
        let mut frob_sq = 0.0;
        for k in 0..k_users {
            for j in 0..k_users {
                frob_sq += p[k] * p[j] * gram[(k, j)].norm_sqr();
            }
        }
        let alpha = frob_sq.sqrt() / (self.atoms() as f64).sqrt();
        let reference = self.reference_alpha(alpha);
        let psi = self.gain_threshold * reference;
        let mut penalty_term = (target_gain - psi).min(0.0);
        if self.penalty_scale == PenaltyScale::Normalized && reference > 0.0 {
            penalty_term /= reference;
        }
        let objective = rate + self.penalty * penalty_term;
        Evaluation {
            b,
            couplings,
            sensing,
            gram,
            interference,
            report: ObjectiveReport {
                gamma,
                rate,
                penalty_term,
                objective,
                target_gain,
                psi,
                alpha,
            },
            frob_sq,
        }
    }

    pub fn objective(&self, state: &SimState) -> ObjectiveReport {
        self.evaluate(state).report
    }

    /// Analytic `dF/dOmega` and `dF/dp`.
    pub fn gradient(&self, state: &SimState) -> GradientPair {
        let ev = self.evaluate(state);
        GradientPair {
            d_omega: self.phase_gradient(state, &ev),
            d_p: self.power_gradient(state, &ev),
        }
    }

    pub fn grad_phase(&self, state: &SimState) -> DMatrix<f64> {
        let ev = self.evaluate(state);
        self.phase_gradient(state, &ev)
    }

    pub fn grad_power(&self, state: &SimState) -> DVector<f64> {
        let ev = self.evaluate(state);
        self.power_gradient(state, &ev)
    }

    /// Whether the sensing branch of `min{., 0}` is differentiated. The kink
    /// itself is assigned to the active branch.
    fn sensing_active(&self, ev: &Evaluation) -> bool {
        self.penalty != 0.0 && ev.report.target_gain <= ev.report.psi
    }

    fn reference_alpha(&self, alpha: f64) -> f64 {
        match self.psi {
            PsiRule::Recompute => alpha,
            PsiRule::Fixed(a) => a,
        }
    }

    /// Chain coefficients `(dg/dP, dg/d||R_t||_F^2)` of the active penalty.
    fn penalty_weights(&self, ev: &Evaluation) -> (f64, f64) {
        let alpha = ev.report.alpha;
        let reference = self.reference_alpha(alpha);
        let recompute = matches!(self.psi, PsiRule::Recompute) && ev.frob_sq > 0.0;
        // d alpha = d||R_t||_F^2 / (2 ||R_t||_F sqrt(M))
        let d_alpha = if recompute {
            1.0 / (2.0 * ev.frob_sq.sqrt() * (self.atoms() as f64).sqrt())
        } else {
            0.0
        };
        match self.penalty_scale {
            PenaltyScale::Absolute => (1.0, -self.gain_threshold * d_alpha),
            PenaltyScale::Normalized if reference > 0.0 => {
                // g = P / alpha - Gamma
                (1.0 / reference, -ev.report.target_gain / (reference * reference) * d_alpha)
            }
            PenaltyScale::Normalized => (1.0, 0.0),
        }
    }

    /// Coefficients multiplying `d|c_{u,k'}|^2` in `dF`, one row per probe
    /// vector `u` in the order `h_1..h_K, a, Gw_1..Gw_K`.
    fn coupling_weights(&self, state: &SimState, ev: &Evaluation) -> DMatrix<f64> {
        let k_users = self.users();
        let p = &state.p;
        let mut weights = DMatrix::zeros(2 * k_users + 1, k_users);
        for k in 0..k_users {
            let inr = ev.interference[k];
            let total = inr + ev.couplings[(k, k)].norm_sqr() * p[k];
            for j in 0..k_users {
                weights[(k, j)] = if j == k {
                    LOG2_E * p[k] / total
                } else {
                    LOG2_E * p[j] * (1.0 / total - 1.0 / inr)
                };
            }
        }
        if self.sensing_active(ev) {
            let beta = self.penalty;
            let (w_gain, w_frob) = self.penalty_weights(ev);
            for j in 0..k_users {
                weights[(k_users, j)] = beta * w_gain * p[j];
            }
            // d||R_t||_F^2 = 2 sum_{k,k'} p_k p_k' d_right|c_{Gw_k, k'}|^2
            if w_frob != 0.0 {
                for k in 0..k_users {
                    for j in 0..k_users {
                        weights[(k_users + 1 + k, j)] = beta * w_frob * 2.0 * p[k] * p[j];
                    }
                }
            }
        }
        weights
    }

    fn phase_gradient(&self, state: &SimState, ev: &Evaluation) -> DMatrix<f64> {
        let (q_layers, m_atoms, k_users) = (self.layers(), self.atoms(), self.users());
        let weights = self.coupling_weights(state, ev);
        let probes = if weights.rows(k_users + 1, k_users).iter().any(|&w| w != 0.0) {
            2 * k_users + 1
        } else {
            k_users + 1
        };

        // Probe rows u^H and the corresponding values c_{u,k'}.
        let mut rows = DMatrix::<Complex64>::zeros(probes, m_atoms);
        let mut values = DMatrix::<Complex64>::zeros(probes, k_users);
        rows.rows_mut(0, k_users).copy_from(&self.chan.h);
        values.rows_mut(0, k_users).copy_from(&ev.couplings);
        rows.row_mut(k_users).copy_from(&self.steering.a.adjoint());
        for j in 0..k_users {
            values[(k_users, j)] = ev.sensing[j];
        }
        if probes > k_users + 1 {
            rows.rows_mut(k_users + 1, k_users).copy_from(&ev.b.adjoint());
            values.rows_mut(k_users + 1, k_users).copy_from(&ev.gram);
        }

        let phasors: Vec<Vec<Complex64>> = (0..q_layers).map(|q| state.layer_phasors(q)).collect();

        // right[q] = K^q W_1
        let mut right = Vec::with_capacity(q_layers);
        right.push(self.prop.w1.clone());
        for q in 1..q_layers {
            let mut x = right[q - 1].clone();
            scale_rows(&mut x, &phasors[q - 1]);
            right.push(self.prop.layer_matrix(q + 1) * x);
        }
        // left[q] = U L^q
        let mut left = vec![DMatrix::zeros(0, 0); q_layers];
        left[q_layers - 1] = rows;
        for q in (0..q_layers - 1).rev() {
            let mut x = left[q + 1].clone();
            scale_cols(&mut x, &phasors[q + 1]);
            left[q] = x * self.prop.layer_matrix(q + 2);
        }

        let mut grad = DMatrix::zeros(q_layers, m_atoms);
        for q in 0..q_layers {
            let (l, r) = (&left[q], &right[q]);
            for m in 0..m_atoms {
                let ph = phasors[q][m];
                let mut acc = 0.0;
                for u in 0..probes {
                    let lu = l[(u, m)] * ph;
                    for j in 0..k_users {
                        let w = weights[(u, j)];
                        if w == 0.0 {
                            continue;
                        }
                        let b = lu * r[(m, j)];
                        acc += w * (b.conj() * values[(u, j)]).im;
                    }
                }
                grad[(q, m)] = 2.0 * acc;
            }
        }
        grad
    }

    fn power_gradient(&self, state: &SimState, ev: &Evaluation) -> DVector<f64> {
        let k_users = self.users();
        let p = &state.p;
        let totals: Vec<f64> = (0..k_users)
            .map(|k| ev.interference[k] + ev.couplings[(k, k)].norm_sqr() * p[k])
            .collect();
        let active = self.sensing_active(ev);
        let (w_gain, w_frob) = self.penalty_weights(ev);
        DVector::from_fn(k_users, |j, _| {
            // direct term in its p-free form, finite at p_j = 0
            let mut rate = ev.couplings[(j, j)].norm_sqr() / totals[j];
            for k in (0..k_users).filter(|&k| k != j) {
                rate += ev.couplings[(k, j)].norm_sqr() * (1.0 / totals[k] - 1.0 / ev.interference[k]);
            }
            let mut d = LOG2_E * rate;
            if active {
                let mut sens = w_gain * ev.sensing[j].norm_sqr();
                if w_frob != 0.0 {
                    let d_frob: f64 = 2.0
                        * (0..k_users)
                            .map(|k| p[k] * ev.gram[(j, k)].norm_sqr())
                            .sum::<f64>();
                    sens += w_frob * d_frob;
                }
                d += self.penalty * sens;
            }
            d
        })
    }
}

/// Finite-difference stencil along one coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x + h) - f(x - h)) / 2h`, error `O(h^2)`.
    Second,
    /// `(-f(x + 2h) + 8 f(x + h) - 8 f(x - h) + f(x - 2h)) / 12h`, error `O(h^4)`.
    Fourth,
}

impl Stencil {
    fn apply(self, mut at: impl FnMut(f64) -> f64, h: f64) -> f64 {
        match self {
            Stencil::Second => (at(h) - at(-h)) / (2.0 * h),
            Stencil::Fourth => (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h),
        }
    }
}

/// Central differences of `f` over every phase and every power.
pub fn central_difference<F>(f: F, state: &SimState, phase_step: f64, power_step: f64) -> GradientPair
where
    F: Fn(&SimState) -> f64,
{
    central_difference_with(f, state, phase_step, power_step, Stencil::Second)
}

pub fn central_difference_with<F>(
    f: F,
    state: &SimState,
    phase_step: f64,
    power_step: f64,
    stencil: Stencil,
) -> GradientPair
where
    F: Fn(&SimState) -> f64,
{
    let mut grad = GradientPair::zeros(state.layers(), state.atoms(), state.users());
    let mut probe = state.clone();
    for q in 0..state.layers() {
        for m in 0..state.atoms() {
            let x = state.omega[(q, m)];
            grad.d_omega[(q, m)] = stencil.apply(
                |dx| {
                    probe.omega[(q, m)] = x + dx;
                    f(&probe)
                },
                phase_step,
            );
            probe.omega[(q, m)] = x;
        }
    }
    for k in 0..state.users() {
        let x = state.p[k];
        grad.d_p[k] = stencil.apply(
            |dx| {
                probe.p[k] = x + dx;
                f(&probe)
            },
            power_step,
        );
        probe.p[k] = x;
    }
    grad
}

/// Finite-difference gradient of [`Problem::objective`].
pub fn fd_gradient(problem: &Problem, state: &SimState, phase_step: f64, power_step: f64) -> GradientPair {
    central_difference(|s| problem.objective(s).objective, state, phase_step, power_step)
}
