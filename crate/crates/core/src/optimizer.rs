//! Multi-start projected gradient ascent over phases and powers.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ArmijoParams, OptimizerSettings, PsiMode};
use crate::objective::{GradientPair, ObjectiveReport, Problem, PsiRule};
use crate::wavefield::{effective_precoder, SimState};

/// Water-filling over parallel channels with gains `g_k`:
/// `p_k = max(0, mu - 1/g_k)` with `sum p = total_power`.
///
/// The water level is bracketed by bisection and then solved exactly on the
/// resulting active set. All-zero gains fall back to a uniform split.
pub fn water_filling(gains: &[f64], total_power: f64) -> Vec<f64> {
    let k = gains.len();
    if k == 0 {
        return Vec::new();
    }
    if !gains.iter().any(|&g| g > 0.0) {
        return vec![total_power / k as f64; k];
    }
    let inv: Vec<f64> = gains
        .iter()
        .map(|&g| if g > 0.0 { 1.0 / g } else { f64::INFINITY })
        .collect();
    let filled = |mu: f64| inv.iter().map(|&i| (mu - i).max(0.0)).sum::<f64>();
    let min_inv = inv.iter().copied().fold(f64::INFINITY, f64::min);
    let (mut lo, mut hi) = (min_inv, min_inv + total_power);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if filled(mid) < total_power {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * hi {
            break;
        }
    }
    let level = 0.5 * (lo + hi);
    let active: Vec<usize> = (0..k).filter(|&i| inv[i] < level).collect();
    let exact = (total_power + active.iter().map(|&i| inv[i]).sum::<f64>()) / active.len() as f64;
    inv.iter().map(|&i| (exact - i).max(0.0)).collect()
}

/// Direct-link gains `|h_k^H G w_k|^2 / N_k` at the given phases.
pub fn direct_gains(problem: &Problem, omega: &DMatrix<f64>) -> Vec<f64> {
    let probe = SimState::new(omega.clone(), DVector::zeros(problem.users()));
    let b = effective_precoder(&probe, &problem.prop).expect("dimensions match");
    (0..problem.users())
        .map(|k| {
            let c = problem.chan.h.row(k).transpose().dot(&b.column(k));
            c.norm_sqr() / problem.noise[k]
        })
        .collect()
}

/// Phases with water-filled powers.
pub fn water_filled_state(problem: &Problem, omega: DMatrix<f64>) -> SimState {
    let p = water_filling(&direct_gains(problem, &omega), problem.total_power);
    SimState::new(omega, DVector::from_vec(p))
}

/// Draws `n_init` uniform phase tensors, water-fills each and keeps the one
/// with the largest `F`. Candidates are drawn in order from `rng` and the
/// first maximum wins ties.
pub fn init_multistart<R: Rng + ?Sized>(
    problem: &Problem,
    n_init: usize,
    rng: &mut R,
) -> (SimState, ObjectiveReport) {
    let (q, m) = (problem.layers(), problem.atoms());
    let draws: Vec<DMatrix<f64>> = (0..n_init.max(1))
        .map(|_| DMatrix::from_fn(q, m, |_, _| rng.random::<f64>() * 2.0 * PI))
        .collect();
    let scored: Vec<(SimState, ObjectiveReport)> = draws
        .into_par_iter()
        .map(|omega| {
            let st = water_filled_state(problem, omega);
            let rep = problem.objective(&st);
            (st, rep)
        })
        .collect();
    let mut best = 0;
    for (i, (_, rep)) in scored.iter().enumerate() {
        if rep.objective > scored[best].1.objective {
            best = i;
        }
    }
    scored.into_iter().nth(best).expect("at least one candidate")
}

/// Which gradient blocks were all zero and left unscaled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegenerateBlocks {
    pub phase: bool,
    pub power: bool,
}

/// Scales the phase block so its largest magnitude is `pi` and the power
/// block so its largest magnitude is `total_power / K`.
pub fn normalize_gradients(grad: &GradientPair, total_power: f64) -> (GradientPair, DegenerateBlocks) {
    let mut out = grad.clone();
    let mut flags = DegenerateBlocks::default();
    let eta = grad.d_omega.amax();
    if eta > 0.0 {
        out.d_omega *= PI / eta;
    } else {
        flags.phase = true;
    }
    let rho = grad.d_p.amax();
    let k = grad.d_p.len().max(1) as f64;
    if rho > 0.0 {
        out.d_p *= total_power / (rho * k);
    } else {
        flags.power = true;
    }
    (out, flags)
}

/// Restores feasibility: shifts every power up uniformly so that, after
/// rescaling to the budget, the smallest one is `1e-6 * total_power / K`,
/// then rescales. Powers already above the floor are only rescaled.
pub fn project_power(p: &DVector<f64>, total_power: f64) -> DVector<f64> {
    let k = p.len();
    if k == 0 {
        return p.clone();
    }
    let floor = 1e-6 * total_power / k as f64;
    let (min, sum) = (p.min(), p.sum());
    if sum > 0.0 && min * total_power / sum >= floor {
        return p * (total_power / sum);
    }
    // shift by s with c (min + s) = floor and c (sum + K s) = total_power;
    // t = min + s is solved for directly to avoid cancellation
    let kf = k as f64;
    let t = (sum - kf * min) / (total_power / floor - kf);
    let shifted = p.map(|x| (x - min) + t);
    let shifted_sum = shifted.sum();
    if !(shifted_sum > 0.0) {
        return DVector::from_element(k, total_power / k as f64);
    }
    shifted * (total_power / shifted_sum)
}

#[derive(Debug, Clone)]
pub struct ArmijoOutcome {
    pub state: SimState,
    /// Accepted step, zero when the search was exhausted.
    pub step: f64,
    pub backtracks: usize,
    pub objective: f64,
}

/// `(Omega + mu d_Omega, project(p + mu d_p))`.
pub fn trial_state(state: &SimState, direction: &GradientPair, mu: f64, total_power: f64) -> SimState {
    let omega = &state.omega + &direction.d_omega * mu;
    let p = project_power(&(&state.p + &direction.d_p * mu), total_power);
    SimState::new(omega, p)
}

/// Backtracking search along the normalized ascent direction.
///
/// Tries `mu = mu_0, mu_0 c, mu_0 c^2, ...` and accepts the first candidate
/// with `F(x') >= F(x) + c_1 mu ||d||^2`. Powers are projected back onto the
/// budget at every trial point.
pub fn armijo_update<F>(
    state: &SimState,
    current: f64,
    direction: &GradientPair,
    total_power: f64,
    params: &ArmijoParams,
    objective: F,
) -> ArmijoOutcome
where
    F: Fn(&SimState) -> f64,
{
    let unchanged = |backtracks| ArmijoOutcome {
        state: state.clone(),
        step: 0.0,
        backtracks,
        objective: current,
    };
    let norm_sq = direction.norm_squared();
    if norm_sq == 0.0 {
        return unchanged(0);
    }
    let mut mu = params.initial_step;
    for backtracks in 0..=params.max_backtracks {
        let cand = trial_state(state, direction, mu, total_power);
        let f = objective(&cand);
        if f >= current + params.sufficient_increase * mu * norm_sq {
            return ArmijoOutcome {
                state: cand,
                step: mu,
                backtracks,
                objective: f,
            };
        }
        mu *= params.contraction;
    }
    unchanged(params.max_backtracks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub objective: f64,
    pub rate: f64,
    pub penalty_term: f64,
    pub target_gain: f64,
    pub psi: f64,
    pub step: f64,
    pub backtracks: usize,
    pub degenerate: DegenerateBlocks,
    /// Powers after the update.
    pub p: Vec<f64>,
}

impl IterationRecord {
    fn new(
        iter: usize,
        rep: &ObjectiveReport,
        state: &SimState,
        step: f64,
        backtracks: usize,
        degenerate: DegenerateBlocks,
    ) -> Self {
        Self {
            iter,
            objective: rep.objective,
            rate: rep.rate,
            penalty_term: rep.penalty_term,
            target_gain: rep.target_gain,
            psi: rep.psi,
            step,
            backtracks,
            degenerate,
            p: state.p.iter().copied().collect(),
        }
    }
}

/// Full history of one ascent run. Record 0 is the initialization.
#[derive(Debug, Clone)]
pub struct OptimizerTrace {
    pub records: Vec<IterationRecord>,
    pub state: SimState,
    pub report: ObjectiveReport,
    pub converged: bool,
    pub iterations: usize,
    /// Sensing-only correction steps applied after the ascent.
    pub restoration_steps: usize,
    /// Threshold rule in force after initialization.
    pub psi: PsiRule,
}

/// Gradient ascent from a given starting point.
pub fn ascend(problem: &Problem, start: SimState, settings: &OptimizerSettings) -> OptimizerTrace {
    let init = problem.objective(&start);
    let frozen;
    let pb = match settings.psi_mode {
        PsiMode::Frozen => {
            let mut p = problem.clone();
            p.psi = PsiRule::Fixed(init.alpha);
            frozen = p;
            &frozen
        }
        PsiMode::Recompute => problem,
    };
    let mut report = pb.objective(&start);
    let mut records = vec![IterationRecord::new(0, &report, &start, 0.0, 0, DegenerateBlocks::default())];
    let mut state = start;
    let mut converged = false;
    let mut iterations = 0;
    for iter in 1..=settings.max_iters {
        let grad = pb.gradient(&state);
        let (dir, degenerate) = normalize_gradients(&grad, pb.total_power);
        let out = armijo_update(
            &state,
            report.objective,
            &dir,
            pb.total_power,
            &settings.armijo,
            |s| pb.objective(s).objective,
        );
        let previous = report.objective;
        state = out.state;
        report = pb.objective(&state);
        records.push(IterationRecord::new(iter, &report, &state, out.step, out.backtracks, degenerate));
        iterations = iter;
        if (report.objective - previous).abs() <= settings.convergence_tol * report.objective.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    let (state, report, restoration_steps) = restore_feasibility(pb, state, report, settings.restoration_rounds);
    OptimizerTrace {
        records,
        state,
        report,
        converged,
        iterations,
        restoration_steps,
        psi: pb.psi,
    }
}

/// Smallest step ladder `mu = 2^-20 .. 1` tried along each restoration direction.
const RESTORATION_LADDER: i32 = 20;

/// Pushes a state that ended just below the gain threshold back onto the
/// feasible side with the smallest steps that get there.
///
/// Directions are normalized gradients of `F` with `beta` inflated so the
/// sensing term dominates. Along each one the step grows geometrically and
/// stops at the first feasible point; otherwise the candidate with the largest
/// `g_c` is kept if it improves. Returns the number of accepted steps.
pub fn restore_feasibility(
    problem: &Problem,
    mut state: SimState,
    mut report: ObjectiveReport,
    rounds: usize,
) -> (SimState, ObjectiveReport, usize) {
    if problem.penalty <= 0.0 || report.penalty_term >= 0.0 {
        return (state, report, 0);
    }
    let mut sensing = problem.clone();
    sensing.penalty = 1e6 * problem.penalty;
    let mut steps = 0;
    for _ in 0..rounds {
        let (dir, _) = normalize_gradients(&sensing.gradient(&state), problem.total_power);
        if dir.norm_squared() == 0.0 {
            break;
        }
        let mut best: Option<(SimState, ObjectiveReport)> = None;
        for j in (0..=RESTORATION_LADDER).rev() {
            let cand = trial_state(&state, &dir, 0.5f64.powi(j), problem.total_power);
            let rep = problem.objective(&cand);
            let feasible = rep.penalty_term >= 0.0;
            let better = best.as_ref().map_or(rep.penalty_term > report.penalty_term, |(_, b)| {
                rep.penalty_term > b.penalty_term
            });
            if better || feasible {
                best = Some((cand, rep));
            }
            if feasible {
                break;
            }
        }
        match best {
            Some((s, r)) => {
                state = s;
                report = r;
                steps += 1;
            }
            None => break,
        }
        if report.penalty_term >= 0.0 {
            break;
        }
    }
    (state, report, steps)
}

/// Multi-start initialization followed by the ascent loop.
pub fn optimize<R: Rng + ?Sized>(problem: &Problem, settings: &OptimizerSettings, rng: &mut R) -> OptimizerTrace {
    let (start, _) = init_multistart(problem, settings.n_init, rng);
    ascend(problem, start, settings)
}
