use nalgebra::DMatrix;
use num_complex::Complex64;
use sim_isac::config::default_user_positions;
use sim_isac::experiments::{
    constraint_satisfied, grad_check, run_convergence, run_sweep, Beampattern, GradCheckSpec, Scenario, SweepSpec,
    SweepVariable,
};
use sim_isac::optimizer::{ascend, init_multistart};
use sim_isac::rng::{optimizer_rng, stream};
use sim_isac::ScenarioConfig;

fn small(atoms: usize, layers: usize, users: usize) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::default();
    cfg.atoms_x = atoms;
    cfg.atoms_z = atoms;
    cfg.layers = layers;
    cfg.users = users;
    cfg.user_positions = default_user_positions(users);
    cfg
}

#[test]
fn gradients_agree_on_larger_instances() {
    let spec = GradCheckSpec {
        atoms_x: 5,
        atoms_z: 5,
        layers: 4,
        users: 4,
        trials: 4,
        seed: 3,
        ..GradCheckSpec::default()
    };
    let report = grad_check(&ScenarioConfig::default(), &spec).unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn channel_mean_is_zero_within_four_sigma() {
    let cfg = small(3, 2, 2);
    let scenario = Scenario::new(&cfg).unwrap();
    let n = 20_000;
    let m = cfg.atoms();
    let mut rng = stream(8, 0);
    let mut sum = DMatrix::<Complex64>::zeros(cfg.users, m);
    for _ in 0..n {
        sum += scenario.model.sample(&mut rng).h;
    }
    for k in 0..cfg.users {
        // each part of an entry has variance upsilon / 2
        let sigma = (scenario.model.upsilon[k] / 2.0 / n as f64).sqrt();
        for i in 0..m {
            let mean = sum[(k, i)] / n as f64;
            assert!(mean.re.abs() <= 4.0 * sigma && mean.im.abs() <= 4.0 * sigma, "{k} {i} {mean}");
        }
    }
}

#[test]
fn more_initial_draws_never_start_lower() {
    let cfg = small(4, 3, 2);
    let scenario = Scenario::new(&cfg).unwrap();
    for r in 0..4 {
        let pb = scenario.problem(1, r).unwrap();
        let (_, one) = init_multistart(&pb, 1, &mut optimizer_rng(1, r));
        let (_, many) = init_multistart(&pb, 16, &mut optimizer_rng(1, r));
        assert!(many.objective >= one.objective);
    }
}

#[test]
fn deeper_stack_ends_higher_in_median() {
    let cfg = ScenarioConfig::default();
    let seeds: Vec<u64> = (0..10).collect();
    let curves = run_convergence(&cfg, &[1, 7], &seeds).unwrap();
    let finals = |q: usize| {
        let mut f: Vec<f64> = curves
            .iter()
            .filter(|c| c.layers == q)
            .map(|c| c.trace.records.last().unwrap().objective)
            .collect();
        f.sort_by(f64::total_cmp);
        (f[4] + f[5]) / 2.0
    };
    assert!(finals(7) >= finals(1), "{} < {}", finals(7), finals(1));
}

#[test]
fn stricter_threshold_lowers_mean_rate() {
    let spec = SweepSpec {
        variable: SweepVariable::GainThreshold,
        values: vec![4.0, 8.0, 12.0],
        n_ch: 20,
        base: small(6, 3, 3),
        seed: 2,
    };
    let rows = run_sweep(&spec).unwrap();
    for w in rows.windows(2) {
        assert!(w[1].mean_se <= w[0].mean_se, "{} -> {}", w[0].mean_se, w[1].mean_se);
    }
}

#[test]
fn optimized_beam_meets_threshold_at_target() {
    let cfg = ScenarioConfig::default();
    let scenario = Scenario::new(&cfg).unwrap();
    let (_, trace) = scenario.run(4, 0).unwrap();
    let bp = Beampattern::new(&cfg, &scenario.prop, &trace.state).unwrap();
    let at_target = bp.sample(90.0, 45.0).unwrap().gain;
    assert!(constraint_satisfied(at_target, cfg.gain_threshold_linear() * bp.alpha));
    assert!((bp.alpha - trace.report.alpha).abs() <= 1e-12 * bp.alpha);
}

#[test]
fn comm_only_ignores_the_target() {
    let mut cfg = ScenarioConfig::default();
    cfg.penalty = 0.0;
    let scenario = Scenario::new(&cfg).unwrap();
    let (pb, trace) = scenario.run(4, 0).unwrap();
    assert!(trace.records.iter().all(|r| r.objective == r.rate));
    assert_eq!(trace.restoration_steps, 0);
    let again = ascend(&pb, trace.state.clone(), &cfg.optimizer);
    assert!(again.report.rate >= trace.report.rate - 1e-12);
}
