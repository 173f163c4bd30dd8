use impabs::abstraction::{build_abstraction, Quantization, TransitionTable};
use impabs::certificate::{Certificate, KInfFn, LocalSimFn, SampleConfig};
use impabs::compose::{compose_simfn, ComposedSystem};
use impabs::dsl::{Arity, DynamicsExpr, VectorField};
use impabs::flow::IntegratorConfig;
use impabs::grid::BoxSet;
use impabs::model::{NetworkSpec, SubsystemSpec};
use impabs::verify::*;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn single() -> (NetworkSpec, TransitionTable, LocalSimFn) {
    let a = Arity { n: 1, q: 0, m: 1 };
    let sub = SubsystemSpec {
        name: "solo".into(),
        n: 1,
        q: 0,
        m: 1,
        state_bounds: BoxSet(vec![[0.0, 1.0]]),
        internal_bounds: BoxSet(vec![]),
        external_bounds: BoxSet(vec![[0.0, 0.2]]),
        flow: VectorField::parse(&["-x1 + u1"], a).unwrap(),
        jump: VectorField::parse(&["0.5*x1"], a).unwrap(),
        tau: 0.1,
        z_min: 1,
        z_max: 2,
        phi: 0.0,
    };
    let table = build_abstraction(&sub, Quantization { eta_x: 0.05, eta_w: 1.0, eta_u: 0.1 }, &IntegratorConfig::default())
        .unwrap()
        .0;
    let cert = Certificate {
        storage: DynamicsExpr::parse("(x1 - xh1)^2").unwrap(),
        alpha_lower: KInfFn::power(1.0, 2.0).unwrap(),
        alpha_upper: KInfFn::power(1.0, 2.0).unwrap(),
        kappa_c: 2.0,
        kappa_d: 0.25,
        d_c: DMatrix::zeros(1, 1),
        d_d: DMatrix::zeros(1, 1),
        rho_uc: KInfFn::zero(),
        rho_ud: KInfFn::zero(),
        gamma_hat: KInfFn::new(vec![[2.0, 1.0], [1.0, 2.0]]).unwrap(),
        epsilon: 0.5,
        delta: None,
    };
    let f = LocalSimFn::from_certificate(&cert, &sub).unwrap();
    let spec = NetworkSpec {
        subsystems: vec![sub],
        coupling: DMatrix::zeros(0, 1),
        phi_slack: None,
    };
    (spec, table, f)
}

#[test]
fn single_subsystem_global_fit_matches_local_max_form() {
    let (spec, table, f) = single();
    let seed = 17;
    let local = verify_condition2_local(
        &spec.subsystems[0],
        &table,
        &f,
        &IntegratorConfig::default(),
        &LocalFitOptions {
            seed: subsystem_seed(seed, 0),
            stability_rerun: false,
            ..Default::default()
        },
    )
    .unwrap();
    let sys = ComposedSystem::new(vec![table], spec.coupling.clone(), vec![0.0]).unwrap();
    let g = compose_simfn(vec![1.0], vec![f]).unwrap();
    let global = verify_condition2_global(
        &spec,
        &sys,
        &g,
        &IntegratorConfig::default(),
        &GlobalFitOptions {
            seed,
            stability_rerun: false,
            ..Default::default()
        },
        &SampleConfig::default(),
    )
    .unwrap();
    assert!(global.exhaustive);
    assert_eq!(global.tuples, local.tuples);
    let picked = global.max_form.iter().fold(global.max_form[0].clone(), |b, s| if s.eps < b.eps { s.clone() } else { b });
    assert_eq!(picked.sigma, local.max_form.sigma);
    assert!((picked.eps - local.max_form.eps).abs() <= 1e-12, "{} vs {}", picked.eps, local.max_form.eps);
    assert!(global.passed, "{global:?}");
}

#[test]
fn single_subsystem_trajectories_stay_within_bound() {
    let (spec, table, f) = single();
    let sys = ComposedSystem::new(vec![table], spec.coupling.clone(), vec![0.0]).unwrap();
    let g = compose_simfn(vec![1.0], vec![f]).unwrap();
    let cfg = IntegratorConfig::default();
    let fit = verify_condition2_global(&spec, &sys, &g, &cfg, &GlobalFitOptions::default(), &SampleConfig::default()).unwrap();
    let fitted = FittedConstants {
        sigma_tilde: fit.sigma_tilde,
        eps_tilde: fit.eps_tilde,
        rho_u_tilde: fit.rho_u_tilde.clone(),
        alpha_tilde: fit.alpha_tilde.clone().unwrap(),
    };
    let opts = TrajectoryOptions {
        runs: 200,
        horizon: 30,
        seed: 3,
        ..Default::default()
    };
    let a = verify_trajectory_bound(&spec, &sys, &g, &fitted, &cfg, &opts).unwrap();
    assert!(a.passed, "{a:?}");
    assert!(a.max_ratio <= 1.0);
    let b = verify_trajectory_bound(&spec, &sys, &g, &fitted, &cfg, &opts).unwrap();
    assert_eq!(a, b);
}

#[derive(Debug, Clone)]
struct RandomGame {
    succ: Vec<Vec<Option<Vec<usize>>>>,
}

impl FiniteGame for RandomGame {
    fn num_states(&self) -> usize {
        self.succ.len()
    }
    fn num_inputs(&self) -> usize {
        self.succ[0].len()
    }
    fn successors(&self, s: usize, u: usize) -> Option<Vec<usize>> {
        self.succ[s][u].clone()
    }
}

fn game_strategy() -> impl Strategy<Value = (RandomGame, Vec<bool>)> {
    (2usize..12, 1usize..4).prop_flat_map(|(n, m)| {
        let edge = prop_oneof![1 => Just(None), 6 => prop::collection::vec(0..n, 1..4).prop_map(Some)];
        (
            prop::collection::vec(prop::collection::vec(edge, m), n).prop_map(|succ| RandomGame { succ }),
            prop::collection::vec(prop::bool::weighted(0.8), n),
        )
    })
}

proptest! {
    // The winning set is the complement of the environment's attractor to the unsafe states.
    #[test]
    fn safety_fixpoint_matches_attractor((game, safe) in game_strategy()) {
        let ctl = safety_fixpoint(&game, |s| safe[s]);
        let n = game.num_states();
        let mut lose: Vec<bool> = safe.iter().map(|b| !b).collect();
        loop {
            let next: Vec<bool> = (0..n).map(|s| lose[s] || (0..game.num_inputs()).all(|u| match &game.succ[s][u] {
                None => true,
                Some(t) => t.iter().any(|&v| lose[v]),
            })).collect();
            if next == lose { break; }
            lose = next;
        }
        let expected: Vec<usize> = (0..n).filter(|&s| !lose[s]).collect();
        prop_assert_eq!(&ctl.winning, &expected);
        prop_assert!(ctl.iterations <= n + 1);
        for (s, inputs) in &ctl.allowed {
            prop_assert!(!inputs.is_empty());
            for &u in inputs {
                let t = game.succ[*s][u].as_ref().unwrap();
                prop_assert!(t.iter().all(|v| !lose[*v]));
            }
        }
    }
}

#[test]
fn coarser_grid_does_not_shrink_local_bound() {
    let (spec, table, f) = single();
    let sub = &spec.subsystems[0];
    let cfg = IntegratorConfig::default();
    let opts = LocalFitOptions {
        stability_rerun: false,
        ..Default::default()
    };
    let fine = verify_condition2_local(sub, &table, &f, &cfg, &opts).unwrap();
    let coarse_table = build_abstraction(sub, Quantization { eta_x: 0.1, eta_w: 1.0, eta_u: 0.1 }, &cfg).unwrap().0;
    let coarse = verify_condition2_local(sub, &coarse_table, &f, &cfg, &opts).unwrap();
    assert!(coarse.eps_bar >= fine.eps_bar, "{} < {}", coarse.eps_bar, fine.eps_bar);
}

#[test]
fn condition1_margin_and_witness() {
    let (spec, _, f) = single();
    let bounds = &spec.subsystems[0].state_bounds;
    let ok = verify_condition1(&f, &KInfFn::power(1.0, 2.0).unwrap(), bounds, &SampleConfig::default());
    // the multiplier at c = 0 is 1, so the margin touches zero on the diagonal
    assert!(ok.passed);
    let bad = verify_condition1(&f, &KInfFn::power(2.0, 2.0).unwrap(), bounds, &SampleConfig::default());
    assert!(!bad.passed);
    assert!(bad.witness.is_some());
}

#[test]
fn zero_weights_fail_globally() {
    let (spec, table, f) = single();
    let sys = ComposedSystem::new(vec![table], spec.coupling.clone(), vec![0.0]).unwrap();
    let g = compose_simfn(vec![0.0], vec![f]).unwrap();
    let r = verify_condition2_global(&spec, &sys, &g, &IntegratorConfig::default(), &GlobalFitOptions::default(), &SampleConfig::default()).unwrap();
    assert_eq!(r.eps_tilde, 0.0);
    assert!(!r.passed);
}
