use impabs::certificate::*;
use impabs::dsl::{Arity, DynamicsExpr, VectorField};
use impabs::grid::{BoxSet, Grid};
use impabs::model::SubsystemSpec;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn c(v: f64) -> String {
    format!("({v:?})")
}

struct Linear {
    spec: SubsystemSpec,
    cert: Certificate,
    p: DMatrix<f64>,
    a: DMatrix<f64>,
    b_w: DMatrix<f64>,
    b_u: DMatrix<f64>,
}

fn random_linear(rng: &mut ChaCha8Rng) -> Linear {
    let n = rng.gen_range(1..=2);
    let q = rng.gen_range(0..=1);
    let m = 1;
    let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-2.0..1.0));
    let b_w = DMatrix::from_fn(n, q, |_, _| rng.gen_range(-1.0..1.0));
    let with_input = rng.gen_bool(0.5);
    let b_u = DMatrix::from_fn(n, m, |_, _| if with_input { rng.gen_range(-1.0..1.0) } else { 0.0 });
    let l = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let p = &l * l.transpose() + DMatrix::identity(n, n) * 0.2;
    let kappa_c = rng.gen_range(-1.0..3.0);
    let raw = DMatrix::from_fn(q + n, q + n, |_, _| rng.gen_range(-1.0..1.0));
    let d_c = (&raw + raw.transpose()) * 0.5;
    let rho = if with_input {
        KInfFn::power(rng.gen_range(0.5..3.0), 2.0).unwrap()
    } else {
        KInfFn::zero()
    };

    let flow: Vec<String> = (0..n)
        .map(|i| {
            let mut t: Vec<String> = (0..n).map(|j| format!("{}*x{}", c(a[(i, j)]), j + 1)).collect();
            t.extend((0..q).map(|j| format!("{}*w{}", c(b_w[(i, j)]), j + 1)));
            t.extend((0..m).map(|j| format!("{}*u{}", c(b_u[(i, j)]), j + 1)));
            t.join(" + ")
        })
        .collect();
    let mut v = Vec::new();
    for i in 0..n {
        for j in 0..n {
            v.push(format!("{}*(x{} - xh{})*(x{} - xh{})", c(p[(i, j)]), i + 1, i + 1, j + 1, j + 1));
        }
    }
    let arity = Arity { n, q, m };
    let spec = SubsystemSpec {
        name: "lin".into(),
        n,
        q,
        m,
        state_bounds: BoxSet(vec![[-1.0, 1.0]; n]),
        internal_bounds: BoxSet(vec![[-1.0, 1.0]; q]),
        external_bounds: BoxSet(vec![[-1.0, 1.0]; m]),
        flow: VectorField::parse(&flow, arity).unwrap(),
        jump: VectorField::parse(&vec!["0".to_string(); n], arity).unwrap(),
        tau: 0.1,
        z_min: 1,
        z_max: 2,
        phi: 0.0,
    };
    let eig = p.clone().symmetric_eigenvalues();
    let cert = Certificate {
        storage: DynamicsExpr::parse(&v.join(" + ")).unwrap(),
        alpha_lower: KInfFn::power(eig.min() / 2.0, 2.0).unwrap(),
        alpha_upper: KInfFn::power(eig.max() * n as f64, 2.0).unwrap(),
        kappa_c,
        kappa_d: 0.5,
        d_c,
        d_d: DMatrix::zeros(q + n, q + n),
        rho_uc: rho,
        rho_ud: KInfFn::zero(),
        gamma_hat: KInfFn::identity(),
        epsilon: 0.5,
        delta: None,
    };
    Linear { spec, cert, p, a, b_w, b_u }
}

#[test]
fn sampled_flow_check_agrees_with_eigenvalue_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut compared, mut holds, mut disagreements) = (0, 0, Vec::new());
    for k in 0..100 {
        let sys = random_linear(&mut rng);
        let oracle = quadratic_oracle(&sys.p, &sys.a, &sys.b_w, &sys.b_u, sys.cert.kappa_c, &sys.cert.d_c, &sys.cert.rho_uc).unwrap();
        if oracle.max_eigenvalue.abs() <= 1e-6 {
            continue;
        }
        compared += 1;
        holds += oracle.holds as usize;
        let cfg = SampleConfig {
            samples: 2048,
            seed: k,
            refine: 8,
        };
        let r = check_flow_dissipativity(&sys.cert, &sys.spec, &cfg);
        if r.passed != oracle.holds {
            disagreements.push((k, oracle.max_eigenvalue, r.worst_margin));
        }
    }
    assert!(compared >= 95);
    assert!(holds > 5 && holds < compared - 5, "instances should cover both verdicts: {holds}/{compared}");
    assert!(disagreements.is_empty(), "{disagreements:?}");
}

#[test]
fn oracle_ignores_omega_blocks_without_coupling() {
    let p = DMatrix::from_element(1, 1, 1.0);
    let a = DMatrix::from_element(1, 1, -1.0);
    let b_w = DMatrix::zeros(1, 1);
    let none = DMatrix::zeros(1, 0);
    let base = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, -0.5]);
    let other = DMatrix::from_row_slice(2, 2, &[-3.0, 0.0, 0.0, -0.5]);
    let v1 = quadratic_oracle(&p, &a, &b_w, &none, 2.0, &base, &KInfFn::zero()).unwrap();
    let v2 = quadratic_oracle(&p, &a, &b_w, &none, 2.0, &other, &KInfFn::zero()).unwrap();
    assert_eq!(v1.holds, v2.holds);
}

#[test]
fn dwell_sign_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..1000 {
        let kc: f64 = rng.gen_range(-2.0..4.0);
        let kd: f64 = rng.gen_range(1e-3..3.0);
        let tau: f64 = rng.gen_range(0.01..1.0);
        let zmin: u32 = rng.gen_range(0..5);
        let zmax: u32 = zmin + rng.gen_range(0..5);
        let r = check_dwell_time(kc, kd, tau, zmin, zmax).unwrap();
        let lo = kd.ln() - kc * tau * zmin as f64;
        let hi = kd.ln() - kc * tau * zmax as f64;
        assert_eq!(r.margin_at_z_min, lo);
        assert_eq!(r.margin_at_z_max, hi);
        assert_eq!(r.passed, lo < 0.0 && hi < 0.0);
    }
}

#[test]
fn simfn_case_sweep() {
    let spec_cert = |kc: f64, kd: f64| Certificate {
        storage: DynamicsExpr::parse("(x1 - xh1)^2").unwrap(),
        alpha_lower: KInfFn::power(1.0, 2.0).unwrap(),
        alpha_upper: KInfFn::power(1.0, 2.0).unwrap(),
        kappa_c: kc,
        kappa_d: kd,
        d_c: DMatrix::zeros(1, 1),
        d_d: DMatrix::zeros(1, 1),
        rho_uc: KInfFn::zero(),
        rho_ud: KInfFn::zero(),
        gamma_hat: KInfFn::identity(),
        epsilon: 0.5,
        delta: None,
    };
    for i in 0..100 {
        for j in 0..100 {
            let kc = -2.0 + 4.0 * i as f64 / 99.0;
            let kd = 0.01 + 2.5 * j as f64 / 99.0;
            let expected = [kd < 1.0 && kc > 0.0, kd >= 1.0 && kc > 0.0, kd < 1.0 && kc <= 0.0];
            let cert = spec_cert(kc, kd);
            match build_local_simfn(&cert, 0.5, 3.0, 2, 0.1) {
                Ok(f) => {
                    assert_eq!(expected.iter().filter(|b| **b).count(), 1);
                    let idx = match f.case {
                        SimCase::A => 0,
                        SimCase::B => 1,
                        SimCase::C => 2,
                    };
                    assert!(expected[idx]);
                    let (x, xh) = ([0.7], [0.2]);
                    assert_eq!(f.eval(&x, &xh, 0).unwrap(), cert.storage_value(&x, &xh).unwrap());
                }
                Err(_) => assert!(kd >= 1.0 && kc <= 0.0),
            }
        }
    }
}

fn power_iteration_max(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let shift = a.norm() + 1.0;
    let b = a + DMatrix::identity(n, n) * shift;
    let mut v = DMatrix::from_fn(n, 1, |i, _| 1.0 + 0.1 * i as f64);
    for _ in 0..50_000 {
        let w = &b * &v;
        let norm = w.norm();
        v = w / norm;
    }
    (v.transpose() * a * &v)[(0, 0)]
}

#[test]
fn max_eigenvalue_matches_power_iteration() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for size in [1, 2, 3, 5, 8, 13, 20] {
        let raw = DMatrix::from_fn(size, size, |_, _| rng.gen_range(-1.0..1.0));
        let a = (&raw + raw.transpose()) * 0.5;
        // with no internal inputs, Q is the subsystem's x-block itself
        let m = DMatrix::zeros(0, size);
        let r = check_compositionality(&m, &[a.clone()], &[(0, size)], &[1.0], 1e-9).unwrap();
        let reference = power_iteration_max(&a);
        assert!((r.max_eigenvalue - reference).abs() < 1e-8, "size {size}: {} vs {reference}", r.max_eigenvalue);
    }
}

#[test]
fn composition_verdict_matches_quadratic_form_sampling() {
    let m = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for d22 in [-1.0, 1.0] {
        let d = DMatrix::from_row_slice(2, 2, &[0.0, 0.5, 0.5, d22]);
        let r = check_compositionality(&m, &[d.clone(), d], &[(1, 1), (1, 1)], &[1.0, 1.0], 1e-9).unwrap();
        let q = DMatrix::from_fn(2, 2, |i, j| r.q[i][j]);
        let mut positive = false;
        for _ in 0..10_000 {
            let v = DMatrix::from_fn(2, 1, |_, _| rng.gen_range(-1.0..1.0));
            let val = (v.transpose() * &q * &v)[(0, 0)];
            if val > 1e-12 {
                positive = true;
            }
            if r.passed {
                assert!(val <= 1e-12);
            }
        }
        assert_eq!(r.passed, !positive);
    }
}

fn naive_inclusion(m: f64, eta_x: f64, eta_w: f64, lo: f64, hi: f64) -> bool {
    let mut k = (lo / eta_x).ceil() as i64 - 1;
    let mut ok = true;
    while k as f64 * eta_x <= hi + 1e-9 * eta_x {
        let x = k as f64 * eta_x;
        if x >= lo - 1e-9 * eta_x {
            let y = m * x;
            let j = (y / eta_w).round();
            let on_lattice = (y - j * eta_w).abs() <= 1e-9;
            let inside = y >= lo - 1e-9 && y <= hi + 1e-9;
            ok &= on_lattice && inside;
        }
        k += 1;
    }
    ok
}

#[test]
fn inclusion_matches_enumeration_oracle() {
    for m in [1.0, 2.0, 0.5, 1.0 / 3.0, -1.0] {
        for (eta_x, eta_w) in [(0.1, 0.1), (0.1, 0.05), (0.05, 0.1), (0.25, 0.125)] {
            let gx = Grid::new(BoxSet(vec![[0.0, 1.0]]), eta_x).unwrap();
            let gw = Grid::new(BoxSet(vec![[0.0, 1.0]]), eta_w).unwrap();
            let r = check_input_inclusion(&DMatrix::from_element(1, 1, m), &[gx], &[gw], DEFAULT_INCLUSION_CAP).unwrap();
            assert_eq!(r.passed, naive_inclusion(m, eta_x, eta_w, 0.0, 1.0), "m={m} eta=({eta_x},{eta_w})");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn kinf_inverse_roundtrip(a1 in 0.01f64..10.0, p1 in 1.0f64..4.0, a2 in 0.01f64..10.0, p2 in 1.0f64..4.0, r in 0.0f64..50.0) {
        for k in [KInfFn::power(a1, p1).unwrap(), KInfFn::new(vec![[a1, p1], [a2, p2]]).unwrap()] {
            let back = k.inverse(k.eval(r)).unwrap();
            prop_assert!((back - r).abs() <= 1e-9 * (1.0 + r));
        }
    }

    #[test]
    fn kinf_strictly_increasing(a in 0.01f64..10.0, p in 1.0f64..4.0, r in 0.0f64..10.0, d in 1e-3f64..1.0) {
        let k = KInfFn::power(a, p).unwrap();
        prop_assert!(k.eval(r + d) > k.eval(r));
        prop_assert_eq!(k.eval(0.0), 0.0);
    }

    #[test]
    fn q_symmetric_for_symmetric_blocks(entries in proptest::collection::vec(-2.0f64..2.0, 12), mu in proptest::collection::vec(0.0f64..3.0, 2)) {
        let sym = |e: &[f64]| DMatrix::from_row_slice(2, 2, &[e[0], e[1], e[1], e[2]]);
        let m = DMatrix::from_row_slice(2, 2, &entries[6..10]);
        let r = check_compositionality(&m, &[sym(&entries[0..3]), sym(&entries[3..6])], &[(1, 1), (1, 1)], &mu, 1e-9).unwrap();
        prop_assert_eq!(r.q[0][1], r.q[1][0]);
    }
}
