use asymtori::decay::{DecayFn, Weight};
use asymtori::field::{analytic_norm, holder_norm, sup_norm, FourierField, GridField};
use asymtori::hamiltonian::{split, HamiltonianModel, PTaylor, PTerm, RawHamiltonian, SpaceTimeField, Term, TimeProfile};
use asymtori::homological::solve_transport;
use asymtori::timegrid::{nodes, NodeLayout};
use num_complex::Complex64;
use proptest::prelude::*;

fn field(dim: usize, band: usize) -> impl Strategy<Value = FourierField> {
    let k = band as i64;
    prop::collection::vec((prop::collection::vec(-k..=k, dim), -1.0..1.0f64, -1.0..1.0f64), 1..5).prop_map(move |modes| {
        let mut f = FourierField::zeros(dim, band);
        for (k, re, im) in modes {
            let c = Complex64::new(re, im);
            let neg: Vec<i64> = k.iter().map(|x| -x).collect();
            let a = f.coeff(&k);
            f.set_coeff(&k, a + c).unwrap();
            let b = f.coeff(&neg);
            f.set_coeff(&neg, b + c.conj()).unwrap();
        }
        f
    })
}

fn envelope() -> impl Strategy<Value = DecayFn> {
    prop_oneof![
        (0.2..3.0f64, 0.1..5.0f64).prop_map(|(r, s)| DecayFn::exponential(r, s).unwrap()),
        (1.2..5.0f64, 0.1..5.0f64).prop_map(|(p, s)| DecayFn::polynomial(p, s).unwrap()),
    ]
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let inner: f64 = (1..n).map(|i| f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 }).sum();
    (f(a) + f(b) + inner) * h / 3.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tail_is_monotone_and_bounds_the_density(d in envelope(), x in 0.0..10.0f64, gap in 0.01..5.0f64) {
        let t1 = d.domain_start() + x;
        let t2 = t1 + gap;
        let (a, b) = (d.tail(t1), d.tail(t2));
        prop_assert!(a >= b && b >= 0.0);
        prop_assert!(a - b >= gap * d.eval(t2) * (1.0 - 1e-12));
        let quad = simpson(|t| d.eval(t), t1, t2, 2000);
        prop_assert!((a - b - quad).abs() <= 1e-9 * (1.0 + quad), "{} vs {}", a - b, quad);
    }

    #[test]
    fn tail_derivative_is_minus_density(d in envelope(), x in 0.0..10.0f64) {
        let t = d.domain_start() + 0.5 + x;
        let h = 1e-5 * t.max(1.0);
        let fd = (d.tail(t + h) - d.tail(t - h)) / (2.0 * h);
        prop_assert!((fd + d.eval(t)).abs() <= 1e-6 * d.eval(t), "{fd} vs {}", -d.eval(t));
    }

    #[test]
    fn majorant_norm_is_submultiplicative(f in field(2, 3), g in field(2, 3), s in 0.0..0.4f64) {
        let lhs = analytic_norm(&f.multiply(&g).unwrap(), s).unwrap();
        prop_assert!(lhs <= analytic_norm(&f, s).unwrap() * analytic_norm(&g, s).unwrap() * (1.0 + 1e-13));
    }

    #[test]
    fn calibrated_cauchy_estimate(f in field(1, 8), s in 0.05..0.4f64, frac in 0.05..0.95f64) {
        let sigma = frac * s;
        let lhs = analytic_norm(&f.differentiate(0).unwrap(), s - sigma).unwrap();
        prop_assert!(lhs <= analytic_norm(&f, s).unwrap() / (std::f64::consts::E * sigma) * (1.0 + 1e-13));
    }

    #[test]
    fn holder_product_estimate(f in field(1, 8), g in field(1, 8), sigma in 0.3..2.5f64) {
        let lhs = holder_norm(&f.multiply(&g).unwrap(), sigma).unwrap();
        let rhs = 4f64.powf(sigma)
            * (holder_norm(&f, 0.0).unwrap() * holder_norm(&g, sigma).unwrap() + holder_norm(&f, sigma).unwrap() * holder_norm(&g, 0.0).unwrap());
        prop_assert!(lhs <= rhs, "{lhs} > {rhs}");
    }

    #[test]
    fn shift_preserves_norms(f in field(1, 6), d in 0.0..1.0f64) {
        let g = f.shift(&[d]).unwrap();
        prop_assert!((analytic_norm(&g, 0.1).unwrap() - analytic_norm(&f, 0.1).unwrap()).abs() <= 1e-13 * analytic_norm(&f, 0.1).unwrap());
        prop_assert!((sup_norm(&g) - sup_norm(&f)).abs() <= 1e-9 * sup_norm(&f));
        let (hf, hg) = (holder_norm(&f, 1.5).unwrap(), holder_norm(&g, 1.5).unwrap());
        prop_assert!((hf - hg).abs() <= 1e-6 * hf, "{hf} vs {hg}");
    }
}

fn he_input(f1: &FourierField, f2: &FourierField) -> GridField {
    let env = DecayFn::exponential(1.0, 1.0).unwrap();
    GridField::from_fn(nodes(NodeLayout::Uniform, 0.0, 14.0, 70), Weight::Decay(env), |t| {
        vec![f1.scale((-t).exp()).add(&f2.scale((-1.5 * t).exp())).unwrap()]
    })
    .unwrap()
}

fn max_coeff_gap(a: &GridField, b: &GridField) -> f64 {
    a.slices()
        .iter()
        .zip(b.slices())
        .flat_map(|(x, y)| x[0].coeffs().iter().zip(y[0].coeffs()).map(|(p, q)| (p - q).norm()).collect::<Vec<_>>())
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn homological_solution_is_linear(f1 in field(1, 4), f2 in field(1, 4), g1 in field(1, 4), alpha in -2.0..2.0f64, beta in -2.0..2.0f64) {
        let omega = [0.618];
        let (x, y) = (he_input(&f1, &f2), he_input(&g1, &f2.scale(-0.5)));
        let combo = x.scale(alpha).add(&y.scale(beta)).unwrap();
        let lhs = solve_transport(&combo, &omega).unwrap();
        let rhs = solve_transport(&x, &omega).unwrap().scale(alpha).add(&solve_transport(&y, &omega).unwrap().scale(beta)).unwrap();
        prop_assert!(max_coeff_gap(&lhs, &rhs) <= 1e-12);
    }

    #[test]
    fn homological_solution_commutes_with_translations(f1 in field(2, 3), f2 in field(2, 3), d0 in 0.0..1.0f64, d1 in 0.0..1.0f64) {
        let omega = [0.618, 0.414];
        let env = DecayFn::exponential(1.0, 1.0).unwrap();
        let g = GridField::from_fn(nodes(NodeLayout::Uniform, 0.0, 14.0, 70), Weight::Decay(env.clone()), |t| {
            vec![f1.scale((-t).exp()).add(&f2.scale((-1.5 * t).exp())).unwrap()]
        }).unwrap();
        let shift = |f: &GridField| f.map(f.envelope().clone(), |_, s| vec![s[0].shift(&[d0, d1]).unwrap()]).unwrap();
        let lhs = solve_transport(&shift(&g), &omega).unwrap();
        let rhs = shift(&solve_transport(&g, &omega).unwrap());
        prop_assert!(max_coeff_gap(&lhs, &rhs) <= 1e-12);
        let again = solve_transport(&g, &omega).unwrap();
        prop_assert_eq!(solve_transport(&g, &omega).unwrap(), again);
    }

    #[test]
    fn vector_field_is_infinitesimally_symplectic(
        fa in field(2, 2), fb0 in field(2, 2), fb1 in field(2, 2), fc in field(2, 1),
        q0 in 0.0..1.0f64, q1 in 0.0..1.0f64, p0 in -0.3..0.3f64, p1 in -0.3..0.3f64, t in 0.0..3.0f64,
    ) {
        let env = DecayFn::exponential(1.0, 1.0).unwrap();
        let prof = TimeProfile::Decay(env.clone());
        let mut q = PTaylor::kinetic(2);
        q.terms.push(PTerm { alpha: vec![1, 1], coeff: SpaceTimeField::term(prof.clone(), fc.scale(0.2)) });
        q.terms.push(PTerm { alpha: vec![2, 1], coeff: SpaceTimeField::term(prof.clone(), fc.clone()) });
        let m = HamiltonianModel::new(
            vec![0.618, 0.414],
            SpaceTimeField::term(prof.clone(), fa.clone()),
            vec![SpaceTimeField::term(prof.clone(), fb0.clone()), SpaceTimeField::term(prof.clone(), fb1.clone())],
            q, env.clone(), env, 0.0,
        ).unwrap();
        let flow = m.flow().unwrap();
        let x = [q0, q1, p0, p1];
        let xf = |x: &[f64]| {
            let (a, b) = flow.vector_field(&x[..2], &x[2..], t).unwrap();
            [a[0], a[1], b[0], b[1]]
        };
        // five-point Jacobian, column j = d X / d x_j
        let h = 2e-4;
        let mut jac = [[0.0f64; 4]; 4];
        for j in 0..4 {
            let at = |s: f64| { let mut y = x; y[j] += s * h; xf(&y) };
            let (m2, m1, p1_, p2) = (at(-2.0), at(-1.0), at(1.0), at(2.0));
            for i in 0..4 {
                jac[i][j] = (m2[i] - 8.0 * m1[i] + 8.0 * p1_[i] - p2[i]) / (12.0 * h);
            }
        }
        // J^T S + S J with S = [[0, I], [-I, 0]]
        let s = |i: usize, j: usize| -> f64 { if j == i + 2 { 1.0 } else if i == j + 2 { -1.0 } else { 0.0 } };
        for i in 0..4 {
            for j in 0..4 {
                let v: f64 = (0..4).map(|k| jac[k][i] * s(k, j) + s(i, k) * jac[k][j]).sum();
                prop_assert!(v.abs() < 1e-8, "({i},{j}) {v}");
            }
        }
    }

    #[test]
    fn mbar_zero_is_symmetric(fc in field(2, 2), fd in field(2, 2), t in 0.0..3.0f64) {
        let env = DecayFn::exponential(1.0, 1.0).unwrap();
        let one = FourierField::constant(2, 0, 1.0);
        let q = PTaylor { terms: vec![
            PTerm { alpha: vec![2, 0], coeff: SpaceTimeField::term(TimeProfile::Constant(1.0), one.add(&fd.scale(0.1)).unwrap()) },
            PTerm { alpha: vec![1, 1], coeff: SpaceTimeField::term(TimeProfile::Decay(env.clone()), fc) },
            PTerm { alpha: vec![0, 2], coeff: SpaceTimeField::term(TimeProfile::Constant(0.5), one) },
        ]};
        let m = HamiltonianModel::new(vec![0.618, 0.414], SpaceTimeField::zero(), vec![SpaceTimeField::zero(); 2], q, env.clone(), env, 0.0).unwrap();
        let s = m.slice(t, 4).unwrap();
        prop_assert_eq!(&s.mbar0[1], &s.mbar0[2]);
    }

    #[test]
    fn split_reassembles_the_hamiltonian(fa in field(1, 3), mut fb in field(1, 3), c in -1.0..1.0f64, q in 0.0..1.0f64, p in -0.5..0.5f64, t in 0.0..4.0f64) {
        // a drifting mean of d_p H would leave the admissible class
        fb.set_coeff(&[0], Complex64::new(0.0, 0.0)).unwrap();
        let env = DecayFn::exponential(1.0, 1.0).unwrap();
        let prof = TimeProfile::Decay(env.clone());
        let h0 = SpaceTimeField::Separable { terms: vec![
            Term { profile: prof.clone(), field: fa },
            Term { profile: TimeProfile::Constant(c), field: FourierField::constant(1, 0, 1.0) },
        ]};
        let dp = SpaceTimeField::Separable { terms: vec![
            Term { profile: TimeProfile::Constant(0.618), field: FourierField::constant(1, 0, 1.0) },
            Term { profile: prof.clone(), field: fb },
        ]};
        let raw = RawHamiltonian { h0: h0.clone(), dp_h0: vec![dp.clone()], remainder: PTaylor::kinetic(1), env_a: env.clone(), env_b: env, upsilon: 0.0 };
        let m = split(raw).unwrap();
        let raw_value = h0.eval(&[q], t).unwrap() + dp.eval(&[q], t).unwrap() * p + 0.5 * p * p;
        let constant = h0.mean_at(t).unwrap();
        let got = m.flow().unwrap().energy(&[q], &[p], t).unwrap() + constant;
        prop_assert!((got - raw_value).abs() <= 1e-12, "{got} vs {raw_value}");
    }
}
