//! Randomized properties of the polynomial core: ring axioms, consistency of
//! evaluation with substitution, derivatives against central differences,
//! and exact moments against Monte-Carlo integration.

use proptest::prelude::*;
use rdinvariant::poly::{monomials_up_to, Polynomial, Region};

const VARS: [&str; 2] = ["x", "y"];

fn arb_poly() -> impl Strategy<Value = Polynomial> {
    proptest::collection::vec(((0u32..=3, 0u32..=3), -2.0f64..2.0), 1..6).prop_map(|terms| {
        Polynomial::from_terms(
            &VARS,
            terms
                .into_iter()
                .map(|((i, j), c)| (vec![i, j], c))
                .collect(),
        )
    })
}

fn arb_point() -> impl Strategy<Value = [f64; 2]> {
    [-3.0f64..3.0, -3.0f64..3.0]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn addition_commutes_and_multiplication_distributes(
        p in arb_poly(), q in arb_poly(), s in arb_poly(), pt in arb_point()
    ) {
        let ab = p.add(&q).unwrap().evaluate(&pt).unwrap();
        let ba = q.add(&p).unwrap().evaluate(&pt).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-9 * (1.0 + ab.abs()));

        let lhs = p.mul(&q.add(&s).unwrap()).unwrap().evaluate(&pt).unwrap();
        let rhs = p.mul(&q).unwrap().add(&p.mul(&s).unwrap()).unwrap().evaluate(&pt).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-6 * (1.0 + lhs.abs()));
    }

    #[test]
    fn evaluation_agrees_with_pointwise_arithmetic(
        p in arb_poly(), q in arb_poly(), pt in arb_point()
    ) {
        let sum = p.add(&q).unwrap().evaluate(&pt).unwrap();
        let prod = p.mul(&q).unwrap().evaluate(&pt).unwrap();
        let (pv, qv) = (p.evaluate(&pt).unwrap(), q.evaluate(&pt).unwrap());
        prop_assert!((sum - (pv + qv)).abs() <= 1e-9 * (1.0 + sum.abs()));
        prop_assert!((prod - pv * qv).abs() <= 1e-6 * (1.0 + prod.abs()));
    }

    #[test]
    fn substitution_commutes_with_evaluation(p in arb_poly(), pt in arb_point()) {
        // Substitute x := x + 1, then evaluate at (a, b); must equal direct
        // evaluation at (a + 1, b).
        let shift = Polynomial::var(&VARS, "x").unwrap()
            .add(&Polynomial::constant(&VARS, 1.0)).unwrap();
        let mut bindings = std::collections::BTreeMap::new();
        bindings.insert("x".to_string(), shift);
        let shifted = p.substitute(&bindings).unwrap();
        let direct = p.evaluate(&[pt[0] + 1.0, pt[1]]).unwrap();
        let via_subst = shifted.evaluate(&pt).unwrap();
        prop_assert!((direct - via_subst).abs() <= 1e-7 * (1.0 + direct.abs()));
    }

    #[test]
    fn derivative_matches_central_differences(p in arb_poly(), pt in arb_point()) {
        let h = 1e-5;
        for (var, idx) in [("x", 0usize), ("y", 1usize)] {
            let d = p.differentiate(var).unwrap().evaluate(&pt).unwrap();
            let mut hi_pt = pt;
            let mut lo_pt = pt;
            hi_pt[idx] += h;
            lo_pt[idx] -= h;
            let fd = (p.evaluate(&hi_pt).unwrap() - p.evaluate(&lo_pt).unwrap()) / (2.0 * h);
            prop_assert!((d - fd).abs() <= 1e-5 * (1.0 + d.abs()),
                "d/d{var} analytic {d} vs central {fd}");
        }
    }

    #[test]
    fn box_moments_match_monte_carlo(p in arb_poly(), seed in 0u64..1000) {
        use rand::{Rng, SeedableRng};
        let region = Region::Box { lower: vec![-1.0, 0.5], upper: vec![2.0, 1.5] };
        let exact = p.integrate(&region).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = 40_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let x = rng.gen_range(-1.0f64..2.0);
            let y = rng.gen_range(0.5f64..1.5);
            acc += p.evaluate(&[x, y]).unwrap();
        }
        let volume = 3.0 * 1.0;
        let mc = acc / n as f64 * volume;
        // Monte-Carlo error scale: generous 4-sigma-ish band for bounded
        // degree-6 integrands on this box.
        prop_assert!((exact - mc).abs() <= 0.8 + 0.05 * exact.abs(),
            "exact {exact} vs monte carlo {mc}");
    }

    #[test]
    fn simplex_moments_are_consistent_with_box_split(
        (i, j) in (0u32..=3, 0u32..=3)
    ) {
        // The unit square splits into two simplices; monomial integrals must
        // add up to the box integral.
        let m = rdinvariant::poly::Monomial::new(vec![i, j]);
        let square = Region::Box { lower: vec![0.0, 0.0], upper: vec![1.0, 1.0] };
        let s1 = Region::Simplex {
            vertices: vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 1.0]],
        };
        let s2 = Region::Simplex {
            vertices: vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0]],
        };
        let whole = square.monomial_integral(&m).unwrap();
        let split = s1.monomial_integral(&m).unwrap() + s2.monomial_integral(&m).unwrap();
        prop_assert!((whole - split).abs() <= 1e-12 * (1.0 + whole.abs()));
    }

    #[test]
    fn display_round_trips_through_parser(p in arb_poly()) {
        let text = format!("{p}");
        let back = rdinvariant::poly::parse_polynomial(&text, &VARS).unwrap();
        prop_assert_eq!(p, back);
    }
}

#[test]
fn monomial_enumeration_counts() {
    // C(n + d, d) monomials of degree <= d in n variables.
    assert_eq!(monomials_up_to(2, 3, false).len(), 10);
    assert_eq!(monomials_up_to(3, 2, false).len(), 10);
    // Even-only keeps degrees 0 and 2: 1 + 6 = 7 in three variables.
    assert_eq!(monomials_up_to(3, 2, true).len(), 7);
}
