use deepcox::metrics::{concordance_counts, d_statistic, f_test_5x2, harrell_c};
use deepcox::survival::{breslow_baseline, kaplan_meier};
use proptest::prelude::*;

fn survival_data() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>)> {
    (3usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec(-3.0f64..3.0, n),
            prop::collection::vec(1u32..40, n),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_map(|(g, t, mut e)| {
                e[0] = true;
                (g, t.into_iter().map(f64::from).collect(), e)
            })
    })
}

proptest! {
    #[test]
    fn c_is_invariant_to_monotone_transforms((g, t, e) in survival_data()) {
        let base = concordance_counts(&g, &t, &e).unwrap();
        let shifted: Vec<f64> = g.iter().map(|v| 3.0 * v.exp() + 1.0).collect();
        prop_assert_eq!(concordance_counts(&shifted, &t, &e).unwrap(), base);
    }

    #[test]
    fn c_reverses_under_negation((g, t, e) in survival_data()) {
        if let Ok(c) = harrell_c(&g, &t, &e) {
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            let flipped = harrell_c(&neg, &t, &e).unwrap();
            prop_assert!((c + flipped - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn d_is_shift_and_scale_invariant((g, t, e) in survival_data()) {
        if let Ok(d) = d_statistic(&g, &t, &e) {
            let moved: Vec<f64> = g.iter().map(|v| 2.0 * v - 5.0).collect();
            let d2 = d_statistic(&moved, &t, &e).unwrap();
            prop_assert!((d - d2).abs() < 1e-9 * d.abs().max(1.0));
        }
    }

    #[test]
    fn baseline_does_not_depend_on_reference_shift((g, t, e) in survival_data(), shift in -2.0f64..2.0) {
        // Moving every g and g_ref together leaves the baseline unchanged.
        let a = breslow_baseline(&g, &t, &e, 0.0).unwrap();
        let moved: Vec<f64> = g.iter().map(|v| v + shift).collect();
        let b = breslow_baseline(&moved, &t, &e, shift).unwrap();
        for s in 0..45 {
            let s = f64::from(s);
            prop_assert!((a.survival(s) - b.survival(s)).abs() < 1e-12);
        }
    }

    #[test]
    fn kaplan_meier_is_a_survival_curve((_g, t, e) in survival_data()) {
        let km = kaplan_meier(&t, &e).unwrap();
        let mut last = 1.0;
        for s in 0..45 {
            let v = km.value(f64::from(s));
            prop_assert!((0.0..=1.0).contains(&v) && v <= last);
            last = v;
        }
    }

    #[test]
    fn f_test_is_scale_free(p in prop::array::uniform5(prop::array::uniform2(-1.0f64..1.0)), k in 0.1f64..10.0) {
        if let Ok(a) = f_test_5x2(&p) {
            let scaled = p.map(|[x, y]| [k * x, k * y]);
            let b = f_test_5x2(&scaled).unwrap();
            prop_assert!((a.f - b.f).abs() < 1e-9 * a.f.max(1.0));
            prop_assert!((0.0..=1.0).contains(&a.p_value));
        }
    }
}
