use bhct::physics::{bh_projection, ideal_projection};
use bhct::BhParams;
use proptest::prelude::*;

fn fixture() -> Vec<[f64; 6]> {
    include_str!("data/projection_oracle.csv")
        .lines()
        .skip(1)
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|t| t.parse().unwrap()).collect();
            [v[0], v[1], v[2], v[3], v[4], v[5]]
        })
        .collect()
}

#[test]
fn matches_high_precision_reference() {
    let rows = fixture();
    assert_eq!(rows.len(), 1000);
    for [alpha, mu1, mu2, d, p_bh, p_bhc] in rows {
        let params = BhParams { alpha, mu1, mu2 };
        let got = bh_projection(d, &params).unwrap();
        assert!(
            (got - p_bh).abs() <= 1e-10 * p_bh.abs(),
            "{params:?} d={d}: {got} vs {p_bh}"
        );
        let got = ideal_projection(d, &params).unwrap();
        assert!(
            (got - p_bhc).abs() <= 1e-10 * p_bhc.abs(),
            "{params:?} d={d}: {got} vs {p_bhc}"
        );
    }
}

fn params() -> impl Strategy<Value = BhParams> {
    (0.01f64..1.0, 1.0f64..5.0, 0.0f64..10.0).prop_map(|(mu2, ratio, alpha)| BhParams {
        alpha,
        mu1: mu2 * ratio,
        mu2,
    })
}

proptest! {
    #[test]
    fn increasing_concave_and_below_linear(p in params(), d in 1.0f64..40.0, step in 0.01f64..1.0) {
        let at = |x: f64| bh_projection(x, &p).unwrap();
        prop_assert!(at(d + step) > at(d));
        prop_assert!(at(d + step) - 2.0 * at(d) + at(d - step) <= 1e-12 * at(d).max(1.0));
        prop_assert!(at(d) <= ideal_projection(d, &p).unwrap() * (1.0 + 1e-12));
    }

    #[test]
    fn approaches_soft_asymptote(p in params(), d in 0.0f64..200.0) {
        let gap = bh_projection(d, &p).unwrap() - p.mu2 * d - p.alpha.ln_1p();
        prop_assert!(gap <= 1e-12);
        prop_assert!(-gap <= p.alpha * (-(p.mu1 - p.mu2) * d).exp() + 1e-12);
    }

    #[test]
    fn slope_at_origin_is_effective_attenuation(p in params()) {
        let h = 1e-7;
        let slope = bh_projection(h, &p).unwrap() / h;
        prop_assert!((slope - p.effective_mu()).abs() <= 1e-5 * p.effective_mu().max(1.0));
    }
}

#[test]
fn rejects_negative_thickness() {
    let p = BhParams::new(2.0, 0.35, 0.12).unwrap();
    assert!(bh_projection(-1.0, &p).is_err());
    assert!(BhParams::new(2.0, 0.1, 0.35).is_err());
}
