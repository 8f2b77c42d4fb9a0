use lowprec::models::{gen_lsq, LsqParams};
use lowprec::FloatFormat;
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;

#[test]
fn strong_convexity_matches_nalgebra() {
    for seed in 1..=4 {
        let inst = gen_lsq(&LsqParams::theory(seed)).unwrap();
        let data = inst.master();
        let (n, d) = (data.n(), data.d());
        let x = DMatrix::from_fn(n, d, |i, j| data.row(i)[j]);
        let cov = x.transpose() * &x / n as f64;
        let mu = SymmetricEigen::new(cov).eigenvalues.min();
        let lip = (0..n).map(|i| x.row(i).norm_squared()).fold(0.0, f64::max);
        let c = inst.constants();
        assert!((c.mu - mu).abs() <= 1e-9 * mu, "seed {seed}: {} vs {mu}", c.mu);
        assert!((c.lipschitz - lip).abs() <= 1e-12 * lip);
    }
}

fn formats() -> impl Strategy<Value = FloatFormat> {
    prop_oneof![
        Just(FloatFormat::BF16),
        Just(FloatFormat::FP16),
        Just(FloatFormat::E8M3),
        Just(FloatFormat::E8M1),
    ]
}

proptest! {
    #[test]
    fn nearest_is_idempotent(fmt in formats(), x in -1e4f64..1e4) {
        let q = fmt.round_nearest(x);
        prop_assert!(fmt.is_representable(q));
        prop_assert_eq!(fmt.round_nearest(q), q);
    }

    #[test]
    fn nearest_is_monotone(fmt in formats(), a in -1e4f64..1e4, b in -1e4f64..1e4) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(fmt.round_nearest(lo) <= fmt.round_nearest(hi));
    }

    #[test]
    fn nearest_picks_a_neighbor(fmt in formats(), x in -1e4f64..1e4) {
        prop_assume!(!fmt.is_representable(x));
        let (lo, hi) = fmt.neighbors(x).unwrap();
        let q = fmt.round_nearest(x);
        prop_assert!(q == lo || q == hi);
        prop_assert!((q - x).abs() <= (x - lo).min(hi - x));
    }
}
