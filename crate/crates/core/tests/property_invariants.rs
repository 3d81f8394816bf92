//! Property tests over the crate's structural invariants: entropy
//! bounds, CKA symmetry and range, locator band containment and scale
//! invariance, gradient correctness of random graphs, and aggregation
//! arithmetic.

use proptest::prelude::*;

use skidiag::diag::{attention_entropy, linear_cka};
use skidiag::harness::mean_std;
use skidiag::locator::{locate_band_greedy, locate_band_maxima, normalize};
use skidiag::tensor::{finite_diff_check, Graph, Tensor};

fn distribution(support: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(1e-6..1.0f64, support).prop_map(|raw| {
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Entropy of any distribution row lies in [0, ln(support)].
    #[test]
    fn entropy_bounds(rows in proptest::collection::vec(distribution(6), 1..5)) {
        let support = 6;
        let n = rows.len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let t = Tensor::new(vec![1, 1, n, support], flat).unwrap();
        let h = attention_entropy(&t, None).unwrap();
        prop_assert!(h >= 0.0);
        prop_assert!(h <= (support as f64).ln() + 1e-12);
    }

    // CKA is symmetric and sits in [0, 1].
    #[test]
    fn cka_symmetry_and_range(
        xs in proptest::collection::vec(-3.0..3.0f64, 60),
        ys in proptest::collection::vec(-3.0..3.0f64, 60),
    ) {
        let x = Tensor::new(vec![20, 3], xs).unwrap();
        let y = Tensor::new(vec![20, 3], ys).unwrap();
        let Ok(a) = linear_cka(&x, &y) else {
            return Ok(()); // zero-variance draws are rejected inputs
        };
        let b = linear_cka(&y, &x).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    // Bands stay inside [0, L), never exceed L entries, and both
    // locator variants are invariant to positive scaling of the
    // gradient profile.
    #[test]
    fn locator_band_containment_and_scale_invariance(
        h in proptest::collection::vec(0.01..4.0f64, 1..13),
        g_raw in proptest::collection::vec(0.01..4.0f64, 1..13),
        c in prop_oneof![Just(1e-6f64), Just(0.25), Just(7.0), Just(1e8)],
        s in 0usize..3,
    ) {
        let l = h.len().min(g_raw.len());
        let h = &h[..l];
        let g = &g_raw[..l];
        let maxima = locate_band_maxima(h, g, 0.5, s).unwrap();
        prop_assert!(!maxima.band.is_empty());
        prop_assert!(maxima.band.len() <= l);
        prop_assert!(maxima.band.iter().all(|&x| x < l));
        let greedy = locate_band_greedy(h, g, 0.25, s).unwrap();
        prop_assert!(greedy.band.iter().all(|&x| x < l));

        let scaled: Vec<f64> = g.iter().map(|v| v * c).collect();
        let m2 = locate_band_maxima(h, &scaled, 0.5, s).unwrap();
        prop_assert_eq!(&m2.band, &maxima.band);
        let g2 = locate_band_greedy(h, &scaled, 0.25, s).unwrap();
        prop_assert_eq!(&g2.band, &greedy.band);
    }

    // Normalized profiles live in [0, 1] and every profile maximum
    // scores exactly zero.
    #[test]
    fn normalize_range_and_argmax(
        h in proptest::collection::vec(0.01..5.0f64, 1..10),
    ) {
        let g: Vec<f64> = h.iter().rev().cloned().collect();
        let (ht, gt) = normalize(&h, &g).unwrap();
        for v in ht.iter().chain(gt.iter()) {
            prop_assert!((0.0..=1.0).contains(v));
        }
        let hmax = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let idx = h.iter().position(|&v| v == hmax).unwrap();
        prop_assert_eq!(ht[idx], 0.0);
    }

    // Analytic gradients of a random two-layer graph agree with central
    // finite differences.
    #[test]
    fn random_graph_gradcheck(
        seedish in 0u64..1000,
        m in 1usize..4,
        k in 1usize..4,
        pick in 0usize..3,
    ) {
        let mut rng = skidiag::rng::Rng::new(seedish);
        let mut g = Graph::new();
        let a = g.param(&[m, k], (0..m * k).map(|_| rng.normal()).collect(), true).unwrap();
        let b = g.param(&[k, m], (0..k * m).map(|_| rng.normal()).collect(), true).unwrap();
        let h = g.matmul(a, b).unwrap();
        let act = match pick {
            0 => g.gelu(h).unwrap(),
            1 => g.sigmoid(h).unwrap(),
            _ => {
                let sc = g.scale(h, 0.7).unwrap();
                g.mul(sc, sc).unwrap()
            }
        };
        let loss = g.sum(act).unwrap();
        let err = finite_diff_check(&mut g, loss, &[a, b], 1e-5, None).unwrap();
        prop_assert!(err < 1e-5, "rel err {}", err);
    }

    // Sample statistics: the mean of identical values is the value and
    // the std is exactly zero; generally min <= mean <= max.
    #[test]
    fn mean_std_sanity(xs in proptest::collection::vec(-10.0..10.0f64, 1..12)) {
        let (mean, std) = mean_std(&xs);
        let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(mean >= lo - 1e-12 && mean <= hi + 1e-12);
        prop_assert!(std >= 0.0);
        let constant = vec![xs[0]; xs.len()];
        let (cm, cs) = mean_std(&constant);
        prop_assert!((cm - xs[0]).abs() < 1e-12);
        prop_assert_eq!(cs, 0.0);
    }

    // Tensor construction enforces shape/value-length agreement.
    #[test]
    fn tensor_shape_agreement(dims in proptest::collection::vec(1usize..5, 1..4), extra in 1usize..4) {
        let numel: usize = dims.iter().product();
        prop_assert!(Tensor::new(dims.clone(), vec![0.5; numel]).is_ok());
        prop_assert!(Tensor::new(dims, vec![0.5; numel + extra]).is_err());
    }
}
