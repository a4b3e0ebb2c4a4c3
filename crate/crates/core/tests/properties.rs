use dsrpgo_core::metrics::aupr;
use dsrpgo_core::ssm::{scan_convolutional, scan_recurrent, SsmParams};
use dsrpgo_core::tensor::{Graph, Tensor};
use proptest::prelude::*;

fn params(channels: usize, state: usize, raw: &[f64]) -> SsmParams {
    let cs = channels * state;
    let take = |k: usize, n: usize| raw.iter().cycle().skip(k).take(n).copied().collect::<Vec<f64>>();
    let a = take(0, cs).iter().map(|v| -(0.05 + v.abs())).collect();
    let delta = take(3, channels).iter().map(|v| 0.01 + v.abs()).collect();
    SsmParams::new(channels, state, a, take(5, cs), take(7, cs), take(11, channels), delta).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn aupr_invariant_under_monotone_maps(pairs in prop::collection::vec((0u8..20, any::<bool>()), 1..30)) {
        let scores: Vec<f64> = pairs.iter().map(|(s, _)| *s as f64 / 20.0).collect();
        let labels: Vec<f64> = pairs.iter().map(|(_, y)| *y as u8 as f64).collect();
        let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        match (aupr(&scores, &labels), aupr(&mapped, &labels)) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
            (a, b) => prop_assert_eq!(a, b),
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(v in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 4], v).unwrap());
        let s = g.softmax(x, 1).unwrap();
        for row in g.value(s).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn reverse_twice_is_identity(v in prop::collection::vec(-5.0f64..5.0, 24), axis in 0usize..3) {
        let mut g = Graph::new();
        let t = Tensor::new(vec![2, 3, 4], v).unwrap();
        let x = g.constant(t.clone());
        let r = g.reverse(x, axis).unwrap();
        let rr = g.reverse(r, axis).unwrap();
        prop_assert_eq!(g.value(rr), &t);
    }

    #[test]
    fn scan_is_linear(raw in prop::collection::vec(-1.0f64..1.0, 16), x in prop::collection::vec(-2.0f64..2.0, 12),
                      y in prop::collection::vec(-2.0f64..2.0, 12), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let p = params(2, 3, &raw);
        let combo: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
        let lhs = scan_recurrent(&combo, &p).unwrap();
        let (sx, sy) = (scan_recurrent(&x, &p).unwrap(), scan_recurrent(&y, &p).unwrap());
        for (i, l) in lhs.iter().enumerate() {
            prop_assert!((l - (a * sx[i] + b * sy[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn scan_forms_agree(raw in prop::collection::vec(-1.0f64..1.0, 16), x in prop::collection::vec(-2.0f64..2.0, 2..40)) {
        let x = &x[..x.len() / 2 * 2];
        let p = params(2, 3, &raw);
        let (r, c) = (scan_recurrent(x, &p).unwrap(), scan_convolutional(x, &p).unwrap());
        for (u, v) in r.iter().zip(&c) {
            prop_assert!((u - v).abs() < 1e-9);
        }
    }
}
