use proptest::prelude::*;

use noisegcl::losses::{infonce_loss, LossConfig};
use noisegcl::noise::{sample_edge_noise, GumbelDraws};
use noisegcl::{load_graph, save_graph, Graph, SplitMasks, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |v| Tensor::new(rows, cols, v).unwrap())
}

fn graph() -> impl Strategy<Value = Graph> {
    (3usize..15, 1usize..5).prop_flat_map(|(n, d)| {
        let edges = prop::collection::vec((0..n, 0..n), 0..3 * n);
        let feats = prop::collection::vec(-1e3f64..1e3, n * d);
        let labels = prop::collection::vec(0usize..3, n);
        (edges, feats, labels).prop_map(move |(edges, feats, labels)| {
            let edges = edges.into_iter().filter(|(u, v)| u != v);
            Graph::new(n, edges, Tensor::new(n, d, feats).unwrap(), Some(labels)).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn graph_directory_round_trips(g in graph(), split_seed in 0u64..100) {
        let dir = tempfile::tempdir().unwrap();
        let splits = SplitMasks::random(g.num_nodes(), split_seed).unwrap();
        save_graph(dir.path(), &g, Some(&splits), None).unwrap();
        let (back, back_splits) = load_graph(dir.path()).unwrap();
        prop_assert_eq!(back, g);
        prop_assert_eq!(back_splits, splits);
    }

    // d/dW sum(C .* (A W)) = A^T C, checked against plain loops
    #[test]
    fn matmul_gradient_is_linear_map(a in tensor(4, 3), w in tensor(3, 2), c in tensor(4, 2)) {
        let mut tape = Tape::new();
        let av = tape.constant(a.clone());
        let wv = tape.param(w.clone());
        let cv = tape.constant(c.clone());
        let y = tape.matmul(av, wv).unwrap();
        let y = tape.mul(y, cv).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap().get_or_zeros(wv, &w);
        for k in 0..3 {
            for j in 0..2 {
                let want: f64 = (0..4).map(|i| a.get(i, k) * c.get(i, j)).sum();
                prop_assert!((g.get(k, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn infonce_ignores_row_scale(z1 in tensor(5, 3), z2 in tensor(5, 3), scale in prop::collection::vec(0.1f64..10.0, 5)) {
        prop_assume!((0..5).all(|i| z1.row(i).iter().any(|v| v.abs() > 1e-3) && z2.row(i).iter().any(|v| v.abs() > 1e-3)));
        let cfg = LossConfig::default();
        let scaled = Tensor::from_fn(5, 3, |i, j| z1.get(i, j) * scale[i]);
        let a = infonce_loss(&z1, &z2, &cfg).unwrap();
        let b = infonce_loss(&scaled, &z2, &cfg).unwrap();
        prop_assert!((a - b).abs() < 1e-10, "{} vs {}", a, b);
    }

    #[test]
    fn hard_keep_agrees_with_relaxed_weight(p in prop::collection::vec(0.01f64..0.99, 1..40), seed in any::<u64>(), t in 0.05f64..5.0) {
        let draws = GumbelDraws::sample(p.len(), &mut ChaCha8Rng::seed_from_u64(seed));
        let (soft, hard) = sample_edge_noise(&p, &draws, t).unwrap();
        for (s, h) in soft.iter().zip(&hard) {
            prop_assert!((0.0..=1.0).contains(s));
            if *s != 0.5 {
                prop_assert_eq!(*h, *s > 0.5);
            }
        }
    }
}
