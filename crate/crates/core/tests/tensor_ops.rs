use aple_core::clip_head::{graph_ce, graph_kl, graph_log_probs, graph_logits, graph_stage1_loss, KlDirection, Prediction};
use aple_core::encoders::{block_forward, Block};
use aple_core::tensor::{grad_check, read_archive, write_archive, Graph, Real, Tensor, Var};
use aple_core::Result;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn randn(shape: Vec<usize>, std: f32, seed: u64) -> Tensor {
    Tensor::randn(shape, std, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn matmul_matches_triple_loop() {
    let a = randn(vec![5, 7], 1.0, 1);
    let b = randn(vec![7, 3], 1.0, 2);
    let mut g = Graph::new();
    let (av, bv) = (g.leaf(&a), g.leaf(&b));
    let p = g.matmul(av, bv).unwrap();
    let got = g.value(p);
    for i in 0..5 {
        for j in 0..3 {
            let mut s = 0.0f64;
            for k in 0..7 {
                s += f64::from(a.data()[i * 7 + k]) * f64::from(b.data()[k * 3 + j]);
            }
            assert!((f64::from(got[i * 3 + j]) - s).abs() < 1e-6, "({i},{j})");
        }
    }
}

#[test]
fn layernorm_rows_are_centred() {
    let x = randn(vec![3, 8], 2.0, 3);
    let mut g = Graph::new();
    let xv = g.leaf(&x);
    let gain = g.leaf(&Tensor::filled(vec![8], 1.0).unwrap());
    let bias = g.leaf(&Tensor::zeros(vec![8]).unwrap());
    let y = g.layernorm(xv, gain, bias, 1e-5).unwrap();
    for row in g.value(y).chunks(8) {
        let mean: f64 = row.iter().map(|&v| f64::from(v)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-6, "{mean}");
    }
}

#[test]
fn softmax_matches_direct_formula() {
    let mut g = Graph::new();
    let x = g.leaf(&Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let y = g.softmax(x, 0).unwrap();
    let z: f64 = (1..=3).map(|k| (k as f64).exp()).sum();
    for (k, &v) in g.value(y).iter().enumerate() {
        let expect = ((k + 1) as f64).exp() / z;
        assert!((f64::from(v) - expect).abs() < 1e-7);
    }
}

#[test]
fn gradient_of_shared_input_is_sum_of_consumers() {
    let x = randn(vec![2, 3], 1.0, 4).with_trainable(true);
    let w = randn(vec![3, 2], 1.0, 5);
    let consumer_a = |g: &mut Graph, xv: Var| -> Var {
        let wv = g.leaf(&w);
        let p = g.matmul(xv, wv).unwrap();
        let p = g.gelu(p).unwrap();
        g.sum(p).unwrap()
    };
    let consumer_b = |g: &mut Graph, xv: Var| -> Var {
        let sq = g.mul(xv, xv).unwrap();
        let e = g.exp(sq).unwrap();
        g.mean(e).unwrap()
    };
    let single = |f: &dyn Fn(&mut Graph, Var) -> Var| -> Vec<f32> {
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let l = f(&mut g, xv);
        g.backward(l).unwrap().get(xv).unwrap().to_vec()
    };
    let ga = single(&consumer_a);
    let gb = single(&consumer_b);

    let mut g = Graph::new();
    let xv = g.leaf(&x);
    let la = consumer_a(&mut g, xv);
    let lb = consumer_b(&mut g, xv);
    let l = g.add(la, lb).unwrap();
    let both = g.backward(l).unwrap().get(xv).unwrap().to_vec();
    for ((a, b), s) in ga.iter().zip(&gb).zip(&both) {
        assert!((a + b - s).abs() < 1e-6, "{a} + {b} != {s}");
    }
}

fn attention_loss<T: Real>(g: &mut Graph<T>, block: &Block, x: Var, probe: &Tensor) -> Result<Var> {
    let b = block.bind(g);
    let y = block_forward(g, &b, x, None, 2, 1e-5)?;
    let p = g.leaf(probe);
    let w = g.mul(y, p)?;
    g.sum(w)
}

#[test]
fn forward_and_backward_are_bitwise_repeatable() {
    let block = Block::init(8, 2, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let x = randn(vec![3, 8], 1.0, 7).with_trainable(true);
    let probe = randn(vec![3, 8], 1.0, 8);
    let run = || {
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let l = attention_loss(&mut g, &block, xv, &probe).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(g.replay_matches());
        let bits = |s: &[f32]| s.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        (bits(g.value(l)), bits(grads.get(xv).unwrap()))
    };
    assert_eq!(run(), run());
}

#[test]
fn two_class_stage1_loss_matches_finite_differences() {
    // Two class rows come from a trainable 2×3 code times a trainable 3×4
    // projection; three fixed image rows are scored against them.
    let code = Tensor::new(vec![2, 3], vec![0.3, -0.2, 0.5, 0.1, 0.4, -0.3]).unwrap().with_trainable(true);
    let proj = Tensor::new(vec![3, 4], vec![0.5, -0.1, 0.2, 0.3, -0.4, 0.6, 0.1, -0.2, 0.2, 0.2, -0.5, 0.4])
        .unwrap()
        .with_trainable(true);
    let images = Tensor::new(vec![3, 4], vec![0.9, 0.1, -0.3, 0.2, -0.2, 0.8, 0.4, 0.1, 0.3, -0.5, 0.6, 0.7]).unwrap();
    let teacher: Vec<Prediction> = [[0.7, 0.3], [0.4, 0.6], [0.5, 0.5]]
        .iter()
        .map(|p| Prediction::from_probs(p.to_vec(), 0.01).unwrap())
        .collect();
    let report = grad_check::<f32, _>(
        |g, v| {
            let z = g.matmul(v[0], v[1])?;
            let logits = graph_logits(g, z, v[2])?;
            let lp = graph_log_probs(g, logits, 0.01)?;
            Ok(graph_stage1_loss(g, lp, &[0, 1, 1], &teacher, 0.5, KlDirection::TeacherFirst)?.total)
        },
        &[code, proj, images],
        1e-3,
        0.0,
    )
    .unwrap();
    assert_eq!(report.coordinates, 18);
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

// The composite audits below run the generic graph in f64: in f32, central
// differences at eps=1e-3 carry about 1e-4 of rounding noise per coordinate,
// which swamps small gradient entries. The next test ties the f32 backward
// pass to the audited f64 one.
#[test]
fn f32_backward_tracks_f64_backward() {
    let block = Block::init(8, 2, &mut ChaCha8Rng::seed_from_u64(13)).unwrap();
    let x = randn(vec![3, 8], 1.0, 14).with_trainable(true);
    let probe = randn(vec![3, 8], 1.0, 15);
    let mut g32 = Graph::new();
    let x32 = g32.leaf(&x);
    let l32 = attention_loss(&mut g32, &block, x32, &probe).unwrap();
    let d32 = g32.backward(l32).unwrap().get(x32).unwrap().to_vec();
    let mut g64 = Graph::<f64>::default();
    let x64 = g64.leaf(&x);
    let l64 = attention_loss(&mut g64, &block, x64, &probe).unwrap();
    let d64 = g64.backward(l64).unwrap().get(x64).unwrap().to_vec();
    let scale = d64.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (a, b) in d32.iter().zip(&d64) {
        assert!((f64::from(*a) - b).abs() < 1e-5 * scale.max(1.0), "{a} vs {b}");
    }
}

#[test]
fn composite_layernorm_grad_check() {
    let x = randn(vec![3, 6], 1.0, 9).with_trainable(true);
    let gain = randn(vec![6], 0.5, 10).with_trainable(true);
    let bias = randn(vec![6], 0.5, 11).with_trainable(true);
    let probe = randn(vec![3, 6], 1.0, 12);
    let report = grad_check::<f64, _>(
        |g, v| {
            let y = g.layernorm(v[0], v[1], v[2], 1e-5)?;
            let w = g.mul(y, v[3])?;
            g.sum(w)
        },
        &[x, gain, bias, probe],
        1e-3,
        0.0,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

#[test]
fn composite_attention_block_grad_check() {
    let block = Block::init(8, 2, &mut ChaCha8Rng::seed_from_u64(13)).unwrap();
    let x = randn(vec![3, 8], 1.0, 14).with_trainable(true);
    let probe = randn(vec![3, 8], 1.0, 15);
    let report = grad_check::<f64, _>(|g, v| attention_loss(g, &block, v[0], &probe), &[x], 1e-3, 0.0).unwrap();
    assert_eq!(report.coordinates, 24);
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

#[test]
fn composite_ce_and_kl_grad_check() {
    let logits = randn(vec![3, 4], 1.0, 16).with_trainable(true);
    let teacher: Vec<Prediction> = [[0.1, 0.2, 0.3, 0.4], [0.7, 0.1, 0.1, 0.1], [0.25, 0.25, 0.25, 0.25]]
        .iter()
        .map(|p| Prediction::from_probs(p.to_vec(), 1.0).unwrap())
        .collect();
    for dir in [KlDirection::TeacherFirst, KlDirection::StudentFirst] {
        let report = grad_check::<f64, _>(
            |g, v| {
                let lp = g.log_softmax(v[0])?;
                let ce = graph_ce(g, lp, &[3, 0, 1])?;
                let kl = graph_kl(g, lp, &teacher, dir)?;
                g.add(ce, kl)
            },
            &[logits.clone()],
            1e-3,
            0.0,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{dir:?} {report:?}");
    }
}

#[test]
fn archive_layout_round_trips_bitwise() {
    let a = randn(vec![2, 3], 1.0, 17);
    let b = Tensor::new(vec![1], vec![f32::MIN_POSITIVE]).unwrap();
    let mut bytes = Vec::new();
    write_archive(&mut bytes, &[("a".into(), &a), ("b".into(), &b)]).unwrap();
    let back = read_archive(&bytes[..]).unwrap();
    assert_eq!(back[0].0, "a");
    assert_eq!(back[0].1.data(), a.data());
    assert_eq!(back[1].1.data()[0].to_bits(), f32::MIN_POSITIVE.to_bits());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(v in proptest::collection::vec(-20.0f32..20.0, 1..12), c in -50.0f32..50.0) {
        let n = v.len();
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::new(vec![n], v.clone()).unwrap());
        let shifted = g.leaf(&Tensor::new(vec![n], v.iter().map(|a| a + c).collect()).unwrap());
        let y = g.softmax(x, 0).unwrap();
        let ys = g.softmax(shifted, 0).unwrap();
        let total: f64 = g.value(y).iter().map(|&p| f64::from(p)).sum();
        prop_assert!((total - 1.0).abs() < 1e-5);
        for (a, b) in g.value(y).iter().zip(g.value(ys)) {
            prop_assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn backward_keeps_forward_values(seed in 0u64..1000) {
        let x = randn(vec![2, 4], 1.0, seed).with_trainable(true);
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let y = g.gelu(xv).unwrap();
        let y = g.normalize_rows(y).unwrap();
        let l = g.sum(y).unwrap();
        let before: Vec<u32> = g.value(y).iter().map(|v| v.to_bits()).collect();
        g.backward(l).unwrap();
        let after: Vec<u32> = g.value(y).iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(before, after);
    }
}
