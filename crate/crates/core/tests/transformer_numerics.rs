use complab::transformer::{
    grad_check, grad_check_coords, Adam, TrainConfig, TransformerConfig, TransformerParams,
};
use complab::vocab::PAD_ID;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_seqs(n: usize, len: usize, vocab: u32, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..len).map(|_| rng.random_range(2..vocab)).collect()).collect()
}

#[test]
fn unused_embedding_row_uses_absolute_fallback() {
    let c = TransformerConfig { seed: 11, ..TransformerConfig::test_profile(50, 12) };
    let p = TransformerParams::<f64>::init(&c).unwrap();
    let batch = vec![vec![2, 3, 4, 5, 6]];
    // Row 40 of the token embedding never feeds the loss.
    let coords: Vec<(usize, usize)> = (0..16).map(|j| (0, 40 * 16 + j)).collect();
    let r = grad_check_coords(&p, &batch, 1e-5, &coords).unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
    assert_eq!(r.checked, 16);
}

#[test]
fn overfits_a_fixed_batch() {
    let c = TransformerConfig { seed: 3, ..TransformerConfig::test_profile(50, 16) };
    let batch = random_seqs(32, 16, 50, 1);
    let mut p = TransformerParams::<f32>::init(&c).unwrap();
    let mut adam = Adam::new(&p, TrainConfig { lr: 3e-3, ..TrainConfig::default() });
    let mut best = f64::INFINITY;
    for _ in 0..500 {
        let mut g = p.zero_grads();
        p.loss_and_grad(&batch, &mut g, None).unwrap();
        adam.update(&mut p, &mut g).unwrap();
        best = best.min(p.loss(&batch).unwrap());
        if best < 0.1 {
            break;
        }
    }
    assert!(best < 0.1, "train loss {best}");
}

#[test]
fn dropout_changes_training_branch_only() {
    let c = TransformerConfig { seed: 5, dropout: 0.5, ..TransformerConfig::test_profile(30, 10) };
    let p = TransformerParams::<f64>::init(&c).unwrap();
    let batch = random_seqs(2, 8, 30, 2);
    let mut g1 = p.zero_grads();
    let mut d = complab::transformer::Dropper::new(0.5, 1);
    let l_drop = p.loss_and_grad(&batch, &mut g1, Some(&mut d)).unwrap();
    let mut g2 = p.zero_grads();
    let l_plain = p.loss_and_grad(&batch, &mut g2, None).unwrap();
    assert_ne!(l_drop, l_plain);
    assert_eq!(l_plain, p.loss(&batch).unwrap());
}

#[derive(Debug, Clone)]
struct Shape {
    vocab: usize,
    ctx: usize,
    d_head: usize,
    heads: usize,
    layers: usize,
    seed: u64,
}

fn shape() -> impl Strategy<Value = Shape> {
    (5usize..40, 4usize..12, 1usize..5, 1usize..4, 1usize..3, any::<u64>()).prop_map(
        |(vocab, ctx, d_head, heads, layers, seed)| Shape { vocab, ctx, d_head, heads, layers, seed },
    )
}

fn config(s: &Shape) -> TransformerConfig {
    TransformerConfig {
        vocab_size: s.vocab,
        context_len: s.ctx,
        d_model: s.d_head * s.heads,
        n_layers: s.layers,
        n_heads: s.heads,
        d_ff: 4 * s.d_head * s.heads,
        dropout: 0.0,
        seed: s.seed,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn causal_and_normalized(s in shape(), split in 1usize..4, seed in any::<u64>()) {
        let c = config(&s);
        let p = TransformerParams::<f64>::init(&c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<u32> = (0..s.ctx).map(|_| rng.random_range(0..s.vocab as u32)).collect();
        let keep = split.min(s.ctx - 1);
        let mut b = a.clone();
        for t in &mut b[keep..] {
            *t = rng.random_range(0..s.vocab as u32);
        }
        let pa = p.forward(&a).unwrap();
        let pb = p.forward(&b).unwrap();
        for i in 0..s.ctx {
            prop_assert!((pa.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        for i in 0..keep {
            // A fully padded prefix has no valid keys and may differ only in
            // rows that are themselves pads.
            if a[..=i].iter().all(|&t| t == PAD_ID) { continue; }
            for j in 0..s.vocab {
                prop_assert!((pa.get(i, j) - pb.get(i, j)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences(s in shape(), seed in any::<u64>()) {
        let c = config(&s);
        let p = TransformerParams::<f64>::init(&c).unwrap();
        let batch = random_seqs(2, s.ctx, s.vocab as u32, seed);
        let r = grad_check(&p, &batch, 1e-5, 40, seed).unwrap();
        prop_assert!(r.max_rel_error < 1e-4, "{:?}", r);
    }
}
