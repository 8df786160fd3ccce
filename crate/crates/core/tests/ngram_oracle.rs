#[path = "oracles/kn.rs"]
mod kn;

use complab::ngram::NgramModel;
use complab::vocab::{Vocabulary, PAD_ID, UNK_ID};
use kn::KnOracle;
use proptest::prelude::*;

fn vocab_of(n: usize) -> Vocabulary {
    let names: Vec<String> = (0..n).map(|i| format!("w{i:02}")).collect();
    Vocabulary::build(names.iter().map(String::as_str), n).unwrap()
}

fn check(seqs: &[Vec<u32>], v: &Vocabulary, order: usize) -> Result<(), TestCaseError> {
    let m = NgramModel::train(seqs, v, order).unwrap();
    let o = KnOracle::new(seqs, v.len() as u32, order, UNK_ID, PAD_ID);
    for (k, d) in m.discounts().iter().enumerate() {
        prop_assert_eq!(*d, o.discounts(k + 1));
    }
    for s in seqs {
        for i in 0..=s.len() {
            let ctx = &s[i.saturating_sub(order + 1)..i];
            let mut total = 0.0;
            for w in 0..v.len() as u32 {
                let p = m.prob(ctx, w);
                prop_assert!((p - o.prob(ctx, w)).abs() < 1e-9, "ctx {:?} w {} {} vs {}", ctx, w, p, o.prob(ctx, w));
                total += p;
            }
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
    }
    Ok(())
}

#[test]
fn hand_example_matches_oracle() {
    let v = Vocabulary::build(["a", "b", "c"], 10).unwrap();
    let seq = v.encode_texts("a b a b a c".split(' '));
    let m = NgramModel::train(std::slice::from_ref(&seq), &v, 2).unwrap();
    let o = KnOracle::new(&[seq], v.len() as u32, 2, UNK_ID, PAD_ID);
    let (a, b) = (v.id("a"), v.id("b"));
    assert!((o.prob(&[a], b) - 1.75 / 3.0).abs() < 1e-12);
    assert!((m.prob(&[a], b) - o.prob(&[a], b)).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matches_bruteforce(vsize in 1usize..20, raw in prop::collection::vec(prop::collection::vec(0u32..22, 1..60), 1..6), order in 2usize..5) {
        let v = vocab_of(vsize);
        let seqs: Vec<Vec<u32>> = raw.into_iter().map(|s| s.into_iter().map(|t| t % v.len() as u32).collect()).collect();
        check(&seqs, &v, order)?;
    }

    #[test]
    fn another_occurrence_never_lowers_a_frequent_top_order_probability(raw in prop::collection::vec(0u32..6, 8..160), pick in any::<prop::sample::Index>()) {
        // Holds for counts already in the D3+ class with discounts frozen:
        // the numerator and denominator both grow by one and p <= 1.
        let v = vocab_of(4);
        let seq: Vec<u32> = raw.into_iter().map(|t| t % v.len() as u32).filter(|&t| t != PAD_ID).collect();
        prop_assume!(seq.len() >= 3);
        let i = pick.index(seq.len() - 2);
        let gram = seq[i..i + 3].to_vec();
        let at = |m: &NgramModel| m.prob(&gram[..2], gram[2]);
        let base = NgramModel::train(std::slice::from_ref(&seq), &v, 3).unwrap();
        let occurrences = seq.windows(3).filter(|w| *w == &gram[..]).count();
        prop_assume!(occurrences >= 3);
        let more = NgramModel::train(&[seq, gram.clone()], &v, 3)
            .unwrap()
            .with_discounts(base.discounts().to_vec())
            .unwrap();
        prop_assert!(at(&more) >= at(&base) - 1e-12, "{} -> {}", at(&base), at(&more));
    }
}

#[test]
fn reestimated_discounts_can_lower_a_probability() {
    // Counterexample to the unrestricted monotonicity claim.
    let v = vocab_of(6);
    let seq: Vec<u32> = [0u32, 0, 0, 0, 2, 0, 5, 0, 2, 0, 0, 0, 2, 0, 2, 0, 0, 3, 0, 0, 2].to_vec();
    let mut worse = 0;
    for i in 0..seq.len() - 2 {
        let g = &seq[i..i + 3];
        let before = NgramModel::train(std::slice::from_ref(&seq), &v, 3).unwrap().prob(&g[..2], g[2]);
        let after = NgramModel::train(&[seq.clone(), g.to_vec()], &v, 3).unwrap().prob(&g[..2], g[2]);
        worse += usize::from(after < before);
    }
    assert!(worse > 0);
}
