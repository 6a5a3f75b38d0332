//! Corpus-level BLEU over unit sequences: 4-gram, uniform weights, brevity
//! penalty, clipped counts, add-1 smoothing on the n > 1 precisions.

use std::collections::HashMap;

const MAX_N: usize = 4;

/// Score in [0, 100]. One reference per hypothesis; `hyps` and `refs` are
/// aligned. An empty corpus or zero unigram matches scores 0.
pub fn corpus_bleu(hyps: &[Vec<u32>], refs: &[Vec<u32>]) -> f64 {
    assert_eq!(hyps.len(), refs.len(), "hyp/ref count mismatch");
    let mut matches = [0u64; MAX_N + 1];
    let mut totals = [0u64; MAX_N + 1];
    let mut hyp_len = 0u64;
    let mut ref_len = 0u64;
    for (hyp, reference) in hyps.iter().zip(refs) {
        hyp_len += hyp.len() as u64;
        ref_len += reference.len() as u64;
        for n in 1..=MAX_N {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            for (ng, &count) in &h {
                totals[n] += count;
                let clip = r.get(ng).copied().unwrap_or(0);
                matches[n] += count.min(clip);
            }
        }
    }
    if totals[1] == 0 || matches[1] == 0 {
        return 0.0;
    }
    let mut log_p = (matches[1] as f64 / totals[1] as f64).ln();
    for n in 2..=MAX_N {
        log_p += ((matches[n] + 1) as f64 / (totals[n] + 1) as f64).ln();
    }
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    100.0 * bp * (log_p / MAX_N as f64).exp()
}

fn ngram_counts(seq: &[u32], n: usize) -> HashMap<&[u32], u64> {
    let mut map = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *map.entry(w).or_insert(0) += 1;
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_corpus_scores_100() {
        let refs = vec![vec![1, 2, 3, 4, 5, 6], vec![9, 8, 7, 6]];
        assert!((corpus_bleu(&refs, &refs) - 100.0).abs() < 1e-9);
    }

    #[test]
    fn disjoint_unigrams_score_0() {
        let hyps = vec![vec![9, 9], vec![8, 8]];
        let refs = vec![vec![1, 2], vec![3, 4]];
        assert_eq!(corpus_bleu(&hyps, &refs), 0.0);
    }

    #[test]
    fn three_sentence_toy_case_matches_reference_implementation() {
        // frozen from an independent implementation of the same formula,
        // computed before this module was written
        let hyps = vec![vec![1, 2, 3, 4, 5, 6], vec![1, 2, 3, 4], vec![7, 7, 8, 9]];
        let refs = vec![vec![1, 2, 3, 4, 5, 6], vec![1, 2, 3, 9, 4], vec![7, 8, 9, 10]];
        let got = corpus_bleu(&hyps, &refs);
        assert!(
            (got - 74.10176478093081).abs() < 1e-4,
            "toy case scored {got}"
        );
    }

    #[test]
    fn brevity_penalty_case_matches_reference_implementation() {
        let hyps = vec![vec![1, 2, 3], vec![5, 6]];
        let refs = vec![vec![1, 2, 3, 4], vec![5, 6, 7]];
        let got = corpus_bleu(&hyps, &refs);
        assert!(
            (got - 67.03200460356393).abs() < 1e-4,
            "short case scored {got}"
        );
    }

    #[test]
    fn empty_hypotheses_score_0() {
        assert_eq!(corpus_bleu(&[vec![]], &[vec![1, 2]]), 0.0);
        assert_eq!(corpus_bleu(&[], &[]), 0.0);
    }

    #[test]
    fn shuffling_reduces_the_score() {
        use rand::seq::SliceRandom;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let reference: Vec<u32> = (0..60)
            .map(|_| rand::Rng::random_range(&mut rng, 0..24u32))
            .collect();
        let mut shuffled = reference.clone();
        shuffled.shuffle(&mut rng);
        let good = corpus_bleu(&[reference.clone()], &[reference.clone()]);
        let bad = corpus_bleu(&[shuffled], &[reference]);
        assert!(good > 99.0);
        assert!(bad < 40.0, "shuffled scored {bad}");
    }
}
