use std::collections::HashMap;

use serde::Serialize;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Metrics {
    pub token_accuracy: f64,
    pub exact_match: f64,
    pub bleu: f64,
    pub examples: usize,
}

/// Position-wise agreement of hypotheses with references, over reference
/// positions (EOS included); missing hypothesis positions count as wrong.
pub fn token_accuracy(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> f64 {
    let (mut right, mut total) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        total += r.len();
        right += h.iter().zip(r).filter(|(a, b)| a == b).count();
    }
    if total == 0 {
        0.0
    } else {
        right as f64 / total as f64
    }
}

pub fn exact_match(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> f64 {
    if refs.is_empty() {
        return 0.0;
    }
    hyps.iter().zip(refs).filter(|(h, r)| h == r).count() as f64 / refs.len() as f64
}

fn ngrams(seq: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut out = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Clipped n-gram matches and hypothesis n-gram totals for n = 1..=4,
/// summed over the corpus.
pub fn ngram_stats(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> [(usize, usize); 4] {
    let mut stats = [(0, 0); 4];
    for (h, r) in hyps.iter().zip(refs) {
        for (n, s) in stats.iter_mut().enumerate() {
            let hc = ngrams(h, n + 1);
            let rc = ngrams(r, n + 1);
            s.0 += hc
                .iter()
                .map(|(g, &c)| c.min(*rc.get(g).unwrap_or(&0)))
                .sum::<usize>();
            s.1 += hc.values().sum::<usize>();
        }
    }
    stats
}

/// Corpus BLEU on a 0–100 scale: geometric mean of clipped n-gram
/// precisions (n ≤ 4) times the brevity penalty. Orders for which the
/// hypotheses contain no n-grams at all are left out of the mean.
pub fn corpus_bleu(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> f64 {
    let stats = ngram_stats(hyps, refs);
    let used: Vec<(usize, usize)> = stats.iter().copied().filter(|s| s.1 > 0).collect();
    if used.is_empty() || used.iter().any(|s| s.0 == 0) {
        return 0.0;
    }
    let log_p = used
        .iter()
        .map(|&(m, t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / used.len() as f64;
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    let bp = if c >= r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    100.0 * bp * log_p.exp()
}

/// Metrics over emitted sequences. Accuracy and exact match compare the
/// full sequences (EOS included); BLEU uses the content before EOS.
pub fn score(hyps: &[Vec<usize>], refs: &[Vec<usize>], eos: usize) -> Metrics {
    let strip =
        |v: &Vec<usize>| -> Vec<usize> { v.iter().copied().take_while(|&t| t != eos).collect() };
    let hc: Vec<Vec<usize>> = hyps.iter().map(strip).collect();
    let rc: Vec<Vec<usize>> = refs.iter().map(strip).collect();
    Metrics {
        token_accuracy: token_accuracy(hyps, refs),
        exact_match: exact_match(hyps, refs),
        bleu: corpus_bleu(&hc, &rc),
        examples: refs.len(),
    }
}
