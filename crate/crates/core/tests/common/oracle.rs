//! Reference implementations written independently of the library.

use std::collections::HashMap;

use pitlab::optim::OptimConfig;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn oracle_tokens(s: &str) -> Vec<String> {
    let mut kept = String::new();
    for c in s.to_lowercase().chars() {
        if !"!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~".contains(c) {
            kept.push(c);
        }
    }
    kept.split_whitespace().filter(|w| *w != "a" && *w != "an" && *w != "the").map(str::to_string).collect()
}

pub fn oracle_em(p: &str, g: &str) -> bool {
    oracle_tokens(p) == oracle_tokens(g)
}

pub fn oracle_recall(p: &str, g: &str) -> bool {
    let (p, g): (Vec<char>, Vec<char>) =
        (oracle_tokens(p).join(" ").chars().collect(), oracle_tokens(g).join(" ").chars().collect());
    if g.is_empty() {
        return true;
    }
    (0..p.len()).any(|i| p.len() - i >= g.len() && p[i..i + g.len()] == g[..])
}

/// Top-down memoized LCS.
pub fn oracle_lcs(a: &[String], b: &[String], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
    if i == a.len() || j == b.len() {
        return 0;
    }
    if let Some(&v) = memo.get(&(i, j)) {
        return v;
    }
    let v = if a[i] == b[j] {
        1 + oracle_lcs(a, b, i + 1, j + 1, memo)
    } else {
        oracle_lcs(a, b, i + 1, j, memo).max(oracle_lcs(a, b, i, j + 1, memo))
    };
    memo.insert((i, j), v);
    v
}

pub fn oracle_rouge(p: &str, g: &str) -> f64 {
    let (p, g) = (oracle_tokens(p), oracle_tokens(g));
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    let l = oracle_lcs(&p, &g, 0, 0, &mut HashMap::new()) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let (pr, rc) = (l / p.len() as f64, l / g.len() as f64);
    2.0 * pr * rc / (pr + rc)
}

pub const WORDS: [&str; 16] = [
    "jennifer", "Lame", "the", "The", "a", "an", "greta", "gerwig", "noah", "baumbach", "editing", "film", "1999", "x",
    "theater", "and",
];
pub const PUNCT: [&str; 6] = [".", ",", "!", "?", "'s", "-"];

pub fn random_text(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(0..8);
    let mut out = String::new();
    for _ in 0..n {
        if !out.is_empty() {
            out.push_str(if rng.gen_bool(0.1) { "  " } else { " " });
        }
        out.push_str(WORDS.choose(rng).unwrap());
        if rng.gen_bool(0.2) {
            out.push_str(PUNCT.choose(rng).unwrap());
        }
    }
    out
}

pub const NORMALIZATION_GOLDEN: [(&str, &str); 9] = [
    ("Jennifer Lame.", "jennifer lame"),
    ("The Editing", "editing"),
    ("", ""),
    ("An apple a day!", "apple day"),
    ("  spaced \t out\n", "spaced out"),
    ("Theater of the absurd", "theater of absurd"),
    ("$227 million", "227 million"),
    ("O'Brien-Smith", "obriensmith"),
    ("A", ""),
];

/// Reference AdamW step written out independently, one scalar at a time.
pub fn reference_step(theta: f64, g: f64, m: f64, v: f64, t: i32, lr: f64, c: &OptimConfig) -> (f64, f64, f64) {
    let m = c.beta1 * m + (1.0 - c.beta1) * g;
    let v = c.beta2 * v + (1.0 - c.beta2) * g * g;
    let mhat = m / (1.0 - c.beta1.powi(t));
    let vhat = v / (1.0 - c.beta2.powi(t));
    (theta - lr * mhat / (vhat.sqrt() + c.eps) - lr * c.weight_decay * theta, m, v)
}
