//! Synthetic conversation corpora with controllable thread-pattern mix and
//! per-pattern re-entry rates.
//!
//! Every conversation starts with a prefix realizing a sampled pattern. With
//! probability `reentry_rates[pattern]` one or two filler turns by fresh users
//! follow and then the prefix's final author posts again; otherwise zero to
//! two filler turns by fresh users close the thread. Each turn is salted with
//! an author-specific token (`u<index>`) so authorship is learnable from text.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Conversation, Turn, UserId};
use crate::labeling::ThreadPattern;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub pattern_weights: BTreeMap<String, f64>,
    pub reentry_rates: BTreeMap<String, f64>,
    pub vocab_size: usize,
    /// Inclusive bounds on content tokens per turn (the salt token is extra).
    pub turn_len_range: (usize, usize),
    pub n_conversations: usize,
    pub seed: u64,
    /// Size of the user pool conversations draw from.
    pub n_users: usize,
    pub salt: bool,
}

impl Default for SynthConfig {
    /// Mix dominated by `AB`, `ABA` and `ABC`, with Reddit-like rates.
    fn default() -> Self {
        let weights = [
            ("AB", 0.35),
            ("ABA", 0.20),
            ("ABC", 0.20),
            ("ABAB", 0.10),
            ("ABCA", 0.08),
            ("ABCD", 0.07),
        ];
        let rates = [
            ("AB", 0.27),
            ("ABA", 0.35),
            ("ABAB", 0.45),
            ("ABC", 0.12),
            ("ABCA", 0.20),
            ("ABCD", 0.08),
        ];
        SynthConfig {
            pattern_weights: to_map(&weights),
            reentry_rates: to_map(&rates),
            vocab_size: 500,
            turn_len_range: (3, 12),
            n_conversations: 1000,
            seed: 0,
            n_users: 200,
            salt: true,
        }
    }
}

fn to_map(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

impl SynthConfig {
    /// A single pattern with a fixed re-entry rate.
    pub fn single(pattern: &str, rate: f64, n_conversations: usize, seed: u64) -> Self {
        SynthConfig {
            pattern_weights: to_map(&[(pattern, 1.0)]),
            reentry_rates: to_map(&[(pattern, rate)]),
            n_conversations,
            seed,
            ..Self::default()
        }
    }

    /// A fully learnable benchmark: `ABA` and `ABCA` threads always see the
    /// opener return and `ABC` threads never do, so an instance is positive
    /// exactly when its target opened the thread and is at turn 3 or 4.
    pub fn benchmark(n_conversations: usize, seed: u64) -> Self {
        let third = 1.0 / 3.0;
        SynthConfig {
            pattern_weights: to_map(&[("ABA", third), ("ABC", third), ("ABCA", third)]),
            reentry_rates: to_map(&[("ABA", 1.0), ("ABC", 0.0), ("ABCA", 1.0)]),
            vocab_size: 5,
            turn_len_range: (1, 2),
            n_conversations,
            seed,
            n_users: 8,
            salt: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.pattern_weights.is_empty() {
            return bad("pattern_weights is empty".into());
        }
        let total: f64 = self.pattern_weights.values().sum();
        if (total - 1.0).abs() > 1e-6 {
            return bad(format!("pattern_weights sum to {total}, not 1"));
        }
        let mut max_users = 0;
        for (p, w) in &self.pattern_weights {
            let pat: ThreadPattern = p.parse()?;
            if pat.len() < 2 {
                return bad(format!("pattern {p:?} needs at least two turns"));
            }
            if !(w.is_finite() && *w >= 0.0) {
                return bad(format!("weight for {p:?} is {w}"));
            }
            if !self.reentry_rates.contains_key(p) {
                return bad(format!("no re-entry rate for pattern {p:?}"));
            }
            max_users = max_users.max(pat.num_users());
        }
        for (p, r) in &self.reentry_rates {
            if !(0.0..=1.0).contains(r) {
                return bad(format!("re-entry rate for {p:?} is {r}, outside [0, 1]"));
            }
        }
        let (lo, hi) = self.turn_len_range;
        if lo == 0 || lo > hi {
            return bad(format!("turn_len_range ({lo}, {hi}) is invalid"));
        }
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive".into());
        }
        if self.n_users < max_users + 2 {
            return bad(format!(
                "n_users = {} is too small: patterns use {max_users} users plus two fillers",
                self.n_users
            ));
        }
        Ok(())
    }
}

pub fn generate_corpus(cfg: &SynthConfig) -> Result<Vec<Conversation>> {
    cfg.validate()?;
    let patterns: Vec<(Vec<usize>, f64)> = cfg
        .pattern_weights
        .keys()
        .map(|p| {
            let pat: ThreadPattern = p.parse().expect("validated");
            (pat.symbols(), cfg.reentry_rates[p])
        })
        .collect();
    let chooser = WeightedIndex::new(cfg.pattern_weights.values().copied())
        .map_err(|e| Error::Config(format!("pattern_weights: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut out = Vec::with_capacity(cfg.n_conversations);
    for i in 0..cfg.n_conversations {
        let (symbols, rate) = &patterns[chooser.sample(&mut rng)];
        let k = symbols.iter().max().map_or(0, |m| m + 1);
        let people = sample(&mut rng, cfg.n_users, k + 2).into_vec();
        let fillers = [people[k], people[k + 1]];

        let mut authors: Vec<usize> = symbols.iter().map(|&s| people[s]).collect();
        let target = *authors.last().expect("pattern has turns");
        if rng.gen_bool(*rate) {
            let n = rng.gen_range(1..=2);
            authors.extend_from_slice(&fillers[..n]);
            authors.push(target);
        } else {
            let n = rng.gen_range(0..=2);
            authors.extend_from_slice(&fillers[..n]);
        }

        let turns = authors
            .into_iter()
            .map(|a| make_turn(cfg, a, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        out.push(Conversation::new(format!("synth-{i:06}"), turns)?);
    }
    Ok(out)
}

fn make_turn(cfg: &SynthConfig, author: usize, rng: &mut ChaCha8Rng) -> Result<Turn> {
    let (lo, hi) = cfg.turn_len_range;
    let len = rng.gen_range(lo..=hi);
    let mut tokens = Vec::with_capacity(len + 1);
    if cfg.salt {
        tokens.push(format!("u{author}"));
    }
    tokens.extend((0..len).map(|_| format!("w{}", rng.gen_range(0..cfg.vocab_size))));
    Turn::new(UserId::new(format!("user{author}"))?, tokens)
}
