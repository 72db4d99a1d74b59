//! Synthetic Zipf-distributed token streams with optional first-order
//! Markov structure.
//!
//! The marginal over ids follows rank^(-s)/H_{N,s} with id 0 the most
//! frequent. With markov_order = 1, each token x points at a small rank
//! window around itself, and the next token comes from that window with
//! probability LAMBDA, else from a compensated "fresh" distribution chosen
//! so the chain's stationary distribution stays the Zipf marginal. Every
//! row is sharp, but rare tokens' windows are visited rarely, so their
//! structure is the slow-to-learn part of the corpus: difficulty comes
//! from exposure, not from row entropy.

use crate::error::{Error, Result};
use crate::rng::{stream_rng, STREAM_CORPUS};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Mixture weight of the window component in the order-1 chain.
pub const LAMBDA: f64 = 0.65;

/// Ranks covered on each side of a token's own rank by its window.
const WINDOW_HALF_WIDTH: usize = 3;

/// Generalized harmonic number H_{n,s} = sum over k=1..n of k^(-s).
pub fn harmonic(n: usize, s: f64) -> f64 {
    (1..=n).map(|k| (k as f64).powf(-s)).sum()
}

/// Zipf marginal over ids; id r has probability (r+1)^(-s)/H_{n,s}.
pub fn zipf_probs(n: usize, s: f64) -> Vec<f64> {
    let h = harmonic(n, s);
    (1..=n).map(|k| (k as f64).powf(-s) / h).collect()
}

/// Cumulative distribution with the final entry forced to exactly 1.
fn cumulative(probs: &[f64]) -> Vec<f64> {
    let mut cum = Vec::with_capacity(probs.len());
    let mut acc = 0.0;
    for &p in probs {
        acc += p;
        cum.push(acc);
    }
    if let Some(last) = cum.last_mut() {
        *last = 1.0;
    }
    cum
}

fn sample(cum: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    cum.partition_point(|&c| c <= u)
}

/// Token generator over ids [0, N) with Zipf marginal.
#[derive(Debug, Clone)]
pub struct ZipfMarkov {
    pi: Vec<f64>,
    pi_cum: Vec<f64>,
    order: u8,
    /// Per id: first id of its successor window.
    window_lo: Vec<usize>,
    /// Per id: window-local cumulative of the renormalized marginal.
    window_cum: Vec<Vec<f64>>,
    fresh: Vec<f64>,
    fresh_cum: Vec<f64>,
}

impl ZipfMarkov {
    pub fn new(vocab_size: usize, s: f64, markov_order: u8) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "zipf generation needs at least 2 tokens, got {vocab_size}"
            )));
        }
        if !s.is_finite() || s <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "zipf exponent must be positive, got {s}"
            )));
        }
        if markov_order > 1 {
            return Err(Error::InvalidConfig(format!(
                "markov_order must be 0 or 1, got {markov_order}"
            )));
        }
        let n = vocab_size;
        let pi = zipf_probs(n, s);
        let pi_cum = cumulative(&pi);
        let mut gen = ZipfMarkov {
            pi,
            pi_cum,
            order: markov_order,
            window_lo: Vec::new(),
            window_cum: Vec::new(),
            fresh: Vec::new(),
            fresh_cum: Vec::new(),
        };
        if markov_order == 1 {
            gen.build_transitions(n);
        }
        Ok(gen)
    }

    fn window(&self, id: usize) -> (usize, usize) {
        let rank = id + 1;
        let lo_rank = rank.saturating_sub(WINDOW_HALF_WIDTH).max(1);
        let hi_rank = (rank + WINDOW_HALF_WIDTH).min(self.pi.len());
        (lo_rank - 1, hi_rank - 1)
    }

    fn build_transitions(&mut self, n: usize) {
        let mut piq = vec![0.0; n];
        for x in 0..n {
            let (lo, hi) = self.window(x);
            let mass: f64 = self.pi[lo..=hi].iter().sum();
            let mut cum = Vec::with_capacity(hi - lo + 1);
            let mut acc = 0.0;
            for (slot, &p_y) in piq[lo..=hi].iter_mut().zip(&self.pi[lo..=hi]) {
                let q = p_y / mass;
                *slot += self.pi[x] * q;
                acc += q;
                cum.push(acc);
            }
            *cum.last_mut().unwrap() = 1.0;
            self.window_lo.push(lo);
            self.window_cum.push(cum);
        }
        // Fresh component chosen so lambda*(pi.Q) + (1-lambda)*fresh = pi;
        // clamped at zero and renormalized if the compensation overshoots.
        let mut fresh: Vec<f64> = self
            .pi
            .iter()
            .zip(&piq)
            .map(|(&p, &q)| ((p - LAMBDA * q) / (1.0 - LAMBDA)).max(0.0))
            .collect();
        let total: f64 = fresh.iter().sum();
        for f in &mut fresh {
            *f /= total;
        }
        self.fresh_cum = cumulative(&fresh);
        self.fresh = fresh;
    }

    pub fn vocab_size(&self) -> usize {
        self.pi.len()
    }

    /// The target unigram marginal.
    pub fn marginal(&self) -> &[f64] {
        &self.pi
    }

    /// Dense transition row P(. | from); order 0 returns the marginal.
    pub fn transition_row(&self, from: usize) -> Vec<f64> {
        let n = self.pi.len();
        assert!(from < n, "token {from} out of range");
        if self.order == 0 {
            return self.pi.clone();
        }
        let mut row: Vec<f64> = self.fresh.iter().map(|&f| (1.0 - LAMBDA) * f).collect();
        let lo = self.window_lo[from];
        let cum = &self.window_cum[from];
        let mut prev = 0.0;
        for (off, &c) in cum.iter().enumerate() {
            row[lo + off] += LAMBDA * (c - prev);
            prev = c;
        }
        row
    }

    fn next(&self, prev: u32, rng: &mut ChaCha8Rng) -> u32 {
        if self.order == 0 {
            return sample(&self.pi_cum, rng) as u32;
        }
        let branch: f64 = rng.gen();
        if branch < LAMBDA {
            let x = prev as usize;
            (self.window_lo[x] + sample(&self.window_cum[x], rng)) as u32
        } else {
            sample(&self.fresh_cum, rng) as u32
        }
    }

    /// Deterministic stream of `n_tokens` ids for a seed.
    pub fn generate(&self, n_tokens: usize, seed: u64) -> Vec<u32> {
        let mut rng = stream_rng(seed, STREAM_CORPUS);
        let mut out = Vec::with_capacity(n_tokens);
        let mut prev: Option<u32> = None;
        for _ in 0..n_tokens {
            let t = match prev {
                None => sample(&self.pi_cum, &mut rng) as u32,
                Some(p) => self.next(p, &mut rng),
            };
            out.push(t);
            prev = Some(t);
        }
        out
    }
}

/// One-call generation with a fresh generator.
pub fn generate_zipf_corpus(
    n_tokens: usize,
    vocab_size: usize,
    s: f64,
    seed: u64,
    markov_order: u8,
) -> Result<Vec<u32>> {
    Ok(ZipfMarkov::new(vocab_size, s, markov_order)?.generate(n_tokens, seed))
}
