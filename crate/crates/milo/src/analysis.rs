//! Post-training diagnostics: perplexity broken down by frequency bucket,
//! a histogram of predicted-distribution entropies, and a gamma sweep that
//! retrains the same setup under a range of entropy exponents.
//!
//! Every per-token statistic is attributed to the target token, and all
//! means are taken in log domain (perplexity = exp(mean CE)).

use crate::corpus::{Bucket, FrequencyBuckets};
use crate::error::{Error, Result};
use crate::losses::{entropy_core, kahan_add, log_probs_into, LossKind, LossSpec};
use crate::model::{init, ModelConfig, ModelParams};
use crate::trainer::{evaluate_ppl, split_sequences, train, RunMetrics, TrainConfig};

const BUCKETS: [Bucket; 3] = [Bucket::High, Bucket::Medium, Bucket::Low];

/// Walks every predicted position in evaluation batches of whole
/// sequences, reporting the target token, its cross-entropy, and the
/// entropy of the predicted distribution. Order is sequence-major, so
/// accumulation is independent of `batch_size`.
fn for_each_target(
    params: &ModelParams,
    sequences: &[Vec<u32>],
    batch_size: usize,
    mut f: impl FnMut(u32, f64, f64),
) -> Result<()> {
    if sequences.is_empty() {
        return Err(Error::EmptyInput("evaluation sequences"));
    }
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }
    let n = params.config.vocab_size;
    let seq_len = sequences[0].len();
    if seq_len < 2 {
        return Err(Error::InvalidConfig(format!(
            "sequences must hold at least 2 tokens for input/target pairs, got {seq_len}"
        )));
    }
    let rows_per_seq = seq_len - 1;
    let mut lp = vec![0.0; n];
    for batch in sequences.chunks(batch_size) {
        let mut inputs = Vec::with_capacity(batch.len() * rows_per_seq);
        for seq in batch {
            if seq.len() != seq_len {
                return Err(Error::ShapeMismatch {
                    op: "for_each_target",
                    detail: format!("ragged sequences: {} vs {seq_len}", seq.len()),
                });
            }
            inputs.extend_from_slice(&seq[..rows_per_seq]);
        }
        let logits = params.logits(&inputs, batch.len())?;
        for (s, seq) in batch.iter().enumerate() {
            for pos in 0..rows_per_seq {
                let row = &logits[(s * rows_per_seq + pos) * n..][..n];
                let lse = log_probs_into(row, &mut lp);
                let target = seq[pos + 1];
                if target as usize >= n {
                    return Err(Error::TokenOutOfRange {
                        id: target,
                        vocab_size: n,
                    });
                }
                let ce = -lp[target as usize];
                let h = entropy_core(row, &lp, lse);
                f(target, ce, h);
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketRow {
    pub bucket: Bucket,
    pub token_count: u64,
    /// None when no target token fell in this bucket.
    pub mean_ce: Option<f64>,
    pub ppl: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketPPLReport {
    /// High, Medium, Low.
    pub rows: Vec<BucketRow>,
    pub overall_token_count: u64,
    pub overall_mean_ce: f64,
    pub overall_ppl: f64,
}

impl BucketPPLReport {
    pub fn row(&self, bucket: Bucket) -> &BucketRow {
        self.rows
            .iter()
            .find(|r| r.bucket == bucket)
            .expect("all three buckets are present")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bucket,token_count,mean_ce,ppl\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.bucket,
                r.token_count,
                opt(r.mean_ce),
                opt(r.ppl)
            ));
        }
        out.push_str(&format!(
            "overall,{},{},{}\n",
            self.overall_token_count, self.overall_mean_ce, self.overall_ppl
        ));
        out
    }
}

/// Mean cross-entropy and perplexity per frequency bucket, each target
/// token counted in the bucket of the target itself. The overall row is
/// assembled from the bucket sums, so the count-weighted identity holds
/// by construction.
pub fn bucketed_ppl(
    params: &ModelParams,
    sequences: &[Vec<u32>],
    buckets: &FrequencyBuckets,
    batch_size: usize,
) -> Result<BucketPPLReport> {
    if buckets.assignment.len() != params.config.vocab_size {
        return Err(Error::InvalidConfig(format!(
            "buckets cover {} token ids but the model's vocab is {}",
            buckets.assignment.len(),
            params.config.vocab_size
        )));
    }
    let mut sums = [0.0f64; 3];
    let mut comps = [0.0f64; 3];
    let mut counts = [0u64; 3];
    for_each_target(params, sequences, batch_size, |target, ce, _| {
        let b = buckets.assignment[target as usize] as usize;
        kahan_add(&mut sums[b], &mut comps[b], ce);
        counts[b] += 1;
    })?;

    let rows = BUCKETS
        .iter()
        .enumerate()
        .map(|(i, &bucket)| {
            let mean = (counts[i] > 0).then(|| sums[i] / counts[i] as f64);
            BucketRow {
                bucket,
                token_count: counts[i],
                mean_ce: mean,
                ppl: mean.map(f64::exp),
            }
        })
        .collect();
    let total: u64 = counts.iter().sum();
    let (mut sum, mut comp) = (0.0, 0.0);
    for s in sums {
        kahan_add(&mut sum, &mut comp, s);
    }
    let overall_mean = sum / total as f64;
    Ok(BucketPPLReport {
        rows,
        overall_token_count: total,
        overall_mean_ce: overall_mean,
        overall_ppl: overall_mean.exp(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyHistogram {
    /// Bins partition [0, ln vocab_size]; the top bin includes its upper
    /// edge.
    pub max_entropy: f64,
    pub counts: Vec<u64>,
}

impl EntropyHistogram {
    pub fn n_bins(&self) -> usize {
        self.counts.len()
    }

    /// Lower edge of bin i; bin i spans [edge(i), edge(i+1)).
    pub fn edge(&self, i: usize) -> f64 {
        self.max_entropy * i as f64 / self.counts.len() as f64
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_start,bin_end,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", self.edge(i), self.edge(i + 1), c));
        }
        out
    }
}

/// Histogram of predicted-distribution entropies over every predicted
/// position, binned uniformly over [0, ln vocab_size].
pub fn entropy_histogram(
    params: &ModelParams,
    sequences: &[Vec<u32>],
    n_bins: usize,
    batch_size: usize,
) -> Result<EntropyHistogram> {
    if n_bins == 0 {
        return Err(Error::InvalidConfig("n_bins must be positive".into()));
    }
    let max_entropy = (params.config.vocab_size as f64).ln();
    let mut counts = vec![0u64; n_bins];
    for_each_target(params, sequences, batch_size, |_, _, h| {
        let bin = ((h / max_entropy * n_bins as f64) as usize).min(n_bins - 1);
        counts[bin] += 1;
    })?;
    Ok(EntropyHistogram {
        max_entropy,
        counts,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepEntry {
    pub gamma: f64,
    pub overall_ppl: f64,
    pub buckets: BucketPPLReport,
    pub metrics: RunMetrics,
    /// overall_ppl minus the gamma=0 overall_ppl.
    pub delta_vs_baseline: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    /// One entry per requested gamma, in request order.
    pub entries: Vec<SweepEntry>,
    pub seed: u64,
}

impl SweepReport {
    /// Computes deltas against the gamma=0 entry, which must be present.
    pub fn from_entries(mut entries: Vec<SweepEntry>, seed: u64) -> Result<Self> {
        let baseline = entries
            .iter()
            .find(|e| e.gamma == 0.0)
            .ok_or_else(|| {
                Error::InvalidConfig(
                    "gamma sweep requires 0 in the gamma list as the baseline".into(),
                )
            })?
            .overall_ppl;
        for e in &mut entries {
            e.delta_vs_baseline = e.overall_ppl - baseline;
        }
        Ok(SweepReport { entries, seed })
    }

    pub fn baseline(&self) -> &SweepEntry {
        self.entries
            .iter()
            .find(|e| e.gamma == 0.0)
            .expect("sweeps always include gamma 0")
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("gamma,overall_ppl,high_ppl,medium_ppl,low_ppl,delta_vs_gamma0\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.gamma,
                e.overall_ppl,
                opt(e.buckets.row(Bucket::High).ppl),
                opt(e.buckets.row(Bucket::Medium).ppl),
                opt(e.buckets.row(Bucket::Low).ppl),
                e.delta_vs_baseline
            ));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:>8}  {:>12}  {:>12}  {:>12}  {:>12}  {:>12}\n",
            "gamma", "overall_ppl", "high_ppl", "medium_ppl", "low_ppl", "delta_vs_g0"
        );
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        for e in &self.entries {
            out.push_str(&format!(
                "{:>8}  {:>12.4}  {:>12}  {:>12}  {:>12}  {:>12.4}\n",
                e.gamma,
                e.overall_ppl,
                opt(e.buckets.row(Bucket::High).ppl),
                opt(e.buckets.row(Bucket::Medium).ppl),
                opt(e.buckets.row(Bucket::Low).ppl),
                e.delta_vs_baseline
            ));
        }
        out
    }
}

/// One sweep leg: trains a fresh model with MiLe at `gamma` (keeping the
/// base config's seeds and factor mode) and reports held-out perplexity
/// per frequency bucket. Errors carry the gamma value. Legs are
/// independent, so callers may run them in parallel.
pub fn sweep_run(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    sequences: &[Vec<u32>],
    buckets: &FrequencyBuckets,
    gamma: f64,
) -> Result<SweepEntry> {
    (|| -> Result<SweepEntry> {
        let spec = LossSpec::new(LossKind::MiLe, gamma, train_config.loss.factor_grad)?;
        let cfg = TrainConfig {
            loss: spec,
            ..train_config.clone()
        };
        let mut params = init(model_config)?;
        let run = train(&mut params, sequences, &cfg)?;
        let (_, eval_seqs) = split_sequences(sequences);
        let report = bucketed_ppl(&params, eval_seqs, buckets, cfg.batch_size)?;
        let overall = evaluate_ppl(&params, eval_seqs, cfg.batch_size)?;
        debug_assert!((overall - report.overall_ppl).abs() <= 1e-9 * overall);
        Ok(SweepEntry {
            gamma,
            overall_ppl: report.overall_ppl,
            buckets: report,
            metrics: run.metrics,
            delta_vs_baseline: 0.0,
        })
    })()
    .map_err(|e| Error::AtGamma {
        gamma,
        source: Box::new(e),
    })
}

/// Trains one model per gamma from identical initialization, data order,
/// and seeds. The gamma list must include 0, which serves as the
/// cross-entropy baseline.
pub fn gamma_sweep(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    sequences: &[Vec<u32>],
    buckets: &FrequencyBuckets,
    gammas: &[f64],
) -> Result<SweepReport> {
    if !gammas.contains(&0.0) {
        return Err(Error::InvalidConfig(
            "gamma sweep requires 0 in the gamma list as the baseline".into(),
        ));
    }
    let mut entries = Vec::with_capacity(gammas.len());
    for &gamma in gammas {
        entries.push(sweep_run(
            model_config,
            train_config,
            sequences,
            buckets,
            gamma,
        )?);
    }
    SweepReport::from_entries(entries, train_config.seed)
}
