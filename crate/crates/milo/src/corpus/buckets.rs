//! Frequency-coverage buckets over token counts.
//!
//! Tokens sorted by descending count (ties by ascending id) are split into
//! High / Medium / Low by minimal coverage prefixes: High is the shortest
//! prefix covering at least the first target, High+Medium the shortest
//! covering the second. The token that first reaches a target closes that
//! bucket; zero-count tokens always land in Low.

use super::{CorpusStats, Vocab};
use crate::error::{Error, Result};
use std::fmt;

pub const DEFAULT_COVERAGE: (f64, f64) = (0.80, 0.95);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bucket {
    High,
    Medium,
    Low,
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Bucket::High => "high",
            Bucket::Medium => "medium",
            Bucket::Low => "low",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyBuckets {
    /// Per token id.
    pub assignment: Vec<Bucket>,
    pub coverage_targets: (f64, f64),
    /// Ids in descending-count order, ties broken by ascending id.
    pub order: Vec<u32>,
}

impl FrequencyBuckets {
    pub fn ids_in(&self, bucket: Bucket) -> Vec<u32> {
        (0..self.assignment.len() as u32)
            .filter(|&id| self.assignment[id as usize] == bucket)
            .collect()
    }
}

pub fn build_frequency_buckets(
    stats: &CorpusStats,
    coverage_targets: (f64, f64),
) -> Result<FrequencyBuckets> {
    let (t1, t2) = coverage_targets;
    if !(t1 > 0.0 && t1 <= t2 && t2 <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "coverage targets must satisfy 0 < first <= second <= 1, got ({t1}, {t2})"
        )));
    }
    if stats.total == 0 {
        return Err(Error::EmptyInput("corpus stats"));
    }
    let mut order: Vec<u32> = (0..stats.counts.len() as u32).collect();
    order.sort_by(|&a, &b| {
        stats.counts[b as usize]
            .cmp(&stats.counts[a as usize])
            .then(a.cmp(&b))
    });
    let mut assignment = vec![Bucket::Low; stats.counts.len()];
    let mut bucket = Bucket::High;
    let mut cum = 0u64;
    for &id in &order {
        cum += stats.counts[id as usize];
        assignment[id as usize] = bucket;
        let coverage = cum as f64 / stats.total as f64;
        bucket = if coverage >= t2 {
            Bucket::Low
        } else if coverage >= t1 {
            Bucket::Medium
        } else {
            bucket
        };
    }
    Ok(FrequencyBuckets {
        assignment,
        coverage_targets,
        order,
    })
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// CSV report in descending-count order.
pub fn bucket_report(
    stats: &CorpusStats,
    vocab: &Vocab,
    buckets: &FrequencyBuckets,
) -> Result<String> {
    if vocab.len() != stats.counts.len() {
        return Err(Error::InvalidConfig(format!(
            "vocab of {} surfaces does not cover {} counted tokens",
            vocab.len(),
            stats.counts.len()
        )));
    }
    let mut out = String::from("token_id,surface,count,frequency,cum_frequency,bucket\n");
    let mut cum = 0u64;
    for &id in &buckets.order {
        let count = stats.counts[id as usize];
        cum += count;
        let freq = count as f64 / stats.total as f64;
        let cum_freq = cum as f64 / stats.total as f64;
        let surface = csv_field(vocab.surface(id).unwrap_or(""));
        out.push_str(&format!(
            "{id},{surface},{count},{freq},{cum_freq},{}\n",
            buckets.assignment[id as usize]
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(counts: &[u64]) -> CorpusStats {
        CorpusStats {
            counts: counts.to_vec(),
            total: counts.iter().sum(),
        }
    }

    #[test]
    fn worked_example_with_exact_threshold_hits() {
        let b = build_frequency_buckets(&stats(&[50, 30, 15, 5]), DEFAULT_COVERAGE).unwrap();
        assert_eq!(
            b.assignment,
            [Bucket::High, Bucket::High, Bucket::Medium, Bucket::Low]
        );
        assert_eq!(b.order, [0, 1, 2, 3]);
    }

    #[test]
    fn single_token_vocab_is_all_high() {
        let b = build_frequency_buckets(&stats(&[42]), DEFAULT_COVERAGE).unwrap();
        assert_eq!(b.assignment, [Bucket::High]);
        assert!(b.ids_in(Bucket::Medium).is_empty());
        assert!(b.ids_in(Bucket::Low).is_empty());
    }

    #[test]
    fn dominant_token_leaves_medium_empty() {
        let b = build_frequency_buckets(&stats(&[97, 1, 1, 1]), DEFAULT_COVERAGE).unwrap();
        assert_eq!(b.assignment[0], Bucket::High);
        assert!(b.ids_in(Bucket::Medium).is_empty());
        assert_eq!(b.ids_in(Bucket::Low), [1, 2, 3]);
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let b = build_frequency_buckets(&stats(&[10, 40, 40, 10]), DEFAULT_COVERAGE).unwrap();
        assert_eq!(b.order, [1, 2, 0, 3]);
        assert_eq!(b.assignment[1], Bucket::High);
        assert_eq!(b.assignment[2], Bucket::High);
    }

    #[test]
    fn zero_count_tokens_are_low() {
        let b = build_frequency_buckets(&stats(&[5, 0, 3, 0]), DEFAULT_COVERAGE).unwrap();
        assert_eq!(b.assignment[1], Bucket::Low);
        assert_eq!(b.assignment[3], Bucket::Low);
    }

    #[test]
    fn random_counts_match_prefix_scan_oracle() {
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(99, "bucket-oracle");
        for trial in 0..20 {
            let counts: Vec<u64> = (0..100)
                .map(|_| {
                    if rng.gen_bool(0.1) {
                        0
                    } else {
                        rng.gen_range(1..1000)
                    }
                })
                .collect();
            let st = stats(&counts);
            if st.total == 0 {
                continue;
            }
            let got = build_frequency_buckets(&st, DEFAULT_COVERAGE).unwrap();

            // Oracle: exhaustively scan prefixes of the sorted order for the
            // minimal covers, then label by membership.
            let mut order: Vec<usize> = (0..counts.len()).collect();
            order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
            let coverage = |k: usize| -> f64 {
                order[..k].iter().map(|&i| counts[i]).sum::<u64>() as f64 / st.total as f64
            };
            let high_len = (1..=order.len()).find(|&k| coverage(k) >= 0.80).unwrap();
            let med_len = (high_len..=order.len())
                .find(|&k| coverage(k) >= 0.95)
                .unwrap();
            for (pos, &id) in order.iter().enumerate() {
                let want = if pos < high_len {
                    Bucket::High
                } else if pos < med_len {
                    Bucket::Medium
                } else {
                    Bucket::Low
                };
                assert_eq!(
                    got.assignment[id], want,
                    "trial {trial}, id {id} at position {pos}"
                );
            }
        }
    }

    #[test]
    fn bucket_assignment_is_scale_invariant() {
        let counts: Vec<u64> = vec![31, 7, 90, 4, 4, 22, 0, 13];
        let a = build_frequency_buckets(&stats(&counts), DEFAULT_COVERAGE).unwrap();
        let scaled: Vec<u64> = counts.iter().map(|c| c * 7).collect();
        let b = build_frequency_buckets(&stats(&scaled), DEFAULT_COVERAGE).unwrap();
        assert_eq!(a.assignment, b.assignment);
    }

    #[test]
    fn empty_stats_are_rejected() {
        assert!(build_frequency_buckets(&stats(&[0, 0]), DEFAULT_COVERAGE).is_err());
        assert!(build_frequency_buckets(&stats(&[]), DEFAULT_COVERAGE).is_err());
        assert!(build_frequency_buckets(&stats(&[1]), (0.9, 0.5)).is_err());
    }

    #[test]
    fn report_lists_tokens_in_descending_order() {
        let st = stats(&[5, 30, 15, 50]);
        let b = build_frequency_buckets(&st, DEFAULT_COVERAGE).unwrap();
        let vocab = Vocab::synthetic(4);
        let report = bucket_report(&st, &vocab, &b).unwrap();
        let lines: Vec<&str> = report.lines().collect();
        assert_eq!(
            lines[0],
            "token_id,surface,count,frequency,cum_frequency,bucket"
        );
        assert_eq!(lines[1], "3,t3,50,0.5,0.5,high");
        assert_eq!(lines[2], "1,t1,30,0.3,0.8,high");
        assert_eq!(lines[3], "2,t2,15,0.15,0.95,medium");
        assert_eq!(lines[4], "0,t0,5,0.05,1,low");
    }

    #[test]
    fn report_escapes_awkward_surfaces() {
        assert_eq!(csv_field("plain"), "plain");
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
    }
}
