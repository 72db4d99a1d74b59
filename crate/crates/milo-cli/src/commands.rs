//! Subcommand implementations. Every output-writing command creates the
//! run directory, writes its artifacts, then the config snapshot last, so
//! a snapshot's presence marks a completed run.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use milo::analysis::{bucketed_ppl, entropy_histogram, sweep_run, SweepEntry, SweepReport};
use milo::corpus::{
    bucket_report, build_frequency_buckets, chunk, compute_sampling_weights, generate_zipf_corpus,
    save_token_cache, CorpusStats, DomainManifest, Vocab, DEFAULT_COVERAGE,
};
use milo::losses::{grad_check, FactorGrad, LossKind, LossSpec};
use milo::model::{init, load_checkpoint, save_checkpoint};
use milo::trainer::train;
use milo::{Error, Result};

use crate::config::{load_config, load_tokens, write_snapshot, AppConfig};

#[derive(Parser)]
#[command(
    name = "milo",
    version,
    about = "Desk-scale language model training lab"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args)]
pub struct RunArgs {
    /// JSON config file.
    #[arg(long)]
    pub config: PathBuf,
    /// Override a config field, e.g. --set loss.gamma=2.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub sets: Vec<String>,
    /// Directory for all outputs of this run.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic token corpus and cache it.
    GenCorpus(RunArgs),
    /// Report frequency buckets over the configured corpus.
    Buckets(RunArgs),
    /// Print domain sampling weights from a manifest.
    Weights {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train a model and write metrics plus a checkpoint.
    Train(RunArgs),
    /// Evaluate a checkpoint: bucketed perplexity and entropy histogram.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Entropy histogram bin count.
        #[arg(long, default_value_t = 20)]
        bins: usize,
    },
    /// Train once per gamma and compare against the gamma=0 baseline.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated gamma list; must include 0.
        #[arg(long, value_delimiter = ',', required = true)]
        gammas: Vec<f64>,
        /// Max sweep legs run in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Check analytic loss gradients against finite differences.
    GradCheck {
        #[arg(long)]
        loss: String,
        #[arg(long, default_value_t = 0.0)]
        gamma: f64,
        /// Number of classes.
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value = "differentiable")]
        mode: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus(args) => gen_corpus(&args),
        Command::Buckets(args) => buckets(&args),
        Command::Weights { manifest, out_dir } => weights(&manifest, out_dir.as_deref()),
        Command::Train(args) => train_cmd(&args),
        Command::Eval {
            run,
            checkpoint,
            bins,
        } => eval_cmd(&run, &checkpoint, bins),
        Command::Sweep { run, gammas, jobs } => sweep_cmd(&run, &gammas, jobs),
        Command::GradCheck {
            loss,
            gamma,
            n,
            trials,
            mode,
            seed,
            tolerance,
        } => grad_check_cmd(&loss, gamma, n, trials, &mode, seed, tolerance),
    }
}

fn prepare(args: &RunArgs) -> Result<AppConfig> {
    let cfg = load_config(&args.config, &args.sets)?;
    fs::create_dir_all(&args.out_dir)?;
    Ok(cfg)
}

/// Sequences sized to the model window plus one target token.
fn chunked_sequences(cfg: &AppConfig) -> Result<Vec<Vec<u32>>> {
    let tokens = load_tokens(&cfg.data)?;
    chunk(&tokens, cfg.model.seq_len + 1)
}

fn corpus_buckets(
    tokens: &[u32],
    vocab_size: usize,
) -> Result<(CorpusStats, milo::corpus::FrequencyBuckets)> {
    let stats = CorpusStats::from_tokens(tokens, vocab_size)?;
    let buckets = build_frequency_buckets(&stats, DEFAULT_COVERAGE)?;
    Ok((stats, buckets))
}

fn gen_corpus(args: &RunArgs) -> Result<()> {
    let cfg = prepare(args)?;
    let s = cfg
        .data
        .synthetic
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("gen-corpus requires data.synthetic".into()))?;
    let tokens = generate_zipf_corpus(
        s.n_tokens,
        s.vocab_size,
        s.zipf_exponent,
        s.seed,
        s.markov_order,
    )?;
    let path = args.out_dir.join("tokens.bin");
    save_token_cache(&path, &tokens)?;
    write_snapshot(&args.out_dir, &cfg)?;
    println!("wrote {} tokens to {}", tokens.len(), path.display());
    Ok(())
}

fn buckets(args: &RunArgs) -> Result<()> {
    let cfg = prepare(args)?;
    let tokens = load_tokens(&cfg.data)?;
    let (stats, buckets) = corpus_buckets(&tokens, cfg.model.vocab_size)?;
    let vocab = Vocab::synthetic(cfg.model.vocab_size);
    let report = bucket_report(&stats, &vocab, &buckets)?;
    let path = args.out_dir.join("buckets.csv");
    fs::write(&path, report)?;
    write_snapshot(&args.out_dir, &cfg)?;
    println!("wrote bucket report to {}", path.display());
    Ok(())
}

fn weights(manifest_path: &Path, out_dir: Option<&Path>) -> Result<()> {
    let manifest = DomainManifest::load(manifest_path)?;
    let weights = compute_sampling_weights(&manifest)?;
    let mut csv = String::from("domain,weight\n");
    for (d, w) in manifest.domains.iter().zip(&weights) {
        println!("{},{}", d.name, w);
        csv.push_str(&format!("{},{}\n", d.name, w));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("weights.csv"), csv)?;
    }
    Ok(())
}

fn train_cmd(args: &RunArgs) -> Result<()> {
    let cfg = prepare(args)?;
    let sequences = chunked_sequences(&cfg)?;
    let mut params = init(&cfg.model)?;
    let run = train(&mut params, &sequences, &cfg.train)?;

    let metrics_path = args.out_dir.join("metrics.csv");
    fs::write(&metrics_path, run.metrics.to_csv())?;
    let ckpt_path = args.out_dir.join("checkpoint.bin");
    save_checkpoint(&ckpt_path, &params, Some(&run.optimizer.snapshot(&params)))?;
    write_snapshot(&args.out_dir, &cfg)?;

    match run.metrics.rows.last() {
        Some(last) => {
            let val = run.metrics.rows.iter().rev().find_map(|r| r.val_ppl);
            match val {
                Some(p) => println!(
                    "trained {} steps; final loss {}; val ppl {}",
                    last.step, last.loss, p
                ),
                None => println!("trained {} steps; final loss {}", last.step, last.loss),
            }
        }
        None => println!("trained 0 steps"),
    }
    println!("wrote {}", metrics_path.display());
    Ok(())
}

fn eval_cmd(args: &RunArgs, checkpoint: &Path, bins: usize) -> Result<()> {
    let cfg = prepare(args)?;
    let (params, _) = load_checkpoint(checkpoint)?;
    let tokens = load_tokens(&cfg.data)?;
    let (_, buckets) = corpus_buckets(&tokens, params.config.vocab_size)?;
    let sequences = chunk(&tokens, params.config.seq_len + 1)?;

    let report = bucketed_ppl(&params, &sequences, &buckets, cfg.train.batch_size)?;
    fs::write(args.out_dir.join("bucket_ppl.csv"), report.to_csv())?;
    let hist = entropy_histogram(&params, &sequences, bins, cfg.train.batch_size)?;
    fs::write(args.out_dir.join("entropy_hist.csv"), hist.to_csv())?;
    write_snapshot(&args.out_dir, &cfg)?;
    println!("overall ppl {}", report.overall_ppl);
    Ok(())
}

fn sweep_cmd(args: &RunArgs, gammas: &[f64], jobs: usize) -> Result<()> {
    let cfg = prepare(args)?;
    if !gammas.contains(&0.0) {
        return Err(Error::InvalidConfig(
            "gamma sweep requires 0 in the gamma list as the baseline".into(),
        ));
    }
    let sequences = chunked_sequences(&cfg)?;
    let tokens = load_tokens(&cfg.data)?;
    let (_, buckets) = corpus_buckets(&tokens, cfg.model.vocab_size)?;

    let entries = run_legs(&cfg, &sequences, &buckets, gammas, jobs)?;
    let report = SweepReport::from_entries(entries, cfg.train.seed)?;

    for e in &report.entries {
        let name = format!("metrics_gamma{}_seed{}.csv", e.gamma, report.seed);
        fs::write(args.out_dir.join(name), e.metrics.to_csv())?;
    }
    fs::write(args.out_dir.join("sweep.csv"), report.to_csv())?;
    fs::write(args.out_dir.join("sweep.txt"), report.to_text())?;
    write_snapshot(&args.out_dir, &cfg)?;
    print!("{}", report.to_text());
    Ok(())
}

/// Runs sweep legs on up to `jobs` worker threads; legs are independent
/// and deterministic, so the assembled result does not depend on `jobs`.
fn run_legs(
    cfg: &AppConfig,
    sequences: &[Vec<u32>],
    buckets: &milo::corpus::FrequencyBuckets,
    gammas: &[f64],
    jobs: usize,
) -> Result<Vec<SweepEntry>> {
    let workers = jobs.clamp(1, gammas.len());
    let mut slots: Vec<Option<SweepEntry>> = vec![None; gammas.len()];
    std::thread::scope(|scope| -> Result<()> {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || -> Vec<(usize, Result<SweepEntry>)> {
                    (w..gammas.len())
                        .step_by(workers)
                        .map(|i| {
                            (
                                i,
                                sweep_run(&cfg.model, &cfg.train, sequences, buckets, gammas[i]),
                            )
                        })
                        .collect()
                })
            })
            .collect();
        let mut first_err = None;
        for h in handles {
            for (i, r) in h.join().expect("sweep worker panicked") {
                match r {
                    Ok(e) => slots[i] = Some(e),
                    Err(e) => first_err = first_err.or(Some(e)),
                }
            }
        }
        match first_err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    })?;
    Ok(slots
        .into_iter()
        .map(|s| s.expect("every leg ran"))
        .collect())
}

fn grad_check_cmd(
    loss: &str,
    gamma: f64,
    n: usize,
    trials: usize,
    mode: &str,
    seed: u64,
    tolerance: f64,
) -> Result<()> {
    let kind = match loss {
        "ce" | "cross_entropy" => LossKind::CrossEntropy,
        "focal" => LossKind::Focal,
        "mile" => LossKind::MiLe,
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown loss '{other}'; expected ce, focal, or mile"
            )))
        }
    };
    let factor_grad = match mode {
        "detached" => FactorGrad::Detached,
        "differentiable" => FactorGrad::Differentiable,
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown mode '{other}'; expected detached or differentiable"
            )))
        }
    };
    let spec = LossSpec::new(kind, gamma, factor_grad)?;
    let report = grad_check(&spec, n, trials, seed)?;
    println!(
        "max_rel_err {:e} over {} trials (tolerance {:e})",
        report.max_rel_err, report.trials, tolerance
    );
    if report.max_rel_err > tolerance {
        return Err(Error::NumericCheck {
            what: "grad-check",
            detail: format!(
                "max relative error {:e} exceeds {:e}",
                report.max_rel_err, tolerance
            ),
        });
    }
    Ok(())
}
