//! `grtrack`: synthetic-data generation, training, tracking, evaluation,
//! compute benchmarking, and memory-policy ablation in one binary.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use grtrack_core::checkpoint;
use grtrack_core::config::ModelConfig;
use grtrack_core::macs::count_macs_staged;
use grtrack_core::memory::MemoryPolicy;
use grtrack_core::metrics::{read_results, summarize, write_metrics, write_results, ResultRow};
use grtrack_core::optim::AdamW;
use grtrack_core::pipeline::{
    make_sample, pick_training_frames, track_sequence, train_step, ModelParams,
};
use grtrack_core::synth::{
    gen_sequence, list_sequences, load_groundtruth, load_sequence, SynthConfig,
};
use grtrack_core::{Error, Rng};

/// Keyed-draw domains for run-level choices.
const DOM_SEQ_VARIETY: u64 = 101;
const DOM_SEQ_PICK: u64 = 102;

#[derive(Parser)]
#[command(name = "grtrack", version, about = "Memory-augmented visual tracker")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic tracking sequences
    GenData {
        /// Output directory; one subdirectory per sequence
        #[arg(long)]
        out: PathBuf,
        /// Number of sequences
        #[arg(long)]
        seqs: usize,
        /// Frames per sequence
        #[arg(long)]
        len: usize,
        /// Base seed; each sequence derives its own from it
        #[arg(long)]
        seed: u64,
        /// Per-frame appearance drift rate
        #[arg(long, default_value_t = 0.0)]
        drift: f64,
        /// Distractor rectangles per sequence
        #[arg(long, default_value_t = 0)]
        distractors: usize,
    },
    /// Train a model on generated sequences
    Train {
        /// Model configuration (TOML)
        #[arg(long)]
        config: PathBuf,
        /// Directory of generated sequences
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to write
        #[arg(long)]
        out: PathBuf,
        /// Curriculum stage: 1 uses fewer templates per sample than 2
        #[arg(long, default_value_t = 1)]
        stage: u32,
        /// Resume from an earlier checkpoint (its config takes precedence)
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Track one sequence with a trained checkpoint
    Track {
        #[arg(long)]
        ckpt: PathBuf,
        /// Sequence directory (frames + groundtruth.txt)
        #[arg(long)]
        seq: PathBuf,
        /// Memory policy: one_template|fifo|score|gr
        #[arg(long)]
        policy: String,
        /// Results CSV to write
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a results CSV against ground truth
    Eval {
        #[arg(long)]
        results: PathBuf,
        /// Sequence directory holding groundtruth.txt
        #[arg(long)]
        gt: PathBuf,
        /// Metrics CSV to write
        #[arg(long)]
        out: PathBuf,
    },
    /// Report analytic encoder MACs per pruning depth
    BenchMacs {
        #[arg(long)]
        config: PathBuf,
        /// Stage counts to evaluate, e.g. `2` or `0..3` (inclusive); all by default
        #[arg(long)]
        stages: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare memory policies over a directory of sequences
    Ablate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comparison table CSV to write
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

/// 2 for configuration mistakes, 3 for unreadable or inconsistent data,
/// 1 otherwise.
fn exit_code_for(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Config(_) => 2,
                Error::Data(_) | Error::Io(_) => 3,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

/// Default seed, overridable through `GRTRACK_SEED`.
fn env_seed() -> Result<u64> {
    match std::env::var("GRTRACK_SEED") {
        Err(_) => Ok(42),
        Ok(s) => s
            .parse()
            .map_err(|_| Error::Config(format!("GRTRACK_SEED '{s}' is not a u64")).into()),
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData {
            out,
            seqs,
            len,
            seed,
            drift,
            distractors,
        } => gen_data(&out, seqs, len, seed, drift, distractors),
        Cmd::Train {
            config,
            data,
            out,
            stage,
            resume,
        } => train(&config, &data, &out, stage, resume.as_deref()),
        Cmd::Track {
            ckpt,
            seq,
            policy,
            out,
        } => track(&ckpt, &seq, &policy, &out),
        Cmd::Eval { results, gt, out } => eval(&results, &gt, &out),
        Cmd::BenchMacs {
            config,
            stages,
            out,
        } => bench_macs(&config, stages.as_deref(), &out),
        Cmd::Ablate { ckpt, data, out } => ablate(&ckpt, &data, &out),
    }
}

// ── gen-data ────────────────────────────────────────────────────────────

fn gen_data(
    out: &Path,
    seqs: usize,
    len: usize,
    seed: u64,
    drift: f64,
    distractors: usize,
) -> Result<()> {
    if seqs == 0 {
        bail!(Error::Config("--seqs must be at least 1".into()));
    }
    if len < 2 {
        bail!(Error::Config("--len must be at least 2".into()));
    }
    if !(0.0..=1.0).contains(&drift) {
        bail!(Error::Config(format!("--drift {drift} outside 0..=1")));
    }
    std::fs::create_dir_all(out).map_err(Error::from)?;
    let rng = Rng::new(seed);
    for i in 0..seqs {
        let tag = i as u64;
        let vary = |k: u64| rng.uniform_at(&[DOM_SEQ_VARIETY, tag, k]);
        let cfg = SynthConfig {
            frames: len,
            target_w: (20.0 + (vary(0) * 12.0).floor()),
            target_h: (16.0 + (vary(1) * 10.0).floor()),
            velocity: (0.6 + 1.2 * vary(2), 0.4 + 1.0 * vary(3)),
            jitter: 0.3 + 0.4 * vary(4),
            hue_drift: drift,
            distractors,
            ..SynthConfig::default()
        };
        let seq_seed = seed ^ tag.wrapping_mul(0x9E3779B97F4A7C15);
        let (frames, boxes) = gen_sequence(&cfg, seq_seed)?;
        let dir = out.join(format!("seq_{i:04}"));
        grtrack_core::synth::save_sequence(&dir, &frames, &boxes)?;
    }
    println!(
        "wrote {seqs} sequences of {len} frames under {}",
        out.display()
    );
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────────

fn train(config: &Path, data: &Path, out: &Path, stage: u32, resume: Option<&Path>) -> Result<()> {
    if !(1..=2).contains(&stage) {
        bail!(Error::Config(format!("--stage {stage} must be 1 or 2")));
    }
    let seed = env_seed()?;
    let file_cfg = ModelConfig::load(config)?;
    let (cfg, mut params, mut opt) = match resume {
        None => {
            let mut rng = Rng::new(seed);
            let params = ModelParams::init(&mut rng, &file_cfg)?;
            let opt = AdamW::new(&file_cfg.train);
            (file_cfg, params, opt)
        }
        Some(path) => {
            let ck =
                checkpoint::load(path).with_context(|| format!("resuming {}", path.display()))?;
            if ck.config.to_toml()? != file_cfg.to_toml()? {
                println!("note: using the checkpoint's config, which differs from --config");
            }
            let mut opt = AdamW::new(&ck.config.train);
            if let Some((step, items)) = ck.optimizer {
                opt.import_state(step, items);
            }
            (ck.config, ck.params, opt)
        }
    };

    let dirs = list_sequences(data)?;
    let n_templates = if stage == 1 {
        cfg.train.templates_stage1
    } else {
        cfg.train.templates_stage2
    };
    let total_steps = cfg.train.steps as u64;
    if opt.step_count() >= total_steps {
        println!(
            "checkpoint already at step {}, nothing to do",
            opt.step_count()
        );
        checkpoint::save(out, &cfg, &params, Some(&opt))?;
        return Ok(());
    }

    let rng = Rng::new(seed);
    println!(
        "training {} ({} scalars) on {} sequences, steps {}..{}",
        cfg.name,
        params.n_scalars(),
        dirs.len(),
        opt.step_count(),
        total_steps
    );
    while opt.step_count() < total_steps {
        let step = opt.step_count();
        let pick = rng.uniform_at(&[DOM_SEQ_PICK, step]);
        let seq_idx = ((pick * dirs.len() as f64) as usize).min(dirs.len() - 1);
        let (frames, gts) = load_sequence(&dirs[seq_idx])?;
        if frames.len() < 2 {
            bail!(Error::Data(format!(
                "{} has fewer than 2 frames",
                dirs[seq_idx].display()
            )));
        }
        let want = n_templates.min(frames.len() - 1).max(1);
        let (sf, tf) = pick_training_frames(&rng, seq_idx as u64, step, frames.len(), want);
        let sample = make_sample(&frames, &gts, &cfg, sf, &tf)?;
        let report = train_step(&mut params, &mut opt, &sample, &cfg, &rng)?;
        let step_done = opt.step_count();
        if step_done % 20 == 0 || step_done == total_steps {
            println!(
                "step {step_done:>5}  loss {:.4}  focal {:.4}  giou {:.4}  l1 {:.4}  ratio {:.4}",
                report.total, report.focal, report.giou, report.l1, report.ratio
            );
        }
    }
    checkpoint::save(out, &cfg, &params, Some(&opt))?;
    println!("saved checkpoint to {}", out.display());
    Ok(())
}

// ── track ───────────────────────────────────────────────────────────────

fn track(ckpt: &Path, seq: &Path, policy: &str, out: &Path) -> Result<()> {
    let policy: MemoryPolicy = policy
        .parse::<MemoryPolicy>()
        .map_err(anyhow::Error::from)?;
    let ck = checkpoint::load(ckpt)?;
    let (frames, gts) = load_sequence(seq)?;
    let (rows, state) = track_sequence(&frames, &gts, &ck.params, &ck.config, policy)?;
    write_results(out, &rows)?;
    println!(
        "tracked {} frames with {policy} ({} memory updates) -> {}",
        rows.len(),
        state.update_trace.len(),
        out.display()
    );
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────────

fn eval(results: &Path, gt: &Path, out: &Path) -> Result<()> {
    let rows = read_results(results)?;
    let gts = load_groundtruth(gt)?;
    if rows.len() != gts.len() {
        bail!(Error::Data(format!(
            "results cover {} frames, ground truth has {}",
            rows.len(),
            gts.len()
        )));
    }
    // the directory's annotations are authoritative; frame order must match
    let rows: Vec<ResultRow> = rows
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            if r.frame != i {
                bail!(Error::Data(format!(
                    "results row {i} is for frame {}, expected {i}",
                    r.frame
                )));
            }
            Ok(ResultRow {
                frame: r.frame,
                pred: r.pred,
                gt: gts[i],
            })
        })
        .collect::<Result<_>>()?;
    let metrics = summarize(&rows)?;
    write_metrics(out, &metrics)?;
    for (k, v) in &metrics {
        println!("{k}: {v:.4}");
    }
    Ok(())
}

// ── bench-macs ──────────────────────────────────────────────────────────

/// `N` for one stage count, `A..B` for an inclusive range.
fn parse_stages(text: &str, max: usize) -> Result<Vec<usize>> {
    let parsed: Option<(usize, usize)> = match text.split_once("..") {
        Some((a, b)) => a.parse().ok().zip(b.parse().ok()),
        None => text.parse().ok().map(|n| (n, n)),
    };
    let Some((lo, hi)) = parsed else {
        bail!(Error::Config(format!(
            "--stages '{text}' is neither N nor A..B"
        )));
    };
    if lo > hi || hi > max {
        bail!(Error::Config(format!(
            "--stages {lo}..{hi} outside 0..{max}"
        )));
    }
    Ok((lo..=hi).collect())
}

fn bench_macs(config: &Path, stages: Option<&str>, out: &Path) -> Result<()> {
    let cfg = ModelConfig::load(config)?;
    let max = cfg.encoder.relevance_layers.len();
    let wanted = match stages {
        None => (0..=max).collect(),
        Some(s) => parse_stages(s, max)?,
    };
    let n_ref = cfg.memory.n_max(cfg.encoder.n_z());
    let dense = count_macs_staged(&cfg.encoder, n_ref, 0)?.total;
    let mut csv = String::from("config,stages,n_ref,macs,ratio\n");
    for s in wanted {
        let report = count_macs_staged(&cfg.encoder, n_ref, s)?;
        let ratio = report.total as f64 / dense as f64;
        csv.push_str(&format!(
            "{},{s},{n_ref},{},{ratio}\n",
            cfg.name, report.total
        ));
        println!(
            "{} stages: {:>14} MACs  ({:.4} of dense)",
            s, report.total, ratio
        );
    }
    std::fs::write(out, csv).map_err(Error::from)?;
    Ok(())
}

// ── ablate ──────────────────────────────────────────────────────────────

fn ablate(ckpt: &Path, data: &Path, out: &Path) -> Result<()> {
    let ck = checkpoint::load(ckpt)?;
    let dirs = list_sequences(data)?;
    let policies = [
        MemoryPolicy::OneTemplate,
        MemoryPolicy::Fifo,
        MemoryPolicy::Score,
        MemoryPolicy::Gr,
    ];
    let mut csv = String::from(
        "policy,sequences,success_auc,mean_iou,precision_5px,precision_10px,precision_20px\n",
    );
    for policy in policies {
        // average per-sequence summaries so long sequences don't dominate
        let mut sums = [0.0f64; 5];
        for dir in &dirs {
            let (frames, gts) = load_sequence(dir)?;
            let (rows, _) = track_sequence(&frames, &gts, &ck.params, &ck.config, policy)?;
            for (i, (_, v)) in summarize(&rows)?.iter().enumerate() {
                sums[i] += v;
            }
        }
        let n = dirs.len() as f64;
        let means: Vec<f64> = sums.iter().map(|s| s / n).collect();
        csv.push_str(&format!(
            "{policy},{},{},{},{},{},{}\n",
            dirs.len(),
            means[0],
            means[1],
            means[2],
            means[3],
            means[4]
        ));
        println!(
            "{policy:>12}: auc {:.4}  iou {:.4}  p5 {:.4}  p10 {:.4}  p20 {:.4}",
            means[0], means[1], means[2], means[3], means[4]
        );
    }
    std::fs::write(out, csv).map_err(Error::from)?;
    Ok(())
}
