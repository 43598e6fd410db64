//! `refgen`: pipeline driver for the RF fake-generation stack.
//!
//! Commands: data, train-vqvae, tokenize, train-dot, gen, eval. Each reads an
//! optional JSON config (`--config`), accepts flag overrides, writes a
//! `.manifest.json` sidecar for every artifact, and re-checks the provenance
//! hash chain of its inputs under `--verify`.
//!
//! Exit codes: 0 success, 2 validation error, 3 integrity error, 4 numerical
//! divergence.

use clap::{Args, Parser, Subcommand};
use refgen_core::artifact::{
    read_dataset, read_tokens, verify_chain, write_dataset, write_manifest, write_tokens,
};
use refgen_core::classifier::{train_classifier, Classifier};
use refgen_core::config::RunConfig;
use refgen_core::dataset::{build_dataset, IQFrame, NUM_CLASSES};
use refgen_core::dot::{detokenize, generate, train_dot, Dot};
use refgen_core::error::CoreError;
use refgen_core::eval::{
    accuracy_table, codebook_histogram, constellation_export, tv_distance, write_histogram_csv,
    MetricReport,
};
use refgen_core::kde::toppr;
use refgen_core::rng::derive_seed;
use refgen_core::tokens::{encode_corpus, make_pairs};
use refgen_core::vqvae::{train_vqvae, Vqvae};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "refgen", version, about = "RF modulation fake-generation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; flags override file values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed for this command
    #[arg(long)]
    seed: Option<u64>,
    /// Re-check the provenance hash chain of every input artifact
    #[arg(long)]
    verify: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the labeled I/Q dataset
    Data {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        snr_db: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the VQ-VAE on a dataset
    TrainVqvae {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Encode a dataset into discrete latent token sequences
    Tokenize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        vqvae: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the decoder-only transformer on token sequences
    TrainDot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tokens: Option<PathBuf>,
        /// "nano" or "large"
        #[arg(long)]
        size: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample fake frames from the trained models
    Gen {
        #[command(flatten)]
        common: Common,
        /// Prompt class 0..5; omitted = class-balanced round robin
        #[arg(long)]
        class: Option<u8>,
        #[arg(long, default_value_t = 60)]
        count: usize,
        #[arg(long)]
        temp: Option<f32>,
        #[arg(long)]
        vqvae: Option<PathBuf>,
        #[arg(long)]
        dot: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score fakes against reals: TopP&R, classifier accuracy, exports
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        real: Option<PathBuf>,
        #[arg(long)]
        fake: Option<PathBuf>,
        /// Classifier checkpoint; trained on the reals and saved here if absent
        #[arg(long)]
        classifier: Option<PathBuf>,
        /// Real corpus token file; enables codebook-usage comparison when the
        /// fake token sidecar is present
        #[arg(long)]
        tokens: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        let code = match e {
            CoreError::Integrity(_) => 3,
            CoreError::Divergence(_) => 4,
            _ => 2,
        };
        std::process::exit(code);
    }
}

fn load_config(common: &Common) -> Result<RunConfig, CoreError> {
    match &common.config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn check_inputs(common: &Common, inputs: &[&Path]) -> Result<(), CoreError> {
    for p in inputs {
        if !p.exists() {
            return Err(CoreError::InvalidArgument(format!(
                "missing input artifact {}",
                p.display()
            )));
        }
        if common.verify && refgen_core::artifact::manifest_path(p).exists() {
            verify_chain(p)?;
        }
    }
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<(), CoreError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CoreError> {
    match cli.command {
        Command::Data { common, per_class, snr_db, out } => {
            let mut cfg = load_config(&common)?;
            if let Some(n) = per_class {
                cfg.data.per_class = n;
            }
            if let Some(s) = common.seed {
                cfg.data.seed = s;
            }
            if snr_db.is_some() {
                cfg.data.snr_db = snr_db;
            }
            cfg.validate()?;
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.paths.dataset));
            ensure_parent(&out)?;
            let frames = build_dataset(cfg.data.per_class, cfg.data.seed, cfg.data.snr_db)?;
            write_dataset(&out, &frames)?;
            write_manifest(&out, "data", cfg.data.seed, cfg.to_json(), &[])?;
            println!("wrote {} frames to {}", frames.len(), out.display());
        }
        Command::TrainVqvae { common, data, out } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.vqvae.seed = s;
            }
            cfg.validate()?;
            let data = data.unwrap_or_else(|| PathBuf::from(&cfg.paths.dataset));
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.paths.vqvae));
            check_inputs(&common, &[&data])?;
            ensure_parent(&out)?;
            let frames = read_dataset(&data)?;
            let trained = train_vqvae(&frames, cfg.vqvae.model(), &cfg.vqvae.train())?;
            for log in &trained.log {
                println!(
                    "epoch {:3}  rec {:.4}  total {:.4}  val {:.4}  codes {:3}  H {:.3}",
                    log.epoch, log.rec, log.total, log.val_total, log.distinct_codes,
                    log.codebook_entropy
                );
            }
            trained.model.save(&out)?;
            write_manifest(&out, "train-vqvae", cfg.vqvae.seed, cfg.to_json(), &[&data])?;
            println!("saved VQ-VAE checkpoint to {}", out.display());
        }
        Command::Tokenize { common, data, vqvae, out } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.data.seed = s;
            }
            cfg.validate()?;
            let data = data.unwrap_or_else(|| PathBuf::from(&cfg.paths.dataset));
            let vq_path = vqvae.unwrap_or_else(|| PathBuf::from(&cfg.paths.vqvae));
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.paths.tokens));
            check_inputs(&common, &[&data, &vq_path])?;
            ensure_parent(&out)?;
            let frames = read_dataset(&data)?;
            let vq = Vqvae::load(&vq_path)?;
            let seqs = encode_corpus(&frames, &vq, cfg.data.seed)?;
            write_tokens(&out, &seqs)?;
            write_manifest(&out, "tokenize", cfg.data.seed, cfg.to_json(), &[&data, &vq_path])?;
            println!("wrote {} token sequences to {}", seqs.len(), out.display());
        }
        Command::TrainDot { common, tokens, size, out } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.dot.seed = s;
            }
            if let Some(sz) = size {
                cfg.dot.size = sz;
            }
            cfg.validate()?;
            let tokens = tokens.unwrap_or_else(|| PathBuf::from(&cfg.paths.tokens));
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.paths.dot));
            check_inputs(&common, &[&tokens])?;
            ensure_parent(&out)?;
            let seqs = read_tokens(&tokens)?;
            let pairs = seqs.iter().map(make_pairs).collect::<Result<Vec<_>, _>>()?;
            let trained = train_dot(&pairs, cfg.dot.model()?, &cfg.dot.train())?;
            for log in &trained.log {
                println!(
                    "epoch {:3}  train CE {:.4}  val CE {:.4}{}",
                    log.epoch,
                    log.train_ce,
                    log.val_ce,
                    if log.overfit_warning { "  [overfit warning]" } else { "" }
                );
            }
            trained.model.save(&out)?;
            write_manifest(&out, "train-dot", cfg.dot.seed, cfg.to_json(), &[&tokens])?;
            println!("saved transformer checkpoint to {}", out.display());
        }
        Command::Gen { common, class, count, temp, vqvae, dot, out } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.dot.seed = s;
            }
            if let Some(t) = temp {
                cfg.dot.temperature = t;
            }
            cfg.validate()?;
            if let Some(c) = class {
                if c as usize >= NUM_CLASSES {
                    return Err(CoreError::InvalidArgument(format!(
                        "class {c} out of range 0..{NUM_CLASSES}"
                    )));
                }
            }
            if count == 0 {
                return Err(CoreError::InvalidArgument("count must be >= 1".into()));
            }
            let vq_path = vqvae.unwrap_or_else(|| PathBuf::from(&cfg.paths.vqvae));
            let dot_path = dot.unwrap_or_else(|| PathBuf::from(&cfg.paths.dot));
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.paths.fakes));
            check_inputs(&common, &[&vq_path, &dot_path])?;
            ensure_parent(&out)?;
            let vq = Vqvae::load(&vq_path)?;
            let model = Dot::load(&dot_path)?;
            let mut fakes: Vec<IQFrame> = Vec::with_capacity(count);
            let mut seqs = Vec::with_capacity(count);
            for i in 0..count {
                let c = class.unwrap_or((i % NUM_CLASSES) as u8);
                let seed = derive_seed(cfg.dot.seed, &[0xfa4e, i as u64]);
                let seq = generate(&model, c, seed, cfg.dot.temperature)?;
                fakes.push(detokenize(&seq, &vq)?);
                seqs.push(seq);
            }
            write_dataset(&out, &fakes)?;
            write_manifest(&out, "gen", cfg.dot.seed, cfg.to_json(), &[&vq_path, &dot_path])?;
            // token sidecar, so eval can compare codebook usage against the corpus
            let tok_out = tokens_sidecar(&out);
            write_tokens(&tok_out, &seqs)?;
            write_manifest(&tok_out, "gen", cfg.dot.seed, cfg.to_json(), &[&vq_path, &dot_path])?;
            println!("wrote {count} fakes to {}", out.display());
        }
        Command::Eval { common, real, fake, classifier, tokens, report } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.eval.seed = s;
            }
            cfg.validate()?;
            let real = real.unwrap_or_else(|| PathBuf::from(&cfg.paths.dataset));
            let fake = fake.unwrap_or_else(|| PathBuf::from(&cfg.paths.fakes));
            let cls_path = classifier.unwrap_or_else(|| PathBuf::from(&cfg.paths.classifier));
            let report_path = report.unwrap_or_else(|| PathBuf::from(&cfg.paths.report));
            check_inputs(&common, &[&real, &fake])?;
            ensure_parent(&report_path)?;
            let reals = read_dataset(&real)?;
            let fakes = read_dataset(&fake)?;
            let model = if cls_path.exists() {
                check_inputs(&common, &[&cls_path])?;
                Classifier::load(&cls_path)?
            } else {
                println!("training classifier on {} real frames", reals.len());
                let m = train_classifier(&reals, &cfg.eval.classifier())?;
                ensure_parent(&cls_path)?;
                m.save(&cls_path)?;
                write_manifest(&cls_path, "eval", cfg.eval.seed, cfg.to_json(), &[&real])?;
                m
            };
            let rf = model.features(&reals)?;
            let ff = model.features(&fakes)?;
            let scores = toppr(&rf, &ff, &cfg.eval.kde())?;
            let table = accuracy_table(
                &model,
                &[("real".into(), reals.as_slice()), ("fake".into(), fakes.as_slice())],
            )?;
            let dir = report_path.parent().unwrap_or(Path::new(".")).to_path_buf();
            constellation_export(&fakes, &dir, "fake")?;
            let real_tok = tokens.unwrap_or_else(|| PathBuf::from(&cfg.paths.tokens));
            let fake_tok = tokens_sidecar(&fake);
            let token_tv = if real_tok.exists() && fake_tok.exists() {
                check_inputs(&common, &[&real_tok, &fake_tok])?;
                let rh = codebook_histogram(&read_tokens(&real_tok)?);
                let fh = codebook_histogram(&read_tokens(&fake_tok)?);
                write_histogram_csv(&dir.join("codebook_real.csv"), &rh)?;
                write_histogram_csv(&dir.join("codebook_fake.csv"), &fh)?;
                let mut tv = [0.0f64; NUM_CLASSES];
                for c in 0..NUM_CLASSES {
                    tv[c] = tv_distance(&rh[c], &fh[c]);
                }
                Some(tv)
            } else {
                None
            };
            let rep = MetricReport {
                toppr: scores,
                accuracy: table,
                token_tv,
                kde_config: cfg.eval.kde(),
                config_echo: cfg.to_json(),
            };
            rep.write_json(&report_path)?;
            write_manifest(&report_path, "eval", cfg.eval.seed, cfg.to_json(), &[&real, &fake])?;
            println!(
                "fidelity {:.3}  diversity {:.3}  top_f1 {:.3}",
                rep.toppr.fidelity, rep.toppr.diversity, rep.toppr.top_f1
            );
            for row in &rep.accuracy {
                println!("{} accuracy {:.3}", row.dataset, row.overall);
            }
            println!("report written to {}", report_path.display());
        }
    }
    Ok(())
}

/// `out/fakes.rfds` -> `out/fakes.rftk`
fn tokens_sidecar(fakes: &Path) -> PathBuf {
    fakes.with_extension("rftk")
}
