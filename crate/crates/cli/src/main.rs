use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use btdnet::augment::TtaPlan;
use btdnet::config::{train_from_root, PipelineConfig};
use btdnet::data::{
    dataset_stats, prep_root_for, prepare_dataset, LengthPolicy, Manifest, MANIFEST_FILE,
};
use btdnet::evaluation::evaluate_fold;
use btdnet::fixtures::{random_lengths, random_scan, tiny_model_config};
use btdnet::network::{load_checkpoint, BackboneKind, BtdNet, Topology};
use btdnet::objective::{loss_gradient_check, LossConfig, MixedBatch};
use btdnet::selftest::run_selftest;
use btdnet::synth::generate_synthetic;
use btdnet::training::{derangement, evaluate_run, CvOptions};
use btdnet::Label;

#[derive(Parser)]
#[command(
    name = "btdnet",
    version,
    about = "Multimodal variable-length scan classifier"
)]
struct Cli {
    /// Pipeline configuration (TOML, dotted keys)
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a planted class signal
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Filter, crop, resize and normalize a raw dataset into <root>_prep/
    Prep {
        #[arg(long)]
        root: PathBuf,
        /// Output root, `<root>_prep` by default
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Slice-count tables and chart of a dataset
    Report {
        #[arg(long)]
        root: PathBuf,
        /// Output directory, the dataset root by default
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Two-phase training with stratified k-fold cross-validation
    Train {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        seed: Option<u64>,
        /// Run a single fold
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Evaluate a finished run, or a single checkpoint on a whole dataset
    Eval {
        #[arg(long)]
        root: Option<PathBuf>,
        /// Run directory written by `train`
        #[arg(long)]
        out: Option<PathBuf>,
        /// Evaluate this checkpoint instead of a run
        #[arg(long, value_name = "FILE")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long)]
        tta: bool,
        #[arg(long)]
        strict_length: bool,
    },
    /// Compare loss gradients with central differences on a random model
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
        /// Number of parameters to probe
        #[arg(long, default_value_t = 120)]
        n: usize,
    },
    /// Run the invariant suite
    Selftest {
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print a configuration file
    Config {
        /// Desk-scale synthetic preset instead of the full-size defaults
        #[arg(long)]
        desk: bool,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, value_parser = ["tiny_cnn", "resnet18_gap"])]
    backbone: Option<String>,
    /// Fail on volumes longer than the model length instead of truncating
    #[arg(long)]
    strict_length: bool,
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(PipelineConfig::default()),
    }
}

fn apply_model_args(cfg: &mut PipelineConfig, args: &ModelArgs) -> Result<()> {
    if let Some(b) = &args.backbone {
        cfg.model.backbone.kind = b.parse::<BackboneKind>().map_err(anyhow::Error::msg)?;
    }
    if args.strict_length {
        cfg.data.length_policy = LengthPolicy::Strict;
    }
    cfg.validate()?;
    Ok(())
}

/// A raw root is prepared first; a prepared root is used as is.
fn prepared_root(cfg: &PipelineConfig, root: &Path) -> Result<PathBuf> {
    if root.join(btdnet::data::preprocess::PREP_META_FILE).exists() {
        return Ok(root.to_path_buf());
    }
    let prep = prep_root_for(root);
    if !prep.join(MANIFEST_FILE).exists() {
        prepare_dataset(&Manifest::load(root)?, &prep, &cfg.data.prep())?;
    }
    Ok(prep)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Synth { out, n, seed } => {
            if let Some(n) = n {
                cfg.synth.num_scans = n;
            }
            if let Some(s) = seed {
                cfg.synth.seed = s;
            }
            let m = generate_synthetic(&cfg.synth, &out)?;
            println!("wrote {} scans to {}", m.len(), out.display());
        }
        Command::Prep { root, out } => {
            let manifest = Manifest::load(&root)?;
            let out = out.unwrap_or_else(|| prep_root_for(&root));
            let m = prepare_dataset(&manifest, &out, &cfg.data.prep())?;
            println!("prepared {} scans into {}", m.len(), out.display());
        }
        Command::Report { root, out } => {
            let stats = dataset_stats(&Manifest::load(&root)?);
            let out = out.unwrap_or_else(|| root.clone());
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            fs::write(out.join("slice_totals.csv"), stats.totals_csv())?;
            fs::write(out.join("slice_counts.csv"), stats.counts_csv())?;
            let png = out.join("slices.png");
            stats
                .chart()
                .save(&png)
                .with_context(|| format!("writing {}", png.display()))?;
            print!("{}", stats.totals_csv());
        }
        Command::Train {
            root,
            out,
            model,
            seed,
            fold,
        } => {
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            apply_model_args(&mut cfg, &model)?;
            let opts = CvOptions {
                out_dir: Some(out.clone()),
                folds: fold.map(|f| vec![f]),
                extra_config: Some(serde_json::to_value(&cfg)?),
            };
            let summary = train_from_root(&cfg, &root, &opts)?;
            for (m, r) in &summary.phase1 {
                println!("phase 1 {m}: {r}");
            }
            println!("phase 2 (validation): {}", summary.phase2);
            println!("phase 2 with TTA: {}", summary.tta);
        }
        Command::Eval {
            root,
            out,
            ckpt,
            fold,
            tta,
            strict_length,
        } => {
            if strict_length {
                cfg.data.length_policy = LengthPolicy::Strict;
            }
            if let Some(path) = ckpt {
                let (model, meta) = load_checkpoint(&path)?;
                let Some(root) = root else {
                    bail!("--root is required with --ckpt")
                };
                cfg.model = model.config().clone();
                let scans = cfg.load_prepared(&prepared_root(&cfg, &root)?)?;
                let refs: Vec<_> = scans.iter().collect();
                let plan = TtaPlan::from_config(&cfg.augment);
                let ev = evaluate_fold(&model, &refs, tta.then_some(&plan))?;
                println!(
                    "{} ({:?} model, fold {:?}): macro F1 {:.4} on {} scans",
                    path.display(),
                    meta.kind,
                    meta.fold,
                    ev.macro_f1,
                    refs.len()
                );
            } else {
                let (Some(root), Some(out)) = (root, out) else {
                    bail!("eval needs --root and --out (a run directory), or --ckpt")
                };
                let meta = btdnet::training::read_run_meta(&out)?;
                cfg.model = meta.setup.model.clone();
                let scans = cfg.load_prepared(&prepared_root(&cfg, &root)?)?;
                let report = evaluate_run(&out, &scans, tta, fold.map(|f| vec![f]).as_deref())?;
                println!("{}", serde_json::to_string_pretty(&report)?);
            }
        }
        Command::Gradcheck { seed, n } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(cfg.train.seed));
            let net = BtdNet::new(tiny_model_config(6), Topology::Full, &mut rng)?;
            let scans: Vec<_> = (0..4)
                .map(|i| {
                    let l = random_lengths(&mut rng, [6; 4]);
                    random_scan(
                        &mut rng,
                        &format!("g{i}"),
                        Label::from_class(i % 2),
                        [6; 4],
                        l,
                        12,
                    )
                })
                .collect();
            let batch = MixedBatch::new(scans, derangement(4, &mut rng)?, 0.3)?;
            let loss = LossConfig {
                reduction: cfg.loss.reduction,
                literal_eq2: cfg.loss.literal_eq2,
                ..LossConfig::default()
            };
            let report = loss_gradient_check(&net, &batch, &loss, n, 1e-5, &mut rng)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if report.max_rel_error >= 1e-4 {
                bail!(
                    "max relative error {:.3e} exceeds 1e-4",
                    report.max_rel_error
                );
            }
        }
        Command::Selftest { seed } => {
            let checks = run_selftest(seed.unwrap_or(0));
            for c in &checks {
                println!(
                    "[{}] {}: {}",
                    if c.passed { "pass" } else { "FAIL" },
                    c.name,
                    c.detail
                );
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                bail!("{failed} of {} checks failed", checks.len());
            }
        }
        Command::Config { desk } => {
            let c = if desk {
                PipelineConfig::desk_synthetic()
            } else {
                cfg
            };
            print!("{}", c.to_toml_string()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // clap exits with 2 on usage errors and 0 for --help/--version
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
