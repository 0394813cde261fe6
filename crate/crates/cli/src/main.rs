//! `icrl` command line: datagen, train, eval, experiment run, report.

mod config;

use clap::{Args, Parser, Subcommand};
use config::{pick, resolved_text, FileConfig};
use icrl_core::datagen::{build_dataset, DatagenConfig, Dataset, QualityTier};
use icrl_core::env::{read_maps_file, write_maps_file, MapSpec};
use icrl_core::error::{Error, Result};
use icrl_core::eval::{aggregate_csv, run_batch, trial_records_jsonl, EpsilonSchedule};
use icrl_core::experiments::{
    report_from_csvs, run_nonstationary, run_ood, run_quality, run_stitching_experiment,
    run_unseen, CurveSeries, EvalContext, ExperimentKind, ExperimentSpec, ModelVariant, Profile,
    QualityRunConfig,
};
use icrl_core::model::{load_model, save_model, ModelConfig, ModelParams};
use icrl_core::trainer::{metrics_csv, train, TrainConfig};
use icrl_core::util::derive_seed;
use std::collections::HashSet;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "icrl",
    version,
    about = "Desk-scale in-context reinforcement learning lab",
    disable_help_subcommand = true
)]
struct Cli {
    /// Worker threads (fallback: ICRL_WORKERS, then all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate an offline dataset of tabular-agent episodes.
    Datagen(DatagenArgs),
    /// Train the transformer with the DQN objective on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint online with the epsilon warm-up harness.
    Eval(EvalArgs),
    /// Run one of the five experiments.
    Experiment {
        #[command(subcommand)]
        cmd: ExperimentCmd,
    },
    /// Regenerate plots from stored aggregate CSVs.
    Report(ReportArgs),
}

#[derive(Subcommand)]
enum ExperimentCmd {
    Run(ExperimentArgs),
}

#[derive(Args)]
struct DatagenArgs {
    /// Flat key=value config file; explicit flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// paper or desk defaults.
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    maps: Option<usize>,
    #[arg(long)]
    size_min: Option<usize>,
    #[arg(long)]
    size_max: Option<usize>,
    #[arg(long)]
    hole_prob: Option<f64>,
    #[arg(long)]
    episodes_per_map: Option<usize>,
    #[arg(long)]
    sets: Option<usize>,
    #[arg(long)]
    slice_len: Option<usize>,
    /// high, mid or low.
    #[arg(long)]
    tier: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    profile: Option<String>,
    /// Dataset directory produced by `datagen`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    reward_scale: Option<f64>,
    #[arg(long)]
    warmup_batches: Option<u64>,
    #[arg(long)]
    batch_slices: Option<usize>,
    #[arg(long)]
    batches: Option<usize>,
    /// Global-norm gradient clip; 0 disables.
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write a checkpoint every K batches (0 = only at the end).
    #[arg(long)]
    ckpt_every: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    max_context: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Progress line every N batches (0 = quiet).
    #[arg(long, default_value_t = 25)]
    log_every: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Evaluate on these maps instead of generating fresh ones.
    #[arg(long)]
    maps_file: Option<PathBuf>,
    /// Dataset directory whose maps must stay disjoint from eval maps.
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long)]
    n_maps: Option<usize>,
    #[arg(long)]
    size_min: Option<usize>,
    #[arg(long)]
    size_max: Option<usize>,
    #[arg(long)]
    hole_prob: Option<f64>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Context window during evaluation (default: model max_context).
    #[arg(long)]
    capacity: Option<usize>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// unseen | ood | stitch | quality | nonstat.
    #[arg(long)]
    kind: String,
    /// Trained checkpoint; repeat for an alpha sweep (labels from filenames).
    #[arg(long)]
    ckpt: Vec<PathBuf>,
    /// Dataset directory used for training (disjointness checks).
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_maps: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    capacity: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding curve_*.csv files.
    #[arg(long)]
    dir: PathBuf,
}

fn main() {
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if ok { 0 } else { 1 };
        }
    };
    let workers = cli.workers.or_else(|| {
        std::env::var("ICRL_WORKERS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = workers {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Datagen(args) => cmd_datagen(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Experiment {
            cmd: ExperimentCmd::Run(args),
        } => cmd_experiment(args),
        Cmd::Report(args) => {
            report_from_csvs(&args.dir)?;
            println!("wrote {}", args.dir.join("plot.svg").display());
            Ok(())
        }
    }
}

fn parse_profile(cli: Option<String>, file: Option<String>) -> Result<Option<Profile>> {
    match pick(cli, file, String::new()).as_str() {
        "" => Ok(None),
        s => Profile::parse(s).map(Some),
    }
}

fn cmd_datagen(args: DatagenArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    file.check_consumed(&[
        "profile",
        "maps",
        "size_min",
        "size_max",
        "hole_prob",
        "episodes_per_map",
        "sets",
        "slice_len",
        "tier",
        "seed",
    ])?;
    let profile = parse_profile(args.profile, file.get("profile")?)?;
    // Paper-scale defaults are the built-in defaults; desk shrinks them.
    let base = match profile {
        Some(Profile::Desk) => DatagenConfig {
            maps: 120,
            size_range: (3, 4),
            hole_prob: 0.25,
            episodes_per_map: 400,
            sets: 600,
            slice_len: 768,
            ..DatagenConfig::default()
        },
        _ => DatagenConfig::default(),
    };
    let cfg = DatagenConfig {
        maps: pick(args.maps, file.get("maps")?, base.maps),
        size_range: (
            pick(args.size_min, file.get("size_min")?, base.size_range.0),
            pick(args.size_max, file.get("size_max")?, base.size_range.1),
        ),
        hole_prob: pick(args.hole_prob, file.get("hole_prob")?, base.hole_prob),
        episodes_per_map: pick(
            args.episodes_per_map,
            file.get("episodes_per_map")?,
            base.episodes_per_map,
        ),
        sets: pick(args.sets, file.get("sets")?, base.sets),
        slice_len: pick(args.slice_len, file.get("slice_len")?, base.slice_len),
        tier: QualityTier::parse(&pick(
            args.tier,
            file.get("tier")?,
            base.tier.name().to_string(),
        ))?,
        seed: pick(args.seed, file.get("seed")?, base.seed),
    };
    eprintln!(
        "datagen: {} maps, sizes {}..={}, tier {}, seed {}",
        cfg.maps,
        cfg.size_range.0,
        cfg.size_range.1,
        cfg.tier.name(),
        cfg.seed
    );
    let dataset = build_dataset(&cfg)?;
    dataset.save(&args.out)?;
    let resolved = resolved_text(&[
        ("maps", cfg.maps.to_string()),
        ("size_min", cfg.size_range.0.to_string()),
        ("size_max", cfg.size_range.1.to_string()),
        ("hole_prob", cfg.hole_prob.to_string()),
        ("episodes_per_map", cfg.episodes_per_map.to_string()),
        ("sets", cfg.sets.to_string()),
        ("slice_len", cfg.slice_len.to_string()),
        ("tier", cfg.tier.name().to_string()),
        ("seed", cfg.seed.to_string()),
    ]);
    std::fs::write(args.out.join("resolved.cfg"), resolved)?;
    eprintln!(
        "datagen: wrote {} slices of {} tokens to {}",
        dataset.slices.len(),
        dataset.slice_len,
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    file.check_consumed(&[
        "profile",
        "alpha",
        "lr",
        "gamma",
        "reward_scale",
        "warmup_batches",
        "batch_slices",
        "batches",
        "grad_clip",
        "seed",
        "ckpt_every",
        "layers",
        "heads",
        "d_model",
        "d_ff",
        "max_context",
        "dropout",
    ])?;
    let profile = parse_profile(args.profile, file.get("profile")?)?;
    let dataset = Dataset::load(&args.data)?;
    let (base_batches, base_ctx) = match profile {
        Some(Profile::Desk) => (1500, 768),
        Some(Profile::Paper) => (20_000, 4096),
        None => (
            TrainConfig::default().total_batches,
            ModelConfig::default().max_context,
        ),
    };
    let model_cfg = ModelConfig {
        n_layers: pick(args.layers, file.get("layers")?, 4),
        n_heads: pick(args.heads, file.get("heads")?, 4),
        d_model: pick(args.d_model, file.get("d_model")?, 128),
        d_ff: pick(args.d_ff, file.get("d_ff")?, 512),
        vocab_size: ModelConfig::default().vocab_size,
        max_context: pick(args.max_context, file.get("max_context")?, base_ctx),
        dropout: pick(args.dropout, file.get("dropout")?, 0.0),
    };
    let grad_clip = pick(args.grad_clip, file.get("grad_clip")?, 1.0);
    let cfg = TrainConfig {
        gamma: pick(args.gamma, file.get("gamma")?, 0.9),
        reward_scale: pick(args.reward_scale, file.get("reward_scale")?, 30.0),
        alpha: pick(args.alpha, file.get("alpha")?, 0.1),
        base_lr: pick(args.lr, file.get("lr")?, 1e-2),
        warmup_batches: pick(args.warmup_batches, file.get("warmup_batches")?, 10),
        batch_slices: pick(args.batch_slices, file.get("batch_slices")?, 10),
        slice_len: dataset.slice_len,
        total_batches: pick(args.batches, file.get("batches")?, base_batches),
        seed: pick(args.seed, file.get("seed")?, 0),
        grad_clip: (grad_clip > 0.0).then_some(grad_clip),
    };
    let ckpt_every = pick(args.ckpt_every, file.get("ckpt_every")?, 0);
    std::fs::create_dir_all(&args.out)?;

    eprintln!(
        "train: {} batches x {} slices of {} tokens, alpha {}, lr {}, seed {}",
        cfg.total_batches, cfg.batch_slices, cfg.slice_len, cfg.alpha, cfg.base_lr, cfg.seed
    );
    let started = std::time::Instant::now();
    let out_dir = args.out.clone();
    let log_every = args.log_every;
    let total = cfg.total_batches;
    let mcfg = model_cfg.clone();
    let mut on_batch = |batch: usize, params: &ModelParams<f32>| -> Result<()> {
        if ckpt_every > 0 && batch % ckpt_every == 0 && batch < total {
            save_model(&out_dir.join(format!("ckpt_{batch:06}.ckpt")), params, &mcfg)?;
        }
        if log_every > 0 && batch % log_every == 0 {
            eprintln!(
                "train: batch {batch}/{total} elapsed {:.0?}",
                started.elapsed()
            );
        }
        Ok(())
    };
    let outcome = train::<f32>(&dataset, &model_cfg, &cfg, Some(&mut on_batch))?;
    save_model(&args.out.join("model.ckpt"), &outcome.params, &model_cfg)?;
    std::fs::write(args.out.join("metrics.csv"), metrics_csv(&outcome.metrics))?;
    let resolved = resolved_text(&[
        ("alpha", cfg.alpha.to_string()),
        ("lr", cfg.base_lr.to_string()),
        ("gamma", cfg.gamma.to_string()),
        ("reward_scale", cfg.reward_scale.to_string()),
        ("warmup_batches", cfg.warmup_batches.to_string()),
        ("batch_slices", cfg.batch_slices.to_string()),
        ("batches", cfg.total_batches.to_string()),
        ("grad_clip", cfg.grad_clip.unwrap_or(0.0).to_string()),
        ("seed", cfg.seed.to_string()),
        ("ckpt_every", ckpt_every.to_string()),
        ("layers", model_cfg.n_layers.to_string()),
        ("heads", model_cfg.n_heads.to_string()),
        ("d_model", model_cfg.d_model.to_string()),
        ("d_ff", model_cfg.d_ff.to_string()),
        ("max_context", model_cfg.max_context.to_string()),
        ("dropout", model_cfg.dropout.to_string()),
    ]);
    std::fs::write(args.out.join("resolved.cfg"), resolved)?;
    let last_loss = outcome.metrics.last().map(|m| m.loss).unwrap_or(f64::NAN);
    eprintln!(
        "train: done in {:.0?}, final loss {last_loss:.4}, wrote {}",
        started.elapsed(),
        args.out.join("model.ckpt").display()
    );
    Ok(())
}

fn load_train_maps(dir: &Path) -> Result<Vec<MapSpec>> {
    read_maps_file(&dir.join("maps.txt"))
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    file.check_consumed(&[
        "n_maps",
        "size_min",
        "size_max",
        "hole_prob",
        "episodes",
        "trials",
        "seed",
        "capacity",
    ])?;
    let (model_cfg, params) = load_model(&args.ckpt)?;
    let seed = pick(args.seed, file.get("seed")?, 0);
    let episodes = pick(args.episodes, file.get("episodes")?, 30);
    let trials = pick(args.trials, file.get("trials")?, 20);
    let capacity = pick(args.capacity, file.get("capacity")?, model_cfg.max_context);

    let maps = if let Some(path) = &args.maps_file {
        read_maps_file(path)?
    } else {
        let train_hashes: HashSet<u64> = match &args.train_data {
            Some(dir) => load_train_maps(dir)?
                .iter()
                .map(|m| m.spec_hash())
                .collect(),
            None => HashSet::new(),
        };
        let n = pick(args.n_maps, file.get("n_maps")?, 20);
        let lo = pick(args.size_min, file.get("size_min")?, 3);
        let hi = pick(args.size_max, file.get("size_max")?, 4);
        let hp = pick(args.hole_prob, file.get("hole_prob")?, 0.25);
        icrl_core::experiments::generate_eval_maps(
            n,
            (lo, hi),
            hp,
            &train_hashes,
            derive_seed(seed, 21),
        )?
    };
    if let Some(dir) = &args.train_data {
        let hashes: HashSet<u64> = load_train_maps(dir)?
            .iter()
            .map(|m| m.spec_hash())
            .collect();
        icrl_core::experiments::check_disjoint(&maps, &hashes)?;
    }
    eprintln!(
        "eval: {} maps x {trials} trials x {episodes} episodes, capacity {capacity}",
        maps.len()
    );
    let out = run_batch(
        &params,
        &model_cfg,
        &maps,
        episodes,
        trials,
        EpsilonSchedule::default(),
        derive_seed(seed, 23),
        capacity,
    )?;
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("aggregate.csv"), aggregate_csv(&out.aggregate))?;
    std::fs::write(
        args.out.join("records.jsonl"),
        trial_records_jsonl(&out.records),
    )?;
    write_maps_file(&args.out.join("eval_maps.txt"), &maps)?;
    let plot = icrl_core::experiments::render_curves(
        "Online Evaluation",
        &[CurveSeries {
            label: "mean reward".to_string(),
            mean: &out.aggregate.mean,
            stderr: Some(&out.aggregate.stderr),
        }],
        None,
    );
    std::fs::write(args.out.join("plot.svg"), plot)?;
    let resolved = resolved_text(&[
        ("n_maps", maps.len().to_string()),
        ("episodes", episodes.to_string()),
        ("trials", trials.to_string()),
        ("seed", seed.to_string()),
        ("capacity", capacity.to_string()),
    ]);
    std::fs::write(args.out.join("resolved.cfg"), resolved)?;
    let tail = &out.aggregate.mean[episodes.saturating_sub(6)..];
    eprintln!(
        "eval: mean reward over the last {} episodes: {:.3}",
        tail.len(),
        tail.iter().sum::<f64>() / tail.len() as f64
    );
    Ok(())
}

fn cmd_experiment(args: ExperimentArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    file.check_consumed(&[
        "profile",
        "seed",
        "n_maps",
        "trials",
        "episodes",
        "capacity",
        "maps",
        "episodes_per_map",
        "sets",
        "slice_len",
        "batches",
        "layers",
        "heads",
        "d_model",
        "d_ff",
        "max_context",
        "alpha",
        "lr",
    ])?;
    let kind = ExperimentKind::parse(&args.kind)?;
    let profile = parse_profile(args.profile, file.get("profile")?)?.unwrap_or(Profile::Paper);
    let seed = pick(args.seed, file.get("seed")?, 0);
    let mut spec = ExperimentSpec::defaults(kind, profile, seed);
    let n_maps = pick(args.n_maps, file.get("n_maps")?, 0);
    if n_maps > 0 {
        spec.n_maps = n_maps;
    }
    let trials = pick(args.trials, file.get("trials")?, 0);
    if trials > 0 {
        spec.trials = trials;
    }
    let episodes = pick(args.episodes, file.get("episodes")?, 0);
    if episodes > 0 {
        spec.episodes = episodes;
    }

    // The quality experiment trains its own models; everything else needs a
    // checkpoint.
    let mut loaded = Vec::new();
    for path in &args.ckpt {
        let (cfg, params) = load_model(path)?;
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".to_string());
        loaded.push((label, cfg, params));
    }
    if kind != ExperimentKind::DataQuality && loaded.is_empty() {
        return Err(Error::Validation(
            "this experiment needs at least one --ckpt".to_string(),
        ));
    }
    let capacity = pick(
        args.capacity,
        file.get("capacity")?,
        loaded
            .first()
            .map(|(_, c, _)| c.max_context)
            .unwrap_or(768),
    );
    let train_maps = match &args.train_data {
        Some(dir) => load_train_maps(dir)?,
        None => Vec::new(),
    };
    if train_maps.is_empty()
        && matches!(
            kind,
            ExperimentKind::UnseenInDist
                | ExperimentKind::OutOfDist
                | ExperimentKind::NonStationary
        )
    {
        return Err(Error::Validation(
            "--train-data is required for disjointness checks".to_string(),
        ));
    }
    let ctx = EvalContext {
        train_maps: &train_maps,
        capacity,
        profile,
    };
    let variants: Vec<ModelVariant> = loaded
        .iter()
        .map(|(label, cfg, params)| ModelVariant {
            label: label.clone(),
            params,
            cfg,
        })
        .collect();

    eprintln!(
        "experiment {}: profile {:?}, {} maps, {} trials, {} episodes, seed {seed}",
        kind.name(),
        profile,
        spec.n_maps,
        spec.trials,
        spec.episodes
    );
    let report = match kind {
        ExperimentKind::UnseenInDist => run_unseen(&variants, &ctx, &spec)?,
        ExperimentKind::OutOfDist => run_ood(&variants, &ctx, &spec)?,
        ExperimentKind::Stitching => {
            let (_, cfg, params) = &loaded[0];
            run_stitching_experiment(params, cfg, &ctx, &spec)?
        }
        ExperimentKind::NonStationary => {
            let (_, cfg, params) = &loaded[0];
            run_nonstationary(params, cfg, &ctx, &spec)?
        }
        ExperimentKind::DataQuality => {
            let dg = DatagenConfig {
                maps: pick(None, file.get("maps")?, 60),
                size_range: profile.in_dist_sizes(),
                hole_prob: profile.hole_prob(),
                episodes_per_map: pick(None, file.get("episodes_per_map")?, 300),
                sets: pick(None, file.get("sets")?, 300),
                slice_len: pick(None, file.get("slice_len")?, 768),
                tier: QualityTier::Mid,
                seed: derive_seed(seed, 70),
            };
            let model = ModelConfig {
                n_layers: pick(None, file.get("layers")?, 4),
                n_heads: pick(None, file.get("heads")?, 4),
                d_model: pick(None, file.get("d_model")?, 128),
                d_ff: pick(None, file.get("d_ff")?, 512),
                vocab_size: ModelConfig::default().vocab_size,
                max_context: pick(None, file.get("max_context")?, dg.slice_len),
                dropout: 0.0,
            };
            let tcfg = TrainConfig {
                alpha: pick(None, file.get("alpha")?, 0.1),
                base_lr: pick(None, file.get("lr")?, 1e-2),
                slice_len: dg.slice_len,
                total_batches: pick(None, file.get("batches")?, 1000),
                seed: derive_seed(seed, 71),
                ..TrainConfig::default()
            };
            let qcfg = QualityRunConfig {
                datagen: dg,
                model,
                train: tcfg,
            };
            let out = run_quality(&qcfg, profile, &spec, capacity)?;
            for (tier, obs, exp) in &out.ratio_checks {
                eprintln!(
                    "experiment quality: {} tier drawn-success {obs:.4} (expected {exp:.4})",
                    tier.name()
                );
            }
            out.report
        }
    };
    report.write(&args.out)?;
    let resolved = resolved_text(&[
        ("kind", kind.name().to_string()),
        (
            "profile",
            match profile {
                Profile::Paper => "paper".to_string(),
                Profile::Desk => "desk".to_string(),
            },
        ),
        ("seed", seed.to_string()),
        ("n_maps", spec.n_maps.to_string()),
        ("trials", spec.trials.to_string()),
        ("episodes", spec.episodes.to_string()),
        ("capacity", capacity.to_string()),
    ]);
    std::fs::write(args.out.join("resolved.cfg"), resolved)?;
    for (label, curve) in &report.curves {
        let tail = &curve.mean[curve.mean.len().saturating_sub(6)..];
        eprintln!(
            "experiment {}: {label} final-window mean {:.3}",
            kind.name(),
            tail.iter().sum::<f64>() / tail.len().max(1) as f64
        );
    }
    eprintln!("experiment {}: wrote {}", kind.name(), args.out.display());
    Ok(())
}
