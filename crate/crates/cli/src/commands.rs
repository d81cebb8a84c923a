use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use scaf_core::dataio::{self, fixture};
use scaf_core::{metrics, raster, trainer};
use scaf_core::{Checkpoint, Discriminator, Predictor, RunConfig, Split, Trainer};

use crate::{BankAction, Cli, Command, EvalArgs};

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli.out.clone();
    let force = cli.force;
    match cli.command {
        Command::Fixture { n } => cmd_fixture(&cfg, n, out, force),
        Command::Scribble { split, coverage } => cmd_scribble(&cfg, split, coverage, out, force),
        Command::Bank { action: BankAction::Build { data } } => cmd_bank_build(&cfg, data, out, force),
        Command::Bank { action: BankAction::Score { banks, image } } => {
            cmd_bank_score(&cfg, banks, &image, out, force)
        }
        Command::Train { data, banks } => cmd_train(&cfg, data, banks, out, force),
        Command::Eval(args) => cmd_eval(&cfg, &args, out, force),
        Command::Robust { eval, qualities } => cmd_robust(&cfg, &eval, qualities, out, force),
        Command::Report => cmd_report(&cfg, out),
        Command::Config { toy } => cmd_config(&cli.config, cfg, toy, cli.seed, out, force),
    }
}

fn eval_dir(cfg: &RunConfig, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| cfg.paths.run.join("eval"))
}

/// Refuse to clobber any of `files` under `dir` unless forced.
fn guard_outputs(dir: &Path, files: &[&str], force: bool) -> Result<()> {
    if let Some(f) = files.iter().find(|f| dir.join(f).exists()) {
        if !force {
            bail!("{} exists (use --force to overwrite)", dir.join(f).display());
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn cmd_fixture(cfg: &RunConfig, n: Option<usize>, out: Option<PathBuf>, force: bool) -> Result<()> {
    let root = out.unwrap_or_else(|| cfg.paths.data.clone());
    let mut fx = cfg.fixture_config();
    if let Some(n) = n {
        fx.n_samples = n;
    }
    fixture::write_fixture(&root, &fx, force)?;
    log::info!(
        "wrote {} splices and {} authentic images to {}",
        fx.n_samples,
        fx.n_authentic,
        root.display()
    );
    Ok(())
}

fn cmd_scribble(
    cfg: &RunConfig,
    split: Split,
    coverage: Option<f64>,
    out: Option<PathBuf>,
    force: bool,
) -> Result<()> {
    let root = out.unwrap_or_else(|| cfg.paths.data.clone());
    let coverage = coverage.unwrap_or(cfg.fixture.coverage);
    let n = dataio::write_scribbles(&root, split, coverage, cfg.seed, force)?;
    log::info!("wrote {n} scribbles at coverage {coverage} to {}", root.join(split.dir_name()).display());
    Ok(())
}

fn training_images(cfg: &RunConfig, root: &Path) -> Result<Vec<ndarray::Array3<f32>>> {
    let size = cfg.train.image_size;
    Ok(dataio::load_images(root, Split::Train)?
        .into_iter()
        .map(|(_, img)| raster::resize_bilinear(&img, size, size))
        .collect())
}

fn cmd_bank_build(cfg: &RunConfig, data: Option<PathBuf>, out: Option<PathBuf>, force: bool) -> Result<()> {
    let root = data.unwrap_or_else(|| cfg.paths.data.clone());
    let dir = out.unwrap_or_else(|| cfg.paths.banks.clone());
    guard_outputs(&dir, &["manifest.json"], force)?;
    let size = cfg.train.image_size;
    let authentic: Vec<_> = dataio::load_images(&root, Split::Authentic)?
        .into_iter()
        .map(|(_, img)| raster::resize_bilinear(&img, size, size))
        .collect();
    let manipulated = training_images(cfg, &root)?;
    ensure!(!authentic.is_empty(), "no images in the authentic split of {}", root.display());
    let md = Discriminator::build(
        &cfg.model.backbone,
        &cfg.bank,
        &authentic.iter().collect::<Vec<_>>(),
        &manipulated.iter().collect::<Vec<_>>(),
    )?;
    md.save_dir(&dir)?;
    log::info!(
        "banked {} authentic and {} manipulated images into {}",
        authentic.len(),
        manipulated.len(),
        dir.display()
    );
    Ok(())
}

fn cmd_bank_score(
    cfg: &RunConfig,
    banks: Option<PathBuf>,
    image: &Path,
    out: Option<PathBuf>,
    force: bool,
) -> Result<()> {
    let md = Discriminator::load_dir(&banks.unwrap_or_else(|| cfg.paths.banks.clone()))?;
    let dir = out.unwrap_or_else(|| cfg.paths.run.join("priors"));
    let stem = image
        .file_stem()
        .and_then(|s| s.to_str())
        .context("image path has no file name")?;
    let (mp_name, ap_name) = (format!("{stem}_mp.png"), format!("{stem}_ap.png"));
    guard_outputs(&dir, &[&mp_name, &ap_name], force)?;
    let img = raster::read_rgb(image)?;
    let (h, w, _) = img.dim();
    let size = cfg.train.image_size;
    let input = if h % 32 == 0 && w % 32 == 0 {
        img
    } else {
        raster::resize_bilinear(&img, size, size)
    };
    let priors = md.prior_map(&input)?;
    raster::write_map(&dir.join(&mp_name), &raster::resize_map_bilinear(&priors.mp, h, w))?;
    raster::write_map(&dir.join(&ap_name), &raster::resize_map_bilinear(&priors.ap, h, w))?;
    log::info!("wrote {mp_name} and {ap_name} to {}", dir.display());
    Ok(())
}

fn cmd_train(
    cfg: &RunConfig,
    data: Option<PathBuf>,
    banks: Option<PathBuf>,
    out: Option<PathBuf>,
    force: bool,
) -> Result<()> {
    let root = data.unwrap_or_else(|| cfg.paths.data.clone());
    let banks = banks.unwrap_or_else(|| cfg.paths.banks.clone());
    let dir = out.unwrap_or_else(|| cfg.paths.run.clone());
    let md = Discriminator::load_dir(&banks)
        .with_context(|| format!("loading banks (run `scaf bank build` first) from {}", banks.display()))?;
    ensure!(
        md.backbone_config() == &cfg.model.backbone && md.config() == &cfg.bank,
        "banks in {} were built with a different backbone or bank config",
        banks.display()
    );
    guard_outputs(&dir, &["final.ckpt", "train_log.jsonl"], force)?;
    for entry in fs::read_dir(&dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name == "train_log.jsonl" || name.ends_with(".ckpt") {
            fs::remove_file(&path).with_context(|| format!("removing {}", path.display()))?;
        }
    }
    cfg.save(&dir.join("config.toml"))?;
    let samples = dataio::load_dataset(&root, Split::Train)?;
    let mut t = Trainer::new(&cfg.model, &cfg.train, &cfg.losses, md, cfg.seed, cfg.training_hash())?;
    let prepared = t.prepare(samples)?;
    log::info!("training on {} images for {} epochs", prepared.len(), cfg.train.epochs);
    t.fit(&prepared, Some(&dir))?;
    log::info!("wrote {}", trainer::final_checkpoint_path(&dir).display());
    Ok(())
}

fn load_eval_inputs(cfg: &RunConfig, args: &EvalArgs) -> Result<(Checkpoint, Vec<scaf_core::Sample>, Split)> {
    let ckpt_path = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| trainer::final_checkpoint_path(&cfg.paths.run));
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let split = args.split.unwrap_or(cfg.eval.split);
    let root = args.data.clone().unwrap_or_else(|| cfg.paths.data.clone());
    let samples = dataio::load_dataset(&root, split)?;
    Ok((ckpt, samples, split))
}

fn cmd_eval(cfg: &RunConfig, args: &EvalArgs, out: Option<PathBuf>, force: bool) -> Result<()> {
    let dir = eval_dir(cfg, out);
    guard_outputs(&dir, &["eval.json"], force)?;
    let (ckpt, samples, split) = load_eval_inputs(cfg, args)?;
    let (model, md) = trainer::restore_model(&ckpt)?;
    let predictor = Predictor {
        model: &model,
        md: &md,
        fallback_size: cfg.train.image_size,
    };
    let result = predictor.evaluate(split.dir_name(), &samples)?;
    metrics::write_eval(&dir, &result)?;
    log::info!("mean F1 {:.4} over {} image(s)", result.mean_f1, result.per_image_f1.len());
    Ok(())
}

fn cmd_robust(
    cfg: &RunConfig,
    args: &EvalArgs,
    qualities: Option<Vec<u8>>,
    out: Option<PathBuf>,
    force: bool,
) -> Result<()> {
    let dir = eval_dir(cfg, out);
    guard_outputs(&dir, &["robustness.json"], force)?;
    let qualities = qualities.unwrap_or_else(|| cfg.eval.qualities.clone());
    let (ckpt, samples, split) = load_eval_inputs(cfg, args)?;
    let (model, md) = trainer::restore_model(&ckpt)?;
    let predictor = Predictor {
        model: &model,
        md: &md,
        fallback_size: cfg.train.image_size,
    };
    let table = predictor.robustness_sweep(split.dir_name(), &samples, &qualities)?;
    metrics::write_robustness(&dir, &table)?;
    for row in &table.rows {
        log::info!("quality {:>3}: mean F1 {:.4}", row.quality, row.mean_f1);
    }
    Ok(())
}

fn cmd_report(cfg: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    let dir = eval_dir(cfg, out);
    let path = metrics::write_report(&dir, &dir.join("report.md"))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn cmd_config(
    source: &Option<PathBuf>,
    cfg: RunConfig,
    toy: bool,
    seed: Option<u64>,
    out: Option<PathBuf>,
    force: bool,
) -> Result<()> {
    ensure!(!(toy && source.is_some()), "--toy and --config are mutually exclusive");
    let mut cfg = if toy { RunConfig::toy() } else { cfg };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let text = cfg.to_toml_string()?;
    match out {
        Some(path) => {
            ensure!(force || !path.exists(), "{} exists (use --force to overwrite)", path.display());
            fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        }
        None => print!("{text}"),
    }
    Ok(())
}
