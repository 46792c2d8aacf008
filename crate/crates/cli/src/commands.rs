use std::fs;
use std::path::{Path, PathBuf};

use samamba_core::config::RunConfig;
use samamba_core::inference::segment_volume;
use samamba_core::metrics::{overlap, property_report, PhaseIds};
use samamba_core::model::{forward_macs, param_count, param_groups, Model};
use samamba_core::patches::extract_patches;
use samamba_core::phantom::{generate, PhantomSpec};
use samamba_core::preprocess::{fit_reference, nlm_relative, preprocess as prepare, ReferenceStats};
use samamba_core::train::{append_log, train as run_training, Checkpoint, Sample};
use samamba_core::volume::{read_labels, read_volume, write_labels, write_volume};
use samamba_core::Volume;
use thiserror::Error;

use crate::{ConfigArgs, ConfigSource, EvalArgs, PhantomArgs, Preset, PreprocessArgs, ReportArgs, SegmentArgs, SummaryArgs, TrainArgs};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] samamba_core::Error),
    #[error("{0}")]
    Usage(String),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, CliError>;

fn load_config(src: &ConfigSource) -> Result<RunConfig> {
    Ok(match (&src.config, src.preset) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(Preset::Paper)) => RunConfig::paper(),
        _ => RunConfig::desk(),
    })
}

/// `prefix` with `suffix` appended to its file name.
fn suffixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "volume".into())
}

pub fn phantom(a: PhantomArgs) -> Result<()> {
    let cfg = load_config(&a.source)?;
    let dims = match a.dims.as_slice() {
        [n] => [*n; 3],
        [d, h, w] => [*d, *h, *w],
        other => return Err(CliError::Usage(format!("--dims takes one or three extents, got {other:?}"))),
    };
    let spec = PhantomSpec {
        kind: a.kind.parse()?,
        dims,
        seed: a.seed,
        porosity: a.porosity.unwrap_or(cfg.phantom.porosity),
        blur_sigma: a.blur.unwrap_or(cfg.phantom.blur_sigma),
        noise_sigma: a.noise.unwrap_or(cfg.phantom.noise_sigma),
        ..cfg.phantom
    };
    let ph = generate(&spec)?;
    let image = suffixed(&a.out, "_image");
    let labels = suffixed(&a.out, "_labels");
    write_volume(&image, &ph.image)?;
    write_labels(&labels, &ph.labels, ph.image.spacing)?;
    println!(
        "wrote {} and {} ({:?}, porosity {:.4})",
        image.display(),
        labels.display(),
        dims,
        ph.porosity
    );
    Ok(())
}

pub fn preprocess(a: PreprocessArgs) -> Result<()> {
    let cfg = load_config(&a.source)?;
    let nlm = if a.no_nlm { None } else { cfg.preprocess.nlm };
    let mut denoised = Vec::with_capacity(a.inputs.len());
    for p in &a.inputs {
        let v = read_volume(p)?;
        denoised.push(match &nlm {
            Some(n) => nlm_relative(&v, n)?,
            None => v,
        });
    }
    let stats = match &a.stats_in {
        Some(p) => ReferenceStats::load(p)?,
        None => {
            let names: Vec<String> = a.inputs.iter().map(|p| stem(p)).collect();
            let s = fit_reference(&denoised, cfg.preprocess.p_low, cfg.preprocess.p_high, &names.join(","))?;
            s.save(&a.stats_out)?;
            println!("reference statistics written to {}", a.stats_out.display());
            s
        }
    };
    fs::create_dir_all(&a.out_dir).map_err(|e| CliError::Io {
        path: a.out_dir.clone(),
        source: e,
    })?;
    for (p, v) in a.inputs.iter().zip(&denoised) {
        let out = prepare(v, &stats, None)?;
        let dest = a.out_dir.join(stem(p));
        write_volume(&dest, &out)?;
        println!("{} -> {}", p.display(), dest.display());
    }
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.source)?;
    if a.images.len() != a.labels.len() {
        return Err(CliError::Usage(format!("{} images but {} label volumes", a.images.len(), a.labels.len())));
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.max_epochs {
        cfg.train.plan.max_epochs = e;
    }
    if a.max_steps.is_some() {
        cfg.train.max_steps = a.max_steps;
    }
    cfg.validate()?;
    let images: Vec<Volume> = a.images.iter().map(|p| read_volume(p)).collect::<std::result::Result<_, _>>()?;
    let stats = match (&a.stats, a.preprocessed) {
        (Some(p), _) => Some(ReferenceStats::load(p)?),
        (None, true) => None,
        (None, false) => {
            let nlm = cfg.preprocess.nlm;
            let denoised: Vec<Volume> = images
                .iter()
                .map(|v| match &nlm {
                    Some(n) => nlm_relative(v, n),
                    None => Ok(v.clone()),
                })
                .collect::<std::result::Result<_, _>>()?;
            let names: Vec<String> = a.images.iter().map(|p| stem(p)).collect();
            Some(fit_reference(&denoised, cfg.preprocess.p_low, cfg.preprocess.p_high, &names.join(","))?)
        }
    };
    let grid = cfg.patches.grid();
    let mut samples = Vec::new();
    for (group, (img, lab)) in images.iter().zip(&a.labels).enumerate() {
        let (mask, _) = read_labels(lab)?;
        let v = match (&stats, a.preprocessed) {
            (Some(s), false) => prepare(img, s, cfg.preprocess.nlm.as_ref())?,
            _ => img.clone(),
        };
        for p in extract_patches(&v, &mask, &grid)? {
            samples.push(Sample {
                group,
                image: p.image,
                mask: p.mask,
            });
        }
    }
    println!("{} training patches from {} volumes", samples.len(), images.len());
    fs::create_dir_all(&a.out).map_err(|e| CliError::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let log_path = a.out.join("metrics.jsonl");
    let _ = fs::remove_file(&log_path);
    let model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    let mut log_err = None;
    let outcome = run_training(model, cfg.train.clone(), &samples, |r| {
        println!(
            "epoch {:>3} {:?} loss {:.5} dice {:.4} val {}",
            r.epoch,
            r.stage,
            r.train_loss,
            r.train_dice,
            r.val_loss.map_or("-".to_string(), |v| format!("{v:.5}"))
        );
        if let Err(e) = append_log(&log_path, std::slice::from_ref(r)) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    let best = outcome.log.iter().find(|r| r.epoch == outcome.best_epoch);
    let ck = Checkpoint {
        model: outcome.best,
        optimizer: outcome.last.optimizer.state.clone(),
        optimizer_config: cfg.train.optimizer,
        stage: cfg.train.plan.stage(outcome.best_epoch),
        epoch: outcome.best_epoch,
        seed: cfg.train.seed,
        val_loss: best.and_then(|r| r.val_loss),
        reference: stats,
    };
    ck.save(&a.out)?;
    println!("best epoch {} (loss {:.5}); checkpoint in {}", outcome.best_epoch, outcome.best_loss, a.out.display());
    Ok(())
}

pub fn segment(a: SegmentArgs) -> Result<()> {
    let cfg = load_config(&a.source)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let v = read_volume(&a.input)?;
    let stats = match (&a.stats, a.preprocessed) {
        (Some(p), _) => Some(ReferenceStats::load(p)?),
        (None, true) => None,
        (None, false) => Some(ck.reference.clone().ok_or_else(|| {
            CliError::Usage("checkpoint has no reference statistics; pass --stats or --preprocessed".into())
        })?),
    };
    let mut opts = cfg.segment_options();
    if let Some(p) = a.patch {
        opts.patch = p;
    }
    if let Some(o) = a.overlap {
        opts.overlap = o;
    }
    if a.no_nlm {
        opts.nlm = None;
    }
    let names = if cfg.class_names.len() == ck.model.config.classes {
        cfg.class_names.clone()
    } else {
        (0..ck.model.config.classes).map(|c| format!("class{c}")).collect()
    };
    let seg = segment_volume(&ck.model, &v, stats.as_ref(), &opts, &names)?;
    write_labels(&a.out, &seg.labels, v.spacing)?;
    println!("labels written to {}", a.out.display());
    if let Some(prefix) = &a.probs {
        let n = v.len();
        for (c, name) in names.iter().enumerate() {
            let data = seg.probs.data()[c * n..(c + 1) * n].to_vec();
            let path = suffixed(prefix, &format!("_{name}"));
            write_volume(&path, &v.with_data(data))?;
        }
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let (pred, _) = read_labels(&a.pred)?;
    let (reference, _) = read_labels(&a.reference)?;
    let rep = overlap(&pred, &reference)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&rep).expect("report serializes"));
        return Ok(());
    }
    println!("{:<12} {:>8} {:>8}", "class", "dice", "iou");
    for c in &rep.classes {
        println!("{:<12} {:>8.4} {:>8.4}", c.name, c.dsc, c.iou);
    }
    println!("{:<12} {:>8.4} {:>8.4}", "macro", rep.macro_dsc, rep.macro_iou);
    Ok(())
}

pub fn report(a: ReportArgs) -> Result<()> {
    let (labels, spacing) = read_labels(&a.labels)?;
    let rep = property_report(&labels, spacing, PhaseIds::default())?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&rep).expect("report serializes"));
    } else {
        print!("{}", rep.to_table());
    }
    Ok(())
}

pub fn summary(a: SummaryArgs) -> Result<()> {
    let cfg = load_config(&a.source)?;
    cfg.model.validate()?;
    let patch = a.patch.unwrap_or(cfg.inference.patch);
    let m = cfg.model.size_multiple();
    if patch == 0 || patch % m != 0 {
        return Err(CliError::Usage(format!("--patch must be a positive multiple of {m}")));
    }
    let s = &cfg.model.sam;
    println!(
        "encoder C={} L={} heads={}; state-space stages {:?}, d={}",
        s.embed_dim,
        s.depth,
        s.heads,
        cfg.model.mamba.stage_channels,
        cfg.model.mamba.descriptor()
    );
    println!("trainable parameters: {}", param_count(&cfg.model));
    for (group, n) in param_groups(&cfg.model) {
        println!("  {group:<10} {n:>12}");
    }
    let macs = forward_macs(&cfg.model, patch);
    println!("multiply-accumulates per {patch}^3 patch: {:.3e}", macs.total() as f64);
    println!("  state-space {:.3e}", macs.state_space as f64);
    println!("  transformer {:.3e}", macs.transformer as f64);
    println!("  bridges     {:.3e}", macs.bridges as f64);
    println!("  decoder     {:.3e}", macs.decoder as f64);
    Ok(())
}

pub fn config(a: ConfigArgs) -> Result<()> {
    let cfg = match a.preset {
        Preset::Desk => RunConfig::desk(),
        Preset::Paper => RunConfig::paper(),
    };
    print!("{}", cfg.to_toml()?);
    Ok(())
}
