use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use asymgan::data::{make_dataset, save_grid, Dataset, DatasetCounts, RgbImage, SceneSpec};
use asymgan::eval::{diversity_score, eval_photo_to_label, fcn_score, train_proxy_segmenter, ProxyConfig, SegMetrics};
use asymgan::infer::{
    backward_encoded, backward_sampled, forward_translate, interpolate_codes, sensitivity_probe, ProbeKind,
    ProbeReport, ProbeSpec, Translator,
};
use asymgan::model::{Mode, ModelBundle};
use asymgan::rng::{stream_rng, Stream};
use asymgan::train::{ablation_sweep, checkpoint_path, load_checkpoint, Trainer, LOSS_CSV};
use asymgan::{Error, Tensor};
use serde::Serialize;
use serde_json::json;

use crate::config::config_json;
use crate::manifest::{Clock, RUN_MANIFEST};
use crate::{usage, AblateArgs, EvalArgs, GenDataArgs, InferArgs, InferMode, ProbeArgs, ProbeKindArg, TrainArgs};

fn is_nonempty_dir(path: &Path) -> bool {
    fs::read_dir(path).is_ok_and(|mut d| d.next().is_some())
}

fn load_bundle(path: &Path) -> Result<ModelBundle<f32>> {
    let c = load_checkpoint::<f32>(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(c.bundle)
}

fn open_dataset(path: &Path) -> Result<Dataset<f32>> {
    Dataset::open(path).with_context(|| format!("opening dataset {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let clock = Clock::start();
    let spec = SceneSpec::with_size(a.size);
    spec.validate().map_err(|e| usage(e.to_string()))?;
    if a.train == 0 || a.val == 0 {
        return Err(usage("--train and --val must be positive"));
    }
    if is_nonempty_dir(&a.out) && !a.force {
        bail!("{} is not empty; pass --force to write into it", a.out.display());
    }
    let counts = DatasetCounts {
        train_x: a.train,
        train_y: a.train,
        val: a.val,
    };
    make_dataset(&spec, counts, a.seed, &a.out)?;
    clock
        .manifest("gen-data", json!({ "args": a }), Some(&a.out), Vec::new())?
        .write(&a.out)?;
    println!(
        "wrote {} + {} training images and {} validation pairs to {}",
        a.train,
        a.train,
        a.val,
        a.out.display()
    );
    Ok(())
}

/// Removes the artifacts of an earlier run, or refuses without `force`.
fn prepare_run_dir(out: &Path, force: bool) -> Result<()> {
    let artifacts = [RUN_MANIFEST, LOSS_CSV, "checkpoints", "diagnostic.ckpt"];
    let present: Vec<PathBuf> = artifacts.iter().map(|a| out.join(a)).filter(|p| p.exists()).collect();
    if present.is_empty() {
        return Ok(());
    }
    if !force {
        bail!(
            "{} already holds a training run; pass --force to replace it or --resume to continue it",
            out.display()
        );
    }
    for p in present {
        if p.is_dir() {
            fs::remove_dir_all(&p)
        } else {
            fs::remove_file(&p)
        }
        .with_context(|| format!("removing {}", p.display()))?;
    }
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let clock = Clock::start();
    let mut trainer = match &a.resume {
        Some(ckpt) => {
            let c = load_checkpoint::<f32>(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
            let mut t = Trainer::from_checkpoint(c);
            a.config.apply_resumable(&mut t.config)?;
            t
        }
        None => {
            let cfg = a.config.resolve(Mode::AsymExt)?;
            prepare_run_dir(&a.out, a.force)?;
            Trainer::new(cfg)?
        }
    };
    let data = open_dataset(&a.data)?;
    let start = trainer.state.step;
    let result = trainer.run(&data, &a.out, None);
    let checkpoints = match &result {
        Ok(series) => series.checkpoints.clone(),
        Err(_) => vec![a.out.join("diagnostic.ckpt")],
    };
    let config = json!({
        "args": a,
        "resolved": config_json(&trainer.config),
        "resumed_from_step": a.resume.as_ref().map(|_| start),
    });
    clock
        .manifest("train", config, Some(&a.data), checkpoints)?
        .write(&a.out)?;
    let series = result?;
    println!(
        "trained steps {}..{} ; losses in {}",
        start,
        trainer.state.step,
        series.loss_csv.display()
    );
    if let Some(last) = series.last() {
        println!("final checkpoint {}", last.display());
    }
    Ok(())
}

fn load_image(path: &Path) -> Result<Tensor<f32>> {
    Ok(RgbImage::load(path)?.to_tensor())
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

pub fn infer(a: &InferArgs) -> Result<()> {
    let clock = Clock::start();
    if a.mode == InferMode::Encode && a.ref_image.is_none() {
        return Err(usage("--config encode requires --ref-image"));
    }
    if a.mode == InferMode::Sample && a.samples == 0 {
        return Err(usage("--samples must be positive"));
    }
    if a.mode == InferMode::Interpolate && a.steps < 2 {
        return Err(usage("--steps must be at least 2"));
    }
    let bundle = load_bundle(&a.checkpoint)?;
    if a.mode == InferMode::Interpolate && bundle.arch.zform().is_none() {
        return Err(usage("interpolation needs a model with an auxiliary code"));
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut written = Vec::new();
    for path in &a.inputs {
        let input = load_image(path)?;
        let name = stem(path);
        let grid = a.out.join(format!("{name}_{}.png", mode_name(a.mode)));
        let row = match a.mode {
            InferMode::Forward => vec![input.clone(), forward_translate(&bundle, &input)?],
            InferMode::Sample => {
                let mut row = vec![input.clone()];
                for k in 0..a.samples as u64 {
                    row.push(backward_sampled(&bundle, &input, a.seed.wrapping_add(k))?);
                }
                row
            }
            InferMode::Encode => {
                let reference = load_image(a.ref_image.as_deref().expect("checked above"))?;
                let out = backward_encoded(&bundle, &input, &reference)?;
                vec![input.clone(), reference, out]
            }
            InferMode::Interpolate => {
                let (_, _, h, w) = input.dims4()?;
                let code = |seed: u64| {
                    bundle
                        .sample_code(1, h, w, &mut stream_rng(seed, Stream::Sample))
                        .expect("model has a code")
                };
                let codes = interpolate_codes(&code(a.seed), &code(a.seed.wrapping_add(1)), a.steps)?;
                let mut row = Vec::new();
                for (k, z) in codes.iter().enumerate() {
                    let frame = bundle.backward(&input, Some(z))?;
                    let path = a.out.join(format!("{name}_frame_{k:03}.png"));
                    RgbImage::from_tensor(&frame, 0)?.save(&path)?;
                    written.push(path);
                    row.push(frame);
                }
                row
            }
        };
        save_grid(&grid, &[row])?;
        written.push(grid);
    }
    clock
        .manifest("infer", json!({ "args": a }), None, vec![a.checkpoint.clone()])?
        .write(&a.out)?;
    for p in &written {
        println!("{}", p.display());
    }
    Ok(())
}

fn mode_name(m: InferMode) -> &'static str {
    match m {
        InferMode::Forward => "forward",
        InferMode::Sample => "sample",
        InferMode::Encode => "encode",
        InferMode::Interpolate => "interpolate",
    }
}

#[derive(Serialize)]
struct ProbeComparison {
    spec: ProbeSpec,
    n_images: usize,
    baseline: ProbeReport,
    asym: ProbeReport,
    /// Mean probed minus clean reconstruction error, per direction.
    forward_degradation: Degradation,
    backward_degradation: Degradation,
}

#[derive(Serialize)]
struct Degradation {
    baseline: f64,
    asym: f64,
    asym_not_worse: bool,
}

impl Degradation {
    fn new(baseline: f64, asym: f64) -> Self {
        Self {
            baseline,
            asym,
            asym_not_worse: asym <= baseline,
        }
    }
}

pub fn probe(a: &ProbeArgs) -> Result<()> {
    let clock = Clock::start();
    let data = open_dataset(&a.data)?;
    let size = data.manifest.spec.image_size;
    let kind = match a.kind {
        ProbeKindArg::Crop => ProbeKind::Crop,
        ProbeKindArg::Scale => ProbeKind::Scale,
        ProbeKindArg::Disturb => ProbeKind::Disturb,
    };
    let spec = ProbeSpec {
        kind,
        crop_size: a.crop_size.unwrap_or(size * 125 / 128),
        scale_size: a.scale_size.unwrap_or(size * 130 / 128),
        epsilon_amplitude: a.epsilon,
        noise_seed: a.seed,
    };
    if spec.crop_size == 0 || spec.crop_size >= size {
        return Err(usage(format!("--crop-size must be in 1..{size}")));
    }
    if spec.scale_size == 0 {
        return Err(usage("--scale-size must be positive"));
    }
    if !(a.epsilon >= 0.0 && a.epsilon.is_finite()) {
        return Err(usage("--epsilon must be a non-negative number"));
    }
    let n = a.limit.unwrap_or(data.val.len()).min(data.val.len());
    if n == 0 {
        return Err(usage("no validation pairs to probe"));
    }
    let xs: Vec<Tensor<f32>> = data.val[..n].iter().map(|p| p.photo.clone()).collect();
    let ys: Vec<Tensor<f32>> = data.val[..n].iter().map(|p| p.label.clone()).collect();
    let run = |ckpt: &Path, name: &str| -> Result<ProbeReport> {
        let model = load_bundle(ckpt)?;
        let dir = a.images.then(|| a.out.join(name));
        Ok(sensitivity_probe(&model, &xs, &ys, &spec, dir.as_deref())?)
    };
    let baseline = run(&a.baseline, "baseline")?;
    let asym = run(&a.asym, "asym")?;
    let cmp = ProbeComparison {
        spec,
        n_images: n,
        forward_degradation: Degradation::new(
            baseline.forward_stats.degradation_mean,
            asym.forward_stats.degradation_mean,
        ),
        backward_degradation: Degradation::new(
            baseline.backward_stats.degradation_mean,
            asym.backward_stats.degradation_mean,
        ),
        baseline,
        asym,
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_json(&a.out.join("probe.json"), &cmp)?;
    clock
        .manifest(
            "probe",
            json!({ "args": a }),
            Some(&a.data),
            vec![a.baseline.clone(), a.asym.clone()],
        )?
        .write(&a.out)?;
    println!("{:<10}{:>14}{:>14}", "direction", "baseline", "asym");
    for (dir, d) in [("forward", &cmp.forward_degradation), ("backward", &cmp.backward_degradation)] {
        println!("{dir:<10}{:>14.6}{:>14.6}", d.baseline, d.asym);
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    photo_to_label: SegMetrics,
    label_to_photo: SegMetrics,
    proxy_ceiling: SegMetrics,
    diversity: asymgan::eval::DiversityReport,
}

fn metric_row(name: &str, m: &SegMetrics) {
    println!(
        "{name:<16}{:>12.4}{:>12.4}{:>12.4}",
        m.per_pixel_acc, m.per_class_acc, m.class_iou
    );
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let clock = Clock::start();
    if a.samples < 2 {
        return Err(usage("--samples must be at least 2"));
    }
    if a.proxy_epochs == 0 || a.proxy_width == 0 {
        return Err(usage("--proxy-epochs and --proxy-width must be positive"));
    }
    let data = open_dataset(&a.data)?;
    let bundle = load_bundle(&a.checkpoint)?;
    let photo_to_label = eval_photo_to_label(&bundle, &data)?;
    let proxy_cfg = ProxyConfig {
        width: a.proxy_width,
        epochs: a.proxy_epochs,
        seed: a.seed,
        ..ProxyConfig::default()
    };
    let proxy = train_proxy_segmenter(&data, &proxy_cfg)?;
    let label_to_photo = fcn_score(&proxy, &bundle, &data, a.seed)?;
    let labels: Vec<Tensor<f32>> = data.val.iter().map(|p| p.label.clone()).collect();
    let diversity = diversity_score(&bundle, &bundle.phi, &labels, a.samples, a.seed)?;
    let report = EvalReport {
        photo_to_label,
        label_to_photo,
        proxy_ceiling: proxy.ceiling.clone(),
        diversity,
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_json(&a.out.join("metrics.json"), &report)?;
    clock
        .manifest(
            "eval",
            json!({ "args": a, "proxy": proxy_cfg }),
            Some(&a.data),
            vec![a.checkpoint.clone()],
        )?
        .write(&a.out)?;
    println!("{:<16}{:>12}{:>12}{:>12}", "direction", "pixel acc", "class acc", "class IOU");
    metric_row("photo->label", &report.photo_to_label);
    metric_row("label->photo", &report.label_to_photo);
    metric_row("proxy ceiling", &report.proxy_ceiling);
    println!(
        "diversity over {} codes: pixel L1 {:.4}, feature L2 {:.4}",
        report.diversity.n_samples, report.diversity.mean_pixel_l1, report.diversity.mean_feature_l2
    );
    Ok(())
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let clock = Clock::start();
    let cfg = a.config.resolve(Mode::AsymExt)?;
    if cfg.mode != Mode::AsymExt {
        return Err(usage("the ablation sweep runs in asym-ext mode"));
    }
    if cfg.ablation != Default::default() {
        return Err(usage("ablation flags are set per group by the sweep"));
    }
    let data = open_dataset(&a.data)?;
    let report = ablation_sweep(&cfg, &data, &a.out)?;
    write_json(&a.out.join("ablation.json"), &report)?;
    let table = report.to_table();
    fs::write(a.out.join("ablation.txt"), &table).context("writing ablation.txt")?;
    let checkpoints = report
        .rows
        .iter()
        .filter(|r| r.aborted.is_none())
        .map(|r| checkpoint_path(&a.out.join(r.group.slug()), r.steps))
        .collect();
    clock
        .manifest(
            "ablate",
            json!({ "args": a, "resolved": config_json(&cfg) }),
            Some(&a.data),
            checkpoints,
        )?
        .write(&a.out)?;
    print!("{table}");
    if let Some(row) = report.rows.iter().find(|r| r.aborted.is_some()) {
        return Err(Error::NonFinite {
            step: row.steps,
            what: format!("loss in ablation group {}", row.label),
        }
        .into());
    }
    Ok(())
}
