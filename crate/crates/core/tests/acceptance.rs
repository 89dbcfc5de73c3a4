//! Acceptance checks, one line per criterion.
//!
//! The seeded smoke runs are cached under the cargo target directory, keyed
//! by their full configuration, so repeated invocations only re-check them.
//! Deterministic criteria fail the process; the learning-dynamics criteria
//! (5, 6, 9) are reported but do not change the exit status.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use asymgan::autograd::TvSign;
use asymgan::data::{make_dataset, ClassMap, Dataset, DatasetCounts, SceneSpec};
use asymgan::eval::{diversity_score, fcn_score, seg_metrics, train_proxy_segmenter, ProxyConfig};
use asymgan::infer::{sensitivity_probe, IdentityTranslator, ProbeKind, ProbeSpec};
use asymgan::losses::*;
use asymgan::model::{Mode, ModelBundle};
use asymgan::nets::build_feature_extractor;
use asymgan::train::*;
use asymgan::Tensor;
use common::*;
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: String) -> Outcome {
    if cond {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn cache_root() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

// ---------------------------------------------------------------------------
// Shared smoke runs

fn smoke_data() -> Dataset<f32> {
    let dir = cache_root().join("data");
    if Dataset::<f32>::open(&dir).is_err() {
        let _ = fs::remove_dir_all(&dir);
        make_dataset(&SceneSpec::default(), DatasetCounts::default(), 7, &dir).unwrap();
    }
    Dataset::open(&dir).unwrap()
}

fn smoke_config(mode: Mode, seed: u64, steps: u64) -> TrainConfig {
    let mut cfg = TrainConfig::for_mode(mode);
    cfg.net.image_size = 64;
    cfg.net.base_channels = 8;
    cfg.net.n_res_blocks = 3;
    cfg.batch_size = 4;
    cfg.seed = seed;
    cfg.max_steps = Some(steps);
    cfg
}

struct SmokeRun {
    checkpoint: PathBuf,
    loss_csv: PathBuf,
}

impl SmokeRun {
    fn bundle(&self) -> ModelBundle<f32> {
        load_checkpoint::<f32>(&self.checkpoint).unwrap().bundle
    }
}

/// Trains `cfg` into `cache/name` unless an identical finished run is there.
fn smoke_run(name: &str, cfg: &TrainConfig, data: &Dataset<f32>) -> Result<SmokeRun, String> {
    let dir = cache_root().join("runs").join(name);
    let key = dir.join("config.txt");
    let steps = cfg.max_steps.expect("smoke runs are bounded");
    let run = SmokeRun {
        checkpoint: checkpoint_path(&dir, steps),
        loss_csv: dir.join(LOSS_CSV),
    };
    let lines = cfg.to_lines();
    if fs::read_to_string(&key).ok().as_deref() == Some(lines.as_str()) && run.checkpoint.exists() {
        return Ok(run);
    }
    let _ = fs::remove_dir_all(&dir);
    let started = Instant::now();
    let mut trainer = Trainer::<f32>::new(cfg.clone()).map_err(|e| e.to_string())?;
    trainer.run(data, &dir, None).map_err(|e| format!("{name}: {e}"))?;
    fs::write(&key, lines).unwrap();
    eprintln!("  trained {name} ({steps} steps) in {:.0}s", started.elapsed().as_secs_f64());
    Ok(run)
}

// ---------------------------------------------------------------------------
// 1. Loss oracles

fn loss_oracles() -> Outcome {
    let phi = build_feature_extractor::<f64>();
    let mut r = rng(101);
    let mut worst: f64 = 0.0;
    let mut track = |name: &str, got: f64, want: f64| -> Result<(), String> {
        let e = rel_err(got, want);
        worst = worst.max(e);
        if e < 1e-5 {
            Ok(())
        } else {
            Err(format!("{name}: {got} vs oracle {want}"))
        }
    };
    for i in 0..200 {
        let shape = [1 + i % 2, 1 + i % 3, 4 + i % 7, 4 + (i / 3) % 9];
        let a = Tensor::<f64>::rand_uniform(shape, -1.0, 1.0, &mut r);
        let b = Tensor::<f64>::rand_uniform(shape, -1.0, 1.0, &mut r);
        track("lsgan_d", lsgan_d_loss(&a, &b).unwrap(), lsgan_d(a.data(), b.data()))?;
        track("lsgan_g", lsgan_g_loss(&a).unwrap(), lsgan_g(a.data()))?;
        track("cycle_l1", cycle_l1(&a, &b).unwrap(), l1(a.data(), b.data()))?;
        let g = gram_matrix(&a).unwrap();
        let want: Vec<f64> = gram(&a).into_iter().flatten().flatten().collect();
        for (x, y) in g.data().iter().zip(&want) {
            track("gram", *x, *y)?;
        }
        track("tv", total_variation(&a, TvSign::Plus).unwrap(), tv_oracle(&a, false))?;
        track("tv-", total_variation(&a, TvSign::Minus).unwrap(), tv_oracle(&a, true))?;
        let img = [shape[0], 3, shape[2], shape[3]];
        let p = Tensor::<f64>::rand_uniform(img, -1.0, 1.0, &mut r);
        let q = Tensor::<f64>::rand_uniform(img, -1.0, 1.0, &mut r);
        let layer = 1 + i % 2;
        track("content", perception_content(&phi, &p, &q, layer).unwrap(), content(&phi, &p, &q, layer))?;
        track("style", perception_style(&phi, &p, &q, layer).unwrap(), style(&phi, &p, &q, layer))?;
    }
    Ok(format!("200 tensors, worst relative error {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 2. Objective composition

fn composition() -> Outcome {
    let mut r = rng(102);
    let x = Tensor::<f64>::rand_uniform([2, 3, 16, 16], -1.0, 1.0, &mut r);
    let y = Tensor::<f64>::rand_uniform([2, 3, 16, 16], -1.0, 1.0, &mut r);
    let bundle = tiny_bundle(Mode::AsymExt, 16, 3);
    let w = LossWeights::default();
    let b = asym_objective_ext(&x, &y, &bundle, &w, &mut rng(4)).map_err(|e| e.to_string())?;
    let gen = b.adv_g
        + b.adv_f
        + w.lambda1 * b.adv_e
        + w.lambda2 * b.cyc_x
        + w.lambda3 * b.cyc_y
        + w.lambda4 * b.cyc_z
        + w.lambda5 * b.adv_ext_gf
        + w.lambda6 * b.adv_ext_fe
        + w.lambda7 * b.content
        + w.lambda8 * b.style
        + w.lambda9 * b.tv;
    let disc = b.d_y + b.d_x + w.lambda1 * b.d_z + w.lambda5 * b.d_ext_gf + w.lambda6 * b.d_ext_fe;
    let (eg, ed) = (rel_err(b.total_generatorside, gen), rel_err(b.total_discriminatorside, disc));
    if eg >= 1e-6 || ed >= 1e-6 {
        return Err(format!("re-sum errors {eg:.1e} / {ed:.1e}"));
    }
    let zero = LossWeights::without_extension();
    let plain = asym_objective(&x, &y, &bundle, &zero, &mut rng(6)).unwrap();
    let ext = asym_objective_ext(&x, &y, &bundle, &zero, &mut rng(6)).unwrap();
    let shared = [
        "adv_g", "adv_f", "adv_e", "cyc_x", "cyc_y", "cyc_z", "d_x", "d_y", "d_z",
        "total_generatorside", "total_discriminatorside",
    ];
    let same = shared
        .iter()
        .all(|n| plain.get(n).map(f64::to_bits) == ext.get(n).map(f64::to_bits));
    ensure(
        same,
        format!("re-sum errors {eg:.1e} / {ed:.1e}; zero extension weights reduce bitwise: {same}"),
    )
}

// ---------------------------------------------------------------------------
// 3. Gradient check

fn gradient_check() -> Outcome {
    // Steps of 1e-3 cross ReLU and L1 kinks often enough to dominate small
    // gradients; 1e-5 keeps truncation error far below the tolerance in f64.
    const H: f64 = 1e-5;
    const FLOOR: f64 = 1e-6;
    let mut r = rng(103);
    let mut bundle = tiny_bundle(Mode::AsymExt, 16, 8);
    // Move the modulation away from its identity initialization so every
    // path carries gradient.
    for t in bundle.f.params_mut().values_mut() {
        for v in t.data_mut() {
            *v += r.random_range(-0.05..0.05);
        }
    }
    let x = Tensor::<f64>::rand_uniform([2, 3, 16, 16], -1.0, 1.0, &mut r);
    let y = Tensor::<f64>::rand_uniform([2, 3, 16, 16], -1.0, 1.0, &mut r);
    let obj = Objective::new(Mode::AsymExt, LossWeights::default());
    let z = sample_prior(&bundle, &x, &mut r).unwrap();

    let gen_total = |b: &ModelBundle<f64>| generator_pass(&obj, b, &x, &y, z.as_ref(), false).unwrap().0.total();
    let (gen, fakes) = generator_pass(&obj, &bundle, &x, &y, z.as_ref(), true).unwrap();
    let gen_grads = gen.gradients().unwrap();
    let disc_total = |b: &ModelBundle<f64>| discriminator_pass(&obj, b, &x, &y, &fakes, false).unwrap().total();
    let disc_grads = discriminator_pass(&obj, &bundle, &x, &y, &fakes, true)
        .unwrap()
        .gradients()
        .unwrap();

    // (side, net index within the side, parameter tensor, element)
    let mut picks = Vec::new();
    for side in 0..2 {
        for _ in 0..16 {
            let net = r.random_range(0..3);
            let n_params = match (side, net) {
                (0, 0) => bundle.g.params().len(),
                (0, 1) => bundle.f.params().len(),
                (0, _) => bundle.e.as_ref().unwrap().params().len(),
                (_, 0) => bundle.d_x.params().len(),
                (_, 1) => bundle.d_y.params().len(),
                _ => bundle.d_z.as_ref().unwrap().params().len(),
            };
            let p = r.random_range(0..n_params);
            picks.push((side, net, p));
        }
    }
    let mut worst: f64 = 0.0;
    let mut significant = 0;
    for &(side, net, p) in &picks {
        let numel = {
            let nets = if side == 0 { bundle.generator_nets() } else { bundle.discriminator_nets() };
            nets[net].1.params().values()[p].numel()
        };
        let k = r.random_range(0..numel);
        let grads = if side == 0 { &gen_grads } else { &disc_grads };
        let analytic = grads[net][p].as_ref().map_or(0.0, |g| g.data()[k]);
        let probe = |delta: f64| {
            let mut b = bundle.clone();
            let mut nets = if side == 0 { b.generator_nets_mut() } else { b.discriminator_nets_mut() };
            nets[net].params_mut().values_mut()[p].data_mut()[k] += delta;
            if side == 0 {
                gen_total(&b)
            } else {
                disc_total(&b)
            }
        };
        let numeric = (probe(H) - probe(-H)) / (2.0 * H);
        // Biases feeding instance norm have an exact zero gradient; the floor
        // keeps round-off in the difference quotient from reading as error.
        let scale = analytic.abs().max(numeric.abs());
        significant += usize::from(scale > FLOOR);
        let e = (analytic - numeric).abs() / scale.max(FLOOR);
        worst = worst.max(e);
        if e >= 1e-2 {
            let name = if side == 0 { bundle.generator_nets()[net].0 } else { bundle.discriminator_nets()[net].0 };
            return Err(format!("{name} param {p}[{k}]: analytic {analytic:.6e} vs numeric {numeric:.6e}"));
        }
    }
    ensure(
        significant >= 20,
        format!(
            "{} parameters ({significant} with |gradient| > {FLOOR:e}), worst relative error {worst:.1e}",
            picks.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. Determinism and resume

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let counts = DatasetCounts {
        train_x: 16,
        train_y: 16,
        val: 2,
    };
    make_dataset(&SceneSpec::with_size(16), counts, 3, &dir.path().join("data")).unwrap();
    let data = Dataset::<f32>::open(&dir.path().join("data")).unwrap();
    let mut cfg = TrainConfig::for_mode(Mode::AsymExt);
    cfg.net = tiny_net(16);
    cfg.batch_size = 2;
    cfg.pool_size = 8;
    cfg.seed = 11;
    cfg.max_steps = Some(500);
    cfg.checkpoint_every = 250;

    let run = |name: &str| train::<f32>(&cfg, &data, &dir.path().join(name)).map_err(|e| e.to_string());
    let (_, a) = run("a")?;
    let (_, b) = run("b")?;
    let csv_a = fs::read(&a.loss_csv).unwrap();
    if csv_a != fs::read(&b.loss_csv).unwrap() {
        return Err("loss CSVs of identical runs differ".into());
    }
    let mid = load_checkpoint::<f32>(&a.checkpoints[0]).map_err(|e| e.to_string())?;
    let mut resumed = Trainer::from_checkpoint(mid);
    let c = resumed.run(&data, &dir.path().join("c"), None).map_err(|e| e.to_string())?;
    let tail = |path: &Path| -> Vec<String> {
        fs::read_to_string(path)
            .unwrap()
            .lines()
            .skip(1)
            .filter(|l| l.split(',').next().unwrap().parse::<u64>().unwrap() >= 250)
            .map(String::from)
            .collect()
    };
    let same_tail = tail(&a.loss_csv) == tail(&c.loss_csv);
    let same_ckpt = fs::read(a.last().unwrap()).unwrap() == fs::read(c.last().unwrap()).unwrap();
    ensure(
        same_tail && same_ckpt,
        format!(
            "500-step CSVs identical ({} bytes); resume from 250: rows equal {same_tail}, final checkpoint equal {same_ckpt}",
            csv_a.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 5. Smoke learning

fn smoke_learning(run: &SmokeRun) -> Outcome {
    let text = fs::read_to_string(&run.loss_csv).unwrap();
    let finite = text
        .lines()
        .skip(1)
        .all(|l| l.rsplit(',').next().unwrap().parse::<f64>().is_ok_and(f64::is_finite));
    let series: Vec<f64> = read_loss_series(&run.loss_csv, "cyc_x")
        .unwrap()
        .into_iter()
        .map(|(_, v)| v)
        .collect();
    let (Some(early), Some(late)) = (moving_average(&series, 99, 20), moving_average(&series, 1999, 20)) else {
        return Err(format!("only {} steps logged", series.len()));
    };
    let drop = 1.0 - late / early;
    ensure(
        finite && drop >= 0.5,
        format!("cyc_x MA20 {early:.4} at step 100 -> {late:.4} at step 2000 (drop {:.1}%, need 50%); all finite: {finite}", 100.0 * drop),
    )
}

// ---------------------------------------------------------------------------
// 6. Diversity

fn diversity(with_cz: &SmokeRun, without_cz: &SmokeRun, data: &Dataset<f32>) -> Outcome {
    let labels: Vec<Tensor<f32>> = data.val.iter().map(|p| p.label.clone()).collect();
    let score = |run: &SmokeRun| {
        let bundle = run.bundle();
        diversity_score(&bundle, &bundle.phi, &labels, 8, 0).unwrap().mean_pixel_l1
    };
    let (a, b) = (score(with_cz), score(without_cz));
    ensure(
        a > 0.01 && a > b,
        format!("pixel L1 over 8 codes: lambda4=10 {a:.4} (need > 0.01), lambda4=0 {b:.4} (need below)"),
    )
}

// ---------------------------------------------------------------------------
// 7. Metric oracle

fn metric_oracle() -> Outcome {
    let mut r = rng(107);
    for i in 0..1000 {
        let k = r.random_range(1..=8);
        let gt = ClassMap::new(8, 8, (0..64).map(|_| r.random_range(0..k) as u8).collect()).unwrap();
        let pred = ClassMap::new(8, 8, (0..64).map(|_| r.random_range(0..k) as u8).collect()).unwrap();
        if seg_metrics(&pred, &gt, k).unwrap() != seg_oracle(&pred, &gt, k) {
            return Err(format!("instance {i} differs from the confusion-matrix oracle"));
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let counts = DatasetCounts {
        train_x: 40,
        train_y: 4,
        val: 8,
    };
    make_dataset(&SceneSpec::with_size(32), counts, 2, dir.path()).unwrap();
    let data = Dataset::<f32>::open(dir.path()).unwrap();
    let seg = train_proxy_segmenter(&data, &ProxyConfig::default()).unwrap();
    let real = fcn_score(&seg, &RealPhotos(&data), &data, 0).unwrap();
    let bitwise = real.per_pixel_acc.to_bits() == seg.ceiling.per_pixel_acc.to_bits()
        && real.per_class_acc.to_bits() == seg.ceiling.per_class_acc.to_bits()
        && real.class_iou.to_bits() == seg.ceiling.class_iou.to_bits()
        && real == seg.ceiling;
    ensure(
        bitwise,
        format!("1000 random 8x8 instances exact; real-photo score equals ceiling bitwise: {bitwise}"),
    )
}

// ---------------------------------------------------------------------------
// 8. Probe harness

fn probe_harness() -> Outcome {
    let a = 0.02;
    let mut r = rng(108);
    let xs: Vec<Tensor<f64>> = (0..8)
        .map(|_| Tensor::rand_uniform([1, 3, 64, 64], -0.9, 0.9, &mut r))
        .collect();
    let spec = ProbeSpec {
        epsilon_amplitude: a,
        ..ProbeSpec::new(ProbeKind::Disturb)
    };
    let rep = sensitivity_probe(&IdentityTranslator, &xs, &xs, &spec, None).unwrap();
    let mut msg = Vec::new();
    for stats in [rep.forward_stats, rep.backward_stats] {
        let dev = (stats.probed_mean / (a / 2.0) - 1.0).abs();
        if dev > 0.05 {
            return Err(format!("probe error {} vs a/2 = {}", stats.probed_mean, a / 2.0));
        }
        msg.push(format!("{:.5}", stats.probed_mean));
    }
    let big: Vec<Tensor<f64>> = (0..2)
        .map(|_| Tensor::rand_uniform([1, 3, 128, 128], -0.9, 0.9, &mut r))
        .collect();
    for kind in [ProbeKind::Crop, ProbeKind::Scale] {
        let rep = sensitivity_probe(&IdentityTranslator, &big, &big, &ProbeSpec::new(kind), None).unwrap();
        if rep.forward.iter().chain(&rep.backward).any(|e| e.clean != 0.0 || e.probed != 0.0) {
            return Err(format!("{kind:?} probe of the identity is misaligned"));
        }
    }
    Ok(format!("disturb error {} (a/2 = {}); crop and scale aligned", msg.join(" / "), a / 2.0))
}

// ---------------------------------------------------------------------------
// 9. Sensitivity comparison

fn disturb_degradation(run: &SmokeRun, data: &Dataset<f32>) -> f64 {
    let xs: Vec<Tensor<f32>> = data.val.iter().map(|p| p.photo.clone()).collect();
    let spec = ProbeSpec::new(ProbeKind::Disturb);
    sensitivity_probe(&run.bundle(), &xs, &[], &spec, None)
        .unwrap()
        .forward_stats
        .degradation_mean
}

fn sensitivity(asym_1: &SmokeRun, base_1: &SmokeRun, data: &Dataset<f32>) -> Outcome {
    let mut lines = Vec::new();
    let mut wins = 0;
    for seed in 1..=3u64 {
        let (asym, base) = if seed == 1 {
            (disturb_degradation(asym_1, data), disturb_degradation(base_1, data))
        } else {
            let a = smoke_run(&format!("asym_ext_s{seed}"), &smoke_config(Mode::AsymExt, seed, 2000), data)?;
            let b = smoke_run(&format!("baseline_s{seed}"), &smoke_config(Mode::BaselineCyclegan, seed, 2000), data)?;
            (disturb_degradation(&a, data), disturb_degradation(&b, data))
        };
        wins += usize::from(asym <= base);
        lines.push(format!("seed {seed}: forward disturb degradation asym {asym:.3e} vs baseline {base:.3e}"));
        if seed == 1 && asym <= base {
            break;
        }
    }
    let pass = wins >= 2 || (lines.len() == 1 && wins == 1);
    ensure(pass, lines.join("; "))
}

// ---------------------------------------------------------------------------
// 10. Ablation sweep

fn ablation(data: &Dataset<f32>) -> Outcome {
    let base = smoke_config(Mode::AsymExt, 1, 500);
    let dir = cache_root().join("ablation");
    let cached = dir.join("report.json");
    let key = dir.join("config.txt");
    let report = match (fs::read_to_string(&key), fs::read_to_string(&cached)) {
        (Ok(k), Ok(json)) if k == base.to_lines() => serde_json::from_str::<SweepReport>(&json).unwrap(),
        _ => {
            let _ = fs::remove_dir_all(&dir);
            let report = ablation_sweep(&base, data, &dir).map_err(|e| e.to_string())?;
            fs::write(&cached, serde_json::to_string_pretty(&report).unwrap()).unwrap();
            fs::write(&key, base.to_lines()).unwrap();
            report
        }
    };
    print!("{}", report.to_table());
    let labels: Vec<&str> = report.rows.iter().map(|r| r.label.as_str()).collect();
    ensure(
        report.rows.len() == 5 && !report.any_aborted(),
        format!("{} groups at 500 steps ({}), aborted: {}", report.rows.len(), labels.join(", "), report.any_aborted()),
    )
}

// ---------------------------------------------------------------------------

fn main() {
    let mut hard_failures = 0;
    let mut passed = 0;
    let mut report = |id: u32, name: &str, empirical: bool, started: Instant, outcome: Outcome| {
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => {
                passed += 1;
                println!("[PASS] {id:>2} {name}: {msg} ({secs:.0}s)");
            }
            Err(msg) => {
                if !empirical {
                    hard_failures += 1;
                }
                println!("[FAIL] {id:>2} {name}: {msg} ({secs:.0}s)");
            }
        }
    };

    let t = Instant::now();
    report(1, "loss oracles", false, t, loss_oracles());
    let t = Instant::now();
    report(2, "objective composition", false, t, composition());
    let t = Instant::now();
    report(3, "gradient check", false, t, gradient_check());
    let t = Instant::now();
    report(4, "determinism and resume", false, t, determinism());
    let t = Instant::now();
    report(7, "metric oracle", false, t, metric_oracle());
    let t = Instant::now();
    report(8, "probe harness", false, t, probe_harness());

    let data = smoke_data();
    let t = Instant::now();
    let ext = smoke_run("asym_ext_s1", &smoke_config(Mode::AsymExt, 1, 2000), &data);
    match &ext {
        Ok(run) => report(5, "smoke learning", true, t, smoke_learning(run)),
        Err(e) => report(5, "smoke learning", true, t, Err(e.clone())),
    }
    let t = Instant::now();
    let mut no_cz = smoke_config(Mode::AsymExt, 1, 2000);
    no_cz.weights.lambda4 = 0.0;
    let outcome = smoke_run("asym_ext_s1_lambda4_0", &no_cz, &data)
        .and_then(|r| ext.as_ref().map_err(Clone::clone).and_then(|e| diversity(e, &r, &data)));
    report(6, "diversity and anti-collapse", true, t, outcome);
    let t = Instant::now();
    let outcome = smoke_run("baseline_s1", &smoke_config(Mode::BaselineCyclegan, 1, 2000), &data)
        .and_then(|b| ext.as_ref().map_err(Clone::clone).and_then(|e| sensitivity(e, &b, &data)));
    report(9, "sensitivity comparison", true, t, outcome);
    let t = Instant::now();
    report(10, "ablation sweep", false, t, ablation(&data));

    println!("{passed}/10 criteria passed");
    if hard_failures > 0 {
        std::process::exit(1);
    }
}
