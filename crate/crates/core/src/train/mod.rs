//! Alternating generator / discriminator optimization with checkpoints.

mod checkpoint;
mod config;
mod pool;
mod sweep;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use asymgan_autograd::{Adam, AdamConfig, Scalar, Tensor};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, TrainState,
    FORMAT_VERSION, MAGIC,
};
pub use config::{lr_at, parse_injection, parse_mode, TrainConfig};
pub use pool::ImagePool;
pub use sweep::{ablation_sweep, AblationGroup, SweepReport, SweepRow};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{discriminator_pass, generator_pass, sample_prior, LossBreakdown};
use crate::model::ModelBundle;
use crate::nets::NetHandle;
use crate::rng::{stream_rng, Stream};

pub const LOSS_CSV: &str = "losses.csv";
pub const LOSS_CSV_HEADER: &str = "step,epoch,term,value";

impl<S: Scalar> TrainState<S> {
    /// Fresh optimizers and pools for `bundle`.
    pub fn new(config: &TrainConfig, bundle: &ModelBundle<S>) -> Self {
        let adam = |n: &NetHandle<S>| Adam::new(AdamConfig::default(), n.params().values());
        Self {
            step: 0,
            rng: stream_rng(config.seed, Stream::Train),
            optim_gen: bundle.generator_nets().into_iter().map(|(_, n)| adam(n)).collect(),
            optim_disc: bundle.discriminator_nets().into_iter().map(|(_, n)| adam(n)).collect(),
            pool_x: ImagePool::new(config.pool_size),
            pool_y: ImagePool::new(config.pool_size),
        }
    }
}

fn apply_updates<S: Scalar>(
    nets: Vec<&mut NetHandle<S>>,
    optims: &mut [Adam<S>],
    grads: Vec<Vec<Option<Tensor<S>>>>,
    lr: f64,
) -> Result<()> {
    for ((net, adam), g) in nets.into_iter().zip(optims.iter_mut()).zip(grads) {
        adam.update(net.params_mut().values_mut(), &g, lr)?;
    }
    Ok(())
}

/// One generator-side and one discriminator-side update. Returns the losses
/// measured before either update.
pub fn train_step<S: Scalar>(
    bundle: &mut ModelBundle<S>,
    x: &Tensor<S>,
    y: &Tensor<S>,
    config: &TrainConfig,
    lrs: (f64, f64),
    state: &mut TrainState<S>,
) -> Result<LossBreakdown> {
    let obj = config.objective();
    let z = if config.mode.is_asym() {
        sample_prior(bundle, x, &mut state.rng)?
    } else {
        None
    };
    let (gen, mut fakes) = generator_pass(&obj, bundle, x, y, z.as_ref(), true)?;
    fakes.y_hat = state.pool_y.query_batch(&fakes.y_hat, &mut state.rng)?;
    fakes.x_hat = state.pool_x.query_batch(&fakes.x_hat, &mut state.rng)?;
    let disc = discriminator_pass(&obj, bundle, x, y, &fakes, true)?;
    let breakdown = crate::losses::combine(&gen.breakdown, &disc.breakdown);
    if !breakdown.all_finite() {
        return Err(Error::NonFinite {
            step: state.step,
            what: "loss".into(),
        });
    }
    let gen_grads = gen.gradients()?;
    drop(gen);
    apply_updates(bundle.generator_nets_mut(), &mut state.optim_gen, gen_grads, lrs.0)?;
    let disc_grads = disc.gradients()?;
    drop(disc);
    apply_updates(bundle.discriminator_nets_mut(), &mut state.optim_disc, disc_grads, lrs.1)?;
    state.step += 1;
    if !bundle.all_finite() {
        return Err(Error::NonFinite {
            step: state.step - 1,
            what: "parameter after update".into(),
        });
    }
    Ok(breakdown)
}

/// Appends `step,epoch,term,value` rows.
pub struct LossLog {
    out: BufWriter<File>,
}

impl LossLog {
    /// Opens `path` for appending, writing the header if the file is new.
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = !path.exists();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        if fresh {
            writeln!(out, "{LOSS_CSV_HEADER}").map_err(|e| Error::io(path, e))?;
        }
        Ok(Self { out })
    }

    pub fn record(&mut self, step: u64, epoch: u64, b: &LossBreakdown) -> std::io::Result<()> {
        for (term, value) in b.terms() {
            writeln!(self.out, "{step},{epoch},{term},{value}")?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.out.flush()
    }
}

/// Values of `term` from a loss log, in step order.
pub fn read_loss_series(path: &Path, term: &str) -> Result<Vec<(u64, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = || Error::Config(format!("{}:{}: malformed row", path.display(), i + 1));
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(bad());
        }
        if cols[2] == term {
            let step = cols[0].parse().map_err(|_| bad())?;
            let value = cols[3].parse().map_err(|_| bad())?;
            out.push((step, value));
        }
    }
    Ok(out)
}

/// Trailing moving average of `values` ending at index `end` (inclusive).
pub fn moving_average(values: &[f64], end: usize, window: usize) -> Option<f64> {
    if window == 0 || end >= values.len() || end + 1 < window {
        return None;
    }
    let w = &values[end + 1 - window..=end];
    Some(w.iter().sum::<f64>() / window as f64)
}

/// Files produced by a training run.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CheckpointSeries {
    pub checkpoints: Vec<PathBuf>,
    pub loss_csv: PathBuf,
    pub steps: u64,
}

impl CheckpointSeries {
    pub fn last(&self) -> Option<&Path> {
        self.checkpoints.last().map(PathBuf::as_path)
    }
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step_{step:08}.ckpt"))
}

/// A model, its configuration and its optimizer state.
pub struct Trainer<S> {
    pub config: TrainConfig,
    pub bundle: ModelBundle<S>,
    pub state: TrainState<S>,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let bundle = ModelBundle::init(config.architecture(), config.seed)?;
        let state = TrainState::new(&config, &bundle);
        Ok(Self {
            config,
            bundle,
            state,
        })
    }

    pub fn from_checkpoint(c: Checkpoint<S>) -> Self {
        Self {
            config: c.config,
            bundle: c.bundle,
            state: c.state,
        }
    }

    pub fn checkpoint(&self, epoch: u64) -> Checkpoint<S> {
        Checkpoint {
            epoch,
            config: self.config.clone(),
            bundle: self.bundle.clone(),
            state: self.state.clone(),
        }
    }

    /// Total number of steps for this dataset.
    pub fn total_steps(&self, data: &Dataset<S>) -> Result<u64> {
        let spe = data.steps_per_epoch(self.config.batch_size)?;
        let full = spe * self.config.total_epochs();
        Ok(self.config.max_steps.map_or(full, |m| m.min(full)))
    }

    /// Runs one step on the minibatch scheduled for the current step.
    pub fn step(&mut self, data: &Dataset<S>) -> Result<(u64, LossBreakdown)> {
        let batch = data.unpaired_batch(self.config.seed, self.state.step, self.config.batch_size)?;
        let lrs = lr_at(batch.epoch, &self.config)?;
        let b = train_step(&mut self.bundle, &batch.x, &batch.y, &self.config, lrs, &mut self.state)?;
        Ok((batch.epoch, b))
    }

    /// Trains until the configured end (or `stop_at`), appending to the loss
    /// log in `out_dir` and writing periodic and final checkpoints. On a
    /// non-finite loss a `diagnostic.ckpt` is written before returning the error.
    pub fn run(&mut self, data: &Dataset<S>, out_dir: &Path, stop_at: Option<u64>) -> Result<CheckpointSeries> {
        self.run_observed(data, out_dir, stop_at, |_, _| {})
    }

    /// [`Trainer::run`] that also hands every step's losses to `observe`.
    pub fn run_observed(
        &mut self,
        data: &Dataset<S>,
        out_dir: &Path,
        stop_at: Option<u64>,
        mut observe: impl FnMut(u64, &LossBreakdown),
    ) -> Result<CheckpointSeries> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let csv = out_dir.join(LOSS_CSV);
        let mut log = LossLog::open(&csv)?;
        let total = self.total_steps(data)?;
        let end = stop_at.map_or(total, |s| s.min(total));
        let spe = data.steps_per_epoch(self.config.batch_size)?;
        let mut series = CheckpointSeries {
            checkpoints: Vec::new(),
            loss_csv: csv.clone(),
            steps: 0,
        };
        while self.state.step < end {
            let step = self.state.step;
            match self.step(data) {
                Ok((epoch, b)) => {
                    log.record(step, epoch, &b).map_err(|e| Error::io(&csv, e))?;
                    observe(step, &b);
                }
                Err(err @ Error::NonFinite { .. }) => {
                    log.flush().map_err(|e| Error::io(&csv, e))?;
                    save_checkpoint(&self.checkpoint(step / spe), &out_dir.join("diagnostic.ckpt"))?;
                    return Err(err);
                }
                Err(other) => return Err(other),
            }
            series.steps += 1;
            let done = self.state.step;
            let every = self.config.checkpoint_every;
            if (every > 0 && done % every == 0) || done == end {
                let path = checkpoint_path(out_dir, done);
                save_checkpoint(&self.checkpoint(done / spe), &path)?;
                series.checkpoints.push(path);
            }
        }
        log.flush().map_err(|e| Error::io(&csv, e))?;
        Ok(series)
    }
}

/// Trains a fresh model from `config` on `data`, writing into `out_dir`.
pub fn train<S: Scalar>(config: &TrainConfig, data: &Dataset<S>, out_dir: &Path) -> Result<(Trainer<S>, CheckpointSeries)> {
    let mut trainer = Trainer::new(config.clone())?;
    let series = trainer.run(data, out_dir, None)?;
    Ok((trainer, series))
}
