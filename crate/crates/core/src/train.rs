//! SGD training loop, learning-rate schedule, metrics and evaluation.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{Network, NetworkConfig};
use crate::checkpoint::Checkpoint;
use crate::data::{dataset_for_dir, load_cifar, ChannelStats, CifarVariant, Dataset, Split};
use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Iterations at which the rate is multiplied by `decay`.
    pub milestones: Vec<usize>,
    pub decay: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub seed: u64,
    pub precision: DType,
    /// Training rows are logged every `log_interval` iterations and at the end.
    pub log_interval: usize,
    /// Validation runs every `eval_interval` iterations and at the end.
    pub eval_interval: usize,
    /// Evaluate on at most this many validation images.
    pub eval_samples: Option<usize>,
    /// Random crop and horizontal flip.
    pub augment: bool,
    /// Dataset flavour; detected from the data directory when absent.
    pub dataset: Option<CifarVariant>,
}

impl Default for TrainConfig {
    /// Desk-scale preset: 8k iterations with milestones at 4k and 6k.
    fn default() -> Self {
        Self {
            iterations: 8000,
            batch_size: 128,
            base_lr: 0.1,
            milestones: vec![4000, 6000],
            decay: 0.1,
            weight_decay: 5e-4,
            momentum: 0.9,
            seed: 0,
            precision: DType::F32,
            log_interval: 100,
            eval_interval: 1000,
            eval_samples: None,
            augment: true,
            dataset: None,
        }
    }
}

impl TrainConfig {
    /// The full 64k-iteration CIFAR schedule.
    pub fn full_schedule() -> Self {
        Self {
            iterations: 64_000,
            milestones: vec![32_000, 48_000],
            eval_interval: 4000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.iterations == 0 || self.batch_size == 0 {
            return bad("iterations and batch size must be positive".into());
        }
        if self.log_interval == 0 || self.eval_interval == 0 {
            return bad("log and eval intervals must be positive".into());
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("milestones {:?} must be strictly increasing", self.milestones));
        }
        if self.milestones.iter().any(|&m| m >= self.iterations) {
            return bad(format!(
                "milestones {:?} must lie below the {} total iterations",
                self.milestones, self.iterations
            ));
        }
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("decay", self.decay),
            ("weight_decay", self.weight_decay),
            ("momentum", self.momentum),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        if self.momentum >= 1.0 {
            return bad("momentum must be below 1".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `base_lr * decay^k`, `k` = number of milestones `<= iter`.
pub fn lr_at(iter: usize, cfg: &TrainConfig) -> f64 {
    let passed = cfg.milestones.iter().filter(|&&m| iter >= m).count();
    cfg.base_lr * cfg.decay.powi(passed as i32)
}

/// `v <- momentum * v + g + wd * p; p <- p - lr * v`, elementwise over every tensor.
pub fn sgd_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    velocity: &mut [Tensor<T>],
    lr: T,
    momentum: T,
    weight_decay: T,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::InvalidConfig(format!(
            "sgd_step: {} parameters, {} gradients, {} buffers",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(velocity.iter()) {
        p.check_same_shape(g, "sgd_step")?;
        p.check_same_shape(v, "sgd_step")?;
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = momentum * *vi + gi + weight_decay * *pi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

/// One line of the metrics CSV. Training rows leave the validation columns
/// empty and evaluation rows leave the training columns empty.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub lr: f64,
    pub train_loss: Option<f64>,
    pub train_top1: Option<f64>,
    pub val_top1: Option<f64>,
    pub val_top5: Option<f64>,
    pub wall_seconds: f64,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str = "iteration,lr,train_loss,train_top1_err,val_top1_err,val_top5_err,wall_seconds";

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{:.3}",
            self.iteration,
            self.lr,
            opt(self.train_loss),
            opt(self.train_top1),
            opt(self.val_top1),
            opt(self.val_top5),
            self.wall_seconds
        )
    }
}

/// Whether `label` ranks within the top `k` logits of row `i`.
/// Ties count in the label's favour.
fn in_top_k<T: Scalar>(row: &[T], label: usize, k: usize) -> bool {
    let target = row[label];
    row.iter().filter(|&&v| v > target).count() < k
}

/// Number of samples whose label is in the top 1 and top 5 of `(n, classes, 1, 1)` logits.
pub fn topk_correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(usize, usize)> {
    let [n, classes, _, _] = logits.dims();
    if labels.len() != n {
        return Err(Error::InvalidConfig(format!("{} labels for {n} logit rows", labels.len())));
    }
    let mut top1 = 0;
    let mut top5 = 0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let row = &logits.data()[i * classes..(i + 1) * classes];
        top1 += in_top_k(row, label, 1) as usize;
        top5 += in_top_k(row, label, 5) as usize;
    }
    Ok((top1, top5))
}

/// Top-1 and top-5 error percentages, `100 * (1 - accuracy)`.
pub fn topk_errors<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, f64)> {
    let (c1, c5) = topk_correct(logits, labels)?;
    let n = labels.len().max(1) as f64;
    Ok((100.0 * (1.0 - c1 as f64 / n), 100.0 * (1.0 - c5 as f64 / n)))
}

/// Eval-mode top-1 / top-5 error on standardized, unaugmented images.
pub fn evaluate<T: Scalar>(net: &Network<T>, data: &Dataset, stats: &ChannelStats, batch_size: usize) -> Result<(f64, f64)> {
    if net.config().classes != data.classes() {
        return Err(Error::ClassMismatch {
            network: net.config().classes,
            dataset: data.classes(),
        });
    }
    if data.is_empty() {
        return Err(Error::InvalidConfig("evaluation dataset is empty".into()));
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let (mut c1, mut c5) = (0, 0);
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, y) = data.batch::<T>(chunk, stats, None)?;
        let (a, b) = topk_correct(&net.predict(&x)?, &y)?;
        c1 += a;
        c5 += b;
    }
    let n = data.len() as f64;
    Ok((100.0 * (1.0 - c1 as f64 / n), 100.0 * (1.0 - c5 as f64 / n)))
}

/// Epoch permutation; depends only on the run seed and the epoch number.
pub fn epoch_permutation(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut perm: Vec<usize> = (0..len).collect();
    perm.shuffle(&mut rng);
    perm
}

fn augmentation_seed(seed: u64, iteration: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (iteration as u64).wrapping_add(0x5851_F42D_4C95_7F2D)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainReport {
    /// Mini-batch loss of every iteration.
    pub losses: Vec<f64>,
    pub rows: Vec<MetricsRow>,
    pub final_val: Option<(f64, f64)>,
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

pub const FINAL_CHECKPOINT: &str = "final.dsnt";
pub const METRICS_FILE: &str = "metrics.csv";

pub fn milestone_checkpoint_name(iteration: usize) -> String {
    format!("iter_{iteration:06}.dsnt")
}

struct MetricsSink {
    out: Option<BufWriter<File>>,
    rows: Vec<MetricsRow>,
}

impl MetricsSink {
    fn push(&mut self, row: MetricsRow) -> Result<()> {
        if let Some(out) = &mut self.out {
            writeln!(out, "{}", row.to_csv())?;
            out.flush()?;
        }
        self.rows.push(row);
        Ok(())
    }
}

/// Trains a freshly initialized network on `train_set`.
///
/// Mini-batches come from a per-epoch permutation of the run seed; the final
/// partial batch of each epoch is dropped. With `out_dir`, metrics and
/// checkpoints (at each milestone and at the end) are written there.
pub fn train<T: Scalar>(
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    out_dir: Option<&Path>,
) -> Result<(Network<T>, Checkpoint, TrainReport)> {
    cfg.validate()?;
    net_cfg.validate()?;
    if net_cfg.input_side() != crate::data::IMAGE_SIDE {
        return Err(Error::InvalidConfig(format!(
            "training data is 32x32 but the network expects {} pixels",
            net_cfg.input_side()
        )));
    }
    for d in std::iter::once(train_set).chain(val_set) {
        if d.classes() != net_cfg.classes {
            return Err(Error::ClassMismatch {
                network: net_cfg.classes,
                dataset: d.classes(),
            });
        }
    }
    let steps_per_epoch = train_set.len() / cfg.batch_size;
    if steps_per_epoch == 0 {
        return Err(Error::InvalidConfig(format!(
            "{} training images cannot fill one batch of {}",
            train_set.len(),
            cfg.batch_size
        )));
    }
    let val_subset = val_set.map(|v| match cfg.eval_samples {
        Some(n) => v.truncated(n),
        None => v.clone(),
    });

    let stats = train_set.channel_stats();
    let mut net = Network::<T>::build(net_cfg, cfg.seed)?;
    let mut velocity: Vec<Tensor<T>> = net.values().iter().map(Tensor::zeros_like).collect();
    let learnable: Vec<bool> = net.params().iter().map(|p| p.learnable).collect();

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut sink = MetricsSink {
        out: match out_dir {
            Some(dir) => {
                let mut f = BufWriter::new(File::create(dir.join(METRICS_FILE))?);
                writeln!(f, "{}", MetricsRow::CSV_HEADER)?;
                Some(f)
            }
            None => None,
        },
        rows: Vec::new(),
    };

    let start = Instant::now();
    let mut report = TrainReport::default();
    let mut perm = Vec::new();
    let (mut window_loss, mut window_correct, mut window_seen, mut window_iters) = (0.0, 0usize, 0usize, 0usize);
    let (momentum, wd) = (T::lit(cfg.momentum), T::lit(cfg.weight_decay));
    let checkpoint_at = |net: &Network<T>, velocity: &[Tensor<T>], iteration: usize| {
        Checkpoint::capture(net, Some(velocity), Some(cfg.clone()), iteration, Some(stats))
    };

    for it in 0..cfg.iterations {
        let epoch = it / steps_per_epoch;
        let pos = it % steps_per_epoch;
        if pos == 0 {
            perm = epoch_permutation(train_set.len(), cfg.seed, epoch);
        }
        let idx = &perm[pos * cfg.batch_size..(pos + 1) * cfg.batch_size];
        let aug = cfg.augment.then(|| augmentation_seed(cfg.seed, it));
        let (x, y) = train_set.batch::<T>(idx, &stats, aug)?;
        let (loss, logits, grads) = net.loss_and_gradients(&x, &y)?;
        let loss = loss.as_f64();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: it + 1, loss });
        }
        let lr = lr_at(it, cfg);
        let lr_t = T::lit(lr);
        let values = net.values_mut();
        for i in (0..values.len()).filter(|&i| learnable[i]) {
            sgd_step(
                std::slice::from_mut(&mut values[i]),
                std::slice::from_ref(&grads[i]),
                std::slice::from_mut(&mut velocity[i]),
                lr_t,
                momentum,
                wd,
            )?;
        }

        report.losses.push(loss);
        window_loss += loss;
        window_iters += 1;
        window_correct += topk_correct(&logits, &y)?.0;
        window_seen += y.len();

        let done = it + 1;
        let last = done == cfg.iterations;
        if done % cfg.log_interval == 0 || last {
            let row = MetricsRow {
                iteration: done,
                lr,
                train_loss: Some(window_loss / window_iters as f64),
                train_top1: Some(100.0 * (1.0 - window_correct as f64 / window_seen as f64)),
                val_top1: None,
                val_top5: None,
                wall_seconds: start.elapsed().as_secs_f64(),
            };
            log::info!(
                "iter {done}/{} lr {lr:.2e} loss {:.4} top1-err {:.2}%",
                cfg.iterations,
                row.train_loss.unwrap_or_default(),
                row.train_top1.unwrap_or_default()
            );
            sink.push(row)?;
            (window_loss, window_correct, window_seen, window_iters) = (0.0, 0, 0, 0);
        }
        if let Some(val) = &val_subset {
            if done % cfg.eval_interval == 0 || last {
                let (e1, e5) = evaluate(&net, val, &stats, cfg.batch_size)?;
                log::info!("iter {done}: val top1-err {e1:.2}% top5-err {e5:.2}%");
                if last {
                    report.final_val = Some((e1, e5));
                }
                sink.push(MetricsRow {
                    iteration: done,
                    lr,
                    train_loss: None,
                    train_top1: None,
                    val_top1: Some(e1),
                    val_top5: Some(e5),
                    wall_seconds: start.elapsed().as_secs_f64(),
                })?;
            }
        }
        if let Some(dir) = out_dir {
            if cfg.milestones.contains(&done) {
                checkpoint_at(&net, &velocity, done).save(&dir.join(milestone_checkpoint_name(done)))?;
            }
        }
    }

    let ckpt = checkpoint_at(&net, &velocity, cfg.iterations);
    if let Some(dir) = out_dir {
        let path = dir.join(FINAL_CHECKPOINT);
        ckpt.save(&path)?;
        report.checkpoint = Some(path);
        report.metrics = Some(dir.join(METRICS_FILE));
    }
    report.rows = sink.rows;
    Ok((net, ckpt, report))
}

/// Resolves the dataset flavour from the config or the directory contents.
pub fn dataset_variant(cfg: &TrainConfig, data_dir: &Path) -> Result<CifarVariant> {
    dataset_for_dir(cfg.dataset, data_dir)
}

/// Loads the train and test splits from `data_dir` and trains at the configured precision.
pub fn train_from_dir(net_cfg: &NetworkConfig, cfg: &TrainConfig, data_dir: &Path, out_dir: &Path) -> Result<TrainReport> {
    let variant = dataset_variant(cfg, data_dir)?;
    let train_set = load_cifar(data_dir, variant, Split::Train)?;
    let test_set = load_cifar(data_dir, variant, Split::Test)?;
    Ok(match cfg.precision {
        DType::F32 => train::<f32>(net_cfg, cfg, &train_set, Some(&test_set), Some(out_dir))?.2,
        DType::F64 => train::<f64>(net_cfg, cfg, &train_set, Some(&test_set), Some(out_dir))?.2,
    })
}
