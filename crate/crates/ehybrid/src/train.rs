//! Training: SGD with momentum and weight decay under per-epoch cosine
//! annealing, test-set evaluation by mean average precision, data-limited
//! subsampling, and the four-arm ablation driver.
//!
//! Everything is a pure function of the config and its seed: parameter
//! init, batch composition per epoch, DropConnect masks and subsampling all
//! draw from seeded streams, so two runs with the same inputs produce
//! bit-identical weights and reports.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{flip_horizontal, Dataset};
use crate::error::{Error, Result};
use crate::fusion::AblationMode;
use crate::metrics::{mean_average_precision, ApReport, MetricsReport};
use crate::network::{build_spec, Model, SpecOptions};
use crate::tape::{Mode, Tape};
use crate::tensor::{Shape, Tensor};

/// Hyperparameters of one training run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate of the cosine schedule.
    pub lr0: f64,
    /// Learning-rate floor reached at the final epoch.
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Fraction of the training set kept (uniform, without replacement).
    pub subsample_fraction: f64,
    pub ablation: AblationMode,
    /// Random horizontal flips during training.
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            lr0: 0.1,
            lr_min: 0.0,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            subsample_fraction: 1.0,
            ablation: AblationMode::None,
            flip: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(self.lr0.is_finite() && self.lr0 >= 0.0) {
            return Err(Error::Config(format!(
                "train.lr0 must be finite and non-negative, got {}",
                self.lr0
            )));
        }
        if !(self.lr_min.is_finite() && self.lr_min >= 0.0 && self.lr_min <= self.lr0) {
            return Err(Error::Config(format!(
                "train.lr_min must lie in [0, lr0], got {}",
                self.lr_min
            )));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::Config(format!(
                "train.momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "train.weight_decay must be finite and non-negative, got {}",
                self.weight_decay
            )));
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "train.subsample_fraction must lie in (0, 1], got {}",
                self.subsample_fraction
            )));
        }
        Ok(())
    }
}

/// Cosine-annealed learning rate at integer epoch `t` of `cfg.epochs`.
pub fn cosine_lr(t: usize, cfg: &TrainConfig) -> f64 {
    debug_assert!(t <= cfg.epochs);
    let phase = std::f64::consts::PI * t as f64 / cfg.epochs as f64;
    cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1.0 + phase.cos())
}

/// One SGD step on a parameter slice: `v <- mu*v + g + wd*w`, then
/// `w <- w - lr*v`.
pub fn sgd_step(w: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, momentum: f64, wd: f64) {
    for i in 0..w.len() {
        v[i] = momentum * v[i] + g[i] + wd * w[i];
        w[i] -= lr * v[i];
    }
}

/// Uniform subsample without replacement, preserving original sample order
/// within the subset. `fraction = 1.0` is the identity.
pub fn subsample_dataset(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "subsample fraction must lie in (0, 1], got {fraction}"
        )));
    }
    if fraction == 1.0 {
        return Ok(dataset.clone());
    }
    let keep = (dataset.len() as f64 * fraction).floor() as usize;
    if keep == 0 {
        return Err(Error::Usage(format!(
            "subsampling {} samples at fraction {fraction} leaves an empty set",
            dataset.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = rand::seq::index::sample(&mut rng, dataset.len(), keep).into_vec();
    indices.sort_unstable();
    Ok(Dataset {
        images: indices.iter().map(|&i| dataset.images[i].clone()).collect(),
        labels: indices.iter().map(|&i| dataset.labels[i]).collect(),
        class_names: dataset.class_names.clone(),
        split: dataset.split,
    })
}

/// Per-sample scattering coefficients for every fusion scale of a model,
/// computed once and stacked per batch afterwards.
pub struct ScatCache {
    per_j: BTreeMap<usize, Vec<Tensor>>,
}

impl ScatCache {
    /// Computes the cache for a whole dataset. Returns an empty cache for a
    /// fusion-free model.
    pub fn build(model: &Model, dataset: &Dataset) -> Result<ScatCache> {
        let mut per_j: BTreeMap<usize, Vec<Tensor>> = BTreeMap::new();
        for j in model.spec().fusion_scales() {
            per_j.insert(j, Vec::with_capacity(dataset.len()));
        }
        if per_j.is_empty() {
            return Ok(ScatCache { per_j });
        }
        for img in &dataset.images {
            for (j, coeffs) in model.compute_scatterings(img)? {
                per_j.get_mut(&j).expect("scale listed above").push(coeffs);
            }
        }
        Ok(ScatCache { per_j })
    }

    fn is_empty(&self) -> bool {
        self.per_j.is_empty()
    }

    /// Stacks the cached coefficients of the given samples into per-scale
    /// batch tensors.
    fn batch(&self, indices: &[usize]) -> Result<BTreeMap<usize, Tensor>> {
        let mut out = BTreeMap::new();
        for (&j, tensors) in &self.per_j {
            let first = tensors
                .first()
                .ok_or_else(|| Error::Usage("scattering cache is empty".into()))?
                .shape();
            let per = first.c * first.h * first.w;
            let mut data = Vec::with_capacity(indices.len() * per);
            for &i in indices {
                data.extend_from_slice(tensors[i].data());
            }
            out.insert(
                j,
                Tensor::from_vec(Shape::new(indices.len(), first.c, first.h, first.w), data)?,
            );
        }
        Ok(out)
    }
}

/// Softmax over each sample's logit row.
fn softmax_rows(logits: &Tensor) -> Vec<f64> {
    let s = logits.shape();
    let k = s.c;
    let mut out = vec![0.0; s.n * k];
    for i in 0..s.n {
        let row = &logits.data()[i * k..(i + 1) * k];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut denom = 0.0;
        for j in 0..k {
            let e = (row[j] - max).exp();
            out[i * k + j] = e;
            denom += e;
        }
        for j in 0..k {
            out[i * k + j] /= denom;
        }
    }
    out
}

/// Evaluates a model on a dataset: softmax scores, then one-vs-rest mean
/// average precision.
pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    batch_size: usize,
    ablation: AblationMode,
) -> Result<ApReport> {
    if dataset.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty dataset".into()));
    }
    let cache = ScatCache::build(model, dataset)?;
    let classes = dataset.class_names.len();
    let mut scores = Vec::with_capacity(dataset.len() * classes);
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in indices.chunks(batch_size.max(1)) {
        let x = dataset.batch(chunk)?;
        let scats = if cache.is_empty() {
            None
        } else {
            Some(cache.batch(chunk)?)
        };
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &x, Mode::Eval, ablation, &mut rng, scats.as_ref())?;
        let logits = tape.value(pass.logits);
        if logits.shape().c != classes {
            return Err(Error::Shape(format!(
                "model emits {} classes but the dataset has {classes}",
                logits.shape().c
            )));
        }
        scores.extend_from_slice(&softmax_rows(logits));
    }
    mean_average_precision(&scores, classes, &dataset.labels)
}

/// Trains `model` on `train_set` and evaluates on `test_set`.
///
/// The training set is subsampled per `cfg.subsample_fraction` first; the
/// test set is never touched. The trained weights stay in the model; the
/// report carries the loss/lr/seconds traces and the test-set AP.
pub fn train(
    model: &mut Model,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<MetricsReport> {
    cfg.validate()?;
    train_set.validate()?;
    test_set.validate()?;
    if train_set.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    let train_set = subsample_dataset(train_set, cfg.subsample_fraction, cfg.seed)?;
    let cache = ScatCache::build(model, &train_set)?;

    let mut velocity: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut report = MetricsReport::default();
    let all: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = cosine_lr(epoch, cfg);
        // Batch order and augmentation draws are pure functions of
        // (seed, epoch).
        let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        order_rng.set_stream(2 * epoch as u64 + 1);
        let mut net_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        net_rng.set_stream(2 * epoch as u64 + 2);
        let mut order = all.clone();
        order.shuffle(&mut order_rng);

        let mut loss_sum = 0.0;
        let mut checked_ablation = false;
        for chunk in order.chunks(cfg.batch_size) {
            let flips: Vec<bool> = chunk
                .iter()
                .map(|_| cfg.flip && net_rng.random_bool(0.5))
                .collect();
            let (x, scats) = assemble_batch(model, &train_set, &cache, chunk, &flips)?;
            let labels = train_set.label_batch(chunk);
            let mut tape = Tape::new();
            let pass = model.forward(
                &mut tape,
                &x,
                Mode::Train,
                cfg.ablation,
                &mut net_rng,
                scats.as_ref(),
            )?;
            let loss = tape.softmax_cross_entropy(pass.logits, &labels)?;
            let loss_value = tape.value(loss).item()?;
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {loss_value} at epoch {epoch}, first sample index {}; \
                     lower train.lr0 or check the input data",
                    chunk[0]
                )));
            }
            loss_sum += loss_value * chunk.len() as f64;
            let grads = tape.backward(loss)?;
            if cfg.ablation == AblationMode::ScatDisabled && !checked_ablation {
                // The disabled stream must stay invisible to the loss.
                for (j, var) in &pass.scat_vars {
                    let g = grads.get(*var).unwrap_or(&[]);
                    if g.iter().any(|&v| v != 0.0) {
                        return Err(Error::Numeric(format!(
                            "scat_disabled run leaked gradient into the J={j} scattering input"
                        )));
                    }
                }
                checked_ablation = true;
            }
            for name in model.store().trainable_names() {
                let var = match pass.param_vars.get(&name) {
                    Some(v) => *v,
                    None => continue,
                };
                let entry = model.store().get(&name)?;
                let count = entry.shape().count();
                let mut w = entry.data().to_vec();
                let zeros;
                let g = match grads.get(var) {
                    Some(g) => g,
                    None => {
                        zeros = vec![0.0; count];
                        &zeros[..]
                    }
                };
                let v = velocity.entry(name.clone()).or_insert_with(|| vec![0.0; count]);
                sgd_step(&mut w, g, v, lr, cfg.momentum, cfg.weight_decay);
                let shape = entry.shape();
                model.store_mut().set(&name, Tensor::from_vec(shape, w)?)?;
            }
            model.absorb_bn_stats(&pass.bn_stats)?;
        }
        report.train_loss.push(loss_sum / train_set.len() as f64);
        report.lr_trace.push(lr);
        report.seconds.push(start.elapsed().as_secs_f64());
    }

    let ap = evaluate(model, test_set, cfg.batch_size, cfg.ablation)?;
    report.per_class_ap = ap.per_class;
    report.map = ap.map;
    report.skipped_classes = ap.skipped_classes;
    Ok(report)
}

/// Builds the image batch and, for hybrid models, the matching per-scale
/// scattering batch. Flipped samples are scattered on the fly since the
/// cache holds the unflipped coefficients.
fn assemble_batch(
    model: &Model,
    dataset: &Dataset,
    cache: &ScatCache,
    chunk: &[usize],
    flips: &[bool],
) -> Result<(Tensor, Option<BTreeMap<usize, Tensor>>)> {
    let any_flip = flips.iter().any(|&f| f);
    if !any_flip {
        let x = dataset.batch(chunk)?;
        let scats = if cache.is_empty() {
            None
        } else {
            Some(cache.batch(chunk)?)
        };
        return Ok((x, scats));
    }
    let first = dataset.image_shape().expect("non-empty dataset");
    let per = first.c * first.h * first.w;
    let mut data = Vec::with_capacity(chunk.len() * per);
    let mut images = Vec::with_capacity(chunk.len());
    for (&i, &flip) in chunk.iter().zip(flips) {
        let img = if flip {
            flip_horizontal(&dataset.images[i])
        } else {
            dataset.images[i].clone()
        };
        data.extend_from_slice(img.data());
        images.push(img);
    }
    let x = Tensor::from_vec(Shape::new(chunk.len(), first.c, first.h, first.w), data)?;
    if cache.is_empty() {
        return Ok((x, None));
    }
    let mut scats: BTreeMap<usize, Vec<Tensor>> = BTreeMap::new();
    for img in &images {
        for (j, coeffs) in model.compute_scatterings(img)? {
            scats.entry(j).or_default().push(coeffs);
        }
    }
    let mut stacked = BTreeMap::new();
    for (j, tensors) in scats {
        let s = tensors[0].shape();
        let mut data = Vec::with_capacity(tensors.len() * s.c * s.h * s.w);
        for t in &tensors {
            data.extend_from_slice(t.data());
        }
        stacked.insert(
            j,
            Tensor::from_vec(Shape::new(tensors.len(), s.c, s.h, s.w), data)?,
        );
    }
    Ok((x, Some(stacked)))
}

/// One arm of the ablation comparison.
#[derive(Clone, Debug)]
pub struct AblationArm {
    pub name: String,
    pub map: f64,
    pub report: MetricsReport,
}

/// Four-arm comparison: hybrid, its two stream ablations, and the
/// fusion-free baseline, all trained under the same config and seed.
#[derive(Clone, Debug)]
pub struct AblationReport {
    pub arms: Vec<AblationArm>,
    /// `(arm name, hybrid mAP - arm mAP)` for the three non-hybrid arms.
    pub deltas: Vec<(String, f64)>,
}

/// Trains and evaluates the four ablation arms.
///
/// `opts` must describe a hybrid model; the baseline arm is derived from it
/// by dropping the fusion rows.
pub fn run_ablation_suite(
    opts: &SpecOptions,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<AblationReport> {
    if opts.fusion.is_none() {
        return Err(Error::Usage(
            "ablation suite needs a hybrid spec; the baseline arm is derived from it".into(),
        ));
    }
    let arms = [
        ("hybrid", Some(*opts), AblationMode::None),
        ("scat_disabled", Some(*opts), AblationMode::ScatDisabled),
        ("net_disabled", Some(*opts), AblationMode::NetDisabled),
        (
            "baseline",
            Some(SpecOptions {
                fusion: None,
                ..*opts
            }),
            AblationMode::None,
        ),
    ];
    let mut report = AblationReport {
        arms: Vec::with_capacity(4),
        deltas: Vec::with_capacity(3),
    };
    for (name, arm_opts, ablation) in arms {
        let spec = build_spec(&arm_opts.expect("set above"))?;
        let mut model = Model::new(spec, cfg.seed)?;
        let arm_cfg = TrainConfig { ablation, ..*cfg };
        let metrics = train(&mut model, train_set, test_set, &arm_cfg)?;
        report.arms.push(AblationArm {
            name: name.to_string(),
            map: metrics.map,
            report: metrics,
        });
    }
    let hybrid_map = report.arms[0].map;
    for arm in &report.arms[1..] {
        report.deltas.push((arm.name.clone(), hybrid_map - arm.map));
    }
    Ok(report)
}
