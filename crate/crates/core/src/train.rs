//! ERM and DASCL training loops, evaluation and magnitude calibration.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{
    apply_op_features, augment_features, calibrate_with, calibration_seed, sample_composite,
    AugmentationPolicy, Calibrated, CalibrationSettings, CompositeAugmentation, MagnitudeRanges,
    OpKind,
};
use crate::autodiff::Tape;
use crate::data::{DomainDataset, Layout, Sample};
use crate::error::{Error, Result};
use crate::exec;
use crate::losses::{combined_loss, cross_entropy, SupConConfig};
use crate::metrics::{self, Metric};
use crate::nn::{init_model, ModelBundle, ModelConfig};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::{self, derive_seed, stream, Rng};
use crate::tensor::Tensor;

#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Erm,
    Dascl,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::Dascl => "dascl",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "erm" => Ok(Method::Erm),
            "dascl" => Ok(Method::Dascl),
            _ => Err(Error::contract(format!("unknown method {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub supcon: SupConConfig,
    /// Only used by DASCL.
    pub policy: AugmentationPolicy,
    pub ranges: MagnitudeRanges,
    pub seed: u64,
    /// Label for diagnostics; defaults to `<method>-<seed>`.
    pub run_id: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Dascl,
            epochs: 100,
            batch_size: 64,
            lr: 1e-3,
            optimizer: OptimizerKind::default(),
            supcon: SupConConfig::default(),
            policy: AugmentationPolicy::uncalibrated(false),
            ranges: MagnitudeRanges::default(),
            seed: 0,
            run_id: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::contract("epochs must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::contract("batch_size must be at least 2"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::contract(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        self.supcon.validate()?;
        self.policy.validate()?;
        Ok(())
    }

    pub fn run_id(&self) -> String {
        self.run_id
            .clone()
            .unwrap_or_else(|| format!("{}-{}", self.method, self.seed))
    }
}

/// Stacked views of one batch: rows `0..b` are the originals, rows `b..2b`
/// the augmented copies.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    /// 0 for originals, 1 for augmented rows.
    pub views: Vec<u8>,
}

pub fn make_batch(
    samples: &[&Sample],
    layout: &Layout,
    composite: &CompositeAugmentation,
    ranges: &MagnitudeRanges,
) -> Result<Batch> {
    let b = samples.len();
    if b < 2 {
        return Err(Error::contract(format!(
            "a batch needs at least 2 samples, got {b}"
        )));
    }
    let dim = layout.input_dim();
    let mut data = Vec::with_capacity(2 * b * dim);
    for s in samples {
        data.extend_from_slice(&s.x);
    }
    for (i, s) in samples.iter().enumerate() {
        data.extend(augment_features(
            &s.x,
            layout,
            &composite.for_sample(i),
            ranges,
        )?);
    }
    let labels: Vec<usize> = samples.iter().chain(samples).map(|s| s.label).collect();
    let views = (0..2 * b).map(|i| u8::from(i >= b)).collect();
    Ok(Batch {
        inputs: Tensor::new(&[2 * b, dim], data)?,
        labels,
        views,
    })
}

/// Mean loss terms over one epoch's batches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub total: f64,
    pub ce: f64,
    pub supcon: f64,
}

/// Per-batch loss terms, before averaging.
fn train_step(
    model: &mut ModelBundle,
    opt: &mut Optimizer,
    batch: &Batch,
    cfg: &TrainConfig,
    (epoch, batch_index): (usize, usize),
) -> Result<EpochStats> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let x = tape.constant(batch.inputs.clone());
    let h = bound.features(&mut tape, x)?;
    let logits = bound.logits(&mut tape, h)?;
    let (total, ce, sc) = match cfg.method {
        Method::Erm => {
            let ce = cross_entropy(&mut tape, logits, &batch.labels)?;
            (ce, ce, None)
        }
        Method::Dascl => {
            let z = bound.projection(&mut tape, h)?;
            let t = combined_loss(&mut tape, logits, z, &batch.labels, &cfg.supcon)?;
            (t.total, t.cross_entropy, Some(t.supcon))
        }
    };
    let stats = EpochStats {
        total: tape.value(total).item()?,
        ce: tape.value(ce).item()?,
        supcon: match sc {
            Some(v) => tape.value(v).item()?,
            None => 0.0,
        },
    };
    if !(stats.total.is_finite() && stats.ce.is_finite() && stats.supcon.is_finite()) {
        return Err(Error::NonFinite {
            run_id: cfg.run_id(),
            epoch,
            batch: batch_index,
        });
    }
    let grads = tape.backward(total)?;
    let g: Vec<Tensor> = bound.params().iter().map(|&v| grads.get(v)).collect();
    opt.step(&mut model.params_mut(), &g)?;
    Ok(stats)
}

/// Random generators for one training run.
pub struct TrainStreams {
    pub shuffle: Rng,
    pub augment: Rng,
}

impl TrainStreams {
    pub fn new(seed: u64) -> Self {
        TrainStreams {
            shuffle: rng::rng(derive_seed(seed, &[stream::SHUFFLE])),
            augment: rng::rng(derive_seed(seed, &[stream::AUGMENT])),
        }
    }
}

/// One pass over `data` in shuffled batches. A trailing batch of a single
/// sample is dropped.
pub fn train_epoch(
    model: &mut ModelBundle,
    opt: &mut Optimizer,
    data: &[Sample],
    layout: &Layout,
    cfg: &TrainConfig,
    epoch: usize,
    streams: &mut TrainStreams,
) -> Result<EpochStats> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut streams.shuffle);
    let mut sum = EpochStats {
        total: 0.0,
        ce: 0.0,
        supcon: 0.0,
    };
    let mut batches = 0usize;
    for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
        if chunk.len() < 2 {
            continue;
        }
        let composite = match cfg.method {
            Method::Erm => CompositeAugmentation::identity(),
            Method::Dascl => sample_composite(&cfg.policy, &mut streams.augment),
        };
        let samples: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
        let batch = make_batch(&samples, layout, &composite, &cfg.ranges)?;
        let s = train_step(model, opt, &batch, cfg, (epoch, bi))?;
        sum.total += s.total;
        sum.ce += s.ce;
        sum.supcon += s.supcon;
        batches += 1;
    }
    if batches == 0 {
        return Err(Error::contract(
            "training data yields no batch of 2 or more",
        ));
    }
    let n = batches as f64;
    Ok(EpochStats {
        total: sum.total / n,
        ce: sum.ce / n,
        supcon: sum.supcon / n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub total: f64,
    pub ce: f64,
    pub supcon: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,total,ce,supcon,val_acc\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.epoch, r.total, r.ce, r.supcon, r.val_acc
            );
        }
        s
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Pool every source domain's samples.
pub fn pool(sources: &[DomainDataset]) -> Result<(Vec<Sample>, Layout)> {
    let first = sources
        .first()
        .ok_or_else(|| Error::contract("no source domains to train on"))?;
    let mut out = Vec::new();
    for d in sources {
        if d.layout != first.layout {
            return Err(Error::Consistency(format!(
                "domain {} has a different layout from {}",
                d.name, first.name
            )));
        }
        out.extend_from_slice(d.samples());
    }
    Ok((out, first.layout))
}

/// Train from a fresh initialisation seeded by `cfg.seed`.
pub fn fit(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    sources: &[DomainDataset],
    val: &DomainDataset,
) -> Result<(ModelBundle, TrainHistory)> {
    cfg.validate()?;
    let (data, layout) = pool(sources)?;
    if layout.input_dim() != model_cfg.input_dim {
        return Err(Error::ShapeMismatch {
            op: "fit",
            left: vec![layout.input_dim()],
            right: vec![model_cfg.input_dim],
        });
    }
    let mut model = init_model(model_cfg, cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr)?;
    let mut streams = TrainStreams::new(cfg.seed);
    let mut history = TrainHistory::default();
    for epoch in 0..cfg.epochs {
        let s = train_epoch(
            &mut model,
            &mut opt,
            &data,
            &layout,
            cfg,
            epoch,
            &mut streams,
        )?;
        let val_acc = evaluate(&model, val, Metric::Accuracy)?;
        log::debug!(
            "{} epoch {epoch}: total {:.4} ce {:.4} supcon {:.4} val {:.4}",
            cfg.run_id(),
            s.total,
            s.ce,
            s.supcon,
            val_acc
        );
        history.rows.push(HistoryRow {
            epoch,
            total: s.total,
            ce: s.ce,
            supcon: s.supcon,
            val_acc,
        });
    }
    Ok((model, history))
}

const EVAL_CHUNK: usize = 512;

/// Logits for a list of flattened inputs, in chunks evaluated in parallel.
pub fn predict(model: &ModelBundle, xs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    let dim = model.config.input_dim;
    let chunks: Vec<&[&[f64]]> = xs.chunks(EVAL_CHUNK).collect();
    let parts = exec::map(&chunks, |chunk| -> Result<Vec<Vec<f64>>> {
        let t = Tensor::new(&[chunk.len(), dim], chunk.concat())?;
        let l = model.logits(&t)?;
        let (n, c) = l.dims2()?;
        Ok((0..n)
            .map(|i| l.data()[i * c..(i + 1) * c].to_vec())
            .collect())
    });
    let mut out = Vec::with_capacity(xs.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Encoder features for every sample of a dataset, as one matrix.
pub fn dataset_features(model: &ModelBundle, xs: &[Vec<f64>]) -> Result<Tensor> {
    let dim = model.config.input_dim;
    let chunks: Vec<&[Vec<f64>]> = xs.chunks(EVAL_CHUNK).collect();
    let parts = exec::map(&chunks, |chunk| {
        model.features(&Tensor::new(&[chunk.len(), dim], chunk.concat())?)
    });
    let mut rows = Vec::new();
    let mut cols = model.config.embed_dim;
    for p in parts {
        let f = p?;
        cols = f.dims2()?.1;
        rows.extend(f.into_data());
    }
    Tensor::new(&[xs.len(), cols], rows)
}

pub fn evaluate(model: &ModelBundle, dataset: &DomainDataset, metric: Metric) -> Result<f64> {
    let samples = dataset.samples();
    if samples.is_empty() {
        return Err(Error::contract("evaluation on an empty dataset"));
    }
    let xs: Vec<&[f64]> = samples.iter().map(|s| s.x.as_slice()).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    metrics::score(metric, &predict(model, &xs)?, &labels)
}

fn correct(model: &ModelBundle, xs: &[Vec<f64>], labels: &[usize]) -> Result<usize> {
    let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    Ok(metrics::correct_count(&predict(model, &refs)?, labels))
}

/// Largest per-op magnitude whose validation accuracy drop against the
/// frozen `baseline` stays within `settings.epsilon`. Sample `i` at grid
/// point `g` uses the rng seeded by [`calibration_seed`].
pub fn calibrate_magnitudes(
    baseline: &ModelBundle,
    val: &DomainDataset,
    ops: &[OpKind],
    ranges: &MagnitudeRanges,
    settings: &CalibrationSettings,
    seed: u64,
) -> Result<Vec<Calibrated>> {
    let samples = val.samples();
    if samples.is_empty() {
        return Err(Error::contract(
            "calibration needs a non-empty validation set",
        ));
    }
    let n = samples.len();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let clean: Vec<Vec<f64>> = samples.iter().map(|s| s.x.clone()).collect();
    let base = correct(baseline, &clean, &labels)?;
    calibrate_with(ops, settings, |kind, g, m| {
        let xs = samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut r = rng::rng(calibration_seed(seed, kind, g, i));
                apply_op_features(&s.x, &val.layout, kind, m, ranges, &mut r)
            })
            .collect::<Result<Vec<_>>>()?;
        let c = correct(baseline, &xs, &labels)?;
        Ok((base as f64 - c as f64) / n as f64)
    })
}
