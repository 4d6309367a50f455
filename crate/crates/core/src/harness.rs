//! Leave-one-domain-out experiment matrix: config, per-cell runs with
//! on-disk artifacts, resumption and report emission.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{
    augment_features, sample_composite, AugmentationPolicy, CalibrationSettings, MagnitudeRanges,
    OpKind,
};
use crate::data::{
    gen_glyph_domains, gen_two_moons_domains, import_datasets, leave_one_domain_out, load_idx,
    DomainDataset, GlyphParams, MoonsParams, Split, SplitSpec,
};
use crate::error::{Error, Result};
use crate::exec;
use crate::metrics::{self, Metric};
use crate::nn::{init_model, ModelBundle, ModelConfig};
use crate::probe::{pairwise_distances, proxy_a_distance, DistanceReport};
use crate::report::{
    render, CellFailure, CellKey, CellMetrics, MetricsReport, ReportFormat, TargetInfo,
};
use crate::rng::{self, derive_seed, stream};
use crate::tensor::Tensor;
use crate::train::{calibrate_magnitudes, dataset_features, evaluate, fit, Method, TrainConfig};

pub const THREADS_ENV: &str = "DASCL_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxDomain {
    pub images: PathBuf,
    pub labels: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum DatasetSpec {
    Glyph(GlyphParams),
    TwoMoons(MoonsParams),
    /// One domain per image/label file pair.
    Idx {
        domains: Vec<IdxDomain>,
        limit: Option<usize>,
    },
    /// A directory written by [`crate::data::export_datasets`].
    Manifest {
        dir: PathBuf,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Glyph(GlyphParams::default())
    }
}

/// Generate or load every domain of a dataset spec.
pub fn load_domains(spec: &DatasetSpec, seed: u64) -> Result<Vec<DomainDataset>> {
    let domains = match spec {
        DatasetSpec::Glyph(p) => gen_glyph_domains(p, seed)?,
        DatasetSpec::TwoMoons(p) => gen_two_moons_domains(p, seed)?,
        DatasetSpec::Idx { domains, limit } => domains
            .iter()
            .enumerate()
            .map(|(i, d)| load_idx(&d.images, &d.labels, i, *limit))
            .collect::<Result<_>>()?,
        DatasetSpec::Manifest { dir } => import_datasets(dir)?,
    };
    if domains.len() < 2 {
        return Err(Error::contract("an experiment needs at least 2 domains"));
    }
    for d in &domains {
        if d.layout != domains[0].layout {
            return Err(Error::Consistency(format!(
                "domain {} has a different layout",
                d.name
            )));
        }
    }
    Ok(domains)
}

/// Layer widths; input and class counts come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub proj_dim: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let c = ModelConfig::default();
        ModelShape {
            hidden_dims: c.hidden_dims,
            embed_dim: c.embed_dim,
            proj_dim: c.proj_dim,
        }
    }
}

impl ModelShape {
    pub fn for_domains(&self, domains: &[DomainDataset]) -> Result<ModelConfig> {
        let first = domains
            .first()
            .ok_or_else(|| Error::contract("no domains"))?;
        let cfg = ModelConfig {
            input_dim: first.input_dim(),
            hidden_dims: self.hidden_dims.clone(),
            embed_dim: self.embed_dim,
            proj_dim: self.proj_dim,
            num_classes: domains.iter().map(|d| d.num_classes).max().unwrap_or(2),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn default_methods() -> Vec<Method> {
    vec![Method::Erm, Method::Dascl]
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_val_fraction() -> f64 {
    0.2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: DatasetSpec,
    /// Seed for dataset generation, shared by every cell.
    #[serde(default)]
    pub data_seed: u64,
    /// Domain ids to withhold in turn; all domains when absent.
    #[serde(default)]
    pub targets: Option<Vec<usize>>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Template for every run; `method` and `seed` are set per cell.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub model: ModelShape,
    #[serde(default)]
    pub calibration: CalibrationSettings,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub metric: Metric,
    /// Enable the label-unsafe flips in the DASCL policy.
    #[serde(default)]
    pub include_unsafe: bool,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            dataset: DatasetSpec::default(),
            data_seed: 0,
            targets: None,
            methods: default_methods(),
            seeds: default_seeds(),
            train: TrainConfig::default(),
            model: ModelShape::default(),
            calibration: CalibrationSettings::default(),
            val_fraction: default_val_fraction(),
            metric: Metric::default(),
            include_unsafe: false,
            out_dir: out_dir.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::contract("at least one method is required"));
        }
        if self.seeds.is_empty() {
            return Err(Error::contract("at least one seed is required"));
        }
        let mut m = self.methods.clone();
        m.sort();
        m.dedup();
        let mut s = self.seeds.clone();
        s.sort();
        s.dedup();
        if m.len() != self.methods.len() || s.len() != self.seeds.len() {
            return Err(Error::contract("methods and seeds must not repeat"));
        }
        if matches!(&self.targets, Some(t) if t.is_empty()) {
            return Err(Error::contract("target list is empty"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::contract("val_fraction must lie in (0, 1)"));
        }
        self.calibration.validate()?;
        self.train.validate()
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_slice(bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&bytes).map_err(|e| match e {
            Error::Serde(source) => Error::Json {
                path: path.into(),
                source,
            },
            other => other,
        })
    }

    /// SHA-256 over the canonical JSON of everything but `out_dir`.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serialises");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("out_dir");
        }
        hex(&Sha256::digest(v.to_string().as_bytes()))
    }

    /// The DASCL policy before calibration.
    pub fn base_policy(&self) -> AugmentationPolicy {
        if self.include_unsafe {
            let mut p = self.train.policy.clone();
            for e in &mut p.entries {
                if !e.safe && e.probability == 0.0 {
                    e.probability = AugmentationPolicy::uncalibrated(true)
                        .entries
                        .iter()
                        .find(|u| u.kind == e.kind)
                        .map_or(0.5, |u| u.probability);
                }
            }
            p
        } else {
            self.train.policy.clone()
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Short stable identifier of one cell.
pub fn run_id(config_hash: &str, target: &str, method: Method, seed: u64) -> String {
    let digest = Sha256::digest(format!("{config_hash}/{target}/{method}/{seed}").as_bytes());
    hex(&digest[..6])
}

pub fn cell_dir(out: &Path, target: &str, method: Method, seed: u64) -> PathBuf {
    out.join(target).join(method.name()).join(seed.to_string())
}

pub const MODEL_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const DISTANCES_FILE: &str = "distances.json";
pub const POLICY_FILE: &str = "policy.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_metrics(path: &Path) -> Option<CellMetrics> {
    let bytes = fs::read(path).ok()?;
    serde_json::from_slice(&bytes).ok()
}

/// Copy of every sample with a composite drawn from `policy` per sample.
pub fn augmented_copy(
    d: &DomainDataset,
    policy: &AugmentationPolicy,
    ranges: &MagnitudeRanges,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    d.samples()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut r = rng::rng(derive_seed(
                seed,
                &[stream::PROBE_AUGMENT, d.domain_id as u64, i as u64],
            ));
            let c = sample_composite(policy, &mut r);
            augment_features(&s.x, &d.layout, &c, ranges)
        })
        .collect()
}

fn xs(d: &DomainDataset) -> Vec<Vec<f64>> {
    d.samples().iter().map(|s| s.x.clone()).collect()
}

/// Source-domain distances under `model`: pairwise between sources, and
/// each source against its augmented copy when `augmented` is given.
fn distances_under(
    model: &ModelBundle,
    sources: &[DomainDataset],
    augmented: Option<&[Vec<Vec<f64>>]>,
    seed: u64,
) -> Result<(crate::probe::DistanceMatrix, Vec<f64>)> {
    let ids: Vec<usize> = sources.iter().map(|d| d.domain_id).collect();
    let feats: Vec<Tensor> = sources
        .iter()
        .map(|d| dataset_features(model, &xs(d)))
        .collect::<Result<_>>()?;
    let matrix = pairwise_distances(&ids, &feats, seed)?;
    let aug = match augmented {
        None => Vec::new(),
        Some(sets) => {
            let jobs: Vec<usize> = (0..sources.len()).collect();
            exec::map(&jobs, |&i| {
                let f = dataset_features(model, &sets[i])?;
                proxy_a_distance(
                    &feats[i],
                    &f,
                    derive_seed(seed, &[stream::PROBE_AUGMENT, ids[i] as u64]),
                )
            })
            .into_iter()
            .collect::<Result<_>>()?
        }
    };
    Ok((matrix, aug))
}

/// Distances before (fresh initialisation with the run's seed) and after
/// training.
pub fn measure_distances(
    run_id: &str,
    model_cfg: &ModelConfig,
    trained: &ModelBundle,
    sources: &[DomainDataset],
    policy: Option<(&AugmentationPolicy, &MagnitudeRanges)>,
    seed: u64,
) -> Result<DistanceReport> {
    let augmented = policy
        .map(|(p, r)| {
            sources
                .iter()
                .map(|d| augmented_copy(d, p, r, seed))
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    let untrained = init_model(model_cfg, seed)?;
    let (before, aug_before) = distances_under(&untrained, sources, augmented.as_deref(), seed)?;
    let (after, aug_after) = distances_under(trained, sources, augmented.as_deref(), seed)?;
    Ok(DistanceReport {
        run_id: run_id.into(),
        sources_before: before,
        sources_after: after,
        augmented_before: aug_before,
        augmented_after: aug_after,
    })
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Everything one (target, seed) pair needs.
struct PairContext<'a> {
    cfg: &'a ExperimentConfig,
    hash: &'a str,
    model_cfg: &'a ModelConfig,
    domains: &'a [DomainDataset],
    target_id: usize,
    target: String,
    seed: u64,
}

struct Trained {
    method: Method,
    model: ModelBundle,
    val_acc: f64,
    epochs: usize,
}

impl PairContext<'_> {
    fn dir(&self, method: Method) -> PathBuf {
        cell_dir(&self.cfg.out_dir, &self.target, method, self.seed)
    }

    fn done(&self, method: Method) -> Option<CellMetrics> {
        read_metrics(&self.dir(method).join(METRICS_FILE)).filter(|m| m.config_hash == self.hash)
    }

    fn train_cfg(&self, method: Method, policy: AugmentationPolicy) -> TrainConfig {
        TrainConfig {
            method,
            seed: self.seed,
            policy,
            run_id: Some(run_id(self.hash, &self.target, method, self.seed)),
            ..self.cfg.train.clone()
        }
    }

    /// Train one method, write its model, history and distances.
    fn train(&self, method: Method, split: &Split, policy: AugmentationPolicy) -> Result<Trained> {
        let dir = self.dir(method);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let tcfg = self.train_cfg(method, policy);
        let (model, history) = fit(&tcfg, self.model_cfg, &split.train, &split.val)?;
        model.save(&dir.join(MODEL_FILE))?;
        history.save_csv(&dir.join(HISTORY_FILE))?;
        let aug = (method == Method::Dascl).then_some((&tcfg.policy, &tcfg.ranges));
        let dist = measure_distances(
            &tcfg.run_id(),
            self.model_cfg,
            &model,
            &split.train,
            aug,
            self.seed,
        )?;
        dist.save(&dir.join(DISTANCES_FILE))?;
        Ok(Trained {
            method,
            model,
            val_acc: history.rows.last().map_or(0.0, |r| r.val_acc),
            epochs: tcfg.epochs,
        })
    }

    /// The ERM model from disk when its cell completed, else freshly
    /// trained.
    fn erm(&self, split: &Split) -> Result<(ModelBundle, Option<Trained>)> {
        if self.done(Method::Erm).is_some() {
            if let Ok(m) = ModelBundle::load(&self.dir(Method::Erm).join(MODEL_FILE)) {
                return Ok((m, None));
            }
        }
        let t = self.train(Method::Erm, split, self.cfg.train.policy.clone())?;
        Ok((t.model.clone(), Some(t)))
    }

    fn run(&self) -> Vec<std::result::Result<CellMetrics, CellFailure>> {
        let wanted: Vec<Method> = self.cfg.methods.clone();
        let mut out = Vec::new();
        let mut todo = Vec::new();
        for &m in &wanted {
            match self.done(m) {
                Some(done) => out.push(Ok(done)),
                None => todo.push(m),
            }
        }
        if todo.is_empty() {
            return out;
        }
        match self.run_methods(&todo) {
            Ok(cells) => out.extend(cells.into_iter().map(Ok)),
            Err(e) => {
                log::warn!("{} seed {}: {e}", self.target, self.seed);
                out.extend(todo.iter().map(|&m| {
                    Err(CellFailure {
                        key: CellKey {
                            target: self.target.clone(),
                            method: m,
                            seed: self.seed,
                        },
                        error: e.to_string(),
                    })
                }));
            }
        }
        out
    }

    fn run_methods(&self, todo: &[Method]) -> Result<Vec<CellMetrics>> {
        let split = leave_one_domain_out(
            self.domains.to_vec(),
            &SplitSpec {
                target_domain_id: self.target_id,
                val_fraction: self.cfg.val_fraction,
                seed: self.seed,
            },
        )?;
        let mut trained = Vec::new();
        let (erm_model, erm_run) = self.erm(&split)?;
        if todo.contains(&Method::Erm) {
            trained.push(erm_run.expect("ERM cell was not complete"));
        }
        if todo.contains(&Method::Dascl) {
            let base = self.cfg.base_policy();
            let ops: Vec<OpKind> = base.entries.iter().map(|e| e.kind).collect();
            let calibrated = calibrate_magnitudes(
                &erm_model,
                &split.val,
                &ops,
                &self.cfg.train.ranges,
                &self.cfg.calibration,
                self.seed,
            )?;
            let policy = crate::augment::apply_calibration(&base, &calibrated);
            let dir = self.dir(Method::Dascl);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            policy.save(&dir.join(POLICY_FILE))?;
            trained.push(self.train(Method::Dascl, &split, policy)?);
        }

        // Final evaluation: the first and only reads of the target domain.
        let reads_before = split.target.reads();
        let target = split.target.samples();
        let refs: Vec<&[f64]> = target.iter().map(|s| s.x.as_slice()).collect();
        let labels: Vec<usize> = target.iter().map(|s| s.label).collect();
        trained
            .into_iter()
            .map(|t| {
                let logits = crate::train::predict(&t.model, &refs)?;
                let cell = CellMetrics {
                    run_id: run_id(self.hash, &self.target, t.method, self.seed),
                    config_hash: self.hash.into(),
                    target_id: self.target_id,
                    target: self.target.clone(),
                    method: t.method,
                    seed: self.seed,
                    metric: self.cfg.metric,
                    value: metrics::score(self.cfg.metric, &logits, &labels)?,
                    target_accuracy: metrics::accuracy(&logits, &labels)?,
                    source_val_accuracy: t.val_acc,
                    target_reads_before_eval: reads_before,
                    epochs: t.epochs,
                    finished_at: now(),
                };
                write_json(&self.dir(t.method).join(METRICS_FILE), &cell)?;
                log::info!(
                    "{} {} seed {}: {} {:.4}",
                    cell.target,
                    cell.method,
                    cell.seed,
                    cell.metric,
                    cell.value
                );
                Ok(cell)
            })
            .collect()
    }
}

/// Parallel cell budget from [`THREADS_ENV`]; 1 when unset or invalid.
pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n >= 1)
        .unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub report: MetricsReport,
    pub cells: Vec<CellMetrics>,
    /// Cells taken from existing artifacts.
    pub reused: usize,
}

/// Run every (target, seed) pair with `threads` workers, then aggregate.
pub fn run_experiment_with(
    cfg: &ExperimentConfig,
    domains: &[DomainDataset],
    threads: usize,
) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let hash = cfg.hash();
    let model_cfg = cfg.model.for_domains(domains)?;
    let target_ids: Vec<usize> = match &cfg.targets {
        Some(t) => t.clone(),
        None => domains.iter().map(|d| d.domain_id).collect(),
    };
    let mut targets = Vec::new();
    for &id in &target_ids {
        let d = domains
            .iter()
            .find(|d| d.domain_id == id)
            .ok_or_else(|| Error::contract(format!("unknown target domain {id}")))?;
        targets.push(TargetInfo {
            domain_id: id,
            name: d.name.clone(),
        });
    }
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let existing: usize = targets
        .iter()
        .flat_map(|t| cfg.seeds.iter().map(move |&s| (t, s)))
        .flat_map(|(t, s)| {
            cfg.methods
                .iter()
                .map(move |&m| cell_dir(&cfg.out_dir, &t.name, m, s))
        })
        .filter(|d| read_metrics(&d.join(METRICS_FILE)).is_some_and(|m| m.config_hash == hash))
        .count();

    let jobs: Vec<(usize, u64)> = (0..targets.len())
        .flat_map(|t| cfg.seeds.iter().map(move |&s| (t, s)))
        .collect();
    let results = exec::with_threads(threads, || {
        exec::map(&jobs, |&(ti, seed)| {
            PairContext {
                cfg,
                hash: &hash,
                model_cfg: &model_cfg,
                domains,
                target_id: targets[ti].domain_id,
                target: targets[ti].name.clone(),
                seed,
            }
            .run()
        })
    });
    let mut cells = Vec::new();
    let mut failures = Vec::new();
    for r in results.into_iter().flatten() {
        match r {
            Ok(c) => cells.push(c),
            Err(f) => failures.push(f),
        }
    }
    let report = MetricsReport::aggregate(
        cfg.metric,
        &hash,
        &cfg.methods,
        &targets,
        &cfg.seeds,
        &cells,
        failures,
    );
    for format in ReportFormat::ALL {
        let path = cfg.out_dir.join(format!("report.{}", format.extension()));
        fs::write(&path, render(&report, format)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(ExperimentOutcome {
        report,
        cells,
        reused: existing,
    })
}

/// Load the configured domains and run the matrix with the thread budget
/// from the environment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let domains = load_domains(&cfg.dataset, cfg.data_seed)?;
    run_experiment_with(cfg, &domains, threads_from_env())
}

/// Evaluate a stored checkpoint on a dataset.
pub fn evaluate_checkpoint(path: &Path, dataset: &DomainDataset, metric: Metric) -> Result<f64> {
    evaluate(&ModelBundle::load(path)?, dataset, metric)
}
