//! Multi-domain datasets: procedural generators, IDX ingestion,
//! leave-one-domain-out splitting and a manifest + blob export format.

use std::fs;
use std::io::Read;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::{rotate, rotate_point, translate, Image};
use crate::error::{Error, Result};
use crate::rng::{self, derive_seed, stream};

/// How a flat feature vector is to be interpreted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Layout {
    Image {
        height: usize,
        width: usize,
    },
    /// 2-D points; rotations act about `center`.
    Points {
        center: [f64; 2],
    },
}

impl Layout {
    pub fn input_dim(&self) -> usize {
        match *self {
            Layout::Image { height, width } => height * width,
            Layout::Points { .. } => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub label: usize,
}

/// Samples from one domain. Reads of the sample list are counted so tests
/// can check that a withheld domain is never touched early.
#[derive(Debug)]
pub struct DomainDataset {
    pub domain_id: usize,
    pub name: String,
    pub layout: Layout,
    pub num_classes: usize,
    samples: Vec<Sample>,
    reads: Arc<AtomicUsize>,
}

impl Clone for DomainDataset {
    /// The clone starts with its own zeroed read counter.
    fn clone(&self) -> Self {
        DomainDataset {
            domain_id: self.domain_id,
            name: self.name.clone(),
            layout: self.layout,
            num_classes: self.num_classes,
            samples: self.samples.clone(),
            reads: Arc::default(),
        }
    }
}

impl PartialEq for DomainDataset {
    fn eq(&self, other: &Self) -> bool {
        self.domain_id == other.domain_id
            && self.name == other.name
            && self.layout == other.layout
            && self.num_classes == other.num_classes
            && self.samples == other.samples
    }
}

impl DomainDataset {
    pub fn new(
        domain_id: usize,
        name: impl Into<String>,
        layout: Layout,
        num_classes: usize,
        samples: Vec<Sample>,
    ) -> Result<Self> {
        let ds = DomainDataset {
            domain_id,
            name: name.into(),
            layout,
            num_classes,
            samples,
            reads: Arc::default(),
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::contract(format!(
                "domain {} has no samples",
                self.name
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::contract("a dataset needs at least 2 classes"));
        }
        let dim = self.layout.input_dim();
        for (i, s) in self.samples.iter().enumerate() {
            if s.x.len() != dim {
                return Err(Error::Consistency(format!(
                    "sample {i} of {} has {} features, layout needs {dim}",
                    self.name,
                    s.x.len()
                )));
            }
            if s.label >= self.num_classes {
                return Err(Error::Index {
                    index: s.label,
                    len: self.num_classes,
                });
            }
        }
        Ok(())
    }

    pub fn samples(&self) -> &[Sample] {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Sample> {
        self.reads.fetch_add(1, Ordering::Relaxed);
        self.samples
    }

    /// How many times the samples have been accessed.
    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.layout.input_dim()
    }

    /// Same samples under a different id and name.
    pub fn relabelled(&self, domain_id: usize, name: impl Into<String>) -> Self {
        DomainDataset {
            domain_id,
            name: name.into(),
            ..self.clone()
        }
    }
}

// ---------------------------------------------------------------------------
// Glyph domains

#[derive(Clone, Copy, Debug)]
enum Stroke {
    Line([f64; 2], [f64; 2]),
    /// Centre, radius, start and end angle in degrees (y down).
    Arc([f64; 2], f64, f64, f64),
}

/// Eight stroke templates in unit coordinates (x right, y down).
fn template(class: usize) -> Vec<Stroke> {
    use Stroke::*;
    match class {
        0 => vec![Arc([0.5, 0.5], 0.3, 0.0, 360.0)],
        1 => vec![Line([0.5, 0.15], [0.5, 0.85])],
        2 => vec![
            Line([0.3, 0.15], [0.3, 0.85]),
            Line([0.3, 0.85], [0.75, 0.85]),
        ],
        3 => vec![Line([0.2, 0.2], [0.8, 0.2]), Line([0.5, 0.2], [0.5, 0.85])],
        4 => vec![Line([0.2, 0.2], [0.8, 0.8]), Line([0.8, 0.2], [0.2, 0.8])],
        5 => vec![Arc([0.55, 0.5], 0.3, 60.0, 300.0)],
        6 => vec![Line([0.2, 0.2], [0.8, 0.2]), Line([0.8, 0.2], [0.35, 0.85])],
        7 => vec![
            Line([0.2, 0.35], [0.8, 0.35]),
            Line([0.2, 0.65], [0.8, 0.65]),
        ],
        _ => unreachable!("validated class count"),
    }
}

pub const MAX_GLYPH_CLASSES: usize = 8;

fn dist_to_stroke(p: [f64; 2], s: &Stroke) -> f64 {
    match *s {
        Stroke::Line(a, b) => {
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let len2 = dx * dx + dy * dy;
            let t = (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0);
            let (qx, qy) = (a[0] + t * dx, a[1] + t * dy);
            ((p[0] - qx).powi(2) + (p[1] - qy).powi(2)).sqrt()
        }
        Stroke::Arc(c, r, start, end) => {
            let (vx, vy) = (p[0] - c[0], p[1] - c[1]);
            let mut ang = vy.atan2(vx).to_degrees();
            if ang < 0.0 {
                ang += 360.0;
            }
            if ang >= start && ang <= end {
                ((vx * vx + vy * vy).sqrt() - r).abs()
            } else {
                [start, end]
                    .iter()
                    .map(|a| {
                        let (s, co) = a.to_radians().sin_cos();
                        let (ex, ey) = (c[0] + r * co, c[1] + r * s);
                        ((p[0] - ex).powi(2) + (p[1] - ey).powi(2)).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            }
        }
    }
}

/// Anti-aliased rendering of a template; strokes are about two pixels wide.
pub fn render_template(class: usize, size: usize) -> Result<Image> {
    if class >= MAX_GLYPH_CLASSES {
        return Err(Error::Index {
            index: class,
            len: MAX_GLYPH_CLASSES,
        });
    }
    let strokes = template(class);
    let mut px = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let p = [
                (c as f64 + 0.5) / size as f64,
                (r as f64 + 0.5) / size as f64,
            ];
            let d = strokes
                .iter()
                .map(|s| dist_to_stroke(p, s))
                .fold(f64::INFINITY, f64::min)
                * size as f64;
            px.push((1.5 - d).clamp(0.0, 1.0));
        }
    }
    Image::new(size, size, px)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlyphParams {
    /// Rotation in degrees applied to every sample of each domain.
    pub rotations: Vec<f64>,
    pub n_per_class: usize,
    pub num_classes: usize,
    #[serde(default = "default_glyph_size")]
    pub size: usize,
}

fn default_glyph_size() -> usize {
    16
}

impl Default for GlyphParams {
    fn default() -> Self {
        GlyphParams {
            rotations: vec![0.0, 15.0, 30.0, 45.0],
            n_per_class: 200,
            num_classes: 5,
            size: 16,
        }
    }
}

/// A template with its per-sample jitter: a whole-pixel shift of up to one
/// pixel per axis, a global stroke intensity in [0.7, 1] and small
/// per-pixel intensity noise on the stroke.
fn jittered_glyph(base: &Image, seed: u64) -> Result<Image> {
    let mut r = rng::rng(seed);
    let dx = r.random_range(-1i32..=1) as f64;
    let dy = r.random_range(-1i32..=1) as f64;
    let intensity = r.random_range(0.7..=1.0);
    let noise = Normal::new(0.0, 0.05).expect("valid stddev");
    let shifted = translate(base, dx, dy);
    let px = shifted
        .pixels()
        .iter()
        .map(|&v| {
            if v > 0.0 {
                v * intensity + noise.sample(&mut r)
            } else {
                0.0
            }
        })
        .collect();
    Image::new(base.height(), base.width(), px)
}

/// One glyph domain. Images depend only on `(rotation, params, seed)`,
/// never on `domain_id`.
pub fn gen_glyph_domain(
    rotation: f64,
    domain_id: usize,
    params: &GlyphParams,
    seed: u64,
) -> Result<DomainDataset> {
    if params.num_classes < 2 || params.num_classes > MAX_GLYPH_CLASSES {
        return Err(Error::contract(format!(
            "glyph classes must be in 2..={MAX_GLYPH_CLASSES}, got {}",
            params.num_classes
        )));
    }
    if params.n_per_class == 0 || params.size < 4 {
        return Err(Error::contract(
            "glyph domains need n_per_class >= 1 and size >= 4",
        ));
    }
    let mut samples = Vec::with_capacity(params.num_classes * params.n_per_class);
    for class in 0..params.num_classes {
        let base = render_template(class, params.size)?;
        for i in 0..params.n_per_class {
            let s = derive_seed(
                seed,
                &[stream::DATA, rotation.to_bits(), class as u64, i as u64],
            );
            let glyph = rotate(&jittered_glyph(&base, s)?, rotation);
            samples.push(Sample {
                x: glyph.into_pixels(),
                label: class,
            });
        }
    }
    DomainDataset::new(
        domain_id,
        format!("rot{}", rotation),
        Layout::Image {
            height: params.size,
            width: params.size,
        },
        params.num_classes,
        samples,
    )
}

pub fn gen_glyph_domains(params: &GlyphParams, seed: u64) -> Result<Vec<DomainDataset>> {
    check_distinct(&params.rotations)?;
    params
        .rotations
        .iter()
        .enumerate()
        .map(|(id, &r)| gen_glyph_domain(r, id, params, seed))
        .collect()
}

fn check_distinct(rotations: &[f64]) -> Result<()> {
    if rotations.is_empty() {
        return Err(Error::contract("no domain rotations given"));
    }
    for (i, r) in rotations.iter().enumerate() {
        if !r.is_finite() || rotations[..i].contains(r) {
            return Err(Error::contract(format!(
                "rotation {r} repeated or not finite"
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Two moons

/// Centre of the two-moons point cloud; domain rotations act about it.
pub const MOONS_CENTER: [f64; 2] = [0.5, 0.25];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoonsParams {
    pub rotations: Vec<f64>,
    /// Total points per domain; must be even.
    pub n: usize,
    pub noise_std: f64,
}

/// Points on the two arcs before noise and rotation: moon 0 is the upper
/// unit half-circle, moon 1 the lower one shifted by (1, 0.5).
pub fn moons_base(n: usize) -> Vec<Sample> {
    let half = n / 2;
    let mut out = Vec::with_capacity(n);
    for moon in 0..2 {
        for k in 0..half {
            let t = if half > 1 {
                std::f64::consts::PI * k as f64 / (half - 1) as f64
            } else {
                0.0
            };
            let (s, c) = t.sin_cos();
            let x = if moon == 0 {
                vec![c, s]
            } else {
                vec![1.0 - c, 0.5 - s]
            };
            out.push(Sample { x, label: moon });
        }
    }
    out
}

/// Noise is shared by all domains (it depends only on `seed` and the point
/// index), so domains differ by their rotation alone.
pub fn gen_two_moons_domains(params: &MoonsParams, seed: u64) -> Result<Vec<DomainDataset>> {
    if params.n < 2 || !params.n.is_multiple_of(2) {
        return Err(Error::contract(format!(
            "two moons needs an even n >= 2, got {}",
            params.n
        )));
    }
    if !(params.noise_std >= 0.0 && params.noise_std.is_finite()) {
        return Err(Error::contract("noise_std must be >= 0"));
    }
    check_distinct(&params.rotations)?;
    let mut r = rng::rng(derive_seed(seed, &[stream::DATA]));
    let noisy: Vec<Sample> = moons_base(params.n)
        .into_iter()
        .map(|s| {
            let x =
                s.x.iter()
                    .map(|&v| {
                        let z: f64 = rand_distr::StandardNormal.sample(&mut r);
                        v + params.noise_std * z
                    })
                    .collect();
            Sample { x, label: s.label }
        })
        .collect();
    params
        .rotations
        .iter()
        .enumerate()
        .map(|(id, &deg)| {
            let samples = noisy
                .iter()
                .map(|s| Sample {
                    x: rotate_point(&s.x, MOONS_CENTER, deg),
                    label: s.label,
                })
                .collect();
            DomainDataset::new(
                id,
                format!("rot{deg}"),
                Layout::Points {
                    center: MOONS_CENTER,
                },
                2,
                samples,
            )
        })
        .collect()
}

// ---------------------------------------------------------------------------
// IDX

pub const IDX_IMAGES_MAGIC: [u8; 4] = [0x00, 0x00, 0x08, 0x03];
pub const IDX_LABELS_MAGIC: [u8; 4] = [0x00, 0x00, 0x08, 0x01];

fn read_exact_or(path: &Path, r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::io(path, e))
}

fn read_u32(path: &Path, r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(path, r, &mut b)?;
    Ok(u32::from_be_bytes(b))
}

fn check_magic(path: &Path, r: &mut impl Read, want: [u8; 4]) -> Result<()> {
    let mut magic = [0u8; 4];
    read_exact_or(path, r, &mut magic)?;
    if magic != want {
        return Err(Error::Format(format!(
            "{}: bad IDX magic {magic:02x?}, expected {want:02x?}",
            path.display()
        )));
    }
    Ok(())
}

/// Read an unsigned-byte IDX image file and its label file. Pixels are
/// scaled to `[0,1]`; at most `limit` samples are kept.
pub fn load_idx(
    images_path: &Path,
    labels_path: &Path,
    domain_id: usize,
    limit: Option<usize>,
) -> Result<DomainDataset> {
    let open = |p: &Path| {
        fs::File::open(p)
            .map(std::io::BufReader::new)
            .map_err(|e| Error::io(p, e))
    };
    let mut img = open(images_path)?;
    let mut lab = open(labels_path)?;
    check_magic(images_path, &mut img, IDX_IMAGES_MAGIC)?;
    check_magic(labels_path, &mut lab, IDX_LABELS_MAGIC)?;
    let n_img = read_u32(images_path, &mut img)? as usize;
    let rows = read_u32(images_path, &mut img)? as usize;
    let cols = read_u32(images_path, &mut img)? as usize;
    let n_lab = read_u32(labels_path, &mut lab)? as usize;
    if n_img != n_lab {
        return Err(Error::Consistency(format!(
            "{} declares {n_img} images but {} declares {n_lab} labels",
            images_path.display(),
            labels_path.display()
        )));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::Format(format!(
            "{}: zero image size",
            images_path.display()
        )));
    }
    let n = limit.map_or(n_img, |l| l.min(n_img));
    let mut labels = vec![0u8; n];
    read_exact_or(labels_path, &mut lab, &mut labels)?;
    let mut px = vec![0u8; rows * cols];
    let mut samples = Vec::with_capacity(n);
    for &label in &labels {
        read_exact_or(images_path, &mut img, &mut px)?;
        samples.push(Sample {
            x: px.iter().map(|&b| b as f64 / 255.0).collect(),
            label: label as usize,
        });
    }
    let num_classes = labels
        .iter()
        .map(|&l| l as usize + 1)
        .max()
        .unwrap_or(0)
        .max(2);
    let name = images_path.file_stem().map_or_else(
        || format!("idx{domain_id}"),
        |s| s.to_string_lossy().into_owned(),
    );
    DomainDataset::new(
        domain_id,
        name,
        Layout::Image {
            height: rows,
            width: cols,
        },
        num_classes,
        samples,
    )
}

// ---------------------------------------------------------------------------
// Leave-one-domain-out

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub target_domain_id: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

/// Domain id given to the pooled source-validation set.
pub const VALIDATION_DOMAIN_ID: usize = usize::MAX;

#[derive(Debug)]
pub struct Split {
    pub train: Vec<DomainDataset>,
    pub val: DomainDataset,
    pub target: DomainDataset,
}

/// Withhold the target domain untouched; split every source domain,
/// stratified by label, into a training part and a share of the pooled
/// validation set.
pub fn leave_one_domain_out(domains: Vec<DomainDataset>, spec: &SplitSpec) -> Result<Split> {
    if domains.len() < 2 {
        return Err(Error::contract(
            "leave-one-domain-out needs at least 2 domains",
        ));
    }
    if !(spec.val_fraction > 0.0 && spec.val_fraction < 1.0) {
        return Err(Error::contract(format!(
            "validation fraction {} outside (0, 1)",
            spec.val_fraction
        )));
    }
    let pos = domains
        .iter()
        .position(|d| d.domain_id == spec.target_domain_id)
        .ok_or_else(|| {
            Error::contract(format!("unknown target domain {}", spec.target_domain_id))
        })?;
    let mut domains = domains;
    let target = domains.remove(pos);
    let layout = domains[0].layout;
    let num_classes = domains.iter().map(|d| d.num_classes).max().unwrap_or(2);

    let mut train = Vec::new();
    let mut val = Vec::new();
    for d in domains {
        let (tr, va) = stratified_split(&d, spec)?;
        val.extend(va);
        let name = d.name.clone();
        train.push(DomainDataset::new(
            d.domain_id,
            name,
            d.layout,
            d.num_classes,
            tr,
        )?);
    }
    let val = DomainDataset::new(VALIDATION_DOMAIN_ID, "source-val", layout, num_classes, val)?;
    Ok(Split { train, val, target })
}

/// Indices into `d` assigned to (train, validation).
pub fn stratified_indices(d: &DomainDataset, spec: &SplitSpec) -> (Vec<usize>, Vec<usize>) {
    let samples = d.samples();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in 0..d.num_classes {
        let mut idx: Vec<usize> = (0..samples.len())
            .filter(|&i| samples[i].label == class)
            .collect();
        if idx.is_empty() {
            continue;
        }
        let mut r = rng::rng(derive_seed(
            spec.seed,
            &[stream::SPLIT, d.domain_id as u64, class as u64],
        ));
        idx.shuffle(&mut r);
        let k = (spec.val_fraction * idx.len() as f64).round() as usize;
        val.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn stratified_split(d: &DomainDataset, spec: &SplitSpec) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let (tr, va) = stratified_indices(d, spec);
    if tr.is_empty() || va.is_empty() {
        return Err(Error::contract(format!(
            "domain {} too small for a {} validation split",
            d.name, spec.val_fraction
        )));
    }
    let s = d.samples();
    Ok((
        tr.iter().map(|&i| s[i].clone()).collect(),
        va.iter().map(|&i| s[i].clone()).collect(),
    ))
}

// ---------------------------------------------------------------------------
// Manifest + blob export

pub const MANIFEST_FORMAT: &str = "dascl-data";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "data.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub domains: Vec<ManifestDomain>,
}

/// One domain's slice of the blob: `count × dim` little-endian f64 values
/// starting at byte `offset`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestDomain {
    pub domain_id: usize,
    pub name: String,
    pub layout: Layout,
    pub num_classes: usize,
    pub count: usize,
    pub dim: usize,
    pub offset: u64,
    pub labels: Vec<usize>,
}

pub fn export_datasets(domains: &[DomainDataset], dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for d in domains {
        let offset = blob.len() as u64;
        let samples = d.samples();
        for s in samples {
            for v in &s.x {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        entries.push(ManifestDomain {
            domain_id: d.domain_id,
            name: d.name.clone(),
            layout: d.layout,
            num_classes: d.num_classes,
            count: samples.len(),
            dim: d.input_dim(),
            offset,
            labels: samples.iter().map(|s| s.label).collect(),
        });
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        blob: BLOB_FILE.into(),
        domains: entries,
    };
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
    let man_path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(&manifest)?;
    fs::write(&man_path, json).map_err(|e| Error::io(&man_path, e))?;
    Ok(manifest)
}

pub fn import_datasets(dir: &Path) -> Result<Vec<DomainDataset>> {
    let man_path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&man_path).map_err(|e| Error::io(&man_path, e))?;
    let manifest: Manifest = serde_json::from_slice(&bytes).map_err(|e| Error::Json {
        path: man_path.clone(),
        source: e,
    })?;
    if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
        return Err(Error::Format(format!(
            "unsupported data manifest {} v{}",
            manifest.format, manifest.version
        )));
    }
    let blob_path = dir.join(&manifest.blob);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    manifest
        .domains
        .into_iter()
        .map(|m| {
            if m.labels.len() != m.count || m.dim != m.layout.input_dim() {
                return Err(Error::Consistency(format!(
                    "manifest entry {} is inconsistent",
                    m.name
                )));
            }
            let start = m.offset as usize;
            let end = start + m.count * m.dim * 8;
            let raw = blob.get(start..end).ok_or_else(|| {
                Error::Consistency(format!("blob too short for domain {}", m.name))
            })?;
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            let samples = values
                .chunks_exact(m.dim)
                .zip(&m.labels)
                .map(|(x, &label)| Sample {
                    x: x.to_vec(),
                    label,
                })
                .collect();
            DomainDataset::new(m.domain_id, m.name, m.layout, m.num_classes, samples)
        })
        .collect()
}
