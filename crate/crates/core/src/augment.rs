//! Image augmentation operators, the stochastic policy built from them and
//! the grid search that picks each operator's largest acceptable magnitude.
//!
//! Every operator takes a normalised magnitude `m ∈ [0,1]` that is mapped to
//! a physical range by [`MagnitudeRanges`]. At `m = 0` every operator except
//! the two flips returns its input unchanged.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng as _, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Layout;
use crate::error::{Error, Result};
use crate::exec;
use crate::rng::{self, Rng};

/// Greyscale image with pixels in `[0,1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::InvalidShape(format!(
                "{height}x{width} image with {} pixels",
                pixels.len()
            )));
        }
        Ok(Image {
            height,
            width,
            pixels: pixels.into_iter().map(|p| p.clamp(0.0, 1.0)).collect(),
        })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0.0; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut pixels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                pixels.push(f(r, c).clamp(0.0, 1.0));
            }
        }
        Image {
            height,
            width,
            pixels,
        }
    }

    /// Bilinear sample at fractional `(x, y)` = (column, row); outside the
    /// grid reads as 0.
    fn sample(&self, x: f64, y: f64) -> f64 {
        let (x, y) = (snap(x), snap(y));
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let px = |c: f64, r: f64| -> f64 {
            if c < 0.0 || r < 0.0 || c >= self.width as f64 || r >= self.height as f64 {
                0.0
            } else {
                self.get(r as usize, c as usize)
            }
        };
        let mut v = 0.0;
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                let w = wx * wy;
                if w != 0.0 {
                    v += w * px(x0 + dx, y0 + dy);
                }
            }
        }
        v
    }

    fn center(&self) -> (f64, f64) {
        (
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
        )
    }

    /// Inverse-mapped resampling: output pixel `(x, y)` reads the source at
    /// `map(x - cx, y - cy) + (cx, cy)`.
    fn warp(&self, map: impl Fn(f64, f64) -> (f64, f64)) -> Image {
        let (cx, cy) = self.center();
        Image::from_fn(self.height, self.width, |r, c| {
            let (sx, sy) = map(c as f64 - cx, r as f64 - cy);
            self.sample(sx + cx, sy + cy)
        })
    }
}

/// Coordinates within this distance of an integer are treated as exact, so
/// quarter-turn rotations land on the lattice despite `cos(π/2) ≠ 0` in f64.
const SNAP_TOL: f64 = 1e-9;

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP_TOL {
        r
    } else {
        v
    }
}

/// Rotate counter-clockwise (as displayed, rows growing downwards) by
/// `degrees` about the image centre.
pub fn rotate(img: &Image, degrees: f64) -> Image {
    if degrees == 0.0 {
        return img.clone();
    }
    let (s, c) = degrees.to_radians().sin_cos();
    img.warp(|x, y| (c * x - s * y, s * x + c * y))
}

/// Shift content right by `dx` and down by `dy` pixels.
pub fn translate(img: &Image, dx: f64, dy: f64) -> Image {
    if dx == 0.0 && dy == 0.0 {
        return img.clone();
    }
    img.warp(|x, y| (x - dx, y - dy))
}

/// Zoom about the centre by `factor` (> 1 enlarges).
pub fn zoom(img: &Image, factor: f64) -> Image {
    if factor == 1.0 {
        return img.clone();
    }
    img.warp(|x, y| (x / factor, y / factor))
}

pub fn hflip(img: &Image) -> Image {
    Image::from_fn(img.height, img.width, |r, c| img.get(r, img.width - 1 - c))
}

pub fn vflip(img: &Image) -> Image {
    Image::from_fn(img.height, img.width, |r, c| img.get(img.height - 1 - r, c))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Rotate,
    Translate,
    Scale,
    GaussianNoise,
    Brightness,
    Contrast,
    Cutout,
    Hflip,
    Vflip,
}

impl OpKind {
    pub const ALL: [OpKind; 9] = [
        OpKind::Rotate,
        OpKind::Translate,
        OpKind::Scale,
        OpKind::GaussianNoise,
        OpKind::Brightness,
        OpKind::Contrast,
        OpKind::Cutout,
        OpKind::Hflip,
        OpKind::Vflip,
    ];

    /// Flips ignore the magnitude and are never calibrated.
    pub fn is_binary(self) -> bool {
        matches!(self, OpKind::Hflip | OpKind::Vflip)
    }

    /// Whether the op preserves labels of digit-like glyphs at small
    /// magnitudes. Flips turn some glyphs into other glyphs.
    pub fn safe_by_default(self) -> bool {
        !self.is_binary()
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Rotate => "rotate",
            OpKind::Translate => "translate",
            OpKind::Scale => "scale",
            OpKind::GaussianNoise => "gaussian_noise",
            OpKind::Brightness => "brightness",
            OpKind::Contrast => "contrast",
            OpKind::Cutout => "cutout",
            OpKind::Hflip => "hflip",
            OpKind::Vflip => "vflip",
        }
    }

    fn index(self) -> u64 {
        OpKind::ALL.iter().position(|&k| k == self).unwrap() as u64
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Format(format!("unknown augmentation kind {s:?}")))
    }
}

/// Physical extent of each op at magnitude 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MagnitudeRanges {
    pub rotate_degrees: f64,
    /// Fraction of the width shifted along each axis.
    pub translate_frac: f64,
    /// Zoom factor is `1 ± m·scale_frac`.
    pub scale_frac: f64,
    pub noise_std: f64,
    pub brightness_shift: f64,
    /// Contrast factor is `1 ± m·contrast_frac`.
    pub contrast_frac: f64,
    /// Cutout side as a fraction of the width.
    pub cutout_frac: f64,
}

impl Default for MagnitudeRanges {
    fn default() -> Self {
        MagnitudeRanges {
            rotate_degrees: 30.0,
            translate_frac: 0.25,
            scale_frac: 0.3,
            noise_std: 0.3,
            brightness_shift: 0.4,
            contrast_frac: 0.6,
            cutout_frac: 0.5,
        }
    }
}

fn check_magnitude(m: f64) -> Result<()> {
    if (0.0..=1.0).contains(&m) {
        Ok(())
    } else {
        Err(Error::contract(format!("magnitude {m} outside [0, 1]")))
    }
}

fn sign(rng: &mut Rng) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

/// Apply one op at magnitude `m`. Signed ops (rotation direction, shift
/// direction, zoom in/out, brighter/darker, more/less contrast) draw their
/// sign from `rng`, as do noise values and the cutout position.
pub fn apply_op(
    img: &Image,
    kind: OpKind,
    m: f64,
    ranges: &MagnitudeRanges,
    rng: &mut Rng,
) -> Result<Image> {
    check_magnitude(m)?;
    match kind {
        OpKind::Hflip => return Ok(hflip(img)),
        OpKind::Vflip => return Ok(vflip(img)),
        _ if m == 0.0 => return Ok(img.clone()),
        _ => {}
    }
    let out = match kind {
        OpKind::Rotate => rotate(img, sign(rng) * m * ranges.rotate_degrees),
        OpKind::Translate => {
            let shift = m * ranges.translate_frac * img.width as f64;
            let (sx, sy) = (sign(rng), sign(rng));
            translate(img, sx * shift, sy * shift)
        }
        OpKind::Scale => zoom(img, 1.0 + sign(rng) * m * ranges.scale_frac),
        OpKind::GaussianNoise => {
            let std = m * ranges.noise_std;
            let noise: Vec<f64> = (0..img.pixels.len())
                .map(|_| StandardNormal.sample(rng))
                .collect::<Vec<f64>>();
            Image::from_fn(img.height, img.width, |r, c| {
                let i = r * img.width + c;
                img.pixels[i] + std * noise[i]
            })
        }
        OpKind::Brightness => {
            let shift = sign(rng) * m * ranges.brightness_shift;
            Image::from_fn(img.height, img.width, |r, c| img.get(r, c) + shift)
        }
        OpKind::Contrast => {
            let factor = 1.0 + sign(rng) * m * ranges.contrast_frac;
            let mean = img.pixels.iter().sum::<f64>() / img.pixels.len() as f64;
            Image::from_fn(img.height, img.width, |r, c| {
                (img.get(r, c) - mean) * factor + mean
            })
        }
        OpKind::Cutout => {
            let side = (m * ranges.cutout_frac * img.width as f64).round() as usize;
            if side == 0 {
                return Ok(img.clone());
            }
            let side_r = side.min(img.height);
            let side_c = side.min(img.width);
            let top = rng.random_range(0..=img.height - side_r);
            let left = rng.random_range(0..=img.width - side_c);
            Image::from_fn(img.height, img.width, |r, c| {
                let inside = (top..top + side_r).contains(&r) && (left..left + side_c).contains(&c);
                if inside {
                    0.0
                } else {
                    img.get(r, c)
                }
            })
        }
        OpKind::Hflip | OpKind::Vflip => unreachable!(),
    };
    Ok(out)
}

/// Apply one op to a 2-D point. Only rotation (about `center`) and Gaussian
/// noise act on coordinates; every other kind is the identity.
pub fn apply_point_op(
    point: &[f64],
    center: [f64; 2],
    kind: OpKind,
    m: f64,
    ranges: &MagnitudeRanges,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    check_magnitude(m)?;
    if point.len() != 2 {
        return Err(Error::InvalidShape(format!(
            "expected a 2-D point, got {}",
            point.len()
        )));
    }
    if m == 0.0 {
        return Ok(point.to_vec());
    }
    Ok(match kind {
        OpKind::Rotate => rotate_point(point, center, sign(rng) * m * ranges.rotate_degrees),
        OpKind::GaussianNoise => {
            let std = m * ranges.noise_std;
            point
                .iter()
                .map(|&v| {
                    v + {
                        let z: f64 = StandardNormal.sample(rng);
                        std * z
                    }
                })
                .collect::<Vec<f64>>()
        }
        _ => point.to_vec(),
    })
}

/// Counter-clockwise rotation in the usual y-up plane.
pub fn rotate_point(p: &[f64], center: [f64; 2], degrees: f64) -> Vec<f64> {
    if degrees == 0.0 {
        return p.to_vec();
    }
    let (s, c) = degrees.to_radians().sin_cos();
    let (x, y) = (p[0] - center[0], p[1] - center[1]);
    vec![center[0] + c * x - s * y, center[1] + s * x + c * y]
}

/// One entry of a policy: an op, its application probability and its
/// maximum magnitude.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyEntry {
    pub kind: OpKind,
    pub probability: f64,
    pub magnitude: f64,
    pub safe: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub entries: Vec<PolicyEntry>,
}

/// Application probability given to every op when none is specified.
pub const DEFAULT_PROBABILITY: f64 = 0.5;

impl AugmentationPolicy {
    /// Every safe op with the default probability and full magnitude, ready
    /// for calibration. Flips are appended when `include_unsafe` is set.
    pub fn uncalibrated(include_unsafe: bool) -> Self {
        AugmentationPolicy {
            entries: OpKind::ALL
                .into_iter()
                .filter(|k| include_unsafe || k.safe_by_default())
                .map(|kind| PolicyEntry {
                    kind,
                    probability: DEFAULT_PROBABILITY,
                    magnitude: 1.0,
                    safe: kind.safe_by_default(),
                })
                .collect(),
        }
    }

    /// Same ops, all with probability 0: sampling always yields the identity.
    pub fn disabled(&self) -> Self {
        AugmentationPolicy {
            entries: self
                .entries
                .iter()
                .map(|e| PolicyEntry {
                    probability: 0.0,
                    ..*e
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.entries.iter().enumerate() {
            if !(0.0..=1.0).contains(&e.probability) || !(0.0..=1.0).contains(&e.magnitude) {
                return Err(Error::contract(format!(
                    "policy entry {} has probability {} magnitude {}",
                    e.kind, e.probability, e.magnitude
                )));
            }
            if self.entries[..i].iter().any(|o| o.kind == e.kind) {
                return Err(Error::contract(format!("policy lists {} twice", e.kind)));
            }
        }
        Ok(())
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let policy: AugmentationPolicy = serde_json::from_slice(bytes)?;
        policy.validate()?;
        Ok(policy)
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

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositeStep {
    pub kind: OpKind,
    pub magnitude: f64,
    pub seed: u64,
}

/// A concrete draw from a policy. No steps means the identity.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CompositeAugmentation {
    pub steps: Vec<CompositeStep>,
}

impl CompositeAugmentation {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn is_identity(&self) -> bool {
        self.steps.is_empty()
    }

    /// Same ops and magnitudes with step seeds specialised to one sample,
    /// so stochastic ops differ across the rows of a batch.
    pub fn for_sample(&self, index: usize) -> Self {
        CompositeAugmentation {
            steps: self
                .steps
                .iter()
                .map(|s| CompositeStep {
                    seed: rng::derive_seed(s.seed, &[index as u64]),
                    ..*s
                })
                .collect(),
        }
    }
}

/// Include each entry independently with its probability; an included
/// entry gets a magnitude uniform on `(0, max]` and its own noise seed.
pub fn sample_composite(policy: &AugmentationPolicy, rng: &mut Rng) -> CompositeAugmentation {
    let mut steps = Vec::new();
    for e in &policy.entries {
        let include = rng.random::<f64>() < e.probability;
        if include {
            let u: f64 = rng.random();
            steps.push(CompositeStep {
                kind: e.kind,
                magnitude: e.magnitude * (1.0 - u),
                seed: rng.next_u64(),
            });
        }
    }
    CompositeAugmentation { steps }
}

pub fn apply_composite(
    img: &Image,
    composite: &CompositeAugmentation,
    ranges: &MagnitudeRanges,
) -> Result<Image> {
    composite.steps.iter().try_fold(img.clone(), |acc, step| {
        apply_op(
            &acc,
            step.kind,
            step.magnitude,
            ranges,
            &mut rng::rng(step.seed),
        )
    })
}

/// Apply a composite to one flattened sample of the given layout.
pub fn augment_features(
    x: &[f64],
    layout: &Layout,
    composite: &CompositeAugmentation,
    ranges: &MagnitudeRanges,
) -> Result<Vec<f64>> {
    if composite.is_identity() {
        return Ok(x.to_vec());
    }
    match *layout {
        Layout::Image { height, width } => {
            let img = Image::new(height, width, x.to_vec())?;
            Ok(apply_composite(&img, composite, ranges)?.into_pixels())
        }
        Layout::Points { center, .. } => composite.steps.iter().try_fold(x.to_vec(), |p, s| {
            apply_point_op(
                &p,
                center,
                s.kind,
                s.magnitude,
                ranges,
                &mut rng::rng(s.seed),
            )
        }),
    }
}

/// Apply a single op to one flattened sample of the given layout.
pub fn apply_op_features(
    x: &[f64],
    layout: &Layout,
    kind: OpKind,
    m: f64,
    ranges: &MagnitudeRanges,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    match *layout {
        Layout::Image { height, width } => {
            let img = Image::new(height, width, x.to_vec())?;
            Ok(apply_op(&img, kind, m, ranges, rng)?.into_pixels())
        }
        Layout::Points { center, .. } => apply_point_op(x, center, kind, m, ranges, rng),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSettings {
    /// Largest tolerated validation-accuracy drop.
    pub epsilon: f64,
    pub grid_steps: usize,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        CalibrationSettings {
            epsilon: 0.05,
            grid_steps: 11,
        }
    }
}

impl CalibrationSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::contract(format!(
                "epsilon {} outside (0, 1)",
                self.epsilon
            )));
        }
        if self.grid_steps < 2 {
            return Err(Error::contract("calibration grid needs at least 2 points"));
        }
        Ok(())
    }
}

/// `{0, 1/(g-1), …, 1}`.
pub fn magnitude_grid(steps: usize) -> Vec<f64> {
    (0..steps).map(|i| i as f64 / (steps - 1) as f64).collect()
}

/// Outcome of calibrating one op.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibrated {
    pub kind: OpKind,
    pub magnitude: f64,
    /// Measured drop at each grid point.
    pub drops: Vec<f64>,
}

/// For each op, the largest grid magnitude whose measured drop is at most
/// `epsilon`. `measure_drop(kind, grid_index, magnitude)` returns the
/// accuracy drop relative to magnitude 0; grid index 0 is never measured
/// and counts as a drop of 0. Measurements may run in parallel.
pub fn calibrate_with<F>(
    ops: &[OpKind],
    settings: &CalibrationSettings,
    measure_drop: F,
) -> Result<Vec<Calibrated>>
where
    F: Fn(OpKind, usize, f64) -> Result<f64> + Sync + Send,
{
    settings.validate()?;
    let grid = magnitude_grid(settings.grid_steps);
    let jobs: Vec<(OpKind, usize)> = ops
        .iter()
        .filter(|k| !k.is_binary())
        .flat_map(|&k| (1..grid.len()).map(move |g| (k, g)))
        .collect();
    let measured = exec::map(&jobs, |&(k, g)| measure_drop(k, g, grid[g]));
    let mut measured = measured.into_iter();
    let mut out = Vec::new();
    for &kind in ops.iter().filter(|k| !k.is_binary()) {
        let mut drops = vec![0.0];
        for _ in 1..grid.len() {
            drops.push(measured.next().expect("one result per job")?);
        }
        let best = (0..grid.len())
            .rev()
            .find(|&g| drops[g] <= settings.epsilon)
            .unwrap_or(0);
        out.push(Calibrated {
            kind,
            magnitude: grid[best],
            drops,
        });
    }
    Ok(out)
}

/// Per-sample rng seed used when measuring `kind` at grid point `grid_index`.
pub fn calibration_seed(seed: u64, kind: OpKind, grid_index: usize, sample: usize) -> u64 {
    rng::derive_seed(
        seed,
        &[
            rng::stream::CALIBRATE,
            kind.index(),
            grid_index as u64,
            sample as u64,
        ],
    )
}

/// Copy of `policy` with each non-binary entry's magnitude replaced by its
/// calibrated value.
pub fn apply_calibration(
    policy: &AugmentationPolicy,
    calibrated: &[Calibrated],
) -> AugmentationPolicy {
    AugmentationPolicy {
        entries: policy
            .entries
            .iter()
            .map(|e| match calibrated.iter().find(|c| c.kind == e.kind) {
                Some(c) => PolicyEntry {
                    magnitude: c.magnitude,
                    ..*e
                },
                None => *e,
            })
            .collect(),
    }
}
