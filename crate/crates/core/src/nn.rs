//! The three-part network: an MLP encoder producing features, a projection
//! head feeding the contrastive loss, and a linear classifier over features.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};
use crate::tensor::Tensor;

/// Norm floor used when projecting embeddings onto the unit sphere.
pub const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub proj_dim: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 256,
            hidden_dims: vec![128, 64],
            embed_dim: 64,
            proj_dim: 32,
            num_classes: 5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.input_dim, self.embed_dim, self.proj_dim];
        if dims.iter().chain(&self.hidden_dims).any(|&d| d == 0) {
            return Err(Error::contract(format!(
                "model dims must be positive: {self:?}"
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::contract("num_classes must be at least 2"));
        }
        Ok(())
    }
}

/// Fully connected layer computing `x · weight + bias`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `[fan_in, fan_out]`
    pub weight: Tensor,
    /// `[fan_out]`
    pub bias: Tensor,
}

impl Dense {
    fn he(fan_in: usize, fan_out: usize, seed: u64) -> Result<Self> {
        Ok(Dense {
            weight: Tensor::randn(&[fan_in, fan_out], seed, (2.0 / fan_in as f64).sqrt())?,
            bias: Tensor::zeros(&[fan_out])?,
        })
    }

    fn bind(&self, tape: &mut Tape, tracked: bool) -> BoundDense {
        let mut reg = |t: &Tensor| {
            if tracked {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BoundDense {
            weight: reg(&self.weight),
            bias: reg(&self.bias),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub encoder: Vec<Dense>,
    /// Hidden layer followed by the output layer.
    pub projection: Vec<Dense>,
    pub classifier: Dense,
}

/// He-initialised weights, zero biases; a pure function of `(config, seed)`.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelBundle> {
    config.validate()?;
    let mut layer = 0u64;
    let mut next = |fan_in, fan_out| {
        layer += 1;
        Dense::he(fan_in, fan_out, derive_seed(seed, &[stream::INIT, layer]))
    };
    let mut encoder = Vec::new();
    let mut fan_in = config.input_dim;
    for &h in config
        .hidden_dims
        .iter()
        .chain(std::iter::once(&config.embed_dim))
    {
        encoder.push(next(fan_in, h)?);
        fan_in = h;
    }
    let projection = vec![
        next(config.embed_dim, config.embed_dim)?,
        next(config.embed_dim, config.proj_dim)?,
    ];
    let classifier = next(config.embed_dim, config.num_classes)?;
    Ok(ModelBundle {
        config: config.clone(),
        encoder,
        projection,
        classifier,
    })
}

#[derive(Clone, Copy, Debug)]
struct BoundDense {
    weight: Var,
    bias: Var,
}

impl BoundDense {
    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, self.weight)?;
        tape.add_bias(xw, self.bias)
    }
}

/// A model's parameters registered on one tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    input_dim: usize,
    encoder: Vec<BoundDense>,
    projection: Vec<BoundDense>,
    classifier: BoundDense,
}

impl BoundModel {
    /// Tape handles in the same order as [`ModelBundle::params`].
    pub fn params(&self) -> Vec<Var> {
        self.encoder
            .iter()
            .chain(&self.projection)
            .chain(std::iter::once(&self.classifier))
            .flat_map(|d| [d.weight, d.bias])
            .collect()
    }

    /// Encoder features `h`; relu between layers, none after the last.
    pub fn features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (_, cols) = tape.value(x).dims2()?;
        if cols != self.input_dim {
            return Err(Error::ShapeMismatch {
                op: "forward_features",
                left: tape.value(x).shape().to_vec(),
                right: vec![self.input_dim],
            });
        }
        let mut h = x;
        for (i, layer) in self.encoder.iter().enumerate() {
            if i > 0 {
                h = tape.relu(h);
            }
            h = layer.forward(tape, h)?;
        }
        Ok(h)
    }

    /// Unit-norm projection embeddings for the contrastive loss.
    pub fn projection(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let hidden = self.projection[0].forward(tape, h)?;
        let hidden = tape.relu(hidden);
        let z = self.projection[1].forward(tape, hidden)?;
        tape.l2_normalize_rows(z, NORMALIZE_EPS)
    }

    pub fn logits(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        self.classifier.forward(tape, h)
    }
}

impl ModelBundle {
    /// Register every parameter as a tracked leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        self.bind_impl(tape, true)
    }

    /// Register parameters as constants, for inference.
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundModel {
        self.bind_impl(tape, false)
    }

    /// Use `vars` (in [`ModelBundle::params`] order) as this model's
    /// parameters; shapes must already match.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundModel> {
        let expected = self.params().len();
        if vars.len() != expected {
            return Err(Error::contract(format!(
                "bind_vars needs {expected} handles, got {}",
                vars.len()
            )));
        }
        let mut it = vars.chunks_exact(2).map(|p| BoundDense {
            weight: p[0],
            bias: p[1],
        });
        Ok(BoundModel {
            input_dim: self.config.input_dim,
            encoder: it.by_ref().take(self.encoder.len()).collect(),
            projection: it.by_ref().take(self.projection.len()).collect(),
            classifier: it.next().expect("counted above"),
        })
    }

    fn bind_impl(&self, tape: &mut Tape, tracked: bool) -> BoundModel {
        BoundModel {
            input_dim: self.config.input_dim,
            encoder: self.encoder.iter().map(|d| d.bind(tape, tracked)).collect(),
            projection: self
                .projection
                .iter()
                .map(|d| d.bind(tape, tracked))
                .collect(),
            classifier: self.classifier.bind(tape, tracked),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.encoder
            .iter()
            .chain(&self.projection)
            .chain(std::iter::once(&self.classifier))
            .flat_map(|d| [&d.weight, &d.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.encoder
            .iter_mut()
            .chain(self.projection.iter_mut())
            .chain(std::iter::once(&mut self.classifier))
            .flat_map(|d| [&mut d.weight, &mut d.bias])
            .collect()
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        let mut push = |prefix: &str, i: usize| {
            names.push(format!("{prefix}.{i}.weight"));
            names.push(format!("{prefix}.{i}.bias"));
        };
        (0..self.encoder.len()).for_each(|i| push("encoder", i));
        (0..self.projection.len()).for_each(|i| push("projection", i));
        push("classifier", 0);
        names
    }

    /// Encoder features for a batch, without gradient tracking.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let m = self.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let h = m.features(&mut tape, xv)?;
        Ok(tape.value(h).clone())
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let m = self.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let h = m.features(&mut tape, xv)?;
        let l = m.logits(&mut tape, h)?;
        Ok(tape.value(l).clone())
    }

    pub fn embeddings(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let m = self.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let h = m.features(&mut tape, xv)?;
        let z = m.projection(&mut tape, h)?;
        Ok(tape.value(z).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self
                .param_names()
                .into_iter()
                .zip(self.params())
                .map(|(name, t)| NamedParam {
                    name,
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        // Zero-initialised skeleton gives the expected names and shapes.
        let mut model = init_model(&ckpt.config, 0)?;
        let names = model.param_names();
        if names.len() != ckpt.params.len() {
            return Err(Error::Consistency(format!(
                "checkpoint has {} tensors, config implies {}",
                ckpt.params.len(),
                names.len()
            )));
        }
        for ((slot, name), p) in model.params_mut().into_iter().zip(&names).zip(ckpt.params) {
            if &p.name != name || p.shape != slot.shape() {
                return Err(Error::Consistency(format!(
                    "checkpoint tensor {} {:?} does not match {} {:?}",
                    p.name,
                    p.shape,
                    name,
                    slot.shape()
                )));
            }
            *slot = Tensor::new(&p.shape, p.data)?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(&self.to_checkpoint())?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        Self::from_checkpoint(ckpt)
    }
}

pub const CHECKPOINT_FORMAT: &str = "dascl-model";
pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk model record: config plus named flat parameter arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub params: Vec<NamedParam>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}
