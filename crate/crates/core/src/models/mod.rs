//! The six-network bundle: common/specific encoders, classifier, domain
//! discriminator, decoder and adversarial classifier.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::substrate::{Graph, Layer, Parameter, Sequential, SubstrateError, Tensor, Var};

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_VERSION};

/// Rows per chunk for no-grad inference.
pub const INFER_CHUNK: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Substrate(#[from] SubstrateError),
    #[error("unknown component {0:?}")]
    UnknownComponent(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint config does not match the requested config")]
    ConfigMismatch,
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    CommonEncoder,
    Classifier,
    Discriminator,
    SpecificEncoder,
    Decoder,
    AdversarialClassifier,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::CommonEncoder,
        Component::Classifier,
        Component::Discriminator,
        Component::SpecificEncoder,
        Component::Decoder,
        Component::AdversarialClassifier,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Parameter group id on the tape.
    pub fn group(self) -> u16 {
        self as u16
    }

    pub fn name(self) -> &'static str {
        match self {
            Component::CommonEncoder => "common_encoder",
            Component::Classifier => "classifier",
            Component::Discriminator => "discriminator",
            Component::SpecificEncoder => "specific_encoder",
            Component::Decoder => "decoder",
            Component::AdversarialClassifier => "adversarial_classifier",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Component {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, ModelError> {
        let short = match s {
            "E_c" | "ec" => Some(Component::CommonEncoder),
            "C" => Some(Component::Classifier),
            "D" => Some(Component::Discriminator),
            "E_s" | "es" => Some(Component::SpecificEncoder),
            "G" => Some(Component::Decoder),
            "A" => Some(Component::AdversarialClassifier),
            _ => None,
        };
        short
            .or_else(|| Component::ALL.into_iter().find(|c| c.name() == s))
            .ok_or_else(|| ModelError::UnknownComponent(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// `[C, H, W]`; H and W must be divisible by 4.
    pub image_shape: [usize; 3],
    pub d_c: usize,
    pub d_s: usize,
    /// Channels of the two conv blocks in both encoders (mirrored in G).
    pub channels: [usize; 2],
    pub hidden: usize,
    pub grl_lambda: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            image_shape: [3, 16, 16],
            d_c: 32,
            d_s: 16,
            channels: [32, 64],
            hidden: 64,
            grl_lambda: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let [c, h, w] = self.image_shape;
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if c == 0 || h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return bad("image height and width must be positive multiples of 4");
        }
        if self.num_classes < 2 {
            return bad("num_classes must be >= 2");
        }
        if self.d_c == 0 {
            return bad("d_c must be >= 1");
        }
        if self.channels.contains(&0) || self.hidden == 0 {
            return bad("channel and hidden widths must be >= 1");
        }
        if !(self.grl_lambda >= 0.0) {
            return bad("grl_lambda must be >= 0");
        }
        Ok(())
    }

    fn layers(&self, c: Component) -> Vec<Layer> {
        let [ch, h, w] = self.image_shape;
        let [c1, c2] = self.channels;
        let k = self.num_classes;
        let spatial = (h / 4) * (w / 4) * c2;
        let encoder = |out: usize| {
            vec![
                Layer::Conv2d { in_c: ch, out_c: c1, kernel: 3, stride: 2 },
                Layer::Relu,
                Layer::Conv2d { in_c: c1, out_c: c2, kernel: 3, stride: 2 },
                Layer::Relu,
                Layer::Flatten,
                Layer::Dense { in_dim: spatial, out_dim: out },
                Layer::Tanh,
            ]
        };
        let head = |inp: usize| {
            vec![
                Layer::Dense { in_dim: inp, out_dim: self.hidden },
                Layer::Relu,
                Layer::Dense { in_dim: self.hidden, out_dim: k },
                Layer::Softmax,
            ]
        };
        match c {
            Component::CommonEncoder => encoder(self.d_c),
            Component::SpecificEncoder => encoder(self.d_s),
            Component::Classifier => head(self.d_c),
            Component::AdversarialClassifier => head(self.d_s),
            Component::Discriminator => vec![
                Layer::GradReversal { lambda: self.grl_lambda },
                Layer::Dense { in_dim: self.d_c, out_dim: self.hidden },
                Layer::Relu,
                Layer::Dense { in_dim: self.hidden, out_dim: 1 },
                Layer::Sigmoid,
            ],
            Component::Decoder => vec![
                Layer::Dense { in_dim: self.d_c + self.d_s, out_dim: spatial },
                Layer::Relu,
                Layer::Reshape(vec![h / 4, w / 4, c2]),
                Layer::Upsample2x,
                Layer::Conv2d { in_c: c2, out_c: c1, kernel: 3, stride: 1 },
                Layer::Relu,
                Layer::Upsample2x,
                Layer::Conv2d { in_c: c1, out_c: ch, kernel: 3, stride: 1 },
                Layer::Sigmoid,
            ],
        }
    }
}

/// Common and specific features of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePair {
    pub common: Vec<f32>,
    pub specific: Vec<f32>,
}

/// Row-aligned features of a batch: `[n, d_c]` and `[n, d_s]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch {
    pub common: Tensor,
    pub specific: Tensor,
}

impl FeatureBatch {
    pub fn len(&self) -> usize {
        self.common.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pair(&self, i: usize) -> FeaturePair {
        FeaturePair {
            common: self.common.row(i).to_vec(),
            specific: self.specific.row(i).to_vec(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelBundle {
    config: ModelConfig,
    nets: Vec<Sequential>,
}

impl ModelBundle {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let nets = Component::ALL
            .iter()
            .map(|&c| Sequential::new(c.name(), config.layers(c), rng))
            .collect::<Result<_, _>>()?;
        Ok(Self { config, nets })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn net(&self, c: Component) -> &Sequential {
        &self.nets[c.index()]
    }

    pub fn net_mut(&mut self, c: Component) -> &mut Sequential {
        &mut self.nets[c.index()]
    }

    /// Fresh initialization for one component; its frozen flag is kept.
    pub fn reinit<R: Rng + ?Sized>(&mut self, c: Component, rng: &mut R) -> Result<(), ModelError> {
        let frozen = self.is_frozen(c);
        let mut net = Sequential::new(c.name(), self.config.layers(c), rng)?;
        net.set_trainable(!frozen);
        self.nets[c.index()] = net;
        Ok(())
    }

    pub fn set_frozen(&mut self, components: &[Component], frozen: bool) {
        for &c in components {
            self.nets[c.index()].set_trainable(!frozen);
        }
    }

    /// Name-based variant of [`ModelBundle::set_frozen`].
    pub fn set_frozen_by_name(&mut self, names: &[&str], frozen: bool) -> Result<(), ModelError> {
        let comps = names.iter().map(|n| n.parse()).collect::<Result<Vec<Component>, _>>()?;
        self.set_frozen(&comps, frozen);
        Ok(())
    }

    pub fn is_frozen(&self, c: Component) -> bool {
        self.nets[c.index()].params().iter().all(|p| !p.trainable)
    }

    /// Records `c` on the tape with its parameter group.
    pub fn forward(&self, g: &mut Graph, c: Component, x: Var) -> Result<Var, ModelError> {
        Ok(self.nets[c.index()].forward(g, x, c.group())?)
    }

    /// Decoder forward on the tape from separate feature nodes.
    pub fn forward_decode(&self, g: &mut Graph, fc: Var, fs: Var) -> Result<Var, ModelError> {
        let z = g.concat_cols(fc, fs)?;
        self.forward(g, Component::Decoder, z)
    }

    /// Moves gradients recorded on `g` into the named components' parameters.
    pub fn accumulate_grads(&mut self, g: &Graph, components: &[Component]) {
        for &c in components {
            self.nets[c.index()].accumulate_grads(g, c.group());
        }
    }

    pub fn params_mut(&mut self, c: Component) -> Vec<&mut Parameter> {
        self.nets[c.index()].params_mut().iter_mut().collect()
    }

    /// No-grad forward of one component, chunked over rows.
    pub fn infer(&self, c: Component, x: &Tensor) -> Result<Tensor, ModelError> {
        let n = x.rows();
        if n <= INFER_CHUNK {
            return Ok(self.nets[c.index()].infer(x)?);
        }
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let idx: Vec<usize> = (start..(start + INFER_CHUNK).min(n)).collect();
            parts.push(self.nets[c.index()].infer(&x.gather_rows(&idx))?);
            start += INFER_CHUNK;
        }
        let mut shape = parts[0].shape().to_vec();
        shape[0] = n;
        let data = parts.into_iter().flat_map(Tensor::into_data).collect();
        Ok(Tensor::new(shape, data)?)
    }

    fn check_images(&self, x: &Tensor) -> Result<(), ModelError> {
        let [c, h, w] = self.config.image_shape;
        let s = x.shape();
        if s.len() != 4 || s[1..] != [h, w, c] {
            return Err(SubstrateError::ShapeMismatch {
                op: "encode",
                left: s.to_vec(),
                right: vec![s.first().copied().unwrap_or(0), h, w, c],
            }
            .into());
        }
        Ok(())
    }

    fn check_features(&self, op: &'static str, f: &Tensor, dim: usize) -> Result<(), ModelError> {
        let s = f.shape();
        if s.len() != 2 || s[1] != dim {
            return Err(SubstrateError::ShapeMismatch {
                op,
                left: s.to_vec(),
                right: vec![s.first().copied().unwrap_or(0), dim],
            }
            .into());
        }
        Ok(())
    }

    /// `(E_c(x), E_s(x))` for an NHWC batch.
    pub fn encode(&self, x: &Tensor) -> Result<FeatureBatch, ModelError> {
        self.check_images(x)?;
        Ok(FeatureBatch {
            common: self.infer(Component::CommonEncoder, x)?,
            specific: self.infer(Component::SpecificEncoder, x)?,
        })
    }

    pub fn encode_common(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        self.check_images(x)?;
        self.infer(Component::CommonEncoder, x)
    }

    /// Class distributions `[n, K]` from common features.
    pub fn classify(&self, fc: &Tensor) -> Result<Tensor, ModelError> {
        self.check_features("classify", fc, self.config.d_c)?;
        self.infer(Component::Classifier, fc)
    }

    /// Class distributions from specific features.
    pub fn adversary(&self, fs: &Tensor) -> Result<Tensor, ModelError> {
        self.check_features("adversary", fs, self.config.d_s)?;
        self.infer(Component::AdversarialClassifier, fs)
    }

    /// NHWC images in [0,1] from feature rows.
    pub fn decode(&self, fc: &Tensor, fs: &Tensor) -> Result<Tensor, ModelError> {
        self.check_features("decode", fc, self.config.d_c)?;
        self.check_features("decode", fs, self.config.d_s)?;
        if fc.rows() != fs.rows() {
            return Err(SubstrateError::ShapeMismatch {
                op: "decode",
                left: fc.shape().to_vec(),
                right: fs.shape().to_vec(),
            }
            .into());
        }
        let (n, dc, ds) = (fc.rows(), self.config.d_c, self.config.d_s);
        let mut z = Vec::with_capacity(n * (dc + ds));
        for i in 0..n {
            z.extend_from_slice(fc.row(i));
            z.extend_from_slice(fs.row(i));
        }
        self.infer(Component::Decoder, &Tensor::new(vec![n, dc + ds], z)?)
    }

    /// Argmax of `C(E_c(x))`, ties to the lowest class.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>, ModelError> {
        let fc = self.encode_common(x)?;
        Ok(self.classify(&fc)?.argmax_rows())
    }

    /// SHA-256 over parameter names, shapes and little-endian values.
    pub fn digest(&self, c: Component) -> String {
        let mut h = Sha256::new();
        for p in self.nets[c.index()].params() {
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn digests(&self) -> Vec<(Component, String)> {
        Component::ALL.iter().map(|&c| (c, self.digest(c))).collect()
    }

    pub fn param_count(&self) -> usize {
        self.nets.iter().flat_map(|n| n.params()).map(|p| p.value.len()).sum()
    }
}
