//! EEGNet and DeepConvNet encoders with interchangeable heads.
//!
//! A [`Network`] is an encoder stack plus at most one head: a projection head
//! for contrastive pretraining or a softmax classifier. The classifier can be
//! attached with the encoder frozen, in which case the encoder runs in eval
//! mode and never receives updates.

use std::fmt;
use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Layer, LayerSpec, Mode, Padding, Param, Sequential, Tensor};
use crate::signal::{NUM_CLASSES, STD_CHANNELS, TRIAL_SAMPLES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Eegnet,
    Deepconvnet,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Eegnet => "EEGNet",
            Arch::Deepconvnet => "DeepConvNet",
        })
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "eegnet" => Ok(Arch::Eegnet),
            "deepconvnet" => Ok(Arch::Deepconvnet),
            other => Err(Error::invalid(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub channels: usize,
    pub samples: usize,
    pub num_classes: usize,
    pub dropout_p: f64,
    pub eegnet_f1: usize,
    pub eegnet_depth_mult: usize,
    pub eegnet_f2: usize,
    pub proj_dim: usize,
    /// Accept inputs other than 31×1500.
    pub allow_custom_input: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(arch: Arch) -> Self {
        ModelConfig {
            arch,
            channels: STD_CHANNELS,
            samples: TRIAL_SAMPLES,
            num_classes: NUM_CLASSES,
            dropout_p: 0.5,
            eegnet_f1: 8,
            eegnet_depth_mult: 2,
            eegnet_f2: 16,
            proj_dim: 128,
            allow_custom_input: false,
            seed: 0,
        }
    }

    /// Same architecture on a custom (channels, samples) input.
    pub fn with_input(mut self, channels: usize, samples: usize) -> Self {
        self.channels = channels;
        self.samples = samples;
        self.allow_custom_input = true;
        self
    }

    pub fn with_classes(mut self, n: usize) -> Self {
        self.num_classes = n;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn validate(&self, arch: Arch) -> Result<()> {
        if self.arch != arch {
            return Err(Error::invalid(format!("config is for {}, not {arch}", self.arch)));
        }
        if !self.allow_custom_input && (self.channels, self.samples) != (STD_CHANNELS, TRIAL_SAMPLES) {
            return Err(Error::invalid(format!(
                "input {}x{} differs from {STD_CHANNELS}x{TRIAL_SAMPLES}; set allow_custom_input",
                self.channels, self.samples
            )));
        }
        let dims = [
            self.channels,
            self.samples,
            self.num_classes,
            self.eegnet_f1,
            self.eegnet_depth_mult,
            self.eegnet_f2,
            self.proj_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }

    pub fn input_shape(&self, batch: usize) -> [usize; 4] {
        [batch, 1, self.channels, self.samples]
    }
}

pub fn eegnet_encoder_specs(cfg: &ModelConfig) -> Vec<LayerSpec> {
    let f1 = cfg.eegnet_f1;
    let d = cfg.eegnet_depth_mult;
    vec![
        LayerSpec::Conv2d {
            in_ch: 1,
            out_ch: f1,
            kernel: (1, 64),
            padding: Padding::Same,
            bias: false,
        },
        LayerSpec::BatchNorm { features: f1 },
        LayerSpec::DepthwiseConv2d {
            channels: f1,
            multiplier: d,
            kernel: (cfg.channels, 1),
            padding: Padding::Valid,
            bias: false,
        },
        LayerSpec::BatchNorm { features: f1 * d },
        LayerSpec::Elu,
        LayerSpec::AvgPool { pool: (1, 4) },
        LayerSpec::Dropout { p: cfg.dropout_p },
        LayerSpec::SeparableConv2d {
            in_ch: f1 * d,
            out_ch: cfg.eegnet_f2,
            kernel: (1, 16),
            padding: Padding::Same,
            bias: false,
        },
        LayerSpec::BatchNorm { features: cfg.eegnet_f2 },
        LayerSpec::Elu,
        LayerSpec::AvgPool { pool: (1, 8) },
        LayerSpec::Flatten,
    ]
}

pub fn deepconvnet_encoder_specs(cfg: &ModelConfig) -> Vec<LayerSpec> {
    let mut specs = vec![
        LayerSpec::Conv2d {
            in_ch: 1,
            out_ch: 25,
            kernel: (1, 5),
            padding: Padding::Valid,
            bias: true,
        },
        LayerSpec::Conv2d {
            in_ch: 25,
            out_ch: 25,
            kernel: (cfg.channels, 1),
            padding: Padding::Valid,
            bias: false,
        },
        LayerSpec::BatchNorm { features: 25 },
        LayerSpec::Elu,
        LayerSpec::MaxPool { pool: (1, 2) },
    ];
    for (cin, cout) in [(25, 50), (50, 100), (100, 200)] {
        specs.extend([
            LayerSpec::Conv2d {
                in_ch: cin,
                out_ch: cout,
                kernel: (1, 5),
                padding: Padding::Valid,
                bias: false,
            },
            LayerSpec::BatchNorm { features: cout },
            LayerSpec::Elu,
            LayerSpec::MaxPool { pool: (1, 2) },
        ]);
    }
    specs.push(LayerSpec::Flatten);
    specs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Projection,
    Classifier,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub config: ModelConfig,
    pub encoder: Sequential,
    pub head: Sequential,
    pub head_kind: Option<HeadKind>,
    pub encoder_frozen: bool,
    /// Adam step count of the optimizer that produced the parameters.
    pub step: u64,
    encoder_dim: usize,
    head_rng: ChaCha8Rng,
    /// Whether the last forward skipped the trailing softmax.
    skipped_softmax: bool,
}

fn build(cfg: ModelConfig, specs: Vec<LayerSpec>) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut encoder = Sequential::from_specs(&specs, &mut rng);
    if let Some(Layer::Conv2d(first)) = encoder.layers.first_mut() {
        first.input_grad = false;
    }
    let out = encoder.output_shape(&cfg.input_shape(1))?;
    let encoder_dim = out[1];
    let head_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    Ok(Network {
        config: cfg,
        encoder,
        head: Sequential::default(),
        head_kind: None,
        encoder_frozen: false,
        step: 0,
        encoder_dim,
        head_rng,
        skipped_softmax: false,
    })
}

/// EEGNet encoder with no head attached.
pub fn build_eegnet(cfg: &ModelConfig) -> Result<Network> {
    cfg.validate(Arch::Eegnet)?;
    build(cfg.clone(), eegnet_encoder_specs(cfg))
}

pub fn build_deepconvnet(cfg: &ModelConfig) -> Result<Network> {
    cfg.validate(Arch::Deepconvnet)?;
    build(cfg.clone(), deepconvnet_encoder_specs(cfg))
}

pub fn build_encoder(cfg: &ModelConfig) -> Result<Network> {
    match cfg.arch {
        Arch::Eegnet => build_eegnet(cfg),
        Arch::Deepconvnet => build_deepconvnet(cfg),
    }
}

pub fn projection_head_specs(encoder_dim: usize, proj_dim: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::L2Normalize,
        LayerSpec::Dense {
            inputs: encoder_dim,
            outputs: proj_dim,
        },
        LayerSpec::Relu,
        LayerSpec::L2Normalize,
    ]
}

pub fn classifier_head_specs(encoder_dim: usize, classes: usize, dropout_p: f64) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Dropout { p: dropout_p },
        LayerSpec::Dense {
            inputs: encoder_dim,
            outputs: classes,
        },
        LayerSpec::Softmax,
    ]
}

impl Network {
    pub fn encoder_dim(&self) -> usize {
        self.encoder_dim
    }

    pub fn attach_projection_head(&mut self) {
        if self.head_kind.is_some() {
            warn!("replacing existing {:?} head with a projection head", self.head_kind);
        }
        let specs = projection_head_specs(self.encoder_dim, self.config.proj_dim);
        self.head = Sequential::from_specs(&specs, &mut self.head_rng);
        self.head_kind = Some(HeadKind::Projection);
        self.encoder_frozen = false;
    }

    pub fn attach_classifier_head(&mut self, freeze_encoder: bool) {
        if self.head_kind.is_some() {
            warn!("replacing existing {:?} head with a classifier head", self.head_kind);
        }
        let specs = classifier_head_specs(self.encoder_dim, self.config.num_classes, self.config.dropout_p);
        self.head = Sequential::from_specs(&specs, &mut self.head_rng);
        self.head_kind = Some(HeadKind::Classifier);
        self.encoder_frozen = freeze_encoder;
    }

    /// Encoder followed by head layers, as run at inference.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut v = self.encoder.specs();
        v.extend(self.head.specs());
        v
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let expected = self.config.input_shape(x.batch());
        if x.shape() != expected {
            return Err(Error::ShapeMismatch {
                context: "network input".into(),
                expected: expected.to_vec(),
                actual: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn encoder_mode(&self, mode: Mode) -> Mode {
        if self.encoder_frozen {
            Mode::Eval
        } else {
            mode
        }
    }

    /// Encoder output r = Enc(x).
    pub fn encode(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.check_input(x)?;
        let m = self.encoder_mode(mode);
        self.encoder.forward(x, m)
    }

    /// Head output for precomputed encoder features. With `logits` the
    /// classifier's trailing softmax is skipped.
    pub fn head_forward(&mut self, r: &Tensor, mode: Mode, logits: bool) -> Result<Tensor> {
        let n = self.head.layers.len();
        let skip = logits && matches!(self.head.layers.last(), Some(Layer::Softmax(_)));
        let mut cur = r.clone();
        for layer in &mut self.head.layers[..n - usize::from(skip)] {
            cur = layer.forward(&cur, mode)?;
        }
        self.skipped_softmax = skip;
        Ok(cur)
    }

    /// Full forward. Classifier networks return probabilities, projection
    /// networks unit-norm embeddings.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let r = self.encode(x, mode)?;
        self.head_forward(&r, mode, false)
    }

    /// Forward used for training: classifier output stops at the logits.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let r = self.encode(x, Mode::Train)?;
        self.head_forward(&r, Mode::Train, true)
    }

    /// Backpropagates through the head, returning d/dr.
    pub fn head_backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let n = self.head.layers.len() - usize::from(self.skipped_softmax);
        let mut cur = dy.clone();
        for layer in self.head.layers[..n].iter_mut().rev() {
            cur = layer.backward(&cur)?;
        }
        Ok(cur)
    }

    /// Backpropagates through head and (unless frozen) encoder.
    pub fn backward(&mut self, dy: &Tensor) -> Result<()> {
        let dr = self.head_backward(dy)?;
        if !self.encoder_frozen {
            self.encoder.backward(&dr)?;
        }
        Ok(())
    }

    /// Parameters that receive optimizer updates.
    pub fn trainable_params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = Vec::new();
        if !self.encoder_frozen {
            v.extend(self.encoder.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }

    pub fn zero_grad(&mut self) {
        self.encoder.zero_grad();
        self.head.zero_grad();
    }

    pub fn clear_cache(&mut self) {
        self.encoder.clear_cache();
        self.head.clear_cache();
    }

    pub fn encoder_param_count(&self) -> usize {
        self.encoder.param_count()
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.head.param_count()
    }

    /// Eval-mode outputs in chunks of `batch` items.
    pub fn predict(&mut self, x: &Tensor, batch: usize) -> Result<Tensor> {
        self.map_batches(x, batch, |net, chunk| net.forward(chunk, Mode::Eval))
    }

    /// Eval-mode encoder features in chunks of `batch` items.
    pub fn encode_all(&mut self, x: &Tensor, batch: usize) -> Result<Tensor> {
        self.map_batches(x, batch, |net, chunk| net.encode(chunk, Mode::Eval))
    }

    fn map_batches(
        &mut self,
        x: &Tensor,
        batch: usize,
        mut f: impl FnMut(&mut Network, &Tensor) -> Result<Tensor>,
    ) -> Result<Tensor> {
        let n = x.batch();
        let item = x.item_len();
        let mut rows: Vec<f64> = Vec::new();
        let mut width = 0;
        let mut start = 0;
        while start < n {
            let end = (start + batch.max(1)).min(n);
            let mut shape = x.shape().to_vec();
            shape[0] = end - start;
            let chunk = Tensor::from_vec(&shape, x.data()[start * item..end * item].to_vec())?;
            let out = f(self, &chunk)?;
            width = out.item_len();
            rows.extend_from_slice(out.data());
            start = end;
        }
        self.clear_cache();
        Tensor::from_vec(&[n, width], rows)
    }

    /// Exact f64 bytes of every encoder parameter and buffer.
    pub fn encoder_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for layer in &self.encoder.layers {
            for t in layer.state() {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    /// Serializes into a JSON header and a little-endian f32 parameter blob.
    pub fn to_checkpoint(&self) -> (CheckpointHeader, Vec<u8>) {
        let mut tensors = Vec::new();
        let mut blob = Vec::new();
        let mut dropout_rngs = Vec::new();
        for (part, seq) in [("encoder", &self.encoder), ("head", &self.head)] {
            for (li, layer) in seq.layers.iter().enumerate() {
                for t in layer.state() {
                    tensors.push(TensorEntry {
                        layer: format!("{part}.{li}"),
                        shape: t.shape().to_vec(),
                    });
                    for &v in t.data() {
                        blob.extend_from_slice(&(v as f32).to_le_bytes());
                    }
                }
                if let Layer::Dropout(d) = layer {
                    let (seed, pos) = d.rng_state();
                    dropout_rngs.push(RngEntry {
                        layer: format!("{part}.{li}"),
                        seed,
                        word_pos: pos.to_string(),
                    });
                }
            }
        }
        let (hseed, hpos) = (self.head_rng.get_seed(), self.head_rng.get_word_pos());
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            config: self.config.clone(),
            encoder: self.encoder.specs(),
            head: self.head.specs(),
            head_kind: self.head_kind,
            encoder_frozen: self.encoder_frozen,
            step: self.step,
            tensors,
            dropout_rngs,
            head_rng_seed: hseed.iter().map(|b| format!("{b:02x}")).collect(),
            head_rng_word_pos: hpos.to_string(),
        };
        (header, blob)
    }

    /// Rebuilds a network from its checkpoint alone.
    pub fn from_checkpoint(header: &CheckpointHeader, blob: &[u8]) -> Result<Network> {
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::manifest("format", format!("expected `{CHECKPOINT_FORMAT}`")));
        }
        let mut net = build(header.config.clone(), header.encoder.clone())?;
        let mut scratch = ChaCha8Rng::seed_from_u64(0);
        net.head = Sequential::from_specs(&header.head, &mut scratch);
        net.head_kind = header.head_kind;
        net.encoder_frozen = header.encoder_frozen;
        net.step = header.step;

        let mut values = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
        let mut entries = header.tensors.iter();
        for seq in [&mut net.encoder, &mut net.head] {
            for layer in &mut seq.layers {
                for t in layer.state_mut() {
                    let entry = entries
                        .next()
                        .ok_or_else(|| Error::manifest("tensors", "fewer entries than layer state"))?;
                    if entry.shape != t.shape() {
                        return Err(Error::manifest(
                            format!("tensors[{}].shape", entry.layer),
                            format!("expected {:?}, found {:?}", t.shape(), entry.shape),
                        ));
                    }
                    for v in t.data_mut() {
                        *v = values
                            .next()
                            .ok_or_else(|| Error::Format("parameter blob too short".into()))?;
                    }
                }
            }
        }
        if entries.next().is_some() || values.next().is_some() || blob.len() % 4 != 0 {
            return Err(Error::Format("parameter blob longer than the header describes".into()));
        }
        for entry in &header.dropout_rngs {
            let (part, idx) = entry
                .layer
                .split_once('.')
                .and_then(|(p, i)| i.parse::<usize>().ok().map(|i| (p, i)))
                .ok_or_else(|| Error::manifest("dropout_rngs.layer", entry.layer.clone()))?;
            let seq = if part == "encoder" { &mut net.encoder } else { &mut net.head };
            let pos: u128 = entry
                .word_pos
                .parse()
                .map_err(|_| Error::manifest("dropout_rngs.word_pos", entry.word_pos.clone()))?;
            match seq.layers.get_mut(idx) {
                Some(Layer::Dropout(d)) => d.restore_rng(entry.seed, pos),
                _ => return Err(Error::manifest("dropout_rngs.layer", format!("{} is not dropout", entry.layer))),
            }
        }
        let seed_bytes: Vec<u8> = (0..header.head_rng_seed.len() / 2)
            .map(|i| u8::from_str_radix(&header.head_rng_seed[2 * i..2 * i + 2], 16))
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::manifest("head_rng_seed", "not hex"))?;
        let seed: [u8; 32] = seed_bytes
            .try_into()
            .map_err(|_| Error::manifest("head_rng_seed", "expected 32 bytes"))?;
        net.head_rng = ChaCha8Rng::from_seed(seed);
        net.head_rng.set_word_pos(
            header
                .head_rng_word_pos
                .parse()
                .map_err(|_| Error::manifest("head_rng_word_pos", "not an integer"))?,
        );
        Ok(net)
    }

    /// Round-trips through the checkpoint format (parameters become f32-exact).
    pub fn snapshot(&self) -> Result<Network> {
        let (h, b) = self.to_checkpoint();
        Network::from_checkpoint(&h, &b)
    }

    /// Writes `<stem>.json` and `<stem>.bin`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let (header, blob) = self.to_checkpoint();
        std::fs::write(stem.with_extension("json"), serde_json::to_vec_pretty(&header)?)?;
        std::fs::write(stem.with_extension("bin"), blob)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Network> {
        let header: CheckpointHeader = serde_json::from_slice(&std::fs::read(stem.with_extension("json"))?)?;
        let blob = std::fs::read(stem.with_extension("bin"))?;
        Network::from_checkpoint(&header, &blob)
    }
}

pub const CHECKPOINT_FORMAT: &str = "airscl-checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub layer: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngEntry {
    pub layer: String,
    pub seed: u64,
    pub word_pos: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub encoder: Vec<LayerSpec>,
    pub head: Vec<LayerSpec>,
    pub head_kind: Option<HeadKind>,
    pub encoder_frozen: bool,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
    pub dropout_rngs: Vec<RngEntry>,
    pub head_rng_seed: String,
    pub head_rng_word_pos: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn custom_input_requires_opt_in() {
        let mut cfg = ModelConfig::new(Arch::Eegnet);
        cfg.samples = 1000;
        assert!(build_eegnet(&cfg).is_err());
        assert!(build_eegnet(&ModelConfig::new(Arch::Eegnet).with_input(31, 1000)).is_ok());
        assert!(build_deepconvnet(&ModelConfig::new(Arch::Eegnet)).is_err());
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let cfg = ModelConfig::new(Arch::Eegnet).with_input(4, 64);
        let mut net = build_eegnet(&cfg).unwrap();
        let x = Tensor::zeros(&[2, 1, 5, 64]);
        assert!(matches!(net.encode(&x, Mode::Eval), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn eegnet_geometry_and_parameter_count() {
        let mut net = build_eegnet(&ModelConfig::new(Arch::Eegnet)).unwrap();
        assert_eq!(net.encoder_dim(), 736);
        net.attach_classifier_head(false);
        assert_eq!(net.param_count(), 20_762);
    }

    #[test]
    fn deepconvnet_time_trace() {
        let net = build_deepconvnet(&ModelConfig::new(Arch::Deepconvnet)).unwrap();
        let trace = net.encoder.shape_trace(&[1, 1, 31, 1500]).unwrap();
        let widths: Vec<usize> = trace
            .iter()
            .zip(net.encoder.specs())
            .filter(|(_, s)| matches!(s, LayerSpec::Conv2d { kernel: (1, 5), .. } | LayerSpec::MaxPool { .. }))
            .map(|(sh, _)| sh[3])
            .collect();
        assert_eq!(widths, [1496, 748, 744, 372, 368, 184, 180, 90]);
        assert_eq!(net.encoder_dim(), 18_000);
        let head = Sequential::from_specs(
            &classifier_head_specs(18_000, 26, 0.5),
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert_eq!(head.param_count(), 468_026);
    }

    #[test]
    fn projection_head_outputs_unit_nonnegative_rows() {
        let cfg = ModelConfig::new(Arch::Eegnet).with_input(4, 64).with_seed(3);
        let mut net = build_eegnet(&cfg).unwrap();
        net.attach_projection_head();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_vec(&[3, 1, 4, 64], (0..3 * 4 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let z = net.forward(&x, Mode::Eval).unwrap();
        assert_eq!(z.shape(), &[3, 128]);
        for i in 0..3 {
            let row = z.item(i);
            assert!(row.iter().all(|&v| v >= 0.0));
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm == 0.0 || (norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn frozen_encoder_exposes_only_head_params() {
        let cfg = ModelConfig::new(Arch::Eegnet).with_input(4, 64);
        let mut net = build_eegnet(&cfg).unwrap();
        net.attach_projection_head();
        net.attach_classifier_head(true);
        let head_params = net.head.param_count();
        let n: usize = net.trainable_params_mut().iter().map(|p| p.value.len()).sum();
        assert_eq!(n, head_params);
        assert_eq!(net.head_kind, Some(HeadKind::Classifier));
    }

    fn adam_steps(freeze: bool) -> (Vec<u8>, Vec<u8>) {
        use crate::contrastive::cross_entropy_logits;
        use crate::nn::{Adam, AdamConfig};
        let cfg = ModelConfig::new(Arch::Eegnet).with_input(4, 64).with_classes(3).with_seed(1);
        let mut net = build_eegnet(&cfg).unwrap();
        net.attach_classifier_head(freeze);
        let before = net.encoder_bytes();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::from_vec(&cfg.input_shape(6), (0..6 * 256).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let y = [0, 1, 2, 0, 1, 2];
        let mut opt = Adam::new(AdamConfig { lr: 1e-2, ..Default::default() });
        for _ in 0..5 {
            net.zero_grad();
            let logits = net.forward_train(&x).unwrap();
            let loss = cross_entropy_logits(&logits, &y).unwrap();
            net.backward(&loss.grad).unwrap();
            opt.step(net.trainable_params_mut()).unwrap();
        }
        (before, net.encoder_bytes())
    }

    #[test]
    fn adam_leaves_a_frozen_encoder_untouched() {
        let (before, after) = adam_steps(true);
        assert_eq!(before, after);
        let (before, after) = adam_steps(false);
        assert_ne!(before, after);
    }

    #[test]
    fn checkpoint_round_trip_reproduces_outputs() {
        let cfg = ModelConfig::new(Arch::Deepconvnet).with_input(3, 120).with_seed(9);
        let mut net = build_deepconvnet(&cfg).unwrap();
        net.attach_classifier_head(false);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_vec(&[2, 1, 3, 120], (0..720).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        // Parameters become f32-exact after one round trip, so compare two snapshots.
        let mut a = net.snapshot().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        a.save(&stem).unwrap();
        let mut b = Network::load(&stem).unwrap();
        assert_eq!(a.layer_specs(), b.layer_specs());
        assert_eq!(a.forward(&x, Mode::Eval).unwrap(), b.forward(&x, Mode::Eval).unwrap());
        assert_eq!(a.to_checkpoint(), b.to_checkpoint());
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let cfg = ModelConfig::new(Arch::Eegnet).with_input(4, 64);
        let net = build_eegnet(&cfg).unwrap();
        let (h, b) = net.to_checkpoint();
        assert!(Network::from_checkpoint(&h, &b[..b.len() - 4]).is_err());
        let mut longer = b.clone();
        longer.extend_from_slice(&[0; 4]);
        assert!(Network::from_checkpoint(&h, &longer).is_err());
    }
}
