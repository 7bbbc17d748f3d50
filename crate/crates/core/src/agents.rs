//! Sender, Receiver and SimCLR twin networks.

use autodiff::{Graph, ParamStore, Rng, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::channel::{gumbel_softmax_rows, one_hot_rows, Message, Noise};
use crate::error::{config_err, Result};
use crate::layers::{BatchNorm, Conv, Linear, Mode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    SmallCnn,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub architecture: Architecture,
    /// Output channels of each conv block (conv → batch norm → ReLU → 2×2 pool).
    pub channels: Vec<usize>,
    /// Hidden widths of the MLP encoder.
    pub hidden: Vec<usize>,
    /// Feature dimension D.
    pub output_dim: usize,
    pub image_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { architecture: Architecture::SmallCnn, channels: vec![16, 32, 32], hidden: vec![256], output_dim: 128, image_size: 32 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.output_dim < 8 {
            return config_err(format!("encoder output dim {} < 8", self.output_dim));
        }
        match self.architecture {
            Architecture::SmallCnn => {
                if self.channels.len() < 2 {
                    return config_err("cnn encoder needs at least 2 conv blocks");
                }
                if self.channels.contains(&0) {
                    return config_err("conv widths must be positive");
                }
                let div = 1usize << self.channels.len();
                if self.image_size % div != 0 || self.image_size < div {
                    return config_err(format!("image size {} not divisible by {div}", self.image_size));
                }
            }
            Architecture::Mlp => {
                if self.hidden.contains(&0) {
                    return config_err("mlp widths must be positive");
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelConfig {
    pub vocab_size: usize,
    pub gumbel_temperature: f64,
    pub cosine_temperature: f64,
    pub straight_through: bool,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self { vocab_size: 64, gumbel_temperature: 5.0, cosine_temperature: 0.1, straight_through: false }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return config_err(format!("vocabulary size {} < 2", self.vocab_size));
        }
        if !(self.gumbel_temperature > 0.0) || !(self.cosine_temperature > 0.0) {
            return config_err("temperatures must be positive");
        }
        Ok(())
    }
}

/// Architecture of a Sender/Receiver pair or SimCLR twin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentsConfig {
    pub encoder: EncoderConfig,
    pub channel: ChannelConfig,
    /// Hidden width H of the Receiver image head and the SimCLR z-head.
    pub hidden_dim: usize,
    /// Shared embedding width E of symbols and candidate representations.
    pub embed_dim: usize,
    /// Sender and Receiver use one encoder parameter set.
    pub shared: bool,
}

impl Default for AgentsConfig {
    fn default() -> Self {
        Self { encoder: EncoderConfig::default(), channel: ChannelConfig::default(), hidden_dim: 128, embed_dim: 128, shared: false }
    }
}

impl AgentsConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.channel.validate()?;
        if self.hidden_dim == 0 || self.embed_dim == 0 {
            return config_err("hidden and embedding widths must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum EncoderBody {
    Cnn(Vec<(Conv, BatchNorm)>),
    Mlp(Vec<(Linear, BatchNorm)>),
}

/// Image encoder producing `h: [B, D]`.
#[derive(Clone, Debug)]
pub struct Encoder {
    body: EncoderBody,
    out: Linear,
    pub config: EncoderConfig,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (body, flat) = match cfg.architecture {
            Architecture::SmallCnn => {
                let mut blocks = Vec::new();
                let mut c_in = 3;
                for (i, &c) in cfg.channels.iter().enumerate() {
                    let conv = Conv::new(store, &format!("{name}.conv{i}"), c_in, c, rng)?;
                    let bn = BatchNorm::new(store, &format!("{name}.bn{i}"), c)?;
                    blocks.push((conv, bn));
                    c_in = c;
                }
                let side = cfg.image_size >> cfg.channels.len();
                (EncoderBody::Cnn(blocks), c_in * side * side)
            }
            Architecture::Mlp => {
                let mut layers = Vec::new();
                let mut d_in = 3 * cfg.image_size * cfg.image_size;
                for (i, &h) in cfg.hidden.iter().enumerate() {
                    let lin = Linear::new(store, &format!("{name}.fc{i}"), d_in, h, false, rng)?;
                    let bn = BatchNorm::new(store, &format!("{name}.bn{i}"), h)?;
                    layers.push((lin, bn));
                    d_in = h;
                }
                (EncoderBody::Mlp(layers), d_in)
            }
        };
        let out = Linear::new(store, &format!("{name}.out"), flat, cfg.output_dim, true, rng)?;
        Ok(Self { body, out, config: cfg.clone() })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, images: Var, mode: Mode) -> Result<Var> {
        let mut x = images;
        match &self.body {
            EncoderBody::Cnn(blocks) => {
                for (conv, bn) in blocks {
                    x = conv.forward(g, store, x)?;
                    x = bn.forward(g, store, x, mode)?;
                    x = g.relu(x);
                    x = g.max_pool2d(x, 2)?;
                }
                x = g.flatten(x)?;
            }
            EncoderBody::Mlp(layers) => {
                x = g.flatten(x)?;
                for (lin, bn) in layers {
                    x = lin.forward(g, store, x)?;
                    x = bn.forward(g, store, x, mode)?;
                    x = g.relu(x);
                }
            }
        }
        self.out.forward(g, store, x)
    }
}

/// Sender: encoder, then a linear map to |V| logits followed by batch norm.
#[derive(Clone, Debug)]
pub struct Sender {
    pub encoder: Encoder,
    head: Linear,
    head_bn: BatchNorm,
    pub channel: ChannelConfig,
}

impl Sender {
    /// Returns `(messages, v)`. Train mode relaxes with Gumbel-Softmax; eval
    /// mode emits the one-hot argmax of `v` and ignores `noise`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, images: Var, mode: Mode, noise: Noise<'_>) -> Result<(Var, Var)> {
        let v = self.logits(g, store, images, mode)?;
        let m = match mode {
            Mode::Train => gumbel_softmax_rows(g, v, self.channel.gumbel_temperature, noise, self.channel.straight_through)?,
            Mode::Eval => {
                let oh = one_hot_rows(g.value(v))?;
                g.constant(oh)
            }
        };
        Ok((m, v))
    }

    /// The batch-normalised logits `v`.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, images: Var, mode: Mode) -> Result<Var> {
        let h = self.encoder.forward(g, store, images, mode)?;
        let v = self.head.forward(g, store, h)?;
        self.head_bn.forward(g, store, v, mode)
    }
}

/// Receiver: image head `D → H → E` (batch norm + ReLU after the first
/// layer) and a bias-free linear symbol embedding `|V| → E`.
#[derive(Clone, Debug)]
pub struct Receiver {
    pub encoder: Encoder,
    fc1: Linear,
    bn1: BatchNorm,
    fc2: Linear,
    pub embedding: Linear,
    pub channel: ChannelConfig,
}

impl Receiver {
    /// Candidate representations `r: [n, E]`.
    pub fn represent(&self, g: &mut Graph, store: &ParamStore, images: Var, mode: Mode) -> Result<Var> {
        let h = self.encoder.forward(g, store, images, mode)?;
        let x = self.fc1.forward(g, store, h)?;
        let x = self.bn1.forward(g, store, x, mode)?;
        let x = g.relu(x);
        self.fc2.forward(g, store, x)
    }

    /// Symbol embeddings `e: [B, E]`; relaxed and one-hot messages share the map.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, messages: Var) -> Result<Var> {
        self.embedding.forward(g, store, messages)
    }

    /// `cos(e_b, r_i) / τ_cos` for every message/candidate pair.
    pub fn scores(&self, g: &mut Graph, embedded: Var, reps: Var) -> Result<Var> {
        let c = g.cosine_matrix(embedded, reps, crate::COSINE_EPS)?;
        Ok(g.scale(c, 1.0 / self.channel.cosine_temperature))
    }

    /// Probability over `candidates: [n, C, H, W]` that each is the target of
    /// `message`; returns `[1, n]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, message: &Message, candidates: Var, mode: Mode) -> Result<Var> {
        let n = g.shape(candidates)[0];
        if n < 2 {
            return config_err(format!("receiver needs at least 2 candidates, got {n}"));
        }
        let m = g.constant(Tensor::new(&[1, message.len()], message.values.clone())?);
        let e = self.embed(g, store, m)?;
        let r = self.represent(g, store, candidates, mode)?;
        let s = self.scores(g, e, r)?;
        Ok(g.softmax(s, 1)?)
    }
}

/// A Sender/Receiver pair and the store holding all their parameters.
#[derive(Clone, Debug)]
pub struct GameAgents {
    pub config: AgentsConfig,
    pub store: ParamStore,
    pub sender: Sender,
    pub receiver: Receiver,
}

impl GameAgents {
    /// Fresh parameters. With `config.shared` both agents hold the same
    /// encoder parameter ids (`encoder.*`); otherwise each has its own
    /// (`sender.encoder.*`, `receiver.encoder.*`).
    pub fn new(config: &AgentsConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let (v, d, h, e) = (config.channel.vocab_size, config.encoder.output_dim, config.hidden_dim, config.embed_dim);
        let (s_enc, r_enc) = if config.shared {
            let enc = Encoder::new(&mut store, "encoder", &config.encoder, rng)?;
            (enc.clone(), enc)
        } else {
            let s = Encoder::new(&mut store, "sender.encoder", &config.encoder, rng)?;
            let r = Encoder::new(&mut store, "receiver.encoder", &config.encoder, rng)?;
            (s, r)
        };
        let sender = Sender {
            encoder: s_enc,
            head: Linear::new(&mut store, "sender.head", d, v, true, rng)?,
            head_bn: BatchNorm::new(&mut store, "sender.head_bn", v)?,
            channel: config.channel.clone(),
        };
        let receiver = Receiver {
            encoder: r_enc,
            fc1: Linear::new(&mut store, "receiver.fc1", d, h, true, rng)?,
            bn1: BatchNorm::new(&mut store, "receiver.bn1", h)?,
            fc2: Linear::new(&mut store, "receiver.fc2", h, e, true, rng)?,
            embedding: Linear::new(&mut store, "receiver.embedding", v, e, false, rng)?,
            channel: config.channel.clone(),
        };
        Ok(Self { config: config.clone(), store, sender, receiver })
    }
}

/// SimCLR twin: one encoder (`h`), an s-head `D → |V|` with batch norm, and a
/// z-head `|V| → H → E`.
#[derive(Clone, Debug)]
pub struct SimClr {
    pub config: AgentsConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    s_head: Linear,
    s_bn: BatchNorm,
    z1: Linear,
    z_bn: BatchNorm,
    z2: Linear,
}

/// Outputs of [`SimClr::forward`].
pub struct SimClrOutput {
    pub h: Var,
    pub s: Var,
    pub z: Var,
}

impl SimClr {
    pub fn new(config: &AgentsConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let (v, d, h, e) = (config.channel.vocab_size, config.encoder.output_dim, config.hidden_dim, config.embed_dim);
        let encoder = Encoder::new(&mut store, "encoder", &config.encoder, rng)?;
        Ok(Self {
            config: config.clone(),
            s_head: Linear::new(&mut store, "simclr.s_head", d, v, true, rng)?,
            s_bn: BatchNorm::new(&mut store, "simclr.s_bn", v)?,
            z1: Linear::new(&mut store, "simclr.z1", v, h, true, rng)?,
            z_bn: BatchNorm::new(&mut store, "simclr.z_bn", h)?,
            z2: Linear::new(&mut store, "simclr.z2", h, e, true, rng)?,
            encoder,
            store,
        })
    }

    pub fn forward(&self, g: &mut Graph, images: Var, mode: Mode) -> Result<SimClrOutput> {
        let store = &self.store;
        let h = self.encoder.forward(g, store, images, mode)?;
        let s = self.s_head.forward(g, store, h)?;
        let s = self.s_bn.forward(g, store, s, mode)?;
        let z = self.z_head(g, s, mode)?;
        Ok(SimClrOutput { h, s, z })
    }

    /// First projection-head layer weight, `[|V|, H]`; row `k` embeds symbol `k`.
    pub fn symbol_rows(&self) -> &Tensor {
        self.store.get(self.z1.weight)
    }

    /// The projection head applied to arbitrary `[B, |V|]` inputs.
    pub fn z_head(&self, g: &mut Graph, s: Var, mode: Mode) -> Result<Var> {
        let store = &self.store;
        let x = self.z1.forward(g, store, s)?;
        let x = self.z_bn.forward(g, store, x, mode)?;
        let x = g.relu(x);
        self.z2.forward(g, store, x)
    }
}

/// Images per forward pass during inference.
pub const INFERENCE_CHUNK: usize = 128;

/// Runs `f` on eval-mode, gradient-free graphs over chunks of `images` and
/// concatenates the resulting rows.
pub fn infer_rows<F>(images: &[&Tensor], f: F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph, Var) -> Result<Var> + Sync,
{
    let chunks: Vec<&[&Tensor]> = images.chunks(INFERENCE_CHUNK).collect();
    let parts = autodiff::par::map_range(chunks.len(), |i| -> Result<Vec<Vec<f64>>> {
        let batch = Tensor::stack(chunks[i])?;
        let mut g = Graph::without_grad();
        let x = g.constant(batch);
        let y = f(&mut g, x)?;
        let t = g.value(y);
        let cols = t.numel() / t.shape()[0].max(1);
        Ok(t.data().chunks(cols.max(1)).map(|r| r.to_vec()).collect())
    });
    let mut rows = Vec::with_capacity(images.len());
    for p in parts {
        rows.extend(p?);
    }
    Ok(rows)
}

/// Eval-mode encoder outputs `h` for every image, without gradient tracking.
pub fn extract_features(encoder: &Encoder, store: &ParamStore, images: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
    infer_rows(images, |g, x| encoder.forward(g, store, x, Mode::Eval))
}
