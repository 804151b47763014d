//! Encoder/decoder assembly: conv frontend, sinusoidal positions, stacks of
//! attention + Bayesian positionwise feed-forward blocks, an encoder-side
//! CTC head and the decoder's vocabulary projection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMask, MultiHeadAttentionParams};
use crate::bayes::{GaussianVariationalLayer, KlAccumulator, KlMode, Noise};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::positional::{PositionalEncodingTable, PositionalExponent};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Full vocabulary size including the reserved ids and the trailing CTC blank.
    pub vocab_size: usize,
    pub feature_dim: usize,
    /// Longest decoder sequence (including the start token).
    pub max_target_len: usize,
    /// Longest encoder sequence after 4× subsampling.
    pub max_source_len: usize,
    pub conv_channels: usize,
    pub positional_exponent: PositionalExponent,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small model that trains in minutes on a CPU.
    pub fn desk() -> Self {
        Self {
            d_model: 64,
            d_ff: 128,
            n_heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            vocab_size: 16,
            feature_dim: 16,
            max_target_len: 64,
            max_source_len: 256,
            conv_channels: 32,
            positional_exponent: PositionalExponent::Conventional,
        }
    }

    /// Full-size architecture: 12 encoder and 6 decoder blocks, width 512, feed-forward 2148.
    pub fn paper() -> Self {
        Self {
            d_model: 512,
            d_ff: 2148,
            n_heads: 8,
            encoder_layers: 12,
            decoder_layers: 6,
            vocab_size: 32,
            feature_dim: 80,
            max_target_len: 512,
            max_source_len: 2048,
            conv_channels: 32,
            positional_exponent: PositionalExponent::Conventional,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("feature_dim", self.feature_dim),
            ("max_target_len", self.max_target_len),
            ("max_source_len", self.max_source_len),
            ("conv_channels", self.conv_channels),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.feature_dim < 4 {
            return Err(Error::Config("feature_dim must be at least 4".into()));
        }
        if self.vocab_size < 5 {
            return Err(Error::Config(
                "vocab_size must cover pad, sos, eos, blank and one token".into(),
            ));
        }
        Ok(())
    }
}

/// Deterministic affine layer `y = x·Wᵀ + b` with `W` stored `d_out × d_in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = (0..d_in * d_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Ok(Self {
            w: store.add(format!("{prefix}.w"), Tensor::matrix(d_out, d_in, w)?)?,
            b: store.add(format!("{prefix}.b"), Tensor::zeros(&[d_out]))?,
        })
    }

    pub fn forward(&self, graph: &mut Graph, params: &Bound, x: Var) -> Result<Var> {
        let y = graph.matmul_nt(x, params.var(self.w))?;
        graph.add_row(y, params.var(self.b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn init(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{prefix}.gain"), Tensor::filled(&[dim], 1.0))?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward(&self, graph: &mut Graph, params: &Bound, x: Var) -> Result<Var> {
        graph.layer_norm(x, params.var(self.gain), params.var(self.bias), LAYER_NORM_EPS)
    }
}

/// State threaded through one forward pass.
pub struct Pass<'g, 'n> {
    pub graph: &'g mut Graph,
    pub params: Bound,
    pub noise: Noise<'n>,
    pub kl: KlAccumulator,
    pub kl_mode: KlMode,
}

impl<'g, 'n> Pass<'g, 'n> {
    pub fn new(graph: &'g mut Graph, store: &ParamStore, noise: Noise<'n>, kl_mode: KlMode) -> Self {
        let params = store.bind(graph);
        Self {
            graph,
            params,
            noise,
            kl: KlAccumulator::new(),
            kl_mode,
        }
    }
}

/// Bayesian positionwise feed-forward block: variational input layer,
/// ReLU, deterministic output layer. No dropout.
#[derive(Clone, Debug)]
pub struct BpwffBlock {
    pub bayes_in: GaussianVariationalLayer,
    pub linear_out: Linear,
}

impl BpwffBlock {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        d_ff: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            bayes_in: GaussianVariationalLayer::init(
                store,
                &format!("{prefix}.bayes_in"),
                d_model,
                d_ff,
                rng,
            )?,
            linear_out: Linear::init(store, &format!("{prefix}.linear_out"), d_ff, d_model, rng)?,
        })
    }

    /// Applies the block to every row of `x` independently.
    pub fn forward(&self, pass: &mut Pass<'_, '_>, x: Var) -> Result<Var> {
        let h = self.bayes_in.forward_lrt(
            pass.graph,
            &pass.params,
            x,
            &mut pass.noise,
            &mut pass.kl,
            pass.kl_mode,
        )?;
        let h = pass.graph.relu(h);
        self.linear_out.forward(pass.graph, &pass.params, h)
    }
}

/// Two VGG-style blocks (3×3 conv, ReLU, 2×2 average pool) and a projection to `d_model`.
///
/// Time and frequency are each reduced 4× with floor division.
#[derive(Clone, Debug)]
pub struct ConvFrontend {
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
    pub proj: Linear,
    pub feature_dim: usize,
}

impl ConvFrontend {
    pub fn init(
        store: &mut ParamStore,
        feature_dim: usize,
        channels: usize,
        d_model: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut conv = |name: &str, cin: usize| -> Result<(ParamId, ParamId)> {
            let bound = 1.0 / ((cin * 9) as f64).sqrt();
            let w = (0..channels * cin * 9)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            Ok((
                store.add(
                    format!("frontend.{name}.w"),
                    Tensor::new(vec![channels, cin, 3, 3], w)?,
                )?,
                store.add(format!("frontend.{name}.b"), Tensor::zeros(&[channels]))?,
            ))
        };
        let (conv1_w, conv1_b) = conv("conv1", 1)?;
        let (conv2_w, conv2_b) = conv("conv2", channels)?;
        let proj = Linear::init(
            store,
            "frontend.proj",
            channels * (feature_dim / 4),
            d_model,
            rng,
        )?;
        Ok(Self {
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            proj,
            feature_dim,
        })
    }

    /// `[T × F]` frames → `[⌊T/4⌋ × d_model]`.
    pub fn forward(&self, graph: &mut Graph, params: &Bound, x: Var) -> Result<Var> {
        let (t, f) = match *graph.shape(x) {
            [t, f] => (t, f),
            _ => return Err(Error::Contract("frontend expects [T × F] frames".into())),
        };
        if t < 4 {
            return Err(Error::Contract(format!(
                "input has {t} frames, the frontend needs at least 4"
            )));
        }
        if f != self.feature_dim {
            return Err(Error::Shape {
                op: "conv_frontend",
                lhs: vec![t, f],
                rhs: vec![t, self.feature_dim],
            });
        }
        let h = graph.reshape(x, &[1, t, f])?;
        let h = graph.conv2d_3x3(h, params.var(self.conv1_w), params.var(self.conv1_b))?;
        let h = graph.relu(h);
        let h = graph.avg_pool2(h)?;
        let h = graph.conv2d_3x3(h, params.var(self.conv2_w), params.var(self.conv2_b))?;
        let h = graph.relu(h);
        let h = graph.avg_pool2(h)?;
        let h = graph.channels_to_frames(h)?;
        self.proj.forward(graph, params, h)
    }
}

/// Encoder output: per-utterance memories stacked along rows.
#[derive(Clone, Debug)]
pub struct Memory {
    pub stacked: Var,
    pub lengths: Vec<usize>,
}

impl Memory {
    pub fn offset(&self, index: usize) -> usize {
        self.lengths[..index].iter().sum()
    }

    pub fn segment(&self, graph: &mut Graph, index: usize) -> Result<Var> {
        if self.lengths.len() == 1 {
            return Ok(self.stacked);
        }
        graph.slice_rows(self.stacked, self.offset(index), self.lengths[index])
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub self_attn: MultiHeadAttentionParams,
    pub norm1: LayerNormParams,
    pub ff: BpwffBlock,
    pub norm2: LayerNormParams,
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttentionParams,
    pub norm1: LayerNormParams,
    pub cross_attn: MultiHeadAttentionParams,
    pub norm2: LayerNormParams,
    pub ff: BpwffBlock,
    pub norm3: LayerNormParams,
}

/// Runs `f` on each row segment of `x` and stacks the results.
fn per_segment(
    graph: &mut Graph,
    x: Var,
    lengths: &[usize],
    mut f: impl FnMut(&mut Graph, usize, Var) -> Result<Var>,
) -> Result<Var> {
    if lengths.len() == 1 {
        return f(graph, 0, x);
    }
    let mut outs = Vec::with_capacity(lengths.len());
    let mut offset = 0;
    for (i, &len) in lengths.iter().enumerate() {
        let seg = graph.slice_rows(x, offset, len)?;
        outs.push(f(graph, i, seg)?);
        offset += len;
    }
    graph.concat_rows(&outs)
}

/// The assembled encoder/decoder.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub frontend: ConvFrontend,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub embedding: ParamId,
    pub output: Linear,
    pub ctc_head: Linear,
    source_pe: PositionalEncodingTable,
    target_pe: PositionalEncodingTable,
}

impl Model {
    /// Registers every parameter in `store` (in a fixed order) and returns the model layout.
    pub fn init(config: ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let frontend =
            ConvFrontend::init(store, config.feature_dim, config.conv_channels, d, rng)?;
        let mut encoder = Vec::with_capacity(config.encoder_layers);
        for l in 0..config.encoder_layers {
            let p = format!("encoder.{l}");
            encoder.push(EncoderLayer {
                self_attn: MultiHeadAttentionParams::init(
                    store,
                    &format!("{p}.self_attn"),
                    d,
                    config.n_heads,
                    rng,
                )?,
                norm1: LayerNormParams::init(store, &format!("{p}.norm1"), d)?,
                ff: BpwffBlock::init(store, &format!("{p}.ff"), d, config.d_ff, rng)?,
                norm2: LayerNormParams::init(store, &format!("{p}.norm2"), d)?,
            });
        }
        let emb_scale = 1.0 / (d as f64).sqrt();
        let emb = (0..config.vocab_size * d)
            .map(|_| rng.random_range(-emb_scale..=emb_scale))
            .collect();
        let embedding = store.add("decoder.embedding", Tensor::matrix(config.vocab_size, d, emb)?)?;
        let mut decoder = Vec::with_capacity(config.decoder_layers);
        for l in 0..config.decoder_layers {
            let p = format!("decoder.{l}");
            decoder.push(DecoderLayer {
                self_attn: MultiHeadAttentionParams::init(
                    store,
                    &format!("{p}.self_attn"),
                    d,
                    config.n_heads,
                    rng,
                )?,
                norm1: LayerNormParams::init(store, &format!("{p}.norm1"), d)?,
                cross_attn: MultiHeadAttentionParams::init(
                    store,
                    &format!("{p}.cross_attn"),
                    d,
                    config.n_heads,
                    rng,
                )?,
                norm2: LayerNormParams::init(store, &format!("{p}.norm2"), d)?,
                ff: BpwffBlock::init(store, &format!("{p}.ff"), d, config.d_ff, rng)?,
                norm3: LayerNormParams::init(store, &format!("{p}.norm3"), d)?,
            });
        }
        let output = Linear::init(store, "decoder.output", d, config.vocab_size, rng)?;
        let ctc_head = Linear::init(store, "ctc_head", d, config.vocab_size, rng)?;
        Ok(Self {
            source_pe: PositionalEncodingTable::new(
                config.max_source_len,
                d,
                config.positional_exponent,
            )?,
            target_pe: PositionalEncodingTable::new(
                config.max_target_len,
                d,
                config.positional_exponent,
            )?,
            config,
            frontend,
            encoder,
            decoder,
            embedding,
            output,
            ctc_head,
        })
    }

    /// Rebuilds the layout for a config, for loading parameters into an existing store.
    pub fn layout(config: ModelConfig) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = Self::init(config, &mut store, &mut rng)?;
        Ok((model, store))
    }

    pub fn blank_id(&self) -> usize {
        self.config.vocab_size - 1
    }

    /// Every Bayesian layer, encoder first.
    pub fn bayes_layers(&self) -> impl Iterator<Item = &GaussianVariationalLayer> {
        self.encoder
            .iter()
            .map(|l| &l.ff.bayes_in)
            .chain(self.decoder.iter().map(|l| &l.ff.bayes_in))
    }

    /// Frontend, positional encoding and the encoder stack for a batch of utterances.
    pub fn encode(&self, pass: &mut Pass<'_, '_>, features: &[&Tensor]) -> Result<Memory> {
        if features.is_empty() {
            return Err(Error::Contract("encode needs at least one utterance".into()));
        }
        let mut frames = Vec::with_capacity(features.len());
        let mut lengths = Vec::with_capacity(features.len());
        for f in features {
            let x = pass.graph.constant((*f).clone());
            let h = self.frontend.forward(pass.graph, &pass.params, x)?;
            let len = pass.graph.shape(h)[0];
            let pe = pass.graph.constant(self.source_pe.rows(len)?);
            frames.push(pass.graph.add(h, pe)?);
            lengths.push(len);
        }
        let mut x = if frames.len() == 1 {
            frames[0]
        } else {
            pass.graph.concat_rows(&frames)?
        };
        for layer in &self.encoder {
            let attn = per_segment(pass.graph, x, &lengths, |g, _, seg| {
                layer.self_attn.forward(g, &pass.params, seg, seg, seg, None)
            })?;
            let h = pass.graph.add(x, attn)?;
            let h = layer.norm1.forward(pass.graph, &pass.params, h)?;
            let ff = layer.ff.forward(pass, h)?;
            let h2 = pass.graph.add(h, ff)?;
            x = layer.norm2.forward(pass.graph, &pass.params, h2)?;
        }
        Ok(Memory {
            stacked: x,
            lengths,
        })
    }

    /// Per-utterance CTC log-probabilities `[T′ × vocab]` from the encoder memory.
    pub fn ctc_log_probs(&self, pass: &mut Pass<'_, '_>, memory: &Memory) -> Result<Vec<Var>> {
        let logits = self.ctc_head.forward(pass.graph, &pass.params, memory.stacked)?;
        let logp = pass.graph.log_softmax(logits);
        if memory.lengths.len() == 1 {
            return Ok(vec![logp]);
        }
        let mut out = Vec::with_capacity(memory.lengths.len());
        let mut offset = 0;
        for &len in &memory.lengths {
            out.push(pass.graph.slice_rows(logp, offset, len)?);
            offset += len;
        }
        Ok(out)
    }

    /// Decoder logits `[L × vocab]` for each prefix, attending to memory segment `sources[i]`.
    ///
    /// Every prefix must start with the start-of-sequence token; the caller checks this.
    pub fn decode_forward(
        &self,
        pass: &mut Pass<'_, '_>,
        memory: &Memory,
        prefixes: &[Vec<usize>],
        sources: &[usize],
    ) -> Result<Vec<Var>> {
        if prefixes.is_empty() || prefixes.len() != sources.len() {
            return Err(Error::Contract(
                "decode_forward needs one memory index per prefix".into(),
            ));
        }
        let d = self.config.d_model;
        let mut rows = Vec::with_capacity(prefixes.len());
        let mut lengths = Vec::with_capacity(prefixes.len());
        for prefix in prefixes {
            if prefix.is_empty() {
                return Err(Error::Contract("empty decoder prefix".into()));
            }
            let emb = pass.graph.gather_rows(pass.params.var(self.embedding), prefix)?;
            let emb = pass.graph.scale(emb, (d as f64).sqrt());
            let pe = pass.graph.constant(self.target_pe.rows(prefix.len())?);
            rows.push(pass.graph.add(emb, pe)?);
            lengths.push(prefix.len());
        }
        let mut mem_segments = Vec::with_capacity(memory.lengths.len());
        for i in 0..memory.lengths.len() {
            mem_segments.push(memory.segment(pass.graph, i)?);
        }
        let mut x = if rows.len() == 1 {
            rows[0]
        } else {
            pass.graph.concat_rows(&rows)?
        };
        let masks: Vec<AttentionMask> = lengths.iter().map(|&l| AttentionMask::causal(l)).collect();
        for layer in &self.decoder {
            let attn = per_segment(pass.graph, x, &lengths, |g, i, seg| {
                layer
                    .self_attn
                    .forward(g, &pass.params, seg, seg, seg, Some(&masks[i]))
            })?;
            let h = pass.graph.add(x, attn)?;
            let h = layer.norm1.forward(pass.graph, &pass.params, h)?;
            let cross = per_segment(pass.graph, h, &lengths, |g, i, seg| {
                let mem = mem_segments[sources[i]];
                layer.cross_attn.forward(g, &pass.params, seg, mem, mem, None)
            })?;
            let h2 = pass.graph.add(h, cross)?;
            let h2 = layer.norm2.forward(pass.graph, &pass.params, h2)?;
            let ff = layer.ff.forward(pass, h2)?;
            let h3 = pass.graph.add(h2, ff)?;
            x = layer.norm3.forward(pass.graph, &pass.params, h3)?;
        }
        let logits = self.output.forward(pass.graph, &pass.params, x)?;
        if lengths.len() == 1 {
            return Ok(vec![logits]);
        }
        let mut out = Vec::with_capacity(lengths.len());
        let mut offset = 0;
        for &len in &lengths {
            out.push(pass.graph.slice_rows(logits, offset, len)?);
            offset += len;
        }
        Ok(out)
    }
}
