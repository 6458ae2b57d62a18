//! Frozen toy transformer encoders with DG-SCT injected into every layer.
//!
//! Each layer computes
//!
//! ```text
//! v_y    = v   + MHA(v)   + Omega_a2v(a, v)
//! v_next = v_y + MLP(v_y) + Omega_a2v(a_y, v_y)
//! ```
//!
//! and symmetrically for audio. Both applications of `Omega` in a layer share
//! one parameter set. Layer normalization is omitted.

use rand::Rng;

use crate::dgsct::{dgsct_forward, AttentionBundle, DgSctHyper, DgSctParams, ModalityDims, TokenFactors};
use crate::error::{shape_err, Error, Result};
use crate::param::{join, Named};
use crate::patch::TokenGrid;
use crate::tensor::{Tensor, Var};

/// Frozen weights of one transformer layer. Projections act on row vectors
/// (`x W`), so every matrix is `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerParams<P = Tensor> {
    pub heads: usize,
    pub wq: P,
    pub wk: P,
    pub wv: P,
    pub wo: P,
    /// `[C, 2C]`
    pub w1: P,
    /// `[2C]`
    pub b1: P,
    /// `[2C, C]`
    pub w2: P,
    /// `[C]`
    pub b2: P,
}

impl EncoderLayerParams {
    pub fn init<R: Rng + ?Sized>(channels: usize, heads: usize, rng: &mut R) -> Result<Self> {
        check_heads(channels, heads)?;
        let c = channels;
        let bound = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let mut square = || Tensor::uniform(&[c, c], bound(c), rng);
        let (wq, wk, wv, wo) = (square(), square(), square(), square());
        Ok(Self {
            heads,
            wq,
            wk,
            wv,
            wo,
            w1: Tensor::uniform(&[c, 2 * c], bound(c), rng),
            b1: Tensor::zeros(&[2 * c]),
            w2: Tensor::uniform(&[2 * c, c], bound(2 * c), rng),
            b2: Tensor::zeros(&[c]),
        })
    }

    pub fn zeros(channels: usize, heads: usize) -> Result<Self> {
        check_heads(channels, heads)?;
        let c = channels;
        Ok(Self {
            heads,
            wq: Tensor::zeros(&[c, c]),
            wk: Tensor::zeros(&[c, c]),
            wv: Tensor::zeros(&[c, c]),
            wo: Tensor::zeros(&[c, c]),
            w1: Tensor::zeros(&[c, 2 * c]),
            b1: Tensor::zeros(&[2 * c]),
            w2: Tensor::zeros(&[2 * c, c]),
            b2: Tensor::zeros(&[c]),
        })
    }
}

fn check_heads(channels: usize, heads: usize) -> Result<()> {
    if heads == 0 || !channels.is_multiple_of(heads) {
        return Err(Error::InvalidConfig(format!(
            "model dim {channels} is not divisible by {heads} heads"
        )));
    }
    Ok(())
}

impl<P> Named<P> for EncoderLayerParams<P> {
    type With<Q> = EncoderLayerParams<Q>;

    fn map_named<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> EncoderLayerParams<Q> {
        let mut g = |name: &str, p: &P| f(&join(prefix, name), p);
        EncoderLayerParams {
            heads: self.heads,
            wq: g("wq", &self.wq),
            wk: g("wk", &self.wk),
            wv: g("wv", &self.wv),
            wo: g("wo", &self.wo),
            w1: g("w1", &self.w1),
            b1: g("b1", &self.b1),
            w2: g("w2", &self.w2),
            b2: g("b2", &self.b2),
        }
    }

    fn for_each_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        f(&join(prefix, "wq"), &mut self.wq);
        f(&join(prefix, "wk"), &mut self.wk);
        f(&join(prefix, "wv"), &mut self.wv);
        f(&join(prefix, "wo"), &mut self.wo);
        f(&join(prefix, "w1"), &mut self.w1);
        f(&join(prefix, "b1"), &mut self.b1);
        f(&join(prefix, "w2"), &mut self.w2);
        f(&join(prefix, "b2"), &mut self.b2);
    }
}

/// Linear classifier over concatenated token-mean features.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<P = Tensor> {
    /// `[C_v + C_a, K]`
    pub w: P,
    /// `[K]`
    pub b: P,
}

impl HeadParams {
    /// Zero weights and bias: every class starts equally likely.
    pub fn zeros(inputs: usize, classes: usize) -> Self {
        Self {
            w: Tensor::zeros(&[inputs, classes]),
            b: Tensor::zeros(&[classes]),
        }
    }

    pub fn init<R: Rng + ?Sized>(inputs: usize, classes: usize, rng: &mut R) -> Self {
        Self {
            w: Tensor::uniform(&[inputs, classes], 1.0 / (inputs as f64).sqrt(), rng),
            b: Tensor::zeros(&[classes]),
        }
    }
}

impl<P> Named<P> for HeadParams<P> {
    type With<Q> = HeadParams<Q>;

    fn map_named<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> HeadParams<Q> {
        HeadParams {
            w: f(&join(prefix, "w"), &self.w),
            b: f(&join(prefix, "b"), &self.b),
        }
    }

    fn for_each_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "b"), &mut self.b);
    }
}

/// Everything that stays fixed during training: patch embeddings and the
/// per-modality transformer layers.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenParams<P = Tensor> {
    /// `[p_v * p_v * 3, C_v]`
    pub visual_embed: P,
    /// `[p_a * p_a, C_a]`
    pub audio_embed: P,
    pub visual_layers: Vec<EncoderLayerParams<P>>,
    pub audio_layers: Vec<EncoderLayerParams<P>>,
}

impl<P> Named<P> for FrozenParams<P> {
    type With<Q> = FrozenParams<Q>;

    fn map_named<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> FrozenParams<Q> {
        FrozenParams {
            visual_embed: f(&join(prefix, "visual_embed"), &self.visual_embed),
            audio_embed: f(&join(prefix, "audio_embed"), &self.audio_embed),
            visual_layers: self.visual_layers.map_named(&join(prefix, "visual"), f),
            audio_layers: self.audio_layers.map_named(&join(prefix, "audio"), f),
        }
    }

    fn for_each_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        f(&join(prefix, "visual_embed"), &mut self.visual_embed);
        f(&join(prefix, "audio_embed"), &mut self.audio_embed);
        self.visual_layers.for_each_named_mut(&join(prefix, "visual"), f);
        self.audio_layers.for_each_named_mut(&join(prefix, "audio"), f);
    }
}

/// The trained part: one DG-SCT module per layer and the classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainableParams<P = Tensor> {
    pub dgsct: Vec<DgSctParams<P>>,
    pub head: HeadParams<P>,
}

impl<P> Named<P> for TrainableParams<P> {
    type With<Q> = TrainableParams<Q>;

    fn map_named<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> TrainableParams<Q> {
        TrainableParams {
            dgsct: self.dgsct.map_named(&join(prefix, "layer"), f),
            head: self.head.map_named(&join(prefix, "head"), f),
        }
    }

    fn for_each_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        self.dgsct.for_each_named_mut(&join(prefix, "layer"), f);
        self.head.for_each_named_mut(&join(prefix, "head"), f);
    }
}

/// Shape of a dual encoder stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackDims {
    pub visual: ModalityDims,
    pub audio: ModalityDims,
    /// Flattened raw patch widths `p_v^2 * 3` and `p_a^2`.
    pub visual_patch: usize,
    pub audio_patch: usize,
    pub layers: usize,
    pub heads: usize,
    pub classes: usize,
    pub d: usize,
}

/// Paired visual/audio encoders with DG-SCT in every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoderStack {
    pub dims: StackDims,
    pub frozen: FrozenParams,
    pub trainable: TrainableParams,
    pub hyper: DgSctHyper,
}

impl DualEncoderStack {
    pub fn init<R: Rng + ?Sized>(dims: StackDims, hyper: DgSctHyper, rng: &mut R) -> Result<Self> {
        hyper.validate()?;
        if dims.classes == 0 || dims.d != hyper.d {
            return Err(Error::InvalidConfig(format!(
                "classes {} must be positive and d {} must match hyper.d {}",
                dims.classes, dims.d, hyper.d
            )));
        }
        let (cv, ca) = (dims.visual.channels, dims.audio.channels);
        let visual_embed = Tensor::uniform(&[dims.visual_patch, cv], 1.0 / (dims.visual_patch as f64).sqrt(), rng);
        let audio_embed = Tensor::uniform(&[dims.audio_patch, ca], 1.0 / (dims.audio_patch as f64).sqrt(), rng);
        let mut visual_layers = Vec::with_capacity(dims.layers);
        let mut audio_layers = Vec::with_capacity(dims.layers);
        for _ in 0..dims.layers {
            visual_layers.push(EncoderLayerParams::init(cv, dims.heads, rng)?);
            audio_layers.push(EncoderLayerParams::init(ca, dims.heads, rng)?);
        }
        let dgsct = (0..dims.layers)
            .map(|_| DgSctParams::init(dims.visual, dims.audio, dims.d, rng))
            .collect();
        let head = HeadParams::zeros(cv + ca, dims.classes);
        Ok(Self {
            dims,
            frozen: FrozenParams {
                visual_embed,
                audio_embed,
                visual_layers,
                audio_layers,
            },
            trainable: TrainableParams { dgsct, head },
            hyper,
        })
    }
}

/// Bias `[k]` reshaped to broadcast over the last axis of a rank-`rank` tensor.
fn row_bias<'t>(b: &Var<'t>, rank: usize) -> Result<Var<'t>> {
    let mut shape = vec![1; rank];
    shape[rank - 1] = b.shape()[0];
    b.reshape(&shape)
}

/// Scaled dot-product self-attention over the tokens of each timestep.
pub fn mha_forward<'t>(x: &Var<'t>, params: &EncoderLayerParams<Var<'t>>) -> Result<Var<'t>> {
    let shape = x.shape();
    let c = params.wq.shape()[0];
    if shape.len() != 3 || shape[2] != c || params.heads == 0 || !c.is_multiple_of(params.heads) {
        return Err(shape_err("mha_forward", &shape, &params.wq.shape()));
    }
    let dh = c / params.heads;
    let q = x.matmul(&params.wq)?;
    let k = x.matmul(&params.wk)?;
    let v = x.matmul(&params.wv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let qh = q.slice(2, h * dh, dh)?;
        let kh = k.slice(2, h * dh, dh)?;
        let vh = v.slice(2, h * dh, dh)?;
        let weights = qh.matmul(&kh.transpose()?)?.scale(scale)?.softmax(2)?;
        heads.push(weights.matmul(&vh)?);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        x.tape().concat(&heads, 2)?
    };
    merged.matmul(&params.wo)
}

/// `GELU(x W1 + b1) W2 + b2`.
pub fn mlp_forward<'t>(x: &Var<'t>, params: &EncoderLayerParams<Var<'t>>) -> Result<Var<'t>> {
    let rank = x.shape().len();
    let hidden = x.matmul(&params.w1)?.add(&row_bias(&params.b1, rank)?)?.gelu()?;
    hidden.matmul(&params.w2)?.add(&row_bias(&params.b2, rank)?)
}

/// Outputs of one encoder layer.
pub struct LayerOutput<'t> {
    pub v: TokenGrid<'t>,
    pub a: TokenGrid<'t>,
    /// Maps of the post-MLP DG-SCT application.
    pub bundle: AttentionBundle,
    pub factors: TokenFactors,
}

pub fn layer_forward<'t>(
    v: &TokenGrid<'t>,
    a: &TokenGrid<'t>,
    layer_v: &EncoderLayerParams<Var<'t>>,
    layer_a: &EncoderLayerParams<Var<'t>>,
    dgsct: &DgSctParams<Var<'t>>,
    hyper: &DgSctHyper,
    apply_temporal: bool,
) -> Result<LayerOutput<'t>> {
    let first = dgsct_forward(a, v, dgsct, hyper, apply_temporal)?;
    let v_y = v
        .tokens
        .add(&mha_forward(&v.tokens, layer_v)?)?
        .add(&first.v_out.tokens)?;
    let a_y = a
        .tokens
        .add(&mha_forward(&a.tokens, layer_a)?)?
        .add(&first.a_out.tokens)?;
    let (v_y, a_y) = (v.with_tokens(v_y)?, a.with_tokens(a_y)?);

    let second = dgsct_forward(&a_y, &v_y, dgsct, hyper, apply_temporal)?;
    let v_next = v_y
        .tokens
        .add(&mlp_forward(&v_y.tokens, layer_v)?)?
        .add(&second.v_out.tokens)?;
    let a_next = a_y
        .tokens
        .add(&mlp_forward(&a_y.tokens, layer_a)?)?
        .add(&second.a_out.tokens)?;
    Ok(LayerOutput {
        v: v.with_tokens(v_next)?,
        a: a.with_tokens(a_next)?,
        bundle: second.bundle,
        factors: second.factors,
    })
}

pub struct StackOutput<'t> {
    pub v: TokenGrid<'t>,
    pub a: TokenGrid<'t>,
    pub bundles: Vec<AttentionBundle>,
    pub factors: Vec<TokenFactors>,
}

/// Runs every layer; temporal gates are active in the last one only.
pub fn stack_forward<'t>(
    v: &TokenGrid<'t>,
    a: &TokenGrid<'t>,
    frozen: &FrozenParams<Var<'t>>,
    dgsct: &[DgSctParams<Var<'t>>],
    hyper: &DgSctHyper,
) -> Result<StackOutput<'t>> {
    let layers = frozen.visual_layers.len();
    if frozen.audio_layers.len() != layers || dgsct.len() != layers {
        return Err(shape_err(
            "stack_forward",
            &[frozen.visual_layers.len(), frozen.audio_layers.len()],
            &[dgsct.len()],
        ));
    }
    let (mut v, mut a) = (*v, *a);
    let mut bundles = Vec::with_capacity(layers);
    let mut factors = Vec::with_capacity(layers);
    for (i, module) in dgsct.iter().enumerate() {
        let out = layer_forward(
            &v,
            &a,
            &frozen.visual_layers[i],
            &frozen.audio_layers[i],
            module,
            hyper,
            i + 1 == layers,
        )?;
        v = out.v;
        a = out.a;
        bundles.push(out.bundle);
        factors.push(out.factors);
    }
    Ok(StackOutput {
        v,
        a,
        bundles,
        factors,
    })
}

/// Factor applied to the pooled features before the head. The residual
/// stream roughly doubles at every injection, so the raw pool is large.
pub const POOL_SCALE: f64 = 0.5;

/// Per-timestep logits `[T, K]` from `POOL_SCALE` times the token-mean-pooled,
/// concatenated features.
pub fn classify<'t>(v: &TokenGrid<'t>, a: &TokenGrid<'t>, head: &HeadParams<Var<'t>>) -> Result<Var<'t>> {
    let inputs = head.w.shape()[0];
    if v.channels() + a.channels() != inputs || v.timesteps() != a.timesteps() {
        return Err(shape_err(
            "classify",
            &[v.channels(), a.channels()],
            &head.w.shape(),
        ));
    }
    let pooled_v = v.tokens.mean_axis(1)?;
    let pooled_a = a.tokens.mean_axis(1)?;
    let features = v.tokens.tape().concat(&[pooled_v, pooled_a], 1)?.scale(POOL_SCALE)?;
    features.matmul(&head.w)?.add(&row_bias(&head.b, 2)?)
}

/// Mean negative log-likelihood of `labels` under `logits: [T, K]`.
pub fn cross_entropy<'t>(logits: &Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    logits.log_softmax(1)?.pick(labels)?.mean_all()?.scale(-1.0)
}
