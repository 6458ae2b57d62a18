//! Dual-guided spatial-channel-temporal attention.
//!
//! Each direction takes a *source* modality that guides and a *target*
//! modality that is modulated. Audio-to-visual (A2V) uses audio as the source
//! and rescales visual tokens; visual-to-audio (V2A) is the mirror image.
//!
//! Per direction and timestep, with the source projected into the target's
//! channel/token dimensions as a prompt `P = psi(src)` (`C x N`):
//!
//! ```text
//! channel:   M_c = sigmoid(Phi(mean_n(Theta_c_src(mean_n P) * Theta_c_tgt(x))))   C x 1
//! spatial:   x_c = (M_c + 1) * x
//!            M_s = sigmoid(Theta_s_out(Theta_s_src(P) * Theta_s_tgt(x_c)))        1 x N
//! combine:   x_cs = (alpha M_c + beta M_s + 1) * x
//! temporal:  G = sigmoid(Theta_t(RNN(mean_n src_cs)))                             T x 1
//!            out = (gamma G + 1) * x_cs
//! ```
//!
//! The temporal gate of a target is driven by the *source's* spatial-channel
//! attentive features, i.e. the visual gate comes from the audio stream after
//! its own V2A modulation, and vice versa.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::param::{join, Named};
use crate::patch::TokenGrid;
use crate::tensor::{rnn_forward, RnnParams, Tensor, Var};

/// Channel reduction ratio of the squeeze-excitation bottleneck.
pub const BOTTLENECK_RATIO: usize = 4;
/// Spatial extent of the prompt convolution.
pub const PSI_KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DgSctHyper {
    /// Weight of the channel map.
    pub alpha: f64,
    /// Weight of the spatial/frequency map.
    pub beta: f64,
    /// Weight of the temporal gate.
    pub gamma: f64,
    /// Hidden width of the spatial guidance projections.
    pub d: usize,
    /// Return only `(modulation - 1) * x` instead of the modulated features.
    pub delta_mode: bool,
    /// Audio guides visual.
    pub a2v: bool,
    /// Visual guides audio.
    pub v2a: bool,
}

impl Default for DgSctHyper {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            beta: 0.05,
            gamma: 0.1,
            d: 256,
            delta_mode: false,
            a2v: true,
            v2a: true,
        }
    }
}

impl DgSctHyper {
    /// Defaults with the small hidden width used for desk-scale runs.
    pub fn desk() -> Self {
        Self {
            d: 16,
            ..Self::default()
        }
    }

    pub fn zero() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [self.alpha, self.beta, self.gamma];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha, beta, gamma must be finite and non-negative, got {weights:?}"
            )));
        }
        if self.d == 0 {
            return Err(Error::InvalidConfig("d must be at least 1".into()));
        }
        Ok(())
    }

    fn coeffs(&self, enabled: bool) -> Coeffs {
        if enabled {
            Coeffs {
                alpha: self.alpha,
                beta: self.beta,
                gamma: self.gamma,
            }
        } else {
            Coeffs::default()
        }
    }
}

/// Effective modulation weights of one direction.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Coeffs {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

/// Trainable weights of one guidance direction. Linear maps act on
/// channel-first features by left multiplication (`[out, in]`), except the
/// token map which acts on the token axis from the right (`[N_src, N_tgt]`).
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionParams<P = Tensor> {
    /// `[C_tgt, C_src, 3, 3]` convolution over the source token grid.
    pub psi_conv: P,
    /// `[N_src, N_tgt]` map resizing the token axis.
    pub psi_tokens: P,
    /// `[C_tgt, C_tgt]` applied to the pooled prompt.
    pub theta_c_src: P,
    /// `[C_tgt, C_tgt]` applied to the target features.
    pub theta_c_tgt: P,
    /// `[ceil(C_tgt / 4), C_tgt]`
    pub phi_down: P,
    /// `[C_tgt, ceil(C_tgt / 4)]`
    pub phi_up: P,
    /// `[d, C_tgt]` applied to the prompt.
    pub theta_s_src: P,
    /// `[d, C_tgt]` applied to the channel-attentive target.
    pub theta_s_tgt: P,
    /// `[1, d]`
    pub theta_s_out: P,
    /// Recurrence over the source features, hidden width `C_src`.
    pub rnn: RnnParams<P>,
    /// `[1, C_src]` gate head.
    pub theta_t: P,
}

/// Both guidance directions of one DG-SCT module.
#[derive(Debug, Clone, PartialEq)]
pub struct DgSctParams<P = Tensor> {
    pub a2v: DirectionParams<P>,
    pub v2a: DirectionParams<P>,
}

/// Extents a DG-SCT module is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModalityDims {
    pub channels: usize,
    pub grid: (usize, usize),
}

impl ModalityDims {
    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

pub fn bottleneck_width(channels: usize) -> usize {
    channels.div_ceil(BOTTLENECK_RATIO)
}

/// `uniform(-sqrt(6 / fan_in), sqrt(6 / fan_in))`, variance `2 / fan_in`.
fn he_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(shape, (6.0 / fan_in as f64).sqrt(), rng)
}

impl DirectionParams {
    pub fn init<R: Rng + ?Sized>(src: ModalityDims, tgt: ModalityDims, d: usize, rng: &mut R) -> Self {
        let (cs, ct) = (src.channels, tgt.channels);
        let r = bottleneck_width(ct);
        let k = PSI_KERNEL;
        Self {
            psi_conv: he_uniform(&[ct, cs, k, k], cs * k * k, rng),
            psi_tokens: he_uniform(&[src.tokens(), tgt.tokens()], src.tokens(), rng),
            theta_c_src: he_uniform(&[ct, ct], ct, rng),
            theta_c_tgt: he_uniform(&[ct, ct], ct, rng),
            phi_down: he_uniform(&[r, ct], ct, rng),
            phi_up: he_uniform(&[ct, r], r, rng),
            theta_s_src: he_uniform(&[d, ct], ct, rng),
            theta_s_tgt: he_uniform(&[d, ct], ct, rng),
            theta_s_out: he_uniform(&[1, d], d, rng),
            rnn: RnnParams::init(cs, cs, rng),
            theta_t: he_uniform(&[1, cs], cs, rng),
        }
    }

    /// Parameters of the prompt projection only (conv + token map).
    pub fn psi_count(&self) -> usize {
        self.psi_conv.len() + self.psi_tokens.len()
    }
}

impl DgSctParams {
    pub fn init<R: Rng + ?Sized>(visual: ModalityDims, audio: ModalityDims, d: usize, rng: &mut R) -> Self {
        Self {
            a2v: DirectionParams::init(audio, visual, d, rng),
            v2a: DirectionParams::init(visual, audio, d, rng),
        }
    }
}

impl<P> Named<P> for DirectionParams<P> {
    type With<Q> = DirectionParams<Q>;

    fn map_named<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> DirectionParams<Q> {
        let mut leaf = |name: &str, p: &P| f(&join(prefix, name), p);
        DirectionParams {
            psi_conv: leaf("psi_conv", &self.psi_conv),
            psi_tokens: leaf("psi_tokens", &self.psi_tokens),
            theta_c_src: leaf("theta_c_src", &self.theta_c_src),
            theta_c_tgt: leaf("theta_c_tgt", &self.theta_c_tgt),
            phi_down: leaf("phi_down", &self.phi_down),
            phi_up: leaf("phi_up", &self.phi_up),
            theta_s_src: leaf("theta_s_src", &self.theta_s_src),
            theta_s_tgt: leaf("theta_s_tgt", &self.theta_s_tgt),
            theta_s_out: leaf("theta_s_out", &self.theta_s_out),
            rnn: self.rnn.map_named(&join(prefix, "rnn"), f),
            theta_t: f(&join(prefix, "theta_t"), &self.theta_t),
        }
    }

    fn for_each_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        let p = |name: &str| join(prefix, name);
        f(&p("psi_conv"), &mut self.psi_conv);
        f(&p("psi_tokens"), &mut self.psi_tokens);
        f(&p("theta_c_src"), &mut self.theta_c_src);
        f(&p("theta_c_tgt"), &mut self.theta_c_tgt);
        f(&p("phi_down"), &mut self.phi_down);
        f(&p("phi_up"), &mut self.phi_up);
        f(&p("theta_s_src"), &mut self.theta_s_src);
        f(&p("theta_s_tgt"), &mut self.theta_s_tgt);
        f(&p("theta_s_out"), &mut self.theta_s_out);
        self.rnn.for_each_named_mut(&p("rnn"), f);
        f(&p("theta_t"), &mut self.theta_t);
    }
}

impl<P> Named<P> for DgSctParams<P> {
    type With<Q> = DgSctParams<Q>;

    fn map_named<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> DgSctParams<Q> {
        DgSctParams {
            a2v: self.a2v.map_named(&join(prefix, "a2v"), f),
            v2a: self.v2a.map_named(&join(prefix, "v2a"), f),
        }
    }

    fn for_each_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        self.a2v.for_each_named_mut(&join(prefix, "a2v"), f);
        self.v2a.for_each_named_mut(&join(prefix, "v2a"), f);
    }
}

/// Attention maps of one forward pass, channel-first.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBundle {
    /// `[T, C_v, 1]`
    pub m_vc: Tensor,
    /// `[T, C_a, 1]`
    pub m_ac: Tensor,
    /// `[T, 1, N_v]`
    pub m_vs: Tensor,
    /// `[T, 1, N_a]`
    pub m_af: Tensor,
    /// `[T, 1]`, present only when temporal gating ran.
    pub g_v: Option<Tensor>,
    pub g_a: Option<Tensor>,
}

impl AttentionBundle {
    /// Every map, in a fixed order, for bulk checks.
    pub fn maps(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.m_vc, &self.m_ac, &self.m_vs, &self.m_af];
        out.extend(self.g_v.iter());
        out.extend(self.g_a.iter());
        out
    }
}

/// Total multiplicative factor applied to each token, averaged over channels:
/// `[T, N]` per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenFactors {
    pub visual: Tensor,
    pub audio: Tensor,
}

pub struct DgSctOutput<'t> {
    pub v_out: TokenGrid<'t>,
    pub a_out: TokenGrid<'t>,
    pub bundle: AttentionBundle,
    pub factors: TokenFactors,
}

/// `[T, N, C]` tokens as channel-first `[T, C, N]`.
fn channel_first<'t>(grid: &TokenGrid<'t>) -> Result<Var<'t>> {
    grid.tokens.transpose()
}

/// Projects source tokens into the target's channel and token dimensions:
/// `[T, C_tgt, N_tgt]`.
pub fn project_prompt<'t>(src: &TokenGrid<'t>, params: &DirectionParams<Var<'t>>) -> Result<Var<'t>> {
    let t = src.timesteps();
    let (rows, cols) = src.grid;
    let conv_shape = params.psi_conv.shape();
    let map_shape = params.psi_tokens.shape();
    if conv_shape[1] != src.channels() || map_shape[0] != src.num_tokens() {
        return Err(shape_err("project_prompt", &src.tokens.shape(), &conv_shape));
    }
    let c_tgt = conv_shape[0];
    let planes = channel_first(src)?.reshape(&[t, src.channels(), rows, cols])?;
    let mixed = planes.conv2d(&params.psi_conv)?;
    mixed
        .reshape(&[t, c_tgt, src.num_tokens()])?
        .matmul(&params.psi_tokens)
}

/// Channel attention map `[T, C, 1]` of `target` under `prompt` guidance.
pub fn channel_attention<'t>(
    prompt: &Var<'t>,
    target_cf: &Var<'t>,
    params: &DirectionParams<Var<'t>>,
) -> Result<Var<'t>> {
    let ps = prompt.shape();
    let ts = target_cf.shape();
    if ps.len() != 3 || ts.len() != 3 || ps[..2] != ts[..2] {
        return Err(shape_err("channel_attention", &ps, &ts));
    }
    let (t, c) = (ps[0], ps[1]);
    let pooled = prompt.mean_axis(2)?.reshape(&[t, c, 1])?;
    let guide = params.theta_c_src.matmul(&pooled)?;
    let fused = guide.hadamard(&params.theta_c_tgt.matmul(target_cf)?)?;
    let squeezed = fused.mean_axis(2)?.reshape(&[t, c, 1])?;
    let hidden = params.phi_down.matmul(&squeezed)?.relu()?;
    params.phi_up.matmul(&hidden)?.sigmoid()
}

/// Spatial (or frequency) attention map `[T, 1, N]` from the prompt and the
/// channel-attentive target `[T, C, N]`.
pub fn spatial_attention<'t>(
    prompt: &Var<'t>,
    target_c: &Var<'t>,
    params: &DirectionParams<Var<'t>>,
) -> Result<Var<'t>> {
    if prompt.shape() != target_c.shape() {
        return Err(shape_err("spatial_attention", &prompt.shape(), &target_c.shape()));
    }
    let guide = params
        .theta_s_src
        .matmul(prompt)?
        .hadamard(&params.theta_s_tgt.matmul(target_c)?)?;
    params.theta_s_out.matmul(&guide)?.sigmoid()
}

/// Temporal gates `[T, 1]` from attended features `[T, C, N]`.
pub fn temporal_gates<'t>(
    attended: &Var<'t>,
    rnn: &RnnParams<Var<'t>>,
    head: &Var<'t>,
) -> Result<Var<'t>> {
    let shape = attended.shape();
    if shape.len() != 3 {
        return Err(shape_err("temporal_gates", &shape, &[]));
    }
    let seq = attended.mean_axis(2)?;
    let states = rnn_forward(&seq, rnn)?;
    states.matmul(&head.transpose()?)?.sigmoid()
}

/// `alpha M_c + beta M_s + 1` laid out like `[T, N, C]` tokens.
fn spatial_channel_factor<'t>(m_c: &Var<'t>, m_s: &Var<'t>, k: Coeffs) -> Result<Var<'t>> {
    let c = m_c.transpose()?.scale(k.alpha)?;
    let s = m_s.transpose()?.scale(k.beta)?;
    c.add(&s)?.add_scalar(1.0)
}

/// `gamma G + 1` broadcastable against `[T, N, C]`.
fn temporal_factor<'t>(g: &Var<'t>, k: Coeffs) -> Result<Var<'t>> {
    let t = g.shape()[0];
    g.reshape(&[t, 1, 1])?.affine(k.gamma, 1.0)
}

/// Applies the spatial-channel factor and, when `g` is present, the temporal
/// factor to `target` tokens.
pub fn modulate<'t>(
    target: &TokenGrid<'t>,
    m_c: &Var<'t>,
    m_s: &Var<'t>,
    g: Option<&Var<'t>>,
    coeffs: Coeffs,
) -> Result<TokenGrid<'t>> {
    let mut out = spatial_channel_factor(m_c, m_s, coeffs)?.hadamard(&target.tokens)?;
    if let Some(g) = g {
        out = temporal_factor(g, coeffs)?.hadamard(&out)?;
    }
    if out.shape() != target.tokens.shape() {
        return Err(shape_err("modulate", &out.shape(), &target.tokens.shape()));
    }
    target.with_tokens(out)
}

struct DirectionMaps<'t> {
    m_c: Var<'t>,
    m_s: Var<'t>,
    /// `alpha M_c + beta M_s + 1`, `[T, N, C]`-broadcastable.
    factor: Var<'t>,
    /// Spatial-channel attentive target tokens `[T, N, C]`.
    attended: Var<'t>,
}

fn direction_maps<'t>(
    src: &TokenGrid<'t>,
    tgt: &TokenGrid<'t>,
    params: &DirectionParams<Var<'t>>,
    coeffs: Coeffs,
) -> Result<DirectionMaps<'t>> {
    let prompt = project_prompt(src, params)?;
    let target_cf = channel_first(tgt)?;
    if prompt.shape() != target_cf.shape() {
        return Err(shape_err("dgsct prompt", &prompt.shape(), &target_cf.shape()));
    }
    let m_c = channel_attention(&prompt, &target_cf, params)?;
    let target_c = m_c.add_scalar(1.0)?.hadamard(&target_cf)?;
    let m_s = spatial_attention(&prompt, &target_c, params)?;
    let factor = spatial_channel_factor(&m_c, &m_s, coeffs)?;
    let attended = factor.hadamard(&tgt.tokens)?;
    Ok(DirectionMaps {
        m_c,
        m_s,
        factor,
        attended,
    })
}

fn per_token_factor(factor: &Var<'_>, gate: Option<(&Var<'_>, f64)>, n: usize) -> Result<Tensor> {
    let f = factor.value();
    let &[t, rows, cols] = f.shape() else {
        unreachable!("factor is rank 3")
    };
    // [T, 1, C] + [T, N, 1] broadcasts to the full [T, N, C].
    debug_assert_eq!(rows, n);
    let mut out = Vec::with_capacity(t * n);
    let g = gate.map(|(g, gamma)| (g.value(), gamma));
    for ti in 0..t {
        let temporal = g
            .as_ref()
            .map_or(1.0, |(g, gamma)| gamma * g.data()[ti] + 1.0);
        for r in 0..rows {
            let row = &f.data()[(ti * rows + r) * cols..(ti * rows + r + 1) * cols];
            out.push(temporal * row.iter().sum::<f64>() / cols as f64);
        }
    }
    Tensor::new(&[t, n], out)
}

/// One DG-SCT module in both directions. Temporal gates run only when
/// `apply_temporal` is set.
pub fn dgsct_forward<'t>(
    a: &TokenGrid<'t>,
    v: &TokenGrid<'t>,
    params: &DgSctParams<Var<'t>>,
    hyper: &DgSctHyper,
    apply_temporal: bool,
) -> Result<DgSctOutput<'t>> {
    if a.timesteps() != v.timesteps() {
        return Err(Error::TimestepMismatch {
            audio: a.timesteps(),
            visual: v.timesteps(),
        });
    }
    let k_a2v = hyper.coeffs(hyper.a2v);
    let k_v2a = hyper.coeffs(hyper.v2a);
    let vis = direction_maps(a, v, &params.a2v, k_a2v)?;
    let aud = direction_maps(v, a, &params.v2a, k_v2a)?;

    let (mut v_tokens, mut a_tokens) = (vis.attended, aud.attended);
    let (mut g_v, mut g_a) = (None, None);
    if apply_temporal {
        // Visual gate from attended audio, audio gate from attended visual.
        let gv = temporal_gates(&aud.attended.transpose()?, &params.a2v.rnn, &params.a2v.theta_t)?;
        let ga = temporal_gates(&vis.attended.transpose()?, &params.v2a.rnn, &params.v2a.theta_t)?;
        v_tokens = temporal_factor(&gv, k_a2v)?.hadamard(&v_tokens)?;
        a_tokens = temporal_factor(&ga, k_v2a)?.hadamard(&a_tokens)?;
        g_v = Some(gv);
        g_a = Some(ga);
    }
    if hyper.delta_mode {
        v_tokens = v_tokens.sub(&v.tokens)?;
        a_tokens = a_tokens.sub(&a.tokens)?;
    }

    let factors = TokenFactors {
        visual: per_token_factor(
            &vis.factor,
            g_v.as_ref().map(|g| (g, k_a2v.gamma)),
            v.num_tokens(),
        )?,
        audio: per_token_factor(
            &aud.factor,
            g_a.as_ref().map(|g| (g, k_v2a.gamma)),
            a.num_tokens(),
        )?,
    };
    let bundle = AttentionBundle {
        m_vc: (*vis.m_c.value()).clone(),
        m_ac: (*aud.m_c.value()).clone(),
        m_vs: (*vis.m_s.value()).clone(),
        m_af: (*aud.m_s.value()).clone(),
        g_v: g_v.map(|g| (*g.value()).clone()),
        g_a: g_a.map(|g| (*g.value()).clone()),
    };
    Ok(DgSctOutput {
        v_out: v.with_tokens(v_tokens)?,
        a_out: a.with_tokens(a_tokens)?,
        bundle,
        factors,
    })
}
