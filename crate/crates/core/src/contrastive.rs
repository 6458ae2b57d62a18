//! Few/zero-shot alignment of modality features with class-prototype text
//! vectors through a CLIP-style symmetric contrastive objective.
//!
//! The visual-text and audio-text losses are mixed with dynamic weights
//! `w1 = y_v / (y_v + y_a)`, `w2 = 1 - w1`, where `y` is the mean diagonal
//! softmax probability of a branch's similarity matrix. The weights are
//! treated as constants when differentiating.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::param::{join, Named};
use crate::patch::TokenGrid;
use crate::tensor::{kernels, Tape, Tensor, Var};

/// Upper bound on the logit scale `1 / tau`.
pub const MAX_LOGIT_SCALE: f64 = 100.0;
/// Initial temperature of both branches.
pub const INIT_TAU: f64 = 0.07;

/// Two-layer projection `relu(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMlp<P = Tensor> {
    /// `[D_in, H]`
    pub w1: P,
    /// `[H]`
    pub b1: P,
    /// `[H, D]`
    pub w2: P,
    /// `[D]`
    pub b2: P,
}

impl ProjectionMlp {
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        Self {
            w1: Tensor::uniform(&[input, hidden], 1.0 / (input as f64).sqrt(), rng),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::uniform(&[hidden, output], 1.0 / (hidden as f64).sqrt(), rng),
            b2: Tensor::zeros(&[output]),
        }
    }
}

impl<P> Named<P> for ProjectionMlp<P> {
    type With<Q> = ProjectionMlp<Q>;

    fn map_named<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> ProjectionMlp<Q> {
        ProjectionMlp {
            w1: f(&join(prefix, "w1"), &self.w1),
            b1: f(&join(prefix, "b1"), &self.b1),
            w2: f(&join(prefix, "w2"), &self.w2),
            b2: f(&join(prefix, "b2"), &self.b2),
        }
    }

    fn for_each_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        f(&join(prefix, "w1"), &mut self.w1);
        f(&join(prefix, "b1"), &mut self.b1);
        f(&join(prefix, "w2"), &mut self.w2);
        f(&join(prefix, "b2"), &mut self.b2);
    }
}

impl<'t> ProjectionMlp<Var<'t>> {
    pub fn forward(&self, x: &Var<'t>) -> Result<Var<'t>> {
        let h = x.matmul(&self.w1)?.add(&row(&self.b1)?)?.relu()?;
        h.matmul(&self.w2)?.add(&row(&self.b2)?)
    }
}

fn row<'t>(b: &Var<'t>) -> Result<Var<'t>> {
    b.reshape(&[1, b.shape()[0]])
}

/// Projection heads of the four branches.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMlps<P = Tensor> {
    pub visual: ProjectionMlp<P>,
    pub audio: ProjectionMlp<P>,
    pub text_v: ProjectionMlp<P>,
    pub text_a: ProjectionMlp<P>,
}

impl AlignmentMlps {
    /// Branch inputs `C_v`, `C_a`, `D_t`; shared hidden width and output `D`.
    pub fn init<R: Rng + ?Sized>(
        c_v: usize,
        c_a: usize,
        d_text: usize,
        hidden: usize,
        d: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            visual: ProjectionMlp::init(c_v, hidden, d, rng),
            audio: ProjectionMlp::init(c_a, hidden, d, rng),
            text_v: ProjectionMlp::init(d_text, hidden, d, rng),
            text_a: ProjectionMlp::init(d_text, hidden, d, rng),
        }
    }
}

impl<P> Named<P> for AlignmentMlps<P> {
    type With<Q> = AlignmentMlps<Q>;

    fn map_named<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> AlignmentMlps<Q> {
        AlignmentMlps {
            visual: self.visual.map_named(&join(prefix, "visual"), f),
            audio: self.audio.map_named(&join(prefix, "audio"), f),
            text_v: self.text_v.map_named(&join(prefix, "text_v"), f),
            text_a: self.text_a.map_named(&join(prefix, "text_a"), f),
        }
    }

    fn for_each_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        self.visual.for_each_named_mut(&join(prefix, "visual"), f);
        self.audio.for_each_named_mut(&join(prefix, "audio"), f);
        self.text_v.for_each_named_mut(&join(prefix, "text_v"), f);
        self.text_a.for_each_named_mut(&join(prefix, "text_a"), f);
    }
}

/// Learnable temperatures stored as `log tau` (shape `[1]`) so they stay
/// positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Temperatures<P = Tensor> {
    pub log_tau_v: P,
    pub log_tau_a: P,
}

impl Temperatures {
    /// Both branches at temperature `tau`.
    pub fn uniform(tau: f64) -> Self {
        Self {
            log_tau_v: Tensor::scalar(tau.ln()),
            log_tau_a: Tensor::scalar(tau.ln()),
        }
    }
}

impl Default for Temperatures {
    fn default() -> Self {
        Self::uniform(INIT_TAU)
    }
}

impl<P> Named<P> for Temperatures<P> {
    type With<Q> = Temperatures<Q>;

    fn map_named<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Temperatures<Q> {
        Temperatures {
            log_tau_v: f(&join(prefix, "log_tau_v"), &self.log_tau_v),
            log_tau_a: f(&join(prefix, "log_tau_a"), &self.log_tau_a),
        }
    }

    fn for_each_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        f(&join(prefix, "log_tau_v"), &mut self.log_tau_v);
        f(&join(prefix, "log_tau_a"), &mut self.log_tau_a);
    }
}

/// `min(exp(-log_tau), 100)`.
pub fn logit_scale<'t>(log_tau: &Var<'t>) -> Result<Var<'t>> {
    log_tau.scale(-1.0)?.exp()?.clamp_max(MAX_LOGIT_SCALE)
}

/// A frozen logit scale for a fixed temperature.
pub fn fixed_scale(tape: &Tape, tau: f64) -> Result<Var<'_>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::NonPositiveTemperature(tau));
    }
    Ok(tape.constant(&Tensor::scalar((1.0 / tau).min(MAX_LOGIT_SCALE))))
}

/// Unit-norm embeddings `[N, D]` of the four branches.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingSet<'t> {
    pub e_v: Var<'t>,
    pub e_a: Var<'t>,
    pub t_v: Var<'t>,
    pub t_a: Var<'t>,
}

/// Projects token-mean-pooled features (one row per timestep) and the
/// matching text prototypes into the shared space and normalizes each row.
pub fn embed_modalities<'t>(
    v_feat: &TokenGrid<'t>,
    a_feat: &TokenGrid<'t>,
    text_v: &Var<'t>,
    text_a: &Var<'t>,
    mlps: &AlignmentMlps<Var<'t>>,
) -> Result<EmbeddingSet<'t>> {
    let n = v_feat.timesteps();
    for (name, rows) in [
        ("embed audio", a_feat.timesteps()),
        ("embed text_v", text_v.shape()[0]),
        ("embed text_a", text_a.shape()[0]),
    ] {
        if rows != n {
            return Err(shape_err(name, &[rows], &[n]));
        }
    }
    let d = mlps.visual.w2.shape()[1];
    let outs = [&mlps.audio, &mlps.text_v, &mlps.text_a].map(|m| m.w2.shape()[1]);
    if outs.iter().any(|&o| o != d) {
        return Err(shape_err("embed output dims", &outs, &[d]));
    }
    let e_v = mlps.visual.forward(&v_feat.tokens.mean_axis(1)?)?;
    let e_a = mlps.audio.forward(&a_feat.tokens.mean_axis(1)?)?;
    Ok(EmbeddingSet {
        e_v: e_v.normalize_rows()?,
        e_a: e_a.normalize_rows()?,
        t_v: mlps.text_v.forward(text_v)?.normalize_rows()?,
        t_a: mlps.text_a.forward(text_a)?.normalize_rows()?,
    })
}

/// Scaled similarity logits `scale * E T^T`, `[N, N]`.
pub fn similarity<'t>(e: &Var<'t>, t: &Var<'t>, scale: &Var<'t>) -> Result<Var<'t>> {
    if e.shape() != t.shape() || e.shape().len() != 2 {
        return Err(shape_err("similarity", &e.shape(), &t.shape()));
    }
    e.matmul(&t.transpose()?)?.hadamard(&scale.reshape(&[1, 1])?)
}

/// Symmetric negative log-likelihood of the diagonal pairing:
/// `-(1/2N) sum_i [log softmax_j(S_ij)_i + log softmax_j(S_ji)_i]`.
pub fn contrastive_loss<'t>(e: &Var<'t>, t: &Var<'t>, scale: &Var<'t>) -> Result<Var<'t>> {
    let sims = similarity(e, t, scale)?;
    diagonal_nll(&sims)
}

fn diagonal_nll<'t>(sims: &Var<'t>) -> Result<Var<'t>> {
    let n = sims.shape()[0];
    let diag: Vec<usize> = (0..n).collect();
    let forward = sims.log_softmax(1)?.pick(&diag)?.mean_all()?;
    let backward = sims.transpose()?.log_softmax(1)?.pick(&diag)?.mean_all()?;
    forward.add(&backward)?.scale(-0.5)
}

/// Convex weights of the visual-text and audio-text losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModalityWeights {
    pub w1: f64,
    pub w2: f64,
    pub y_v: f64,
    pub y_a: f64,
}

impl ModalityWeights {
    /// Weights from matching scores; equal split when both are zero.
    pub fn from_scores(y_v: f64, y_a: f64) -> Self {
        let total = y_v + y_a;
        let w1 = if total > 0.0 { y_v / total } else { 0.5 };
        Self {
            w1,
            w2: 1.0 - w1,
            y_v,
            y_a,
        }
    }
}

fn diagonal_probs(sims: &Tensor) -> Result<Vec<f64>> {
    match sims.shape() {
        &[r, c] if r == c => {
            let p = kernels::softmax(sims, 1)?;
            Ok((0..r).map(|i| p.data()[i * r + i]).collect())
        }
        other => Err(shape_err("matching score", other, &[other[0], other[0]])),
    }
}

/// Batch-level weights from the two `[N, N]` similarity logit matrices.
pub fn modality_weights(sim_v: &Tensor, sim_a: &Tensor) -> Result<ModalityWeights> {
    if sim_v.shape() != sim_a.shape() {
        return Err(shape_err("modality_weights", sim_v.shape(), sim_a.shape()));
    }
    let mean = |p: Vec<f64>| p.iter().sum::<f64>() / p.len() as f64;
    Ok(ModalityWeights::from_scores(
        mean(diagonal_probs(sim_v)?),
        mean(diagonal_probs(sim_a)?),
    ))
}

/// Per-row weights, used to mix the two branch predictions at inference.
pub fn sample_weights(sim_v: &Tensor, sim_a: &Tensor) -> Result<Vec<ModalityWeights>> {
    if sim_v.shape() != sim_a.shape() {
        return Err(shape_err("sample_weights", sim_v.shape(), sim_a.shape()));
    }
    let (pv, pa) = (diagonal_probs(sim_v)?, diagonal_probs(sim_a)?);
    Ok(pv
        .into_iter()
        .zip(pa)
        .map(|(y_v, y_a)| ModalityWeights::from_scores(y_v, y_a))
        .collect())
}

/// `w1 L_v + w2 L_a`.
pub fn combined_loss<'t>(l_v: &Var<'t>, l_a: &Var<'t>, w: &ModalityWeights) -> Result<Var<'t>> {
    if !(l_v.item().is_finite() && l_a.item().is_finite()) {
        return Err(Error::NonFinite("combined_loss"));
    }
    l_v.scale(w.w1)?.add(&l_a.scale(w.w2)?)
}

pub struct AlignmentLoss<'t> {
    pub loss: Var<'t>,
    pub l_v: Var<'t>,
    pub l_a: Var<'t>,
    pub weights: ModalityWeights,
}

/// Full objective over an embedding set with learnable temperatures. The
/// modality weights come from the current similarities unless `fixed` pins
/// them.
pub fn alignment_loss<'t>(
    emb: &EmbeddingSet<'t>,
    temps: &Temperatures<Var<'t>>,
    fixed: Option<ModalityWeights>,
) -> Result<AlignmentLoss<'t>> {
    let sim_v = similarity(&emb.e_v, &emb.t_v, &logit_scale(&temps.log_tau_v)?)?;
    let sim_a = similarity(&emb.e_a, &emb.t_a, &logit_scale(&temps.log_tau_a)?)?;
    let weights = match fixed {
        Some(w) => w,
        None => modality_weights(&sim_v.value(), &sim_a.value())?,
    };
    let l_v = diagonal_nll(&sim_v)?;
    let l_a = diagonal_nll(&sim_a)?;
    Ok(AlignmentLoss {
        loss: combined_loss(&l_v, &l_a, &weights)?,
        l_v,
        l_a,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pair_loss_is_zero() {
        let tape = Tape::new();
        let e = tape.constant(&Tensor::new(&[1, 2], vec![0.6, 0.8]).unwrap());
        let loss = contrastive_loss(&e, &e, &fixed_scale(&tape, 0.3).unwrap()).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn two_pair_closed_form() {
        let tape = Tape::new();
        let e = tape.constant(&Tensor::eye(2));
        let loss = contrastive_loss(&e, &e, &fixed_scale(&tape, 1.0).unwrap()).unwrap();
        assert!((loss.item() - 0.31326168751822286).abs() < 1e-15);
    }

    #[test]
    fn sharper_temperature_lowers_loss_on_correct_diagonal() {
        let tape = Tape::new();
        let e = tape.constant(&Tensor::eye(3));
        let at = |tau| {
            contrastive_loss(&e, &e, &fixed_scale(&tape, tau).unwrap())
                .unwrap()
                .item()
        };
        assert!(at(0.5) < at(1.0));
        assert!(at(0.01) < 1e-40);
    }

    #[test]
    fn non_positive_temperature_is_rejected() {
        let tape = Tape::new();
        assert_eq!(fixed_scale(&tape, 0.0).err(), Some(Error::NonPositiveTemperature(0.0)));
        assert!(fixed_scale(&tape, -1.0).is_err());
    }

    #[test]
    fn logit_scale_is_clamped() {
        let tape = Tape::new();
        let s = logit_scale(&tape.constant(&Tensor::scalar(-10.0))).unwrap();
        assert_eq!(s.item(), MAX_LOGIT_SCALE);
        let s = logit_scale(&tape.constant(&Tensor::scalar(INIT_TAU.ln()))).unwrap();
        assert!((s.item() - 1.0 / INIT_TAU).abs() < 1e-12);
    }

    #[test]
    fn weights_from_scores() {
        let w = ModalityWeights::from_scores(0.6, 0.2);
        assert!((w.w1 - 0.75).abs() < 1e-15);
        assert!((w.w2 - 0.25).abs() < 1e-15);
        assert_eq!(ModalityWeights::from_scores(0.3, 0.3).w1, 0.5);
        let zero = ModalityWeights::from_scores(0.0, 0.0);
        assert_eq!((zero.w1, zero.w2), (0.5, 0.5));
    }

    #[test]
    fn weights_from_identical_matrices_are_even() {
        let s = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.2, 0.7]).unwrap();
        let w = modality_weights(&s, &s).unwrap();
        assert_eq!((w.w1, w.w2), (0.5, 0.5));
        assert!(modality_weights(&s, &Tensor::eye(3)).is_err());
        assert_eq!(sample_weights(&s, &s).unwrap().len(), 2);
    }

    #[test]
    fn combined_loss_arithmetic() {
        let tape = Tape::new();
        let lv = tape.constant(&Tensor::scalar(0.4));
        let la = tape.constant(&Tensor::scalar(0.8));
        let w = ModalityWeights::from_scores(0.75, 0.25);
        assert!((combined_loss(&lv, &la, &w).unwrap().item() - 0.5).abs() < 1e-15);
        let one = ModalityWeights::from_scores(1.0, 0.0);
        assert_eq!(combined_loss(&lv, &la, &one).unwrap().item(), 0.4);
    }

    #[test]
    fn embedding_rows_are_unit_and_three_four_five() {
        let tape = Tape::new();
        let g = |t: Tensor| {
            TokenGrid::new(
                tape.constant(&t.reshape(&[1, 1, 1]).unwrap()),
                (1, 1),
                crate::patch::Modality::Visual,
            )
            .unwrap()
        };
        let (v, a) = (g(Tensor::scalar(1.0)), g(Tensor::scalar(1.0)));
        let mlp = ProjectionMlp {
            w1: Tensor::ones(&[1, 1]),
            b1: Tensor::zeros(&[1]),
            w2: Tensor::new(&[1, 2], vec![3.0, 4.0]).unwrap(),
            b2: Tensor::zeros(&[2]),
        };
        let mlps = AlignmentMlps {
            visual: mlp.clone(),
            audio: mlp.clone(),
            text_v: mlp.clone(),
            text_a: mlp,
        };
        let bound = crate::param::bind(&mlps, &tape, true);
        let text = tape.constant(&Tensor::ones(&[1, 1]));
        let emb = embed_modalities(&v, &a, &text, &text, &bound).unwrap();
        let e = emb.e_v.value();
        assert!((e.data()[0] - 0.6).abs() < 1e-15 && (e.data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_second_layer_cannot_normalize() {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::ones(&[2, 3]));
        let mut mlp = ProjectionMlp::init(3, 4, 2, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1));
        mlp.w2 = Tensor::zeros(&[4, 2]);
        let mlp = crate::param::bind(&mlp, &tape, true);
        let out = mlp.forward(&x).unwrap().normalize_rows();
        assert!(matches!(out, Err(Error::Normalization(_))));
    }
}
