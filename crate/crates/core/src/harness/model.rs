use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::synthetic::SyntheticPair;
use crate::dgsct::{DgSctHyper, DgSctParams};
use crate::encoder::{classify, stack_forward, DualEncoderStack, FrozenParams, HeadParams, StackOutput};
use crate::error::Result;
use crate::patch::{audio_patches, visual_patches, Modality, TokenGrid};
use crate::tensor::{Tape, Tensor, Var};

/// Builds the seeded stack described by `cfg`.
pub fn build_stack(cfg: &RunConfig) -> Result<DualEncoderStack> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    DualEncoderStack::init(cfg.stack_dims(), cfg.hyper(), &mut rng)
}

/// Raw patches of a clip, cut once and reused across training steps.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub visual: Tensor,
    pub audio: Tensor,
    pub visual_grid: (usize, usize),
    pub audio_grid: (usize, usize),
    pub labels: Vec<usize>,
}

pub fn prepare(cfg: &RunConfig, pair: &SyntheticPair) -> Result<Prepared> {
    let (visual, visual_grid) = visual_patches(&pair.visual, cfg.p_v)?;
    let (audio, audio_grid) = audio_patches(&pair.audio, cfg.p_a)?;
    Ok(Prepared {
        visual,
        audio,
        visual_grid,
        audio_grid,
        labels: pair.labels.clone(),
    })
}

/// Embedded token grids of a prepared clip.
pub fn embed<'t>(
    tape: &'t Tape,
    sample: &Prepared,
    frozen: &FrozenParams<Var<'t>>,
) -> Result<(TokenGrid<'t>, TokenGrid<'t>)> {
    let v = tape.constant(&sample.visual).matmul(&frozen.visual_embed)?;
    let a = tape.constant(&sample.audio).matmul(&frozen.audio_embed)?;
    Ok((
        TokenGrid::new(v, sample.visual_grid, Modality::Visual)?,
        TokenGrid::new(a, sample.audio_grid, Modality::Audio)?,
    ))
}

/// Logits `[T, K]` and the encoder outputs of one clip.
pub fn forward<'t>(
    tape: &'t Tape,
    sample: &Prepared,
    frozen: &FrozenParams<Var<'t>>,
    dgsct: &[DgSctParams<Var<'t>>],
    head: &HeadParams<Var<'t>>,
    hyper: &DgSctHyper,
) -> Result<(Var<'t>, StackOutput<'t>)> {
    let (v, a) = embed(tape, sample, frozen)?;
    let out = stack_forward(&v, &a, frozen, dgsct, hyper)?;
    let logits = classify(&out.v, &out.a, head)?;
    Ok((logits, out))
}

/// Index of the largest logit in each row.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    logits
        .rows()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
                .0
        })
        .collect()
}
