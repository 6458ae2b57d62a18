//! Patch tokenization of raw frames and mel-spectrograms.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Visual,
    Audio,
}

/// RGB frames, `[T, H, W, 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawVisualClip {
    pub frames: Tensor,
}

/// Log-mel energies, `[T, L, F]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawAudioClip {
    pub mel: Tensor,
}

/// Per-timestep tokens `[T, N, C]` laid out on a `rows x cols` grid.
#[derive(Debug, Clone, Copy)]
pub struct TokenGrid<'t> {
    pub tokens: Var<'t>,
    pub grid: (usize, usize),
    pub modality: Modality,
}

impl<'t> TokenGrid<'t> {
    pub fn new(tokens: Var<'t>, grid: (usize, usize), modality: Modality) -> Result<Self> {
        let shape = tokens.shape();
        if shape.len() != 3 || shape[1] != grid.0 * grid.1 {
            return Err(shape_err("TokenGrid", &shape, &[grid.0, grid.1]));
        }
        Ok(Self {
            tokens,
            grid,
            modality,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn num_tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn channels(&self) -> usize {
        self.tokens.shape()[2]
    }

    /// Same grid and modality, different token values.
    pub fn with_tokens(&self, tokens: Var<'t>) -> Result<Self> {
        Self::new(tokens, self.grid, self.modality)
    }
}

impl RawVisualClip {
    pub fn new(frames: Tensor) -> Result<Self> {
        match frames.shape() {
            [_, _, _, 3] => Ok(Self { frames }),
            other => Err(shape_err("RawVisualClip", other, &[0, 0, 0, 3])),
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.frames.shape();
        (s[0], s[1], s[2])
    }
}

impl RawAudioClip {
    pub fn new(mel: Tensor) -> Result<Self> {
        match mel.shape() {
            [_, _, _] => Ok(Self { mel }),
            other => Err(shape_err("RawAudioClip", other, &[0, 0, 0])),
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.mel.shape();
        (s[0], s[1], s[2])
    }
}

fn check_divisible(extent: usize, patch: usize) -> Result<()> {
    if patch == 0 || !extent.is_multiple_of(patch) {
        return Err(Error::IndivisibleExtent { extent, patch });
    }
    Ok(())
}

/// Cuts a `[T, rows, cols, depth]` array into non-overlapping `p x p` patches.
/// Output is `[T, (rows/p)*(cols/p), p*p*depth]`; tokens run row-major over
/// the patch grid and each token concatenates its pixels row-major, depth
/// innermost.
fn extract(data: &[f64], dims: [usize; 4], p: usize) -> Result<(Tensor, (usize, usize))> {
    let [t, rows, cols, depth] = dims;
    check_divisible(rows, p)?;
    check_divisible(cols, p)?;
    let (gr, gc) = (rows / p, cols / p);
    let width = p * p * depth;
    let mut out = Vec::with_capacity(t * gr * gc * width);
    for ti in 0..t {
        for pr in 0..gr {
            for pc in 0..gc {
                for y in 0..p {
                    let row = pr * p + y;
                    let start = ((ti * rows + row) * cols + pc * p) * depth;
                    out.extend_from_slice(&data[start..start + p * depth]);
                }
            }
        }
    }
    Ok((Tensor::new(&[t, gr * gc, width], out)?, (gr, gc)))
}

/// Inverse of [`extract`].
fn assemble(patches: &Tensor, dims: [usize; 4], p: usize) -> Tensor {
    let [t, rows, cols, depth] = dims;
    let (gr, gc) = (rows / p, cols / p);
    let mut out = vec![0.0; t * rows * cols * depth];
    let mut src = patches.data().iter();
    for ti in 0..t {
        for pr in 0..gr {
            for pc in 0..gc {
                for y in 0..p {
                    let row = pr * p + y;
                    let start = ((ti * rows + row) * cols + pc * p) * depth;
                    for slot in &mut out[start..start + p * depth] {
                        *slot = *src.next().expect("patch count matches");
                    }
                }
            }
        }
    }
    Tensor::raw(dims_shape(dims), out)
}

fn dims_shape(dims: [usize; 4]) -> Vec<usize> {
    if dims[3] == 1 {
        dims[..3].to_vec()
    } else {
        dims.to_vec()
    }
}

/// Raw visual patches `[T, N, p*p*3]` and the patch grid.
pub fn visual_patches(clip: &RawVisualClip, p: usize) -> Result<(Tensor, (usize, usize))> {
    let (t, h, w) = clip.dims();
    extract(clip.frames.data(), [t, h, w, 3], p)
}

/// Raw audio patches `[T, N, p*p]` and the patch grid.
pub fn audio_patches(clip: &RawAudioClip, p: usize) -> Result<(Tensor, (usize, usize))> {
    let (t, l, f) = clip.dims();
    extract(clip.mel.data(), [t, l, f, 1], p)
}

/// Reassembles frames from raw visual patches.
pub fn assemble_visual(patches: &Tensor, h: usize, w: usize, p: usize) -> Tensor {
    assemble(patches, [patches.shape()[0], h, w, 3], p)
}

/// Reassembles a mel-spectrogram from raw audio patches.
pub fn assemble_audio(patches: &Tensor, l: usize, f: usize, p: usize) -> Tensor {
    assemble(patches, [patches.shape()[0], l, f, 1], p)
}

fn embed<'t>(
    patches: Tensor,
    grid: (usize, usize),
    embed: &Var<'t>,
    modality: Modality,
) -> Result<TokenGrid<'t>> {
    let width = patches.shape()[2];
    if embed.shape().len() != 2 || embed.shape()[0] != width {
        return Err(shape_err("patch embed", patches.shape(), &embed.shape()));
    }
    let raw = embed.tape().constant(&patches);
    TokenGrid::new(raw.matmul(embed)?, grid, modality)
}

/// Splits each frame into `p x p` patches and embeds the flattened raw pixels
/// with `embed: [p*p*3, C_v]`.
pub fn patchify_visual<'t>(clip: &RawVisualClip, p: usize, embed_w: &Var<'t>) -> Result<TokenGrid<'t>> {
    let (patches, grid) = visual_patches(clip, p)?;
    embed(patches, grid, embed_w, Modality::Visual)
}

/// Splits each mel plane into `p x p` patches and embeds them with
/// `embed: [p*p, C_a]`.
pub fn patchify_audio<'t>(clip: &RawAudioClip, p: usize, embed_w: &Var<'t>) -> Result<TokenGrid<'t>> {
    let (patches, grid) = audio_patches(clip, p)?;
    embed(patches, grid, embed_w, Modality::Audio)
}
