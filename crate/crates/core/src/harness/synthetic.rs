//! Seeded audio-visual event clips.
//!
//! Every clip contains one contiguous event segment covering half of its
//! timesteps (rounded up); the remaining timesteps carry background label
//! `K - 1`. An event of class `k` brightens a block of visual patches and a
//! frequency band whose positions together identify the class: the visual
//! block encodes `k / 2` and the band encodes `k % 2`. All classes plant
//! identical content, so only *where* the patterns sit identifies the class,
//! and neither modality resolves it alone once there are three or more
//! event classes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::RunConfig;
use crate::error::Result;
use crate::patch::{RawAudioClip, RawVisualClip};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub visual: RawVisualClip,
    pub audio: RawAudioClip,
    pub labels: Vec<usize>,
    pub event_mask: Vec<bool>,
}

/// Index offset of the held-out split.
pub const HELD_OUT_OFFSET: u64 = 1 << 32;

/// Stream seed of sample `index`: the run seed xor a spread of the index.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Position `group` of `groups` spread evenly over `slots` positions.
fn slot(group: usize, groups: usize, slots: usize) -> usize {
    group * slots / groups
}

/// Number of distinct visual block positions used by `events` classes.
pub fn visual_groups(events: usize) -> usize {
    events.div_ceil(2)
}

/// Number of distinct frequency bands used by `events` classes.
pub fn audio_groups(events: usize) -> usize {
    events.min(2)
}

/// Planted visual pattern of `class` for one frame, `[H, W, 3]`. The block
/// spans a quarter of the patch grid when there is room for every group,
/// and a single patch otherwise.
pub fn visual_pattern(cfg: &RunConfig, class: usize) -> Vec<f64> {
    let (rows, cols) = cfg.visual_grid();
    let groups = visual_groups(cfg.k - 1);
    let group = class / 2;
    let (bh, bw) = ((rows / 2).max(1), (cols / 2).max(1));
    let per_row = cols / bw;
    let blocks = (rows / bh) * per_row;
    let (r0, c0, bh, bw) = if groups <= blocks {
        let b = slot(group, groups, blocks);
        ((b / per_row) * bh, (b % per_row) * bw, bh, bw)
    } else {
        let pos = slot(group, groups, rows * cols);
        (pos / cols, pos % cols, 1, 1)
    };
    let mut frame = vec![0.0; cfg.h * cfg.w * 3];
    for y in r0 * cfg.p_v..(r0 + bh) * cfg.p_v {
        for x in c0 * cfg.p_v..(c0 + bw) * cfg.p_v {
            let at = (y * cfg.w + x) * 3;
            frame[at..at + 3].fill(cfg.signal);
        }
    }
    frame
}

/// Planted audio pattern of `class` for one mel plane, `[L, F]`: one band of
/// `P_a` frequency bins across every time row.
pub fn audio_pattern(cfg: &RunConfig, class: usize) -> Vec<f64> {
    let band = slot(class % 2, audio_groups(cfg.k - 1), cfg.audio_grid().1);
    let mut plane = vec![0.0; cfg.l * cfg.f];
    for row in plane.chunks_mut(cfg.f) {
        row[band * cfg.p_a..(band + 1) * cfg.p_a].fill(cfg.signal);
    }
    plane
}

fn noisy(len: usize, normal: Option<&Normal<f64>>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match normal {
        Some(n) => (0..len).map(|_| n.sample(rng)).collect(),
        None => vec![0.0; len],
    }
}

/// Generates sample `index` of the stream defined by `cfg.seed`.
pub fn generate_pair(cfg: &RunConfig, index: u64) -> Result<SyntheticPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, index));
    let events = cfg.k - 1;
    let class = rng.gen_range(0..events);
    let len = cfg.t.div_ceil(2);
    let start = rng.gen_range(0..=cfg.t - len);
    let event_mask: Vec<bool> = (0..cfg.t).map(|t| (start..start + len).contains(&t)).collect();
    let labels = event_mask
        .iter()
        .map(|&e| if e { class } else { cfg.k - 1 })
        .collect();

    let normal = (cfg.noise > 0.0)
        .then(|| Normal::new(0.0, cfg.noise).expect("validated noise"));
    let frame_len = cfg.h * cfg.w * 3;
    let plane_len = cfg.l * cfg.f;
    let mut frames = noisy(cfg.t * frame_len, normal.as_ref(), &mut rng);
    let mut mel = noisy(cfg.t * plane_len, normal.as_ref(), &mut rng);
    let vp = visual_pattern(cfg, class);
    let ap = audio_pattern(cfg, class);
    for (t, _) in event_mask.iter().enumerate().filter(|(_, e)| **e) {
        for (x, p) in frames[t * frame_len..(t + 1) * frame_len].iter_mut().zip(&vp) {
            *x += p;
        }
        for (x, p) in mel[t * plane_len..(t + 1) * plane_len].iter_mut().zip(&ap) {
            *x += p;
        }
    }
    Ok(SyntheticPair {
        visual: RawVisualClip::new(Tensor::new(&[cfg.t, cfg.h, cfg.w, 3], frames)?)?,
        audio: RawAudioClip::new(Tensor::new(&[cfg.t, cfg.l, cfg.f], mel)?)?,
        labels,
        event_mask,
    })
}

/// Samples `start .. start + n` of the seeded stream.
pub fn generate_range(cfg: &RunConfig, start: u64, n: usize) -> Result<Vec<SyntheticPair>> {
    cfg.validate()?;
    (0..n as u64).map(|i| generate_pair(cfg, start + i)).collect()
}

/// The first `n` training pairs.
pub fn generate_synthetic_pairs(cfg: &RunConfig, n: usize) -> Result<Vec<SyntheticPair>> {
    generate_range(cfg, 0, n)
}
