use dgsct::patch::{
    assemble_audio, assemble_visual, audio_patches, patchify_audio, patchify_visual, visual_patches,
    Modality, RawAudioClip, RawVisualClip,
};
use dgsct::{Error, Tape, Tensor};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
}

/// First `rows` rows of the `cols x cols` identity, as `[rows, cols]`.
fn identity_rows(rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(&[rows, cols], |i| if i / cols == i % cols { 1.0 } else { 0.0 }).unwrap()
}

#[test]
fn four_by_four_frame_gives_four_tokens_of_twelve_values() {
    let clip = RawVisualClip::new(random(&[1, 4, 4, 3], 1)).unwrap();
    let (patches, grid) = visual_patches(&clip, 2).unwrap();
    assert_eq!(grid, (2, 2));
    assert_eq!(patches.shape(), &[1, 4, 12]);
}

#[test]
fn identity_embedding_reproduces_raw_patches() {
    let clip = RawVisualClip::new(random(&[2, 4, 4, 3], 2)).unwrap();
    let tape = Tape::new();
    let grid = patchify_visual(&clip, 2, &tape.constant(&identity_rows(12, 12))).unwrap();
    let (patches, _) = visual_patches(&clip, 2).unwrap();
    assert_eq!(*grid.tokens.value(), patches);
    assert_eq!(grid.modality, Modality::Visual);
    assert_eq!((grid.timesteps(), grid.num_tokens(), grid.channels()), (2, 4, 12));
}

#[test]
fn zero_inputs_give_zero_tokens() {
    let tape = Tape::new();
    let frames = RawVisualClip::new(Tensor::zeros(&[1, 4, 4, 3])).unwrap();
    let v = patchify_visual(&frames, 2, &tape.constant(&random(&[12, 5], 3))).unwrap();
    assert_eq!(*v.tokens.value(), Tensor::zeros(&[1, 4, 5]));
    let mel = RawAudioClip::new(Tensor::zeros(&[1, 4, 4])).unwrap();
    let a = patchify_audio(&mel, 2, &tape.constant(&random(&[4, 3], 4))).unwrap();
    assert_eq!(*a.tokens.value(), Tensor::zeros(&[1, 4, 3]));
}

#[test]
fn four_by_four_mel_gives_four_tokens_of_four_values() {
    let clip = RawAudioClip::new(random(&[3, 4, 4], 5)).unwrap();
    let (patches, grid) = audio_patches(&clip, 2).unwrap();
    assert_eq!(grid, (2, 2));
    assert_eq!(patches.shape(), &[3, 4, 4]);
}

#[test]
fn full_plane_patch_gives_one_token_per_timestep() {
    let mel = random(&[2, 4, 4], 6);
    let clip = RawAudioClip::new(mel.clone()).unwrap();
    let (patches, grid) = audio_patches(&clip, 4).unwrap();
    assert_eq!(grid, (1, 1));
    assert_eq!(patches.shape(), &[2, 1, 16]);
    assert_eq!(patches.data(), mel.data());
}

#[test]
fn indivisible_extents_are_reported() {
    let tape = Tape::new();
    let frames = RawVisualClip::new(Tensor::zeros(&[1, 6, 4, 3])).unwrap();
    let err = patchify_visual(&frames, 4, &tape.constant(&Tensor::zeros(&[48, 2]))).unwrap_err();
    assert_eq!(err, Error::IndivisibleExtent { extent: 6, patch: 4 });
    let mel = RawAudioClip::new(Tensor::zeros(&[1, 4, 5])).unwrap();
    let err = patchify_audio(&mel, 2, &tape.constant(&Tensor::zeros(&[4, 2]))).unwrap_err();
    assert_eq!(err, Error::IndivisibleExtent { extent: 5, patch: 2 });
}

#[test]
fn embedding_receives_gradient() {
    let tape = Tape::new();
    let clip = RawAudioClip::new(Tensor::ones(&[1, 2, 2])).unwrap();
    let w = tape.param(&Tensor::zeros(&[4, 1]));
    let grid = patchify_audio(&clip, 2, &w).unwrap();
    let grads = tape.backward(grid.tokens.sum_all().unwrap()).unwrap();
    assert_eq!(grads.wrt(&w), Tensor::ones(&[4, 1]));
}

/// Swaps patch-grid cells `i` and `j` of every `[T, rows, cols, depth]` plane.
fn swap_patches(data: &Tensor, dims: [usize; 4], p: usize, i: usize, j: usize) -> Tensor {
    let [t, rows, cols, depth] = dims;
    let gc = cols / p;
    let mut out = data.data().to_vec();
    let at = |ti: usize, cell: usize, y: usize, x: usize, c: usize| {
        let (r, col) = ((cell / gc) * p + y, (cell % gc) * p + x);
        ((ti * rows + r) * cols + col) * depth + c
    };
    for ti in 0..t {
        for y in 0..p {
            for x in 0..p {
                for c in 0..depth {
                    out.swap(at(ti, i, y, x, c), at(ti, j, y, x, c));
                }
            }
        }
    }
    Tensor::new(data.shape(), out).unwrap()
}

fn config() -> Config {
    Config {
        cases: 64,
        rng_seed: RngSeed::Fixed(0xba7c),
        failure_persistence: None,
        ..Config::default()
    }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn visual_patches_round_trip(t in 1usize..=3, gr in 1usize..=3, gc in 1usize..=3, p in 1usize..=3, seed in any::<u64>()) {
        let (h, w) = (gr * p, gc * p);
        let frames = random(&[t, h, w, 3], seed);
        let clip = RawVisualClip::new(frames.clone()).unwrap();
        let (patches, grid) = visual_patches(&clip, p).unwrap();
        prop_assert_eq!(grid, (gr, gc));
        prop_assert_eq!(patches.shape(), &[t, gr * gc, p * p * 3]);
        prop_assert_eq!(assemble_visual(&patches, h, w, p), frames);
    }

    #[test]
    fn audio_patches_round_trip(t in 1usize..=3, gr in 1usize..=4, gc in 1usize..=4, p in 1usize..=3, seed in any::<u64>()) {
        let (l, f) = (gr * p, gc * p);
        let mel = random(&[t, l, f], seed);
        let clip = RawAudioClip::new(mel.clone()).unwrap();
        let (patches, grid) = audio_patches(&clip, p).unwrap();
        prop_assert_eq!(grid, (gr, gc));
        prop_assert_eq!(patches.shape(), &[t, gr * gc, p * p]);
        prop_assert_eq!(assemble_audio(&patches, l, f, p), mel);
    }

    #[test]
    fn swapping_two_patches_swaps_exactly_two_tokens(
        gr in 1usize..=3, gc in 2usize..=3, p in 1usize..=2, seed in any::<u64>(), pick in any::<(usize, usize)>()
    ) {
        let n = gr * gc;
        let (i, j) = (pick.0 % n, (pick.0 % n + 1 + pick.1 % (n - 1)) % n);
        let dims = [2, gr * p, gc * p, 3];
        let frames = random(&dims, seed);
        let swapped = swap_patches(&frames, dims, p, i, j);
        let tape = Tape::new();
        let embed = tape.constant(&random(&[p * p * 3, 4], seed ^ 7));
        let before = patchify_visual(&RawVisualClip::new(frames).unwrap(), p, &embed).unwrap().tokens.value();
        let after = patchify_visual(&RawVisualClip::new(swapped).unwrap(), p, &embed).unwrap().tokens.value();
        for ti in 0..2 {
            for k in 0..n {
                let src = if k == i { j } else if k == j { i } else { k };
                for c in 0..4 {
                    prop_assert_eq!(after.get(&[ti, k, c]), before.get(&[ti, src, c]));
                }
            }
        }
    }
}
