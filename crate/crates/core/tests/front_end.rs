//! Front-end and masking properties over many draws.

use mamlab_core::dsp::{floor_value, log_mel_spectrogram, pad_to_grid, Waveform, ENERGY_FLOOR};
use mamlab_core::patching::{patchify, sample_structured_mask, sample_unstructured_mask, PatchGrid};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(-0.5..0.5)).collect()
}

#[test]
fn ten_second_clip_fills_the_full_grid() {
    let wave = Waveform::new(noise(160_000, 1), 16_000).unwrap();
    let spec = log_mel_spectrogram(&wave).unwrap();
    assert_eq!((spec.frames, spec.mels), (998, 128));
    let padded = pad_to_grid(&spec, 1024).unwrap();
    assert_eq!((padded.frames, padded.mels), (1024, 128));
    assert!(padded.values[998 * 128..].iter().all(|&v| v == floor_value()));
    let seq = patchify(&padded).unwrap();
    assert_eq!(seq.grid, PatchGrid::new(64, 8));
}

#[test]
fn silence_is_the_floor_everywhere() {
    let spec = log_mel_spectrogram(&Waveform::new(vec![0.0; 16_000], 16_000).unwrap()).unwrap();
    assert!(spec.values.iter().all(|&v| v == ENERGY_FLOOR.ln()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn amplitude_scaling_shifts_log_energy(c in 0.01f64..20.0, seed in 0u64..1000) {
        let base = noise(8000, seed);
        let a = log_mel_spectrogram(&Waveform::new(base.clone(), 16_000).unwrap()).unwrap();
        let b = log_mel_spectrogram(&Waveform::new(base.iter().map(|s| s * c).collect(), 16_000).unwrap()).unwrap();
        let floor = floor_value();
        let shift = 2.0 * c.ln();
        for (x, y) in a.values.iter().zip(&b.values) {
            if *x > floor && *y > floor {
                prop_assert!((y - x - shift).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn unstructured_masks_are_uniform_over_positions() {
    let n = 512;
    for gamma in [0.2, 0.4] {
        let mut hits = vec![0u32; n];
        let draws = 10_000;
        for seed in 0..draws {
            for &i in &sample_unstructured_mask(n, gamma, seed).unwrap().masked {
                hits[i] += 1;
            }
        }
        for (i, &h) in hits.iter().enumerate() {
            let freq = h as f64 / draws as f64;
            assert!((freq - gamma).abs() < 0.02, "gamma {gamma} index {i}: {freq}");
        }
    }
}

#[test]
fn structured_plans_mask_whole_rows_and_columns() {
    let grid = PatchGrid::new(64, 8);
    for seed in 0..200 {
        let plan = sample_structured_mask(grid, 0.2, 0.2, seed).unwrap();
        assert_eq!(plan.masked.len(), 148);
        let masked: std::collections::HashSet<usize> = plan.masked.iter().copied().collect();
        let full_times = (0..64).filter(|&t| (0..8).all(|f| masked.contains(&grid.index(t, f)))).count();
        let full_freqs = (0..8).filter(|&f| (0..64).all(|t| masked.contains(&grid.index(t, f)))).count();
        assert_eq!((full_times, full_freqs), (12, 1));
    }
    assert!(sample_structured_mask(grid, 0.0, 0.0, 1).unwrap().masked.is_empty());
}
