//! 16×16 patching of the spectrogram grid and mask-plan sampling.
//!
//! Patches are numbered in time-major raster order: patch `t * freq_patches + f`
//! covers frames `16t..16t+16` and mel bins `16f..16f+16`.

use std::fmt::Write as _;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PATCH: usize = 16;
pub const PATCH_DIM: usize = PATCH * PATCH;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub time_patches: usize,
    pub freq_patches: usize,
}

impl PatchGrid {
    pub fn new(time_patches: usize, freq_patches: usize) -> Self {
        Self { time_patches, freq_patches }
    }

    /// Grid tiling a `frames × mels` spectrogram.
    pub fn for_spectrogram(frames: usize, mels: usize) -> Result<Self> {
        if frames == 0 || mels == 0 || frames % PATCH != 0 || mels % PATCH != 0 {
            return Err(Error::Dim(format!(
                "spectrogram {frames}x{mels} is not tiled by {PATCH}x{PATCH} patches"
            )));
        }
        Ok(Self::new(frames / PATCH, mels / PATCH))
    }

    pub fn len(&self) -> usize {
        self.time_patches * self.freq_patches
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, time: usize, freq: usize) -> usize {
        time * self.freq_patches + freq
    }

    pub fn coords(&self) -> Vec<(usize, usize)> {
        (0..self.len()).map(|i| (i / self.freq_patches, i % self.freq_patches)).collect()
    }
}

/// Flattened patches plus their grid coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    pub grid: PatchGrid,
    /// `N × 256`, each row the raster flatten of one 16×16 block.
    pub features: Tensor,
    pub coords: Vec<(usize, usize)>,
}

pub fn patchify(spec: &MelSpectrogram) -> Result<PatchSequence> {
    let grid = PatchGrid::for_spectrogram(spec.frames, spec.mels)?;
    let mut data = Vec::with_capacity(spec.values.len());
    for t in 0..grid.time_patches {
        for f in 0..grid.freq_patches {
            for dt in 0..PATCH {
                let row = spec.frame(t * PATCH + dt);
                data.extend_from_slice(&row[f * PATCH..(f + 1) * PATCH]);
            }
        }
    }
    Ok(PatchSequence { grid, features: Tensor::matrix(grid.len(), PATCH_DIM, data)?, coords: grid.coords() })
}

pub fn unpatchify(seq: &PatchSequence) -> Result<MelSpectrogram> {
    let grid = seq.grid;
    if seq.features.shape() != [grid.len(), PATCH_DIM] {
        return Err(Error::Dim(format!(
            "patch features {:?} do not match a {}-patch grid",
            seq.features.shape(),
            grid.len()
        )));
    }
    let (frames, mels) = (grid.time_patches * PATCH, grid.freq_patches * PATCH);
    let mut values = vec![0.0; frames * mels];
    for (p, patch) in seq.features.data().chunks(PATCH_DIM).enumerate() {
        let (t, f) = (p / grid.freq_patches, p % grid.freq_patches);
        for dt in 0..PATCH {
            let dst = (t * PATCH + dt) * mels + f * PATCH;
            values[dst..dst + PATCH].copy_from_slice(&patch[dt * PATCH..(dt + 1) * PATCH]);
        }
    }
    MelSpectrogram::new(frames, mels, values)
}

/// Partition of patch indices into visible and masked sets, both sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub n: usize,
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
}

impl MaskPlan {
    /// Builds a plan from the masked indices; the rest are visible.
    pub fn from_masked(n: usize, masked: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut flags = vec![false; n];
        for i in masked {
            if i >= n {
                return Err(Error::Contract(format!("masked index {i} out of range for {n} patches")));
            }
            flags[i] = true;
        }
        let masked = (0..n).filter(|&i| flags[i]).collect();
        let visible = (0..n).filter(|&i| !flags[i]).collect();
        Ok(Self { n, visible, masked })
    }

    /// Plan with nothing masked.
    pub fn none(n: usize) -> Self {
        Self { n, visible: (0..n).collect(), masked: Vec::new() }
    }

    /// Realized mask ratio `|m| / N`.
    pub fn gamma(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.masked.len() as f64 / self.n as f64
        }
    }

    /// Position of each patch inside the concatenation `[visible; masked]`.
    pub fn restore_index(&self) -> Vec<usize> {
        let mut idx = vec![0; self.n];
        for (r, &i) in self.visible.iter().chain(&self.masked).enumerate() {
            idx[i] = r;
        }
        idx
    }

    /// Line-oriented text form: `N`, `gamma` and the masked indices.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "N {}", self.n);
        let _ = writeln!(s, "gamma {}", self.gamma());
        let _ = write!(s, "masked");
        for i in &self.masked {
            let _ = write!(s, " {i}");
        }
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut n = None;
        let mut masked = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let mut parts = line.split_whitespace();
            let bad = |what: &str| Error::Format(format!("mask plan: bad {what} line `{line}`"));
            match parts.next() {
                Some("N") => n = Some(parts.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad("N"))?),
                Some("gamma") => {}
                Some("masked") => {
                    masked = Some(parts.map(|p| p.parse::<usize>()).collect::<std::result::Result<Vec<_>, _>>().map_err(|_| bad("masked"))?)
                }
                _ => return Err(bad("unknown")),
            }
        }
        let n = n.ok_or_else(|| Error::Format("mask plan: missing N".into()))?;
        Self::from_masked(n, masked.unwrap_or_default())
    }
}

fn check_ratio(name: &str, r: f64) -> Result<()> {
    if !(0.0..1.0).contains(&r) {
        return Err(Error::Param(format!("{name} must lie in [0, 1), got {r}")));
    }
    Ok(())
}

/// `floor(ratio · n)`, robust to representation error in `ratio`.
fn mask_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64) + 1e-9).floor() as usize
}

/// Masks `floor(gamma·n)` indices drawn uniformly without replacement.
pub fn sample_unstructured_mask(n: usize, gamma: f64, seed: u64) -> Result<MaskPlan> {
    check_ratio("gamma", gamma)?;
    let k = mask_count(gamma, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = index::sample(&mut rng, n, k);
    MaskPlan::from_masked(n, picked.into_iter())
}

/// Masks `floor(time_ratio·T)` whole time steps and `floor(freq_ratio·F)`
/// whole frequency bands of the patch grid.
pub fn sample_structured_mask(grid: PatchGrid, time_ratio: f64, freq_ratio: f64, seed: u64) -> Result<MaskPlan> {
    check_ratio("time ratio", time_ratio)?;
    check_ratio("frequency ratio", freq_ratio)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let times = index::sample(&mut rng, grid.time_patches, mask_count(time_ratio, grid.time_patches)).into_vec();
    let freqs = index::sample(&mut rng, grid.freq_patches, mask_count(freq_ratio, grid.freq_patches)).into_vec();
    let masked = (0..grid.len()).filter(|&i| {
        let (t, f) = (i / grid.freq_patches, i % grid.freq_patches);
        times.contains(&t) || freqs.contains(&f)
    });
    MaskPlan::from_masked(grid.len(), masked)
}

/// Splits rows of `x` into `(rows at visible, rows at masked)`.
pub fn split_rows(x: &Tensor, plan: &MaskPlan) -> Result<(Tensor, Tensor)> {
    if x.shape().len() != 2 || x.rows() != plan.n {
        return Err(Error::Contract(format!(
            "tensor {:?} does not have the plan's {} rows",
            x.shape(),
            plan.n
        )));
    }
    Ok((x.gather_rows(&plan.visible)?, x.gather_rows(&plan.masked)?))
}

/// Visible and masked patch features.
pub fn partition(seq: &PatchSequence, plan: &MaskPlan) -> Result<(Tensor, Tensor)> {
    split_rows(&seq.features, plan)
}

/// Teacher targets at visible and masked positions.
pub fn split_targets(targets: &Tensor, plan: &MaskPlan) -> Result<(Tensor, Tensor)> {
    split_rows(targets, plan)
}

/// Inverse of [`split_rows`].
pub fn scatter_back(visible: &Tensor, masked: &Tensor, plan: &MaskPlan) -> Result<Tensor> {
    if visible.rows() != plan.visible.len() || masked.rows() != plan.masked.len() {
        return Err(Error::Contract(format!(
            "row counts {}/{} do not match plan {}/{}",
            visible.rows(),
            masked.rows(),
            plan.visible.len(),
            plan.masked.len()
        )));
    }
    let cols = if visible.rows() > 0 { visible.cols() } else { masked.cols() };
    let mut data = vec![0.0; plan.n * cols];
    for (r, &i) in plan.visible.iter().enumerate() {
        data[i * cols..(i + 1) * cols].copy_from_slice(visible.row(r));
    }
    for (r, &i) in plan.masked.iter().enumerate() {
        data[i * cols..(i + 1) * cols].copy_from_slice(masked.row(r));
    }
    Tensor::matrix(plan.n, cols, data)
}

/// Copy of `seq` with the masked patches set to zero.
pub fn zero_masked(seq: &PatchSequence, plan: &MaskPlan) -> Result<PatchSequence> {
    if plan.n != seq.grid.len() {
        return Err(Error::Contract(format!("plan for {} patches applied to {}", plan.n, seq.grid.len())));
    }
    let mut out = seq.clone();
    let data = out.features.data_mut();
    for &i in &plan.masked {
        data[i * PATCH_DIM..(i + 1) * PATCH_DIM].iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(frames: usize, f: impl Fn(usize, usize) -> f64) -> MelSpectrogram {
        let values = (0..frames * 128).map(|i| f(i / 128, i % 128)).collect();
        MelSpectrogram::new(frames, 128, values).unwrap()
    }

    #[test]
    fn full_grid_shape_and_round_trip() {
        let s = spec(1024, |t, m| (t * 131 + m) as f64 * 0.01);
        let seq = patchify(&s).unwrap();
        assert_eq!(seq.features.shape(), &[512, 256]);
        assert_eq!(seq.grid, PatchGrid::new(64, 8));
        assert_eq!(unpatchify(&seq).unwrap(), s);
        // patch 9 = time 1, freq 1; its first element is frame 16, bin 16
        assert_eq!(seq.features.row(9)[0], s.frame(16)[16]);
        assert_eq!(seq.coords[9], (1, 1));
    }

    #[test]
    fn constant_spectrogram_gives_identical_rows() {
        let seq = patchify(&spec(64, |_, _| -3.0)).unwrap();
        assert!((1..seq.grid.len()).all(|i| seq.features.row(i) == seq.features.row(0)));
    }

    #[test]
    fn patchify_rejects_ragged_grid() {
        assert!(patchify(&spec(100, |_, _| 0.0)).is_err());
    }

    #[test]
    fn unstructured_counts() {
        let p = sample_unstructured_mask(512, 0.2, 3).unwrap();
        assert_eq!((p.masked.len(), p.visible.len()), (102, 410));
        let p = sample_unstructured_mask(512, 0.0, 3).unwrap();
        assert!(p.masked.is_empty());
        assert_eq!(p.visible, (0..512).collect::<Vec<_>>());
        assert!(sample_unstructured_mask(512, 1.0, 0).is_err());
        assert!(sample_unstructured_mask(512, -0.1, 0).is_err());
        assert_eq!(sample_unstructured_mask(512, 0.4, 9).unwrap(), sample_unstructured_mask(512, 0.4, 9).unwrap());
    }

    #[test]
    fn structured_counts() {
        let g = PatchGrid::new(64, 8);
        let p = sample_structured_mask(g, 0.2, 0.2, 11).unwrap();
        assert_eq!(p.masked.len(), 148);
        assert!(sample_structured_mask(g, 0.0, 0.0, 1).unwrap().masked.is_empty());
        assert!(sample_structured_mask(g, 0.2, 1.0, 1).is_err());
    }

    #[test]
    fn structured_members_lie_on_selected_lines() {
        let g = PatchGrid::new(64, 8);
        for seed in 0..50 {
            let p = sample_structured_mask(g, 0.2, 0.2, seed).unwrap();
            let full_times: Vec<usize> =
                (0..64).filter(|&t| (0..8).all(|f| p.masked.contains(&g.index(t, f)))).collect();
            let full_freqs: Vec<usize> =
                (0..8).filter(|&f| (0..64).all(|t| p.masked.contains(&g.index(t, f)))).collect();
            assert_eq!(full_times.len(), 12);
            assert_eq!(full_freqs.len(), 1);
            for &i in &p.masked {
                let (t, f) = (i / 8, i % 8);
                assert!(full_times.contains(&t) || full_freqs.contains(&f));
            }
        }
    }

    #[test]
    fn small_split_example() {
        let t = Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap();
        let plan = MaskPlan::from_masked(2, [0]).unwrap();
        let (tv, tm) = split_targets(&t, &plan).unwrap();
        assert_eq!(tm.data(), &[1., 2.]);
        assert_eq!(tv.data(), &[3., 4.]);
        let (tv, tm) = split_targets(&t, &MaskPlan::none(2)).unwrap();
        assert_eq!(tv, t);
        assert_eq!(tm.rows(), 0);
        let bad = MaskPlan::none(3);
        assert!(split_targets(&t, &bad).is_err());
    }

    #[test]
    fn text_round_trip() {
        let p = sample_unstructured_mask(64, 0.3, 5).unwrap();
        assert_eq!(MaskPlan::from_text(&p.to_text()).unwrap(), p);
        assert!(MaskPlan::from_text("masked 1 2").is_err());
    }

    #[test]
    fn zeroing_only_touches_masked_patches() {
        let seq = patchify(&spec(64, |t, m| 1.0 + (t + m) as f64)).unwrap();
        let plan = sample_structured_mask(seq.grid, 0.25, 0.25, 2).unwrap();
        let z = zero_masked(&seq, &plan).unwrap();
        for i in 0..seq.grid.len() {
            let zeroed = z.features.row(i).iter().all(|&v| v == 0.0);
            assert_eq!(zeroed, plan.masked.contains(&i));
        }
    }

    proptest! {
        #[test]
        fn plans_partition_and_scatter_back(gamma in 0.0f64..0.95, seed in any::<u64>(), n in 1usize..300) {
            let plan = sample_unstructured_mask(n, gamma, seed).unwrap();
            prop_assert_eq!(plan.visible.len() + plan.masked.len(), n);
            prop_assert!(plan.visible.iter().all(|i| !plan.masked.contains(i)));
            prop_assert_eq!(plan.masked.len(), (gamma * n as f64 + 1e-9).floor() as usize);
            let x = Tensor::matrix(n, 3, (0..n * 3).map(|v| v as f64 * 0.5).collect()).unwrap();
            let (v, m) = split_rows(&x, &plan).unwrap();
            prop_assert_eq!(scatter_back(&v, &m, &plan).unwrap(), x);
        }
    }
}
