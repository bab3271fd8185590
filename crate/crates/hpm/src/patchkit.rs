//! Visual signals to patch sequences and back, reconstruction targets, and
//! fixed sine/cosine positional embeddings.
//!
//! Canonical token ordering is frame-major, then row-major, then
//! column-major; inside a token the flattened block is frame, row, column,
//! channel. The ordering is a pure function of geometry so masks and
//! heatmaps stay portable across runs.

use crate::diffmath::Tensor;
use crate::error::{HpmError, Result};

/// Space-time patch grid over a T x H x W x C signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub spatial_patch: usize,
    pub temporal_patch: usize,
}

impl PatchGeometry {
    pub fn image(height: usize, width: usize, channels: usize, patch: usize) -> Self {
        PatchGeometry {
            frames: 1,
            height,
            width,
            channels,
            spatial_patch: patch,
            temporal_patch: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.frames > 0
            && self.height > 0
            && self.width > 0
            && self.channels > 0
            && self.spatial_patch > 0
            && self.temporal_patch > 0
            && self.frames.is_multiple_of(self.temporal_patch)
            && self.height.is_multiple_of(self.spatial_patch)
            && self.width.is_multiple_of(self.spatial_patch);
        if ok {
            Ok(())
        } else {
            Err(HpmError::Geometry(format!(
                "extents T={} H={} W={} not divisible by patch t={} P={}",
                self.frames, self.height, self.width, self.temporal_patch, self.spatial_patch
            )))
        }
    }

    /// Temporal token slices T / t.
    pub fn token_frames(&self) -> usize {
        self.frames / self.temporal_patch
    }

    pub fn grid_rows(&self) -> usize {
        self.height / self.spatial_patch
    }

    pub fn grid_cols(&self) -> usize {
        self.width / self.spatial_patch
    }

    pub fn patches_per_frame(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    /// N = (T/t) * (H/P) * (W/P).
    pub fn num_patches(&self) -> usize {
        self.token_frames() * self.patches_per_frame()
    }

    /// Flattened patch vector length t * P * P * C.
    pub fn token_len(&self) -> usize {
        self.temporal_patch * self.spatial_patch * self.spatial_patch * self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.frames * self.height * self.width * self.channels
    }

    /// Token index for a (token-frame, patch-row, patch-col) triple.
    pub fn token_index(&self, tf: usize, pr: usize, pc: usize) -> usize {
        (tf * self.grid_rows() + pr) * self.grid_cols() + pc
    }
}

/// Raw T x H x W x C signal with values in [0, 1], indexed
/// [frame, row, col, channel] row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualTensor {
    pub geometry: PatchGeometry,
    pub data: Vec<f64>,
}

impl VisualTensor {
    pub fn new(geometry: PatchGeometry, data: Vec<f64>) -> Result<Self> {
        geometry.validate()?;
        if data.len() != geometry.pixel_count() {
            return Err(HpmError::Geometry(format!(
                "data length {} does not match T*H*W*C = {}",
                data.len(),
                geometry.pixel_count()
            )));
        }
        Ok(VisualTensor { geometry, data })
    }

    pub fn zeros(geometry: PatchGeometry) -> Self {
        let n = geometry.pixel_count();
        VisualTensor { geometry, data: vec![0.0; n] }
    }

    #[inline]
    pub fn index(&self, f: usize, r: usize, c: usize, ch: usize) -> usize {
        ((f * self.geometry.height + r) * self.geometry.width + c) * self.geometry.channels + ch
    }

    pub fn get(&self, f: usize, r: usize, c: usize, ch: usize) -> f64 {
        self.data[self.index(f, r, c, ch)]
    }

    pub fn set(&mut self, f: usize, r: usize, c: usize, ch: usize, v: f64) {
        let i = self.index(f, r, c, ch);
        self.data[i] = v;
    }
}

/// N patch vectors in canonical ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    pub geometry: PatchGeometry,
    pub tokens: Tensor,
}

/// How reconstruction targets are produced from a patch sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TargetMode {
    RawPixels,
    /// Per-patch standardization only; no cross-patch statistics.
    NormalizedPixels { eps: f64 },
    /// l2-normalized teacher features.
    EmaFeatures { eps: f64 },
}

impl TargetMode {
    pub const DEFAULT_EPS: f64 = 1e-6;
}

/// Cut the signal into N flattened t x P x P x C blocks.
pub fn patchify(v: &VisualTensor, g: &PatchGeometry) -> Result<PatchSequence> {
    g.validate()?;
    if v.geometry != *g {
        return Err(HpmError::Geometry(format!(
            "visual tensor geometry {:?} does not match requested {:?}",
            v.geometry, g
        )));
    }
    let (p, t) = (g.spatial_patch, g.temporal_patch);
    let n = g.num_patches();
    let len = g.token_len();
    let mut tokens = vec![0.0; n * len];
    for tf in 0..g.token_frames() {
        for pr in 0..g.grid_rows() {
            for pc in 0..g.grid_cols() {
                let tok = g.token_index(tf, pr, pc);
                let base = tok * len;
                let mut k = 0;
                for df in 0..t {
                    for dr in 0..p {
                        for dc in 0..p {
                            for ch in 0..g.channels {
                                tokens[base + k] =
                                    v.get(tf * t + df, pr * p + dr, pc * p + dc, ch);
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(PatchSequence { geometry: *g, tokens: Tensor::from_rows(n, len, tokens)? })
}

/// Exact inverse of `patchify`.
pub fn unpatchify(p: &PatchSequence) -> Result<VisualTensor> {
    let g = p.geometry;
    g.validate()?;
    let n = g.num_patches();
    let len = g.token_len();
    if p.tokens.rows() != n || p.tokens.cols() != len {
        return Err(HpmError::Geometry(format!(
            "token matrix {:?} does not match geometry expecting {} x {}",
            p.tokens.shape(),
            n,
            len
        )));
    }
    let (ps, t) = (g.spatial_patch, g.temporal_patch);
    let mut out = VisualTensor::zeros(g);
    let tok_data = p.tokens.data();
    for tf in 0..g.token_frames() {
        for pr in 0..g.grid_rows() {
            for pc in 0..g.grid_cols() {
                let tok = g.token_index(tf, pr, pc);
                let base = tok * len;
                let mut k = 0;
                for df in 0..t {
                    for dr in 0..ps {
                        for dc in 0..ps {
                            for ch in 0..g.channels {
                                out.set(
                                    tf * t + df,
                                    pr * ps + dr,
                                    pc * ps + dc,
                                    ch,
                                    tok_data[base + k],
                                );
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Reconstruction targets per mode: identity, per-patch standardization, or
/// l2-normalized teacher features.
pub fn make_targets(
    p: &PatchSequence,
    mode: TargetMode,
    teacher_features: Option<&Tensor>,
) -> Result<Tensor> {
    match mode {
        TargetMode::RawPixels => Ok(p.tokens.clone()),
        TargetMode::NormalizedPixels { eps } => {
            let (n, d) = (p.tokens.rows(), p.tokens.cols());
            let src = p.tokens.data();
            let mut out = vec![0.0; n * d];
            for i in 0..n {
                let row = &src[i * d..(i + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let denom = var.sqrt().max(eps);
                for j in 0..d {
                    out[i * d + j] = (row[j] - mean) / denom;
                }
            }
            Tensor::from_rows(n, d, out)
        }
        TargetMode::EmaFeatures { eps } => {
            let feats = teacher_features.ok_or_else(|| {
                HpmError::Contract("ema_features target mode requires teacher features".into())
            })?;
            if feats.rows() != p.geometry.num_patches() {
                return Err(HpmError::Contract(format!(
                    "teacher features have {} rows, expected {}",
                    feats.rows(),
                    p.geometry.num_patches()
                )));
            }
            let (n, d) = (feats.rows(), feats.cols());
            let src = feats.data();
            let mut out = vec![0.0; n * d];
            for i in 0..n {
                let row = &src[i * d..(i + 1) * d];
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
                for j in 0..d {
                    out[i * d + j] = row[j] / norm;
                }
            }
            Tensor::from_rows(n, d, out)
        }
    }
}

/// Deterministic sine/cosine positional table, factored over (frame, row,
/// col) for clips and (row, col) for single-frame signals. Each axis gets
/// dim / naxes coordinates, half sines and half cosines, so dim must be
/// divisible by 2 * naxes.
pub fn sincos_embed(g: &PatchGeometry, dim: usize) -> Result<Tensor> {
    g.validate()?;
    let naxes = if g.token_frames() > 1 { 3 } else { 2 };
    if dim == 0 || !dim.is_multiple_of(2 * naxes) {
        return Err(HpmError::Config(format!(
            "positional dim {dim} must be divisible by {} ({} factored axes)",
            2 * naxes,
            naxes
        )));
    }
    let sub = dim / naxes;
    let half = sub / 2;
    let omega: Vec<f64> = (0..half)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / half as f64))
        .collect();
    let n = g.num_patches();
    let mut out = vec![0.0; n * dim];
    for tf in 0..g.token_frames() {
        for pr in 0..g.grid_rows() {
            for pc in 0..g.grid_cols() {
                let tok = g.token_index(tf, pr, pc);
                let row = &mut out[tok * dim..(tok + 1) * dim];
                let coords: &[usize] = if naxes == 3 { &[tf, pr, pc] } else { &[pr, pc] };
                for (ax, &pos) in coords.iter().enumerate() {
                    let base = ax * sub;
                    for (i, &om) in omega.iter().enumerate() {
                        let angle = pos as f64 * om;
                        row[base + i] = angle.sin();
                        row[base + half + i] = angle.cos();
                    }
                }
            }
        }
    }
    Tensor::from_rows(n, dim, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_visual(g: PatchGeometry, seed: u64) -> VisualTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..g.pixel_count()).map(|_| rng.gen_range(0.0..1.0)).collect();
        VisualTensor::new(g, data).unwrap()
    }

    #[test]
    fn video_patch_count_matches_grid() {
        // 16 x 224 x 224 input with 2 x 16 x 16 patches: 8 x 14 x 14 tokens.
        let g = PatchGeometry {
            frames: 16,
            height: 224,
            width: 224,
            channels: 3,
            spatial_patch: 16,
            temporal_patch: 2,
        };
        assert_eq!(g.num_patches(), 1568);
        assert_eq!(g.token_frames(), 8);
    }

    #[test]
    fn image_patch_counts() {
        let g = PatchGeometry::image(224, 224, 3, 16);
        assert_eq!(g.num_patches(), 196);
        let g = PatchGeometry::image(32, 32, 3, 8);
        assert_eq!(g.num_patches(), 16);
        assert_eq!(g.token_len(), 192);
    }

    #[test]
    fn non_divisible_extents_rejected() {
        let g = PatchGeometry::image(30, 32, 3, 8);
        let err = g.validate().unwrap_err();
        assert!(err.to_string().contains("30"), "{err}");
    }

    #[test]
    fn patchify_unpatchify_round_trip_bit_exact() {
        for g in [
            PatchGeometry::image(16, 24, 3, 8),
            PatchGeometry {
                frames: 4,
                height: 16,
                width: 16,
                channels: 2,
                spatial_patch: 8,
                temporal_patch: 2,
            },
        ] {
            let v = random_visual(g, 11);
            let p = patchify(&v, &g).unwrap();
            let back = unpatchify(&p).unwrap();
            assert_eq!(back.data, v.data);
        }
    }

    #[test]
    fn zero_tokens_give_zero_tensor() {
        let g = PatchGeometry::image(16, 16, 1, 8);
        let p = PatchSequence {
            geometry: g,
            tokens: Tensor::zeros(vec![g.num_patches(), g.token_len()]),
        };
        let v = unpatchify(&p).unwrap();
        assert!(v.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_patch_geometry_is_plain_reshape() {
        let g = PatchGeometry::image(4, 4, 1, 4);
        let v = random_visual(g, 3);
        let p = patchify(&v, &g).unwrap();
        assert_eq!(p.tokens.rows(), 1);
        assert_eq!(p.tokens.data(), v.data.as_slice());
    }

    #[test]
    fn pixel_permutation_inside_one_patch_is_local() {
        let g = PatchGeometry::image(16, 16, 1, 8);
        let v = random_visual(g, 5);
        let mut v2 = v.clone();
        // Swap two pixels inside patch (1,1); only token 3 may change.
        let a = v2.index(0, 9, 9, 0);
        let b = v2.index(0, 10, 12, 0);
        v2.data.swap(a, b);
        let p1 = patchify(&v, &g).unwrap();
        let p2 = patchify(&v2, &g).unwrap();
        let len = g.token_len();
        for tok in 0..g.num_patches() {
            let same = p1.tokens.data()[tok * len..(tok + 1) * len]
                == p2.tokens.data()[tok * len..(tok + 1) * len];
            assert_eq!(same, tok != 3, "token {tok}");
        }
    }

    #[test]
    fn normalized_targets_are_standardized() {
        let g = PatchGeometry::image(16, 16, 1, 8);
        let v = random_visual(g, 7);
        let p = patchify(&v, &g).unwrap();
        let t = make_targets(&p, TargetMode::NormalizedPixels { eps: 1e-6 }, None).unwrap();
        let d = t.cols();
        for i in 0..t.rows() {
            let row = &t.data()[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            assert!(mean.abs() < 1e-9, "row {i} mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "row {i} var {var}");
        }
    }

    #[test]
    fn constant_patch_normalizes_to_zero() {
        let g = PatchGeometry::image(8, 8, 1, 8);
        let v = VisualTensor::new(g, vec![0.75; 64]).unwrap();
        let p = patchify(&v, &g).unwrap();
        let t = make_targets(&p, TargetMode::NormalizedPixels { eps: 1e-6 }, None).unwrap();
        assert!(t.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn raw_targets_are_identity() {
        let g = PatchGeometry::image(16, 16, 3, 8);
        let v = random_visual(g, 9);
        let p = patchify(&v, &g).unwrap();
        let t = make_targets(&p, TargetMode::RawPixels, None).unwrap();
        assert_eq!(t.data(), p.tokens.data());
    }

    #[test]
    fn ema_targets_l2_normalize_teacher_rows() {
        let g = PatchGeometry::image(8, 8, 1, 8);
        let v = VisualTensor::new(g, vec![0.5; 64]).unwrap();
        let p = patchify(&v, &g).unwrap();
        let feats = Tensor::from_rows(1, 2, vec![3.0, 4.0]).unwrap();
        let t = make_targets(&p, TargetMode::EmaFeatures { eps: 1e-6 }, Some(&feats)).unwrap();
        assert!((t.data()[0] - 0.6).abs() < 1e-12);
        assert!((t.data()[1] - 0.8).abs() < 1e-12);
        assert!(make_targets(&p, TargetMode::EmaFeatures { eps: 1e-6 }, None).is_err());
    }

    #[test]
    fn sincos_rows_distinct_bounded_deterministic() {
        let g = PatchGeometry::image(32, 32, 3, 8);
        let e1 = sincos_embed(&g, 64).unwrap();
        let e2 = sincos_embed(&g, 64).unwrap();
        assert_eq!(e1.data(), e2.data());
        assert!(e1.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let d = e1.cols();
        for a in 0..e1.rows() {
            for b in (a + 1)..e1.rows() {
                let ra = &e1.data()[a * d..(a + 1) * d];
                let rb = &e1.data()[b * d..(b + 1) * d];
                assert!(ra != rb, "rows {a} and {b} identical");
            }
        }
    }

    #[test]
    fn sincos_dim_divisibility_enforced() {
        let g = PatchGeometry::image(32, 32, 3, 8);
        assert!(sincos_embed(&g, 30).is_err());
        let video = PatchGeometry {
            frames: 4,
            height: 16,
            width: 16,
            channels: 3,
            spatial_patch: 8,
            temporal_patch: 1,
        };
        assert!(sincos_embed(&video, 64).is_err()); // needs divisibility by 6
        assert!(sincos_embed(&video, 48).is_ok());
    }
}
