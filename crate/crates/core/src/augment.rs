//! Random affine warps (rotation, isotropic scale, translation) and
//! horizontal flips, applied identically to every image and mask plane of a
//! training sample.

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::preprocess::Interpolation;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    /// Rotation drawn from `±rotation_deg`.
    pub rotation_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Translation drawn from `±translation` voxels of the source grid.
    pub translation: f64,
    pub flip_probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_deg: 15.0,
            scale_min: 0.9,
            scale_max: 1.1,
            translation: 8.0,
            flip_probability: 0.5,
        }
    }
}

/// One draw of augmentation parameters. The forward map flips columns first,
/// then rotates clockwise (as displayed, rows pointing down) and scales about
/// the plane centre, then translates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub angle_deg: f64,
    pub scale: f64,
    pub shift: (f64, f64),
    pub flip: bool,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        angle_deg: 0.0,
        scale: 1.0,
        shift: (0.0, 0.0),
        flip: false,
    };

    /// `pixel_scale` converts the configured translation into pixels of the
    /// plane being warped (e.g. 4 for ×4-upsampled patches).
    pub fn sample<R: Rng>(cfg: &AugmentConfig, pixel_scale: f64, rng: &mut R) -> Self {
        let angle_deg = if cfg.rotation_deg > 0.0 {
            rng.gen_range(-cfg.rotation_deg..=cfg.rotation_deg)
        } else {
            0.0
        };
        let scale = if cfg.scale_max > cfg.scale_min {
            rng.gen_range(cfg.scale_min..=cfg.scale_max)
        } else {
            cfg.scale_min
        };
        let t = cfg.translation * pixel_scale;
        let shift = if t > 0.0 {
            (rng.gen_range(-t..=t), rng.gen_range(-t..=t))
        } else {
            (0.0, 0.0)
        };
        let flip = rng.gen_bool(cfg.flip_probability.clamp(0.0, 1.0));
        Self {
            angle_deg,
            scale,
            shift,
            flip,
        }
    }

    pub fn is_identity_warp(&self) -> bool {
        self.angle_deg == 0.0 && self.scale == 1.0 && self.shift == (0.0, 0.0)
    }

    /// Where the output pixel `(r, c)` reads from in the (unflipped) source.
    fn source_of(&self, r: f64, c: f64, h: usize, w: usize) -> (f64, f64) {
        let (cr, cc) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (th_s, th_c) = self.angle_deg.to_radians().sin_cos();
        let dr = r - cr - self.shift.0;
        let dc = c - cc - self.shift.1;
        // inverse rotation is the transpose
        let sr = (th_c * dr - th_s * dc) / self.scale;
        let sc = (th_s * dr + th_c * dc) / self.scale;
        let (pr, mut pc) = (cr + sr, cc + sc);
        if self.flip {
            pc = (w as f64 - 1.0) - pc;
        }
        (pr, pc)
    }

    /// Forward map of a source point, for geometry checks.
    pub fn map_point(&self, r: f64, c: f64, h: usize, w: usize) -> (f64, f64) {
        let (cr, cc) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let c = if self.flip { (w as f64 - 1.0) - c } else { c };
        let (th_s, th_c) = self.angle_deg.to_radians().sin_cos();
        let (dr, dc) = (r - cr, c - cc);
        let nr = self.scale * (th_c * dr + th_s * dc);
        let nc = self.scale * (-th_s * dr + th_c * dc);
        (cr + nr + self.shift.0, cc + nc + self.shift.1)
    }
}

fn flip_columns(src: ArrayView2<'_, f32>) -> Array2<f32> {
    let (h, w) = src.dim();
    Array2::from_shape_fn((h, w), |(y, x)| src[[y, w - 1 - x]])
}

/// Warps one plane. Images (`Linear`) clamp to the border; masks (`Nearest`)
/// read zero outside the source.
pub fn warp_plane(src: ArrayView2<'_, f32>, params: &AffineParams, interp: Interpolation) -> Array2<f32> {
    if params.is_identity_warp() {
        return if params.flip {
            flip_columns(src)
        } else {
            src.to_owned()
        };
    }
    warp_window(src, params, interp, (0, 0), src.dim())
}

/// The `size` window at `origin` of the full-plane warp, computed without
/// warping the rest of the plane.
pub fn warp_window(
    src: ArrayView2<'_, f32>,
    params: &AffineParams,
    interp: Interpolation,
    origin: (usize, usize),
    size: (usize, usize),
) -> Array2<f32> {
    let (h, w) = src.dim();
    let mut out = Array2::<f32>::zeros(size);
    for ((r, c), o) in out.indexed_iter_mut() {
        let (pr, pc) = params.source_of((origin.0 + r) as f64, (origin.1 + c) as f64, h, w);
        *o = match interp {
            Interpolation::Nearest => {
                let (ir, ic) = ((pr + 0.5).floor(), (pc + 0.5).floor());
                if ir < 0.0 || ic < 0.0 || ir >= h as f64 || ic >= w as f64 {
                    0.0
                } else {
                    src[[ir as usize, ic as usize]]
                }
            }
            Interpolation::Linear => {
                let pr = pr.clamp(0.0, (h - 1) as f64);
                let pc = pc.clamp(0.0, (w - 1) as f64);
                let (r0, c0) = (pr.floor() as usize, pc.floor() as usize);
                let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
                let (fr, fc) = ((pr - r0 as f64) as f32, (pc - c0 as f64) as f32);
                let top = src[[r0, c0]] + (src[[r0, c1]] - src[[r0, c0]]) * fc;
                let bot = src[[r1, c0]] + (src[[r1, c1]] - src[[r1, c0]]) * fc;
                top + (bot - top) * fr
            }
        };
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flip_is_an_involution() {
        let a = Array2::from_shape_fn((5, 7), |(y, x)| (y * 7 + x) as f32);
        let p = AffineParams {
            flip: true,
            ..AffineParams::IDENTITY
        };
        let once = warp_plane(a.view(), &p, Interpolation::Linear);
        assert_ne!(once, a);
        assert_eq!(warp_plane(once.view(), &p, Interpolation::Linear), a);
    }

    #[test]
    fn identity_returns_input() {
        let a = Array2::from_shape_fn((4, 4), |(y, x)| (y + 2 * x) as f32);
        assert_eq!(warp_plane(a.view(), &AffineParams::IDENTITY, Interpolation::Nearest), a);
    }

    #[test]
    fn quarter_turn_moves_top_to_right() {
        let mut m = Array2::<f32>::zeros((16, 16));
        m[[1, 7]] = 1.0;
        m[[1, 8]] = 1.0;
        let p = AffineParams {
            angle_deg: 90.0,
            ..AffineParams::IDENTITY
        };
        let r = warp_plane(m.view(), &p, Interpolation::Nearest);
        let on: Vec<_> = r.indexed_iter().filter(|(_, &v)| v > 0.0).map(|(q, _)| q).collect();
        assert_eq!(on, vec![(7, 14), (8, 14)]);
        // forward point map agrees with the warp
        let (a, b) = p.map_point(1.0, 7.0, 16, 16);
        assert!((a - 7.0).abs() < 1e-9 && (b - 14.0).abs() < 1e-9);
    }

    #[test]
    fn sampled_params_stay_in_range() {
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let p = AffineParams::sample(&cfg, 4.0, &mut rng);
            assert!(p.angle_deg.abs() <= 15.0);
            assert!((0.9..=1.1).contains(&p.scale));
            assert!(p.shift.0.abs() <= 32.0 && p.shift.1.abs() <= 32.0);
        }
    }

    #[test]
    fn window_matches_full_warp() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let src = Array2::from_shape_fn((20, 17), |(y, x)| (y * 17 + x) as f32);
        let p = AffineParams::sample(&AugmentConfig::default(), 1.0, &mut rng);
        for interp in [Interpolation::Linear, Interpolation::Nearest] {
            let full = warp_window(src.view(), &p, interp, (0, 0), (20, 17));
            let win = warp_window(src.view(), &p, interp, (3, 5), (9, 7));
            assert_eq!(win, full.slice(ndarray::s![3..12, 5..12]));
        }
    }
}
