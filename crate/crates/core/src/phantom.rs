//! Synthetic multi-modal subjects: a bright brain ellipsoid on dark air with
//! small dark spherical lesions inside it, a bright scalp ring around it and
//! dark confounder arcs in that ring.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::catalog::{save_subject, AnnotationMask, SubjectRecord};
use crate::error::{Error, Result};
use crate::morphology::ball_offsets;
use crate::volume::{write_nifti, Spacing, StoredType, Volume};

const PLACEMENT_ATTEMPTS: usize = 100;
/// In-plane normalised radii bounding the scalp ring.
const SCALP_INNER: f64 = 1.18;
const SCALP_OUTER: f64 = 1.28;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    /// `(slices, rows, cols)`.
    pub shape: (usize, usize, usize),
    pub spacing: Spacing,
    /// Inclusive range of lesions per subject.
    pub lesion_count: (usize, usize),
    /// Inclusive range of lesion radii in voxels.
    pub lesion_radius: (usize, usize),
    /// Darkening at a lesion centre, in phantom intensity units.
    pub lesion_depth: f32,
    pub tissue_intensity: f32,
    pub confounder_count: usize,
    pub noise_sd: f32,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            shape: (16, 128, 128),
            spacing: Spacing::new(3.0, 1.0, 1.0),
            lesion_count: (2, 4),
            lesion_radius: (1, 3),
            lesion_depth: 3.0,
            tissue_intensity: 6.0,
            confounder_count: 3,
            noise_sd: 0.2,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let (s, h, w) = self.shape;
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if s < 8 || h < 8 || w < 8 {
            return bad(format!("phantom shape components must be >= 8, got {:?}", self.shape));
        }
        if self.lesion_radius.0 < 1 || self.lesion_radius.0 > self.lesion_radius.1 {
            return bad(format!("invalid lesion radius range {:?}", self.lesion_radius));
        }
        if self.lesion_count.0 > self.lesion_count.1 {
            return bad(format!("invalid lesion count range {:?}", self.lesion_count));
        }
        if !(self.lesion_depth > 0.0) {
            return bad(format!("lesion depth must be positive, got {}", self.lesion_depth));
        }
        if !(self.noise_sd >= 0.0) || !self.spacing.is_valid() {
            return bad("noise and spacing must be valid".into());
        }
        Ok(())
    }

    fn semi_axes(&self) -> [f64; 3] {
        let (s, h, w) = self.shape;
        [0.42 * s as f64, 0.34 * h as f64, 0.30 * w as f64]
    }

    fn centre(&self) -> [f64; 3] {
        let (s, h, w) = self.shape;
        [(s as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0]
    }

    /// Normalised ellipsoid radius of a voxel; `< 1` is inside the brain.
    fn brain_radius(&self, p: [f64; 3]) -> f64 {
        let (a, c) = (self.semi_axes(), self.centre());
        (0..3).map(|i| ((p[i] - c[i]) / a[i]).powi(2)).sum::<f64>().sqrt()
    }

    fn inplane_radius(&self, y: f64, x: f64) -> f64 {
        let (a, c) = (self.semi_axes(), self.centre());
        (((y - c[1]) / a[1]).powi(2) + ((x - c[2]) / a[2]).powi(2)).sqrt()
    }
}

/// One generated subject plus the voxels of its injected confounders.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub subject: SubjectRecord,
    pub confounders: Volume,
    /// `(centre, radius)` of every lesion, in placement order.
    pub lesions: Vec<([usize; 3], usize)>,
}

fn lesion_fits(spec: &PhantomSpec, c: [usize; 3], r: usize, placed: &[([usize; 3], usize)]) -> bool {
    let inside = ball_offsets(r + 1).iter().all(|o| {
        let p = [c[0] as f64 + o[0] as f64, c[1] as f64 + o[1] as f64, c[2] as f64 + o[2] as f64];
        spec.brain_radius(p) < 1.0
    });
    // centre distance > r1 + r2 + 2 keeps a gap of at least one voxel in
    // every axis, so the balls are not 26-adjacent
    inside
        && placed.iter().all(|(q, rq)| {
            let d2: f64 = (0..3).map(|i| (c[i] as f64 - q[i] as f64).powi(2)).sum();
            d2.sqrt() > (r + rq + 2) as f64
        })
}

pub fn generate_phantom(id: &str, spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let (s, h, w) = spec.shape;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let n_lesions = rng.gen_range(spec.lesion_count.0..=spec.lesion_count.1);
    let mut lesions: Vec<([usize; 3], usize)> = Vec::with_capacity(n_lesions);
    for k in 0..n_lesions {
        let r = rng.gen_range(spec.lesion_radius.0..=spec.lesion_radius.1);
        // centres whose per-axis distance from the brain centre leaves room
        // for the ball plus a one-voxel tissue shell
        let (axes, centre) = (spec.semi_axes(), spec.centre());
        let range: Vec<(usize, usize)> = (0..3)
            .map(|i| {
                let half = axes[i] - (r + 1) as f64;
                ((centre[i] - half).ceil().max(0.0) as usize, (centre[i] + half).floor().max(0.0) as usize)
            })
            .collect();
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            if range.iter().any(|&(lo, hi)| lo > hi) {
                break;
            }
            let c = [
                rng.gen_range(range[0].0..=range[0].1),
                rng.gen_range(range[1].0..=range[1].1),
                rng.gen_range(range[2].0..=range[2].1),
            ];
            if lesion_fits(spec, c, r, &lesions) {
                lesions.push((c, r));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::PlacementFailure {
                what: format!("lesion {} of radius {r} in {id}", k + 1),
                attempts: PLACEMENT_ATTEMPTS,
            });
        }
    }

    // Confounder arcs: angular sectors of the scalp ring over a few mid slices.
    let arcs: Vec<(usize, usize, f64, f64)> = (0..spec.confounder_count)
        .map(|_| {
            let z0 = rng.gen_range(s / 4..=(3 * s / 4).max(s / 4));
            let len = rng.gen_range(2..=4usize);
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let span = rng.gen_range(0.15..0.35);
            (z0, (z0 + len).min(s), theta, span)
        })
        .collect();

    let tissue = spec.tissue_intensity;
    let [_, cy, cx] = spec.centre();
    let mut clean = Array3::<f32>::zeros((s, h, w));
    let mut conf = Array3::<f32>::zeros((s, h, w));
    for ((z, y, x), v) in clean.indexed_iter_mut() {
        let (zf, yf, xf) = (z as f64, y as f64, x as f64);
        if spec.brain_radius([zf, yf, xf]) < 1.0 {
            let wobble = 0.3 * (std::f64::consts::TAU * yf / h as f64).sin() * (std::f64::consts::TAU * xf / w as f64).cos();
            *v = tissue + wobble as f32;
            continue;
        }
        let rn = spec.inplane_radius(yf, xf);
        if (SCALP_INNER..=SCALP_OUTER).contains(&rn) {
            *v = tissue;
            let angle = (yf - cy).atan2(xf - cx).rem_euclid(std::f64::consts::TAU);
            let in_band = (1.20..=1.26).contains(&rn);
            let hit = arcs.iter().any(|&(z0, z1, theta, span)| {
                let da = (angle - theta).rem_euclid(std::f64::consts::TAU);
                in_band && (z0..z1).contains(&z) && da <= span
            });
            if hit {
                *v = tissue - spec.lesion_depth;
                conf[[z, y, x]] = 1.0;
            }
        }
    }

    let mut annotation = Array3::<f32>::zeros((s, h, w));
    for &(c, r) in &lesions {
        let rf = r as f64;
        for o in ball_offsets(r) {
            let p = [
                (c[0] as isize + o[0]) as usize,
                (c[1] as isize + o[1]) as usize,
                (c[2] as isize + o[2]) as usize,
            ];
            let d = ((o[0] * o[0] + o[1] * o[1] + o[2] * o[2]) as f64).sqrt();
            let drop = spec.lesion_depth as f64 * (1.0 - 0.5 * (d / rf).powi(2));
            clean[p] -= drop as f32;
            annotation[p] = 1.0;
        }
    }

    let noise = Normal::new(0.0f32, spec.noise_sd).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut channel = |gain: f32| -> Array3<f32> { clean.mapv(|v| gain * v + noise.sample(&mut rng)) };
    let t2s = channel(1.0);
    let t1 = channel(0.7);
    let t2 = channel(1.3);

    let vol = |data| Volume { data, spacing: spec.spacing };
    let annotation = AnnotationMask::new(vol(annotation), id)?;
    let subject = SubjectRecord::new(id, vol(t1), vol(t2), vol(t2s), Some(annotation))?;
    Ok(Phantom {
        subject,
        confounders: vol(conf),
        lesions,
    })
}

/// Id of the `i`-th phantom subject (0-based).
pub fn phantom_id(i: usize) -> String {
    format!("{}", 9001 + i)
}

fn derived_seed(base: u64, i: usize) -> u64 {
    base ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub fn generate_cohort(n: usize, template: &PhantomSpec, base_seed: u64) -> Result<Vec<Phantom>> {
    if n == 0 {
        return Err(Error::InvalidArgument("phantom cohort size must be at least 1".into()));
    }
    let results = crate::exec::map_range(n, |i| {
        let spec = PhantomSpec {
            seed: derived_seed(base_seed, i),
            ..template.clone()
        };
        generate_phantom(&phantom_id(i), &spec)
    });
    results.into_iter().collect()
}

pub fn confounder_path(root: &Path, id: &str) -> PathBuf {
    root.join(id).join(format!("{id}_CONF.nii"))
}

/// Writes the subject in the standard layout plus `<id>_CONF.nii`.
pub fn save_phantom(root: &Path, phantom: &Phantom) -> Result<()> {
    save_subject(root, &phantom.subject)?;
    write_nifti(
        &confounder_path(root, &phantom.subject.id),
        &phantom.confounders,
        StoredType::Uint8,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphology::{label_components, Connectivity};

    fn small() -> PhantomSpec {
        PhantomSpec {
            shape: (16, 64, 64),
            seed: 5,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn exact_lesion_count_gives_that_many_components() {
        let spec = PhantomSpec {
            lesion_count: (3, 3),
            ..small()
        };
        let p = generate_phantom("9001", &spec).unwrap();
        let ann = p.subject.annotation.as_ref().unwrap().volume();
        assert_eq!(label_components(&ann.data, Connectivity::TwentySix).count(), 3);
        assert_eq!(label_components(&ann.data, Connectivity::Six).count(), 3);
    }

    #[test]
    fn same_seed_same_subject() {
        let a = generate_phantom("9001", &small()).unwrap();
        let b = generate_phantom("9001", &small()).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom("9001", &PhantomSpec { seed: 6, ..small() }).unwrap();
        assert_ne!(a.subject.t2s, c.subject.t2s);
    }

    #[test]
    fn lesion_centre_darker_than_its_shell() {
        let p = generate_phantom("9001", &PhantomSpec { lesion_count: (4, 4), ..small() }).unwrap();
        let t2s = &p.subject.t2s.data;
        for &(c, r) in &p.lesions {
            let shell: Vec<f32> = ball_offsets(r + 1)
                .into_iter()
                .filter(|o| o[0] * o[0] + o[1] * o[1] + o[2] * o[2] > (r * r) as isize)
                .map(|o| t2s[[(c[0] as isize + o[0]) as usize, (c[1] as isize + o[1]) as usize, (c[2] as isize + o[2]) as usize]])
                .collect();
            let mean = shell.iter().sum::<f32>() / shell.len() as f32;
            assert!(t2s[c] < mean, "centre {} vs shell {}", t2s[c], mean);
        }
    }

    #[test]
    fn placement_failure_when_no_room() {
        let spec = PhantomSpec {
            shape: (8, 8, 8),
            lesion_count: (1, 1),
            lesion_radius: (3, 3),
            ..PhantomSpec::default()
        };
        assert!(matches!(generate_phantom("9001", &spec), Err(Error::PlacementFailure { .. })));
    }

    #[test]
    fn cohort_ids_and_determinism() {
        let a = generate_cohort(3, &small(), 11).unwrap();
        assert_eq!(a.iter().map(|p| p.subject.id.as_str()).collect::<Vec<_>>(), ["9001", "9002", "9003"]);
        assert_ne!(a[0].subject.t2s, a[1].subject.t2s);
        assert_eq!(a, generate_cohort(3, &small(), 11).unwrap());
        assert!(generate_cohort(0, &small(), 11).is_err());
        let clean = generate_cohort(2, &PhantomSpec { lesion_count: (0, 0), ..small() }, 1).unwrap();
        assert!(clean.iter().all(|p| p.subject.annotation.as_ref().unwrap().volume().count_nonzero() == 0));
    }

    #[test]
    fn confounders_sit_outside_the_brain() {
        let spec = small();
        let p = generate_phantom("9001", &spec).unwrap();
        assert!(p.confounders.count_nonzero() > 0);
        for ((z, y, x), &v) in p.confounders.data.indexed_iter() {
            if v > 0.0 {
                assert!(spec.brain_radius([z as f64, y as f64, x as f64]) > 1.1);
            }
        }
    }
}
