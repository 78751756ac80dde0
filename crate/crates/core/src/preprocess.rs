//! Intensity normalisation, in-plane resampling to the common grid and
//! assembly of the multi-channel network inputs.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};

use crate::catalog::{AnnotationMask, SubjectRecord};
use crate::error::{Error, Result};
use crate::volume::{Spacing, Volume};

/// In-plane side of the common grid.
pub const COMMON_SIDE: usize = 512;

/// Z-score over every voxel of the volume (population standard deviation).
pub fn zscore_normalize(v: &Volume) -> Result<Volume> {
    if v.len() < 2 {
        return Err(Error::DegenerateVolume);
    }
    let n = v.len() as f64;
    let mean = v.data.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v
        .data
        .iter()
        .map(|&x| {
            let d = x as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    if !(var > 0.0) || !var.is_finite() {
        return Err(Error::DegenerateVolume);
    }
    let std = var.sqrt();
    Ok(Volume {
        data: v.data.mapv(|x| ((x as f64 - mean) / std) as f32),
        spacing: v.spacing,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Linear,
    Nearest,
}

impl fmt::Display for Interpolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Interpolation::Linear => "linear",
            Interpolation::Nearest => "nearest",
        })
    }
}

impl FromStr for Interpolation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Interpolation::Linear),
            "nearest" => Ok(Interpolation::Nearest),
            other => Err(Error::InvalidArgument(format!("unknown interpolation {other:?}"))),
        }
    }
}

/// In-plane resampling between a subject's native grid and the common grid.
/// Pixel centres are aligned (`x_target = (x_source + 0.5)·scale − 0.5`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResizeTransform {
    pub source: (usize, usize),
    pub target: (usize, usize),
    pub interpolation: Interpolation,
}

impl ResizeTransform {
    pub fn to_common(source: (usize, usize), interpolation: Interpolation) -> Self {
        Self {
            source,
            target: (COMMON_SIDE, COMMON_SIDE),
            interpolation,
        }
    }

    pub fn with_interpolation(self, interpolation: Interpolation) -> Self {
        Self { interpolation, ..self }
    }

    /// Source-per-target scale factors `(H / H', W / W')`.
    pub fn scale(&self) -> (f64, f64) {
        (
            self.source.0 as f64 / self.target.0 as f64,
            self.source.1 as f64 / self.target.1 as f64,
        )
    }

    pub fn forward_coord(&self, row: f64, col: f64) -> (f64, f64) {
        let (sy, sx) = self.scale();
        ((row + 0.5) / sy - 0.5, (col + 0.5) / sx - 0.5)
    }

    pub fn inverse_coord(&self, row: f64, col: f64) -> (f64, f64) {
        let (sy, sx) = self.scale();
        ((row + 0.5) * sy - 0.5, (col + 0.5) * sx - 0.5)
    }

    pub fn is_identity(&self) -> bool {
        self.source == self.target
    }

    /// Key-value lines for the run manifest.
    pub fn to_manifest_lines(&self, prefix: &str) -> Vec<String> {
        let (sy, sx) = self.scale();
        vec![
            format!("{prefix}.source = {}x{}", self.source.0, self.source.1),
            format!("{prefix}.target = {}x{}", self.target.0, self.target.1),
            format!("{prefix}.scale = {sy}x{sx}"),
            format!("{prefix}.interpolation = {}", self.interpolation),
        ]
    }

    pub fn from_manifest_lines(prefix: &str, map: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            map.get(&format!("{prefix}.{k}"))
                .ok_or_else(|| Error::InvalidArgument(format!("missing {prefix}.{k}")))
        };
        let pair = |s: &str| -> Result<(usize, usize)> {
            let (a, b) = s
                .split_once('x')
                .ok_or_else(|| Error::InvalidArgument(format!("bad shape {s:?}")))?;
            let p = |t: &str| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::InvalidArgument(format!("bad shape {s:?}: {e}")))
            };
            Ok((p(a)?, p(b)?))
        };
        Ok(Self {
            source: pair(get("source")?)?,
            target: pair(get("target")?)?,
            interpolation: get("interpolation")?.parse()?,
        })
    }
}

/// Nearest source index for output index `i` when resampling `n_in → n_out`.
#[inline]
pub(crate) fn nearest_index(i: usize, n_in: usize, n_out: usize) -> usize {
    let src = (i as f64 + 0.5) * n_in as f64 / n_out as f64;
    (src.floor() as usize).min(n_in - 1)
}

/// Linear sampling weights `(i0, i1, frac)` for output index `i`.
#[inline]
pub(crate) fn linear_weights(i: usize, n_in: usize, n_out: usize) -> (usize, usize, f32) {
    let src = (i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
    let src = src.clamp(0.0, (n_in - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, (src - i0 as f64) as f32)
}

/// Resamples one 2D plane.
pub fn resize_plane(src: ArrayView2<'_, f32>, out_shape: (usize, usize), interp: Interpolation) -> Array2<f32> {
    let (h, w) = src.dim();
    let (oh, ow) = out_shape;
    if (h, w) == (oh, ow) {
        return src.to_owned();
    }
    match interp {
        Interpolation::Nearest => {
            let cols: Vec<usize> = (0..ow).map(|x| nearest_index(x, w, ow)).collect();
            Array2::from_shape_fn((oh, ow), |(y, x)| src[[nearest_index(y, h, oh), cols[x]]])
        }
        Interpolation::Linear => {
            let cols: Vec<(usize, usize, f32)> = (0..ow).map(|x| linear_weights(x, w, ow)).collect();
            let mut out = Array2::<f32>::zeros((oh, ow));
            for y in 0..oh {
                let (y0, y1, fy) = linear_weights(y, h, oh);
                let r0 = src.row(y0);
                let r1 = src.row(y1);
                for (x, o) in out.row_mut(y).iter_mut().enumerate() {
                    let (x0, x1, fx) = cols[x];
                    let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                    let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                    *o = top + (bot - top) * fy;
                }
            }
            out
        }
    }
}

fn resample(v: &Volume, from: (usize, usize), to: (usize, usize), interp: Interpolation, what: &str) -> Result<Volume> {
    let [s, h, w] = v.shape();
    if (h, w) != from {
        return Err(Error::shape(what, &[s, from.0, from.1], &[s, h, w]));
    }
    if from == to {
        return Ok(v.clone());
    }
    let mut data = Array3::<f32>::zeros((s, to.0, to.1));
    let planes: Vec<Array2<f32>> =
        crate::exec::map_range(s, |z| resize_plane(v.slice(z), to, interp));
    for (z, p) in planes.into_iter().enumerate() {
        data.index_axis_mut(Axis(0), z).assign(&p);
    }
    let spacing = Spacing {
        dz: v.spacing.dz,
        dy: v.spacing.dy * from.0 as f64 / to.0 as f64,
        dx: v.spacing.dx * from.1 as f64 / to.1 as f64,
    };
    Ok(Volume { data, spacing })
}

/// Resamples a volume from `t.source` to `t.target` in-plane.
pub fn resize_inplane(v: &Volume, t: &ResizeTransform) -> Result<Volume> {
    resample(v, t.source, t.target, t.interpolation, "resize input")
}

/// Maps a volume on the common grid back to `t.source` (nearest-neighbour
/// unless the transform says otherwise).
pub fn invert_resize(prediction: &Volume, t: &ResizeTransform) -> Result<Volume> {
    resample(prediction, t.target, t.source, t.interpolation, "invert_resize input")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelKind {
    /// (T1, T2, T2*)
    DetectorInput,
    /// (T2* previous, T2* current, T2* next, stage-1 score)
    SegmenterInput,
}

impl ChannelKind {
    pub fn channels(self) -> usize {
        match self {
            ChannelKind::DetectorInput => 3,
            ChannelKind::SegmenterInput => 4,
        }
    }
}

/// A multi-channel 2D input `(channels, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStack {
    pub data: Array3<f32>,
    pub kind: ChannelKind,
}

impl ChannelStack {
    pub fn new(data: Array3<f32>, kind: ChannelKind) -> Result<Self> {
        if data.dim().0 != kind.channels() {
            return Err(Error::shape(
                "channel stack",
                &[kind.channels()],
                &[data.dim().0],
            ));
        }
        Ok(Self { data, kind })
    }

    pub fn hw(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }

    pub fn channel(&self, c: usize) -> ArrayView2<'_, f32> {
        self.data.index_axis(Axis(0), c)
    }
}

fn check_index(idx: usize, len: usize) -> Result<()> {
    if idx >= len {
        return Err(Error::IndexOutOfRange { index: idx, len });
    }
    Ok(())
}

/// Slice `idx` of the three modalities, ordered (T1, T2, T2*).
pub fn stack_detector_channels(t1: &Volume, t2: &Volume, t2s: &Volume, slice_idx: usize) -> Result<ChannelStack> {
    t1.ensure_same_shape(t2s, "T1 vs T2S")?;
    t2.ensure_same_shape(t2s, "T2 vs T2S")?;
    check_index(slice_idx, t2s.slices())?;
    let [_, h, w] = t2s.shape();
    let mut data = Array3::<f32>::zeros((3, h, w));
    for (c, v) in [t1, t2, t2s].into_iter().enumerate() {
        data.index_axis_mut(Axis(0), c).assign(&v.slice(slice_idx));
    }
    ChannelStack::new(data, ChannelKind::DetectorInput)
}

/// (T2*[i−1], T2*[i], T2*[i+1], stage1[i]); neighbours outside the volume
/// are blank.
pub fn assemble_segmenter_input(t2s: &Volume, stage1: &Volume, slice_idx: usize) -> Result<ChannelStack> {
    stage1.ensure_same_shape(t2s, "stage-1 vs T2S")?;
    let n = t2s.slices();
    check_index(slice_idx, n)?;
    let [_, h, w] = t2s.shape();
    let mut data = Array3::<f32>::zeros((4, h, w));
    if slice_idx > 0 {
        data.index_axis_mut(Axis(0), 0).assign(&t2s.slice(slice_idx - 1));
    }
    data.index_axis_mut(Axis(0), 1).assign(&t2s.slice(slice_idx));
    if slice_idx + 1 < n {
        data.index_axis_mut(Axis(0), 2).assign(&t2s.slice(slice_idx + 1));
    }
    data.index_axis_mut(Axis(0), 3).assign(&stage1.slice(slice_idx));
    ChannelStack::new(data, ChannelKind::SegmenterInput)
}

/// A subject normalised and resampled to the common grid, with the transform
/// needed to return predictions to the native grid.
#[derive(Debug, Clone)]
pub struct PreparedSubject {
    pub id: String,
    pub t1: Volume,
    pub t2: Volume,
    pub t2s: Volume,
    pub annotation: Option<Volume>,
    pub transform: ResizeTransform,
    pub native_shape: [usize; 3],
}

impl PreparedSubject {
    pub fn shape(&self) -> [usize; 3] {
        self.t2s.shape()
    }

    pub fn require_annotation(&self) -> Result<&Volume> {
        self.annotation
            .as_ref()
            .ok_or_else(|| Error::MissingAnnotation(self.id.clone()))
    }

    pub fn detector_input(&self, slice_idx: usize) -> Result<ChannelStack> {
        stack_detector_channels(&self.t1, &self.t2, &self.t2s, slice_idx)
    }
}

/// Z-score each modality, then resample images linearly and the annotation
/// by nearest neighbour onto the common grid.
pub fn prepare_subject(subject: &SubjectRecord, side: usize) -> Result<PreparedSubject> {
    let [_, h, w] = subject.shape();
    let t = ResizeTransform {
        source: (h, w),
        target: (side, side),
        interpolation: Interpolation::Linear,
    };
    let nn = t.with_interpolation(Interpolation::Nearest);
    let prep = |v: &Volume| -> Result<Volume> { resize_inplane(&zscore_normalize(v)?, &t) };
    let annotation = subject
        .annotation
        .as_ref()
        .map(|a: &AnnotationMask| resize_inplane(a.volume(), &nn))
        .transpose()?;
    Ok(PreparedSubject {
        id: subject.id.clone(),
        t1: prep(&subject.t1)?,
        t2: prep(&subject.t2)?,
        t2s: prep(&subject.t2s)?,
        annotation,
        transform: nn,
        native_shape: subject.shape(),
    })
}

/// Crops a `(c, h, w)` stack to the window at `(r0, c0)` of the given side.
pub(crate) fn crop_stack(data: &Array3<f32>, r0: usize, c0: usize, side_r: usize, side_c: usize) -> Array3<f32> {
    data.slice(s![.., r0..r0 + side_r, c0..c0 + side_c]).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vol(data: Array3<f32>) -> Volume {
        Volume::new(data, Spacing::new(3.0, 1.0, 1.0)).unwrap()
    }

    #[test]
    fn two_point_distribution_maps_to_unit() {
        let v = vol(Array3::from_shape_fn((1, 2, 2), |(_, y, _)| if y == 0 { 0.0 } else { 2.0 }));
        let z = zscore_normalize(&v).unwrap();
        for (&a, &b) in z.data.iter().zip(v.data.iter()) {
            assert_eq!(a, if b == 0.0 { -1.0 } else { 1.0 });
        }
    }

    #[test]
    fn constant_volume_is_degenerate() {
        let v = vol(Array3::from_elem((2, 3, 3), 4.0));
        assert!(matches!(zscore_normalize(&v), Err(Error::DegenerateVolume)));
    }

    #[test]
    fn identity_resize_is_bit_exact() {
        let v = vol(Array3::from_shape_fn((2, 512, 512), |(z, y, x)| (z + y * 3 + x) as f32 * 0.37));
        let t = ResizeTransform::to_common((512, 512), Interpolation::Linear);
        assert_eq!(resize_inplane(&v, &t).unwrap(), v);
    }

    #[test]
    fn resize_sets_shape_and_spacing() {
        let v = vol(Array3::from_elem((3, 128, 256), 1.0));
        let t = ResizeTransform::to_common((128, 256), Interpolation::Linear);
        let r = resize_inplane(&v, &t).unwrap();
        assert_eq!(r.shape(), [3, 512, 512]);
        assert_eq!(r.spacing, Spacing::new(3.0, 0.25, 0.5));
        let bad = ResizeTransform::to_common((100, 256), Interpolation::Linear);
        assert!(matches!(resize_inplane(&v, &bad), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn nearest_upsample_block_structure() {
        let mut a = Array2::<f32>::zeros((64, 64));
        a[[10, 10]] = 1.0;
        let up = resize_plane(a.view(), (256, 256), Interpolation::Nearest);
        let on: Vec<(usize, usize)> = up
            .indexed_iter()
            .filter(|(_, &v)| v != 0.0)
            .map(|(p, _)| p)
            .collect();
        assert_eq!(on.len(), 16);
        assert!(on.iter().all(|&(y, x)| (40..44).contains(&y) && (40..44).contains(&x)));
    }

    #[test]
    fn coordinate_map_round_trips() {
        let t = ResizeTransform::to_common((128, 200), Interpolation::Linear);
        for &(r, c) in &[(0.0, 0.0), (13.2, 77.9), (127.0, 199.0)] {
            let (a, b) = t.forward_coord(r, c);
            let (r2, c2) = t.inverse_coord(a, b);
            assert!((r2 - r).abs() < 0.5 && (c2 - c).abs() < 0.5);
        }
    }

    #[test]
    fn transform_manifest_round_trip() {
        let t = ResizeTransform::to_common((128, 96), Interpolation::Nearest);
        let map: BTreeMap<String, String> = t
            .to_manifest_lines("resize")
            .iter()
            .map(|l| {
                let (k, v) = l.split_once(" = ").unwrap();
                (k.to_string(), v.to_string())
            })
            .collect();
        assert_eq!(ResizeTransform::from_manifest_lines("resize", &map).unwrap(), t);
    }

    #[test]
    fn invert_resize_identity_and_zero() {
        let t = ResizeTransform {
            source: (512, 512),
            target: (512, 512),
            interpolation: Interpolation::Nearest,
        };
        let v = vol(Array3::from_shape_fn((1, 512, 512), |(_, y, x)| ((y * x) % 2) as f32));
        assert_eq!(invert_resize(&v, &t).unwrap(), v);
        let t = ResizeTransform::to_common((100, 100), Interpolation::Nearest);
        let z = vol(Array3::zeros((2, 512, 512)));
        let back = invert_resize(&z, &t).unwrap();
        assert_eq!(back.shape(), [2, 100, 100]);
        assert!(back.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn detector_stack_order_and_errors() {
        let mk = |k: f32| vol(Array3::from_shape_fn((3, 4, 4), |(z, y, x)| k + (z * 16 + y * 4 + x) as f32));
        let (t1, t2, t2s) = (mk(0.0), mk(100.0), mk(200.0));
        let st = stack_detector_channels(&t1, &t2, &t2s, 0).unwrap();
        assert_eq!(st.data.dim(), (3, 4, 4));
        assert_eq!(st.channel(2), t2s.slice(0));
        assert_eq!(st.channel(0), t1.slice(0));
        assert!(matches!(
            stack_detector_channels(&t1, &t2, &t2s, 3),
            Err(Error::IndexOutOfRange { index: 3, len: 3 })
        ));
        let other = vol(Array3::zeros((3, 4, 5)));
        assert!(stack_detector_channels(&other, &t2, &t2s, 0).is_err());
    }

    #[test]
    fn segmenter_input_blank_at_boundaries() {
        let t2s = vol(Array3::from_shape_fn((4, 3, 3), |(z, _, _)| 1.0 + z as f32));
        let s1 = vol(Array3::from_elem((4, 3, 3), 0.5));
        let first = assemble_segmenter_input(&t2s, &s1, 0).unwrap();
        assert!(first.channel(0).iter().all(|&v| v == 0.0));
        assert_eq!(first.channel(2), t2s.slice(1));
        let last = assemble_segmenter_input(&t2s, &s1, 3).unwrap();
        assert!(last.channel(2).iter().all(|&v| v == 0.0));
        let mid = assemble_segmenter_input(&t2s, &s1, 2).unwrap();
        assert_eq!(mid.channel(0), t2s.slice(1));
        assert_eq!(mid.channel(1), t2s.slice(2));
        assert_eq!(mid.channel(2), t2s.slice(3));
        assert_eq!(mid.channel(3), s1.slice(2));
        assert!(assemble_segmenter_input(&t2s, &s1, 4).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn zscore_moments_and_idempotence(vals in proptest::collection::vec(-1000.0f32..1000.0, 8..200)) {
            let n = vals.len();
            prop_assume!(vals.iter().any(|&v| (v - vals[0]).abs() > 1e-2));
            let v = vol(Array3::from_shape_vec((1, 1, n), vals).unwrap());
            let z = zscore_normalize(&v).unwrap();
            let mean = z.data.iter().map(|&x| x as f64).sum::<f64>() / n as f64;
            let sd = (z.data.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            prop_assert!(mean.abs() < 1e-6);
            prop_assert!((sd - 1.0).abs() < 1e-6);
            let zz = zscore_normalize(&z).unwrap();
            for (a, b) in z.data.iter().zip(zz.data.iter()) {
                prop_assert!((a - b).abs() < 1e-5);
            }
        }

        #[test]
        fn nearest_resize_keeps_binary(h in 4usize..40, w in 4usize..40, seed in any::<u64>(), side in 8usize..70) {
            let mut s = seed;
            let data = Array3::from_shape_fn((2, h, w), |_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 33) & 1) as f32
            });
            let v = vol(data);
            let t = ResizeTransform { source: (h, w), target: (side, side), interpolation: Interpolation::Nearest };
            prop_assert!(resize_inplane(&v, &t).unwrap().is_binary());
        }

        #[test]
        fn constant_image_stays_constant(c in -50.0f32..50.0, h in 2usize..30, side in 2usize..70) {
            let v = vol(Array3::from_elem((1, h, h), c));
            let t = ResizeTransform { source: (h, h), target: (side, side), interpolation: Interpolation::Linear };
            let r = resize_inplane(&v, &t).unwrap();
            prop_assert!(r.data.iter().all(|&x| (x - c).abs() <= 1e-5 * c.abs().max(1.0)));
        }

        #[test]
        fn segmenter_assembly_in_bounds(n in 1usize..12, idx in 0usize..16) {
            let t2s = vol(Array3::from_shape_fn((n, 5, 5), |(z, y, x)| (z * 25 + y * 5 + x) as f32));
            let s1 = vol(Array3::zeros((n, 5, 5)));
            let r = assemble_segmenter_input(&t2s, &s1, idx);
            prop_assert_eq!(r.is_ok(), idx < n);
        }
    }
}
