//! Stage 1: candidate detection on ×4-upsampled 64×64 patches, and tiled
//! whole-slice inference that turns instance predictions into a per-voxel
//! score map.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{warp_plane, AffineParams, AugmentConfig};
use crate::error::{Error, Result};
use crate::exec;
use crate::morphology::{label_components, label_components_2d, Connectivity};
use crate::nn::{
    mean_grads, read_convs_into, read_u32, relu_backward_inplace, relu_inplace, sigmoid, upsample_nearest,
    upsample_nearest_backward, weighted_bce_with_logits, write_convs, write_u32, zero_grads, Adam, Conv, ConvGrad,
    ConvKind, Tensor, UNet,
};
use crate::preprocess::{crop_stack, resize_plane, ChannelKind, ChannelStack, Interpolation, PreparedSubject};
use crate::volume::Volume;

/// Side of the upsampled patch every backend sees.
pub const PATCH_INPUT_SIDE: usize = 256;
pub const MAX_POS_WEIGHT: f32 = 1000.0;
const AUGMENT_TRIES: usize = 10;
const NEGATIVE_ATTEMPTS: usize = 200;

/// Axis-aligned rectangle, half-open: rows `r0..r1`, cols `c0..c1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoxRect {
    pub r0: usize,
    pub c0: usize,
    pub r1: usize,
    pub c1: usize,
}

impl BoxRect {
    pub fn scaled(self, f: usize) -> Self {
        Self {
            r0: self.r0 * f,
            c0: self.c0 * f,
            r1: self.r1 * f,
            c1: self.c1 * f,
        }
    }

    /// Tight box around the nonzero pixels, if any.
    pub fn of_mask(mask: ArrayView2<'_, f32>) -> Option<Self> {
        let mut b: Option<Self> = None;
        for ((y, x), &v) in mask.indexed_iter() {
            if v != 0.0 {
                b = Some(match b {
                    None => Self { r0: y, c0: x, r1: y + 1, c1: x + 1 },
                    Some(b) => Self {
                        r0: b.r0.min(y),
                        c0: b.c0.min(x),
                        r1: b.r1.max(y + 1),
                        c1: b.c1.max(x + 1),
                    },
                });
            }
        }
        b
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.r0..self.r1).contains(&y) && (self.c0..self.c1).contains(&x)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchOrigin {
    pub subject: String,
    pub slice: usize,
    pub row: usize,
    pub col: usize,
}

/// One training patch after upsampling: image `(3, 256, 256)`, one box and
/// binary mask per lesion instance.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub image: ChannelStack,
    pub boxes: Vec<BoxRect>,
    pub instance_masks: Vec<Array2<f32>>,
    pub source: PatchOrigin,
}

impl PatchSample {
    pub fn side(&self) -> usize {
        self.image.hw().0
    }

    /// Union of the instance masks.
    pub fn target(&self) -> Array2<f32> {
        let n = self.side();
        let mut t = Array2::<f32>::zeros((n, n));
        for m in &self.instance_masks {
            t.zip_mut_with(m, |a, &b| *a = a.max(b));
        }
        t
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image.hw();
        if self.image.kind != ChannelKind::DetectorInput || h != PATCH_INPUT_SIDE || w != PATCH_INPUT_SIDE {
            return Err(Error::shape("patch image", &[3, PATCH_INPUT_SIDE, PATCH_INPUT_SIDE], self.image.data.shape()));
        }
        if self.boxes.len() != self.instance_masks.len() {
            return Err(Error::InvalidArgument("one box per instance mask required".into()));
        }
        for (b, m) in self.boxes.iter().zip(&self.instance_masks) {
            if b.r1 > h || b.c1 > w || b.r0 >= b.r1 || b.c0 >= b.c1 {
                return Err(Error::InvalidArgument(format!("box {b:?} outside the patch")));
            }
            if m.dim() != (h, w) {
                return Err(Error::shape("instance mask", &[h, w], m.shape()));
            }
            let mut any = false;
            for ((y, x), &v) in m.indexed_iter() {
                if v != 0.0 {
                    any = true;
                    if !b.contains(y, x) {
                        return Err(Error::InvalidArgument(format!("instance mask leaves its box {b:?}")));
                    }
                }
            }
            if !any {
                return Err(Error::InvalidArgument("empty instance mask".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorHyperparams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patch_side: usize,
    pub upsample_factor: usize,
    pub negatives_per_positive: usize,
    /// Maximum offset of a positive window from the lesion centroid.
    pub jitter: usize,
    pub tile_stride: usize,
    pub augment: AugmentConfig,
}

impl Default for DetectorHyperparams {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 6,
            learning_rate: 5e-6,
            patch_side: 64,
            upsample_factor: 4,
            negatives_per_positive: 1,
            jitter: 16,
            tile_stride: 32,
            augment: AugmentConfig::default(),
        }
    }
}

impl DetectorHyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patch_side == 0 || self.upsample_factor == 0 || self.tile_stride == 0 {
            return Err(Error::InvalidArgument("detector sizes must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!("detector learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.patch_side * self.upsample_factor != PATCH_INPUT_SIDE {
            return Err(Error::InvalidArgument(format!(
                "patch side × upsample factor must be {PATCH_INPUT_SIDE}, got {} × {}",
                self.patch_side, self.upsample_factor
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplingPolicy {
    pub negatives_per_positive: usize,
    pub jitter: usize,
    /// Whether a subject without lesions may contribute negatives only.
    pub allow_negative_only: bool,
}

impl SamplingPolicy {
    pub fn from_hyperparams(hp: &DetectorHyperparams) -> Self {
        Self {
            negatives_per_positive: hp.negatives_per_positive,
            jitter: hp.jitter,
            allow_negative_only: true,
        }
    }
}

/// Linear upsampling for image channels of a `(c, n, n)` patch.
pub fn upsample_patch(patch: &Array3<f32>, factor: usize) -> Result<Array3<f32>> {
    let (c, h, w) = patch.dim();
    if h != w || h * factor != PATCH_INPUT_SIDE {
        return Err(Error::shape("patch", &[c, PATCH_INPUT_SIDE / factor.max(1), PATCH_INPUT_SIDE / factor.max(1)], &[c, h, w]));
    }
    let n = h * factor;
    let mut out = Array3::<f32>::zeros((c, n, n));
    for ch in 0..c {
        let up = resize_plane(patch.index_axis(Axis(0), ch), (n, n), Interpolation::Linear);
        out.index_axis_mut(Axis(0), ch).assign(&up);
    }
    Ok(out)
}

/// Nearest-neighbour upsampling for mask targets.
pub fn upsample_mask(mask: ArrayView2<'_, f32>, factor: usize) -> Array2<f32> {
    let (h, w) = mask.dim();
    resize_plane(mask, (h * factor, w * factor), Interpolation::Nearest)
}

/// Origin that keeps a `side` window inside `len`, shifting if needed.
fn clamp_origin(start: isize, side: usize, len: usize) -> usize {
    start.clamp(0, len.saturating_sub(side) as isize) as usize
}

/// Builds the upsampled sample for the window at `(r0, c0)` of `slice`.
/// Every annotated 2D component touching the window becomes an instance.
pub fn patch_at(subject: &PreparedSubject, slice: usize, r0: usize, c0: usize, hp: &DetectorHyperparams) -> Result<PatchSample> {
    let side = hp.patch_side;
    let stack = subject.detector_input(slice)?;
    let image = upsample_patch(&crop_stack(&stack.data, r0, c0, side, side), hp.upsample_factor)?;
    let mut boxes = Vec::new();
    let mut instance_masks = Vec::new();
    if let Some(ann) = &subject.annotation {
        let window = ann.data.slice(s![slice, r0..r0 + side, c0..c0 + side]);
        let (labels, count) = label_components_2d(&window.mapv(|v| u8::from(v != 0.0)), true);
        for k in 1..=count as u32 {
            let m = labels.mapv(|l| if l == k { 1.0f32 } else { 0.0 });
            let up = upsample_mask(m.view(), hp.upsample_factor);
            if let Some(b) = BoxRect::of_mask(up.view()) {
                boxes.push(b);
                instance_masks.push(up);
            }
        }
    }
    Ok(PatchSample {
        image: ChannelStack::new(image, ChannelKind::DetectorInput)?,
        boxes,
        instance_masks,
        source: PatchOrigin {
            subject: subject.id.clone(),
            slice,
            row: r0,
            col: c0,
        },
    })
}

/// One positive patch per annotated 3D lesion around its centroid (with
/// jitter), plus `negatives_per_positive` lesion-free windows centred on
/// above-mean T2* voxels.
pub fn extract_training_patches<R: Rng>(
    subject: &PreparedSubject,
    hp: &DetectorHyperparams,
    policy: &SamplingPolicy,
    rng: &mut R,
) -> Result<Vec<PatchSample>> {
    let ann = subject.require_annotation()?;
    let [s, h, w] = subject.shape();
    let side = hp.patch_side;
    if h < side || w < side {
        return Err(Error::shape("detector input slice", &[s, side, side], &[s, h, w]));
    }
    let lesions = label_components(&ann.data, Connectivity::TwentySix);
    if lesions.count() == 0 && !policy.allow_negative_only {
        return Err(Error::NoLesions(subject.id.clone()));
    }
    let mut out = Vec::new();
    let j = policy.jitter as isize;
    for lesion in &lesions.lesions {
        // the centroid's slice, or the lesion's widest slice if that misses it
        let z = lesion.centroid[0].round() as usize;
        let on_z: Vec<&[usize; 3]> = lesion.voxels.iter().filter(|v| v[0] == z).collect();
        let (z, pts) = if on_z.is_empty() {
            let mut per: std::collections::BTreeMap<usize, Vec<&[usize; 3]>> = Default::default();
            for v in &lesion.voxels {
                per.entry(v[0]).or_default().push(v);
            }
            let (z, pts) = per.into_iter().max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(&a.0))).expect("nonempty lesion");
            (z, pts)
        } else {
            (z, on_z)
        };
        let n = pts.len() as f64;
        let cy = pts.iter().map(|v| v[1] as f64).sum::<f64>() / n;
        let cx = pts.iter().map(|v| v[2] as f64).sum::<f64>() / n;
        let (ymin, ymax) = (pts.iter().map(|v| v[1]).min().unwrap(), pts.iter().map(|v| v[1]).max().unwrap());
        let (xmin, xmax) = (pts.iter().map(|v| v[2]).min().unwrap(), pts.iter().map(|v| v[2]).max().unwrap());
        let dy = if j > 0 { rng.gen_range(-j..=j) } else { 0 };
        let dx = if j > 0 { rng.gen_range(-j..=j) } else { 0 };
        let half = (side / 2) as isize;
        let fit = |start: isize, lo: usize, hi: usize, len: usize| -> usize {
            // keep the lesion's extent inside the window when it fits
            let mut o = start;
            if hi + 1 - lo <= side {
                o = o.clamp(hi as isize + 1 - side as isize, lo as isize);
            }
            clamp_origin(o, side, len)
        };
        let r0 = fit(cy.round() as isize - half + dy, ymin, ymax, h);
        let c0 = fit(cx.round() as isize - half + dx, xmin, xmax, w);
        out.push(patch_at(subject, z, r0, c0, hp)?);
    }

    let negatives = policy.negatives_per_positive * lesions.count().max(1);
    let mut made = 0;
    let mut attempts = 0;
    while made < negatives && attempts < NEGATIVE_ATTEMPTS * negatives.max(1) {
        attempts += 1;
        let z = rng.gen_range(0..s);
        let (y, x) = (rng.gen_range(0..h), rng.gen_range(0..w));
        if subject.t2s.data[[z, y, x]] <= 0.0 {
            continue;
        }
        let r0 = clamp_origin(y as isize - (side / 2) as isize, side, h);
        let c0 = clamp_origin(x as isize - (side / 2) as isize, side, w);
        if ann.data.slice(s![z, r0..r0 + side, c0..c0 + side]).iter().any(|&v| v != 0.0) {
            continue;
        }
        out.push(patch_at(subject, z, r0, c0, hp)?);
        made += 1;
    }
    Ok(out)
}

/// Applies one warp to image, masks and boxes. Instances whose mask leaves
/// the patch entirely are dropped.
pub fn augment_with(sample: &PatchSample, params: &AffineParams) -> PatchSample {
    let mut image = sample.image.data.clone();
    for c in 0..image.dim().0 {
        let warped = warp_plane(sample.image.channel(c), params, Interpolation::Linear);
        image.index_axis_mut(Axis(0), c).assign(&warped);
    }
    let mut boxes = Vec::new();
    let mut instance_masks = Vec::new();
    for m in &sample.instance_masks {
        let wm = warp_plane(m.view(), params, Interpolation::Nearest);
        if let Some(b) = BoxRect::of_mask(wm.view()) {
            boxes.push(b);
            instance_masks.push(wm);
        }
    }
    PatchSample {
        image: ChannelStack {
            data: image,
            kind: sample.image.kind,
        },
        boxes,
        instance_masks,
        source: sample.source.clone(),
    }
}

/// Random affine plus flip; redraws while any instance vanishes, falling
/// back to the original after ten tries.
pub fn augment<R: Rng>(sample: &PatchSample, cfg: &AugmentConfig, pixel_scale: f64, rng: &mut R) -> PatchSample {
    for _ in 0..AUGMENT_TRIES {
        let params = AffineParams::sample(cfg, pixel_scale, rng);
        let out = augment_with(sample, &params);
        if out.instance_masks.len() == sample.instance_masks.len() {
            return out;
        }
    }
    sample.clone()
}

/// `neg / pos` over the given targets, capped.
pub fn positive_weight<'a, I: IntoIterator<Item = &'a Array2<f32>>>(targets: I) -> f32 {
    let (mut pos, mut all) = (0usize, 0usize);
    for t in targets {
        pos += t.iter().filter(|&&v| v > 0.5).count();
        all += t.len();
    }
    if pos == 0 {
        return 1.0;
    }
    ((all - pos) as f32 / pos as f32).clamp(1.0, MAX_POS_WEIGHT)
}

/// An instance in patch coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub bbox: BoxRect,
    pub confidence: f32,
    pub mask: Array2<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchPrediction {
    pub instances: Vec<Instance>,
    /// Voxel-wise max of `mask · confidence` over instances, in `[0, 1]`.
    pub scores: Array2<f32>,
}

/// Instances as 8-connected components of `prob > 0.5`, each scored by its
/// peak probability.
pub fn instances_from_probability(prob: &Array2<f32>) -> PatchPrediction {
    let (labels, count) = label_components_2d(&prob.mapv(|p| u8::from(p > 0.5)), true);
    let mut conf = vec![0.0f32; count];
    for (&l, &p) in labels.iter().zip(prob.iter()) {
        if l > 0 {
            conf[l as usize - 1] = conf[l as usize - 1].max(p);
        }
    }
    let scores = Array2::from_shape_fn(prob.dim(), |q| {
        let l = labels[q];
        if l > 0 { conf[l as usize - 1].clamp(0.0, 1.0) } else { 0.0 }
    });
    let instances = (1..=count as u32)
        .filter_map(|k| {
            let mask = labels.mapv(|l| if l == k { 1.0f32 } else { 0.0 });
            BoxRect::of_mask(mask.view()).map(|bbox| Instance {
                bbox,
                confidence: conf[k as usize - 1],
                mask,
            })
        })
        .collect();
    PatchPrediction { instances, scores }
}

/// A trainable stage-1 model working on `(3, 256, 256)` patches.
pub trait DetectorBackend: Send + Sync {
    fn name(&self) -> &str;
    /// One optimiser step on `batch`; returns the mean loss before the step.
    fn train_step(&mut self, batch: &[PatchSample], pos_weight: f32, lr: f32) -> Result<f32>;
    /// Mean loss without updating.
    fn loss(&self, batch: &[PatchSample], pos_weight: f32) -> Result<f32>;
    fn predict(&self, image: &ChannelStack) -> Result<PatchPrediction>;
    fn save(&self, w: &mut dyn Write) -> Result<()>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyDetectorConfig {
    /// Non-overlapping stem that undoes the ×4 upsampling.
    pub stem: usize,
    pub widths: Vec<usize>,
}

impl Default for TinyDetectorConfig {
    fn default() -> Self {
        Self {
            stem: 4,
            widths: vec![8, 16, 16],
        }
    }
}

/// A small randomly initialised backend: patch stem, ReLU, U-Net, logits
/// upsampled back to the patch size.
#[derive(Debug, Clone)]
pub struct TinyDetector {
    pub config: TinyDetectorConfig,
    stem: Conv,
    unet: UNet,
    adam: Option<(Adam, Adam)>,
}

const DETECTOR_MAGIC: &[u8; 4] = b"CMBD";

impl TinyDetector {
    pub fn new(config: TinyDetectorConfig, seed: u64) -> Result<Self> {
        if config.widths.is_empty() || config.widths.contains(&0) || config.stem == 0 {
            return Err(Error::InvalidArgument("detector widths and stem must be positive".into()));
        }
        let inner = PATCH_INPUT_SIDE / config.stem;
        if !PATCH_INPUT_SIDE.is_multiple_of(config.stem) || !inner.is_multiple_of(1 << (config.widths.len() - 1)) {
            return Err(Error::InvalidArgument(format!(
                "stem {} and {} levels do not divide the {PATCH_INPUT_SIDE} patch",
                config.stem,
                config.widths.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = Conv::new(ConvKind::Patch(config.stem), 3, config.widths[0], &mut rng);
        let mut unet = UNet::new(config.widths[0], &config.widths, &mut rng);
        unet.head_mut().bias[0] = -2.0;
        Ok(Self {
            config,
            stem,
            unet,
            adam: None,
        })
    }

    pub fn load(r: &mut dyn Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DETECTOR_MAGIC {
            return Err(Error::InvalidArgument("not a detector weights file".into()));
        }
        let stem = read_u32(r)? as usize;
        let n = read_u32(r)? as usize;
        let widths = (0..n).map(|_| read_u32(r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let mut det = Self::new(TinyDetectorConfig { stem, widths }, 0)?;
        read_convs_into(r, std::slice::from_mut(&mut det.stem))?;
        read_convs_into(r, &mut det.unet.convs)?;
        Ok(det)
    }

    pub fn load_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingModel(path.to_path_buf()));
        }
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::load(&mut f)
    }

    fn input_tensor(image: &ChannelStack) -> Result<Tensor> {
        let (c, h, w) = image.data.dim();
        if c != 3 || h != PATCH_INPUT_SIDE || w != PATCH_INPUT_SIDE {
            return Err(Error::shape("detector input", &[3, PATCH_INPUT_SIDE, PATCH_INPUT_SIDE], &[c, h, w]));
        }
        Ok(Tensor::from_vec(c, h, w, image.data.iter().copied().collect()))
    }

    fn logits(&self, x: &Tensor) -> Tensor {
        let mut a = self.stem.forward(x);
        relu_inplace(&mut a);
        upsample_nearest(&self.unet.forward(&a), self.config.stem)
    }

    /// Loss and per-conv gradients (stem first) for one sample.
    fn sample_grad(&self, sample: &PatchSample, pos_weight: f32) -> Result<(f32, Vec<ConvGrad>, Vec<ConvGrad>)> {
        let x = Self::input_tensor(&sample.image)?;
        let mut a = self.stem.forward(&x);
        relu_inplace(&mut a);
        let (small, cache) = self.unet.forward_cached(&a);
        let logits = upsample_nearest(&small, self.config.stem);
        let target: Vec<f32> = sample.target().iter().copied().collect();
        let (loss, g) = weighted_bce_with_logits(&logits.data, &target, pos_weight);
        let g = upsample_nearest_backward(&Tensor::from_vec(1, logits.h, logits.w, g), self.config.stem);
        let mut g_unet = zero_grads(&self.unet.convs);
        let mut ga = self.unet.backward(&cache, &g, &mut g_unet, true).expect("input grad");
        relu_backward_inplace(&mut ga, &a);
        let mut g_stem = zero_grads(std::slice::from_ref(&self.stem));
        self.stem.backward(&x, &ga, &mut g_stem[0], false);
        Ok((loss, g_stem, g_unet))
    }
}

impl DetectorBackend for TinyDetector {
    fn name(&self) -> &str {
        "tiny-unet-detector"
    }

    fn train_step(&mut self, batch: &[PatchSample], pos_weight: f32, lr: f32) -> Result<f32> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty detector batch".into()));
        }
        let this = &*self;
        let per = exec::map(batch, |s| this.sample_grad(s, pos_weight));
        let mut losses = Vec::with_capacity(per.len());
        let mut stems = Vec::with_capacity(per.len());
        let mut unets = Vec::with_capacity(per.len());
        for r in per {
            let (l, gs, gu) = r?;
            losses.push(l);
            stems.push(gs);
            unets.push(gu);
        }
        let g_stem = mean_grads(stems).expect("nonempty batch");
        let g_unet = mean_grads(unets).expect("nonempty batch");
        if self.adam.is_none() {
            self.adam = Some((Adam::new(std::slice::from_ref(&self.stem)), Adam::new(&self.unet.convs)));
        }
        let (adam_stem, adam_unet) = self.adam.as_mut().expect("optimiser state");
        adam_stem.step(std::slice::from_mut(&mut self.stem), &g_stem, lr);
        adam_unet.step(&mut self.unet.convs, &g_unet, lr);
        Ok(losses.iter().sum::<f32>() / losses.len() as f32)
    }

    fn loss(&self, batch: &[PatchSample], pos_weight: f32) -> Result<f32> {
        if batch.is_empty() {
            return Ok(0.0);
        }
        let per = exec::map(batch, |s| -> Result<f32> {
            let logits = self.logits(&Self::input_tensor(&s.image)?);
            let target: Vec<f32> = s.target().iter().copied().collect();
            Ok(weighted_bce_with_logits(&logits.data, &target, pos_weight).0)
        });
        let losses = per.into_iter().collect::<Result<Vec<f32>>>()?;
        Ok(losses.iter().sum::<f32>() / losses.len() as f32)
    }

    fn predict(&self, image: &ChannelStack) -> Result<PatchPrediction> {
        let logits = self.logits(&Self::input_tensor(image)?);
        let prob = Array2::from_shape_vec((logits.h, logits.w), logits.data.iter().map(|&z| sigmoid(z)).collect())
            .expect("logit plane");
        Ok(instances_from_probability(&prob))
    }

    fn save(&self, w: &mut dyn Write) -> Result<()> {
        w.write_all(DETECTOR_MAGIC)?;
        write_u32(w, self.config.stem as u32)?;
        write_u32(w, self.config.widths.len() as u32)?;
        for &v in &self.config.widths {
            write_u32(w, v as u32)?;
        }
        write_convs(w, std::slice::from_ref(&self.stem))?;
        write_convs(w, &self.unet.convs)
    }
}

/// Writes a backend's weights to `path`.
pub fn save_detector(backend: &dyn DetectorBackend, path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    backend.save(&mut f)?;
    f.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f32,
    pub val: Option<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLoss>,
    pub steps: usize,
    pub pos_weight: f32,
}

fn backend_failure(epoch: usize, batch: usize, e: impl std::fmt::Display) -> Error {
    Error::BackendFailure {
        epoch,
        batch,
        message: e.to_string(),
    }
}

/// Shuffled mini-batch training for `hp.epochs` passes. Every sample is
/// augmented afresh each epoch. The last partial batch of an epoch is kept.
pub fn finetune_detector(
    train: &[PatchSample],
    val: &[PatchSample],
    hp: &DetectorHyperparams,
    backend: &mut dyn DetectorBackend,
    seed: u64,
) -> Result<TrainLog> {
    hp.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("detector training set is empty".into()));
    }
    let targets: Vec<Array2<f32>> = train.iter().map(PatchSample::target).collect();
    let pos_weight = positive_weight(&targets);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainLog {
        epochs: Vec::with_capacity(hp.epochs),
        steps: 0,
        pos_weight,
    };
    for epoch in 0..hp.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0f64;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(hp.batch_size).enumerate() {
            let batch: Vec<PatchSample> = chunk
                .iter()
                .map(|&i| augment(&train[i], &hp.augment, hp.upsample_factor as f64, &mut rng))
                .collect();
            let loss = backend
                .train_step(&batch, pos_weight, hp.learning_rate as f32)
                .map_err(|e| backend_failure(epoch, b, e))?;
            if !loss.is_finite() {
                return Err(backend_failure(epoch, b, format!("non-finite loss {loss}")));
            }
            sum += loss as f64;
            batches += 1;
            log.steps += 1;
        }
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(backend.loss(val, pos_weight).map_err(|e| backend_failure(epoch, 0, e))?)
        };
        log.epochs.push(EpochLoss {
            epoch,
            train: (sum / batches as f64) as f32,
            val: val_loss,
        });
    }
    Ok(log)
}

/// Window origins along one axis: multiples of `stride`, with the last
/// window clamped to end at `len`.
pub fn tile_origins(len: usize, side: usize, stride: usize) -> Vec<usize> {
    if len <= side {
        return vec![0];
    }
    let mut out: Vec<usize> = (0..).map(|i| i * stride).take_while(|&o| o + side < len).collect();
    out.push(len - side);
    out.dedup();
    out
}

/// Instance in slice coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceInstance {
    pub bbox: BoxRect,
    pub confidence: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    pub scores: Volume,
    pub instances: Vec<Vec<SliceInstance>>,
}

fn max_pool_to(scores: &Array2<f32>, f: usize) -> Array2<f32> {
    let (h, w) = scores.dim();
    Array2::from_shape_fn((h / f, w / f), |(y, x)| {
        scores
            .slice(s![y * f..(y + 1) * f, x * f..(x + 1) * f])
            .iter()
            .fold(0.0f32, |a, &b| a.max(b))
    })
}

/// Scores one slice: overlapping tiles, each upsampled and predicted, then
/// fused by voxel-wise max.
pub fn infer_slice(
    backend: &dyn DetectorBackend,
    stack: &ChannelStack,
    hp: &DetectorHyperparams,
) -> Result<(Array2<f32>, Vec<SliceInstance>)> {
    let (h, w) = stack.hw();
    let side = hp.patch_side;
    if h < side || w < side {
        return Err(Error::shape("detector input slice", &[3, side, side], &[3, h, w]));
    }
    let f = hp.upsample_factor;
    let mut fused = Array2::<f32>::zeros((h, w));
    let mut instances = Vec::new();
    for &r0 in &tile_origins(h, side, hp.tile_stride) {
        for &c0 in &tile_origins(w, side, hp.tile_stride) {
            let tile = upsample_patch(&crop_stack(&stack.data, r0, c0, side, side), f)?;
            let pred = backend.predict(&ChannelStack::new(tile, ChannelKind::DetectorInput)?)?;
            let small = max_pool_to(&pred.scores, f);
            fused
                .slice_mut(s![r0..r0 + side, c0..c0 + side])
                .zip_mut_with(&small, |a, &b| *a = a.max(b));
            for inst in pred.instances {
                let b = inst.bbox;
                instances.push(SliceInstance {
                    bbox: BoxRect {
                        r0: r0 + b.r0 / f,
                        c0: c0 + b.c0 / f,
                        r1: r0 + b.r1.div_ceil(f),
                        c1: c0 + b.c1.div_ceil(f),
                    },
                    confidence: inst.confidence,
                });
            }
        }
    }
    fused.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok((fused, instances))
}

/// Runs the detector over every slice of a prepared subject.
pub fn infer_detector(backend: &dyn DetectorBackend, subject: &PreparedSubject, hp: &DetectorHyperparams) -> Result<DetectionResult> {
    let [s, h, w] = subject.shape();
    let per = exec::map_range(s, |z| -> Result<_> { infer_slice(backend, &subject.detector_input(z)?, hp) });
    let mut scores = Array3::<f32>::zeros((s, h, w));
    let mut instances = Vec::with_capacity(s);
    for (z, r) in per.into_iter().enumerate() {
        let (plane, inst) = r?;
        scores.index_axis_mut(Axis(0), z).assign(&plane);
        instances.push(inst);
    }
    Ok(DetectionResult {
        scores: Volume {
            data: scores,
            spacing: subject.t2s.spacing,
        },
        instances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::ResizeTransform;
    use crate::volume::Spacing;

    fn prepared(shape: (usize, usize, usize), lesions: &[[usize; 3]]) -> PreparedSubject {
        let spacing = Spacing::default();
        let img = Volume {
            data: Array3::from_shape_fn(shape, |(z, y, x)| ((z + y + x) % 7) as f32 * 0.1 + 1.0),
            spacing,
        };
        let mut ann = Array3::<f32>::zeros(shape);
        for l in lesions {
            ann[*l] = 1.0;
        }
        PreparedSubject {
            id: "9001".into(),
            t1: img.clone(),
            t2: img.clone(),
            t2s: img,
            annotation: Some(Volume { data: ann, spacing }),
            transform: ResizeTransform::to_common((shape.1, shape.2), Interpolation::Nearest),
            native_shape: [shape.0, shape.1, shape.2],
        }
    }

    #[test]
    fn three_lesions_ratio_one_gives_six_patches() {
        let subject = prepared((3, 160, 160), &[[0, 20, 20], [1, 80, 80], [2, 140, 30]]);
        let hp = DetectorHyperparams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let patches = extract_training_patches(&subject, &hp, &SamplingPolicy::from_hyperparams(&hp), &mut rng).unwrap();
        assert_eq!(patches.len(), 6);
        assert!(patches[..3].iter().all(|p| !p.boxes.is_empty()));
        assert!(patches[3..].iter().all(|p| p.boxes.is_empty()));
        for p in &patches {
            p.validate().unwrap();
        }
    }

    #[test]
    fn corner_lesion_window_is_shifted_inside() {
        let subject = prepared((1, 128, 128), &[[0, 5, 5], [0, 5, 6]]);
        let hp = DetectorHyperparams::default();
        let policy = SamplingPolicy { negatives_per_positive: 0, ..SamplingPolicy::from_hyperparams(&hp) };
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = &extract_training_patches(&subject, &hp, &policy, &mut rng).unwrap()[0];
            assert_eq!((p.source.row, p.source.col), (0, 0));
            assert_eq!(p.instance_masks.len(), 1);
            assert_eq!(p.boxes[0], BoxRect { r0: 20, c0: 20, r1: 24, c1: 28 });
        }
    }

    #[test]
    fn lesion_free_subject_policy() {
        let subject = prepared((2, 64, 64), &[]);
        let hp = DetectorHyperparams::default();
        let strict = SamplingPolicy { allow_negative_only: false, ..SamplingPolicy::from_hyperparams(&hp) };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(extract_training_patches(&subject, &hp, &strict, &mut rng), Err(Error::NoLesions(_))));
    }

    #[test]
    fn upsampling_contracts() {
        let c = Array3::from_elem((3, 64, 64), 2.5f32);
        assert!(upsample_patch(&c, 4).unwrap().iter().all(|&v| v == 2.5));
        assert!(upsample_patch(&Array3::zeros((3, 32, 32)), 4).is_err());
        let mut m = Array2::<f32>::zeros((64, 64));
        m[[10, 10]] = 1.0;
        let up = upsample_mask(m.view(), 4);
        assert_eq!(BoxRect::of_mask(up.view()), Some(BoxRect { r0: 40, c0: 40, r1: 44, c1: 44 }));
        assert_eq!(up.iter().filter(|&&v| v > 0.0).count(), 16);
        let b = BoxRect { r0: 8, c0: 8, r1: 16, c1: 16 };
        assert_eq!(b.scaled(4), BoxRect { r0: 32, c0: 32, r1: 64, c1: 64 });
    }

    #[test]
    fn stride_tiling_of_512() {
        let o = tile_origins(512, 64, 32);
        assert_eq!(o.len(), 15);
        assert_eq!((o[0], o[14]), (0, 448));
        assert_eq!(tile_origins(100, 64, 32), vec![0, 32, 36]);
        assert_eq!(tile_origins(64, 64, 32), vec![0]);
    }

    fn tiny() -> TinyDetector {
        TinyDetector::new(TinyDetectorConfig { stem: 4, widths: vec![4, 8] }, 3).unwrap()
    }

    #[test]
    fn zero_input_scores_stay_in_range() {
        let det = tiny();
        let stack = ChannelStack::new(Array3::zeros((3, 96, 96)), ChannelKind::DetectorInput).unwrap();
        let (scores, _) = infer_slice(&det, &stack, &DetectorHyperparams::default()).unwrap();
        assert!(scores.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn weights_round_trip() {
        let det = tiny();
        let mut buf = Vec::new();
        det.save(&mut buf).unwrap();
        let back = TinyDetector::load(&mut buf.as_slice()).unwrap();
        assert_eq!(back.stem, det.stem);
        assert_eq!(back.unet, det.unet);
    }

    #[test]
    fn steps_per_epoch_follow_batch_size() {
        let subject = prepared((1, 64, 64), &[[0, 30, 30]]);
        let hp = DetectorHyperparams {
            epochs: 2,
            batch_size: 6,
            ..DetectorHyperparams::default()
        };
        let p = patch_at(&subject, 0, 0, 0, &hp).unwrap();
        let train = vec![p; 12];
        let mut det = tiny();
        let log = finetune_detector(&train, &[], &hp, &mut det, 0).unwrap();
        assert_eq!(log.steps, 4);
        assert_eq!(log.epochs.len(), 2);
        assert!(finetune_detector(&[], &[], &hp, &mut det, 0).is_err());
    }
}
