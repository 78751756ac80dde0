//! Stage 2: a U-Net over four-channel whole-slice inputs (three consecutive
//! T2* slices plus the filtered stage-1 score) producing per-voxel
//! probabilities.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{warp_window, AffineParams, AugmentConfig};
use crate::detector::{positive_weight, EpochLoss, TrainLog, MAX_POS_WEIGHT};
use crate::error::{Error, Result};
use crate::exec;
use crate::nn::{
    mean_grads, read_convs_into, read_u32, sigmoid, weighted_bce_with_logits, write_convs, write_u32, zero_grads,
    Adam, ConvGrad, Tensor, UNet,
};
use crate::preprocess::{assemble_segmenter_input, ChannelKind, ChannelStack, Interpolation, PreparedSubject};
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterHyperparams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Probability of keeping a slice without annotated voxels.
    pub keep_empty: f64,
    /// Side of the random training crop; 0 trains on whole slices.
    pub crop: usize,
    /// Chance that a crop of a slice with lesions is centred on one.
    pub lesion_crop_probability: f64,
    pub pos_weight_cap: f32,
    pub augment: AugmentConfig,
}

impl Default for SegmenterHyperparams {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 4,
            learning_rate: 5e-5,
            keep_empty: 0.25,
            crop: 0,
            lesion_crop_probability: 0.5,
            pos_weight_cap: MAX_POS_WEIGHT,
            augment: AugmentConfig::default(),
        }
    }
}

impl SegmenterHyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("segmenter batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!("segmenter learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.lesion_crop_probability) {
            return Err(Error::InvalidArgument(format!(
                "lesion crop probability must lie in [0, 1], got {}",
                self.lesion_crop_probability
            )));
        }
        if !(0.0..=1.0).contains(&self.keep_empty) {
            return Err(Error::InvalidArgument(format!("keep probability must lie in [0, 1], got {}", self.keep_empty)));
        }
        if !(self.pos_weight_cap >= 1.0) {
            return Err(Error::InvalidArgument("positive weight cap must be at least 1".into()));
        }
        Ok(())
    }
}

/// One slice of four-channel input with its annotation slice.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub input: ChannelStack,
    pub target: Array2<f32>,
    pub subject: String,
    pub slice: usize,
    /// Common-grid pixels per native voxel, for scaling translations.
    pub pixel_scale: f64,
}

/// One pair per slice; slices without lesion voxels survive with
/// probability `keep_empty`.
pub fn build_training_pairs<R: Rng>(
    subject: &PreparedSubject,
    stage1: &Volume,
    keep_empty: f64,
    rng: &mut R,
) -> Result<Vec<TrainingPair>> {
    let ann = subject.require_annotation()?;
    stage1.ensure_same_shape(&subject.t2s, "stage-1 vs T2S")?;
    ann.ensure_same_shape(&subject.t2s, "annotation vs T2S")?;
    let (sy, _) = subject.transform.scale();
    let mut out = Vec::new();
    for z in 0..subject.t2s.slices() {
        let target = ann.slice(z).to_owned();
        let has_lesion = target.iter().any(|&v| v != 0.0);
        if !has_lesion && !rng.gen_bool(keep_empty.clamp(0.0, 1.0)) {
            continue;
        }
        out.push(TrainingPair {
            input: assemble_segmenter_input(&subject.t2s, stage1, z)?,
            target,
            subject: subject.id.clone(),
            slice: z,
            pixel_scale: sy,
        });
    }
    Ok(out)
}

/// A trainable stage-2 model.
pub trait SegmenterBackend: Send + Sync {
    fn name(&self) -> &str;
    fn train_step(&mut self, batch: &[TrainingPair], pos_weight: f32, lr: f32) -> Result<f32>;
    fn loss(&self, batch: &[TrainingPair], pos_weight: f32) -> Result<f32>;
    /// Probabilities in `[0, 1]` for one slice.
    fn predict(&self, input: &ChannelStack) -> Result<Array2<f32>>;
    fn save(&self, w: &mut dyn Write) -> Result<()>;
}

#[derive(Debug, Clone)]
pub struct UNetSegmenter {
    pub unet: UNet,
    adam: Option<Adam>,
}

const SEGMENTER_MAGIC: &[u8; 4] = b"CMBS";
/// Initial head bias: logit of a 1 % foreground prior.
const HEAD_PRIOR: f32 = -4.6;

impl UNetSegmenter {
    pub fn new(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::InvalidArgument("segmenter widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut unet = UNet::new(ChannelKind::SegmenterInput.channels(), widths, &mut rng);
        unet.head_mut().bias[0] = HEAD_PRIOR;
        Ok(Self { unet, adam: None })
    }

    pub fn load(r: &mut dyn Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != SEGMENTER_MAGIC {
            return Err(Error::InvalidArgument("not a segmenter weights file".into()));
        }
        let n = read_u32(r)? as usize;
        let widths = (0..n).map(|_| read_u32(r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let mut seg = Self::new(&widths, 0)?;
        read_convs_into(r, &mut seg.unet.convs)?;
        Ok(seg)
    }

    pub fn load_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingModel(path.to_path_buf()));
        }
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::load(&mut f)
    }

    /// Input padded with zeros up to a multiple of the U-Net divisor.
    fn padded(&self, data: &Array3<f32>) -> Tensor {
        let (c, h, w) = data.dim();
        let d = self.unet.divisor();
        let (ph, pw) = (h.div_ceil(d) * d, w.div_ceil(d) * d);
        let mut t = Tensor::zeros(c, ph, pw);
        for ch in 0..c {
            let plane = t.plane_mut(ch);
            for y in 0..h {
                for x in 0..w {
                    plane[y * pw + x] = data[[ch, y, x]];
                }
            }
        }
        t
    }

    fn padded_target(target: &Array2<f32>, ph: usize, pw: usize) -> Vec<f32> {
        let mut t = vec![0.0; ph * pw];
        for ((y, x), &v) in target.indexed_iter() {
            t[y * pw + x] = v;
        }
        t
    }

    fn sample_grad(&self, pair: &TrainingPair, pos_weight: f32) -> (f32, Vec<ConvGrad>) {
        let x = self.padded(&pair.input.data);
        let (logits, cache) = self.unet.forward_cached(&x);
        let target = Self::padded_target(&pair.target, x.h, x.w);
        let (loss, g) = weighted_bce_with_logits(&logits.data, &target, pos_weight);
        let mut grads = zero_grads(&self.unet.convs);
        self.unet.backward(&cache, &Tensor::from_vec(1, x.h, x.w, g), &mut grads, false);
        (loss, grads)
    }
}

impl SegmenterBackend for UNetSegmenter {
    fn name(&self) -> &str {
        "unet-segmenter"
    }

    fn train_step(&mut self, batch: &[TrainingPair], pos_weight: f32, lr: f32) -> Result<f32> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty segmenter batch".into()));
        }
        let this = &*self;
        let per = exec::map(batch, |p| this.sample_grad(p, pos_weight));
        let loss = per.iter().map(|(l, _)| l).sum::<f32>() / per.len() as f32;
        let grads = mean_grads(per.into_iter().map(|(_, g)| g).collect()).expect("nonempty batch");
        if self.adam.is_none() {
            self.adam = Some(Adam::new(&self.unet.convs));
        }
        let adam = self.adam.as_mut().expect("optimiser state");
        adam.step(&mut self.unet.convs, &grads, lr);
        Ok(loss)
    }

    fn loss(&self, batch: &[TrainingPair], pos_weight: f32) -> Result<f32> {
        if batch.is_empty() {
            return Ok(0.0);
        }
        let per = exec::map(batch, |p| {
            let x = self.padded(&p.input.data);
            let logits = self.unet.forward(&x);
            weighted_bce_with_logits(&logits.data, &Self::padded_target(&p.target, x.h, x.w), pos_weight).0
        });
        Ok(per.iter().sum::<f32>() / per.len() as f32)
    }

    fn predict(&self, input: &ChannelStack) -> Result<Array2<f32>> {
        if input.kind != ChannelKind::SegmenterInput {
            return Err(Error::shape("segmenter input channels", &[4], &[input.data.dim().0]));
        }
        let (h, w) = input.hw();
        let x = self.padded(&input.data);
        let logits = self.unet.forward(&x);
        Ok(Array2::from_shape_fn((h, w), |(y, xx)| sigmoid(logits.data[y * x.w + xx])))
    }

    fn save(&self, w: &mut dyn Write) -> Result<()> {
        w.write_all(SEGMENTER_MAGIC)?;
        write_u32(w, self.unet.widths.len() as u32)?;
        for &v in &self.unet.widths {
            write_u32(w, v as u32)?;
        }
        write_convs(w, &self.unet.convs)
    }
}

pub fn save_segmenter(backend: &dyn SegmenterBackend, path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    backend.save(&mut f)?;
    f.flush()?;
    Ok(())
}

/// Top-left corner and size of a crop in output coordinates.
pub type Window = (usize, usize, usize, usize);

/// Foreground pixels of a target slice.
pub fn positives(target: &Array2<f32>) -> Vec<(usize, usize)> {
    target
        .indexed_iter()
        .filter(|(_, &v)| v != 0.0)
        .map(|(q, _)| q)
        .collect()
}

/// A `side`-square window of the warped slice. With probability
/// `lesion_probability`, and when the slice has foreground, the window is
/// centred on the warped position of a random foreground pixel (offset by up
/// to a quarter side); otherwise it is uniform. `side` 0 gives the whole slice.
pub fn sample_window<R: Rng>(
    (h, w): (usize, usize),
    fg: &[(usize, usize)],
    params: &AffineParams,
    side: usize,
    lesion_probability: f64,
    rng: &mut R,
) -> Window {
    if side == 0 || (side >= h && side >= w) {
        return (0, 0, h, w);
    }
    let (sh, sw) = (side.min(h), side.min(w));
    if !fg.is_empty() && rng.gen_bool(lesion_probability.clamp(0.0, 1.0)) {
        let (y, x) = fg[rng.gen_range(0..fg.len())];
        let (fy, fx) = params.map_point(y as f64, x as f64, h, w);
        let q = (side / 4) as isize;
        let dy = if q > 0 { rng.gen_range(-q..=q) } else { 0 };
        let dx = if q > 0 { rng.gen_range(-q..=q) } else { 0 };
        let r = (fy.round() as isize - (sh / 2) as isize + dy).clamp(0, (h - sh) as isize) as usize;
        let c = (fx.round() as isize - (sw / 2) as isize + dx).clamp(0, (w - sw) as isize) as usize;
        (r, c, sh, sw)
    } else {
        (rng.gen_range(0..=h - sh), rng.gen_range(0..=w - sw), sh, sw)
    }
}

/// The window of the warped pair: all four channels linear, target nearest.
pub fn warp_pair_window(pair: &TrainingPair, params: &AffineParams, (r0, c0, sh, sw): Window) -> TrainingPair {
    let channels = pair.input.data.dim().0;
    let mut input = Array3::<f32>::zeros((channels, sh, sw));
    for c in 0..channels {
        let plane = warp_window(pair.input.channel(c), params, Interpolation::Linear, (r0, c0), (sh, sw));
        input.index_axis_mut(Axis(0), c).assign(&plane);
    }
    TrainingPair {
        input: ChannelStack {
            data: input,
            kind: pair.input.kind,
        },
        target: warp_window(pair.target.view(), params, Interpolation::Nearest, (r0, c0), (sh, sw)),
        subject: pair.subject.clone(),
        slice: pair.slice,
        pixel_scale: pair.pixel_scale,
    }
}

/// An unwarped crop placed as in [`sample_window`].
pub fn random_crop<R: Rng>(pair: &TrainingPair, side: usize, lesion_probability: f64, rng: &mut R) -> TrainingPair {
    let id = AffineParams::IDENTITY;
    let window = sample_window(pair.input.hw(), &positives(&pair.target), &id, side, lesion_probability, rng);
    warp_pair_window(pair, &id, window)
}

pub fn train_segmenter(
    pairs: &[TrainingPair],
    val: &[TrainingPair],
    hp: &SegmenterHyperparams,
    backend: &mut dyn SegmenterBackend,
    seed: u64,
) -> Result<TrainLog> {
    hp.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("segmenter training set is empty".into()));
    }
    let pos_weight = positive_weight(pairs.iter().map(|p| &p.target)).min(hp.pos_weight_cap);
    let fg: Vec<Vec<(usize, usize)>> = exec::map(pairs, |p| positives(&p.target));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut log = TrainLog {
        epochs: Vec::with_capacity(hp.epochs),
        steps: 0,
        pos_weight,
    };
    let fail = |epoch, batch, message: String| Error::BackendFailure { epoch, batch, message };
    for epoch in 0..hp.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0f64;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(hp.batch_size).enumerate() {
            let batch: Vec<TrainingPair> = chunk
                .iter()
                .map(|&i| {
                    let params = AffineParams::sample(&hp.augment, pairs[i].pixel_scale, &mut rng);
                    let window = sample_window(pairs[i].input.hw(), &fg[i], &params, hp.crop, hp.lesion_crop_probability, &mut rng);
                    warp_pair_window(&pairs[i], &params, window)
                })
                .collect();
            let loss = backend
                .train_step(&batch, pos_weight, hp.learning_rate as f32)
                .map_err(|e| fail(epoch, b, e.to_string()))?;
            if !loss.is_finite() {
                return Err(fail(epoch, b, format!("non-finite loss {loss}")));
            }
            sum += loss as f64;
            batches += 1;
            log.steps += 1;
        }
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(backend.loss(val, pos_weight).map_err(|e| fail(epoch, 0, e.to_string()))?)
        };
        log.epochs.push(EpochLoss {
            epoch,
            train: (sum / batches as f64) as f32,
            val: val_loss,
        });
    }
    Ok(log)
}

/// Probability volume over every slice of a prepared subject.
pub fn infer_segmenter(backend: &dyn SegmenterBackend, subject: &PreparedSubject, stage1: &Volume) -> Result<Volume> {
    stage1.ensure_same_shape(&subject.t2s, "stage-1 vs T2S")?;
    let [s, h, w] = subject.shape();
    let per = exec::map_range(s, |z| -> Result<Array2<f32>> {
        backend.predict(&assemble_segmenter_input(&subject.t2s, stage1, z)?)
    });
    let mut data = Array3::<f32>::zeros((s, h, w));
    for (z, r) in per.into_iter().enumerate() {
        data.index_axis_mut(Axis(0), z).assign(&r?);
    }
    Ok(Volume {
        data,
        spacing: subject.t2s.spacing,
    })
}
