//! Run configuration: a flat `key = value` text format with one key per
//! field. Blank lines and `#` comments are ignored; unknown or repeated keys
//! are errors so a misspelled hyperparameter never silently defaults.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augment::AugmentConfig;
use crate::catalog::{ModelGroup, Router};
use crate::detector::{DetectorHyperparams, TinyDetectorConfig};
use crate::error::{Error, Result};
use crate::morphology::Connectivity;
use crate::phantom::PhantomSpec;
use crate::postprocess::{FilterMode, PostprocessSettings, DEFAULT_DILATION_RADIUS};
use crate::segmenter::SegmenterHyperparams;
use crate::volume::Spacing;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_root: PathBuf,
    pub output_dir: PathBuf,
    pub group: ModelGroup,
    /// Group that synthetic subjects (cohort digit `9`) are routed to.
    pub phantom_group: Option<ModelGroup>,
    pub seed: u64,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    pub split_fraction: f64,
    pub detector: DetectorHyperparams,
    pub detector_model: TinyDetectorConfig,
    /// Starting weights for the detector; random initialisation when absent.
    pub detector_init_weights: Option<PathBuf>,
    pub segmenter: SegmenterHyperparams,
    pub segmenter_widths: Vec<usize>,
    pub postprocess: PostprocessSettings,
    pub dilation_radius: usize,
    pub threshold_margin: f32,
    pub phantom: PhantomSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_root: PathBuf::from("data"),
            output_dir: PathBuf::from("out"),
            group: ModelGroup::A,
            phantom_group: None,
            seed: 0,
            workers: 0,
            split_fraction: 0.8,
            detector: DetectorHyperparams::default(),
            detector_model: TinyDetectorConfig::default(),
            detector_init_weights: None,
            segmenter: SegmenterHyperparams::default(),
            segmenter_widths: vec![16, 32, 64, 128],
            postprocess: PostprocessSettings::default(),
            dilation_radius: DEFAULT_DILATION_RADIUS,
            threshold_margin: 0.0,
            phantom: PhantomSpec::default(),
        }
    }
}

/// Every key with its one-line description, in serialisation order.
pub const KEYS: &[(&str, &str)] = &[
    ("data_root", "directory holding one sub-directory per subject"),
    ("output_dir", "directory for models, predictions and evaluation output"),
    ("group", "model group trained or applied: A or B"),
    ("phantom_group", "group for synthetic ids starting with 9: A, B or none"),
    ("seed", "base seed for splits, sampling, initialisation and phantoms"),
    ("workers", "worker threads, 0 for all cores"),
    ("split_fraction", "fraction of subjects used for training"),
    ("detector.epochs", "detector fine-tuning epochs"),
    ("detector.batch_size", "detector patches per batch"),
    ("detector.learning_rate", "detector learning rate"),
    ("detector.patch_side", "native patch side in voxels"),
    ("detector.upsample_factor", "patch upsampling factor"),
    ("detector.negatives_per_positive", "lesion-free patches per lesion patch"),
    ("detector.jitter", "maximum offset of a lesion patch from the lesion centroid"),
    ("detector.tile_stride", "stride between inference tiles in voxels"),
    ("detector.stem", "detector stem stride"),
    ("detector.widths", "detector U-Net widths per level"),
    ("detector.init_weights", "starting detector weights, empty for random initialisation"),
    ("detector.rotation_deg", "detector augmentation rotation range in degrees"),
    ("detector.scale_min", "detector augmentation minimum scale"),
    ("detector.scale_max", "detector augmentation maximum scale"),
    ("detector.translation", "detector augmentation translation in native voxels"),
    ("detector.flip_probability", "detector horizontal flip probability"),
    ("segmenter.epochs", "segmenter epochs"),
    ("segmenter.batch_size", "segmenter slices per batch"),
    ("segmenter.learning_rate", "segmenter learning rate"),
    ("segmenter.keep_empty", "probability of keeping a lesion-free slice"),
    ("segmenter.crop", "training crop side, 0 for whole slices"),
    ("segmenter.lesion_crop_probability", "chance a crop of a lesion slice is centred on a lesion"),
    ("segmenter.pos_weight_cap", "upper bound on the positive-class loss weight"),
    ("segmenter.widths", "segmenter U-Net widths per level"),
    ("segmenter.rotation_deg", "segmenter augmentation rotation range in degrees"),
    ("segmenter.scale_min", "segmenter augmentation minimum scale"),
    ("segmenter.scale_max", "segmenter augmentation maximum scale"),
    ("segmenter.translation", "segmenter augmentation translation in native voxels"),
    ("segmenter.flip_probability", "segmenter horizontal flip probability"),
    ("postprocess.binarize_threshold", "probability above which a voxel is foreground"),
    ("postprocess.dilation_radius", "brain mask dilation radius in voxels"),
    ("postprocess.filter_mode", "intensity filter granularity: voxel or object"),
    ("postprocess.connectivity", "lesion connectivity: 6 or 26"),
    ("postprocess.threshold_margin", "added to the derived intensity threshold"),
    ("phantom.shape", "phantom shape as slices x rows x cols"),
    ("phantom.spacing", "phantom voxel spacing dz,dy,dx in mm"),
    ("phantom.lesion_count", "lesions per phantom, inclusive range"),
    ("phantom.lesion_radius", "lesion radius in voxels, inclusive range"),
    ("phantom.lesion_depth", "darkening at a lesion centre"),
    ("phantom.tissue_intensity", "brain tissue intensity"),
    ("phantom.confounder_count", "dark arcs placed outside the brain"),
    ("phantom.noise_sd", "Gaussian noise standard deviation"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("invalid value {value:?} for {key}")))
}

fn join<T: Display>(items: &[T], sep: &str) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(sep)
}

fn parse_list(key: &str, value: &str, sep: char) -> Result<Vec<usize>> {
    value.split(sep).map(|v| parse(key, v.trim())).collect()
}

fn parse_range(key: &str, value: &str) -> Result<(usize, usize)> {
    match parse_list(key, value, '-')?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(Error::InvalidArgument(format!("expected lo-hi for {key}, got {value:?}"))),
    }
}

fn path_or_none(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn augment_get(a: &AugmentConfig, field: &str) -> Option<String> {
    Some(match field {
        "rotation_deg" => a.rotation_deg.to_string(),
        "scale_min" => a.scale_min.to_string(),
        "scale_max" => a.scale_max.to_string(),
        "translation" => a.translation.to_string(),
        "flip_probability" => a.flip_probability.to_string(),
        _ => return None,
    })
}

fn augment_set(a: &mut AugmentConfig, field: &str, key: &str, v: &str) -> Result<bool> {
    match field {
        "rotation_deg" => a.rotation_deg = parse(key, v)?,
        "scale_min" => a.scale_min = parse(key, v)?,
        "scale_max" => a.scale_max = parse(key, v)?,
        "translation" => a.translation = parse(key, v)?,
        "flip_probability" => a.flip_probability = parse(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl RunConfig {
    /// Current value of `key` in its text form.
    pub fn get(&self, key: &str) -> Result<String> {
        let unknown = || Error::InvalidArgument(format!("unknown config key {key:?}"));
        if let Some(f) = key.strip_prefix("detector.") {
            if let Some(v) = augment_get(&self.detector.augment, f) {
                return Ok(v);
            }
        }
        if let Some(f) = key.strip_prefix("segmenter.") {
            if let Some(v) = augment_get(&self.segmenter.augment, f) {
                return Ok(v);
            }
        }
        let d = &self.detector;
        let s = &self.segmenter;
        let p = &self.phantom;
        Ok(match key {
            "data_root" => self.data_root.display().to_string(),
            "output_dir" => self.output_dir.display().to_string(),
            "group" => self.group.to_string(),
            "phantom_group" => self.phantom_group.map(|g| g.to_string()).unwrap_or_else(|| "none".into()),
            "seed" => self.seed.to_string(),
            "workers" => self.workers.to_string(),
            "split_fraction" => self.split_fraction.to_string(),
            "detector.epochs" => d.epochs.to_string(),
            "detector.batch_size" => d.batch_size.to_string(),
            "detector.learning_rate" => format!("{:e}", d.learning_rate),
            "detector.patch_side" => d.patch_side.to_string(),
            "detector.upsample_factor" => d.upsample_factor.to_string(),
            "detector.negatives_per_positive" => d.negatives_per_positive.to_string(),
            "detector.jitter" => d.jitter.to_string(),
            "detector.tile_stride" => d.tile_stride.to_string(),
            "detector.stem" => self.detector_model.stem.to_string(),
            "detector.widths" => join(&self.detector_model.widths, ","),
            "detector.init_weights" => path_or_none(&self.detector_init_weights),
            "segmenter.epochs" => s.epochs.to_string(),
            "segmenter.batch_size" => s.batch_size.to_string(),
            "segmenter.learning_rate" => format!("{:e}", s.learning_rate),
            "segmenter.keep_empty" => s.keep_empty.to_string(),
            "segmenter.crop" => s.crop.to_string(),
            "segmenter.lesion_crop_probability" => s.lesion_crop_probability.to_string(),
            "segmenter.pos_weight_cap" => s.pos_weight_cap.to_string(),
            "segmenter.widths" => join(&self.segmenter_widths, ","),
            "postprocess.binarize_threshold" => self.postprocess.binarize_threshold.to_string(),
            "postprocess.dilation_radius" => self.dilation_radius.to_string(),
            "postprocess.filter_mode" => self.postprocess.mode.to_string(),
            "postprocess.connectivity" => self.postprocess.connectivity.to_string(),
            "postprocess.threshold_margin" => self.threshold_margin.to_string(),
            "phantom.shape" => format!("{}x{}x{}", p.shape.0, p.shape.1, p.shape.2),
            "phantom.spacing" => format!("{},{},{}", p.spacing.dz, p.spacing.dy, p.spacing.dx),
            "phantom.lesion_count" => format!("{}-{}", p.lesion_count.0, p.lesion_count.1),
            "phantom.lesion_radius" => format!("{}-{}", p.lesion_radius.0, p.lesion_radius.1),
            "phantom.lesion_depth" => p.lesion_depth.to_string(),
            "phantom.tissue_intensity" => p.tissue_intensity.to_string(),
            "phantom.confounder_count" => p.confounder_count.to_string(),
            "phantom.noise_sd" => p.noise_sd.to_string(),
            _ => return Err(unknown()),
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        if let Some(f) = key.strip_prefix("detector.") {
            if augment_set(&mut self.detector.augment, f, key, v)? {
                return Ok(());
            }
        }
        if let Some(f) = key.strip_prefix("segmenter.") {
            if augment_set(&mut self.segmenter.augment, f, key, v)? {
                return Ok(());
            }
        }
        let d = &mut self.detector;
        let s = &mut self.segmenter;
        let p = &mut self.phantom;
        match key {
            "data_root" => self.data_root = PathBuf::from(v),
            "output_dir" => self.output_dir = PathBuf::from(v),
            "group" => self.group = v.parse()?,
            "phantom_group" => {
                self.phantom_group = match v {
                    "none" | "" => None,
                    g => Some(g.parse()?),
                }
            }
            "seed" => self.seed = parse(key, v)?,
            "workers" => self.workers = parse(key, v)?,
            "split_fraction" => self.split_fraction = parse(key, v)?,
            "detector.epochs" => d.epochs = parse(key, v)?,
            "detector.batch_size" => d.batch_size = parse(key, v)?,
            "detector.learning_rate" => d.learning_rate = parse(key, v)?,
            "detector.patch_side" => d.patch_side = parse(key, v)?,
            "detector.upsample_factor" => d.upsample_factor = parse(key, v)?,
            "detector.negatives_per_positive" => d.negatives_per_positive = parse(key, v)?,
            "detector.jitter" => d.jitter = parse(key, v)?,
            "detector.tile_stride" => d.tile_stride = parse(key, v)?,
            "detector.stem" => self.detector_model.stem = parse(key, v)?,
            "detector.widths" => self.detector_model.widths = parse_list(key, v, ',')?,
            "detector.init_weights" => self.detector_init_weights = (!v.is_empty()).then(|| PathBuf::from(v)),
            "segmenter.epochs" => s.epochs = parse(key, v)?,
            "segmenter.batch_size" => s.batch_size = parse(key, v)?,
            "segmenter.learning_rate" => s.learning_rate = parse(key, v)?,
            "segmenter.keep_empty" => s.keep_empty = parse(key, v)?,
            "segmenter.crop" => s.crop = parse(key, v)?,
            "segmenter.lesion_crop_probability" => s.lesion_crop_probability = parse(key, v)?,
            "segmenter.pos_weight_cap" => s.pos_weight_cap = parse(key, v)?,
            "segmenter.widths" => self.segmenter_widths = parse_list(key, v, ',')?,
            "postprocess.binarize_threshold" => self.postprocess.binarize_threshold = parse(key, v)?,
            "postprocess.dilation_radius" => self.dilation_radius = parse(key, v)?,
            "postprocess.filter_mode" => self.postprocess.mode = v.parse::<FilterMode>()?,
            "postprocess.connectivity" => self.postprocess.connectivity = v.parse::<Connectivity>()?,
            "postprocess.threshold_margin" => self.threshold_margin = parse(key, v)?,
            "phantom.shape" => match parse_list(key, v, 'x')?.as_slice() {
                [a, b, c] => p.shape = (*a, *b, *c),
                _ => return Err(Error::InvalidArgument(format!("expected SxHxW for {key}, got {v:?}"))),
            },
            "phantom.spacing" => {
                let parts: Vec<f64> = v.split(',').map(|x| parse(key, x.trim())).collect::<Result<_>>()?;
                match parts.as_slice() {
                    [dz, dy, dx] => p.spacing = Spacing::new(*dz, *dy, *dx),
                    _ => return Err(Error::InvalidArgument(format!("expected dz,dy,dx for {key}, got {v:?}"))),
                }
            }
            "phantom.lesion_count" => p.lesion_count = parse_range(key, v)?,
            "phantom.lesion_radius" => p.lesion_radius = parse_range(key, v)?,
            "phantom.lesion_depth" => p.lesion_depth = parse(key, v)?,
            "phantom.tissue_intensity" => p.tissue_intensity = parse(key, v)?,
            "phantom.confounder_count" => p.confounder_count = parse(key, v)?,
            "phantom.noise_sd" => p.noise_sd = parse(key, v)?,
            _ => return Err(Error::InvalidArgument(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Documented text form listing every key.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, doc) in KEYS {
            out.push_str(&format!("# {doc}\n{key} = {}\n", self.get(key).expect("listed key")));
        }
        out
    }

    /// Defaults overridden by the assignments in `text`.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("config line {}: expected key = value", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::InvalidArgument(format!("config line {}: repeated key {key:?}", n + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| Error::InvalidArgument(format!("config line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Keys whose values differ from the defaults.
    pub fn overrides(&self) -> Vec<(String, String)> {
        let base = Self::default();
        KEYS.iter()
            .filter_map(|(k, _)| {
                let v = self.get(k).expect("listed key");
                (v != base.get(k).expect("listed key")).then(|| (k.to_string(), v))
            })
            .collect()
    }

    pub fn router(&self) -> Router {
        Router {
            phantom_group: self.phantom_group,
        }
    }

    pub fn model_dir(&self) -> PathBuf {
        self.output_dir.join("models").join(self.group.name())
    }

    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.segmenter.validate()?;
        self.phantom.validate()?;
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!("split fraction must lie in (0, 1), got {}", self.split_fraction)));
        }
        let b = self.postprocess.binarize_threshold;
        if !(0.0..1.0).contains(&b) {
            return Err(Error::InvalidArgument(format!("binarize threshold must lie in [0, 1), got {b}")));
        }
        if self.detector_model.widths.is_empty() || self.segmenter_widths.is_empty() {
            return Err(Error::InvalidArgument("network widths must not be empty".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig {
            phantom_group: Some(ModelGroup::B),
            detector_init_weights: Some(PathBuf::from("w/init.cmbw")),
            ..RunConfig::default()
        };
        cfg.segmenter.learning_rate = 1e-3;
        cfg.postprocess.mode = FilterMode::Object;
        cfg.phantom.shape = (12, 64, 48);
        assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(RunConfig::from_text("").unwrap(), RunConfig::default());
    }

    #[test]
    fn every_key_listed_once() {
        let cfg = RunConfig::default();
        let mut keys: Vec<_> = KEYS.iter().map(|(k, _)| *k).collect();
        for k in &keys {
            cfg.get(k).unwrap();
        }
        let n = keys.len();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), n);
    }

    #[test]
    fn rejects_unknown_repeated_and_bad_values() {
        assert!(RunConfig::from_text("detector.epoch = 3").is_err());
        assert!(RunConfig::from_text("seed = 1\nseed = 2").is_err());
        assert!(RunConfig::from_text("seed = x").is_err());
        assert!(RunConfig::from_text("seed 1").is_err());
        assert!(RunConfig::from_text("# note\n\n seed = 4 ").unwrap().seed == 4);
    }

    #[test]
    fn overrides_list_changes() {
        let cfg = RunConfig::from_text("detector.epochs = 2\nseed = 0").unwrap();
        assert_eq!(cfg.overrides(), vec![("detector.epochs".to_string(), "2".to_string())]);
    }
}
