//! Post-processing of stage outputs: the max-of-minima intensity filter, the
//! dilated brain mask and final binarisation.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::morphology::{
    dilate_array, fill_holes_per_slice, label_components, largest_component, otsu_threshold,
};
use crate::volume::Volume;

pub use crate::morphology::{connected_components, dilate, Connectivity, Lesion, LesionSet};

/// Default cut applied to the segmenter probabilities.
pub const BINARIZE_THRESHOLD: f32 = 0.001;
pub const DEFAULT_DILATION_RADIUS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct LesionMinimum {
    pub subject: String,
    /// 1-based component label within the subject's annotation.
    pub lesion: usize,
    pub minimum: f32,
}

/// Intensity cut in z-units of the normalised T2* image.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityThreshold {
    pub value: f32,
    pub margin: f32,
    pub provenance: Vec<LesionMinimum>,
}

impl IntensityThreshold {
    /// Largest per-lesion minimum plus `margin`.
    pub fn from_provenance(provenance: Vec<LesionMinimum>, margin: f32) -> Result<Self> {
        let max = provenance
            .iter()
            .map(|p| p.minimum)
            .fold(None, |acc: Option<f32>, v| Some(acc.map_or(v, |a| a.max(v))))
            .ok_or(Error::NoLesionsInDataset)?;
        Ok(Self {
            value: max + margin,
            margin,
            provenance,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("value {}\nmargin {}\n", self.value, self.margin);
        for p in &self.provenance {
            s.push_str(&format!("lesion {} {} {}\n", p.subject, p.lesion, p.minimum));
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |m: String| Error::Format {
            path: path.to_path_buf(),
            message: m,
        };
        let mut value = None;
        let mut margin = 0.0f32;
        let mut provenance = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                [] => {}
                ["value", v] => value = Some(v.parse::<f32>().map_err(|e| bad(format!("line {}: {e}", n + 1)))?),
                ["margin", v] => margin = v.parse::<f32>().map_err(|e| bad(format!("line {}: {e}", n + 1)))?,
                ["lesion", s, l, m] => provenance.push(LesionMinimum {
                    subject: s.to_string(),
                    lesion: l.parse().map_err(|e| bad(format!("line {}: {e}", n + 1)))?,
                    minimum: m.parse().map_err(|e| bad(format!("line {}: {e}", n + 1)))?,
                }),
                _ => return Err(bad(format!("line {}: unrecognised {line:?}", n + 1))),
            }
        }
        let value = value.ok_or_else(|| bad("missing value line".into()))?;
        if provenance.is_empty() {
            return Err(bad("no provenance lines".into()));
        }
        Ok(Self {
            value,
            margin,
            provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(p) = path.parent() {
            std::fs::create_dir_all(p)?;
        }
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingModel(path.to_path_buf()));
        }
        Self::parse(&std::fs::read_to_string(path)?, path)
    }
}

/// Per-lesion minima of `t2s` over the components of `annotation`.
pub fn lesion_minima(subject: &str, t2s: &Volume, annotation: &Volume, connectivity: Connectivity) -> Result<Vec<LesionMinimum>> {
    t2s.ensure_same_shape(annotation, "annotation vs T2S")?;
    let set = label_components(&annotation.data, connectivity);
    Ok(set
        .lesions
        .iter()
        .enumerate()
        .map(|(k, l)| LesionMinimum {
            subject: subject.to_string(),
            lesion: k + 1,
            minimum: l.voxels.iter().map(|v| t2s.data[*v]).fold(f32::INFINITY, f32::min),
        })
        .collect())
}

/// Max over every training lesion of that lesion's darkest normalised T2*
/// value. `subjects` yields `(id, normalised T2*, annotation)`.
pub fn derive_intensity_threshold<'a, I>(subjects: I, connectivity: Connectivity, margin: f32) -> Result<IntensityThreshold>
where
    I: IntoIterator<Item = (&'a str, &'a Volume, &'a Volume)>,
{
    let mut provenance = Vec::new();
    for (id, t2s, ann) in subjects {
        provenance.extend(lesion_minima(id, t2s, ann, connectivity)?);
    }
    IntensityThreshold::from_provenance(provenance, margin)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FilterMode {
    /// Zero every voxel brighter than the threshold.
    #[default]
    Voxel,
    /// Keep a whole connected component of positive scores when any of its
    /// voxels passes the threshold.
    Object,
}

impl fmt::Display for FilterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FilterMode::Voxel => "voxel",
            FilterMode::Object => "object",
        })
    }
}

impl FromStr for FilterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "voxel" => Ok(FilterMode::Voxel),
            "object" => Ok(FilterMode::Object),
            other => Err(Error::InvalidArgument(format!("filter mode must be voxel or object, got {other:?}"))),
        }
    }
}

pub fn apply_intensity_filter(
    scores: &Volume,
    t2s_norm: &Volume,
    thr: &IntensityThreshold,
    mode: FilterMode,
    connectivity: Connectivity,
) -> Result<Volume> {
    scores.ensure_same_shape(t2s_norm, "scores vs T2S")?;
    let mut out = scores.clone();
    match mode {
        FilterMode::Voxel => {
            for (o, &t) in out.data.iter_mut().zip(t2s_norm.data.iter()) {
                if t > thr.value {
                    *o = 0.0;
                }
            }
        }
        FilterMode::Object => {
            let positive = scores.data.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
            let set = label_components(&positive, connectivity);
            for lesion in &set.lesions {
                let survives = lesion.voxels.iter().any(|v| t2s_norm.data[*v] <= thr.value);
                if !survives {
                    for v in &lesion.voxels {
                        out.data[*v] = 0.0;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BrainMask {
    pub mask: Volume,
    pub core: Volume,
    pub dilation_radius: usize,
}

/// Foreground by two-class histogram split, largest 3D component, holes
/// filled slice by slice, then dilated by a ball of `dilation_radius`.
pub fn compute_brain_mask(t2s: &Volume, dilation_radius: usize, connectivity: Connectivity) -> Result<BrainMask> {
    let values = t2s.data.as_slice().map(<[f32]>::to_vec).unwrap_or_else(|| t2s.data.iter().copied().collect());
    let split = otsu_threshold(&values, 256).ok_or(Error::EmptyMask)?;
    let fg = t2s.data.mapv(|v| if v > split { 1.0 } else { 0.0 });
    let largest = largest_component(&fg, connectivity);
    if largest.iter().all(|&v| v == 0.0) {
        return Err(Error::EmptyMask);
    }
    let core = fill_holes_per_slice(&largest);
    let mask = dilate_array(&core, dilation_radius);
    Ok(BrainMask {
        mask: Volume {
            data: mask,
            spacing: t2s.spacing,
        },
        core: Volume {
            data: core,
            spacing: t2s.spacing,
        },
        dilation_radius,
    })
}

/// `1` where `prob > threshold`, else `0`.
pub fn binarize(prob: &Volume, threshold: f32) -> Volume {
    Volume {
        data: prob.data.mapv(|v| if v > threshold { 1.0 } else { 0.0 }),
        spacing: prob.spacing,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PostprocessSettings {
    pub mode: FilterMode,
    pub connectivity: Connectivity,
    pub binarize_threshold: f32,
}

impl Default for PostprocessSettings {
    fn default() -> Self {
        Self {
            mode: FilterMode::Voxel,
            connectivity: Connectivity::TwentySix,
            binarize_threshold: BINARIZE_THRESHOLD,
        }
    }
}

/// Stage names in the fixed order applied by [`postprocess_pipeline`].
pub const POSTPROCESS_ORDER: [&str; 3] = ["intensity_filter", "brain_mask", "binarize"];

/// Intensity filter, then brain-mask multiply, then binarisation.
pub fn postprocess_pipeline(
    prob: &Volume,
    t2s_norm: &Volume,
    thr: &IntensityThreshold,
    brain: &BrainMask,
    settings: &PostprocessSettings,
) -> Result<Volume> {
    prob.ensure_same_shape(&brain.mask, "probabilities vs brain mask")?;
    let filtered = apply_intensity_filter(prob, t2s_norm, thr, settings.mode, settings.connectivity)?;
    let mut masked = filtered;
    for (v, &m) in masked.data.iter_mut().zip(brain.mask.data.iter()) {
        if m == 0.0 {
            *v = 0.0;
        }
    }
    Ok(binarize(&masked, settings.binarize_threshold))
}
