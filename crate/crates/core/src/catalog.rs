//! Subject ingestion, cohort routing and the stratified train/validation split.
//!
//! On-disk layout: `<root>/<id>/<id>_<MODALITY>.nii[.gz]` with modalities
//! `T1`, `T2`, `T2S` and the lesion annotation `CMB`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::volume::{find_nifti, read_nifti, write_nifti, StoredType, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    T1,
    T2,
    T2s,
    Annotation,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::T1, Modality::T2, Modality::T2s, Modality::Annotation];

    pub fn suffix(self) -> &'static str {
        match self {
            Modality::T1 => "T1",
            Modality::T2 => "T2",
            Modality::T2s => "T2S",
            Modality::Annotation => "CMB",
        }
    }
}

pub fn modality_path(root: &Path, id: &str, modality: Modality) -> PathBuf {
    root.join(id).join(format!("{id}_{}.nii", modality.suffix()))
}

/// Binary lesion annotation on the T2* grid. Values are exactly 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationMask(Volume);

impl AnnotationMask {
    pub fn new(volume: Volume, subject: &str) -> Result<Self> {
        if !volume.is_binary() {
            return Err(Error::NonBinaryAnnotation(subject.to_string()));
        }
        Ok(Self(volume))
    }

    pub fn volume(&self) -> &Volume {
        &self.0
    }

    pub fn into_volume(self) -> Volume {
        self.0
    }
}

/// The two separately trained pipelines, split by slice thickness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModelGroup {
    /// Cohorts 1 and 3, 3.0 mm slices.
    A,
    /// Cohort 2, 0.8 mm slices.
    B,
}

impl ModelGroup {
    pub fn name(self) -> &'static str {
        match self {
            ModelGroup::A => "A",
            ModelGroup::B => "B",
        }
    }
}

impl fmt::Display for ModelGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(ModelGroup::A),
            "B" | "b" => Ok(ModelGroup::B),
            other => Err(Error::InvalidArgument(format!("unknown model group {other:?}"))),
        }
    }
}

/// Cohort digit of a subject id.
pub fn cohort_of(id: &str) -> Result<char> {
    id.chars()
        .next()
        .ok_or_else(|| Error::UnknownCohort(id.to_string()))
}

/// Routes a subject to its model group from the first digit of its id.
pub fn route_cohort(id: &str) -> Result<ModelGroup> {
    match id.chars().next() {
        Some('1') | Some('3') => Ok(ModelGroup::A),
        Some('2') => Ok(ModelGroup::B),
        _ => Err(Error::UnknownCohort(id.to_string())),
    }
}

/// Cohort routing plus an optional group for synthetic ids (cohort digit `9`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Router {
    pub phantom_group: Option<ModelGroup>,
}

impl Router {
    pub fn group(&self, id: &str) -> Result<ModelGroup> {
        match (id.chars().next(), self.phantom_group) {
            (Some('9'), Some(g)) => Ok(g),
            _ => route_cohort(id),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    pub t1: Volume,
    pub t2: Volume,
    pub t2s: Volume,
    pub annotation: Option<AnnotationMask>,
    pub slice_thickness_mm: f64,
}

impl SubjectRecord {
    /// Builds a record, checking co-registration, finiteness and the id.
    pub fn new(
        id: impl Into<String>,
        t1: Volume,
        t2: Volume,
        t2s: Volume,
        annotation: Option<AnnotationMask>,
    ) -> Result<Self> {
        let id = id.into();
        if !matches!(id.chars().next(), Some(c) if c.is_ascii_digit()) {
            return Err(Error::UnknownCohort(id));
        }
        for (name, v) in [("T1", &t1), ("T2", &t2)] {
            if v.shape() != t2s.shape() {
                return Err(Error::shape(
                    format!("{id} {name} vs T2S"),
                    &t2s.shape(),
                    &v.shape(),
                ));
            }
        }
        if let Some(a) = &annotation {
            if a.volume().shape() != t2s.shape() {
                return Err(Error::shape(
                    format!("{id} annotation vs T2S"),
                    &t2s.shape(),
                    &a.volume().shape(),
                ));
            }
        }
        for (name, v) in [("T1", &t1), ("T2", &t2), ("T2S", &t2s)] {
            if let Some(index) = v.first_non_finite() {
                return Err(Error::NonFiniteVoxel {
                    what: format!("{id} {name}"),
                    index,
                });
            }
        }
        let slice_thickness_mm = t2s.spacing.dz;
        Ok(Self {
            id,
            t1,
            t2,
            t2s,
            annotation,
            slice_thickness_mm,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.t2s.shape()
    }

    pub fn cohort(&self) -> char {
        self.id.chars().next().unwrap_or('?')
    }

    pub fn require_annotation(&self) -> Result<&AnnotationMask> {
        self.annotation
            .as_ref()
            .ok_or_else(|| Error::MissingAnnotation(self.id.clone()))
    }
}

/// Loads one subject. The annotation is read when present and is an error
/// only when `require_annotation` is set.
pub fn load_subject(root: &Path, id: &str, require_annotation: bool) -> Result<SubjectRecord> {
    let dir = root.join(id);
    let read = |m: Modality| -> Result<Volume> {
        let stem = format!("{id}_{}", m.suffix());
        let path = find_nifti(&dir, &stem).ok_or_else(|| Error::MissingFile(dir.join(format!("{stem}.nii"))))?;
        read_nifti(&path)
    };
    let t1 = read(Modality::T1)?;
    let t2 = read(Modality::T2)?;
    let t2s = read(Modality::T2s)?;
    let annotation = match read(Modality::Annotation) {
        Ok(v) => Some(AnnotationMask::new(v, id)?),
        Err(Error::MissingFile(p)) => {
            if require_annotation {
                return Err(Error::MissingFile(p));
            }
            None
        }
        Err(e) => return Err(e),
    };
    SubjectRecord::new(id, t1, t2, t2s, annotation)
}

/// Writes a subject in the standard layout. Images are stored as float32 and
/// the annotation as uint8.
pub fn save_subject(root: &Path, subject: &SubjectRecord) -> Result<()> {
    let id = &subject.id;
    write_nifti(&modality_path(root, id, Modality::T1), &subject.t1, StoredType::Float32)?;
    write_nifti(&modality_path(root, id, Modality::T2), &subject.t2, StoredType::Float32)?;
    write_nifti(&modality_path(root, id, Modality::T2s), &subject.t2s, StoredType::Float32)?;
    if let Some(a) = &subject.annotation {
        write_nifti(&modality_path(root, id, Modality::Annotation), a.volume(), StoredType::Uint8)?;
    }
    Ok(())
}

/// Subject ids under `root`: directories containing a T2* image, sorted.
pub fn discover_subjects(root: &Path) -> Result<Vec<String>> {
    if !root.is_dir() {
        return Err(Error::MissingFile(root.to_path_buf()));
    }
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(root)? {
        let entry = entry?;
        if !entry.file_type()?.is_dir() {
            continue;
        }
        let id = entry.file_name().to_string_lossy().into_owned();
        if find_nifti(&entry.path(), &format!("{id}_T2S")).is_some() {
            ids.push(id);
        }
    }
    ids.sort();
    Ok(ids)
}

/// One catalog line: id, group, shape and spacing, tab separated.
pub fn catalog_line(subject: &SubjectRecord, router: &Router) -> String {
    let [s, h, w] = subject.shape();
    let sp = subject.t2s.spacing;
    let group = router
        .group(&subject.id)
        .map(|g| g.name().to_string())
        .unwrap_or_else(|_| "?".into());
    format!(
        "{}\t{}\t{}x{}x{}\t{}x{}x{}",
        subject.id, group, s, h, w, sp.dz, sp.dy, sp.dx
    )
}

/// Deterministic split into (train, validation) ids. Each cohort is shuffled
/// with the seed and contributes `round(fraction · n_c)` subjects to training;
/// the per-cohort counts are then adjusted so the total is `round(fraction · N)`.
/// A cohort with two or more subjects always lands in both partitions.
pub fn split_train_val<T, F>(items: &[T], id_of: F, fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)>
where
    T: Clone,
    F: Fn(&T) -> &str,
{
    if items.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty subject list".into()));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let mut by_cohort: BTreeMap<char, Vec<usize>> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        let c = id_of(item).chars().next().unwrap_or('?');
        by_cohort.entry(c).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for members in by_cohort.values_mut() {
        members.sort_by(|&a, &b| id_of(&items[a]).cmp(id_of(&items[b])).then(a.cmp(&b)));
        members.shuffle(&mut rng);
    }
    let n = items.len();
    let target = ((fraction * n as f64).round() as usize).min(n);

    // Per-cohort quota clamped to [1, n_c - 1] when the cohort can be split.
    let mut quota: BTreeMap<char, usize> = BTreeMap::new();
    for (&c, m) in &by_cohort {
        let nc = m.len();
        let mut q = (fraction * nc as f64).round() as usize;
        if nc >= 2 {
            q = q.clamp(1, nc - 1);
        }
        quota.insert(c, q.min(nc));
    }
    let mut total: usize = quota.values().sum();
    // Adjust toward the global target, largest cohorts first.
    let mut order: Vec<char> = by_cohort.keys().copied().collect();
    order.sort_by(|a, b| by_cohort[b].len().cmp(&by_cohort[a].len()).then(a.cmp(b)));
    let mut guard = 0;
    while total != target && guard < 4 * n + 4 {
        guard += 1;
        let mut moved = false;
        for &c in &order {
            let nc = by_cohort[&c].len();
            let q = quota[&c];
            let (lo, hi) = if nc >= 2 { (1, nc - 1) } else { (0, nc) };
            if total < target && q < hi {
                quota.insert(c, q + 1);
                total += 1;
                moved = true;
            } else if total > target && q > lo {
                quota.insert(c, q - 1);
                total -= 1;
                moved = true;
            }
            if total == target {
                break;
            }
        }
        if !moved {
            // Stratification cannot meet the target; relax the bounds.
            for &c in &order {
                let nc = by_cohort[&c].len();
                let q = quota[&c];
                if total < target && q < nc {
                    quota.insert(c, q + 1);
                    total += 1;
                } else if total > target && q > 0 {
                    quota.insert(c, q - 1);
                    total -= 1;
                }
                if total == target {
                    break;
                }
            }
        }
    }
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for (c, members) in &by_cohort {
        let q = quota[c];
        train_idx.extend_from_slice(&members[..q]);
        val_idx.extend_from_slice(&members[q..]);
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    Ok((
        train_idx.into_iter().map(|i| items[i].clone()).collect(),
        val_idx.into_iter().map(|i| items[i].clone()).collect(),
    ))
}
