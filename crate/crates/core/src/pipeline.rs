//! End-to-end commands: train, predict, evaluate, phantom, plot and catalog.
//! Every command writes a manifest next to its outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::catalog::{catalog_line, discover_subjects, load_subject, split_train_val, SubjectRecord};
use crate::config::RunConfig;
use crate::detector::{
    extract_training_patches, finetune_detector, infer_detector, save_detector, PatchSample, SamplingPolicy,
    TinyDetector, TrainLog,
};
use crate::error::{Error, Result, StageContext};
use crate::evaluation::{
    aggregate_cohort, cohorts_table, evaluate_subject, parse_cohorts_table, render_confusion, render_overlay,
    subjects_table, CohortSummary, SubjectEval,
};
use crate::exec;
use crate::manifest::{sha256_file, Manifest};
use crate::phantom::{generate_cohort, save_phantom};
use crate::postprocess::{apply_intensity_filter, binarize, compute_brain_mask, derive_intensity_threshold, IntensityThreshold};
use crate::preprocess::{
    invert_resize, prepare_subject, resize_inplane, zscore_normalize, Interpolation, PreparedSubject, ResizeTransform,
    COMMON_SIDE,
};
use crate::segmenter::{
    build_training_pairs, infer_segmenter, random_crop, save_segmenter, train_segmenter, TrainingPair, UNetSegmenter,
};
use crate::volume::{read_nifti, write_nifti, StoredType, Volume};

pub const DETECTOR_FILE: &str = "detector.cmbw";
pub const SEGMENTER_FILE: &str = "segmenter.cmbw";
pub const THRESHOLD_FILE: &str = "threshold.txt";
pub const TRAIN_MANIFEST: &str = "train_manifest.txt";

/// Stages of a prediction, in execution order.
pub const PREDICT_STAGES: [&str; 9] = [
    "normalize",
    "resize",
    "detector",
    "intensity_filter",
    "segmenter",
    "intensity_filter",
    "brain_mask",
    "binarize",
    "invert_resize",
];

pub fn prediction_path(cfg: &RunConfig, id: &str) -> PathBuf {
    cfg.output_dir.join("predictions").join(format!("{id}_pred.nii"))
}

pub fn predict_manifest_path(cfg: &RunConfig, id: &str) -> PathBuf {
    cfg.output_dir.join("predictions").join(format!("{id}_predict.txt"))
}

pub fn eval_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("eval")
}

/// Independent stream for one purpose and one index.
fn sub_seed(base: u64, purpose: u64, index: usize) -> u64 {
    let mut z = base ^ purpose.wrapping_mul(0xD1B5_4A32_D192_ED03) ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SEED_PATCHES: u64 = 1;
const SEED_DETECTOR_INIT: u64 = 2;
const SEED_DETECTOR_TRAIN: u64 = 3;
const SEED_PAIRS: u64 = 4;
const SEED_SEGMENTER_INIT: u64 = 5;
const SEED_SEGMENTER_TRAIN: u64 = 6;
const SEED_VAL_CROPS: u64 = 7;

/// Subjects under the data root routed to the configured group.
pub fn group_subject_ids(cfg: &RunConfig) -> Result<Vec<String>> {
    let router = cfg.router();
    let mut out = Vec::new();
    for id in discover_subjects(&cfg.data_root)? {
        if router.group(&id)? == cfg.group {
            out.push(id);
        }
    }
    Ok(out)
}

fn push_log(m: &mut Manifest, section: &str, log: &TrainLog) {
    m.push(section, "pos_weight", log.pos_weight);
    m.push(section, "steps", log.steps);
    for e in &log.epochs {
        let val = e.val.map(|v| v.to_string()).unwrap_or_else(|| "-".into());
        m.push(section, format!("epoch.{}", e.epoch), format!("train {} val {val}", e.train));
    }
}

/// Loss of one epoch as recorded in a manifest section.
pub fn manifest_epoch_loss(m: &Manifest, section: &str, epoch: usize) -> Option<f32> {
    m.get(section, &format!("epoch.{epoch}"))?
        .split_whitespace()
        .nth(1)?
        .parse()
        .ok()
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub model_dir: PathBuf,
    pub threshold: IntensityThreshold,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub detector_log: TrainLog,
    pub segmenter_log: TrainLog,
    pub manifest: Manifest,
}

/// Stage-1 scores after the intensity filter.
fn stage1_scores(
    detector: &TinyDetector,
    subject: &PreparedSubject,
    thr: &IntensityThreshold,
    cfg: &RunConfig,
) -> Result<Volume> {
    let det = infer_detector(detector, subject, &cfg.detector)?;
    apply_intensity_filter(&det.scores, &subject.t2s, thr, cfg.postprocess.mode, cfg.postprocess.connectivity)
}

/// Trains both stages for one model group and writes the detector,
/// segmenter, intensity threshold and training manifest.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate().stage("config")?;
    let ids = group_subject_ids(cfg).stage("catalog")?;
    if ids.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no subjects of group {} under {}",
            cfg.group,
            cfg.data_root.display()
        )))
        .stage("catalog");
    }
    let mut m = Manifest::new();
    m.push("run", "command", "train");
    m.push("run", "group", cfg.group);
    m.push("run", "seed", cfg.seed);
    m.push("run", "subjects", ids.join(","));
    m.push_config(cfg);
    for (k, v) in cfg.overrides() {
        m.push("overrides", k, v);
    }
    let stage = |m: &mut Manifest, name: &str| {
        let n = m.section("stages").map_or(0, |s| s.len()) + 1;
        m.push("stages", n.to_string(), name);
    };

    stage(&mut m, "load");
    let prepared: Vec<PreparedSubject> = exec::map(&ids, |id| -> Result<PreparedSubject> {
        let record: SubjectRecord = load_subject(&cfg.data_root, id, true)?;
        prepare_subject(&record, COMMON_SIDE)
    })
    .into_iter()
    .collect::<Result<_>>()
    .stage("load")?;

    stage(&mut m, "threshold");
    let with_ann = prepared
        .iter()
        .map(|p| Ok((p.id.as_str(), &p.t2s, p.require_annotation()?)))
        .collect::<Result<Vec<_>>>()
        .stage("threshold")?;
    let threshold =
        derive_intensity_threshold(with_ann, cfg.postprocess.connectivity, cfg.threshold_margin).stage("threshold")?;
    let model_dir = cfg.model_dir();
    std::fs::create_dir_all(&model_dir).stage("threshold")?;
    threshold.save(&model_dir.join(THRESHOLD_FILE)).stage("threshold")?;
    m.push("threshold", "value", threshold.value);
    m.push("threshold", "margin", threshold.margin);
    m.push("threshold", "lesions", threshold.provenance.len());

    stage(&mut m, "split");
    let (train_ids, val_ids) = split_train_val(&ids, |s| s.as_str(), cfg.split_fraction, cfg.seed).stage("split")?;
    m.push("split", "train", train_ids.join(","));
    m.push("split", "val", val_ids.join(","));
    let pick = |set: &[String]| -> Vec<&PreparedSubject> { prepared.iter().filter(|p| set.contains(&p.id)).collect() };
    let (train, val) = (pick(&train_ids), pick(&val_ids));

    stage(&mut m, "detector_patches");
    let policy = SamplingPolicy::from_hyperparams(&cfg.detector);
    let patches = |subjects: &[&PreparedSubject], offset: usize| -> Result<Vec<PatchSample>> {
        let per = exec::map_range(subjects.len(), |i| {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, SEED_PATCHES, offset + i));
            extract_training_patches(subjects[i], &cfg.detector, &policy, &mut rng)
        });
        Ok(per.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect())
    };
    let train_patches = patches(&train, 0).stage("detector_patches")?;
    let val_patches = patches(&val, train.len()).stage("detector_patches")?;
    m.push("detector", "train_patches", train_patches.len());
    m.push("detector", "val_patches", val_patches.len());

    stage(&mut m, "detector_train");
    let mut detector = match &cfg.detector_init_weights {
        Some(p) => TinyDetector::load_file(p),
        None => TinyDetector::new(cfg.detector_model.clone(), sub_seed(cfg.seed, SEED_DETECTOR_INIT, 0)),
    }
    .stage("detector_train")?;
    let detector_log = finetune_detector(
        &train_patches,
        &val_patches,
        &cfg.detector,
        &mut detector,
        sub_seed(cfg.seed, SEED_DETECTOR_TRAIN, 0),
    )
    .stage("detector_train")?;
    drop((train_patches, val_patches));
    push_log(&mut m, "detector", &detector_log);
    save_detector(&detector, &model_dir.join(DETECTOR_FILE)).stage("detector_train")?;

    stage(&mut m, "stage1_inference");
    let pairs_for = |subjects: &[&PreparedSubject], offset: usize| -> Result<Vec<TrainingPair>> {
        let mut out = Vec::new();
        for (i, s) in subjects.iter().enumerate() {
            let stage1 = stage1_scores(&detector, s, &threshold, cfg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, SEED_PAIRS, offset + i));
            out.extend(build_training_pairs(s, &stage1, cfg.segmenter.keep_empty, &mut rng)?);
        }
        Ok(out)
    };
    let pairs = pairs_for(&train, 0).stage("stage1_inference")?;
    let mut crop_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, SEED_VAL_CROPS, 0));
    let val_pairs: Vec<TrainingPair> = pairs_for(&val, train.len())
        .stage("stage1_inference")?
        .iter()
        .map(|p| random_crop(p, cfg.segmenter.crop, cfg.segmenter.lesion_crop_probability, &mut crop_rng))
        .collect();
    m.push("segmenter", "train_pairs", pairs.len());
    m.push("segmenter", "val_pairs", val_pairs.len());

    stage(&mut m, "segmenter_train");
    let mut segmenter =
        UNetSegmenter::new(&cfg.segmenter_widths, sub_seed(cfg.seed, SEED_SEGMENTER_INIT, 0)).stage("segmenter_train")?;
    let segmenter_log = train_segmenter(
        &pairs,
        &val_pairs,
        &cfg.segmenter,
        &mut segmenter,
        sub_seed(cfg.seed, SEED_SEGMENTER_TRAIN, 0),
    )
    .stage("segmenter_train")?;
    push_log(&mut m, "segmenter", &segmenter_log);
    save_segmenter(&segmenter, &model_dir.join(SEGMENTER_FILE)).stage("segmenter_train")?;

    for f in [DETECTOR_FILE, SEGMENTER_FILE, THRESHOLD_FILE] {
        m.push("artifacts", f, sha256_file(&model_dir.join(f)).stage("manifest")?);
    }
    m.save(&model_dir.join(TRAIN_MANIFEST)).stage("manifest")?;
    Ok(TrainSummary {
        model_dir,
        threshold,
        train_ids,
        val_ids,
        detector_log,
        segmenter_log,
        manifest: m,
    })
}

/// Re-runs training from the config recorded in a training manifest.
pub fn cmd_train_from_manifest(path: &Path) -> Result<TrainSummary> {
    let cfg = Manifest::load(path).stage("manifest")?.config().stage("manifest")?;
    cmd_train(&cfg)
}

#[derive(Debug, Clone)]
pub struct PredictOutcome {
    pub id: String,
    pub mask_path: PathBuf,
    pub manifest_path: PathBuf,
    pub lesion_voxels: usize,
    pub stages: Vec<String>,
}

/// Trained artifacts of one group.
pub struct Models {
    pub detector: TinyDetector,
    pub segmenter: UNetSegmenter,
    pub threshold: IntensityThreshold,
    pub dir: PathBuf,
}

impl Models {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            detector: TinyDetector::load_file(&dir.join(DETECTOR_FILE))?,
            segmenter: UNetSegmenter::load_file(&dir.join(SEGMENTER_FILE))?,
            threshold: IntensityThreshold::load(&dir.join(THRESHOLD_FILE))?,
            dir: dir.to_path_buf(),
        })
    }
}

/// Runs the full prediction for one subject and writes its native-grid mask.
pub fn cmd_predict(cfg: &RunConfig, id: &str) -> Result<PredictOutcome> {
    let record = load_subject(&cfg.data_root, id, false).stage("load")?;
    let group = cfg.router().group(id).stage("load")?;
    let dir = cfg.output_dir.join("models").join(group.name());
    let models = Models::load(&dir).stage("load_models")?;
    predict_with(cfg, &record, &models)
}

/// Predictions for many subjects, run concurrently.
pub fn cmd_predict_many(cfg: &RunConfig, ids: &[String]) -> Result<Vec<PredictOutcome>> {
    let mut cache: BTreeMap<String, Models> = BTreeMap::new();
    let router = cfg.router();
    for id in ids {
        let group = router.group(id).stage("load")?;
        if !cache.contains_key(group.name()) {
            let dir = cfg.output_dir.join("models").join(group.name());
            cache.insert(group.name().to_string(), Models::load(&dir).stage("load_models")?);
        }
    }
    exec::map(ids, |id| -> Result<PredictOutcome> {
        let record = load_subject(&cfg.data_root, id, false).stage("load")?;
        let group = router.group(id).stage("load")?;
        predict_with(cfg, &record, &cache[group.name()])
    })
    .into_iter()
    .collect()
}

fn predict_with(cfg: &RunConfig, record: &SubjectRecord, models: &Models) -> Result<PredictOutcome> {
    let id = record.id.as_str();
    let mut m = Manifest::new();
    m.push("run", "command", "predict");
    m.push("run", "subject", id);
    m.push("run", "models", models.dir.display());
    m.push_config(cfg);
    m.push("threshold", "value", models.threshold.value);
    let mut stages = Vec::with_capacity(PREDICT_STAGES.len());
    let mut stage = |m: &mut Manifest, name: &str| {
        stages.push(name.to_string());
        m.push("stages", stages.len().to_string(), name);
        name.to_string()
    };
    let conn = cfg.postprocess.connectivity;
    let mode = cfg.postprocess.mode;

    let s = stage(&mut m, "normalize");
    let t1 = zscore_normalize(&record.t1).stage(&s)?;
    let t2 = zscore_normalize(&record.t2).stage(&s)?;
    let t2s = zscore_normalize(&record.t2s).stage(&s)?;

    let s = stage(&mut m, "resize");
    let [_, h, w] = record.shape();
    let linear = ResizeTransform::to_common((h, w), Interpolation::Linear);
    let subject = PreparedSubject {
        id: id.to_string(),
        t1: resize_inplane(&t1, &linear).stage(&s)?,
        t2: resize_inplane(&t2, &linear).stage(&s)?,
        t2s: resize_inplane(&t2s, &linear).stage(&s)?,
        annotation: None,
        transform: linear.with_interpolation(Interpolation::Nearest),
        native_shape: record.shape(),
    };
    drop((t1, t2, t2s));
    for line in subject.transform.to_manifest_lines("resize") {
        if let Some((k, v)) = line.split_once(" = ") {
            m.push("transform", k, v);
        }
    }

    let s = stage(&mut m, "detector");
    let det = infer_detector(&models.detector, &subject, &cfg.detector).stage(&s)?;

    let s = stage(&mut m, "intensity_filter");
    let stage1 = apply_intensity_filter(&det.scores, &subject.t2s, &models.threshold, mode, conn).stage(&s)?;
    drop(det);

    let s = stage(&mut m, "segmenter");
    let prob = infer_segmenter(&models.segmenter, &subject, &stage1).stage(&s)?;

    let s = stage(&mut m, "intensity_filter");
    let filtered = apply_intensity_filter(&prob, &subject.t2s, &models.threshold, mode, conn).stage(&s)?;

    let s = stage(&mut m, "brain_mask");
    let brain = compute_brain_mask(&subject.t2s, cfg.dilation_radius, conn).stage(&s)?;
    let mut masked = filtered;
    masked.data.zip_mut_with(&brain.mask.data, |v, &b| {
        if b == 0.0 {
            *v = 0.0
        }
    });

    stage(&mut m, "binarize");
    let binary = binarize(&masked, cfg.postprocess.binarize_threshold);

    let s = stage(&mut m, "invert_resize");
    let native = invert_resize(&binary, &subject.transform).stage(&s)?;
    let native = Volume {
        data: native.data,
        spacing: record.t2s.spacing,
    };

    let mask_path = prediction_path(cfg, id);
    write_nifti(&mask_path, &native, StoredType::Uint8).stage("write")?;
    m.push("artifacts", "mask", sha256_file(&mask_path).stage("write")?);
    let manifest_path = predict_manifest_path(cfg, id);
    m.save(&manifest_path).stage("write")?;
    Ok(PredictOutcome {
        id: id.to_string(),
        mask_path,
        manifest_path,
        lesion_voxels: native.count_nonzero(),
        stages,
    })
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub subjects: Vec<SubjectEval>,
    pub summary: CohortSummary,
    pub files: Vec<PathBuf>,
}

/// Which slices get an overlay image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OverlaySlices {
    /// Slices holding annotated or predicted voxels.
    Lesions,
    List(Vec<usize>),
    None,
}

/// Scores stored predictions against annotations and writes the subject and
/// cohort tables, overlays and one confusion image per cohort.
pub fn cmd_evaluate(cfg: &RunConfig, ids: &[String], overlays: &OverlaySlices) -> Result<EvalOutcome> {
    if ids.is_empty() {
        return Err(Error::InvalidArgument("no subjects to evaluate".into())).stage("evaluate");
    }
    let dir = eval_dir(cfg);
    let conn = cfg.postprocess.connectivity;
    let per = exec::map(ids, |id| -> Result<(SubjectEval, Vec<PathBuf>)> {
        let record = load_subject(&cfg.data_root, id, true)?;
        let gt = record.require_annotation()?.volume();
        let pred = read_nifti(&prediction_path(cfg, id))?;
        let eval = evaluate_subject(id, &pred, gt, conn)?;
        let slices: Vec<usize> = match overlays {
            OverlaySlices::None => Vec::new(),
            OverlaySlices::List(v) => v.clone(),
            OverlaySlices::Lesions => (0..gt.slices())
                .filter(|&z| gt.slice(z).iter().chain(pred.slice(z).iter()).any(|&v| v != 0.0))
                .collect(),
        };
        let mut files = Vec::new();
        for z in slices {
            if z >= gt.slices() {
                return Err(Error::IndexOutOfRange { index: z, len: gt.slices() });
            }
            let out = dir.join("overlays").join(format!("{id}_s{z}.png"));
            render_overlay(record.t2s.slice(z), gt.slice(z), pred.slice(z), &out)?;
            files.push(out);
        }
        Ok((eval, files))
    });
    let mut subjects = Vec::new();
    let mut files = Vec::new();
    for r in per {
        let (e, f) = r.stage("evaluate")?;
        subjects.push(e);
        files.extend(f);
    }
    let reports: Vec<(String, _)> = subjects.iter().map(|e| (e.id.clone(), e.report.clone())).collect();
    let summary = aggregate_cohort(&reports, &cfg.router()).stage("evaluate")?;
    std::fs::create_dir_all(&dir).stage("evaluate")?;
    let subjects_path = dir.join("subjects.tsv");
    std::fs::write(&subjects_path, subjects_table(&subjects)).stage("evaluate")?;
    let cohorts_path = dir.join("cohorts.tsv");
    std::fs::write(&cohorts_path, cohorts_table(&summary)).stage("evaluate")?;
    files.push(subjects_path);
    files.push(cohorts_path);
    files.extend(render_confusions(&dir, &summary.cohorts.clone().into_iter().collect::<Vec<_>>()).stage("plot")?);
    let mut m = Manifest::new();
    m.push("run", "command", "evaluate");
    m.push("run", "subjects", ids.join(","));
    m.push_config(cfg);
    let manifest_path = dir.join("eval_manifest.txt");
    m.save(&manifest_path).stage("evaluate")?;
    files.push(manifest_path);
    Ok(EvalOutcome { subjects, summary, files })
}

fn render_confusions(dir: &Path, cohorts: &[(char, crate::evaluation::Counts)]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for (c, counts) in cohorts {
        let p = dir.join(format!("confusion_{c}.png"));
        render_confusion(*c, counts, &p)?;
        out.push(p);
    }
    Ok(out)
}

/// Re-renders the confusion images from a stored cohort table.
pub fn cmd_plot(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let dir = eval_dir(cfg);
    let table = dir.join("cohorts.tsv");
    if !table.exists() {
        return Err(Error::MissingFile(table)).stage("plot");
    }
    let text = std::fs::read_to_string(&table).stage("plot")?;
    let cohorts = parse_cohorts_table(&text).stage("plot")?;
    render_confusions(&dir, &cohorts.into_iter().collect::<Vec<_>>()).stage("plot")
}

/// Writes `n` phantom subjects under `root` and returns their ids.
pub fn cmd_phantom(cfg: &RunConfig, n: usize, root: &Path) -> Result<Vec<String>> {
    let cohort = generate_cohort(n, &cfg.phantom, cfg.seed).stage("phantom")?;
    let mut ids = Vec::with_capacity(n);
    for p in &cohort {
        save_phantom(root, p).stage("phantom")?;
        ids.push(p.subject.id.clone());
    }
    Ok(ids)
}

/// One catalog line per subject under the data root.
pub fn cmd_catalog(cfg: &RunConfig) -> Result<Vec<String>> {
    let router = cfg.router();
    let ids = discover_subjects(&cfg.data_root).stage("catalog")?;
    ids.iter()
        .map(|id| Ok(catalog_line(&load_subject(&cfg.data_root, id, false)?, &router)))
        .collect::<Result<Vec<_>>>()
        .stage("catalog")
}
