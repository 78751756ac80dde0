//! End-to-end behaviour of the train, predict and evaluate commands on small
//! phantoms, plus segmenter training direction on hand-built slices.

mod common;

use std::sync::OnceLock;

use cmbseg_core::augment::AugmentConfig;
use cmbseg_core::catalog::{load_subject, modality_path, save_subject, Modality};
use cmbseg_core::config::RunConfig;
use cmbseg_core::error::Error;
use cmbseg_core::manifest::Manifest;
use cmbseg_core::pipeline::{
    cmd_evaluate, cmd_phantom, cmd_predict, cmd_train, cmd_train_from_manifest, predict_manifest_path,
    prediction_path, OverlaySlices, PREDICT_STAGES, THRESHOLD_FILE, TRAIN_MANIFEST,
};
use cmbseg_core::preprocess::{ChannelKind, ChannelStack};
use cmbseg_core::segmenter::{train_segmenter, SegmenterBackend, SegmenterHyperparams, TrainingPair, UNetSegmenter};
use cmbseg_core::volume::{read_nifti, write_nifti, StoredType};
use ndarray::{Array2, Array3};
use tempfile::TempDir;

struct Trained {
    _dir: TempDir,
    cfg: RunConfig,
    ids: Vec<String>,
}

/// One tiny model trained once and shared by the tests that only read it.
fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = common::tiny_config(dir.path(), 5);
        let ids = cmd_phantom(&cfg, 4, &cfg.data_root).unwrap();
        cmd_train(&cfg).unwrap();
        Trained { _dir: dir, cfg, ids }
    })
}

fn phantoms(n: usize, seed: u64) -> (TempDir, RunConfig, Vec<String>) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(dir.path(), seed);
    let ids = cmd_phantom(&cfg, n, &cfg.data_root).unwrap();
    (dir, cfg, ids)
}

#[test]
fn training_without_annotation_names_the_subject() {
    let (_dir, cfg, ids) = phantoms(3, 1);
    std::fs::remove_file(modality_path(&cfg.data_root, &ids[1], Modality::Annotation)).unwrap();
    let err = cmd_train(&cfg).unwrap_err();
    assert!(err.to_string().contains(&ids[1]), "{err}");
}

#[test]
fn predicting_unknown_subject_is_missing_file() {
    let t = trained();
    let err = cmd_predict(&t.cfg, "9999").unwrap_err();
    assert!(matches!(err.root(), Error::MissingFile(_)), "{err:?}");
}

#[test]
fn phantom_count_zero_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(dir.path(), 1);
    assert!(cmd_phantom(&cfg, 0, &cfg.data_root).is_err());
}

#[test]
fn phantom_files_are_reproducible() {
    let (_a, ca, ids) = phantoms(2, 9);
    let (_b, cb, _) = phantoms(2, 9);
    for id in &ids {
        for m in [Modality::T1, Modality::T2, Modality::T2s, Modality::Annotation] {
            let x = std::fs::read(modality_path(&ca.data_root, id, m)).unwrap();
            let y = std::fs::read(modality_path(&cb.data_root, id, m)).unwrap();
            assert_eq!(x, y, "{id} {m:?}");
        }
    }
}

#[test]
fn prediction_logs_stages_in_order_and_keeps_native_shape() {
    let t = trained();
    let out = cmd_predict(&t.cfg, &t.ids[0]).unwrap();
    assert_eq!(out.stages, PREDICT_STAGES);
    let m = Manifest::load(&predict_manifest_path(&t.cfg, &t.ids[0])).unwrap();
    let logged: Vec<String> = m.values("stages").into_iter().map(|v| v.to_string()).collect();
    assert_eq!(logged, PREDICT_STAGES);

    let mask = read_nifti(&out.mask_path).unwrap();
    let native = load_subject(&t.cfg.data_root, &t.ids[0], false).unwrap();
    assert_eq!(mask.data.dim(), native.t2s.data.dim());
    assert!(mask.is_binary());
}

#[test]
fn rerun_from_manifest_reproduces_threshold() {
    let (_dir, cfg, _) = phantoms(3, 17);
    cmd_train(&cfg).unwrap();
    let model_dir = cfg.model_dir();
    let first = std::fs::read(model_dir.join(THRESHOLD_FILE)).unwrap();
    let copy = tempfile::tempdir().unwrap();
    let manifest = copy.path().join(TRAIN_MANIFEST);
    std::fs::copy(model_dir.join(TRAIN_MANIFEST), &manifest).unwrap();
    let again = cmd_train_from_manifest(&manifest).unwrap();
    let second = std::fs::read(again.model_dir.join(THRESHOLD_FILE)).unwrap();
    assert_eq!(first, second);
}

/// Copies phantoms under ids of three cohorts and uses `pred_of` to write
/// each stored prediction from the annotation.
fn three_cohorts(pred_of: impl Fn(&Array3<f32>) -> Array3<f32>) -> (TempDir, RunConfig, Vec<String>, usize) {
    let (dir, cfg, ids) = phantoms(3, 21);
    let mut renamed = Vec::new();
    let mut lesions = 0;
    for (id, new_id) in ids.iter().zip(["1001", "2001", "3001"]) {
        let mut s = load_subject(&cfg.data_root, id, true).unwrap();
        s.id = new_id.to_string();
        save_subject(&cfg.data_root, &s).unwrap();
        let gt = s.annotation.as_ref().unwrap().volume().clone();
        lesions += common::flood_fill_components(&gt.data, cfg.postprocess.connectivity).len();
        let mut pred = gt.clone();
        pred.data = pred_of(&gt.data);
        write_nifti(&prediction_path(&cfg, new_id), &pred, StoredType::Uint8).unwrap();
        renamed.push(new_id.to_string());
    }
    (dir, cfg, renamed, lesions)
}

#[test]
fn perfect_predictions_over_three_cohorts() {
    let (_dir, cfg, ids, lesions) = three_cohorts(|gt| gt.clone());
    let out = cmd_evaluate(&cfg, &ids, &OverlaySlices::Lesions).unwrap();
    let total = out.summary.total();
    assert_eq!((total.tp, total.fp, total.fn_), (lesions, 0, 0));
    assert_eq!(out.summary.cohorts.len(), 3);
    let confusions: Vec<_> = out
        .files
        .iter()
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with("confusion_"))
        .collect();
    assert_eq!(confusions.len(), 3);
    assert!(confusions.iter().all(|p| p.exists()));
    assert!(out.files.iter().any(|p| p.to_string_lossy().contains("overlays")));
}

#[test]
fn empty_predictions_miss_every_lesion() {
    let (_dir, cfg, ids, lesions) = three_cohorts(|gt| Array3::zeros(gt.dim()));
    let out = cmd_evaluate(&cfg, &ids, &OverlaySlices::None).unwrap();
    let total = out.summary.total();
    assert_eq!((total.tp, total.fp, total.fn_), (0, 0, lesions));
}

const SIDE: usize = 32;

/// Slices whose target is a disc marked only by the stage-1 channel; the
/// T2* channels hold unrelated texture.
fn stage1_pairs(n: usize) -> Vec<TrainingPair> {
    (0..n)
        .map(|k| {
            let (cy, cx) = (8 + (k * 7) % 16, 8 + (k * 11) % 16);
            let disc = Array2::from_shape_fn((SIDE, SIDE), |(y, x)| {
                let d2 = (y as isize - cy as isize).pow(2) + (x as isize - cx as isize).pow(2);
                f32::from(d2 <= 4)
            });
            let data = Array3::from_shape_fn((4, SIDE, SIDE), |(c, y, x)| match c {
                3 => disc[[y, x]],
                _ => ((y * 3 + x * 5 + c * 7 + k) % 11) as f32 / 11.0 - 0.5,
            });
            TrainingPair {
                input: ChannelStack::new(data, ChannelKind::SegmenterInput).unwrap(),
                target: disc,
                subject: format!("s{k}"),
                slice: 0,
                pixel_scale: 1.0,
            }
        })
        .collect()
}

fn fitted() -> &'static (UNetSegmenter, Vec<f32>) {
    static CELL: OnceLock<(UNetSegmenter, Vec<f32>)> = OnceLock::new();
    CELL.get_or_init(|| {
        let pairs = stage1_pairs(16);
        let hp = SegmenterHyperparams {
            epochs: 30,
            batch_size: 4,
            learning_rate: 1e-2,
            augment: AugmentConfig {
                rotation_deg: 0.0,
                scale_min: 1.0,
                scale_max: 1.0,
                translation: 0.0,
                flip_probability: 0.0,
            },
            ..SegmenterHyperparams::default()
        };
        let mut seg = UNetSegmenter::new(&[4, 8], 3).unwrap();
        let log = train_segmenter(&pairs, &[], &hp, &mut seg, 3).unwrap();
        (seg, log.epochs.iter().map(|e| e.train).collect())
    })
}

#[test]
fn segmenter_loss_decreases() {
    let (_, losses) = fitted();
    assert!(losses.last().unwrap() < &(losses[0] * 0.5), "{losses:?}");
}

#[test]
fn stage1_candidate_raises_lesion_probability() {
    let (seg, _) = fitted();
    let pair = &stage1_pairs(1)[0];
    let with = seg.predict(&pair.input).unwrap();
    let mut cleared = pair.input.clone();
    cleared.data.index_axis_mut(ndarray::Axis(0), 3).fill(0.0);
    let without = seg.predict(&cleared).unwrap();
    let inside = |p: &Array2<f32>| {
        let (sum, n) = p
            .indexed_iter()
            .filter(|(q, _)| pair.target[*q] != 0.0)
            .fold((0.0, 0), |(s, n), (_, &v)| (s + v, n + 1));
        sum / n as f32
    };
    assert!(inside(&with) > inside(&without) + 0.1, "{} vs {}", inside(&with), inside(&without));
}

#[test]
fn prediction_depends_on_channel_order() {
    let (seg, _) = fitted();
    let pair = &stage1_pairs(1)[0];
    let mut swapped = pair.input.clone();
    let score = pair.input.data.index_axis(ndarray::Axis(0), 3).to_owned();
    let current = pair.input.data.index_axis(ndarray::Axis(0), 1).to_owned();
    swapped.data.index_axis_mut(ndarray::Axis(0), 1).assign(&score);
    swapped.data.index_axis_mut(ndarray::Axis(0), 3).assign(&current);
    let a = seg.predict(&pair.input).unwrap();
    let b = seg.predict(&swapped).unwrap();
    let diff = (&a - &b).mapv(f32::abs).fold(0.0f32, |m, &v| m.max(v));
    assert!(diff > 0.05, "max difference {diff}");
}
