//! Lesion-level matching, overlap metrics, cohort aggregation and the PNG
//! renderings (overlays and per-cohort confusion matrices).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array2, ArrayView2};

use crate::catalog::{cohort_of, ModelGroup, Router};
use crate::error::{Error, Result};
use crate::morphology::{label_components, label_components_2d, Connectivity};
use crate::volume::Volume;

/// Outcome of matching one predicted mask against one annotation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MatchReport {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// `(gt label, predicted label)`, both 1-based.
    pub matched: Vec<(usize, usize)>,
    /// `(gt label, predicted label, shared voxels)` for every overlapping pair.
    pub overlaps: Vec<(usize, usize, usize)>,
}

impl MatchReport {
    pub fn gt_count(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn pred_count(&self) -> usize {
        self.tp + self.fp
    }
}

/// One-to-one lesion matching. Overlapping pairs are taken greedily by
/// descending overlap, ties broken by the lower GT label, then the lower
/// predicted label.
pub fn match_lesions(pred: &Volume, gt: &Volume, connectivity: Connectivity) -> Result<MatchReport> {
    pred.ensure_same_shape(gt, "prediction vs annotation")?;
    let p = label_components(&pred.data, connectivity);
    let g = label_components(&gt.data, connectivity);
    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (&gl, &pl) in g.labels.iter().zip(p.labels.iter()) {
        if gl > 0 && pl > 0 {
            *counts.entry((gl as usize, pl as usize)).or_default() += 1;
        }
    }
    let mut overlaps: Vec<(usize, usize, usize)> = counts.into_iter().map(|((a, b), n)| (a, b, n)).collect();
    overlaps.sort_by(|a, b| b.2.cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));

    let mut gt_used = vec![false; g.count() + 1];
    let mut pred_used = vec![false; p.count() + 1];
    let mut matched = Vec::new();
    for &(gl, pl, _) in &overlaps {
        if !gt_used[gl] && !pred_used[pl] {
            gt_used[gl] = true;
            pred_used[pl] = true;
            matched.push((gl, pl));
        }
    }
    matched.sort_unstable();
    let tp = matched.len();
    Ok(MatchReport {
        tp,
        fp: p.count() - tp,
        fn_: g.count() - tp,
        matched,
        overlaps,
    })
}

/// Voxel Dice; 1.0 when both masks are empty.
pub fn dice(pred: &Volume, gt: &Volume) -> Result<f64> {
    pred.ensure_same_shape(gt, "prediction vs annotation")?;
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&x, &y) in pred.data.iter().zip(gt.data.iter()) {
        let (x, y) = (x != 0.0, y != 0.0);
        a += usize::from(x);
        b += usize::from(y);
        inter += usize::from(x && y);
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub subjects: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    fn add(&mut self, r: &MatchReport) {
        self.subjects += 1;
        self.tp += r.tp;
        self.fp += r.fp;
        self.fn_ += r.fn_;
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        1.0
    } else {
        a as f64 / b as f64
    }
}

/// Sums per cohort digit and per model group.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CohortSummary {
    pub cohorts: BTreeMap<char, Counts>,
    pub groups: BTreeMap<ModelGroup, Counts>,
}

impl CohortSummary {
    pub fn total(&self) -> Counts {
        let mut t = Counts::default();
        for c in self.cohorts.values() {
            t.subjects += c.subjects;
            t.tp += c.tp;
            t.fp += c.fp;
            t.fn_ += c.fn_;
        }
        t
    }
}

pub fn aggregate_cohort(reports: &[(String, MatchReport)], router: &Router) -> Result<CohortSummary> {
    let mut out = CohortSummary::default();
    for (id, r) in reports {
        let cohort = cohort_of(id)?;
        let group = router.group(id)?;
        out.cohorts.entry(cohort).or_default().add(r);
        out.groups.entry(group).or_default().add(r);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectEval {
    pub id: String,
    pub report: MatchReport,
    pub dice: f64,
}

pub fn evaluate_subject(id: &str, pred: &Volume, gt: &Volume, connectivity: Connectivity) -> Result<SubjectEval> {
    Ok(SubjectEval {
        id: id.to_string(),
        report: match_lesions(pred, gt, connectivity)?,
        dice: dice(pred, gt)?,
    })
}

/// Tab-separated `subject cohort tp fp fn dice` table with a header line.
pub fn subjects_table(rows: &[SubjectEval]) -> String {
    let mut s = String::from("subject\tcohort\ttp\tfp\tfn\tdice\n");
    for r in rows {
        let cohort = r.id.chars().next().unwrap_or('?');
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{:.6}",
            r.id, cohort, r.report.tp, r.report.fp, r.report.fn_, r.dice
        );
    }
    s
}

/// Tab-separated per-cohort and per-group summary.
pub fn cohorts_table(summary: &CohortSummary) -> String {
    let mut s = String::from("level\tname\tsubjects\ttp\tfp\tfn\trecall\tprecision\n");
    let mut row = |level: &str, name: String, c: &Counts| {
        let _ = writeln!(
            s,
            "{level}\t{name}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}",
            c.subjects,
            c.tp,
            c.fp,
            c.fn_,
            c.recall(),
            c.precision()
        );
    };
    for (c, counts) in &summary.cohorts {
        row("cohort", c.to_string(), counts);
    }
    for (g, counts) in &summary.groups {
        row("group", g.to_string(), counts);
    }
    s
}

/// Parses the cohort rows of [`cohorts_table`] back into counts.
pub fn parse_cohorts_table(text: &str) -> Result<BTreeMap<char, Counts>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.first() != Some(&"cohort") {
            continue;
        }
        let bad = || Error::InvalidArgument(format!("cohort table line {}: {line:?}", n + 1));
        if f.len() < 6 {
            return Err(bad());
        }
        let num = |i: usize| f[i].parse::<usize>().map_err(|_| bad());
        let c = f[1].chars().next().ok_or_else(bad)?;
        out.insert(
            c,
            Counts {
                subjects: num(2)?,
                tp: num(3)?,
                fp: num(4)?,
                fn_: num(5)?,
            },
        );
    }
    Ok(out)
}

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);

/// Grey T2* base scaled to `[0, 200]`, predictions tinted red, and a white
/// rectangle around each annotated lesion's in-plane bounding box.
pub fn overlay_image(t2s: ArrayView2<'_, f32>, gt: ArrayView2<'_, f32>, pred: ArrayView2<'_, f32>) -> Result<RgbImage> {
    let (h, w) = t2s.dim();
    for (what, a) in [("annotation slice", gt), ("prediction slice", pred)] {
        if a.dim() != (h, w) {
            return Err(Error::shape(what, &[h, w], &[a.dim().0, a.dim().1]));
        }
    }
    let (lo, hi) = t2s.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img = RgbImage::new(w as u32, h as u32);
    for ((y, x), &v) in t2s.indexed_iter() {
        let g = ((v - lo) / span * 200.0).round().clamp(0.0, 200.0) as u8;
        let px = if pred[[y, x]] != 0.0 { Rgb([255, g / 3, g / 3]) } else { Rgb([g, g, g]) };
        img.put_pixel(x as u32, y as u32, px);
    }
    let mask: Array2<u8> = gt.mapv(|v| u8::from(v != 0.0));
    let (labels, count) = label_components_2d(&mask, true);
    let mut boxes = vec![(usize::MAX, usize::MAX, 0usize, 0usize); count];
    for ((y, x), &l) in labels.indexed_iter() {
        if l > 0 {
            let b = &mut boxes[l as usize - 1];
            *b = (b.0.min(y), b.1.min(x), b.2.max(y), b.3.max(x));
        }
    }
    for (y0, x0, y1, x1) in boxes {
        let (y0, x0) = (y0.saturating_sub(2), x0.saturating_sub(2));
        let (y1, x1) = ((y1 + 2).min(h - 1), (x1 + 2).min(w - 1));
        for x in x0..=x1 {
            img.put_pixel(x as u32, y0 as u32, WHITE);
            img.put_pixel(x as u32, y1 as u32, WHITE);
        }
        for y in y0..=y1 {
            img.put_pixel(x0 as u32, y as u32, WHITE);
            img.put_pixel(x1 as u32, y as u32, WHITE);
        }
    }
    Ok(img)
}

pub fn render_overlay(
    t2s: ArrayView2<'_, f32>,
    gt: ArrayView2<'_, f32>,
    pred: ArrayView2<'_, f32>,
    out: &Path,
) -> Result<()> {
    let img = overlay_image(t2s, gt, pred)?;
    if let Some(p) = out.parent() {
        std::fs::create_dir_all(p)?;
    }
    img.save(out)?;
    Ok(())
}

/// 3×5 glyphs, one bit per pixel, row-major from the top-left.
fn glyph(c: char) -> u16 {
    match c {
        '0' => 0b111_101_101_101_111,
        '1' => 0b010_110_010_010_111,
        '2' => 0b111_001_111_100_111,
        '3' => 0b111_001_111_001_111,
        '4' => 0b101_101_111_001_001,
        '5' => 0b111_100_111_001_111,
        '6' => 0b111_100_111_101_111,
        '7' => 0b111_001_001_010_010,
        '8' => 0b111_101_111_101_111,
        '9' => 0b111_101_111_001_111,
        'A' => 0b010_101_111_101_101,
        'B' => 0b110_101_110_101_110,
        'C' => 0b111_100_100_100_111,
        'F' => 0b111_100_110_100_100,
        'H' => 0b101_101_111_101_101,
        'N' => 0b110_101_101_101_101,
        'O' => 0b111_101_101_101_111,
        'P' => 0b111_101_111_100_100,
        'R' => 0b110_101_110_101_101,
        'T' => 0b111_010_010_010_010,
        '-' => 0b000_000_111_000_000,
        _ => 0,
    }
}

fn draw_text(img: &mut RgbImage, text: &str, x: u32, y: u32, scale: u32, color: Rgb<u8>) {
    for (i, c) in text.chars().enumerate() {
        let bits = glyph(c);
        let ox = x + i as u32 * 4 * scale;
        for gy in 0..5u32 {
            for gx in 0..3u32 {
                if bits >> (14 - (gy * 3 + gx)) & 1 == 1 {
                    for sy in 0..scale {
                        for sx in 0..scale {
                            let (px, py) = (ox + gx * scale + sx, y + gy * scale + sy);
                            if px < img.width() && py < img.height() {
                                img.put_pixel(px, py, color);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn text_width(text: &str, scale: u32) -> u32 {
    (text.chars().count() as u32 * 4).saturating_sub(1) * scale
}

/// Lesion-level confusion matrix for one cohort. Rows are the truth
/// (lesion, background), columns the prediction; the background/background
/// cell has no count at lesion level and is drawn as a dash.
pub fn confusion_image(cohort: char, counts: &Counts) -> RgbImage {
    const CELL: u32 = 120;
    const TOP: u32 = 50;
    let mut img = RgbImage::from_pixel(2 * CELL + 20, 2 * CELL + TOP + 10, WHITE);
    let title = format!("COHORT {cohort}");
    draw_text(&mut img, &title, 10, 12, 5, Rgb([0, 0, 0]));
    let max = counts.tp.max(counts.fp).max(counts.fn_).max(1) as f32;
    let cells = [
        (0, 0, "TP", Some(counts.tp)),
        (0, 1, "FN", Some(counts.fn_)),
        (1, 0, "FP", Some(counts.fp)),
        (1, 1, "", None),
    ];
    for (row, col, label, value) in cells {
        let (x0, y0) = (10 + col * CELL, TOP + row * CELL);
        let shade = value.map_or(235, |v| 235 - (v as f32 / max * 170.0) as u8);
        let fill = Rgb([shade, shade, 255]);
        for y in y0..y0 + CELL {
            for x in x0..x0 + CELL {
                let edge = y == y0 || x == x0 || y == y0 + CELL - 1 || x == x0 + CELL - 1;
                img.put_pixel(x, y, if edge { Rgb([0, 0, 0]) } else { fill });
            }
        }
        let ink = if shade < 140 { WHITE } else { Rgb([0, 0, 0]) };
        draw_text(&mut img, label, x0 + 8, y0 + 8, 3, ink);
        let text = value.map_or_else(|| "-".to_string(), |v| v.to_string());
        let tw = text_width(&text, 6);
        draw_text(&mut img, &text, x0 + (CELL.saturating_sub(tw)) / 2, y0 + 50, 6, ink);
    }
    img
}

pub fn render_confusion(cohort: char, counts: &Counts, out: &Path) -> Result<()> {
    if let Some(p) = out.parent() {
        std::fs::create_dir_all(p)?;
    }
    confusion_image(cohort, counts).save(out)?;
    Ok(())
}
