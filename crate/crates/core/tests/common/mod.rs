//! Independent reference implementations and fixtures shared by the
//! integration tests.

#![allow(dead_code)]

use std::path::Path;

use cmbseg_core::config::RunConfig;
use cmbseg_core::morphology::Connectivity;
use ndarray::Array3;

/// Components by recursive flood fill, in raster order of first voxel.
pub fn flood_fill_components(mask: &Array3<f32>, connectivity: Connectivity) -> Vec<Vec<[usize; 3]>> {
    fn visit(
        mask: &Array3<f32>,
        seen: &mut Array3<bool>,
        p: [usize; 3],
        full: bool,
        out: &mut Vec<[usize; 3]>,
    ) {
        seen[p] = true;
        out.push(p);
        let dim = mask.dim();
        let dims = [dim.0 as isize, dim.1 as isize, dim.2 as isize];
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let nonzero = (dz != 0) as u8 + (dy != 0) as u8 + (dx != 0) as u8;
                    if nonzero == 0 || (!full && nonzero > 1) {
                        continue;
                    }
                    let q = [p[0] as isize + dz, p[1] as isize + dy, p[2] as isize + dx];
                    if (0..3).any(|a| q[a] < 0 || q[a] >= dims[a]) {
                        continue;
                    }
                    let q = [q[0] as usize, q[1] as usize, q[2] as usize];
                    if mask[q] != 0.0 && !seen[q] {
                        visit(mask, seen, q, full, out);
                    }
                }
            }
        }
    }
    let full = connectivity == Connectivity::TwentySix;
    let mut seen = Array3::from_elem(mask.dim(), false);
    let mut comps = Vec::new();
    for ((z, y, x), &v) in mask.indexed_iter() {
        if v != 0.0 && !seen[[z, y, x]] {
            let mut c = Vec::new();
            visit(mask, &mut seen, [z, y, x], full, &mut c);
            c.sort();
            comps.push(c);
        }
    }
    comps
}

/// Runs `f` on a thread with a stack deep enough for recursive fills.
pub fn with_big_stack<R: Send + 'static>(f: impl FnOnce() -> R + Send + 'static) -> R {
    std::thread::Builder::new()
        .stack_size(256 << 20)
        .spawn(f)
        .expect("spawn")
        .join()
        .expect("worker panicked")
}

/// Max over lesions of each lesion's darkest T2* value.
pub fn oracle_threshold(subjects: &[(Array3<f32>, Array3<f32>)], connectivity: Connectivity) -> Option<f32> {
    let mut best: Option<f32> = None;
    for (t2s, ann) in subjects {
        for comp in flood_fill_components(ann, connectivity) {
            let mut lo = f32::INFINITY;
            for p in comp {
                if t2s[p] < lo {
                    lo = t2s[p];
                }
            }
            best = Some(match best {
                Some(b) if b >= lo => b,
                _ => lo,
            });
        }
    }
    best
}

/// A deliberately small configuration for fast end-to-end runs.
pub fn tiny_config(root: &Path, seed: u64) -> RunConfig {
    let text = format!(
        "data_root = {}\n\
         output_dir = {}\n\
         phantom_group = A\n\
         seed = {seed}\n\
         detector.epochs = 1\n\
         detector.widths = 2,4\n\
         detector.learning_rate = 1e-3\n\
         detector.tile_stride = 64\n\
         segmenter.epochs = 1\n\
         segmenter.widths = 2,4\n\
         segmenter.learning_rate = 1e-3\n\
         segmenter.crop = 64\n\
         phantom.shape = 12x32x32\n\
         phantom.lesion_count = 1-2\n\
         phantom.lesion_radius = 1-2\n\
         phantom.confounder_count = 1\n",
        root.join("data").display(),
        root.join("out").display()
    );
    RunConfig::from_text(&text).expect("tiny config")
}
