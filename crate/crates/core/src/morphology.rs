//! Connected-component labelling, ball dilation, per-slice hole filling and
//! the two-class histogram threshold used for brain masks.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Voxel adjacency for 3D components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Connectivity {
    /// Face neighbours only.
    Six,
    /// Faces, edges and corners.
    #[default]
    TwentySix,
}

impl Connectivity {
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let manhattan = dz.abs() + dy.abs() + dx.abs();
                    let keep = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::TwentySix => manhattan > 0,
                    };
                    if keep {
                        out.push([dz, dy, dx]);
                    }
                }
            }
        }
        out
    }
}

impl fmt::Display for Connectivity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Connectivity::Six => write!(f, "6"),
            Connectivity::TwentySix => write!(f, "26"),
        }
    }
}

impl FromStr for Connectivity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "6" => Ok(Connectivity::Six),
            "26" => Ok(Connectivity::TwentySix),
            other => Err(Error::InvalidArgument(format!(
                "connectivity must be 6 or 26, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lesion {
    /// Voxels in raster order.
    pub voxels: Vec<[usize; 3]>,
    pub centroid: [f64; 3],
}

impl Lesion {
    /// Inclusive (min, max) corner of the voxel bounding box.
    pub fn bounds(&self) -> ([usize; 3], [usize; 3]) {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        for v in &self.voxels {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        (lo, hi)
    }
}

/// Connected components of a binary mask. Label 0 is background and lesion
/// `k` carries label `k + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionSet {
    pub labels: Array3<u32>,
    pub lesions: Vec<Lesion>,
}

impl LesionSet {
    pub fn count(&self) -> usize {
        self.lesions.len()
    }
}

/// Labels the nonzero voxels of `mask`. Labels are assigned in order of each
/// component's lexicographically smallest voxel, which is the order a raster
/// scan first meets them.
pub fn label_components(mask: &Array3<f32>, connectivity: Connectivity) -> LesionSet {
    let (sz, sy, sx) = mask.dim();
    let offsets = connectivity.offsets();
    let mut labels = Array3::<u32>::zeros((sz, sy, sx));
    let mut lesions = Vec::new();
    let mut queue = VecDeque::new();
    for z in 0..sz {
        for y in 0..sy {
            for x in 0..sx {
                if mask[[z, y, x]] == 0.0 || labels[[z, y, x]] != 0 {
                    continue;
                }
                let label = lesions.len() as u32 + 1;
                labels[[z, y, x]] = label;
                queue.push_back([z, y, x]);
                let mut voxels = Vec::new();
                while let Some(p) = queue.pop_front() {
                    voxels.push(p);
                    for o in &offsets {
                        let nz = p[0] as isize + o[0];
                        let ny = p[1] as isize + o[1];
                        let nx = p[2] as isize + o[2];
                        if nz < 0 || ny < 0 || nx < 0 {
                            continue;
                        }
                        let q = [nz as usize, ny as usize, nx as usize];
                        if q[0] >= sz || q[1] >= sy || q[2] >= sx {
                            continue;
                        }
                        if mask[q] != 0.0 && labels[q] == 0 {
                            labels[q] = label;
                            queue.push_back(q);
                        }
                    }
                }
                voxels.sort_unstable();
                let n = voxels.len() as f64;
                let mut c = [0.0f64; 3];
                for v in &voxels {
                    for a in 0..3 {
                        c[a] += v[a] as f64;
                    }
                }
                lesions.push(Lesion {
                    centroid: [c[0] / n, c[1] / n, c[2] / n],
                    voxels,
                });
            }
        }
    }
    LesionSet { labels, lesions }
}

/// [`label_components`] on a volume.
pub fn connected_components(mask: &Volume, connectivity: Connectivity) -> LesionSet {
    label_components(&mask.data, connectivity)
}

/// 2D components of a binary image under 4- or 8-adjacency. Returns the label
/// image (0 = background) and the number of components.
pub fn label_components_2d(mask: &Array2<u8>, eight: bool) -> (Array2<u32>, usize) {
    let (h, w) = mask.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut count = 0u32;
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] == 0 || labels[[y, x]] != 0 {
                continue;
            }
            count += 1;
            labels[[y, x]] = count;
            stack.push((y, x));
            while let Some((cy, cx)) = stack.pop() {
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        if (dy == 0 && dx == 0) || (!eight && dy != 0 && dx != 0) {
                            continue;
                        }
                        let ny = cy as isize + dy;
                        let nx = cx as isize + dx;
                        if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask[[ny, nx]] != 0 && labels[[ny, nx]] == 0 {
                            labels[[ny, nx]] = count;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
        }
    }
    (labels, count as usize)
}

/// Offsets `(dz, dy, dx)` of the discrete Euclidean ball `‖δ‖ ≤ radius`.
pub fn ball_offsets(radius: usize) -> Vec<[isize; 3]> {
    let r = radius as isize;
    let r2 = r * r;
    let mut out = Vec::new();
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                if dz * dz + dy * dy + dx * dx <= r2 {
                    out.push([dz, dy, dx]);
                }
            }
        }
    }
    out
}

/// Morphological dilation of the nonzero voxels of `mask` by a Euclidean ball.
///
/// Each `(dz, dy)` plane offset of the ball contributes a 1D row dilation of
/// half-width `floor(sqrt(r² - dz² - dy²))`, read off a per-row distance map.
pub fn dilate(mask: &Volume, radius: usize) -> Volume {
    let mut out = Volume::zeros((0, 0, 0), mask.spacing);
    out.data = dilate_array(&mask.data, radius);
    out
}

pub fn dilate_array(mask: &Array3<f32>, radius: usize) -> Array3<f32> {
    let (sz, sy, sx) = mask.dim();
    let mut out = mask.mapv(|v| if v != 0.0 { 1.0 } else { 0.0 });
    if radius == 0 {
        return out;
    }
    let r = radius as isize;
    // Distance along the row to the nearest set voxel, saturating.
    let far = u32::MAX / 2;
    let mut row_dist = vec![far; sz * sy * sx];
    let mut row_has = vec![false; sz * sy];
    for z in 0..sz {
        for y in 0..sy {
            let base = (z * sy + y) * sx;
            let d = &mut row_dist[base..base + sx];
            let mut last: Option<usize> = None;
            for x in 0..sx {
                if mask[[z, y, x]] != 0.0 {
                    last = Some(x);
                }
                if let Some(l) = last {
                    d[x] = (x - l) as u32;
                }
            }
            last = None;
            for x in (0..sx).rev() {
                if mask[[z, y, x]] != 0.0 {
                    last = Some(x);
                }
                if let Some(l) = last {
                    d[x] = d[x].min((l - x) as u32);
                }
            }
            row_has[z * sy + y] = d.iter().any(|&v| v < far);
        }
    }
    let mut plane_offsets = Vec::new();
    for dz in -r..=r {
        for dy in -r..=r {
            let rem = r * r - dz * dz - dy * dy;
            if rem >= 0 {
                plane_offsets.push((dz, dy, (rem as f64).sqrt().floor() as u32));
            }
        }
    }
    let out_slice = out.as_slice_mut().expect("standard layout");
    for z in 0..sz as isize {
        for y in 0..sy as isize {
            let dst = ((z as usize) * sy + y as usize) * sx;
            for &(dz, dy, half) in &plane_offsets {
                let (nz, ny) = (z + dz, y + dy);
                if nz < 0 || ny < 0 || nz >= sz as isize || ny >= sy as isize {
                    continue;
                }
                let src_row = nz as usize * sy + ny as usize;
                if !row_has[src_row] {
                    continue;
                }
                let src = &row_dist[src_row * sx..(src_row + 1) * sx];
                for (o, &d) in out_slice[dst..dst + sx].iter_mut().zip(src) {
                    if d <= half {
                        *o = 1.0;
                    }
                }
            }
        }
    }
    out
}

/// Fills, slice by slice, background regions not 4-connected to the slice
/// border.
pub fn fill_holes_per_slice(mask: &Array3<f32>) -> Array3<f32> {
    let (sz, sy, sx) = mask.dim();
    let mut out = mask.mapv(|v| if v != 0.0 { 1.0 } else { 0.0 });
    let mut outside = Array2::<bool>::from_elem((sy, sx), false);
    let mut stack = Vec::new();
    for z in 0..sz {
        outside.fill(false);
        let is_bg = |y: usize, x: usize| mask[[z, y, x]] == 0.0;
        for y in 0..sy {
            for x in 0..sx {
                let border = y == 0 || x == 0 || y + 1 == sy || x + 1 == sx;
                if border && is_bg(y, x) && !outside[[y, x]] {
                    outside[[y, x]] = true;
                    stack.push((y, x));
                }
            }
        }
        while let Some((y, x)) = stack.pop() {
            let nbrs = [
                (y.wrapping_sub(1), x),
                (y + 1, x),
                (y, x.wrapping_sub(1)),
                (y, x + 1),
            ];
            for (ny, nx) in nbrs {
                if ny < sy && nx < sx && is_bg(ny, nx) && !outside[[ny, nx]] {
                    outside[[ny, nx]] = true;
                    stack.push((ny, nx));
                }
            }
        }
        for y in 0..sy {
            for x in 0..sx {
                if !outside[[y, x]] {
                    out[[z, y, x]] = 1.0;
                }
            }
        }
    }
    out
}

/// Two-class split of the intensity histogram maximising between-class
/// variance. Voxels strictly above the returned value are foreground.
pub fn otsu_threshold(values: &[f32], bins: usize) -> Option<f32> {
    let finite = values.iter().copied().filter(|v| v.is_finite());
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    let mut n = 0usize;
    for v in finite {
        lo = lo.min(v);
        hi = hi.max(v);
        n += 1;
    }
    if n == 0 || hi <= lo || bins < 2 {
        return None;
    }
    let width = (hi - lo) as f64 / bins as f64;
    let mut hist = vec![0u64; bins];
    for &v in values.iter().filter(|v| v.is_finite()) {
        let b = (((v - lo) as f64 / width) as usize).min(bins - 1);
        hist[b] += 1;
    }
    let total = n as f64;
    let centre = |b: usize| lo as f64 + (b as f64 + 0.5) * width;
    let sum_all: f64 = hist.iter().enumerate().map(|(b, &c)| c as f64 * centre(b)).sum();
    let (mut w0, mut sum0) = (0.0f64, 0.0f64);
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (b, &c) in hist.iter().enumerate().take(bins - 1) {
        w0 += c as f64;
        sum0 += c as f64 * centre(b);
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best.0 {
            best = (between, b);
        }
    }
    if best.0 == f64::NEG_INFINITY {
        return None;
    }
    Some((lo as f64 + (best.1 + 1) as f64 * width) as f32)
}

/// Keeps only the largest component (ties go to the lower label).
pub fn largest_component(mask: &Array3<f32>, connectivity: Connectivity) -> Array3<f32> {
    let set = label_components(mask, connectivity);
    let mut out = Array3::<f32>::zeros(mask.dim());
    if let Some(best) = set
        .lesions
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.voxels.len().cmp(&b.1.voxels.len()).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
    {
        for v in &set.lesions[best].voxels {
            out[*v] = 1.0;
        }
    }
    out
}
