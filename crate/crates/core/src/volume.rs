//! The 3D scalar grid that carries images, score maps and masks through the
//! pipeline, plus NIfTI-1 reading and writing.
//!
//! Arrays are indexed `(slice, row, col)`. On disk the NIfTI axes are
//! `(x, y, z) = (col, row, slice)` with `x` varying fastest.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView2, Ix3};
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};

use crate::error::{Error, Result};

/// Voxel spacing in millimetres, ordered like the array axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spacing {
    pub dz: f64,
    pub dy: f64,
    pub dx: f64,
}

impl Spacing {
    pub const fn new(dz: f64, dy: f64, dx: f64) -> Self {
        Self { dz, dy, dx }
    }

    pub fn is_valid(&self) -> bool {
        [self.dz, self.dy, self.dx]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0)
    }
}

impl Default for Spacing {
    fn default() -> Self {
        Self::new(1.0, 1.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Array3<f32>,
    pub spacing: Spacing,
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: Spacing) -> Result<Self> {
        let (s, h, w) = data.dim();
        if s == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "volume dimensions must be positive, got {:?}",
                data.shape()
            )));
        }
        if !spacing.is_valid() {
            return Err(Error::InvalidArgument(format!(
                "spacing must be strictly positive, got {spacing:?}"
            )));
        }
        Ok(Self { data, spacing })
    }

    pub fn zeros(shape: (usize, usize, usize), spacing: Spacing) -> Self {
        Self {
            data: Array3::zeros(shape),
            spacing,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        let (s, h, w) = self.data.dim();
        [s, h, w]
    }

    pub fn slices(&self) -> usize {
        self.data.dim().0
    }

    pub fn slice(&self, idx: usize) -> ArrayView2<'_, f32> {
        self.data.index_axis(ndarray::Axis(0), idx)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Index of the first non-finite voxel, if any.
    pub fn first_non_finite(&self) -> Option<[usize; 3]> {
        self.data
            .indexed_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|((z, y, x), _)| [z, y, x])
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Number of voxels with a nonzero value.
    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn ensure_same_shape(&self, other: &Volume, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(what, &self.shape(), &other.shape()));
        }
        Ok(())
    }
}

/// Element type used when writing a volume to disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoredType {
    Float32,
    Uint8,
}

fn header_for(spacing: Spacing) -> NiftiHeader {
    NiftiHeader {
        pixdim: [
            1.0,
            spacing.dx as f32,
            spacing.dy as f32,
            spacing.dz as f32,
            1.0,
            1.0,
            1.0,
            1.0,
        ],
        // millimetres
        xyzt_units: 2,
        ..NiftiHeader::default()
    }
}

/// Writes a volume as a single-file NIfTI-1 image (`.nii` or `.nii.gz`).
pub fn write_nifti(path: &Path, volume: &Volume, stored: StoredType) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let header = header_for(volume.spacing);
    let writer = nifti::writer::WriterOptions::new(path).reference_header(&header);
    // The writer transposes its input back to C order before emitting, so
    // hand it the (x, y, z) view to get x varying fastest on disk.
    match stored {
        StoredType::Float32 => writer.write_nifti(&volume.data.t())?,
        StoredType::Uint8 => {
            let bytes = volume.data.mapv(|v| v.round().clamp(0.0, 255.0) as u8);
            writer.write_nifti(&bytes.t())?
        }
    }
    Ok(())
}

/// Reads a 3D NIfTI-1 image into `(slice, row, col)` order.
pub fn read_nifti(path: &Path) -> Result<Volume> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let object = ReaderOptions::new().read_file(path)?;
    let header = object.header().clone();
    let array = object.into_volume().into_ndarray::<f32>()?;
    let mut array = array;
    while array.ndim() > 3 && array.shape().last() == Some(&1) {
        let last = array.ndim() - 1;
        array = array.index_axis_move(ndarray::Axis(last), 0);
    }
    let shape = array.shape().to_vec();
    let xyz = array.into_dimensionality::<Ix3>().map_err(|_| Error::Format {
        path: path.to_path_buf(),
        message: format!("expected a 3D image, found shape {shape:?}"),
    })?;
    let data = xyz.reversed_axes().as_standard_layout().into_owned();
    let pix = header.pixdim;
    let spacing = Spacing::new(pix[3] as f64, pix[2] as f64, pix[1] as f64);
    let spacing = if spacing.is_valid() {
        spacing
    } else {
        Spacing::default()
    };
    Volume::new(data, spacing).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// First existing path among `<stem>.nii` and `<stem>.nii.gz`.
pub fn find_nifti(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["nii", "nii.gz"]
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.exists())
}

/// Binary 2D mask as `u8`, for components and rendering.
pub fn slice_mask(volume: &Volume, idx: usize) -> Array2<u8> {
    volume.slice(idx).mapv(|v| u8::from(v != 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn rejects_zero_dims_and_bad_spacing() {
        assert!(Volume::new(Array3::zeros((0, 2, 2)), Spacing::default()).is_err());
        assert!(Volume::new(Array3::zeros((1, 2, 2)), Spacing::new(0.0, 1.0, 1.0)).is_err());
        assert!(Volume::new(Array3::zeros((1, 2, 2)), Spacing::new(1.0, -1.0, 1.0)).is_err());
    }

    #[test]
    fn nifti_round_trip_keeps_axes_and_spacing() {
        let dir = tempfile::tempdir().unwrap();
        let data = Array3::from_shape_fn((3, 4, 5), |(z, y, x)| (z * 100 + y * 10 + x) as f32 + 0.25);
        let vol = Volume::new(data, Spacing::new(3.0, 0.5, 0.75)).unwrap();
        let path = dir.path().join("a.nii");
        write_nifti(&path, &vol, StoredType::Float32).unwrap();
        let back = read_nifti(&path).unwrap();
        assert_eq!(back.data, vol.data);
        assert_eq!(back.spacing, vol.spacing);
    }

    #[test]
    fn nifti_x_varies_fastest_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let data = Array3::from_shape_fn((2, 2, 3), |(z, y, x)| (z * 6 + y * 3 + x) as f32);
        let vol = Volume::new(data, Spacing::default()).unwrap();
        let path = dir.path().join("order.nii");
        write_nifti(&path, &vol, StoredType::Uint8).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[352..], &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11]);
    }

    #[test]
    fn missing_file_is_reported() {
        let err = read_nifti(Path::new("/nonexistent/x.nii")).unwrap_err();
        assert!(matches!(err, Error::MissingFile(_)));
    }
}
