//! Paired multi-contrast slices: degradation, cropping, normalization,
//! phantoms and on-disk datasets.

mod dataset;
pub mod kspace;
pub mod phantom;

use candle_core::{Device, Tensor};
use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{
    build_dataset, build_phantom_dataset, ingest_volumes, read_grid, write_grid, GridPaths, Manifest,
    Normalization, PhantomSpec, RecordMeta, SliceRecord, Split, SplitRatios, VolumePair,
    MANIFEST_VERSION,
};
pub use kspace::kspace_truncate;
pub use phantom::{generate_phantom_pair, generate_phantom_volume};

/// 2D intensity grid, row-major.
pub type Grid = Array2<f64>;

/// Symmetric crop of a `(rows, cols, slices)` volume. Odd margins leave the
/// extra element at the high end.
pub fn center_crop(volume: &Array3<f64>, out_h: usize, out_w: usize, out_slices: usize) -> Result<Array3<f64>> {
    let (h, w, d) = volume.dim();
    if out_h > h || out_w > w || out_slices > d {
        return Err(Error::Config(format!(
            "cannot crop {h}x{w}x{d} to {out_h}x{out_w}x{out_slices}"
        )));
    }
    let (r0, c0, s0) = ((h - out_h) / 2, (w - out_w) / 2, (d - out_slices) / 2);
    Ok(volume
        .slice(s![r0..r0 + out_h, c0..c0 + out_w, s0..s0 + out_slices])
        .to_owned())
}

/// Affine map of a slice's `[min, max]` onto `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormScheme {
    pub min: f64,
    pub max: f64,
}

impl NormScheme {
    pub fn of(grid: &Grid) -> Self {
        let min = grid.iter().copied().fold(f64::INFINITY, f64::min);
        let max = grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self { min, max }
    }

    pub fn is_constant(&self) -> bool {
        self.max <= self.min
    }

    pub fn range(&self) -> f64 {
        self.max - self.min
    }

    pub fn normalize(&self, grid: &Grid) -> Grid {
        if self.is_constant() {
            return Grid::zeros(grid.dim());
        }
        let span = self.range();
        grid.mapv(|v| (v - self.min) / span * 2.0 - 1.0)
    }

    /// Inverse of [`normalize`](Self::normalize); constant slices come back
    /// as their single value.
    pub fn denormalize(&self, grid: &Grid) -> Grid {
        if self.is_constant() {
            return Grid::from_elem(grid.dim(), self.min);
        }
        let span = self.range();
        grid.mapv(|v| (v + 1.0) / 2.0 * span + self.min)
    }
}

/// A slice mapped into model space. HR and LR targets share the LR slice's
/// scheme, so a restoration maps back to intensities without the HR; the
/// auxiliary contrast uses its own.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSlice {
    pub hr: Grid,
    pub lr: Grid,
    pub aux: Grid,
    pub target_scheme: NormScheme,
}

impl NormalizedSlice {
    pub fn from_record(record: &SliceRecord) -> Self {
        let target_scheme = NormScheme::of(&record.lr_t2);
        Self {
            hr: target_scheme.normalize(&record.hr_t2),
            lr: target_scheme.normalize(&record.lr_t2),
            aux: NormScheme::of(&record.hr_t1).normalize(&record.hr_t1),
            target_scheme,
        }
    }
}

/// Stacks equally shaped grids into a `[B, 1, H, W]` f64 tensor.
pub fn grids_to_tensor(grids: &[&Grid], device: &Device) -> Result<Tensor> {
    let first = grids.first().ok_or(Error::Empty("no grids to stack"))?;
    let (h, w) = first.dim();
    let mut values = Vec::with_capacity(grids.len() * h * w);
    for g in grids {
        if g.dim() != (h, w) {
            return Err(Error::shape(&[h, w], &[g.dim().0, g.dim().1]));
        }
        values.extend(g.iter().copied());
    }
    Ok(Tensor::from_vec(values, (grids.len(), 1, h, w), device)?)
}

/// Row `i` of a `[B, 1, H, W]` tensor as a grid.
pub fn tensor_to_grid(t: &Tensor, i: usize) -> Result<Grid> {
    let (_, _, h, w) = t.dims4()?;
    let values = t.get(i)?.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
    Ok(Grid::from_shape_vec((h, w), values).expect("length from dims"))
}

/// One of the eight symmetries of the square: bit 0 flips rows, bit 1 flips
/// columns, bit 2 transposes. Transposition is skipped for non-square grids.
pub fn dihedral(grid: &Grid, k: u8) -> Grid {
    let mut v = grid.view();
    if k & 1 != 0 {
        v.invert_axis(ndarray::Axis(0));
    }
    if k & 2 != 0 {
        v.invert_axis(ndarray::Axis(1));
    }
    if k & 4 != 0 && v.nrows() == v.ncols() {
        v = v.reversed_axes();
    }
    v.to_owned()
}

impl NormalizedSlice {
    /// The same symmetry applied to every grid.
    pub fn transformed(&self, k: u8) -> Self {
        Self {
            hr: dihedral(&self.hr, k),
            lr: dihedral(&self.lr, k),
            aux: dihedral(&self.aux, k),
            target_scheme: self.target_scheme,
        }
    }
}

pub fn normalize(grid: &Grid) -> (Grid, NormScheme) {
    let scheme = NormScheme::of(grid);
    (scheme.normalize(grid), scheme)
}

pub fn denormalize(grid: &Grid, scheme: &NormScheme) -> Grid {
    scheme.denormalize(grid)
}
