//! Low-resolution simulation by discarding high spatial frequencies.

use ndarray::{Array2, ArrayView2};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Half-width of the retained band along an axis of length `n` at factor
/// `scale`: signed frequencies `k` with `|k| <= band_half_width` survive.
///
/// The centered block of `n / scale` coefficients is kept together with its
/// conjugate partners only, so the mask is Hermitian-symmetric and the
/// reconstruction is an orthogonal projection onto real band-limited images.
pub fn band_half_width(n: usize, scale: usize) -> usize {
    (n / scale - 1) / 2
}

fn signed_frequency(index: usize, n: usize) -> i64 {
    let i = index as i64;
    let n = n as i64;
    if i <= n / 2 {
        i
    } else {
        i - n
    }
}

fn fft_rows(data: &mut [Complex64], rows: usize, cols: usize, planner: &mut FftPlanner<f64>, inverse: bool) {
    let fft = if inverse {
        planner.plan_fft_inverse(cols)
    } else {
        planner.plan_fft_forward(cols)
    };
    for row in data.chunks_exact_mut(cols).take(rows) {
        fft.process(row);
    }
}

fn transpose(data: &[Complex64], rows: usize, cols: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

fn fft2(data: Vec<Complex64>, rows: usize, cols: usize, planner: &mut FftPlanner<f64>, inverse: bool) -> Vec<Complex64> {
    let mut data = data;
    fft_rows(&mut data, rows, cols, planner, inverse);
    let mut t = transpose(&data, rows, cols);
    fft_rows(&mut t, cols, rows, planner, inverse);
    transpose(&t, cols, rows)
}

/// Zero-filled reconstruction after keeping only the central `1/scale` of
/// k-space along each axis. The output has the input's size.
pub fn kspace_truncate(hr: ArrayView2<f64>, scale: usize) -> Result<Array2<f64>> {
    let (h, w) = hr.dim();
    if scale == 0 || h == 0 || w == 0 || h % scale != 0 || w % scale != 0 {
        return Err(Error::Config(format!(
            "grid {h}x{w} is not divisible by scale {scale}"
        )));
    }
    let mut planner = FftPlanner::new();
    let data: Vec<Complex64> = hr.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let mut spectrum = fft2(data, h, w, &mut planner, false);

    let keep_r = band_half_width(h, scale) as i64;
    let keep_c = band_half_width(w, scale) as i64;
    for r in 0..h {
        let row_kept = signed_frequency(r, h).abs() <= keep_r;
        for c in 0..w {
            if !(row_kept && signed_frequency(c, w).abs() <= keep_c) {
                spectrum[r * w + c] = Complex64::new(0.0, 0.0);
            }
        }
    }

    let image = fft2(spectrum, h, w, &mut planner, true);
    let norm = (h * w) as f64;
    Ok(Array2::from_shape_fn((h, w), |(r, c)| image[r * w + c].re / norm))
}
