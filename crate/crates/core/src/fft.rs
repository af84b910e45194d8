//! 2-D FFT helpers on `ndarray` grids built on `rustfft`.
//!
//! Plans are cached process-wide. Forward transforms are unnormalized;
//! inverse transforms divide by the number of samples so that
//! `ifft2(fft2(x)) == x`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use ndarray::{Array2, Zip};
use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};

type Plan = Arc<dyn Fft<f64>>;

fn plan(len: usize, direction: FftDirection) -> Plan {
    static CACHE: OnceLock<Mutex<HashMap<(usize, bool), Plan>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let key = (len, direction == FftDirection::Forward);
    let mut map = cache.lock().unwrap();
    map.entry(key)
        .or_insert_with(|| FftPlanner::new().plan_fft(len, direction))
        .clone()
}

fn transform(data: &mut Array2<Complex64>, direction: FftDirection) {
    let (ny, nx) = data.dim();
    if !data.is_standard_layout() {
        *data = data.as_standard_layout().to_owned();
    }
    let row_plan = plan(nx, direction);
    let mut scratch = vec![Complex64::default(); row_plan.get_inplace_scratch_len()];
    {
        let buf = data.as_slice_mut().unwrap();
        row_plan.process_with_scratch(buf, &mut scratch);
    }
    let col_plan = plan(ny, direction);
    let mut cols = vec![Complex64::default(); ny * nx];
    {
        let buf = data.as_slice().unwrap();
        for r in 0..ny {
            for c in 0..nx {
                cols[c * ny + r] = buf[r * nx + c];
            }
        }
    }
    scratch.resize(col_plan.get_inplace_scratch_len(), Complex64::default());
    col_plan.process_with_scratch(&mut cols, &mut scratch);
    let buf = data.as_slice_mut().unwrap();
    for c in 0..nx {
        for r in 0..ny {
            buf[r * nx + c] = cols[c * ny + r];
        }
    }
}

/// In-place forward 2-D DFT, `X[k] = sum_n x[n] exp(-2 pi i k n / N)` per axis.
pub fn fft2_inplace(data: &mut Array2<Complex64>) {
    transform(data, FftDirection::Forward);
}

/// In-place inverse 2-D DFT including the `1/(ny*nx)` factor.
pub fn ifft2_inplace(data: &mut Array2<Complex64>) {
    transform(data, FftDirection::Inverse);
    let scale = 1.0 / data.len() as f64;
    data.mapv_inplace(|v| v * scale);
}

pub fn fft2(data: &Array2<Complex64>) -> Array2<Complex64> {
    let mut out = data.to_owned();
    fft2_inplace(&mut out);
    out
}

pub fn ifft2(data: &Array2<Complex64>) -> Array2<Complex64> {
    let mut out = data.to_owned();
    ifft2_inplace(&mut out);
    out
}

/// Forward transform of a real grid.
pub fn fft2_real(data: &Array2<f64>) -> Array2<Complex64> {
    let mut out = data.mapv(|v| Complex64::new(v, 0.0));
    fft2_inplace(&mut out);
    out
}

/// Move the zero-frequency sample from index 0 to index `n/2` on both axes.
pub fn fftshift<T: Clone>(a: &Array2<T>) -> Array2<T> {
    let (ny, nx) = a.dim();
    Array2::from_shape_fn((ny, nx), |(r, c)| {
        a[[(r + ny - ny / 2) % ny, (c + nx - nx / 2) % nx]].clone()
    })
}

/// Inverse of [`fftshift`]: move index `n/2` back to index 0.
pub fn ifftshift<T: Clone>(a: &Array2<T>) -> Array2<T> {
    let (ny, nx) = a.dim();
    Array2::from_shape_fn((ny, nx), |(r, c)| a[[(r + ny / 2) % ny, (c + nx / 2) % nx]].clone())
}

/// Signed frequency index of DFT bin `k` for a length-`n` transform.
#[inline]
pub fn freq_index(k: usize, n: usize) -> f64 {
    if k <= (n - 1) / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Linear (non-circular) convolution of `image` with a centered `kernel`,
/// cropped to the image size. The kernel center is at `(ky/2, kx/2)`.
/// Inputs outside the image are zero.
pub fn convolve_same(image: &Array2<f64>, kernel: &Array2<f64>) -> Array2<f64> {
    let (h, w) = image.dim();
    let (kh, kw) = kernel.dim();
    let ph = (h + kh).next_power_of_two();
    let pw = (w + kw).next_power_of_two();
    let mut a = Array2::<Complex64>::zeros((ph, pw));
    for ((r, c), v) in image.indexed_iter() {
        a[[r, c]] = Complex64::new(*v, 0.0);
    }
    let mut b = Array2::<Complex64>::zeros((ph, pw));
    for ((r, c), v) in kernel.indexed_iter() {
        b[[r, c]] = Complex64::new(*v, 0.0);
    }
    fft2_inplace(&mut a);
    fft2_inplace(&mut b);
    Zip::from(&mut a).and(&b).for_each(|x, y| *x *= *y);
    ifft2_inplace(&mut a);
    let (cy, cx) = (kh / 2, kw / 2);
    Array2::from_shape_fn((h, w), |(r, c)| a[[r + cy, c + cx]].re)
}

/// Complex variant of [`convolve_same`].
pub fn convolve_same_complex(image: &Array2<Complex64>, kernel: &Array2<Complex64>) -> Array2<Complex64> {
    let (h, w) = image.dim();
    let (kh, kw) = kernel.dim();
    let ph = (h + kh).next_power_of_two();
    let pw = (w + kw).next_power_of_two();
    let mut a = Array2::<Complex64>::zeros((ph, pw));
    a.slice_mut(ndarray::s![..h, ..w]).assign(image);
    let mut b = Array2::<Complex64>::zeros((ph, pw));
    b.slice_mut(ndarray::s![..kh, ..kw]).assign(kernel);
    fft2_inplace(&mut a);
    fft2_inplace(&mut b);
    Zip::from(&mut a).and(&b).for_each(|x, y| *x *= *y);
    ifft2_inplace(&mut a);
    let (cy, cx) = (kh / 2, kw / 2);
    Array2::from_shape_fn((h, w), |(r, c)| a[[r + cy, c + cx]])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_identity() {
        let x = Array2::from_shape_fn((8, 16), |(r, c)| Complex64::new(r as f64 * 0.3 - c as f64, (r * c) as f64 % 5.0));
        let y = ifft2(&fft2(&x));
        for (a, b) in x.iter().zip(y.iter()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn delta_transforms_to_constant() {
        let mut x = Array2::<Complex64>::zeros((4, 4));
        x[[0, 0]] = Complex64::new(1.0, 0.0);
        let y = fft2(&x);
        assert!(y.iter().all(|v| (v - Complex64::new(1.0, 0.0)).norm() < 1e-15));
    }

    #[test]
    fn shift_round_trip() {
        let x = Array2::from_shape_fn((5, 6), |(r, c)| (r * 6 + c) as f64);
        assert_eq!(ifftshift(&fftshift(&x)), x);
        let s = fftshift(&x);
        assert_eq!(s[[2, 3]], x[[0, 0]]);
    }

    #[test]
    fn convolve_with_delta_is_identity() {
        let img = Array2::from_shape_fn((6, 7), |(r, c)| (r + 2 * c) as f64);
        let mut k = Array2::zeros((3, 3));
        k[[1, 1]] = 1.0;
        let out = convolve_same(&img, &k);
        for (a, b) in img.iter().zip(out.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
