//! Discrete Fourier transforms along the token axis.
//!
//! Power-of-two lengths go through an iterative radix-2 Cooley-Tukey kernel;
//! every other length falls back to the direct O(L²) sum.

use std::f64::consts::PI;

use super::Tensor;

/// In-place forward FFT of a complex sequence stored as split real/imaginary
/// parts. `re.len()` must be a power of two.
pub fn fft_radix2(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    assert_eq!(n, im.len());
    assert!(
        n.is_power_of_two(),
        "radix-2 FFT needs a power-of-two length, got {n}"
    );
    if n <= 1 {
        return;
    }

    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }

    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let theta = -2.0 * PI / len as f64;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                // Twiddles are evaluated directly rather than by recurrence to
                // keep the error at a few ulps for every length we use.
                let (s, c) = (theta * k as f64).sin_cos();
                let a = start + k;
                let b = a + half;
                let tr = c * re[b] - s * im[b];
                let ti = c * im[b] + s * re[b];
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        len <<= 1;
    }
}

/// Direct DFT of a real sequence, returning (real, imaginary) parts.
pub fn dft_direct(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    for k in 0..n {
        for (l, &v) in x.iter().enumerate() {
            // Reduce k·l mod n first so the angle stays in [0, 2π).
            let phase = -2.0 * PI * ((k * l) % n) as f64 / n as f64;
            re[k] += v * phase.cos();
            im[k] += v * phase.sin();
        }
    }
    (re, im)
}

/// DFT of a real sequence using the fastest applicable kernel.
pub fn dft_real(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    if x.len().is_power_of_two() {
        let mut re = x.to_vec();
        let mut im = vec![0.0; x.len()];
        fft_radix2(&mut re, &mut im);
        (re, im)
    } else {
        dft_direct(x)
    }
}

/// Real part of the DFT of every column of an `L × D` matrix.
///
/// Since `Re[Σ z_l e^{-2πikl/L}] = Σ z_l cos(2πkl/L)` and the cosine kernel
/// is symmetric in `k` and `l`, this map is its own adjoint.
pub fn real_dft_columns(z: &Tensor) -> Tensor {
    let l = z.rows();
    let d = z.cols();
    let mut out = Tensor::zeros(&[l, d]);
    let mut column = vec![0.0; l];
    for j in 0..d {
        for (i, c) in column.iter_mut().enumerate() {
            *c = z.at(i, j);
        }
        let (re, _) = dft_real(&column);
        for (i, v) in re.into_iter().enumerate() {
            out.set(i, j, v);
        }
    }
    out
}

/// Per-frequency ℓ2 norm over feature dimensions of the real DFT part.
pub fn spectral_magnitude(z: &Tensor) -> Vec<f64> {
    row_norms(&real_dft_columns(z))
}

pub(crate) fn row_norms(t: &Tensor) -> Vec<f64> {
    (0..t.rows())
        .map(|r| t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}
