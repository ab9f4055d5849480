//! Discrete Fourier transforms for real signals of arbitrary length.
//!
//! Power-of-two lengths use an iterative radix-2 FFT; everything else goes
//! through Bluestein's chirp-z algorithm (a power-of-two circular
//! convolution), so any length gets exact-length semantics. Zero-padding is
//! deliberately avoided: the regularizer's index-to-frequency mapping depends
//! on the true signal length.
//!
//! Convention: unnormalized forward transform, inverse carries 1/n.

use crate::error::{Error, Result};
use num_complex::Complex64;
use std::f64::consts::PI;

/// Half-spectrum of a real signal: bins k = 0..=floor(n/2).
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub n: usize,
    pub bins: Vec<Complex64>,
}

impl Spectrum {
    /// Per-bin Hermitian multiplicity: 1 for DC and (even n) Nyquist, else 2.
    pub fn multiplicity(&self, k: usize) -> f64 {
        if k == 0 || (self.n % 2 == 0 && k == self.n / 2) {
            1.0
        } else {
            2.0
        }
    }
}

fn bit_reverse(mut x: usize, bits: u32) -> usize {
    let mut r = 0;
    for _ in 0..bits {
        r = (r << 1) | (x & 1);
        x >>= 1;
    }
    r
}

/// In-place iterative radix-2 FFT. `sign` is -1.0 forward, +1.0 inverse
/// (inverse here is unscaled; callers divide by n).
fn fft_pow2(buf: &mut [Complex64], sign: f64) {
    let n = buf.len();
    debug_assert!(n.is_power_of_two());
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = bit_reverse(i, bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let base = sign * 2.0 * PI / len as f64;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                // Twiddle from the angle directly; recurrences drift at n=4096.
                let w = Complex64::from_polar(1.0, base * k as f64);
                let u = buf[start + k];
                let t = w * buf[start + k + half];
                buf[start + k] = u + t;
                buf[start + k + half] = u - t;
            }
        }
        len *= 2;
    }
}

/// Forward FFT of a complex buffer, any length.
fn fft_any(buf: &mut Vec<Complex64>) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        fft_pow2(buf, -1.0);
    } else {
        bluestein(buf);
    }
}

/// Bluestein chirp-z: X_k = c_k * (a circ-conv b)_k with chirp
/// c_j = exp(-i pi j^2 / n). Angles are reduced mod 2n before multiplying by
/// pi/n to keep precision at large j.
fn bluestein(buf: &mut Vec<Complex64>) {
    let n = buf.len();
    let m = (2 * n - 1).next_power_of_two();
    let chirp: Vec<Complex64> = (0..n)
        .map(|j| {
            let sq = ((j as u64 * j as u64) % (2 * n as u64)) as f64;
            Complex64::from_polar(1.0, -PI * sq / n as f64)
        })
        .collect();

    let mut a = vec![Complex64::new(0.0, 0.0); m];
    for j in 0..n {
        a[j] = buf[j] * chirp[j];
    }
    let mut b = vec![Complex64::new(0.0, 0.0); m];
    b[0] = Complex64::new(1.0, 0.0);
    for j in 1..n {
        let w = chirp[j].conj();
        b[j] = w;
        b[m - j] = w;
    }

    fft_pow2(&mut a, -1.0);
    fft_pow2(&mut b, -1.0);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y;
    }
    fft_pow2(&mut a, 1.0);
    let inv_m = 1.0 / m as f64;
    for k in 0..n {
        buf[k] = a[k] * inv_m * chirp[k];
    }
}

/// O(n^2) DFT by the definition; the oracle the fast path is checked against.
pub fn dft_naive(w: &[f64]) -> Result<Spectrum> {
    let n = w.len();
    if n == 0 {
        return Err(Error::InvalidArgument("dft_naive: empty input".into()));
    }
    let half = n / 2;
    let mut bins = Vec::with_capacity(half + 1);
    for k in 0..=half {
        let mut acc = Complex64::new(0.0, 0.0);
        for (j, &x) in w.iter().enumerate() {
            let idx = ((j as u64 * k as u64) % n as u64) as f64;
            acc += x * Complex64::from_polar(1.0, -2.0 * PI * idx / n as f64);
        }
        bins.push(acc);
    }
    Ok(Spectrum { n, bins })
}

/// Fast real-input forward transform; half-spectrum output.
pub fn rfft(w: &[f64]) -> Result<Spectrum> {
    let n = w.len();
    if n == 0 {
        return Err(Error::InvalidArgument("rfft: empty input".into()));
    }
    let mut buf: Vec<Complex64> = w.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fft_any(&mut buf);
    let half = n / 2;
    let mut bins: Vec<Complex64> = buf[..=half].to_vec();
    // Hermitian endpoints of a real signal are exactly real; scrub the
    // O(eps) imaginary residue so the invariant holds bitwise.
    bins[0].im = 0.0;
    if n % 2 == 0 {
        bins[half].im = 0.0;
    }
    Ok(Spectrum { n, bins })
}

/// Inverse of [`rfft`]: reconstruct the real signal from its half-spectrum.
pub fn irfft(spec: &Spectrum) -> Result<Vec<f64>> {
    let n = spec.n;
    let half = n / 2;
    if n == 0 || spec.bins.len() != half + 1 {
        return Err(Error::InvalidArgument(format!(
            "irfft: inconsistent spectrum: n={n}, bins={}",
            spec.bins.len()
        )));
    }
    if spec.bins[0].im != 0.0 || (n % 2 == 0 && spec.bins[half].im != 0.0) {
        return Err(Error::InvalidArgument(
            "irfft: Hermitian endpoint bins must be real".into(),
        ));
    }
    // Expand to the full spectrum by conjugate symmetry, then inverse FFT
    // via conj(fft(conj(x)))/n.
    let mut full = vec![Complex64::new(0.0, 0.0); n];
    for k in 0..=half {
        full[k] = spec.bins[k];
    }
    for k in half + 1..n {
        full[k] = spec.bins[n - k].conj();
    }
    for x in full.iter_mut() {
        *x = x.conj();
    }
    fft_any(&mut full);
    let inv_n = 1.0 / n as f64;
    Ok(full.iter().map(|x| x.re * inv_n).collect())
}
