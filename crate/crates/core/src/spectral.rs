//! 2D Fourier analysis and amplitude-based style transfer.
//!
//! The forward transform follows the unnormalized convention
//! `F(u,v) = sum_{h,w} x(h,w) e^{-j2pi(hu/H + wv/W)}`; the inverse carries the
//! 1/(HW) factor. `dft2` evaluates the double sum directly and serves as the
//! oracle for the radix-2 `fft2`.
//!
//! Style transfer replaces the low-frequency amplitude of a target image with
//! a batch-averaged source amplitude inside a zero-centered square, keeping
//! the target phase, so the output changes appearance but not content.

use num_complex::Complex64;
use std::f64::consts::PI;

use crate::{Error, Image, Result};

/// Complex H x W x C spectrum, laid out like [`Image`] with the DC term at
/// (0, 0).
#[derive(Debug, Clone)]
pub struct Spectrum {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<Complex64>,
}

impl Spectrum {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(Error::DimensionMismatch(format!(
                "spectrum data length {} != {}x{}x{}",
                data.len(),
                h,
                w,
                c
            )));
        }
        Ok(Spectrum { h, w, c, data })
    }

    pub fn h(&self) -> usize {
        self.h
    }
    pub fn w(&self) -> usize {
        self.w
    }
    pub fn channels(&self) -> usize {
        self.c
    }
    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize, ch: usize) -> Complex64 {
        self.data[(u * self.w + v) * self.c + ch]
    }
}

/// Polar split of a spectrum: `F = A * exp(jP)` elementwise.
#[derive(Debug, Clone)]
pub struct AmplitudePhase {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    /// |F|, nonnegative.
    pub amplitude: Vec<f64>,
    /// atan2(Im F, Re F), in (-pi, pi].
    pub phase: Vec<f64>,
}

/// Real-valued amplitude grid with spectrum layout; the batch-averaged source
/// amplitude lives here.
#[derive(Debug, Clone)]
pub struct AmplitudeGrid {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl AmplitudeGrid {
    #[inline]
    pub fn get(&self, u: usize, v: usize, ch: usize) -> f64 {
        self.data[(u * self.w + v) * self.c + ch]
    }
}

/// Binary low-frequency selector: 0 inside the DC-centered square of side
/// `floor(beta * min(H, W))`, 1 elsewhere. Bits are stored in the DC-centered
/// layout; [`LowFreqMask::bit_natural`] maps natural spectrum coordinates
/// through the quadrant swap.
#[derive(Debug, Clone)]
pub struct LowFreqMask {
    h: usize,
    w: usize,
    beta: f64,
    bits: Vec<u8>,
}

impl LowFreqMask {
    pub fn new(h: usize, w: usize, beta: f64) -> Result<Self> {
        if !(0.0..=0.5).contains(&beta) {
            return Err(Error::DimensionMismatch(format!(
                "beta {beta} outside [0, 0.5]"
            )));
        }
        let side = (beta * h.min(w) as f64).floor() as usize;
        let mut bits = vec![1u8; h * w];
        if side > 0 {
            let r0 = h / 2 - side / 2;
            let c0 = w / 2 - side / 2;
            for r in r0..r0 + side {
                for c in c0..c0 + side {
                    bits[r * w + c] = 0;
                }
            }
        }
        Ok(LowFreqMask { h, w, beta, bits })
    }

    pub fn h(&self) -> usize {
        self.h
    }
    pub fn w(&self) -> usize {
        self.w
    }
    pub fn beta(&self) -> f64 {
        self.beta
    }
    pub fn side(&self) -> usize {
        (self.beta * self.h.min(self.w) as f64).floor() as usize
    }

    /// Bit at DC-centered coordinates.
    #[inline]
    pub fn bit_centered(&self, r: usize, c: usize) -> u8 {
        self.bits[r * self.w + c]
    }

    /// Bit seen from natural (unshifted) spectrum coordinates.
    #[inline]
    pub fn bit_natural(&self, u: usize, v: usize) -> u8 {
        let r = (u + self.h / 2) % self.h;
        let c = (v + self.w / 2) % self.w;
        self.bits[r * self.w + c]
    }

    pub fn zero_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 0).count()
    }
}

/// Direct-summation DFT; O((HW)^2) per channel. Works for any dimensions and
/// is the reference the fast transform is checked against.
pub fn dft2(x: &Image) -> Spectrum {
    let (h, w, ch) = (x.h(), x.w(), x.channels());
    let mut data = vec![Complex64::new(0.0, 0.0); h * w * ch];
    for u in 0..h {
        for v in 0..w {
            for k in 0..ch {
                let mut acc = Complex64::new(0.0, 0.0);
                for r in 0..h {
                    for c in 0..w {
                        let ang = -2.0 * PI * (r * u) as f64 / h as f64
                            - 2.0 * PI * (c * v) as f64 / w as f64;
                        acc += x.get(r, c, k) * Complex64::new(ang.cos(), ang.sin());
                    }
                }
                data[(u * w + v) * ch + k] = acc;
            }
        }
    }
    Spectrum { h, w, c: ch, data }
}

fn is_power_of_two(n: usize) -> bool {
    n > 0 && n & (n - 1) == 0
}

/// In-place iterative radix-2 transform. `twiddles` holds e^{sign*2pi*i*k/n}
/// for k < n/2.
fn fft_inplace(buf: &mut [Complex64], twiddles: &[Complex64]) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    // Bit-reversal permutation.
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let stride = n / len;
        for start in (0..n).step_by(len) {
            for k in 0..len / 2 {
                let w = twiddles[k * stride];
                let u = buf[start + k];
                let v = buf[start + k + len / 2] * w;
                buf[start + k] = u + v;
                buf[start + k + len / 2] = u - v;
            }
        }
        len <<= 1;
    }
}

fn make_twiddles(n: usize, sign: f64) -> Vec<Complex64> {
    (0..n / 2)
        .map(|k| {
            let ang = sign * 2.0 * PI * k as f64 / n as f64;
            Complex64::new(ang.cos(), ang.sin())
        })
        .collect()
}

/// Row-column 2D FFT over one channel-contiguous plane.
fn fft2_plane(plane: &mut [Complex64], h: usize, w: usize, sign: f64) {
    let tw_row = make_twiddles(w, sign);
    let tw_col = if h == w {
        tw_row.clone()
    } else {
        make_twiddles(h, sign)
    };
    for r in 0..h {
        fft_inplace(&mut plane[r * w..(r + 1) * w], &tw_row);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = plane[r * w + c];
        }
        fft_inplace(&mut col, &tw_col);
        for r in 0..h {
            plane[r * w + c] = col[r];
        }
    }
}

fn require_pow2(h: usize, w: usize) -> Result<()> {
    if is_power_of_two(h) && is_power_of_two(w) {
        Ok(())
    } else {
        Err(Error::NonPowerOfTwo(h, w))
    }
}

/// Radix-2 row-column FFT of all channels; requires power-of-two dimensions.
pub fn fft2(x: &Image) -> Result<Spectrum> {
    let (h, w, ch) = (x.h(), x.w(), x.channels());
    require_pow2(h, w)?;
    let mut data = vec![Complex64::new(0.0, 0.0); h * w * ch];
    let mut plane = vec![Complex64::new(0.0, 0.0); h * w];
    for k in 0..ch {
        for (i, p) in plane.iter_mut().enumerate() {
            *p = Complex64::new(x.data()[i * ch + k], 0.0);
        }
        fft2_plane(&mut plane, h, w, -1.0);
        for (i, p) in plane.iter().enumerate() {
            data[i * ch + k] = *p;
        }
    }
    Ok(Spectrum { h, w, c: ch, data })
}

/// Inverse transform, real part, normalized by 1/(HW). Output is not clamped;
/// callers clamp when constructing an [`Image`].
pub fn ifft2(spec: &Spectrum) -> Result<Vec<f64>> {
    Ok(ifft2_complex(spec)?.into_iter().map(|z| z.re).collect())
}

/// Inverse transform keeping the (residual) imaginary part.
pub fn ifft2_complex(spec: &Spectrum) -> Result<Vec<Complex64>> {
    let (h, w, ch) = (spec.h, spec.w, spec.c);
    require_pow2(h, w)?;
    let norm = 1.0 / (h * w) as f64;
    let mut out = vec![Complex64::new(0.0, 0.0); h * w * ch];
    let mut plane = vec![Complex64::new(0.0, 0.0); h * w];
    for k in 0..ch {
        for (i, p) in plane.iter_mut().enumerate() {
            *p = spec.data[i * ch + k];
        }
        fft2_plane(&mut plane, h, w, 1.0);
        for (i, p) in plane.iter().enumerate() {
            out[i * ch + k] = p * norm;
        }
    }
    Ok(out)
}

/// Splits a spectrum into amplitude and phase.
pub fn decompose(spec: &Spectrum) -> AmplitudePhase {
    let mut amplitude = Vec::with_capacity(spec.data.len());
    let mut phase = Vec::with_capacity(spec.data.len());
    for z in &spec.data {
        amplitude.push(z.norm());
        phase.push(z.im.atan2(z.re));
    }
    AmplitudePhase {
        h: spec.h,
        w: spec.w,
        c: spec.c,
        amplitude,
        phase,
    }
}

/// Rebuilds the spectrum `A * exp(jP)`.
pub fn recompose(ap: &AmplitudePhase) -> Spectrum {
    let data = ap
        .amplitude
        .iter()
        .zip(&ap.phase)
        .map(|(&a, &p)| Complex64::new(a * p.cos(), a * p.sin()))
        .collect();
    Spectrum {
        h: ap.h,
        w: ap.w,
        c: ap.c,
        data,
    }
}

/// Elementwise mean of the per-image amplitude spectra of a batch.
pub fn batch_mean_amplitude(batch: &[Image]) -> Result<AmplitudeGrid> {
    let first = batch.first().ok_or(Error::EmptyBatch)?;
    let (h, w, c) = (first.h(), first.w(), first.channels());
    let mut acc = vec![0.0f64; h * w * c];
    for img in batch {
        if !img.same_dims(first) {
            return Err(Error::DimensionMismatch(
                "batch images must share dimensions".into(),
            ));
        }
        let spec = fft2(img)?;
        for (a, z) in acc.iter_mut().zip(spec.data.iter()) {
            *a += z.norm();
        }
    }
    let inv = 1.0 / batch.len() as f64;
    for a in &mut acc {
        *a *= inv;
    }
    Ok(AmplitudeGrid { h, w, c, data: acc })
}

/// Target-to-source style transfer: inside the zero-centered square the
/// target amplitude is replaced by `mean_amp`; the target phase is kept
/// everywhere. The result is clamped into a valid image.
pub fn stylize_target(x_t: &Image, mean_amp: &AmplitudeGrid, mask: &LowFreqMask) -> Result<Image> {
    let (h, w, c) = (x_t.h(), x_t.w(), x_t.channels());
    if mean_amp.h != h || mean_amp.w != w || mean_amp.c != c {
        return Err(Error::DimensionMismatch(
            "mean amplitude dimensions do not match the target image".into(),
        ));
    }
    if mask.h != h || mask.w != w {
        return Err(Error::DimensionMismatch(
            "low-frequency mask dimensions do not match the target image".into(),
        ));
    }
    let spec = fft2(x_t)?;
    let mut ap = decompose(&spec);
    for u in 0..h {
        for v in 0..w {
            if mask.bit_natural(u, v) == 0 {
                for k in 0..c {
                    ap.amplitude[(u * w + v) * c + k] = mean_amp.get(u, v, k);
                }
            }
        }
    }
    let grid = ifft2(&recompose(&ap))?;
    Image::new(h, w, c, grid)
}
