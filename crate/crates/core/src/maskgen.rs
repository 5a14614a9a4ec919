//! Coarse-to-fine dynamic mask generation.
//!
//! A complex Gaussian noise grid is attenuated by `1 / max(freq, f_min)^d`,
//! inverse-transformed, and the top `floor(lambda_k * H * W)` values of the
//! real part become the mask. Large `d` suppresses high frequencies and gives
//! smooth, large-scale masks; small `d` gives fine, fragmented ones. During
//! training `d` is annealed linearly from `d_max` down to `d_min`.

use num_complex::Complex64;

use crate::spectral::{ifft2, Spectrum};
use crate::{BinaryMask, Error, Result, Rng};

/// Parameters of one mask generation draw.
#[derive(Debug, Clone, Copy)]
pub struct MaskGenParams {
    /// Frequency attenuation factor, >= 0.
    pub d: f64,
    /// Lower bound of the lambda_k sampling interval.
    pub lambda_lo: f64,
    /// Upper bound of the lambda_k sampling interval; capped at 0.5 because
    /// masks are used bi-directionally.
    pub lambda_hi: f64,
}

impl MaskGenParams {
    pub fn validate(&self) -> Result<()> {
        if self.d.is_nan() || self.d < 0.0 {
            return Err(Error::DimensionMismatch(format!(
                "attenuation factor d={} must be >= 0",
                self.d
            )));
        }
        if !(self.lambda_lo > 0.0 && self.lambda_lo <= self.lambda_hi && self.lambda_hi <= 0.5) {
            return Err(Error::DimensionMismatch(format!(
                "lambda interval ({}, {}) must satisfy 0 < lo <= hi <= 0.5",
                self.lambda_lo, self.lambda_hi
            )));
        }
        Ok(())
    }
}

/// Minimum frequency clamp preventing division by zero at DC.
pub fn f_min(h: usize, w: usize) -> f64 {
    1.0 / h.max(w) as f64
}

/// Record of the draw that produced a mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskMeta {
    pub d: f64,
    pub lambda_k: f64,
    pub seed: u64,
}

/// A binary mixing mask with exact popcount `floor(lambda_k * H * W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicMask {
    mask: BinaryMask,
    meta: MaskMeta,
}

impl DynamicMask {
    pub fn from_parts(mask: BinaryMask, meta: MaskMeta) -> Self {
        DynamicMask { mask, meta }
    }

    pub fn mask(&self) -> &BinaryMask {
        &self.mask
    }
    pub fn meta(&self) -> &MaskMeta {
        &self.meta
    }
    pub fn h(&self) -> usize {
        self.mask.h()
    }
    pub fn w(&self) -> usize {
        self.mask.w()
    }
    #[inline]
    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.mask.get(r, c)
    }
    pub fn popcount(&self) -> usize {
        self.mask.popcount()
    }
}

/// Signed per-axis frequency for index `i` of an axis of length `n`,
/// uniformly spaced in [-1/2, 1/2).
#[inline]
fn axis_freq(i: usize, n: usize) -> f64 {
    if i <= (n - 1) / 2 {
        i as f64 / n as f64
    } else {
        (i as f64 - n as f64) / n as f64
    }
}

/// Samples complex standard-normal noise and attenuates each entry by
/// `max(freq(u,v), f_min)^d`, where freq is the Euclidean norm of the signed
/// per-axis frequencies. Entries are drawn row-major, real part first.
pub fn decay_noise(h: usize, w: usize, d: f64, rng: &mut Rng) -> Vec<Complex64> {
    let fmin = f_min(h, w);
    let mut grid = Vec::with_capacity(h * w);
    for u in 0..h {
        let fu = axis_freq(u, h);
        for v in 0..w {
            let fv = axis_freq(v, w);
            let re = rng.gaussian();
            let im = rng.gaussian();
            let freq = (fu * fu + fv * fv).sqrt().max(fmin);
            let scale = freq.powf(-d);
            grid.push(Complex64::new(re * scale, im * scale));
        }
    }
    grid
}

/// Binarizes a real field by keeping its `k = floor(lambda_k * H * W)`
/// largest values. Ties at the threshold are broken by row-major index, the
/// earlier index winning, so the popcount is exactly `k`.
pub fn binarize_topk(field: &[f64], h: usize, w: usize, lambda_k: f64) -> Result<BinaryMask> {
    if field.len() != h * w {
        return Err(Error::DimensionMismatch(format!(
            "field length {} != {}x{}",
            field.len(),
            h,
            w
        )));
    }
    let k = (lambda_k * (h * w) as f64).floor() as usize;
    if k < 1 || k > h * w {
        return Err(Error::InvalidPopcount(k, h, w));
    }
    let (min, max) = field
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if !(min.is_finite() && max.is_finite()) {
        return Err(Error::DimensionMismatch("non-finite field value".into()));
    }
    if min == max {
        return Err(Error::DegenerateField);
    }
    // Total order: value descending, then row-major index ascending. The
    // first k positions under this order get the ones.
    let mut order: Vec<u32> = (0..(h * w) as u32).collect();
    let cmp = |&a: &u32, &b: &u32| {
        field[b as usize]
            .total_cmp(&field[a as usize])
            .then(a.cmp(&b))
    };
    if k < h * w {
        order.select_nth_unstable_by(k, cmp);
    }
    let mut bits = vec![0u8; h * w];
    for &i in &order[..k] {
        bits[i as usize] = 1;
    }
    BinaryMask::new(h, w, bits)
}

/// Linear coarse-to-fine schedule: `d_min + (1 - i/I) * (d_max - d_min)`.
pub fn schedule_d(iter: u64, total_iters: u64, d_min: f64, d_max: f64) -> f64 {
    debug_assert!(iter <= total_iters && d_min <= d_max);
    d_min + (1.0 - iter as f64 / total_iters as f64) * (d_max - d_min)
}

const MAX_RESAMPLES: usize = 8;

/// Draws `lambda_k ~ Uniform[lo, hi)`, synthesizes the decayed noise field,
/// and binarizes it. A degenerate (constant) field is resampled up to 8
/// times before the error propagates.
pub fn generate_mask(
    h: usize,
    w: usize,
    d: f64,
    lambda_interval: (f64, f64),
    rng: &mut Rng,
) -> Result<DynamicMask> {
    let params = MaskGenParams {
        d,
        lambda_lo: lambda_interval.0,
        lambda_hi: lambda_interval.1,
    };
    params.validate()?;
    let lambda_k = rng.uniform_in(params.lambda_lo, params.lambda_hi);
    let meta = MaskMeta {
        d,
        lambda_k,
        seed: rng.seed(),
    };
    for attempt in 0..=MAX_RESAMPLES {
        let noise = decay_noise(h, w, d, rng);
        let spec = Spectrum::new(h, w, 1, noise)?;
        let field = ifft2(&spec)?;
        match binarize_topk(&field, h, w, lambda_k) {
            Ok(mask) => return Ok(DynamicMask::from_parts(mask, meta)),
            Err(Error::DegenerateField) if attempt < MAX_RESAMPLES => continue,
            Err(e) => return Err(e),
        }
    }
    unreachable!("loop either returns a mask or an error");
}
