//! Shared grid types: images, label maps, probability maps, binary masks.
//!
//! All grids are row-major. Images are channel-last with intensities in
//! [0, 1]; intensities are stored as f64 and only quantized to 8 bits at the
//! file I/O boundary.

use crate::{Error, Result};

/// Background / disc-ring / cup class ids.
pub const CLASS_BACKGROUND: u8 = 0;
pub const CLASS_RING: u8 = 1;
pub const CLASS_CUP: u8 = 2;
pub const NUM_CLASSES: usize = 3;

/// H x W x C image with values clamped to [0, 1] on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl Image {
    /// Builds an image, clamping every value to [0, 1]. NaNs are rejected;
    /// infinities clamp to the nearest bound.
    pub fn new(h: usize, w: usize, c: usize, mut data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(Error::DimensionMismatch(format!(
                "image data length {} != {}x{}x{}",
                data.len(),
                h,
                w,
                c
            )));
        }
        for v in &mut data {
            if v.is_nan() {
                return Err(Error::DimensionMismatch("NaN in image data".into()));
            }
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Image { h, w, c, data })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Image {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
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
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn idx(&self, r: usize, c: usize, ch: usize) -> usize {
        (r * self.w + c) * self.c + ch
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.data[self.idx(r, c, ch)]
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.h == other.h && self.w == other.w && self.c == other.c
    }

    /// Mean intensity over all pixels and channels.
    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Per-pixel class ids in {0 background, 1 disc ring, 2 cup}.
///
/// The disc mask is derived as {ring or cup} and the cup mask as {cup}, so
/// cup is a subset of disc by construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::DimensionMismatch(format!(
                "label data length {} != {}x{}",
                data.len(),
                h,
                w
            )));
        }
        if let Some(&bad) = data.iter().find(|&&v| v as usize >= NUM_CLASSES) {
            return Err(Error::Value(bad));
        }
        Ok(LabelMap { h, w, data })
    }

    pub fn h(&self) -> usize {
        self.h
    }
    pub fn w(&self) -> usize {
        self.w
    }
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.data[r * self.w + c]
    }

    /// Optic disc mask: ring or cup.
    pub fn od_mask(&self) -> BinaryMask {
        BinaryMask {
            h: self.h,
            w: self.w,
            bits: self.data.iter().map(|&v| u8::from(v != 0)).collect(),
        }
    }

    /// Optic cup mask.
    pub fn oc_mask(&self) -> BinaryMask {
        BinaryMask {
            h: self.h,
            w: self.w,
            bits: self
                .data
                .iter()
                .map(|&v| u8::from(v == CLASS_CUP))
                .collect(),
        }
    }
}

/// Per-pixel 3-class simplex: values >= 0 summing to 1 within 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl ProbMap {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * NUM_CLASSES {
            return Err(Error::DimensionMismatch(format!(
                "prob data length {} != {}x{}x{}",
                data.len(),
                h,
                w,
                NUM_CLASSES
            )));
        }
        for px in data.chunks_exact(NUM_CLASSES) {
            let sum: f64 = px.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || px.iter().any(|&p| p.is_nan() || p < 0.0) {
                return Err(Error::DimensionMismatch(format!(
                    "pixel probabilities {px:?} are not a simplex"
                )));
            }
        }
        Ok(ProbMap { h, w, data })
    }

    /// A uniform 1/3 map.
    pub fn uniform(h: usize, w: usize) -> Self {
        ProbMap {
            h,
            w,
            data: vec![1.0 / NUM_CLASSES as f64; h * w * NUM_CLASSES],
        }
    }

    /// One-hot encoding of a label map.
    pub fn one_hot(labels: &LabelMap) -> Self {
        let mut data = vec![0.0; labels.h * labels.w * NUM_CLASSES];
        for (i, &v) in labels.data.iter().enumerate() {
            data[i * NUM_CLASSES + v as usize] = 1.0;
        }
        ProbMap {
            h: labels.h,
            w: labels.w,
            data,
        }
    }

    pub fn h(&self) -> usize {
        self.h
    }
    pub fn w(&self) -> usize {
        self.w
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize, class: usize) -> f64 {
        self.data[(r * self.w + c) * NUM_CLASSES + class]
    }
}

/// H x W grid of {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    h: usize,
    w: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != h * w {
            return Err(Error::DimensionMismatch(format!(
                "mask length {} != {}x{}",
                bits.len(),
                h,
                w
            )));
        }
        if let Some(&bad) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::Value(bad));
        }
        Ok(BinaryMask { h, w, bits })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        BinaryMask {
            h,
            w,
            bits: vec![0; h * w],
        }
    }

    pub fn ones(h: usize, w: usize) -> Self {
        BinaryMask {
            h,
            w,
            bits: vec![1; h * w],
        }
    }

    pub fn h(&self) -> usize {
        self.h
    }
    pub fn w(&self) -> usize {
        self.w
    }
    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.bits[r * self.w + c]
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            h: self.h,
            w: self.w,
            bits: self.bits.iter().map(|&b| 1 - b).collect(),
        }
    }

    /// Number of 1-pixels with at least one 0-valued 4-neighbor (image
    /// borders do not count as 0s here; this measures internal boundary).
    pub fn boundary_length(&self) -> usize {
        let mut count = 0;
        for r in 0..self.h {
            for c in 0..self.w {
                if self.get(r, c) == 0 {
                    continue;
                }
                let exposed = (r > 0 && self.get(r - 1, c) == 0)
                    || (r + 1 < self.h && self.get(r + 1, c) == 0)
                    || (c > 0 && self.get(r, c - 1) == 0)
                    || (c + 1 < self.w && self.get(r, c + 1) == 0);
                if exposed {
                    count += 1;
                }
            }
        }
        count
    }

    /// Number of 4-connected components of the 1-pixels.
    pub fn component_count(&self) -> usize {
        let mut seen = vec![false; self.h * self.w];
        let mut stack = Vec::new();
        let mut components = 0;
        for start in 0..self.h * self.w {
            if self.bits[start] == 0 || seen[start] {
                continue;
            }
            components += 1;
            seen[start] = true;
            stack.push(start);
            while let Some(i) = stack.pop() {
                let (r, c) = (i / self.w, i % self.w);
                let mut visit = |j: usize| {
                    if self.bits[j] == 1 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if r > 0 {
                    visit(i - self.w);
                }
                if r + 1 < self.h {
                    visit(i + self.w);
                }
                if c > 0 {
                    visit(i - 1);
                }
                if c + 1 < self.w {
                    visit(i + 1);
                }
            }
        }
        components
    }
}
