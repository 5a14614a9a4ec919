//! Full-resolution convolutional scorer with hand-derived backpropagation.
//!
//! Three layers: 3x3 conv (zero pad 1) -> ReLU -> 3x3 conv -> ReLU -> 1x1
//! conv -> per-pixel softmax over the three classes. Small enough that exact
//! reverse-mode gradients are written out by hand and the whole training loop
//! runs in CPU minutes.
//!
//! Weight layout is (ky, kx, c_in, c_out) with the output channel contiguous,
//! and activations are channel-last, so the hot loops stride unit-length.
//! Accumulation order is fixed; identical params and input give bit-identical
//! outputs.

use std::io::{Read as _, Write as _};
use std::path::Path;

use crate::image::NUM_CLASSES;
use crate::{Error, Image, LabelMap, ProbMap, Result, Rng};

/// Hidden width of both 3x3 layers.
pub const HIDDEN: usize = 16;

/// Checkpoint magic bytes.
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DDS1";

/// Number of parameters for a given input channel count.
pub fn param_count(c_in: usize) -> usize {
    HIDDEN * (9 * c_in + 1) + HIDDEN * (9 * HIDDEN + 1) + NUM_CLASSES * (HIDDEN + 1)
}

/// All learnable parameters of the scorer.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerParams {
    pub c_in: usize,
    /// 3x3 x c_in x 16, layout (ky, kx, c_in, c_out).
    pub conv1_w: Vec<f64>,
    pub conv1_b: Vec<f64>,
    /// 3x3 x 16 x 16.
    pub conv2_w: Vec<f64>,
    pub conv2_b: Vec<f64>,
    /// 1x1 x 16 x 3, layout (c_in, c_out).
    pub conv3_w: Vec<f64>,
    pub conv3_b: Vec<f64>,
}

impl ScorerParams {
    /// Glorot-uniform weights (`s = sqrt(6 / (fan_in + fan_out))`, fans
    /// counted in channels), zero biases, drawn from `rng` in declaration
    /// order.
    pub fn init(c_in: usize, rng: &mut Rng) -> Self {
        let mut draw = |n: usize, s: f64| -> Vec<f64> {
            (0..n).map(|_| s * (2.0 * rng.uniform() - 1.0)).collect()
        };
        let s1 = (6.0 / (c_in + HIDDEN) as f64).sqrt();
        let conv1_w = draw(9 * c_in * HIDDEN, s1);
        let s2 = (6.0 / (HIDDEN + HIDDEN) as f64).sqrt();
        let conv2_w = draw(9 * HIDDEN * HIDDEN, s2);
        let s3 = (6.0 / (HIDDEN + NUM_CLASSES) as f64).sqrt();
        let conv3_w = draw(HIDDEN * NUM_CLASSES, s3);
        ScorerParams {
            c_in,
            conv1_w,
            conv1_b: vec![0.0; HIDDEN],
            conv2_w,
            conv2_b: vec![0.0; HIDDEN],
            conv3_w,
            conv3_b: vec![0.0; NUM_CLASSES],
        }
    }

    pub fn zeros(c_in: usize) -> Self {
        ScorerParams {
            c_in,
            conv1_w: vec![0.0; 9 * c_in * HIDDEN],
            conv1_b: vec![0.0; HIDDEN],
            conv2_w: vec![0.0; 9 * HIDDEN * HIDDEN],
            conv2_b: vec![0.0; HIDDEN],
            conv3_w: vec![0.0; HIDDEN * NUM_CLASSES],
            conv3_b: vec![0.0; NUM_CLASSES],
        }
    }

    pub fn param_count(&self) -> usize {
        param_count(self.c_in)
    }

    fn arrays(&self) -> [&[f64]; 6] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.conv3_w,
            &self.conv3_b,
        ]
    }

    fn arrays_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.conv3_w,
            &mut self.conv3_b,
        ]
    }

    /// Flat view in checkpoint order.
    pub fn flatten(&self) -> Vec<f64> {
        self.arrays().concat()
    }

    /// Cheap content fingerprint used to tie forward caches to parameters.
    fn digest(&self) -> u64 {
        let mut acc = 0xcbf2_9ce4_8422_2325u64;
        for arr in self.arrays() {
            for v in arr {
                acc ^= v.to_bits();
                acc = acc.wrapping_mul(0x1000_0000_01b3);
            }
        }
        acc
    }

    pub fn max_abs_diff(&self, other: &ScorerParams) -> f64 {
        self.flatten()
            .iter()
            .zip(other.flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Parameter-shaped gradient accumulator.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub c_in: usize,
    pub conv1_w: Vec<f64>,
    pub conv1_b: Vec<f64>,
    pub conv2_w: Vec<f64>,
    pub conv2_b: Vec<f64>,
    pub conv3_w: Vec<f64>,
    pub conv3_b: Vec<f64>,
}

impl Gradients {
    pub fn zeros(c_in: usize) -> Self {
        Gradients {
            c_in,
            conv1_w: vec![0.0; 9 * c_in * HIDDEN],
            conv1_b: vec![0.0; HIDDEN],
            conv2_w: vec![0.0; 9 * HIDDEN * HIDDEN],
            conv2_b: vec![0.0; HIDDEN],
            conv3_w: vec![0.0; HIDDEN * NUM_CLASSES],
            conv3_b: vec![0.0; NUM_CLASSES],
        }
    }

    fn arrays(&self) -> [&[f64]; 6] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.conv3_w,
            &self.conv3_b,
        ]
    }

    fn arrays_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.conv3_w,
            &mut self.conv3_b,
        ]
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (dst, src) in self.arrays_mut().into_iter().zip(other.arrays()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for arr in self.arrays_mut() {
            for v in arr.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.arrays().concat()
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().iter().all(|a| a.iter().all(|v| v.is_finite()))
    }
}

/// Activations kept by [`forward`] for the matching [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    h: usize,
    w: usize,
    c_in: usize,
    params_digest: u64,
    input: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    probs: Vec<f64>,
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn conv3x3_forward(
    input: &[f64],
    h: usize,
    w: usize,
    c_in: usize,
    weights: &[f64],
    bias: &[f64],
    c_out: usize,
    out: &mut [f64],
) {
    for r in 0..h {
        for c in 0..w {
            let out_base = (r * w + c) * c_out;
            let orow = &mut out[out_base..out_base + c_out];
            orow.copy_from_slice(bias);
            for ky in 0..3usize {
                let rr = r + ky;
                if rr < 1 || rr > h {
                    continue;
                }
                let rr = rr - 1;
                for kx in 0..3usize {
                    let cc = c + kx;
                    if cc < 1 || cc > w {
                        continue;
                    }
                    let cc = cc - 1;
                    let in_base = (rr * w + cc) * c_in;
                    let w_base = (ky * 3 + kx) * c_in * c_out;
                    for ci in 0..c_in {
                        let x = input[in_base + ci];
                        let wrow = &weights[w_base + ci * c_out..w_base + (ci + 1) * c_out];
                        for (o, wv) in orow.iter_mut().zip(wrow) {
                            *o += x * wv;
                        }
                    }
                }
            }
        }
    }
}

/// Reverse of [`conv3x3_forward`]; accumulates weight/bias gradients and,
/// when requested, the gradient w.r.t. the layer input.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    h: usize,
    w: usize,
    c_in: usize,
    weights: &[f64],
    c_out: usize,
    d_out: &[f64],
    d_weights: &mut [f64],
    d_bias: &mut [f64],
    mut d_input: Option<&mut [f64]>,
) {
    for r in 0..h {
        for c in 0..w {
            let out_base = (r * w + c) * c_out;
            let drow = &d_out[out_base..out_base + c_out];
            for (b, d) in d_bias.iter_mut().zip(drow) {
                *b += d;
            }
            for ky in 0..3usize {
                let rr = r + ky;
                if rr < 1 || rr > h {
                    continue;
                }
                let rr = rr - 1;
                for kx in 0..3usize {
                    let cc = c + kx;
                    if cc < 1 || cc > w {
                        continue;
                    }
                    let cc = cc - 1;
                    let in_base = (rr * w + cc) * c_in;
                    let w_base = (ky * 3 + kx) * c_in * c_out;
                    for ci in 0..c_in {
                        let x = input[in_base + ci];
                        let wrow = &weights[w_base + ci * c_out..w_base + (ci + 1) * c_out];
                        let dwrow =
                            &mut d_weights[w_base + ci * c_out..w_base + (ci + 1) * c_out];
                        let mut dx = 0.0;
                        for ((dw, wv), d) in dwrow.iter_mut().zip(wrow).zip(drow) {
                            *dw += x * d;
                            dx += wv * d;
                        }
                        if let Some(di) = d_input.as_mut() {
                            di[in_base + ci] += dx;
                        }
                    }
                }
            }
        }
    }
}

/// Softmax backward: `dz_k = p_k * (g_k - sum_j p_j g_j)` per pixel.
fn softmax_backward(probs: &[f64], d_probs: &[f64], d_logits: &mut [f64]) {
    for px in 0..probs.len() / NUM_CLASSES {
        let base = px * NUM_CLASSES;
        let p = &probs[base..base + NUM_CLASSES];
        let g = &d_probs[base..base + NUM_CLASSES];
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for k in 0..NUM_CLASSES {
            d_logits[base + k] = p[k] * (g[k] - dot);
        }
    }
}

/// Runs the scorer on an image, returning the per-pixel class probabilities
/// and the cache needed by [`backward`].
pub fn forward(params: &ScorerParams, x: &Image) -> Result<(ProbMap, ForwardCache)> {
    if x.channels() != params.c_in {
        return Err(Error::ChannelMismatch {
            expected: params.c_in,
            got: x.channels(),
        });
    }
    let (h, w) = (x.h(), x.w());
    let n_px = h * w;
    let input = x.data().to_vec();

    let mut a1 = vec![0.0; n_px * HIDDEN];
    conv3x3_forward(
        &input,
        h,
        w,
        params.c_in,
        &params.conv1_w,
        &params.conv1_b,
        HIDDEN,
        &mut a1,
    );
    for v in &mut a1 {
        *v = v.max(0.0);
    }

    let mut a2 = vec![0.0; n_px * HIDDEN];
    conv3x3_forward(
        &a1,
        h,
        w,
        HIDDEN,
        &params.conv2_w,
        &params.conv2_b,
        HIDDEN,
        &mut a2,
    );
    for v in &mut a2 {
        *v = v.max(0.0);
    }

    let mut probs = vec![0.0; n_px * NUM_CLASSES];
    for px in 0..n_px {
        let arow = &a2[px * HIDDEN..(px + 1) * HIDDEN];
        let mut logits = [0.0f64; NUM_CLASSES];
        logits.copy_from_slice(&params.conv3_b);
        for (ci, &a) in arow.iter().enumerate() {
            let wrow = &params.conv3_w[ci * NUM_CLASSES..(ci + 1) * NUM_CLASSES];
            for k in 0..NUM_CLASSES {
                logits[k] += a * wrow[k];
            }
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let prow = &mut probs[px * NUM_CLASSES..(px + 1) * NUM_CLASSES];
        for k in 0..NUM_CLASSES {
            prow[k] = (logits[k] - m).exp();
            sum += prow[k];
        }
        let inv = 1.0 / sum;
        for p in prow {
            *p *= inv;
        }
    }

    let cache = ForwardCache {
        h,
        w,
        c_in: params.c_in,
        params_digest: params.digest(),
        input,
        a1,
        a2,
        probs: probs.clone(),
    };
    let map = ProbMap::new(h, w, probs)?;
    Ok((map, cache))
}

/// Exact reverse-mode gradients of a scalar loss through softmax, both convs
/// and both ReLUs, given `dLoss/dProbMap`.
pub fn backward(
    params: &ScorerParams,
    cache: &ForwardCache,
    d_probs: &[f64],
) -> Result<Gradients> {
    if cache.params_digest != params.digest() || cache.c_in != params.c_in {
        return Err(Error::CacheMismatch);
    }
    let (h, w) = (cache.h, cache.w);
    let n_px = h * w;
    if d_probs.len() != n_px * NUM_CLASSES {
        return Err(Error::ShapeMismatch(format!(
            "dLoss/dProbMap length {} != {}",
            d_probs.len(),
            n_px * NUM_CLASSES
        )));
    }
    let mut grads = Gradients::zeros(params.c_in);

    let mut d_logits = vec![0.0; n_px * NUM_CLASSES];
    softmax_backward(&cache.probs, d_probs, &mut d_logits);

    // 1x1 head.
    let mut d_a2 = vec![0.0; n_px * HIDDEN];
    for px in 0..n_px {
        let arow = &cache.a2[px * HIDDEN..(px + 1) * HIDDEN];
        let drow = &d_logits[px * NUM_CLASSES..(px + 1) * NUM_CLASSES];
        for (b, d) in grads.conv3_b.iter_mut().zip(drow) {
            *b += d;
        }
        for ci in 0..HIDDEN {
            let wrow = &params.conv3_w[ci * NUM_CLASSES..(ci + 1) * NUM_CLASSES];
            let dwrow = &mut grads.conv3_w[ci * NUM_CLASSES..(ci + 1) * NUM_CLASSES];
            let mut dx = 0.0;
            for ((dw, wv), d) in dwrow.iter_mut().zip(wrow).zip(drow) {
                *dw += arow[ci] * d;
                dx += wv * d;
            }
            d_a2[px * HIDDEN + ci] = dx;
        }
    }

    // ReLU 2: a2 > 0 marks the active units.
    for (d, &a) in d_a2.iter_mut().zip(&cache.a2) {
        if a <= 0.0 {
            *d = 0.0;
        }
    }

    let mut d_a1 = vec![0.0; n_px * HIDDEN];
    conv3x3_backward(
        &cache.a1,
        h,
        w,
        HIDDEN,
        &params.conv2_w,
        HIDDEN,
        &d_a2,
        &mut grads.conv2_w,
        &mut grads.conv2_b,
        Some(&mut d_a1),
    );

    // ReLU 1.
    for (d, &a) in d_a1.iter_mut().zip(&cache.a1) {
        if a <= 0.0 {
            *d = 0.0;
        }
    }

    conv3x3_backward(
        &cache.input,
        h,
        w,
        params.c_in,
        &params.conv1_w,
        HIDDEN,
        &d_a1,
        &mut grads.conv1_w,
        &mut grads.conv1_b,
        None,
    );

    Ok(grads)
}

fn check_shapes(a_cin: usize, b_cin: usize) -> Result<()> {
    if a_cin != b_cin {
        return Err(Error::ShapeMismatch(format!(
            "input channels {a_cin} vs {b_cin}"
        )));
    }
    Ok(())
}

/// Plain SGD: `w <- w - lr * g` elementwise.
pub fn sgd_step(params: &mut ScorerParams, grads: &Gradients, lr: f64) -> Result<()> {
    check_shapes(params.c_in, grads.c_in)?;
    for (arr, g) in params.arrays_mut().into_iter().zip(grads.arrays()) {
        for (w, gv) in arr.iter_mut().zip(g) {
            *w -= lr * gv;
        }
    }
    Ok(())
}

/// EMA teacher update: `t <- alpha * t + (1 - alpha) * s` elementwise.
pub fn ema_update(teacher: &mut ScorerParams, student: &ScorerParams, alpha: f64) -> Result<()> {
    check_shapes(teacher.c_in, student.c_in)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::ShapeMismatch(format!("alpha {alpha} outside [0, 1]")));
    }
    for (t, s) in teacher.arrays_mut().into_iter().zip(student.arrays()) {
        for (tv, sv) in t.iter_mut().zip(s) {
            *tv = alpha * *tv + (1.0 - alpha) * sv;
        }
    }
    Ok(())
}

/// Optimizer schedule state.
#[derive(Debug, Clone, Copy)]
pub struct OptimState {
    pub l_init: f64,
    pub total_iters: u64,
    pub iter: u64,
    pub ema_alpha: f64,
}

/// Poly learning-rate schedule `l_init * (1 - i/I)^0.9`.
pub fn poly_lr(state: &OptimState) -> f64 {
    state.l_init * (1.0 - state.iter as f64 / state.total_iters as f64).powf(0.9)
}

/// Per-pixel argmax with ties broken toward the lowest class index.
pub fn argmax_label(p: &ProbMap) -> LabelMap {
    let mut data = Vec::with_capacity(p.h() * p.w());
    for px in p.data().chunks_exact(NUM_CLASSES) {
        let mut best = 0usize;
        for k in 1..NUM_CLASSES {
            if px[k] > px[best] {
                best = k;
            }
        }
        data.push(best as u8);
    }
    LabelMap::new(p.h(), p.w(), data).expect("argmax classes are valid")
}

/// Serializes parameters: 16-byte header (magic "DDS1", u32 LE input
/// channels, u64 LE parameter count) followed by the flat little-endian f64
/// array in declaration order. Roundtrip is bit-exact.
pub fn save_checkpoint(params: &ScorerParams, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + params.param_count() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(params.c_in as u32).to_le_bytes());
    buf.extend_from_slice(&(params.param_count() as u64).to_le_bytes());
    for v in params.flatten() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<ScorerParams> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let c_in = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if count != param_count(c_in) || bytes.len() != 16 + count * 8 {
        return Err(Error::Format(format!(
            "checkpoint length {} does not match {count} parameters",
            bytes.len()
        )));
    }
    let mut values = bytes[16..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()));
    let mut params = ScorerParams::zeros(c_in);
    for arr in params.arrays_mut() {
        for v in arr.iter_mut() {
            *v = values.next().expect("length checked");
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
        let mut rng = Rng::new(seed);
        Image::new(h, w, c, (0..h * w * c).map(|_| rng.uniform()).collect()).unwrap()
    }

    fn random_labels(h: usize, w: usize, seed: u64) -> LabelMap {
        let mut rng = Rng::new(seed);
        LabelMap::new(h, w, (0..h * w).map(|_| rng.index(3) as u8).collect()).unwrap()
    }

    #[test]
    fn zero_params_give_uniform_map() {
        let params = ScorerParams::zeros(3);
        let (map, _) = forward(&params, &random_image(4, 4, 3, 1)).unwrap();
        for &p in map.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_normalized_and_forward_deterministic() {
        let params = ScorerParams::init(3, &mut Rng::new(2));
        let x = random_image(8, 8, 3, 3);
        let (m1, _) = forward(&params, &x).unwrap();
        let (m2, _) = forward(&params, &x).unwrap();
        assert_eq!(m1.data(), m2.data());
        for px in m1.data().chunks_exact(3) {
            let s: f64 = px.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(px.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn channel_mismatch_rejected() {
        let params = ScorerParams::init(3, &mut Rng::new(4));
        assert!(matches!(
            forward(&params, &random_image(4, 4, 1, 5)),
            Err(Error::ChannelMismatch { expected: 3, got: 1 })
        ));
    }

    #[test]
    fn translation_consistency_in_the_interior() {
        let params = ScorerParams::init(1, &mut Rng::new(6));
        let (h, w) = (16, 16);
        let blob = |r0: usize, c0: usize| -> Image {
            let mut data = vec![0.2; h * w];
            for r in 0..3 {
                for c in 0..3 {
                    data[(r0 + r) * w + c0 + c] = 0.9;
                }
            }
            Image::new(h, w, 1, data).unwrap()
        };
        let a = blob(6, 6);
        let b = blob(8, 8);
        let la = argmax_label(&forward(&params, &a).unwrap().0);
        let lb = argmax_label(&forward(&params, &b).unwrap().0);
        for r in 4..12 {
            for c in 4..12 {
                assert_eq!(lb.get(r + 2, c + 2), la.get(r, c), "at ({r},{c})");
            }
        }
    }

    #[test]
    fn softmax_head_identity_for_ce() {
        // With mean CE and one-hot targets, d(logits) = (p - y)/n.
        let n_px = 16;
        let params = ScorerParams::init(3, &mut Rng::new(7));
        let x = random_image(4, 4, 3, 8);
        let y = random_labels(4, 4, 9);
        let (map, _cache) = forward(&params, &x).unwrap();
        let mut d_probs = vec![0.0; n_px * 3];
        losses::ce_loss_grad(&map, &y, None, &mut d_probs, 1.0).unwrap();
        let mut d_logits = vec![0.0; n_px * 3];
        softmax_backward(map.data(), &d_probs, &mut d_logits);
        for px in 0..n_px {
            for k in 0..3 {
                let yk = f64::from(y.data()[px] as usize == k);
                let expect = (map.data()[px * 3 + k] - yk) / n_px as f64;
                assert!(
                    (d_logits[px * 3 + k] - expect).abs() < 1e-12,
                    "pixel {px} class {k}"
                );
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences_on_ce() {
        let params = ScorerParams::init(3, &mut Rng::new(10));
        let x = random_image(8, 8, 3, 11);
        let y = random_labels(8, 8, 12);

        let loss_of = |p: &ScorerParams| -> f64 {
            let (map, _) = forward(p, &x).unwrap();
            losses::ce_loss(&map, &y, None).unwrap()
        };

        let (map, cache) = forward(&params, &x).unwrap();
        let mut d_probs = vec![0.0; 8 * 8 * 3];
        losses::ce_loss_grad(&map, &y, None, &mut d_probs, 1.0).unwrap();
        let grads = backward(&params, &cache, &d_probs).unwrap();
        let flat = grads.flatten();

        // 50 random parameter coordinates, central differences.
        let mut rng = Rng::new(13);
        let total = flat.len();
        let h = 1e-6;
        for _ in 0..50 {
            let idx = rng.index(total);
            let mut plus = params.clone();
            let mut minus = params.clone();
            perturb(&mut plus, idx, h);
            perturb(&mut minus, idx, -h);
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let a = flat[idx];
            let denom = a.abs().max(fd.abs());
            assert!(
                (a - fd).abs() <= 1e-4 * denom + 1e-8,
                "param {idx}: analytic {a} vs fd {fd}"
            );
        }
    }

    fn perturb(params: &mut ScorerParams, mut idx: usize, delta: f64) {
        for arr in params.arrays_mut() {
            if idx < arr.len() {
                arr[idx] += delta;
                return;
            }
            idx -= arr.len();
        }
        panic!("index out of range");
    }

    #[test]
    fn gradient_is_linear_in_loss_scale() {
        let params = ScorerParams::init(3, &mut Rng::new(14));
        let x = random_image(4, 4, 3, 15);
        let y = random_labels(4, 4, 16);
        let (map, cache) = forward(&params, &x).unwrap();
        let mut d1 = vec![0.0; 48];
        losses::ce_loss_grad(&map, &y, None, &mut d1, 1.0).unwrap();
        let d3: Vec<f64> = d1.iter().map(|v| 3.0 * v).collect();
        let g1 = backward(&params, &cache, &d1).unwrap().flatten();
        let g3 = backward(&params, &cache, &d3).unwrap().flatten();
        for (a, b) in g1.iter().zip(&g3) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cache_mismatch_detected() {
        let params = ScorerParams::init(3, &mut Rng::new(17));
        let other = ScorerParams::init(3, &mut Rng::new(18));
        let x = random_image(4, 4, 3, 19);
        let (_, cache) = forward(&params, &x).unwrap();
        let d = vec![0.0; 48];
        assert!(matches!(
            backward(&other, &cache, &d),
            Err(Error::CacheMismatch)
        ));
    }

    #[test]
    fn sgd_arithmetic() {
        let mut params = ScorerParams::zeros(1);
        params.conv1_w[0] = 1.0;
        let mut grads = Gradients::zeros(1);
        grads.conv1_w[0] = 2.0;
        let before = params.clone();
        sgd_step(&mut params, &grads, 0.0).unwrap();
        assert_eq!(params, before);
        sgd_step(&mut params, &grads, 0.1).unwrap();
        assert!((params.conv1_w[0] - 0.8).abs() < 1e-15);

        // Random step against an elementwise oracle.
        let mut rng = Rng::new(20);
        let mut p = ScorerParams::init(1, &mut rng);
        let mut g = Gradients::zeros(1);
        for arr in g.arrays_mut() {
            for v in arr.iter_mut() {
                *v = rng.gaussian();
            }
        }
        let before = p.flatten();
        sgd_step(&mut p, &g, 0.05).unwrap();
        for ((after, before), gv) in p.flatten().iter().zip(&before).zip(&g.flatten()) {
            assert_eq!(*after, before - 0.05 * gv);
        }
    }

    #[test]
    fn ema_identities_and_contraction() {
        let student = ScorerParams::init(1, &mut Rng::new(21));
        let mut teacher = ScorerParams::init(1, &mut Rng::new(22));
        let orig = teacher.clone();
        ema_update(&mut teacher, &student, 1.0).unwrap();
        assert_eq!(teacher, orig);
        ema_update(&mut teacher, &student, 0.0).unwrap();
        assert_eq!(teacher, student);

        // Two successive alpha=0.99 updates from t=0 against s=1.
        let mut t = ScorerParams::zeros(1);
        let mut s = ScorerParams::zeros(1);
        for v in s.arrays_mut() {
            for x in v.iter_mut() {
                *x = 1.0;
            }
        }
        ema_update(&mut t, &s, 0.99).unwrap();
        ema_update(&mut t, &s, 0.99).unwrap();
        assert!((t.conv1_w[0] - 0.0199).abs() < 1e-12);

        // ||t' - s||_inf = alpha * ||t - s||_inf.
        let student = ScorerParams::init(1, &mut Rng::new(23));
        let mut teacher = ScorerParams::init(1, &mut Rng::new(24));
        let gap_before = teacher.max_abs_diff(&student);
        ema_update(&mut teacher, &student, 0.9).unwrap();
        let gap_after = teacher.max_abs_diff(&student);
        assert!((gap_after - 0.9 * gap_before).abs() < 1e-12);
    }

    #[test]
    fn poly_schedule_values() {
        let mut state = OptimState {
            l_init: 0.001,
            total_iters: 1000,
            iter: 0,
            ema_alpha: 0.99,
        };
        assert_eq!(poly_lr(&state), 0.001);
        state.iter = 1000;
        assert_eq!(poly_lr(&state), 0.0);
        state.iter = 500;
        assert!((poly_lr(&state) - 0.001 * 0.5f64.powf(0.9)).abs() < 1e-12);
        assert!((poly_lr(&state) - 0.000536).abs() < 1e-6);
    }

    #[test]
    fn argmax_rules() {
        let y = random_labels(4, 4, 25);
        assert_eq!(argmax_label(&ProbMap::one_hot(&y)), y);
        let uniform = ProbMap::uniform(2, 2);
        assert!(argmax_label(&uniform).data().iter().all(|&v| v == 0));
        let mut rng = Rng::new(26);
        let mut data = Vec::new();
        for _ in 0..16 {
            let logits: Vec<f64> = (0..3).map(|_| rng.gaussian()).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
            let s: f64 = e.iter().sum();
            data.extend(e.iter().map(|v| v / s));
        }
        let p = ProbMap::new(4, 4, data).unwrap();
        let labels = argmax_label(&p);
        for px in 0..16 {
            let row = &p.data()[px * 3..px * 3 + 3];
            let mut best = 0;
            for k in 1..3 {
                if row[k] > row[best] {
                    best = k;
                }
            }
            assert_eq!(labels.data()[px], best as u8);
        }
    }

    #[test]
    fn parameter_count_formula() {
        for c_in in [1, 3] {
            let p = ScorerParams::init(c_in, &mut Rng::new(27));
            assert_eq!(p.flatten().len(), param_count(c_in));
            assert_eq!(
                param_count(c_in),
                16 * (9 * c_in + 1) + 16 * (9 * 16 + 1) + 3 * (16 + 1)
            );
        }
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params = ScorerParams::init(3, &mut Rng::new(28));
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(params, loaded);
        for (a, b) in params.flatten().iter().zip(loaded.flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }

        // Corrupt magic.
        std::fs::write(&path, b"XXXX0000000000000000").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }
}
