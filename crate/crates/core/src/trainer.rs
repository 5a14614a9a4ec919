//! Source pretraining and the full domain-adaptation loop.
//!
//! Per adaptation iteration: draw augmented source and target batches;
//! average the source amplitudes and stylize every target image; let the
//! teacher label the stylized views; let the student predict the raw targets
//! (confidence weights and hard pseudo labels); pair batch members into
//! quadruples, draw one mixing mask per quadruple, build both mixed images
//! and run the student on them; combine the three loss branches per the
//! variant's toggles; one SGD step on the student, one EMA step on the
//! teacher. The teacher never receives gradients.
//!
//! All randomness flows through one generator in fixed program order, so
//! (config, manifests) fully determine every checkpoint byte.

use std::fmt;
use std::str::FromStr;

use crate::image::NUM_CLASSES;
use crate::losses::{self, LossWeights};
use crate::maskgen::{self, DynamicMask, MaskMeta};
use crate::metrics;
use crate::mixing::{self, MixDirection, Quadruple};
use crate::model::{
    argmax_label, backward, ema_update, forward, poly_lr, sgd_step, Gradients, OptimState,
    ScorerParams,
};
use crate::spectral::{batch_mean_amplitude, stylize_target, LowFreqMask};
use crate::synthdata::{augment, Manifest, Split};
use crate::{BinaryMask, Error, Image, LabelMap, Result, Rng};

/// Which pathways of the network are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Both pathways, bi-directional mixing.
    FullNet,
    /// Stylized-view pseudo-label pathway only; no cross-domain mixing.
    IntraOnly,
    /// Cross-domain pathway only, with stylized targets replacing raw ones.
    CrossOnly,
    /// CrossOnly with uni-directional (non-inverse) mixing.
    CrossOnlyUni,
    /// Both pathways but uni-directional mixing.
    CrossUni,
    /// No adaptation; the pretrained model is returned as-is.
    SourceOnly,
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fullnet" => Ok(Variant::FullNet),
            "intra_only" => Ok(Variant::IntraOnly),
            "cross_only" => Ok(Variant::CrossOnly),
            "cross_only_uni" => Ok(Variant::CrossOnlyUni),
            "cross_uni" => Ok(Variant::CrossUni),
            "source_only" => Ok(Variant::SourceOnly),
            other => Err(Error::UnknownVariant(other.into())),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::FullNet => "fullnet",
            Variant::IntraOnly => "intra_only",
            Variant::CrossOnly => "cross_only",
            Variant::CrossOnlyUni => "cross_only_uni",
            Variant::CrossUni => "cross_uni",
            Variant::SourceOnly => "source_only",
        };
        write!(f, "{s}")
    }
}

/// Mask generator used for cross-domain mixing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskBaseline {
    /// Frequency-decayed noise with the annealed attenuation factor.
    Dynamic,
    /// Same generator with d fixed at (d_min + d_max) / 2.
    StaticD,
    /// Axis-aligned rectangle of area lambda_k * H * W.
    CutMix,
    /// Global convex blending; labels come from the dominant side.
    Mixup,
}

impl FromStr for MaskBaseline {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dynamic" => Ok(MaskBaseline::Dynamic),
            "static_d" => Ok(MaskBaseline::StaticD),
            "cutmix" => Ok(MaskBaseline::CutMix),
            "mixup" => Ok(MaskBaseline::Mixup),
            other => Err(Error::UnknownBaseline(other.into())),
        }
    }
}

impl fmt::Display for MaskBaseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MaskBaseline::Dynamic => "dynamic",
            MaskBaseline::StaticD => "static_d",
            MaskBaseline::CutMix => "cutmix",
            MaskBaseline::Mixup => "mixup",
        };
        write!(f, "{s}")
    }
}

/// How the source amplitude for stylization is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AmpMode {
    /// Mean amplitude over the whole source batch.
    BatchAvg,
    /// Amplitude of the position-paired single source image.
    SingleImage,
}

impl FromStr for AmpMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch_avg" => Ok(AmpMode::BatchAvg),
            "single_image" => Ok(AmpMode::SingleImage),
            other => Err(Error::UnknownBaseline(other.into())),
        }
    }
}

impl fmt::Display for AmpMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AmpMode::BatchAvg => write!(f, "batch_avg"),
            AmpMode::SingleImage => write!(f, "single_image"),
        }
    }
}

/// Everything a run needs besides the data.
#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub pretrain_iters: u64,
    pub adapt_iters: u64,
    pub l_init: f64,
    pub lambda_s: f64,
    pub lambda_t: f64,
    pub lambda_t_stylized: f64,
    pub d_min: f64,
    pub d_max: f64,
    pub lambda_k_lo: f64,
    pub lambda_k_hi: f64,
    pub beta: f64,
    pub ema_alpha: f64,
    pub variant: Variant,
    pub mask_baseline: MaskBaseline,
    pub amp_mode: AmpMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 1,
            batch_size: 8,
            pretrain_iters: 300,
            adapt_iters: 1000,
            l_init: 0.001,
            lambda_s: 0.5,
            lambda_t: 0.5,
            lambda_t_stylized: 1.0,
            d_min: 1.0,
            d_max: 5.0,
            lambda_k_lo: 0.1,
            lambda_k_hi: 0.5,
            beta: 0.1,
            ema_alpha: 0.99,
            variant: Variant::FullNet,
            mask_baseline: MaskBaseline::Dynamic,
            amp_mode: AmpMode::BatchAvg,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::DimensionMismatch(msg.into()));
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return bad("batch size must be even and >= 2");
        }
        if self.adapt_iters == 0 || self.pretrain_iters == 0 {
            return bad("iteration counts must be positive");
        }
        if !(self.l_init > 0.0 && self.l_init.is_finite()) {
            return bad("l_init must be positive");
        }
        if self.lambda_s < 0.0 || self.lambda_t < 0.0 || self.lambda_t_stylized < 0.0 {
            return bad("loss weights must be nonnegative");
        }
        if !(self.d_min <= self.d_max && self.d_min >= 0.0) {
            return bad("need 0 <= d_min <= d_max");
        }
        if !(self.lambda_k_lo > 0.0
            && self.lambda_k_lo <= self.lambda_k_hi
            && self.lambda_k_hi <= 0.5)
        {
            return bad("lambda_k interval must satisfy 0 < lo <= hi <= 0.5");
        }
        if !(0.0..=0.5).contains(&self.beta) {
            return bad("beta must be in [0, 0.5]");
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return bad("ema_alpha must be in [0, 1]");
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_s: self.lambda_s,
            lambda_t: self.lambda_t,
            lambda_t_stylized: self.lambda_t_stylized,
            ..LossWeights::default()
        }
    }
}

/// Loss/pathway toggles derived from a variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathwayToggles {
    /// Teacher-supervised stylized pathway (the L_T-stylized term).
    pub stylized_pathway: bool,
    /// Cross-domain mixing pathway (the L_S and L_T terms).
    pub cross_pathway: bool,
    /// Both mixing directions per quadruple, or only source-on-mask.
    pub bidirectional: bool,
    /// Student consumes stylized target views instead of raw ones.
    pub stylized_replaces_raw: bool,
}

/// Maps a variant to its toggles.
pub fn apply_variant(variant: Variant) -> PathwayToggles {
    match variant {
        Variant::FullNet => PathwayToggles {
            stylized_pathway: true,
            cross_pathway: true,
            bidirectional: true,
            stylized_replaces_raw: false,
        },
        Variant::IntraOnly => PathwayToggles {
            stylized_pathway: true,
            cross_pathway: false,
            bidirectional: false,
            stylized_replaces_raw: false,
        },
        Variant::CrossOnly => PathwayToggles {
            stylized_pathway: false,
            cross_pathway: true,
            bidirectional: true,
            stylized_replaces_raw: true,
        },
        Variant::CrossOnlyUni => PathwayToggles {
            stylized_pathway: false,
            cross_pathway: true,
            bidirectional: false,
            stylized_replaces_raw: true,
        },
        Variant::CrossUni => PathwayToggles {
            stylized_pathway: true,
            cross_pathway: true,
            bidirectional: false,
            stylized_replaces_raw: false,
        },
        Variant::SourceOnly => PathwayToggles {
            stylized_pathway: false,
            cross_pathway: false,
            bidirectional: false,
            stylized_replaces_raw: false,
        },
    }
}

/// One training-loop log row.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLogRow {
    pub iter: u64,
    pub lr: f64,
    pub d: f64,
    pub lambda_k_mean: f64,
    pub l_s: f64,
    pub l_t: f64,
    pub l_sty: f64,
    pub total: f64,
    pub gamma_mean: f64,
}

/// Periodic evaluation snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub iter: u64,
    pub dice_od: f64,
    pub dice_oc: f64,
}

/// Training history: per-iteration rows plus periodic eval rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub rows: Vec<RunLogRow>,
    pub evals: Vec<EvalRow>,
}

impl RunLog {
    /// CSV with header `iter,lr,d,lambda_k_mean,L_S,L_T,L_Tsty,total,gamma_mean`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,lr,d,lambda_k_mean,L_S,L_T,L_Tsty,total,gamma_mean\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.9},{:.6},{:.6},{:.9},{:.9},{:.9},{:.9},{:.6}\n",
                r.iter, r.lr, r.d, r.lambda_k_mean, r.l_s, r.l_t, r.l_sty, r.total, r.gamma_mean
            ));
        }
        out
    }

    /// CSV of the periodic evaluations, header `iter,dice_od,dice_oc`.
    pub fn evals_to_csv(&self) -> String {
        let mut out = String::from("iter,dice_od,dice_oc\n");
        for e in &self.evals {
            out.push_str(&format!(
                "{},{:.6},{:.6}\n",
                e.iter, e.dice_od, e.dice_oc
            ));
        }
        out
    }
}

// RNG stream namespaces; one generator per concern keeps streams stable when
// unrelated stages change their draw counts.
const NS_INIT: u64 = 0x10;
const NS_PRETRAIN: u64 = 0x11;
const NS_ADAPT: u64 = 0x20;

const EVAL_EVERY_PRETRAIN: u64 = 50;
const EVAL_EVERY_ADAPT: u64 = 100;

struct LoadedSplit {
    images: Vec<Image>,
    labels: Vec<LabelMap>,
}

fn load_split(manifest: &Manifest, domain: u32, split: Split) -> Result<LoadedSplit> {
    let rows = manifest.select(domain, split);
    if rows.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut images = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    for row in rows {
        let (img, lbl) = manifest.load_pair(row)?;
        images.push(img);
        labels.push(lbl);
    }
    Ok(LoadedSplit { images, labels })
}

/// `count` distinct indices out of `n` via a partial Fisher-Yates shuffle;
/// falls back to with-replacement draws when n < count.
fn sample_indices(n: usize, count: usize, rng: &mut Rng) -> Vec<usize> {
    if n >= count {
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..count {
            let j = i + rng.index(n - i);
            pool.swap(i, j);
        }
        pool.truncate(count);
        pool
    } else {
        (0..count).map(|_| rng.index(n)).collect()
    }
}

/// Pretrains the scorer on the labeled source train split with Dice loss and
/// a fixed learning rate, returning the checkpoint with the best source-test
/// Dice (evaluated every 50 iterations and at the end).
pub fn pretrain(
    cfg: &TrainConfig,
    manifest: &Manifest,
    source_domain: u32,
) -> Result<(ScorerParams, RunLog)> {
    cfg.validate()?;
    let data = load_split(manifest, source_domain, Split::Train)?;
    let weights = cfg.loss_weights();
    let mut rng = Rng::new(cfg.seed).split(NS_PRETRAIN);
    let mut params = ScorerParams::init(3, &mut Rng::new(cfg.seed).split(NS_INIT));
    let mut log = RunLog::default();
    let mut best: Option<(f64, ScorerParams)> = None;

    let n_px = data.images[0].h() * data.images[0].w();
    for iter in 0..cfg.pretrain_iters {
        let batch = sample_indices(data.images.len(), cfg.batch_size, &mut rng);
        let mut grads = Gradients::zeros(3);
        let mut loss_sum = 0.0;
        for &idx in &batch {
            let (x, y) = augment(&data.images[idx], &data.labels[idx], &mut rng);
            let (probs, cache) = forward(&params, &x)?;
            let mut d_probs = vec![0.0; n_px * NUM_CLASSES];
            // Dice alone traps a freshly initialized softmax net in an
            // all-one-class state (the minority-class gradients die once the
            // majority saturates); the CE term keeps every class supervised.
            let loss = losses::dice_loss_grad(&probs, &y, None, weights.epsilon, &mut d_probs, 1.0)?
                + losses::ce_loss_grad(&probs, &y, None, &mut d_probs, 1.0)?;
            loss_sum += loss;
            grads.add_scaled(&backward(&params, &cache, &d_probs)?, 1.0);
        }
        if !loss_sum.is_finite() || !grads.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite pretraining loss at iteration {iter}"
            )));
        }
        sgd_step(&mut params, &grads, cfg.l_init)?;
        log.rows.push(RunLogRow {
            iter,
            lr: cfg.l_init,
            d: 0.0,
            lambda_k_mean: 0.0,
            l_s: loss_sum,
            l_t: 0.0,
            l_sty: 0.0,
            total: loss_sum,
            gamma_mean: 0.0,
        });

        let done = iter + 1 == cfg.pretrain_iters;
        if (iter + 1) % EVAL_EVERY_PRETRAIN == 0 || done {
            let report =
                metrics::evaluate(&params, manifest, source_domain, Split::Test, false)?;
            log.evals.push(EvalRow {
                iter: iter + 1,
                dice_od: report.dice_od,
                dice_oc: report.dice_oc,
            });
            let score = report.dice_mean();
            if best.as_ref().is_none_or(|(s, _)| score > *s) {
                best = Some((score, params.clone()));
            }
        }
    }
    let (_, chosen) = best.expect("at least one evaluation ran");
    Ok((chosen, log))
}

/// One quadruple's mixing mask; `blend` is set for the Mixup baseline, whose
/// images are convex-blended while labels and loss supports come from the
/// (all-zero) mask, i.e. from the dominant side.
#[derive(Debug, Clone)]
pub struct MixingMask {
    pub mask: DynamicMask,
    pub blend: Option<f64>,
}

/// Draws one mixing mask per the configured baseline.
pub fn mask_baseline(
    cfg: &TrainConfig,
    h: usize,
    w: usize,
    d_scheduled: f64,
    rng: &mut Rng,
) -> Result<MixingMask> {
    let interval = (cfg.lambda_k_lo, cfg.lambda_k_hi);
    match cfg.mask_baseline {
        MaskBaseline::Dynamic => Ok(MixingMask {
            mask: maskgen::generate_mask(h, w, d_scheduled, interval, rng)?,
            blend: None,
        }),
        MaskBaseline::StaticD => {
            let d = 0.5 * (cfg.d_min + cfg.d_max);
            Ok(MixingMask {
                mask: maskgen::generate_mask(h, w, d, interval, rng)?,
                blend: None,
            })
        }
        MaskBaseline::CutMix => {
            let lambda_k = rng.uniform_in(cfg.lambda_k_lo, cfg.lambda_k_hi);
            let side = lambda_k.sqrt();
            let rect_h = ((h as f64 * side) + 0.5).floor().max(1.0) as usize;
            let rect_w = ((w as f64 * side) + 0.5).floor().max(1.0) as usize;
            let r0 = rng.index(h - rect_h + 1);
            let c0 = rng.index(w - rect_w + 1);
            let mut bits = vec![0u8; h * w];
            for r in r0..r0 + rect_h {
                bits[r * w + c0..r * w + c0 + rect_w].fill(1);
            }
            Ok(MixingMask {
                mask: DynamicMask::from_parts(
                    BinaryMask::new(h, w, bits)?,
                    MaskMeta {
                        d: d_scheduled,
                        lambda_k,
                        seed: rng.seed(),
                    },
                ),
                blend: None,
            })
        }
        MaskBaseline::Mixup => {
            let lambda_k = rng.uniform_in(cfg.lambda_k_lo, cfg.lambda_k_hi);
            Ok(MixingMask {
                mask: DynamicMask::from_parts(
                    BinaryMask::zeros(h, w),
                    MaskMeta {
                        d: d_scheduled,
                        lambda_k,
                        seed: rng.seed(),
                    },
                ),
                blend: Some(lambda_k),
            })
        }
    }
}

/// Convex blend with `lambda` weight on the mask side of the direction.
fn blend_images(
    on_mask: &Image,
    off_mask: &Image,
    lambda: f64,
) -> Result<Image> {
    let data = on_mask
        .data()
        .iter()
        .zip(off_mask.data())
        .map(|(&a, &b)| lambda * a + (1.0 - lambda) * b)
        .collect();
    Image::new(on_mask.h(), on_mask.w(), on_mask.channels(), data)
}

/// Result of a full adaptation run.
#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub student: ScorerParams,
    pub teacher: ScorerParams,
    pub log: RunLog,
}

/// Runs the adaptation loop. See [`adapt_with`] for an observer hook.
pub fn adapt(
    cfg: &TrainConfig,
    manifest: &Manifest,
    source_domain: u32,
    target_domain: u32,
    init: &ScorerParams,
) -> Result<AdaptOutcome> {
    adapt_with(cfg, manifest, source_domain, target_domain, init, |_, _| {})
}

/// [`adapt`] with a per-iteration observer called with the student right
/// after each SGD step.
pub fn adapt_with(
    cfg: &TrainConfig,
    manifest: &Manifest,
    source_domain: u32,
    target_domain: u32,
    init: &ScorerParams,
    mut observer: impl FnMut(u64, &ScorerParams),
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    if cfg.variant == Variant::SourceOnly {
        return Ok(AdaptOutcome {
            student: init.clone(),
            teacher: init.clone(),
            log: RunLog::default(),
        });
    }
    let toggles = apply_variant(cfg.variant);
    let weights = cfg.loss_weights();
    let source = load_split(manifest, source_domain, Split::Train)?;
    let target = load_split(manifest, target_domain, Split::Train)?;
    let (h, w) = (source.images[0].h(), source.images[0].w());
    let n_px = h * w;
    let low_freq = LowFreqMask::new(h, w, cfg.beta)?;

    let mut student = init.clone();
    let mut teacher = init.clone();
    let mut rng = Rng::new(cfg.seed).split(NS_ADAPT);
    let mut log = RunLog::default();
    let b = cfg.batch_size;
    let n_quads = b / 2;

    for iter in 0..cfg.adapt_iters {
        let lr = poly_lr(&OptimState {
            l_init: cfg.l_init,
            total_iters: cfg.adapt_iters,
            iter,
            ema_alpha: cfg.ema_alpha,
        });
        let d_i = maskgen::schedule_d(iter, cfg.adapt_iters, cfg.d_min, cfg.d_max);

        // Batches; target labels exist in the synthetic data but are never
        // read here.
        let src_idx = sample_indices(source.images.len(), b, &mut rng);
        let mut src_x = Vec::with_capacity(b);
        let mut src_y = Vec::with_capacity(b);
        for &i in &src_idx {
            let (x, y) = augment(&source.images[i], &source.labels[i], &mut rng);
            src_x.push(x);
            src_y.push(y);
        }
        let tgt_idx = sample_indices(target.images.len(), b, &mut rng);
        let mut tgt_x = Vec::with_capacity(b);
        for &i in &tgt_idx {
            use crate::synthdata::SpatialTransform;
            let t = SpatialTransform::ALL[rng.index(SpatialTransform::ALL.len())];
            tgt_x.push(t.apply_image(&target.images[i]));
        }

        // Stylized target views.
        let batch_amp = match cfg.amp_mode {
            AmpMode::BatchAvg => Some(batch_mean_amplitude(&src_x)?),
            AmpMode::SingleImage => None,
        };
        let mut stylized = Vec::with_capacity(b);
        for m in 0..b {
            let amp = match &batch_amp {
                Some(a) => a.clone(),
                None => batch_mean_amplitude(std::slice::from_ref(&src_x[m]))?,
            };
            stylized.push(stylize_target(&tgt_x[m], &amp, &low_freq)?);
        }

        // Teacher pseudo labels from the stylized views.
        let mut teacher_labels: Vec<LabelMap> = Vec::new();
        if toggles.stylized_pathway {
            for view in &stylized {
                let (probs, _) = forward(&teacher, view)?;
                teacher_labels.push(argmax_label(&probs));
            }
        }

        // Student target views: raw targets, or stylized ones for the
        // cross-only variants.
        let views: &[Image] = if toggles.stylized_replaces_raw {
            &stylized
        } else {
            &tgt_x
        };
        let mut view_probs = Vec::with_capacity(b);
        let mut view_caches = Vec::with_capacity(b);
        let mut gammas = Vec::with_capacity(b);
        let mut hard_labels = Vec::with_capacity(b);
        for view in views {
            let (probs, cache) = forward(&student, view)?;
            gammas.push(losses::confidence_gamma(&probs));
            hard_labels.push(argmax_label(&probs));
            view_probs.push(probs);
            view_caches.push(cache);
        }

        let mut grads = Gradients::zeros(3);
        let mut view_grads = vec![vec![0.0f64; n_px * NUM_CLASSES]; b];
        // Losses sum over the batch's quadruples, matching the pretraining
        // reduction.
        let (mut l_s_sum, mut l_t_sum, mut l_sty_sum) = (0.0, 0.0, 0.0);
        let mut lambda_k_sum = 0.0;
        let mut masks_drawn = 0usize;

        for q in 0..n_quads {
            let (li, ki) = (2 * q, 2 * q + 1);

            if toggles.cross_pathway {
                // Pair members must be distinct; with-replacement sampling on
                // splits smaller than the batch could violate this.
                Quadruple {
                    i: src_idx[li],
                    j: src_idx[ki],
                    l: tgt_idx[li],
                    k: tgt_idx[ki],
                }
                .validate()?;

                let mixing = mask_baseline(cfg, h, w, d_i, &mut rng)?;
                lambda_k_sum += mixing.mask.meta().lambda_k;
                masks_drawn += 1;
                let mask_bits = mixing.mask.mask();
                let complement = mask_bits.complement();

                // Mixed images; labels always follow the binary mask.
                let x_il = match mixing.blend {
                    None => mixing::mix_images(
                        &src_x[li],
                        &views[li],
                        &mixing.mask,
                        MixDirection::SrcOnMask,
                    )?,
                    Some(lambda) => blend_images(&src_x[li], &views[li], lambda)?,
                };
                let (p_il, cache_il) = forward(&student, &x_il)?;
                let mut g_il = vec![0.0f64; n_px * NUM_CLASSES];

                if toggles.bidirectional {
                    let x_jk = match mixing.blend {
                        None => mixing::mix_images(
                            &src_x[ki],
                            &views[ki],
                            &mixing.mask,
                            MixDirection::TgtOnMask,
                        )?,
                        Some(lambda) => blend_images(&views[ki], &src_x[ki], lambda)?,
                    };
                    let (p_jk, cache_jk) = forward(&student, &x_jk)?;
                    let mut g_jk = vec![0.0f64; n_px * NUM_CLASSES];

                    let l_s = losses::l_source_grad(
                        &src_y[li],
                        &p_il,
                        &src_y[ki],
                        &p_jk,
                        mask_bits,
                        &weights,
                        Some((&mut g_il, &mut g_jk, cfg.lambda_s)),
                    )?;
                    let l_t = losses::l_target_grad(
                        &hard_labels[li],
                        &p_il,
                        gammas[li],
                        &hard_labels[ki],
                        &p_jk,
                        gammas[ki],
                        mask_bits,
                        &weights,
                        Some((&mut g_il, &mut g_jk, cfg.lambda_t)),
                    )?;
                    l_s_sum += l_s;
                    l_t_sum += l_t;
                    grads.add_scaled(&backward(&student, &cache_jk, &g_jk)?, 1.0);
                } else {
                    // Uni-directional: only the source-on-mask image exists;
                    // its source region supervises L_S, its target region,
                    // confidence-weighted, supervises L_T.
                    let l_s = losses::dice_ce_grad(
                        &p_il,
                        &src_y[li],
                        Some(mask_bits),
                        weights.epsilon,
                        Some((&mut g_il, cfg.lambda_s)),
                    )?;
                    let l_t = gammas[li]
                        * losses::dice_ce_grad(
                            &p_il,
                            &hard_labels[li],
                            Some(&complement),
                            weights.epsilon,
                            Some((&mut g_il, cfg.lambda_t * gammas[li])),
                        )?;
                    l_s_sum += l_s;
                    l_t_sum += l_t;
                }
                grads.add_scaled(&backward(&student, &cache_il, &g_il)?, 1.0);
            }

            if toggles.stylized_pathway {
                let (head, tail) = view_grads.split_at_mut(ki);
                let l_sty = losses::l_stylized_grad(
                    &teacher_labels[li],
                    &view_probs[li],
                    &teacher_labels[ki],
                    &view_probs[ki],
                    &weights,
                    Some((
                        &mut head[li],
                        &mut tail[0],
                        cfg.lambda_t_stylized,
                    )),
                )?;
                l_sty_sum += l_sty;
            }
        }

        if toggles.stylized_pathway {
            for m in 0..b {
                grads.add_scaled(&backward(&student, &view_caches[m], &view_grads[m])?, 1.0);
            }
        }

        let report = losses::total_loss(l_s_sum, l_t_sum, l_sty_sum, gammas.clone(), &weights);
        if !report.total.is_finite() || !grads.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite adaptation loss at iteration {iter}"
            )));
        }
        sgd_step(&mut student, &grads, lr)?;
        ema_update(&mut teacher, &student, cfg.ema_alpha)?;
        observer(iter, &student);

        log.rows.push(RunLogRow {
            iter,
            lr,
            d: d_i,
            lambda_k_mean: if masks_drawn > 0 {
                lambda_k_sum / masks_drawn as f64
            } else {
                0.0
            },
            l_s: l_s_sum,
            l_t: l_t_sum,
            l_sty: l_sty_sum,
            total: report.total,
            gamma_mean: gammas.iter().sum::<f64>() / b as f64,
        });

        let done = iter + 1 == cfg.adapt_iters;
        if (iter + 1) % EVAL_EVERY_ADAPT == 0 || done {
            let report =
                metrics::evaluate(&student, manifest, target_domain, Split::Test, false)?;
            log.evals.push(EvalRow {
                iter: iter + 1,
                dice_od: report.dice_od,
                dice_oc: report.dice_oc,
            });
        }
    }

    Ok(AdaptOutcome {
        student,
        teacher,
        log,
    })
}
