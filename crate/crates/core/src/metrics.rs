//! Evaluation: hole filling, Dice coefficient, 95th-percentile Hausdorff
//! distance, and the per-split evaluation loop.
//!
//! HD95 uses boundary pixels (foreground with a 4-neighbor outside the mask,
//! or on the image border), exact Euclidean distances via a two-pass squared
//! distance transform, and the linear-interpolation percentile at index
//! `p * (n - 1)`; the two directed percentiles are combined with max.

use std::path::Path;

use crate::model::{argmax_label, forward, ScorerParams};
use crate::synthdata::{Manifest, Split};
use crate::{BinaryMask, Error, Result};

/// Fills background cavities: background components not 4-connected to the
/// image border become foreground.
pub fn fill_holes(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = (mask.h(), mask.w());
    let mut reachable = vec![false; h * w];
    let mut stack = Vec::new();
    let push = |r: usize, c: usize, reachable: &mut Vec<bool>, stack: &mut Vec<usize>| {
        let i = r * w + c;
        if mask.bits()[i] == 0 && !reachable[i] {
            reachable[i] = true;
            stack.push(i);
        }
    };
    for c in 0..w {
        push(0, c, &mut reachable, &mut stack);
        push(h - 1, c, &mut reachable, &mut stack);
    }
    for r in 0..h {
        push(r, 0, &mut reachable, &mut stack);
        push(r, w - 1, &mut reachable, &mut stack);
    }
    while let Some(i) = stack.pop() {
        let (r, c) = (i / w, i % w);
        if r > 0 {
            push(r - 1, c, &mut reachable, &mut stack);
        }
        if r + 1 < h {
            push(r + 1, c, &mut reachable, &mut stack);
        }
        if c > 0 {
            push(r, c - 1, &mut reachable, &mut stack);
        }
        if c + 1 < w {
            push(r, c + 1, &mut reachable, &mut stack);
        }
    }
    let bits = mask
        .bits()
        .iter()
        .zip(&reachable)
        .map(|(&b, &reach)| if b == 1 || !reach { 1 } else { 0 })
        .collect();
    BinaryMask::new(h, w, bits).expect("bits stay binary")
}

/// Dice coefficient in percent: `100 * 2|A and B| / (|A| + |B|)`; two empty
/// masks count as perfect agreement.
pub fn dice_coeff(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.h() != b.h() || a.w() != b.w() {
        return Err(Error::DimensionMismatch(format!(
            "masks {}x{} vs {}x{}",
            a.h(),
            a.w(),
            b.h(),
            b.w()
        )));
    }
    let inter: usize = a
        .bits()
        .iter()
        .zip(b.bits())
        .filter(|(&x, &y)| x == 1 && y == 1)
        .count();
    let total = a.popcount() + b.popcount();
    if total == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * inter as f64 / total as f64)
}

/// Boundary pixels: foreground with a 4-neighbor outside the mask or sitting
/// on the image border.
fn boundary_pixels(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let (h, w) = (mask.h(), mask.w());
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) == 0 {
                continue;
            }
            let on_border = r == 0 || c == 0 || r == h - 1 || c == w - 1;
            let exposed = on_border
                || mask.get(r - 1, c) == 0
                || mask.get(r + 1, c) == 0
                || mask.get(r, c - 1) == 0
                || mask.get(r, c + 1) == 0;
            if exposed {
                out.push((r, c));
            }
        }
    }
    out
}

const EDT_INF: f64 = 1e20;

/// 1D lower envelope of parabolas (squared distance transform).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    v.push(0);
    z.push(f64::NEG_INFINITY);
    z.push(f64::INFINITY);
    for q in 1..n {
        let fq = f[q] + (q * q) as f64;
        loop {
            let p = *v.last().unwrap();
            let s = (fq - f[p] - (p * p) as f64) / (2 * q - 2 * p) as f64;
            if s <= *z.get(v.len() - 1).unwrap() {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.pop();
                z.push(s);
                z.push(f64::INFINITY);
                break;
            }
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate().take(n) {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}

/// Exact squared Euclidean distance from every grid cell to the nearest
/// site.
fn edt_2d(sites: &[bool], h: usize, w: usize) -> Vec<f64> {
    let mut dist = vec![EDT_INF; h * w];
    for (d, &s) in dist.iter_mut().zip(sites) {
        if s {
            *d = 0.0;
        }
    }
    let mut v = Vec::new();
    let mut z = Vec::new();
    // Columns first, then rows.
    let mut col_in = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    for c in 0..w {
        for r in 0..h {
            col_in[r] = dist[r * w + c];
        }
        edt_1d(&col_in, &mut col_out, &mut v, &mut z);
        for r in 0..h {
            dist[r * w + c] = col_out[r];
        }
    }
    let mut row_out = vec![0.0; w];
    for r in 0..h {
        edt_1d(&dist[r * w..(r + 1) * w], &mut row_out, &mut v, &mut z);
        dist[r * w..(r + 1) * w].copy_from_slice(&row_out);
    }
    dist
}

/// Linear-interpolation percentile at index `p * (n - 1)` of sorted data.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// 95th-percentile symmetric Hausdorff distance between the boundaries of
/// two nonempty masks, in pixels.
pub fn hd95(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.h() != b.h() || a.w() != b.w() {
        return Err(Error::DimensionMismatch(format!(
            "masks {}x{} vs {}x{}",
            a.h(),
            a.w(),
            b.h(),
            b.w()
        )));
    }
    if a.popcount() == 0 {
        return Err(Error::EmptyMask("first mask has no foreground"));
    }
    if b.popcount() == 0 {
        return Err(Error::EmptyMask("second mask has no foreground"));
    }
    let (h, w) = (a.h(), a.w());
    let ba = boundary_pixels(a);
    let bb = boundary_pixels(b);

    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| -> f64 {
        let mut sites = vec![false; h * w];
        for &(r, c) in to {
            sites[r * w + c] = true;
        }
        let dist_sq = edt_2d(&sites, h, w);
        let mut dists: Vec<f64> = from
            .iter()
            .map(|&(r, c)| dist_sq[r * w + c].sqrt())
            .collect();
        dists.sort_by(f64::total_cmp);
        percentile(&dists, 0.95)
    };

    Ok(directed(&ba, &bb).max(directed(&bb, &ba)))
}

/// Per-image metric row.
#[derive(Debug, Clone)]
pub struct PerImageMetrics {
    pub name: String,
    pub dice_od: f64,
    pub dice_oc: f64,
    pub hd95_od: Option<f64>,
    pub hd95_oc: Option<f64>,
}

impl PerImageMetrics {
    fn undefined(&self) -> bool {
        self.hd95_od.is_none() || self.hd95_oc.is_none()
    }
}

/// Split-level evaluation summary.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub dice_od: f64,
    pub dice_oc: f64,
    /// Mean over images where the distance was defined; None when it never
    /// was.
    pub hd95_od: Option<f64>,
    pub hd95_oc: Option<f64>,
    pub n_images: usize,
    /// Images excluded from at least one HD95 average because a mask was
    /// empty.
    pub undefined: usize,
    pub per_image: Vec<PerImageMetrics>,
}

impl MetricsReport {
    /// Mean of the OD and OC Dice percentages.
    pub fn dice_mean(&self) -> f64 {
        0.5 * (self.dice_od + self.dice_oc)
    }

    fn from_rows(per_image: Vec<PerImageMetrics>) -> MetricsReport {
        let n = per_image.len();
        let mean = |f: &dyn Fn(&PerImageMetrics) -> f64| -> f64 {
            per_image.iter().map(f).sum::<f64>() / n as f64
        };
        let mean_opt = |f: &dyn Fn(&PerImageMetrics) -> Option<f64>| -> Option<f64> {
            let vals: Vec<f64> = per_image.iter().filter_map(f).collect();
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        };
        MetricsReport {
            dice_od: mean(&|r| r.dice_od),
            dice_oc: mean(&|r| r.dice_oc),
            hd95_od: mean_opt(&|r| r.hd95_od),
            hd95_oc: mean_opt(&|r| r.hd95_oc),
            n_images: n,
            undefined: per_image.iter().filter(|r| r.undefined()).count(),
            per_image,
        }
    }

    /// CSV with header `scope,dice_od,dice_oc,hd95_od,hd95_oc,n,undefined`:
    /// one row per image plus a final `mean` row. Undefined distances are
    /// empty cells.
    pub fn to_csv(&self) -> String {
        let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from("scope,dice_od,dice_oc,hd95_od,hd95_oc,n,undefined\n");
        for row in &self.per_image {
            out.push_str(&format!(
                "{},{:.6},{:.6},{},{},1,{}\n",
                row.name,
                row.dice_od,
                row.dice_oc,
                fmt_opt(row.hd95_od),
                fmt_opt(row.hd95_oc),
                u8::from(row.undefined())
            ));
        }
        out.push_str(&format!(
            "mean,{:.6},{:.6},{},{},{},{}\n",
            self.dice_od,
            self.dice_oc,
            fmt_opt(self.hd95_od),
            fmt_opt(self.hd95_oc),
            self.n_images,
            self.undefined
        ));
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Evaluates a scorer on one domain/split of a manifest: forward, argmax,
/// derive OD/OC masks, optional hole filling, Dice and HD95 against ground
/// truth. Images whose predicted mask is empty are excluded from the HD95
/// averages and counted as undefined.
pub fn evaluate(
    params: &ScorerParams,
    manifest: &Manifest,
    domain: u32,
    split: Split,
    postprocess: bool,
) -> Result<MetricsReport> {
    let rows = manifest.select(domain, split);
    if rows.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut per_image = Vec::with_capacity(rows.len());
    for row in rows {
        let (image, truth) = manifest.load_pair(row)?;
        let (probs, _) = forward(params, &image)?;
        let pred = argmax_label(&probs);
        let mut pred_od = pred.od_mask();
        let mut pred_oc = pred.oc_mask();
        if postprocess {
            pred_od = fill_holes(&pred_od);
            pred_oc = fill_holes(&pred_oc);
        }
        let truth_od = truth.od_mask();
        let truth_oc = truth.oc_mask();
        let hd_of = |pred: &BinaryMask, truth: &BinaryMask| -> Result<Option<f64>> {
            match hd95(pred, truth) {
                Ok(v) => Ok(Some(v)),
                Err(Error::EmptyMask(_)) => Ok(None),
                Err(e) => Err(e),
            }
        };
        per_image.push(PerImageMetrics {
            name: row.image.display().to_string(),
            dice_od: dice_coeff(&pred_od, &truth_od)?,
            dice_oc: dice_coeff(&pred_oc, &truth_oc)?,
            hd95_od: hd_of(&pred_od, &truth_od)?,
            hd95_oc: hd_of(&pred_oc, &truth_oc)?,
        });
    }
    Ok(MetricsReport::from_rows(per_image))
}
