//! Bi-directional cross-domain copy-paste under a dynamic mask.
//!
//! One mask drives both directions of a quadruple (two source images, two
//! target images): the first mixed image takes source content where the mask
//! is 1, the second takes target content there. Labels are spliced
//! categorically under the same mask, so image and label provenance agree at
//! every pixel.

use crate::maskgen::DynamicMask;
use crate::{Error, Image, LabelMap, Result};

/// Which operand owns the mask's 1-region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixDirection {
    /// Output = src where mask is 1, tgt elsewhere.
    SrcOnMask,
    /// Output = tgt where mask is 1, src elsewhere.
    TgtOnMask,
}

/// Indices of the quadruple members inside their batches: sources (i, j),
/// targets (l, k).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Quadruple {
    pub i: usize,
    pub j: usize,
    pub l: usize,
    pub k: usize,
}

impl Quadruple {
    pub fn validate(&self) -> Result<()> {
        if self.i == self.j || self.l == self.k {
            return Err(Error::InvalidPairing);
        }
        Ok(())
    }
}

/// The two mixed images of a quadruple, their spliced pseudo labels, the
/// shared mask, and where each member came from.
#[derive(Debug, Clone)]
pub struct MixedPair {
    pub x_src_on_mask: Image,
    pub x_tgt_on_mask: Image,
    pub y_src_on_mask: LabelMap,
    pub y_tgt_on_mask: LabelMap,
    pub mask: DynamicMask,
    pub provenance: Quadruple,
}

fn check_mask_dims(h: usize, w: usize, mask: &DynamicMask) -> Result<()> {
    if mask.h() != h || mask.w() != w {
        return Err(Error::DimensionMismatch(format!(
            "mask {}x{} does not match {}x{}",
            mask.h(),
            mask.w(),
            h,
            w
        )));
    }
    Ok(())
}

/// Pixel-exact splice of two images under a binary mask, broadcasting the
/// mask across channels. Selection, not interpolation: every output value is
/// copied bit-exactly from one operand.
pub fn mix_images(
    x_src: &Image,
    x_tgt: &Image,
    mask: &DynamicMask,
    direction: MixDirection,
) -> Result<Image> {
    if !x_src.same_dims(x_tgt) {
        return Err(Error::DimensionMismatch(
            "mix operands must share dimensions".into(),
        ));
    }
    let (h, w, c) = (x_src.h(), x_src.w(), x_src.channels());
    check_mask_dims(h, w, mask)?;
    let mut data = Vec::with_capacity(h * w * c);
    for r in 0..h {
        for col in 0..w {
            let take_src = match direction {
                MixDirection::SrcOnMask => mask.get(r, col) == 1,
                MixDirection::TgtOnMask => mask.get(r, col) == 0,
            };
            let from = if take_src { x_src } else { x_tgt };
            for ch in 0..c {
                data.push(from.get(r, col, ch));
            }
        }
    }
    Image::new(h, w, c, data)
}

/// Categorical splice of two label maps under the same mask semantics as
/// [`mix_images`].
pub fn mix_labels(
    y_src: &LabelMap,
    y_tgt: &LabelMap,
    mask: &DynamicMask,
    direction: MixDirection,
) -> Result<LabelMap> {
    if y_src.h() != y_tgt.h() || y_src.w() != y_tgt.w() {
        return Err(Error::DimensionMismatch(
            "label operands must share dimensions".into(),
        ));
    }
    let (h, w) = (y_src.h(), y_src.w());
    check_mask_dims(h, w, mask)?;
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        for col in 0..w {
            let take_src = match direction {
                MixDirection::SrcOnMask => mask.get(r, col) == 1,
                MixDirection::TgtOnMask => mask.get(r, col) == 0,
            };
            data.push(if take_src {
                y_src.get(r, col)
            } else {
                y_tgt.get(r, col)
            });
        }
    }
    LabelMap::new(h, w, data)
}

/// Builds both mixed images of a quadruple from one mask:
/// source i over target l (source on the 1-region) and target k over source
/// j (target on the 1-region), with pseudo labels spliced the same way.
#[allow(clippy::too_many_arguments)]
pub fn make_mixed_pair(
    x_i_src: &Image,
    y_i_src: &LabelMap,
    x_j_src: &Image,
    y_j_src: &LabelMap,
    x_l_tgt: &Image,
    p_l_tgt: &LabelMap,
    x_k_tgt: &Image,
    p_k_tgt: &LabelMap,
    mask: &DynamicMask,
    provenance: Quadruple,
) -> Result<MixedPair> {
    provenance.validate()?;
    let x_src_on_mask = mix_images(x_i_src, x_l_tgt, mask, MixDirection::SrcOnMask)?;
    let y_src_on_mask = mix_labels(y_i_src, p_l_tgt, mask, MixDirection::SrcOnMask)?;
    let x_tgt_on_mask = mix_images(x_j_src, x_k_tgt, mask, MixDirection::TgtOnMask)?;
    let y_tgt_on_mask = mix_labels(y_j_src, p_k_tgt, mask, MixDirection::TgtOnMask)?;
    Ok(MixedPair {
        x_src_on_mask,
        x_tgt_on_mask,
        y_src_on_mask,
        y_tgt_on_mask,
        mask: mask.clone(),
        provenance,
    })
}
