//! Inpainting inside full levels: each mask is filled by running a model on
//! the 16-wide window centred on it, and the prediction is stitched back.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{TileAlphabet, TileGrid, LEVEL_HEIGHT};
use crate::dataset::{encode, DatasetError, EncodedVolume, MaskRect};
use crate::models::{InpaintItem, Inpainter, ModelError};
use crate::scalar::Scalar;

/// Model input width.
pub const WINDOW_WIDTH: usize = 16;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("mask is {width} tiles wide, windows hold at most {max}")]
    MaskTooWide { width: usize, max: usize },
    #[error("mask {mask:?} lies outside the {height}x{width} level")]
    OutOfBounds { mask: MaskRect, height: usize, width: usize },
    #[error("level is {height}x{width}; inpainting needs {expected} rows and at least {window} columns")]
    BadLevel {
        height: usize,
        width: usize,
        expected: usize,
        window: usize,
    },
    #[error("model returned a fragment for {found:?}, expected {expected:?}")]
    WrongFragment { expected: MaskRect, found: MaskRect },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed plan: {0}")]
    Json(#[from] serde_json::Error),
}

/// Replayable record of an augmentation session. Masks use full-level
/// coordinates of the 16-row padded grid and are applied in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentPlan {
    pub level_id: String,
    pub masks: Vec<MaskRect>,
    pub model_id: String,
    pub seed: u64,
}

impl AugmentPlan {
    pub fn load(path: &Path) -> Result<Self, AugmentError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }
}

/// Checks `mask` against the level and returns the first column of its window.
pub fn window_start(level_height: usize, level_width: usize, mask: &MaskRect) -> Result<usize, AugmentError> {
    if mask.width > WINDOW_WIDTH {
        return Err(AugmentError::MaskTooWide {
            width: mask.width,
            max: WINDOW_WIDTH,
        });
    }
    if level_height != LEVEL_HEIGHT || level_width < WINDOW_WIDTH {
        return Err(AugmentError::BadLevel {
            height: level_height,
            width: level_width,
            expected: LEVEL_HEIGHT,
            window: WINDOW_WIDTH,
        });
    }
    if mask.area() == 0 || !mask.fits(level_height, level_width) {
        return Err(AugmentError::OutOfBounds {
            mask: *mask,
            height: level_height,
            width: level_width,
        });
    }
    let centred = (mask.col + mask.width / 2).saturating_sub(WINDOW_WIDTH / 2);
    Ok(centred.min(level_width - WINDOW_WIDTH))
}

/// The encoded window around `mask` with the mask erased, and the mask in
/// window coordinates.
pub fn window_for_mask<T: Scalar>(
    level: &TileGrid,
    alphabet: &TileAlphabet,
    mask: &MaskRect,
) -> Result<(EncodedVolume<T>, MaskRect, usize), AugmentError> {
    let start = window_start(level.height(), level.width(), mask)?;
    let mut window = encode::<T>(&level.columns(start, WINDOW_WIDTH), alphabet)?;
    let local = MaskRect::new(mask.row, mask.col - start, mask.height, mask.width);
    window.erase(&local);
    Ok((window, local, start))
}

/// Seed handed to the model for the `index`-th mask of a plan.
pub fn mask_seed(plan_seed: u64, index: usize) -> u64 {
    plan_seed.wrapping_add((index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Fills each mask in order; later masks see earlier predictions.
pub fn apply_plan<T: Scalar>(
    level: &TileGrid,
    alphabet: &TileAlphabet,
    plan: &AugmentPlan,
    model: &dyn Inpainter<T>,
) -> Result<TileGrid, AugmentError> {
    for mask in &plan.masks {
        window_start(level.height(), level.width(), mask)?;
    }
    let mut out = level.clone();
    for (i, mask) in plan.masks.iter().enumerate() {
        let (window, local, start) = window_for_mask::<T>(&out, alphabet, mask)?;
        let item = InpaintItem {
            input: &window,
            mask: local,
            seed: mask_seed(plan.seed, i),
        };
        let frag = model.inpaint_items(&[item])?.remove(0);
        if frag.mask != local || frag.cells.len() != local.area() {
            return Err(AugmentError::WrongFragment {
                expected: local,
                found: frag.mask,
            });
        }
        frag.write_into(&mut out, 0, start);
    }
    Ok(out)
}

/// Bottom-anchored `height x width` masks ranked by how few tiles other than
/// sky and ground they cover; ties go to the leftmost. Returned masks do not
/// overlap.
pub fn suggest_low_structure_regions(
    level: &TileGrid,
    alphabet: &TileAlphabet,
    count: usize,
    height: usize,
    width: usize,
) -> Vec<MaskRect> {
    if width == 0 || height == 0 || level.width() < width || level.height() < height {
        return Vec::new();
    }
    let sky = alphabet.sky_symbol();
    let ground = alphabet.ground_symbol();
    let row = level.height() - height;
    let mut candidates: Vec<(usize, MaskRect)> = (0..=level.width() - width)
        .map(|col| {
            let m = MaskRect::new(row, col, height, width);
            let busy = m
                .cells()
                .filter(|&(r, c)| {
                    let s = level.get(r, c);
                    s != sky && Some(s) != ground
                })
                .count();
            (busy, m)
        })
        .collect();
    candidates.sort_by_key(|&(busy, m)| (busy, m.col));
    let mut chosen: Vec<MaskRect> = Vec::new();
    for (_, m) in candidates {
        if chosen.len() == count {
            break;
        }
        if chosen.iter().all(|c| !c.overlaps(&m)) {
            chosen.push(m);
        }
    }
    chosen
}
