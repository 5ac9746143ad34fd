//! Majority-vote semantic labels for non-overlapping `P×P` patches.

use crate::error::{Error, Result};
use crate::synthdata::ParseMap;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchLabelGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
    /// Row-major, `rows * cols` entries.
    pub labels: Vec<u8>,
}

impl PatchLabelGrid {
    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.labels[r * self.cols + c]
    }

    /// The grid as a one-pixel-per-patch map, for writing as PGM.
    pub fn to_parse_map(&self) -> ParseMap {
        ParseMap {
            height: self.rows,
            width: self.cols,
            labels: self.labels.clone(),
        }
    }
}

/// Labels each patch with the most frequent class of its pixels; ties go to
/// the smallest class id.
pub fn label_patches(map: &ParseMap, patch_size: usize, num_classes: usize) -> Result<PatchLabelGrid> {
    let p = patch_size;
    if p == 0 || !map.height.is_multiple_of(p) || !map.width.is_multiple_of(p) {
        return Err(Error::InvalidArgument(format!(
            "{}x{} map is not divisible into {p}x{p} patches",
            map.height, map.width
        )));
    }
    map.validate(num_classes)?;
    let (rows, cols) = (map.height / p, map.width / p);
    let mut labels = Vec::with_capacity(rows * cols);
    let mut hist = vec![0usize; num_classes];
    for r in 0..rows {
        for c in 0..cols {
            hist.iter_mut().for_each(|h| *h = 0);
            for y in r * p..(r + 1) * p {
                let line = &map.labels[y * map.width + c * p..y * map.width + (c + 1) * p];
                for &l in line {
                    hist[l as usize] += 1;
                }
            }
            // strict `>` keeps the earliest (smallest) class on ties
            let mut best = 0;
            for k in 1..num_classes {
                if hist[k] > hist[best] {
                    best = k;
                }
            }
            labels.push(best as u8);
        }
    }
    Ok(PatchLabelGrid {
        rows,
        cols,
        patch_size: p,
        labels,
    })
}
