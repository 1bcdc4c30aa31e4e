//! Non-overlapping patches over `(freq, time)` mel frames.

use semvoc_grad::Array;

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub freq_patches: usize,
    pub time_patches: usize,
    pub freq_extent: usize,
    pub time_extent: usize,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.freq_patches * self.time_patches
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_size(&self) -> usize {
        self.freq_extent * self.time_extent
    }
}

/// Splits `(F, T)` into patches ordered time-major, frequency inner, each
/// flattened row-major. Ragged edges are right-padded with `pad_value`.
pub fn patchify(mel: &Array, extent: (usize, usize), pad_value: f64) -> Result<(Array, PatchGrid)> {
    let (pf, pt) = extent;
    if pf == 0 || pt == 0 {
        return Err(Error::Config(format!("patch extents must be positive, got {pf}x{pt}")));
    }
    let s = mel.shape();
    if s.len() != 2 {
        return Err(Error::Shape(format!("patchify expects (freq, time), got {s:?}")));
    }
    let (f, t) = (s[0], s[1]);
    let grid = PatchGrid { freq_patches: f.div_ceil(pf), time_patches: t.div_ceil(pt), freq_extent: pf, time_extent: pt };
    let mut out = Vec::with_capacity(grid.len() * grid.patch_size());
    for ti in 0..grid.time_patches {
        for fi in 0..grid.freq_patches {
            for df in 0..pf {
                for dt in 0..pt {
                    let (ff, tt) = (fi * pf + df, ti * pt + dt);
                    out.push(if ff < f && tt < t { mel.data()[ff * t + tt] } else { pad_value });
                }
            }
        }
    }
    Ok((Array::new(vec![grid.len(), grid.patch_size()], out), grid))
}

/// Inverse of [`patchify`] on the padded extent `(freq_patches*pf, time_patches*pt)`.
pub fn unpatchify(patches: &Array, grid: &PatchGrid) -> Result<Array> {
    if patches.shape() != [grid.len(), grid.patch_size()] {
        return Err(Error::Shape(format!("patches {:?} do not match grid {grid:?}", patches.shape())));
    }
    let (pf, pt) = (grid.freq_extent, grid.time_extent);
    let (f, t) = (grid.freq_patches * pf, grid.time_patches * pt);
    let mut out = vec![0.0; f * t];
    for (p, patch) in patches.data().chunks(pf * pt).enumerate() {
        let (ti, fi) = (p / grid.freq_patches, p % grid.freq_patches);
        for df in 0..pf {
            for dt in 0..pt {
                out[(fi * pf + df) * t + ti * pt + dt] = patch[df * pt + dt];
            }
        }
    }
    Ok(Array::new(vec![f, t], out))
}
