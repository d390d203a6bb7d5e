//! Index plumbing for patch extraction and grid spatial merging.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Grid of `rows x cols = cells` as close to square as possible, with
/// `rows <= cols`.
pub fn merge_grid(cells: usize) -> (usize, usize) {
    let mut rows = (cells as f64).sqrt().floor() as usize;
    while rows > 1 && cells % rows != 0 {
        rows -= 1;
    }
    (rows.max(1), cells / rows.max(1))
}

/// Averaging matrix `[cells x patches_y*patches_x]`: cell `(r, c)` covers
/// patch rows `floor(r*py/rows)..floor((r+1)*py/rows)` and likewise for
/// columns.
pub fn merge_matrix(cells: usize, patches_x: usize, patches_y: usize) -> Result<Vec<f64>> {
    let (rows, cols) = merge_grid(cells);
    if rows > patches_y || cols > patches_x {
        return Err(Error::InvalidSpec(format!(
            "{cells} merged tokens need a {rows}x{cols} grid but only {patches_x}x{patches_y} patches exist"
        )));
    }
    let n = patches_x * patches_y;
    let mut m = vec![0.0; cells * n];
    for r in 0..rows {
        let (y0, y1) = (r * patches_y / rows, (r + 1) * patches_y / rows);
        for c in 0..cols {
            let (x0, x1) = (c * patches_x / cols, (c + 1) * patches_x / cols);
            let cell = r * cols + c;
            let w = 1.0 / ((y1 - y0) * (x1 - x0)) as f64;
            for py in y0..y1 {
                for px in x0..x1 {
                    m[cell * n + py * patches_x + px] = w;
                }
            }
        }
    }
    Ok(m)
}

/// Flat gather indices turning a `[h*w x channels]` feature map into
/// `[(h/p)*(w/p) x p*p*channels]` non-overlapping patches, row-major within
/// each patch.
pub fn patch_indices(width: usize, height: usize, channels: usize, patch: usize) -> Result<Arc<[usize]>> {
    if patch == 0 || width % patch != 0 || height % patch != 0 {
        return Err(Error::IndivisibleResolution { width, height, patch });
    }
    let (px, py) = (width / patch, height / patch);
    let mut idx = Vec::with_capacity(width * height * channels);
    for by in 0..py {
        for bx in 0..px {
            for dy in 0..patch {
                for dx in 0..patch {
                    let pixel = (by * patch + dy) * width + bx * patch + dx;
                    idx.extend((0..channels).map(|c| pixel * channels + c));
                }
            }
        }
    }
    Ok(idx.into())
}
