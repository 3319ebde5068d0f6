//! Directional unfold/refold between feature grids and token sequences.
//!
//! The six directions are forward/backward raster traversals with x-, y-,
//! and z-major order. Direction indices: 0 x-forward, 1 x-backward,
//! 2 y-forward, 3 y-backward, 4 z-forward, 5 z-backward. A config's
//! `scan_directions` takes the first 2, 4, or 6 of these.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScanError {
    #[error("unknown scan direction {0} (valid: 0..6)")]
    UnknownDirection(usize),
}

pub const MAX_DIRECTIONS: usize = 6;

/// Voxel visit order for one direction: `order[t]` is the flat spatial index
/// (x fastest: `x + H*(y + W*z)`) of the t-th token.
pub fn direction_order(
    dims: (usize, usize, usize),
    direction: usize,
) -> Result<Vec<usize>, ScanError> {
    let (h, w, d) = dims;
    let flat = |x: usize, y: usize, z: usize| x + h * (y + w * z);
    let mut order = Vec::with_capacity(h * w * d);
    match direction / 2 {
        0 => {
            for z in 0..d {
                for y in 0..w {
                    for x in 0..h {
                        order.push(flat(x, y, z));
                    }
                }
            }
        }
        1 => {
            for z in 0..d {
                for x in 0..h {
                    for y in 0..w {
                        order.push(flat(x, y, z));
                    }
                }
            }
        }
        2 => {
            for y in 0..w {
                for x in 0..h {
                    for z in 0..d {
                        order.push(flat(x, y, z));
                    }
                }
            }
        }
        _ => return Err(ScanError::UnknownDirection(direction)),
    }
    if direction % 2 == 1 {
        order.reverse();
    }
    Ok(order)
}

/// Gather permutation taking features `[C, D, W, H]` to tokens `[C, T]`.
pub fn unfold_perm(
    channels: usize,
    dims: (usize, usize, usize),
    direction: usize,
) -> Result<Vec<usize>, ScanError> {
    let order = direction_order(dims, direction)?;
    let v = order.len();
    let mut perm = Vec::with_capacity(channels * v);
    for c in 0..channels {
        for &vox in &order {
            perm.push(c * v + vox);
        }
    }
    Ok(perm)
}

/// Gather permutation taking tokens `[C, T]` back to features `[C, D, W, H]`;
/// exact inverse of [`unfold_perm`] for the same direction.
pub fn refold_perm(
    channels: usize,
    dims: (usize, usize, usize),
    direction: usize,
) -> Result<Vec<usize>, ScanError> {
    let order = direction_order(dims, direction)?;
    let v = order.len();
    let mut rank = vec![0usize; v];
    for (t, &vox) in order.iter().enumerate() {
        rank[vox] = t;
    }
    let mut perm = Vec::with_capacity(channels * v);
    for c in 0..channels {
        for &r in &rank {
            perm.push(c * v + r);
        }
    }
    Ok(perm)
}
