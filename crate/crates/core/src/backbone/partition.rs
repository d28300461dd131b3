//! Window layouts for multi-axis attention.
//!
//! Both layouts turn a batched NCHW map into `[groups, P*P, C]` token
//! windows. Block windows are contiguous `P x P` tiles (local mixing); grid
//! windows take a `P x P` lattice with stride `H/P` (global, dilated mixing).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WindowLayout {
    Block,
    Grid,
}

impl WindowLayout {
    pub fn as_str(self) -> &'static str {
        match self {
            WindowLayout::Block => "block",
            WindowLayout::Grid => "grid",
        }
    }
}

/// Flat NCHW source index of every `[groups, P*P, C]` output slot.
pub fn partition_indices(layout: WindowLayout, n: usize, c: usize, h: usize, w: usize, p: usize) -> Result<Vec<usize>> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape("partition", format!("window {p} does not divide {h}x{w}")));
    }
    let (gh, gw) = (h / p, w / p);
    let mut idx = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for wy in 0..gh {
            for wx in 0..gw {
                for ty in 0..p {
                    for tx in 0..p {
                        let (y, x) = match layout {
                            WindowLayout::Block => (wy * p + ty, wx * p + tx),
                            WindowLayout::Grid => (ty * gh + wy, tx * gw + wx),
                        };
                        for ch in 0..c {
                            idx.push(((b * c + ch) * h + y) * w + x);
                        }
                    }
                }
            }
        }
    }
    Ok(idx)
}

/// Inverse permutation of [`partition_indices`]: window slot of every NCHW position.
pub fn unpartition_indices(layout: WindowLayout, n: usize, c: usize, h: usize, w: usize, p: usize) -> Result<Vec<usize>> {
    let fwd = partition_indices(layout, n, c, h, w, p)?;
    let mut inv = vec![0; fwd.len()];
    for (slot, &src) in fwd.iter().enumerate() {
        inv[src] = slot;
    }
    Ok(inv)
}

fn apply<T: Scalar>(x: &Tensor<T>, idx: &[usize], shape: &[usize]) -> Tensor<T> {
    let d = x.data();
    Tensor::from_fn(shape, |i| d[idx[i]])
}

/// `C x H x W` map to `[(H/P)(W/P), P*P, C]` windows.
pub fn window_partition<T: Scalar>(x: &Tensor<T>, layout: WindowLayout, p: usize) -> Result<Tensor<T>> {
    let (c, h, w) = match x.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::shape("partition", format!("expected C x H x W, got {s:?}"))),
    };
    let idx = partition_indices(layout, 1, c, h, w, p)?;
    Ok(apply(x, &idx, &[(h / p) * (w / p), p * p, c]))
}

/// Inverse of [`window_partition`].
pub fn window_unpartition<T: Scalar>(windows: &Tensor<T>, layout: WindowLayout, c: usize, h: usize, w: usize, p: usize) -> Result<Tensor<T>> {
    if windows.numel() != c * h * w {
        return Err(Error::shape("unpartition", format!("{:?} does not hold {c}x{h}x{w}", windows.shape())));
    }
    let idx = unpartition_indices(layout, 1, c, h, w, p)?;
    Ok(apply(windows, &idx, &[c, h, w]))
}

pub fn block_partition<T: Scalar>(x: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    window_partition(x, WindowLayout::Block, p)
}

pub fn block_unpartition<T: Scalar>(windows: &Tensor<T>, c: usize, h: usize, w: usize, p: usize) -> Result<Tensor<T>> {
    window_unpartition(windows, WindowLayout::Block, c, h, w, p)
}

pub fn grid_partition<T: Scalar>(x: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    window_partition(x, WindowLayout::Grid, p)
}

pub fn grid_unpartition<T: Scalar>(windows: &Tensor<T>, c: usize, h: usize, w: usize, p: usize) -> Result<Tensor<T>> {
    window_unpartition(windows, WindowLayout::Grid, c, h, w, p)
}

/// Index into a `[heads, (2P-1)^2]` relative-position table for every
/// `(head, query, key)` triple of a `P x P` window.
pub fn relative_position_indices(p: usize, heads: usize) -> Vec<usize> {
    let span = 2 * p - 1;
    let t = p * p;
    let mut idx = Vec::with_capacity(heads * t * t);
    for h in 0..heads {
        for i in 0..t {
            let (yi, xi) = (i / p, i % p);
            for j in 0..t {
                let (yj, xj) = (j / p, j % p);
                let rel = (yi + p - 1 - yj) * span + (xi + p - 1 - xj);
                idx.push(h * span * span + rel);
            }
        }
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iota(c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(&[c, h, w], |i| i as f64)
    }

    #[test]
    fn first_block_window_is_top_left_tile() {
        let x = iota(1, 4, 4);
        let win = block_partition(&x, 2).unwrap();
        assert_eq!(win.shape(), &[4, 4, 1]);
        // positions (0,0),(0,1),(1,0),(1,1) of a 4-wide map
        assert_eq!(&win.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
    }

    #[test]
    fn first_grid_window_is_dilated() {
        let x = iota(1, 4, 4);
        let win = grid_partition(&x, 2).unwrap();
        // positions (0,0),(0,2),(2,0),(2,2)
        assert_eq!(&win.data()[..4], &[0.0, 2.0, 8.0, 10.0]);
    }

    #[test]
    fn single_window_is_flattened_input() {
        let x = iota(3, 2, 2);
        let win = block_partition(&x, 2).unwrap();
        assert_eq!(win.shape(), &[1, 4, 3]);
        // token-major, channel-minor
        for t in 0..4 {
            for c in 0..3 {
                assert_eq!(win.data()[t * 3 + c], x.data()[c * 4 + t]);
            }
        }
    }

    #[test]
    fn round_trips() {
        let x = iota(3, 6, 4);
        for layout in [WindowLayout::Block, WindowLayout::Grid] {
            let win = window_partition(&x, layout, 2).unwrap();
            assert_eq!(window_unpartition(&win, layout, 3, 6, 4, 2).unwrap(), x);
        }
    }

    #[test]
    fn layouts_cover_the_same_pixels() {
        let x = iota(2, 4, 8);
        let mut a = block_partition(&x, 2).unwrap().into_data();
        let mut b = grid_partition(&x, 2).unwrap().into_data();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
    }

    #[test]
    fn indivisible_rejected() {
        assert!(block_partition(&iota(1, 5, 4), 2).is_err());
    }

    #[test]
    fn relative_index_center_for_self_pairs() {
        let idx = relative_position_indices(2, 1);
        // (2P-1)^2 = 9 offsets; a token paired with itself uses the center offset 4
        for i in 0..4 {
            assert_eq!(idx[i * 4 + i], 4);
        }
        assert!(idx.iter().all(|&v| v < 9));
    }
}
