//! Non-overlapping window partitioning and the token/image layouts used
//! inside a window.

use crate::autodiff::{Tape, Var};
use crate::error::ShapeError;
use crate::tensor::{Scalar, Shape, Tensor};

use super::gather::gather_kernel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowGrid {
    pub window: usize,
    pub rows: usize,
    pub cols: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl WindowGrid {
    pub fn count(&self) -> usize {
        self.rows * self.cols
    }
}

fn grid_of(s: Shape, m: usize) -> Result<(usize, usize), ShapeError> {
    if m == 0 || s.h % m != 0 || s.w % m != 0 {
        return Err(ShapeError::invalid(
            "window_partition",
            format!("{}x{} not divisible by window {m}", s.h, s.w),
        ));
    }
    Ok((s.h / m, s.w / m))
}

/// Source index for every element of the partitioned (n·N, 1, M², c) layout.
fn partition_map(s: Shape, m: usize) -> Result<(Shape, Vec<usize>), ShapeError> {
    let (rows, cols) = grid_of(s, m)?;
    let out = Shape::new(s.n * rows * cols, 1, m * m, s.c);
    let mut map = Vec::with_capacity(out.numel());
    for n in 0..s.n {
        for wy in 0..rows {
            for wx in 0..cols {
                for ty in 0..m {
                    for tx in 0..m {
                        let (y, x) = (wy * m + ty, wx * m + tx);
                        map.extend((0..s.c).map(|c| s.index(n, c, y, x)));
                    }
                }
            }
        }
    }
    Ok((out, map))
}

fn reverse_map(tokens: Shape, n: usize, h: usize, w: usize, m: usize) -> Result<(Shape, Vec<usize>), ShapeError> {
    let c = tokens.w;
    let out = Shape::new(n, c, h, w);
    let (rows, cols) = grid_of(out, m)?;
    if tokens != Shape::new(n * rows * cols, 1, m * m, c) {
        return Err(ShapeError::Mismatch {
            op: "window_reverse",
            lhs: tokens.dims(),
            rhs: [n * rows * cols, 1, m * m, c],
        });
    }
    let mut map = Vec::with_capacity(out.numel());
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let win = (b * rows + y / m) * cols + x / m;
                    let tok = (y % m) * m + x % m;
                    map.push((win * m * m + tok) * c + ch);
                }
            }
        }
    }
    Ok((out, map))
}

/// (n, c, h, w) → (n·N, 1, M², c): one row of tokens per window, windows in
/// row-major order.
pub fn window_partition<T: Scalar>(x: &Tensor<T>, m: usize) -> Result<Tensor<T>, ShapeError> {
    let (shape, map) = partition_map(x.shape(), m)?;
    Ok(gather_kernel(x, shape, &map))
}

/// Inverse of [`window_partition`] for an (n, c, h, w) target.
pub fn window_reverse<T: Scalar>(
    tokens: &Tensor<T>,
    n: usize,
    h: usize,
    w: usize,
    m: usize,
) -> Result<Tensor<T>, ShapeError> {
    let (shape, map) = reverse_map(tokens.shape(), n, h, w, m)?;
    Ok(gather_kernel(tokens, shape, &map))
}

/// (B, 1, M², c) tokens → (B, c, M, M) images.
fn tokens_to_image_map(s: Shape, m: usize) -> Result<(Shape, Vec<usize>), ShapeError> {
    if s.c != 1 || s.h != m * m {
        return Err(ShapeError::invalid("tokens_to_image", format!("bad token shape {:?}", s.dims())));
    }
    let out = Shape::new(s.n, s.w, m, m);
    let mut map = Vec::with_capacity(out.numel());
    for b in 0..s.n {
        for ch in 0..s.w {
            map.extend((0..m * m).map(|t| (b * m * m + t) * s.w + ch));
        }
    }
    Ok((out, map))
}

fn image_to_tokens_map(s: Shape) -> (Shape, Vec<usize>) {
    let out = Shape::new(s.n, 1, s.h * s.w, s.c);
    let mut map = Vec::with_capacity(out.numel());
    for b in 0..s.n {
        for t in 0..s.plane() {
            map.extend((0..s.c).map(|ch| (b * s.c + ch) * s.plane() + t));
        }
    }
    (out, map)
}

/// Index into a (2M−1)² relative-position table for every (query, key) pair
/// of an M×M window.
pub fn relative_position_index(m: usize) -> Vec<usize> {
    let span = 2 * m - 1;
    let mut idx = Vec::with_capacity(m.pow(4));
    for qy in 0..m {
        for qx in 0..m {
            for ky in 0..m {
                for kx in 0..m {
                    let dy = qy + m - 1 - ky;
                    let dx = qx + m - 1 - kx;
                    idx.push(dy * span + dx);
                }
            }
        }
    }
    idx
}

impl<T: Scalar> Tape<T> {
    pub fn window_partition(&mut self, x: &Var<T>, m: usize) -> Result<Var<T>, ShapeError> {
        let (shape, map) = partition_map(x.shape(), m)?;
        Ok(self.gather("window_partition", x, shape, map))
    }

    pub fn window_reverse(
        &mut self,
        tokens: &Var<T>,
        n: usize,
        h: usize,
        w: usize,
        m: usize,
    ) -> Result<Var<T>, ShapeError> {
        let (shape, map) = reverse_map(tokens.shape(), n, h, w, m)?;
        Ok(self.gather("window_reverse", tokens, shape, map))
    }

    pub fn tokens_to_image(&mut self, tokens: &Var<T>, m: usize) -> Result<Var<T>, ShapeError> {
        let (shape, map) = tokens_to_image_map(tokens.shape(), m)?;
        Ok(self.gather("tokens_to_image", tokens, shape, map))
    }

    pub fn image_to_tokens(&mut self, img: &Var<T>) -> Var<T> {
        let (shape, map) = image_to_tokens_map(img.shape());
        self.gather("image_to_tokens", img, shape, map)
    }

    /// Expand a (1,1,1,(2M−1)²) table into a (1,1,M²,M²) logit bias.
    pub fn relative_bias(&mut self, table: &Var<T>, m: usize) -> Result<Var<T>, ShapeError> {
        let span = 2 * m - 1;
        if table.shape() != Shape::matrix(1, span * span) {
            return Err(ShapeError::Mismatch {
                op: "relative_bias",
                lhs: table.shape().dims(),
                rhs: [1, 1, 1, span * span],
            });
        }
        let shape = Shape::matrix(m * m, m * m);
        Ok(self.gather("relative_bias", table, shape, relative_position_index(m)))
    }
}
