//! Structured neural-network operations on NCHW tensors.
//!
//! Each operation has a plain kernel usable on bare tensors and a tape
//! method that records its backward pass. Spatial padding is reflective
//! throughout: it keeps constant images constant, which several invariants
//! rely on.

mod conv;
mod gather;
mod norm;
mod resample;
mod window;

pub use conv::{conv2d, ConvSpec};
#[cfg(test)]
pub(crate) use conv::conv2d_naive;
pub use norm::{gelu_scalar, layer_norm, LN_EPS};
pub use resample::{
    crop, grid_multiple, pad_to_grid, pixel_shuffle, pixel_unshuffle, pool_half, upsample2x, PoolMode,
    UpsampleMode,
};
pub use window::{relative_position_index, window_partition, window_reverse, WindowGrid};

/// Reflect an index into `[0, n)` without repeating the edge sample
/// (`-1 -> 1`, `n -> n - 2`). A length-1 axis maps everything to 0.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n <= 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

#[cfg(test)]
mod tests {
    use super::reflect_index;

    #[test]
    fn reflect_examples() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(6, 5), 2);
        assert_eq!(reflect_index(3, 5), 3);
        assert_eq!(reflect_index(-1, 1), 0);
        assert_eq!(reflect_index(-1, 2), 1);
        assert_eq!(reflect_index(2, 2), 0);
    }
}
