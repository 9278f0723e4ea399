//! Pixel shuffle and unshuffle.
//!
//! Index convention: `unshuffled[b][c*r*r + dy*r + dx][y][x] = x[b][c][y*r + dy][x*r + dx]`.
//! Shuffle is the exact inverse.

use crate::error::{Error, Result};
use crate::tape::{Backward, BackwardCtx, Var};
use crate::tensor::{Shape, Tensor};

/// Moves values from `src` (fine layout, shape `fine`) to the coarse layout or back.
fn permute(src: &[f32], fine: Shape, r: usize, to_coarse: bool) -> Vec<f32> {
    let (oh, ow) = (fine.h / r, fine.w / r);
    let coarse = Shape { n: fine.n, c: fine.c * r * r, h: oh, w: ow };
    let mut dst = vec![0.0f32; src.len()];
    for n in 0..fine.n {
        for c in 0..fine.c {
            for dy in 0..r {
                for dx in 0..r {
                    let cc = c * r * r + dy * r + dx;
                    for y in 0..oh {
                        for x in 0..ow {
                            let fi = fine.index(n, c, y * r + dy, x * r + dx);
                            let ci = coarse.index(n, cc, y, x);
                            if to_coarse {
                                dst[ci] = src[fi];
                            } else {
                                dst[fi] = src[ci];
                            }
                        }
                    }
                }
            }
        }
    }
    dst
}

struct ShuffleBackward {
    fine: Shape,
    r: usize,
    unshuffle: bool,
}

impl Backward for ShuffleBackward {
    fn name(&self) -> &'static str {
        if self.unshuffle {
            "pixel_unshuffle"
        } else {
            "pixel_shuffle"
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Vec<f32>>>> {
        // the adjoint of a permutation is its inverse
        Ok(vec![Some(permute(ctx.grad_out, self.fine, self.r, !self.unshuffle))])
    }
}

/// Space-to-channel: (n, c, h, w) -> (n, c*r*r, h/r, w/r).
pub fn pixel_unshuffle(x: Var<'_>, r: usize) -> Result<Var<'_>> {
    let xv = x.value();
    let s = xv.shape();
    if r == 0 || !s.h.is_multiple_of(r) || !s.w.is_multiple_of(r) {
        return Err(Error::shape(format!("pixel_unshuffle: {s} not divisible by stride {r}")));
    }
    let out_shape = Shape::new(s.n, s.c * r * r, s.h / r, s.w / r)?;
    let out = Tensor::from_vec(out_shape, permute(xv.data(), s, r, true))?;
    Ok(x.tape().record(out, &[x], ShuffleBackward { fine: s, r, unshuffle: true }))
}

/// Channel-to-space: (n, c, h, w) -> (n, c/(r*r), h*r, w*r).
pub fn pixel_shuffle(x: Var<'_>, r: usize) -> Result<Var<'_>> {
    let xv = x.value();
    let s = xv.shape();
    if r == 0 || !s.c.is_multiple_of(r * r) {
        return Err(Error::shape(format!("pixel_shuffle: {} channels not divisible by {}", s.c, r * r)));
    }
    let fine = Shape::new(s.n, s.c / (r * r), s.h * r, s.w * r)?;
    let out = Tensor::from_vec(fine, permute(xv.data(), fine, r, false))?;
    Ok(x.tape().record(out, &[x], ShuffleBackward { fine, r, unshuffle: false }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    fn ramp(shape: Shape) -> Tensor {
        Tensor::from_vec(shape, (0..shape.numel()).map(|v| v as f32).collect()).unwrap()
    }

    #[test]
    fn unshuffle_index_map() {
        let tape = Tape::new();
        let s = Shape::new(1, 1, 4, 4).unwrap();
        let x = tape.constant(ramp(s));
        let y = pixel_unshuffle(x, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 4, 2, 2).unwrap());
        // channel dy*2+dx holds the (dy,dx) sub-grid
        assert_eq!(y.value().data(), &[0., 2., 8., 10., 1., 3., 9., 11., 4., 6., 12., 14., 5., 7., 13., 15.]);
    }

    #[test]
    fn stride_one_is_identity() {
        let tape = Tape::new();
        let x = tape.constant(ramp(Shape::new(2, 3, 2, 2).unwrap()));
        assert_eq!(pixel_unshuffle(x, 1).unwrap().value().data(), x.value().data());
        assert_eq!(pixel_shuffle(x, 1).unwrap().value().data(), x.value().data());
    }

    #[test]
    fn large_shuffle_shape() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(Shape::new(1, 256, 32, 32).unwrap()));
        assert_eq!(pixel_shuffle(x, 8).unwrap().shape(), Shape::new(1, 4, 256, 256).unwrap());
    }

    #[test]
    fn indivisible_extents_fail() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(Shape::new(1, 3, 6, 6).unwrap()));
        assert!(matches!(pixel_unshuffle(x, 4), Err(Error::Shape(_))));
        assert!(matches!(pixel_shuffle(x, 2), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_is_inverse_permutation() {
        let tape = Tape::new();
        let s = Shape::new(1, 2, 4, 4).unwrap();
        let x = tape.leaf(Tensor::zeros(s).with_requires_grad(true));
        let y = pixel_unshuffle(x, 2).unwrap();
        let seed: Vec<f32> = (0..32).map(|v| v as f32).collect();
        let g = tape.backward_from(y, &seed).unwrap().wrt(x).unwrap();
        let tape2 = Tape::new();
        let back = pixel_shuffle(tape2.constant(Tensor::from_vec(y.shape(), seed).unwrap()), 2).unwrap();
        assert_eq!(g.data(), back.value().data());
    }
}
