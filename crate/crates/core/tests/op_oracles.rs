//! Independent brute-force oracles for the tensor ops.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unetmm::ops::{conv2d, pixel_shuffle, pixel_unshuffle, ConvGeometry};
use unetmm::{Shape, Tape, Tensor};

fn random(rng: &mut ChaCha8Rng, s: Shape) -> Tensor {
    Tensor::from_vec(s, (0..s.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

struct Case {
    x: Shape,
    out_c: usize,
    k: usize,
    geom: ConvGeometry,
}

/// Direct six-loop convolution in f64, returning the output and the
/// gradients of `sum(out * r)` with respect to input and weight.
fn naive(c: &Case, x: &Tensor, w: &Tensor, r: &[f32]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Shape) {
    let g = c.geom;
    let oh = (c.x.h + 2 * g.padding - c.k) / g.stride + 1;
    let ow = (c.x.w + 2 * g.padding - c.k) / g.stride + 1;
    let os = Shape::new(c.x.n, c.out_c, oh, ow).unwrap();
    let ipg = c.x.c / g.groups;
    let opg = c.out_c / g.groups;
    let mut out = vec![0.0f64; os.numel()];
    let mut gx = vec![0.0f64; x.numel()];
    let mut gw = vec![0.0f64; w.numel()];
    for n in 0..c.x.n {
        for oc in 0..c.out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = os.index(n, oc, oy, ox);
                    for icg in 0..ipg {
                        let ic = (oc / opg) * ipg + icg;
                        for ky in 0..c.k {
                            for kx in 0..c.k {
                                let iy = (oy * g.stride + ky) as i64 - g.padding as i64;
                                let ix = (ox * g.stride + kx) as i64 - g.padding as i64;
                                if iy < 0 || ix < 0 || iy >= c.x.h as i64 || ix >= c.x.w as i64 {
                                    continue;
                                }
                                let xi = c.x.index(n, ic, iy as usize, ix as usize);
                                let wi = ((oc * ipg + icg) * c.k + ky) * c.k + kx;
                                out[o] += x.data()[xi] as f64 * w.data()[wi] as f64;
                                gx[xi] += r[o] as f64 * w.data()[wi] as f64;
                                gw[wi] += r[o] as f64 * x.data()[xi] as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    (out, gx, gw, os)
}

#[test]
fn conv2d_matches_naive_loops() {
    let cases = [
        Case { x: Shape::new(2, 3, 7, 5).unwrap(), out_c: 4, k: 3, geom: ConvGeometry::same(3) },
        Case {
            x: Shape::new(1, 4, 8, 8).unwrap(),
            out_c: 6,
            k: 3,
            geom: ConvGeometry { stride: 2, padding: 1, groups: 2 },
        },
        Case {
            x: Shape::new(1, 5, 9, 9).unwrap(),
            out_c: 5,
            k: 7,
            geom: ConvGeometry { stride: 1, padding: 3, groups: 5 },
        },
        Case { x: Shape::new(2, 6, 4, 4).unwrap(), out_c: 9, k: 1, geom: ConvGeometry::POINTWISE },
        Case {
            x: Shape::new(1, 2, 6, 6).unwrap(),
            out_c: 3,
            k: 3,
            geom: ConvGeometry { stride: 1, padding: 0, groups: 1 },
        },
        Case {
            x: Shape::new(1, 2, 5, 7).unwrap(),
            out_c: 2,
            k: 3,
            geom: ConvGeometry { stride: 3, padding: 2, groups: 1 },
        },
        Case { x: Shape::new(1, 8, 5, 5).unwrap(), out_c: 7, k: 5, geom: ConvGeometry::same(5) },
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for c in &cases {
        let ws = Shape::new(c.out_c, c.x.c / c.geom.groups, c.k, c.k).unwrap();
        let (x, w) = (random(&mut rng, c.x), random(&mut rng, ws));
        let tape = Tape::new();
        let (xv, wv) = (tape.leaf(x.clone().with_requires_grad(true)), tape.leaf(w.clone().with_requires_grad(true)));
        let y = conv2d(xv, wv, None, c.geom).unwrap();
        let r: Vec<f32> = (0..y.shape().numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (out, gx, gw, os) = naive(c, &x, &w, &r);
        assert_eq!(y.shape(), os);
        let grads = tape.backward_from(y, &r).unwrap();
        let close = |a: &[f32], b: &[f64], what: &str| {
            for (i, (a, b)) in a.iter().zip(b).enumerate() {
                assert!((*a as f64 - b).abs() < 1e-4, "{what}[{i}]: {a} vs {b} for {}", c.x);
            }
        };
        close(y.value().data(), &out, "out");
        close(grads.wrt(xv).unwrap().data(), &gx, "grad x");
        close(grads.wrt(wv).unwrap().data(), &gw, "grad w");
    }
}

#[test]
fn shuffle_round_trip_is_exact_for_every_factor() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for r in [1usize, 2, 4, 8] {
        for (n, c, hb, wb) in [(1, 1, 1, 1), (2, 3, 2, 1), (1, 2, 1, 3)] {
            let x = random(&mut rng, Shape::new(n, c, hb * r, wb * r).unwrap());
            let tape = Tape::new();
            let down = pixel_unshuffle(tape.constant(x.clone()), r).unwrap();
            assert_eq!(down.shape(), Shape::new(n, c * r * r, hb, wb).unwrap());
            let back = pixel_shuffle(down, r).unwrap();
            assert_eq!(back.value().data(), x.data());

            let y = random(&mut rng, Shape::new(n, c * r * r, hb, wb).unwrap());
            let up = pixel_shuffle(tape.constant(y.clone()), r).unwrap();
            assert_eq!(pixel_unshuffle(up, r).unwrap().value().data(), y.data());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn unshuffle_is_a_permutation(n in 1usize..3, c in 1usize..4, hb in 1usize..4, wb in 1usize..4, r in prop::sample::select(vec![1usize, 2, 3, 4])) {
        let s = Shape::new(n, c, hb * r, wb * r).unwrap();
        let x = Tensor::from_vec(s, (0..s.numel()).map(|i| i as f32).collect()).unwrap();
        let tape = Tape::new();
        let y = pixel_unshuffle(tape.constant(x), r).unwrap().value();
        let mut seen: Vec<f32> = y.data().to_vec();
        seen.sort_by(|a, b| a.total_cmp(b));
        prop_assert!(seen.iter().enumerate().all(|(i, v)| *v == i as f32));
        // out[b][c*r^2 + dy*r + dx][y][x] = in[b][c][y*r + dy][x*r + dx]
        for b in 0..n {
            for ch in 0..c {
                for dy in 0..r {
                    for dx in 0..r {
                        for yy in 0..hb {
                            for xx in 0..wb {
                                let v = y.at(b, ch * r * r + dy * r + dx, yy, xx);
                                prop_assert_eq!(v, s.index(b, ch, yy * r + dy, xx * r + dx) as f32);
                            }
                        }
                    }
                }
            }
        }
    }
}
