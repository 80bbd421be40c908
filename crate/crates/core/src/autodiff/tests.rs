use rand::Rng;

use super::*;
use crate::rng::seeded;

fn random(shape: &[usize], seed: u64) -> Vec<f64> {
    let mut rng = seeded(seed);
    (0..numel(shape)).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn weighted_sum(y: &Tensor, seed: u64) -> Result<Tensor> {
    let w = Tensor::from_vec(random(y.shape(), seed), y.shape())?;
    Ok(y.mul(&w)?.reduce_sum())
}

#[test]
fn softmax_rows_sum_to_one() {
    let x = Tensor::from_vec(random(&[3, 7], 1).iter().map(|v| v * 30.0).collect(), &[3, 7]).unwrap();
    let y = x.softmax(1).unwrap();
    for row in y.data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
    let y0 = x.softmax(0).unwrap();
    for j in 0..7 {
        let s: f64 = (0..3).map(|i| y0.data()[i * 7 + j]).sum();
        assert!((s - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn matmul_identity() {
    let a = Tensor::from_vec(random(&[4, 5], 2), &[4, 5]).unwrap();
    let mut eye = vec![0.0; 16];
    for i in 0..4 {
        eye[i * 5] = 1.0;
    }
    let eye = Tensor::from_vec(eye, &[4, 4]).unwrap();
    assert_eq!(eye.matmul(&a).unwrap().data(), a.data());
}

#[test]
fn matmul_rejects_bad_shapes() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[4, 2]);
    assert!(matches!(a.matmul(&b), Err(TensorError::ShapeMismatch { .. })));
}

#[test]
fn matmul_nt_matches_explicit_transpose() {
    let a = Tensor::from_vec(random(&[2, 3, 4], 3), &[2, 3, 4]).unwrap();
    let b = Tensor::from_vec(random(&[2, 5, 4], 4), &[2, 5, 4]).unwrap();
    let direct = a.matmul_nt(&b).unwrap();
    let explicit = a.matmul(&b.transpose(1, 2).unwrap()).unwrap();
    for (x, y) in direct.data().iter().zip(explicit.data()) {
        assert!((x - y).abs() < 1e-14);
    }
}

/// Direct quadruple loop, independent of the im2col path.
fn conv_oracle(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let [n, c, h, wd] = xs;
    let [o, _, kh, kw] = ws;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for bi in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b[oc];
                    for ci in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xo * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x[((bi * c + ci) * h + iy as usize) * wd + ix as usize]
                                    * w[((oc * c + ci) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((bi * o + oc) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_quadruple_loop() {
    let xs = [2, 3, 5, 5];
    let ws = [4, 3, 3, 3];
    let x = random(&xs, 5);
    let w = random(&ws, 6);
    let b = random(&[4], 7);
    for (stride, pad) in [(1, 1), (2, 0), (2, 1)] {
        let spec = Conv2dSpec {
            stride: (stride, stride),
            padding: (pad, pad),
        };
        let got = Tensor::from_vec(x.clone(), &xs)
            .unwrap()
            .conv2d(
                &Tensor::from_vec(w.clone(), &ws).unwrap(),
                Some(&Tensor::from_vec(b.clone(), &[4]).unwrap()),
                spec,
            )
            .unwrap();
        let want = conv_oracle(&x, xs, &w, ws, &b, stride, pad);
        assert_eq!(got.numel(), want.len());
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12, "{g} vs {w}");
        }
    }
}

#[test]
fn backward_of_sum_is_ones() {
    let x = Tensor::param(random(&[3, 2], 8), &[3, 2]).unwrap();
    x.reduce_sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
}

#[test]
fn backward_of_square_is_two_x() {
    let x = Tensor::param(random(&[5], 9), &[5]).unwrap();
    x.mul(&x).unwrap().reduce_sum().backward().unwrap();
    let g = x.grad().unwrap();
    for (gi, xi) in g.iter().zip(x.data()) {
        assert!((gi - 2.0 * xi).abs() < 1e-15);
    }
}

#[test]
fn gradients_accumulate_across_calls() {
    let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
    x.reduce_sum().backward().unwrap();
    x.scale(3.0).reduce_sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![4.0, 4.0]);
    x.zero_grad();
    assert!(x.grad().is_none());
}

#[test]
fn backward_needs_scalar() {
    let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
    assert!(matches!(x.scale(2.0).backward(), Err(TensorError::NotScalar(_))));
}

#[test]
fn linear_function_gradcheck_is_exact() {
    let x = Tensor::from_vec(random(&[4, 3], 10), &[4, 3]).unwrap();
    let err = finite_diff_check(|t| weighted_sum(t, 11), &x, 1e-5).unwrap();
    assert!(err <= 1e-9, "{err}");
}

#[test]
fn broadcast_add_and_mul_gradients() {
    let b = Tensor::from_vec(random(&[3], 12), &[3]).unwrap();
    let x = Tensor::from_vec(random(&[2, 4, 3], 13), &[2, 4, 3]).unwrap();
    let err = finite_diff_check(|t| weighted_sum(&x.mul(t)?.add(t)?, 14), &b, 1e-5).unwrap();
    assert!(err <= 1e-4, "{err}");
    let col = Tensor::from_vec(random(&[2, 1, 3], 15), &[2, 1, 3]).unwrap();
    let err = finite_diff_check(|t| weighted_sum(&x.sub(t)?, 16), &col, 1e-5).unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn layer_norm_gradcheck() {
    let x = Tensor::from_vec(random(&[3, 6], 17), &[3, 6]).unwrap();
    let gamma = Tensor::from_vec(random(&[6], 18), &[6]).unwrap();
    let beta = Tensor::from_vec(random(&[6], 19), &[6]).unwrap();
    let err = finite_diff_check(|t| weighted_sum(&t.layer_norm(1, &gamma, &beta, 1e-12)?, 20), &x, 1e-5).unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn dropout_is_deterministic_and_identity_in_eval() {
    let x = Tensor::from_vec(random(&[50], 21), &[50]).unwrap();
    let a = x.dropout(0.3, 5, true).unwrap();
    let b = x.dropout(0.3, 5, true).unwrap();
    assert_eq!(a.data(), b.data());
    assert!(a.data().iter().any(|&v| v == 0.0));
    assert_eq!(x.dropout(0.3, 5, false).unwrap().data(), x.data());
}

#[test]
fn max_pool_ceil_mode_keeps_partial_window() {
    let x = Tensor::from_vec((0..15).map(f64::from).collect(), &[1, 5, 3]).unwrap();
    let y = x
        .max_pool2d(PoolSpec {
            kernel: (2, 2),
            stride: (2, 2),
            ceil_mode: true,
        })
        .unwrap();
    assert_eq!(y.shape(), &[1, 3, 2]);
    assert_eq!(y.data(), &[4.0, 5.0, 10.0, 11.0, 13.0, 14.0]);
}

#[test]
fn no_graph_without_params() {
    let x = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap();
    let y = x.exp().reduce_sum();
    assert!(!y.requires_grad());
    y.backward().unwrap();
}

#[test]
fn log_is_floored() {
    let x = Tensor::from_vec(vec![0.0, -1.0], &[2]).unwrap();
    assert!(x.log().data().iter().all(|v| v.is_finite()));
}
