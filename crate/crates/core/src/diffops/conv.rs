//! Volumetric convolution kernels (im2col + GEMM) with their adjoints.
//!
//! Feature maps are `[C, D, H, W]`. Convolutions use "same" padding
//! (`k / 2` on every side), so a stride-1 convolution preserves the grid and
//! a stride-2 convolution halves each even extent.

use super::tensor::{matmul, Real, Tensor};

pub fn conv_out_dim(extent: usize, kernel: usize, stride: usize) -> usize {
    let pad = kernel / 2;
    (extent + 2 * pad - kernel) / stride + 1
}

pub fn out_dims(dims: [usize; 3], kernel: usize, stride: usize) -> [usize; 3] {
    dims.map(|d| conv_out_dim(d, kernel, stride))
}

/// Rows are `(ci, kd, kh, kw)`, columns are output voxels.
pub fn im2col<T: Real>(x: &[T], channels: usize, dims: [usize; 3], kernel: usize, stride: usize, col: &mut [T]) {
    let [d, h, w] = dims;
    let [od, oh, ow] = out_dims(dims, kernel, stride);
    let pad = kernel as isize / 2;
    let out_plane = od * oh * ow;
    let k3 = kernel * kernel * kernel;
    debug_assert_eq!(col.len(), channels * k3 * out_plane);
    for ci in 0..channels {
        let src = &x[ci * d * h * w..(ci + 1) * d * h * w];
        for kd in 0..kernel {
            for kh in 0..kernel {
                for kw in 0..kernel {
                    let row = ci * k3 + (kd * kernel + kh) * kernel + kw;
                    let dst = &mut col[row * out_plane..(row + 1) * out_plane];
                    fill_row(src, dims, [od, oh, ow], [kd, kh, kw], pad, stride, dst);
                }
            }
        }
    }
    let _ = (h, w);
}

#[inline]
fn valid_range(offset: isize, stride: usize, extent: usize, out: usize) -> (usize, usize) {
    // output index o is valid when 0 <= o*stride + offset < extent
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let hi = if extent as isize - offset <= 0 {
        0
    } else {
        ((extent as isize - offset + s - 1) / s).min(out as isize)
    };
    (lo as usize, (hi.max(lo)) as usize)
}

#[allow(clippy::too_many_arguments)]
fn fill_row<T: Real>(
    src: &[T],
    dims: [usize; 3],
    out: [usize; 3],
    k: [usize; 3],
    pad: isize,
    stride: usize,
    dst: &mut [T],
) {
    let [_, h, w] = dims;
    let [od, oh, ow] = out;
    let offs = k.map(|v| v as isize - pad);
    let (d_lo, d_hi) = valid_range(offs[0], stride, dims[0], od);
    let (h_lo, h_hi) = valid_range(offs[1], stride, dims[1], oh);
    let (w_lo, w_hi) = valid_range(offs[2], stride, dims[2], ow);
    dst.fill(T::zero());
    for o_d in d_lo..d_hi {
        let i_d = (o_d * stride) as isize + offs[0];
        for o_h in h_lo..h_hi {
            let i_h = (o_h * stride) as isize + offs[1];
            let src_row = (i_d as usize * h + i_h as usize) * w;
            let dst_row = (o_d * oh + o_h) * ow;
            if stride == 1 {
                let i_w0 = (w_lo as isize + offs[2]) as usize;
                let n = w_hi - w_lo;
                dst[dst_row + w_lo..dst_row + w_hi].copy_from_slice(&src[src_row + i_w0..src_row + i_w0 + n]);
            } else {
                for o_w in w_lo..w_hi {
                    let i_w = ((o_w * stride) as isize + offs[2]) as usize;
                    dst[dst_row + o_w] = src[src_row + i_w];
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back onto the input grid.
pub fn col2im<T: Real>(col: &[T], channels: usize, dims: [usize; 3], kernel: usize, stride: usize, dx: &mut [T]) {
    let [d, h, w] = dims;
    let [od, oh, ow] = out_dims(dims, kernel, stride);
    let pad = kernel as isize / 2;
    let out_plane = od * oh * ow;
    let k3 = kernel * kernel * kernel;
    for ci in 0..channels {
        let dst = &mut dx[ci * d * h * w..(ci + 1) * d * h * w];
        for kd in 0..kernel {
            for kh in 0..kernel {
                for kw in 0..kernel {
                    let row = ci * k3 + (kd * kernel + kh) * kernel + kw;
                    let src = &col[row * out_plane..(row + 1) * out_plane];
                    let offs = [kd, kh, kw].map(|v| v as isize - pad);
                    let (d_lo, d_hi) = valid_range(offs[0], stride, d, od);
                    let (h_lo, h_hi) = valid_range(offs[1], stride, h, oh);
                    let (w_lo, w_hi) = valid_range(offs[2], stride, w, ow);
                    for o_d in d_lo..d_hi {
                        let i_d = ((o_d * stride) as isize + offs[0]) as usize;
                        for o_h in h_lo..h_hi {
                            let i_h = ((o_h * stride) as isize + offs[1]) as usize;
                            let dst_row = (i_d * h + i_h) * w;
                            let src_row = (o_d * oh + o_h) * ow;
                            for o_w in w_lo..w_hi {
                                let i_w = ((o_w * stride) as isize + offs[2]) as usize;
                                dst[dst_row + i_w] += src[src_row + o_w];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn spatial(t: &Tensor<impl Real>) -> [usize; 3] {
    let s = t.shape();
    [s[1], s[2], s[3]]
}

/// `x: [Cin, D, H, W]`, `w: [Cout, Cin, k, k, k]`, `b: [Cout]`.
pub fn conv3d_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, stride: usize) -> Tensor<T> {
    let cin = x.shape()[0];
    let dims = spatial(x);
    let cout = w.shape()[0];
    let k = w.shape()[2];
    let od = out_dims(dims, k, stride);
    let p_out: usize = od.iter().product();
    let rows = cin * k * k * k;
    let mut out = Tensor::zeros(&[cout, od[0], od[1], od[2]]);
    if let Some(b) = b {
        for (co, chunk) in out.data_mut().chunks_mut(p_out).enumerate() {
            chunk.fill(b.data()[co]);
        }
    }
    let beta = if b.is_some() { T::one() } else { T::zero() };
    if k == 1 && stride == 1 {
        matmul(false, false, cout, rows, p_out, T::one(), w.data(), x.data(), beta, out.data_mut());
    } else {
        let mut col = vec![T::zero(); rows * p_out];
        im2col(x.data(), cin, dims, k, stride, &mut col);
        matmul(false, false, cout, rows, p_out, T::one(), w.data(), &col, beta, out.data_mut());
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub fn conv3d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    need: [bool; 3],
) -> ConvGrads<T> {
    let cin = x.shape()[0];
    let dims = spatial(x);
    let cout = w.shape()[0];
    let k = w.shape()[2];
    let p_out = dy.plane();
    let rows = cin * k * k * k;
    let direct = k == 1 && stride == 1;
    let col = if need[1] && !direct {
        let mut col = vec![T::zero(); rows * p_out];
        im2col(x.data(), cin, dims, k, stride, &mut col);
        Some(col)
    } else {
        None
    };
    let dw = need[1].then(|| {
        let mut dw = Tensor::zeros(w.shape());
        let colref = col.as_deref().unwrap_or(x.data());
        matmul(false, true, cout, p_out, rows, T::one(), dy.data(), colref, T::zero(), dw.data_mut());
        dw
    });
    let dx = need[0].then(|| {
        let mut dx = Tensor::zeros(x.shape());
        if direct {
            matmul(true, false, rows, cout, p_out, T::one(), w.data(), dy.data(), T::zero(), dx.data_mut());
        } else {
            let mut dcol = col.unwrap_or_else(|| vec![T::zero(); rows * p_out]);
            matmul(true, false, rows, cout, p_out, T::one(), w.data(), dy.data(), T::zero(), &mut dcol);
            col2im(&dcol, cin, dims, k, stride, dx.data_mut());
        }
        dx
    });
    let db = need[2].then(|| channel_sums(dy));
    ConvGrads { dx, dw, db }
}

pub fn channel_sums<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let p = t.plane();
    Tensor::from_vec(
        &[t.channels()],
        t.data().chunks(p).map(|c| c.iter().copied().sum()).collect(),
    )
}

/// Transposed convolution, kernel 2 stride 2: `x: [Cin, D, H, W]`,
/// `w: [Cin, Cout, 2, 2, 2]`, output `[Cout, 2D, 2H, 2W]`.
pub fn conv_transpose3d_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Tensor<T> {
    let cin = x.shape()[0];
    let [d, h, wd] = spatial(x);
    let cout = w.shape()[1];
    let p_in = d * h * wd;
    let mut z = vec![T::zero(); cout * 8 * p_in];
    matmul(true, false, cout * 8, cin, p_in, T::one(), w.data(), x.data(), T::zero(), &mut z);
    let mut out = Tensor::zeros(&[cout, 2 * d, 2 * h, 2 * wd]);
    let (oh, ow) = (2 * h, 2 * wd);
    let o_plane = 8 * p_in;
    let out_data = out.data_mut();
    for co in 0..cout {
        let bias = b.map(|b| b.data()[co]).unwrap_or(T::zero());
        for tap in 0..8 {
            let (a, bb, c) = (tap >> 2, (tap >> 1) & 1, tap & 1);
            let zrow = &z[(co * 8 + tap) * p_in..(co * 8 + tap + 1) * p_in];
            for i_d in 0..d {
                for i_h in 0..h {
                    let base = co * o_plane + ((2 * i_d + a) * oh + 2 * i_h + bb) * ow + c;
                    let zbase = (i_d * h + i_h) * wd;
                    for i_w in 0..wd {
                        out_data[base + 2 * i_w] = zrow[zbase + i_w] + bias;
                    }
                }
            }
        }
    }
    out
}

pub fn conv_transpose3d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need: [bool; 3],
) -> ConvGrads<T> {
    let cin = x.shape()[0];
    let [d, h, wd] = spatial(x);
    let cout = w.shape()[1];
    let p_in = d * h * wd;
    let (oh, ow) = (2 * h, 2 * wd);
    let o_plane = 8 * p_in;
    let mut g = vec![T::zero(); cout * 8 * p_in];
    let dyd = dy.data();
    for co in 0..cout {
        for tap in 0..8 {
            let (a, bb, c) = (tap >> 2, (tap >> 1) & 1, tap & 1);
            let grow = &mut g[(co * 8 + tap) * p_in..(co * 8 + tap + 1) * p_in];
            for i_d in 0..d {
                for i_h in 0..h {
                    let base = co * o_plane + ((2 * i_d + a) * oh + 2 * i_h + bb) * ow + c;
                    let gbase = (i_d * h + i_h) * wd;
                    for i_w in 0..wd {
                        grow[gbase + i_w] = dyd[base + 2 * i_w];
                    }
                }
            }
        }
    }
    let dx = need[0].then(|| {
        let mut dx = Tensor::zeros(x.shape());
        matmul(false, false, cin, cout * 8, p_in, T::one(), w.data(), &g, T::zero(), dx.data_mut());
        dx
    });
    let dw = need[1].then(|| {
        let mut dw = Tensor::zeros(w.shape());
        matmul(false, true, cin, p_in, cout * 8, T::one(), x.data(), &g, T::zero(), dw.data_mut());
        dw
    });
    let db = need[2].then(|| channel_sums(dy));
    ConvGrads { dx, dw, db }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Direct seven-loop convolution.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize) -> Tensor<f64> {
        let (cin, d, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let pad = (k / 2) as isize;
        let od = out_dims([d, h, wd], k, stride);
        let mut out = Tensor::zeros(&[cout, od[0], od[1], od[2]]);
        for co in 0..cout {
            for a in 0..od[0] {
                for b in 0..od[1] {
                    for c in 0..od[2] {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for kd in 0..k {
                                for kh in 0..k {
                                    for kw in 0..k {
                                        let i = (a * stride + kd) as isize - pad;
                                        let j = (b * stride + kh) as isize - pad;
                                        let l = (c * stride + kw) as isize - pad;
                                        if i < 0 || j < 0 || l < 0 || i >= d as isize || j >= h as isize || l >= wd as isize {
                                            continue;
                                        }
                                        let xv = x.data()[((ci * d + i as usize) * h + j as usize) * wd + l as usize];
                                        let wv = w.data()[(((co * cin + ci) * k + kd) * k + kh) * k + kw];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        out.data_mut()[((co * od[0] + a) * od[1] + b) * od[2] + c] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn gemm_conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, s) in &[(3, 1), (3, 2), (1, 1)] {
            let x = random(&[3, 4, 6, 5], &mut rng);
            let w = random(&[2, 3, k, k, k], &mut rng);
            let fast = conv3d_forward(&x, &w, None, s);
            let slow = naive_conv(&x, &w, s);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[2, 5, 4, 3], &mut rng);
        let mut w = Tensor::zeros(&[2, 2, 3, 3, 3]);
        for c in 0..2 {
            w.data_mut()[(c * 2 + c) * 27 + 13] = 1.0;
        }
        let y = conv3d_forward(&x, &w, None, 1);
        assert_eq!(y, x);
    }

    #[test]
    fn stride_two_halves_even_extents() {
        assert_eq!(out_dims([32, 16, 8], 3, 2), [16, 8, 4]);
        assert_eq!(out_dims([32, 16, 8], 3, 1), [32, 16, 8]);
        assert_eq!(out_dims([7, 7, 7], 1, 1), [7, 7, 7]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &s in &[1usize, 2] {
            let dims = [4, 5, 6];
            let x = random(&[2, 4, 5, 6], &mut rng);
            let od = out_dims(dims, 3, s);
            let n = 2 * 27 * od.iter().product::<usize>();
            let c: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut col = vec![0.0; n];
            im2col(x.data(), 2, dims, 3, s, &mut col);
            let lhs: f64 = col.iter().zip(&c).map(|(a, b)| a * b).sum();
            let mut back = vec![0.0; x.numel()];
            col2im(&c, 2, dims, 3, s, &mut back);
            let rhs: f64 = x.data().iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn transposed_conv_places_taps() {
        // one input voxel, one channel: output block equals kernel taps + bias
        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]);
        let w = Tensor::from_vec(&[1, 1, 2, 2, 2], (0..8).map(|v| v as f64).collect());
        let b = Tensor::from_vec(&[1], vec![0.5]);
        let y = conv_transpose3d_forward(&x, &w, Some(&b));
        assert_eq!(y.shape(), &[1, 2, 2, 2]);
        let expect: Vec<f64> = (0..8).map(|v| 2.0 * v as f64 + 0.5).collect();
        assert_eq!(y.data(), &expect[..]);
    }
}
