//! Forward kernels and their adjoints for single-image tensors.

use rayon::prelude::*;

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_len(&self, len: usize) -> usize {
        (len + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Output positions `o` whose input index `o·s + k − p` lies in `[0, len)`.
    #[inline]
    fn valid_range(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.pad as isize);
        let k = k as isize;
        let lo = (p - k).max(0);
        let lo = (lo + s - 1) / s;
        let hi_num = len as isize - 1 + p - k;
        let hi = if hi_num < 0 { 0 } else { hi_num / s + 1 };
        (lo as usize, (hi.max(lo) as usize).min(out_len).max(lo as usize))
    }
}

/// `out[oc] = bias[oc] + Σ_ic w[oc, ic] ⋆ x[ic]`, weights `[out, in, k, k]`.
pub fn conv2d(x: &Tensor, weight: &[f64], bias: &[f64], out_ch: usize, g: ConvGeometry) -> Tensor {
    let (ih, iw) = (x.height, x.width);
    let (oh, ow) = (g.out_len(ih), g.out_len(iw));
    let k = g.kernel;
    let in_ch = x.channels;
    let mut out = Tensor::zeros(out_ch, oh, ow);
    out.data
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(oc, plane)| {
            plane.fill(bias[oc]);
            for ic in 0..in_ch {
                let src = x.plane(ic);
                for ky in 0..k {
                    let (oy0, oy1) = g.valid_range(ky, ih, oh);
                    for kx in 0..k {
                        let wv = weight[((oc * in_ch + ic) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox0, ox1) = g.valid_range(kx, iw, ow);
                        if ox0 >= ox1 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let row = &src[iy * iw..(iy + 1) * iw];
                            let dst = &mut plane[oy * ow..(oy + 1) * ow];
                            if g.stride == 1 {
                                let ix0 = ox0 + kx - g.pad;
                                let n = ox1 - ox0;
                                for (d, s) in dst[ox0..ox1].iter_mut().zip(&row[ix0..ix0 + n]) {
                                    *d += wv * s;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    dst[ox] += wv * row[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &[f64],
    grad_out: &Tensor,
    g: ConvGeometry,
    need_input: bool,
) -> (Option<Tensor>, Vec<f64>, Vec<f64>) {
    let (ih, iw) = (x.height, x.width);
    let (oh, ow) = (grad_out.height, grad_out.width);
    let k = g.kernel;
    let in_ch = x.channels;
    let out_ch = grad_out.channels;

    let grad_bias: Vec<f64> = (0..out_ch).map(|oc| grad_out.plane(oc).iter().sum()).collect();

    let mut grad_weight = vec![0.0; weight.len()];
    grad_weight
        .par_chunks_mut(in_ch * k * k)
        .enumerate()
        .for_each(|(oc, gw)| {
            let go = grad_out.plane(oc);
            for ic in 0..in_ch {
                let src = x.plane(ic);
                for ky in 0..k {
                    let (oy0, oy1) = g.valid_range(ky, ih, oh);
                    for kx in 0..k {
                        let (ox0, ox1) = g.valid_range(kx, iw, ow);
                        let mut acc = 0.0;
                        if ox0 < ox1 {
                            for oy in oy0..oy1 {
                                let iy = oy * g.stride + ky - g.pad;
                                let row = &src[iy * iw..(iy + 1) * iw];
                                let grow = &go[oy * ow..(oy + 1) * ow];
                                if g.stride == 1 {
                                    let ix0 = ox0 + kx - g.pad;
                                    acc += grow[ox0..ox1]
                                        .iter()
                                        .zip(&row[ix0..ix0 + (ox1 - ox0)])
                                        .map(|(a, b)| a * b)
                                        .sum::<f64>();
                                } else {
                                    for ox in ox0..ox1 {
                                        acc += grow[ox] * row[ox * g.stride + kx - g.pad];
                                    }
                                }
                            }
                        }
                        gw[(ic * k + ky) * k + kx] = acc;
                    }
                }
            }
        });

    let grad_input = need_input.then(|| {
        let mut gi = Tensor::zeros(in_ch, ih, iw);
        gi.data
            .par_chunks_mut(ih * iw)
            .enumerate()
            .for_each(|(ic, plane)| {
                for oc in 0..out_ch {
                    let go = grad_out.plane(oc);
                    for ky in 0..k {
                        let (oy0, oy1) = g.valid_range(ky, ih, oh);
                        for kx in 0..k {
                            let wv = weight[((oc * in_ch + ic) * k + ky) * k + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let (ox0, ox1) = g.valid_range(kx, iw, ow);
                            if ox0 >= ox1 {
                                continue;
                            }
                            for oy in oy0..oy1 {
                                let iy = oy * g.stride + ky - g.pad;
                                let dst = &mut plane[iy * iw..(iy + 1) * iw];
                                let grow = &go[oy * ow..(oy + 1) * ow];
                                if g.stride == 1 {
                                    let ix0 = ox0 + kx - g.pad;
                                    let n = ox1 - ox0;
                                    for (d, s) in dst[ix0..ix0 + n].iter_mut().zip(&grow[ox0..ox1]) {
                                        *d += wv * s;
                                    }
                                } else {
                                    for ox in ox0..ox1 {
                                        dst[ox * g.stride + kx - g.pad] += wv * grow[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            });
        gi
    });

    (grad_input, grad_weight, grad_bias)
}

/// 2×2, stride-2 max pooling with ceil-mode output size. Returns the
/// pooled tensor and the flat input index of each maximum.
pub fn maxpool2(x: &Tensor) -> (Tensor, Vec<usize>) {
    let (oh, ow) = (x.height.div_ceil(2), x.width.div_ceil(2));
    let mut out = Tensor::zeros(x.channels, oh, ow);
    let mut arg = vec![0usize; x.channels * oh * ow];
    for c in 0..x.channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let (iy, ix) = (2 * oy + dy, 2 * ox + dx);
                        if iy < x.height && ix < x.width {
                            let i = x.index(c, iy, ix);
                            if x.data[i] > best {
                                best = x.data[i];
                                best_i = i;
                            }
                        }
                    }
                }
                let o = out.index(c, oy, ox);
                out.data[o] = best;
                arg[o] = best_i;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(input_shape: [usize; 3], arg: &[usize], grad_out: &Tensor) -> Tensor {
    let [c, h, w] = input_shape;
    let mut gi = Tensor::zeros(c, h, w);
    for (o, &i) in arg.iter().enumerate() {
        gi.data[i] += grad_out.data[o];
    }
    gi
}

/// Depthwise transposed convolution with a fixed `2f × 2f` kernel, stride
/// `f`, padding `f/2`, cropped to `out_h × out_w`.
pub fn upsample(x: &Tensor, kernel: &[f64], factor: usize, out_h: usize, out_w: usize) -> Tensor {
    let k = 2 * factor;
    let pad = factor / 2;
    let mut out = Tensor::zeros(x.channels, out_h, out_w);
    out.data
        .par_chunks_mut(out_h * out_w)
        .enumerate()
        .for_each(|(c, plane)| {
            let src = x.plane(c);
            for iy in 0..x.height {
                for ix in 0..x.width {
                    let v = src[iy * x.width + ix];
                    if v == 0.0 {
                        continue;
                    }
                    for ky in 0..k {
                        let oy = (iy * factor + ky) as isize - pad as isize;
                        if oy < 0 || oy as usize >= out_h {
                            continue;
                        }
                        let row = &mut plane[oy as usize * out_w..(oy as usize + 1) * out_w];
                        for kx in 0..k {
                            let ox = (ix * factor + kx) as isize - pad as isize;
                            if ox >= 0 && (ox as usize) < out_w {
                                row[ox as usize] += v * kernel[ky * k + kx];
                            }
                        }
                    }
                }
            }
        });
    out
}

pub fn upsample_backward(input_shape: [usize; 3], kernel: &[f64], factor: usize, grad_out: &Tensor) -> Tensor {
    let [c, h, w] = input_shape;
    let k = 2 * factor;
    let pad = factor / 2;
    let (out_h, out_w) = (grad_out.height, grad_out.width);
    let mut gi = Tensor::zeros(c, h, w);
    gi.data
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(ch, plane)| {
            let go = grad_out.plane(ch);
            for iy in 0..h {
                for ix in 0..w {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        let oy = (iy * factor + ky) as isize - pad as isize;
                        if oy < 0 || oy as usize >= out_h {
                            continue;
                        }
                        for kx in 0..k {
                            let ox = (ix * factor + kx) as isize - pad as isize;
                            if ox >= 0 && (ox as usize) < out_w {
                                acc += go[oy as usize * out_w + ox as usize] * kernel[ky * k + kx];
                            }
                        }
                    }
                    plane[iy * w + ix] = acc;
                }
            }
        });
    gi
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::bilinear_kernel;

    fn naive_conv(x: &Tensor, w: &[f64], b: &[f64], oc_n: usize, g: ConvGeometry) -> Tensor {
        let (oh, ow) = (g.out_len(x.height), g.out_len(x.width));
        Tensor::from_fn(oc_n, oh, ow, |oc, oy, ox| {
            let mut acc = b[oc];
            for ic in 0..x.channels {
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < x.height && (ix as usize) < x.width {
                            acc += w[((oc * x.channels + ic) * g.kernel + ky) * g.kernel + kx]
                                * x.get(ic, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn conv_matches_naive() {
        for &(k, s, h, w) in &[(3, 1, 7, 6), (1, 2, 7, 6), (7, 2, 9, 8), (1, 1, 3, 3), (3, 1, 1, 1)] {
            let g = ConvGeometry { kernel: k, stride: s, pad: k / 2 };
            let x = Tensor::from_vec(2, h, w, pseudo(2 * h * w, 1)).unwrap();
            let wts = pseudo(3 * 2 * k * k, 2);
            let b = pseudo(3, 3);
            let fast = conv2d(&x, &wts, &b, 3, g);
            let slow = naive_conv(&x, &wts, &b, 3, g);
            assert!(fast.max_abs_diff(&slow) < 1e-12, "k={k} s={s}");
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x) - b, y> == <x, conv^T(y)> and == <w, dW(y)>
        for &(k, s) in &[(3, 1), (1, 2), (7, 2)] {
            let g = ConvGeometry { kernel: k, stride: s, pad: k / 2 };
            let x = Tensor::from_vec(2, 9, 8, pseudo(144, 4)).unwrap();
            let wts = pseudo(3 * 2 * k * k, 5);
            let zero = vec![0.0; 3];
            let out = conv2d(&x, &wts, &zero, 3, g);
            let y = Tensor::from_vec(3, out.height, out.width, pseudo(out.data.len(), 6)).unwrap();
            let lhs: f64 = out.data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
            let (gi, gw, gb) = conv2d_backward(&x, &wts, &y, g, true);
            let via_x: f64 = gi.unwrap().data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
            let via_w: f64 = gw.iter().zip(&wts).map(|(a, b)| a * b).sum();
            assert!((lhs - via_x).abs() < 1e-10);
            assert!((lhs - via_w).abs() < 1e-10);
            assert!((gb[0] - y.plane(0).iter().sum::<f64>()).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_is_bilinear_in_interior() {
        let x = Tensor::from_fn(1, 4, 4, |_, y, x| (y * 4 + x) as f64);
        let up = upsample(&x, &bilinear_kernel(2), 2, 8, 8);
        // output pixel o samples source coordinate (o + 0.5)/2 - 0.5
        for oy in 1..7 {
            for ox in 1..7 {
                let sy = (oy as f64 + 0.5) / 2.0 - 0.5;
                let sx = (ox as f64 + 0.5) / 2.0 - 0.5;
                let expected = sy * 4.0 + sx;
                assert!((up.get(0, oy, ox) - expected).abs() < 1e-12, "({oy},{ox})");
            }
        }
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let f = 4;
        let kern = bilinear_kernel(f);
        let x = Tensor::from_vec(2, 3, 4, pseudo(24, 9)).unwrap();
        let out = upsample(&x, &kern, f, 11, 14);
        let y = Tensor::from_vec(2, 11, 14, pseudo(2 * 11 * 14, 10)).unwrap();
        let lhs: f64 = out.data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let gi = upsample_backward([2, 3, 4], &kern, f, &y);
        let rhs: f64 = gi.data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn maxpool_ceil_mode() {
        let x = Tensor::from_fn(1, 3, 3, |_, y, x| (y * 3 + x) as f64);
        let (out, arg) = maxpool2(&x);
        assert_eq!(out.data, vec![4.0, 5.0, 7.0, 8.0]);
        let g = maxpool2_backward([1, 3, 3], &arg, &Tensor::filled(1, 2, 2, 1.0));
        assert_eq!(g.data, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
    }
}
