//! Raw loops behind the graph primitives. All buffers are NCHW, row-major.

/// Convolution geometry. Padding is chosen so stride-1 outputs keep the
/// input size: `pad = dilation * (k - 1) / 2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    pub fn out_len(&self, n: usize) -> usize {
        (n + 2 * self.pad() - self.dilation * (self.kernel - 1) - 1) / self.stride + 1
    }
}

/// Output index range `[lo, hi)` whose taps at `o * stride + off` land inside `[0, n_in)`.
#[inline]
fn tap_range(n_in: usize, n_out: usize, stride: usize, off: isize) -> (usize, usize) {
    let lo = if off < 0 {
        ((-off) as usize).div_ceil(stride)
    } else {
        0
    };
    let last = n_in as isize - 1 - off;
    if last < 0 {
        return (0, 0);
    }
    let hi = n_out.min(last as usize / stride + 1);
    (lo.min(hi), hi)
}

pub struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub h_out: usize,
    pub w_out: usize,
}

/// Iterates every (output plane, input plane, weight index, tap) combination,
/// handing the callback row-aligned slices.
#[inline(always)]
fn for_each_tap(
    d: &ConvDims,
    g: &ConvGeom,
    mut f: impl FnMut(usize, usize, usize, usize, usize, isize, usize),
) {
    let cin_g = d.c_in / g.groups;
    let cout_g = d.c_out / g.groups;
    let k = g.kernel;
    let pad = g.pad() as isize;
    for n in 0..d.n {
        for oc in 0..d.c_out {
            let grp = oc / cout_g;
            let out_plane = (n * d.c_out + oc) * d.h_out * d.w_out;
            for icg in 0..cin_g {
                let ic = grp * cin_g + icg;
                let in_plane = (n * d.c_in + ic) * d.h * d.w;
                for kh in 0..k {
                    let offh = (kh * g.dilation) as isize - pad;
                    let (oh_lo, oh_hi) = tap_range(d.h, d.h_out, g.stride, offh);
                    if oh_lo >= oh_hi {
                        continue;
                    }
                    for kw in 0..k {
                        let offw = (kw * g.dilation) as isize - pad;
                        let (ow_lo, ow_hi) = tap_range(d.w, d.w_out, g.stride, offw);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let widx = ((oc * cin_g + icg) * k + kh) * k + kw;
                        for oh in oh_lo..oh_hi {
                            let ih = (oh * g.stride) as isize + offh;
                            f(
                                out_plane + oh * d.w_out,
                                in_plane + ih as usize * d.w,
                                widx,
                                ow_lo,
                                ow_hi,
                                offw,
                                g.stride,
                            );
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(x: &[f64], w: &[f64], d: &ConvDims, g: &ConvGeom, out: &mut [f64]) {
    if g.kernel == 1 && g.stride == 1 && g.groups == 1 {
        return pointwise_forward(x, w, d, out);
    }
    for_each_tap(d, g, |orow, irow, widx, lo, hi, offw, stride| {
        let wv = w[widx];
        let o = &mut out[orow + lo..orow + hi];
        if stride == 1 {
            let start = (irow as isize + lo as isize + offw) as usize;
            let i = &x[start..start + (hi - lo)];
            for (ov, iv) in o.iter_mut().zip(i) {
                *ov += wv * iv;
            }
        } else {
            for (j, ov) in o.iter_mut().enumerate() {
                let iw = ((lo + j) * stride) as isize + offw;
                *ov += wv * x[(irow as isize + iw) as usize];
            }
        }
    });
}

pub fn conv2d_backward_input(gout: &[f64], w: &[f64], d: &ConvDims, g: &ConvGeom, gx: &mut [f64]) {
    if g.kernel == 1 && g.stride == 1 && g.groups == 1 {
        let hw = d.h * d.w;
        for n in 0..d.n {
            for oc in 0..d.c_out {
                let go = &gout[(n * d.c_out + oc) * hw..][..hw];
                for ic in 0..d.c_in {
                    let wv = w[oc * d.c_in + ic];
                    let gi = &mut gx[(n * d.c_in + ic) * hw..][..hw];
                    for (a, b) in gi.iter_mut().zip(go) {
                        *a += wv * b;
                    }
                }
            }
        }
        return;
    }
    for_each_tap(d, g, |orow, irow, widx, lo, hi, offw, stride| {
        let wv = w[widx];
        let o = &gout[orow + lo..orow + hi];
        if stride == 1 {
            let start = (irow as isize + lo as isize + offw) as usize;
            let i = &mut gx[start..start + (hi - lo)];
            for (iv, ov) in i.iter_mut().zip(o) {
                *iv += wv * ov;
            }
        } else {
            for (j, ov) in o.iter().enumerate() {
                let iw = ((lo + j) * stride) as isize + offw;
                gx[(irow as isize + iw) as usize] += wv * ov;
            }
        }
    });
}

pub fn conv2d_backward_weight(gout: &[f64], x: &[f64], d: &ConvDims, g: &ConvGeom, gw: &mut [f64]) {
    if g.kernel == 1 && g.stride == 1 && g.groups == 1 {
        let hw = d.h * d.w;
        for n in 0..d.n {
            for oc in 0..d.c_out {
                let go = &gout[(n * d.c_out + oc) * hw..][..hw];
                for ic in 0..d.c_in {
                    let xi = &x[(n * d.c_in + ic) * hw..][..hw];
                    gw[oc * d.c_in + ic] += go.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        return;
    }
    for_each_tap(d, g, |orow, irow, widx, lo, hi, offw, stride| {
        let o = &gout[orow + lo..orow + hi];
        let acc: f64 = if stride == 1 {
            let start = (irow as isize + lo as isize + offw) as usize;
            o.iter()
                .zip(&x[start..start + (hi - lo)])
                .map(|(a, b)| a * b)
                .sum()
        } else {
            o.iter()
                .enumerate()
                .map(|(j, ov)| {
                    let iw = ((lo + j) * stride) as isize + offw;
                    ov * x[(irow as isize + iw) as usize]
                })
                .sum()
        };
        gw[widx] += acc;
    });
}

fn pointwise_forward(x: &[f64], w: &[f64], d: &ConvDims, out: &mut [f64]) {
    let hw = d.h * d.w;
    for n in 0..d.n {
        for oc in 0..d.c_out {
            let o = &mut out[(n * d.c_out + oc) * hw..][..hw];
            for ic in 0..d.c_in {
                let wv = w[oc * d.c_in + ic];
                let xi = &x[(n * d.c_in + ic) * hw..][..hw];
                for (a, b) in o.iter_mut().zip(xi) {
                    *a += wv * b;
                }
            }
        }
    }
}

/// 3x3, stride 1, same-padding max pool. Returns the flat input index of the
/// selected element per output; ties resolve to the first maximum in
/// row-major window order.
pub fn max_pool3_forward(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    out: &mut [f64],
) -> Vec<u32> {
    let mut arg = vec![0u32; planes * h * w];
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..h {
            for j in 0..w {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ii in i.saturating_sub(1)..(i + 2).min(h) {
                    for jj in j.saturating_sub(1)..(j + 2).min(w) {
                        let idx = base + ii * w + jj;
                        if best_idx == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out[base + i * w + j] = best;
                arg[base + i * w + j] = best_idx as u32;
            }
        }
    }
    arg
}

/// 3x3, stride 1, same-padding average pool; padded cells are excluded from the count.
pub fn avg_pool3_forward(x: &[f64], planes: usize, h: usize, w: usize, out: &mut [f64]) {
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..h {
            let (i0, i1) = (i.saturating_sub(1), (i + 2).min(h));
            for j in 0..w {
                let (j0, j1) = (j.saturating_sub(1), (j + 2).min(w));
                let mut s = 0.0;
                for ii in i0..i1 {
                    for jj in j0..j1 {
                        s += x[base + ii * w + jj];
                    }
                }
                out[base + i * w + j] = s / ((i1 - i0) * (j1 - j0)) as f64;
            }
        }
    }
}

pub fn avg_pool3_backward(gout: &[f64], planes: usize, h: usize, w: usize, gx: &mut [f64]) {
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..h {
            let (i0, i1) = (i.saturating_sub(1), (i + 2).min(h));
            for j in 0..w {
                let (j0, j1) = (j.saturating_sub(1), (j + 2).min(w));
                let g = gout[base + i * w + j] / ((i1 - i0) * (j1 - j0)) as f64;
                for ii in i0..i1 {
                    for jj in j0..j1 {
                        gx[base + ii * w + jj] += g;
                    }
                }
            }
        }
    }
}

/// Half-pixel bilinear sampling table for one axis: `(i0, i1, frac)` per output index.
pub fn bilinear_axis(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn bilinear_forward(
    x: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
    out: &mut [f64],
) {
    let ty = bilinear_axis(h, ho);
    let tx = bilinear_axis(w, wo);
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * ho * wo..][..ho * wo];
        for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[i * wo + j] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
}

pub fn bilinear_backward(
    gout: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
    gx: &mut [f64],
) {
    let ty = bilinear_axis(h, ho);
    let tx = bilinear_axis(w, wo);
    for p in 0..planes {
        let g = &gout[p * ho * wo..][..ho * wo];
        let dst = &mut gx[p * h * w..][..h * w];
        for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = g[i * wo + j];
                dst[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += v * (1.0 - fy) * fx;
                dst[y1 * w + x0] += v * fy * (1.0 - fx);
                dst[y1 * w + x1] += v * fy * fx;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct definition of a (grouped, strided, dilated) same-padded convolution.
    fn naive_conv(x: &[f64], w: &[f64], d: &ConvDims, g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; d.n * d.c_out * d.h_out * d.w_out];
        let cin_g = d.c_in / g.groups;
        let cout_g = d.c_out / g.groups;
        let pad = g.pad() as isize;
        for n in 0..d.n {
            for oc in 0..d.c_out {
                for oh in 0..d.h_out {
                    for ow in 0..d.w_out {
                        let mut s = 0.0;
                        for icg in 0..cin_g {
                            let ic = (oc / cout_g) * cin_g + icg;
                            for kh in 0..g.kernel {
                                for kw in 0..g.kernel {
                                    let ih = (oh * g.stride + kh * g.dilation) as isize - pad;
                                    let iw = (ow * g.stride + kw * g.dilation) as isize - pad;
                                    if ih < 0 || iw < 0 || ih >= d.h as isize || iw >= d.w as isize
                                    {
                                        continue;
                                    }
                                    s += w[((oc * cin_g + icg) * g.kernel + kh) * g.kernel + kw]
                                        * x[((n * d.c_in + ic) * d.h + ih as usize) * d.w
                                            + iw as usize];
                                }
                            }
                        }
                        out[((n * d.c_out + oc) * d.h_out + oh) * d.w_out + ow] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_definition() {
        let cases = [
            (3, 1, 1, 1, 2, 3),
            (3, 2, 1, 1, 2, 4),
            (5, 1, 2, 1, 3, 2),
            (3, 1, 2, 3, 3, 3),
            (1, 1, 1, 1, 4, 5),
            (1, 2, 1, 1, 2, 2),
            (3, 1, 24, 1, 2, 2),
        ];
        for (k, s, dil, groups, cin, cout) in cases {
            let (cin, cout) = if groups > 1 {
                (groups, groups)
            } else {
                (cin, cout)
            };
            let geom = ConvGeom {
                kernel: k,
                stride: s,
                dilation: dil,
                groups,
            };
            let (h, w) = (6, 7);
            let d = ConvDims {
                n: 2,
                c_in: cin,
                h,
                w,
                c_out: cout,
                h_out: geom.out_len(h),
                w_out: geom.out_len(w),
            };
            let x: Vec<f64> = (0..2 * cin * h * w)
                .map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0)
                .collect();
            let wt: Vec<f64> = (0..cout * (cin / groups) * k * k)
                .map(|i| ((i * 13 % 7) as f64 - 3.0) / 5.0)
                .collect();
            let mut out = vec![0.0; 2 * cout * d.h_out * d.w_out];
            conv2d_forward(&x, &wt, &d, &geom, &mut out);
            let expect = naive_conv(&x, &wt, &d, &geom);
            for (a, b) in out.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "k={k} s={s} d={dil}");
            }
        }
    }

    #[test]
    fn stride_two_halves_with_ceiling() {
        let g = ConvGeom {
            kernel: 3,
            stride: 2,
            dilation: 1,
            groups: 1,
        };
        assert_eq!(g.out_len(16), 8);
        assert_eq!(g.out_len(7), 4);
        let g1 = ConvGeom {
            kernel: 5,
            stride: 1,
            dilation: 2,
            groups: 1,
        };
        assert_eq!(g1.pad(), 4);
        assert_eq!(g1.out_len(9), 9);
    }

    #[test]
    fn bilinear_preserves_constants() {
        let x = vec![2.5; 3 * 3];
        let mut out = vec![0.0; 6 * 6];
        bilinear_forward(&x, 1, (3, 3), (6, 6), &mut out);
        assert!(out.iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }
}
