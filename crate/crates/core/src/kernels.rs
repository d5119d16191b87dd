//! Convolution loops shared by the forward and backward passes.

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Input coordinate hit by output `o` and kernel tap `k`, if inside the image.
#[inline]
fn tap(o: usize, k: usize, stride: usize, pad: usize, limit: usize) -> Option<usize> {
    let pos = (o * stride + k) as isize - pad as isize;
    (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
}

/// `y[b,o,i,j] = sum_{c,u,v} w[o,c,u,v] * x[b,c,i*s+u-p, j*s+v-p]`.
pub(crate) fn conv2d(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut y = vec![0.0; g.batch * g.out_ch * g.out_h * g.out_w];
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            let y_off = (b * g.out_ch + o) * g.out_h * g.out_w;
            for c in 0..g.in_ch {
                let x_off = (b * g.in_ch + c) * g.in_h * g.in_w;
                for u in 0..g.kh {
                    for v in 0..g.kw {
                        let wv = w[((o * g.in_ch + c) * g.kh + u) * g.kw + v];
                        if wv == 0.0 {
                            continue;
                        }
                        for i in 0..g.out_h {
                            let Some(xi) = tap(i, u, g.stride, g.pad, g.in_h) else {
                                continue;
                            };
                            for j in 0..g.out_w {
                                if let Some(xj) = tap(j, v, g.stride, g.pad, g.in_w) {
                                    y[y_off + i * g.out_w + j] += wv * x[x_off + xi * g.in_w + xj];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Gradients of `conv2d` with respect to its input and kernel.
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
) -> (Vec<f64>, Vec<f64>) {
    let mut dx = if want_dx {
        vec![0.0; x.len()]
    } else {
        Vec::new()
    };
    let mut dw = if want_dw {
        vec![0.0; w.len()]
    } else {
        Vec::new()
    };
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            let y_off = (b * g.out_ch + o) * g.out_h * g.out_w;
            for c in 0..g.in_ch {
                let x_off = (b * g.in_ch + c) * g.in_h * g.in_w;
                for u in 0..g.kh {
                    for v in 0..g.kw {
                        let w_idx = ((o * g.in_ch + c) * g.kh + u) * g.kw + v;
                        let wv = w[w_idx];
                        let mut acc = 0.0;
                        for i in 0..g.out_h {
                            let Some(xi) = tap(i, u, g.stride, g.pad, g.in_h) else {
                                continue;
                            };
                            for j in 0..g.out_w {
                                if let Some(xj) = tap(j, v, g.stride, g.pad, g.in_w) {
                                    let d = dy[y_off + i * g.out_w + j];
                                    let xk = x_off + xi * g.in_w + xj;
                                    if want_dx {
                                        dx[xk] += wv * d;
                                    }
                                    acc += x[xk] * d;
                                }
                            }
                        }
                        if want_dw {
                            dw[w_idx] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Transposed convolution, kernel laid out `[in_ch, out_ch, kh, kw]`:
/// `y[b,o,i*s+u-p, j*s+v-p] += w[c,o,u,v] * x[b,c,i,j]`.
/// Here `in_*` is the small input and `out_*` the upsampled output.
pub(crate) fn conv_transpose2d(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut y = vec![0.0; g.batch * g.out_ch * g.out_h * g.out_w];
    for b in 0..g.batch {
        for c in 0..g.in_ch {
            let x_off = (b * g.in_ch + c) * g.in_h * g.in_w;
            for o in 0..g.out_ch {
                let y_off = (b * g.out_ch + o) * g.out_h * g.out_w;
                for u in 0..g.kh {
                    for v in 0..g.kw {
                        let wv = w[((c * g.out_ch + o) * g.kh + u) * g.kw + v];
                        for i in 0..g.in_h {
                            let Some(yi) = tap(i, u, g.stride, g.pad, g.out_h) else {
                                continue;
                            };
                            for j in 0..g.in_w {
                                if let Some(yj) = tap(j, v, g.stride, g.pad, g.out_w) {
                                    y[y_off + yi * g.out_w + yj] += wv * x[x_off + i * g.in_w + j];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

pub(crate) fn conv_transpose2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
) -> (Vec<f64>, Vec<f64>) {
    let mut dx = if want_dx {
        vec![0.0; x.len()]
    } else {
        Vec::new()
    };
    let mut dw = if want_dw {
        vec![0.0; w.len()]
    } else {
        Vec::new()
    };
    for b in 0..g.batch {
        for c in 0..g.in_ch {
            let x_off = (b * g.in_ch + c) * g.in_h * g.in_w;
            for o in 0..g.out_ch {
                let y_off = (b * g.out_ch + o) * g.out_h * g.out_w;
                for u in 0..g.kh {
                    for v in 0..g.kw {
                        let w_idx = ((c * g.out_ch + o) * g.kh + u) * g.kw + v;
                        let wv = w[w_idx];
                        let mut acc = 0.0;
                        for i in 0..g.in_h {
                            let Some(yi) = tap(i, u, g.stride, g.pad, g.out_h) else {
                                continue;
                            };
                            for j in 0..g.in_w {
                                if let Some(yj) = tap(j, v, g.stride, g.pad, g.out_w) {
                                    let d = dy[y_off + yi * g.out_w + yj];
                                    let xk = x_off + i * g.in_w + j;
                                    if want_dx {
                                        dx[xk] += wv * d;
                                    }
                                    acc += x[xk] * d;
                                }
                            }
                        }
                        if want_dw {
                            dw[w_idx] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Row-major `[m,k] x [k,n]`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}
