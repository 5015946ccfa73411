//! Layer primitives: forward and backward kernels over flat f64 buffers.
//!
//! All spatial ops use stride 1; convolutions use `pad = k/2` so odd kernels
//! preserve the spatial size. Computation is f64 throughout so finite-difference
//! oracles resolve well below the 1e-3 check tolerance.

/// One layer of a sequential network. `ResStart`/`ResEnd` bracket a residual
/// branch; the activation at `ResStart` is added back at `ResEnd`.
#[derive(Debug, Clone)]
pub enum LayerDef {
    Conv { name: String, in_c: usize, out_c: usize, k: usize, pad: usize },
    Dense { name: String, in_dim: usize, out_dim: usize },
    Relu,
    MaxPool2,
    GlobalAvgPool,
    Flatten,
    ResStart,
    ResEnd,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_forward(
    x: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
    cout: usize,
    k: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = h + 2 * pad + 1 - k;
    let wo = w + 2 * pad + 1 - k;
    let mut out = vec![0.0; n * cout * ho * wo];
    for img in 0..n {
        for o in 0..cout {
            let ob = (img * cout + o) * ho * wo;
            let b = bias[o];
            for v in &mut out[ob..ob + ho * wo] {
                *v = b;
            }
            for c in 0..cin {
                let xb = (img * cin + c) * h * w;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = weight[((o * cin + c) * k + ky) * k + kx];
                        let xo0 = pad.saturating_sub(kx).min(wo);
                        let xo1 = (w + pad).saturating_sub(kx).min(wo);
                        if xo1 <= xo0 {
                            continue;
                        }
                        let len = xo1 - xo0;
                        for yo in 0..ho {
                            let yi = yo + ky;
                            if yi < pad || yi - pad >= h {
                                continue;
                            }
                            let orow = ob + yo * wo + xo0;
                            let xrow = xb + (yi - pad) * w + xo0 + kx - pad;
                            let (od, xd) = (&mut out[orow..orow + len], &x[xrow..xrow + len]);
                            for i in 0..len {
                                od[i] += wv * xd[i];
                            }
                        }
                    }
                }
            }
        }
    }
    (out, ho, wo)
}

/// Gradient w.r.t. the convolution input.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward_input(
    dy: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    cout: usize,
    k: usize,
    pad: usize,
) -> Vec<f64> {
    let ho = h + 2 * pad + 1 - k;
    let wo = w + 2 * pad + 1 - k;
    let mut dx = vec![0.0; n * cin * h * w];
    for img in 0..n {
        for o in 0..cout {
            let ob = (img * cout + o) * ho * wo;
            for c in 0..cin {
                let xb = (img * cin + c) * h * w;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = weight[((o * cin + c) * k + ky) * k + kx];
                        let xo0 = pad.saturating_sub(kx).min(wo);
                        let xo1 = (w + pad).saturating_sub(kx).min(wo);
                        if xo1 <= xo0 {
                            continue;
                        }
                        let len = xo1 - xo0;
                        for yo in 0..ho {
                            let yi = yo + ky;
                            if yi < pad || yi - pad >= h {
                                continue;
                            }
                            let orow = ob + yo * wo + xo0;
                            let xrow = xb + (yi - pad) * w + xo0 + kx - pad;
                            let (xd, od) = (&mut dx[xrow..xrow + len], &dy[orow..orow + len]);
                            for i in 0..len {
                                xd[i] += wv * od[i];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Gradients w.r.t. convolution weight and bias.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward_params(
    dy: &[f64],
    x: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    pad: usize,
) -> (Vec<f64>, Vec<f64>) {
    let ho = h + 2 * pad + 1 - k;
    let wo = w + 2 * pad + 1 - k;
    let mut dw = vec![0.0; cout * cin * k * k];
    let mut db = vec![0.0; cout];
    for img in 0..n {
        for o in 0..cout {
            let ob = (img * cout + o) * ho * wo;
            db[o] += dy[ob..ob + ho * wo].iter().sum::<f64>();
            for c in 0..cin {
                let xb = (img * cin + c) * h * w;
                for ky in 0..k {
                    for kx in 0..k {
                        let xo0 = pad.saturating_sub(kx).min(wo);
                        let xo1 = (w + pad).saturating_sub(kx).min(wo);
                        if xo1 <= xo0 {
                            continue;
                        }
                        let len = xo1 - xo0;
                        let mut acc = 0.0;
                        for yo in 0..ho {
                            let yi = yo + ky;
                            if yi < pad || yi - pad >= h {
                                continue;
                            }
                            let orow = ob + yo * wo + xo0;
                            let xrow = xb + (yi - pad) * w + xo0 + kx - pad;
                            let (od, xd) = (&dy[orow..orow + len], &x[xrow..xrow + len]);
                            for i in 0..len {
                                acc += od[i] * xd[i];
                            }
                        }
                        dw[((o * cin + c) * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    }
    (dw, db)
}

/// 2x2 max pool, stride 2, floor on odd sizes. Returns pooled values and the
/// flat input index of each selected element.
pub(crate) fn maxpool2_forward(
    x: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<u32>, usize, usize) {
    let ho = h / 2;
    let wo = w / 2;
    let mut out = vec![0.0; n * c * ho * wo];
    let mut idx = vec![0u32; n * c * ho * wo];
    for img in 0..n {
        for ch in 0..c {
            let xb = (img * c + ch) * h * w;
            let ob = (img * c + ch) * ho * wo;
            for yo in 0..ho {
                for xo in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let i = xb + (yo * 2 + dy) * w + xo * 2 + dx;
                            if x[i] > best {
                                best = x[i];
                                best_i = i;
                            }
                        }
                    }
                    out[ob + yo * wo + xo] = best;
                    idx[ob + yo * wo + xo] = best_i as u32;
                }
            }
        }
    }
    (out, idx, ho, wo)
}

pub(crate) fn maxpool2_backward(dy: &[f64], idx: &[u32], input_len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; input_len];
    for (g, &i) in dy.iter().zip(idx) {
        dx[i as usize] += g;
    }
    dx
}

pub(crate) fn dense_forward(
    x: &[f64],
    n: usize,
    in_dim: usize,
    weight: &[f64],
    bias: &[f64],
    out_dim: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; n * out_dim];
    for img in 0..n {
        let xr = &x[img * in_dim..(img + 1) * in_dim];
        let or = &mut out[img * out_dim..(img + 1) * out_dim];
        for o in 0..out_dim {
            let wr = &weight[o * in_dim..(o + 1) * in_dim];
            let mut acc = bias[o];
            for i in 0..in_dim {
                acc += wr[i] * xr[i];
            }
            or[o] = acc;
        }
    }
    out
}

pub(crate) fn dense_backward(
    dy: &[f64],
    x: &[f64],
    n: usize,
    in_dim: usize,
    weight: &[f64],
    out_dim: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; n * in_dim];
    let mut dw = vec![0.0; out_dim * in_dim];
    let mut db = vec![0.0; out_dim];
    for img in 0..n {
        let xr = &x[img * in_dim..(img + 1) * in_dim];
        let dyr = &dy[img * out_dim..(img + 1) * out_dim];
        let dxr = &mut dx[img * in_dim..(img + 1) * in_dim];
        for o in 0..out_dim {
            let g = dyr[o];
            db[o] += g;
            let wr = &weight[o * in_dim..(o + 1) * in_dim];
            let dwr = &mut dw[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                dxr[i] += g * wr[i];
                dwr[i] += g * xr[i];
            }
        }
    }
    (dx, dw, db)
}
