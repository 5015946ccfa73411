//! Network construction from a [`ModelSpec`] and the forward/backward engine.

use ndarray::{Array2, Array4};

use super::layers::*;
use super::{Architecture, ModelSpec};
use crate::error::{MadError, Result};

/// Per-example activation shape flowing through the stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ActShape {
    Feat { c: usize, h: usize, w: usize },
    Flat { d: usize },
}

impl ActShape {
    fn len(&self) -> usize {
        match *self {
            ActShape::Feat { c, h, w } => c * h * w,
            ActShape::Flat { d } => d,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamMeta {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

/// A compiled layer stack with its parameter index. Shapes are fully
/// determined by the spec, so two networks from equal specs are identical.
#[derive(Debug, Clone)]
pub struct Network {
    pub layers: Vec<LayerDef>,
    pub params: Vec<ParamMeta>,
    pub input_shape: (usize, usize, usize),
    pub num_classes: usize,
    /// params index of (weight, bias) for each Conv/Dense layer, by layer position.
    param_of_layer: Vec<Option<(usize, usize)>>,
}

/// Inputs smaller than this use the reduced-width profile so every backbone
/// has a sub-500-parameter instantiation for finite-difference checks.
const TINY_SIDE: usize = 8;

impl Network {
    pub fn from_spec(spec: &ModelSpec) -> Result<Network> {
        spec.validate()?;
        let (cin, h, w) = spec.input_shape;
        let n_cls = spec.num_classes;
        let tiny = h.max(w) <= TINY_SIDE;
        let mut layers = Vec::new();
        match spec.architecture_id {
            Architecture::SmallCnn => {
                let (c1, c2, hid) = if tiny { (2, 2, 4) } else { (8, 16, 32) };
                layers.push(LayerDef::Conv { name: "conv1".into(), in_c: cin, out_c: c1, k: 3, pad: 1 });
                layers.push(LayerDef::Relu);
                layers.push(LayerDef::MaxPool2);
                layers.push(LayerDef::Conv { name: "conv2".into(), in_c: c1, out_c: c2, k: 3, pad: 1 });
                layers.push(LayerDef::Relu);
                layers.push(LayerDef::MaxPool2);
                layers.push(LayerDef::Flatten);
                let flat = c2 * (h / 4) * (w / 4);
                layers.push(LayerDef::Dense { name: "fc1".into(), in_dim: flat, out_dim: hid });
                layers.push(LayerDef::Relu);
                layers.push(LayerDef::Dense { name: "fc2".into(), in_dim: hid, out_dim: n_cls });
            }
            Architecture::Resnet18Like => {
                let c = if tiny { 2 } else { 12 };
                layers.push(LayerDef::Conv { name: "stem".into(), in_c: cin, out_c: c, k: 3, pad: 1 });
                layers.push(LayerDef::Relu);
                for b in 0..2 {
                    layers.push(LayerDef::ResStart);
                    layers.push(LayerDef::Conv { name: format!("block{b}.conv1"), in_c: c, out_c: c, k: 3, pad: 1 });
                    layers.push(LayerDef::Relu);
                    layers.push(LayerDef::Conv { name: format!("block{b}.conv2"), in_c: c, out_c: c, k: 3, pad: 1 });
                    layers.push(LayerDef::ResEnd);
                    layers.push(LayerDef::Relu);
                }
                layers.push(LayerDef::GlobalAvgPool);
                layers.push(LayerDef::Dense { name: "fc".into(), in_dim: c, out_dim: n_cls });
            }
            Architecture::AlexnetLike => {
                let (c1, c2, hid) = if tiny { (2, 2, 4) } else { (8, 16, 64) };
                layers.push(LayerDef::Conv { name: "conv1".into(), in_c: cin, out_c: c1, k: 5, pad: 2 });
                layers.push(LayerDef::Relu);
                layers.push(LayerDef::MaxPool2);
                layers.push(LayerDef::Conv { name: "conv2".into(), in_c: c1, out_c: c2, k: 3, pad: 1 });
                layers.push(LayerDef::Relu);
                layers.push(LayerDef::MaxPool2);
                layers.push(LayerDef::Flatten);
                let flat = c2 * (h / 4) * (w / 4);
                layers.push(LayerDef::Dense { name: "fc1".into(), in_dim: flat, out_dim: hid });
                layers.push(LayerDef::Relu);
                layers.push(LayerDef::Dense { name: "fc2".into(), in_dim: hid, out_dim: n_cls });
            }
            Architecture::Linear => {
                layers.push(LayerDef::Flatten);
                layers.push(LayerDef::Dense { name: "fc".into(), in_dim: cin * h * w, out_dim: n_cls });
            }
        }

        let mut params = Vec::new();
        let mut param_of_layer = Vec::with_capacity(layers.len());
        for layer in &layers {
            match layer {
                LayerDef::Conv { name, in_c, out_c, k, .. } => {
                    let wi = params.len();
                    params.push(ParamMeta { name: format!("{name}.weight"), shape: vec![*out_c, *in_c, *k, *k] });
                    params.push(ParamMeta { name: format!("{name}.bias"), shape: vec![*out_c] });
                    param_of_layer.push(Some((wi, wi + 1)));
                }
                LayerDef::Dense { name, in_dim, out_dim } => {
                    let wi = params.len();
                    params.push(ParamMeta { name: format!("{name}.weight"), shape: vec![*out_dim, *in_dim] });
                    params.push(ParamMeta { name: format!("{name}.bias"), shape: vec![*out_dim] });
                    param_of_layer.push(Some((wi, wi + 1)));
                }
                _ => param_of_layer.push(None),
            }
        }

        let net = Network {
            layers,
            params,
            input_shape: spec.input_shape,
            num_classes: n_cls,
            param_of_layer,
        };
        net.check_shapes()?;
        Ok(net)
    }

    pub fn total_params(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Trace shapes through the stack and confirm the output is `num_classes`.
    fn check_shapes(&self) -> Result<()> {
        let (c, h, w) = self.input_shape;
        let mut shape = ActShape::Feat { c, h, w };
        let mut res_stack = Vec::new();
        for layer in &self.layers {
            shape = match (layer, shape) {
                (LayerDef::Conv { in_c, out_c, k, pad, .. }, ActShape::Feat { c, h, w }) => {
                    if c != *in_c {
                        return Err(MadError::Config(format!("conv expects {in_c} channels, got {c}")));
                    }
                    ActShape::Feat { c: *out_c, h: h + 2 * pad + 1 - k, w: w + 2 * pad + 1 - k }
                }
                (LayerDef::MaxPool2, ActShape::Feat { c, h, w }) => ActShape::Feat { c, h: h / 2, w: w / 2 },
                (LayerDef::GlobalAvgPool, ActShape::Feat { c, .. }) => ActShape::Flat { d: c },
                (LayerDef::Flatten, s) => ActShape::Flat { d: s.len() },
                (LayerDef::Dense { in_dim, out_dim, .. }, ActShape::Flat { d }) => {
                    if d != *in_dim {
                        return Err(MadError::Config(format!("dense expects {in_dim} inputs, got {d}")));
                    }
                    ActShape::Flat { d: *out_dim }
                }
                (LayerDef::Relu, s) => s,
                (LayerDef::ResStart, s) => {
                    res_stack.push(s);
                    s
                }
                (LayerDef::ResEnd, s) => {
                    let start = res_stack.pop().ok_or_else(|| MadError::Config("unbalanced residual block".into()))?;
                    if start != s {
                        return Err(MadError::Config("residual branch changed activation shape".into()));
                    }
                    s
                }
                (l, s) => {
                    return Err(MadError::Config(format!("layer {l:?} cannot follow activation {s:?}")));
                }
            };
        }
        match shape {
            ActShape::Flat { d } if d == self.num_classes => Ok(()),
            s => Err(MadError::Config(format!("network output {s:?} != {} classes", self.num_classes))),
        }
    }

    /// Run the stack, keeping the input of every layer for the backward pass.
    pub fn forward(&self, params: &[Vec<f64>], x: &Array4<f32>) -> Result<ForwardCache> {
        let n = x.shape()[0];
        let (c, h, w) = self.input_shape;
        if x.shape()[1..] != [c, h, w] {
            return Err(MadError::Data(format!(
                "input shape {:?} does not match model input ({c}, {h}, {w})",
                &x.shape()[1..]
            )));
        }
        if params.len() != self.params.len() {
            return Err(MadError::Data("parameter count mismatch".into()));
        }
        let x_flat: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let mut cur = x_flat;
        let mut cur_shape = ActShape::Feat { c, h, w };
        let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut in_shapes: Vec<ActShape> = Vec::with_capacity(self.layers.len());
        let mut pool_idx: Vec<Option<Vec<u32>>> = Vec::with_capacity(self.layers.len());
        let mut res_stack: Vec<Vec<f64>> = Vec::new();

        for (li, layer) in self.layers.iter().enumerate() {
            inputs.push(cur.clone());
            in_shapes.push(cur_shape);
            let mut pidx = None;
            cur = match (layer, cur_shape) {
                (LayerDef::Conv { out_c, k, pad, .. }, ActShape::Feat { c, h, w }) => {
                    let (wi, bi) = self.param_of_layer[li].unwrap();
                    let (out, ho, wo) = conv_forward(&cur, n, c, h, w, &params[wi], &params[bi], *out_c, *k, *pad);
                    cur_shape = ActShape::Feat { c: *out_c, h: ho, w: wo };
                    out
                }
                (LayerDef::Dense { in_dim, out_dim, .. }, ActShape::Flat { .. }) => {
                    let (wi, bi) = self.param_of_layer[li].unwrap();
                    let out = dense_forward(&cur, n, *in_dim, &params[wi], &params[bi], *out_dim);
                    cur_shape = ActShape::Flat { d: *out_dim };
                    out
                }
                (LayerDef::Relu, _) => cur.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
                (LayerDef::MaxPool2, ActShape::Feat { c, h, w }) => {
                    let (out, idx, ho, wo) = maxpool2_forward(&cur, n, c, h, w);
                    pidx = Some(idx);
                    cur_shape = ActShape::Feat { c, h: ho, w: wo };
                    out
                }
                (LayerDef::GlobalAvgPool, ActShape::Feat { c, h, w }) => {
                    let mut out = vec![0.0; n * c];
                    let inv = 1.0 / (h * w) as f64;
                    for i in 0..n * c {
                        out[i] = cur[i * h * w..(i + 1) * h * w].iter().sum::<f64>() * inv;
                    }
                    cur_shape = ActShape::Flat { d: c };
                    out
                }
                (LayerDef::Flatten, s) => {
                    cur_shape = ActShape::Flat { d: s.len() };
                    cur
                }
                (LayerDef::ResStart, _) => {
                    res_stack.push(cur.clone());
                    cur
                }
                (LayerDef::ResEnd, _) => {
                    let skip = res_stack.pop().expect("validated residual nesting");
                    cur.iter().zip(&skip).map(|(a, b)| a + b).collect()
                }
                _ => unreachable!("shape-checked at construction"),
            };
            pool_idx.push(pidx);
        }

        let logits = Array2::from_shape_vec((n, self.num_classes), cur)
            .map_err(|e| MadError::Data(e.to_string()))?;
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(MadError::Numeric("non-finite logits in forward pass".into()));
        }
        Ok(ForwardCache { n, inputs, in_shapes, pool_idx, logits })
    }

    /// Backpropagate an arbitrary logit gradient; returns parameter gradients
    /// (one per parameter tensor, flat) and the input gradient.
    pub fn backward(&self, params: &[Vec<f64>], cache: &ForwardCache, dlogits: &Array2<f64>) -> Result<(Vec<Vec<f64>>, Array4<f64>)> {
        let n = cache.n;
        if dlogits.shape() != [n, self.num_classes] {
            return Err(MadError::Data("dlogits shape mismatch".into()));
        }
        let mut grads: Vec<Vec<f64>> = self.params.iter().map(|p| vec![0.0; p.len()]).collect();
        let mut dy: Vec<f64> = dlogits.iter().copied().collect();
        let mut res_stack: Vec<Vec<f64>> = Vec::new();

        for (li, layer) in self.layers.iter().enumerate().rev() {
            let x = &cache.inputs[li];
            let shape = cache.in_shapes[li];
            dy = match (layer, shape) {
                (LayerDef::Conv { out_c, k, pad, .. }, ActShape::Feat { c, h, w }) => {
                    let (wi, bi) = self.param_of_layer[li].unwrap();
                    let (dw, db) = conv_backward_params(&dy, x, n, c, h, w, *out_c, *k, *pad);
                    grads[wi] = dw;
                    grads[bi] = db;
                    conv_backward_input(&dy, n, c, h, w, &params[wi], *out_c, *k, *pad)
                }
                (LayerDef::Dense { in_dim, out_dim, .. }, ActShape::Flat { .. }) => {
                    let (wi, bi) = self.param_of_layer[li].unwrap();
                    let (dx, dw, db) = dense_backward(&dy, x, n, *in_dim, &params[wi], *out_dim);
                    grads[wi] = dw;
                    grads[bi] = db;
                    dx
                }
                (LayerDef::Relu, _) => dy.iter().zip(x).map(|(&g, &v)| if v > 0.0 { g } else { 0.0 }).collect(),
                (LayerDef::MaxPool2, _) => {
                    maxpool2_backward(&dy, cache.pool_idx[li].as_ref().unwrap(), x.len())
                }
                (LayerDef::GlobalAvgPool, ActShape::Feat { c, h, w }) => {
                    let inv = 1.0 / (h * w) as f64;
                    let mut dx = vec![0.0; n * c * h * w];
                    for i in 0..n * c {
                        let g = dy[i] * inv;
                        for v in &mut dx[i * h * w..(i + 1) * h * w] {
                            *v = g;
                        }
                    }
                    dx
                }
                (LayerDef::Flatten, _) => dy,
                (LayerDef::ResEnd, _) => {
                    res_stack.push(dy.clone());
                    dy
                }
                (LayerDef::ResStart, _) => {
                    let skip = res_stack.pop().expect("validated residual nesting");
                    dy.iter().zip(&skip).map(|(a, b)| a + b).collect()
                }
                _ => unreachable!(),
            };
        }

        let (c, h, w) = self.input_shape;
        let dx = Array4::from_shape_vec((n, c, h, w), dy).map_err(|e| MadError::Data(e.to_string()))?;
        Ok((grads, dx))
    }
}

/// Activations captured during a forward pass.
pub struct ForwardCache {
    n: usize,
    inputs: Vec<Vec<f64>>,
    in_shapes: Vec<ActShape>,
    pool_idx: Vec<Option<Vec<u32>>>,
    pub logits: Array2<f64>,
}

/// Loss over logits. Returns (summed loss, dloss/dlogits *not* divided by N);
/// callers divide by the batch size for a mean.
pub fn loss_on_logits(logits: &Array2<f64>, labels: &[usize], kind: &LossKind) -> Result<(f64, Array2<f64>)> {
    let (n, ncls) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(MadError::Data("label count does not match logits".into()));
    }
    let mut dz = Array2::<f64>::zeros((n, ncls));
    let mut total = 0.0;
    match kind {
        LossKind::CrossEntropy => {
            for i in 0..n {
                let y = labels[i];
                if y >= ncls {
                    return Err(MadError::Data(format!("label {y} out of range [0, {ncls})")));
                }
                let row = logits.row(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..ncls {
                    sum += (row[j] - max).exp();
                }
                let lse = max + sum.ln();
                total += lse - row[y];
                for j in 0..ncls {
                    dz[[i, j]] = (row[j] - max).exp() / sum;
                }
                dz[[i, y]] -= 1.0;
            }
        }
        LossKind::KlToReference(reference) => {
            if reference.shape() != logits.shape() {
                return Err(MadError::Data("reference logits shape mismatch".into()));
            }
            for i in 0..n {
                let p_ref = softmax_row(&reference.row(i).to_vec());
                let row = logits.row(i).to_vec();
                let p = softmax_row(&row);
                for j in 0..ncls {
                    if p_ref[j] > 0.0 {
                        total += p_ref[j] * (p_ref[j].ln() - p[j].max(1e-300).ln());
                    }
                    dz[[i, j]] = p[j] - p_ref[j];
                }
            }
        }
    }
    if !total.is_finite() {
        return Err(MadError::Numeric("non-finite loss".into()));
    }
    Ok((total, dz))
}

/// Classification loss selector. The KL variant measures
/// KL(reference ‖ model) over softmax distributions.
#[derive(Debug, Clone)]
pub enum LossKind<'a> {
    CrossEntropy,
    KlToReference(&'a Array2<f64>),
}

pub(crate) fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}
