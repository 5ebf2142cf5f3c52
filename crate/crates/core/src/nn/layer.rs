use serde::{Deserialize, Serialize};

/// One stage of a feedforward stack. Nonlinearities are layers of their own,
/// so every stage has an output that can be tapped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        units: usize,
    },
    Conv2d {
        in_channels: usize,
        filters: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Relu,
    Sigmoid,
    Flatten,
    Maxpool2d {
        size: usize,
    },
}

fn one() -> usize {
    1
}

impl LayerSpec {
    pub fn dense(inputs: usize, units: usize) -> Self {
        LayerSpec::Dense { inputs, units }
    }

    /// Stride-1 convolution with "same" padding for odd kernels.
    pub fn conv_same(in_channels: usize, filters: usize, kernel: usize) -> Self {
        LayerSpec::Conv2d { in_channels, filters, kernel, stride: 1, padding: kernel / 2 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Maxpool2d { .. } => "maxpool2d",
        }
    }

    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, units } => units * inputs + units,
            LayerSpec::Conv2d { in_channels, filters, kernel, .. } => filters * in_channels * kernel * kernel + filters,
            _ => 0,
        }
    }

    /// Fan-in used for weight initialisation.
    pub fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, .. } => inputs,
            LayerSpec::Conv2d { in_channels, kernel, .. } => in_channels * kernel * kernel,
            _ => 0,
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, String> {
        match *self {
            LayerSpec::Dense { inputs, units } => {
                if input.len() != 1 || input[0] != inputs {
                    return Err(format!("dense expects [{inputs}], got {input:?}"));
                }
                if units == 0 {
                    return Err("dense with zero units".into());
                }
                Ok(vec![units])
            }
            LayerSpec::Conv2d { in_channels, filters, kernel, stride, padding } => {
                if input.len() != 3 || input[0] != in_channels {
                    return Err(format!("conv2d expects [{in_channels}, H, W], got {input:?}"));
                }
                if filters == 0 || kernel == 0 || stride == 0 {
                    return Err("conv2d with zero filters, kernel or stride".into());
                }
                let (h, w) = (input[1] + 2 * padding, input[2] + 2 * padding);
                if h < kernel || w < kernel {
                    return Err(format!("conv2d kernel {kernel} larger than padded input {input:?}"));
                }
                Ok(vec![filters, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            LayerSpec::Relu | LayerSpec::Sigmoid => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Maxpool2d { size } => {
                if input.len() != 3 {
                    return Err(format!("maxpool2d expects [C, H, W], got {input:?}"));
                }
                if size == 0 || input[1] < size || input[2] < size {
                    return Err(format!("maxpool2d window {size} does not fit {input:?}"));
                }
                Ok(vec![input[0], input[1] / size, input[2] / size])
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

/// Range of output positions `o` for which `o * stride + offset` lands inside `[0, in_len)`.
fn valid_range(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let last = in_len as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last / s + 1).min(out_len as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

pub(crate) fn forward(spec: &LayerSpec, params: &[f64], in_shape: &[usize], input: &[f64]) -> Vec<f64> {
    match *spec {
        LayerSpec::Dense { inputs, units } => {
            let (w, b) = params.split_at(units * inputs);
            (0..units)
                .map(|u| {
                    let row = &w[u * inputs..(u + 1) * inputs];
                    b[u] + row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>()
                })
                .collect()
        }
        LayerSpec::Conv2d { in_channels, filters, kernel, stride, padding } => {
            let (h, w) = (in_shape[1], in_shape[2]);
            let oh = (h + 2 * padding - kernel) / stride + 1;
            let ow = (w + 2 * padding - kernel) / stride + 1;
            let (wt, bias) = params.split_at(filters * in_channels * kernel * kernel);
            let mut out = vec![0.0; filters * oh * ow];
            for f in 0..filters {
                let plane = &mut out[f * oh * ow..(f + 1) * oh * ow];
                plane.iter_mut().for_each(|v| *v = bias[f]);
                for c in 0..in_channels {
                    let src = &input[c * h * w..(c + 1) * h * w];
                    for ky in 0..kernel {
                        let (ylo, yhi) = valid_range(oh, h, stride, ky as isize - padding as isize);
                        for kx in 0..kernel {
                            let wv = wt[((f * in_channels + c) * kernel + ky) * kernel + kx];
                            let xoff = kx as isize - padding as isize;
                            let (xlo, xhi) = valid_range(ow, w, stride, xoff);
                            if xlo >= xhi {
                                continue;
                            }
                            for oy in ylo..yhi {
                                let iy = oy * stride + ky - padding;
                                let dst = &mut plane[oy * ow + xlo..oy * ow + xhi];
                                let row = &src[iy * w..(iy + 1) * w];
                                if stride == 1 {
                                    let ix0 = (xlo as isize + xoff) as usize;
                                    let seg = &row[ix0..ix0 + (xhi - xlo)];
                                    for (d, s) in dst.iter_mut().zip(seg) {
                                        *d += wv * s;
                                    }
                                } else {
                                    for (j, d) in dst.iter_mut().enumerate() {
                                        let ix = ((xlo + j) * stride) as isize + xoff;
                                        *d += wv * row[ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            out
        }
        LayerSpec::Relu => input.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
        LayerSpec::Sigmoid => input.iter().map(|&x| sigmoid(x)).collect(),
        LayerSpec::Flatten => input.to_vec(),
        LayerSpec::Maxpool2d { size } => {
            let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
            let (oh, ow) = (h / size, w / size);
            let mut out = Vec::with_capacity(c * oh * ow);
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let (_, v) = pool_argmax(input, ch, h, w, size, oy, ox);
                        out.push(v);
                    }
                }
            }
            out
        }
    }
}

/// First maximum in scan order wins ties.
fn pool_argmax(input: &[f64], ch: usize, h: usize, w: usize, size: usize, oy: usize, ox: usize) -> (usize, f64) {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for dy in 0..size {
        for dx in 0..size {
            let idx = ch * h * w + (oy * size + dy) * w + ox * size + dx;
            if input[idx] > best.1 {
                best = (idx, input[idx]);
            }
        }
    }
    best
}

/// Backpropagates `grad_out` through one layer. Parameter gradients are
/// accumulated into `grad_params`; the input gradient is returned when
/// `need_input_grad` is set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    spec: &LayerSpec,
    params: &[f64],
    in_shape: &[usize],
    input: &[f64],
    output: &[f64],
    grad_out: &[f64],
    grad_params: &mut [f64],
    need_input_grad: bool,
) -> Option<Vec<f64>> {
    match *spec {
        LayerSpec::Dense { inputs, units } => {
            let (gw, gb) = grad_params.split_at_mut(units * inputs);
            for u in 0..units {
                let g = grad_out[u];
                gb[u] += g;
                if g != 0.0 {
                    for (acc, x) in gw[u * inputs..(u + 1) * inputs].iter_mut().zip(input) {
                        *acc += g * x;
                    }
                }
            }
            need_input_grad.then(|| {
                let w = &params[..units * inputs];
                let mut gx = vec![0.0; inputs];
                for u in 0..units {
                    let g = grad_out[u];
                    if g != 0.0 {
                        for (acc, wv) in gx.iter_mut().zip(&w[u * inputs..(u + 1) * inputs]) {
                            *acc += g * wv;
                        }
                    }
                }
                gx
            })
        }
        LayerSpec::Conv2d { in_channels, filters, kernel, stride, padding } => {
            let (h, w) = (in_shape[1], in_shape[2]);
            let oh = (h + 2 * padding - kernel) / stride + 1;
            let ow = (w + 2 * padding - kernel) / stride + 1;
            let nw = filters * in_channels * kernel * kernel;
            let wt = &params[..nw];
            let (gw, gb) = grad_params.split_at_mut(nw);
            let mut gx = if need_input_grad { vec![0.0; input.len()] } else { Vec::new() };
            for f in 0..filters {
                let gplane = &grad_out[f * oh * ow..(f + 1) * oh * ow];
                gb[f] += gplane.iter().sum::<f64>();
                for c in 0..in_channels {
                    let src = &input[c * h * w..(c + 1) * h * w];
                    for ky in 0..kernel {
                        let (ylo, yhi) = valid_range(oh, h, stride, ky as isize - padding as isize);
                        for kx in 0..kernel {
                            let widx = ((f * in_channels + c) * kernel + ky) * kernel + kx;
                            let wv = wt[widx];
                            let xoff = kx as isize - padding as isize;
                            let (xlo, xhi) = valid_range(ow, w, stride, xoff);
                            if xlo >= xhi {
                                continue;
                            }
                            let mut acc = 0.0;
                            for oy in ylo..yhi {
                                let iy = oy * stride + ky - padding;
                                let grow = &gplane[oy * ow + xlo..oy * ow + xhi];
                                if stride == 1 {
                                    let ix0 = (xlo as isize + xoff) as usize;
                                    let base = iy * w + ix0;
                                    let seg = &src[base..base + (xhi - xlo)];
                                    acc += grow.iter().zip(seg).map(|(g, s)| g * s).sum::<f64>();
                                    if need_input_grad {
                                        let dst = &mut gx[c * h * w + base..c * h * w + base + (xhi - xlo)];
                                        for (d, g) in dst.iter_mut().zip(grow) {
                                            *d += wv * g;
                                        }
                                    }
                                } else {
                                    for (j, g) in grow.iter().enumerate() {
                                        let ix = (((xlo + j) * stride) as isize + xoff) as usize;
                                        acc += g * src[iy * w + ix];
                                        if need_input_grad {
                                            gx[c * h * w + iy * w + ix] += wv * g;
                                        }
                                    }
                                }
                            }
                            gw[widx] += acc;
                        }
                    }
                }
            }
            need_input_grad.then_some(gx)
        }
        LayerSpec::Relu => need_input_grad.then(|| input.iter().zip(grad_out).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 }).collect()),
        LayerSpec::Sigmoid => need_input_grad.then(|| output.iter().zip(grad_out).map(|(&y, &g)| g * y * (1.0 - y)).collect()),
        LayerSpec::Flatten => need_input_grad.then(|| grad_out.to_vec()),
        LayerSpec::Maxpool2d { size } => need_input_grad.then(|| {
            let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
            let (oh, ow) = (h / size, w / size);
            let mut gx = vec![0.0; input.len()];
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let (idx, _) = pool_argmax(input, ch, h, w, size, oy, ox);
                        gx[idx] += grad_out[(ch * oh + oy) * ow + ox];
                    }
                }
            }
            gx
        }),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
