// SPDX-License-Identifier: MIT OR Apache-2.0

use ndarray::{Array2, Array3, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Mode, NnError, Param, Result};

fn check_shape(expected: &[usize], found: &[usize]) -> Result<()> {
    if expected != found {
        return Err(NnError::ShapeMismatch { expected: expected.to_vec(), found: found.to_vec() });
    }
    Ok(())
}

/// `y = x Wᵀ + b` with `W: [out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    /// Fan-in scaled uniform initialization.
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self { weight: Param::uniform(&[outputs, inputs], bound, rng), bias: Param::uniform(&[outputs], bound, rng) }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { weight: Param::zeros(&[outputs, inputs]), bias: Param::zeros(&[outputs]) }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        check_shape(&[x.nrows(), self.inputs()], x.shape())?;
        let mut y = x.dot(&self.weight.view2().t());
        y += &ArrayView1::from(&self.bias.value);
        Ok(y)
    }

    /// Accumulates parameter gradients for input `x`; returns `dL/dx`.
    pub fn backward(&mut self, x: &Array2<f64>, grad: &Array2<f64>) -> Array2<f64> {
        let dw = grad.t().dot(x);
        self.weight.grad2_mut().scaled_add(1.0, &dw);
        for (b, g) in self.bias.grad.iter_mut().zip(grad.sum_axis(Axis(0))) {
            *b += g;
        }
        grad.dot(&self.weight.view2())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
}

/// Affine layers with rectifiers between them (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
}

impl Mlp {
    /// `widths = [in, hidden.., out]`.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        Self { layers: widths.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect() }
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().expect("non-empty").outputs()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, MlpCache)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                out.mapv_inplace(|v| v.max(0.0));
            }
            inputs.push(h);
            h = out;
        }
        Ok((h, MlpCache { inputs }))
    }

    pub fn backward(&mut self, cache: &MlpCache, grad: &Array2<f64>) -> Array2<f64> {
        let mut g = grad.clone();
        for i in (0..self.layers.len()).rev() {
            g = self.layers[i].backward(&cache.inputs[i], &g);
            if i > 0 {
                // input of layer i is relu output of layer i-1
                ndarray::Zip::from(&mut g).and(&cache.inputs[i]).for_each(|g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
        }
        g
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }
}

/// Convolution over the time axis of `[batch, channels, length]` inputs
/// (a `(1, k)` kernel on the `[batch, channels, 1, length]` layout), no padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    /// `[out, in * kernel]`.
    pub weight: Param,
    pub bias: Param,
    pub in_channels: usize,
    pub kernel: usize,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Array2<f64>,
    batch: usize,
    len_in: usize,
    len_out: usize,
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut R) -> Self {
        let fan_in = in_channels * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: Param::uniform(&[out_channels, fan_in], bound, rng),
            bias: Param::uniform(&[out_channels], bound, rng),
            in_channels,
            kernel,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn forward(&self, x: &Array3<f64>) -> Result<(Array3<f64>, ConvCache)> {
        let (batch, cin, len_in) = x.dim();
        if cin != self.in_channels || len_in < self.kernel {
            return Err(NnError::ShapeMismatch {
                expected: vec![batch, self.in_channels, self.kernel.max(len_in)],
                found: x.shape().to_vec(),
            });
        }
        let k = self.kernel;
        let len_out = len_in - k + 1;
        let width = cin * k;
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().expect("standard layout");
        let mut cols = vec![0.0; batch * len_out * width];
        for n in 0..batch {
            for t in 0..len_out {
                let row = &mut cols[(n * len_out + t) * width..][..width];
                for c in 0..cin {
                    let src = &xs[(n * cin + c) * len_in + t..][..k];
                    row[c * k..(c + 1) * k].copy_from_slice(src);
                }
            }
        }
        let cols = Array2::from_shape_vec((batch * len_out, width), cols).expect("im2col shape");
        let flat = cols.dot(&self.weight.view2().t());
        let cout = self.out_channels();
        let mut out = Array3::zeros((batch, cout, len_out));
        for n in 0..batch {
            for o in 0..cout {
                let b = self.bias.value[o];
                let mut dst = out.slice_mut(ndarray::s![n, o, ..]);
                for t in 0..len_out {
                    dst[t] = flat[[n * len_out + t, o]] + b;
                }
            }
        }
        Ok((out, ConvCache { cols, batch, len_in, len_out }))
    }

    pub fn backward(&mut self, cache: &ConvCache, grad: &Array3<f64>, need_input: bool) -> Option<Array3<f64>> {
        let (batch, len_out, cout) = (cache.batch, cache.len_out, self.out_channels());
        let mut g2 = Array2::zeros((batch * len_out, cout));
        for n in 0..batch {
            for o in 0..cout {
                for t in 0..len_out {
                    g2[[n * len_out + t, o]] = grad[[n, o, t]];
                }
            }
        }
        let dw = g2.t().dot(&cache.cols);
        self.weight.grad2_mut().scaled_add(1.0, &dw);
        for (b, g) in self.bias.grad.iter_mut().zip(g2.sum_axis(Axis(0))) {
            *b += g;
        }
        if !need_input {
            return None;
        }
        let dcols = g2.dot(&self.weight.view2());
        let (cin, k, len_in) = (self.in_channels, self.kernel, cache.len_in);
        let mut dx = Array3::zeros((batch, cin, len_in));
        {
            let dxs = dx.as_slice_mut().expect("fresh array");
            let dc = dcols.as_slice().expect("fresh array");
            let width = cin * k;
            for n in 0..batch {
                for t in 0..len_out {
                    let row = &dc[(n * len_out + t) * width..][..width];
                    for c in 0..cin {
                        let dst = &mut dxs[(n * cin + c) * len_in + t..][..k];
                        for j in 0..k {
                            dst[j] += row[c * k + j];
                        }
                    }
                }
            }
        }
        Some(dx)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
}

/// Max pooling with kernel `(1, 2)` and stride 2; a trailing odd timestep is dropped.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MaxPool2;

#[derive(Debug, Clone)]
pub struct PoolCache {
    argmax: Vec<usize>,
    input_dim: (usize, usize, usize),
}

impl MaxPool2 {
    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, PoolCache) {
        let (n, c, len) = x.dim();
        let half = len / 2;
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().expect("standard layout");
        let mut out = Vec::with_capacity(n * c * half);
        let mut argmax = Vec::with_capacity(n * c * half);
        for row in 0..n * c {
            let base = row * len;
            for t in 0..half {
                let i = base + 2 * t;
                // ties go to the earlier timestep
                let pick = if xs[i + 1] > xs[i] { i + 1 } else { i };
                out.push(xs[pick]);
                argmax.push(pick);
            }
        }
        let out = Array3::from_shape_vec((n, c, half), out).expect("pool shape");
        (out, PoolCache { argmax, input_dim: (n, c, len) })
    }

    pub fn backward(&self, cache: &PoolCache, grad: &Array3<f64>) -> Array3<f64> {
        let mut dx = Array3::zeros(cache.input_dim);
        let dxs = dx.as_slice_mut().expect("fresh array");
        let gs = grad.as_standard_layout();
        for (&i, &g) in cache.argmax.iter().zip(gs.iter()) {
            dxs[i] += g;
        }
        dx
    }
}

/// Batch normalization over `[batch, channels, length]`, statistics per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    xhat: Array3<f64>,
    inv_std: Vec<f64>,
    mode: Mode,
}

impl BatchNorm {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        Self {
            gamma: Param::filled(&[channels], 1.0),
            beta: Param::zeros(&[channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
            eps,
        }
    }

    pub fn forward(&mut self, x: &Array3<f64>, mode: Mode) -> (Array3<f64>, BatchNormCache) {
        match mode {
            Mode::Eval => self.forward_eval(x),
            Mode::Train => self.forward_train(x),
        }
    }

    fn forward_train(&mut self, x: &Array3<f64>) -> (Array3<f64>, BatchNormCache) {
        let (n, c, len) = x.dim();
        let count = (n * len) as f64;
        let mut xhat = Array3::zeros((n, c, len));
        let mut out = Array3::zeros((n, c, len));
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let lane = x.index_axis(Axis(1), ch);
            let mean = lane.sum() / count;
            let var = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
            let is = 1.0 / (var + self.eps).sqrt();
            inv_std[ch] = is;
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            let mut xh = xhat.index_axis_mut(Axis(1), ch);
            let mut o = out.index_axis_mut(Axis(1), ch);
            ndarray::Zip::from(&mut xh).and(&mut o).and(&lane).for_each(|xh, o, &v| {
                *xh = (v - mean) * is;
                *o = g * *xh + b;
            });
            let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
            self.running_mean[ch] = (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean;
            self.running_var[ch] = (1.0 - self.momentum) * self.running_var[ch] + self.momentum * unbiased;
        }
        (out, BatchNormCache { xhat, inv_std, mode: Mode::Train })
    }

    pub fn forward_eval(&self, x: &Array3<f64>) -> (Array3<f64>, BatchNormCache) {
        let c = x.dim().1;
        let mut xhat = x.clone();
        let mut out = x.clone();
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let is = 1.0 / (self.running_var[ch] + self.eps).sqrt();
            inv_std[ch] = is;
            let mean = self.running_mean[ch];
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            let mut xh = xhat.index_axis_mut(Axis(1), ch);
            let mut o = out.index_axis_mut(Axis(1), ch);
            ndarray::Zip::from(&mut xh).and(&mut o).for_each(|xh, o| {
                *xh = (*xh - mean) * is;
                *o = g * *xh + b;
            });
        }
        (out, BatchNormCache { xhat, inv_std, mode: Mode::Eval })
    }

    pub fn backward(&mut self, cache: &BatchNormCache, grad: &Array3<f64>) -> Array3<f64> {
        let (n, c, len) = grad.dim();
        let count = (n * len) as f64;
        let mut dx = Array3::zeros((n, c, len));
        for ch in 0..c {
            let g = grad.index_axis(Axis(1), ch);
            let xh = cache.xhat.index_axis(Axis(1), ch);
            let sum_g: f64 = g.sum();
            let sum_gx: f64 = ndarray::Zip::from(&g).and(&xh).fold(0.0, |acc, &a, &b| acc + a * b);
            self.gamma.grad[ch] += sum_gx;
            self.beta.grad[ch] += sum_g;
            let gamma = self.gamma.value[ch];
            let is = cache.inv_std[ch];
            let mut d = dx.index_axis_mut(Axis(1), ch);
            match cache.mode {
                Mode::Eval => {
                    ndarray::Zip::from(&mut d).and(&g).for_each(|d, &g| *d = g * gamma * is);
                }
                Mode::Train => {
                    let k = gamma * is / count;
                    ndarray::Zip::from(&mut d).and(&g).and(&xh).for_each(|d, &g, &xh| {
                        *d = k * (count * g - sum_g - xh * sum_gx);
                    });
                }
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }
}

/// Shape and hyperparameters of the two-block convolutional feature net.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub in_channels: usize,
    pub window: usize,
    pub widths: [usize; 2],
    pub kernel: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl FeatureConfig {
    pub fn new(in_channels: usize, window: usize) -> Self {
        Self { in_channels, window, widths: [16, 32], kernel: 9, bn_momentum: 0.1, bn_eps: 1e-5 }
    }

    /// Time length after each block.
    pub fn block_lengths(&self) -> Result<[usize; 2]> {
        let mut len = self.window;
        let mut out = [0; 2];
        for slot in out.iter_mut() {
            if len < self.kernel {
                return Err(NnError::InvalidArch(format!(
                    "window {} too short for two blocks with kernel {}",
                    self.window, self.kernel
                )));
            }
            len = (len - self.kernel + 1) / 2;
            if len == 0 {
                return Err(NnError::InvalidArch(format!("window {} pools down to zero", self.window)));
            }
            *slot = len;
        }
        Ok(out)
    }

    pub fn output_dim(&self) -> Result<usize> {
        Ok(self.widths[1] * self.block_lengths()?[1])
    }
}

/// Two blocks of convolution → max-pool → batch norm → rectifier, flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    pub config: FeatureConfig,
    pub conv: [Conv1d; 2],
    pub norm: [BatchNorm; 2],
    pool: MaxPool2,
}

#[derive(Debug, Clone)]
pub struct FeatureCache {
    conv: [ConvCache; 2],
    pool: [PoolCache; 2],
    norm: [BatchNormCache; 2],
    activ: [Array3<f64>; 2],
}

impl FeatureExtractor {
    pub fn new<R: Rng + ?Sized>(config: FeatureConfig, rng: &mut R) -> Result<Self> {
        config.block_lengths()?;
        let [w1, w2] = config.widths;
        let conv = [Conv1d::new(config.in_channels, w1, config.kernel, rng), Conv1d::new(w1, w2, config.kernel, rng)];
        let norm = [
            BatchNorm::new(w1, config.bn_momentum, config.bn_eps),
            BatchNorm::new(w2, config.bn_momentum, config.bn_eps),
        ];
        Ok(Self { config, conv, norm, pool: MaxPool2 })
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim().expect("validated at construction")
    }

    fn check_input(&self, x: &Array3<f64>) -> Result<()> {
        let (n, c, w) = x.dim();
        check_shape(&[n, self.config.in_channels, self.config.window], &[n, c, w])
    }

    pub fn forward(&mut self, x: &Array3<f64>, mode: Mode) -> Result<(Array2<f64>, FeatureCache)> {
        self.check_input(x)?;
        let (c1, conv1) = self.conv[0].forward(x)?;
        let (p1, pool1) = self.pool.forward(&c1);
        let (b1, norm1) = self.norm[0].forward(&p1, mode);
        let a1 = b1.mapv(|v| v.max(0.0));
        let (c2, conv2) = self.conv[1].forward(&a1)?;
        let (p2, pool2) = self.pool.forward(&c2);
        let (b2, norm2) = self.norm[1].forward(&p2, mode);
        let a2 = b2.mapv(|v| v.max(0.0));
        let n = a2.dim().0;
        let flat = a2.clone().into_shape_with_order((n, self.output_dim())).expect("contiguous");
        let cache = FeatureCache { conv: [conv1, conv2], pool: [pool1, pool2], norm: [norm1, norm2], activ: [a1, a2] };
        Ok((flat, cache))
    }

    /// Inference-mode forward pass that leaves all state untouched.
    pub fn forward_eval(&self, x: &Array3<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let (c1, _) = self.conv[0].forward(x)?;
        let (p1, _) = self.pool.forward(&c1);
        let (b1, _) = self.norm[0].forward_eval(&p1);
        let a1 = b1.mapv(|v| v.max(0.0));
        let (c2, _) = self.conv[1].forward(&a1)?;
        let (p2, _) = self.pool.forward(&c2);
        let (b2, _) = self.norm[1].forward_eval(&p2);
        let n = b2.dim().0;
        Ok(b2.mapv(|v| v.max(0.0)).into_shape_with_order((n, self.output_dim())).expect("contiguous"))
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(&mut self, cache: &FeatureCache, grad: &Array2<f64>, need_input: bool) -> Option<Array3<f64>> {
        let shape = cache.activ[1].raw_dim();
        let mut g = grad.clone().into_shape_with_order(shape).expect("flattened features");
        relu_mask(&mut g, &cache.activ[1]);
        let g = self.norm[1].backward(&cache.norm[1], &g);
        let g = self.pool.backward(&cache.pool[1], &g);
        let mut g = self.conv[1].backward(&cache.conv[1], &g, true).expect("requested");
        relu_mask(&mut g, &cache.activ[0]);
        let g = self.norm[0].backward(&cache.norm[0], &g);
        let g = self.pool.backward(&cache.pool[0], &g);
        self.conv[0].backward(&cache.conv[0], &g, need_input)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let [c1, c2] = &mut self.conv;
        let [n1, n2] = &mut self.norm;
        let mut out = c1.params_mut();
        out.extend(n1.params_mut());
        out.extend(c2.params_mut());
        out.extend(n2.params_mut());
        out
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.conv[0].params();
        out.extend(self.norm[0].params());
        out.extend(self.conv[1].params());
        out.extend(self.norm[1].params());
        out
    }
}

fn relu_mask(grad: &mut Array3<f64>, activ: &Array3<f64>) {
    ndarray::Zip::from(grad).and(activ).for_each(|g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
}
