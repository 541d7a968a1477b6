//! Layer primitives with explicit forward and reverse passes.
//!
//! Inputs are batch-major. Image tensors use `(N, H, W, C)` layout; dense
//! layers take `(N, features)`. Convolution is lowered to a matrix product
//! over im2col patches whose columns are ordered `(ky, kx, c)`, matching the
//! row order of the `(k, k, in_c, out_c)` weight tensor.

use crate::error::{Error, Result};
use crate::tensor::{gemm_a_bt_acc, gemm_acc, gemm_at_b_acc, softmax_rows, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Softmax,
}

impl Activation {
    pub fn code(self) -> u32 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
            Activation::Softmax => 2,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::Relu),
            2 => Ok(Activation::Softmax),
            other => Err(Error::Format(format!("unknown activation code {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Softmax => "softmax",
        }
    }
}

/// Affine map `x · W + b` with `W` stored as `(in, out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.shape()[1]] {
            return Err(Error::Shape(format!(
                "dense weight {:?} / bias {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Dense { weight, bias })
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    /// `(k, k, in_channels, out_channels)`
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 4 || s[0] != s[1] || bias.shape() != [s[3]] || stride == 0 {
            return Err(Error::Shape(format!(
                "conv weight {:?} / bias {:?} / stride {stride}",
                s,
                bias.shape()
            )));
        }
        Ok(Conv2d { weight, bias, stride, padding })
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[3]
    }

    fn geometry(&self, input: &[usize]) -> Result<ConvGeometry> {
        let [h, w, c] = image_dims(input)?;
        let k = self.kernel();
        if c != self.in_channels() {
            return Err(Error::Shape(format!("conv expects {} channels, got {c}", self.in_channels())));
        }
        if h + 2 * self.padding < k || w + 2 * self.padding < k {
            return Err(Error::Shape(format!("kernel {k} larger than padded input {h}x{w}")));
        }
        Ok(ConvGeometry {
            h,
            w,
            c,
            k,
            stride: self.stride,
            pad: self.padding,
            oh: (h + 2 * self.padding - k) / self.stride + 1,
            ow: (w + 2 * self.padding - k) / self.stride + 1,
        })
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.k * self.k * self.c
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Visit `(patch column, input offset)` pairs of the patch at output
    /// position `(oy, ox)`; padded positions are skipped.
    fn for_each_tap(&self, oy: usize, ox: usize, mut f: impl FnMut(usize, usize)) {
        for ky in 0..self.k {
            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
            if iy < 0 || iy >= self.h as isize {
                continue;
            }
            for kx in 0..self.k {
                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                if ix < 0 || ix >= self.w as isize {
                    continue;
                }
                let base = (iy as usize * self.w + ix as usize) * self.c;
                let col = (ky * self.k + kx) * self.c;
                for ch in 0..self.c {
                    f(col + ch, base + ch);
                }
            }
        }
    }
}

/// Lower a batch of images into a `(N·OH·OW, k·k·C)` patch matrix.
fn im2col(x: &Tensor, g: &ConvGeometry) -> Vec<f64> {
    let n = x.batch();
    let cols = g.patch_len();
    let mut out = vec![0.0; n * g.positions() * cols];
    for s in 0..n {
        let img = x.row(s);
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = (s * g.positions() + oy * g.ow + ox) * cols;
                let dst = &mut out[row..row + cols];
                g.for_each_tap(oy, ox, |col, off| dst[col] = img[off]);
            }
        }
    }
    out
}

/// Scatter-add a patch matrix back onto image positions.
fn col2im(patches: &[f64], n: usize, g: &ConvGeometry) -> Vec<f64> {
    let cols = g.patch_len();
    let img_len = g.h * g.w * g.c;
    let mut out = vec![0.0; n * img_len];
    for s in 0..n {
        let img = &mut out[s * img_len..(s + 1) * img_len];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = (s * g.positions() + oy * g.ow + ox) * cols;
                let src = &patches[row..row + cols];
                g.for_each_tap(oy, ox, |col, off| img[off] += src[col]);
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pool2d {
    pub size: usize,
    pub stride: usize,
}

impl Pool2d {
    fn geometry(&self, input: &[usize]) -> Result<[usize; 5]> {
        let [h, w, c] = image_dims(input)?;
        if self.size == 0 || self.stride == 0 || h < self.size || w < self.size {
            return Err(Error::Shape(format!("pool {self:?} on {h}x{w}")));
        }
        Ok([h, w, c, (h - self.size) / self.stride + 1, (w - self.size) / self.stride + 1])
    }

    /// Visit `(output offset, input offset)` for every window member.
    fn for_each_window(&self, input: &[usize], mut f: impl FnMut(usize, usize)) -> Result<()> {
        let [_, w, c, oh, ow] = self.geometry(input)?;
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..self.size {
                    for kx in 0..self.size {
                        let iy = oy * self.stride + ky;
                        let ix = ox * self.stride + kx;
                        for ch in 0..c {
                            f((oy * ow + ox) * c + ch, (iy * w + ix) * c + ch);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// For every output element of one sample, the input offset of the window
    /// maximum. Ties go to the first member in row-major window order.
    pub(crate) fn argmax(&self, input_shape: &[usize], sample: &[f64]) -> Result<Vec<usize>> {
        let [_, _, c, oh, ow] = self.geometry(input_shape)?;
        let mut best = vec![usize::MAX; oh * ow * c];
        self.for_each_window(input_shape, |o, i| {
            if best[o] == usize::MAX || sample[i] > sample[best[o]] {
                best[o] = i;
            }
        })?;
        Ok(best)
    }

    /// `(output offset, input offset)` pairs of one sample.
    pub(crate) fn window_pairs(&self, input_shape: &[usize]) -> Result<Vec<(usize, usize)>> {
        let mut pairs = Vec::new();
        self.for_each_window(input_shape, |o, i| pairs.push((o, i)))?;
        Ok(pairs)
    }
}

fn image_dims(shape: &[usize]) -> Result<[usize; 3]> {
    match *shape {
        [h, w, c] => Ok([h, w, c]),
        _ => Err(Error::Shape(format!("expected (H, W, C) input, got {shape:?}"))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    AvgPool2d(Pool2d),
    MaxPool2d(Pool2d),
    Flatten,
    Activation(Activation),
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2d(_) => "conv2d",
            Layer::AvgPool2d(_) => "avgpool2d",
            Layer::MaxPool2d(_) => "maxpool2d",
            Layer::Flatten => "flatten",
            Layer::Activation(_) => "activation",
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Dense(d) => {
                if input != [d.inputs()] {
                    return Err(Error::Shape(format!(
                        "dense expects [{}], got {input:?}",
                        d.inputs()
                    )));
                }
                Ok(vec![d.outputs()])
            }
            Layer::Conv2d(conv) => {
                let g = conv.geometry(input)?;
                Ok(vec![g.oh, g.ow, conv.out_channels()])
            }
            Layer::AvgPool2d(p) | Layer::MaxPool2d(p) => {
                let [_, _, c, oh, ow] = p.geometry(input)?;
                Ok(vec![oh, ow, c])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Activation(_) => Ok(input.to_vec()),
        }
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense(d) => vec![&d.weight, &d.bias],
            Layer::Conv2d(c) => vec![&c.weight, &c.bias],
            _ => Vec::new(),
        }
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            Layer::Conv2d(c) => vec![&mut c.weight, &mut c.bias],
            _ => Vec::new(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.batch();
        let in_shape = &x.shape()[1..];
        let out_shape = self.output_shape(in_shape)?;
        let mut full_shape = vec![n];
        full_shape.extend_from_slice(&out_shape);
        let data = match self {
            Layer::Dense(d) => {
                let (fi, fo) = (d.inputs(), d.outputs());
                let mut out = Vec::with_capacity(n * fo);
                for _ in 0..n {
                    out.extend_from_slice(d.bias.data());
                }
                gemm_acc(x.data(), d.weight.data(), &mut out, n, fi, fo);
                out
            }
            Layer::Conv2d(conv) => {
                let g = conv.geometry(in_shape)?;
                let patches = im2col(x, &g);
                let rows = n * g.positions();
                let oc = conv.out_channels();
                let mut out = Vec::with_capacity(rows * oc);
                for _ in 0..rows {
                    out.extend_from_slice(conv.bias.data());
                }
                gemm_acc(&patches, conv.weight.data(), &mut out, rows, g.patch_len(), oc);
                out
            }
            Layer::AvgPool2d(p) => {
                let pairs = p.window_pairs(in_shape)?;
                let out_len: usize = out_shape.iter().product();
                let scale = 1.0 / (p.size * p.size) as f64;
                let mut out = vec![0.0; n * out_len];
                for s in 0..n {
                    let src = x.row(s);
                    let dst = &mut out[s * out_len..(s + 1) * out_len];
                    for &(o, i) in &pairs {
                        dst[o] += src[i] * scale;
                    }
                }
                out
            }
            Layer::MaxPool2d(p) => {
                let mut out = Vec::with_capacity(n * out_shape.iter().product::<usize>());
                for s in 0..n {
                    let src = x.row(s);
                    out.extend(p.argmax(in_shape, src)?.into_iter().map(|i| src[i]));
                }
                out
            }
            Layer::Flatten => x.data().to_vec(),
            Layer::Activation(a) => match a {
                Activation::Tanh => x.data().iter().map(|v| v.tanh()).collect(),
                Activation::Relu => x.data().iter().map(|v| v.max(0.0)).collect(),
                Activation::Softmax => softmax_rows(x.data(), x.row_len()),
            },
        };
        Tensor::new(full_shape, data)
    }

    /// Reverse pass. Given the layer input `x`, its output `y` and the
    /// upstream gradient `dy`, returns the input gradient and (when
    /// `want_params`) gradients for [`Layer::parameters`] in order.
    pub fn backward(
        &self,
        x: &Tensor,
        y: &Tensor,
        dy: &Tensor,
        want_params: bool,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        if dy.shape() != y.shape() {
            return Err(Error::Shape(format!("gradient {:?} vs output {:?}", dy.shape(), y.shape())));
        }
        let n = x.batch();
        let in_shape = &x.shape()[1..];
        let mut dx = vec![0.0; x.len()];
        let mut dparams = Vec::new();
        match self {
            Layer::Dense(d) => {
                let (fi, fo) = (d.inputs(), d.outputs());
                gemm_a_bt_acc(dy.data(), d.weight.data(), &mut dx, n, fo, fi);
                if want_params {
                    let mut dw = vec![0.0; fi * fo];
                    gemm_at_b_acc(x.data(), dy.data(), &mut dw, n, fi, fo);
                    dparams.push(Tensor::new(vec![fi, fo], dw)?);
                    dparams.push(Tensor::vector(column_sums(dy.data(), fo)));
                }
            }
            Layer::Conv2d(conv) => {
                let g = conv.geometry(in_shape)?;
                let rows = n * g.positions();
                let (q, oc) = (g.patch_len(), conv.out_channels());
                let mut dpatches = vec![0.0; rows * q];
                gemm_a_bt_acc(dy.data(), conv.weight.data(), &mut dpatches, rows, oc, q);
                dx = col2im(&dpatches, n, &g);
                if want_params {
                    let patches = im2col(x, &g);
                    let mut dw = vec![0.0; q * oc];
                    gemm_at_b_acc(&patches, dy.data(), &mut dw, rows, q, oc);
                    dparams.push(Tensor::new(conv.weight.shape().to_vec(), dw)?);
                    dparams.push(Tensor::vector(column_sums(dy.data(), oc)));
                }
            }
            Layer::AvgPool2d(p) => {
                let pairs = p.window_pairs(in_shape)?;
                let scale = 1.0 / (p.size * p.size) as f64;
                let (il, ol) = (x.row_len(), y.row_len());
                for s in 0..n {
                    let g = &dy.data()[s * ol..(s + 1) * ol];
                    let d = &mut dx[s * il..(s + 1) * il];
                    for &(o, i) in &pairs {
                        d[i] += g[o] * scale;
                    }
                }
            }
            Layer::MaxPool2d(p) => {
                let (il, ol) = (x.row_len(), y.row_len());
                for s in 0..n {
                    let winners = p.argmax(in_shape, x.row(s))?;
                    let g = &dy.data()[s * ol..(s + 1) * ol];
                    let d = &mut dx[s * il..(s + 1) * il];
                    for (o, &i) in winners.iter().enumerate() {
                        d[i] += g[o];
                    }
                }
            }
            Layer::Flatten => dx.copy_from_slice(dy.data()),
            Layer::Activation(a) => match a {
                Activation::Tanh => {
                    for ((d, &g), &out) in dx.iter_mut().zip(dy.data()).zip(y.data()) {
                        *d = g * (1.0 - out * out);
                    }
                }
                Activation::Relu => {
                    // subgradient 0 at the kink
                    for ((d, &g), &inp) in dx.iter_mut().zip(dy.data()).zip(x.data()) {
                        *d = if inp > 0.0 { g } else { 0.0 };
                    }
                }
                Activation::Softmax => {
                    let k = y.row_len();
                    for ((d, g), p) in dx.chunks_mut(k).zip(dy.data().chunks(k)).zip(y.data().chunks(k)) {
                        let dot: f64 = g.iter().zip(p).map(|(a, b)| a * b).sum();
                        for ((dv, &gv), &pv) in d.iter_mut().zip(g).zip(p) {
                            *dv = pv * (gv - dot);
                        }
                    }
                }
            },
        }
        Ok((Tensor::new(x.shape().to_vec(), dx)?, dparams))
    }
}

fn column_sums(m: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in m.chunks(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}
