use std::sync::Arc;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// One stage of a feed-forward network. Shapes are per batch entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Layer {
    /// Valid (unpadded) convolution over a `[C, H, W]` input.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        in_h: usize,
        in_w: usize,
    },
    Linear {
        inputs: usize,
        outputs: usize,
    },
    /// `x * sigmoid(x)`, elementwise.
    Silu {
        width: usize,
    },
}

impl Layer {
    pub fn conv_out_hw(&self) -> (usize, usize) {
        match *self {
            Layer::Conv2d {
                kernel,
                stride,
                in_h,
                in_w,
                ..
            } => ((in_h - kernel) / stride + 1, (in_w - kernel) / stride + 1),
            _ => (1, 1),
        }
    }

    pub fn num_params(&self) -> usize {
        match *self {
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => out_channels * in_channels * kernel * kernel + out_channels,
            Layer::Linear { inputs, outputs } => inputs * outputs + outputs,
            Layer::Silu { .. } => 0,
        }
    }

    pub fn in_len(&self) -> usize {
        match *self {
            Layer::Conv2d {
                in_channels,
                in_h,
                in_w,
                ..
            } => in_channels * in_h * in_w,
            Layer::Linear { inputs, .. } => inputs,
            Layer::Silu { width } => width,
        }
    }

    pub fn out_len(&self) -> usize {
        match *self {
            Layer::Conv2d { out_channels, .. } => {
                let (h, w) = self.conv_out_hw();
                out_channels * h * w
            }
            Layer::Linear { outputs, .. } => outputs,
            Layer::Silu { width } => width,
        }
    }

    /// Sizes of the weight block and the bias block inside the flat vector.
    pub fn param_blocks(&self) -> Vec<usize> {
        match *self {
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![out_channels * in_channels * kernel * kernel, out_channels],
            Layer::Linear { inputs, outputs } => vec![inputs * outputs, outputs],
            Layer::Silu { .. } => vec![],
        }
    }

    /// Fan-in used for initialization bounds.
    pub fn fan_in(&self) -> usize {
        match *self {
            Layer::Conv2d {
                in_channels, kernel, ..
            } => in_channels * kernel * kernel,
            Layer::Linear { inputs, .. } => inputs,
            Layer::Silu { .. } => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Arch {
    /// Per-sample input shape, e.g. `[3, 64, 64]` or `[128]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    offsets: Vec<usize>,
    num_params: usize,
}

impl Arch {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let mut width: usize = input_shape.iter().product();
        let mut offsets = Vec::with_capacity(layers.len());
        let mut total = 0;
        for (i, layer) in layers.iter().enumerate() {
            if layer.in_len() != width {
                return Err(Error::shape(
                    format!("layer {i} input of {}", layer.in_len()),
                    format!("{width} from the previous stage"),
                ));
            }
            if let Layer::Conv2d {
                kernel,
                stride,
                in_h,
                in_w,
                ..
            } = *layer
            {
                if kernel == 0 || stride == 0 || kernel > in_h || kernel > in_w {
                    return Err(Error::Config(format!("layer {i}: bad convolution geometry")));
                }
            }
            offsets.push(total);
            total += layer.num_params();
            width = layer.out_len();
        }
        Ok(Self {
            input_shape,
            layers,
            offsets,
            num_params: total,
        })
    }

    /// `[C, H, W]` images through SiLU convolutions, flattened, then a
    /// linear map to `embed_dim`. `convs` lists `(out_channels, kernel, stride)`.
    pub fn conv_encoder(
        channels: usize,
        height: usize,
        width: usize,
        convs: &[(usize, usize, usize)],
        embed_dim: usize,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let (mut c, mut h, mut w) = (channels, height, width);
        for &(out, k, s) in convs {
            if k > h || k > w {
                return Err(Error::Config(format!(
                    "kernel {k} does not fit a {h}x{w} feature map"
                )));
            }
            let conv = Layer::Conv2d {
                in_channels: c,
                out_channels: out,
                kernel: k,
                stride: s,
                in_h: h,
                in_w: w,
            };
            (h, w) = conv.conv_out_hw();
            c = out;
            layers.push(conv);
            layers.push(Layer::Silu { width: c * h * w });
        }
        layers.push(Layer::Linear {
            inputs: c * h * w,
            outputs: embed_dim,
        });
        Self::new(vec![channels, height, width], layers)
    }

    /// One hidden SiLU layer.
    pub fn mlp(inputs: usize, hidden: usize, outputs: usize) -> Result<Self> {
        Self::new(
            vec![inputs],
            vec![
                Layer::Linear {
                    inputs,
                    outputs: hidden,
                },
                Layer::Silu { width: hidden },
                Layer::Linear {
                    inputs: hidden,
                    outputs,
                },
            ],
        )
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().map_or(self.input_len(), Layer::out_len)
    }

    pub fn offset(&self, layer: usize) -> usize {
        self.offsets[layer]
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    batch: usize,
    saved: Vec<Vec<T>>,
}

impl<T> Tape<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Net<T> {
    pub arch: Arc<Arch>,
    pub params: Vec<T>,
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub(crate) fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

pub(crate) fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s + x * s * (T::one() - s)
}

pub(crate) fn silu_grad2<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    let two = T::one() + T::one();
    s * (T::one() - s) * (two + x * (T::one() - two * s))
}

fn im2col<T: Scalar>(x: &[T], layer: &Layer, cols: &mut [T]) {
    let Layer::Conv2d {
        in_channels,
        kernel,
        stride,
        in_h,
        in_w,
        ..
    } = *layer
    else {
        unreachable!()
    };
    let (oh, ow) = layer.conv_out_hw();
    let p = oh * ow;
    for c in 0..in_channels {
        let plane = &x[c * in_h * in_w..(c + 1) * in_h * in_w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let src = &plane[(oy * stride + ky) * in_w + kx..];
                    for ox in 0..ow {
                        dst[oy * ow + ox] = src[ox * stride];
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], layer: &Layer, dx: &mut [T]) {
    let Layer::Conv2d {
        in_channels,
        kernel,
        stride,
        in_h,
        in_w,
        ..
    } = *layer
    else {
        unreachable!()
    };
    let (oh, ow) = layer.conv_out_hw();
    let p = oh * ow;
    for c in 0..in_channels {
        let plane = &mut dx[c * in_h * in_w..(c + 1) * in_h * in_w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let base = (oy * stride + ky) * in_w + kx;
                    for ox in 0..ow {
                        plane[base + ox * stride] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Net<T> {
    pub fn zeros(arch: Arc<Arch>) -> Self {
        let n = arch.num_params();
        Self {
            arch,
            params: vec![T::zero(); n],
        }
    }

    pub fn cast<U: Scalar>(&self) -> Net<U> {
        Net {
            arch: self.arch.clone(),
            params: self.params.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let want = self.arch.input_len();
        if x.shape.is_empty() || x.row_len() != want {
            return Err(Error::shape(
                format!("[batch, {:?}]", self.arch.input_shape),
                format!("{:?}", x.shape),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(x, false).map(|(y, _)| y)
    }

    pub fn forward_tape(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tape<T>)> {
        self.run(x, true)
    }

    fn run(&self, x: &Tensor<T>, keep: bool) -> Result<(Tensor<T>, Tape<T>)> {
        self.check_input(x)?;
        let batch = x.batch();
        let mut cur = x.data.clone();
        let mut saved = Vec::with_capacity(if keep { self.arch.layers.len() } else { 0 });
        for (li, layer) in self.arch.layers.iter().enumerate() {
            let off = self.arch.offset(li);
            let (next, keep_buf) = match *layer {
                Layer::Conv2d {
                    out_channels, ..
                } => {
                    let k = layer.fan_in();
                    let (oh, ow) = layer.conv_out_hw();
                    let p = oh * ow;
                    let w = &self.params[off..off + out_channels * k];
                    let b = &self.params[off + out_channels * k..off + out_channels * k + out_channels];
                    let in_len = layer.in_len();
                    let out_len = layer.out_len();
                    let mut cols = vec![T::zero(); batch * k * p];
                    let mut out = vec![T::zero(); batch * out_len];
                    for n in 0..batch {
                        let cb = &mut cols[n * k * p..(n + 1) * k * p];
                        im2col(&cur[n * in_len..(n + 1) * in_len], layer, cb);
                        let ob = &mut out[n * out_len..(n + 1) * out_len];
                        for (o, chunk) in ob.chunks_mut(p).enumerate() {
                            chunk.fill(b[o]);
                        }
                        T::gemm(
                            out_channels,
                            k,
                            p,
                            T::one(),
                            w,
                            k as isize,
                            1,
                            cb,
                            p as isize,
                            1,
                            T::one(),
                            ob,
                            p as isize,
                            1,
                        );
                    }
                    (out, cols)
                }
                Layer::Linear { inputs, outputs } => {
                    let w = &self.params[off..off + inputs * outputs];
                    let b = &self.params[off + inputs * outputs..off + inputs * outputs + outputs];
                    let mut out = Vec::with_capacity(batch * outputs);
                    for _ in 0..batch {
                        out.extend_from_slice(b);
                    }
                    T::gemm(
                        batch,
                        inputs,
                        outputs,
                        T::one(),
                        &cur,
                        inputs as isize,
                        1,
                        w,
                        1,
                        inputs as isize,
                        T::one(),
                        &mut out,
                        outputs as isize,
                        1,
                    );
                    (out, std::mem::take(&mut cur))
                }
                Layer::Silu { .. } => {
                    let out = cur.iter().map(|&v| silu(v)).collect();
                    (out, std::mem::take(&mut cur))
                }
            };
            if keep {
                saved.push(keep_buf);
            }
            cur = next;
        }
        let mut shape = vec![batch];
        shape.push(self.arch.output_len());
        let y = Tensor::new(shape, cur)?;
        Ok((y, Tape { batch, saved }))
    }

    /// Accumulates parameter gradients of `sum(grad_out * y)` into
    /// `grad_params` and returns the input gradient when asked for.
    pub fn backward(
        &self,
        tape: &Tape<T>,
        grad_out: &[T],
        grad_params: &mut [T],
        want_input_grad: bool,
    ) -> Result<Option<Vec<T>>> {
        let batch = tape.batch;
        if grad_out.len() != batch * self.arch.output_len() {
            return Err(Error::shape(
                format!("{} output gradients", batch * self.arch.output_len()),
                grad_out.len(),
            ));
        }
        if grad_params.len() != self.params.len() {
            return Err(Error::shape(
                format!("{} parameter gradients", self.params.len()),
                grad_params.len(),
            ));
        }
        let mut g = grad_out.to_vec();
        let layers = &self.arch.layers;
        for li in (0..layers.len()).rev() {
            let layer = &layers[li];
            let need_dx = li > 0 || want_input_grad;
            let off = self.arch.offset(li);
            let saved = &tape.saved[li];
            g = match *layer {
                Layer::Conv2d { out_channels, .. } => {
                    let k = layer.fan_in();
                    let (oh, ow) = layer.conv_out_hw();
                    let p = oh * ow;
                    let in_len = layer.in_len();
                    let out_len = layer.out_len();
                    let w = &self.params[off..off + out_channels * k];
                    let (gw, rest) = grad_params[off..].split_at_mut(out_channels * k);
                    let gb = &mut rest[..out_channels];
                    let mut dx = if need_dx { vec![T::zero(); batch * in_len] } else { vec![] };
                    let mut dcols = if need_dx { vec![T::zero(); k * p] } else { vec![] };
                    for n in 0..batch {
                        let go = &g[n * out_len..(n + 1) * out_len];
                        let cb = &saved[n * k * p..(n + 1) * k * p];
                        T::gemm(
                            out_channels,
                            p,
                            k,
                            T::one(),
                            go,
                            p as isize,
                            1,
                            cb,
                            1,
                            p as isize,
                            T::one(),
                            gw,
                            k as isize,
                            1,
                        );
                        for (o, chunk) in go.chunks(p).enumerate() {
                            gb[o] += chunk.iter().copied().sum();
                        }
                        if need_dx {
                            T::gemm(
                                k,
                                out_channels,
                                p,
                                T::one(),
                                w,
                                1,
                                k as isize,
                                go,
                                p as isize,
                                1,
                                T::zero(),
                                &mut dcols,
                                p as isize,
                                1,
                            );
                            col2im_add(&dcols, layer, &mut dx[n * in_len..(n + 1) * in_len]);
                        }
                    }
                    dx
                }
                Layer::Linear { inputs, outputs } => {
                    let w = &self.params[off..off + inputs * outputs];
                    let (gw, rest) = grad_params[off..].split_at_mut(inputs * outputs);
                    let gb = &mut rest[..outputs];
                    T::gemm(
                        outputs,
                        batch,
                        inputs,
                        T::one(),
                        &g,
                        1,
                        outputs as isize,
                        saved,
                        inputs as isize,
                        1,
                        T::one(),
                        gw,
                        inputs as isize,
                        1,
                    );
                    for row in g.chunks(outputs) {
                        for (b, &v) in gb.iter_mut().zip(row) {
                            *b += v;
                        }
                    }
                    if need_dx {
                        let mut dx = vec![T::zero(); batch * inputs];
                        T::gemm(
                            batch,
                            outputs,
                            inputs,
                            T::one(),
                            &g,
                            outputs as isize,
                            1,
                            w,
                            inputs as isize,
                            1,
                            T::zero(),
                            &mut dx,
                            inputs as isize,
                            1,
                        );
                        dx
                    } else {
                        vec![]
                    }
                }
                Layer::Silu { .. } => g
                    .iter()
                    .zip(saved)
                    .map(|(&gv, &x)| gv * silu_grad(x))
                    .collect(),
            };
        }
        Ok(want_input_grad.then_some(g))
    }
}
