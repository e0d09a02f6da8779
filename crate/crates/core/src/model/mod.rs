//! Compact differentiable classifiers with manual layer-by-layer
//! backpropagation.
//!
//! Two reference architectures are shipped: an MLP
//! (flatten -> dense 128 -> relu -> dense K) and a TinyCNN
//! (two conv/relu/maxpool blocks followed by a dense head). No batch norm,
//! no dropout; the stack is plain enough that every gradient is checkable
//! by finite differences.

mod kernels;
pub use kernels::ConvDims;

pub mod checkpoint;
pub mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use optim::{cosine_lr, OptimizerState};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Element, Tensor};

/// Architecture descriptor: what a stack is, minus its weights.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerCfg {
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool2d,
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub layers: Vec<LayerCfg>,
}

impl Arch {
    /// flatten -> dense(hidden) -> relu -> dense(classes)
    pub fn mlp(input: (usize, usize, usize), hidden: usize, classes: usize) -> Arch {
        let (c, h, w) = input;
        Arch {
            layers: vec![
                LayerCfg::Flatten,
                LayerCfg::Dense {
                    in_dim: c * h * w,
                    out_dim: hidden,
                },
                LayerCfg::Relu,
                LayerCfg::Dense {
                    in_dim: hidden,
                    out_dim: classes,
                },
            ],
        }
    }

    /// conv3x3(16) -> relu -> pool -> conv3x3(32) -> relu -> pool -> flatten -> dense(classes)
    ///
    /// Input height and width must be divisible by 4.
    pub fn tiny_cnn(input: (usize, usize, usize), classes: usize) -> Result<Arch> {
        let (c, h, w) = input;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "tiny_cnn input {h}x{w} must be divisible by 4"
            )));
        }
        Ok(Arch {
            layers: vec![
                LayerCfg::Conv2d {
                    in_ch: c,
                    out_ch: 16,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
                LayerCfg::Relu,
                LayerCfg::MaxPool2d,
                LayerCfg::Conv2d {
                    in_ch: 16,
                    out_ch: 32,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
                LayerCfg::Relu,
                LayerCfg::MaxPool2d,
                LayerCfg::Flatten,
                LayerCfg::Dense {
                    in_dim: (h / 4) * (w / 4) * 32,
                    out_dim: classes,
                },
            ],
        })
    }
}

#[derive(Debug, Clone)]
enum Layer<T: Element> {
    Dense {
        w: Tensor<T>,
        b: Tensor<T>,
    },
    Conv2d {
        w: Tensor<T>,
        b: Tensor<T>,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool2d,
    Flatten,
}

impl<T: Element> Layer<T> {
    fn kind(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::Relu => "relu",
            Layer::MaxPool2d => "maxpool2d",
            Layer::Flatten => "flatten",
        }
    }
}

#[derive(Debug, Clone)]
enum Cache<T: Element> {
    Input(Tensor<T>),
    Pool {
        in_shape: Vec<usize>,
        argmax: Vec<usize>,
    },
    Shape(Vec<usize>),
}

/// Per-layer forward activations retained for one backward pass.
#[derive(Debug, Clone)]
pub struct Trace<T: Element> {
    caches: Vec<Cache<T>>,
    logits_shape: Vec<usize>,
}

/// Ordered differentiable layers with parameters.
#[derive(Debug, Clone)]
pub struct LayerStack<T: Element = f32> {
    layers: Vec<Layer<T>>,
    trace: Option<Trace<T>>,
}

fn shape_err(i: usize, kind: &str, msg: String) -> Error {
    Error::ShapeMismatch(format!("layer {i} ({kind}): {msg}"))
}

impl<T: Element> LayerStack<T> {
    fn build(arch: &Arch, mut init: impl FnMut(usize, &[usize]) -> Tensor<T>) -> Result<Self> {
        if arch.layers.is_empty() {
            return Err(Error::InvalidArgument("empty architecture".into()));
        }
        let layers = arch
            .layers
            .iter()
            .map(|cfg| match *cfg {
                LayerCfg::Dense { in_dim, out_dim } => Layer::Dense {
                    w: init(in_dim, &[out_dim, in_dim]),
                    b: Tensor::zeros(&[out_dim]),
                },
                LayerCfg::Conv2d {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    pad,
                } => Layer::Conv2d {
                    w: init(in_ch * kernel * kernel, &[out_ch, in_ch, kernel, kernel]),
                    b: Tensor::zeros(&[out_ch]),
                    stride,
                    pad,
                },
                LayerCfg::Relu => Layer::Relu,
                LayerCfg::MaxPool2d => Layer::MaxPool2d,
                LayerCfg::Flatten => Layer::Flatten,
            })
            .collect();
        Ok(Self {
            layers,
            trace: None,
        })
    }

    /// Kaiming-uniform fan-in weights, zero biases.
    pub fn init(arch: &Arch, rng: &mut SeededRng) -> Result<Self> {
        Self::build(arch, |fan_in, shape| {
            let bound = (6.0 / fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| T::from_f64(rng.uniform_range(-bound, bound)))
        })
    }

    pub fn zeroed(arch: &Arch) -> Result<Self> {
        Self::build(arch, |_, shape| Tensor::zeros(shape))
    }

    pub fn arch(&self) -> Arch {
        Arch {
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Dense { w, .. } => LayerCfg::Dense {
                        in_dim: w.shape()[1],
                        out_dim: w.shape()[0],
                    },
                    Layer::Conv2d { w, stride, pad, .. } => LayerCfg::Conv2d {
                        in_ch: w.shape()[1],
                        out_ch: w.shape()[0],
                        kernel: w.shape()[2],
                        stride: *stride,
                        pad: *pad,
                    },
                    Layer::Relu => LayerCfg::Relu,
                    Layer::MaxPool2d => LayerCfg::MaxPool2d,
                    Layer::Flatten => LayerCfg::Flatten,
                })
                .collect(),
        }
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Dense { w, b } | Layer::Conv2d { w, b, .. } => {
                    out.push(w);
                    out.push(b);
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Dense { w, b } | Layer::Conv2d { w, b, .. } => {
                    out.push(w);
                    out.push(b);
                }
                _ => {}
            }
        }
        out
    }

    /// Stable parameter names, aligned with `params()` order.
    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                Layer::Dense { .. } | Layer::Conv2d { .. } => {
                    out.push(format!("l{i}.w"));
                    out.push(format!("l{i}.b"));
                }
                _ => {}
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn cast<U: Element>(&self) -> LayerStack<U> {
        LayerStack {
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Dense { w, b } => Layer::Dense {
                        w: w.cast(),
                        b: b.cast(),
                    },
                    Layer::Conv2d { w, b, stride, pad } => Layer::Conv2d {
                        w: w.cast(),
                        b: b.cast(),
                        stride: *stride,
                        pad: *pad,
                    },
                    Layer::Relu => Layer::Relu,
                    Layer::MaxPool2d => Layer::MaxPool2d,
                    Layer::Flatten => Layer::Flatten,
                })
                .collect(),
            trace: None,
        }
    }

    fn forward_layer(
        &self,
        i: usize,
        x: &Tensor<T>,
        want_cache: bool,
    ) -> Result<(Tensor<T>, Option<Cache<T>>)> {
        let layer = &self.layers[i];
        match layer {
            Layer::Dense { w, b } => {
                if x.rank() != 2 || x.shape()[1] != w.shape()[1] {
                    return Err(shape_err(
                        i,
                        layer.kind(),
                        format!("expected [N,{}], got {:?}", w.shape()[1], x.shape()),
                    ));
                }
                let (n, in_dim, out_dim) = (x.shape()[0], w.shape()[1], w.shape()[0]);
                let mut out = Tensor::zeros(&[n, out_dim]);
                kernels::dense_forward(
                    x.data(),
                    w.data(),
                    b.data(),
                    n,
                    in_dim,
                    out_dim,
                    out.data_mut(),
                );
                Ok((out, want_cache.then(|| Cache::Input(x.clone()))))
            }
            Layer::Conv2d { w, b, stride, pad } => {
                if x.rank() != 4 || x.shape()[1] != w.shape()[1] {
                    return Err(shape_err(
                        i,
                        layer.kind(),
                        format!(
                            "expected [N,{},H,W], got {:?}",
                            w.shape()[1],
                            x.shape()
                        ),
                    ));
                }
                let d = ConvDims {
                    c_in: x.shape()[1],
                    h: x.shape()[2],
                    w: x.shape()[3],
                    c_out: w.shape()[0],
                    k: w.shape()[2],
                    stride: *stride,
                    pad: *pad,
                };
                if d.h + 2 * d.pad < d.k || d.w + 2 * d.pad < d.k {
                    return Err(shape_err(
                        i,
                        layer.kind(),
                        format!("input {}x{} smaller than kernel {}", d.h, d.w, d.k),
                    ));
                }
                let n = x.shape()[0];
                let (oh, ow) = (d.out_h(), d.out_w());
                let mut out = Tensor::zeros(&[n, d.c_out, oh, ow]);
                let out_item = d.c_out * oh * ow;
                out.data_mut()
                    .par_chunks_mut(out_item)
                    .enumerate()
                    .for_each(|(item, slab)| {
                        kernels::conv_forward_item(x.item(item), w.data(), b.data(), &d, slab);
                    });
                Ok((out, want_cache.then(|| Cache::Input(x.clone()))))
            }
            Layer::Relu => {
                let out = x.map(|v| if v > T::zero() { v } else { T::zero() });
                Ok((out, want_cache.then(|| Cache::Input(x.clone()))))
            }
            Layer::MaxPool2d => {
                if x.rank() != 4 || x.shape()[2] < 2 || x.shape()[3] < 2 {
                    return Err(shape_err(
                        i,
                        layer.kind(),
                        format!("expected [N,C,H>=2,W>=2], got {:?}", x.shape()),
                    ));
                }
                let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let (oh, ow) = (h / 2, w / 2);
                let mut out = Tensor::zeros(&[n, c, oh, ow]);
                let mut argmax = vec![0usize; n * c * oh * ow];
                let out_item = c * oh * ow;
                out.data_mut()
                    .par_chunks_mut(out_item)
                    .zip(argmax.par_chunks_mut(out_item))
                    .enumerate()
                    .for_each(|(item, (slab, amax))| {
                        kernels::maxpool_forward_item(x.item(item), c, h, w, slab, amax);
                    });
                let cache = want_cache.then(|| Cache::Pool {
                    in_shape: x.shape().to_vec(),
                    argmax,
                });
                Ok((out, cache))
            }
            Layer::Flatten => {
                if x.rank() < 2 {
                    return Err(shape_err(
                        i,
                        layer.kind(),
                        format!("expected [N,...], got {:?}", x.shape()),
                    ));
                }
                let n = x.shape()[0];
                let flat = x.item_len();
                let out = x.clone().reshape(&[n, flat])?;
                Ok((out, want_cache.then(|| Cache::Shape(x.shape().to_vec()))))
            }
        }
    }

    /// Pure forward pass; no caches are built or touched.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for i in 0..self.layers.len() {
            cur = self.forward_layer(i, &cur, false)?.0;
        }
        Ok(cur)
    }

    /// Forward pass returning the activations needed for [`Self::backward_traced`].
    pub fn forward_traced(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Trace<T>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for i in 0..self.layers.len() {
            let (next, cache) = self.forward_layer(i, &cur, true)?;
            caches.push(cache.expect("cache requested"));
            cur = next;
        }
        let logits_shape = cur.shape().to_vec();
        Ok((cur, Trace {
            caches,
            logits_shape,
        }))
    }

    /// Stateful forward: retains caches only in train mode.
    pub fn forward(&mut self, x: &Tensor<T>, train_mode: bool) -> Result<Tensor<T>> {
        if train_mode {
            let (logits, trace) = self.forward_traced(x)?;
            self.trace = Some(trace);
            Ok(logits)
        } else {
            self.trace = None;
            self.infer(x)
        }
    }

    /// Stateful backward against the most recent train-mode forward.
    /// Consumes the stored trace; errors if there is none.
    pub fn backward(&mut self, upstream: &Tensor<T>) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
        let trace = self.trace.take().ok_or(Error::BackwardBeforeForward)?;
        self.backward_traced(&trace, upstream)
    }

    /// Gradients of `sum(upstream ⊙ logits)` w.r.t. every parameter (in
    /// `params()` order) and w.r.t. the stack input.
    pub fn backward_traced(
        &self,
        trace: &Trace<T>,
        upstream: &Tensor<T>,
    ) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
        let (grads, dx) = self.backward_impl(trace, upstream, true)?;
        Ok((grads.expect("param grads requested"), dx))
    }

    /// Input gradient only; parameter-gradient work is skipped entirely.
    /// This is the attack-loop path.
    pub fn input_grad_traced(&self, trace: &Trace<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.backward_impl(trace, upstream, false)?.1)
    }

    fn backward_impl(
        &self,
        trace: &Trace<T>,
        upstream: &Tensor<T>,
        want_params: bool,
    ) -> Result<(Option<Vec<Tensor<T>>>, Tensor<T>)> {
        if upstream.shape() != trace.logits_shape.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "upstream {:?} does not match traced logits {:?}",
                upstream.shape(),
                trace.logits_shape
            )));
        }
        let mut param_grads: Vec<Option<(Tensor<T>, Tensor<T>)>> = Vec::new();
        let mut dy = upstream.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let cache = &trace.caches[i];
            match (layer, cache) {
                (Layer::Dense { w, .. }, Cache::Input(x)) => {
                    let (n, in_dim, out_dim) = (x.shape()[0], w.shape()[1], w.shape()[0]);
                    let mut dx = Tensor::zeros(x.shape());
                    let mut dw = Tensor::zeros(w.shape());
                    let mut db = Tensor::zeros(&[out_dim]);
                    kernels::dense_backward(
                        x.data(),
                        w.data(),
                        dy.data(),
                        n,
                        in_dim,
                        out_dim,
                        dx.data_mut(),
                        want_params.then(|| (dw.data_mut(), db.data_mut())),
                    );
                    param_grads.push(Some((dw, db)));
                    dy = dx;
                }
                (Layer::Conv2d { w, stride, pad, .. }, Cache::Input(x)) => {
                    let d = ConvDims {
                        c_in: x.shape()[1],
                        h: x.shape()[2],
                        w: x.shape()[3],
                        c_out: w.shape()[0],
                        k: w.shape()[2],
                        stride: *stride,
                        pad: *pad,
                    };
                    let mut dx = Tensor::zeros(x.shape());
                    let in_item = d.c_in * d.h * d.w;
                    // Per-item weight grads, reduced sequentially afterwards
                    // so results do not depend on thread count.
                    let per_item: Vec<Option<(Vec<T>, Vec<T>)>> = dx
                        .data_mut()
                        .par_chunks_mut(in_item)
                        .enumerate()
                        .map(|(item, dx_slab)| {
                            let mut acc = want_params
                                .then(|| (vec![T::zero(); w.len()], vec![T::zero(); d.c_out]));
                            kernels::conv_backward_item(
                                x.item(item),
                                w.data(),
                                dy.item(item),
                                &d,
                                dx_slab,
                                acc.as_mut().map(|(dw, db)| {
                                    (dw.as_mut_slice(), db.as_mut_slice())
                                }),
                            );
                            acc
                        })
                        .collect();
                    let mut dw = Tensor::zeros(w.shape());
                    let mut db = Tensor::zeros(&[d.c_out]);
                    for (iw, ib) in per_item.into_iter().flatten() {
                        for (a, b) in dw.data_mut().iter_mut().zip(iw) {
                            *a += b;
                        }
                        for (a, b) in db.data_mut().iter_mut().zip(ib) {
                            *a += b;
                        }
                    }
                    param_grads.push(Some((dw, db)));
                    dy = dx;
                }
                (Layer::Relu, Cache::Input(x)) => {
                    dy = dy.zip_map(x, |g, v| if v > T::zero() { g } else { T::zero() })?;
                    param_grads.push(None);
                }
                (Layer::MaxPool2d, Cache::Pool { in_shape, argmax }) => {
                    let mut dx = Tensor::zeros(in_shape);
                    let il = dx.item_len();
                    let ol = dy.item_len();
                    for (o, &src) in argmax.iter().enumerate() {
                        dx.data_mut()[(o / ol) * il + src] += dy.data()[o];
                    }
                    param_grads.push(None);
                    dy = dx;
                }
                (Layer::Flatten, Cache::Shape(s)) => {
                    dy = dy.reshape(s)?;
                    param_grads.push(None);
                }
                _ => unreachable!("cache kind matches layer kind by construction"),
            }
        }
        if !want_params {
            return Ok((None, dy));
        }
        let mut grads = Vec::new();
        for pg in param_grads.into_iter().rev().flatten() {
            grads.push(pg.0);
            grads.push(pg.1);
        }
        Ok((Some(grads), dy))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn dense_stack(w: Vec<f64>, in_dim: usize, out_dim: usize) -> LayerStack<f64> {
        let arch = Arch {
            layers: vec![LayerCfg::Dense { in_dim, out_dim }],
        };
        let mut s = LayerStack::<f64>::zeroed(&arch).unwrap();
        *s.params_mut()[0] = Tensor::new(vec![out_dim, in_dim], w).unwrap();
        s
    }

    #[test]
    fn zero_weight_dense_gives_zero_logits() {
        let arch = Arch::mlp((1, 2, 2), 8, 3);
        let s = LayerStack::<f32>::zeroed(&arch).unwrap();
        let x = Tensor::filled(&[2, 1, 2, 2], 0.7);
        let y = s.infer(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_conv_relu_passthrough() {
        // 1x1 identity kernel, relu, nonnegative input -> unchanged
        let arch = Arch {
            layers: vec![
                LayerCfg::Conv2d {
                    in_ch: 1,
                    out_ch: 1,
                    kernel: 1,
                    stride: 1,
                    pad: 0,
                },
                LayerCfg::Relu,
            ],
        };
        let mut s = LayerStack::<f32>::zeroed(&arch).unwrap();
        *s.params_mut()[0] = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let x = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f32 / 10.0);
        let y = s.infer(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.data(), x.data());
    }

    // Independent oracle: explicit matrix product for a hand-set MLP.
    #[test]
    fn fixed_mlp_matches_hand_matmul() {
        let w1 = vec![0.5, -1.0, 2.0, 0.25, 1.5, -0.5]; // [3,2]
        let w2 = vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5]; // [2,3]
        let arch = Arch {
            layers: vec![
                LayerCfg::Dense {
                    in_dim: 2,
                    out_dim: 3,
                },
                LayerCfg::Relu,
                LayerCfg::Dense {
                    in_dim: 3,
                    out_dim: 2,
                },
            ],
        };
        let mut s = LayerStack::<f64>::zeroed(&arch).unwrap();
        *s.params_mut()[0] = Tensor::new(vec![3, 2], w1.clone()).unwrap();
        *s.params_mut()[2] = Tensor::new(vec![2, 3], w2.clone()).unwrap();
        let x = [0.3, -0.7];
        // oracle
        let mut h = [0.0f64; 3];
        for o in 0..3 {
            h[o] = (w1[o * 2] * x[0] + w1[o * 2 + 1] * x[1]).max(0.0);
        }
        let mut expect = [0.0f64; 2];
        for o in 0..2 {
            expect[o] = (0..3).map(|i| w2[o * 3 + i] * h[i]).sum();
        }
        let xt = Tensor::new(vec![1, 2], x.to_vec()).unwrap();
        let y = s.infer(&xt).unwrap();
        assert_abs_diff_eq!(y.data()[0], expect[0], epsilon = 1e-12);
        assert_abs_diff_eq!(y.data()[1], expect[1], epsilon = 1e-12);
    }

    #[test]
    fn forward_is_pure() {
        let mut rng = SeededRng::new(9);
        let arch = Arch::tiny_cnn((1, 8, 8), 3).unwrap();
        let s = LayerStack::<f32>::init(&arch, &mut rng).unwrap();
        let x = crate::rng::sample_gaussian::<f32>(&mut rng, &[2, 1, 8, 8]).clamp(0.0, 1.0);
        let a = s.infer(&x).unwrap();
        let b = s.infer(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    // Linear case: input gradient of a single dense layer is W^T * upstream.
    #[test]
    fn dense_input_grad_is_w_transpose_upstream() {
        let w = vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]; // [2,3]
        let s = dense_stack(w.clone(), 3, 2);
        let x = Tensor::new(vec![1, 3], vec![0.1, 0.2, 0.3]).unwrap();
        let (_, trace) = s.forward_traced(&x).unwrap();
        let up = Tensor::new(vec![1, 2], vec![2.0, -1.5]).unwrap();
        let (_, dx) = s.backward_traced(&trace, &up).unwrap();
        for i in 0..3 {
            let expect = w[i] * 2.0 + w[3 + i] * -1.5;
            assert_abs_diff_eq!(dx.data()[i], expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn relu_blocks_gradient_at_negative_preactivation() {
        let arch = Arch {
            layers: vec![LayerCfg::Relu],
        };
        let s = LayerStack::<f64>::zeroed(&arch).unwrap();
        let x = Tensor::new(vec![1, 2], vec![-0.5, 0.5]).unwrap();
        let (_, trace) = s.forward_traced(&x).unwrap();
        let up = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let (_, dx) = s.backward_traced(&trace, &up).unwrap();
        assert_eq!(dx.data(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_before_forward_errors() {
        let arch = Arch::mlp((1, 2, 2), 4, 2);
        let mut s = LayerStack::<f32>::zeroed(&arch).unwrap();
        let up = Tensor::zeros(&[1, 2]);
        assert!(matches!(
            s.backward(&up),
            Err(Error::BackwardBeforeForward)
        ));
        // eval-mode forward does not retain a cache either
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        s.forward(&x, false).unwrap();
        assert!(matches!(
            s.backward(&up),
            Err(Error::BackwardBeforeForward)
        ));
        // train-mode forward does
        s.forward(&x, true).unwrap();
        assert!(s.backward(&up).is_ok());
    }

    #[test]
    fn shape_error_names_offending_layer() {
        let arch = Arch::tiny_cnn((3, 8, 8), 2).unwrap();
        let s = LayerStack::<f32>::zeroed(&arch).unwrap();
        let x = Tensor::zeros(&[1, 1, 8, 8]);
        match s.infer(&x) {
            Err(Error::ShapeMismatch(m)) => {
                assert!(m.contains("layer 0"), "message: {m}");
                assert!(m.contains("conv2d"), "message: {m}");
            }
            other => panic!("expected shape mismatch, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let arch = Arch {
            layers: vec![LayerCfg::MaxPool2d],
        };
        let s = LayerStack::<f64>::zeroed(&arch).unwrap();
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.1, 0.9, 0.4, 0.2]).unwrap();
        let (y, trace) = s.forward_traced(&x).unwrap();
        assert_eq!(y.data(), &[0.9]);
        let up = Tensor::new(vec![1, 1, 1, 1], vec![5.0]).unwrap();
        let (_, dx) = s.backward_traced(&trace, &up).unwrap();
        assert_eq!(dx.data(), &[0.0, 5.0, 0.0, 0.0]);
    }
}
