//! Arena-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation as a node in creation order, which is
//! already a topological order: an operation can only consume values that
//! exist. [`Tape::backward`] seeds the scalar loss with gradient one and
//! sweeps the arena in reverse, accumulating into parent gradients. Non-leaf
//! gradients are cleared at the start of each sweep; gradients of leaves
//! created with `requires_grad` persist, so repeated backward calls
//! accumulate into them.

use super::kernels::{self, ConvGeometry, Padding};
use super::{Tensor, TensorError};
use crate::element::Element;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct BnContext<E> {
    xhat: Vec<E>,
    inv_std: Vec<E>,
    mean: Vec<E>,
    var: Vec<E>,
}

enum Op<E> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    SumAll(Var),
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        geom: ConvGeometry,
    },
    BnTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        ctx: BnContext<E>,
    },
    BnEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<E>,
        inv_std: Vec<E>,
    },
    AvgPool {
        x: Var,
        window: usize,
        stride: usize,
    },
    GlobalAvgPool {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
        c_a: usize,
        c_b: usize,
        rest: usize,
    },
    ScaleChannels {
        x: Var,
        s: Var,
    },
    Softmax {
        x: Var,
    },
    CrossEntropy {
        probs: Var,
        targets: Vec<usize>,
        weights: Vec<E>,
        lo: E,
        hi: E,
    },
    Mse {
        pred: Var,
        targets: Vec<E>,
        weights: Vec<E>,
    },
}

struct Node<E> {
    op: Op<E>,
    value: Tensor<E>,
    requires_grad: bool,
    label: Option<String>,
}

/// Arena of recorded operations supporting reverse-mode differentiation.
pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
    grads: Vec<Vec<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input node. Gradients accumulate into it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// Record an input node that never receives gradients.
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a node, if a backward pass has reached it.
    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.grads.get(v.0).map(|g| g.as_slice())
    }

    /// Clear the accumulated gradient of one node.
    pub fn zero_grad(&mut self, v: Var) {
        if let Some(g) = self.grads.get_mut(v.0) {
            g.iter_mut().for_each(|x| *x = E::ZERO);
        }
    }

    /// Attach a diagnostic label, reported by [`Tape::first_non_finite`].
    pub fn set_label(&mut self, v: Var, label: impl Into<String>) {
        self.nodes[v.0].label = Some(label.into());
    }

    /// First node whose value contains a NaN or infinity, as
    /// `(node index, label)`. Used to localize numerical blow-ups.
    pub fn first_non_finite(&self) -> Option<(usize, Option<&str>)> {
        self.nodes.iter().enumerate().find_map(|(i, node)| {
            if node.value.iter().any(|v| !v.is_finite()) {
                Some((i, node.label.as_deref()))
            } else {
                None
            }
        })
    }

    /// Batch statistics `(mean, var)` saved by a training-mode batch norm
    /// node, for updating running averages.
    pub fn bn_batch_stats(&self, v: Var) -> Option<(&[E], &[E])> {
        match &self.nodes[v.0].op {
            Op::BnTrain { ctx, .. } => Some((&ctx.mean, &ctx.var)),
            _ => None,
        }
    }

    fn push(&mut self, op: Op<E>, value: Tensor<E>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data = va.iter().zip(vb.iter()).map(|(x, y)| *x + *y).collect();
        let value = Tensor {
            shape: va.shape().to_vec(),
            data,
        };
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data = va.iter().zip(vb.iter()).map(|(x, y)| *x * *y).collect();
        let value = Tensor {
            shape: va.shape().to_vec(),
            data,
        };
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Mul(a, b), value, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let data = vx
            .iter()
            .map(|v| if *v > E::ZERO { *v } else { E::ZERO })
            .collect();
        let value = Tensor {
            shape: vx.shape().to_vec(),
            data,
        };
        let rg = self.needs(&[x]);
        self.push(Op::Relu(x), value, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let data = vx
            .iter()
            .map(|v| E::ONE / (E::ONE + (-*v).exp()))
            .collect();
        let value = Tensor {
            shape: vx.shape().to_vec(),
            data,
        };
        let rg = self.needs(&[x]);
        self.push(Op::Sigmoid(x), value, rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut s = E::ZERO;
        for v in self.nodes[x.0].value.iter() {
            s += *v;
        }
        let rg = self.needs(&[x]);
        self.push(Op::SumAll(x), Tensor::scalar(s), rg)
    }

    /// Fully connected layer: `x [n, in] * w [in, out] + b [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let vx = &self.nodes[x.0].value;
        let vw = &self.nodes[w.0].value;
        if vx.shape().len() != 2 {
            return Err(TensorError::BadRank {
                op: "dense",
                expected: 2,
                shape: vx.shape().to_vec(),
            });
        }
        if vw.shape().len() != 2 || vx.shape()[1] != vw.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "dense",
                lhs: vx.shape().to_vec(),
                rhs: vw.shape().to_vec(),
            });
        }
        let (n, in_dim, out_dim) = (vx.shape()[0], vx.shape()[1], vw.shape()[1]);
        if let Some(b) = b {
            let vb = &self.nodes[b.0].value;
            if vb.shape() != [out_dim] {
                return Err(TensorError::ShapeMismatch {
                    op: "dense bias",
                    lhs: vb.shape().to_vec(),
                    rhs: vec![out_dim],
                });
            }
        }
        let bias = b.map(|b| self.nodes[b.0].value.data.as_slice());
        let data = kernels::dense_forward(&vx.data, n, in_dim, &vw.data, out_dim, bias);
        let value = Tensor {
            shape: vec![n, out_dim],
            data,
        };
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.needs(&parents);
        Ok(self.push(Op::Dense { x, w, b }, value, rg))
    }

    /// 2D convolution over NCHW input with OIHW weights.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var, TensorError> {
        let vx = &self.nodes[x.0].value;
        let vw = &self.nodes[w.0].value;
        if vx.shape().len() != 4 {
            return Err(TensorError::BadRank {
                op: "conv2d",
                expected: 4,
                shape: vx.shape().to_vec(),
            });
        }
        if vw.shape().len() != 4 {
            return Err(TensorError::BadRank {
                op: "conv2d weights",
                expected: 4,
                shape: vw.shape().to_vec(),
            });
        }
        let (n, c_in, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let (c_out, wc_in, kh, kw) = (vw.shape()[0], vw.shape()[1], vw.shape()[2], vw.shape()[3]);
        if c_in != wc_in {
            return Err(TensorError::ChannelMismatch {
                input: c_in,
                weights: wc_in,
            });
        }
        if let Some(b) = b {
            let vb = &self.nodes[b.0].value;
            if vb.shape() != [c_out] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vb.shape().to_vec(),
                    rhs: vec![c_out],
                });
            }
        }
        let geom = kernels::conv_output_geometry(h, wd, kh, kw, stride, padding)?;
        let bias = b.map(|b| self.nodes[b.0].value.data.as_slice());
        let data = kernels::conv2d_forward(
            &vx.data, n, c_in, h, wd, &vw.data, c_out, kh, kw, bias, stride, geom,
        );
        let value = Tensor {
            shape: vec![n, c_out, geom.out_h, geom.out_w],
            data,
        };
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.needs(&parents);
        Ok(self.push(
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                geom,
            },
            value,
            rg,
        ))
    }

    fn bn_dims(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize), TensorError> {
        let vx = &self.nodes[x.0].value;
        let (n, c, spatial) = match vx.shape() {
            [n, c] => (*n, *c, 1),
            [n, c, h, w] => (*n, *c, h * w),
            other => {
                return Err(TensorError::BadRank {
                    op,
                    expected: 4,
                    shape: other.to_vec(),
                })
            }
        };
        for (name, v) in [("batch_norm gamma", gamma), ("batch_norm beta", beta)] {
            let vs = &self.nodes[v.0].value;
            if vs.shape() != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: name,
                    lhs: vs.shape().to_vec(),
                    rhs: vec![c],
                });
            }
        }
        Ok((n, c, spatial))
    }

    /// Batch normalization over the batch and spatial axes, using batch
    /// statistics with biased variance. Accepts rank-2 `[n, c]` or rank-4
    /// `[n, c, h, w]` input.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: E,
    ) -> Result<Var, TensorError> {
        let (n, c, spatial) = self.bn_dims("batch_norm", x, gamma, beta)?;
        let vx = &self.nodes[x.0].value;
        let out = kernels::batch_norm_train(
            &vx.data,
            n,
            c,
            spatial,
            &self.nodes[gamma.0].value.data,
            &self.nodes[beta.0].value.data,
            eps,
        );
        let value = Tensor {
            shape: self.nodes[x.0].value.shape().to_vec(),
            data: out.y,
        };
        let ctx = BnContext {
            xhat: out.xhat,
            inv_std: out.inv_std,
            mean: out.mean,
            var: out.var,
        };
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            Op::BnTrain {
                x,
                gamma,
                beta,
                ctx,
            },
            value,
            rg,
        ))
    }

    /// Batch normalization with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[E],
        running_var: &[E],
        eps: E,
    ) -> Result<Var, TensorError> {
        let (n, c, spatial) = self.bn_dims("batch_norm", x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm running stats",
                lhs: vec![running_mean.len(), running_var.len()],
                rhs: vec![c, c],
            });
        }
        let vx = &self.nodes[x.0].value;
        let (y, xhat, inv_std) = kernels::batch_norm_eval(
            &vx.data,
            n,
            c,
            spatial,
            &self.nodes[gamma.0].value.data,
            &self.nodes[beta.0].value.data,
            running_mean,
            running_var,
            eps,
        );
        let value = Tensor {
            shape: self.nodes[x.0].value.shape().to_vec(),
            data: y,
        };
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            Op::BnEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            value,
            rg,
        ))
    }

    /// Average pooling with a square window, no padding.
    pub fn avg_pool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var, TensorError> {
        let vx = &self.nodes[x.0].value;
        if vx.shape().len() != 4 {
            return Err(TensorError::BadRank {
                op: "avg_pool2d",
                expected: 4,
                shape: vx.shape().to_vec(),
            });
        }
        let (n, c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let (out_h, out_w) = kernels::pool_output_size(h, w, window, stride)?;
        let data = kernels::avg_pool2d_forward(&vx.data, n, c, h, w, window, stride, out_h, out_w);
        let value = Tensor {
            shape: vec![n, c, out_h, out_w],
            data,
        };
        let rg = self.needs(&[x]);
        Ok(self.push(Op::AvgPool { x, window, stride }, value, rg))
    }

    /// Mean over the spatial axes: `[n, c, h, w]` to `[n, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let vx = &self.nodes[x.0].value;
        if vx.shape().len() != 4 {
            return Err(TensorError::BadRank {
                op: "global_avg_pool",
                expected: 4,
                shape: vx.shape().to_vec(),
            });
        }
        let (n, c) = (vx.shape()[0], vx.shape()[1]);
        let spatial = vx.shape()[2] * vx.shape()[3];
        let data = kernels::global_avg_pool_forward(&vx.data, n, c, spatial);
        let value = Tensor {
            shape: vec![n, c],
            data,
        };
        let rg = self.needs(&[x]);
        Ok(self.push(Op::GlobalAvgPool { x }, value, rg))
    }

    /// Concatenate along the channel axis (axis 1). Accepts rank-2 or
    /// rank-4 inputs with matching batch and trailing dimensions.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let sa = va.shape();
        let sb = vb.shape();
        if sa.len() != sb.len() || sa.len() < 2 {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        if sa[0] != sb[0] {
            return Err(TensorError::BatchMismatch {
                lhs: sa[0],
                rhs: sb[0],
            });
        }
        if sa[2..] != sb[2..] {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let n = sa[0];
        let (c_a, c_b) = (sa[1], sb[1]);
        let rest: usize = sa[2..].iter().product();
        let mut shape = sa.to_vec();
        shape[1] = c_a + c_b;
        let mut data = vec![E::ZERO; n * (c_a + c_b) * rest];
        for ni in 0..n {
            let dst = &mut data[ni * (c_a + c_b) * rest..][..(c_a + c_b) * rest];
            dst[..c_a * rest].copy_from_slice(&va.data[ni * c_a * rest..][..c_a * rest]);
            dst[c_a * rest..].copy_from_slice(&vb.data[ni * c_b * rest..][..c_b * rest]);
        }
        let value = Tensor { shape, data };
        let rg = self.needs(&[a, b]);
        Ok(self.push(
            Op::Concat {
                a,
                b,
                c_a,
                c_b,
                rest,
            },
            value,
            rg,
        ))
    }

    /// Multiply each channel plane of `x [n, c, h, w]` by `s [n, c]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        let vx = &self.nodes[x.0].value;
        let vs = &self.nodes[s.0].value;
        if vx.shape().len() != 4 {
            return Err(TensorError::BadRank {
                op: "scale_channels",
                expected: 4,
                shape: vx.shape().to_vec(),
            });
        }
        let (n, c) = (vx.shape()[0], vx.shape()[1]);
        if vs.shape() != [n, c] {
            return Err(TensorError::ShapeMismatch {
                op: "scale_channels",
                lhs: vx.shape().to_vec(),
                rhs: vs.shape().to_vec(),
            });
        }
        let spatial = vx.shape()[2] * vx.shape()[3];
        let data = kernels::scale_channels_forward(&vx.data, &vs.data, n, c, spatial);
        let value = Tensor {
            shape: vx.shape().to_vec(),
            data,
        };
        let rg = self.needs(&[x, s]);
        Ok(self.push(Op::ScaleChannels { x, s }, value, rg))
    }

    /// Row-wise softmax over `[n, k]`, computed with the max-subtraction
    /// trick.
    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let vx = &self.nodes[x.0].value;
        if vx.shape().len() != 2 {
            return Err(TensorError::BadRank {
                op: "softmax",
                expected: 2,
                shape: vx.shape().to_vec(),
            });
        }
        let (n, k) = (vx.shape()[0], vx.shape()[1]);
        let mut data = vec![E::ZERO; n * k];
        for ni in 0..n {
            let row = &vx.data[ni * k..][..k];
            let mut mx = row[0];
            for v in row {
                mx = mx.maximum(*v);
            }
            let out = &mut data[ni * k..][..k];
            let mut sum = E::ZERO;
            for (o, v) in out.iter_mut().zip(row) {
                *o = (*v - mx).exp();
                sum += *o;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        let value = Tensor {
            shape: vec![n, k],
            data,
        };
        let rg = self.needs(&[x]);
        Ok(self.push(Op::Softmax { x }, value, rg))
    }

    /// Weighted cross-entropy between predicted probabilities `[n, k]` and
    /// integer targets, averaged over the batch. Probabilities are clamped
    /// to `[clamp, 1 - clamp]` before the log.
    pub fn cross_entropy(
        &mut self,
        probs: Var,
        targets: &[usize],
        sample_weights: Option<&[E]>,
        clamp: E,
    ) -> Result<Var, TensorError> {
        let vp = &self.nodes[probs.0].value;
        if vp.shape().len() != 2 {
            return Err(TensorError::BadRank {
                op: "cross_entropy",
                expected: 2,
                shape: vp.shape().to_vec(),
            });
        }
        let (n, k) = (vp.shape()[0], vp.shape()[1]);
        if targets.len() != n {
            return Err(TensorError::BatchMismatch {
                lhs: n,
                rhs: targets.len(),
            });
        }
        if let Some(wts) = sample_weights {
            if wts.len() != n {
                return Err(TensorError::BatchMismatch {
                    lhs: n,
                    rhs: wts.len(),
                });
            }
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy target",
                lhs: vec![t],
                rhs: vec![k],
            });
        }
        let weights: Vec<E> = match sample_weights {
            Some(w) => w.to_vec(),
            None => vec![E::ONE; n],
        };
        let lo = clamp;
        let hi = E::ONE - clamp;
        let inv_n = E::ONE / E::from_f64(n as f64);
        let mut acc = E::ZERO;
        for (i, &t) in targets.iter().enumerate() {
            let p = vp.data[i * k + t].maximum(lo).minimum(hi);
            acc += weights[i] * -p.ln();
        }
        let rg = self.needs(&[probs]);
        Ok(self.push(
            Op::CrossEntropy {
                probs,
                targets: targets.to_vec(),
                weights,
                lo,
                hi,
            },
            Tensor::scalar(acc * inv_n),
            rg,
        ))
    }

    /// Weighted mean squared error between predictions `[n]` or `[n, 1]`
    /// and targets, averaged over the batch.
    pub fn mse(
        &mut self,
        pred: Var,
        targets: &[E],
        sample_weights: Option<&[E]>,
    ) -> Result<Var, TensorError> {
        let vp = &self.nodes[pred.0].value;
        let n = match vp.shape() {
            [n] => *n,
            [n, 1] => *n,
            other => {
                return Err(TensorError::BadRank {
                    op: "mse",
                    expected: 1,
                    shape: other.to_vec(),
                })
            }
        };
        if targets.len() != n {
            return Err(TensorError::BatchMismatch {
                lhs: n,
                rhs: targets.len(),
            });
        }
        if let Some(wts) = sample_weights {
            if wts.len() != n {
                return Err(TensorError::BatchMismatch {
                    lhs: n,
                    rhs: wts.len(),
                });
            }
        }
        let weights: Vec<E> = match sample_weights {
            Some(w) => w.to_vec(),
            None => vec![E::ONE; n],
        };
        let inv_n = E::ONE / E::from_f64(n as f64);
        let mut acc = E::ZERO;
        for i in 0..n {
            let d = vp.data[i] - targets[i];
            acc += weights[i] * d * d;
        }
        let rg = self.needs(&[pred]);
        Ok(self.push(
            Op::Mse {
                pred,
                targets: targets.to_vec(),
                weights,
            },
            Tensor::scalar(acc * inv_n),
            rg,
        ))
    }

    /// Reverse sweep from a scalar loss. Gradients of `requires_grad`
    /// leaves accumulate across calls; all other gradients are recomputed.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        while self.grads.len() < self.nodes.len() {
            let i = self.grads.len();
            self.grads.push(vec![E::ZERO; self.nodes[i].value.numel()]);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            let keep = node.requires_grad && matches!(node.op, Op::Leaf);
            if !keep {
                self.grads[i].iter_mut().for_each(|g| *g = E::ZERO);
            }
        }
        let mut grads = std::mem::take(&mut self.grads);
        grads[loss.0][0] += E::ONE;
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let (gparents, gtail) = grads.split_at_mut(i);
            let g = gtail[0].as_slice();
            self.propagate(i, g, gparents);
        }
        self.grads = grads;
        Ok(())
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    fn propagate(&self, i: usize, g: &[E], gparents: &mut [Vec<E>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.rg(*a) {
                    kernels_add(&mut gparents[a.0], g);
                }
                if self.rg(*b) {
                    kernels_add(&mut gparents[b.0], g);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    for ((ga, gv), bv) in gparents[a.0].iter_mut().zip(g).zip(self.val(*b).iter())
                    {
                        *ga += *gv * *bv;
                    }
                }
                if self.rg(*b) {
                    for ((gb, gv), av) in gparents[b.0].iter_mut().zip(g).zip(self.val(*a).iter())
                    {
                        *gb += *gv * *av;
                    }
                }
            }
            Op::Relu(x) => {
                if self.rg(*x) {
                    for ((gx, gv), xv) in gparents[x.0].iter_mut().zip(g).zip(self.val(*x).iter())
                    {
                        if *xv > E::ZERO {
                            *gx += *gv;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if self.rg(*x) {
                    for ((gx, gv), yv) in gparents[x.0].iter_mut().zip(g).zip(node.value.iter()) {
                        *gx += *gv * *yv * (E::ONE - *yv);
                    }
                }
            }
            Op::SumAll(x) => {
                if self.rg(*x) {
                    let gv = g[0];
                    for gx in gparents[x.0].iter_mut() {
                        *gx += gv;
                    }
                }
            }
            Op::Dense { x, w, b } => {
                let vx = self.val(*x);
                let vw = self.val(*w);
                let (n, in_dim, out_dim) = (vx.shape()[0], vx.shape()[1], vw.shape()[1]);
                if self.rg(*x) {
                    let dx = kernels::dense_backward_dx(g, n, in_dim, &vw.data, out_dim);
                    kernels_add(&mut gparents[x.0], &dx);
                }
                let need_w = self.rg(*w);
                let need_b = b.map(|b| self.rg(b)).unwrap_or(false);
                if need_w || need_b {
                    let (dw, db) = kernels::dense_backward_dw(&vx.data, g, n, in_dim, out_dim);
                    if need_w {
                        kernels_add(&mut gparents[w.0], &dw);
                    }
                    if need_b {
                        kernels_add(&mut gparents[b.unwrap().0], &db);
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                geom,
            } => {
                let vx = self.val(*x);
                let vw = self.val(*w);
                let (n, c_in, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
                let (c_out, kh, kw) = (vw.shape()[0], vw.shape()[2], vw.shape()[3]);
                if self.rg(*x) {
                    let dx = kernels::conv2d_backward_dx(
                        g, n, c_in, h, wd, &vw.data, c_out, kh, kw, *stride, *geom,
                    );
                    kernels_add(&mut gparents[x.0], &dx);
                }
                let need_w = self.rg(*w);
                let need_b = b.map(|b| self.rg(b)).unwrap_or(false);
                if need_w || need_b {
                    let (dw, db) = kernels::conv2d_backward_dw(
                        &vx.data, g, n, c_in, h, wd, c_out, kh, kw, *stride, *geom,
                    );
                    if need_w {
                        kernels_add(&mut gparents[w.0], &dw);
                    }
                    if need_b {
                        kernels_add(&mut gparents[b.unwrap().0], &db);
                    }
                }
            }
            Op::BnTrain {
                x,
                gamma,
                beta,
                ctx,
            } => {
                let vx = self.val(*x);
                let (n, c, spatial) = match vx.shape() {
                    [n, c] => (*n, *c, 1),
                    [n, c, h, w] => (*n, *c, h * w),
                    _ => unreachable!("validated at construction"),
                };
                let (dx, dgamma, dbeta) = kernels::batch_norm_train_backward(
                    g,
                    &ctx.xhat,
                    &ctx.inv_std,
                    &self.val(*gamma).data,
                    n,
                    c,
                    spatial,
                );
                if self.rg(*x) {
                    kernels_add(&mut gparents[x.0], &dx);
                }
                if self.rg(*gamma) {
                    kernels_add(&mut gparents[gamma.0], &dgamma);
                }
                if self.rg(*beta) {
                    kernels_add(&mut gparents[beta.0], &dbeta);
                }
            }
            Op::BnEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let vx = self.val(*x);
                let (n, c, spatial) = match vx.shape() {
                    [n, c] => (*n, *c, 1),
                    [n, c, h, w] => (*n, *c, h * w),
                    _ => unreachable!("validated at construction"),
                };
                let (dx, dgamma, dbeta) = kernels::batch_norm_eval_backward(
                    g,
                    xhat,
                    inv_std,
                    &self.val(*gamma).data,
                    n,
                    c,
                    spatial,
                );
                if self.rg(*x) {
                    kernels_add(&mut gparents[x.0], &dx);
                }
                if self.rg(*gamma) {
                    kernels_add(&mut gparents[gamma.0], &dgamma);
                }
                if self.rg(*beta) {
                    kernels_add(&mut gparents[beta.0], &dbeta);
                }
            }
            Op::AvgPool { x, window, stride } => {
                if self.rg(*x) {
                    let vx = self.val(*x);
                    let (n, c, h, w) =
                        (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
                    let (out_h, out_w) = (node.value.shape()[2], node.value.shape()[3]);
                    let dx = kernels::avg_pool2d_backward(
                        g, n, c, h, w, *window, *stride, out_h, out_w,
                    );
                    kernels_add(&mut gparents[x.0], &dx);
                }
            }
            Op::GlobalAvgPool { x } => {
                if self.rg(*x) {
                    let vx = self.val(*x);
                    let (n, c) = (vx.shape()[0], vx.shape()[1]);
                    let spatial = vx.shape()[2] * vx.shape()[3];
                    let dx = kernels::global_avg_pool_backward(g, n, c, spatial);
                    kernels_add(&mut gparents[x.0], &dx);
                }
            }
            Op::Concat {
                a,
                b,
                c_a,
                c_b,
                rest,
            } => {
                let n = self.val(*a).shape()[0];
                let width = (*c_a + *c_b) * *rest;
                if self.rg(*a) {
                    let ga = &mut gparents[a.0];
                    for ni in 0..n {
                        let src = &g[ni * width..][..*c_a * *rest];
                        kernels_add(&mut ga[ni * *c_a * *rest..][..*c_a * *rest], src);
                    }
                }
                if self.rg(*b) {
                    let gb = &mut gparents[b.0];
                    for ni in 0..n {
                        let src = &g[ni * width + *c_a * *rest..][..*c_b * *rest];
                        kernels_add(&mut gb[ni * *c_b * *rest..][..*c_b * *rest], src);
                    }
                }
            }
            Op::ScaleChannels { x, s } => {
                let vx = self.val(*x);
                let (n, c) = (vx.shape()[0], vx.shape()[1]);
                let spatial = vx.shape()[2] * vx.shape()[3];
                let (dx, ds) = kernels::scale_channels_backward(
                    g,
                    &vx.data,
                    &self.val(*s).data,
                    n,
                    c,
                    spatial,
                );
                if self.rg(*x) {
                    kernels_add(&mut gparents[x.0], &dx);
                }
                if self.rg(*s) {
                    kernels_add(&mut gparents[s.0], &ds);
                }
            }
            Op::Softmax { x } => {
                if self.rg(*x) {
                    let y = &node.value;
                    let (n, k) = (y.shape()[0], y.shape()[1]);
                    let gx = &mut gparents[x.0];
                    for ni in 0..n {
                        let y_row = &y.data[ni * k..][..k];
                        let g_row = &g[ni * k..][..k];
                        let mut dotp = E::ZERO;
                        for (gv, yv) in g_row.iter().zip(y_row) {
                            dotp += *gv * *yv;
                        }
                        for ((o, gv), yv) in
                            gx[ni * k..][..k].iter_mut().zip(g_row).zip(y_row)
                        {
                            *o += *yv * (*gv - dotp);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                probs,
                targets,
                weights,
                lo,
                hi,
            } => {
                if self.rg(*probs) {
                    let vp = self.val(*probs);
                    let k = vp.shape()[1];
                    let n = targets.len();
                    let inv_n = E::ONE / E::from_f64(n as f64);
                    let gv = g[0];
                    let gp = &mut gparents[probs.0];
                    for (i, &t) in targets.iter().enumerate() {
                        let p = vp.data[i * k + t];
                        // Outside the clamp range the loss is locally flat.
                        if p >= *lo && p <= *hi {
                            gp[i * k + t] += gv * -(weights[i] * inv_n / p);
                        }
                    }
                }
            }
            Op::Mse {
                pred,
                targets,
                weights,
            } => {
                if self.rg(*pred) {
                    let vp = self.val(*pred);
                    let n = targets.len();
                    let inv_n = E::ONE / E::from_f64(n as f64);
                    let two = E::from_f64(2.0);
                    let gv = g[0];
                    let gp = &mut gparents[pred.0];
                    for i in 0..n {
                        gp[i] += gv * two * weights[i] * (vp.data[i] - targets[i]) * inv_n;
                    }
                }
            }
        }
    }
}

fn kernels_add<E: Element>(acc: &mut [E], src: &[E]) {
    for (a, v) in acc.iter_mut().zip(src) {
        *a += *v;
    }
}
