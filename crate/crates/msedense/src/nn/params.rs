//! Named parameter storage and the tape-binding forward pass.

use super::{BN_EPS, BN_MOMENTUM};
use crate::element::Element;
use crate::tensor::{Padding, Tape, Tensor, TensorError, Var};

/// What a parameter is, which decides its initialization and whether L2
/// regularization applies (kernels only).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Kernel,
    Bias,
    BnScale,
    BnShift,
}

/// One named trainable tensor.
#[derive(Debug, Clone)]
pub struct Param<E> {
    pub name: String,
    pub value: Tensor<E>,
    pub kind: ParamKind,
}

/// Running statistics of one batch-norm layer (not trained by gradient).
#[derive(Debug, Clone)]
pub struct BnStats<E> {
    pub name: String,
    pub mean: Vec<E>,
    pub var: Vec<E>,
}

/// All state of one network: parameters in registration order plus
/// batch-norm running statistics. Registration order is the optimizer
/// slot order and the checkpoint order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<E: Element> {
    pub params: Vec<Param<E>>,
    pub bn: Vec<BnStats<E>>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            bn: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<E>, kind: ParamKind) -> usize {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param { name, value, kind });
        self.params.len() - 1
    }

    /// Register batch-norm running stats for `c` channels (mean 0, var 1).
    pub fn add_bn(&mut self, name: impl Into<String>, c: usize) -> usize {
        self.bn.push(BnStats {
            name: name.into(),
            mean: vec![E::ZERO; c],
            var: vec![E::ONE; c],
        });
        self.bn.len() - 1
    }

    /// Element counts per parameter, in slot order (for optimizer state).
    pub fn sizes(&self) -> Vec<usize> {
        self.params.iter().map(|p| p.value.numel()).collect()
    }

    pub fn total_len(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Cast every parameter and statistic to another precision.
    pub fn cast<T: Element>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    kind: p.kind,
                })
                .collect(),
            bn: self
                .bn
                .iter()
                .map(|s| BnStats {
                    name: s.name.clone(),
                    mean: s.mean.iter().map(|&v| T::from_f64(v.to_f64())).collect(),
                    var: s.var.iter().map(|&v| T::from_f64(v.to_f64())).collect(),
                })
                .collect(),
        }
    }
}

/// Whether batch norm uses batch statistics (and records them for the
/// running-average update) or the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Binds stored parameters to tape leaves for one forward pass. With
/// `trainable` false the parameters become constants, so backward skips
/// them entirely (frozen backbones).
pub struct Pass<'t, E: Element> {
    tape: &'t mut Tape<E>,
    mode: Mode,
    trainable: bool,
    bound: Vec<(usize, Var)>,
    bn_seen: Vec<(usize, Var)>,
    /// Shape checkpoints pushed by composite blocks during forward.
    pub shape_log: Vec<(String, Vec<usize>)>,
}

impl<'t, E: Element> Pass<'t, E> {
    pub fn new(tape: &'t mut Tape<E>, mode: Mode, trainable: bool) -> Self {
        Self {
            tape,
            mode,
            trainable,
            bound: Vec::new(),
            bn_seen: Vec::new(),
            shape_log: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn tape_mut(&mut self) -> &mut Tape<E> {
        self.tape
    }

    pub fn tape(&self) -> &Tape<E> {
        self.tape
    }

    /// Feed one input batch as a constant.
    pub fn input(&mut self, x: Tensor<E>) -> Var {
        self.tape.constant(x)
    }

    /// `(param slot, leaf var)` for every parameter bound so far; the
    /// trainer reads gradients through these after backward.
    pub fn bound(&self) -> &[(usize, Var)] {
        &self.bound
    }

    fn param(&mut self, store: &ParamStore<E>, id: usize) -> Var {
        let p = &store.params[id];
        let v = self.tape.leaf(p.value.clone(), self.trainable);
        self.tape.set_label(v, p.name.clone());
        if self.trainable {
            self.bound.push((id, v));
        }
        v
    }

    pub fn log_shape(&mut self, name: impl Into<String>, v: Var) {
        let shape = self.tape.value(v).shape().to_vec();
        self.shape_log.push((name.into(), shape));
    }

    pub fn conv(
        &mut self,
        store: &ParamStore<E>,
        layer: &ConvLayer,
        x: Var,
    ) -> Result<Var, TensorError> {
        let w = self.param(store, layer.w);
        let b = self.param(store, layer.b);
        self.tape.conv2d(x, w, Some(b), layer.stride, layer.padding)
    }

    pub fn dense(
        &mut self,
        store: &ParamStore<E>,
        layer: &DenseLayer,
        x: Var,
    ) -> Result<Var, TensorError> {
        let w = self.param(store, layer.w);
        let b = self.param(store, layer.b);
        self.tape.dense(x, w, Some(b))
    }

    pub fn batch_norm(
        &mut self,
        store: &ParamStore<E>,
        layer: &BnLayer,
        x: Var,
    ) -> Result<Var, TensorError> {
        let gamma = self.param(store, layer.gamma);
        let beta = self.param(store, layer.beta);
        let eps = E::from_f64(BN_EPS);
        match self.mode {
            Mode::Train => {
                let y = self.tape.batch_norm_train(x, gamma, beta, eps)?;
                self.bn_seen.push((layer.stats, y));
                Ok(y)
            }
            Mode::Eval => {
                let stats = &store.bn[layer.stats];
                self.tape
                    .batch_norm_eval(x, gamma, beta, &stats.mean, &stats.var, eps)
            }
        }
    }

    /// Squeeze (global average pool), excite (reduce, ReLU, expand,
    /// sigmoid), and rescale the input channels.
    pub fn se(
        &mut self,
        store: &ParamStore<E>,
        layer: &SeLayer,
        x: Var,
    ) -> Result<Var, TensorError> {
        let pooled = self.tape.global_avg_pool(x)?;
        let reduced = self.dense(store, &layer.reduce, pooled)?;
        let reduced = self.tape.relu(reduced);
        let expanded = self.dense(store, &layer.expand, reduced)?;
        let scale = self.tape.sigmoid(expanded);
        self.tape.scale_channels(x, scale)
    }

    /// Fold this pass's batch statistics into the running statistics:
    /// `running = momentum * running + (1 - momentum) * batch`. Call once
    /// per training step, after the forward.
    pub fn commit_bn(&self, store: &mut ParamStore<E>) {
        let momentum = E::from_f64(BN_MOMENTUM);
        let blend = E::ONE - momentum;
        for &(id, var) in &self.bn_seen {
            let (mean, var_) = self
                .tape
                .bn_batch_stats(var)
                .expect("recorded var is a train-mode batch norm");
            let stats = &mut store.bn[id];
            for (r, &b) in stats.mean.iter_mut().zip(mean) {
                *r = momentum * *r + blend * b;
            }
            for (r, &b) in stats.var.iter_mut().zip(var_) {
                *r = momentum * *r + blend * b;
            }
        }
    }
}

/// Convolution layer: OIHW kernel plus bias.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub w: usize,
    pub b: usize,
    pub stride: usize,
    pub padding: Padding,
}

/// Fully connected layer: `[in, out]` kernel plus bias.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub w: usize,
    pub b: usize,
}

/// Batch normalization: scale, shift, and a running-stats slot.
#[derive(Debug, Clone)]
pub struct BnLayer {
    pub gamma: usize,
    pub beta: usize,
    pub stats: usize,
}

/// Squeeze-excitation pair of fully connected layers.
#[derive(Debug, Clone)]
pub struct SeLayer {
    pub reduce: DenseLayer,
    pub expand: DenseLayer,
}
