//! Builders and forward passes for the backbone and the fusion MLP.

use super::params::{BnLayer, ConvLayer, DenseLayer, SeLayer};
use super::{HeadKind, NetworkSpec, NnError, ParamKind, ParamStore, Pass, FUSION_HIDDEN};
use crate::element::Element;
use crate::optim::he_normal_init;
use crate::rng::{self, stream};
use crate::tensor::{Padding, Tensor, TensorError, Var};
use rand_chacha::ChaCha8Rng;

/// Squeeze-excitation bottleneck width: `max(1, floor(c / ratio))`.
pub fn se_reduced(c: usize, ratio: usize) -> usize {
    (c / ratio).max(1)
}

/// BN, ReLU, 3x3 same conv adding `f` channels, SE, then concatenation
/// with the module input.
#[derive(Debug, Clone)]
pub struct SeDenseModule {
    pub bn: BnLayer,
    pub conv: ConvLayer,
    pub se: SeLayer,
}

impl SeDenseModule {
    pub fn forward<E: Element>(
        &self,
        pass: &mut Pass<E>,
        store: &ParamStore<E>,
        x: Var,
    ) -> Result<Var, TensorError> {
        let y = pass.batch_norm(store, &self.bn, x)?;
        let y = pass.tape_mut().relu(y);
        let y = pass.conv(store, &self.conv, y)?;
        let y = pass.se(store, &self.se, y)?;
        pass.tape_mut().concat_channels(x, y)
    }
}

/// BN, ReLU, 1x1 conv to `floor(c * theta)` channels, SE, then 2x2
/// average pooling with stride 2.
#[derive(Debug, Clone)]
pub struct TransitionBlock {
    pub bn: BnLayer,
    pub conv: ConvLayer,
    pub se: SeLayer,
}

impl TransitionBlock {
    pub fn forward<E: Element>(
        &self,
        pass: &mut Pass<E>,
        store: &ParamStore<E>,
        x: Var,
    ) -> Result<Var, TensorError> {
        let y = pass.batch_norm(store, &self.bn, x)?;
        let y = pass.tape_mut().relu(y);
        let y = pass.conv(store, &self.conv, y)?;
        let y = pass.se(store, &self.se, y)?;
        pass.tape_mut().avg_pool2d(y, 2, 2)
    }
}

/// The whole trunk: stem conv, dense blocks with transitions between
/// them, then BN, ReLU, global average pool and a linear head.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub stem: ConvLayer,
    pub blocks: Vec<Vec<SeDenseModule>>,
    pub transitions: Vec<TransitionBlock>,
    pub head_bn: BnLayer,
    pub proj: DenseLayer,
    pub head: HeadKind,
}

/// Forward results: pooled features for fusion, and the head output
/// (class probabilities `[N, M]` or severity scores `[N, 1]`).
#[derive(Debug, Clone, Copy)]
pub struct BackboneOut {
    pub features: Var,
    pub output: Var,
}

impl Backbone {
    pub fn forward<E: Element>(
        &self,
        pass: &mut Pass<E>,
        store: &ParamStore<E>,
        x: Var,
    ) -> Result<BackboneOut, TensorError> {
        let mut cur = pass.conv(store, &self.stem, x)?;
        pass.log_shape("stem", cur);
        for (i, block) in self.blocks.iter().enumerate() {
            for module in block {
                cur = module.forward(pass, store, cur)?;
            }
            pass.log_shape(format!("block{i}"), cur);
            if let Some(transition) = self.transitions.get(i) {
                cur = transition.forward(pass, store, cur)?;
                pass.log_shape(format!("transition{i}"), cur);
            }
        }
        let y = pass.batch_norm(store, &self.head_bn, cur)?;
        let y = pass.tape_mut().relu(y);
        let features = pass.tape_mut().global_avg_pool(y)?;
        pass.log_shape("features", features);
        let proj = pass.dense(store, &self.proj, features)?;
        let output = match self.head {
            HeadKind::Classification => pass.tape_mut().softmax(proj)?,
            HeadKind::Regression => proj,
        };
        Ok(BackboneOut { features, output })
    }
}

/// A backbone plus its parameters.
#[derive(Debug, Clone)]
pub struct Network<E: Element> {
    pub spec: NetworkSpec,
    pub store: ParamStore<E>,
    pub backbone: Backbone,
}

impl<E: Element> Network<E> {
    pub fn forward(&self, pass: &mut Pass<E>, x: Var) -> Result<BackboneOut, TensorError> {
        self.backbone.forward(pass, &self.store, x)
    }
}

/// Fusion head over concatenated backbone features: BN, a hidden fully
/// connected ReLU layer, and a softmax output layer.
#[derive(Debug, Clone)]
pub struct FusionMlp {
    pub bn: BnLayer,
    pub fc1: DenseLayer,
    pub fc2: DenseLayer,
}

impl FusionMlp {
    pub fn forward<E: Element>(
        &self,
        pass: &mut Pass<E>,
        store: &ParamStore<E>,
        features: Var,
    ) -> Result<Var, TensorError> {
        let y = pass.batch_norm(store, &self.bn, features)?;
        let y = pass.dense(store, &self.fc1, y)?;
        let y = pass.tape_mut().relu(y);
        let y = pass.dense(store, &self.fc2, y)?;
        pass.tape_mut().softmax(y)
    }
}

/// A fusion MLP plus its parameters.
#[derive(Debug, Clone)]
pub struct FusionNet<E: Element> {
    /// Expected concatenated feature width (classification + regression).
    pub in_dim: usize,
    pub num_classes: usize,
    pub store: ParamStore<E>,
    pub mlp: FusionMlp,
}

impl<E: Element> FusionNet<E> {
    pub fn forward(&self, pass: &mut Pass<E>, features: Var) -> Result<Var, TensorError> {
        let got = pass.tape().value(features).shape().to_vec();
        if got.len() != 2 || got[1] != self.in_dim {
            return Err(TensorError::ShapeMismatch {
                op: "fusion input",
                lhs: got,
                rhs: vec![self.in_dim],
            });
        }
        self.mlp.forward(pass, &self.store, features)
    }
}

fn conv<E: Element>(
    store: &mut ParamStore<E>,
    rng: &mut ChaCha8Rng,
    name: &str,
    in_c: usize,
    out_c: usize,
    k: usize,
    padding: Padding,
) -> ConvLayer {
    let w = he_normal_init(&[out_c, in_c, k, k], in_c * k * k, rng);
    ConvLayer {
        w: store.add(format!("{name}.w"), w, ParamKind::Kernel),
        b: store.add(
            format!("{name}.b"),
            Tensor::zeros(vec![out_c]),
            ParamKind::Bias,
        ),
        stride: 1,
        padding,
    }
}

fn dense<E: Element>(
    store: &mut ParamStore<E>,
    rng: &mut ChaCha8Rng,
    name: &str,
    in_dim: usize,
    out_dim: usize,
) -> DenseLayer {
    let w = he_normal_init(&[in_dim, out_dim], in_dim, rng);
    DenseLayer {
        w: store.add(format!("{name}.w"), w, ParamKind::Kernel),
        b: store.add(
            format!("{name}.b"),
            Tensor::zeros(vec![out_dim]),
            ParamKind::Bias,
        ),
    }
}

fn batch_norm<E: Element>(store: &mut ParamStore<E>, name: &str, c: usize) -> BnLayer {
    BnLayer {
        gamma: store.add(
            format!("{name}.gamma"),
            Tensor::full(vec![c], E::ONE),
            ParamKind::BnScale,
        ),
        beta: store.add(
            format!("{name}.beta"),
            Tensor::zeros(vec![c]),
            ParamKind::BnShift,
        ),
        stats: store.add_bn(format!("{name}.stats"), c),
    }
}

fn se<E: Element>(
    store: &mut ParamStore<E>,
    rng: &mut ChaCha8Rng,
    name: &str,
    c: usize,
    ratio: usize,
) -> SeLayer {
    let reduced = se_reduced(c, ratio);
    SeLayer {
        reduce: dense(store, rng, &format!("{name}.reduce"), c, reduced),
        expand: dense(store, rng, &format!("{name}.expand"), reduced, c),
    }
}

/// Build a backbone with seeded initialization: He-normal kernels (drawn
/// at 64-bit so every precision sees the same values), zero biases, and
/// unit batch-norm scales.
pub fn build_sedensenet<E: Element>(spec: &NetworkSpec, seed: u64) -> Result<Network<E>, NnError> {
    spec.validate()?;
    let mut store = ParamStore::new();
    let rng = &mut rng::derive(seed, &[stream::INIT]);
    let f = spec.filters_per_module();

    let mut c = spec.stem_channels();
    let stem = conv(&mut store, rng, "stem", spec.input.2, c, 3, Padding::Same);
    let mut blocks = Vec::with_capacity(spec.num_blocks);
    let mut transitions = Vec::with_capacity(spec.num_blocks - 1);
    for b in 0..spec.num_blocks {
        let mut modules = Vec::with_capacity(spec.modules_per_block);
        for m in 0..spec.modules_per_block {
            let name = format!("b{b}.m{m}");
            modules.push(SeDenseModule {
                bn: batch_norm(&mut store, &format!("{name}.bn"), c),
                conv: conv(&mut store, rng, &format!("{name}.conv"), c, f, 3, Padding::Same),
                se: se(&mut store, rng, &format!("{name}.se"), f, spec.se_ratio),
            });
            c += f;
        }
        blocks.push(modules);
        if b + 1 < spec.num_blocks {
            let name = format!("t{b}");
            let out = (c as f64 * spec.compression).floor() as usize;
            transitions.push(TransitionBlock {
                bn: batch_norm(&mut store, &format!("{name}.bn"), c),
                conv: conv(&mut store, rng, &format!("{name}.conv"), c, out, 1, Padding::Valid),
                se: se(&mut store, rng, &format!("{name}.se"), out, spec.se_ratio),
            });
            c = out;
        }
    }
    let head_bn = batch_norm(&mut store, "head.bn", c);
    let proj = dense(&mut store, rng, "head.proj", c, spec.output_dim());
    debug_assert_eq!(c, spec.feature_dim());

    Ok(Network {
        spec: spec.clone(),
        store,
        backbone: Backbone {
            stem,
            blocks,
            transitions,
            head_bn,
            proj,
            head: spec.head,
        },
    })
}

/// Build the fusion MLP over `cls_dim + reg_dim` concatenated features.
pub fn build_fusion_mlp<E: Element>(
    cls_dim: usize,
    reg_dim: usize,
    num_classes: usize,
    seed: u64,
) -> FusionNet<E> {
    let in_dim = cls_dim + reg_dim;
    let mut store = ParamStore::new();
    let rng = &mut rng::derive(seed, &[stream::INIT, 1]);
    let bn = batch_norm(&mut store, "fusion.bn", in_dim);
    let fc1 = dense(&mut store, rng, "fusion.fc1", in_dim, FUSION_HIDDEN);
    let fc2 = dense(&mut store, rng, "fusion.fc2", FUSION_HIDDEN, num_classes);
    FusionNet {
        in_dim,
        num_classes,
        store,
        mlp: FusionMlp { bn, fc1, fc2 },
    }
}
