//! Finite-difference gradient verification, shared between the dedicated
//! gradcheck suite and the acceptance run.

use super::{finite_diff_grad, max_rel_err, seeded_values};
use msedense::nn::{build_fusion_mlp, build_sedensenet, HeadKind, Mode, NetworkSpec, Pass};
use msedense::tensor::{Padding, Tape, Tensor, Var};

pub const SEEDS: [u64; 5] = [11, 22, 33, 44, 55];
pub const OP_TOL: f64 = 1e-5;
pub const NET_TOL: f64 = 1e-4;
const H: f64 = 1e-6;

struct Leaf {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Leaf {
    fn new(shape: &[usize], seed: u64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: seeded_values(seed, n),
        }
    }

    /// Positive variant for values used as probabilities or pool inputs.
    fn positive(shape: &[usize], seed: u64) -> Self {
        let mut leaf = Self::new(shape, seed);
        for v in &mut leaf.values {
            *v = 0.1 + 0.8 * v.abs() / 1.1;
        }
        leaf
    }
}

/// Dot the output with fixed coefficients so every entry influences the
/// scalar loss with a distinct weight.
fn reduce(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let shape = tape.value(y).shape().to_vec();
    let n = tape.value(y).numel();
    let c = tape.constant(Tensor::new(shape, seeded_values(seed ^ 0x5eed, n)).unwrap());
    let prod = tape.mul(y, c).unwrap();
    tape.sum_all(prod)
}

/// Check the analytic gradient of every leaf against central differences.
fn check_grads(leaves: &[Leaf], tol: f64, label: &str, build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var) {
    let eval = |over: Option<(usize, &[f64])>| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves
            .iter()
            .enumerate()
            .map(|(j, leaf)| {
                let data = match over {
                    Some((i, x)) if i == j => x.to_vec(),
                    _ => leaf.values.clone(),
                };
                tape.leaf(Tensor::new(leaf.shape.clone(), data).unwrap(), true)
            })
            .collect();
        let loss = build(&mut tape, &vars);
        (tape, vars, loss)
    };

    let (mut tape, vars, loss) = eval(None);
    assert_eq!(tape.value(loss).numel(), 1, "{label}: loss must be scalar");
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("leaf reached by backward").to_vec())
        .collect();

    for i in 0..leaves.len() {
        let mut f = |x: &[f64]| {
            let (t, _, l) = eval(Some((i, x)));
            t.value(l).data()[0]
        };
        let numeric = finite_diff_grad(&mut f, &leaves[i].values, H);
        let err = max_rel_err(&analytic[i], &numeric);
        assert!(
            err < tol,
            "{label}: leaf {i} max rel err {err:.3e} >= {tol:.0e}"
        );
    }
}

pub fn add_and_mul(seeds: &[u64]) {
    for &seed in seeds {
        check_grads(
            &[Leaf::new(&[2, 3], seed), Leaf::new(&[2, 3], seed + 1)],
            OP_TOL,
            "add",
            &|t, v| {
                let y = t.add(v[0], v[1]).unwrap();
                reduce(t, y, seed)
            },
        );
        check_grads(
            &[Leaf::new(&[2, 3], seed), Leaf::new(&[2, 3], seed + 2)],
            OP_TOL,
            "mul",
            &|t, v| {
                let y = t.mul(v[0], v[1]).unwrap();
                reduce(t, y, seed)
            },
        );
    }
}

pub fn relu_and_sigmoid(seeds: &[u64]) {
    for &seed in seeds {
        check_grads(&[Leaf::new(&[2, 3, 2, 2], seed)], OP_TOL, "relu", &|t, v| {
            let y = t.relu(v[0]);
            reduce(t, y, seed)
        });
        check_grads(&[Leaf::new(&[3, 4], seed)], OP_TOL, "sigmoid", &|t, v| {
            let y = t.sigmoid(v[0]);
            reduce(t, y, seed)
        });
    }
}

pub fn dense_layer(seeds: &[u64]) {
    for &seed in seeds {
        check_grads(
            &[
                Leaf::new(&[3, 4], seed),
                Leaf::new(&[4, 2], seed + 1),
                Leaf::new(&[2], seed + 2),
            ],
            OP_TOL,
            "dense",
            &|t, v| {
                let y = t.dense(v[0], v[1], Some(v[2])).unwrap();
                reduce(t, y, seed)
            },
        );
    }
}

pub fn conv_variants(seeds: &[u64]) {
    for &seed in seeds {
        check_grads(
            &[
                Leaf::new(&[2, 3, 5, 5], seed),
                Leaf::new(&[4, 3, 3, 3], seed + 1),
                Leaf::new(&[4], seed + 2),
            ],
            OP_TOL,
            "conv2d same",
            &|t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 1, Padding::Same).unwrap();
                reduce(t, y, seed)
            },
        );
        check_grads(
            &[
                Leaf::new(&[1, 2, 6, 6], seed),
                Leaf::new(&[3, 2, 3, 3], seed + 3),
                Leaf::new(&[3], seed + 4),
            ],
            OP_TOL,
            "conv2d strided valid",
            &|t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 2, Padding::Valid).unwrap();
                reduce(t, y, seed)
            },
        );
    }
}

pub fn batch_norm_modes(seeds: &[u64]) {
    for &seed in seeds {
        check_grads(
            &[
                Leaf::new(&[4, 3, 2, 2], seed),
                Leaf::new(&[3], seed + 1),
                Leaf::new(&[3], seed + 2),
            ],
            OP_TOL,
            "batch_norm_train rank 4",
            &|t, v| {
                let y = t.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap();
                reduce(t, y, seed)
            },
        );
        check_grads(
            &[
                Leaf::new(&[6, 3], seed),
                Leaf::new(&[3], seed + 3),
                Leaf::new(&[3], seed + 4),
            ],
            OP_TOL,
            "batch_norm_train rank 2",
            &|t, v| {
                let y = t.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap();
                reduce(t, y, seed)
            },
        );
        let mean = seeded_values(seed + 5, 3);
        let var: Vec<f64> = seeded_values(seed + 6, 3).iter().map(|v| 0.5 + v.abs()).collect();
        check_grads(
            &[
                Leaf::new(&[4, 3, 2, 2], seed),
                Leaf::new(&[3], seed + 1),
                Leaf::new(&[3], seed + 2),
            ],
            OP_TOL,
            "batch_norm_eval",
            &|t, v| {
                let y = t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5).unwrap();
                reduce(t, y, seed)
            },
        );
    }
}

pub fn pooling(seeds: &[u64]) {
    for &seed in seeds {
        check_grads(
            &[Leaf::new(&[2, 3, 4, 4], seed)],
            OP_TOL,
            "avg_pool2d",
            &|t, v| {
                let y = t.avg_pool2d(v[0], 2, 2).unwrap();
                reduce(t, y, seed)
            },
        );
        check_grads(
            &[Leaf::new(&[2, 3, 3, 3], seed)],
            OP_TOL,
            "global_avg_pool",
            &|t, v| {
                let y = t.global_avg_pool(v[0]).unwrap();
                reduce(t, y, seed)
            },
        );
    }
}

pub fn concat_and_scale(seeds: &[u64]) {
    for &seed in seeds {
        check_grads(
            &[Leaf::new(&[2, 2, 3, 3], seed), Leaf::new(&[2, 3, 3, 3], seed + 1)],
            OP_TOL,
            "concat rank 4",
            &|t, v| {
                let y = t.concat_channels(v[0], v[1]).unwrap();
                reduce(t, y, seed)
            },
        );
        check_grads(
            &[Leaf::new(&[3, 4], seed), Leaf::new(&[3, 2], seed + 2)],
            OP_TOL,
            "concat rank 2",
            &|t, v| {
                let y = t.concat_channels(v[0], v[1]).unwrap();
                reduce(t, y, seed)
            },
        );
        check_grads(
            &[Leaf::new(&[2, 3, 2, 2], seed), Leaf::new(&[2, 3], seed + 3)],
            OP_TOL,
            "scale_channels",
            &|t, v| {
                let y = t.scale_channels(v[0], v[1]).unwrap();
                reduce(t, y, seed)
            },
        );
    }
}

pub fn losses_and_softmax(seeds: &[u64]) {
    let targets = [0usize, 3, 4, 1];
    let weights = [1.5, 0.5, 2.0, 1.0, 0.8];
    for &seed in seeds {
        let sw: Vec<f64> = targets.iter().map(|&t| weights[t]).collect();
        check_grads(
            &[Leaf::positive(&[4, 5], seed)],
            OP_TOL,
            "cross_entropy on probabilities",
            &|t, v| t.cross_entropy(v[0], &targets, Some(&sw), 1e-7).unwrap(),
        );
        check_grads(
            &[Leaf::new(&[4, 5], seed)],
            OP_TOL,
            "softmax then cross_entropy",
            &|t, v| {
                let p = t.softmax(v[0]).unwrap();
                t.cross_entropy(p, &targets, Some(&sw), 1e-7).unwrap()
            },
        );
        check_grads(&[Leaf::new(&[3, 5], seed)], OP_TOL, "softmax", &|t, v| {
            let p = t.softmax(v[0]).unwrap();
            reduce(t, p, seed)
        });
        let mse_targets = seeded_values(seed + 9, 4);
        let mse_weights = [0.5, 2.0, 1.0, 1.5];
        check_grads(&[Leaf::new(&[4, 1], seed)], OP_TOL, "mse", &|t, v| {
            t.mse(v[0], &mse_targets, Some(&mse_weights)).unwrap()
        });
        check_grads(&[Leaf::new(&[4], seed)], OP_TOL, "mse rank 1", &|t, v| {
            t.mse(v[0], &mse_targets, None).unwrap()
        });
    }
}

pub fn se_composite(seeds: &[u64]) {
    for &seed in seeds {
        check_grads(
            &[
                Leaf::new(&[2, 4, 3, 3], seed),
                Leaf::new(&[4, 2], seed + 1),
                Leaf::new(&[2], seed + 2),
                Leaf::new(&[2, 4], seed + 3),
                Leaf::new(&[4], seed + 4),
            ],
            OP_TOL,
            "squeeze-excitation",
            &|t, v| {
                let pooled = t.global_avg_pool(v[0]).unwrap();
                let r = t.dense(pooled, v[1], Some(v[2])).unwrap();
                let r = t.relu(r);
                let e = t.dense(r, v[3], Some(v[4])).unwrap();
                let s = t.sigmoid(e);
                let y = t.scale_channels(v[0], s).unwrap();
                reduce(t, y, seed)
            },
        );
    }
}

/// Every individual op check, all seeds.
pub fn all_layer_ops(seeds: &[u64]) {
    add_and_mul(seeds);
    relu_and_sigmoid(seeds);
    dense_layer(seeds);
    conv_variants(seeds);
    batch_norm_modes(seeds);
    pooling(seeds);
    concat_and_scale(seeds);
    losses_and_softmax(seeds);
    se_composite(seeds);
}

/// Flatten all parameters in slot order.
fn flatten(store: &msedense::nn::ParamStore<f64>) -> Vec<f64> {
    store
        .params
        .iter()
        .flat_map(|p| p.value.data().iter().copied())
        .collect()
}

fn unflatten(store: &mut msedense::nn::ParamStore<f64>, flat: &[f64]) {
    let mut at = 0;
    for p in &mut store.params {
        let n = p.value.numel();
        p.value.data_mut().copy_from_slice(&flat[at..at + n]);
        at += n;
    }
}

/// Weighted cross-entropy loss of one train-mode forward pass.
fn backbone_loss(
    net: &msedense::nn::Network<f64>,
    x: &Tensor<f64>,
    targets: &[usize],
    sample_weights: &[f64],
) -> (Tape<f64>, Var, Vec<(usize, Var)>) {
    let mut tape = Tape::new();
    let mut pass = Pass::new(&mut tape, Mode::Train, true);
    let xv = pass.input(x.clone());
    let out = net.forward(&mut pass, xv).unwrap();
    let loss = pass
        .tape_mut()
        .cross_entropy(out.output, targets, Some(sample_weights), 1e-7)
        .unwrap();
    let bound = pass.bound().to_vec();
    (tape, loss, bound)
}

/// Desk-scale network at an 8x8 input: finite differences over every
/// parameter of a weighted cross-entropy training loss.
pub fn composed_network(seeds: &[u64]) {
    let mut spec = NetworkSpec::desk(HeadKind::Classification);
    spec.input = (8, 8, 3);
    let targets = [2usize, 4];
    let weights = [1.5, 0.5, 2.0, 1.0, 0.8];
    let sw: Vec<f64> = targets.iter().map(|&t| weights[t]).collect();

    for &seed in seeds {
        let mut net = build_sedensenet::<f64>(&spec, seed).unwrap();
        let mut x_vals = seeded_values(seed + 7, 2 * 3 * 8 * 8);
        for v in &mut x_vals {
            *v = v.abs() / 1.1;
        }
        let x = Tensor::new(vec![2, 3, 8, 8], x_vals).unwrap();

        let (mut tape, loss, bound) = backbone_loss(&net, &x, &targets, &sw);
        tape.backward(loss).unwrap();
        let mut analytic = vec![Vec::new(); net.store.params.len()];
        for (slot, var) in bound {
            analytic[slot] = tape.grad(var).unwrap().to_vec();
        }
        let analytic_flat: Vec<f64> = analytic.into_iter().flatten().collect();

        let at = flatten(&net.store);
        let mut f = |flat: &[f64]| {
            unflatten(&mut net.store, flat);
            let (t, l, _) = backbone_loss(&net, &x, &targets, &sw);
            t.value(l).data()[0]
        };
        let numeric = finite_diff_grad(&mut f, &at, H);
        let err = max_rel_err(&analytic_flat, &numeric);
        assert!(
            err < NET_TOL,
            "composed network (seed {seed}): max rel err {err:.3e} >= {NET_TOL:.0e}"
        );
    }
}

/// Fusion MLP: finite differences over every parameter of a
/// cross-entropy training loss.
pub fn composed_fusion(seeds: &[u64]) {
    let targets = [1usize, 3, 0];
    for &seed in seeds {
        let mut mlp = build_fusion_mlp::<f64>(24, 24, 5, seed);
        let f_vals = seeded_values(seed + 8, 3 * 48);
        let features = Tensor::new(vec![3, 48], f_vals).unwrap();

        let run = |mlp: &msedense::nn::FusionNet<f64>| {
            let mut tape = Tape::new();
            let mut pass = Pass::new(&mut tape, Mode::Train, true);
            let fv = pass.input(features.clone());
            let probs = mlp.forward(&mut pass, fv).unwrap();
            let loss = pass
                .tape_mut()
                .cross_entropy(probs, &targets, None, 1e-7)
                .unwrap();
            let bound = pass.bound().to_vec();
            (tape, loss, bound)
        };

        let (mut tape, loss, bound) = run(&mlp);
        tape.backward(loss).unwrap();
        let mut analytic = vec![Vec::new(); mlp.store.params.len()];
        for (slot, var) in bound {
            analytic[slot] = tape.grad(var).unwrap().to_vec();
        }
        let analytic_flat: Vec<f64> = analytic.into_iter().flatten().collect();

        let at = flatten(&mlp.store);
        let mut f = |flat: &[f64]| {
            unflatten(&mut mlp.store, flat);
            let (t, l, _) = run(&mlp);
            t.value(l).data()[0]
        };
        let numeric = finite_diff_grad(&mut f, &at, H);
        let err = max_rel_err(&analytic_flat, &numeric);
        assert!(
            err < NET_TOL,
            "fusion MLP (seed {seed}): max rel err {err:.3e} >= {NET_TOL:.0e}"
        );
    }
}
