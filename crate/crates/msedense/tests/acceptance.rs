//! The nine release criteria, each printed as one pass/fail line with its
//! runtime. Run `cargo test --test acceptance -- --nocapture` to watch
//! them as they complete; the test fails at the end if any line failed.

#[allow(dead_code)]
mod common;

use common::grad;
use msedense::data::{class_weights, synth_generate, Dataset, NUM_CLASSES};
use msedense::metrics::{report, weighted_kappa, ConfusionMatrix};
use msedense::nn::{build_fusion_mlp, build_sedensenet, HeadKind, Mode, NetworkSpec, Pass};
use msedense::optim::{LrSchedule, Plateau, ScheduledRates};
use msedense::pipeline::{
    evaluate_classifier, load_backbone, load_fusion, predict, severity_by_stage, train_multitask,
    FusionModel, PhaseName, PipelineConfig,
};
use msedense::{parallel, rng, Tape, Tensor};
use rand::Rng;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

fn fixture(name: &str) -> ConfusionMatrix {
    let path = format!("{}/fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
    ConfusionMatrix::from_csv_path(&path).unwrap()
}

/// Quadratic weighted kappa recomputed from scratch in proportion form
/// with the explicit (k-1)^2 weight normalization, as an independent
/// cross-check of the metrics module's count form (which cancels that
/// factor).
fn kappa_by_brute_force(cm: &ConfusionMatrix) -> f64 {
    let k = cm.num_classes();
    let total = cm.total() as f64;
    let rows = cm.row_sums();
    let cols = cm.col_sums();
    let norm = ((k - 1) * (k - 1)) as f64;
    let mut observed = 0.0;
    let mut expected = 0.0;
    for i in 0..k {
        for j in 0..k {
            let w = ((i as f64) - (j as f64)).powi(2) / norm;
            observed += w * cm.count(i, j) as f64 / total;
            expected += w * (rows[i] as f64 / total) * (cols[j] as f64 / total);
        }
    }
    1.0 - observed / expected
}

/// One trained run of criterion 6, kept for the ablation in criterion 7.
struct SeedRun {
    fusion_acc: f64,
    cls_acc: f64,
}

fn check(
    n: usize,
    what: &str,
    budget_secs: Option<f64>,
    failures: &mut Vec<usize>,
    f: impl FnOnce() -> String,
) {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f));
    let secs = start.elapsed().as_secs_f64();
    match result {
        Ok(detail) => {
            if let Some(budget) = budget_secs {
                if secs > budget {
                    println!(
                        "criterion {n} FAIL ({secs:.1}s) {what}: over the {budget:.0}s budget"
                    );
                    failures.push(n);
                    return;
                }
            }
            println!("criterion {n} PASS ({secs:.1}s) {what}: {detail}");
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic without message".into());
            println!("criterion {n} FAIL ({secs:.1}s) {what}: {msg}");
            failures.push(n);
        }
    }
}

#[test]
fn acceptance_criteria() {
    let mut failures: Vec<usize> = Vec::new();
    let mut runs: Vec<SeedRun> = Vec::new();
    let mut seed1: Option<(FusionModel, tempfile::TempDir)> = None;

    check(1, "accuracy and kappa vs published tables", Some(1.0), &mut failures, || {
        let cls = fixture("aptos_cls_exp1.csv");
        let multi = fixture("aptos_multitask_exp1.csv");
        let rc = report(&cls).unwrap();
        let rm = report(&multi).unwrap();
        assert!((rc.accuracy - 0.809).abs() <= 0.005, "cls accuracy {:.4}", rc.accuracy);
        assert!((rc.weighted_kappa - 0.842).abs() <= 0.005, "cls kappa {:.4}", rc.weighted_kappa);
        assert!((rm.accuracy - 0.853).abs() <= 0.005, "multitask accuracy {:.4}", rm.accuracy);
        assert!((rm.weighted_kappa - 0.88).abs() <= 0.01, "multitask kappa {:.4}", rm.weighted_kappa);
        for cm in [&cls, &multi] {
            let brute = kappa_by_brute_force(cm);
            let fast = weighted_kappa(cm).unwrap();
            assert!((brute - fast).abs() < 1e-12, "kappa {fast} vs brute force {brute}");
        }
        format!(
            "accuracy {:.4}/{:.4}, kappa {:.4}/{:.4}, brute-force kappa agrees",
            rc.accuracy, rm.accuracy, rc.weighted_kappa, rm.weighted_kappa
        )
    });

    check(2, "macro precision and recall", Some(1.0), &mut failures, || {
        let r = report(&fixture("aptos_cls_exp1.csv")).unwrap();
        assert!((r.macro_precision - 0.67).abs() <= 0.015, "macro precision {:.4}", r.macro_precision);
        assert!((r.macro_recall - 0.59).abs() <= 0.015, "macro recall {:.4}", r.macro_recall);
        format!("macro precision {:.4}, recall {:.4}", r.macro_precision, r.macro_recall)
    });

    check(3, "inverse-frequency class weights", Some(1.0), &mut failures, || {
        let counts = [1805usize, 370, 999, 193, 295];
        let expected = [0.4058, 1.9795, 0.7330, 3.7948, 2.4827];
        let n: usize = counts.iter().sum();
        let cw = class_weights(&counts).unwrap();
        for j in 0..NUM_CLASSES {
            let independent = n as f64 / (NUM_CLASSES as f64 * counts[j] as f64);
            assert!((cw.w[j] - independent).abs() < 1e-12, "class {j} differs from direct formula");
            assert!((cw.w[j] - expected[j]).abs() < 1e-3, "class {j} weight {:.4}", cw.w[j]);
        }
        let resum: f64 = cw.w.iter().zip(&counts).map(|(w, &c)| w * c as f64).sum();
        assert!((resum - n as f64).abs() < 1e-9, "weighted counts re-sum to {resum}, not {n}");
        format!("weights within 1e-3 of {expected:?}, weighted counts re-sum to {n}")
    });

    check(4, "finite-difference gradients", Some(120.0), &mut failures, || {
        grad::all_layer_ops(&grad::SEEDS);
        grad::composed_network(&grad::SEEDS);
        grad::composed_fusion(&grad::SEEDS);
        format!(
            "every op < {:.0e}, composed networks < {:.0e}, {} seeds",
            grad::OP_TOL,
            grad::NET_TOL,
            grad::SEEDS.len()
        )
    });

    check(5, "full-scale channel arithmetic", None, &mut failures, || {
        let mut spec = NetworkSpec::paper(HeadKind::Classification);
        spec.input = (16, 16, 3);
        let net = build_sedensenet::<f32>(&spec, 7).unwrap();
        let mut tape = Tape::new();
        let mut pass = Pass::new(&mut tape, Mode::Eval, false);
        let x = pass.input(Tensor::new(vec![1, 3, 16, 16], vec![0.5; 3 * 16 * 16]).unwrap());
        net.forward(&mut pass, x).unwrap();
        let channels: Vec<usize> = pass
            .shape_log
            .iter()
            .filter(|(name, _)| name != "features")
            .map(|(_, shape)| shape[1])
            .collect();
        let want = vec![36, 324, 162, 450, 225, 513, 256, 544, 272, 560];
        assert_eq!(channels, want, "block-boundary channels from forward shapes");
        let features = pass.shape_log.iter().find(|(n, _)| n == "features").unwrap();
        assert_eq!(features.1, vec![1, 560], "pooled feature shape");
        assert_eq!(spec.feature_dim(), 560);
        let fusion = build_fusion_mlp::<f32>(spec.feature_dim(), spec.feature_dim(), 5, 0);
        assert_eq!(fusion.in_dim, 1120, "fusion input dimension");
        format!("36->324->162->450->225->513->256->544->272->560, fusion input 1120")
    });

    check(6, "desk-scale end-to-end training", Some(1200.0), &mut failures, || {
        let cfg = PipelineConfig::desk();
        let mut accs = Vec::new();
        for seed in [1u64, 2, 3] {
            let train = synth_generate(200, cfg.image_size, seed).unwrap();
            let val = synth_generate(40, cfg.image_size, 1000 + seed).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let outcome =
                train_multitask(&cfg, &train, &val, seed, Some(dir.path()), &mut |_, _| {})
                    .unwrap();
            assert_eq!(outcome.cls.records.len(), 30);
            assert_eq!(outcome.reg.records.len(), 15);
            assert_eq!(outcome.fusion.records.len(), 15);
            let fusion_acc = outcome.report.accuracy;
            assert!(
                fusion_acc >= 0.85,
                "seed {seed}: fusion validation accuracy {fusion_acc:.4} < 0.85"
            );
            let sev = severity_by_stage(&outcome.model.reg, &val, cfg.batch_size).unwrap();
            for s in 0..NUM_CLASSES - 1 {
                assert!(
                    sev[s] < sev[s + 1],
                    "seed {seed}: mean regression output not strictly increasing: {sev:?}"
                );
            }
            let cls_acc = evaluate_classifier(&outcome.model.cls, &val, cfg.batch_size)
                .unwrap()
                .1
                .accuracy;
            accs.push(fusion_acc);
            runs.push(SeedRun { fusion_acc, cls_acc });
            if seed == 1 {
                seed1 = Some((outcome.model, dir));
            }
        }
        format!(
            "fusion accuracy {:.3}/{:.3}/{:.3} for seeds 1/2/3, severity strictly increasing",
            accs[0], accs[1], accs[2]
        )
    });

    check(7, "multitask ablation direction", None, &mut failures, || {
        assert_eq!(runs.len(), 3, "needs the three runs of criterion 6");
        let mean_fusion: f64 = runs.iter().map(|r| r.fusion_acc).sum::<f64>() / 3.0;
        let mean_cls: f64 = runs.iter().map(|r| r.cls_acc).sum::<f64>() / 3.0;
        let delta = mean_fusion - mean_cls;
        assert!(
            mean_fusion >= mean_cls - 0.02,
            "mean fusion accuracy {mean_fusion:.4} more than 0.02 below classification-only {mean_cls:.4}"
        );
        format!(
            "delta {delta:+.4} on desk synthetic data (full-scale reference is approx +0.03 to +0.04 and is not reproducible at this scale)"
        )
    });

    check(8, "determinism and persistence", None, &mut failures, || {
        let mut cfg = PipelineConfig::desk();
        cfg.cls_epochs = 4;
        cfg.reg_epochs = 3;
        cfg.fusion_epochs = 3;
        let train = synth_generate(40, cfg.image_size, 9).unwrap();
        let val = synth_generate(15, cfg.image_size, 1009).unwrap();
        let run = |cfg: &PipelineConfig, train: &Dataset, val: &Dataset| {
            train_multitask(cfg, train, val, 9, None, &mut |_, _| {}).unwrap()
        };
        parallel::set_sequential(true);
        let a = run(&cfg, &train, &val);
        let b = run(&cfg, &train, &val);
        parallel::set_sequential(false);
        let c = run(&cfg, &train, &val);
        assert_eq!(a.report, b.report, "strict-mode reruns differ");
        assert_eq!(a.confusion, b.confusion, "strict-mode confusion matrices differ");
        assert_eq!(a.cls.records, b.cls.records, "strict-mode classification histories differ");
        assert_eq!(a.reg.records, b.reg.records, "strict-mode regression histories differ");
        assert_eq!(a.fusion.records, b.fusion.records, "strict-mode fusion histories differ");
        assert_eq!(a.report, c.report, "parallel run differs from strict mode");

        let (model, dir) = seed1.take().expect("criterion 6 stored the seed-1 model");
        let (cls, _, _) = load_backbone(&dir.path().join("cls.ckpt")).unwrap();
        let (reg, _, _) = load_backbone(&dir.path().join("reg.ckpt")).unwrap();
        let (fusion, _, _) = load_fusion(&dir.path().join("fusion.ckpt")).unwrap();
        let loaded = FusionModel { cls, reg, fusion };
        let mut r = rng::seeded(77);
        for i in 0..10 {
            let image = Tensor::new(
                vec![3, 32, 32],
                (0..3 * 32 * 32).map(|_| r.random_range(0.0f32..1.0)).collect(),
            )
            .unwrap();
            let before = predict(&model, &image).unwrap();
            let after = predict(&loaded, &image).unwrap();
            assert_eq!(before.stage, after.stage, "input {i}: stage differs");
            assert_eq!(
                before.severity.to_bits(),
                after.severity.to_bits(),
                "input {i}: severity not bitwise identical"
            );
            let same = before
                .probs
                .iter()
                .zip(&after.probs)
                .all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same, "input {i}: probabilities not bitwise identical");
        }
        "strict reruns identical, parallel matches, checkpoint predictions bitwise equal on 10 inputs".into()
    });

    check(9, "schedule conformance", Some(1.0), &mut failures, || {
        let s = LrSchedule::classification();
        let rates = |lr, momentum| ScheduledRates { lr, momentum };
        for (epoch, want) in [
            (1, rates(1e-3, Some(0.7))),
            (75, rates(1e-3, Some(0.7))),
            (150, rates(1e-3, Some(0.7))),
            (151, rates(1e-4, Some(0.7))),
            (200, rates(1e-4, Some(0.7))),
            (201, rates(1e-5, Some(0.5))),
            (250, rates(1e-5, Some(0.5))),
        ] {
            assert_eq!(s.at(epoch, &[]), want, "epoch {epoch}");
            assert_eq!(s.at(epoch, &[]), s.at(epoch, &[]), "epoch {epoch} not pure");
        }

        let p = LrSchedule::flat(1e-3).with_plateau(4, 0.1);
        let improving: Vec<f64> = (1..=10).map(|e| 1.0 / e as f64).collect();
        assert_eq!(p.at(11, &improving).lr, 1e-3, "improving history must not reduce");
        let one_stall = [1.0, 1.1, 1.1, 1.1, 1.1];
        let lr = p.at(6, &one_stall).lr;
        assert!((lr - 1e-4).abs() < 1e-15, "one plateau: lr {lr}");
        let two_stalls = [1.0, 1.1, 1.1, 1.1, 1.1, 1.1, 1.1, 1.1, 1.1];
        let lr = p.at(10, &two_stalls).lr;
        assert!((lr - 1e-5).abs() < 1e-16, "two plateaus: lr {lr}");
        let three_short = [1.0, 1.1, 1.1, 1.1];
        assert_eq!(p.at(5, &three_short).lr, 1e-3, "three stalls are below patience");

        let phase = PipelineConfig::desk().phase(PhaseName::Fusion, 0);
        assert_eq!(
            phase.schedule.plateau,
            Some(Plateau { patience: 4, factor: 0.1 }),
            "fusion phase plateau defaults"
        );
        "timeline 1e-3/0.7 -> 1e-4 after 150 -> 1e-5/0.5 after 200; plateau patience 4 factor 0.1".into()
    });

    assert!(
        failures.is_empty(),
        "failed acceptance criteria: {failures:?} (see lines above, rerun with -- --nocapture)"
    );
}
