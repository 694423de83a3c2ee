//! Dataset ingestion, preprocessing, augmentation, class weighting,
//! random splits, and a synthetic ordinal-image generator.
//!
//! The on-disk layout mirrors the public retinopathy sets: a `labels.csv`
//! with header `id_code,diagnosis` next to 8-bit RGB images named
//! `<id>.png` or `<id>.ppm`. Loaded images carry raw intensities in
//! `[0,255]`; [`resize_normalize`] produces the canonical `[0,1]` form the
//! rest of the pipeline consumes, and [`synth_generate`] emits canonical
//! samples directly.

mod io;
mod synth;
mod transform;

pub use io::{load_dataset, load_image, save_dataset};
pub use synth::synth_generate;
pub use transform::{
    apply_affine, augment, bilinear_resize, resize_normalize, AugmentParams, AugmentPolicy,
};

use crate::element::Element;
use crate::rng;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use std::path::PathBuf;

/// Number of severity stages.
pub const NUM_CLASSES: usize = 5;

/// Everything that can go wrong between disk and canonical samples.
#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("labels file error: {0}")]
    Csv(#[from] csv::Error),
    #[error("labels file must have header `id_code,diagnosis`, found `{found}`")]
    BadHeader { found: String },
    #[error("diagnosis for `{id}` must be an integer in 0..=4, found `{value}`")]
    BadDiagnosis { id: String, value: String },
    #[error("missing image files for {} labeled ids: {}", ids.len(), ids.join(", "))]
    MissingImages { ids: Vec<String> },
    #[error("cannot read image `{path}`: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("image `{path}` is not 8-bit RGB (decoded as {found})")]
    NotRgb8 { path: PathBuf, found: String },
    #[error("resize target {h}x{w} is degenerate; the minimum is 8x8")]
    DegenerateTarget { h: usize, w: usize },
    #[error("augmentation policy is invalid: {reason}")]
    BadPolicy { reason: String },
    #[error("class {class} has zero samples; class weights are undefined")]
    ZeroClassCount { class: usize },
    #[error("train fraction {fraction} is outside (0, 1)")]
    BadFraction { fraction: f64 },
    #[error("train fraction {fraction} leaves an empty side for {n} samples")]
    EmptySide { fraction: f64, n: usize },
    #[error("synthetic image size {size} is below the minimum of 16")]
    SynthTooSmall { size: usize },
}

/// One image with its ordinal stage. The regression target is derived, not
/// stored, so it can never disagree with the stage.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub id: String,
    /// `[3, H, W]`; raw `[0,255]` straight off disk, `[0,1]` once canonical.
    pub image: Tensor<f32>,
    /// Severity stage in `0..=4`.
    pub stage: usize,
}

impl LabeledSample {
    /// Severity score for the regression head: 0.2 per stage.
    pub fn regression_target(&self) -> f32 {
        regression_target(self.stage)
    }
}

/// Stage-to-score mapping: 0, 0.2, 0.4, 0.6, 0.8.
pub fn regression_target(stage: usize) -> f32 {
    stage as f32 * 0.2
}

/// An ordered collection of labeled samples.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<LabeledSample>,
}

impl Dataset {
    pub fn new(samples: Vec<LabeledSample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Per-stage sample counts.
    pub fn counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for s in &self.samples {
            counts[s.stage] += 1;
        }
        counts
    }
}

/// Inverse-frequency class weights `w_j = n / (k * n_j)` with `k = 5`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    pub w: [f64; NUM_CLASSES],
    pub n: usize,
    pub n_j: [usize; NUM_CLASSES],
}

impl ClassWeights {
    /// Weights cast to the training element type.
    pub fn as_vec<E: Element>(&self) -> Vec<E> {
        self.w.iter().map(|&w| E::from_f64(w)).collect()
    }
}

/// Weigh classes inversely proportional to their frequency.
pub fn class_weights(counts: &[usize; NUM_CLASSES]) -> Result<ClassWeights, DataError> {
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(DataError::ZeroClassCount { class });
    }
    let n: usize = counts.iter().sum();
    let mut w = [0.0; NUM_CLASSES];
    for (wj, &nj) in w.iter_mut().zip(counts) {
        *wj = n as f64 / (NUM_CLASSES as f64 * nj as f64);
    }
    Ok(ClassWeights {
        w,
        n,
        n_j: *counts,
    })
}

/// Seeded random split without stratification. Consumes the dataset and
/// returns disjoint, exhaustive train and validation parts.
pub fn split(
    dataset: Dataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), DataError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::BadFraction {
            fraction: train_fraction,
        });
    }
    let n = dataset.len();
    let n_train = (train_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(DataError::EmptySide {
            fraction: train_fraction,
            n,
        });
    }
    let mut samples = dataset.samples;
    samples.shuffle(&mut rng::derive(seed, &[rng::stream::SPLIT]));
    let val = samples.split_off(n_train);
    Ok((Dataset::new(samples), Dataset::new(val)))
}

/// Randomly keep at most `cap` samples of `class`, seeded; other classes
/// pass through. Survivors stay in their original order.
pub fn cap_class(dataset: Dataset, class: usize, cap: usize, seed: u64) -> Dataset {
    let mut indices: Vec<usize> = dataset
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.stage == class)
        .map(|(i, _)| i)
        .collect();
    if indices.len() <= cap {
        return dataset;
    }
    indices.shuffle(&mut rng::derive(seed, &[rng::stream::CAP, class as u64]));
    let dropped: std::collections::HashSet<usize> = indices[cap..].iter().copied().collect();
    let samples = dataset
        .samples
        .into_iter()
        .enumerate()
        .filter(|(i, _)| !dropped.contains(i))
        .map(|(_, s)| s)
        .collect();
    Dataset::new(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blank(id: &str, stage: usize) -> LabeledSample {
        LabeledSample {
            id: id.to_string(),
            image: Tensor::zeros(vec![3, 2, 2]),
            stage,
        }
    }

    fn toy(counts: &[usize; NUM_CLASSES]) -> Dataset {
        let mut samples = Vec::new();
        for (stage, &c) in counts.iter().enumerate() {
            for i in 0..c {
                samples.push(blank(&format!("c{stage}i{i}"), stage));
            }
        }
        Dataset::new(samples)
    }

    #[test]
    fn regression_targets_enumerate_fifths() {
        let targets: Vec<f32> = (0..5).map(regression_target).collect();
        assert_eq!(targets, vec![0.0, 0.2, 0.4, 0.6, 0.8]);
        for (stage, &t) in targets.iter().enumerate() {
            assert_eq!(t, stage as f32 * 0.2);
        }
    }

    #[test]
    fn balanced_counts_give_unit_weights() {
        let cw = class_weights(&[7, 7, 7, 7, 7]).unwrap();
        assert_eq!(cw.w, [1.0; 5]);
    }

    #[test]
    fn inverse_frequency_weights_match_published_counts() {
        let aptos = class_weights(&[1805, 370, 999, 193, 295]).unwrap();
        assert_eq!(aptos.n, 3662);
        assert!((aptos.w[0] - 0.4058).abs() < 5e-5);
        assert!((aptos.w[3] - 3.7948).abs() < 5e-5);
        assert_eq!(aptos.w[0], 3662.0 / 9025.0);
        assert_eq!(aptos.w[3], 3662.0 / 965.0);

        let eyepacs = class_weights(&[10000, 2443, 5292, 873, 708]).unwrap();
        assert_eq!(eyepacs.n, 19316);
        assert!((eyepacs.w[4] - 5.4565).abs() < 5e-5);
        assert_eq!(eyepacs.w[4], 19316.0 / 3540.0);
    }

    #[test]
    fn weighted_counts_resum_to_total() {
        for counts in [[1805, 370, 999, 193, 295], [1, 2, 3, 4, 5], [9, 9, 9, 9, 9]] {
            let cw = class_weights(&counts).unwrap();
            let resum: f64 = cw.w.iter().zip(&counts).map(|(w, &n)| w * n as f64).sum();
            assert!((resum - cw.n as f64).abs() / (cw.n as f64) < 1e-9);
        }
    }

    #[test]
    fn zero_count_class_is_rejected() {
        let err = class_weights(&[3, 0, 1, 1, 1]).unwrap_err();
        assert!(matches!(err, DataError::ZeroClassCount { class: 1 }));
    }

    #[test]
    fn split_partitions_ninety_ten() {
        let data = toy(&[2, 2, 2, 2, 2]);
        let ids: Vec<String> = data.samples.iter().map(|s| s.id.clone()).collect();
        let (train, val) = split(data, 0.9, 11).unwrap();
        assert_eq!((train.len(), val.len()), (9, 1));
        let mut union: Vec<String> = train
            .samples
            .iter()
            .chain(&val.samples)
            .map(|s| s.id.clone())
            .collect();
        union.sort();
        let mut expected = ids;
        expected.sort();
        assert_eq!(union, expected);
    }

    #[test]
    fn split_is_reproducible_by_seed() {
        let order = |seed| {
            let (train, val) = split(toy(&[4, 1, 1, 1, 1]), 0.75, seed).unwrap();
            (
                train.samples.iter().map(|s| s.id.clone()).collect::<Vec<_>>(),
                val.samples.iter().map(|s| s.id.clone()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(order(3), order(3));
        assert_ne!(order(3), order(4));
    }

    #[test]
    fn split_rejects_bad_fractions() {
        assert!(matches!(
            split(toy(&[1, 1, 1, 1, 1]), 1.0, 0),
            Err(DataError::BadFraction { .. })
        ));
        assert!(matches!(
            split(toy(&[1, 1, 1, 1, 1]), 0.0, 0),
            Err(DataError::BadFraction { .. })
        ));
        // round(0.9 * 2) = 2 leaves validation empty.
        let two = Dataset::new(vec![blank("a", 0), blank("b", 1)]);
        assert!(matches!(split(two, 0.9, 0), Err(DataError::EmptySide { .. })));
    }

    #[test]
    fn cap_class_subsamples_one_class_deterministically() {
        let data = toy(&[10, 3, 1, 1, 1]);
        let capped = cap_class(data.clone(), 0, 4, 9);
        assert_eq!(capped.counts(), [4, 3, 1, 1, 1]);
        let again = cap_class(data.clone(), 0, 4, 9);
        let ids = |d: &Dataset| d.samples.iter().map(|s| s.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&capped), ids(&again));
        let all: std::collections::HashSet<String> = ids(&data).into_iter().collect();
        assert!(ids(&capped).iter().all(|id| all.contains(id)));
        // Cap above the count is a no-op.
        assert_eq!(cap_class(data.clone(), 0, 99, 9).counts(), data.counts());
    }
}
