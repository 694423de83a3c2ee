//! Geometric preprocessing: bilinear resize, intensity normalization, and
//! randomized affine augmentation.

use super::{DataError, LabeledSample};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Edge-clamped bilinear sample of one `[H, W]` plane at real coordinates,
/// accumulated in f64 so exact integer coordinates reproduce pixels
/// bitwise after the f32 cast.
fn sample_bilinear(plane: &[f32], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let clamp = |v: i64, hi: usize| v.clamp(0, hi as i64 - 1) as usize;
    let (x0, y0) = (x.floor() as i64, y.floor() as i64);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let (xa, xb) = (clamp(x0, w), clamp(x0 + 1, w));
    let (ya, yb) = (clamp(y0, h), clamp(y0 + 1, h));
    let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
    let top = lerp(plane[ya * w + xa] as f64, plane[ya * w + xb] as f64, fx);
    let bottom = lerp(plane[yb * w + xa] as f64, plane[yb * w + xb] as f64, fx);
    lerp(top, bottom, fy)
}

/// Bilinear resize of a `[C, H, W]` image with half-pixel-centered
/// sampling: destination pixel `d` reads source coordinate
/// `(d + 0.5) * scale - 0.5`, clamped at the edges.
pub fn bilinear_resize(image: &Tensor<f32>, out_h: usize, out_w: usize) -> Tensor<f32> {
    let shape = image.shape();
    assert_eq!(shape.len(), 3, "expected [C, H, W], got {shape:?}");
    assert!(out_h >= 1 && out_w >= 1);
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (scale_y, scale_x) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    let mut out = vec![0.0f32; c * out_h * out_w];
    for ci in 0..c {
        let plane = &image.data()[ci * h * w..(ci + 1) * h * w];
        for oy in 0..out_h {
            let sy = (oy as f64 + 0.5) * scale_y - 0.5;
            for ox in 0..out_w {
                let sx = (ox as f64 + 0.5) * scale_x - 0.5;
                out[ci * out_h * out_w + oy * out_w + ox] =
                    sample_bilinear(plane, h, w, sx, sy) as f32;
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out).expect("buffer sized to shape")
}

/// Resize a raw `[0,255]` sample to `target` and scale intensities into
/// `[0,1]`. Targets below 8x8 are rejected as degenerate.
pub fn resize_normalize(
    sample: &LabeledSample,
    target: (usize, usize),
) -> Result<LabeledSample, DataError> {
    let (h, w) = target;
    if h < 8 || w < 8 {
        return Err(DataError::DegenerateTarget { h, w });
    }
    let mut resized = bilinear_resize(&sample.image, h, w);
    for v in resized.data_mut() {
        *v /= 255.0;
    }
    Ok(LabeledSample {
        id: sample.id.clone(),
        image: resized,
        stage: sample.stage,
    })
}

/// Sampling ranges for one composed random affine transform. All ranges
/// are half-widths around the identity; `h_flip` is a probability. The
/// all-zero policy is exactly the identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentPolicy {
    pub rotation_deg: f64,
    pub h_flip: f64,
    pub width_shift: f64,
    pub height_shift: f64,
    pub zoom: f64,
    pub shear_deg: f64,
    /// Base seed for deriving per-sample streams during training.
    pub seed: u64,
}

impl AugmentPolicy {
    /// The identity policy: no draw changes the image.
    pub fn disabled() -> Self {
        Self {
            rotation_deg: 0.0,
            h_flip: 0.0,
            width_shift: 0.0,
            height_shift: 0.0,
            zoom: 0.0,
            shear_deg: 0.0,
            seed: 0,
        }
    }

    /// Default fundus-style magnitudes: rotation 15 degrees, flip 0.5,
    /// shifts 10%, zoom 10%, shear 10 degrees.
    pub fn defaults(seed: u64) -> Self {
        Self {
            rotation_deg: 15.0,
            h_flip: 0.5,
            width_shift: 0.1,
            height_shift: 0.1,
            zoom: 0.1,
            shear_deg: 10.0,
            seed,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_deg == 0.0
            && self.h_flip == 0.0
            && self.width_shift == 0.0
            && self.height_shift == 0.0
            && self.zoom == 0.0
            && self.shear_deg == 0.0
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let ranges = [
            ("rotation_deg", self.rotation_deg),
            ("width_shift", self.width_shift),
            ("height_shift", self.height_shift),
            ("zoom", self.zoom),
            ("shear_deg", self.shear_deg),
        ];
        for (name, v) in ranges {
            if !v.is_finite() || v < 0.0 {
                return Err(DataError::BadPolicy {
                    reason: format!("{name} must be finite and non-negative, got {v}"),
                });
            }
        }
        if !(0.0..=1.0).contains(&self.h_flip) {
            return Err(DataError::BadPolicy {
                reason: format!("h_flip must be a probability, got {}", self.h_flip),
            });
        }
        if self.zoom >= 1.0 {
            return Err(DataError::BadPolicy {
                reason: format!("zoom range must stay below 1, got {}", self.zoom),
            });
        }
        Ok(())
    }

    /// Draw one set of transform parameters. The draw order (rotation,
    /// flip, shifts, zoom, shear) is fixed, so a given stream position
    /// always yields the same transform.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> AugmentParams {
        AugmentParams {
            rotation_deg: rng.random_range(-self.rotation_deg..=self.rotation_deg),
            flip_h: rng.random::<f64>() < self.h_flip,
            shift_x_frac: rng.random_range(-self.width_shift..=self.width_shift),
            shift_y_frac: rng.random_range(-self.height_shift..=self.height_shift),
            zoom: 1.0 + rng.random_range(-self.zoom..=self.zoom),
            shear_deg: rng.random_range(-self.shear_deg..=self.shear_deg),
        }
    }
}

/// One concrete affine transform: rotation about the image center
/// (positive is clockwise in image coordinates), optional horizontal
/// flip, shifts as fractions of the image size, a multiplicative zoom,
/// and a horizontal shear angle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub rotation_deg: f64,
    pub flip_h: bool,
    pub shift_x_frac: f64,
    pub shift_y_frac: f64,
    pub zoom: f64,
    pub shear_deg: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            flip_h: false,
            shift_x_frac: 0.0,
            shift_y_frac: 0.0,
            zoom: 1.0,
            shear_deg: 0.0,
        }
    }
}

/// Apply one composed affine transform (shift of rotate of shear of zoom
/// of flip, all about the center) by inverse mapping with edge-clamped
/// bilinear sampling, so out-of-bounds reads take the nearest edge pixel.
pub fn apply_affine(image: &Tensor<f32>, params: &AugmentParams) -> Tensor<f32> {
    let shape = image.shape();
    assert_eq!(shape.len(), 3, "expected [C, H, W], got {shape:?}");
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (sin_t, cos_t) = params.rotation_deg.to_radians().sin_cos();
    let shear_t = params.shear_deg.to_radians().tan();
    let (shift_x, shift_y) = (params.shift_x_frac * w as f64, params.shift_y_frac * h as f64);
    let mut out = vec![0.0f32; c * h * w];
    for oy in 0..h {
        for ox in 0..w {
            let x = ox as f64 - cx - shift_x;
            let y = oy as f64 - cy - shift_y;
            let rx = cos_t * x + sin_t * y;
            let ry = -sin_t * x + cos_t * y;
            let mut sx = (rx - shear_t * ry) / params.zoom;
            let sy = ry / params.zoom;
            if params.flip_h {
                sx = -sx;
            }
            let (sx, sy) = (sx + cx, sy + cy);
            for ci in 0..c {
                let plane = &image.data()[ci * h * w..(ci + 1) * h * w];
                out[ci * h * w + oy * w + ox] = sample_bilinear(plane, h, w, sx, sy) as f32;
            }
        }
    }
    Tensor::new(shape.to_vec(), out).expect("buffer sized to shape")
}

/// Randomly augment one sample under a policy. The label and shape are
/// always preserved; only pixel geometry changes.
pub fn augment(
    sample: &LabeledSample,
    policy: &AugmentPolicy,
    rng: &mut ChaCha8Rng,
) -> LabeledSample {
    let params = policy.sample(rng);
    LabeledSample {
        id: sample.id.clone(),
        image: apply_affine(&sample.image, &params),
        stage: sample.stage,
    }
}
