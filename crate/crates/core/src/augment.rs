//! Seeded, tiered volume augmentation.
//!
//! Three policy tiers share one implementation: `train` (regular samples),
//! `control` (stronger jitter for oversampled minority duplicates) and `tta`
//! (mild flips/rotations for test-time averaging). A call's RNG stream is
//! derived from `(seed, epoch, sample_index, tier)` only, so the result never
//! depends on batch composition or evaluation order.
//!
//! Transform order is fixed: flips, rotation about a random principal axis,
//! zoom about the volume center, intensity scaling, additive Gaussian noise.
//! Values are clipped back to [0, 1] after the intensity stages whenever a
//! policy enables them; a policy with no active stages returns the input
//! bit-for-bit.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::seed;
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Tier {
    Train,
    Control,
    Tta,
}

impl Tier {
    pub fn tag(self) -> u64 {
        match self {
            Tier::Train => 0,
            Tier::Control => 1,
            Tier::Tta => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Tier::Train => "train",
            Tier::Control => "control",
            Tier::Tta => "tta",
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentPolicy {
    /// Independent per-axis flip probability.
    pub flip_axes_probability: f64,
    /// Rotation magnitude bound; the angle is uniform in +/- this value.
    pub max_rotation_degrees: f64,
    /// Multiplicative intensity scale range (lo, hi).
    pub intensity_scale_range: (f64, f64),
    /// Additive Gaussian noise; sigma is uniform in [0, max].
    pub noise_sigma_max: f64,
    /// Isotropic zoom range about the volume center (lo, hi).
    pub zoom_range: (f64, f64),
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        AugmentPolicy {
            flip_axes_probability: 0.0,
            max_rotation_degrees: 0.0,
            intensity_scale_range: (1.0, 1.0),
            noise_sigma_max: 0.0,
            zoom_range: (1.0, 1.0),
        }
    }

    fn has_intensity_stage(&self) -> bool {
        self.intensity_scale_range != (1.0, 1.0) || self.noise_sigma_max > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        use crate::error::Error;
        if !(0.0..=1.0).contains(&self.flip_axes_probability) {
            return Err(Error::validation(format!(
                "flip probability must be in [0,1], got {}",
                self.flip_axes_probability
            )));
        }
        if !(self.max_rotation_degrees.is_finite() && self.max_rotation_degrees >= 0.0) {
            return Err(Error::validation("max rotation must be finite and >= 0"));
        }
        let (ilo, ihi) = self.intensity_scale_range;
        let (zlo, zhi) = self.zoom_range;
        if !(ilo.is_finite() && ihi.is_finite() && 0.0 < ilo && ilo <= ihi) {
            return Err(Error::validation(format!(
                "intensity scale range must satisfy 0 < lo <= hi, got ({ilo}, {ihi})"
            )));
        }
        if !(zlo.is_finite() && zhi.is_finite() && 0.0 < zlo && zlo <= zhi) {
            return Err(Error::validation(format!(
                "zoom range must satisfy 0 < lo <= hi, got ({zlo}, {zhi})"
            )));
        }
        if !(self.noise_sigma_max.is_finite() && self.noise_sigma_max >= 0.0) {
            return Err(Error::validation("noise sigma must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Default magnitudes per tier. The control tier is deliberately stronger so
/// duplicated minority samples stay diverse; the tta tier only flips and
/// rotates so averaged predictions see geometry jitter, not intensity jitter.
pub fn default_policy(tier: Tier) -> AugmentPolicy {
    match tier {
        Tier::Train => AugmentPolicy {
            flip_axes_probability: 0.5,
            max_rotation_degrees: 10.0,
            intensity_scale_range: (0.9, 1.1),
            noise_sigma_max: 0.02,
            zoom_range: (0.95, 1.05),
        },
        Tier::Control => AugmentPolicy {
            flip_axes_probability: 0.5,
            max_rotation_degrees: 25.0,
            intensity_scale_range: (0.8, 1.2),
            noise_sigma_max: 0.05,
            zoom_range: (0.9, 1.1),
        },
        Tier::Tta => AugmentPolicy {
            flip_axes_probability: 0.5,
            max_rotation_degrees: 5.0,
            intensity_scale_range: (1.0, 1.0),
            noise_sigma_max: 0.0,
            zoom_range: (1.0, 1.0),
        },
    }
}

/// Mirror the volume along the axes marked in `mask`. Involutive: applying
/// the same mask twice restores the input exactly.
pub fn flip(v: &Volume, mask: [bool; 3]) -> Volume {
    let [nd, nh, nw] = v.shape();
    let mut out = vec![0.0f32; v.data().len()];
    let src = v.data();
    for d in 0..nd {
        let sd = if mask[0] { nd - 1 - d } else { d };
        for h in 0..nh {
            let sh = if mask[1] { nh - 1 - h } else { h };
            let drow = (d * nh + h) * nw;
            let srow = (sd * nh + sh) * nw;
            if mask[2] {
                for w in 0..nw {
                    out[drow + w] = src[srow + nw - 1 - w];
                }
            } else {
                out[drow..drow + nw].copy_from_slice(&src[srow..srow + nw]);
            }
        }
    }
    Volume::new(v.shape(), v.spacing(), out).expect("flip preserves shape")
}

// Trig residue at special angles (e.g. cos 90deg ~ 6e-17) would push exact
// lattice hits just outside the grid; snap them back.
#[inline]
fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r
    } else {
        x
    }
}

/// Rotate about one principal axis by `degrees`, trilinear with zero fill.
/// The rotation center is the grid center (n-1)/2 per axis.
pub fn rotate_about_axis(v: &Volume, axis: usize, degrees: f64) -> Volume {
    assert!(axis < 3, "axis index out of range");
    let shape = v.shape();
    let (a, b) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let center = [
        (shape[0] as f64 - 1.0) / 2.0,
        (shape[1] as f64 - 1.0) / 2.0,
        (shape[2] as f64 - 1.0) / 2.0,
    ];
    let mut out = vec![0.0f32; v.data().len()];
    let mut idx = 0;
    for d in 0..shape[0] {
        for h in 0..shape[1] {
            for w in 0..shape[2] {
                let p = [d as f64, h as f64, w as f64];
                // Inverse rotation of the output coordinate.
                let ra = p[a] - center[a];
                let rb = p[b] - center[b];
                let mut src = p;
                src[a] = snap(center[a] + cos * ra + sin * rb);
                src[b] = snap(center[b] - sin * ra + cos * rb);
                src[axis] = p[axis];
                if let Some(val) = v.sample(src) {
                    out[idx] = val as f32;
                }
                idx += 1;
            }
        }
    }
    Volume::new(shape, v.spacing(), out).expect("rotation preserves shape")
}

/// Isotropic zoom about the volume center, trilinear with zero fill.
/// `factor > 1` magnifies (center crop), `factor < 1` shrinks into a zero
/// border.
pub fn zoom(v: &Volume, factor: f64) -> Volume {
    assert!(factor.is_finite() && factor > 0.0, "zoom factor must be positive");
    let shape = v.shape();
    let center = [
        (shape[0] as f64 - 1.0) / 2.0,
        (shape[1] as f64 - 1.0) / 2.0,
        (shape[2] as f64 - 1.0) / 2.0,
    ];
    let mut out = vec![0.0f32; v.data().len()];
    let mut idx = 0;
    for d in 0..shape[0] {
        for h in 0..shape[1] {
            for w in 0..shape[2] {
                let src = [
                    snap(center[0] + (d as f64 - center[0]) / factor),
                    snap(center[1] + (h as f64 - center[1]) / factor),
                    snap(center[2] + (w as f64 - center[2]) / factor),
                ];
                if let Some(val) = v.sample(src) {
                    out[idx] = val as f32;
                }
                idx += 1;
            }
        }
    }
    Volume::new(shape, v.spacing(), out).expect("zoom preserves shape")
}

fn draw(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        // Consume a draw anyway so stream positions do not depend on ranges.
        let _ = rng.random::<f64>();
        lo
    } else {
        lo + (hi - lo) * rng.random::<f64>()
    }
}

/// Apply one tier's policy. The RNG stream is a pure function of
/// `(seed, epoch, sample_index, tier)`; draw order is fixed (flip mask,
/// rotation axis, rotation angle, zoom, intensity scale, noise sigma,
/// per-voxel noise).
pub fn apply_augment(
    v: &Volume,
    policy: &AugmentPolicy,
    seed_value: u64,
    epoch: u64,
    sample_index: u64,
    tier: Tier,
) -> Result<Volume> {
    policy.validate()?;
    let mut rng = seed::stream(seed_value, &[seed::tag("augment"), epoch, sample_index, tier.tag()]);

    let mask = [
        rng.random::<f64>() < policy.flip_axes_probability,
        rng.random::<f64>() < policy.flip_axes_probability,
        rng.random::<f64>() < policy.flip_axes_probability,
    ];
    let axis = rng.random_range(0..3usize);
    let angle = draw(
        &mut rng,
        -policy.max_rotation_degrees,
        policy.max_rotation_degrees,
    );
    let zoom_factor = draw(&mut rng, policy.zoom_range.0, policy.zoom_range.1);
    let scale = draw(
        &mut rng,
        policy.intensity_scale_range.0,
        policy.intensity_scale_range.1,
    );
    let sigma = draw(&mut rng, 0.0, policy.noise_sigma_max);

    let mut out = if mask.iter().any(|&m| m) {
        flip(v, mask)
    } else {
        v.clone()
    };
    if angle != 0.0 {
        out = rotate_about_axis(&out, axis, angle);
    }
    if zoom_factor != 1.0 {
        out = zoom(&out, zoom_factor);
    }
    if policy.has_intensity_stage() {
        if scale != 1.0 {
            for x in out.data_mut() {
                *x = (*x as f64 * scale) as f32;
            }
        }
        if sigma > 0.0 {
            let normal = Normal::new(0.0f64, sigma).expect("sigma > 0");
            for x in out.data_mut() {
                *x = (*x as f64 + normal.sample(&mut rng)) as f32;
            }
        }
        for x in out.data_mut() {
            *x = x.clamp(0.0, 1.0);
        }
    }
    Ok(out)
}
