//! Synthetic vascular phantoms.
//!
//! A phantom is a smooth random tube: a Catmull-Rom centerline through seeded
//! control points, rasterized with a truncated-Gaussian cross-section, plus an
//! ellipsoidal bulge for positive subjects and optional additive noise. Tube
//! and bulge share the same normalized radial profile (cut off at 2.5 sigma
//! and rescaled to reach exactly 0), so the background is exactly zero and the
//! bulge-to-tube diameter ratio at any iso-threshold equals
//! `bulge_diameter_factor`.
//!
//! Concepts are analytic surrogates of the geometry (tortuosity, angles,
//! curvature statistics, radius-derived hemodynamic proxies). A few carry
//! small seeded multiplicative jitter so class distributions overlap instead
//! of separating exactly. Four deliberately leaky concepts (`aneurysm_flag`,
//! `dome_height`, `neck_width`, `sac_volume`) are strictly positive for
//! positives and exactly zero for controls; downstream name filtering is
//! expected to remove them before training.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seed::{self, tag};
use crate::volume::Volume;

/// Radial profile cutoff in units of sigma; both tube and bulge use it.
const PROFILE_CUTOFF: f64 = 2.5;
/// Reference bulge factor used for the mid-point margin of *both* classes,
/// so centerline geometry is identically distributed across classes.
const MID_CLEARANCE_FACTOR: f64 = 2.5;
/// Dense spline samples per control-point segment.
const SAMPLES_PER_SEGMENT: usize = 64;
/// Bulge semi-axis factors relative to `bulge_diameter_factor * tube_radius`:
/// (major lateral, minor lateral, along tangent). The major lateral axis is
/// exactly f*r so cross-section diameter ratios match the factor.
const BULGE_AXES: [f64; 3] = [1.0, 0.85, 0.7];
const MAX_ATTEMPTS: usize = 10;

pub const MIN_TUBE_RADIUS: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PhantomSpec {
    pub grid: [usize; 3],
    /// Tube cross-section sigma in voxels; >= 1.5 so structures resolve.
    pub tube_radius: f64,
    pub centerline_control_points: usize,
    pub bulge_present: bool,
    /// Max-diameter-to-tube-diameter ratio of the bulge, in (1, 4] when
    /// present; fixed to 1.0 for controls.
    pub bulge_diameter_factor: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            grid: [96, 96, 96],
            tube_radius: 4.0,
            centerline_control_points: 5,
            bulge_present: false,
            bulge_diameter_factor: 1.0,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tube_radius < MIN_TUBE_RADIUS || !self.tube_radius.is_finite() {
            return Err(Error::validation(format!(
                "tube radius must be >= {MIN_TUBE_RADIUS} voxels, got {}",
                self.tube_radius
            )));
        }
        if self.bulge_present {
            if !(self.bulge_diameter_factor > 1.0 && self.bulge_diameter_factor <= 4.0) {
                return Err(Error::validation(format!(
                    "bulge diameter factor must be in (1, 4], got {}",
                    self.bulge_diameter_factor
                )));
            }
        } else if self.bulge_diameter_factor != 1.0 {
            return Err(Error::validation(
                "bulge diameter factor must be 1.0 when no bulge is present",
            ));
        }
        if self.centerline_control_points < 3 {
            return Err(Error::validation(
                "centerline needs at least 3 control points",
            ));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::validation("noise sigma must be finite and >= 0"));
        }
        let mid_clearance = self.mid_clearance();
        let min_dim = *self.grid.iter().min().unwrap_or(&0);
        if (min_dim as f64 - 1.0) < 2.0 * mid_clearance {
            return Err(Error::validation(format!(
                "grid {:?} too small for tube radius {}: needs at least {} per axis",
                self.grid,
                self.tube_radius,
                (2.0 * mid_clearance + 1.0).ceil() as usize
            )));
        }
        Ok(())
    }

    /// Clearance every centerline sample keeps from the grid boundary.
    fn tube_clearance(&self) -> f64 {
        PROFILE_CUTOFF * self.tube_radius + 1.0
    }

    /// Clearance for the mid control point; sized for a reference bulge so
    /// patient and control centerlines share the same corridor.
    fn mid_clearance(&self) -> f64 {
        PROFILE_CUTOFF * MID_CLEARANCE_FACTOR * self.tube_radius + 1.0
    }
}

/// Deterministic centerline/bulge geometry derived from a spec.
#[derive(Debug, Clone)]
pub(crate) struct Geometry {
    /// Control polygon.
    pub control_points: Vec<[f64; 3]>,
    /// Dense spline samples, ~uniform in parameter.
    pub samples: Vec<[f64; 3]>,
    pub tube_radius: f64,
    pub bulge: Option<Bulge>,
}

#[derive(Debug, Clone)]
pub(crate) struct Bulge {
    pub center: [f64; 3],
    /// Orthonormal frame (major lateral, minor lateral, tangent).
    pub axes_dirs: [[f64; 3]; 3],
    /// Semi-axis sigmas in voxels, same order as `axes_dirs`.
    pub semi_axes: [f64; 3],
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Uniform Catmull-Rom interpolation with duplicated endpoints.
fn catmull_rom(points: &[[f64; 3]], samples_per_segment: usize) -> Vec<[f64; 3]> {
    let n = points.len();
    let get = |i: isize| -> [f64; 3] {
        let idx = i.clamp(0, n as isize - 1) as usize;
        points[idx]
    };
    let mut out = Vec::with_capacity((n - 1) * samples_per_segment + 1);
    for seg in 0..n - 1 {
        let p0 = get(seg as isize - 1);
        let p1 = get(seg as isize);
        let p2 = get(seg as isize + 1);
        let p3 = get(seg as isize + 2);
        for s in 0..samples_per_segment {
            let t = s as f64 / samples_per_segment as f64;
            let t2 = t * t;
            let t3 = t2 * t;
            let mut p = [0.0; 3];
            for k in 0..3 {
                p[k] = 0.5
                    * ((2.0 * p1[k])
                        + (-p0[k] + p2[k]) * t
                        + (2.0 * p0[k] - 5.0 * p1[k] + 4.0 * p2[k] - p3[k]) * t2
                        + (-p0[k] + 3.0 * p1[k] - 3.0 * p2[k] + p3[k]) * t3);
            }
            out.push(p);
        }
    }
    out.push(points[n - 1]);
    out
}

fn clamp_range(x: f64, lo: f64, hi: f64) -> f64 {
    if hi < lo {
        // Degenerate corridor: pin to its midpoint.
        (lo + hi) / 2.0
    } else {
        x.clamp(lo, hi)
    }
}

pub(crate) fn build_geometry(spec: &PhantomSpec) -> Result<Geometry> {
    spec.validate()?;
    let [nd, nh, nw] = [
        spec.grid[0] as f64,
        spec.grid[1] as f64,
        spec.grid[2] as f64,
    ];
    let n = spec.centerline_control_points;
    let clr = spec.tube_clearance();
    let clr_mid = spec.mid_clearance();
    let mid_idx = n / 2;

    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = seed::stream(spec.seed, &[tag("geometry"), attempt as u64]);

        // Depths run the full margin-to-margin span; interior depths jitter.
        let d0 = clr;
        let d1 = nd - 1.0 - clr;
        let seg = (d1 - d0) / (n - 1) as f64;
        let mut cps: Vec<[f64; 3]> = Vec::with_capacity(n);
        let mut depth_jitters = Vec::with_capacity(n);
        for _ in 0..n {
            depth_jitters.push(rng.random_range(-0.3..0.3) * seg);
        }
        // Lateral random walk, clamped into the corridor.
        let lat = |rng: &mut rand_chacha::ChaCha8Rng, size: f64| -> Vec<f64> {
            let lo = clr;
            let hi = size - 1.0 - clr;
            let center = (size - 1.0) / 2.0;
            let mut xs = Vec::with_capacity(n);
            let mut x = clamp_range(center + rng.random_range(-0.25..0.25) * (hi - lo), lo, hi);
            xs.push(x);
            for _ in 1..n {
                x = clamp_range(x + rng.random_range(-0.15..0.15) * size, lo, hi);
                xs.push(x);
            }
            xs
        };
        let hs = lat(&mut rng, nh);
        let ws = lat(&mut rng, nw);
        for i in 0..n {
            let frac = i as f64 / (n - 1) as f64;
            let mut d = d0 + frac * (d1 - d0);
            if i > 0 && i < n - 1 {
                d += depth_jitters[i];
            }
            let (mut h, mut w) = (hs[i], ws[i]);
            if i == mid_idx {
                // Both classes reserve space for a reference bulge here.
                d = clamp_range(d, clr_mid, nd - 1.0 - clr_mid);
                h = clamp_range(h, clr_mid, nh - 1.0 - clr_mid);
                w = clamp_range(w, clr_mid, nw - 1.0 - clr_mid);
            }
            cps.push([d, h, w]);
        }

        let samples = catmull_rom(&cps, SAMPLES_PER_SEGMENT);

        // Bulge parameters are always drawn so streams stay aligned across
        // classes; only positives keep the result.
        let m = samples.len();
        let mid_jitter = rng.random_range(-0.05..0.05);
        let bulge_idx =
            (((m - 1) as f64) * (0.5 + mid_jitter)).round().clamp(1.0, (m - 2) as f64) as usize;
        let roll = rng.random_range(0.0..std::f64::consts::TAU);

        // Margin check on the dense samples (spline may overshoot the
        // control polygon).
        let in_bounds = samples.iter().all(|p| {
            p[0] >= clr - 0.5
                && p[0] <= nd - 0.5 - clr
                && p[1] >= clr - 0.5
                && p[1] <= nh - 0.5 - clr
                && p[2] >= clr - 0.5
                && p[2] <= nw - 0.5 - clr
        });
        if !in_bounds {
            continue;
        }

        let bulge = if spec.bulge_present {
            let center = samples[bulge_idx];
            let t_hat = {
                let a = samples[bulge_idx - 1];
                let b = samples[bulge_idx + 1];
                normalize(sub(b, a))
            };
            let reference = if t_hat[0].abs() < 0.9 {
                [1.0, 0.0, 0.0]
            } else {
                [0.0, 1.0, 0.0]
            };
            let u = normalize(cross(reference, t_hat));
            let v = cross(t_hat, u);
            let (sin_r, cos_r) = roll.sin_cos();
            let major = [
                u[0] * cos_r + v[0] * sin_r,
                u[1] * cos_r + v[1] * sin_r,
                u[2] * cos_r + v[2] * sin_r,
            ];
            let minor = [
                -u[0] * sin_r + v[0] * cos_r,
                -u[1] * sin_r + v[1] * cos_r,
                -u[2] * sin_r + v[2] * cos_r,
            ];
            let f = spec.bulge_diameter_factor;
            let base = f * spec.tube_radius;
            let semi = [
                base * BULGE_AXES[0],
                base * BULGE_AXES[1],
                base * BULGE_AXES[2],
            ];
            // The truncated ellipsoid must fit inside the grid.
            let dirs = [major, minor, t_hat];
            let fits = (0..3).all(|k| {
                let extent = PROFILE_CUTOFF
                    * ((semi[0] * dirs[0][k]).powi(2)
                        + (semi[1] * dirs[1][k]).powi(2)
                        + (semi[2] * dirs[2][k]).powi(2))
                    .sqrt();
                let size = [nd, nh, nw][k];
                center[k] - extent >= 0.5 && center[k] + extent <= size - 1.5
            });
            if !fits {
                continue;
            }
            Some(Bulge {
                center,
                axes_dirs: dirs,
                semi_axes: semi,
            })
        } else {
            None
        };

        return Ok(Geometry {
            control_points: cps,
            samples,
            tube_radius: spec.tube_radius,
            bulge,
        });
    }
    Err(Error::validation(format!(
        "centerline for seed {} escaped grid margins in {MAX_ATTEMPTS} attempts; \
         grid {:?} is too tight for radius {} / factor {}",
        spec.seed, spec.grid, spec.tube_radius, spec.bulge_diameter_factor
    )))
}

/// Normalized truncated-Gaussian profile: 1 at the center, exactly 0 at the
/// cutoff. `q` is squared distance in units of sigma^2; `edge` is
/// `profile_edge()`, hoisted out of the stamping loops.
#[inline]
fn profile(q: f64, edge: f64) -> f64 {
    if q >= PROFILE_CUTOFF * PROFILE_CUTOFF {
        return 0.0;
    }
    ((-0.5 * q).exp() - edge) / (1.0 - edge)
}

fn profile_edge() -> f64 {
    (-0.5 * PROFILE_CUTOFF * PROFILE_CUTOFF).exp()
}

fn stamp_tube(field: &mut [f64], grid: [usize; 3], samples: &[[f64; 3]], radius: f64) {
    let reach = PROFILE_CUTOFF * radius;
    let r2 = radius * radius;
    let edge = profile_edge();
    let [nd, nh, nw] = grid;
    for p in samples {
        let lo = |c: f64, n: usize| ((c - reach).floor().max(0.0) as usize).min(n - 1);
        let hi = |c: f64, n: usize| ((c + reach).ceil().min((n - 1) as f64)) as usize;
        for d in lo(p[0], nd)..=hi(p[0], nd) {
            let dd = d as f64 - p[0];
            for h in lo(p[1], nh)..=hi(p[1], nh) {
                let dh = h as f64 - p[1];
                let row = (d * nh + h) * nw;
                for w in lo(p[2], nw)..=hi(p[2], nw) {
                    let dw = w as f64 - p[2];
                    let q = (dd * dd + dh * dh + dw * dw) / r2;
                    let g = profile(q, edge);
                    if g > field[row + w] {
                        field[row + w] = g;
                    }
                }
            }
        }
    }
}

fn stamp_bulge(field: &mut [f64], grid: [usize; 3], bulge: &Bulge) {
    let [nd, nh, nw] = grid;
    let edge = profile_edge();
    let reach: Vec<f64> = (0..3)
        .map(|k| {
            PROFILE_CUTOFF
                * ((bulge.semi_axes[0] * bulge.axes_dirs[0][k]).powi(2)
                    + (bulge.semi_axes[1] * bulge.axes_dirs[1][k]).powi(2)
                    + (bulge.semi_axes[2] * bulge.axes_dirs[2][k]).powi(2))
                .sqrt()
        })
        .collect();
    let lo = |k: usize, n: usize| {
        ((bulge.center[k] - reach[k]).floor().max(0.0) as usize).min(n - 1)
    };
    let hi = |k: usize, n: usize| ((bulge.center[k] + reach[k]).ceil().min((n - 1) as f64)) as usize;
    for d in lo(0, nd)..=hi(0, nd) {
        for h in lo(1, nh)..=hi(1, nh) {
            let row = (d * nh + h) * nw;
            for w in lo(2, nw)..=hi(2, nw) {
                let delta = [
                    d as f64 - bulge.center[0],
                    h as f64 - bulge.center[1],
                    w as f64 - bulge.center[2],
                ];
                let mut q = 0.0;
                for k in 0..3 {
                    let proj = dot(delta, bulge.axes_dirs[k]) / bulge.semi_axes[k];
                    q += proj * proj;
                }
                let g = profile(q, edge);
                if g > field[row + w] {
                    field[row + w] = g;
                }
            }
        }
    }
}

/// Render the phantom volume for a spec. Deterministic in the seed; with
/// `noise_sigma == 0` values lie in [0, 1] and the background is exactly 0.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Volume> {
    let geometry = build_geometry(spec)?;
    render(spec, &geometry)
}

fn render(spec: &PhantomSpec, geometry: &Geometry) -> Result<Volume> {
    let grid = spec.grid;
    let mut field = vec![0.0f64; grid[0] * grid[1] * grid[2]];
    stamp_tube(&mut field, grid, &geometry.samples, geometry.tube_radius);
    if let Some(bulge) = &geometry.bulge {
        stamp_bulge(&mut field, grid, bulge);
    }
    if spec.noise_sigma > 0.0 {
        let mut rng = seed::stream(spec.seed, &[tag("noise")]);
        let normal = Normal::new(0.0f64, spec.noise_sigma).expect("sigma > 0");
        for x in field.iter_mut() {
            *x += normal.sample(&mut rng);
        }
    }
    let data: Vec<f32> = field.iter().map(|&x| x as f32).collect();
    Volume::new(grid, [1.0, 1.0, 1.0], data)
}

/// Generate the volume and its concepts from a single geometry build.
pub fn generate_with_concepts(spec: &PhantomSpec) -> Result<(Volume, Vec<(String, f64)>)> {
    let geometry = build_geometry(spec)?;
    let volume = render(spec, &geometry)?;
    let concepts = concepts_from_geometry(spec, &geometry);
    Ok((volume, concepts))
}

/// Analytic concept surrogates for a spec. Names marked leaky are exactly
/// zero for controls and strictly positive for positives.
pub fn derive_concepts(spec: &PhantomSpec) -> Result<Vec<(String, f64)>> {
    let geometry = build_geometry(spec)?;
    Ok(concepts_from_geometry(spec, &geometry))
}

/// Canonical emission order; also the column order of cohort concept tables.
pub const CONCEPT_ORDER: [&str; 33] = [
    "tortuosity",
    "vessel_angle",
    "max_diameter_ratio",
    "wss_surrogate",
    "osi_surrogate",
    "arc_length",
    "chord_length",
    "mean_curvature",
    "max_curvature",
    "curvature_std",
    "curvature_energy",
    "bend_count",
    "inlet_angle",
    "outlet_angle",
    "mean_segment_angle",
    "lateral_drift",
    "depth_span",
    "entry_offset",
    "exit_offset",
    "mean_radius",
    "lumen_area",
    "lumen_volume",
    "surface_area",
    "flow_resistance",
    "velocity_surrogate",
    "reynolds_surrogate",
    "taper_ratio",
    "bright_fraction",
    "branch_count",
    "aneurysm_flag",
    "dome_height",
    "neck_width",
    "sac_volume",
];

pub(crate) fn concepts_from_geometry(
    spec: &PhantomSpec,
    geometry: &Geometry,
) -> Vec<(String, f64)> {
    use std::f64::consts::PI;

    let pts = &geometry.samples;
    let m = pts.len();
    let r = geometry.tube_radius;

    let mut arc = 0.0;
    for i in 1..m {
        arc += norm(sub(pts[i], pts[i - 1]));
    }
    let chord = norm(sub(pts[m - 1], pts[0])).max(1e-9);
    let tortuosity = arc / chord;

    // Control-polygon bend angles in degrees.
    let cps = &geometry.control_points;
    let mut seg_angles = Vec::new();
    for i in 1..cps.len() - 1 {
        let a = sub(cps[i], cps[i - 1]);
        let b = sub(cps[i + 1], cps[i]);
        let cosv = (dot(a, b) / (norm(a) * norm(b))).clamp(-1.0, 1.0);
        seg_angles.push(cosv.acos().to_degrees());
    }
    let vessel_angle = seg_angles.iter().cloned().fold(0.0, f64::max);
    let mean_segment_angle = if seg_angles.is_empty() {
        0.0
    } else {
        seg_angles.iter().sum::<f64>() / seg_angles.len() as f64
    };
    let axis = [1.0, 0.0, 0.0];
    let end_angle = |a: [f64; 3], b: [f64; 3]| -> f64 {
        let v = sub(b, a);
        let cosv = (dot(v, axis) / norm(v)).clamp(-1.0, 1.0);
        cosv.acos().to_degrees()
    };
    let inlet_angle = end_angle(cps[0], cps[1]);
    let outlet_angle = end_angle(cps[cps.len() - 2], cps[cps.len() - 1]);

    // Discrete curvature on subsampled spline points (circumradius form).
    let stride = 8;
    let sub_pts: Vec<[f64; 3]> = pts.iter().step_by(stride).cloned().collect();
    let mut kappas = Vec::new();
    let mut energy = 0.0;
    for i in 1..sub_pts.len() - 1 {
        let a = sub(sub_pts[i], sub_pts[i - 1]);
        let b = sub(sub_pts[i + 1], sub_pts[i]);
        let (na, nb) = (norm(a), norm(b));
        let denom = na * nb * norm([a[0] + b[0], a[1] + b[1], a[2] + b[2]]);
        let kappa = if denom > 1e-12 {
            2.0 * norm(cross(a, b)) / denom
        } else {
            0.0
        };
        kappas.push(kappa);
        energy += kappa * kappa * 0.5 * (na + nb);
    }
    let kmean = if kappas.is_empty() {
        0.0
    } else {
        kappas.iter().sum::<f64>() / kappas.len() as f64
    };
    let kmax = kappas.iter().cloned().fold(0.0, f64::max);
    let kstd = if kappas.len() > 1 {
        let var =
            kappas.iter().map(|k| (k - kmean) * (k - kmean)).sum::<f64>() / kappas.len() as f64;
        var.sqrt()
    } else {
        0.0
    };
    let mut bends = 0usize;
    for i in 1..kappas.len().saturating_sub(1) {
        if kappas[i] > kappas[i - 1] && kappas[i] >= kappas[i + 1] && kappas[i] > kmean {
            bends += 1;
        }
    }

    let start = pts[0];
    let end = pts[m - 1];
    let lateral_drift =
        ((end[1] - start[1]).powi(2) + (end[2] - start[2]).powi(2)).sqrt();
    let depth_span = (end[0] - start[0]).abs();
    let ch = (spec.grid[1] as f64 - 1.0) / 2.0;
    let cw = (spec.grid[2] as f64 - 1.0) / 2.0;
    let entry_offset = ((start[1] - ch).powi(2) + (start[2] - cw).powi(2)).sqrt();
    let exit_offset = ((end[1] - ch).powi(2) + (end[2] - cw).powi(2)).sqrt();

    // Seeded concept jitter; drawn unconditionally, in a fixed order, from a
    // stream independent of geometry retries. Multiplicative so exact-ratio
    // relations between re-parameterized specs sharing a seed are preserved.
    let mut crng = seed::stream(spec.seed, &[tag("concepts")]);
    let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
    let eta_wss: f64 = normal.sample(&mut crng);
    let eta_diam: f64 = normal.sample(&mut crng);
    let eta_taper: f64 = normal.sample(&mut crng);
    let u_osi: f64 = crng.random::<f64>();
    let eta_neck: f64 = normal.sample(&mut crng);

    let wss_surrogate = (1.0 / (r * r * r)) * (1.0 + 0.05 * eta_wss);
    let ratio_base = if geometry.bulge.is_some() {
        spec.bulge_diameter_factor
    } else {
        1.0
    };
    let max_diameter_ratio = ratio_base * (1.0 + 0.06 * eta_diam);
    let taper_ratio = 1.0 + 0.03 * eta_taper;
    let osi_surrogate = 0.85 * (1.0 - (-0.5 * kmean * arc).exp()) + 0.15 * u_osi;

    let lumen_area = PI * r * r;
    let lumen_volume = lumen_area * arc;
    let surface_area = 2.0 * PI * r * arc;
    let total_voxels = (spec.grid[0] * spec.grid[1] * spec.grid[2]) as f64;
    let bulge_volume = geometry
        .bulge
        .as_ref()
        .map(|b| 4.0 / 3.0 * PI * b.semi_axes[0] * b.semi_axes[1] * b.semi_axes[2])
        .unwrap_or(0.0);
    let bright_fraction = (lumen_volume + bulge_volume) / total_voxels;

    // Leaky concepts: strictly positive for positives, exactly 0 otherwise.
    let (aneurysm_flag, dome_height, neck_width, sac_volume) = match &geometry.bulge {
        Some(b) => {
            let dome = 2.0 * b.semi_axes[0];
            (
                1.0,
                dome,
                0.5 * dome * (1.0 + 0.05 * eta_neck),
                bulge_volume,
            )
        }
        None => (0.0, 0.0, 0.0, 0.0),
    };

    let values = [
        tortuosity,
        vessel_angle,
        max_diameter_ratio,
        wss_surrogate,
        osi_surrogate,
        arc,
        chord,
        kmean,
        kmax,
        kstd,
        energy,
        bends as f64,
        inlet_angle,
        outlet_angle,
        mean_segment_angle,
        lateral_drift,
        depth_span,
        entry_offset,
        exit_offset,
        r,
        lumen_area,
        lumen_volume,
        surface_area,
        flow_resistance(arc, r),
        1.0 / (r * r),
        1.0 / r,
        taper_ratio,
        bright_fraction,
        1.0,
        aneurysm_flag,
        dome_height,
        neck_width,
        sac_volume,
    ];
    CONCEPT_ORDER
        .iter()
        .zip(values.iter())
        .map(|(n, v)| (n.to_string(), *v))
        .collect()
}

fn flow_resistance(arc: f64, r: f64) -> f64 {
    arc / (r * r * r * r)
}
