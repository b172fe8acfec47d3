//! The 6D camera model: pose parameters, the learnable pose distribution,
//! camera compensation, and world-to-clip geometry.
//!
//! A camera is (rotation θ, elevation φ, object scale k, displacement d).
//! The eye orbits the origin at a fixed radius, looking at the origin with
//! +z up; an object-space point `p` sits at world position `d + k·p`. Scale
//! and displacement are object-side transforms, not camera-distance changes
//! — under perspective the two differ, and the synthetic data generator
//! follows the same convention.
//!
//! Everything exists at two levels that share their scalar math: plain `f64`
//! values (data generation, evaluation, reports) and tape expressions
//! (training), exercised against each other in tests for bit-equality.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{stable_softplus, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tetgrid::ShapeStats;

/// Geometry constants and distribution initialization for the camera system.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    /// Distance from eye to origin.
    pub orbit_radius: f64,
    /// Vertical field of view, radians.
    pub fov: f64,
    pub near: f64,
    pub far: f64,
    /// Smallest admissible object scale.
    pub k_min: f64,
    /// Elevation is kept inside `[phi_margin, pi - phi_margin]`.
    pub phi_margin: f64,
    /// Sharpness of the smooth one-sided clamps; higher is closer to a hard
    /// clamp while staying differentiable.
    pub clamp_sharpness: f64,
    /// Added to the first six decoded entries: initialization means for
    /// (theta, phi, k, dx, dy, dz).
    pub init_mean: [f64; 6],
    /// Standard deviations decoded from a zero raw vector, same order.
    pub init_sigma: [f64; 6],
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig {
            orbit_radius: 3.5,
            fov: 0.691,
            near: 0.1,
            far: 10.0,
            k_min: 0.05,
            phi_margin: 0.05,
            clamp_sharpness: 40.0,
            init_mean: [0.0, PI, 1.2, 0.0, 0.0, 0.0],
            init_sigma: [PI / 10.0, PI / 36.0, 0.06, 0.06, 0.06, 0.06],
        }
    }
}

/// One concrete camera pose. Constructed through [`Camera6D::new`], which
/// applies the validity mapping, so the invariants (θ in `[0, 2π)`, φ inside
/// the margins, k above `k_min`) hold for every instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera6D {
    pub theta: f64,
    pub phi: f64,
    pub k: f64,
    pub d: [f64; 3],
}

// The f64 helpers below mirror the tape versions operation for operation
// (multiplying by reciprocals rather than dividing), so value-level and
// graph-level cameras agree bit for bit.

fn wrap_angle(x: f64) -> f64 {
    x - (x * (1.0 / TAU)).floor() * TAU
}

/// `lo + softplus(beta (x - lo)) / beta`: smooth, at-or-above `lo` in f64,
/// indistinguishable from the identity a few `1/beta` away from the bound.
fn smooth_floor(x: f64, lo: f64, beta: f64) -> f64 {
    stable_softplus((x - lo) * beta) * (1.0 / beta) + lo
}

fn smooth_ceil(x: f64, hi: f64, beta: f64) -> f64 {
    -(stable_softplus((-x + hi) * beta) * (1.0 / beta)) + hi
}

impl Camera6D {
    /// Map raw parameter draws to a valid pose: θ wraps into `[0, 2π)`, φ is
    /// smoothly clamped inside the pole margins, k is smoothly clamped above
    /// `k_min`, displacement passes through.
    pub fn new(theta: f64, phi: f64, k: f64, d: [f64; 3], cfg: &CameraConfig) -> Camera6D {
        let beta = cfg.clamp_sharpness;
        let phi = smooth_ceil(
            smooth_floor(phi, cfg.phi_margin, beta),
            PI - cfg.phi_margin,
            beta,
        );
        Camera6D {
            theta: wrap_angle(theta),
            phi,
            k: smooth_floor(k, cfg.k_min, beta),
            d,
        }
    }

    /// Eye position on the orbit sphere.
    pub fn eye(&self, cfg: &CameraConfig) -> [f64; 3] {
        let r = cfg.orbit_radius;
        [
            r * self.phi.sin() * self.theta.cos(),
            r * self.phi.sin() * self.theta.sin(),
            r * self.phi.cos(),
        ]
    }
}

/// Per-parameter mean and standard deviation of the pose distribution, in
/// the order (theta, phi, k, dx, dy, dz).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPoseDistribution {
    pub mu: [f64; 6],
    pub sigma: [f64; 6],
}

impl CameraPoseDistribution {
    /// Reparameterized draw at a given noise vector.
    pub fn sample(&self, eps: [f64; 6], cfg: &CameraConfig) -> Camera6D {
        let p: Vec<f64> = (0..6).map(|j| self.mu[j] + self.sigma[j] * eps[j]).collect();
        Camera6D::new(p[0], p[1], p[2], [p[3], p[4], p[5]], cfg)
    }

    pub fn sample_rng<R: Rng>(&self, rng: &mut R, cfg: &CameraConfig) -> Camera6D {
        let mut eps = [0.0; 6];
        for e in &mut eps {
            *e = crate::seeding::standard_normal(rng);
        }
        self.sample(eps, cfg)
    }
}

/// Camera parameters as tape expressions; the training-time counterpart of
/// [`Camera6D`], produced by [`sample_camera`] so the invariants hold.
pub struct CameraVars {
    pub theta: Var,
    pub phi: Var,
    pub k: Var,
    /// `[3]`
    pub d: Var,
}

impl CameraVars {
    pub fn constant(tape: &Tape, cam: &Camera6D) -> CameraVars {
        CameraVars {
            theta: tape.scalar(cam.theta),
            phi: tape.scalar(cam.phi),
            k: tape.scalar(cam.k),
            d: tape.cvec(cam.d.to_vec()),
        }
    }

    pub fn value(&self) -> Camera6D {
        let d = self.d.value();
        Camera6D {
            theta: self.theta.item(),
            phi: self.phi.item(),
            k: self.k.item(),
            d: [d.data()[0], d.data()[1], d.data()[2]],
        }
    }
}

/// Decoded pose distribution as tape expressions.
pub struct PoseDistVars {
    /// `[6]`
    pub mu: Var,
    /// `[6]`, strictly positive
    pub sigma: Var,
}

impl PoseDistVars {
    pub fn value(&self) -> CameraPoseDistribution {
        let (m, s) = (self.mu.value(), self.sigma.value());
        let arr = |t: &Tensor| {
            let mut a = [0.0; 6];
            a.copy_from_slice(t.data());
            a
        };
        CameraPoseDistribution { mu: arr(&m), sigma: arr(&s) }
    }
}

/// Split a raw 12-vector into the pose distribution: means are the first
/// six entries shifted by the configured initialization means; standard
/// deviations are `init_sigma * exp(raw)` of the last six — smooth, strictly
/// positive, and exactly `init_sigma` at raw zero.
pub fn decode_distribution(raw: &Var, cfg: &CameraConfig) -> Result<PoseDistVars> {
    assert_eq!(raw.shape(), vec![12], "pose decode expects a 12-vector");
    let v = raw.value();
    if !v.all_finite() {
        return Err(Error::BadInput("non-finite pose decode input".into()));
    }
    let tape = raw.tape();
    let mu = &raw.slice(0, 0, 6) + &tape.cvec(cfg.init_mean.to_vec());
    let sigma = &raw.slice(0, 6, 6).exp() * &tape.cvec(cfg.init_sigma.to_vec());
    Ok(PoseDistVars { mu, sigma })
}

fn smooth_floor_var(x: &Var, lo: f64, beta: f64) -> Var {
    &(&(&(x - lo) * beta).softplus() * (1.0 / beta)) + lo
}

fn smooth_ceil_var(x: &Var, hi: f64, beta: f64) -> Var {
    let neg = &(&(&(-x) + hi) * beta).softplus() * (1.0 / beta);
    &(-&neg) + hi
}

fn wrap_angle_var(x: &Var) -> Var {
    x - &(&(x * (1.0 / TAU)).floor() * TAU)
}

/// Reparameterized camera draw on the tape: `parameter = mu + sigma * eps`
/// followed by the same validity mapping as [`Camera6D::new`]. Gradients
/// flow to `mu` and `sigma`; the noise is a constant.
pub fn sample_camera(dist: &PoseDistVars, eps: [f64; 6], cfg: &CameraConfig) -> CameraVars {
    let tape = dist.mu.tape();
    let eps_c = tape.cvec(eps.to_vec());
    let raw = &dist.mu + &(&dist.sigma * &eps_c);
    let at = |j: usize| raw.slice(0, j, 1).reshape(vec![]);
    let beta = cfg.clamp_sharpness;
    let phi = smooth_ceil_var(
        &smooth_floor_var(&at(1), cfg.phi_margin, beta),
        PI - cfg.phi_margin,
        beta,
    );
    CameraVars {
        theta: wrap_angle_var(&at(0)),
        phi,
        k: smooth_floor_var(&at(2), cfg.k_min, beta),
        d: raw.slice(0, 3, 3),
    }
}

/// Cancel a shape's internal translation and scale on the camera side:
/// `k' = k·c0/Δk`, `d' = d − k'·Δd`, rotation and elevation untouched.
/// Differentiable through both the camera and the statistics.
pub fn compensate(cam: &CameraVars, stats: &ShapeStats, c0: f64) -> Result<CameraVars> {
    let dk = stats.delta_k.item();
    if !(dk > 1e-12) {
        return Err(Error::DegenerateSpread { delta_k: dk });
    }
    let k_new = &(&cam.k * c0) / &stats.delta_k;
    let d_new = &cam.d - &(&stats.delta_d * &k_new);
    Ok(CameraVars {
        theta: cam.theta.clone(),
        phi: cam.phi.clone(),
        k: k_new,
        d: d_new,
    })
}

/// Value-level compensation, same algebra as [`compensate`].
pub fn compensate_value(
    cam: &Camera6D,
    delta_d: [f64; 3],
    delta_k: f64,
    c0: f64,
) -> Result<Camera6D> {
    if !(delta_k > 1e-12) {
        return Err(Error::DegenerateSpread { delta_k });
    }
    let k = cam.k * c0 / delta_k;
    Ok(Camera6D {
        theta: cam.theta,
        phi: cam.phi,
        k,
        d: [
            cam.d[0] - k * delta_d[0],
            cam.d[1] - k * delta_d[1],
            cam.d[2] - k * delta_d[2],
        ],
    })
}

/// Phase-1 camera source: uniform rotation and elevation, fixed scale and
/// displacement. Ranges are configurable; defaults cover the full orbit in
/// rotation and a wedge between one-third and one-half pi in elevation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixedSamplerConfig {
    pub rotation_lo: f64,
    pub rotation_hi: f64,
    pub elevation_lo: f64,
    pub elevation_hi: f64,
    pub scale: f64,
    pub displacement: [f64; 3],
}

impl Default for FixedSamplerConfig {
    fn default() -> Self {
        FixedSamplerConfig {
            rotation_lo: 0.0,
            rotation_hi: TAU,
            elevation_lo: PI / 3.0,
            elevation_hi: PI / 2.0,
            scale: 1.2,
            displacement: [0.0, 0.0, 0.0],
        }
    }
}

pub fn sample_fixed<R: Rng>(
    fixed: &FixedSamplerConfig,
    rng: &mut R,
    cfg: &CameraConfig,
) -> Camera6D {
    Camera6D::new(
        rng.gen_range(fixed.rotation_lo..fixed.rotation_hi),
        rng.gen_range(fixed.elevation_lo..fixed.elevation_hi),
        fixed.scale,
        fixed.displacement,
        cfg,
    )
}

/// World-to-clip matrices for a pose: a rigid look-at transform and a
/// symmetric perspective projection.
pub struct ViewTransform {
    /// `[4, 4]` rigid world-to-camera matrix (rotation rows orthonormal,
    /// determinant +1).
    pub world_to_camera: Tensor,
    /// `[4, 4]` perspective matrix.
    pub projection: Tensor,
    pub image_size: usize,
}

impl ViewTransform {
    /// Project an object-space point to normalized device coordinates plus
    /// eye-space depth (positive in front of the camera). The object-side
    /// transform `d + k·p` is applied first.
    pub fn project(&self, p: [f64; 3], cam: &Camera6D) -> (f64, f64, f64) {
        let world = [
            cam.d[0] + cam.k * p[0],
            cam.d[1] + cam.k * p[1],
            cam.d[2] + cam.k * p[2],
            1.0,
        ];
        let m = self.world_to_camera.data();
        let mut eye = [0.0; 4];
        for r in 0..4 {
            for c in 0..4 {
                eye[r] += m[r * 4 + c] * world[c];
            }
        }
        let pr = self.projection.data();
        let mut clip = [0.0; 4];
        for r in 0..4 {
            for c in 0..4 {
                clip[r] += pr[r * 4 + c] * eye[c];
            }
        }
        (clip[0] / clip[3], clip[1] / clip[3], clip[3])
    }
}

fn normalize3(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Build the look-at + projection matrices for a pose. Rejects poses within
/// `1e-6` of a pole, where the up-axis is parallel to the view direction.
pub fn view_transform(cam: &Camera6D, cfg: &CameraConfig, image_size: usize) -> Result<ViewTransform> {
    if cam.phi.sin().abs() < 1e-6 {
        return Err(Error::DegenerateCamera(format!(
            "elevation {} is within 1e-6 of a pole",
            cam.phi
        )));
    }
    let eye = cam.eye(cfg);
    let up = [0.0, 0.0, 1.0];
    let f = normalize3([-eye[0], -eye[1], -eye[2]]);
    let s = normalize3(cross3(f, up));
    let u = cross3(s, f);
    let w2c = Tensor::new(vec![4, 4], vec![
        s[0], s[1], s[2], -dot3(s, eye), //
        u[0], u[1], u[2], -dot3(u, eye), //
        -f[0], -f[1], -f[2], dot3(f, eye), //
        0.0, 0.0, 0.0, 1.0,
    ])?;
    let focal = 1.0 / (cfg.fov / 2.0).tan();
    let (n, fa) = (cfg.near, cfg.far);
    let projection = Tensor::new(vec![4, 4], vec![
        focal, 0.0, 0.0, 0.0, //
        0.0, focal, 0.0, 0.0, //
        0.0, 0.0, (fa + n) / (n - fa), 2.0 * fa * n / (n - fa), //
        0.0, 0.0, -1.0, 0.0,
    ])?;
    Ok(ViewTransform { world_to_camera: w2c, projection, image_size })
}

/// View geometry on the tape: the orbit basis in closed form. For
/// `phi` inside `(0, pi)` the normalized right/up/forward vectors reduce to
/// trigonometric expressions of θ and φ, so no normalization nodes are
/// needed and the basis is exactly orthonormal.
pub struct ViewVars {
    /// `[3]` eye position
    pub eye: Var,
    /// `[3]` right
    pub s: Var,
    /// `[3]` up
    pub u: Var,
    /// `[3]` forward (unit, towards the origin)
    pub f: Var,
    pub focal: f64,
}

pub fn view_vars(cam: &CameraVars, cfg: &CameraConfig) -> Result<ViewVars> {
    let phi_v = cam.phi.item();
    if phi_v.sin().abs() < 1e-6 {
        return Err(Error::DegenerateCamera(format!(
            "elevation {phi_v} is within 1e-6 of a pole"
        )));
    }
    let tape = cam.theta.tape();
    let (st, ct) = (cam.theta.sin(), cam.theta.cos());
    let (sp, cp) = (cam.phi.sin(), cam.phi.cos());
    let zero = tape.scalar(0.0);
    let r0 = cfg.orbit_radius;
    let eye = crate::autodiff::stack_scalars(&[&(&(&sp * &ct) * r0), &(&(&sp * &st) * r0), &(&cp * r0)]);
    let f = &(-&eye) * (1.0 / r0);
    let s = crate::autodiff::stack_scalars(&[&(-&st), &ct, &zero]);
    let u = crate::autodiff::stack_scalars(&[&(-&(&cp * &ct)), &(-&(&cp * &st)), &sp]);
    Ok(ViewVars { eye, s, u, f, focal: 1.0 / (cfg.fov / 2.0).tan() })
}

/// Summary statistics of a camera batch, one row per parameter.
#[derive(Debug, Clone, Serialize)]
pub struct ParamSummary {
    pub mean: f64,
    pub std: f64,
}

pub const PARAM_NAMES: [&str; 6] = ["theta", "phi", "k", "dx", "dy", "dz"];

fn param_column(cams: &[Camera6D], j: usize) -> Vec<f64> {
    cams.iter()
        .map(|c| match j {
            0 => c.theta,
            1 => c.phi,
            2 => c.k,
            _ => c.d[j - 3],
        })
        .collect()
}

/// Per-parameter empirical mean and population standard deviation, in
/// [`PARAM_NAMES`] order.
pub fn empirical_summary(cams: &[Camera6D]) -> Vec<(String, ParamSummary)> {
    assert!(!cams.is_empty(), "summary of an empty camera batch");
    PARAM_NAMES
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let col = param_column(cams, j);
            let n = col.len() as f64;
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            (name.to_string(), ParamSummary { mean, std: var.sqrt() })
        })
        .collect()
}

/// CSV dump of a camera batch with a `theta,phi,k,dx,dy,dz` header.
pub fn cameras_to_csv(cams: &[Camera6D]) -> String {
    let mut out = String::from("theta,phi,k,dx,dy,dz\n");
    for c in cams {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.theta, c.phi, c.k, c.d[0], c.d[1], c.d[2]
        ));
    }
    out
}

/// Mean direction of a set of angles (atan2 of averaged sin/cos), wrapped to
/// `[0, 2π)`. The right notion of "mean rotation" when the distribution may
/// straddle the wrap point.
pub fn circular_mean(angles: &[f64]) -> f64 {
    let (mut s, mut c) = (0.0, 0.0);
    for a in angles {
        s += a.sin();
        c += a.cos();
    }
    wrap_angle(s.atan2(c))
}

/// Absolute angular distance on the circle, in `[0, π]`.
pub fn circular_distance(a: f64, b: f64) -> f64 {
    let d = wrap_angle(a - b);
    d.min(TAU - d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::seeding::derive_rng;
    use rand::Rng;

    fn interior_dist() -> CameraPoseDistribution {
        CameraPoseDistribution {
            mu: [1.0, 2.0, 1.2, 0.1, -0.2, 0.05],
            sigma: [0.3, 0.08, 0.06, 0.06, 0.06, 0.06],
        }
    }

    #[test]
    fn zero_noise_reproduces_the_mean() {
        let cfg = CameraConfig::default();
        let d = interior_dist();
        let cam = d.sample([0.0; 6], &cfg);
        // Away from the bounds the smooth clamps round to the identity.
        assert!((cam.theta - 1.0).abs() < 1e-12);
        assert!((cam.phi - 2.0).abs() < 1e-12);
        assert!((cam.k - 1.2).abs() < 1e-12);
        assert_eq!(cam.d, [0.1, -0.2, 0.05]);
        let cam1 = d.sample([1.0; 6], &cfg);
        assert!((cam1.theta - 1.3).abs() < 1e-12);
        assert!((cam1.phi - 2.08).abs() < 1e-12);
        assert!((cam1.k - 1.26).abs() < 1e-12);
        assert!((cam1.d[0] - 0.16).abs() < 1e-15);
    }

    #[test]
    fn validity_mapping_enforces_invariants() {
        let cfg = CameraConfig::default();
        let cases = [
            (7.0, 3.2, -4.0, [0.0; 3]),
            (-0.5, -1.0, 0.0, [1.0, 2.0, 3.0]),
            (100.0, 0.0, 0.001, [0.0; 3]),
            (TAU, PI, 1.2, [0.0; 3]),
        ];
        for (t, p, k, d) in cases {
            let c = Camera6D::new(t, p, k, d, &cfg);
            assert!((0.0..TAU).contains(&c.theta), "theta {}", c.theta);
            assert!(c.phi > cfg.phi_margin - 1e-9 && c.phi < PI - cfg.phi_margin + 1e-9);
            // The clamp is strictly above k_min mathematically; f64 rounding
            // can land exactly on it.
            assert!(c.k >= cfg.k_min, "k {}", c.k);
            assert_eq!(c.d, d);
        }
    }

    #[test]
    fn value_and_graph_sampling_agree_bitwise() {
        let cfg = CameraConfig::default();
        let mut rng = derive_rng(3, 0, "value-graph");
        for _ in 0..50 {
            let mu: Vec<f64> = (0..6).map(|_| rng.gen_range(-8.0..8.0)).collect();
            let sg: Vec<f64> = (0..6).map(|_| rng.gen_range(0.01..2.0)).collect();
            let mut eps = [0.0; 6];
            for e in &mut eps {
                *e = rng.gen_range(-3.0..3.0);
            }
            let vdist = CameraPoseDistribution {
                mu: mu.clone().try_into().unwrap(),
                sigma: sg.clone().try_into().unwrap(),
            };
            let vcam = vdist.sample(eps, &cfg);

            let tape = Tape::new();
            let gdist = PoseDistVars {
                mu: tape.cvec(mu),
                sigma: tape.cvec(sg),
            };
            let gcam = sample_camera(&gdist, eps, &cfg).value();
            assert_eq!(vcam.theta.to_bits(), gcam.theta.to_bits());
            assert_eq!(vcam.phi.to_bits(), gcam.phi.to_bits());
            assert_eq!(vcam.k.to_bits(), gcam.k.to_bits());
            assert_eq!(vcam.d, gcam.d);
        }
    }

    #[test]
    fn decode_at_zero_matches_initialization_table() {
        let cfg = CameraConfig::default();
        let tape = Tape::new();
        let raw = tape.var(&Tensor::zeros(vec![12]));
        let dist = decode_distribution(&raw, &cfg).unwrap().value();
        assert_eq!(dist.mu, [0.0, PI, 1.2, 0.0, 0.0, 0.0]);
        assert_eq!(
            dist.sigma,
            [PI / 10.0, PI / 36.0, 0.06, 0.06, 0.06, 0.06]
        );
        // Additive decode: shifting a mean entry shifts mu only.
        let mut shifted = vec![0.0; 12];
        shifted[0] = 0.25;
        let raw2 = tape.var(&Tensor::from_vec(shifted));
        let d2 = decode_distribution(&raw2, &cfg).unwrap().value();
        assert_eq!(d2.mu[0], 0.25);
        assert_eq!(d2.sigma, dist.sigma);
        // Sigma stays positive for very negative raw entries.
        let mut low = vec![0.0; 12];
        low[6] = -200.0;
        let raw3 = tape.var(&Tensor::from_vec(low));
        let d3 = decode_distribution(&raw3, &cfg).unwrap().value();
        assert!(d3.sigma[0] > 0.0);
    }

    #[test]
    fn decode_then_sample_gradients_match_finite_differences() {
        let cfg = CameraConfig::default();
        // Raw vector placing every parameter away from clamp bounds.
        let raw = Tensor::from_vec(vec![
            0.9, -1.0, 0.1, 0.02, -0.05, 0.08, //
            0.2, -0.3, 0.1, 0.0, 0.15, -0.2,
        ]);
        let rep = finite_diff_check(
            move |_tape, vars| {
                let dist = decode_distribution(&vars[0], &CameraConfig::default()).unwrap();
                let cam = sample_camera(&dist, [0.4, -0.7, 1.1, 0.3, -0.2, 0.9], &CameraConfig::default());
                let dsum = cam.d.sum_all();
                &(&(&cam.theta * 0.7) + &(&cam.phi * 1.3)) + &(&(&cam.k * 0.9) + &(&dsum * 1.1))
            },
            &[raw],
            1e-6,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-6, "pose grad err {:.2e}", rep.max_rel_err);
        let _ = cfg;
    }

    #[test]
    fn large_sample_mean_approaches_mu() {
        let cfg = CameraConfig::default();
        let dist = interior_dist();
        let mut rng = derive_rng(5, 0, "lln");
        let n = 100_000;
        let cams: Vec<Camera6D> = (0..n).map(|_| dist.sample_rng(&mut rng, &cfg)).collect();
        let summary = empirical_summary(&cams);
        for (j, (name, s)) in summary.iter().enumerate() {
            let band = 4.0 * dist.sigma[j] / (n as f64).sqrt();
            assert!(
                (s.mean - dist.mu[j]).abs() < band,
                "{name}: mean {} vs mu {} (band {band})",
                s.mean,
                dist.mu[j]
            );
        }
    }

    #[test]
    fn compensation_algebra() {
        let cfg = CameraConfig::default();
        let cam = Camera6D::new(0.3, 1.2, 1.0, [0.0; 3], &cfg);
        // Neutral statistics leave the camera unchanged.
        let same = compensate_value(&cam, [0.0; 3], 1.0, 1.0).unwrap();
        assert_eq!(same, cam);
        // Pure displacement flips sign onto the camera.
        let c2 = compensate_value(&cam, [0.2, 0.0, 0.0], 1.0, 1.0).unwrap();
        assert!((c2.k - cam.k).abs() < 1e-15);
        assert!((c2.d[0] + 0.2).abs() < 1e-15);
        // Scale cancellation: k = 2 against delta_k = 2 gives 1.
        let cam2 = Camera6D { k: 2.0, ..cam };
        let c3 = compensate_value(&cam2, [0.0; 3], 2.0, 1.0).unwrap();
        assert!((c3.k - 1.0).abs() < 1e-15);
        // Collapsed spread is rejected.
        assert!(matches!(
            compensate_value(&cam, [0.0; 3], 0.0, 1.0),
            Err(Error::DegenerateSpread { .. })
        ));
    }

    #[test]
    fn graph_compensation_matches_value_compensation() {
        let cfg = CameraConfig::default();
        let cam = Camera6D::new(0.7, 1.9, 1.4, [0.1, -0.3, 0.2], &cfg);
        let (dd, dk, c0) = ([0.12, -0.07, 0.31], 1.7, 1.0);
        let want = compensate_value(&cam, dd, dk, c0).unwrap();
        let tape = Tape::new();
        let cvars = CameraVars::constant(&tape, &cam);
        let stats = ShapeStats {
            delta_d: tape.cvec(dd.to_vec()),
            delta_k: tape.scalar(dk),
            tet_count: 10,
        };
        let got = compensate(&cvars, &stats, c0).unwrap().value();
        assert_eq!(want.k.to_bits(), got.k.to_bits());
        for j in 0..3 {
            assert!((want.d[j] - got.d[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn look_at_matrix_matches_hand_derivation() {
        let cfg = CameraConfig::default();
        let (theta, phi) = (PI / 4.0, PI / 3.0);
        let cam = Camera6D::new(theta, phi, 1.0, [0.0; 3], &cfg);
        let vt = view_transform(&cam, &cfg, 64).unwrap();
        // Closed forms for the orbit basis with +z up:
        // s = (-sin t, cos t, 0), u = (-cos p cos t, -cos p sin t, sin p),
        // f = -(sin p cos t, sin p sin t, cos p).
        let s = [-theta.sin(), theta.cos(), 0.0];
        let u = [-phi.cos() * theta.cos(), -phi.cos() * theta.sin(), phi.sin()];
        let f = [-phi.sin() * theta.cos(), -phi.sin() * theta.sin(), -phi.cos()];
        let eye = cam.eye(&cfg);
        let m = vt.world_to_camera.data();
        let expect_rows = [
            (s, -dot3(s, eye)),
            (u, -dot3(u, eye)),
            ([-f[0], -f[1], -f[2]], dot3(f, eye)),
        ];
        for (r, (row, t)) in expect_rows.iter().enumerate() {
            for c in 0..3 {
                assert!((m[r * 4 + c] - row[c]).abs() < 1e-12, "row {r} col {c}");
            }
            assert!((m[r * 4 + 3] - t).abs() < 1e-12);
        }
        // Rotation block is orthonormal with determinant +1.
        let det = m[0] * (m[5] * m[10] - m[6] * m[9]) - m[1] * (m[4] * m[10] - m[6] * m[8])
            + m[2] * (m[4] * m[9] - m[5] * m[8]);
        assert!((det - 1.0).abs() < 1e-12, "det {det}");
    }

    #[test]
    fn projection_centers_and_cancels_displacement() {
        let cfg = CameraConfig::default();
        let cam = Camera6D::new(0.0, PI / 2.0, 1.0, [0.0; 3], &cfg);
        let vt = view_transform(&cam, &cfg, 64).unwrap();
        let (x, y, w) = vt.project([0.0; 3], &cam);
        assert!(x.abs() < 1e-12 && y.abs() < 1e-12);
        assert!(w > 0.0, "origin is in front of the camera");
        // A displaced camera centers the point -d.
        let cam2 = Camera6D::new(1.1, 1.9, 1.3, [0.2, -0.1, 0.3], &cfg);
        let vt2 = view_transform(&cam2, &cfg, 64).unwrap();
        let p = [
            -cam2.d[0] / cam2.k,
            -cam2.d[1] / cam2.k,
            -cam2.d[2] / cam2.k,
        ];
        let (x2, y2, _) = vt2.project(p, &cam2);
        assert!(x2.abs() < 1e-12 && y2.abs() < 1e-12, "({x2}, {y2})");
    }

    #[test]
    fn graph_view_basis_matches_matrix_rows() {
        let cfg = CameraConfig::default();
        let mut rng = derive_rng(9, 0, "basis");
        for _ in 0..20 {
            let cam = Camera6D::new(
                rng.gen_range(0.0..TAU),
                rng.gen_range(0.2..PI - 0.2),
                rng.gen_range(0.5..2.0),
                [rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4)],
                &cfg,
            );
            let vt = view_transform(&cam, &cfg, 64).unwrap();
            let tape = Tape::new();
            let vv = view_vars(&CameraVars::constant(&tape, &cam), &cfg).unwrap();
            let m = vt.world_to_camera.data();
            let (s, u, f) = (vv.s.value(), vv.u.value(), vv.f.value());
            for c in 0..3 {
                assert!((m[c] - s.data()[c]).abs() < 1e-12);
                assert!((m[4 + c] - u.data()[c]).abs() < 1e-12);
                assert!((m[8 + c] + f.data()[c]).abs() < 1e-12);
            }
            let eye = vv.eye.value();
            let ecam = cam.eye(&cfg);
            for c in 0..3 {
                assert!((eye.data()[c] - ecam[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pole_cameras_are_rejected() {
        let mut cfg = CameraConfig::default();
        cfg.phi_margin = 0.0; // allow constructing a degenerate pose
        let cam = Camera6D { theta: 0.0, phi: 0.0, k: 1.0, d: [0.0; 3] };
        assert!(matches!(
            view_transform(&cam, &cfg, 64),
            Err(Error::DegenerateCamera(_))
        ));
        let tape = Tape::new();
        assert!(view_vars(&CameraVars::constant(&tape, &cam), &cfg).is_err());
    }

    #[test]
    fn fixed_sampler_respects_ranges() {
        let cam_cfg = CameraConfig::default();
        let fixed = FixedSamplerConfig::default();
        let mut rng = derive_rng(2, 0, "fixed");
        for _ in 0..500 {
            let c = sample_fixed(&fixed, &mut rng, &cam_cfg);
            assert!((0.0..TAU).contains(&c.theta));
            assert!(c.phi >= PI / 3.0 - 1e-9 && c.phi <= PI / 2.0 + 1e-9);
            assert!((c.k - 1.2).abs() < 1e-12);
            assert_eq!(c.d, [0.0; 3]);
        }
    }

    #[test]
    fn circular_statistics() {
        // Angles straddling the wrap point average to ~0, not ~pi.
        let m = circular_mean(&[0.1, TAU - 0.1]);
        assert!(circular_distance(m, 0.0) < 1e-9, "mean {m}");
        assert!((circular_distance(0.2, TAU - 0.2) - 0.4).abs() < 1e-12);
        assert!((circular_distance(0.0, PI) - PI).abs() < 1e-12);
    }

    #[test]
    fn csv_and_summary_shapes() {
        let cfg = CameraConfig::default();
        let cams: Vec<Camera6D> = (0..4)
            .map(|i| Camera6D::new(0.3 * i as f64, 1.5, 1.2, [0.0; 3], &cfg))
            .collect();
        let csv = cameras_to_csv(&cams);
        assert!(csv.starts_with("theta,phi,k,dx,dy,dz\n"));
        assert_eq!(csv.lines().count(), 5);
        let summary = empirical_summary(&cams);
        assert_eq!(summary.len(), 6);
        assert_eq!(summary[0].0, "theta");
        assert!((summary[2].1.mean - 1.2).abs() < 1e-12);
        assert!(summary[2].1.std.abs() < 1e-12);
    }
}
