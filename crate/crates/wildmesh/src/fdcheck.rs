//! Named gradient-verification suites: every tape primitive, the surface
//! extraction path, and the full render-through-camera pipeline, each
//! compared against central finite differences at seeded random points.
//!
//! These back the `grad-check` command and the repository's gradient
//! acceptance gate. `detach` is deliberately absent: its contract is to
//! *disagree* with the total derivative, so a finite-difference comparison
//! cannot apply. `floor` and `sign` are included — their gradient is zero
//! away from their jumps, and inputs are kept away from the jumps.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{concat, finite_diff_check, stack_scalars, Tape, Var};
use crate::camera::{CameraConfig, CameraVars};
use crate::error::Result;
use crate::render::{render_mesh, RenderConfig};
use crate::seeding::derive_rng;
use crate::tensor::Tensor;
use crate::tetgrid::{extract_surface, shape_stats, ExtractOpts, MeshVars, TetGrid};

pub const PRIMITIVE_THRESHOLD: f64 = 1e-6;
pub const EXTRACTION_THRESHOLD: f64 = 1e-5;
pub const RENDER_THRESHOLD: f64 = 1e-3;
const POINTS_PER_PRIMITIVE: usize = 10;

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub threshold: f64,
}

impl CheckResult {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.threshold
    }
}

/// Fixed-pattern weights that turn any tensor into a scalar with
/// non-degenerate sensitivities to every element.
fn weighted_sum(v: &Var) -> Var {
    let w: Vec<f64> = (0..v.len()).map(|i| (0.37 * i as f64 + 0.5).sin() + 1.5).collect();
    let wt = v.tape().constant(&Tensor::new(v.shape().to_vec(), w).expect("weight shape"));
    (v * &wt).sum_all()
}

fn uniform(rng: &mut ChaCha12Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect())
        .expect("uniform tensor")
}

/// Uniform draw keeping every element at least `margin` from the points in
/// `avoid` — used for ops with kinks or jumps so the finite-difference step
/// never straddles one.
fn uniform_avoiding(
    rng: &mut ChaCha12Rng,
    shape: &[usize],
    lo: f64,
    hi: f64,
    avoid: impl Fn(f64) -> f64,
    margin: f64,
) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let x = rng.gen_range(lo..hi);
        if avoid(x).abs() >= margin {
            data.push(x);
        }
    }
    Tensor::new(shape.to_vec(), data).expect("avoiding tensor")
}

type GenFn = Box<dyn Fn(&mut ChaCha12Rng) -> Vec<Tensor>>;
type BuildFn = Box<dyn Fn(&Tape, &[Var]) -> Var>;

struct Entry {
    name: &'static str,
    gen: GenFn,
    build: BuildFn,
}

fn entry(
    name: &'static str,
    gen: impl Fn(&mut ChaCha12Rng) -> Vec<Tensor> + 'static,
    build: impl Fn(&Tape, &[Var]) -> Var + 'static,
) -> Entry {
    Entry { name, gen: Box::new(gen), build: Box::new(build) }
}

#[allow(clippy::too_many_lines)]
fn primitive_entries() -> Vec<Entry> {
    let pair = |rng: &mut ChaCha12Rng| {
        vec![uniform(rng, &[2, 3], -1.0, 1.0), uniform(rng, &[2, 3], -1.0, 1.0)]
    };
    let single = |rng: &mut ChaCha12Rng| vec![uniform(rng, &[2, 3], -1.0, 1.0)];
    let positive = |rng: &mut ChaCha12Rng| vec![uniform(rng, &[2, 3], 0.2, 2.0)];
    // elements at least 0.05 apart so min/max never tie within an FD step
    let separated = |rng: &mut ChaCha12Rng| {
        let x = uniform(rng, &[2, 3], -1.0, 1.0);
        let mut y = x.clone();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += if i % 2 == 0 { 0.1 + 0.4 * (i as f64 * 0.31).sin().abs() } else { -0.2 };
        }
        vec![x, y]
    };

    vec![
        entry("add", pair, |_, v| weighted_sum(&(&v[0] + &v[1]))),
        entry("sub", pair, |_, v| weighted_sum(&(&v[0] - &v[1]))),
        entry("mul", pair, |_, v| weighted_sum(&(&v[0] * &v[1]))),
        entry(
            "div",
            |rng| vec![uniform(rng, &[2, 3], -1.0, 1.0), uniform(rng, &[2, 3], 0.4, 1.6)],
            |_, v| weighted_sum(&(&v[0] / &v[1])),
        ),
        entry("neg", single, |_, v| weighted_sum(&(-&v[0]))),
        entry("add_scalar", single, |_, v| weighted_sum(&(&v[0] + 0.7))),
        entry("mul_scalar", single, |_, v| weighted_sum(&(&v[0] * 1.3))),
        entry("sigmoid", single, |_, v| weighted_sum(&v[0].sigmoid())),
        entry("softplus", single, |_, v| weighted_sum(&v[0].softplus())),
        entry("exp", single, |_, v| weighted_sum(&v[0].exp())),
        entry("ln", positive, |_, v| weighted_sum(&v[0].ln())),
        entry("sqrt", positive, |_, v| weighted_sum(&v[0].sqrt())),
        entry("tanh", single, |_, v| weighted_sum(&v[0].tanh())),
        entry("sin", single, |_, v| weighted_sum(&v[0].sin())),
        entry("cos", single, |_, v| weighted_sum(&v[0].cos())),
        entry(
            "abs",
            |rng| vec![uniform_avoiding(rng, &[2, 3], -1.0, 1.0, |x| x, 0.05)],
            |_, v| weighted_sum(&v[0].abs()),
        ),
        entry(
            "sign",
            |rng| vec![uniform_avoiding(rng, &[2, 3], -1.0, 1.0, |x| x, 0.05)],
            |_, v| weighted_sum(&(&v[0].sign() * &v[0])),
        ),
        entry(
            "floor",
            |rng| {
                vec![uniform_avoiding(rng, &[2, 3], -2.0, 2.0, |x| x - x.round(), 0.05)]
            },
            |_, v| weighted_sum(&(&v[0].floor() + &v[0])),
        ),
        entry("square", single, |_, v| weighted_sum(&v[0].square())),
        entry("min2", separated, |_, v| weighted_sum(&v[0].min2(&v[1]))),
        entry("max2", separated, |_, v| weighted_sum(&v[0].max2(&v[1]))),
        entry(
            "clamp",
            |rng| {
                vec![uniform_avoiding(
                    rng,
                    &[2, 3],
                    -1.0,
                    1.0,
                    |x| (x + 0.25).abs().min((x - 0.75).abs()),
                    0.05,
                )]
            },
            |_, v| weighted_sum(&v[0].clamp(-0.25, 0.75)),
        ),
        entry(
            "matmul",
            |rng| vec![uniform(rng, &[2, 3], -1.0, 1.0), uniform(rng, &[3, 2], -1.0, 1.0)],
            |_, v| weighted_sum(&v[0].matmul(&v[1])),
        ),
        entry("transpose", single, |_, v| weighted_sum(&v[0].t())),
        entry("reshape", single, |_, v| weighted_sum(&v[0].reshape(vec![6]))),
        entry(
            "broadcast_to",
            |rng| vec![uniform(rng, &[1, 3], -1.0, 1.0)],
            |_, v| weighted_sum(&v[0].broadcast_to(&[4, 3])),
        ),
        entry(
            "sum_to",
            |rng| vec![uniform(rng, &[4, 3], -1.0, 1.0)],
            |_, v| weighted_sum(&v[0].sum_to(&[1, 3])),
        ),
        entry("sum_axes", single, |_, v| weighted_sum(&v[0].sum_axes(&[0], false))),
        entry("sum_all", single, |_, v| v[0].sum_all()),
        entry("mean_all", single, |_, v| v[0].mean_all()),
        entry(
            "slice",
            |rng| vec![uniform(rng, &[2, 6], -1.0, 1.0)],
            |_, v| weighted_sum(&v[0].slice(1, 1, 3)),
        ),
        entry(
            "gather",
            |rng| vec![uniform(rng, &[5, 2], -1.0, 1.0)],
            |_, v| weighted_sum(&v[0].gather(vec![4, 0, 2, 2])),
        ),
        entry(
            "scatter_add",
            |rng| vec![uniform(rng, &[3, 2], -1.0, 1.0)],
            |_, v| weighted_sum(&v[0].scatter_add(vec![1, 4, 1], 5)),
        ),
        entry("concat", pair, |_, v| weighted_sum(&concat(&[&v[0], &v[1]], 0))),
        entry(
            "stack_scalars",
            |rng| vec![uniform(rng, &[3], -1.0, 1.0)],
            |_, v| {
                let parts: Vec<Var> =
                    (0..3).map(|i| v[0].slice(0, i, 1).reshape(vec![])).collect();
                let refs: Vec<&Var> = parts.iter().collect();
                weighted_sum(&stack_scalars(&refs))
            },
        ),
    ]
}

/// Check every tape primitive at seeded random points.
pub fn primitive_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (i, e) in primitive_entries().into_iter().enumerate() {
        let mut worst = 0.0_f64;
        let mut rng = derive_rng(seed, i as u64, "fd-primitive");
        for _ in 0..POINTS_PER_PRIMITIVE {
            let inputs = (e.gen)(&mut rng);
            let report = finite_diff_check(&e.build, &inputs, 1e-5)?;
            worst = worst.max(report.max_rel_err);
        }
        out.push(CheckResult {
            name: e.name.into(),
            max_rel_err: worst,
            threshold: PRIMITIVE_THRESHOLD,
        });
    }
    Ok(out)
}

/// Gradients through surface extraction and the derived shape statistics:
/// SDF values, deformations, and vertex colors all feed one scalar.
pub fn extraction_check(seed: u64) -> Result<CheckResult> {
    let grid = TetGrid::new(2, 1.0)?;
    let n = grid.vertex_count();
    let base = grid.eval_field(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 0.55);
    let mut rng = derive_rng(seed, 0, "fd-extraction");
    let mut worst = 0.0_f64;
    for _ in 0..3 {
        let mut sdf = base.clone();
        for v in sdf.data_mut() {
            // keep well clear of sign flips so the topology is FD-stable
            *v += rng.gen_range(-0.05..0.05);
        }
        let deform = uniform(&mut rng, &[n, 3], -0.08, 0.08);
        let colors = uniform(&mut rng, &[n, 3], 0.1, 0.9);
        let grid_ref = &grid;
        let build = move |tape: &Tape, v: &[Var]| -> Var {
            let ex = extract_surface(
                tape,
                grid_ref,
                &v[0],
                Some(&v[1]),
                Some(&v[2]),
                &ExtractOpts::default(),
            )
            .expect("extraction in gradient check");
            let stats = shape_stats(&ex.centroids, 1.0);
            let color_term = ex.mesh.colors.as_ref().map_or_else(
                || tape.scalar(0.0),
                weighted_sum,
            );
            &(&weighted_sum(&ex.mesh.verts) + &stats.delta_k)
                + &(&weighted_sum(&stats.delta_d) + &color_term)
        };
        let report = finite_diff_check(build, &[sdf, deform, colors], 1e-5)?;
        worst = worst.max(report.max_rel_err);
    }
    Ok(CheckResult {
        name: "extraction".into(),
        max_rel_err: worst,
        threshold: EXTRACTION_THRESHOLD,
    })
}

fn octahedron(rng: &mut ChaCha12Rng) -> Tensor {
    let axes = [
        0.45 + rng.gen_range(0.0..0.1),
        0.3 + rng.gen_range(0.0..0.1),
        0.22 + rng.gen_range(0.0..0.1),
    ];
    Tensor::new(
        vec![6, 3],
        vec![
            axes[0], 0.0, 0.0, //
            -axes[0], 0.0, 0.0, //
            0.0, axes[1], 0.0, //
            0.0, -axes[1], 0.0, //
            0.0, 0.0, axes[2], //
            0.0, 0.0, -axes[2],
        ],
    )
    .expect("octahedron verts")
}

pub const OCTAHEDRON_TRIS: [[usize; 3]; 8] = [
    [0, 2, 4],
    [2, 1, 4],
    [1, 3, 4],
    [3, 0, 4],
    [2, 0, 5],
    [1, 2, 5],
    [3, 1, 5],
    [0, 3, 5],
];

/// Gradients through the full render: mesh vertices, vertex colors, and all
/// six camera parameters feed the rendered image, on an eight-triangle
/// scene.
pub fn render_check(seed: u64) -> Result<CheckResult> {
    let rcfg = RenderConfig { image_size: 16, ..RenderConfig::default() };
    let ccfg = CameraConfig::default();
    let mut rng = derive_rng(seed, 0, "fd-render");
    let mut worst = 0.0_f64;
    for _ in 0..2 {
        let verts = octahedron(&mut rng);
        let colors = uniform(&mut rng, &[6, 3], 0.1, 0.9);
        let cam_raw = Tensor::new(
            vec![6],
            vec![
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.8..2.3),
                rng.gen_range(0.9..1.3),
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.1..0.1),
            ],
        )?;
        let (rc, cc) = (rcfg.clone(), ccfg.clone());
        let build = move |_tape: &Tape, v: &[Var]| -> Var {
            let mesh = MeshVars {
                verts: v[0].clone(),
                tris: OCTAHEDRON_TRIS.to_vec(),
                colors: Some(v[1].clone()),
            };
            let cam = CameraVars {
                theta: v[2].slice(0, 0, 1).reshape(vec![]),
                phi: v[2].slice(0, 1, 1).reshape(vec![]),
                k: v[2].slice(0, 2, 1).reshape(vec![]),
                d: v[2].slice(0, 3, 3),
            };
            let render = render_mesh(&mesh, &cam, &rc, &cc).expect("render in gradient check");
            &weighted_sum(&render.mask) + &weighted_sum(&render.color)
        };
        let report = finite_diff_check(build, &[verts, colors, cam_raw], 1e-5)?;
        worst = worst.max(report.max_rel_err);
    }
    Ok(CheckResult { name: "render_pipeline".into(), max_rel_err: worst, threshold: RENDER_THRESHOLD })
}

/// The full battery: primitives, extraction, render.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = primitive_checks(seed)?;
    out.push(extraction_check(seed)?);
    out.push(render_check(seed)?);
    Ok(out)
}

/// Plain-text table of check outcomes.
pub fn table(results: &[CheckResult]) -> String {
    let mut out = String::from("check            max_rel_err   threshold   status\n");
    for r in results {
        out.push_str(&format!(
            "{:<16} {:>11.3e}   {:>9.0e}   {}\n",
            r.name,
            r.max_rel_err,
            r.threshold,
            if r.pass() { "pass" } else { "FAIL" }
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_matches_finite_differences() {
        let results = primitive_checks(0).unwrap();
        assert!(results.len() >= 30, "expected a full op battery, got {}", results.len());
        for r in &results {
            assert!(
                r.pass(),
                "{} gradient check failed: {} >= {}",
                r.name,
                r.max_rel_err,
                r.threshold
            );
        }
    }

    #[test]
    fn extraction_and_render_match_finite_differences() {
        let ex = extraction_check(0).unwrap();
        assert!(ex.pass(), "extraction: {} >= {}", ex.max_rel_err, ex.threshold);
        let rn = render_check(0).unwrap();
        assert!(rn.pass(), "render: {} >= {}", rn.max_rel_err, rn.threshold);
    }

    #[test]
    fn table_lists_every_check_with_a_verdict() {
        let results = vec![
            CheckResult { name: "good".into(), max_rel_err: 1e-9, threshold: 1e-6 },
            CheckResult { name: "bad".into(), max_rel_err: 1e-2, threshold: 1e-6 },
        ];
        let t = table(&results);
        assert!(t.contains("good") && t.contains("pass"));
        assert!(t.contains("bad") && t.contains("FAIL"));
    }
}
