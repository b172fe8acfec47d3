//! Set-level shape evaluation: seeded surface point sampling, chamfer
//! distance between point clouds, and the coverage / minimum-matching
//! summary over a generated set versus a reference set.
//!
//! Chamfer here is the *summed* squared nearest-neighbor distance in both
//! directions; a mean-normalized variant is available behind
//! [`ChamferVariant::MeanSquared`] for comparing against tools that divide
//! by cloud size. All nearest-neighbor searches are exact brute force —
//! cloud sizes in this pipeline are small enough that an index structure
//! would only add code.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tetgrid::TriMesh;

/// How directional nearest-neighbor sums are combined into a chamfer value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChamferVariant {
    /// Sum of squared nearest-neighbor distances over both clouds.
    #[default]
    SumSquared,
    /// Each directional sum divided by its cloud size before adding.
    MeanSquared,
}

fn nearest_sq(p: [f64; 3], cloud: &[[f64; 3]]) -> f64 {
    let mut best = f64::INFINITY;
    for q in cloud {
        let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
        if d < best {
            best = d;
        }
    }
    best
}

fn directional_sum(from: &[[f64; 3]], to: &[[f64; 3]]) -> f64 {
    from.iter().map(|&p| nearest_sq(p, to)).sum()
}

/// Chamfer distance between two point clouds.
pub fn chamfer(a: &[[f64; 3]], b: &[[f64; 3]], variant: ChamferVariant) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::BadInput("chamfer distance needs non-empty point clouds".into()));
    }
    let (fwd, bwd) = (directional_sum(a, b), directional_sum(b, a));
    Ok(match variant {
        ChamferVariant::SumSquared => fwd + bwd,
        ChamferVariant::MeanSquared => fwd / a.len() as f64 + bwd / b.len() as f64,
    })
}

/// Pairwise chamfer distances, `matrix[g][r]` = distance between generated
/// cloud `g` and reference cloud `r`.
pub fn distance_matrix(
    generated: &[Vec<[f64; 3]>],
    reference: &[Vec<[f64; 3]>],
    variant: ChamferVariant,
) -> Result<Vec<Vec<f64>>> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::BadInput("evaluation needs non-empty mesh sets".into()));
    }
    generated
        .iter()
        .map(|g| reference.iter().map(|r| chamfer(g, r, variant)).collect())
        .collect()
}

/// Fraction (percent) of reference clouds that are the nearest neighbor of
/// at least one generated cloud.
pub fn coverage_from_matrix(matrix: &[Vec<f64>]) -> f64 {
    let refs = matrix[0].len();
    let mut hit = vec![false; refs];
    for row in matrix {
        let mut best = 0;
        for (j, d) in row.iter().enumerate() {
            if *d < row[best] {
                best = j;
            }
        }
        hit[best] = true;
    }
    100.0 * hit.iter().filter(|h| **h).count() as f64 / refs as f64
}

/// Mean over reference clouds of the distance to their closest generated
/// cloud.
pub fn mmd_from_matrix(matrix: &[Vec<f64>]) -> f64 {
    let refs = matrix[0].len();
    let mut total = 0.0;
    for j in 0..refs {
        let mut best = f64::INFINITY;
        for row in matrix {
            if row[j] < best {
                best = row[j];
            }
        }
        total += best;
    }
    total / refs as f64
}

pub fn coverage(
    generated: &[Vec<[f64; 3]>],
    reference: &[Vec<[f64; 3]>],
    variant: ChamferVariant,
) -> Result<f64> {
    Ok(coverage_from_matrix(&distance_matrix(generated, reference, variant)?))
}

pub fn mmd(
    generated: &[Vec<[f64; 3]>],
    reference: &[Vec<[f64; 3]>],
    variant: ChamferVariant,
) -> Result<f64> {
    Ok(mmd_from_matrix(&distance_matrix(generated, reference, variant)?))
}

/// Area-weighted uniform surface samples as coordinate triples,
/// deterministic in the seed.
pub fn sample_surface_points(mesh: &TriMesh, count: usize, seed: u64) -> Result<Vec<[f64; 3]>> {
    let pts = crate::tetgrid::sample_surface_points(mesh, count, seed)?;
    Ok(pts.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
}

/// Rescale a mesh so its bounding-box center sits at the origin and its
/// longest bounding-box side has length 1. This is the evaluation-side
/// normalization: it depends only on the mesh itself, so generated and
/// reference shapes are compared in a shared frame regardless of the scales
/// either side was built at.
pub fn normalize_mesh(mesh: &TriMesh) -> Result<TriMesh> {
    let verts = &mesh.verts;
    if verts.shape()[0] == 0 {
        return Err(Error::BadInput("cannot normalize a mesh with no vertices".into()));
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for row in verts.data().chunks(3) {
        for axis in 0..3 {
            lo[axis] = lo[axis].min(row[axis]);
            hi[axis] = hi[axis].max(row[axis]);
        }
    }
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0_f64, f64::max);
    if !(extent > 0.0) {
        return Err(Error::BadInput("mesh bounding box has zero extent".into()));
    }
    let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, (lo[2] + hi[2]) / 2.0];
    let mut out = verts.clone();
    for row in out.data_mut().chunks_mut(3) {
        for axis in 0..3 {
            row[axis] = (row[axis] - center[axis]) / extent;
        }
    }
    Ok(TriMesh { verts: out, tris: mesh.tris.clone(), colors: mesh.colors.clone() })
}

/// Set-level comparison of generated meshes against reference meshes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub generated: usize,
    pub reference: usize,
    pub points_per_mesh: usize,
    pub chamfer_variant: ChamferVariant,
    /// Percent of reference shapes matched by some generated shape.
    pub coverage_pct: f64,
    /// Mean nearest-generated distance over references, scaled by 1000.
    pub mmd_scaled: f64,
    /// Present when the set sizes depart from the conventional 5:1 ratio.
    pub ratio_warning: Option<String>,
}

/// Normalize, sample, and score both mesh sets. Also returns the pairwise
/// distance matrix (`[generated][reference]`) for export.
pub fn eval_report(
    generated: &[TriMesh],
    reference: &[TriMesh],
    points_per_mesh: usize,
    seed: u64,
    variant: ChamferVariant,
) -> Result<(EvalReport, Vec<Vec<f64>>)> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::BadInput("evaluation needs non-empty mesh sets".into()));
    }
    if points_per_mesh == 0 {
        return Err(Error::BadConfig("points per mesh must be positive".into()));
    }
    let clouds = |meshes: &[TriMesh], salt: u64| -> Result<Vec<Vec<[f64; 3]>>> {
        meshes
            .iter()
            .enumerate()
            .map(|(i, m)| {
                sample_surface_points(
                    &normalize_mesh(m)?,
                    points_per_mesh,
                    seed ^ salt ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
                )
            })
            .collect()
    };
    let gen_clouds = clouds(generated, 0)?;
    let ref_clouds = clouds(reference, 0x5eed_0000_0000_0001)?;
    let matrix = distance_matrix(&gen_clouds, &ref_clouds, variant)?;
    let ratio_warning = if generated.len() != 5 * reference.len() {
        Some(format!(
            "generated set has {} meshes for {} references; scores are usually quoted at a 5:1 ratio",
            generated.len(),
            reference.len()
        ))
    } else {
        None
    };
    let report = EvalReport {
        generated: generated.len(),
        reference: reference.len(),
        points_per_mesh,
        chamfer_variant: variant,
        coverage_pct: coverage_from_matrix(&matrix),
        mmd_scaled: 1000.0 * mmd_from_matrix(&matrix),
        ratio_warning,
    };
    Ok((report, matrix))
}

/// Render a distance matrix as CSV with one generated mesh per row.
pub fn matrix_to_csv(matrix: &[Vec<f64>]) -> String {
    let mut out = String::new();
    let refs = matrix.first().map_or(0, Vec::len);
    out.push_str("generated");
    for j in 0..refs {
        out.push_str(&format!(",ref_{j}"));
    }
    out.push('\n');
    for (i, row) in matrix.iter().enumerate() {
        out.push_str(&format!("gen_{i}"));
        for d in row {
            out.push_str(&format!(",{d}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{shape_mesh, ShapeFamily, ShapeInstance};
    use crate::seeding::derive_rng;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn cloud(points: &[[f64; 3]]) -> Vec<[f64; 3]> {
        points.to_vec()
    }

    fn random_cloud(rng: &mut impl Rng, n: usize) -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect()
    }

    #[test]
    fn chamfer_matches_hand_examples() {
        let origin = cloud(&[[0.0, 0.0, 0.0]]);
        let unit_x = cloud(&[[1.0, 0.0, 0.0]]);
        let pair = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let v = ChamferVariant::SumSquared;
        assert_eq!(chamfer(&pair, &pair, v).unwrap(), 0.0);
        assert!((chamfer(&origin, &unit_x, v).unwrap() - 2.0).abs() < 1e-15);
        assert!((chamfer(&pair, &origin, v).unwrap() - 1.0).abs() < 1e-15);

        let m = ChamferVariant::MeanSquared;
        assert!((chamfer(&pair, &origin, m).unwrap() - 0.5).abs() < 1e-15);
        assert!(chamfer(&[], &origin, v).is_err());
    }

    #[test]
    fn chamfer_is_symmetric_and_nonnegative() {
        let mut rng = derive_rng(21, 0, "chamfer-props");
        for _ in 0..20 {
            let a = random_cloud(&mut rng, 7);
            let b = random_cloud(&mut rng, 5);
            let v = ChamferVariant::SumSquared;
            let ab = chamfer(&a, &b, v).unwrap();
            let ba = chamfer(&b, &a, v).unwrap();
            assert_eq!(ab, ba, "chamfer must be symmetric");
            assert!(ab >= 0.0);
            assert_eq!(chamfer(&a, &a, v).unwrap(), 0.0);
        }
    }

    fn rotate(p: [f64; 3], angle: f64) -> [f64; 3] {
        // rotation about a fixed skew axis, built from two elementary turns
        let (s, c) = angle.sin_cos();
        let q = [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]];
        [q[0], c * q[1] - s * q[2], s * q[1] + c * q[2]]
    }

    #[test]
    fn chamfer_is_rigid_transform_invariant() {
        let mut rng = derive_rng(22, 0, "chamfer-rigid");
        let a = random_cloud(&mut rng, 9);
        let b = random_cloud(&mut rng, 6);
        let before = chamfer(&a, &b, ChamferVariant::SumSquared).unwrap();
        let t = [0.3, -1.1, 0.7];
        let moved = |cloud: &[[f64; 3]]| -> Vec<[f64; 3]> {
            cloud
                .iter()
                .map(|&p| {
                    let r = rotate(p, 0.83);
                    [r[0] + t[0], r[1] + t[1], r[2] + t[2]]
                })
                .collect()
        };
        let after = chamfer(&moved(&a), &moved(&b), ChamferVariant::SumSquared).unwrap();
        assert!(
            (before - after).abs() < 1e-9,
            "rigid motion changed chamfer: {before} vs {after}"
        );
    }

    #[test]
    fn coverage_matches_hand_examples() {
        let a = cloud(&[[0.0, 0.0, 0.0]]);
        let b = cloud(&[[1.0, 0.0, 0.0]]);
        let v = ChamferVariant::SumSquared;
        let sets = vec![a.clone(), b.clone()];
        assert_eq!(coverage(&sets, &sets, v).unwrap(), 100.0);
        assert_eq!(coverage(&[a.clone()], &[a.clone(), b.clone()], v).unwrap(), 50.0);
    }

    #[test]
    fn mmd_matches_hand_examples() {
        let v = ChamferVariant::SumSquared;
        let a = cloud(&[[0.0, 0.0, 0.0]]);
        let b = cloud(&[[1.0, 0.0, 0.0]]);
        // references contained in the generated set are matched exactly
        let gens = vec![a.clone(), b.clone()];
        assert_eq!(mmd(&gens, &[a.clone()], v).unwrap(), 0.0);

        // distances 2 and 5 from the single reference: the minimum wins
        let c = cloud(&[[2.5_f64.sqrt(), 0.0, 0.0]]);
        assert!((chamfer(&a, &b, v).unwrap() - 2.0).abs() < 1e-12);
        assert!((chamfer(&a, &c, v).unwrap() - 5.0).abs() < 1e-12);
        assert!((mmd(&[b, c], &[a], v).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn matrix_summaries_match_a_double_loop_oracle() {
        let mut rng = derive_rng(23, 0, "matrix-oracle");
        for (ng, nr) in [(1, 1), (3, 2), (6, 4), (10, 10)] {
            let gens: Vec<_> = (0..ng).map(|_| random_cloud(&mut rng, 5)).collect();
            let refs: Vec<_> = (0..nr).map(|_| random_cloud(&mut rng, 5)).collect();
            let v = ChamferVariant::SumSquared;
            let matrix = distance_matrix(&gens, &refs, v).unwrap();

            let mut matched = std::collections::BTreeSet::new();
            for g in &gens {
                let mut best = (0, f64::INFINITY);
                for (j, r) in refs.iter().enumerate() {
                    let d = chamfer(g, r, v).unwrap();
                    if d < best.1 {
                        best = (j, d);
                    }
                }
                matched.insert(best.0);
            }
            let cov_oracle = 100.0 * matched.len() as f64 / nr as f64;

            let mut mmd_oracle = 0.0;
            for r in &refs {
                let mut best = f64::INFINITY;
                for g in &gens {
                    best = best.min(chamfer(g, r, v).unwrap());
                }
                mmd_oracle += best;
            }
            mmd_oracle /= nr as f64;

            assert!((coverage_from_matrix(&matrix) - cov_oracle).abs() < 1e-12);
            assert!((mmd_from_matrix(&matrix) - mmd_oracle).abs() < 1e-12);
        }
    }

    fn two_triangle_mesh() -> TriMesh {
        // one large triangle in z=0, one tiny one in z=1
        let verts = Tensor::new(
            vec![6, 3],
            vec![
                0.0, 0.0, 0.0, //
                4.0, 0.0, 0.0, //
                0.0, 4.0, 0.0, //
                0.0, 0.0, 1.0, //
                0.1, 0.0, 1.0, //
                0.0, 0.1, 1.0,
            ],
        )
        .unwrap();
        TriMesh { verts, tris: vec![[0, 1, 2], [3, 4, 5]], colors: None }
    }

    #[test]
    fn surface_sampling_is_seeded_and_area_weighted() {
        let mesh = two_triangle_mesh();
        let pts = sample_surface_points(&mesh, 4000, 17).unwrap();
        assert_eq!(pts, sample_surface_points(&mesh, 4000, 17).unwrap());
        assert_ne!(pts, sample_surface_points(&mesh, 4000, 18).unwrap());

        let mut on_small = 0;
        for p in &pts {
            if (p[2] - 1.0).abs() < 1e-12 {
                on_small += 1;
                assert!(p[0] >= 0.0 && p[1] >= 0.0 && p[0] + p[1] <= 0.1 + 1e-12);
            } else {
                assert!(p[2].abs() < 1e-12, "point off both triangle planes: {p:?}");
                assert!(p[0] >= 0.0 && p[1] >= 0.0 && p[0] + p[1] <= 4.0 + 1e-12);
            }
        }
        // areas 8 and 0.005: the small triangle draws ~1/1601 of the samples
        let frac = on_small as f64 / pts.len() as f64;
        assert!(frac < 0.01, "tiny triangle drew {frac} of the samples");

        let empty = TriMesh {
            verts: Tensor::new(vec![0, 3], vec![]).unwrap(),
            tris: vec![],
            colors: None,
        };
        assert!(sample_surface_points(&empty, 10, 0).is_err());
    }

    #[test]
    fn normalization_centers_and_unit_scales() {
        let mesh = two_triangle_mesh();
        let norm = normalize_mesh(&mesh).unwrap();
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for row in norm.verts.data().chunks(3) {
            for a in 0..3 {
                lo[a] = lo[a].min(row[a]);
                hi[a] = hi[a].max(row[a]);
            }
        }
        let extents: Vec<f64> = (0..3).map(|a| hi[a] - lo[a]).collect();
        let max_extent = extents.iter().fold(0.0_f64, |m, &e| m.max(e));
        assert!((max_extent - 1.0).abs() < 1e-12);
        for a in 0..3 {
            assert!((lo[a] + hi[a]).abs() < 1e-12, "axis {a} not centered");
        }
    }

    fn sample_shapes() -> (Vec<TriMesh>, Vec<TriMesh>) {
        let mk = |family, axes: [f64; 3]| {
            shape_mesh(
                &ShapeInstance { family, semi_axes: axes, exponent: 4.0 },
                4,
                1.0,
            )
            .unwrap()
        };
        let gens = vec![
            mk(ShapeFamily::Ellipsoid, [0.7, 0.5, 0.5]),
            mk(ShapeFamily::Box, [0.5, 0.5, 0.7]),
        ];
        let refs = vec![mk(ShapeFamily::Superellipsoid, [0.6, 0.6, 0.5])];
        (gens, refs)
    }

    #[test]
    fn report_is_invariant_under_per_mesh_similarity() {
        let (gens, refs) = sample_shapes();
        let (before, _) =
            eval_report(&gens, &refs, 256, 3, ChamferVariant::SumSquared).unwrap();

        let moved: Vec<TriMesh> = gens
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let mut scaled = m.clone();
                let s = 1.0 + i as f64 * 2.5;
                for v in scaled.verts.data_mut() {
                    *v *= s;
                }
                scaled.translated([10.0 * i as f64, -3.0, 0.5])
            })
            .collect();
        let (after, _) =
            eval_report(&moved, &refs, 256, 3, ChamferVariant::SumSquared).unwrap();
        assert_eq!(before.coverage_pct, after.coverage_pct);
        assert!(
            (before.mmd_scaled - after.mmd_scaled).abs() < 1e-9,
            "similarity transform moved the score: {} vs {}",
            before.mmd_scaled,
            after.mmd_scaled
        );
    }

    #[test]
    fn report_flags_nonstandard_set_ratios() {
        let (gens, refs) = sample_shapes();
        let (report, matrix) =
            eval_report(&gens, &refs, 64, 0, ChamferVariant::SumSquared).unwrap();
        assert!(report.ratio_warning.is_some(), "2:1 ratio should warn");
        assert_eq!(matrix.len(), 2);
        assert_eq!(matrix[0].len(), 1);
        assert!(report.mmd_scaled > 0.0);

        let five: Vec<TriMesh> = (0..5).map(|_| gens[0].clone()).collect();
        let (ok, _) = eval_report(&five, &refs, 64, 0, ChamferVariant::SumSquared).unwrap();
        assert!(ok.ratio_warning.is_none());

        let csv = matrix_to_csv(&matrix);
        assert!(csv.starts_with("generated,ref_0\n"));
        assert_eq!(csv.lines().count(), 3);
    }
}
