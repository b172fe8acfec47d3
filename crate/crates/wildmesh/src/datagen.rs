//! Synthetic image-collection builder: analytic shape families rendered
//! under perturbed camera distributions, persisted as PNG pairs plus a JSON
//! manifest, with the planar crop augmentation and the split-aware loader.
//!
//! Manifests store the *raw* pose draws for each view. The render path maps
//! raws to valid poses through [`Camera6D::new`], so re-rendering a record
//! from its manifest entry reproduces the stored image exactly; statistics
//! over the manifest columns reproduce the configured sampling moments
//! without clamp bias. Ground-truth poses exist for evaluation only — the
//! loader hands the trainer camera-free `(image, mask)` pairs.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera6D, CameraConfig};
use crate::error::{Error, Result};
use crate::render::{
    read_png_gray, read_png_rgb, render_image, write_png_gray, write_png_rgb, RenderConfig,
};
use crate::schedule::RealPair;
use crate::seeding::{derive_rng, gaussian};
use crate::tensor::Tensor;
use crate::tetgrid::{extract_surface, ExtractOpts, TetGrid, TriMesh};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

const PURPOSE_INSTANCE: &str = "shape-instance";
const PURPOSE_POSE: &str = "camera-draw";
const PURPOSE_SHUFFLE: &str = "epoch-shuffle";

/// The analytic shape families the generator can draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Ellipsoid,
    Box,
    Superellipsoid,
}

/// One concrete shape: a family plus its sampled parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapeInstance {
    pub family: ShapeFamily,
    pub semi_axes: [f64; 3],
    /// Roundness exponent; only the superellipsoid uses it.
    pub exponent: f64,
}

/// Signed distance to the instance surface: negative inside, positive
/// outside. Exact for boxes and for ellipsoids with equal axes; a
/// sign-exact bounded approximation otherwise.
pub fn analytic_sdf(inst: &ShapeInstance, p: [f64; 3]) -> f64 {
    let a = inst.semi_axes;
    match inst.family {
        ShapeFamily::Ellipsoid => {
            let k0 = ((p[0] / a[0]).powi(2) + (p[1] / a[1]).powi(2) + (p[2] / a[2]).powi(2))
                .sqrt();
            let k1 = ((p[0] / (a[0] * a[0])).powi(2)
                + (p[1] / (a[1] * a[1])).powi(2)
                + (p[2] / (a[2] * a[2])).powi(2))
            .sqrt();
            if k1 == 0.0 {
                // Center: distance to the nearest surface point is the
                // smallest semi-axis.
                -a[0].min(a[1]).min(a[2])
            } else {
                k0 * (k0 - 1.0) / k1
            }
        }
        ShapeFamily::Box => {
            let q = [p[0].abs() - a[0], p[1].abs() - a[1], p[2].abs() - a[2]];
            let outside = (q[0].max(0.0).powi(2) + q[1].max(0.0).powi(2) + q[2].max(0.0).powi(2))
                .sqrt();
            let inside = q[0].max(q[1]).max(q[2]).min(0.0);
            outside + inside
        }
        ShapeFamily::Superellipsoid => {
            let e = inst.exponent;
            let s = (p[0] / a[0]).abs().powf(e)
                + (p[1] / a[1]).abs().powf(e)
                + (p[2] / a[2]).abs().powf(e);
            (s.powf(1.0 / e) - 1.0) * a[0].min(a[1]).min(a[2])
        }
    }
}

/// Dataset generation settings; echoed verbatim into the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub shapes: usize,
    pub views_per_shape: usize,
    pub image_size: usize,
    pub seed: u64,
    pub grid_resolution: usize,
    pub grid_half_extent: f64,
    pub families: Vec<ShapeFamily>,
    /// Raw pose draws: rotation ~ N(rotation_mean, rotation_std), and so on;
    /// displacement is N(0, position_std) per axis.
    pub rotation_mean: f64,
    pub rotation_std: f64,
    pub elevation_mean: f64,
    pub elevation_std: f64,
    pub scale_mean: f64,
    pub scale_std: f64,
    pub position_std: f64,
    /// Per-instance semi-axes are uniform in this range.
    pub semi_axis_lo: f64,
    pub semi_axis_hi: f64,
    /// Superellipsoid exponent range.
    pub exponent_lo: f64,
    pub exponent_hi: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            shapes: 10,
            views_per_shape: 24,
            image_size: 64,
            seed: 0,
            grid_resolution: 32,
            grid_half_extent: 1.0,
            families: vec![ShapeFamily::Ellipsoid, ShapeFamily::Box, ShapeFamily::Superellipsoid],
            rotation_mean: std::f64::consts::PI,
            rotation_std: 2.0 * std::f64::consts::PI / 5.0,
            elevation_mean: 5.0 * std::f64::consts::PI / 6.0,
            elevation_std: std::f64::consts::PI / 6.0,
            scale_mean: 1.2,
            scale_std: 0.2,
            position_std: 0.2,
            semi_axis_lo: 0.35,
            semi_axis_hi: 0.8,
            exponent_lo: 3.0,
            exponent_hi: 6.0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shapes == 0 || self.views_per_shape == 0 {
            return Err(Error::BadConfig("shape and view counts must be positive".into()));
        }
        if self.families.is_empty() {
            return Err(Error::BadConfig("at least one shape family is required".into()));
        }
        let stds = [self.rotation_std, self.elevation_std, self.scale_std, self.position_std];
        if stds.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::BadConfig("distribution sigma must be non-negative".into()));
        }
        if !(0.0 < self.semi_axis_lo && self.semi_axis_lo < self.semi_axis_hi) {
            return Err(Error::BadConfig("semi-axis range must be ordered and positive".into()));
        }
        if !(0.0 < self.exponent_lo && self.exponent_lo < self.exponent_hi) {
            return Err(Error::BadConfig("exponent range must be ordered and positive".into()));
        }
        if self.grid_resolution == 0 || !(self.grid_half_extent > 0.0) {
            return Err(Error::BadConfig("grid must have positive resolution and extent".into()));
        }
        if self.semi_axis_hi > self.grid_half_extent {
            return Err(Error::BadConfig("semi-axes must fit inside the grid extent".into()));
        }
        Ok(())
    }
}

/// Raw pose draws for one view, in sampling units (no validity mapping).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CameraRecord {
    pub theta: f64,
    pub phi: f64,
    pub k: f64,
    pub d: [f64; 3],
}

impl CameraRecord {
    /// The concrete pose these draws produce.
    pub fn to_camera(self, ccfg: &CameraConfig) -> Camera6D {
        Camera6D::new(self.theta, self.phi, self.k, self.d, ccfg)
    }
}

/// One image pair with its provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetRecord {
    /// Paths relative to the manifest's directory.
    pub image: String,
    pub mask: String,
    pub shape_id: usize,
    pub camera: CameraRecord,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub config: DataConfig,
    pub shapes: Vec<ShapeInstance>,
    pub records: Vec<DatasetRecord>,
}

/// Deterministic per-shape instance parameters.
pub fn shape_instance(cfg: &DataConfig, shape_id: usize) -> ShapeInstance {
    let mut rng = derive_rng(cfg.seed, shape_id as u64, PURPOSE_INSTANCE);
    let family = cfg.families[rng.gen_range(0..cfg.families.len())];
    let mut semi_axes = [0.0; 3];
    for ax in &mut semi_axes {
        *ax = rng.gen_range(cfg.semi_axis_lo..cfg.semi_axis_hi);
    }
    let exponent = rng.gen_range(cfg.exponent_lo..cfg.exponent_hi);
    ShapeInstance { family, semi_axes, exponent }
}

/// Deterministic raw pose draws for one record index.
pub fn draw_pose(cfg: &DataConfig, record_index: u64) -> CameraRecord {
    let mut rng = derive_rng(cfg.seed, record_index, PURPOSE_POSE);
    let theta = gaussian(&mut rng, cfg.rotation_mean, cfg.rotation_std);
    let phi = gaussian(&mut rng, cfg.elevation_mean, cfg.elevation_std);
    let k = gaussian(&mut rng, cfg.scale_mean, cfg.scale_std);
    let mut d = [0.0; 3];
    for axis in &mut d {
        *axis = gaussian(&mut rng, 0.0, cfg.position_std);
    }
    CameraRecord { theta, phi, k, d }
}

/// Extract the instance's surface on the configured grid, with
/// position-keyed vertex colors so views are texture-consistent.
pub fn shape_mesh(inst: &ShapeInstance, res: usize, half_extent: f64) -> Result<TriMesh> {
    let grid = TetGrid::new(res, half_extent)?;
    let tape = crate::autodiff::Tape::new();
    let sdf = tape.constant(&grid.eval_field(|p| analytic_sdf(inst, p)));
    let n = grid.vertex_count();
    let scale = 0.5 / half_extent;
    let mut colors = Vec::with_capacity(n * 3);
    for i in 0..n {
        let p = &grid.verts().data()[i * 3..i * 3 + 3];
        for axis in 0..3 {
            colors.push(0.5 + scale * p[axis]);
        }
    }
    let colors = tape.constant(&Tensor::new(vec![n, 3], colors)?);
    let ex = extract_surface(&tape, &grid, &sdf, None, Some(&colors), &ExtractOpts::default())?;
    Ok(ex.mesh.to_trimesh())
}

fn record_paths(index: usize) -> (String, String) {
    (format!("images/{index:05}.png"), format!("masks/{index:05}.png"))
}

/// Build the whole dataset under `out_dir`: PNG pairs plus `manifest.json`.
/// Fully deterministic in the config seed — rerunning produces byte-identical
/// files.
pub fn generate_dataset(
    cfg: &DataConfig,
    ccfg: &CameraConfig,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    let rcfg = RenderConfig { image_size: cfg.image_size, ..RenderConfig::default() };
    rcfg.validate()?;
    fs::create_dir_all(out_dir.join("images"))?;
    fs::create_dir_all(out_dir.join("masks"))?;

    let mut shapes = Vec::with_capacity(cfg.shapes);
    let mut records = Vec::with_capacity(cfg.shapes * cfg.views_per_shape);
    for shape_id in 0..cfg.shapes {
        let inst = shape_instance(cfg, shape_id);
        let mesh = shape_mesh(&inst, cfg.grid_resolution, cfg.grid_half_extent)?;
        for view in 0..cfg.views_per_shape {
            let index = shape_id * cfg.views_per_shape + view;
            let pose = draw_pose(cfg, index as u64);
            let pair = render_image(&mesh, &pose.to_camera(ccfg), &rcfg, ccfg)?;
            let (image, mask) = record_paths(index);
            write_png_rgb(&out_dir.join(&image), &pair.color)?;
            write_png_gray(&out_dir.join(&mask), &pair.mask)?;
            records.push(DatasetRecord { image, mask, shape_id, camera: pose });
        }
        shapes.push(inst);
    }

    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        config: cfg.clone(),
        shapes,
        records,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(out_dir.join(MANIFEST_FILE), json)?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::BadInput(format!(
            "manifest schema version {} (this build reads {MANIFEST_SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    if manifest.shapes.len() != manifest.config.shapes
        || manifest.records.len() != manifest.config.shapes * manifest.config.views_per_shape
    {
        return Err(Error::BadInput("manifest record count does not match its config".into()));
    }
    Ok(manifest)
}

/// Center-crop augmentation: a window of side `source/scale` centered at the
/// image center plus `translation` (pixels), clamped inside the source, then
/// resized back to the source resolution. The mask is transformed
/// identically. `scale` must be at least 1 — a larger-than-source window
/// cannot be clamped inside the image.
pub fn augment_2d(
    color: &Tensor,
    mask: &Tensor,
    scale: f64,
    translation: [f64; 2],
) -> Result<(Tensor, Tensor)> {
    let cs = color.shape();
    let ms = mask.shape();
    if cs.len() != 3 || cs[2] != 3 || cs[0] != cs[1] {
        return Err(Error::BadInput(format!("augment expects a square [H, W, 3] image, got {cs:?}")));
    }
    if ms != [cs[0], cs[1]] {
        return Err(Error::ShapeMismatch {
            context: "augment mask".into(),
            left: ms.to_vec(),
            right: vec![cs[0], cs[1]],
        });
    }
    if !(scale >= 1.0) {
        return Err(Error::BadInput(format!(
            "crop scale must be at least 1 so the window fits inside the source, got {scale}"
        )));
    }
    let n = cs[0];
    let side = n as f64;
    let crop = side / scale;
    let half = crop / 2.0;
    let cx = (side / 2.0 + translation[0]).clamp(half, side - half);
    let cy = (side / 2.0 + translation[1]).clamp(half, side - half);
    let (x0, y0) = (cx - half, cy - half);

    let sample = |data: &[f64], ch: usize, r: usize, c: usize, k: usize| -> f64 {
        let y = (y0 + (r as f64 + 0.5) * crop / side - 0.5).clamp(0.0, side - 1.0);
        let x = (x0 + (c as f64 + 0.5) * crop / side - 0.5).clamp(0.0, side - 1.0);
        let (r0, c0) = (y.floor() as usize, x.floor() as usize);
        let (r1, c1) = ((r0 + 1).min(n - 1), (c0 + 1).min(n - 1));
        let (ty, tx) = (y - r0 as f64, x - c0 as f64);
        let at = |rr: usize, cc: usize| data[(rr * n + cc) * ch + k];
        let top = at(r0, c0) * (1.0 - tx) + at(r0, c1) * tx;
        let bot = at(r1, c0) * (1.0 - tx) + at(r1, c1) * tx;
        top * (1.0 - ty) + bot * ty
    };

    let mut out_color = Vec::with_capacity(n * n * 3);
    let mut out_mask = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            for k in 0..3 {
                out_color.push(sample(color.data(), 3, r, c, k));
            }
            out_mask.push(sample(mask.data(), 1, r, c, 0));
        }
    }
    Ok((Tensor::new(vec![n, n, 3], out_color)?, Tensor::new(vec![n, n], out_mask)?))
}

/// Record indices per split. Assignment is keyed by shape id — 70/10/20 by
/// ascending id — so views of one shape never straddle splits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_records(manifest: &DatasetManifest) -> SplitIndices {
    let n = manifest.config.shapes;
    let t1 = n * 7 / 10;
    let t2 = n * 8 / 10;
    let mut split = SplitIndices { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for (i, rec) in manifest.records.iter().enumerate() {
        if rec.shape_id < t1 {
            split.train.push(i);
        } else if rec.shape_id < t2 {
            split.val.push(i);
        } else {
            split.test.push(i);
        }
    }
    split
}

/// A loaded dataset. The trainer consumes the split pair lists, which carry
/// no pose information; ground-truth cameras stay behind in the manifest
/// for evaluation tooling.
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub train: Vec<RealPair>,
    pub val: Vec<RealPair>,
    pub test: Vec<RealPair>,
}

fn load_pair(dir: &Path, record: &DatasetRecord, image_size: usize) -> Result<RealPair> {
    let color = read_png_rgb(&dir.join(&record.image))?;
    let mask = read_png_gray(&dir.join(&record.mask))?;
    let p = image_size * image_size;
    if color.shape() != [image_size, image_size, 3] || mask.shape() != [image_size, image_size] {
        return Err(Error::BadInput(format!(
            "record {} image size differs from the manifest config",
            record.image
        )));
    }
    Ok(RealPair { color: color.reshaped(vec![p, 3])?, mask: mask.reshaped(vec![p, 1])? })
}

/// Read every image pair referenced by a manifest into split order.
pub fn load_dataset(manifest_path: &Path) -> Result<LoadedDataset> {
    let manifest = read_manifest(manifest_path)?;
    let dir: PathBuf = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let split = split_records(&manifest);
    let size = manifest.config.image_size;
    let load_all = |ids: &[usize]| -> Result<Vec<RealPair>> {
        ids.iter().map(|&i| load_pair(&dir, &manifest.records[i], size)).collect()
    };
    let train = load_all(&split.train)?;
    let val = load_all(&split.val)?;
    let test = load_all(&split.test)?;
    Ok(LoadedDataset { manifest, train, val, test })
}

/// Seeded epoch order over `count` examples, chunked into batches; the last
/// batch is partial when the count is not a multiple.
pub fn epoch_batches(count: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(&mut derive_rng(seed, epoch, PURPOSE_SHUFFLE));
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
