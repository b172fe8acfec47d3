//! Neural components sized for a single CPU: latent mapping networks, a
//! coordinate-field generator for shape and texture, two small image
//! discriminators, and the named-tensor checkpoint format.
//!
//! All parameters live in a [`ParamSet`] registry of named tensors. Each
//! training iteration instantiates the whole set on a fresh tape with
//! [`ParamSet::vars`]; network structs hold indices into that registry, so
//! forward passes borrow the instantiated `Var`s and the optimizer updates
//! the plain tensors in place. Freezing a block is a caller decision —
//! select parameter ids by name prefix and leave them out of the gradient
//! request.
//!
//! The field generator queries every grid vertex once: position goes
//! through a sinusoidal positional encoding, gets concatenated with the
//! conditioning latent, and a small dense network produces the signed
//! distance, a raw deformation (bounded later, at extraction), and an rgb
//! color. The signed-distance head starts near an analytic sphere so the
//! very first extraction already yields a valid watertight surface.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat, Tape, Var};
use crate::error::{Error, Result};
use crate::seeding::gaussian;
use crate::tensor::Tensor;
use crate::tetgrid::TetGrid;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Dimension of each Gaussian input z1/z2/z3.
    pub z_dim: usize,
    /// Dimension of each mapped latent w1/w2/w3.
    pub w_dim: usize,
    pub mapping_hidden: usize,
    pub mapping_layers: usize,
    pub field_hidden: usize,
    pub field_layers: usize,
    /// Sinusoidal frequency bands in the positional encoding.
    pub pos_bands: usize,
    /// Channel widths of the discriminator downsampling stages.
    pub disc_channels: Vec<usize>,
    pub disc_hidden: usize,
    /// Initial signed-distance sphere radius as a fraction of the grid
    /// half-extent.
    pub sphere_radius: f64,
    /// Scale of the geometry head's initial weights; small keeps the
    /// starting surface near the sphere.
    pub geo_head_scale: f64,
    /// Scale of the camera head's initial weights; small keeps the starting
    /// pose distribution near its configured initialization.
    pub camera_head_scale: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            z_dim: 16,
            w_dim: 16,
            mapping_hidden: 64,
            mapping_layers: 2,
            field_hidden: 128,
            field_layers: 4,
            pos_bands: 4,
            disc_channels: vec![16, 32, 64],
            disc_hidden: 64,
            sphere_radius: 0.6,
            geo_head_scale: 1e-2,
            camera_head_scale: 1e-3,
        }
    }
}

/// Registry of named parameter tensors. The single source of truth for
/// values; tapes get per-iteration instantiations.
#[derive(Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> usize {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.values.push(value);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn value(&self, id: usize) -> &Tensor {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.values[id]
    }

    /// Ids of all parameters whose name starts with `prefix`.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<usize> {
        (0..self.names.len()).filter(|&i| self.names[i].starts_with(prefix)).collect()
    }

    /// Instantiate every parameter as a differentiable variable on `tape`,
    /// indexed by parameter id.
    pub fn vars(&self, tape: &Tape) -> Vec<Var> {
        self.values.iter().map(|t| tape.var(t)).collect()
    }

    /// Save all parameters with the given iteration stamp.
    pub fn save(&self, path: &Path, iteration: u64) -> Result<()> {
        let items: Vec<(String, Tensor)> = self
            .names
            .iter()
            .cloned()
            .zip(self.values.iter().cloned())
            .collect();
        write_named_tensors(path, iteration, &items)
    }

    /// Load a checkpoint written by [`ParamSet::save`] into this set.
    /// The file must hold exactly the registered names with matching
    /// shapes; returns the stored iteration stamp.
    pub fn load(&mut self, path: &Path) -> Result<u64> {
        let (iteration, items) = read_named_tensors(path)?;
        if items.len() != self.names.len() {
            return Err(Error::BadCheckpoint(format!(
                "expected {} tensors, found {}",
                self.names.len(),
                items.len()
            )));
        }
        for (name, tensor) in items {
            let id = self
                .names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::BadCheckpoint(format!("unknown tensor {name}")))?;
            if tensor.shape() != self.values[id].shape() {
                return Err(Error::BadCheckpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    tensor.shape(),
                    self.values[id].shape()
                )));
            }
            self.values[id] = tensor;
        }
        Ok(iteration)
    }
}

/// One dense layer: ids of its weight `[in, out]` and bias `[out]` tensors.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: usize,
    pub b: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    /// Register a dense layer with N(0, scale²/in_dim) weights, zero bias.
    fn new(
        ps: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Dense {
        let std = scale / (in_dim as f64).sqrt();
        let data: Vec<f64> = (0..in_dim * out_dim).map(|_| gaussian(rng, 0.0, std)).collect();
        let w = ps.add(&format!("{name}.w"), Tensor::new(vec![in_dim, out_dim], data).unwrap());
        let b = ps.add(&format!("{name}.b"), Tensor::zeros(vec![out_dim]));
        Dense { w, b, in_dim, out_dim }
    }

    /// `x` is `[N, in]`; returns `[N, out]`.
    pub fn forward(&self, params: &[Var], x: &Var) -> Var {
        &x.matmul(&params[self.w]) + &params[self.b].reshape(vec![1, self.out_dim])
    }
}

/// Small feed-forward latent mapper: z → tanh hidden layers → w.
#[derive(Debug, Clone)]
pub struct MappingNet {
    layers: Vec<Dense>,
}

impl MappingNet {
    fn new(ps: &mut ParamSet, name: &str, cfg: &NetConfig, rng: &mut impl Rng) -> MappingNet {
        let mut dims = vec![cfg.z_dim];
        dims.extend(std::iter::repeat(cfg.mapping_hidden).take(cfg.mapping_layers));
        dims.push(cfg.w_dim);
        let layers = (0..dims.len() - 1)
            .map(|i| Dense::new(ps, &format!("{name}.{i}"), dims[i], dims[i + 1], 1.0, rng))
            .collect();
        MappingNet { layers }
    }
}

/// Map a Gaussian latent `z` (`[z_dim]`) to a conditioning vector `w`
/// (`[w_dim]`). Deterministic and differentiable.
pub fn map_latent(net: &MappingNet, params: &[Var], z: &Var) -> Var {
    assert_eq!(z.shape(), vec![net.layers[0].in_dim], "latent dimension");
    let mut x = z.reshape(vec![1, net.layers[0].in_dim]);
    for (i, layer) in net.layers.iter().enumerate() {
        x = layer.forward(params, &x);
        if i + 1 < net.layers.len() {
            x = x.tanh();
        }
    }
    let out = net.layers.last().unwrap().out_dim;
    x.reshape(vec![out])
}

/// Coordinate network: encoded position ⊕ latent → tanh trunk → linear head.
#[derive(Debug, Clone)]
struct FieldNet {
    layers: Vec<Dense>,
    head: Dense,
}

impl FieldNet {
    fn new(
        ps: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        head_scale: f64,
        cfg: &NetConfig,
        rng: &mut impl Rng,
    ) -> FieldNet {
        let mut dims = vec![in_dim];
        dims.extend(std::iter::repeat(cfg.field_hidden).take(cfg.field_layers));
        let layers = (0..dims.len() - 1)
            .map(|i| Dense::new(ps, &format!("{name}.{i}"), dims[i], dims[i + 1], 1.0, rng))
            .collect();
        let head = Dense::new(ps, &format!("{name}.head"), cfg.field_hidden, out_dim, head_scale, rng);
        FieldNet { layers, head }
    }

    fn forward(&self, params: &[Var], x: &Var) -> Var {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(params, &h).tanh();
        }
        self.head.forward(params, &h)
    }
}

/// Sinusoidal positional encoding of the grid vertices:
/// `[x, y, z, sin(2^j π p), cos(2^j π p) for j < bands]`, a constant
/// `[N, 3 + 6·bands]` tensor.
pub fn positional_encoding(tape: &Tape, grid: &TetGrid, bands: usize) -> Var {
    let n = grid.vertex_count();
    let dim = 3 + 6 * bands;
    let mut data = Vec::with_capacity(n * dim);
    for i in 0..n {
        let p = grid.verts().row3(i);
        data.extend_from_slice(&p);
        for j in 0..bands {
            let f = std::f64::consts::PI * (1 << j) as f64;
            for d in 0..3 {
                data.push((f * p[d]).sin());
            }
            for d in 0..3 {
                data.push((f * p[d]).cos());
            }
        }
    }
    tape.constant(&Tensor::new(vec![n, dim], data).expect("encoding size"))
}

/// Per-vertex generator outputs over a grid: signed distance `[N]`, raw
/// deformation `[N, 3]` (bounded later, at extraction), colors `[N, 3]`
/// in `[0, 1]`.
pub struct FieldSample {
    pub sdf: Var,
    pub deform: Var,
    pub colors: Var,
}

/// The full generator: three latent mappers, the camera head, and the two
/// coordinate field networks.
pub struct Generator {
    pub map_shape: MappingNet,
    pub map_tex: MappingNet,
    pub map_cam: MappingNet,
    pub cam_head: Dense,
    geo: FieldNet,
    tex: FieldNet,
    pos_bands: usize,
    sphere_radius: f64,
}

impl Generator {
    /// Register all generator parameters. Shape-stack parameters get the
    /// `g.` name prefix; the camera branch (its mapper and head) gets
    /// `cam.`, so training phases can freeze either side by prefix.
    pub fn new(ps: &mut ParamSet, cfg: &NetConfig, rng: &mut impl Rng) -> Generator {
        let map_shape = MappingNet::new(ps, "g.map_shape", cfg, rng);
        let map_tex = MappingNet::new(ps, "g.map_tex", cfg, rng);
        let map_cam = MappingNet::new(ps, "cam.map", cfg, rng);
        let cam_head = Dense::new(ps, "cam.head", cfg.w_dim, 12, cfg.camera_head_scale, rng);
        let in_dim = 3 + 6 * cfg.pos_bands + cfg.w_dim;
        let geo = FieldNet::new(ps, "g.geo", in_dim, 4, cfg.geo_head_scale, cfg, rng);
        let tex = FieldNet::new(ps, "g.tex", in_dim, 3, 1.0, cfg, rng);
        Generator {
            map_shape,
            map_tex,
            map_cam,
            cam_head,
            geo,
            tex,
            pos_bands: cfg.pos_bands,
            sphere_radius: cfg.sphere_radius,
        }
    }

    /// Raw 12-vector for the camera pose distribution, from the camera
    /// latent `w3`. Its decoding lives with the camera sampler.
    pub fn camera_raw(&self, params: &[Var], w3: &Var) -> Var {
        self.cam_head.forward(params, &w3.reshape(vec![1, self.cam_head.in_dim])).reshape(vec![12])
    }

    /// Query the field networks at every grid vertex. The signed distance
    /// starts near a centered sphere of radius `sphere_radius · half_extent`
    /// by construction: the head only adds a perturbation to that base.
    pub fn generate_fields(
        &self,
        params: &[Var],
        w1: &Var,
        w2: &Var,
        grid: &TetGrid,
    ) -> Result<FieldSample> {
        let tape = w1.tape();
        let n = grid.vertex_count();
        let enc = positional_encoding(tape, grid, self.pos_bands);
        let wd = w1.len();
        let cond = |w: &Var| w.reshape(vec![1, wd]).broadcast_to(&[n, wd]);
        let geo_in = concat(&[&enc, &cond(w1)], 1);
        let tex_in = concat(&[&enc, &cond(w2)], 1);

        let r = self.sphere_radius * grid.half_extent();
        let base = tape.constant(&grid.eval_field(|p| {
            (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - r
        }));
        let geo_out = self.geo.forward(params, &geo_in);
        let sdf = &geo_out.slice(1, 0, 1).reshape(vec![n]) + &base;
        let deform = geo_out.slice(1, 1, 3);
        let colors = self.tex.forward(params, &tex_in).sigmoid();
        tape.check_finite()?;
        Ok(FieldSample { sdf, deform, colors })
    }
}

/// Image discriminator: per-pixel channel mixes with 2×2 average pooling,
/// then dense layers to a scalar logit. Input pixels are `[0, 1]`, shifted
/// to `[-1, 1]` inside.
pub struct Discriminator {
    stages: Vec<Dense>,
    dense: Dense,
    logit: Dense,
    pub image_size: usize,
    pub channels: usize,
}

impl Discriminator {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        image_size: usize,
        channels: usize,
        cfg: &NetConfig,
        rng: &mut impl Rng,
    ) -> Result<Discriminator> {
        let k = cfg.disc_channels.len();
        if image_size % (1 << k) != 0 {
            return Err(Error::BadConfig(format!(
                "discriminator input {image_size} not divisible by 2^{k}"
            )));
        }
        let mut stages = Vec::with_capacity(k);
        let mut c_in = channels;
        for (i, &c_out) in cfg.disc_channels.iter().enumerate() {
            stages.push(Dense::new(ps, &format!("{name}.stage{i}"), c_in, c_out, 1.0, rng));
            c_in = c_out;
        }
        let side = image_size >> k;
        let flat = side * side * c_in;
        let dense = Dense::new(ps, &format!("{name}.dense"), flat, cfg.disc_hidden, 1.0, rng);
        let logit = Dense::new(ps, &format!("{name}.logit"), cfg.disc_hidden, 1, 1.0, rng);
        Ok(Discriminator { stages, dense, logit, image_size, channels })
    }
}

/// Row gather ids that stack each output pixel's four children.
fn pool_ids(width: usize) -> Vec<usize> {
    let half = width / 2;
    let mut ids = Vec::with_capacity(half * half * 4);
    for r in 0..half {
        for c in 0..half {
            ids.push((2 * r) * width + 2 * c);
            ids.push((2 * r) * width + 2 * c + 1);
            ids.push((2 * r + 1) * width + 2 * c);
            ids.push((2 * r + 1) * width + 2 * c + 1);
        }
    }
    ids
}

fn avg_pool(x: &Var, width: usize, channels: usize) -> Var {
    let half = width / 2;
    &x.gather(pool_ids(width))
        .reshape(vec![half * half, 4, channels])
        .sum_axes(&[1], false)
        * 0.25
}

/// Scalar logit for an image given as `[H·W, C]` rows. Differentiable in
/// both the parameters and the image (the image gradient feeds the
/// gradient penalty and the generator update).
pub fn discriminate(d: &Discriminator, params: &[Var], image: &Var) -> Result<Var> {
    let p = d.image_size * d.image_size;
    if image.shape() != vec![p, d.channels] {
        return Err(Error::ShapeMismatch {
            context: "discriminator input".into(),
            left: image.shape(),
            right: vec![p, d.channels],
        });
    }
    let mut x = &(image * 2.0) - 1.0;
    let mut width = d.image_size;
    for stage in &d.stages {
        x = avg_pool(&stage.forward(params, &x).tanh(), width, stage.out_dim);
        width /= 2;
    }
    let flat = width * width * d.stages.last().unwrap().out_dim;
    let h = d.dense.forward(params, &x.reshape(vec![1, flat])).tanh();
    Ok(d.logit.forward(params, &h).reshape(vec![]))
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"WMCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Write named tensors with a versioned header and an iteration stamp.
pub fn write_named_tensors(path: &Path, iteration: u64, items: &[(String, Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&iteration.to_le_bytes())?;
    w.write_all(&(items.len() as u32).to_le_bytes())?;
    for (name, tensor) in items {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        let shape = tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &dim in shape {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Read a file written by [`write_named_tensors`]. Rejects bad magic,
/// unknown versions, and malformed records.
pub fn read_named_tensors(path: &Path) -> Result<(u64, Vec<(String, Tensor)>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::BadCheckpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::BadCheckpoint(format!("unsupported version {version}")));
    }
    let iteration = read_u64(&mut r)?;
    let count = read_u32(&mut r)? as usize;
    let mut items = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 4096 {
            return Err(Error::BadCheckpoint("oversized tensor name".into()));
        }
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::BadCheckpoint("tensor name is not utf-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        if rank > 8 {
            return Err(Error::BadCheckpoint(format!("tensor {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let len: usize = shape.iter().product();
        if len > (1 << 30) {
            return Err(Error::BadCheckpoint(format!("tensor {name} is implausibly large")));
        }
        let mut data = Vec::with_capacity(len);
        let mut buf = [0u8; 8];
        for _ in 0..len {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        items.push((name, Tensor::new(shape, data)?));
    }
    Ok((iteration, items))
}
