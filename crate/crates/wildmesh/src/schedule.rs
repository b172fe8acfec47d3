//! The four-phase training state machine and the per-iteration optimizer.
//!
//! Training alternates one discriminator update and one generator/camera
//! update per iteration. Which blocks move, where cameras come from, and
//! which loss terms are active all follow a fixed schedule over the run:
//!
//! | phase | span            | generator | camera sampler            | compensation | align |
//! |-------|-----------------|-----------|---------------------------|--------------|-------|
//! | 1     | `[0, b0)`       | trains    | fixed uniform             | off          | off   |
//! | 2     | `[b0, b1)`      | frozen    | trains                    | on           | off   |
//! | 3     | `[b1, b2)`      | trains    | trains                    | on           | on    |
//! | 4     | `[b2, 1)`       | trains    | frozen snapshot           | off          | off   |
//!
//! with boundaries expressed as fractions of the total iteration count
//! (defaults `[0.2, 0.3, 0.4]`). Entering phase 4 freezes the learned pose
//! distribution: the decoded per-parameter statistics are pooled over a
//! latent probe set once, and every later camera is drawn from that
//! snapshot. Every random draw is keyed by `(seed, iteration, purpose)`, so
//! a run is bit-reproducible and a resumed run continues the same stream.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{stack_scalars, Tape, Var};
use crate::camera::{
    decode_distribution, sample_camera, sample_fixed, CameraConfig, CameraPoseDistribution,
    CameraVars, FixedSamplerConfig,
};
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_losses, align_loss, discriminator_total, generator_total, r1_penalty,
    sdf_reg_loss, LossReport, SDF_CAP,
};
use crate::nets::{
    discriminate, map_latent, read_named_tensors, write_named_tensors, Discriminator, Generator,
    NetConfig, ParamSet,
};
use crate::render::{render_fields, RenderConfig, RenderVars};
use crate::seeding::{derive_rng, standard_normal};
use crate::tensor::Tensor;
use crate::tetgrid::{extract_surface, ExtractOpts, ShapeStats, TetGrid, TriMesh};

const PURPOSE_INIT: &str = "weight-init";
const PURPOSE_FAKES_D: &str = "fakes-for-d";
const PURPOSE_FAKES_G: &str = "fakes-for-g";
const PURPOSE_BATCH: &str = "batch-select";
const PURPOSE_SNAPSHOT: &str = "camera-snapshot";
const PURPOSE_EVAL: &str = "eval-sample";

/// Training-loop settings. Everything is overridable from a config file;
/// the defaults are the reference values.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_iterations: u64,
    /// Phase boundaries as fractions of `total_iterations`, strictly
    /// increasing inside (0, 1).
    pub phase_boundaries: [f64; 3],
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplier on `learning_rate` for camera-branch parameters only.
    pub camera_lr_mult: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub r1_gamma: f64,
    /// Gradient penalty is applied only when `iteration % r1_interval == 0`.
    pub r1_interval: u64,
    /// Weight of the signed-distance sign-agreement regularizer.
    pub mu1: f64,
    /// Weight of the align loss.
    pub mu2: f64,
    pub seed: u64,
    /// Tetrahedral grid resolution used during training.
    pub grid_resolution: usize,
    pub grid_half_extent: f64,
    /// Samples whose surface spans fewer tetrahedra than this count as
    /// collapsed. A handful (rather than 1) keeps the scale statistic's
    /// gradient well conditioned on barely-there surfaces.
    pub min_surface_tets: usize,
    /// Target spread constant the align loss and compensation pull toward.
    pub c0: f64,
    /// Latent probes pooled into the phase-4 camera snapshot.
    pub snapshot_probes: usize,
    /// Extra checkpoints every N iterations (0 = phase boundaries only).
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_iterations: 2000,
            phase_boundaries: [0.2, 0.3, 0.4],
            batch_size: 32,
            learning_rate: 2e-4,
            camera_lr_mult: 1.0,
            adam_beta1: 0.0,
            adam_beta2: 0.99,
            adam_eps: 1e-8,
            r1_gamma: 80.0,
            r1_interval: 16,
            mu1: 0.01,
            mu2: 0.1,
            seed: 0,
            grid_resolution: 8,
            grid_half_extent: 1.0,
            min_surface_tets: 4,
            c0: 1.0,
            snapshot_probes: 1024,
            checkpoint_interval: 500,
        }
    }
}

fn check_boundaries(b: &[f64; 3]) -> Result<()> {
    let ok = 0.0 < b[0] && b[0] < b[1] && b[1] < b[2] && b[2] < 1.0;
    if !ok {
        return Err(Error::BadConfig(format!(
            "phase boundaries must be strictly increasing inside (0, 1), got {b:?}"
        )));
    }
    Ok(())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_boundaries(&self.phase_boundaries)?;
        if self.total_iterations == 0 {
            return Err(Error::BadConfig("total_iterations must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::BadConfig("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.camera_lr_mult > 0.0) {
            return Err(Error::BadConfig("learning rates must be positive".into()));
        }
        let betas_ok = (0.0..1.0).contains(&self.adam_beta1)
            && (0.0..1.0).contains(&self.adam_beta2)
            && self.adam_eps > 0.0;
        if !betas_ok {
            return Err(Error::BadConfig("Adam betas must lie in [0, 1) with eps > 0".into()));
        }
        if self.r1_interval == 0 {
            return Err(Error::BadConfig("r1_interval must be positive".into()));
        }
        if self.grid_resolution == 0 || !(self.grid_half_extent > 0.0) {
            return Err(Error::BadConfig("grid must have positive resolution and extent".into()));
        }
        if !(self.c0 > 0.0) {
            return Err(Error::BadConfig("c0 must be positive".into()));
        }
        if self.snapshot_probes == 0 {
            return Err(Error::BadConfig("snapshot_probes must be positive".into()));
        }
        Ok(())
    }
}

/// What is active during one phase. The flags are a pure function of the
/// phase id; see the module table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhaseFlags {
    pub phase: u8,
    pub generator_trainable: bool,
    pub camera_trainable: bool,
    pub use_fixed_uniform_sampler: bool,
    pub compensation_active: bool,
    pub align_loss_active: bool,
    pub camera_distribution_frozen: bool,
}

impl PhaseFlags {
    pub fn for_phase(phase: u8) -> PhaseFlags {
        match phase {
            1 => PhaseFlags {
                phase: 1,
                generator_trainable: true,
                camera_trainable: false,
                use_fixed_uniform_sampler: true,
                compensation_active: false,
                align_loss_active: false,
                camera_distribution_frozen: false,
            },
            2 => PhaseFlags {
                phase: 2,
                generator_trainable: false,
                camera_trainable: true,
                use_fixed_uniform_sampler: false,
                compensation_active: true,
                align_loss_active: false,
                camera_distribution_frozen: false,
            },
            3 => PhaseFlags {
                phase: 3,
                generator_trainable: true,
                camera_trainable: true,
                use_fixed_uniform_sampler: false,
                compensation_active: true,
                align_loss_active: true,
                camera_distribution_frozen: false,
            },
            4 => PhaseFlags {
                phase: 4,
                generator_trainable: true,
                camera_trainable: false,
                use_fixed_uniform_sampler: false,
                compensation_active: false,
                align_loss_active: false,
                camera_distribution_frozen: true,
            },
            other => panic!("phase id out of range: {other}"),
        }
    }
}

/// Phase lookup for an iteration of a run. Boundaries are half-open: the
/// iteration exactly at a boundary fraction belongs to the later phase.
pub fn phase_of(iteration: u64, total: u64, boundaries: [f64; 3]) -> Result<PhaseFlags> {
    check_boundaries(&boundaries)?;
    if total == 0 || iteration >= total {
        return Err(Error::BadInput(format!(
            "iteration {iteration} outside a run of {total} iterations"
        )));
    }
    let frac = iteration as f64 / total as f64;
    let phase = if frac < boundaries[0] {
        1
    } else if frac < boundaries[1] {
        2
    } else if frac < boundaries[2] {
        3
    } else {
        4
    };
    Ok(PhaseFlags::for_phase(phase))
}

/// One real training example: a color image flattened to `[pixels, 3]` and
/// its silhouette as `[pixels, 1]`, row-major over a square image whose side
/// matches the render configuration.
#[derive(Debug, Clone)]
pub struct RealPair {
    pub color: Tensor,
    pub mask: Tensor,
}

/// Borrowed view of every configuration block a training step needs.
#[derive(Clone, Copy)]
pub struct StepContext<'a> {
    pub train: &'a TrainConfig,
    pub net: &'a NetConfig,
    pub render: &'a RenderConfig,
    pub camera: &'a CameraConfig,
    pub fixed: &'a FixedSamplerConfig,
}

/// Per-tensor Adam accumulators. `t` counts how many updates this tensor
/// has received, which differs across tensors because phases freeze blocks.
#[derive(Debug, Clone, PartialEq)]
struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Everything that evolves over a run: weights, optimizer accumulators, the
/// iteration counter, and (from phase 4 on) the frozen pose distribution.
pub struct TrainState {
    pub iteration: u64,
    pub params: ParamSet,
    pub generator: Generator,
    pub d_rgb: Discriminator,
    pub d_mask: Discriminator,
    pub grid: TetGrid,
    pub snapshot: Option<CameraPoseDistribution>,
    adam: Vec<AdamSlot>,
}

impl TrainState {
    /// Fresh state with seeded weight initialization.
    pub fn new(ctx: &StepContext) -> Result<TrainState> {
        ctx.train.validate()?;
        ctx.render.validate()?;
        let mut ps = ParamSet::new();
        let mut rng = derive_rng(ctx.train.seed, 0, PURPOSE_INIT);
        let generator = Generator::new(&mut ps, ctx.net, &mut rng);
        let d_rgb = Discriminator::new(&mut ps, "d_rgb", ctx.render.image_size, 3, ctx.net, &mut rng)?;
        let d_mask =
            Discriminator::new(&mut ps, "d_mask", ctx.render.image_size, 1, ctx.net, &mut rng)?;
        let grid = TetGrid::new(ctx.train.grid_resolution, ctx.train.grid_half_extent)?;
        let adam = (0..ps.len())
            .map(|id| {
                let n = ps.value(id).data().len();
                AdamSlot { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
            })
            .collect();
        Ok(TrainState {
            iteration: 0,
            params: ps,
            generator,
            d_rgb,
            d_mask,
            grid,
            snapshot: None,
            adam,
        })
    }
}

fn extract_opts(t: &TrainConfig) -> ExtractOpts {
    ExtractOpts { min_surface_tets: t.min_surface_tets, ..ExtractOpts::default() }
}

/// What one generated sample contributes to a step. A sample whose surface
/// collapses (or whose camera degenerates) keeps its field regularizer but
/// has nothing to render.
struct FakeSample {
    render: Option<(RenderVars, ShapeStats)>,
    reg: Var,
}

/// Draw latents, map them, query the fields, pick a camera per the phase,
/// and render. All randomness comes from `rng`; the caller controls the
/// stream.
fn generate_fake<R: Rng>(
    tape: &Tape,
    vars: &[Var],
    state: &TrainState,
    flags: PhaseFlags,
    ctx: &StepContext,
    rng: &mut R,
) -> Result<FakeSample> {
    let zdim = ctx.net.z_dim;
    let z1 = tape.cvec((0..zdim).map(|_| standard_normal(rng)).collect());
    let z2 = tape.cvec((0..zdim).map(|_| standard_normal(rng)).collect());
    let w1 = map_latent(&state.generator.map_shape, vars, &z1);
    let w2 = map_latent(&state.generator.map_tex, vars, &z2);
    let fields = state.generator.generate_fields(vars, &w1, &w2, &state.grid)?;
    let reg = sdf_reg_loss(tape, &state.grid, &fields.sdf, SDF_CAP);

    let cam: CameraVars = if flags.use_fixed_uniform_sampler {
        CameraVars::constant(tape, &sample_fixed(ctx.fixed, rng, ctx.camera))
    } else if flags.camera_distribution_frozen {
        let snap = state.snapshot.as_ref().ok_or_else(|| {
            Error::BadInput("stepping a frozen-distribution phase without a camera snapshot".into())
        })?;
        CameraVars::constant(tape, &snap.sample_rng(rng, ctx.camera))
    } else {
        let z3 = tape.cvec((0..zdim).map(|_| standard_normal(rng)).collect());
        let w3 = map_latent(&state.generator.map_cam, vars, &z3);
        let raw = state.generator.camera_raw(vars, &w3);
        let dist = decode_distribution(&raw, ctx.camera)?;
        let mut eps = [0.0; 6];
        for e in &mut eps {
            *e = standard_normal(rng);
        }
        sample_camera(&dist, eps, ctx.camera)
    };

    match render_fields(
        tape,
        &state.grid,
        &fields.sdf,
        &fields.deform,
        &fields.colors,
        &cam,
        flags.compensation_active,
        ctx.train.c0,
        &extract_opts(ctx.train),
        ctx.render,
        ctx.camera,
    ) {
        Ok(pair) => Ok(FakeSample { render: Some(pair), reg }),
        Err(
            Error::CollapsedShape { .. }
            | Error::DegenerateSpread { .. }
            | Error::DegenerateCamera(_),
        ) => Ok(FakeSample { render: None, reg }),
        Err(e) => Err(e),
    }
}

/// Value-only fake render for the discriminator update, which treats the
/// generator's output as a fixed sample. `None` marks a collapsed sample.
fn fake_pair_values<R: Rng>(
    state: &TrainState,
    flags: PhaseFlags,
    ctx: &StepContext,
    rng: &mut R,
) -> Result<Option<(Tensor, Tensor)>> {
    let tape = Tape::new();
    let vars = state.params.vars(&tape);
    let sample = generate_fake(&tape, &vars, state, flags, ctx, rng)?;
    tape.check_finite()?;
    match sample.render {
        Some((rv, _)) => {
            let p = rv.size * rv.size;
            let color = rv.color.value();
            let mask = rv.mask.value().reshaped(vec![p, 1]).expect("pixel count");
            Ok(Some((color, mask)))
        }
        None => Ok(None),
    }
}

/// Value-only draw of one generated shape for export and evaluation:
/// latents come from their own stream keyed by `(seed, index)`, fields are
/// evaluated on a throwaway tape, and the surface is extracted at the
/// training grid settings. The mesh is exactly what the generator produced
/// — no alignment is applied.
pub fn sample_mesh(
    state: &TrainState,
    ctx: &StepContext,
    seed: u64,
    index: u64,
) -> Result<TriMesh> {
    let tape = Tape::new();
    let vars = state.params.vars(&tape);
    let mut rng = derive_rng(seed, index, PURPOSE_EVAL);
    let zdim = ctx.net.z_dim;
    let z1 = tape.cvec((0..zdim).map(|_| standard_normal(&mut rng)).collect());
    let z2 = tape.cvec((0..zdim).map(|_| standard_normal(&mut rng)).collect());
    let w1 = map_latent(&state.generator.map_shape, &vars, &z1);
    let w2 = map_latent(&state.generator.map_tex, &vars, &z2);
    let fields = state.generator.generate_fields(&vars, &w1, &w2, &state.grid)?;
    let ex = extract_surface(
        &tape,
        &state.grid,
        &fields.sdf,
        Some(&fields.deform),
        Some(&fields.colors),
        &extract_opts(ctx.train),
    )?;
    Ok(ex.mesh.to_trimesh())
}

/// What an empty scene renders to: background color everywhere, zero
/// silhouette. Used as the discriminator-side stand-in for collapsed fakes.
fn background_pair(rcfg: &RenderConfig) -> (Tensor, Tensor) {
    let p = rcfg.image_size * rcfg.image_size;
    let mut color = Vec::with_capacity(p * 3);
    for _ in 0..p {
        color.extend_from_slice(&rcfg.background);
    }
    (
        Tensor::new(vec![p, 3], color).expect("background color"),
        Tensor::new(vec![p, 1], vec![0.0; p]).expect("background mask"),
    )
}

/// Mean over per-sample scalars where `None` marks a collapsed sample; each
/// collapsed slot contributes the batch maximum of the valid values as a
/// fixed (non-differentiable) penalty. Errors when nothing is valid.
fn mean_with_collapse_penalty(tape: &Tape, values: &[Option<Var>]) -> Result<Var> {
    let valid: Vec<&Var> = values.iter().flatten().collect();
    if valid.is_empty() {
        return Err(Error::BadInput("every sample in the batch collapsed".into()));
    }
    let max_v = valid.iter().map(|v| v.item()).fold(f64::NEG_INFINITY, f64::max);
    let penalty = tape.scalar(max_v);
    let refs: Vec<&Var> = values.iter().map(|v| v.as_ref().unwrap_or(&penalty)).collect();
    Ok(stack_scalars(&refs).mean_all())
}

fn mean_of(tape: &Tape, terms: &[Var]) -> Var {
    if terms.is_empty() {
        return tape.scalar(0.0);
    }
    let refs: Vec<&Var> = terms.iter().collect();
    stack_scalars(&refs).mean_all()
}

/// One Adam update of the listed parameter ids from the gradient of `loss`.
/// Camera-branch tensors use the camera learning-rate multiplier.
fn apply_adam(
    state: &mut TrainState,
    tape: &Tape,
    loss: &Var,
    vars: &[Var],
    ids: &[usize],
    tcfg: &TrainConfig,
) -> Result<()> {
    if ids.is_empty() {
        return Ok(());
    }
    let wrt: Vec<&Var> = ids.iter().map(|&id| &vars[id]).collect();
    let grads = tape.grad(loss, &wrt)?;
    tape.check_finite()?;
    let TrainState { params, adam, .. } = state;
    let (b1, b2) = (tcfg.adam_beta1, tcfg.adam_beta2);
    for (&id, grad) in ids.iter().zip(&grads) {
        let lr = if params.name(id).starts_with("cam.") {
            tcfg.learning_rate * tcfg.camera_lr_mult
        } else {
            tcfg.learning_rate
        };
        let g = grad.value();
        let slot = &mut adam[id];
        slot.t += 1;
        let bias1 = 1.0 - b1.powi(slot.t as i32);
        let bias2 = 1.0 - b2.powi(slot.t as i32);
        let data = params.value_mut(id).data_mut();
        for (i, &gi) in g.data().iter().enumerate() {
            slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * gi;
            slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * gi * gi;
            let mhat = slot.m[i] / bias1;
            let vhat = slot.v[i] / bias2;
            data[i] -= lr * mhat / (vhat.sqrt() + tcfg.adam_eps);
        }
    }
    Ok(())
}

/// Discriminator update: real batch against freshly drawn fake values, with
/// the lazy gradient penalty on its schedule. Returns the logged components
/// `(d_rgb, d_mask, r1_rgb, r1_mask)`.
fn discriminator_step(
    state: &mut TrainState,
    batch: &[RealPair],
    flags: PhaseFlags,
    ctx: &StepContext,
) -> Result<(f64, f64, f64, f64)> {
    let iteration = state.iteration;
    let mut rng = derive_rng(ctx.train.seed, iteration, PURPOSE_FAKES_D);
    let mut fake_pairs = Vec::with_capacity(batch.len());
    for _ in 0..batch.len() {
        let pair = fake_pair_values(state, flags, ctx, &mut rng)?
            .unwrap_or_else(|| background_pair(ctx.render));
        fake_pairs.push(pair);
    }

    let tape = Tape::new();
    let vars = state.params.vars(&tape);
    let p = ctx.render.image_size * ctx.render.image_size;
    let mut real_colors = Vec::with_capacity(batch.len());
    let mut real_masks = Vec::with_capacity(batch.len());
    for pair in batch {
        if pair.color.shape() != [p, 3] {
            return Err(Error::ShapeMismatch {
                context: "real color image".into(),
                left: pair.color.shape().to_vec(),
                right: vec![p, 3],
            });
        }
        if pair.mask.shape() != [p, 1] {
            return Err(Error::ShapeMismatch {
                context: "real mask image".into(),
                left: pair.mask.shape().to_vec(),
                right: vec![p, 1],
            });
        }
        real_colors.push(tape.var(&pair.color));
        real_masks.push(tape.var(&pair.mask));
    }

    let mut real_rgb = Vec::new();
    let mut real_mask_l = Vec::new();
    let mut fake_rgb = Vec::new();
    let mut fake_mask_l = Vec::new();
    for (rc, rm) in real_colors.iter().zip(&real_masks) {
        real_rgb.push(discriminate(&state.d_rgb, &vars, rc)?);
        real_mask_l.push(discriminate(&state.d_mask, &vars, rm)?);
    }
    for (fc, fm) in &fake_pairs {
        fake_rgb.push(discriminate(&state.d_rgb, &vars, &tape.constant(fc))?);
        fake_mask_l.push(discriminate(&state.d_mask, &vars, &tape.constant(fm))?);
    }
    let adv_rgb = adversarial_losses(&real_rgb, &fake_rgb)?;
    let adv_mask = adversarial_losses(&real_mask_l, &fake_mask_l)?;

    let lazy = iteration % ctx.train.r1_interval == 0;
    let r1 = if lazy {
        let rgb = r1_penalty(&tape, &real_colors, ctx.train.r1_gamma, |img| {
            discriminate(&state.d_rgb, &vars, img)
        })?;
        let mask = r1_penalty(&tape, &real_masks, ctx.train.r1_gamma, |img| {
            discriminate(&state.d_mask, &vars, img)
        })?;
        Some((rgb, mask))
    } else {
        None
    };
    let total = discriminator_total(&adv_rgb.d, &adv_mask.d, r1.as_ref().map(|(a, b)| (a, b)));
    tape.check_finite()?;

    let report = (
        adv_rgb.d.item(),
        adv_mask.d.item(),
        r1.as_ref().map_or(0.0, |(a, _)| a.item()),
        r1.as_ref().map_or(0.0, |(_, b)| b.item()),
    );
    let mut ids = state.params.ids_with_prefix("d_rgb.");
    ids.extend(state.params.ids_with_prefix("d_mask."));
    apply_adam(state, &tape, &total, &vars, &ids, ctx.train)?;
    Ok(report)
}

/// Generator/camera update. Returns the logged components
/// `(g_adv_rgb, g_adv_mask, l_reg, l_align, total)`.
fn generator_step(
    state: &mut TrainState,
    flags: PhaseFlags,
    ctx: &StepContext,
) -> Result<(f64, f64, f64, f64, f64)> {
    let iteration = state.iteration;
    let n = ctx.train.batch_size;
    let tape = Tape::new();
    let vars = state.params.vars(&tape);
    let mut rng = derive_rng(ctx.train.seed, iteration, PURPOSE_FAKES_G);

    let mut rgb_terms: Vec<Option<Var>> = Vec::with_capacity(n);
    let mut mask_terms: Vec<Option<Var>> = Vec::with_capacity(n);
    let mut reg_terms: Vec<Var> = Vec::with_capacity(n);
    let mut align_terms: Vec<Var> = Vec::new();
    for _ in 0..n {
        let sample = generate_fake(&tape, &vars, state, flags, ctx, &mut rng)?;
        reg_terms.push(sample.reg);
        match sample.render {
            Some((rv, stats)) => {
                let p = rv.size * rv.size;
                let logit_rgb = discriminate(&state.d_rgb, &vars, &rv.color)?;
                let mask_img = rv.mask.reshape(vec![p, 1]);
                let logit_mask = discriminate(&state.d_mask, &vars, &mask_img)?;
                rgb_terms.push(Some((-&logit_rgb).softplus()));
                mask_terms.push(Some((-&logit_mask).softplus()));
                if flags.align_loss_active {
                    align_terms.push(align_loss(&stats, ctx.train.c0));
                }
            }
            None => {
                rgb_terms.push(None);
                mask_terms.push(None);
            }
        }
    }

    let collapsed = rgb_terms.iter().filter(|t| t.is_none()).count();
    if collapsed * 2 > n {
        return Err(Error::Diverged {
            iteration,
            reason: format!("{collapsed} of {n} generated samples collapsed"),
        });
    }
    let g_adv_rgb = mean_with_collapse_penalty(&tape, &rgb_terms)?;
    let g_adv_mask = mean_with_collapse_penalty(&tape, &mask_terms)?;
    let l_reg = mean_of(&tape, &reg_terms);
    let l_align = mean_of(&tape, &align_terms);
    // With the generator frozen (phase 2) the field regularizer is a
    // constant, so the objective reduces to the adversarial terms alone.
    let mu1 = if flags.generator_trainable { ctx.train.mu1 } else { 0.0 };
    let total = generator_total(
        &g_adv_rgb,
        &g_adv_mask,
        &l_reg,
        &l_align,
        mu1,
        ctx.train.mu2,
        flags.align_loss_active,
    );
    tape.check_finite()?;

    let report =
        (g_adv_rgb.item(), g_adv_mask.item(), l_reg.item(), l_align.item(), total.item());
    let mut ids = Vec::new();
    if flags.generator_trainable {
        ids.extend(state.params.ids_with_prefix("g."));
    }
    if flags.camera_trainable {
        ids.extend(state.params.ids_with_prefix("cam."));
    }
    apply_adam(state, &tape, &total, &vars, &ids, ctx.train)?;
    Ok(report)
}

/// Pool the decoded pose statistics over a latent probe set into one
/// empirical per-parameter Gaussian: pooled mean = mean of means, pooled
/// variance = mean of variances + variance of means.
pub fn camera_snapshot(
    params: &ParamSet,
    generator: &Generator,
    ctx: &StepContext,
) -> Result<CameraPoseDistribution> {
    let probes = ctx.train.snapshot_probes;
    let mut rng = derive_rng(ctx.train.seed, 0, PURPOSE_SNAPSHOT);
    let mut mus: Vec<[f64; 6]> = Vec::with_capacity(probes);
    let mut sigmas: Vec<[f64; 6]> = Vec::with_capacity(probes);
    for _ in 0..probes {
        let tape = Tape::new();
        let vars = params.vars(&tape);
        let z3 = tape.cvec((0..ctx.net.z_dim).map(|_| standard_normal(&mut rng)).collect());
        let w3 = map_latent(&generator.map_cam, &vars, &z3);
        let raw = generator.camera_raw(&vars, &w3);
        let dist = decode_distribution(&raw, ctx.camera)?.value();
        mus.push(dist.mu);
        sigmas.push(dist.sigma);
    }
    let n = probes as f64;
    let mut mu = [0.0; 6];
    let mut sigma = [0.0; 6];
    for j in 0..6 {
        let mean: f64 = mus.iter().map(|m| m[j]).sum::<f64>() / n;
        let var_within: f64 = sigmas.iter().map(|s| s[j] * s[j]).sum::<f64>() / n;
        let var_between: f64 =
            mus.iter().map(|m| (m[j] - mean) * (m[j] - mean)).sum::<f64>() / n;
        mu[j] = mean;
        sigma[j] = (var_within + var_between).sqrt();
    }
    Ok(CameraPoseDistribution { mu, sigma })
}

/// One training iteration: a discriminator update, then a generator/camera
/// update, both honoring the phase flags. Advances the iteration counter
/// and returns the logged loss components.
pub fn train_step(
    state: &mut TrainState,
    batch: &[RealPair],
    ctx: &StepContext,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::BadInput("empty real batch".into()));
    }
    let iteration = state.iteration;
    let flags = phase_of(iteration, ctx.train.total_iterations, ctx.train.phase_boundaries)?;
    if flags.camera_distribution_frozen && state.snapshot.is_none() {
        state.snapshot = Some(camera_snapshot(&state.params, &state.generator, ctx)?);
    }

    let as_diverged = |e: Error| match e {
        Error::NonFinite { .. } => Error::Diverged { iteration, reason: e.to_string() },
        other => other,
    };
    let (d_rgb, d_mask, r1_rgb, r1_mask) =
        discriminator_step(state, batch, flags, ctx).map_err(as_diverged)?;
    let (g_adv_rgb, g_adv_mask, l_reg, l_align, total) =
        generator_step(state, flags, ctx).map_err(as_diverged)?;

    let report = LossReport {
        g_adv_rgb,
        g_adv_mask,
        d_rgb,
        d_mask,
        r1_rgb,
        r1_mask,
        l_reg,
        l_align,
        total,
    };
    report.validate()?;
    state.iteration += 1;
    Ok(report)
}

/// Draw one real batch for an iteration: a seeded sample without
/// replacement, falling back to replacement when the dataset is smaller
/// than the batch.
pub fn select_batch(data: &[RealPair], iteration: u64, tcfg: &TrainConfig) -> Vec<RealPair> {
    assert!(!data.is_empty(), "selecting a batch from an empty dataset");
    let mut rng = derive_rng(tcfg.seed, iteration, PURPOSE_BATCH);
    let n = tcfg.batch_size;
    if data.len() >= n {
        rand::seq::index::sample(&mut rng, data.len(), n)
            .iter()
            .map(|i| data[i].clone())
            .collect()
    } else {
        (0..n).map(|_| data[rng.gen_range(0..data.len())].clone()).collect()
    }
}

/// Serialize the full training state (weights, optimizer accumulators, and
/// the pose snapshot when present) into one checkpoint file.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut items: Vec<(String, Tensor)> = Vec::new();
    for id in 0..state.params.len() {
        let name = state.params.name(id);
        let value = state.params.value(id);
        let shape = value.shape().to_vec();
        let slot = &state.adam[id];
        items.push((format!("param/{name}"), value.clone()));
        items.push((
            format!("opt_m/{name}"),
            Tensor::new(shape.clone(), slot.m.clone()).expect("moment shape"),
        ));
        items.push((
            format!("opt_v/{name}"),
            Tensor::new(shape, slot.v.clone()).expect("moment shape"),
        ));
        items.push((
            format!("opt_t/{name}"),
            Tensor::new(vec![1], vec![slot.t as f64]).expect("step count"),
        ));
    }
    if let Some(snap) = &state.snapshot {
        items.push((
            "camera_snapshot/mu".into(),
            Tensor::new(vec![6], snap.mu.to_vec()).expect("snapshot"),
        ));
        items.push((
            "camera_snapshot/sigma".into(),
            Tensor::new(vec![6], snap.sigma.to_vec()).expect("snapshot"),
        ));
    }
    write_named_tensors(path, state.iteration, &items)
}

/// Restore a checkpoint into a freshly constructed state. Strict: every
/// parameter and optimizer entry must be present with its exact shape, and
/// the file must not contain anything else.
pub fn load_checkpoint(state: &mut TrainState, path: &Path) -> Result<()> {
    let (iteration, items) = read_named_tensors(path)?;
    let mut map: HashMap<String, Tensor> = items.into_iter().collect();
    let mut take = |key: &str, shape: &[usize]| -> Result<Tensor> {
        let t = map
            .remove(key)
            .ok_or_else(|| Error::BadCheckpoint(format!("missing entry {key}")))?;
        if t.shape() != shape {
            return Err(Error::BadCheckpoint(format!(
                "entry {key} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    };
    for id in 0..state.params.len() {
        let name = state.params.name(id).to_string();
        let shape = state.params.value(id).shape().to_vec();
        let value = take(&format!("param/{name}"), &shape)?;
        let m = take(&format!("opt_m/{name}"), &shape)?;
        let v = take(&format!("opt_v/{name}"), &shape)?;
        let t = take(&format!("opt_t/{name}"), &[1])?;
        *state.params.value_mut(id) = value;
        state.adam[id].m = m.data().to_vec();
        state.adam[id].v = v.data().to_vec();
        state.adam[id].t = t.data()[0] as u64;
    }
    state.snapshot = match map.remove("camera_snapshot/mu") {
        Some(mu_t) => {
            let sigma_t = map
                .remove("camera_snapshot/sigma")
                .ok_or_else(|| Error::BadCheckpoint("snapshot sigma missing".into()))?;
            if mu_t.shape() != [6] || sigma_t.shape() != [6] {
                return Err(Error::BadCheckpoint("snapshot entries must be 6-vectors".into()));
            }
            let mut mu = [0.0; 6];
            let mut sigma = [0.0; 6];
            mu.copy_from_slice(mu_t.data());
            sigma.copy_from_slice(sigma_t.data());
            Some(CameraPoseDistribution { mu, sigma })
        }
        None => None,
    };
    if let Some(extra) = map.keys().next() {
        return Err(Error::BadCheckpoint(format!("unexpected entry {extra}")));
    }
    state.iteration = iteration;
    Ok(())
}

/// Drive training from the state's current iteration to the end of the
/// run. When `out_dir` is given, appends one CSV row per iteration to
/// `losses.csv` and writes checkpoints at phase boundaries, every
/// `checkpoint_interval` iterations, and at the end. Returns every report.
pub fn train_run(
    state: &mut TrainState,
    data: &[RealPair],
    ctx: &StepContext,
    out_dir: Option<&Path>,
) -> Result<Vec<LossReport>> {
    ctx.train.validate()?;
    if data.is_empty() {
        return Err(Error::BadInput("empty training dataset".into()));
    }
    let mut csv = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir.join("checkpoints"))?;
            let path = dir.join("losses.csv");
            let fresh = !path.exists();
            let mut f = File::options().create(true).append(true).open(path)?;
            if fresh {
                writeln!(f, "{}", LossReport::csv_header())?;
            }
            Some(f)
        }
        None => None,
    };

    let total = ctx.train.total_iterations;
    let bounds = ctx.train.phase_boundaries;
    let mut reports = Vec::new();
    let mut prev_phase = if state.iteration == 0 {
        None
    } else {
        Some(phase_of(state.iteration - 1, total, bounds)?.phase)
    };
    while state.iteration < total {
        let iteration = state.iteration;
        let flags = phase_of(iteration, total, bounds)?;
        if let Some(dir) = out_dir {
            let entering = prev_phase.is_some_and(|p| p != flags.phase);
            if entering {
                let path = dir.join(format!("checkpoints/phase{}_start.wmck", flags.phase));
                save_checkpoint(state, &path)?;
            }
        }
        prev_phase = Some(flags.phase);

        let batch = select_batch(data, iteration, ctx.train);
        let report = train_step(state, &batch, ctx)?;
        if let Some(f) = &mut csv {
            writeln!(f, "{}", report.csv_row(iteration, flags.phase))?;
        }
        reports.push(report);

        if let Some(dir) = out_dir {
            let every = ctx.train.checkpoint_interval;
            if every > 0 && state.iteration % every == 0 {
                let path = dir.join(format!("checkpoints/step_{:07}.wmck", state.iteration));
                save_checkpoint(state, &path)?;
            }
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(state, &dir.join("checkpoints/final.wmck"))?;
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_configs() -> (TrainConfig, NetConfig, RenderConfig, CameraConfig, FixedSamplerConfig)
    {
        let train = TrainConfig {
            total_iterations: 20,
            batch_size: 2,
            learning_rate: 1e-3,
            r1_gamma: 2.0,
            seed: 11,
            grid_resolution: 2,
            snapshot_probes: 8,
            checkpoint_interval: 0,
            ..TrainConfig::default()
        };
        let net = NetConfig {
            z_dim: 4,
            w_dim: 4,
            mapping_hidden: 8,
            mapping_layers: 2,
            field_hidden: 12,
            field_layers: 2,
            pos_bands: 2,
            disc_channels: vec![4, 8],
            disc_hidden: 8,
            ..NetConfig::default()
        };
        let render = RenderConfig { image_size: 8, ..RenderConfig::default() };
        (train, net, render, CameraConfig::default(), FixedSamplerConfig::default())
    }

    fn synthetic_reals(render: &RenderConfig, count: usize) -> Vec<RealPair> {
        let p = render.image_size * render.image_size;
        (0..count)
            .map(|i| {
                let mut rng = derive_rng(99, i as u64, "synthetic-reals");
                let color: Vec<f64> = (0..p * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
                let mask: Vec<f64> = (0..p).map(|_| rng.gen_range(0.0..1.0)).collect();
                RealPair {
                    color: Tensor::new(vec![p, 3], color).unwrap(),
                    mask: Tensor::new(vec![p, 1], mask).unwrap(),
                }
            })
            .collect()
    }

    fn tensors_with_prefix(ps: &ParamSet, prefix: &str) -> Vec<Vec<f64>> {
        ps.ids_with_prefix(prefix).iter().map(|&id| ps.value(id).data().to_vec()).collect()
    }

    #[test]
    fn phase_table_matches_schedule() {
        let b = [0.2, 0.3, 0.4];
        let f = |iter| phase_of(iter, 100, b).unwrap();
        assert_eq!(f(10), PhaseFlags::for_phase(1));
        assert_eq!(f(25), PhaseFlags::for_phase(2));
        assert_eq!(f(35), PhaseFlags::for_phase(3));
        assert_eq!(f(50), PhaseFlags::for_phase(4));
        // Half-open boundaries: the boundary iteration starts the later phase.
        assert_eq!(f(0).phase, 1);
        assert_eq!(f(20).phase, 2);
        assert_eq!(f(30).phase, 3);
        assert_eq!(f(40).phase, 4);
        assert_eq!(f(99).phase, 4);

        let p1 = f(10);
        assert!(p1.generator_trainable && !p1.camera_trainable);
        assert!(p1.use_fixed_uniform_sampler);
        assert!(!p1.compensation_active && !p1.align_loss_active);
        let p2 = f(25);
        assert!(!p2.generator_trainable && p2.camera_trainable);
        assert!(p2.compensation_active && !p2.align_loss_active);
        let p3 = f(35);
        assert!(p3.generator_trainable && p3.camera_trainable);
        assert!(p3.compensation_active && p3.align_loss_active);
        let p4 = f(50);
        assert!(p4.generator_trainable && !p4.camera_trainable);
        assert!(p4.camera_distribution_frozen);
        assert!(!p4.compensation_active && !p4.align_loss_active);
    }

    #[test]
    fn phase_lookup_rejects_bad_inputs() {
        let b = [0.2, 0.3, 0.4];
        assert!(phase_of(100, 100, b).is_err());
        assert!(phase_of(0, 0, b).is_err());
        assert!(phase_of(0, 10, [0.3, 0.3, 0.4]).is_err());
        assert!(phase_of(0, 10, [0.0, 0.3, 0.4]).is_err());
        assert!(phase_of(0, 10, [0.2, 0.3, 1.0]).is_err());
        assert!(phase_of(0, 10, [0.4, 0.3, 0.2]).is_err());
    }

    #[test]
    fn phase_never_goes_backward() {
        let total = 1000;
        let mut last = 0;
        for iter in 0..total {
            let phase = phase_of(iter, total, [0.2, 0.3, 0.4]).unwrap().phase;
            assert!(phase >= last, "phase regressed at iteration {iter}");
            last = phase;
        }
        assert_eq!(last, 4);
    }

    #[test]
    fn collapse_penalty_mean_uses_batch_max() {
        let tape = Tape::new();
        let a = tape.var(&Tensor::new(vec![], vec![1.0]).unwrap());
        let b = tape.var(&Tensor::new(vec![], vec![3.0]).unwrap());
        let values = vec![Some(a.clone()), Some(b.clone()), None];
        let mean = mean_with_collapse_penalty(&tape, &values).unwrap();
        assert!((mean.item() - 7.0 / 3.0).abs() < 1e-15);
        // The collapsed slot is a constant: gradients reach only the valid
        // samples, each with weight 1/batch.
        let grads = tape.grad(&mean, &[&a, &b]).unwrap();
        assert!((grads[0].item() - 1.0 / 3.0).abs() < 1e-15);
        assert!((grads[1].item() - 1.0 / 3.0).abs() < 1e-15);

        let none_only: Vec<Option<Var>> = vec![None, None];
        assert!(mean_with_collapse_penalty(&tape, &none_only).is_err());
    }

    #[test]
    fn fresh_state_is_consistent() {
        let (train, net, render, camera, fixed) = test_configs();
        let ctx = StepContext {
            train: &train,
            net: &net,
            render: &render,
            camera: &camera,
            fixed: &fixed,
        };
        let state = TrainState::new(&ctx).unwrap();
        assert_eq!(state.iteration, 0);
        assert!(state.snapshot.is_none());
        assert_eq!(state.adam.len(), state.params.len());
        for id in 0..state.params.len() {
            assert_eq!(state.adam[id].m.len(), state.params.value(id).data().len());
            assert_eq!(state.adam[id].t, 0);
        }
        assert!(!state.params.ids_with_prefix("g.").is_empty());
        assert!(!state.params.ids_with_prefix("cam.").is_empty());
        assert!(!state.params.ids_with_prefix("d_rgb.").is_empty());
        assert!(!state.params.ids_with_prefix("d_mask.").is_empty());
    }

    #[test]
    fn phase1_step_moves_generator_but_not_camera() {
        let (train, net, render, camera, fixed) = test_configs();
        let ctx = StepContext {
            train: &train,
            net: &net,
            render: &render,
            camera: &camera,
            fixed: &fixed,
        };
        let mut state = TrainState::new(&ctx).unwrap();
        let reals = synthetic_reals(&render, 4);
        let cam_before = tensors_with_prefix(&state.params, "cam.");
        let g_before = tensors_with_prefix(&state.params, "g.");
        let d_before = tensors_with_prefix(&state.params, "d_rgb.");
        let report = train_step(&mut state, &select_batch(&reals, 0, &train), &ctx).unwrap();
        report.validate().unwrap();
        assert_eq!(state.iteration, 1);
        assert_eq!(tensors_with_prefix(&state.params, "cam."), cam_before);
        assert_ne!(tensors_with_prefix(&state.params, "g."), g_before);
        assert_ne!(tensors_with_prefix(&state.params, "d_rgb."), d_before);
    }

    #[test]
    fn phase2_step_freezes_generator_and_moves_camera() {
        let (train, net, render, camera, fixed) = test_configs();
        let ctx = StepContext {
            train: &train,
            net: &net,
            render: &render,
            camera: &camera,
            fixed: &fixed,
        };
        let mut state = TrainState::new(&ctx).unwrap();
        state.iteration = 5; // fraction 0.25 of 20 total
        let reals = synthetic_reals(&render, 4);
        let g_before = tensors_with_prefix(&state.params, "g.");
        let cam_before = tensors_with_prefix(&state.params, "cam.");
        train_step(&mut state, &select_batch(&reals, 5, &train), &ctx).unwrap();
        assert_eq!(tensors_with_prefix(&state.params, "g."), g_before);
        assert_ne!(tensors_with_prefix(&state.params, "cam."), cam_before);
    }

    #[test]
    fn phase4_freezes_camera_and_snapshot() {
        let (train, net, render, camera, fixed) = test_configs();
        let ctx = StepContext {
            train: &train,
            net: &net,
            render: &render,
            camera: &camera,
            fixed: &fixed,
        };
        let mut state = TrainState::new(&ctx).unwrap();
        state.iteration = 8; // fraction 0.4 of 20 total: first frozen iteration
        let reals = synthetic_reals(&render, 4);
        let cam_before = tensors_with_prefix(&state.params, "cam.");
        let g_before = tensors_with_prefix(&state.params, "g.");
        train_step(&mut state, &select_batch(&reals, 8, &train), &ctx).unwrap();
        let snap1 = state.snapshot.clone().expect("snapshot taken on entering the frozen phase");
        train_step(&mut state, &select_batch(&reals, 9, &train), &ctx).unwrap();
        let snap2 = state.snapshot.clone().unwrap();
        assert_eq!(snap1.mu, snap2.mu);
        assert_eq!(snap1.sigma, snap2.sigma);
        assert_eq!(tensors_with_prefix(&state.params, "cam."), cam_before);
        assert_ne!(tensors_with_prefix(&state.params, "g."), g_before);
    }

    #[test]
    fn r1_components_follow_the_lazy_interval() {
        let (mut train, net, render, camera, fixed) = test_configs();
        train.total_iterations = 200; // keep iterations 16/17/32 inside phase 1
        let ctx = StepContext {
            train: &train,
            net: &net,
            render: &render,
            camera: &camera,
            fixed: &fixed,
        };
        let mut state = TrainState::new(&ctx).unwrap();
        let reals = synthetic_reals(&render, 4);
        state.iteration = 16;
        let at16 = train_step(&mut state, &select_batch(&reals, 16, &train), &ctx).unwrap();
        assert!(at16.r1_rgb > 0.0 && at16.r1_mask > 0.0);
        let at17 = train_step(&mut state, &select_batch(&reals, 17, &train), &ctx).unwrap();
        assert_eq!(at17.r1_rgb, 0.0);
        assert_eq!(at17.r1_mask, 0.0);
        state.iteration = 32;
        let at32 = train_step(&mut state, &select_batch(&reals, 32, &train), &ctx).unwrap();
        assert!(at32.r1_rgb > 0.0 && at32.r1_mask > 0.0);
    }

    #[test]
    fn training_run_is_deterministic_and_logged() {
        let (mut train, net, render, camera, fixed) = test_configs();
        train.total_iterations = 6;
        train.phase_boundaries = [0.3, 0.5, 0.6]; // all four phases in six steps
        let ctx = StepContext {
            train: &train,
            net: &net,
            render: &render,
            camera: &camera,
            fixed: &fixed,
        };
        let reals = synthetic_reals(&render, 5);

        let run = |tag: &str| -> (Vec<LossReport>, String) {
            let dir = std::env::temp_dir().join(format!("wildmesh-schedule-run-{tag}"));
            let _ = fs::remove_dir_all(&dir);
            let mut state = TrainState::new(&ctx).unwrap();
            let reports = train_run(&mut state, &reals, &ctx, Some(&dir)).unwrap();
            assert_eq!(state.iteration, 6);
            let csv = fs::read_to_string(dir.join("losses.csv")).unwrap();
            for phase in 2..=4 {
                assert!(
                    dir.join(format!("checkpoints/phase{phase}_start.wmck")).exists(),
                    "missing phase {phase} boundary checkpoint"
                );
            }
            assert!(dir.join("checkpoints/final.wmck").exists());
            (reports, csv)
        };
        let (reports_a, csv_a) = run("a");
        let (reports_b, csv_b) = run("b");
        assert_eq!(csv_a, csv_b, "seeded runs must log identical streams");
        assert_eq!(csv_a.lines().count(), 7); // header + one row per iteration
        for (ra, rb) in reports_a.iter().zip(&reports_b) {
            assert_eq!(ra.total.to_bits(), rb.total.to_bits());
            assert_eq!(ra.g_adv_rgb.to_bits(), rb.g_adv_rgb.to_bits());
            assert_eq!(ra.d_rgb.to_bits(), rb.d_rgb.to_bits());
        }
    }

    #[test]
    fn checkpoint_restores_the_full_state() {
        let (train, net, render, camera, fixed) = test_configs();
        let ctx = StepContext {
            train: &train,
            net: &net,
            render: &render,
            camera: &camera,
            fixed: &fixed,
        };
        let reals = synthetic_reals(&render, 4);
        let mut state = TrainState::new(&ctx).unwrap();
        for iter in 0..2 {
            train_step(&mut state, &select_batch(&reals, iter, &train), &ctx).unwrap();
        }
        let dir = std::env::temp_dir().join("wildmesh-schedule-ckpt");
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("state.wmck");
        save_checkpoint(&state, &path).unwrap();

        let mut resumed = TrainState::new(&ctx).unwrap();
        load_checkpoint(&mut resumed, &path).unwrap();
        assert_eq!(resumed.iteration, state.iteration);
        for id in 0..state.params.len() {
            assert_eq!(resumed.params.value(id).data(), state.params.value(id).data());
            assert_eq!(resumed.adam[id], state.adam[id]);
        }

        let batch = select_batch(&reals, 2, &train);
        let a = train_step(&mut state, &batch, &ctx).unwrap();
        let b = train_step(&mut resumed, &batch, &ctx).unwrap();
        assert_eq!(a.total.to_bits(), b.total.to_bits());
        assert_eq!(a.g_adv_mask.to_bits(), b.g_adv_mask.to_bits());
    }

    #[test]
    fn collapse_of_most_of_the_batch_aborts() {
        let (mut train, net, render, camera, fixed) = test_configs();
        // An absurd surface-size floor marks every sample as collapsed.
        train.min_surface_tets = 1_000_000;
        let ctx = StepContext {
            train: &train,
            net: &net,
            render: &render,
            camera: &camera,
            fixed: &fixed,
        };
        let mut state = TrainState::new(&ctx).unwrap();
        let reals = synthetic_reals(&render, 4);
        let err = train_step(&mut state, &select_batch(&reals, 0, &train), &ctx).unwrap_err();
        match err {
            Error::Diverged { iteration, reason } => {
                assert_eq!(iteration, 0);
                assert!(reason.contains("collapsed"), "unexpected reason: {reason}");
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn snapshot_pools_probe_statistics_near_initialization() {
        let (mut train, net, render, camera, fixed) = test_configs();
        train.snapshot_probes = 16;
        let ctx = StepContext {
            train: &train,
            net: &net,
            render: &render,
            camera: &camera,
            fixed: &fixed,
        };
        let state = TrainState::new(&ctx).unwrap();
        // The camera head starts near zero, so every probe decodes close to
        // the configured initialization and so must the pooled snapshot.
        let snap = camera_snapshot(&state.params, &state.generator, &ctx).unwrap();
        for j in 0..6 {
            assert!(
                (snap.mu[j] - camera.init_mean[j]).abs() < 0.05,
                "pooled mean {j}: {} vs init {}",
                snap.mu[j],
                camera.init_mean[j]
            );
            assert!(
                (snap.sigma[j] - camera.init_sigma[j]).abs() < 0.05,
                "pooled sigma {j}: {} vs init {}",
                snap.sigma[j],
                camera.init_sigma[j]
            );
        }
    }

    #[test]
    fn batch_selection_is_seeded_and_within_range() {
        let (mut train, _net, render, _camera, _fixed) = test_configs();
        train.batch_size = 3;
        let reals = synthetic_reals(&render, 5);
        let a = select_batch(&reals, 4, &train);
        let b = select_batch(&reals, 4, &train);
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.color.data(), y.color.data());
        }
        // Without replacement when the dataset is large enough: members of
        // one batch are pairwise distinct examples.
        for i in 0..a.len() {
            for j in i + 1..a.len() {
                assert_ne!(a[i].color.data(), a[j].color.data());
            }
        }
        // Smaller dataset than batch: falls back to replacement, still sized.
        train.batch_size = 7;
        let big = select_batch(&reals[..2], 0, &train);
        assert_eq!(big.len(), 7);
    }
}
