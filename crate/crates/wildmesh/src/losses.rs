//! Training objectives: non-saturating adversarial losses for the two
//! image discriminators, the lazy R1 gradient penalty, the signed-distance
//! sign-agreement regularizer, the align loss on shape statistics, and the
//! weighted totals the two optimization steps minimize.
//!
//! Everything here is a pure tape expression; the per-iteration scalar
//! values are collected into a [`LossReport`] for the CSV training log.

use crate::autodiff::{stack_scalars, Tape, Var};
use crate::error::{Error, Result};
use crate::tetgrid::{ShapeStats, TetGrid};

/// Adversarial losses of one head, from batches of scalar logits.
pub struct AdvPair {
    /// Generator side: mean softplus(−logit_fake).
    pub g: Var,
    /// Discriminator side: mean softplus(−logit_real) + mean softplus(logit_fake).
    pub d: Var,
}

/// Non-saturating logistic GAN losses. Both batches must be non-empty and
/// finite.
pub fn adversarial_losses(real: &[Var], fake: &[Var]) -> Result<AdvPair> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::BadInput("empty logit batch".into()));
    }
    for logit in real.iter().chain(fake) {
        if !logit.item().is_finite() {
            return Err(Error::BadInput("non-finite logit".into()));
        }
    }
    let real_refs: Vec<&Var> = real.iter().collect();
    let fake_refs: Vec<&Var> = fake.iter().collect();
    let real_stack = stack_scalars(&real_refs);
    let fake_stack = stack_scalars(&fake_refs);
    let g = (-&fake_stack).softplus().mean_all();
    let d = &(-&real_stack).softplus().mean_all() + &fake_stack.softplus().mean_all();
    Ok(AdvPair { g, d })
}

/// R1 gradient penalty: `(γ/2) · mean over images of ‖∂logit/∂image‖²`.
///
/// `logit_of` maps one image variable to its scalar logit (normally a
/// discriminator forward pass). The per-image gradients come from one
/// backward pass of the summed logits — each logit depends only on its own
/// image, so the sum's gradient separates. The gradient is built as tape
/// nodes, so the penalty is differentiable in the discriminator weights.
pub fn r1_penalty(
    tape: &Tape,
    images: &[Var],
    gamma: f64,
    logit_of: impl Fn(&Var) -> Result<Var>,
) -> Result<Var> {
    assert!(!images.is_empty(), "R1 penalty over an empty batch");
    let logits = images.iter().map(&logit_of).collect::<Result<Vec<_>>>()?;
    let logit_refs: Vec<&Var> = logits.iter().collect();
    let total = stack_scalars(&logit_refs).sum_all();
    let image_refs: Vec<&Var> = images.iter().collect();
    let grads = tape.grad(&total, &image_refs)?;
    let sq: Vec<Var> = grads.iter().map(|g| (g * g).sum_all()).collect();
    let sq_refs: Vec<&Var> = sq.iter().collect();
    Ok(&stack_scalars(&sq_refs).mean_all() * (gamma / 2.0))
}

/// Saturation bound of the sign-agreement regularizer: raw signed
/// distances are squashed to `±SDF_CAP` before the cross-entropy, so one
/// bad edge contributes at most a bounded loss.
pub const SDF_CAP: f64 = 4.0;

/// Sign-agreement regularizer over surface-crossing grid edges.
///
/// For every grid edge whose endpoint signed distances disagree in sign,
/// both endpoints are pushed toward the other's sign with a symmetric
/// binary cross-entropy on the squashed distance. Zero when all signs
/// agree; each disagreeing edge contributes at most its saturated maximum.
pub fn sdf_reg_loss(tape: &Tape, grid: &TetGrid, sdf: &Var, cap: f64) -> Var {
    let values = sdf.value();
    let outside = |i: usize| values.data()[i] >= 0.0;
    let mut ids_a = Vec::new();
    let mut ids_b = Vec::new();
    let mut targets_a = Vec::new();
    let mut targets_b = Vec::new();
    for &(a, b) in grid.edges() {
        if outside(a) != outside(b) {
            ids_a.push(a);
            ids_b.push(b);
            targets_a.push(if outside(a) { 1.0 } else { 0.0 });
            targets_b.push(if outside(b) { 1.0 } else { 0.0 });
        }
    }
    if ids_a.is_empty() {
        return tape.scalar(0.0);
    }
    let squash = |v: &Var| -> Var { &(v * (1.0 / cap)).tanh() * cap };
    let sa = squash(&sdf.gather(ids_a));
    let sb = squash(&sdf.gather(ids_b));
    let ta = tape.cvec(targets_a);
    let tb = tape.cvec(targets_b);
    // BCE(σ(x), y) = softplus(x) − y·x, stable in both tails.
    let bce = |x: &Var, y: &Var| -> Var { &x.softplus() - &(y * x) };
    (&bce(&sa, &tb) + &bce(&sb, &ta)).sum_all()
}

/// Align loss: `|Δk − c0| + ‖Δd‖₂`. Zero (within the smoothing epsilon of
/// the norm) exactly when the shape statistics already sit at the centered,
/// standard-scale target.
pub fn align_loss(stats: &ShapeStats, c0: f64) -> Var {
    let dd = &stats.delta_d;
    let norm = (&(dd * dd).sum_all() + 1e-20).sqrt();
    let dk_err = (&stats.delta_k - c0).abs();
    &norm + &dk_err
}

/// Generator-side total: both adversarial heads plus the weighted
/// regularizers; the align term enters only when its phase enables it.
pub fn generator_total(
    g_adv_rgb: &Var,
    g_adv_mask: &Var,
    l_reg: &Var,
    l_align: &Var,
    mu1: f64,
    mu2: f64,
    align_active: bool,
) -> Var {
    let base = &(g_adv_rgb + g_adv_mask) + &(l_reg * mu1);
    if align_active {
        &base + &(l_align * mu2)
    } else {
        base
    }
}

/// Discriminator-side total: both heads, plus the R1 penalties on lazy
/// regularization iterations.
pub fn discriminator_total(d_rgb: &Var, d_mask: &Var, r1: Option<(&Var, &Var)>) -> Var {
    let base = d_rgb + d_mask;
    match r1 {
        Some((rgb, mask)) => &base + &(rgb + mask),
        None => base,
    }
}

/// Scalar loss values of one training iteration, for logging.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossReport {
    pub g_adv_rgb: f64,
    pub g_adv_mask: f64,
    pub d_rgb: f64,
    pub d_mask: f64,
    pub r1_rgb: f64,
    pub r1_mask: f64,
    pub l_reg: f64,
    pub l_align: f64,
    pub total: f64,
}

impl LossReport {
    pub fn csv_header() -> &'static str {
        "iteration,phase,g_adv_rgb,g_adv_mask,d_rgb,d_mask,r1_rgb,r1_mask,l_reg,l_align,total"
    }

    pub fn csv_row(&self, iteration: u64, phase: u8) -> String {
        format!(
            "{iteration},{phase},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.g_adv_rgb,
            self.g_adv_mask,
            self.d_rgb,
            self.d_mask,
            self.r1_rgb,
            self.r1_mask,
            self.l_reg,
            self.l_align,
            self.total
        )
    }

    /// All components finite; the non-negative ones non-negative.
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.g_adv_rgb,
            self.g_adv_mask,
            self.d_rgb,
            self.d_mask,
            self.r1_rgb,
            self.r1_mask,
            self.l_reg,
            self.l_align,
            self.total,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::BadInput("non-finite loss component".into()));
        }
        if self.l_reg < 0.0 || self.l_align < 0.0 || self.r1_rgb < 0.0 || self.r1_mask < 0.0 {
            return Err(Error::BadInput("negative regularizer".into()));
        }
        Ok(())
    }
}
