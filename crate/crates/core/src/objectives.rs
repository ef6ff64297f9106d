//! Training objectives, all recorded on the tape so they can be differentiated.

use crate::error::{bail, Result};
use crate::model::FrameMode;
use crate::tensor::Var;

/// Weights of the joint objective `λ_of·ℓ_of + λ_st·ℓ_st`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_of: f64,
    pub lambda_st: f64,
    /// Exponent of the gradient difference loss.
    pub alpha: f64,
    pub mode: FrameMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_of: 1.0,
            lambda_st: 1.0,
            alpha: 1.0,
            mode: FrameMode::Rgb,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_of >= 0.0 && self.lambda_st >= 0.0) {
            bail!(Config, "loss weights must be non-negative");
        }
        if !(self.alpha >= 1.0) {
            bail!(
                Config,
                "gradient difference exponent must be at least 1, got {}",
                self.alpha
            );
        }
        Ok(())
    }
}

fn same_shape(a: &Var<'_>, b: &Var<'_>, what: &str) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        bail!(Dimension, "{what}: prediction {sa:?} vs target {sb:?}");
    }
    Ok(())
}

/// Flow prediction loss: mean squared difference.
pub fn loss_of<'t>(predicted: &Var<'t>, target: &Var<'t>) -> Result<Var<'t>> {
    same_shape(predicted, target, "loss_of")?;
    predicted.sub(target)?.square()?.mean()
}

/// Mean absolute difference.
pub fn loss_l1<'t>(predicted: &Var<'t>, target: &Var<'t>) -> Result<Var<'t>> {
    same_shape(predicted, target, "loss_l1")?;
    predicted.sub(target)?.abs()?.mean()
}

fn gdl_term<'t>(
    predicted: &Var<'t>,
    target: &Var<'t>,
    axis: usize,
    alpha: f64,
) -> Result<Option<Var<'t>>> {
    let n = predicted.shape()[axis];
    if n < 2 {
        return Ok(None);
    }
    let diff = |x: &Var<'t>| -> Result<Var<'t>> {
        x.slice(axis, 1, n - 1)?
            .sub(&x.slice(axis, 0, n - 1)?)?
            .abs()
    };
    let mut d = diff(target)?.sub(&diff(predicted)?)?.abs()?;
    if alpha != 1.0 {
        d = d.powf(alpha)?;
    }
    Ok(Some(d.sum()?))
}

/// Gradient difference loss over `[B, C, H, W]`: sum over pixels and channels of
/// `| |∇target| - |∇predicted| |^α` in both directions, averaged over the batch.
pub fn loss_gdl<'t>(predicted: &Var<'t>, target: &Var<'t>, alpha: f64) -> Result<Var<'t>> {
    same_shape(predicted, target, "loss_gdl")?;
    let s = predicted.shape();
    if s.len() != 4 {
        bail!(Dimension, "loss_gdl expects [B,C,H,W], got {s:?}");
    }
    let vertical = gdl_term(predicted, target, 2, alpha)?;
    let horizontal = gdl_term(predicted, target, 3, alpha)?;
    let total = match (vertical, horizontal) {
        (Some(a), Some(b)) => a.add(&b)?,
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => predicted.sub(predicted)?.sum()?,
    };
    total.scale(1.0 / s[0] as f64)
}

/// Frame prediction loss `ℓ1 + ℓgdl`.
pub fn loss_st<'t>(predicted: &Var<'t>, target: &Var<'t>, alpha: f64) -> Result<Var<'t>> {
    loss_l1(predicted, target)?.add(&loss_gdl(predicted, target, alpha)?)
}

/// The three scalars of one joint-loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms<'t> {
    pub flow: Var<'t>,
    pub frame: Var<'t>,
    pub total: Var<'t>,
}

/// Joint objective. In semantic mode the frame term is plain ℓ1.
pub fn loss_final<'t>(
    pred_frame: &Var<'t>,
    target_frame: &Var<'t>,
    pred_flow: &Var<'t>,
    target_flow: &Var<'t>,
    weights: &LossWeights,
) -> Result<LossTerms<'t>> {
    weights.validate()?;
    let flow = loss_of(pred_flow, target_flow)?;
    let frame = match weights.mode {
        FrameMode::Rgb => loss_st(pred_frame, target_frame, weights.alpha)?,
        FrameMode::Semantic { .. } => loss_l1(pred_frame, target_frame)?,
    };
    let total = flow
        .scale(weights.lambda_of)?
        .add(&frame.scale(weights.lambda_st)?)?;
    Ok(LossTerms { flow, frame, total })
}
