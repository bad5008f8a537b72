//! Training objectives. Every norm is an unreduced sum of squares, summed
//! over the batch and divided by the batch size.

use serde::{Deserialize, Serialize};

use crate::data::pool_mask_batch;
use crate::error::{invalid, shape_err, Result};
use crate::generator::{masked_mean_std, mean_std};
use crate::tensor::{Array, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_c: 2.0,
            lambda_adv: 10.0,
        }
    }
}

/// Per-step loss values. `g_adv` and `d_adv` are absent when no
/// discriminator is trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub style: f64,
    pub content: f64,
    pub g_adv: Option<f64>,
    pub d_adv: Option<f64>,
    pub total_g: f64,
}

impl LossReport {
    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("style", Some(self.style)),
            ("content", Some(self.content)),
            ("g_adv", self.g_adv),
            ("d_adv", self.d_adv),
            ("total_g", Some(self.total_g)),
        ]
        .into_iter()
        .find(|(_, v)| v.is_some_and(|v| !v.is_finite()))
        .map(|(name, _)| name)
    }
}

fn batch_sum_sq(t: &Tape, x: &Var, batch: usize) -> Var {
    t.scale(&t.sum_all(&t.square(x)), 1.0 / batch as f64)
}

/// Distance between the masked statistics of the harmonized image's features
/// and the whole-image statistics of the background's, summed over levels.
pub fn style_loss(t: &Tape, harmonized: &[Var], background: &[Var], masks: &[Array]) -> Result<Var> {
    if harmonized.len() != background.len() || harmonized.len() != masks.len() || harmonized.is_empty() {
        return Err(invalid!("style loss needs matching, non-empty level lists"));
    }
    let batch = harmonized[0].shape()[0];
    let mut total: Option<Var> = None;
    for ((fo, fb), m) in harmonized.iter().zip(background).zip(masks) {
        if fo.shape() != fb.shape() {
            return Err(shape_err!("level features {:?} vs {:?}", fo.shape(), fb.shape()));
        }
        let so = masked_mean_std(t, fo, m)?;
        let (mu_b, sigma_b) = mean_std(t, fb);
        let term = t.add(
            &batch_sum_sq(t, &t.sub(&so.mean, &mu_b), batch),
            &batch_sum_sq(t, &t.sub(&so.std, &sigma_b), batch),
        );
        total = Some(match total {
            Some(acc) => t.add(&acc, &term),
            None => term,
        });
    }
    Ok(total.expect("at least one level"))
}

/// Squared distance between bottleneck features.
pub fn content_loss(t: &Tape, harmonized: &Var, composite: &Var) -> Result<Var> {
    if harmonized.shape() != composite.shape() {
        return Err(shape_err!("{:?} vs {:?}", harmonized.shape(), composite.shape()));
    }
    Ok(batch_sum_sq(t, &t.sub(harmonized, composite), harmonized.shape()[0]))
}

/// The `n × n` target grid: the mask pooled to `n × n` and thresholded.
pub fn target_grid(mask: &Array, n: usize) -> Result<Array> {
    let h = mask.shape()[2];
    if n == 0 || h % n != 0 || mask.shape()[3] != h {
        return Err(invalid!("mask {:?} cannot be pooled to {n}x{n}", mask.shape()));
    }
    pool_mask_batch(mask, h / n)
}

/// Harmonized and composite predictions should match the target grid,
/// background predictions should be zero.
pub fn d_loss(t: &Tape, pred_harmonized: &Var, pred_composite: &Var, pred_background: &Var, target: &Array) -> Result<Var> {
    for p in [pred_harmonized, pred_composite, pred_background] {
        if p.value().shape() != target.shape() {
            return Err(shape_err!("prediction {:?} vs target {:?}", p.shape(), target.shape()));
        }
    }
    let batch = target.shape()[0];
    let tv = Var::constant(target.clone());
    let a = batch_sum_sq(t, &t.sub(pred_harmonized, &tv), batch);
    let b = batch_sum_sq(t, &t.sub(pred_composite, &tv), batch);
    let c = batch_sum_sq(t, pred_background, batch);
    Ok(t.add(&t.add(&a, &b), &c))
}

/// The generator wants every cell predicted harmonious (zero).
pub fn g_adv_loss(t: &Tape, pred_harmonized: &Var) -> Var {
    batch_sum_sq(t, pred_harmonized, pred_harmonized.shape()[0])
}

/// `style + λ_c·content + λ_adv·g_adv`, the adversarial term omitted when
/// absent.
pub fn total_g_loss(t: &Tape, style: &Var, content: &Var, g_adv: Option<&Var>, w: &LossWeights) -> Var {
    let base = t.add(style, &t.scale(content, w.lambda_c));
    match g_adv {
        Some(adv) => t.add(&base, &t.scale(adv, w.lambda_adv)),
        None => base,
    }
}
