//! Supervision terms and their weighted combination.
//!
//! Every InfoNCE use (image-text, multi-view, nearest-neighbor) is the
//! symmetric average of the image→text and text→image directions.

use crate::error::{Error, Result};
use crate::tensor::{Real, Var};
use serde::{Deserialize, Serialize};

/// Weights of the auxiliary terms. The image-text term gets `1 - α - β - γ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.2,
            beta: 0.2,
            gamma: 0.2,
        }
    }
}

impl LossWeights {
    pub const CLIP_ONLY: LossWeights = LossWeights {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::Config(format!("{name} = {w} outside [0, 1]")));
            }
        }
        if self.alpha + self.beta + self.gamma > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "alpha + beta + gamma = {} exceeds 1",
                self.alpha + self.beta + self.gamma
            )));
        }
        Ok(())
    }

    pub fn clip_coef(&self) -> f64 {
        1.0 - self.alpha - self.beta - self.gamma
    }
}

/// Scalar value of every term plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub l_clip: f64,
    pub l_iss: f64,
    pub l_tss: f64,
    pub l_mvs: f64,
    pub l_nns: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.total, self.l_clip, self.l_iss, self.l_tss, self.l_mvs, self.l_nns]
            .iter()
            .all(|x| x.is_finite())
    }
}

/// Builds the report with `total` recomputed from the components.
pub fn declip_loss(
    l_clip: f64,
    l_iss: f64,
    l_tss: f64,
    l_mvs: f64,
    l_nns: f64,
    w: &LossWeights,
) -> Result<LossReport> {
    w.validate()?;
    Ok(LossReport {
        total: w.clip_coef() * l_clip + w.alpha * (l_iss + l_tss) + w.beta * l_mvs + w.gamma * l_nns,
        l_clip,
        l_iss,
        l_tss,
        l_mvs,
        l_nns,
    })
}

/// Differentiable terms of one step. Terms left as `None` were not
/// computed (their weight is zero) and contribute nothing.
pub struct LossTerms<'g, T: Real> {
    pub clip: Var<'g, T>,
    pub iss: Option<Var<'g, T>>,
    pub tss: Option<Var<'g, T>>,
    pub mvs: Option<Var<'g, T>>,
    pub nns: Option<Var<'g, T>>,
}

impl<'g, T: Real> LossTerms<'g, T> {
    /// Weighted total as a graph node, together with its report.
    pub fn combine(&self, w: &LossWeights) -> Result<(Var<'g, T>, LossReport)> {
        w.validate()?;
        let mut total = self.clip.scale(w.clip_coef());
        let weighted = [
            (self.iss, w.alpha),
            (self.tss, w.alpha),
            (self.mvs, w.beta),
            (self.nns, w.gamma),
        ];
        for (term, weight) in weighted {
            if let Some(t) = term {
                if weight != 0.0 {
                    total = total.add(t.scale(weight))?;
                }
            }
        }
        let val = |t: Option<Var<'g, T>>| t.map_or(0.0, |v| v.item().f64());
        let mut report = declip_loss(
            self.clip.item().f64(),
            val(self.iss),
            val(self.tss),
            val(self.mvs),
            val(self.nns),
            w,
        )?;
        report.total = total.item().f64();
        Ok((total, report))
    }
}

fn check_pair<T: Real>(op: &'static str, a: Var<'_, T>, b: Var<'_, T>) -> Result<usize> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sa != sb || sa[0] == 0 {
        return Err(Error::dim(op, &sa, &sb));
    }
    Ok(sa[0])
}

/// Symmetric InfoNCE over unit rows with logits `(zi · ztᵀ) · inv_tau`.
/// `inv_tau` is a positive scalar node, typically `exp(logit_scale)`.
pub fn infonce<'g, T: Real>(zi: Var<'g, T>, zt: Var<'g, T>, inv_tau: Var<'g, T>) -> Result<Var<'g, T>> {
    let n = check_pair("infonce", zi, zt)?;
    let s = inv_tau.value();
    if !s.is_scalar() || !(s.item() > T::zero()) || !s.item().is_finite() {
        return Err(Error::Parameter(format!(
            "temperature must be positive and finite (1/tau = {})",
            s.item()
        )));
    }
    let diag: Vec<usize> = (0..n).collect();
    let logits = zi.cosine_sim_matrix(zt)?.mul(inv_tau)?;
    let l_img = logits.log_softmax_rows()?.pick(&diag)?.mean().neg();
    let l_txt = logits.transpose()?.log_softmax_rows()?.pick(&diag)?.mean().neg();
    Ok(l_img.add(l_txt)?.scale(0.5))
}

/// [`infonce`] with a fixed temperature.
pub fn infonce_tau<'g, T: Real>(zi: Var<'g, T>, zt: Var<'g, T>, tau: f64) -> Result<Var<'g, T>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Parameter(format!("tau = {tau} must be positive")));
    }
    let inv = zi.graph().scalar(T::c(1.0 / tau));
    infonce(zi, zt, inv)
}

/// Image-text contrastive term on the primary views.
pub fn clip_loss<'g, T: Real>(img_feat: Var<'g, T>, txt_feat: Var<'g, T>, inv_tau: Var<'g, T>) -> Result<Var<'g, T>> {
    infonce(img_feat, txt_feat, inv_tau)
}

/// `-mean_i cos(a_i, b_i)`.
pub fn negative_cosine<'g, T: Real>(a: Var<'g, T>, b: Var<'g, T>) -> Result<Var<'g, T>> {
    let n = check_pair("negative_cosine", a, b)?;
    let prod = a.l2_normalize_rows()?.mul(b.l2_normalize_rows()?)?;
    Ok(prod.sum().scale(-1.0 / n as f64))
}

/// SimSiam objective with the projector outputs detached.
pub fn simsiam_loss<'g, T: Real>(
    z: Var<'g, T>,
    z_aug: Var<'g, T>,
    p: Var<'g, T>,
    p_aug: Var<'g, T>,
) -> Result<Var<'g, T>> {
    let a = negative_cosine(p, z_aug.stop_gradient())?;
    let b = negative_cosine(p_aug, z.stop_gradient())?;
    Ok(a.add(b)?.scale(0.5))
}

/// Output of [`mlm_loss`].
pub struct MlmLoss<'g, T: Real> {
    pub loss: Var<'g, T>,
    /// True when no position was masked and the loss is a constant zero.
    pub empty: bool,
}

/// Mean cross-entropy over masked positions of `[N × L × V]` logits.
/// `positions[s]` and `originals[s]` list the masked positions of sample
/// `s` and the token ids they held.
pub fn mlm_loss<'g, T: Real>(
    logits: Var<'g, T>,
    positions: &[Vec<usize>],
    originals: &[Vec<usize>],
) -> Result<MlmLoss<'g, T>> {
    let shape = logits.shape();
    if shape.len() != 3 || positions.len() != shape[0] || originals.len() != shape[0] {
        return Err(Error::dim("mlm_loss", &shape, &[positions.len()]));
    }
    let (n, l, v) = (shape[0], shape[1], shape[2]);
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for s in 0..n {
        if positions[s].len() != originals[s].len() {
            return Err(Error::dim("mlm_loss targets", &[positions[s].len()], &[originals[s].len()]));
        }
        for (&p, &o) in positions[s].iter().zip(&originals[s]) {
            if p >= l || o >= v {
                return Err(Error::Shape(format!("mlm target ({p}, {o}) outside [{l}, {v}]")));
            }
            rows.push(s * l + p);
            targets.push(o);
        }
    }
    if rows.is_empty() {
        return Ok(MlmLoss {
            loss: logits.graph().scalar(T::zero()),
            empty: true,
        });
    }
    let flat = logits.reshape(&[n * l, v])?;
    let loss = flat
        .gather_rows(&rows)?
        .log_softmax_rows()?
        .pick(&targets)?
        .mean()
        .neg();
    Ok(MlmLoss { loss, empty: false })
}

/// Three cross-view InfoNCE terms, summed (or averaged when `average`).
pub fn mvs_loss<'g, T: Real>(
    img: Var<'g, T>,
    img_aug: Var<'g, T>,
    txt: Var<'g, T>,
    txt_aug: Var<'g, T>,
    inv_tau: Var<'g, T>,
    average: bool,
) -> Result<Var<'g, T>> {
    let total = infonce(img, txt_aug, inv_tau)?
        .add(infonce(img_aug, txt, inv_tau)?)?
        .add(infonce(img_aug, txt_aug, inv_tau)?)?;
    Ok(if average { total.scale(1.0 / 3.0) } else { total })
}

/// InfoNCE between augmented image features and retrieved neighbor text
/// features. Neighbors are detached.
pub fn nns_loss<'g, T: Real>(img_aug: Var<'g, T>, nn_txt: Var<'g, T>, inv_tau: Var<'g, T>) -> Result<Var<'g, T>> {
    infonce(img_aug, nn_txt.stop_gradient(), inv_tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};

    #[test]
    fn weights_constraint() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            alpha: 0.5,
            beta: 0.5,
            gamma: 0.1,
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn default_weights_example() {
        let r = declip_loss(1.0, 0.5, 0.5, 1.0, 1.0, &LossWeights::default()).unwrap();
        assert!((r.total - 1.0).abs() < 1e-12);
        let r = declip_loss(1.7, 0.5, 0.5, 1.0, 1.0, &LossWeights::CLIP_ONLY).unwrap();
        assert_eq!(r.total, 1.7);
    }

    #[test]
    fn rejects_nonpositive_tau() {
        let g = Graph::<f64>::new();
        let z = g.constant(Tensor::eye(2));
        assert!(matches!(infonce_tau(z, z, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(infonce_tau(z, z, -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn mlm_without_positions_is_flagged_zero() {
        let g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros(&[2, 3, 5]));
        let out = mlm_loss(logits, &[vec![], vec![]], &[vec![], vec![]]).unwrap();
        assert!(out.empty);
        assert_eq!(out.loss.item(), 0.0);
    }
}
