//! Attack losses, embedding regularizers and the combined objective
//! `L(F(x), y) + λ·R(current, original)`.

use serde::{Deserialize, Serialize};

use crate::autograd::{log_softmax, Graph, Tensor, Var};
use crate::domain::{AttackMode, RegularizerMetric};
use crate::error::{NaeError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub total: f64,
    pub loss_term: f64,
    pub reg_term: f64,
}

fn check_logits(logits: &[f64]) -> Result<()> {
    if logits.is_empty() {
        return Err(NaeError::InvalidShape("empty logits".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(NaeError::NumericalDivergence("non-finite logits".into()));
    }
    Ok(())
}

fn check_label(logits: &[f64], y: usize) -> Result<()> {
    check_logits(logits)?;
    if y >= logits.len() {
        return Err(NaeError::InvalidLabel { label: y, classes: logits.len() });
    }
    Ok(())
}

/// `-log softmax(logits)[y]`.
pub fn targeted_ce_loss(logits: &[f64], y: usize) -> Result<f64> {
    check_label(logits, y)?;
    Ok(-log_softmax(logits)[y])
}

/// Negated cross-entropy on the true class; minimizing it pushes the true class down.
pub fn untargeted_loss(logits: &[f64], y_true: usize) -> Result<f64> {
    Ok(-targeted_ce_loss(logits, y_true)?)
}

/// Cross-entropy toward a one-hot label, making an out-of-distribution input look confident.
pub fn ood_to_id_loss(logits: &[f64], y: usize) -> Result<f64> {
    targeted_ce_loss(logits, y)
}

/// Cross-entropy between the uniform distribution and the softmax. Its minimum `ln C`
/// is reached exactly when the softmax is uniform.
pub fn id_to_ood_loss(logits: &[f64]) -> Result<f64> {
    check_logits(logits)?;
    if logits.len() < 2 {
        return Err(NaeError::InvalidShape("id_to_ood needs at least two classes".into()));
    }
    let ls = log_softmax(logits);
    Ok(-ls.iter().sum::<f64>() / ls.len() as f64)
}

/// Loss for `mode`; `label` must be present for every mode except `IdToOod`.
pub fn attack_loss(logits: &[f64], mode: AttackMode, label: Option<usize>) -> Result<f64> {
    match mode {
        AttackMode::IdToOod => id_to_ood_loss(logits),
        _ => {
            let y = label.ok_or_else(|| NaeError::InvalidConfig(format!("{mode:?} needs a label")))?;
            match mode {
                AttackMode::Targeted => targeted_ce_loss(logits, y),
                AttackMode::Untargeted => untargeted_loss(logits, y),
                AttackMode::OodToId => ood_to_id_loss(logits, y),
                AttackMode::IdToOod => unreachable!(),
            }
        }
    }
}

/// Distance between a perturbed embedding and its original.
///
/// Euclidean is the Frobenius distance; cosine is `1 - cos(perturbed, original)`
/// over the flattened matrices, so both read "lower is closer".
pub fn embedding_regularizer(perturbed: &[f64], original: &[f64], metric: RegularizerMetric) -> Result<f64> {
    if perturbed.len() != original.len() {
        return Err(NaeError::InvalidShape(format!(
            "regularizer operands differ: {} vs {}",
            perturbed.len(),
            original.len()
        )));
    }
    match metric {
        RegularizerMetric::Euclidean => {
            Ok(perturbed.iter().zip(original).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        }
        RegularizerMetric::Cosine => {
            let na = perturbed.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = original.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                return Err(NaeError::DegenerateInput("cosine distance of a zero vector".into()));
            }
            if perturbed == original {
                return Ok(0.0);
            }
            let dot: f64 = perturbed.iter().zip(original).map(|(a, b)| a * b).sum();
            Ok((1.0 - dot / (na * nb)).max(0.0))
        }
    }
}

pub fn total_objective(loss: f64, reg: f64, lambda: f64) -> Result<ObjectiveValue> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(NaeError::InvalidConfig(format!("lambda must be a finite value >= 0, got {lambda}")));
    }
    if !loss.is_finite() || !reg.is_finite() {
        return Err(NaeError::NumericalDivergence(format!("objective terms loss={loss} reg={reg}")));
    }
    let total = if lambda == 0.0 { loss } else { loss + lambda * reg };
    Ok(ObjectiveValue { total, loss_term: loss, reg_term: reg })
}

/// Graph form of [`attack_loss`] over a logits node.
pub fn attack_loss_graph(g: &mut Graph, logits: Var, mode: AttackMode, label: Option<usize>) -> Result<Var> {
    let c = g.value(logits).len();
    check_logits(g.data(logits))?;
    let ls = g.log_softmax(logits);
    let pick = |g: &mut Graph, y: usize| -> Result<Var> {
        if y >= c {
            return Err(NaeError::InvalidLabel { label: y, classes: c });
        }
        let mut onehot = vec![0.0; c];
        onehot[y] = 1.0;
        let mask = g.constant(Tensor::vector(onehot));
        let picked = g.mul(ls, mask);
        Ok(g.sum(picked))
    };
    match mode {
        AttackMode::Targeted | AttackMode::OodToId => {
            let y = label.ok_or_else(|| NaeError::InvalidConfig(format!("{mode:?} needs a label")))?;
            let lp = pick(g, y)?;
            Ok(g.scale(lp, -1.0))
        }
        AttackMode::Untargeted => {
            let y = label.ok_or_else(|| NaeError::InvalidConfig("untargeted needs a label".into()))?;
            pick(g, y)
        }
        AttackMode::IdToOod => {
            if c < 2 {
                return Err(NaeError::InvalidShape("id_to_ood needs at least two classes".into()));
            }
            let s = g.sum(ls);
            Ok(g.scale(s, -1.0 / c as f64))
        }
    }
}

/// Graph form of [`embedding_regularizer`] with `original` held constant.
pub fn regularizer_graph(g: &mut Graph, current: Var, original: &[f64], metric: RegularizerMetric) -> Result<Var> {
    if g.value(current).len() != original.len() {
        return Err(NaeError::InvalidShape("regularizer operands differ".into()));
    }
    let shape = g.value(current).shape().to_vec();
    let orig = g.constant(Tensor::new(shape, original.to_vec()));
    match metric {
        RegularizerMetric::Euclidean => {
            let diff = g.sub(current, orig);
            let sq = g.square(diff);
            let ss = g.sum(sq);
            // The norm has no derivative at zero; the squared sum (also zero there)
            // supplies the zero subgradient instead.
            if g.data(ss)[0] == 0.0 {
                Ok(ss)
            } else {
                Ok(g.sqrt(ss))
            }
        }
        RegularizerMetric::Cosine => {
            let nb = original.iter().map(|v| v * v).sum::<f64>().sqrt();
            let sq = g.square(current);
            let ss = g.sum(sq);
            if nb == 0.0 || g.data(ss)[0] == 0.0 {
                return Err(NaeError::DegenerateInput("cosine distance of a zero vector".into()));
            }
            let na = g.sqrt(ss);
            let prod = g.mul(current, orig);
            let dot = g.sum(prod);
            let cos = g.div(dot, na);
            let cos = g.scale(cos, -1.0 / nb);
            Ok(g.offset(cos, 1.0))
        }
    }
}

/// Loss value and its gradient with respect to the logits.
pub fn attack_loss_with_grad(logits: &[f64], mode: AttackMode, label: Option<usize>) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let l = g.param(Tensor::vector(logits.to_vec()));
    let out = attack_loss_graph(&mut g, l, mode, label)?;
    let grads = g.backward(out);
    Ok((g.data(out)[0], grads.get_or_zero(l, logits.len())))
}
