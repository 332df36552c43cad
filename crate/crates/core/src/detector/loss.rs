//! Detection loss: matching cross-entropy plus objectness BCE, with exact
//! gradients for the projection and objectness parameters.

use ndarray::{Array1, Array2};

use super::{DetectorParams, Target, TextEmbeddingTable};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub total: f64,
    /// Mean cross-entropy of the matching softmax (background = class 0).
    pub matching: f64,
    /// Mean binary cross-entropy of the objectness logit.
    pub objectness: f64,
}

#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub w_proj: Array2<f64>,
    pub b_proj: Array1<f64>,
    pub w_obj: Array1<f64>,
    pub b_obj: f64,
}

/// Numerically stable `log(1 + e^{-|o|}) + max(o, 0) - o·y`.
fn bce_with_logit(o: f64, y: f64) -> f64 {
    o.max(0.0) - o * y + (-o.abs()).exp().ln_1p()
}

fn sigmoid(o: f64) -> f64 {
    if o >= 0.0 {
        1.0 / (1.0 + (-o).exp())
    } else {
        let e = o.exp();
        e / (1.0 + e)
    }
}

/// Loss and gradients over a batch of `(pooled feature, target)` samples.
///
/// Per sample: `r = W·f + b`, matching CE over `[bg, c_1..c_N]` toward the
/// target, objectness BCE toward `target != background`. Both terms are
/// averaged over the batch and summed. Gradients are exact; the embedding
/// table receives none (it is fixed by design).
pub fn detection_loss(
    batch: &[(Array1<f64>, Target)],
    params: &DetectorParams,
    table: &TextEmbeddingTable,
) -> Result<(LossBreakdown, ParamGrads)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if params.embed_dim() != table.dim() {
        return Err(Error::invalid(format!(
            "projection embeds into {} dims but table is {}-dimensional",
            params.embed_dim(),
            table.dim()
        )));
    }
    let n = batch.len() as f64;
    let mut grads = ParamGrads {
        w_proj: Array2::zeros(params.w_proj.raw_dim()),
        b_proj: Array1::zeros(params.b_proj.len()),
        w_obj: Array1::zeros(params.w_obj.len()),
        b_obj: 0.0,
    };
    let mut matching = 0.0;
    let mut objectness = 0.0;
    for (f, target) in batch {
        if f.len() != params.feature_dim() {
            return Err(Error::invalid("feature width mismatch in batch"));
        }
        let class_index = match target {
            Target::Background => 0usize,
            Target::Class(c) => {
                if *c >= table.len() {
                    return Err(Error::invalid(format!(
                        "target class {c} outside the embedding table"
                    )));
                }
                c + 1
            }
        };
        let r = params.w_proj.dot(f) + &params.b_proj;
        // Logits [bg, classes...]; bg logit is identically 0.
        let mut logits = Vec::with_capacity(table.len() + 1);
        logits.push(0.0);
        for i in 0..table.len() {
            logits.push(r.dot(&table.embedding(i)));
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let log_p_target = logits[class_index] - max - z.ln();
        matching -= log_p_target;
        // d(ce)/d(logit_j) = p_j - 1[j = target]; bg logit is constant so
        // only class logits feed back into r.
        let mut dr = Array1::zeros(table.dim());
        for j in 1..logits.len() {
            let mut g = exps[j] / z;
            if j == class_index {
                g -= 1.0;
            }
            dr.scaled_add(g, &table.embedding(j - 1));
        }
        // r = W f + b.
        for (i, &dri) in dr.iter().enumerate() {
            grads.b_proj[i] += dri / n;
            let mut row = grads.w_proj.row_mut(i);
            for (j, &fj) in f.iter().enumerate() {
                row[j] += dri * fj / n;
            }
        }
        // Objectness toward 1 for class targets, 0 for background.
        let y = if class_index == 0 { 0.0 } else { 1.0 };
        let o = params.w_obj.dot(f) + params.b_obj;
        objectness += bce_with_logit(o, y);
        let do_ = sigmoid(o) - y;
        grads.w_obj.scaled_add(do_ / n, f);
        grads.b_obj += do_ / n;
    }
    matching /= n;
    objectness /= n;
    Ok((
        LossBreakdown {
            total: matching + objectness,
            matching,
            objectness,
        },
        grads,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, arr2};

    fn table3() -> TextEmbeddingTable {
        TextEmbeddingTable::new(
            vec!["a".into(), "b".into(), "c".into()],
            arr2(&[[0.8, -0.2], [-0.5, 0.6], [0.1, 0.9]]),
        )
        .unwrap()
    }

    fn zero_params() -> DetectorParams {
        DetectorParams {
            w_proj: Array2::zeros((2, 3)),
            b_proj: Array1::zeros(2),
            w_obj: Array1::zeros(3),
            b_obj: 0.0,
        }
    }

    #[test]
    fn uniform_probabilities_give_log_n_plus_one() {
        // Zero params make r = 0, so the matching term is ln(N + 1) exactly.
        let table = table3();
        let params = zero_params();
        let batch = vec![(arr1(&[1.0, 2.0, 3.0]), Target::Class(1))];
        let (loss, _) = detection_loss(&batch, &params, &table).unwrap();
        assert_abs_diff_eq!(loss.matching, 4.0f64.ln(), epsilon = 1e-12);
        // Objectness at logit 0 is ln 2.
        assert_abs_diff_eq!(loss.objectness, 2.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let table = table3();
        let mut params = DetectorParams::init(3, 2, 11).unwrap();
        params.b_obj = 0.3;
        let batch = vec![
            (arr1(&[0.5, -1.0, 2.0]), Target::Class(0)),
            (arr1(&[1.5, 0.2, -0.7]), Target::Background),
            (arr1(&[-0.3, 0.9, 0.1]), Target::Class(2)),
        ];
        let (_, grads) = detection_loss(&batch, &params, &table).unwrap();
        let eps = 1e-6;
        let loss_of = |p: &DetectorParams| detection_loss(&batch, p, &table).unwrap().0.total;
        // Check every projection weight, biases, and the objectness head.
        for i in 0..2 {
            for j in 0..3 {
                let mut plus = params.clone();
                plus.w_proj[(i, j)] += eps;
                let mut minus = params.clone();
                minus.w_proj[(i, j)] -= eps;
                let num = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
                assert_abs_diff_eq!(grads.w_proj[(i, j)], num, epsilon = 1e-6);
            }
            let mut plus = params.clone();
            plus.b_proj[i] += eps;
            let mut minus = params.clone();
            minus.b_proj[i] -= eps;
            let num = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
            assert_abs_diff_eq!(grads.b_proj[i], num, epsilon = 1e-6);
        }
        for j in 0..3 {
            let mut plus = params.clone();
            plus.w_obj[j] += eps;
            let mut minus = params.clone();
            minus.w_obj[j] -= eps;
            let num = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
            assert_abs_diff_eq!(grads.w_obj[j], num, epsilon = 1e-6);
        }
        let mut plus = params.clone();
        plus.b_obj += eps;
        let mut minus = params.clone();
        minus.b_obj -= eps;
        let num = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
        assert_abs_diff_eq!(grads.b_obj, num, epsilon = 1e-6);
    }

    #[test]
    fn unknown_class_rejected() {
        let table = table3();
        let params = zero_params();
        let batch = vec![(arr1(&[0.0, 0.0, 0.0]), Target::Class(3))];
        assert!(detection_loss(&batch, &params, &table).is_err());
    }

    #[test]
    fn empty_batch_rejected() {
        assert!(detection_loss(&[], &zero_params(), &table3()).is_err());
    }
}
