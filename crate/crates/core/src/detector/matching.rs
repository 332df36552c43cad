//! Region-to-category matching probabilities.

use ndarray::Array1;

use super::TextEmbeddingTable;
use crate::error::{Error, Result};

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax over `[r·bg, r·c_1, ..., r·c_N]`; index 0 is background. The
/// background embedding is all zeros, so its logit is always 0 and max
/// subtraction keeps the computation stable for arbitrarily large logits.
pub fn match_probability(r: &Array1<f64>, table: &TextEmbeddingTable) -> Result<Vec<f64>> {
    if r.len() != table.dim() {
        return Err(Error::invalid(format!(
            "embedding width {} != table width {}",
            r.len(),
            table.dim()
        )));
    }
    let mut logits = Vec::with_capacity(table.len() + 1);
    logits.push(r.dot(&table.bg()));
    for i in 0..table.len() {
        logits.push(r.dot(&table.embedding(i)));
    }
    Ok(softmax(&logits))
}

/// Matching probabilities against background plus a category subset (indices
/// into the table), renormalized over exactly those options. Equivalent to
/// conditioning the full distribution on `{bg} ∪ subset`.
pub fn match_probability_subset(
    r: &Array1<f64>,
    table: &TextEmbeddingTable,
    subset: &[usize],
) -> Result<Vec<f64>> {
    if r.len() != table.dim() {
        return Err(Error::invalid(format!(
            "embedding width {} != table width {}",
            r.len(),
            table.dim()
        )));
    }
    if subset.is_empty() {
        return Err(Error::invalid("empty category subset"));
    }
    let mut logits = Vec::with_capacity(subset.len() + 1);
    logits.push(r.dot(&table.bg()));
    for &i in subset {
        if i >= table.len() {
            return Err(Error::invalid(format!("subset index {i} out of range")));
        }
        logits.push(r.dot(&table.embedding(i)));
    }
    Ok(softmax(&logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, arr2};

    fn table2() -> TextEmbeddingTable {
        TextEmbeddingTable::new(
            vec!["a".into(), "b".into()],
            arr2(&[[1.0, 0.0], [0.0, 1.0]]),
        )
        .unwrap()
    }

    #[test]
    fn orthonormal_fixture() {
        // r = c_a, two orthonormal classes: p(a) = e / (e + 2).
        let t = table2();
        let p = match_probability(&arr1(&[1.0, 0.0]), &t).unwrap();
        let e = 1.0f64.exp();
        assert_abs_diff_eq!(p[1], e / (e + 2.0), epsilon = 1e-9);
        assert_abs_diff_eq!(p[0], 1.0 / (e + 2.0), epsilon = 1e-9);
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_embedding_is_uniform() {
        let t = table2();
        let p = match_probability(&arr1(&[0.0, 0.0]), &t).unwrap();
        for &v in &p {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn stable_under_huge_logits() {
        let t = TextEmbeddingTable::new(
            vec!["a".into(), "b".into()],
            arr2(&[[1e4, 0.0], [0.0, -1e4]]),
        )
        .unwrap();
        let p = match_probability(&arr1(&[1.0, 1.0]), &t).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(p[1], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn subset_equals_conditioned_full_distribution() {
        let t = TextEmbeddingTable::new(
            vec!["a".into(), "b".into(), "c".into()],
            arr2(&[[0.5, 0.2], [-0.3, 0.9], [0.1, -0.7]]),
        )
        .unwrap();
        let r = arr1(&[0.4, -1.2]);
        let full = match_probability(&r, &t).unwrap();
        let sub = match_probability_subset(&r, &t, &[0, 2]).unwrap();
        let mass = full[0] + full[1] + full[3];
        assert_abs_diff_eq!(sub[0], full[0] / mass, epsilon = 1e-12);
        assert_abs_diff_eq!(sub[1], full[1] / mass, epsilon = 1e-12);
        assert_abs_diff_eq!(sub[2], full[3] / mass, epsilon = 1e-12);
    }

    #[test]
    fn width_and_subset_validation() {
        let t = table2();
        assert!(match_probability(&arr1(&[1.0]), &t).is_err());
        assert!(match_probability_subset(&arr1(&[1.0, 0.0]), &t, &[]).is_err());
        assert!(match_probability_subset(&arr1(&[1.0, 0.0]), &t, &[5]).is_err());
    }
}
