use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{kernels, Tensor};

pub const METRIC_SEED: u64 = 9001;
pub const METRIC_DIM: usize = 32;

/// Frozen token embedding table the similarity score is computed against.
/// Rows have unit L2 norm; nothing ever trains it.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricTable {
    rows: Tensor<f64>,
}

impl MetricTable {
    /// The standard table: seeded Gaussian rows, normalised.
    pub fn new(vocab_size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(METRIC_SEED);
        let mut t = Tensor::<f64>::randn(&[vocab_size, METRIC_DIM], 1.0, &mut rng);
        for i in 0..vocab_size {
            let row = t.row_mut(i);
            let n = kernels::dot(row, row).sqrt();
            row.iter_mut().for_each(|x| *x /= n);
        }
        Self { rows: t }
    }

    /// Identity rows: every pair of distinct tokens is orthogonal.
    pub fn orthogonal(vocab_size: usize) -> Self {
        Self {
            rows: Tensor::eye(vocab_size),
        }
    }

    /// Wraps a custom table; rows must already be unit length.
    pub fn from_tensor(rows: Tensor<f64>) -> Result<Self> {
        if rows.rank() != 2 || rows.rows() == 0 {
            return Err(Error::Contract("metric table must be a non-empty matrix".into()));
        }
        for i in 0..rows.rows() {
            let n = kernels::dot(rows.row(i), rows.row(i)).sqrt();
            if (n - 1.0).abs() > 1e-9 {
                return Err(Error::Contract(format!("metric table row {i} has norm {n}")));
            }
        }
        Ok(Self { rows })
    }

    pub fn vocab_size(&self) -> usize {
        self.rows.rows()
    }

    fn check(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.vocab_size()) {
            Some(&t) => Err(Error::Index {
                what: "metric table",
                index: t as i64,
                bound: self.vocab_size(),
            }),
            None => Ok(()),
        }
    }

    pub fn cosine(&self, a: usize, b: usize) -> f64 {
        kernels::dot(self.rows.row(a), self.rows.row(b))
    }
}

/// Greedy-matching embedding F1 between a prediction and a reference.
///
/// Precision averages, over predicted tokens, the best cosine to any
/// reference token; recall does the same the other way round. An empty
/// prediction scores 0.
pub fn semantic_score(pred: &[usize], reference: &[usize], table: &MetricTable) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Contract("reference answer is empty".into()));
    }
    table.check(pred)?;
    table.check(reference)?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let best = |xs: &[usize], ys: &[usize]| -> f64 {
        let total: f64 = xs
            .iter()
            .map(|&x| ys.iter().map(|&y| table.cosine(x, y)).fold(f64::NEG_INFINITY, f64::max))
            .sum();
        total / xs.len() as f64
    };
    let p = best(pred, reference);
    let r = best(reference, pred);
    let f = if p + r <= 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    Ok(f.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_is_one() {
        let t = MetricTable::new(64);
        assert_eq!(semantic_score(&[5, 9, 5], &[5, 9, 5], &t).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_orthogonal_is_zero() {
        let t = MetricTable::orthogonal(16);
        assert!(semantic_score(&[1, 2], &[3, 4, 5], &t).unwrap().abs() < 1e-9);
    }

    #[test]
    fn prefix_hand_case() {
        let t = MetricTable::orthogonal(16);
        // p = 1, r = 2/5
        let want = 2.0 * 1.0 * 0.4 / 1.4;
        let got = semantic_score(&[1, 2], &[1, 2, 3, 4, 5], &t).unwrap();
        assert!((got - want).abs() < 1e-12, "{got}");
    }

    #[test]
    fn empty_prediction_and_bad_tokens() {
        let t = MetricTable::new(8);
        assert_eq!(semantic_score(&[], &[1], &t).unwrap(), 0.0);
        assert!(matches!(semantic_score(&[9], &[1], &t), Err(Error::Index { .. })));
        assert!(matches!(semantic_score(&[1], &[], &t), Err(Error::Contract(_))));
    }

    #[test]
    fn table_is_fixed_and_normalised() {
        let a = MetricTable::new(40);
        assert_eq!(a, MetricTable::new(40));
        for i in 0..40 {
            assert!((a.cosine(i, i) - 1.0).abs() < 1e-12);
        }
        assert!(MetricTable::from_tensor(Tensor::from_rows(&[&[1.0, 1.0]]).unwrap()).is_err());
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(
            pred in prop::collection::vec(0usize..30, 1..6),
            reference in prop::collection::vec(0usize..30, 1..6),
        ) {
            let t = MetricTable::new(30);
            let a = semantic_score(&pred, &reference, &t).unwrap();
            let b = semantic_score(&reference, &pred, &t).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
