use std::collections::HashSet;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::corpus::tokenize;
use crate::tensor::Scalar;

use super::{EmbeddingTable, KeywordExtractor};

/// Unique n-grams over total n-grams across the whole response set.
pub fn distinct_n<T: AsRef<str>>(responses: &[T], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let mut unique = HashSet::new();
    let mut total = 0usize;
    for r in responses {
        let toks = tokenize(r.as_ref());
        for gram in toks.windows(n) {
            unique.insert(gram.to_vec());
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        unique.len() as f64 / total as f64
    }
}

/// Cosine similarities between profile keywords (rows) and response
/// keywords (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix<S> {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub values: Vec<S>,
}

impl<S: Scalar> SimilarityMatrix<S> {
    pub fn build(rows: Vec<String>, cols: Vec<String>, table: &EmbeddingTable<S>) -> Self {
        let mut values = Vec::with_capacity(rows.len() * cols.len());
        for p in &rows {
            for r in &cols {
                values.push(table.cosine(p, r).unwrap_or(S::zero()));
            }
        }
        Self { rows, cols, values }
    }

    pub fn get(&self, i: usize, j: usize) -> S {
        self.values[i * self.cols.len() + j]
    }

    /// Mean over rows of each row's maximum.
    pub fn mean_row_max(&self) -> Option<S> {
        if self.rows.is_empty() || self.cols.is_empty() {
            return None;
        }
        let n = self.cols.len();
        let total: S = self
            .values
            .chunks(n)
            .map(|row| row.iter().copied().fold(S::neg_infinity(), S::max))
            .sum();
        Some(total / S::from_usize(self.rows.len()).unwrap())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PDistance<S> {
    pub value: S,
    /// No usable keyword on one side; `value` is then zero.
    pub degenerate: bool,
}

/// Persona proximity of a response: mean over profile keywords of the best
/// cosine match among response keywords.
pub fn p_distance<S: Scalar, T: AsRef<str>>(
    profile: &[T],
    response: &str,
    extractor: &KeywordExtractor,
    table: &EmbeddingTable<S>,
) -> PDistance<S> {
    let joined: Vec<&str> = profile.iter().map(AsRef::as_ref).collect();
    let known = |words: Vec<String>| -> Vec<String> {
        words.into_iter().filter(|w| table.get(w).is_some()).collect()
    };
    let rows = known(extractor.extract(&joined.join(" . ")));
    let cols = known(extractor.extract(response));
    match SimilarityMatrix::build(rows, cols, table).mean_row_max() {
        Some(value) => PDistance { value, degenerate: false },
        None => PDistance { value: S::zero(), degenerate: true },
    }
}

/// Per-dimension population variance of a set of vectors.
pub fn dimension_variances<S: Scalar>(vectors: &[Vec<S>]) -> Vec<S> {
    let Some(first) = vectors.first() else {
        return Vec::new();
    };
    let n = S::from_usize(vectors.len()).unwrap();
    (0..first.len())
        .map(|d| {
            let mean = vectors.iter().map(|v| v[d]).sum::<S>() / n;
            vectors.iter().map(|v| (v[d] - mean) * (v[d] - mean)).sum::<S>() / n
        })
        .collect()
}

/// Number of dimensions whose variance across the set exceeds `threshold`.
pub fn active_units_of<S: Scalar>(means: &[Vec<S>], threshold: S) -> usize {
    dimension_variances(means).into_iter().filter(|&v| v > threshold).count()
}

/// Coordinates of the mean-centred vectors on their top two principal axes.
pub fn principal_components_2(vectors: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let n = vectors.len();
    if n == 0 {
        return Vec::new();
    }
    let k = vectors[0].len();
    let mean: Vec<f64> = (0..k).map(|d| vectors.iter().map(|v| v[d]).sum::<f64>() / n as f64).collect();
    let centred = DMatrix::from_fn(n, k, |i, d| vectors[i][d] - mean[d]);
    let cov = centred.transpose() * &centred / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axis = |j: usize| -> Vec<f64> {
        let Some(&col) = order.get(j) else {
            return vec![0.0; k];
        };
        let mut v: Vec<f64> = eig.eigenvectors.column(col).iter().copied().collect();
        // Sign convention: largest-magnitude loading is positive.
        let pivot = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        v
    };
    let (a1, a2) = (axis(0), axis(1));
    (0..n)
        .map(|i| {
            let row = centred.row(i);
            let p1 = row.iter().zip(&a1).map(|(x, y)| x * y).sum();
            let p2 = row.iter().zip(&a2).map(|(x, y)| x * y).sum();
            [p1, p2]
        })
        .collect()
}

/// Accuracy of assigning each test point to the closest class centroid,
/// with centroids computed from the reference points.
pub fn nearest_centroid_accuracy(
    reference: &[(Vec<f64>, String)],
    test: &[(Vec<f64>, String)],
) -> f64 {
    let mut labels: Vec<&String> = reference.iter().map(|(_, l)| l).collect::<HashSet<_>>().into_iter().collect();
    labels.sort();
    if labels.is_empty() || test.is_empty() {
        return 0.0;
    }
    let dim = reference[0].0.len();
    let centroids: Vec<Vec<f64>> = labels
        .iter()
        .map(|&label| {
            let members: Vec<&Vec<f64>> = reference.iter().filter(|(_, l)| l == label).map(|(v, _)| v).collect();
            (0..dim)
                .map(|d| members.iter().map(|v| v[d]).sum::<f64>() / members.len() as f64)
                .collect()
        })
        .collect();
    let correct = test
        .iter()
        .filter(|(v, label)| {
            let best = centroids
                .iter()
                .enumerate()
                .map(|(i, c)| (i, v.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, _)| i)
                .unwrap();
            labels[best] == label
        })
        .count();
    correct as f64 / test.len() as f64
}
