//! Fleiss' kappa over nominal categories.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use super::{AnnotationError, LikertScore};

/// Items × categories count matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CountMatrix {
    pub categories: Vec<String>,
    pub rows: Vec<Vec<u32>>,
}

impl CountMatrix {
    /// Builds a five-column matrix from per-item Likert ratings.
    pub fn likert<I, R>(items: I) -> Self
    where
        I: IntoIterator<Item = R>,
        R: IntoIterator<Item = LikertScore>,
    {
        let rows = items
            .into_iter()
            .map(|ratings| {
                let mut row = vec![0u32; LikertScore::ALL.len()];
                for s in ratings {
                    row[s.index()] += 1;
                }
                row
            })
            .collect();
        CountMatrix {
            categories: LikertScore::ALL.iter().map(|s| s.label()).collect(),
            rows,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleissKappaResult {
    /// `None` when expected agreement is 1 (a single category used throughout).
    pub kappa: Option<f64>,
    pub observed_agreement: f64,
    pub expected_agreement: f64,
    /// Per-category kappa; categories never or always used are omitted.
    pub per_category_agreement: BTreeMap<String, f64>,
    pub n_items: usize,
    pub n_raters: usize,
    #[serde(default)]
    pub degenerate: bool,
}

pub fn fleiss_kappa(matrix: &CountMatrix) -> Result<FleissKappaResult, AnnotationError> {
    let k = matrix.categories.len();
    let Some(first) = matrix.rows.first() else {
        return Err(AnnotationError::EmptyInput);
    };
    let n: u32 = first.iter().sum();
    for (i, row) in matrix.rows.iter().enumerate() {
        if row.len() != k || row.iter().sum::<u32>() != n {
            return Err(AnnotationError::RaggedMatrix { row: i });
        }
    }
    if n < 2 {
        return Err(AnnotationError::TooFewRaters(n as usize));
    }
    let n_items = matrix.rows.len();
    let nf = f64::from(n);
    let total = n_items as f64 * nf;

    let p_bar = matrix
        .rows
        .iter()
        .map(|row| {
            let agree: f64 = row.iter().map(|&c| f64::from(c) * (f64::from(c) - 1.0)).sum();
            agree / (nf * (nf - 1.0))
        })
        .sum::<f64>()
        / n_items as f64;

    let col_totals: Vec<f64> = (0..k)
        .map(|j| matrix.rows.iter().map(|r| f64::from(r[j])).sum())
        .collect();
    let p_j: Vec<f64> = col_totals.iter().map(|c| c / total).collect();
    let p_e: f64 = p_j.iter().map(|p| p * p).sum();

    let mut per_category = BTreeMap::new();
    for (j, &p) in p_j.iter().enumerate() {
        let q = 1.0 - p;
        if p == 0.0 || q <= 0.0 {
            continue;
        }
        let disagreement: f64 = matrix
            .rows
            .iter()
            .map(|r| f64::from(r[j]) * (nf - f64::from(r[j])))
            .sum();
        let kj = 1.0 - disagreement / (n_items as f64 * nf * (nf - 1.0) * p * q);
        per_category.insert(matrix.categories[j].clone(), kj);
    }

    let degenerate = (1.0 - p_e).abs() < 1e-15;
    Ok(FleissKappaResult {
        kappa: (!degenerate).then(|| (p_bar - p_e) / (1.0 - p_e)),
        observed_agreement: p_bar,
        expected_agreement: p_e,
        per_category_agreement: per_category,
        n_items,
        n_raters: n as usize,
        degenerate,
    })
}

/// Kappa over the items currently rated by the most raters.
///
/// Takes `(item, rater, score)` triples in submission order; a later triple for
/// the same (item, rater) supersedes an earlier one. With `r` the largest
/// number of distinct raters on any item, only items with exactly `r` raters
/// enter the matrix. Returns `None` when `r < 2`.
pub fn kappa_fully_rated<I, R>(
    ratings: impl IntoIterator<Item = (I, R, LikertScore)>,
) -> Option<Result<FleissKappaResult, AnnotationError>>
where
    I: Eq + Hash + Ord + Clone,
    R: Eq + Hash + Clone,
{
    let mut latest: HashMap<I, HashMap<R, LikertScore>> = HashMap::new();
    for (item, rater, score) in ratings {
        latest.entry(item).or_default().insert(rater, score);
    }
    let r = latest.values().map(HashMap::len).max()?;
    if r < 2 {
        return None;
    }
    // deterministic row order
    let items: BTreeSet<&I> = latest
        .iter()
        .filter(|(_, raters)| raters.len() == r)
        .map(|(i, _)| i)
        .collect();
    let matrix = CountMatrix::likert(items.into_iter().map(|i| latest[i].values().copied()));
    Some(fleiss_kappa(&matrix))
}
