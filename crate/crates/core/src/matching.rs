//! Query-to-target match costs and an exact rectangular Hungarian solver.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{giou, l1_box, BBox};
use crate::model::Predictions;

/// Index stored for queries that carry no target.
pub const NO_OBJECT: i64 = -1;

/// A box with a hard class label. Ground truth objects and score-stripped
/// teacher boxes both reach the matcher in this form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub bbox: BBox,
    pub class: usize,
}

impl LabeledBox {
    pub fn new(bbox: BBox, class: usize) -> Self {
        Self { bbox, class }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawWeights", into = "RawWeights")]
pub struct CostWeights {
    w_cls: f64,
    w_l1: f64,
    w_giou: f64,
}

#[derive(Serialize, Deserialize)]
struct RawWeights {
    w_cls: f64,
    w_l1: f64,
    w_giou: f64,
}

impl TryFrom<RawWeights> for CostWeights {
    type Error = Error;

    fn try_from(r: RawWeights) -> Result<Self> {
        CostWeights::new(r.w_cls, r.w_l1, r.w_giou)
    }
}

impl From<CostWeights> for RawWeights {
    fn from(w: CostWeights) -> Self {
        RawWeights { w_cls: w.w_cls, w_l1: w.w_l1, w_giou: w.w_giou }
    }
}

impl CostWeights {
    pub fn new(w_cls: f64, w_l1: f64, w_giou: f64) -> Result<Self> {
        let all = [w_cls, w_l1, w_giou];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) || all.iter().all(|w| *w == 0.0) {
            return Err(Error::InvalidCostWeights);
        }
        Ok(Self { w_cls, w_l1, w_giou })
    }

    pub fn cls(&self) -> f64 {
        self.w_cls
    }

    pub fn l1(&self) -> f64 {
        self.w_l1
    }

    pub fn giou(&self) -> f64 {
        self.w_giou
    }
}

impl Default for CostWeights {
    fn default() -> Self {
        Self { w_cls: 2.0, w_l1: 5.0, w_giou: 2.0 }
    }
}

/// Dense `queries x targets` cost matrix, row-major by query.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    queries: usize,
    targets: usize,
    values: Vec<f64>,
}

impl CostMatrix {
    pub fn new(queries: usize, targets: usize, values: Vec<f64>) -> Result<Self> {
        if targets > queries {
            return Err(Error::TooManyTargets { targets, queries });
        }
        if values.len() != queries * targets {
            return Err(Error::ShapeMismatch { expected: queries * targets, actual: values.len() });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteCost { row: pos / targets, col: pos % targets });
        }
        Ok(Self { queries, targets, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let targets = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != targets) {
            return Err(Error::ShapeMismatch { expected: targets, actual: bad.len() });
        }
        Self::new(rows.len(), targets, rows.concat())
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn targets(&self) -> usize {
        self.targets
    }

    pub fn get(&self, query: usize, target: usize) -> f64 {
        self.values[query * self.targets + target]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Result of one bipartite matching.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    query_to_target: Vec<Option<usize>>,
    target_to_query: Vec<usize>,
    total_cost: f64,
}

impl Assignment {
    /// Builds an assignment from a target-to-query map; `total_cost` is
    /// taken as given.
    pub fn from_target_queries(queries: usize, target_to_query: Vec<usize>, total_cost: f64) -> Result<Self> {
        let mut query_to_target = vec![None; queries];
        for (t, &q) in target_to_query.iter().enumerate() {
            if q >= queries {
                return Err(Error::AssignmentMismatch(format!("target {t} mapped to query {q} of {queries}")));
            }
            if query_to_target[q].replace(t).is_some() {
                return Err(Error::AssignmentMismatch(format!("query {q} matched twice")));
            }
        }
        Ok(Self { query_to_target, target_to_query, total_cost })
    }

    pub fn num_queries(&self) -> usize {
        self.query_to_target.len()
    }

    pub fn num_targets(&self) -> usize {
        self.target_to_query.len()
    }

    pub fn target_of(&self, query: usize) -> Option<usize> {
        self.query_to_target[query]
    }

    pub fn query_of(&self, target: usize) -> usize {
        self.target_to_query[target]
    }

    pub fn target_to_query(&self) -> &[usize] {
        &self.target_to_query
    }

    pub fn total_cost(&self) -> f64 {
        self.total_cost
    }

    /// Per-query target index with [`NO_OBJECT`] for negatives.
    pub fn as_indices(&self) -> Vec<i64> {
        self.query_to_target.iter().map(|t| t.map_or(NO_OBJECT, |t| t as i64)).collect()
    }
}

/// Builds `w_cls * (-p) + w_l1 * l1 + w_giou * (1 - giou)` for every
/// query/target pair. Only geometry and hard labels enter the cost.
pub fn build_cost_matrix(preds: &Predictions, targets: &[LabeledBox], weights: &CostWeights) -> Result<CostMatrix> {
    let n = preds.num_queries();
    if targets.len() > n {
        return Err(Error::TooManyTargets { targets: targets.len(), queries: n });
    }
    let c = preds.num_classes();
    if let Some(bad) = targets.iter().find(|t| t.class >= c) {
        return Err(Error::InvalidClass { class: bad.class, num_classes: c });
    }
    let mut values = Vec::with_capacity(n * targets.len());
    for q in 0..n {
        let pb = preds.bbox(q);
        for t in targets {
            let cls = -preds.prob(q, t.class);
            let cost =
                weights.w_cls * cls + weights.w_l1 * l1_box(&pb, &t.bbox) + weights.w_giou * (1.0 - giou(&pb, &t.bbox));
            values.push(cost);
        }
    }
    CostMatrix::new(n, targets.len(), values)
}

/// Minimum-cost injective map from targets to queries.
///
/// Among optimal maps the one whose target-to-query vector is
/// lexicographically smallest is returned, so ties resolve identically on
/// every run.
pub fn hungarian(cost: &CostMatrix) -> Assignment {
    let n = cost.queries;
    let t = cost.targets;
    if t == 0 {
        return Assignment { query_to_target: vec![None; n], target_to_query: Vec::new(), total_cost: 0.0 };
    }

    // Square problem: rows are targets padded with zero-cost dummies,
    // columns are queries.
    let entry = |row: usize, col: usize| if row < t { cost.get(col, row) } else { 0.0 };

    let inf = f64::INFINITY;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for row in 1..=n {
        col_owner[0] = row;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = entry(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_col = vec![0usize; n];
    let mut owner = vec![0usize; n];
    for j in 1..=n {
        row_col[col_owner[j] - 1] = j - 1;
        owner[j - 1] = col_owner[j] - 1;
    }

    let scale = cost.values.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    let tol = 1e-12 * scale;
    let tight = |row: usize, col: usize| entry(row, col) - u[row + 1] - v[col + 1] <= tol;
    let mut refiner = LexRefiner { n, tight: &tight, row_col: &mut row_col, owner: &mut owner };
    refiner.run(t);

    let target_to_query = row_col[..t].to_vec();
    let total_cost = target_to_query.iter().enumerate().map(|(tg, &q)| cost.get(q, tg)).sum();
    let mut query_to_target = vec![None; n];
    for (tg, &q) in target_to_query.iter().enumerate() {
        query_to_target[q] = Some(tg);
    }
    Assignment { query_to_target, target_to_query, total_cost }
}

/// Walks the equality subgraph of the optimal duals, moving each real row
/// in turn to its smallest column that still admits a perfect matching of
/// the remaining rows. Every optimal matching lives in that subgraph, so
/// the result is the lexicographically smallest optimum.
struct LexRefiner<'a, F: Fn(usize, usize) -> bool> {
    n: usize,
    tight: &'a F,
    row_col: &'a mut Vec<usize>,
    owner: &'a mut Vec<usize>,
}

impl<F: Fn(usize, usize) -> bool> LexRefiner<'_, F> {
    fn run(&mut self, real_rows: usize) {
        let mut fixed_col = vec![false; self.n];
        for row in 0..real_rows {
            let current = self.row_col[row];
            for col in 0..current {
                if fixed_col[col] || !(self.tight)(row, col) {
                    continue;
                }
                if self.try_move(row, col, &fixed_col) {
                    break;
                }
            }
            fixed_col[self.row_col[row]] = true;
        }
    }

    fn try_move(&mut self, row: usize, col: usize, fixed_col: &[bool]) -> bool {
        let old = self.row_col[row];
        let displaced = self.owner[col];
        self.row_col[row] = col;
        self.owner[col] = row;
        self.owner[old] = usize::MAX;

        let mut visited = fixed_col.to_vec();
        visited[col] = true;
        if self.augment(displaced, &mut visited) {
            return true;
        }
        self.row_col[row] = old;
        self.owner[old] = row;
        self.owner[col] = displaced;
        false
    }

    fn augment(&mut self, row: usize, visited: &mut [bool]) -> bool {
        for col in 0..self.n {
            if visited[col] || !(self.tight)(row, col) {
                continue;
            }
            visited[col] = true;
            let holder = self.owner[col];
            if holder == usize::MAX || self.augment(holder, visited) {
                self.owner[col] = row;
                self.row_col[row] = col;
                return true;
            }
        }
        false
    }
}
