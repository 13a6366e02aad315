//! Exact Earth Mover's Distance between two domain profiles.
//!
//! The transportation problem is solved with the transportation simplex:
//! Vogel's approximation gives a spanning-tree basis, then u-v potentials
//! price the non-basic cells and stepping-stone cycles pivot until no cell has
//! a negative reduced cost. After a degenerate pivot the entering cell is
//! chosen by Bland's rule (first negative cell in row-major order) until the
//! objective strictly improves again, so degenerate cycling cannot occur.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::DomainProfile;

/// Default bandwidth of the similarity kernel.
pub const DEFAULT_GAMMA: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmdSolution {
    /// `flow[i][j]` is the mass shipped from supplier `i` to consumer `j`.
    pub flow: Vec<Vec<f64>>,
    /// Flow-weighted average cost.
    pub distance: f64,
    pub total_flow: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScore {
    pub value: f64,
    pub gamma: f64,
    pub distance: f64,
}

impl SimilarityScore {
    pub fn from_distance(distance: f64, gamma: f64) -> Self {
        Self {
            value: (-gamma * distance).exp(),
            gamma,
            distance,
        }
    }
}

/// Euclidean distances between source and target centroids.
pub fn distance_matrix(source: &DomainProfile, target: &DomainProfile) -> Result<Vec<Vec<f64>>> {
    if source.dim() != target.dim() {
        return Err(Error::dim("profile feature dimension", source.dim(), target.dim()));
    }
    Ok(source
        .centroids()
        .iter()
        .map(|s| {
            target
                .centroids()
                .iter()
                .map(|t| s.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                .collect()
        })
        .collect())
}

pub fn domain_similarity(source: &DomainProfile, target: &DomainProfile, gamma: f64) -> Result<SimilarityScore> {
    let (_, score) = domain_similarity_with_flow(source, target, gamma)?;
    Ok(score)
}

pub fn domain_similarity_with_flow(
    source: &DomainProfile,
    target: &DomainProfile,
    gamma: f64,
) -> Result<(EmdSolution, SimilarityScore)> {
    if !gamma.is_finite() || gamma < 0.0 {
        return Err(Error::Input(format!(
            "gamma must be finite and non-negative, got {gamma}"
        )));
    }
    let cost = distance_matrix(source, target)?;
    let solution = solve_transport(source.weights(), target.weights(), &cost)?;
    let score = SimilarityScore::from_distance(solution.distance, gamma);
    Ok((solution, score))
}

/// Solves the balanced transportation problem after normalizing both
/// marginals to unit mass.
pub fn solve_transport(supplies: &[f64], demands: &[f64], cost: &[Vec<f64>]) -> Result<EmdSolution> {
    let m = supplies.len();
    let n = demands.len();
    if m == 0 || n == 0 {
        return Err(Error::Input("supplies and demands must be non-empty".into()));
    }
    if cost.len() != m {
        return Err(Error::dim("cost rows", m, cost.len()));
    }
    for (i, row) in cost.iter().enumerate() {
        if row.len() != n {
            return Err(Error::dim(format!("cost row {i}"), n, row.len()));
        }
        if let Some(c) = row.iter().find(|c| !c.is_finite() || **c < 0.0) {
            return Err(Error::Input(format!("cost entries must be finite and >= 0, got {c}")));
        }
    }
    let supplies = normalized(supplies, "supply")?;
    let demands = normalized(demands, "demand")?;

    let mut tableau = Tableau::new(&supplies, &demands, cost);
    tableau.optimize();

    let mut flow = vec![vec![0.0; n]; m];
    for cell in &tableau.basis {
        flow[cell.row][cell.col] += cell.flow.max(0.0);
    }
    let total_flow: f64 = flow.iter().flatten().sum();
    let work: f64 = flow
        .iter()
        .zip(cost)
        .map(|(fr, cr)| fr.iter().zip(cr).map(|(f, c)| f * c).sum::<f64>())
        .sum();
    Ok(EmdSolution {
        flow,
        distance: work / total_flow,
        total_flow,
    })
}

fn normalized(weights: &[f64], what: &str) -> Result<Vec<f64>> {
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
        return Err(Error::Input(format!(
            "{what} weights must be positive and finite, got {w}"
        )));
    }
    let total: f64 = weights.iter().sum();
    Ok(weights.iter().map(|w| w / total).collect())
}

#[derive(Debug, Clone, Copy)]
struct BasicCell {
    row: usize,
    col: usize,
    flow: f64,
}

struct Tableau<'a> {
    cost: &'a [Vec<f64>],
    m: usize,
    n: usize,
    basis: Vec<BasicCell>,
    /// Reduced-cost threshold below which a cell is considered improving.
    tol: f64,
}

impl<'a> Tableau<'a> {
    fn new(supplies: &[f64], demands: &[f64], cost: &'a [Vec<f64>]) -> Self {
        let max_cost = cost.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
        let basis = vogel_basis(supplies, demands, cost);
        debug_assert_eq!(basis.len(), supplies.len() + demands.len() - 1);
        Self {
            cost,
            m: supplies.len(),
            n: demands.len(),
            basis,
            tol: 1e-12 * (1.0 + max_cost),
        }
    }

    fn optimize(&mut self) {
        let mut bland = false;
        let mut is_basic = vec![false; self.m * self.n];
        // Bland's rule terminates; the cap only guards against float pathologies.
        let max_iter = 50 * (self.m + self.n) * (self.m + self.n) + 1000;
        for _ in 0..max_iter {
            let (u, v) = self.potentials();
            is_basic.iter_mut().for_each(|b| *b = false);
            for c in &self.basis {
                is_basic[c.row * self.n + c.col] = true;
            }
            let Some(entering) = self.entering_cell(&u, &v, &is_basic, bland) else {
                return;
            };
            let theta = self.pivot(entering);
            bland = theta <= 0.0;
        }
        log::warn!("transportation simplex hit its iteration cap");
    }

    /// Dual potentials with `u[0] = 0`, propagated over the basis tree.
    fn potentials(&self) -> (Vec<f64>, Vec<f64>) {
        let (row_adj, col_adj) = self.adjacency();
        let mut u = vec![f64::NAN; self.m];
        let mut v = vec![f64::NAN; self.n];
        let mut queue = VecDeque::new();
        u[0] = 0.0;
        queue.push_back(Node::Row(0));
        while let Some(node) = queue.pop_front() {
            match node {
                Node::Row(i) => {
                    for &k in &row_adj[i] {
                        let j = self.basis[k].col;
                        if v[j].is_nan() {
                            v[j] = self.cost[i][j] - u[i];
                            queue.push_back(Node::Col(j));
                        }
                    }
                }
                Node::Col(j) => {
                    for &k in &col_adj[j] {
                        let i = self.basis[k].row;
                        if u[i].is_nan() {
                            u[i] = self.cost[i][j] - v[j];
                            queue.push_back(Node::Row(i));
                        }
                    }
                }
            }
        }
        (u, v)
    }

    fn adjacency(&self) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
        let mut row_adj = vec![Vec::new(); self.m];
        let mut col_adj = vec![Vec::new(); self.n];
        for (k, c) in self.basis.iter().enumerate() {
            row_adj[c.row].push(k);
            col_adj[c.col].push(k);
        }
        (row_adj, col_adj)
    }

    fn entering_cell(&self, u: &[f64], v: &[f64], is_basic: &[bool], bland: bool) -> Option<(usize, usize)> {
        let mut best: Option<((usize, usize), f64)> = None;
        for i in 0..self.m {
            for j in 0..self.n {
                if is_basic[i * self.n + j] {
                    continue;
                }
                let reduced = self.cost[i][j] - u[i] - v[j];
                if reduced < -self.tol {
                    if bland {
                        return Some((i, j));
                    }
                    // strict comparison keeps the lowest row-then-column index on ties
                    if best.is_none_or(|(_, r)| reduced < r) {
                        best = Some(((i, j), reduced));
                    }
                }
            }
        }
        best.map(|(cell, _)| cell)
    }

    /// Brings `(row, col)` into the basis along its stepping-stone cycle and
    /// returns the amount of flow moved.
    fn pivot(&mut self, (row, col): (usize, usize)) -> f64 {
        let path = self.tree_path(col, row);
        // path[0] touches the entering column and receives -theta, then the
        // signs alternate.
        let mut leave_pos = 0;
        for (pos, &k) in path.iter().enumerate().step_by(2) {
            let cand = &self.basis[k];
            let cur = &self.basis[path[leave_pos]];
            if cand.flow < cur.flow || (cand.flow == cur.flow && (cand.row, cand.col) < (cur.row, cur.col)) {
                leave_pos = pos;
            }
        }
        let theta = self.basis[path[leave_pos]].flow.max(0.0);
        for (pos, &k) in path.iter().enumerate() {
            if pos % 2 == 0 {
                self.basis[k].flow -= theta;
            } else {
                self.basis[k].flow += theta;
            }
        }
        let leaving = path[leave_pos];
        self.basis[leaving] = BasicCell { row, col, flow: theta };
        theta
    }

    /// Basis cells on the unique tree path from column node `col` to row node
    /// `row`, in order.
    fn tree_path(&self, col: usize, row: usize) -> Vec<usize> {
        let (row_adj, col_adj) = self.adjacency();
        // Nodes: rows are 0..m, columns are m..m+n.
        let total = self.m + self.n;
        let mut via: Vec<Option<(usize, usize)>> = vec![None; total];
        let mut seen = vec![false; total];
        let start = self.m + col;
        let goal = row;
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(node) = queue.pop_front() {
            if node == goal {
                break;
            }
            let edges = if node < self.m {
                &row_adj[node]
            } else {
                &col_adj[node - self.m]
            };
            for &k in edges {
                let cell = &self.basis[k];
                let next = if node < self.m { self.m + cell.col } else { cell.row };
                if !seen[next] {
                    seen[next] = true;
                    via[next] = Some((node, k));
                    queue.push_back(next);
                }
            }
        }
        let mut path = Vec::new();
        let mut node = goal;
        while node != start {
            let (prev, k) = via[node].expect("basis must be a spanning tree");
            path.push(k);
            node = prev;
        }
        path.reverse();
        path
    }
}

#[derive(Clone, Copy)]
enum Node {
    Row(usize),
    Col(usize),
}

/// Vogel's approximation. Every allocation crosses out exactly one line except
/// the final one, which yields `m + n - 1` basic cells forming a spanning tree
/// even when the problem is degenerate.
fn vogel_basis(supplies: &[f64], demands: &[f64], cost: &[Vec<f64>]) -> Vec<BasicCell> {
    let m = supplies.len();
    let n = demands.len();
    let mut supply = supplies.to_vec();
    let mut demand = demands.to_vec();
    let mut row_open = vec![true; m];
    let mut col_open = vec![true; n];
    let mut rows_left = m;
    let mut cols_left = n;
    let mut basis = Vec::with_capacity(m + n - 1);

    while rows_left > 0 && cols_left > 0 {
        let (row, col) = if rows_left == 1 || cols_left == 1 {
            // Only one line remains on one side: allocate along it in index order.
            let i = (0..m).find(|&i| row_open[i]).unwrap();
            let j = (0..n).find(|&j| col_open[j]).unwrap();
            if rows_left == 1 {
                (i, cheapest_in_row(cost, i, &col_open))
            } else {
                (cheapest_in_col(cost, j, &row_open), j)
            }
        } else {
            vogel_choice(cost, &row_open, &col_open)
        };

        let amount = supply[row].min(demand[col]);
        supply[row] -= amount;
        demand[col] -= amount;
        basis.push(BasicCell { row, col, flow: amount });

        let last = rows_left == 1 && cols_left == 1;
        if last {
            rows_left = 0;
            cols_left = 0;
        } else if rows_left > 1 && (supply[row] <= demand[col] || cols_left == 1) {
            row_open[row] = false;
            rows_left -= 1;
            demand[col] += supply[row];
            supply[row] = 0.0;
        } else {
            col_open[col] = false;
            cols_left -= 1;
            supply[row] += demand[col];
            demand[col] = 0.0;
        }
    }
    basis
}

fn cheapest_in_row(cost: &[Vec<f64>], i: usize, col_open: &[bool]) -> usize {
    let mut best = None;
    for (j, &open) in col_open.iter().enumerate() {
        if open && best.is_none_or(|b: usize| cost[i][j] < cost[i][b]) {
            best = Some(j);
        }
    }
    best.unwrap()
}

fn cheapest_in_col(cost: &[Vec<f64>], j: usize, row_open: &[bool]) -> usize {
    let mut best = None;
    for (i, &open) in row_open.iter().enumerate() {
        if open && best.is_none_or(|b: usize| cost[i][j] < cost[b][j]) {
            best = Some(i);
        }
    }
    best.unwrap()
}

fn penalty(costs: impl Iterator<Item = f64>) -> f64 {
    let mut lo = f64::INFINITY;
    let mut second = f64::INFINITY;
    for c in costs {
        if c < lo {
            second = lo;
            lo = c;
        } else if c < second {
            second = c;
        }
    }
    if second.is_finite() {
        second - lo
    } else {
        lo
    }
}

fn vogel_choice(cost: &[Vec<f64>], row_open: &[bool], col_open: &[bool]) -> (usize, usize) {
    let mut best_pen = f64::NEG_INFINITY;
    let mut choice = (0, 0);
    for (i, _) in row_open.iter().enumerate().filter(|(_, o)| **o) {
        let p = penalty((0..col_open.len()).filter(|&j| col_open[j]).map(|j| cost[i][j]));
        if p > best_pen {
            best_pen = p;
            choice = (i, cheapest_in_row(cost, i, col_open));
        }
    }
    for (j, _) in col_open.iter().enumerate().filter(|(_, o)| **o) {
        let p = penalty((0..row_open.len()).filter(|&i| row_open[i]).map(|i| cost[i][j]));
        if p > best_pen {
            best_pen = p;
            choice = (cheapest_in_col(cost, j, row_open), j);
        }
    }
    choice
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(centroids: Vec<Vec<f64>>, masses: Vec<f64>) -> DomainProfile {
        let labels = (0..centroids.len()).map(|k| format!("c{k}")).collect();
        DomainProfile::from_masses("p", "x", labels, centroids, masses).unwrap()
    }

    #[test]
    fn distance_matrix_examples() {
        let s = profile(vec![vec![0.0, 0.0]], vec![1.0]);
        let t = profile(vec![vec![3.0, 4.0]], vec![1.0]);
        assert_eq!(distance_matrix(&s, &t).unwrap(), vec![vec![5.0]]);

        let s = profile(vec![vec![0.0], vec![1.0]], vec![1.0, 1.0]);
        let t = profile(vec![vec![0.0], vec![2.0]], vec![1.0, 1.0]);
        assert_eq!(distance_matrix(&s, &t).unwrap(), vec![vec![0.0, 2.0], vec![1.0, 1.0]]);

        let s = profile(vec![vec![0.0, 1.0], vec![2.0, -1.0], vec![4.0, 4.0]], vec![1.0; 3]);
        let d = distance_matrix(&s, &s).unwrap();
        for (k, row) in d.iter().enumerate() {
            assert_eq!(row[k], 0.0);
        }
    }

    #[test]
    fn distance_matrix_dimension_mismatch() {
        let s = profile(vec![vec![0.0, 0.0]], vec![1.0]);
        let t = profile(vec![vec![3.0]], vec![1.0]);
        assert!(matches!(distance_matrix(&s, &t), Err(Error::Dimension { .. })));
    }

    #[test]
    fn single_cell_forces_flow() {
        let sol = solve_transport(&[1.0], &[1.0], &[vec![5.0]]).unwrap();
        assert_eq!(sol.flow, vec![vec![1.0]]);
        assert_eq!(sol.distance, 5.0);
    }

    #[test]
    fn zero_cost_matching() {
        let sol = solve_transport(&[0.5, 0.5], &[0.5, 0.5], &[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(sol.flow, vec![vec![0.5, 0.0], vec![0.0, 0.5]]);
        assert_eq!(sol.distance, 0.0);
    }

    #[test]
    fn two_by_two_optimum() {
        // Enumerating the Q=2 integer flows gives {diag: 2, anti: 5, split: 3.5}/2 -> 1.0.
        let sol = solve_transport(&[0.5, 0.5], &[0.5, 0.5], &[vec![1.0, 2.0], vec![3.0, 1.0]]).unwrap();
        assert!((sol.distance - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unbalanced_inputs_are_renormalized() {
        let a = solve_transport(&[2.0, 6.0], &[1.0, 1.0], &[vec![1.0, 4.0], vec![2.0, 0.5]]).unwrap();
        let b = solve_transport(&[0.25, 0.75], &[0.5, 0.5], &[vec![1.0, 4.0], vec![2.0, 0.5]]).unwrap();
        assert!((a.distance - b.distance).abs() < 1e-12);
        assert!((a.total_flow - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            solve_transport(&[0.0, 1.0], &[1.0], &[vec![1.0], vec![1.0]]),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            solve_transport(&[1.0], &[-1.0], &[vec![1.0]]),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            solve_transport(&[1.0], &[1.0], &[vec![f64::NAN]]),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            solve_transport(&[1.0], &[1.0], &[vec![f64::INFINITY]]),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            solve_transport(&[1.0], &[1.0], &[vec![1.0, 2.0]]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn degenerate_ties_terminate() {
        // Equal marginals and a constant cost matrix make every pivot degenerate.
        let n = 6;
        let w = vec![1.0; n];
        let cost = vec![vec![1.0; n]; n];
        let sol = solve_transport(&w, &w, &cost).unwrap();
        assert!((sol.distance - 1.0).abs() < 1e-12);
    }

    #[test]
    fn similarity_closed_forms() {
        let s = profile(vec![vec![0.0, 0.0]], vec![1.0]);
        let t = profile(vec![vec![3.0, 4.0]], vec![1.0]);
        let score = domain_similarity(&s, &t, DEFAULT_GAMMA).unwrap();
        assert!((score.distance - 5.0).abs() < 1e-12);
        assert!((score.value - (-0.05f64).exp()).abs() < 1e-12);
        assert!((score.value - 0.951229).abs() < 1e-6);

        let p = profile(vec![vec![1.0, 2.0], vec![-3.0, 0.5]], vec![2.0, 1.0]);
        let same = domain_similarity(&p, &p, DEFAULT_GAMMA).unwrap();
        assert_eq!(same.distance, 0.0);
        assert_eq!(same.value, 1.0);
    }

    #[test]
    fn larger_problem_satisfies_marginals() {
        let m = 7;
        let n = 5;
        let supplies: Vec<f64> = (0..m).map(|i| 1.0 + i as f64).collect();
        let demands: Vec<f64> = (0..n).map(|j| 3.0 - 0.4 * j as f64).collect();
        let cost: Vec<Vec<f64>> = (0..m)
            .map(|i| (0..n).map(|j| ((i * 7 + j * 3) % 11) as f64).collect())
            .collect();
        let sol = solve_transport(&supplies, &demands, &cost).unwrap();
        let st: f64 = supplies.iter().sum();
        let dt: f64 = demands.iter().sum();
        for (i, row) in sol.flow.iter().enumerate() {
            let s: f64 = row.iter().sum();
            assert!((s - supplies[i] / st).abs() < 1e-9);
            assert!(row.iter().all(|f| *f >= 0.0));
        }
        for j in 0..n {
            let s: f64 = sol.flow.iter().map(|r| r[j]).sum();
            assert!((s - demands[j] / dt).abs() < 1e-9);
        }
    }
}
