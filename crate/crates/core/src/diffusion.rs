//! Diffusion ranking over a normalized affinity graph.
//!
//! Three routes to the same fixed point `f* = (1 - alpha) (I - alpha S)^{-1} f0`:
//! the random walk `f <- alpha S f + (1 - alpha) f0`, a conjugate-gradient
//! solve, and an offline table of truncated inverse columns that turns online
//! scoring into sparse dot products. [`closed_form`] solves the gallery block
//! system `L_alpha f_d = S_dq f0_q` with `L_alpha = I - alpha S_dd`.

use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::features::{score_from_cosine, FeatureSet};
use crate::graph::{nearest, split_blocks, AffinityGraph, BlockView, CosineSpace, NormalizedGraph, Partition, Role};
use crate::ids::FragmentId;
use crate::sparse::CsrMatrix;

pub const DEFAULT_ALPHA: f64 = 0.99;
/// Neighbors carrying mass in a per-query initial state.
pub const DEFAULT_NN: usize = 10;
pub const DEFAULT_CG_TOL: f64 = 1e-8;
pub const DEFAULT_CG_MAX_ITER: usize = 1000;
pub const DEFAULT_WALK_MAX_ITER: usize = 20_000;

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

fn check_tol(tol: f64) -> Result<()> {
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(Error::InvalidParameter(format!("tolerance must be positive, got {tol}")));
    }
    Ok(())
}

/// Non-negative, finite starting mass over all nodes with at least one nonzero entry.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialState {
    values: Vec<f64>,
}

impl InitialState {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInitialState("entries must be finite and non-negative".into()));
        }
        if values.iter().all(|&v| v == 0.0) {
            return Err(Error::InvalidInitialState("state has no mass".into()));
        }
        Ok(InitialState { values })
    }

    /// All-ones on the query side, zeros on the gallery side.
    pub fn batch(partition: &Partition) -> Result<Self> {
        InitialState::new(
            (0..partition.len())
                .map(|i| if partition.role(i) == Role::Query { 1.0 } else { 0.0 })
                .collect(),
        )
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn support(&self) -> Vec<usize> {
        (0..self.values.len()).filter(|&i| self.values[i] != 0.0).collect()
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        InitialState::new(self.values.iter().map(|v| v * c).collect())
    }
}

/// Similarities of `query` to its `nn` nearest other nodes, zeros elsewhere.
pub fn per_query_state(set: &FeatureSet, query: usize, nn: usize, gamma: f64) -> Result<InitialState> {
    per_query_state_in(&CosineSpace::new(set)?, query, nn, gamma)
}

pub fn per_query_state_in(space: &CosineSpace, query: usize, nn: usize, gamma: f64) -> Result<InitialState> {
    let n = space.len();
    if query >= n {
        return Err(Error::InvalidParameter(format!("query {query} out of range ({n} nodes)")));
    }
    if nn == 0 || nn >= n {
        return Err(Error::InvalidParameter(format!(
            "nn must lie in [1, {}], got {nn}",
            n.saturating_sub(1)
        )));
    }
    let mut values = vec![0.0; n];
    for (j, cos) in nearest(space, query, nn) {
        values[j] = score_from_cosine(cos, gamma);
    }
    InitialState::new(values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionResult {
    /// Scores of the gallery nodes, in `gallery` order.
    pub scores: Vec<f64>,
    pub gallery: Vec<usize>,
    pub iterations: usize,
    /// Final stopping residual (infinity-norm step for the walk, relative
    /// 2-norm residual for CG).
    pub residual: f64,
    pub alpha: f64,
    pub converged: bool,
}

/// Random walk with per-step diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct WalkTrace {
    pub result: DiffusionResult,
    /// Fixed point over all nodes.
    pub state: Vec<f64>,
    /// `||f^{t+1} - f^t||_2` for every executed step.
    pub step_norms: Vec<f64>,
}

/// Iterates `f <- alpha S f + (1 - alpha) f0` until the infinity-norm step is
/// at most `tol`. Exhausting `max_iter` is not an error: scores come back with
/// `converged == false`.
pub fn random_walk(
    s: &NormalizedGraph,
    f0: &InitialState,
    gallery: &[usize],
    alpha: f64,
    tol: f64,
    max_iter: usize,
) -> Result<DiffusionResult> {
    random_walk_traced(s, f0, gallery, alpha, tol, max_iter).map(|t| t.result)
}

pub fn random_walk_traced(
    s: &NormalizedGraph,
    f0: &InitialState,
    gallery: &[usize],
    alpha: f64,
    tol: f64,
    max_iter: usize,
) -> Result<WalkTrace> {
    check_alpha(alpha)?;
    check_tol(tol)?;
    let n = s.node_count();
    if f0.len() != n {
        return Err(Error::LengthMismatch { left: f0.len(), right: n });
    }
    let restart: Vec<f64> = f0.values().iter().map(|v| (1.0 - alpha) * v).collect();
    let mut f = f0.values().to_vec();
    let mut next = vec![0.0; n];
    let mut step_norms = Vec::new();
    let mut residual = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        s.matrix.mul_vec_into(&f, &mut next);
        let (mut inf, mut sq) = (0.0f64, 0.0f64);
        for i in 0..n {
            next[i] = alpha * next[i] + restart[i];
            let d = next[i] - f[i];
            inf = inf.max(d.abs());
            sq += d * d;
        }
        std::mem::swap(&mut f, &mut next);
        iterations += 1;
        step_norms.push(sq.sqrt());
        residual = inf;
        if inf <= tol {
            converged = true;
            break;
        }
    }
    Ok(WalkTrace {
        result: DiffusionResult {
            scores: gallery.iter().map(|&g| f[g]).collect(),
            gallery: gallery.to_vec(),
            iterations,
            residual,
            alpha,
            converged,
        },
        state: f,
        step_norms,
    })
}

/// Symmetric operator for conjugate gradient.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], out: &mut [f64]);
    fn diagonal(&self) -> Vec<f64>;
}

/// `I - alpha S` for a sparse symmetric `S`.
pub struct ShiftedOperator<'a> {
    pub s: &'a CsrMatrix,
    pub alpha: f64,
}

impl LinearOperator for ShiftedOperator<'_> {
    fn dim(&self) -> usize {
        self.s.rows()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.s.mul_vec_into(x, out);
        for (o, &xi) in out.iter_mut().zip(x) {
            *o = xi - self.alpha * *o;
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        (0..self.s.rows())
            .map(|i| 1.0 - self.alpha * self.s.get(i, i))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// `||b - A x||_2 / ||b||_2`.
    pub relative_residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Jacobi-preconditioned conjugate gradient for SPD operators.
///
/// Fails with `solver-stagnated` when the relative residual has not reached
/// `tol` within `max_iter` iterations, or when the residual stops improving
/// for 50 consecutive iterations.
pub fn conjugate_gradient(
    op: &dyn LinearOperator,
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<CgOutcome> {
    check_tol(tol)?;
    let n = op.dim();
    if b.len() != n {
        return Err(Error::LengthMismatch { left: b.len(), right: n });
    }
    let b_norm = dot(b, b).sqrt();
    if b_norm == 0.0 {
        return Ok(CgOutcome {
            x: vec![0.0; n],
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let inv_diag: Vec<f64> = op
        .diagonal()
        .into_iter()
        .map(|d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();

    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, m)| a * m).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut rel = 1.0;
    let mut best = rel;
    let mut since_best = 0;
    for it in 1..=max_iter {
        op.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 || !pap.is_finite() {
            return Err(Error::SolverStagnated {
                residual: rel,
                iterations: it - 1,
            });
        }
        let step = rz / pap;
        for i in 0..n {
            x[i] += step * p[i];
            r[i] -= step * ap[i];
        }
        rel = dot(&r, &r).sqrt() / b_norm;
        if rel <= tol {
            return Ok(CgOutcome {
                x,
                iterations: it,
                relative_residual: rel,
            });
        }
        if rel < best {
            best = rel;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= 50 {
                return Err(Error::SolverStagnated {
                    residual: rel,
                    iterations: it,
                });
            }
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::SolverStagnated {
        residual: rel,
        iterations: max_iter,
    })
}

/// Solves `L_alpha f_d = y` with `y = S_dq f0_q` over the gallery block.
///
/// Returns the raw solution; the positive `(1 - alpha)` factor is left out
/// since it does not change rankings.
pub fn closed_form(
    blocks: &BlockView,
    f0_q: &[f64],
    alpha: f64,
    tol: f64,
    max_iter: usize,
) -> Result<DiffusionResult> {
    check_alpha(alpha)?;
    if f0_q.len() != blocks.query_nodes.len() {
        return Err(Error::LengthMismatch {
            left: f0_q.len(),
            right: blocks.query_nodes.len(),
        });
    }
    let y = blocks.s_dq.mul_vec(f0_q);
    let op = ShiftedOperator {
        s: &blocks.s_dd,
        alpha,
    };
    let out = conjugate_gradient(&op, &y, tol, max_iter)?;
    Ok(DiffusionResult {
        scores: out.x,
        gallery: blocks.gallery_nodes.clone(),
        iterations: out.iterations,
        residual: out.relative_residual,
        alpha,
        converged: true,
    })
}

/// The random-walk fixed point over the whole graph, obtained by CG on
/// `(I - alpha S) f = (1 - alpha) f0`.
pub fn solve_full(
    s: &NormalizedGraph,
    f0: &InitialState,
    gallery: &[usize],
    alpha: f64,
    tol: f64,
    max_iter: usize,
) -> Result<DiffusionResult> {
    check_alpha(alpha)?;
    let n = s.node_count();
    if f0.len() != n {
        return Err(Error::LengthMismatch { left: f0.len(), right: n });
    }
    let b: Vec<f64> = f0.values().iter().map(|v| (1.0 - alpha) * v).collect();
    let op = ShiftedOperator {
        s: &s.matrix,
        alpha,
    };
    let out = conjugate_gradient(&op, &b, tol, max_iter)?;
    Ok(DiffusionResult {
        scores: gallery.iter().map(|&g| out.x[g]).collect(),
        gallery: gallery.to_vec(),
        iterations: out.iterations,
        residual: out.relative_residual,
        alpha,
        converged: true,
    })
}

/// Column of `(I - alpha S)^{-1}` for one gallery node, solved on its truncation neighborhood.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedColumn {
    pub node: usize,
    /// Neighborhood node ids; the column's own node comes first.
    pub support: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedSolveTable {
    pub alpha: f64,
    pub truncation: usize,
    /// One column per gallery node, in gallery order.
    pub columns: Vec<TruncatedColumn>,
}

impl TruncatedSolveTable {
    pub fn gallery(&self) -> Vec<usize> {
        self.columns.iter().map(|c| c.node).collect()
    }

    /// Gallery scores for `f0`: `(1 - alpha) <column_j, f0>` for each gallery node `j`.
    pub fn score(&self, f0: &InitialState) -> DiffusionResult {
        let f = f0.values();
        let scores = self
            .columns
            .iter()
            .map(|c| {
                (1.0 - self.alpha)
                    * c.support
                        .iter()
                        .zip(&c.values)
                        .map(|(&i, &v)| v * f[i])
                        .sum::<f64>()
            })
            .collect();
        DiffusionResult {
            scores,
            gallery: self.gallery(),
            iterations: 0,
            residual: 0.0,
            alpha: self.alpha,
            converged: true,
        }
    }
}

/// Up to `t` nodes around `center`: the node itself, then the others ranked by
/// two-hop affinity mass `(S + S^2)_{center,i}`. When the two-hop ball holds
/// fewer than `t` nodes, further hops are appended ranked by their hop mass.
pub fn truncation_neighborhood(s: &CsrMatrix, center: usize, t: usize) -> Vec<usize> {
    let n = s.rows();
    let mut support = vec![center];
    if t <= 1 {
        return support;
    }
    let mut taken = vec![false; n];
    taken[center] = true;

    let propagate = |v: &[(usize, f64)]| -> Vec<(usize, f64)> {
        let mut acc = std::collections::BTreeMap::new();
        for &(l, w) in v {
            for (i, sv) in s.row(l) {
                *acc.entry(i).or_insert(0.0) += w * sv;
            }
        }
        acc.into_iter().filter(|&(_, m)| m > 0.0).collect()
    };

    let hop1 = propagate(&[(center, 1.0)]);
    let hop2 = propagate(&hop1);
    let mut mass = std::collections::BTreeMap::new();
    for &(i, m) in hop1.iter().chain(&hop2) {
        *mass.entry(i).or_insert(0.0) += m;
    }
    let mut ranked: Vec<(usize, f64)> = mass.into_iter().filter(|&(i, _)| i != center).collect();
    ranked.sort_by(crate::graph::neighbor_order);
    let mut frontier = vec![(center, 1.0)];
    for (i, m) in ranked {
        if support.len() == t {
            return support;
        }
        taken[i] = true;
        support.push(i);
        frontier.push((i, m));
    }

    // breadth-first beyond two hops, each level ranked by propagated mass
    while support.len() < t {
        let mut fresh: Vec<(usize, f64)> = propagate(&frontier)
            .into_iter()
            .filter(|&(i, _)| !taken[i])
            .collect();
        if fresh.is_empty() {
            break;
        }
        fresh.sort_by(crate::graph::neighbor_order);
        fresh.truncate(t - support.len());
        for &(i, _) in &fresh {
            taken[i] = true;
            support.push(i);
        }
        frontier = fresh;
    }
    support
}

/// In-place Cholesky factorization of a dense SPD matrix (row-major, lower triangle).
fn cholesky(mut a: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d <= 0.0 {
            return None;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut v = a[i * n + j];
            for k in 0..j {
                v -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = v / d;
        }
    }
    Some(a)
}

fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut v = b[i];
        for k in 0..i {
            v -= l[i * n + k] * b[k];
        }
        b[i] = v / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut v = b[i];
        for k in i + 1..n {
            v -= l[k * n + i] * b[k];
        }
        b[i] = v / l[i * n + i];
    }
}

/// Offline table: for each gallery node, the locally solved column of
/// `(I - alpha S)^{-1}` restricted to its truncation neighborhood.
pub fn precompute_truncated(
    s: &NormalizedGraph,
    gallery: &[usize],
    alpha: f64,
    truncation: usize,
) -> Result<TruncatedSolveTable> {
    check_alpha(alpha)?;
    if truncation == 0 {
        return Err(Error::InvalidParameter("truncation size must be at least 1".into()));
    }
    let n = s.node_count();
    if let Some(&g) = gallery.iter().find(|&&g| g >= n) {
        return Err(Error::InvalidParameter(format!("gallery node {g} out of range")));
    }
    let m = &s.matrix;
    let columns = gallery
        .par_iter()
        .map(|&node| {
            let support = truncation_neighborhood(m, node, truncation);
            let t = support.len();
            let local = m.select(&support, &support);
            let mut dense = vec![0.0; t * t];
            for i in 0..t {
                dense[i * t + i] = 1.0;
                for (j, v) in local.row(i) {
                    dense[i * t + j] -= alpha * v;
                }
            }
            let l = cholesky(dense, t).ok_or(Error::SolverStagnated {
                residual: f64::NAN,
                iterations: 0,
            })?;
            let mut rhs = vec![0.0; t];
            rhs[0] = 1.0;
            cholesky_solve(&l, t, &mut rhs);
            Ok(TruncatedColumn {
                node,
                support,
                values: rhs,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TruncatedSolveTable {
        alpha,
        truncation,
        columns,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Solver {
    Iterate,
    #[default]
    Cg,
    Truncated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    PerQuery,
    Batch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub alpha: f64,
    pub mode: Mode,
    pub solver: Solver,
    pub nn: usize,
    pub tol: f64,
    pub cg_max_iter: usize,
    pub walk_max_iter: usize,
    /// Truncation size; `None` means five times the graph's k.
    pub truncation: Option<usize>,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            alpha: DEFAULT_ALPHA,
            mode: Mode::PerQuery,
            solver: Solver::Cg,
            nn: DEFAULT_NN,
            tol: DEFAULT_CG_TOL,
            cg_max_iter: DEFAULT_CG_MAX_ITER,
            walk_max_iter: DEFAULT_WALK_MAX_ITER,
            truncation: None,
        }
    }
}

/// Positive gallery scores of one query, sorted by descending score then gallery id.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryScores {
    /// `None` for batch mode, where all queries share one state.
    pub query: Option<FragmentId>,
    pub entries: Vec<(FragmentId, f64)>,
}

/// Scores of every query, sorted by query id. Scores are held at `f32`
/// precision so a table equals its `FGS1` reload.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreTable {
    pub rows: Vec<QueryScores>,
}

const BATCH_SENTINEL: u32 = u32::MAX;

impl ScoreTable {
    fn from_rows(mut rows: Vec<QueryScores>) -> Self {
        for row in &mut rows {
            for e in &mut row.entries {
                e.1 = f64::from(e.1 as f32);
            }
            row.entries.retain(|e| e.1 > 0.0);
            row.entries
                .sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        }
        rows.sort_by_key(|r| r.query);
        ScoreTable { rows }
    }

    pub fn triple_count(&self) -> usize {
        self.rows.iter().map(|r| r.entries.len()).sum()
    }

    /// `FGS1`: magic, `u32` triple count, then per triple the query id
    /// (3 x `u32`, image `u32::MAX` in batch mode), the gallery id (3 x `u32`)
    /// and an `f32` score. Triples run by query, then descending score.
    pub fn to_fgs1(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.magic(b"FGS1").u32(self.triple_count() as u32);
        for row in &self.rows {
            let q = row
                .query
                .unwrap_or(FragmentId::new(BATCH_SENTINEL, 0, 0));
            for (g, score) in &row.entries {
                w.u32(q.image).u32(q.row).u32(q.col);
                w.u32(g.image).u32(g.row).u32(g.col);
                w.f32(*score as f32);
            }
        }
        w.buf
    }

    pub fn from_fgs1(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "FGS1");
        r.expect_magic(b"FGS1")?;
        let count = r.u32()? as usize;
        if r.remaining() != count * 28 {
            return Err(Error::BadFormat(format!(
                "FGS1: {count} triples need {} bytes, found {}",
                count * 28,
                r.remaining()
            )));
        }
        let mut rows: Vec<QueryScores> = Vec::new();
        for _ in 0..count {
            let q = FragmentId::new(r.u32()?, r.u32()?, r.u32()?);
            let g = FragmentId::new(r.u32()?, r.u32()?, r.u32()?);
            let score = f64::from(r.f32()?);
            if !(score.is_finite() && score >= 0.0) {
                return Err(Error::BadFormat(format!("FGS1: invalid score {score}")));
            }
            let q = (q.image != BATCH_SENTINEL).then_some(q);
            match rows.last_mut() {
                Some(last) if last.query == q => last.entries.push((g, score)),
                _ => rows.push(QueryScores {
                    query: q,
                    entries: vec![(g, score)],
                }),
            }
        }
        Ok(ScoreTable::from_rows(rows))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.to_fgs1())
    }

    pub fn load(path: &Path) -> Result<Self> {
        ScoreTable::from_fgs1(&binio::read_file(path)?)
    }
}

/// Outcome of scoring all queries of a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionRun {
    pub table: ScoreTable,
    /// Queries whose random walk hit the iteration cap.
    pub not_converged: usize,
    /// Queries whose initial state carried no mass.
    pub empty_states: usize,
}

/// Scores every query against the gallery of `partition` with the configured
/// mode and solver.
pub fn diffuse(
    set: &FeatureSet,
    graph: &AffinityGraph,
    partition: &Partition,
    config: &DiffusionConfig,
) -> Result<DiffusionRun> {
    check_alpha(config.alpha)?;
    if graph.node_count() != set.len() || graph.source_checksum != set.checksum() {
        return Err(Error::GraphFeaturesMismatch);
    }
    let s = crate::graph::normalize(graph);
    let blocks = split_blocks(&s, partition)?;
    let gallery = blocks.gallery_nodes.clone();
    let truncation = config.truncation.unwrap_or(5 * graph.k);
    let table = match config.solver {
        Solver::Truncated => Some(precompute_truncated(&s, &gallery, config.alpha, truncation)?),
        _ => None,
    };

    let solve = |f0: &InitialState| -> Result<DiffusionResult> {
        match config.solver {
            Solver::Iterate => random_walk(&s, f0, &gallery, config.alpha, config.tol, config.walk_max_iter),
            Solver::Cg => solve_full(&s, f0, &gallery, config.alpha, config.tol, config.cg_max_iter),
            Solver::Truncated => Ok(table.as_ref().expect("table built").score(f0)),
        }
    };
    let to_entries = |r: &DiffusionResult| -> Vec<(FragmentId, f64)> {
        r.gallery
            .iter()
            .zip(&r.scores)
            .map(|(&g, &v)| (set.record(g).id, v))
            .collect()
    };

    let mut not_converged = 0;
    let mut empty_states = 0;
    let rows = match config.mode {
        Mode::Batch => {
            let r = solve(&InitialState::batch(partition)?)?;
            not_converged += usize::from(!r.converged);
            vec![QueryScores {
                query: None,
                entries: to_entries(&r),
            }]
        }
        Mode::PerQuery => {
            let space = CosineSpace::new(set)?;
            let outcomes = blocks
                .query_nodes
                .par_iter()
                .map(|&q| -> Result<(QueryScores, bool, bool)> {
                    let id = Some(set.record(q).id);
                    match per_query_state_in(&space, q, config.nn, graph.gamma) {
                        Ok(f0) => {
                            let r = solve(&f0)?;
                            Ok((QueryScores { query: id, entries: to_entries(&r) }, r.converged, false))
                        }
                        Err(Error::InvalidInitialState(_)) => {
                            Ok((QueryScores { query: id, entries: Vec::new() }, true, true))
                        }
                        Err(e) => Err(e),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            outcomes
                .into_iter()
                .map(|(row, converged, empty)| {
                    not_converged += usize::from(!converged);
                    empty_states += usize::from(empty);
                    row
                })
                .collect()
        }
    };
    if not_converged > 0 {
        warn!("not-converged: {not_converged} queries hit the random-walk iteration cap");
    }
    Ok(DiffusionRun {
        table: ScoreTable::from_rows(rows),
        not_converged,
        empty_states,
    })
}
