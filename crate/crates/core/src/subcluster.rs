//! Per-category dynamic subcluster modeling.
//!
//! EM over a Gaussian mixture, with periodic split proposals (each component
//! is fit with a 2-way sub-mixture and scored by a Dirichlet-process Hastings
//! ratio under an NIW marginal likelihood) and merge proposals for the
//! closest pair of component centres. The surviving components carry
//! fixed-capacity FIFO queues whose contents define the per-subcluster
//! Gaussians used downstream for outlier synthesis.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingSet, Label};
use crate::error::{Error, Result};
use crate::gaussian::{
    fit_moments, ln_gamma_unchecked, niw_log_marginal, CovMode, GaussianComponent, NiwPrior,
    DEFAULT_SHRINKAGE,
};
use crate::seed::rng_for;

/// Row-stochastic `N x K` soft assignment matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    matrix: DMatrix<f64>,
}

impl Responsibilities {
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        for (i, row) in matrix.row_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
                return Err(Error::contract(format!(
                    "row {i} has entries outside [0, 1]"
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::contract(format!("row {i} sums to {s}")));
            }
        }
        Ok(Responsibilities { matrix })
    }

    /// One-hot rows from hard labels in `0..k`.
    pub fn one_hot(labels: &[usize], k: usize) -> Self {
        let mut matrix = DMatrix::zeros(labels.len(), k);
        for (i, &l) in labels.iter().enumerate() {
            matrix[(i, l)] = 1.0;
        }
        Responsibilities { matrix }
    }

    pub fn n_points(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_components(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.matrix[(i, k)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Column `k` as a weight vector.
    pub fn column(&self, k: usize) -> Vec<f64> {
        self.matrix.column(k).iter().copied().collect()
    }

    /// Index of the largest entry of row `i`; ties go to the lower index.
    pub fn argmax(&self, i: usize) -> usize {
        let row = self.matrix.row(i);
        let mut best = 0;
        for k in 1..row.len() {
            if row[k] > row[best] {
                best = k;
            }
        }
        best
    }

    pub fn hard_labels(&self) -> Vec<usize> {
        (0..self.n_points()).map(|i| self.argmax(i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub k_init: usize,
    /// Dirichlet-process concentration.
    pub alpha: f64,
    pub split_log_threshold: f64,
    /// EM iterations between proposal rounds; 0 disables proposals.
    pub propose_every: usize,
    pub max_em_iters: usize,
    pub em_tol: f64,
    pub queue_capacity: usize,
    /// Covariance shrinkage relative to the mean per-dimension variance.
    pub shrinkage: f64,
    /// Forces a covariance structure; `None` picks full once a fit has at
    /// least `2d` points.
    pub cov_mode: Option<CovMode>,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            k_init: 5,
            alpha: 1.0,
            split_log_threshold: 0.0,
            propose_every: 5,
            max_em_iters: 100,
            em_tol: 1e-6,
            queue_capacity: 256,
            shrinkage: DEFAULT_SHRINKAGE,
            cov_mode: None,
            seed: 0,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_init == 0 {
            return Err(Error::Config("k_init must be at least 1".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!(
                "alpha {} must be positive",
                self.alpha
            )));
        }
        if self.queue_capacity == 0 {
            return Err(Error::Config("queue_capacity must be at least 1".into()));
        }
        if !(self.shrinkage >= 0.0) {
            return Err(Error::Config("shrinkage must be nonnegative".into()));
        }
        if !(self.em_tol >= 0.0) {
            return Err(Error::Config("em_tol must be nonnegative".into()));
        }
        Ok(())
    }

    fn proposals_enabled(&self) -> bool {
        self.propose_every > 0 && self.propose_every <= self.max_em_iters
    }

    fn mode_for(&self, count: f64, dim: usize) -> CovMode {
        self.cov_mode.unwrap_or_else(|| CovMode::auto(count, dim))
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn check_points(points: &[DVector<f64>], components: &[GaussianComponent]) -> Result<()> {
    if components.is_empty() {
        return Err(Error::contract("at least one component is required"));
    }
    let d = components[0].dim();
    if points.iter().any(|p| p.len() != d) || components.iter().any(|c| c.dim() != d) {
        return Err(Error::contract("point and component dimensions differ"));
    }
    Ok(())
}

fn weighted_log_densities(x: &[f64], components: &[GaussianComponent], out: &mut [f64]) {
    for (o, c) in out.iter_mut().zip(components) {
        *o = c.weight().ln() + c.log_density_unchecked(x);
    }
}

/// GMM responsibilities `π_k N(x_i; μ_k, Σ_k)`, normalized per row in the
/// log domain.
pub fn e_step(
    points: &[DVector<f64>],
    components: &[GaussianComponent],
) -> Result<Responsibilities> {
    check_points(points, components)?;
    let k = components.len();
    let mut matrix = DMatrix::zeros(points.len(), k);
    let mut logs = vec![0.0; k];
    for (i, x) in points.iter().enumerate() {
        weighted_log_densities(x.as_slice(), components, &mut logs);
        let norm = log_sum_exp(&logs);
        for j in 0..k {
            matrix[(i, j)] = (logs[j] - norm).exp();
        }
    }
    Ok(Responsibilities { matrix })
}

/// Mixture log-likelihood `Σ_i log Σ_k π_k N(x_i; μ_k, Σ_k)`.
pub fn log_likelihood(points: &[DVector<f64>], components: &[GaussianComponent]) -> Result<f64> {
    check_points(points, components)?;
    let mut logs = vec![0.0; components.len()];
    Ok(points
        .iter()
        .map(|x| {
            weighted_log_densities(x.as_slice(), components, &mut logs);
            log_sum_exp(&logs)
        })
        .sum())
}

/// Minimum effective member count for a component to survive an M-step.
pub const MIN_EFFECTIVE_COUNT: f64 = 2.0;

/// Maximization step: column means give the weights and weighted moment fits
/// give the Gaussians. Components whose effective count falls below
/// [`MIN_EFFECTIVE_COUNT`] are dissolved.
pub fn m_step(
    points: &[DVector<f64>],
    r: &Responsibilities,
    config: &ClusterConfig,
) -> Result<Vec<GaussianComponent>> {
    if r.n_points() != points.len() {
        return Err(Error::contract(
            "responsibility rows differ from point count",
        ));
    }
    if points.is_empty() {
        return Err(Error::contract("m_step needs at least one point"));
    }
    let d = points[0].len();
    let all_counts: Vec<f64> = (0..r.n_components())
        .map(|k| r.matrix.column(k).sum())
        .collect();
    // With too few points for any survivor, the heaviest component stays.
    let largest = (0..all_counts.len())
        .max_by(|&a, &b| all_counts[a].total_cmp(&all_counts[b]))
        .unwrap_or(0);
    let mut fitted = Vec::with_capacity(r.n_components());
    let mut counts = Vec::with_capacity(r.n_components());
    for (k, &n_k) in all_counts.iter().enumerate() {
        let keep = n_k >= MIN_EFFECTIVE_COUNT
            || (k == largest && n_k > 0.0 && all_counts.iter().all(|&c| c < MIN_EFFECTIVE_COUNT));
        if !keep {
            continue;
        }
        let w = r.column(k);
        fitted.push(fit_moments(
            points,
            &w,
            config.mode_for(n_k, d),
            config.shrinkage,
        )?);
        counts.push(n_k);
    }
    if fitted.is_empty() {
        return Err(Error::contract("responsibilities carry no mass"));
    }
    let total: f64 = counts.iter().sum();
    for (c, n_k) in fitted.iter_mut().zip(&counts) {
        c.set_weight_unchecked(n_k / total);
    }
    Ok(fitted)
}

/// `Σ_i KL(r_i ‖ r^E_i)` with `0 log 0 = 0`.
pub fn kl_alignment_loss(r: &Responsibilities, r_e: &Responsibilities) -> Result<f64> {
    if r.matrix.shape() != r_e.matrix.shape() {
        return Err(Error::contract(format!(
            "shape {:?} vs {:?}",
            r.matrix.shape(),
            r_e.matrix.shape()
        )));
    }
    let mut total = 0.0;
    for (p, q) in r.matrix.iter().zip(r_e.matrix.iter()) {
        if *p > 0.0 {
            total += p * (p / q).ln();
        }
    }
    Ok(total.max(0.0))
}

/// A 2-way sub-mixture fit to one cluster's members.
#[derive(Debug, Clone, PartialEq)]
pub struct SubclusterSplit {
    pub components: [GaussianComponent; 2],
    pub resp: Responsibilities,
    /// `Σ_j Σ_i r̃_ij ‖x_i − μ̃_j‖²`.
    pub l_sub: f64,
}

impl SubclusterSplit {
    /// Hard member indices of each side, by argmax of `r̃`.
    pub fn partition(&self) -> [Vec<usize>; 2] {
        hard_partition(&self.resp)
    }
}

fn hard_partition(resp: &Responsibilities) -> [Vec<usize>; 2] {
    let mut sides = [Vec::new(), Vec::new()];
    for i in 0..resp.n_points() {
        sides[resp.argmax(i).min(1)].push(i);
    }
    sides
}

fn farthest_pair(points: &[DVector<f64>]) -> (usize, usize) {
    let n = points.len();
    if n <= 2048 {
        let mut best = (0, 0, -1.0);
        for i in 0..n {
            for j in (i + 1)..n {
                let d = (&points[i] - &points[j]).norm_squared();
                if d > best.2 {
                    best = (i, j, d);
                }
            }
        }
        (best.0, best.1)
    } else {
        let far = |from: usize| {
            (0..n)
                .max_by(|&a, &b| {
                    (&points[a] - &points[from])
                        .norm_squared()
                        .total_cmp(&(&points[b] - &points[from]).norm_squared())
                })
                .unwrap()
        };
        let a = far(0);
        (a, far(a))
    }
}

/// Fits a two-component sub-mixture with farthest-pair initialization.
///
/// Returns `None` when the points have fewer than two distinct locations.
pub fn fit_subclusters(
    points: &[DVector<f64>],
    config: &ClusterConfig,
) -> Result<Option<SubclusterSplit>> {
    if points.len() < 2 {
        return Err(Error::contract("fit_subclusters needs at least 2 points"));
    }
    let (a, b) = farthest_pair(points);
    if points[a] == points[b] {
        return Ok(None);
    }
    let labels: Vec<usize> = points
        .iter()
        .map(|p| {
            let da = (p - &points[a]).norm_squared();
            let db = (p - &points[b]).norm_squared();
            usize::from(db < da)
        })
        .collect();
    let d = points[0].len();
    let mut resp = Responsibilities::one_hot(&labels, 2);
    let fit_pair = |resp: &Responsibilities| -> Result<Option<[GaussianComponent; 2]>> {
        let mut out = Vec::with_capacity(2);
        let mut counts = [0.0; 2];
        for (j, slot) in counts.iter_mut().enumerate() {
            let w = resp.column(j);
            let n_j: f64 = w.iter().sum();
            if !(n_j > 1e-9) {
                return Ok(None);
            }
            *slot = n_j;
            out.push(fit_moments(
                points,
                &w,
                config.mode_for(n_j, d),
                config.shrinkage,
            )?);
        }
        let total = counts[0] + counts[1];
        let mut it = out.into_iter();
        let mut c0 = it.next().unwrap();
        let mut c1 = it.next().unwrap();
        c0.set_weight_unchecked(counts[0] / total);
        c1.set_weight_unchecked(counts[1] / total);
        Ok(Some([c0, c1]))
    };
    let mut comps = fit_pair(&resp)?.expect("both seeds own at least themselves");
    let mut prev_ll = f64::NEG_INFINITY;
    for _ in 0..config.max_em_iters.max(1) {
        let next_resp = e_step(points, &comps)?;
        let Some(next) = fit_pair(&next_resp)? else {
            break;
        };
        resp = next_resp;
        comps = next;
        let ll = log_likelihood(points, &comps)?;
        if (ll - prev_ll).abs() <= config.em_tol * (1.0 + ll.abs()) {
            break;
        }
        prev_ll = ll;
    }
    let mut l_sub = 0.0;
    for (i, x) in points.iter().enumerate() {
        for (j, c) in comps.iter().enumerate() {
            l_sub += resp.get(i, j) * (x - c.mean()).norm_squared();
        }
    }
    Ok(Some(SubclusterSplit {
        components: comps,
        resp,
        l_sub,
    }))
}

/// Log Hastings ratio for splitting `X = A ∪ B` into `A` and `B`.
pub fn partition_log_ratio(
    side_a: &[&DVector<f64>],
    side_b: &[&DVector<f64>],
    alpha: f64,
    prior: &NiwPrior,
) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::contract(format!("alpha {alpha} must be positive")));
    }
    if side_a.is_empty() || side_b.is_empty() {
        return Ok(f64::NEG_INFINITY);
    }
    let mut all: Vec<&DVector<f64>> = Vec::with_capacity(side_a.len() + side_b.len());
    all.extend_from_slice(side_a);
    all.extend_from_slice(side_b);
    let f_a = niw_log_marginal(side_a, prior)?.log_marginal;
    let f_b = niw_log_marginal(side_b, prior)?.log_marginal;
    let f_all = niw_log_marginal(&all, prior)?.log_marginal;
    Ok(alpha.ln()
        + ln_gamma_unchecked(side_a.len() as f64)
        + f_a
        + ln_gamma_unchecked(side_b.len() as f64)
        + f_b
        - ln_gamma_unchecked(all.len() as f64)
        - f_all)
}

/// `log H_s` for the hard partition of `points` induced by `split.resp`.
/// An empty side yields `-inf`.
pub fn split_log_ratio(
    points: &[DVector<f64>],
    split: &SubclusterSplit,
    alpha: f64,
    prior: &NiwPrior,
) -> Result<f64> {
    if split.resp.n_points() != points.len() {
        return Err(Error::contract(
            "split responsibilities differ from point count",
        ));
    }
    let [ia, ib] = split.partition();
    let a: Vec<&DVector<f64>> = ia.iter().map(|&i| &points[i]).collect();
    let b: Vec<&DVector<f64>> = ib.iter().map(|&i| &points[i]).collect();
    partition_log_ratio(&a, &b, alpha, prior)
}

/// `log H_m = −log H_s` of splitting the union back into the two inputs.
pub fn merge_log_ratio(
    points_a: &[&DVector<f64>],
    points_b: &[&DVector<f64>],
    alpha: f64,
    prior: &NiwPrior,
) -> Result<f64> {
    if points_a.is_empty() || points_b.is_empty() {
        return Err(Error::contract("merge needs two nonempty point sets"));
    }
    Ok(-partition_log_ratio(points_a, points_b, alpha, prior)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ProposalEvent {
    Split {
        iteration: usize,
        component: usize,
        log_ratio: f64,
        sizes: [usize; 2],
    },
    Merge {
        iteration: usize,
        components: [usize; 2],
        log_ratio: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalRound {
    pub iteration: usize,
    pub splits_evaluated: usize,
    pub merges_evaluated: usize,
    pub accepted: usize,
}

/// One adjusted subcluster: the mixture component plus its member queue and
/// the queue-derived Gaussian `(μ̂, Σ̂)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Subcluster {
    pub component: GaussianComponent,
    pub queue: VecDeque<DVector<f64>>,
    pub stats: GaussianComponent,
    pub l_sub: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubclusterState {
    pub category: Label,
    pub subclusters: Vec<Subcluster>,
    pub queue_capacity: usize,
    pub shrinkage: f64,
    pub cov_mode: Option<CovMode>,
    /// Component count after every EM iteration.
    pub history: Vec<usize>,
    pub log_likelihood: Vec<f64>,
    pub events: Vec<ProposalEvent>,
    pub rounds: Vec<ProposalRound>,
    pub warnings: Vec<String>,
}

impl SubclusterState {
    pub fn len(&self) -> usize {
        self.subclusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subclusters.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.subclusters[0].stats.dim()
    }

    /// Subcluster index maximizing `π_k N(x; μ̂_k, Σ̂_k)`.
    pub fn assign(&self, x: &[f64]) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for (k, s) in self.subclusters.iter().enumerate() {
            let v = s.component.weight().ln() + s.stats.log_density_unchecked(x);
            if v > best.1 {
                best = (k, v);
            }
        }
        best.0
    }

    /// FIFO-enqueues `vectors` into subcluster `index` and refreshes its
    /// `(μ̂, Σ̂)` from the queue.
    pub fn enqueue(&mut self, index: usize, vectors: &[DVector<f64>]) -> Result<()> {
        let d = self.dim();
        if index >= self.subclusters.len() {
            return Err(Error::contract(format!("no subcluster {index}")));
        }
        if vectors.iter().any(|v| v.len() != d) {
            return Err(Error::contract("enqueued vector dimension differs"));
        }
        let cap = self.queue_capacity;
        let sub = &mut self.subclusters[index];
        for v in vectors {
            if sub.queue.len() == cap {
                sub.queue.pop_front();
            }
            sub.queue.push_back(v.clone());
        }
        sub.stats = queue_stats(
            &sub.queue,
            sub.component.weight(),
            self.cov_mode,
            self.shrinkage,
        )?;
        Ok(())
    }

    /// Routes each vector to its most responsible subcluster, then enqueues.
    pub fn route_and_enqueue(&mut self, vectors: &[DVector<f64>]) -> Result<()> {
        let mut buckets: Vec<Vec<DVector<f64>>> = vec![Vec::new(); self.len()];
        for v in vectors {
            buckets[self.assign(v.as_slice())].push(v.clone());
        }
        for (k, b) in buckets.iter().enumerate() {
            if !b.is_empty() {
                self.enqueue(k, b)?;
            }
        }
        Ok(())
    }

    pub fn final_k(&self) -> usize {
        self.subclusters.len()
    }
}

pub(crate) fn queue_stats(
    queue: &VecDeque<DVector<f64>>,
    weight: f64,
    cov_mode: Option<CovMode>,
    shrinkage: f64,
) -> Result<GaussianComponent> {
    let points: Vec<DVector<f64>> = queue.iter().cloned().collect();
    let d = points[0].len();
    let mode = cov_mode.unwrap_or_else(|| CovMode::auto(points.len() as f64, d));
    fit_moments(&points, &vec![1.0; points.len()], mode, shrinkage)?.with_weight(weight)
}

/// k-means++ seeding followed by one hard M-step.
pub fn initial_components<R: Rng + ?Sized>(
    points: &[DVector<f64>],
    k: usize,
    config: &ClusterConfig,
    rng: &mut R,
) -> Result<Vec<GaussianComponent>> {
    if points.is_empty() || k == 0 {
        return Err(Error::contract("initialization needs points and k >= 1"));
    }
    let n = points.len();
    let mut centers: Vec<usize> = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| (p - &points[centers[0]]).norm_squared())
        .collect();
    while centers.len() < k.min(n) {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, v) in d2.iter().enumerate() {
                if target < *v {
                    pick = i;
                    break;
                }
                target -= v;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min((p - &points[next]).norm_squared());
        }
    }
    let labels: Vec<usize> = points
        .iter()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (j, &c) in centers.iter().enumerate() {
                let d = (p - &points[c]).norm_squared();
                if d < best.1 {
                    best = (j, d);
                }
            }
            best.0
        })
        .collect();
    let r = Responsibilities::one_hot(&labels, centers.len());
    // Hard init may leave singleton clusters; keep them with a one-point fit.
    let d = points[0].len();
    let mut comps = Vec::new();
    let mut counts = Vec::new();
    for j in 0..centers.len() {
        let w = r.column(j);
        let n_j: f64 = w.iter().sum();
        if n_j == 0.0 {
            continue;
        }
        comps.push(fit_moments(
            points,
            &w,
            config.mode_for(n_j, d),
            config.shrinkage,
        )?);
        counts.push(n_j);
    }
    for (c, n_j) in comps.iter_mut().zip(&counts) {
        c.set_weight_unchecked(n_j / n as f64);
    }
    Ok(comps)
}

fn members<'a>(points: &'a [DVector<f64>], labels: &[usize], k: usize) -> Vec<&'a DVector<f64>> {
    points
        .iter()
        .zip(labels)
        .filter(|(_, l)| **l == k)
        .map(|(p, _)| p)
        .collect()
}

fn closest_pair(components: &[GaussianComponent]) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize, f64)> = None;
    for a in 0..components.len() {
        for b in (a + 1)..components.len() {
            let d = (components[a].mean() - components[b].mean()).norm_squared();
            if best.is_none_or(|(_, _, bd)| d < bd) {
                best = Some((a, b, d));
            }
        }
    }
    best.map(|(a, b, _)| (a, b))
}

/// Runs EM with split/merge proposals on one category's points.
pub fn run_dynamic_clustering(
    points: &[DVector<f64>],
    category: Label,
    config: &ClusterConfig,
) -> Result<SubclusterState> {
    config.validate()?;
    if points.is_empty() {
        return Err(Error::contract(format!(
            "category {category} has no points"
        )));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::contract("points have inconsistent dimensions"));
    }
    let mut warnings = Vec::new();
    let mut k_init = config.k_init;
    if points.len() < k_init {
        warnings.push(format!(
            "k_init {} clamped to point count {}",
            k_init,
            points.len()
        ));
        k_init = points.len();
    }
    let mut rng = rng_for(config.seed, &[u64::from(category.code())]);
    let priors = CategoryPriors::new(points)?;

    let mut comps = initial_components(points, k_init, config, &mut rng)?;
    let mut history = Vec::new();
    let mut ll_trace = Vec::new();
    let mut events = Vec::new();
    let mut rounds = Vec::new();
    let mut quiet_rounds = 0usize;
    let mut prev_ll = f64::NEG_INFINITY;
    let mut prev_r: Option<Responsibilities> = None;

    for iteration in 1..=config.max_em_iters {
        let r = e_step(points, &comps)?;
        // assignments have stabilized once consecutive E-steps agree
        let settled = match &prev_r {
            Some(p) if p.matrix.shape() == r.matrix.shape() => {
                kl_alignment_loss(p, &r)? < config.em_tol
            }
            _ => false,
        };
        comps = m_step(points, &r, config)?;
        prev_r = Some(r);
        let ll = log_likelihood(points, &comps)?;
        let converged = settled && (ll - prev_ll).abs() <= config.em_tol * (1.0 + ll.abs());
        prev_ll = ll;
        ll_trace.push(ll);

        let proposal_round = config.proposals_enabled() && iteration % config.propose_every == 0;
        if proposal_round {
            let (next, round, mut new_events) =
                propose(points, &comps, iteration, config, &priors)?;
            if round.accepted > 0 {
                quiet_rounds = 0;
                comps = next;
                // re-anchor the convergence test on the new configuration
                prev_ll = f64::NEG_INFINITY;
                prev_r = None;
            } else {
                quiet_rounds += 1;
            }
            events.append(&mut new_events);
            rounds.push(round);
        }
        history.push(comps.len());

        let done = if config.proposals_enabled() {
            proposal_round && converged && quiet_rounds >= 2
        } else {
            converged
        };
        if done {
            break;
        }
    }

    finalize(
        points, comps, category, config, history, ll_trace, events, rounds, warnings,
    )
}

/// Weak priors of one category in both covariance structures. A proposal
/// over `n` points uses the structure a moment fit of `n` points would get,
/// since full-covariance evidence over fewer than `2d` points favors
/// splitting even unimodal data.
struct CategoryPriors {
    full: NiwPrior,
    diagonal: NiwPrior,
}

impl CategoryPriors {
    fn new(points: &[DVector<f64>]) -> Result<Self> {
        Ok(CategoryPriors {
            full: NiwPrior::weak_default(points, CovMode::Full)?,
            diagonal: NiwPrior::weak_default(points, CovMode::Diagonal)?,
        })
    }

    fn for_count(&self, n: usize, config: &ClusterConfig) -> &NiwPrior {
        match config.mode_for(n as f64, self.full.dim()) {
            CovMode::Full => &self.full,
            CovMode::Diagonal => &self.diagonal,
        }
    }
}

fn propose(
    points: &[DVector<f64>],
    comps: &[GaussianComponent],
    iteration: usize,
    config: &ClusterConfig,
    priors: &CategoryPriors,
) -> Result<(Vec<GaussianComponent>, ProposalRound, Vec<ProposalEvent>)> {
    let d = points[0].len();
    let labels = e_step(points, comps)?.hard_labels();
    let n = points.len() as f64;
    let mut round = ProposalRound {
        iteration,
        splits_evaluated: 0,
        merges_evaluated: 0,
        accepted: 0,
    };
    let mut events = Vec::new();
    let mut merged: Option<(usize, usize, GaussianComponent)> = None;

    if let Some((a, b)) = closest_pair(comps) {
        let pa = members(points, &labels, a);
        let pb = members(points, &labels, b);
        if !pa.is_empty() && !pb.is_empty() {
            round.merges_evaluated += 1;
            let prior = priors.for_count(pa.len() + pb.len(), config);
            let log_ratio = merge_log_ratio(&pa, &pb, config.alpha, prior)?;
            if log_ratio > config.split_log_threshold {
                let union: Vec<DVector<f64>> = pa.iter().chain(&pb).map(|p| (*p).clone()).collect();
                let mode = config.mode_for(union.len() as f64, d);
                let mut c = fit_moments(&union, &vec![1.0; union.len()], mode, config.shrinkage)?;
                c.set_weight_unchecked(comps[a].weight() + comps[b].weight());
                events.push(ProposalEvent::Merge {
                    iteration,
                    components: [a, b],
                    log_ratio,
                });
                merged = Some((a, b, c));
            }
        }
    }

    let mut next = Vec::with_capacity(comps.len() + 2);
    for (k, comp) in comps.iter().enumerate() {
        if let Some((a, b, ref c)) = merged {
            if k == a {
                next.push(c.clone());
                continue;
            }
            if k == b {
                continue;
            }
        }
        let own: Vec<DVector<f64>> = members(points, &labels, k).into_iter().cloned().collect();
        if own.len() < 2 * MIN_EFFECTIVE_COUNT as usize {
            next.push(comp.clone());
            continue;
        }
        let Some(split) = fit_subclusters(&own, config)? else {
            next.push(comp.clone());
            continue;
        };
        round.splits_evaluated += 1;
        let log_ratio = split_log_ratio(
            &own,
            &split,
            config.alpha,
            priors.for_count(own.len(), config),
        )?;
        let [ia, ib] = split.partition();
        if log_ratio > config.split_log_threshold
            && ia.len() as f64 >= MIN_EFFECTIVE_COUNT
            && ib.len() as f64 >= MIN_EFFECTIVE_COUNT
        {
            let share = own.len() as f64 / n;
            for child in &split.components {
                let mut c = child.clone();
                c.set_weight_unchecked(child.weight() * share);
                next.push(c);
            }
            events.push(ProposalEvent::Split {
                iteration,
                component: k,
                log_ratio,
                sizes: [ia.len(), ib.len()],
            });
        } else {
            next.push(comp.clone());
        }
    }
    round.accepted = events.len();
    let total: f64 = next.iter().map(|c| c.weight()).sum();
    for c in next.iter_mut() {
        let w = c.weight() / total;
        c.set_weight_unchecked(w);
    }
    Ok((next, round, events))
}

#[allow(clippy::too_many_arguments)]
fn finalize(
    points: &[DVector<f64>],
    comps: Vec<GaussianComponent>,
    category: Label,
    config: &ClusterConfig,
    history: Vec<usize>,
    log_likelihood: Vec<f64>,
    events: Vec<ProposalEvent>,
    rounds: Vec<ProposalRound>,
    mut warnings: Vec<String>,
) -> Result<SubclusterState> {
    let labels = e_step(points, &comps)?.hard_labels();
    let mut kept: Vec<(GaussianComponent, Vec<&DVector<f64>>)> = Vec::new();
    for (k, c) in comps.into_iter().enumerate() {
        let own = members(points, &labels, k);
        if own.is_empty() {
            warnings.push(format!("component {k} owns no points and was dropped"));
            continue;
        }
        kept.push((c, own));
    }
    let total: f64 = kept.iter().map(|(c, _)| c.weight()).sum();
    let mut subclusters = Vec::with_capacity(kept.len());
    for (mut component, own) in kept {
        component.set_weight_unchecked(component.weight() / total);
        let mut queue = VecDeque::with_capacity(config.queue_capacity);
        for p in own.iter().rev().take(config.queue_capacity).rev() {
            queue.push_back((*p).clone());
        }
        let stats = queue_stats(
            &queue,
            component.weight(),
            config.cov_mode,
            config.shrinkage,
        )?;
        let owned: Vec<DVector<f64>> = own.iter().map(|p| (*p).clone()).collect();
        let l_sub = if owned.len() >= 2 {
            fit_subclusters(&owned, config)?.map(|s| s.l_sub)
        } else {
            None
        };
        subclusters.push(Subcluster {
            component,
            queue,
            stats,
            l_sub,
        });
    }
    Ok(SubclusterState {
        category,
        subclusters,
        queue_capacity: config.queue_capacity,
        shrinkage: config.shrinkage,
        cov_mode: config.cov_mode,
        history,
        log_likelihood,
        events,
        rounds,
        warnings,
    })
}

/// Category a record belongs to for clustering; `None` for outliers and
/// unlabeled records. With `merge_fakes` every fake type maps to code 1.
pub fn category_of(label: Label, merge_fakes: bool) -> Option<Label> {
    if label.is_real() {
        Some(Label::REAL)
    } else if label.is_fake() {
        Some(if merge_fakes {
            Label::fake(1).unwrap()
        } else {
            label
        })
    } else {
        None
    }
}

/// Clusters every category of `set` independently (in parallel).
pub fn cluster_categories(
    set: &EmbeddingSet,
    config: &ClusterConfig,
    merge_fakes: bool,
) -> Result<Vec<SubclusterState>> {
    let mut cats: Vec<Label> = set
        .labels()
        .iter()
        .filter_map(|l| category_of(*l, merge_fakes))
        .collect();
    cats.sort_unstable();
    cats.dedup();
    if cats.is_empty() {
        return Err(Error::Validation(
            "no real or fake records to cluster".into(),
        ));
    }
    cats.par_iter()
        .map(|&cat| {
            let pts = set.vectors_where(|l| category_of(l, merge_fakes) == Some(cat));
            run_dynamic_clustering(&pts, cat, config)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::Covariance;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn dv(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn comp1d(mean: f64, var: f64, w: f64) -> GaussianComponent {
        GaussianComponent::new(dv(&[mean]), Covariance::Diagonal(dv(&[var])), w).unwrap()
    }

    fn normal_1d(rng: &mut ChaCha8Rng, mean: f64, sd: f64, n: usize) -> Vec<DVector<f64>> {
        let dist = Normal::new(mean, sd).unwrap();
        (0..n).map(|_| dv(&[dist.sample(rng)])).collect()
    }

    #[test]
    fn single_component_responsibilities_are_one() {
        let pts = vec![dv(&[0.3]), dv(&[-4.0]), dv(&[12.0])];
        let r = e_step(&pts, &[comp1d(0.0, 1.0, 1.0)]).unwrap();
        assert!(r.matrix().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn symmetric_components_split_evenly() {
        let r = e_step(
            &[dv(&[0.0])],
            &[comp1d(-2.0, 1.0, 0.5), comp1d(2.0, 1.0, 0.5)],
        )
        .unwrap();
        assert!((r.get(0, 0) - 0.5).abs() < 1e-12);
        assert!((r.get(0, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn far_components_give_near_certain_assignment() {
        let r = e_step(
            &[dv(&[10.0])],
            &[comp1d(-10.0, 1.0, 0.5), comp1d(10.0, 1.0, 0.5)],
        )
        .unwrap();
        // direct evaluation: r = 1 / (1 + exp(-200))
        assert!(r.get(0, 1) > 1.0 - 1e-8);
    }

    #[test]
    fn kl_hand_values() {
        let r = Responsibilities::one_hot(&[0], 2);
        let e = Responsibilities::from_matrix(DMatrix::from_row_slice(1, 2, &[0.5, 0.5])).unwrap();
        assert!((kl_alignment_loss(&r, &e).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(kl_alignment_loss(&e, &e).unwrap(), 0.0);
        let wrong = Responsibilities::one_hot(&[0, 1], 2);
        assert!(kl_alignment_loss(&r, &wrong).is_err());
    }

    #[test]
    fn m_step_dissolves_starved_components() {
        let pts: Vec<_> = (0..10).map(|i| dv(&[i as f64])).collect();
        let mut m = DMatrix::zeros(10, 2);
        for i in 0..10 {
            m[(i, 0)] = if i == 0 { 0.0 } else { 1.0 };
            m[(i, 1)] = if i == 0 { 1.0 } else { 0.0 };
        }
        let r = Responsibilities::from_matrix(m).unwrap();
        let comps = m_step(&pts, &r, &ClusterConfig::default()).unwrap();
        assert_eq!(comps.len(), 1);
        assert_eq!(comps[0].weight(), 1.0);
    }

    #[test]
    fn subclusters_of_duplicated_point_plus_one() {
        let mut pts = vec![dv(&[1.0, 1.0]); 6];
        pts.push(dv(&[4.0, -2.0]));
        let s = fit_subclusters(&pts, &ClusterConfig::default())
            .unwrap()
            .unwrap();
        let means: Vec<_> = s.components.iter().map(|c| c.mean().clone()).collect();
        assert!(means.iter().any(|m| (m - dv(&[1.0, 1.0])).norm() < 1e-6));
        assert!(means.iter().any(|m| (m - dv(&[4.0, -2.0])).norm() < 1e-6));
        assert!(s.l_sub < 1e-6);
    }

    #[test]
    fn subclusters_infeasible_for_identical_points() {
        let pts = vec![dv(&[2.0]); 5];
        assert!(fit_subclusters(&pts, &ClusterConfig::default())
            .unwrap()
            .is_none());
        assert!(fit_subclusters(&pts[..1], &ClusterConfig::default()).is_err());
    }

    #[test]
    fn subclusters_of_mirror_data_are_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let half = normal_1d(&mut rng, 3.0, 1.0, 50);
        let mut pts: Vec<_> = half.clone();
        pts.extend(half.iter().map(|p| -p));
        let s = fit_subclusters(&pts, &ClusterConfig::default())
            .unwrap()
            .unwrap();
        let m0 = s.components[0].mean()[0];
        let m1 = s.components[1].mean()[0];
        assert!((m0 + m1).abs() < 1e-8, "{m0} {m1}");
    }

    #[test]
    fn subcluster_objective_matches_ground_truth_scatter() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = normal_1d(&mut rng, -5.0, 0.1f64.sqrt(), 100);
        let b = normal_1d(&mut rng, 5.0, 0.1f64.sqrt(), 100);
        let scatter = |xs: &[DVector<f64>]| {
            let m = xs.iter().map(|x| x[0]).sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x[0] - m).powi(2)).sum::<f64>()
        };
        let truth = scatter(&a) + scatter(&b);
        let mut pts = a;
        pts.extend(b);
        let s = fit_subclusters(&pts, &ClusterConfig::default())
            .unwrap()
            .unwrap();
        assert!(
            (s.l_sub - truth).abs() / truth < 0.05,
            "{} vs {truth}",
            s.l_sub
        );
    }

    #[test]
    fn alpha_doubling_adds_ln2() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut pts = normal_1d(&mut rng, -5.0, 1.0, 50);
        pts.extend(normal_1d(&mut rng, 5.0, 1.0, 50));
        let split = fit_subclusters(&pts, &ClusterConfig::default())
            .unwrap()
            .unwrap();
        let prior = NiwPrior::weak_default(&pts, CovMode::Full).unwrap();
        let a = split_log_ratio(&pts, &split, 1.0, &prior).unwrap();
        let b = split_log_ratio(&pts, &split, 2.0, &prior).unwrap();
        assert!((b - a - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_side_is_rejected() {
        let pts = vec![dv(&[0.0]), dv(&[1.0])];
        let prior = NiwPrior::weak_default(&pts, CovMode::Full).unwrap();
        let a: Vec<&DVector<f64>> = pts.iter().collect();
        assert_eq!(
            partition_log_ratio(&a, &[], 1.0, &prior).unwrap(),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn enqueue_fifo_and_refresh() {
        let pts: Vec<_> = (0..20).map(|i| dv(&[i as f64, (i * i) as f64])).collect();
        let cfg = ClusterConfig {
            k_init: 1,
            queue_capacity: 4,
            propose_every: 0,
            ..ClusterConfig::default()
        };
        let mut state = run_dynamic_clustering(&pts, Label::REAL, &cfg).unwrap();
        assert_eq!(state.subclusters[0].queue.len(), 4);
        let extra: Vec<_> = (100..105).map(|i| dv(&[i as f64, 0.0])).collect();
        state.enqueue(0, &extra).unwrap();
        let q: Vec<_> = state.subclusters[0].queue.iter().cloned().collect();
        assert_eq!(q, extra[1..].to_vec());
        let batch = queue_stats(
            &state.subclusters[0].queue,
            1.0,
            cfg.cov_mode,
            cfg.shrinkage,
        )
        .unwrap();
        assert!((state.subclusters[0].stats.mean() - batch.mean()).amax() < 1e-10);
        assert!(state.enqueue(0, &[dv(&[1.0])]).is_err());
        assert!(state.enqueue(5, &extra).is_err());
    }

    #[test]
    fn enqueue_into_empty_queue_sets_mean() {
        let pts: Vec<_> = (0..6).map(|i| dv(&[i as f64])).collect();
        let cfg = ClusterConfig {
            k_init: 1,
            propose_every: 0,
            ..ClusterConfig::default()
        };
        let mut state = run_dynamic_clustering(&pts, Label::REAL, &cfg).unwrap();
        state.subclusters[0].queue.clear();
        state.enqueue(0, &[dv(&[42.0])]).unwrap();
        assert_eq!(state.subclusters[0].stats.mean()[0], 42.0);
    }

    #[test]
    fn k_init_clamped_with_warning() {
        let pts = vec![dv(&[0.0]), dv(&[1.0]), dv(&[5.0])];
        let cfg = ClusterConfig {
            k_init: 5,
            ..ClusterConfig::default()
        };
        let state = run_dynamic_clustering(&pts, Label::REAL, &cfg).unwrap();
        assert!(state.warnings.iter().any(|w| w.contains("clamped")));
        assert!(state.final_k() >= 1);
    }

    #[test]
    fn category_mapping() {
        assert_eq!(category_of(Label::REAL, true), Some(Label::REAL));
        assert_eq!(
            category_of(Label::fake(3).unwrap(), false),
            Label::fake(3).ok()
        );
        assert_eq!(
            category_of(Label::fake(3).unwrap(), true),
            Label::fake(1).ok()
        );
        assert_eq!(category_of(Label::OUTLIER, false), None);
    }
}
