//! On-disk forms of clustering results: a JSON report with component
//! parameters and a FRD1 sidecar holding every queue.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingSet, Label};
use crate::error::{Error, Result};
use crate::gaussian::{CovMode, Covariance, GaussianComponent};
use crate::subcluster::{
    queue_stats, ClusterConfig, ProposalEvent, ProposalRound, Subcluster, SubclusterState,
};

/// Meta key of the sidecar listing each record's subcluster index.
pub const SUBCLUSTER_META: &str = "subclusters";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StoredCovariance {
    /// Row-major.
    Full(Vec<Vec<f64>>),
    Diagonal(Vec<f64>),
}

impl StoredCovariance {
    fn from_cov(c: &Covariance) -> Self {
        match c {
            Covariance::Full(m) => StoredCovariance::Full(
                (0..m.nrows())
                    .map(|i| m.row(i).iter().copied().collect())
                    .collect(),
            ),
            Covariance::Diagonal(v) => StoredCovariance::Diagonal(v.iter().copied().collect()),
        }
    }

    fn to_cov(&self) -> Result<Covariance> {
        match self {
            StoredCovariance::Diagonal(v) => {
                Ok(Covariance::Diagonal(DVector::from_column_slice(v)))
            }
            StoredCovariance::Full(rows) => {
                let d = rows.len();
                if rows.iter().any(|r| r.len() != d) {
                    return Err(Error::Validation("full covariance is not square".into()));
                }
                Ok(Covariance::Full(DMatrix::from_fn(d, d, |i, j| rows[i][j])))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubclusterRecord {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: StoredCovariance,
    /// Mean of the queue, for inspection; recomputed on load.
    pub queue_mean: Vec<f64>,
    pub queue_len: usize,
    pub l_sub: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub category: u8,
    pub final_k: usize,
    pub history: Vec<usize>,
    pub log_likelihood: Vec<f64>,
    pub events: Vec<ProposalEvent>,
    pub rounds: Vec<ProposalRound>,
    pub warnings: Vec<String>,
    pub queue_capacity: usize,
    pub shrinkage: f64,
    pub cov_mode: Option<CovMode>,
    pub subclusters: Vec<SubclusterRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub config: ClusterConfig,
    pub merge_fakes: bool,
    pub categories: Vec<CategoryReport>,
}

impl ClusterReport {
    pub fn new(config: &ClusterConfig, merge_fakes: bool, states: &[SubclusterState]) -> Self {
        let categories = states
            .iter()
            .map(|s| CategoryReport {
                category: s.category.code(),
                final_k: s.final_k(),
                history: s.history.clone(),
                log_likelihood: s.log_likelihood.clone(),
                events: s.events.clone(),
                rounds: s.rounds.clone(),
                warnings: s.warnings.clone(),
                queue_capacity: s.queue_capacity,
                shrinkage: s.shrinkage,
                cov_mode: s.cov_mode,
                subclusters: s
                    .subclusters
                    .iter()
                    .map(|sub| SubclusterRecord {
                        weight: sub.component.weight(),
                        mean: sub.component.mean().iter().copied().collect(),
                        cov: StoredCovariance::from_cov(sub.component.cov()),
                        queue_mean: sub.stats.mean().iter().copied().collect(),
                        queue_len: sub.queue.len(),
                        l_sub: sub.l_sub,
                    })
                    .collect(),
            })
            .collect();
        ClusterReport {
            config: config.clone(),
            merge_fakes,
            categories,
        }
    }
}

/// All queues in state then subcluster order, labeled by category.
pub fn queues_to_set(states: &[SubclusterState]) -> Result<EmbeddingSet> {
    let dim = states
        .first()
        .map(|s| s.dim())
        .ok_or_else(|| Error::contract("no subcluster states"))?;
    let mut set = EmbeddingSet::new(dim)?;
    let mut index = Vec::new();
    for s in states {
        for (k, sub) in s.subclusters.iter().enumerate() {
            for v in &sub.queue {
                set.push(s.category, v.as_slice())?;
                index.push(k);
            }
        }
    }
    set.set_meta(SUBCLUSTER_META, serde_json::to_string(&index)?);
    Ok(set)
}

/// Rebuilds the states written by [`ClusterReport::new`] and
/// [`queues_to_set`].
pub fn load_states(report: &ClusterReport, queues: &EmbeddingSet) -> Result<Vec<SubclusterState>> {
    let index: Vec<usize> = match queues.meta().get(SUBCLUSTER_META) {
        Some(s) => serde_json::from_str(s)
            .map_err(|e| Error::Validation(format!("bad {SUBCLUSTER_META} meta: {e}")))?,
        None => {
            return Err(Error::Validation(format!(
                "queue file lacks the {SUBCLUSTER_META} meta key"
            )))
        }
    };
    if index.len() != queues.len() {
        return Err(Error::Validation(format!(
            "queue file has {} records but {} subcluster indices",
            queues.len(),
            index.len()
        )));
    }
    let mut buckets: BTreeMap<(u8, usize), VecDeque<DVector<f64>>> = BTreeMap::new();
    for (i, &k) in index.iter().enumerate() {
        buckets
            .entry((queues.label(i).code(), k))
            .or_default()
            .push_back(queues.dvector(i));
    }
    let mut states = Vec::with_capacity(report.categories.len());
    for c in &report.categories {
        let category = Label::new(c.category)?;
        let mut subclusters = Vec::with_capacity(c.subclusters.len());
        for (k, r) in c.subclusters.iter().enumerate() {
            let queue = buckets.remove(&(c.category, k)).unwrap_or_default();
            if queue.len() != r.queue_len || queue.is_empty() {
                return Err(Error::Validation(format!(
                    "category {} subcluster {k}: report lists {} queued vectors, queue file has {}",
                    c.category,
                    r.queue_len,
                    queue.len()
                )));
            }
            if queue[0].len() != r.mean.len() {
                return Err(Error::Validation(
                    "queue and report dimensions differ".into(),
                ));
            }
            let component = GaussianComponent::new(
                DVector::from_column_slice(&r.mean),
                r.cov.to_cov()?,
                r.weight,
            )?;
            let stats = queue_stats(&queue, r.weight, c.cov_mode, c.shrinkage)?;
            subclusters.push(Subcluster {
                component,
                queue,
                stats,
                l_sub: r.l_sub,
            });
        }
        if subclusters.is_empty() {
            return Err(Error::Validation(format!(
                "category {} has no subclusters",
                c.category
            )));
        }
        states.push(SubclusterState {
            category,
            subclusters,
            queue_capacity: c.queue_capacity,
            shrinkage: c.shrinkage,
            cov_mode: c.cov_mode,
            history: c.history.clone(),
            log_likelihood: c.log_likelihood.clone(),
            events: c.events.clone(),
            rounds: c.rounds.clone(),
            warnings: c.warnings.clone(),
        });
    }
    if let Some(((cat, k), _)) = buckets.into_iter().next() {
        return Err(Error::Validation(format!(
            "queue file has vectors for category {cat} subcluster {k}, absent from the report"
        )));
    }
    Ok(states)
}
