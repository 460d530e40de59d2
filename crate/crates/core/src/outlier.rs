//! Boundary outlier synthesis from the low-likelihood region of each
//! subcluster Gaussian.

use std::io::Write;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{write_frd1, EmbeddingSet, Label};
use crate::error::{Error, Result};
use crate::gaussian::GaussianComponent;
use crate::seed::rng_for;
use crate::subcluster::SubclusterState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum ProbeMode {
    /// Keep the lowest-density candidates; they fall in the lowest `q`
    /// fraction of the batch.
    Quantile { q: f64 },
    /// Keep candidates whose log-density is below `log_epsilon`.
    Threshold { log_epsilon: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub mode: ProbeMode,
    pub per_subcluster: usize,
    pub candidates: usize,
    /// Extra candidate batches drawn in threshold mode before giving up.
    pub max_retries: usize,
    /// Reuse the first epoch's pool instead of regenerating each epoch.
    pub freeze: bool,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            mode: ProbeMode::Quantile { q: 0.05 },
            per_subcluster: 50,
            candidates: 1000,
            max_retries: 10,
            freeze: false,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.per_subcluster == 0 {
            return Err(Error::Config("per_subcluster must be at least 1".into()));
        }
        if self.candidates < self.per_subcluster {
            return Err(Error::Config(format!(
                "candidates {} is smaller than per_subcluster {}",
                self.candidates, self.per_subcluster
            )));
        }
        match self.mode {
            ProbeMode::Quantile { q } => {
                if !(q > 0.0 && q <= 1.0) {
                    return Err(Error::Config(format!("quantile q {q} must lie in (0, 1]")));
                }
                let cap = (q * self.candidates as f64 + 1e-9).floor() as usize;
                if self.per_subcluster > cap {
                    return Err(Error::Config(format!(
                        "per_subcluster {} exceeds the {} candidates in the lowest {q} quantile",
                        self.per_subcluster, cap
                    )));
                }
            }
            ProbeMode::Threshold { log_epsilon } => {
                if log_epsilon.is_nan() {
                    return Err(Error::Config("log_epsilon is NaN".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutlierSource {
    pub category: u8,
    pub subcluster: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubclusterProbe {
    pub category: u8,
    pub subcluster: usize,
    pub accepted: usize,
    pub candidates_drawn: usize,
    /// Log of the effective ε: the largest kept log-density in quantile
    /// mode, the configured threshold in threshold mode.
    pub log_epsilon_used: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutlierPool {
    pub dim: usize,
    pub vectors: Vec<DVector<f64>>,
    pub log_densities: Vec<f64>,
    pub sources: Vec<OutlierSource>,
    pub probes: Vec<SubclusterProbe>,
    pub warnings: Vec<String>,
}

impl OutlierPool {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// Candidates kept from one Gaussian, in candidate order for threshold mode
/// and ascending density for quantile mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDraw {
    pub kept: Vec<(DVector<f64>, f64)>,
    pub candidates_drawn: usize,
    pub log_epsilon_used: f64,
}

/// Draws outliers from one Gaussian.
pub fn probe_gaussian<R: rand::Rng + ?Sized>(
    g: &GaussianComponent,
    config: &ProbeConfig,
    rng: &mut R,
) -> Result<ProbeDraw> {
    config.validate()?;
    let n = config.per_subcluster;
    let m = config.candidates;
    match config.mode {
        ProbeMode::Quantile { .. } => {
            let cands = g.sample(m, rng);
            let mut scored: Vec<(usize, f64)> = cands
                .iter()
                .enumerate()
                .map(|(i, c)| (i, g.log_density_unchecked(c.as_slice())))
                .collect();
            scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            scored.truncate(n);
            let log_epsilon_used = scored.last().map(|s| s.1).unwrap_or(f64::NEG_INFINITY);
            Ok(ProbeDraw {
                kept: scored
                    .into_iter()
                    .map(|(i, ld)| (cands[i].clone(), ld))
                    .collect(),
                candidates_drawn: m,
                log_epsilon_used,
            })
        }
        ProbeMode::Threshold { log_epsilon } => {
            let mut kept = Vec::with_capacity(n);
            let mut drawn = 0;
            let mut min_seen = f64::INFINITY;
            for _ in 0..=config.max_retries {
                for c in g.sample(m, rng) {
                    drawn += 1;
                    let ld = g.log_density_unchecked(c.as_slice());
                    min_seen = min_seen.min(ld);
                    if ld < log_epsilon {
                        kept.push((c, ld));
                        if kept.len() == n {
                            break;
                        }
                    }
                }
                if kept.len() == n {
                    break;
                }
            }
            if kept.is_empty() {
                return Err(Error::NoAcceptedOutliers {
                    min_log_density: min_seen,
                });
            }
            Ok(ProbeDraw {
                kept,
                candidates_drawn: drawn,
                log_epsilon_used: log_epsilon,
            })
        }
    }
}

/// Synthesizes the outlier pool over every subcluster of every state.
///
/// Each subcluster draws from its own stream derived from
/// `(seed, category, subcluster, epoch)`; results are merged in state then
/// subcluster order.
pub fn generate_outliers(
    states: &[SubclusterState],
    config: &ProbeConfig,
    epoch: u64,
) -> Result<OutlierPool> {
    config.validate()?;
    let dim = states
        .first()
        .map(|s| s.dim())
        .ok_or_else(|| Error::contract("no subcluster states to probe"))?;
    let jobs: Vec<(u8, usize, &GaussianComponent)> = states
        .iter()
        .flat_map(|s| {
            s.subclusters
                .iter()
                .enumerate()
                .map(move |(k, sub)| (s.category.code(), k, &sub.stats))
        })
        .collect();
    let draws: Vec<Result<ProbeDraw>> = jobs
        .par_iter()
        .map(|&(cat, k, g)| {
            let mut rng = rng_for(config.seed, &[u64::from(cat), k as u64, epoch]);
            probe_gaussian(g, config, &mut rng)
        })
        .collect();
    let mut pool = OutlierPool {
        dim,
        vectors: Vec::new(),
        log_densities: Vec::new(),
        sources: Vec::new(),
        probes: Vec::new(),
        warnings: Vec::new(),
    };
    for (&(category, subcluster, _), draw) in jobs.iter().zip(draws) {
        let draw = draw?;
        if draw.kept.len() < config.per_subcluster {
            pool.warnings.push(format!(
                "category {category} subcluster {subcluster}: {} of {} outliers accepted",
                draw.kept.len(),
                config.per_subcluster
            ));
        }
        pool.probes.push(SubclusterProbe {
            category,
            subcluster,
            accepted: draw.kept.len(),
            candidates_drawn: draw.candidates_drawn,
            log_epsilon_used: draw.log_epsilon_used,
        });
        for (v, ld) in draw.kept {
            pool.vectors.push(v);
            pool.log_densities.push(ld);
            pool.sources.push(OutlierSource {
                category,
                subcluster,
            });
        }
    }
    Ok(pool)
}

pub fn pool_to_set(pool: &OutlierPool) -> Result<EmbeddingSet> {
    let mut set = EmbeddingSet::new(pool.dim)?;
    for v in &pool.vectors {
        set.push(Label::OUTLIER, v.as_slice())?;
    }
    set.set_meta("sources", serde_json::to_string(&pool.sources)?);
    set.set_meta("log_densities", serde_json::to_string(&pool.log_densities)?);
    set.set_meta("probes", serde_json::to_string(&pool.probes)?);
    Ok(set)
}

/// Writes the pool as FRD1 with label 254; returns the byte count.
pub fn persist_pool<W: Write>(pool: &OutlierPool, destination: W) -> Result<u64> {
    write_frd1(&pool_to_set(pool)?, destination)
}
