//! Configuration for the whole pipeline and the ablation harness.

use std::collections::BTreeMap;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::{generate_benchmark, BenchBundle, BenchSpec};
use crate::error::{Error, Result};
use crate::eval::{correction_rate_of, predict, self_correction_rate, CorrectionRate, ScoredSet};
use crate::outlier::ProbeConfig;
use crate::subcluster::{cluster_categories, ClusterConfig, SubclusterState};
use crate::trainer::{train, Objective, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            variants: Variant::ALL.to_vec(),
            seeds: (0..5).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Copied into every section that has no explicit seed of its own.
    pub seed: Option<u64>,
    pub bench: BenchSpec,
    pub cluster: ClusterConfig,
    pub probe: ProbeConfig,
    pub train: TrainConfig,
    pub ablation: AblationConfig,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Sets the seed of every section.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self.bench.seed = seed;
        self.cluster.seed = seed;
        self.probe.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Applies the global seed, if any, to every section.
    pub fn resolved(self) -> Self {
        match self.seed {
            Some(s) => self.with_seed(s),
            None => self,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.bench.validate()?;
        self.cluster.validate()?;
        self.probe.validate()?;
        self.train.validate()?;
        Ok(())
    }
}

/// Ablation variants; the `m*` names follow the usual numbering of the
/// component study, from the full model (m1) to the binary baseline (m6).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// m1: dynamic subclusters, outliers, contrastive and tri-class losses.
    Full,
    /// m2: drops the outlier-conditioned cross-entropy (two-way head).
    NoOcce,
    /// m3: drops the contrastive loss.
    NoOdcl,
    /// m4: no outliers, contrastive loss with a two-way head.
    OdclOnly,
    /// m5: no outliers, three-way head trained with cross-entropy only.
    OcceOnly,
    /// m6: two-way classifier, cross-entropy only.
    Binary,
    /// Full objective with K = 5 subclusters and no split/merge.
    FixedK,
    /// Full objective with all fake types clustered as one category.
    NoPrior,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Full,
        Variant::NoOcce,
        Variant::NoOdcl,
        Variant::OdclOnly,
        Variant::OcceOnly,
        Variant::Binary,
        Variant::FixedK,
        Variant::NoPrior,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoOcce => "no-occe",
            Variant::NoOdcl => "no-odcl",
            Variant::OdclOnly => "odcl-only",
            Variant::OcceOnly => "occe-only",
            Variant::Binary => "binary",
            Variant::FixedK => "fixed-k",
            Variant::NoPrior => "no-prior",
        }
    }

    pub fn objective(&self) -> Objective {
        let (contrastive, outliers, tri_class) = match self {
            Variant::Full | Variant::FixedK | Variant::NoPrior => (true, true, true),
            Variant::NoOcce => (true, true, false),
            Variant::NoOdcl => (false, true, true),
            Variant::OdclOnly => (true, false, false),
            Variant::OcceOnly => (false, false, true),
            Variant::Binary => (false, false, false),
        };
        Objective {
            contrastive,
            outliers,
            tri_class,
        }
    }

    pub fn cluster_config(&self, base: &ClusterConfig) -> ClusterConfig {
        match self {
            Variant::FixedK => ClusterConfig {
                k_init: 5,
                propose_every: 0,
                ..base.clone()
            },
            _ => base.clone(),
        }
    }

    pub fn merges_fakes(&self) -> bool {
        matches!(self, Variant::NoPrior)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let alias = match s {
            "m1" | "m-1" => "full",
            "m2" | "m-2" => "no-occe",
            "m3" | "m-3" => "no-odcl",
            "m4" | "m-4" => "odcl-only",
            "m5" | "m-5" => "occe-only",
            "m6" | "m-6" => "binary",
            other => other,
        };
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.name() == alias)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything produced by one variant on one benchmark draw.
#[derive(Debug, Clone)]
pub struct VariantRun {
    pub variant: Variant,
    pub seed: u64,
    pub states: Vec<SubclusterState>,
    pub outcome: TrainOutcome,
    pub known: ScoredSet,
    pub novel: ScoredSet,
    pub auc_known: f64,
    pub auc_novel: f64,
}

/// Clusters, trains and scores one variant.
pub fn run_variant(
    bundle: &BenchBundle,
    variant: Variant,
    config: &PipelineConfig,
) -> Result<VariantRun> {
    let cluster_cfg = variant.cluster_config(&config.cluster);
    let states = cluster_categories(&bundle.train, &cluster_cfg, variant.merges_fakes())?;
    let train_cfg = TrainConfig {
        objective: variant.objective(),
        ..config.train.clone()
    };
    let outcome = train(&bundle.train, &states, &config.probe, &train_cfg, None)?;
    let known = predict(&outcome.model, &bundle.test_known)?;
    let novel = predict(&outcome.model, &bundle.test_novel)?;
    Ok(VariantRun {
        variant,
        seed: config.train.seed,
        auc_known: known.auc()?,
        auc_novel: novel.auc()?,
        states,
        outcome,
        known,
        novel,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub auc_known: f64,
    pub auc_novel: f64,
    /// Final subcluster count per category code.
    pub subclusters: BTreeMap<u8, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub median_novel: f64,
    pub min_novel: f64,
    pub max_novel: f64,
    pub median_known: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionRow {
    pub seed: u64,
    pub known: CorrectionRate,
    pub novel: CorrectionRate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub summary: Vec<VariantSummary>,
    /// Binary-vs-full correction rates, when both variants ran.
    pub correction: Vec<CorrectionRow>,
    /// Within the full model: fakes its Real-vs-Fake readout misses that the
    /// merge rule recovers.
    pub self_correction: Vec<CorrectionRow>,
}

impl AblationReport {
    pub fn summary_of(&self, v: Variant) -> Option<&VariantSummary> {
        self.summary.iter().find(|s| s.variant == v)
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs every `(variant, seed)` pair; each seed draws its own benchmark.
pub fn run_ablation(config: &PipelineConfig) -> Result<AblationReport> {
    let ab = &config.ablation;
    if ab.variants.is_empty() || ab.seeds.is_empty() {
        return Err(Error::Config(
            "ablation needs at least one variant and one seed".into(),
        ));
    }
    let bundles: Vec<(u64, BenchBundle, PipelineConfig)> = ab
        .seeds
        .par_iter()
        .map(|&s| {
            let cfg = config.clone().with_seed(s);
            generate_benchmark(&cfg.bench).map(|b| (s, b, cfg))
        })
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, Variant)> = (0..bundles.len())
        .flat_map(|b| ab.variants.iter().map(move |&v| (b, v)))
        .collect();
    let runs: Vec<VariantRun> = jobs
        .par_iter()
        .map(|&(b, v)| run_variant(&bundles[b].1, v, &bundles[b].2))
        .collect::<Result<_>>()?;

    let rows: Vec<AblationRow> = runs
        .iter()
        .map(|r| AblationRow {
            variant: r.variant,
            seed: r.seed,
            auc_known: r.auc_known,
            auc_novel: r.auc_novel,
            subclusters: r
                .states
                .iter()
                .map(|s| (s.category.code(), s.final_k()))
                .collect(),
        })
        .collect();
    let mut summary = Vec::new();
    for &v in &ab.variants {
        let novel: Vec<f64> = rows
            .iter()
            .filter(|r| r.variant == v)
            .map(|r| r.auc_novel)
            .collect();
        let known: Vec<f64> = rows
            .iter()
            .filter(|r| r.variant == v)
            .map(|r| r.auc_known)
            .collect();
        summary.push(VariantSummary {
            variant: v,
            median_novel: median(&novel),
            min_novel: novel.iter().copied().fold(f64::INFINITY, f64::min),
            max_novel: novel.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            median_known: median(&known),
        });
    }
    let mut correction = Vec::new();
    let mut self_correction = Vec::new();
    for &(seed, _, _) in &bundles {
        let find = |v: Variant| runs.iter().find(|r| r.variant == v && r.seed == seed);
        if let Some(f) = find(Variant::Full) {
            self_correction.push(CorrectionRow {
                seed,
                known: self_correction_rate(&f.known)?,
                novel: self_correction_rate(&f.novel)?,
            });
        }
        if let (Some(b), Some(f)) = (find(Variant::Binary), find(Variant::Full)) {
            correction.push(CorrectionRow {
                seed,
                known: correction_rate_of(&b.known, &f.known)?,
                novel: correction_rate_of(&b.novel, &f.novel)?,
            });
        }
    }
    Ok(AblationReport {
        rows,
        summary,
        correction,
        self_correction,
    })
}
