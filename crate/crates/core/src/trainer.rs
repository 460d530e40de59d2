//! Projection head plus Real/Fake/Outlier linear classifier, trained with
//! the outlier-driven contrastive loss and the outlier-conditioned
//! cross-entropy.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingSet, Label};
use crate::error::{Error, Result};
use crate::outlier::{generate_outliers, ProbeConfig};
use crate::seed::rng_for;
use crate::subcluster::SubclusterState;

pub const CLASS_REAL: usize = 0;
pub const CLASS_FAKE: usize = 1;
pub const CLASS_OUTLIER: usize = 2;

const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierInput {
    /// The unit-normalized projection `h`.
    Normalized,
    /// The raw projection `proj x + bias`.
    Raw,
}

/// Which terms of the objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Objective {
    pub contrastive: bool,
    /// Synthesize boundary outliers (contrastive negatives and, with a
    /// three-way head, the Outlier class).
    pub outliers: bool,
    pub tri_class: bool,
}

impl Default for Objective {
    fn default() -> Self {
        Objective {
            contrastive: true,
            outliers: true,
            tri_class: true,
        }
    }
}

impl Objective {
    pub fn n_classes(&self) -> usize {
        if self.tri_class {
            3
        } else {
            2
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_real_fake: usize,
    pub batch_outliers: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub tau: f64,
    pub lambda: f64,
    pub proj_dim: usize,
    pub include_positive_in_denominator: bool,
    pub classifier_input: ClassifierInput,
    /// Keep the first epoch's centers for the whole run.
    pub freeze_centers: bool,
    pub objective: Objective,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_real_fake: 16,
            batch_outliers: 16,
            lr: 1e-3,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            tau: 0.1,
            lambda: 0.5,
            proj_dim: 128,
            include_positive_in_denominator: false,
            classifier_input: ClassifierInput::Normalized,
            freeze_centers: false,
            objective: Objective::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tau", self.tau),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.beta1 < 1.0 && self.beta2 < 1.0) {
            return Err(Error::Config("adam betas must be below 1".into()));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
            ("lambda", self.lambda),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be nonnegative, got {v}"
                )));
            }
        }
        if self.epochs == 0 || self.batch_real_fake == 0 || self.proj_dim == 0 {
            return Err(Error::Config(
                "epochs, batch_real_fake and proj_dim must be at least 1".into(),
            ));
        }
        if self.objective.outliers && self.batch_outliers == 0 {
            return Err(Error::Config(
                "batch_outliers must be at least 1 when outliers are used".into(),
            ));
        }
        Ok(())
    }
}

/// Parameter block shared by the model, its gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// `p x d`
    pub proj: DMatrix<f64>,
    pub proj_bias: DVector<f64>,
    /// `classes x p`
    pub cls: DMatrix<f64>,
    pub cls_bias: DVector<f64>,
}

impl Params {
    pub fn zeros(dim: usize, proj_dim: usize, n_classes: usize) -> Self {
        Params {
            proj: DMatrix::zeros(proj_dim, dim),
            proj_bias: DVector::zeros(proj_dim),
            cls: DMatrix::zeros(n_classes, proj_dim),
            cls_bias: DVector::zeros(n_classes),
        }
    }

    pub fn zeros_like(other: &Params) -> Self {
        Params::zeros(other.proj.ncols(), other.proj.nrows(), other.cls.nrows())
    }

    pub fn slices(&self) -> [&[f64]; 4] {
        [
            self.proj.as_slice(),
            self.proj_bias.as_slice(),
            self.cls.as_slice(),
            self.cls_bias.as_slice(),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.proj.as_mut_slice(),
            self.proj_bias.as_mut_slice(),
            self.cls.as_mut_slice(),
            self.cls_bias.as_mut_slice(),
        ]
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, mut index: usize) -> f64 {
        for s in self.slices() {
            if index < s.len() {
                return s[index];
            }
            index -= s.len();
        }
        panic!("parameter index out of range")
    }

    pub fn set(&mut self, mut index: usize, value: f64) {
        for s in self.slices_mut() {
            if index < s.len() {
                s[index] = value;
                return;
            }
            index -= s.len();
        }
        panic!("parameter index out of range")
    }

    pub fn norm_squared(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|v| v * v)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriClassModel {
    pub params: Params,
    pub tau: f64,
    pub lambda: f64,
    pub classifier_input: ClassifierInput,
    /// Unit-norm subcluster centers in projection space.
    pub centers: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub raw: DVector<f64>,
    pub h: DVector<f64>,
    pub norm: f64,
}

impl TriClassModel {
    pub fn init(dim: usize, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if dim == 0 {
            return Err(Error::contract("input dimension must be at least 1"));
        }
        let p = config.proj_dim;
        let c = config.objective.n_classes();
        let mut rng = rng_for(config.seed, &[0x1417]);
        let mut params = Params::zeros(dim, p, c);
        let s_proj = (1.0 / dim as f64).sqrt();
        let s_cls = (1.0 / p as f64).sqrt();
        for v in params.proj.iter_mut() {
            *v = s_proj * rng.sample::<f64, _>(StandardNormal);
        }
        for v in params.cls.iter_mut() {
            *v = s_cls * rng.sample::<f64, _>(StandardNormal);
        }
        Ok(TriClassModel {
            params,
            tau: config.tau,
            lambda: config.lambda,
            classifier_input: config.classifier_input,
            centers: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.params.proj.ncols()
    }

    pub fn proj_dim(&self) -> usize {
        self.params.proj.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.params.cls.nrows()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::contract(format!(
                "input has dim {}, model expects {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn project(&self, x: &[f64]) -> Result<Projection> {
        self.check_input(x)?;
        Ok(self.project_unchecked(x))
    }

    pub(crate) fn project_unchecked(&self, x: &[f64]) -> Projection {
        let mut raw = self.params.proj_bias.clone();
        raw.gemv(1.0, &self.params.proj, &DVector::from_column_slice(x), 1.0);
        let norm = raw.norm().max(NORM_FLOOR);
        let h = &raw / norm;
        Projection { raw, h, norm }
    }

    fn classifier_features<'a>(&self, pr: &'a Projection) -> &'a DVector<f64> {
        match self.classifier_input {
            ClassifierInput::Normalized => &pr.h,
            ClassifierInput::Raw => &pr.raw,
        }
    }

    pub fn logits(&self, x: &[f64]) -> Result<DVector<f64>> {
        let pr = self.project(x)?;
        Ok(self.logits_of(&pr))
    }

    fn logits_of(&self, pr: &Projection) -> DVector<f64> {
        let mut z = self.params.cls_bias.clone();
        z.gemv(1.0, &self.params.cls, self.classifier_features(pr), 1.0);
        z
    }

    pub fn probabilities(&self, x: &[f64]) -> Result<DVector<f64>> {
        Ok(softmax(&self.logits(x)?))
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(logits: &DVector<f64>) -> DVector<f64> {
    let lse = log_sum_exp(logits.iter().copied());
    logits.map(|z| (z - lse).exp())
}

/// `-log softmax(logits)[label]` and its gradient with respect to `logits`.
pub fn cross_entropy_loss(logits: &DVector<f64>, label: usize) -> Result<(f64, DVector<f64>)> {
    if label >= logits.len() {
        return Err(Error::contract(format!(
            "label {label} out of range for {} logits",
            logits.len()
        )));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::contract("logits must be finite"));
    }
    let lse = log_sum_exp(logits.iter().copied());
    let loss = lse - logits[label];
    let mut grad = logits.map(|z| (z - lse).exp());
    grad[label] -= 1.0;
    Ok((loss, grad))
}

pub fn total_loss(l_con: f64, l_cls: f64, lambda: f64) -> f64 {
    l_con + lambda * l_cls
}

/// Contrastive loss and its gradients with respect to every `h` and every
/// projected outlier.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveTerms {
    pub loss: f64,
    pub grad_h: Vec<DVector<f64>>,
    pub grad_outliers: Vec<DVector<f64>>,
}

/// Batch-mean of
/// `-log[ exp(s(h,μ⁺)/τ) / (Σ_{k⁻} exp(s(h,μ_k⁻)/τ) + Σ_j exp(s(h,v_j)/τ)) ]`.
///
/// `h`, `centers` and `outliers` must be unit vectors, so dot products are
/// cosine similarities. The positive joins the denominator only when
/// `include_positive` is set.
pub fn contrastive_loss(
    h: &[DVector<f64>],
    positives: &[usize],
    centers: &[DVector<f64>],
    outliers: &[DVector<f64>],
    tau: f64,
    include_positive: bool,
) -> Result<ContrastiveTerms> {
    if h.len() != positives.len() {
        return Err(Error::contract(
            "one positive center per sample is required",
        ));
    }
    if !(tau > 0.0) {
        return Err(Error::contract(format!("tau {tau} must be positive")));
    }
    if centers.len() + outliers.len() < 2 && !h.is_empty() {
        return Err(Error::contract("contrastive loss has no negatives"));
    }
    if let Some(&bad) = positives.iter().find(|&&k| k >= centers.len()) {
        return Err(Error::contract(format!(
            "positive center {bad} does not exist"
        )));
    }
    let b = h.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad_h = Vec::with_capacity(h.len());
    let mut grad_outliers = vec![DVector::zeros(h.first().map_or(0, |v| v.len())); outliers.len()];
    let mut scores = Vec::with_capacity(centers.len() + outliers.len());
    for (hi, &pos) in h.iter().zip(positives) {
        scores.clear();
        let s_pos = hi.dot(&centers[pos]) / tau;
        for (k, c) in centers.iter().enumerate() {
            if k != pos || include_positive {
                scores.push(hi.dot(c) / tau);
            }
        }
        let n_centers_in = scores.len();
        for v in outliers {
            scores.push(hi.dot(v) / tau);
        }
        let lse = log_sum_exp(scores.iter().copied());
        loss += lse - s_pos;
        // d/dh: Σ w_n v_n / τ − μ⁺ / τ, with w the softmax over the denominator
        let mut g = -&centers[pos] / tau;
        let mut slot = 0;
        for (k, c) in centers.iter().enumerate() {
            if k != pos || include_positive {
                g.axpy((scores[slot] - lse).exp() / tau, c, 1.0);
                slot += 1;
            }
        }
        for (j, v) in outliers.iter().enumerate() {
            let w = (scores[n_centers_in + j] - lse).exp() / tau;
            g.axpy(w, v, 1.0);
            grad_outliers[j].axpy(w / b, hi, 1.0);
        }
        grad_h.push(g / b);
    }
    Ok(ContrastiveTerms {
        loss: loss / b,
        grad_h,
        grad_outliers,
    })
}

/// One minibatch: real/fake inputs with class and positive-center indices,
/// plus outliers.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub inputs: Vec<&'a DVector<f64>>,
    pub classes: Vec<usize>,
    pub positives: Vec<usize>,
    pub outliers: Vec<&'a DVector<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub contrastive: f64,
    pub classification: f64,
    pub total: f64,
    pub correct: usize,
    pub classified: usize,
}

/// Batch objective `l_con + λ l_cls` and its parameter gradient.
pub fn batch_objective(
    model: &TriClassModel,
    batch: &Batch<'_>,
    objective: &Objective,
    include_positive: bool,
) -> Result<(LossParts, Params)> {
    if batch.inputs.len() != batch.classes.len() || batch.inputs.len() != batch.positives.len() {
        return Err(Error::contract("batch fields have different lengths"));
    }
    if objective.tri_class != (model.n_classes() == 3) {
        return Err(Error::contract("objective and classifier head disagree"));
    }
    for x in batch.inputs.iter().chain(&batch.outliers) {
        model.check_input(x.as_slice())?;
    }
    let use_outliers = objective.outliers && !batch.outliers.is_empty();
    let proj_in: Vec<Projection> = batch
        .inputs
        .iter()
        .map(|x| model.project_unchecked(x.as_slice()))
        .collect();
    let proj_out: Vec<Projection> = if use_outliers {
        batch
            .outliers
            .iter()
            .map(|x| model.project_unchecked(x.as_slice()))
            .collect()
    } else {
        Vec::new()
    };

    let p = model.proj_dim();
    let mut d_h_in = vec![DVector::zeros(p); proj_in.len()];
    let mut d_h_out = vec![DVector::zeros(p); proj_out.len()];
    let mut d_raw_in = vec![DVector::zeros(p); proj_in.len()];
    let mut d_raw_out = vec![DVector::zeros(p); proj_out.len()];
    let mut grads = Params::zeros_like(&model.params);
    let mut parts = LossParts::default();

    if objective.contrastive && !proj_in.is_empty() {
        let hs: Vec<DVector<f64>> = proj_in.iter().map(|pr| pr.h.clone()).collect();
        let hos: Vec<DVector<f64>> = proj_out.iter().map(|pr| pr.h.clone()).collect();
        let terms = contrastive_loss(
            &hs,
            &batch.positives,
            &model.centers,
            &hos,
            model.tau,
            include_positive,
        )?;
        parts.contrastive = terms.loss;
        d_h_in = terms.grad_h;
        d_h_out = terms.grad_outliers;
    }

    let classify_outliers = use_outliers && objective.tri_class;
    let n_cls = proj_in.len() + if classify_outliers { proj_out.len() } else { 0 };
    let scale = model.lambda / n_cls.max(1) as f64;
    let mut classify = |pr: &Projection,
                        label: usize,
                        d_h: &mut DVector<f64>,
                        d_raw: &mut DVector<f64>|
     -> Result<()> {
        let z = model.logits_of(pr);
        let (l, dz) = cross_entropy_loss(&z, label)?;
        parts.classification += l;
        parts.classified += 1;
        if z.argmax().0 == label {
            parts.correct += 1;
        }
        let dz = dz * scale;
        let f = model.classifier_features(pr);
        grads.cls.ger(1.0, &dz, f, 1.0);
        grads.cls_bias += &dz;
        let df = model.params.cls.tr_mul(&dz);
        match model.classifier_input {
            ClassifierInput::Normalized => *d_h += df,
            ClassifierInput::Raw => *d_raw += df,
        }
        Ok(())
    };
    for (i, pr) in proj_in.iter().enumerate() {
        classify(pr, batch.classes[i], &mut d_h_in[i], &mut d_raw_in[i])?;
    }
    if classify_outliers {
        for (j, pr) in proj_out.iter().enumerate() {
            classify(pr, CLASS_OUTLIER, &mut d_h_out[j], &mut d_raw_out[j])?;
        }
    }
    parts.classification /= n_cls.max(1) as f64;
    parts.total = total_loss(parts.contrastive, parts.classification, model.lambda);

    let mut backprop =
        |x: &DVector<f64>, pr: &Projection, d_h: &DVector<f64>, d_raw: &DVector<f64>| {
            // u -> u/‖u‖ has Jacobian (I − h hᵀ)/‖u‖
            let mut du = (d_h - &pr.h * pr.h.dot(d_h)) / pr.norm;
            du += d_raw;
            grads.proj.ger(1.0, &du, x, 1.0);
            grads.proj_bias += &du;
        };
    for (i, pr) in proj_in.iter().enumerate() {
        backprop(batch.inputs[i], pr, &d_h_in[i], &d_raw_in[i]);
    }
    for (j, pr) in proj_out.iter().enumerate() {
        backprop(batch.outliers[j], pr, &d_h_out[j], &d_raw_out[j]);
    }
    Ok((parts, grads))
}

/// Batch objective plus `(wd/2)‖θ‖²`, the coupled form of weight decay.
pub fn regularized_objective(
    model: &TriClassModel,
    batch: &Batch<'_>,
    objective: &Objective,
    include_positive: bool,
    weight_decay: f64,
) -> Result<(f64, Params)> {
    let (parts, mut grads) = batch_objective(model, batch, objective, include_positive)?;
    let value = parts.total + 0.5 * weight_decay * model.params.norm_squared();
    for (g, t) in grads.slices_mut().into_iter().zip(model.params.slices()) {
        for (gi, ti) in g.iter_mut().zip(t) {
            *gi += weight_decay * ti;
        }
    }
    Ok((value, grads))
}

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Params,
    v: Params,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(like: &Params, config: &TrainConfig) -> Self {
        AdamW {
            m: Params::zeros_like(like),
            v: Params::zeros_like(like),
            t: 0,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            weight_decay: config.weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let blocks = params
            .slices_mut()
            .into_iter()
            .zip(grads.slices())
            .zip(self.m.slices_mut())
            .zip(self.v.slices_mut());
        for (((p, g), m), v) in blocks {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                p[i] = p[i] * (1.0 - lr * wd) - lr * update;
            }
        }
    }
}

/// Learning rate at `step` of `total` under cosine decay to zero.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_con: f64,
    pub l_cls: f64,
    pub l_total: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub outliers: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: TriClassModel,
    pub log: Vec<EpochLog>,
    pub warnings: Vec<String>,
}

/// Maps each record's label to the subcluster state that models it.
#[derive(Debug, Clone)]
pub struct CategoryIndex {
    by_label: BTreeMap<u8, usize>,
    /// Offset of each state's first subcluster in the global center list.
    offsets: Vec<usize>,
    total: usize,
}

impl CategoryIndex {
    /// Fake types fall back to a single merged fake state when they lack
    /// their own.
    pub fn new(set: &EmbeddingSet, states: &[SubclusterState]) -> Result<Self> {
        let mut own: BTreeMap<u8, usize> = BTreeMap::new();
        for (i, s) in states.iter().enumerate() {
            if own.insert(s.category.code(), i).is_some() {
                return Err(Error::Config(format!(
                    "duplicate subcluster state for category {}",
                    s.category
                )));
            }
        }
        let fake_states: Vec<usize> = states
            .iter()
            .enumerate()
            .filter(|(_, s)| s.category.is_fake())
            .map(|(i, _)| i)
            .collect();
        let mut by_label = BTreeMap::new();
        for label in set.distinct_labels() {
            if !(label.is_real() || label.is_fake()) {
                continue;
            }
            let idx = match own.get(&label.code()) {
                Some(&i) => i,
                None if label.is_fake() && fake_states.len() == 1 => fake_states[0],
                None => {
                    return Err(Error::Config(format!(
                        "category {label} has no subcluster state"
                    )))
                }
            };
            by_label.insert(label.code(), idx);
        }
        let mut offsets = Vec::with_capacity(states.len());
        let mut total = 0;
        for s in states {
            offsets.push(total);
            total += s.len();
        }
        Ok(CategoryIndex {
            by_label,
            offsets,
            total,
        })
    }

    pub fn state_of(&self, label: Label) -> Option<usize> {
        self.by_label.get(&label.code()).copied()
    }

    pub fn n_centers(&self) -> usize {
        self.total
    }

    /// Global center index of the subcluster that `x` belongs to.
    pub fn center_of(&self, states: &[SubclusterState], label: Label, x: &[f64]) -> Option<usize> {
        let s = self.state_of(label)?;
        Some(self.offsets[s] + states[s].assign(x))
    }
}

/// Means of projected queue members per subcluster, re-normalized.
pub fn refresh_centers(model: &TriClassModel, states: &[SubclusterState]) -> Vec<DVector<f64>> {
    let p = model.proj_dim();
    let mut centers = Vec::new();
    for s in states {
        for sub in &s.subclusters {
            let mut acc = DVector::zeros(p);
            for x in &sub.queue {
                acc += model.project_unchecked(x.as_slice()).h;
            }
            let n = acc.norm();
            if n > NORM_FLOOR {
                acc /= n;
            } else {
                acc = model.project_unchecked(sub.stats.mean().as_slice()).h;
            }
            centers.push(acc);
        }
    }
    centers
}

/// Trains on the real and fake records of `train_set`.
///
/// `fixed_outliers`, when given, replaces per-epoch synthesis.
pub fn train(
    train_set: &EmbeddingSet,
    states: &[SubclusterState],
    probe: &ProbeConfig,
    config: &TrainConfig,
    fixed_outliers: Option<&[DVector<f64>]>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let index = CategoryIndex::new(train_set, states)?;
    if states.iter().any(|s| s.dim() != train_set.dim()) {
        return Err(Error::Config(
            "subcluster state dimension differs from training data".into(),
        ));
    }
    let objective = config.objective;
    if objective.outliers && fixed_outliers.is_none() {
        probe.validate()?;
    }

    let mut inputs = Vec::new();
    let mut classes = Vec::new();
    let mut positives = Vec::new();
    for (label, x) in train_set.iter() {
        let Some(center) = index.center_of(states, label, x) else {
            continue;
        };
        inputs.push(DVector::from_column_slice(x));
        classes.push(if label.is_real() {
            CLASS_REAL
        } else {
            CLASS_FAKE
        });
        positives.push(center);
    }
    if inputs.is_empty() {
        return Err(Error::Validation(
            "training set has no real or fake records".into(),
        ));
    }
    if objective.contrastive && !objective.outliers && index.n_centers() < 2 {
        return Err(Error::Config(
            "contrastive loss without outliers needs at least two subclusters".into(),
        ));
    }

    let mut model = TriClassModel::init(train_set.dim(), config)?;
    let mut opt = AdamW::new(&model.params, config);
    let bs = config.batch_real_fake;
    let batches_per_epoch = inputs.len().div_ceil(bs);
    let total_steps = batches_per_epoch * config.epochs;
    let mut step = 0;
    let mut log = Vec::with_capacity(config.epochs);
    let mut warnings = Vec::new();
    let mut pool: Vec<DVector<f64>> = fixed_outliers.map(|o| o.to_vec()).unwrap_or_default();
    let mut order: Vec<usize> = (0..inputs.len()).collect();

    for epoch in 0..config.epochs {
        if !(config.freeze_centers && epoch > 0) {
            model.centers = refresh_centers(&model, states);
        }
        if objective.outliers && fixed_outliers.is_none() && !(probe.freeze && epoch > 0) {
            let generated = generate_outliers(states, probe, epoch as u64)?;
            warnings.extend(
                generated
                    .warnings
                    .iter()
                    .map(|w| format!("epoch {epoch}: {w}")),
            );
            pool = generated.vectors;
        }
        if objective.outliers && pool.is_empty() {
            return Err(Error::Validation("outlier pool is empty".into()));
        }
        let mut rng = rng_for(config.seed, &[0x7a11, epoch as u64]);
        order.shuffle(&mut rng);
        let mut pool_order: Vec<usize> = (0..pool.len()).collect();
        pool_order.shuffle(&mut rng);

        let mut sums = LossParts::default();
        let mut lr = config.lr;
        for b in 0..batches_per_epoch {
            let idx = &order[b * bs..((b + 1) * bs).min(order.len())];
            let outliers: Vec<&DVector<f64>> = if objective.outliers {
                (0..config.batch_outliers)
                    .map(|j| &pool[pool_order[(b * config.batch_outliers + j) % pool.len()]])
                    .collect()
            } else {
                Vec::new()
            };
            let batch = Batch {
                inputs: idx.iter().map(|&i| &inputs[i]).collect(),
                classes: idx.iter().map(|&i| classes[i]).collect(),
                positives: idx.iter().map(|&i| positives[i]).collect(),
                outliers,
            };
            let (parts, grads) = batch_objective(
                &model,
                &batch,
                &objective,
                config.include_positive_in_denominator,
            )?;
            lr = cosine_lr(config.lr, step, total_steps);
            opt.step(&mut model.params, &grads, lr);
            step += 1;
            sums.contrastive += parts.contrastive;
            sums.classification += parts.classification;
            sums.total += parts.total;
            sums.correct += parts.correct;
            sums.classified += parts.classified;
        }
        let nb = batches_per_epoch as f64;
        log.push(EpochLog {
            epoch,
            l_con: sums.contrastive / nb,
            l_cls: sums.classification / nb,
            l_total: sums.total / nb,
            accuracy: sums.correct as f64 / sums.classified.max(1) as f64,
            lr,
            outliers: pool.len(),
        });
    }
    model.centers = refresh_centers(&model, states);
    Ok(TrainOutcome {
        model,
        log,
        warnings,
    })
}

pub const FRM1_MAGIC: [u8; 4] = *b"FRM1";
pub const FRM1_VERSION: u32 = 1;

/// Serializes the model: magic, version, dims, hyperparameters, then all
/// weights as row-major little-endian f64.
pub fn write_model<W: Write>(model: &TriClassModel, mut out: W) -> Result<u64> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(&FRM1_MAGIC);
    for v in [
        FRM1_VERSION,
        model.dim() as u32,
        model.proj_dim() as u32,
        model.n_classes() as u32,
        model.centers.len() as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.push(match model.classifier_input {
        ClassifierInput::Normalized => 0,
        ClassifierInput::Raw => 1,
    });
    buf.extend_from_slice(&model.tau.to_le_bytes());
    buf.extend_from_slice(&model.lambda.to_le_bytes());
    let mut put_matrix = |m: &DMatrix<f64>| {
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                buf.extend_from_slice(&m[(r, c)].to_le_bytes());
            }
        }
    };
    put_matrix(&model.params.proj);
    put_matrix(&DMatrix::from_column_slice(
        1,
        model.proj_dim(),
        model.params.proj_bias.as_slice(),
    ));
    put_matrix(&model.params.cls);
    put_matrix(&DMatrix::from_column_slice(
        1,
        model.n_classes(),
        model.params.cls_bias.as_slice(),
    ));
    for c in &model.centers {
        for v in c.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)
        .map_err(|source| Error::Io { offset: 0, source })?;
    Ok(buf.len() as u64)
}

pub fn read_model<R: Read>(mut src: R) -> Result<TriClassModel> {
    let mut bytes = Vec::new();
    src.read_to_end(&mut bytes).map_err(|source| Error::Io {
        offset: bytes.len() as u64,
        source,
    })?;
    parse_model(&bytes)
}

pub fn parse_model(bytes: &[u8]) -> Result<TriClassModel> {
    const HEADER: usize = 4 + 5 * 4 + 1 + 16;
    if bytes.len() < 4 || bytes[..4] != FRM1_MAGIC {
        return Err(Error::Format("missing FRM1 magic".into()));
    }
    if bytes.len() < HEADER {
        return Err(Error::Truncated {
            expected: HEADER as u64,
            actual: bytes.len() as u64,
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u32_at(4) as u32;
    if version != FRM1_VERSION {
        return Err(Error::Format(format!(
            "unsupported model version {version}"
        )));
    }
    let (d, p, c, nc) = (u32_at(8), u32_at(12), u32_at(16), u32_at(20));
    if d == 0 || p == 0 || !(c == 2 || c == 3) {
        return Err(Error::Format(format!(
            "invalid model dims d={d} p={p} classes={c}"
        )));
    }
    let classifier_input = match bytes[24] {
        0 => ClassifierInput::Normalized,
        1 => ClassifierInput::Raw,
        other => {
            return Err(Error::Format(format!(
                "unknown classifier input tag {other}"
            )))
        }
    };
    let tau = f64_at(25);
    let lambda = f64_at(33);
    let n_weights = p * d + p + c * p + c + nc * p;
    let expected = HEADER + 8 * n_weights;
    if bytes.len() != expected {
        return Err(if bytes.len() < expected {
            Error::Truncated {
                expected: expected as u64,
                actual: bytes.len() as u64,
            }
        } else {
            Error::Format(format!("{} trailing bytes", bytes.len() - expected))
        });
    }
    let mut off = HEADER;
    let mut take = |n: usize| -> Vec<f64> {
        let v = (0..n).map(|i| f64_at(off + 8 * i)).collect();
        off += 8 * n;
        v
    };
    let proj = DMatrix::from_row_slice(p, d, &take(p * d));
    let proj_bias = DVector::from_vec(take(p));
    let cls = DMatrix::from_row_slice(c, p, &take(c * p));
    let cls_bias = DVector::from_vec(take(c));
    let centers = (0..nc).map(|_| DVector::from_vec(take(p))).collect();
    Ok(TriClassModel {
        params: Params {
            proj,
            proj_bias,
            cls,
            cls_bias,
        },
        tau,
        lambda,
        classifier_input,
        centers,
    })
}
