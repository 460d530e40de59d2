mod common;

use common::*;
use fakeradar::outlier::ProbeConfig;
use fakeradar::subcluster::{cluster_categories, ClusterConfig, SubclusterState};
use fakeradar::trainer::*;
use fakeradar::{EmbeddingSet, Label};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn unit(rng: &mut ChaCha8Rng, p: usize) -> DVector<f64> {
    let v = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
    v.normalize()
}

fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal))
}

struct GradCase {
    model: TriClassModel,
    inputs: Vec<DVector<f64>>,
    classes: Vec<usize>,
    positives: Vec<usize>,
    outliers: Vec<DVector<f64>>,
    objective: Objective,
    include_positive: bool,
    weight_decay: f64,
}

fn grad_case(seed: u64) -> GradCase {
    let mut r = rng(seed);
    let d = r.random_range(2..6);
    let p = r.random_range(2..6);
    let objective = match seed % 4 {
        0 => Objective {
            contrastive: true,
            outliers: true,
            tri_class: true,
        },
        1 => Objective {
            contrastive: true,
            outliers: false,
            tri_class: false,
        },
        2 => Objective {
            contrastive: false,
            outliers: true,
            tri_class: true,
        },
        _ => Objective {
            contrastive: true,
            outliers: true,
            tri_class: false,
        },
    };
    let config = TrainConfig {
        proj_dim: p,
        objective,
        tau: r.random_range(0.2..1.0),
        lambda: r.random_range(0.0..2.0),
        classifier_input: if seed.is_multiple_of(3) {
            ClassifierInput::Raw
        } else {
            ClassifierInput::Normalized
        },
        seed,
        ..TrainConfig::default()
    };
    let mut model = TriClassModel::init(d, &config).unwrap();
    for v in model
        .params
        .proj_bias
        .iter_mut()
        .chain(model.params.cls_bias.iter_mut())
    {
        *v = r.random_range(-0.5..0.5);
    }
    let n_centers = r.random_range(2..5);
    model.centers = (0..n_centers).map(|_| unit(&mut r, p)).collect();
    let b = r.random_range(1..5);
    let n_out = if objective.outliers {
        r.random_range(1..4)
    } else {
        0
    };
    GradCase {
        inputs: (0..b).map(|_| random_vec(&mut r, d)).collect(),
        classes: (0..b).map(|_| r.random_range(0..2)).collect(),
        positives: (0..b).map(|_| r.random_range(0..n_centers)).collect(),
        outliers: (0..n_out).map(|_| random_vec(&mut r, d) * 2.0).collect(),
        objective,
        include_positive: seed.is_multiple_of(5),
        weight_decay: if seed.is_multiple_of(2) {
            r.random_range(0.0..0.1)
        } else {
            0.0
        },
        model,
    }
}

fn value_and_grad(case: &GradCase, model: &TriClassModel) -> (f64, Params) {
    let batch = Batch {
        inputs: case.inputs.iter().collect(),
        classes: case.classes.clone(),
        positives: case.positives.clone(),
        outliers: case.outliers.iter().collect(),
    };
    regularized_objective(
        model,
        &batch,
        &case.objective,
        case.include_positive,
        case.weight_decay,
    )
    .unwrap()
}

#[test]
fn analytic_gradients_match_central_differences() {
    let start = std::time::Instant::now();
    let h = 1e-5;
    for seed in 0..24u64 {
        let case = grad_case(seed);
        let (_, grads) = value_and_grad(&case, &case.model);
        let mut worst: f64 = 0.0;
        for i in 0..case.model.params.len() {
            let mut plus = case.model.clone();
            let mut minus = case.model.clone();
            let t = case.model.params.get(i);
            plus.params.set(i, t + h);
            minus.params.set(i, t - h);
            let numeric =
                (value_and_grad(&case, &plus).0 - value_and_grad(&case, &minus).0) / (2.0 * h);
            let analytic = grads.get(i);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "seed {seed}: relative error {worst}");
    }
    assert!(start.elapsed().as_secs_f64() < 30.0);
}

#[test]
fn cross_entropy_matches_direct_softmax() {
    let mut r = rng(5);
    for _ in 0..50 {
        let z = DVector::from_fn(3, |_, _| r.random_range(-10.0..10.0));
        let label = r.random_range(0..3);
        let (loss, grad) = cross_entropy_loss(&z, label).unwrap();
        let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
        let direct = -(e[label] / e.iter().sum::<f64>()).ln();
        assert!((loss - direct).abs() < 1e-12);
        for j in 0..3 {
            let step = 1e-5;
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[j] += step;
            zm[j] -= step;
            let fd = (cross_entropy_loss(&zp, label).unwrap().0
                - cross_entropy_loss(&zm, label).unwrap().0)
                / (2.0 * step);
            assert!((fd - grad[j]).abs() < 1e-6);
        }
    }
    let (l, _) = cross_entropy_loss(&DVector::from_element(3, 0.7), 1).unwrap();
    assert!((l - 3f64.ln()).abs() < 1e-12);
    let (l, _) = cross_entropy_loss(&DVector::from_vec(vec![50.0, 0.0, 0.0]), 0).unwrap();
    assert!(l < 1e-20);
}

#[test]
fn total_loss_is_affine_in_lambda() {
    assert_eq!(total_loss(1.3, 2.0, 0.0), 1.3);
    assert_eq!(total_loss(1.0, 2.0, 0.5), 2.0);
    let f = |l: f64| total_loss(0.7, -1.9, l);
    for i in 0..20 {
        let l = i as f64 * 0.25;
        assert!((f(l) - (f(0.0) + l * (f(1.0) - f(0.0)))).abs() < 1e-12);
    }
}

fn random_orthogonal(rng: &mut ChaCha8Rng, p: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(p, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    a.qr().q()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_sums_to_one(z in prop::collection::vec(-700.0f64..700.0, 1..8)) {
        let s = softmax(&DVector::from_vec(z));
        prop_assert!((s.sum() - 1.0).abs() <= 1e-9);
        prop_assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn contrastive_loss_is_rotation_invariant(seed in any::<u64>(), p in 2usize..10, b in 1usize..5, k in 2usize..5, o in 0usize..4) {
        let mut r = rng(seed);
        let h: Vec<_> = (0..b).map(|_| unit(&mut r, p)).collect();
        let c: Vec<_> = (0..k).map(|_| unit(&mut r, p)).collect();
        let v: Vec<_> = (0..o).map(|_| unit(&mut r, p)).collect();
        let pos: Vec<usize> = (0..b).map(|_| r.random_range(0..k)).collect();
        let q = random_orthogonal(&mut r, p);
        let rot = |xs: &[DVector<f64>]| xs.iter().map(|x| &q * x).collect::<Vec<_>>();
        for inc in [false, true] {
            let a = contrastive_loss(&h, &pos, &c, &v, 0.1, inc).unwrap().loss;
            let bb = contrastive_loss(&rot(&h), &pos, &rot(&c), &rot(&v), 0.1, inc).unwrap().loss;
            prop_assert!((a - bb).abs() <= 1e-10);
        }
    }

    #[test]
    fn projections_are_unit_and_scale_free(seed in any::<u64>(), d in 1usize..12, p in 1usize..12) {
        let cfg = TrainConfig { proj_dim: p, seed, ..TrainConfig::default() };
        let m = TriClassModel::init(d, &cfg).unwrap();
        let mut r = rng(seed);
        let x = random_vec(&mut r, d);
        let pr = m.project(x.as_slice()).unwrap();
        prop_assume!(pr.raw.norm() > 1e-9);
        prop_assert!((pr.h.norm() - 1.0).abs() <= 1e-12);
        let pr3 = m.project((&x * 3.0).as_slice()).unwrap();
        prop_assert!((&pr3.h - &pr.h).amax() <= 1e-12);
        let probs = m.probabilities(x.as_slice()).unwrap();
        prop_assert!((probs.sum() - 1.0).abs() <= 1e-9);
    }
}

#[test]
fn identity_head_passes_unit_vectors_through() {
    let cfg = TrainConfig {
        proj_dim: 4,
        ..TrainConfig::default()
    };
    let mut m = TriClassModel::init(3, &cfg).unwrap();
    m.params.proj = DMatrix::from_fn(4, 3, |i, j| if i == j { 1.0 } else { 0.0 });
    let x = DVector::from_vec(vec![0.6, 0.0, 0.8]);
    let pr = m.project(x.as_slice()).unwrap();
    assert_eq!(pr.h.as_slice(), &[0.6, 0.0, 0.8, 0.0]);
}

/// Three separable 2D groups: real, fake, and a fixed outlier pool.
fn separable_2d() -> (EmbeddingSet, Vec<SubclusterState>, Vec<DVector<f64>>) {
    let mut r = rng(11);
    let mut set = EmbeddingSet::new(2).unwrap();
    for p in gaussian_points(&mut r, &[-3.0, 0.0], 0.4, 20) {
        set.push(Label::REAL, p.as_slice()).unwrap();
    }
    for p in gaussian_points(&mut r, &[3.0, 0.0], 0.4, 20) {
        set.push(Label::fake(1).unwrap(), p.as_slice()).unwrap();
    }
    let outliers = gaussian_points(&mut r, &[0.0, 4.0], 0.4, 20);
    let cfg = ClusterConfig {
        k_init: 1,
        ..ClusterConfig::default()
    };
    let states = cluster_categories(&set, &cfg, false).unwrap();
    (set, states, outliers)
}

fn sanity_config() -> TrainConfig {
    TrainConfig {
        proj_dim: 8,
        epochs: 200,
        ..TrainConfig::default()
    }
}

#[test]
fn separable_data_is_learned() {
    let (set, states, outliers) = separable_2d();
    let out = train(
        &set,
        &states,
        &ProbeConfig::default(),
        &sanity_config(),
        Some(&outliers),
    )
    .unwrap();
    let best = out.log.iter().map(|l| l.accuracy).fold(0.0, f64::max);
    assert!(best >= 0.95, "best train accuracy {best}");
}

#[test]
fn frozen_pool_loss_mostly_decreases() {
    let (set, states, outliers) = separable_2d();
    // one full batch per epoch, so each logged loss is a function of the weights alone
    let cfg = TrainConfig {
        freeze_centers: true,
        epochs: 10,
        batch_real_fake: set.len(),
        batch_outliers: outliers.len(),
        ..sanity_config()
    };
    let out = train(
        &set,
        &states,
        &ProbeConfig::default(),
        &cfg,
        Some(&outliers),
    )
    .unwrap();
    let rises = out
        .log
        .windows(2)
        .filter(|w| w[1].l_total > w[0].l_total)
        .count();
    assert!(
        rises <= 1,
        "{:?}",
        out.log.iter().map(|l| l.l_total).collect::<Vec<_>>()
    );
}

#[test]
fn zero_learning_rate_keeps_initial_weights() {
    let (set, states, outliers) = separable_2d();
    let cfg = TrainConfig {
        lr: 0.0,
        epochs: 1,
        ..sanity_config()
    };
    let out = train(
        &set,
        &states,
        &ProbeConfig::default(),
        &cfg,
        Some(&outliers),
    )
    .unwrap();
    assert_eq!(
        out.model.params,
        TriClassModel::init(2, &cfg).unwrap().params
    );
}

#[test]
fn training_is_deterministic() {
    let (set, states, _) = separable_2d();
    let probe = ProbeConfig {
        per_subcluster: 10,
        candidates: 200,
        ..ProbeConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 5,
        ..sanity_config()
    };
    let a = train(&set, &states, &probe, &cfg, None).unwrap();
    let b = train(&set, &states, &probe, &cfg, None).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.model, b.model);
}

#[test]
fn missing_category_state_is_a_config_error() {
    let (mut set, states, _) = separable_2d();
    set.push(Label::fake(2).unwrap(), &[0.0, -3.0]).unwrap();
    let only_real: Vec<SubclusterState> = states
        .into_iter()
        .filter(|s| s.category.is_real())
        .collect();
    let err = train(
        &set,
        &only_real,
        &ProbeConfig::default(),
        &sanity_config(),
        None,
    )
    .unwrap_err();
    assert!(matches!(err, fakeradar::Error::Config(_)), "{err}");
}

#[test]
fn model_file_round_trips() {
    let cfg = TrainConfig {
        proj_dim: 5,
        ..TrainConfig::default()
    };
    let mut m = TriClassModel::init(7, &cfg).unwrap();
    m.centers = vec![DVector::from_element(5, 1.0 / 5f64.sqrt())];
    let mut bytes = Vec::new();
    write_model(&m, &mut bytes).unwrap();
    assert_eq!(&bytes[..4], b"FRM1");
    assert_eq!(parse_model(&bytes).unwrap(), m);
    assert!(parse_model(&bytes[..bytes.len() - 1]).is_err());
}
