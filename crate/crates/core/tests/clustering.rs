mod common;

use common::*;
use fakeradar::gaussian::{fit_moments, CovMode, Covariance, GaussianComponent, NiwPrior};
use fakeradar::subcluster::*;
use fakeradar::Label;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use statrs::function::gamma::ln_gamma;

fn random_component(rng: &mut rand_chacha::ChaCha8Rng, d: usize, full: bool) -> GaussianComponent {
    let mean = DVector::from_fn(d, |_, _| rng.random_range(-5.0..5.0));
    let cov = if full {
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        Covariance::Full(&a * a.transpose() + DMatrix::identity(d, d) * 0.1)
    } else {
        Covariance::Diagonal(DVector::from_fn(d, |_, _| rng.random_range(0.1..4.0)))
    };
    GaussianComponent::new(mean, cov, rng.random_range(0.05..1.0)).unwrap()
}

fn normalized(mut comps: Vec<GaussianComponent>) -> Vec<GaussianComponent> {
    let total: f64 = comps.iter().map(|c| c.weight()).sum();
    comps = comps
        .into_iter()
        .map(|c| {
            let w = c.weight() / total;
            c.with_weight(w).unwrap()
        })
        .collect();
    comps
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn responsibilities_form_a_stochastic_matrix(
        seed in any::<u64>(), d in 1usize..=8, k in 1usize..=6, n in 1usize..=500, full in any::<bool>()
    ) {
        let mut r = rng(seed);
        let comps = normalized((0..k).map(|_| random_component(&mut r, d, full)).collect());
        let pts: Vec<DVector<f64>> = (0..n)
            .map(|_| DVector::from_fn(d, |_, _| r.random_range(-20.0..20.0)))
            .collect();
        let resp = e_step(&pts, &comps).unwrap();
        for i in 0..n {
            let row: Vec<f64> = (0..k).map(|j| resp.get(i, j)).collect();
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn kl_is_zero_on_identical_and_nonnegative(seed in any::<u64>(), n in 1usize..50, k in 1usize..6) {
        let mut r = rng(seed);
        let draw = |r: &mut rand_chacha::ChaCha8Rng| {
            let m = DMatrix::from_fn(n, k, |_, _| r.random_range(0.0..1.0f64).powi(3));
            let mut m = m;
            for mut row in m.row_iter_mut() {
                let s: f64 = row.sum();
                if s > 0.0 { row /= s } else { row.fill(1.0 / k as f64) }
            }
            Responsibilities::from_matrix(m).unwrap()
        };
        let a = draw(&mut r);
        let b = draw(&mut r);
        prop_assert_eq!(kl_alignment_loss(&a, &a).unwrap(), 0.0);
        prop_assert!(kl_alignment_loss(&a, &b).unwrap() >= 0.0);
    }

    #[test]
    fn split_ratio_is_exchangeable(seed in any::<u64>(), d in 1usize..=4, na in 2usize..40, nb in 2usize..40) {
        let mut r = rng(seed);
        let mut a = gaussian_points(&mut r, &vec![0.0; d], 1.0, na);
        let mut b = gaussian_points(&mut r, &vec![1.5; d], 1.0, nb);
        let all: Vec<DVector<f64>> = a.iter().chain(&b).cloned().collect();
        let prior = NiwPrior::weak_default(&all, CovMode::Full).unwrap();
        let before = partition_log_ratio(&refs(&a), &refs(&b), 1.0, &prior).unwrap();
        a.shuffle(&mut r);
        b.shuffle(&mut r);
        let after = partition_log_ratio(&refs(&a), &refs(&b), 1.0, &prior).unwrap();
        prop_assert_eq!(before.to_bits(), after.to_bits());
    }
}

fn refs(v: &[DVector<f64>]) -> Vec<&DVector<f64>> {
    v.iter().collect()
}

fn em_step(
    pts: &[DVector<f64>],
    comps: &[GaussianComponent],
    cfg: &ClusterConfig,
) -> Vec<GaussianComponent> {
    let r = e_step(pts, comps).unwrap();
    m_step(pts, &r, cfg).unwrap()
}

#[test]
fn em_never_decreases_likelihood() {
    let start = std::time::Instant::now();
    for seed in 0..20u64 {
        let mut r = rng(seed);
        let d = 1 + (seed as usize % 3);
        let k_true = 2 + (seed as usize % 3);
        let pts = separated_blobs(&mut r, d, k_true, 3.0, 100);
        let cfg = ClusterConfig {
            shrinkage: 0.0,
            cov_mode: Some(CovMode::Full),
            ..ClusterConfig::default()
        };
        let k = 1 + (seed as usize % 5);
        let mut comps = initial_components(&pts, k, &cfg, &mut r).unwrap();
        let mut ll = log_likelihood(&pts, &comps).unwrap();
        for it in 0..60 {
            let next = em_step(&pts, &comps, &cfg);
            let next_ll = log_likelihood(&pts, &next).unwrap();
            assert_eq!(
                next.len(),
                comps.len(),
                "seed {seed}: component dissolved at iteration {it}"
            );
            assert!(
                next_ll >= ll - 1e-8,
                "seed {seed} iteration {it}: {ll} -> {next_ll}"
            );
            comps = next;
            ll = next_ll;
        }
    }
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn consecutive_responsibilities_agree_at_convergence() {
    for seed in 0..5u64 {
        let mut r = rng(100 + seed);
        let pts = separated_blobs(&mut r, 2, 3, 4.0, 100);
        let cfg = ClusterConfig {
            k_init: 3,
            propose_every: 0,
            seed,
            ..ClusterConfig::default()
        };
        let s = run_dynamic_clustering(&pts, Label::REAL, &cfg).unwrap();
        assert!(
            s.history.len() < cfg.max_em_iters,
            "seed {seed}: no convergence"
        );
        let comps: Vec<GaussianComponent> =
            s.subclusters.iter().map(|c| c.component.clone()).collect();
        let r0 = e_step(&pts, &comps).unwrap();
        let r1 = e_step(&pts, &em_step(&pts, &comps, &cfg)).unwrap();
        let kl = kl_alignment_loss(&r0, &r1).unwrap();
        assert!(kl < cfg.em_tol, "seed {seed}: KL {kl}");
    }
}

/// Normal-inverse-gamma evidence of 1D data written out directly.
fn oracle_log_marginal(x: &[f64], kappa0: f64, nu0: f64, mu0: f64, psi0: f64) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let scatter: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
    let kn = kappa0 + n;
    let nun = nu0 + n;
    let psin = psi0 + scatter + kappa0 * n / kn * (mean - mu0).powi(2);
    -n / 2.0 * std::f64::consts::PI.ln() + ln_gamma(nun / 2.0) - ln_gamma(nu0 / 2.0)
        + nu0 / 2.0 * psi0.ln()
        - nun / 2.0 * psin.ln()
        + 0.5 * (kappa0 / kn).ln()
}

fn oracle_split(a: &[f64], b: &[f64], alpha: f64, prior: &NiwPrior) -> f64 {
    let (k0, n0, m0) = (prior.kappa0(), prior.nu0(), prior.mu0()[0]);
    let psi0 = prior.psi0().trace();
    let all: Vec<f64> = a.iter().chain(b).copied().collect();
    alpha.ln()
        + ln_gamma(a.len() as f64)
        + oracle_log_marginal(a, k0, n0, m0, psi0)
        + ln_gamma(b.len() as f64)
        + oracle_log_marginal(b, k0, n0, m0, psi0)
        - ln_gamma(all.len() as f64)
        - oracle_log_marginal(&all, k0, n0, m0, psi0)
}

fn split_sides(pts: &[DVector<f64>]) -> (SubclusterSplit, Vec<f64>, Vec<f64>) {
    let split = fit_subclusters(pts, &ClusterConfig::default())
        .unwrap()
        .unwrap();
    let [ia, ib] = split.partition();
    let a = ia.iter().map(|&i| pts[i][0]).collect();
    let b = ib.iter().map(|&i| pts[i][0]).collect();
    (split, a, b)
}

#[test]
fn split_ratio_direction_and_oracle() {
    for seed in 0..5u64 {
        let mut r = rng(seed);
        let mut bimodal = normal_1d(&mut r, -5.0, 1.0, 200);
        bimodal.extend(normal_1d(&mut r, 5.0, 1.0, 200));
        let unimodal = normal_1d(&mut r, 0.0, 1.0, 400);
        for (pts, positive) in [(&bimodal, true), (&unimodal, false)] {
            let prior = NiwPrior::weak_default(pts, CovMode::Full).unwrap();
            let (split, a, b) = split_sides(pts);
            let h = split_log_ratio(pts, &split, 1.0, &prior).unwrap();
            let oracle = oracle_split(&a, &b, 1.0, &prior);
            assert!(
                (h - oracle).abs() <= 1e-9 * (1.0 + oracle.abs()),
                "seed {seed}: {h} vs oracle {oracle}"
            );
            assert_eq!(h > 0.0, positive, "seed {seed}: log H_s = {h}");

            let h2 = split_log_ratio(pts, &split, 2.0, &prior).unwrap();
            assert!((h2 - h - std::f64::consts::LN_2).abs() <= 1e-12);

            let [ia, ib] = split.partition();
            let ra: Vec<&DVector<f64>> = ia.iter().map(|&i| &pts[i]).collect();
            let rb: Vec<&DVector<f64>> = ib.iter().map(|&i| &pts[i]).collect();
            let m = merge_log_ratio(&ra, &rb, 1.0, &prior).unwrap();
            assert_eq!(m.to_bits(), (-h).to_bits());
        }
    }
}

#[test]
fn merge_direction() {
    let mut r = rng(42);
    let base = normal_1d(&mut r, 0.0, 1.0, 400);
    let refs: Vec<&DVector<f64>> = base.iter().collect();
    let prior = NiwPrior::weak_default(&base, CovMode::Full).unwrap();
    // coincident components owning alternate halves of one N(0, 1) sample
    let (even, odd): (Vec<_>, Vec<_>) = refs.iter().enumerate().partition(|(i, _)| i % 2 == 0);
    let even: Vec<&DVector<f64>> = even.into_iter().map(|(_, p)| *p).collect();
    let odd: Vec<&DVector<f64>> = odd.into_iter().map(|(_, p)| *p).collect();
    assert!(merge_log_ratio(&even, &odd, 1.0, &prior).unwrap() > 0.0);

    let left = normal_1d(&mut r, -10.0, 1.0, 200);
    let right = normal_1d(&mut r, 10.0, 1.0, 200);
    let all: Vec<DVector<f64>> = left.iter().chain(&right).cloned().collect();
    let prior = NiwPrior::weak_default(&all, CovMode::Full).unwrap();
    let l: Vec<&DVector<f64>> = left.iter().collect();
    let rr: Vec<&DVector<f64>> = right.iter().collect();
    assert!(merge_log_ratio(&l, &rr, 1.0, &prior).unwrap() < 0.0);
}

#[test]
fn single_gaussian_collapses_to_one_subcluster() {
    let mut ones = 0;
    for seed in 0..5u64 {
        let mut r = rng(200 + seed);
        let pts = gaussian_points(&mut r, &[0.0; 4], 1.0, 300);
        let cfg = ClusterConfig {
            seed,
            ..ClusterConfig::default()
        };
        let s = run_dynamic_clustering(&pts, Label::REAL, &cfg).unwrap();
        ones += usize::from(s.final_k() == 1);
    }
    assert!(ones >= 4, "{ones} of 5 seeds reached K = 1");
}

fn final_rounds_quiet(s: &SubclusterState) -> bool {
    s.rounds.len() >= 2
        && s.rounds[s.rounds.len() - 2..]
            .iter()
            .all(|r| r.accepted == 0)
}

#[test]
fn three_blobs_recover_three_subclusters() {
    let mut ks = Vec::new();
    for seed in 0..5u64 {
        let mut r = rng(300 + seed);
        let pts = separated_blobs(&mut r, 4, 3, 8.0, 150);
        let cfg = ClusterConfig {
            seed,
            ..ClusterConfig::default()
        };
        let s = run_dynamic_clustering(&pts, Label::REAL, &cfg).unwrap();
        assert!(
            (2..=4).contains(&s.final_k()),
            "seed {seed}: K = {}",
            s.final_k()
        );
        assert!(final_rounds_quiet(&s), "seed {seed}: rounds {:?}", s.rounds);
        assert_eq!(*s.history.last().unwrap(), s.final_k());
        ks.push(s.final_k());
    }
    let threes = ks.iter().filter(|&&k| k == 3).count();
    assert!(
        (2..=4).all(|k| ks.iter().filter(|&&v| v == k).count() <= threes),
        "{ks:?}"
    );
}

#[test]
fn clustering_is_deterministic() {
    let mut r = rng(7);
    let pts = separated_blobs(&mut r, 3, 3, 6.0, 80);
    let cfg = ClusterConfig::default();
    let a = run_dynamic_clustering(&pts, Label::REAL, &cfg).unwrap();
    let b = run_dynamic_clustering(&pts, Label::REAL, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn disabled_proposals_equal_plain_em() {
    let mut r = rng(8);
    let pts = separated_blobs(&mut r, 2, 2, 5.0, 60);
    let cfg = ClusterConfig {
        propose_every: 1000,
        ..ClusterConfig::default()
    };
    let s = run_dynamic_clustering(&pts, Label::REAL, &cfg).unwrap();
    assert!(s.rounds.is_empty() && s.events.is_empty());

    let mut init_rng = fakeradar::seed::rng_for(cfg.seed, &[0]);
    let mut comps = initial_components(&pts, cfg.k_init, &cfg, &mut init_rng).unwrap();
    let mut prev = f64::NEG_INFINITY;
    let mut prev_r: Option<Responsibilities> = None;
    for _ in 0..cfg.max_em_iters {
        let r = e_step(&pts, &comps).unwrap();
        let settled = prev_r
            .as_ref()
            .is_some_and(|p| kl_alignment_loss(p, &r).unwrap() < cfg.em_tol);
        comps = m_step(&pts, &r, &cfg).unwrap();
        prev_r = Some(r);
        let ll = log_likelihood(&pts, &comps).unwrap();
        let done = settled && (ll - prev).abs() <= cfg.em_tol * (1.0 + ll.abs());
        prev = ll;
        if done {
            break;
        }
    }
    assert_eq!(s.log_likelihood.last().copied(), Some(prev));
    let means: Vec<_> = s
        .subclusters
        .iter()
        .map(|c| c.component.mean().clone())
        .collect();
    let expected: Vec<_> = comps.iter().map(|c| c.mean().clone()).collect();
    assert_eq!(means, expected);
}

#[test]
fn interleaved_enqueues_match_batch_fit() {
    let mut r = rng(9);
    let pts = gaussian_points(&mut r, &[0.0, 0.0, 0.0], 1.0, 40);
    let cfg = ClusterConfig {
        k_init: 1,
        queue_capacity: 16,
        ..ClusterConfig::default()
    };
    let mut s = run_dynamic_clustering(&pts, Label::REAL, &cfg).unwrap();
    let extra = gaussian_points(&mut r, &[0.5, 0.0, 0.0], 1.0, 25);
    for chunk in extra.chunks(7) {
        s.enqueue(0, chunk).unwrap();
    }
    let q: Vec<DVector<f64>> = s.subclusters[0].queue.iter().cloned().collect();
    assert_eq!(q.len(), 16);
    assert_eq!(q, extra[extra.len() - 16..].to_vec());
    let batch = fit_moments(
        &q,
        &vec![1.0; q.len()],
        CovMode::auto(16.0, 3),
        cfg.shrinkage,
    )
    .unwrap();
    let stats = &s.subclusters[0].stats;
    assert!((stats.mean() - batch.mean()).amax() < 1e-10);
    assert!((stats.cov().to_dense() - batch.cov().to_dense()).amax() < 1e-10);
}

#[test]
fn far_components_assign_near_certainly() {
    let c =
        |m: f64| GaussianComponent::new(dv(&[m]), Covariance::Diagonal(dv(&[1.0])), 0.5).unwrap();
    let r = e_step(&[dv(&[10.0])], &[c(-10.0), c(10.0)]).unwrap();
    assert!(r.get(0, 1) > 1.0 - 1e-8);
}
