//! Deterministic synthetic benchmark: a compact real distribution, scattered
//! multi-modal known fakes, and held-out novel fakes placed in the gaps.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingSet, Label};
use crate::error::{Error, Result};
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSpec {
    pub dim: usize,
    pub real_components: usize,
    pub real_radius: f64,
    pub real_sd: f64,
    pub known_fake_types: usize,
    pub fake_components_min: usize,
    pub fake_components_max: usize,
    /// Distance of each fake type's base point from the origin.
    pub fake_radius: f64,
    /// Offset of a type's components from its base point.
    pub fake_spread: f64,
    pub fake_sd: f64,
    pub novel_fake_components: usize,
    pub novel_sd: f64,
    /// Fraction of fake samples (known and novel alike) drawn from the real
    /// distribution instead of their own component: forgeries without any
    /// visible trace.
    pub fake_overlap: f64,
    /// Minimum distance from a novel center to every known-fake center;
    /// `None` means 4 times the mean known-fake component sd.
    pub margin: Option<f64>,
    pub real_per_component: usize,
    pub fake_per_component: usize,
    pub novel_per_component: usize,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            dim: 32,
            real_components: 2,
            real_radius: 1.0,
            real_sd: 0.5,
            known_fake_types: 4,
            fake_components_min: 2,
            fake_components_max: 3,
            fake_radius: 6.0,
            fake_spread: 2.0,
            fake_sd: 1.0,
            novel_fake_components: 3,
            novel_sd: 1.0,
            fake_overlap: 0.04,
            margin: None,
            real_per_component: 100,
            fake_per_component: 50,
            novel_per_component: 100,
            seed: 0,
        }
    }
}

const MAX_PLACEMENTS: usize = 1000;

impl BenchSpec {
    pub fn effective_margin(&self) -> f64 {
        self.margin.unwrap_or(4.0 * self.fake_sd)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("dim", self.dim),
            ("real_components", self.real_components),
            ("known_fake_types", self.known_fake_types),
            ("fake_components_min", self.fake_components_min),
            ("novel_fake_components", self.novel_fake_components),
            ("real_per_component", self.real_per_component),
            ("fake_per_component", self.fake_per_component),
            ("novel_per_component", self.novel_per_component),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.fake_components_max < self.fake_components_min {
            return Err(Error::Config(
                "fake_components_max is below fake_components_min".into(),
            ));
        }
        if self.known_fake_types + 1 > Label::MAX_FAKE_ID as usize {
            return Err(Error::Config(
                "too many fake types for the label space".into(),
            ));
        }
        for (name, v) in [
            ("real_sd", self.real_sd),
            ("fake_sd", self.fake_sd),
            ("novel_sd", self.novel_sd),
            ("real_radius", self.real_radius),
            ("fake_radius", self.fake_radius),
            ("fake_spread", self.fake_spread),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be finite and nonnegative"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.fake_overlap) {
            return Err(Error::Config("fake_overlap must lie in [0, 1]".into()));
        }
        if !(self.effective_margin() > 0.0) {
            return Err(Error::Config("margin must be positive".into()));
        }
        Ok(())
    }

    /// Label code shared by all novel fakes.
    pub fn novel_label(&self) -> Label {
        Label::fake(self.known_fake_types as u8 + 1).expect("validated")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchManifest {
    pub spec: BenchSpec,
    pub margin: f64,
    pub real_centers: Vec<Vec<f64>>,
    /// `(fake type, center)` for every known-fake component.
    pub fake_centers: Vec<(u8, Vec<f64>)>,
    pub novel_centers: Vec<Vec<f64>>,
    pub novel_label: u8,
    /// Smallest distance from a novel center to a known-fake center.
    pub min_novel_distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchBundle {
    pub train: EmbeddingSet,
    pub test_known: EmbeddingSet,
    pub test_novel: EmbeddingSet,
    pub manifest: BenchManifest,
}

fn unit_direction(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

struct Source<'a> {
    label: Label,
    center: &'a DVector<f64>,
    sd: f64,
    count: usize,
    component: usize,
}

/// Samples every source in order. Fake samples are redirected to a random
/// source in `real` with probability `overlap`; membership records the
/// component actually sampled.
fn sample_split(
    dim: usize,
    sources: &[Source<'_>],
    real: &[Source<'_>],
    overlap: f64,
    rng: &mut ChaCha8Rng,
) -> Result<EmbeddingSet> {
    let mut set = EmbeddingSet::new(dim)?;
    let mut membership = Vec::new();
    let mut x = vec![0.0; dim];
    for s in sources {
        for _ in 0..s.count {
            let from = if s.label.is_fake() && overlap > 0.0 && rng.random::<f64>() < overlap {
                &real[rng.random_range(0..real.len())]
            } else {
                s
            };
            for (j, v) in x.iter_mut().enumerate() {
                *v = from.center[j] + from.sd * rng.sample::<f64, _>(StandardNormal);
            }
            set.push(s.label, &x)?;
            membership.push(from.component);
        }
    }
    set.set_meta("components", serde_json::to_string(&membership)?);
    Ok(set)
}

pub fn generate_benchmark(spec: &BenchSpec) -> Result<BenchBundle> {
    spec.validate()?;
    let d = spec.dim;
    let mut rng = rng_for(spec.seed, &[0]);
    let real_centers: Vec<DVector<f64>> = (0..spec.real_components)
        .map(|_| unit_direction(&mut rng, d) * spec.real_radius)
        .collect();
    let mut fake_centers: Vec<(Label, DVector<f64>)> = Vec::new();
    for t in 0..spec.known_fake_types {
        let label = Label::fake(t as u8 + 1)?;
        let base = unit_direction(&mut rng, d) * spec.fake_radius;
        let n = rng.random_range(spec.fake_components_min..=spec.fake_components_max);
        for _ in 0..n {
            fake_centers.push((
                label,
                &base + unit_direction(&mut rng, d) * spec.fake_spread,
            ));
        }
    }
    let margin = spec.effective_margin();
    let min_dist = |c: &DVector<f64>| {
        fake_centers
            .iter()
            .map(|(_, f)| (c - f).norm())
            .fold(f64::INFINITY, f64::min)
    };
    let mut novel_centers = Vec::new();
    let mut placements = 0;
    while novel_centers.len() < spec.novel_fake_components {
        if placements == MAX_PLACEMENTS {
            return Err(Error::Generation(format!(
                "could not place {} novel centers at distance >= {margin} from known fakes after {MAX_PLACEMENTS} attempts; use a larger dim or a smaller margin",
                spec.novel_fake_components
            )));
        }
        placements += 1;
        let c = unit_direction(&mut rng, d) * spec.fake_radius;
        if min_dist(&c) >= margin {
            novel_centers.push(c);
        }
    }
    let novel_label = spec.novel_label();

    let real_sources = |count: usize| -> Vec<Source<'_>> {
        real_centers
            .iter()
            .enumerate()
            .map(|(k, c)| Source {
                label: Label::REAL,
                center: c,
                sd: spec.real_sd,
                count,
                component: k,
            })
            .collect()
    };
    let known_sources = |count: usize| -> Vec<Source<'_>> {
        let mut v = real_sources(spec.real_per_component);
        v.extend(fake_centers.iter().enumerate().map(|(k, (l, c))| Source {
            label: *l,
            center: c,
            sd: spec.fake_sd,
            count,
            component: real_centers.len() + k,
        }));
        v
    };
    let real = real_sources(0);
    let ov = spec.fake_overlap;
    let train = sample_split(
        d,
        &known_sources(spec.fake_per_component),
        &real,
        ov,
        &mut rng_for(spec.seed, &[1]),
    )?;
    let test_known = sample_split(
        d,
        &known_sources(spec.fake_per_component),
        &real,
        ov,
        &mut rng_for(spec.seed, &[2]),
    )?;
    let mut novel_sources = real_sources(spec.real_per_component);
    let offset = real_centers.len() + fake_centers.len();
    novel_sources.extend(novel_centers.iter().enumerate().map(|(k, c)| Source {
        label: novel_label,
        center: c,
        sd: spec.novel_sd,
        count: spec.novel_per_component,
        component: offset + k,
    }));
    let test_novel = sample_split(d, &novel_sources, &real, ov, &mut rng_for(spec.seed, &[3]))?;

    let to_vec = |c: &DVector<f64>| c.iter().copied().collect::<Vec<f64>>();
    let min_novel_distance = novel_centers
        .iter()
        .map(min_dist)
        .fold(f64::INFINITY, f64::min);
    let manifest = BenchManifest {
        spec: spec.clone(),
        margin,
        real_centers: real_centers.iter().map(to_vec).collect(),
        fake_centers: fake_centers
            .iter()
            .map(|(l, c)| (l.code(), to_vec(c)))
            .collect(),
        novel_centers: novel_centers.iter().map(to_vec).collect(),
        novel_label: novel_label.code(),
        min_novel_distance,
    };
    Ok(BenchBundle {
        train,
        test_known,
        test_novel,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_have_expected_sizes_and_labels() {
        let spec = BenchSpec::default();
        let b = generate_benchmark(&spec).unwrap();
        let n_fake = b.manifest.fake_centers.len();
        assert!((8..=12).contains(&n_fake));
        assert_eq!(b.train.len(), 200 + 50 * n_fake);
        assert_eq!(b.test_novel.len(), 200 + 300);
        assert!(b
            .test_novel
            .labels()
            .iter()
            .all(|l| l.is_real() || *l == spec.novel_label()));
    }

    #[test]
    fn unsatisfiable_margin_is_a_generation_error() {
        let spec = BenchSpec {
            margin: Some(1e6),
            ..BenchSpec::default()
        };
        assert!(matches!(
            generate_benchmark(&spec),
            Err(Error::Generation(_))
        ));
    }
}
