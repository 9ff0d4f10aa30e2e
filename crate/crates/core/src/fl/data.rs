use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::model::ModelKind;
use super::FlError;
use crate::auditing::environment::EnclaveToken;
use crate::content_store::ContentId;
use crate::rng::RngStreams;
use crate::types::AgentId;

/// Row-major feature matrix with one label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    dim: usize,
    x: Vec<f64>,
    y: Vec<f64>,
}

impl Samples {
    pub fn new(dim: usize, x: Vec<f64>, y: Vec<f64>) -> Result<Self, FlError> {
        if dim == 0 || x.len() != dim * y.len() {
            return Err(FlError::DimensionMismatch {
                model: dim,
                data: if y.is_empty() { 0 } else { x.len() / y.len() },
            });
        }
        Ok(Samples { dim, x, y })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn rows(&self) -> impl Iterator<Item = (&[f64], &f64)> {
        self.x.chunks_exact(self.dim).zip(&self.y)
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Samples) -> Result<Samples, FlError> {
        if other.dim != self.dim {
            return Err(FlError::DimensionMismatch {
                model: self.dim,
                data: other.dim,
            });
        }
        let mut x = self.x.clone();
        x.extend_from_slice(&other.x);
        let mut y = self.y.clone();
        y.extend_from_slice(&other.y);
        Samples::new(self.dim, x, y)
    }

    pub fn labels(&self) -> &[f64] {
        &self.y
    }

    /// Per-feature sample mean.
    pub fn feature_means(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for (row, _) in self.rows() {
            for (a, b) in m.iter_mut().zip(row) {
                *a += b;
            }
        }
        let n = self.len().max(1) as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * (self.x.len() + self.y.len()));
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for (row, y) in self.rows() {
            for v in row {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&y.to_le_bytes());
        }
        out
    }
}

/// A participant's data. It has no serialization: nothing in the protocol
/// can publish it.
#[derive(Clone, Debug, PartialEq)]
pub struct PrivateDataset {
    pub owner: AgentId,
    pub cluster: usize,
    pub samples: Samples,
}

impl PrivateDataset {
    /// Copy with flipped targets: `1 - y` for classification, `-y` for
    /// regression.
    pub fn with_inverted_labels(&self, kind: ModelKind) -> PrivateDataset {
        let mut out = self.clone();
        for y in &mut out.samples.y {
            *y = match kind {
                ModelKind::LogisticRegression => 1.0 - *y,
                ModelKind::LinearRegression => -*y,
            };
        }
        out
    }
}

/// The Model Owner's benchmark set. Rows are readable only inside the secure
/// environment; everyone else sees the digest.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlDataset {
    samples: Samples,
    digest: ContentId,
}

impl ControlDataset {
    pub fn new(samples: Samples) -> Self {
        let digest = ContentId::of(&samples.canonical_bytes());
        ControlDataset { samples, digest }
    }

    /// Digest of the canonical serialization: `u32 n`, `u32 d`, then `n`
    /// rows of `d` features and one label, all little-endian `f64`.
    pub fn digest(&self) -> ContentId {
        self.digest
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self, _enclave: &EnclaveToken) -> &Samples {
        &self.samples
    }

    pub fn canonical_bytes(&self, _enclave: &EnclaveToken) -> Vec<u8> {
        self.samples.canonical_bytes()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationSpec {
    pub participants: usize,
    pub samples_per_participant: usize,
    pub feature_dim: usize,
    #[serde(default = "default_noise")]
    pub label_noise: f64,
    /// 0 is IID; 1 applies the full per-cluster shift.
    #[serde(default)]
    pub heterogeneity: f64,
    #[serde(default = "default_clusters")]
    pub clusters: usize,
    #[serde(default = "default_shift")]
    pub cluster_shift: f64,
    pub model: ModelKind,
    #[serde(default = "default_control")]
    pub control_samples: usize,
}

fn default_noise() -> f64 {
    0.1
}
fn default_clusters() -> usize {
    1
}
fn default_shift() -> f64 {
    2.0
}
fn default_control() -> usize {
    500
}

impl PopulationSpec {
    pub fn validate(&self) -> Result<(), FlError> {
        let bad = |m: &str| Err(FlError::InvalidSpec(m.to_string()));
        if self.participants == 0 {
            return bad("participants must be positive");
        }
        if self.samples_per_participant == 0 || self.control_samples == 0 {
            return bad("sample counts must be positive");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive");
        }
        if self.clusters == 0 {
            return bad("clusters must be positive");
        }
        if !(0.0..=1.0).contains(&self.heterogeneity) {
            return bad("heterogeneity must lie in [0, 1]");
        }
        if !(self.label_noise >= 0.0 && self.label_noise.is_finite()) {
            return bad("label_noise must be a non-negative real");
        }
        if !self.cluster_shift.is_finite() {
            return bad("cluster_shift must be finite");
        }
        Ok(())
    }

    fn cluster_mean(&self, cluster: usize) -> f64 {
        self.heterogeneity * self.cluster_shift * cluster as f64
    }
}

pub struct Population {
    pub datasets: Vec<PrivateDataset>,
    pub control: ControlDataset,
    /// Ground-truth `(w, b)` used to label the data.
    pub true_weights: Vec<f64>,
}

/// Draws every participant's dataset plus the control set.
///
/// Participant `i` belongs to cluster `i mod clusters`; cluster `c` shifts
/// every feature mean by `heterogeneity * cluster_shift * c`. Labels follow
/// one shared ground-truth model. The control set samples clusters uniformly.
pub fn generate_synthetic_population(
    spec: &PopulationSpec,
    owners: &[AgentId],
    streams: &RngStreams,
) -> Result<Population, FlError> {
    spec.validate()?;
    if owners.len() != spec.participants {
        return Err(FlError::InvalidSpec(format!(
            "expected {} owners, got {}",
            spec.participants,
            owners.len()
        )));
    }
    let mut truth_rng = streams.fork("data/truth", 0, 0);
    let true_weights: Vec<f64> = (0..=spec.feature_dim)
        .map(|_| truth_rng.random_range(-1.0..1.0))
        .collect();

    let datasets = owners
        .iter()
        .enumerate()
        .map(|(i, &owner)| {
            let cluster = i % spec.clusters;
            let mut rng = streams.fork("data/participant", 0, i as u64);
            let samples = draw(spec, &true_weights, spec.samples_per_participant, |_| cluster, &mut rng);
            PrivateDataset {
                owner,
                cluster,
                samples,
            }
        })
        .collect();

    let mut rng = streams.fork("data/control", 0, 0);
    let clusters = spec.clusters;
    let mut cluster_rng = streams.fork("data/control-clusters", 0, 0);
    let control = ControlDataset::new(draw(
        spec,
        &true_weights,
        spec.control_samples,
        |_| cluster_rng.random_range(0..clusters),
        &mut rng,
    ));
    Ok(Population {
        datasets,
        control,
        true_weights,
    })
}

fn draw<R: Rng>(
    spec: &PopulationSpec,
    truth: &[f64],
    n: usize,
    mut cluster_of: impl FnMut(usize) -> usize,
    rng: &mut R,
) -> Samples {
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let d = spec.feature_dim;
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for row in 0..n {
        let mean = spec.cluster_mean(cluster_of(row));
        let start = x.len();
        for _ in 0..d {
            x.push(mean + std.sample(rng));
        }
        let z: f64 = x[start..].iter().zip(truth).map(|(a, b)| a * b).sum::<f64>() + truth[d];
        let noise = spec.label_noise * std.sample(rng);
        y.push(match spec.model {
            ModelKind::LinearRegression => z + noise,
            ModelKind::LogisticRegression => f64::from(u8::from(z + noise > 0.0)),
        });
    }
    Samples { dim: d, x, y }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> PopulationSpec {
        PopulationSpec {
            participants: 6,
            samples_per_participant: 400,
            feature_dim: 3,
            label_noise: 0.1,
            heterogeneity: 0.0,
            clusters: 2,
            cluster_shift: 3.0,
            model: ModelKind::LinearRegression,
            control_samples: 100,
        }
    }

    fn owners(n: usize) -> Vec<AgentId> {
        (0..n as u32).map(AgentId).collect()
    }

    #[test]
    fn deterministic_given_seed() {
        let s = spec();
        let a = generate_synthetic_population(&s, &owners(6), &RngStreams::new(3)).unwrap();
        let b = generate_synthetic_population(&s, &owners(6), &RngStreams::new(3)).unwrap();
        let c = generate_synthetic_population(&s, &owners(6), &RngStreams::new(4)).unwrap();
        assert_eq!(a.datasets, b.datasets);
        assert_eq!(a.control, b.control);
        assert_ne!(a.datasets, c.datasets);
        assert_ne!(a.control.digest(), c.control.digest());
    }

    #[test]
    fn iid_when_heterogeneity_is_zero() {
        let pop = generate_synthetic_population(&spec(), &owners(6), &RngStreams::new(5)).unwrap();
        for ds in &pop.datasets {
            for m in ds.samples.feature_means() {
                assert!(m.abs() < 0.2, "mean {m}");
            }
        }
    }

    #[test]
    fn cluster_means_differ_by_shift() {
        let s = PopulationSpec {
            heterogeneity: 1.0,
            ..spec()
        };
        let pop = generate_synthetic_population(&s, &owners(6), &RngStreams::new(6)).unwrap();
        let mean_of = |c: usize| {
            let ms: Vec<f64> = pop
                .datasets
                .iter()
                .filter(|d| d.cluster == c)
                .flat_map(|d| d.samples.feature_means())
                .collect();
            ms.iter().sum::<f64>() / ms.len() as f64
        };
        let gap = mean_of(1) - mean_of(0);
        // 1200 draws per cluster and feature: standard error around 0.03.
        assert!((gap - 3.0).abs() < 0.15, "gap {gap}");
    }

    #[test]
    fn invalid_specs() {
        let mut s = spec();
        s.participants = 0;
        assert!(s.validate().is_err());
        let mut s = spec();
        s.heterogeneity = 1.5;
        assert!(s.validate().is_err());
        assert!(generate_synthetic_population(&spec(), &owners(2), &RngStreams::new(1)).is_err());
    }

    #[test]
    fn inverted_labels() {
        let pop = generate_synthetic_population(&spec(), &owners(6), &RngStreams::new(7)).unwrap();
        let flipped = pop.datasets[0].with_inverted_labels(ModelKind::LinearRegression);
        for (a, b) in pop.datasets[0].samples.labels().iter().zip(flipped.samples.labels()) {
            assert_eq!(*a, -*b);
        }
    }
}
