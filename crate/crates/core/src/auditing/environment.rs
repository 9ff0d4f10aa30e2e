//! The simulated secure environment.
//!
//! Control rows live behind [`EnclaveToken`], which only this module can
//! construct, so no code outside the environment boundary can read them.
//! Proof generation is modeled by a keyed digest: the environment tags each
//! result with `SHA-256(key || fields)`, and the ledger, which holds the same
//! key from deployment, recomputes the tag to verify.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::shapley::shapley_oracle;
use super::AuditError;
use crate::content_store::ContentId;
use crate::fl::{fedavg, ControlDataset, ModelKind, ModelParams, Samples};
use crate::types::{AgentId, Score};

/// Capability to read control rows. Only the secure environment holds one.
pub struct EnclaveToken {
    _private: (),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    Precision,
    Recall,
    /// `1 / (1 + MSE)`.
    InverseMse,
}

impl MetricKind {
    pub fn default_for(kind: ModelKind) -> Self {
        match kind {
            ModelKind::LinearRegression => MetricKind::InverseMse,
            ModelKind::LogisticRegression => MetricKind::Accuracy,
        }
    }

    pub fn supports(self, kind: ModelKind) -> bool {
        matches!(
            (self, kind),
            (MetricKind::InverseMse, ModelKind::LinearRegression)
                | (
                    MetricKind::Accuracy | MetricKind::Precision | MetricKind::Recall,
                    ModelKind::LogisticRegression
                )
        )
    }

    fn tag(self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::Precision => "precision",
            MetricKind::Recall => "recall",
            MetricKind::InverseMse => "inverse_mse",
        }
    }
}

/// How per-participant contributivity is measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringBackend {
    /// Each model is benchmarked on its own; reports are combined by median.
    #[default]
    Median,
    /// Exact Shapley value of the model within its subgroup, clamped to `[0, 1]`.
    Shapley,
}

impl ScoringBackend {
    fn tag(self) -> &'static str {
        match self {
            ScoringBackend::Median => "median",
            ScoringBackend::Shapley => "shapley",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct AttestationKey(pub [u8; 32]);

impl AttestationKey {
    pub fn from_seed(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"din/attest-key/v1");
        h.update(seed.to_le_bytes());
        AttestationKey(h.finalize().into())
    }
}

impl fmt::Debug for AttestationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AttestationKey({}..)", &hex::encode(self.0)[..8])
    }
}

impl Serialize for AttestationKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for AttestationKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| serde::de::Error::custom("attestation key must be 32 bytes"))?;
        Ok(AttestationKey(arr))
    }
}

/// A benchmark result bound to who ran it, on what, against which control set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attestation {
    pub evaluator: AgentId,
    pub participant: AgentId,
    pub model_cid: ContentId,
    pub control_digest: ContentId,
    pub metric: MetricKind,
    pub backend: ScoringBackend,
    pub claimed_score: Score,
    pub env_nonce: String,
}

impl Attestation {
    #[allow(clippy::too_many_arguments)]
    fn tag(
        key: &AttestationKey,
        evaluator: AgentId,
        participant: AgentId,
        model_cid: &ContentId,
        control_digest: &ContentId,
        metric: MetricKind,
        backend: ScoringBackend,
        score: Score,
    ) -> String {
        let mut h = Sha256::new();
        h.update(b"din/attest/v1");
        h.update(key.0);
        h.update(evaluator.0.to_le_bytes());
        h.update(participant.0.to_le_bytes());
        h.update(model_cid.as_bytes());
        h.update(control_digest.as_bytes());
        h.update(metric.tag().as_bytes());
        h.update([0]);
        h.update(backend.tag().as_bytes());
        h.update(score.ppm().to_le_bytes());
        hex::encode(h.finalize())
    }

    /// True iff the environment holding `key` issued exactly this record.
    pub fn verify(&self, key: &AttestationKey) -> bool {
        Self::tag(
            key,
            self.evaluator,
            self.participant,
            &self.model_cid,
            &self.control_digest,
            self.metric,
            self.backend,
            self.claimed_score,
        ) == self.env_nonce
    }
}

#[cfg(test)]
#[allow(clippy::too_many_arguments)]
pub(crate) fn attest_for_test(
    key: &AttestationKey,
    evaluator: AgentId,
    participant: AgentId,
    model_cid: ContentId,
    control_digest: ContentId,
    metric: MetricKind,
    backend: ScoringBackend,
    claimed_score: Score,
) -> Attestation {
    let env_nonce = Attestation::tag(key, evaluator, participant, &model_cid, &control_digest, metric, backend, claimed_score);
    Attestation {
        evaluator,
        participant,
        model_cid,
        control_digest,
        metric,
        backend,
        claimed_score,
        env_nonce,
    }
}

/// Content id of a plaintext model as deposited for evaluation.
pub fn plaintext_cid(model: &ModelParams) -> ContentId {
    let mut bytes = Vec::with_capacity(8 * model.dim() + 1);
    bytes.push(match model.kind {
        ModelKind::LinearRegression => 0,
        ModelKind::LogisticRegression => 1,
    });
    for w in &model.weights {
        bytes.extend_from_slice(&w.to_le_bytes());
    }
    ContentId::of(&bytes)
}

pub struct SecureEnvironment {
    key: AttestationKey,
    token: EnclaveToken,
    control: Option<ControlDataset>,
    models: BTreeMap<AgentId, (ContentId, ModelParams)>,
    baseline: Option<ModelParams>,
}

impl SecureEnvironment {
    pub fn new(key: AttestationKey) -> Self {
        SecureEnvironment {
            key,
            token: EnclaveToken { _private: () },
            control: None,
            models: BTreeMap::new(),
            baseline: None,
        }
    }

    /// Receives the owner's control set. Returns its digest.
    pub fn load_control(&mut self, control: ControlDataset) -> ContentId {
        let digest = control.digest();
        self.control = Some(control);
        digest
    }

    pub fn control_digest(&self) -> Option<ContentId> {
        self.control.as_ref().map(|c| c.digest())
    }

    /// Makes a participant's decrypted model available to assigned evaluators.
    pub fn deposit_model(&mut self, participant: AgentId, model: ModelParams) -> ContentId {
        let cid = plaintext_cid(&model);
        self.models.insert(participant, (cid, model));
        cid
    }

    /// Reference model for the empty coalition under the Shapley backend.
    pub fn set_baseline(&mut self, model: ModelParams) {
        self.baseline = Some(model);
    }

    /// Participants whose deposited model hashes to `cid`. Identical models
    /// from different participants share a CID.
    pub fn model_owners(&self, cid: &ContentId) -> Vec<AgentId> {
        self.models
            .iter()
            .filter(|(_, (c, _))| c == cid)
            .map(|(p, _)| *p)
            .collect()
    }

    fn control_samples(&self) -> Result<&Samples, AuditError> {
        self.control
            .as_ref()
            .map(|c| c.samples(&self.token))
            .ok_or(AuditError::NoControl)
    }

    /// Copy of the control rows, as a colluding evaluator would smuggle them
    /// out. Only adversary scenarios call this.
    pub fn leak_control(&self) -> Result<Samples, AuditError> {
        self.control_samples().cloned()
    }

    /// Scores a model on the control set. Only the number leaves the boundary.
    pub fn evaluate(&self, model: &ModelParams, metric: MetricKind) -> Result<f64, AuditError> {
        metric_value(model, self.control_samples()?, metric)
    }

    fn issue(&self, evaluator: AgentId, participant: AgentId, cid: ContentId, metric: MetricKind,
             backend: ScoringBackend, score: Score) -> Result<Attestation, AuditError> {
        let control_digest = self.control_digest().ok_or(AuditError::NoControl)?;
        let env_nonce = Attestation::tag(
            &self.key,
            evaluator,
            participant,
            &cid,
            &control_digest,
            metric,
            backend,
            score,
        );
        Ok(Attestation {
            evaluator,
            participant,
            model_cid: cid,
            control_digest,
            metric,
            backend,
            claimed_score: score,
            env_nonce,
        })
    }

    fn lookup(&self, evaluator: AgentId, participant: AgentId, cid: &ContentId, assigned: &[AgentId])
              -> Result<&ModelParams, AuditError> {
        let model = match self.models.get(&participant) {
            Some((c, m)) if c == cid => m,
            _ => return Err(AuditError::UnknownModel(*cid)),
        };
        if !assigned.contains(&participant) {
            return Err(AuditError::NotAssigned { evaluator, participant });
        }
        Ok(model)
    }

    /// Benchmarks one model for an evaluator whose assignment covers
    /// `assigned` participants.
    pub fn secure_benchmark(
        &self,
        evaluator: AgentId,
        participant: AgentId,
        model_cid: &ContentId,
        metric: MetricKind,
        assigned: &[AgentId],
    ) -> Result<Attestation, AuditError> {
        let model = self.lookup(evaluator, participant, model_cid, assigned)?;
        let value = self.evaluate(model, metric)?;
        self.issue(evaluator, participant, *model_cid, metric, ScoringBackend::Median, Score::from_f64(value))
    }

    /// Shapley scoring of a whole subgroup. Coalition value is the control
    /// score of the unweighted average of the coalition's models; the empty
    /// coalition is valued at the baseline model (zero weights if unset).
    pub fn shapley_benchmark(
        &self,
        evaluator: AgentId,
        models: &[(AgentId, ContentId)],
        metric: MetricKind,
        assigned: &[AgentId],
    ) -> Result<Vec<Attestation>, AuditError> {
        let mut members = Vec::with_capacity(models.len());
        for (p, cid) in models {
            let m = self.lookup(evaluator, *p, cid, assigned)?;
            members.push((*p, *cid, m));
        }
        let Some((_, _, first)) = members.first() else {
            return Ok(Vec::new());
        };
        let kind = first.kind;
        if !metric.supports(kind) {
            return Err(AuditError::UnsupportedMetric { metric, kind });
        }
        let baseline = self
            .baseline
            .clone()
            .unwrap_or_else(|| ModelParams::zeros(kind, first.dim()));
        let control = self.control_samples()?;
        let by_id: BTreeMap<AgentId, &ModelParams> = members.iter().map(|(p, _, m)| (*p, *m)).collect();
        let ids: Vec<AgentId> = members.iter().map(|(p, _, _)| *p).collect();
        let mut failure = None;
        let phi = shapley_oracle(&ids, |coalition| {
            let model = if coalition.is_empty() {
                baseline.clone()
            } else {
                let ms: Vec<ModelParams> = coalition.iter().map(|p| by_id[p].clone()).collect();
                match fedavg(&ms, &vec![1.0; ms.len()]) {
                    Ok(m) => m,
                    Err(e) => {
                        failure.get_or_insert(AuditError::from(e));
                        return 0.0;
                    }
                }
            };
            metric_value(&model, control, metric).unwrap_or_else(|e| {
                failure.get_or_insert(e);
                0.0
            })
        })?;
        if let Some(e) = failure {
            return Err(e);
        }
        members
            .iter()
            .map(|(p, cid, _)| self.issue(evaluator, *p, *cid, metric, ScoringBackend::Shapley, Score::from_f64(phi[p])))
            .collect()
    }
}

/// Metric of `model` on `data`, always in `[0, 1]`.
pub(crate) fn metric_value(model: &ModelParams, data: &Samples, metric: MetricKind) -> Result<f64, AuditError> {
    if !metric.supports(model.kind) {
        return Err(AuditError::UnsupportedMetric {
            metric,
            kind: model.kind,
        });
    }
    if model.dim() != data.dim() + 1 {
        return Err(crate::fl::FlError::DimensionMismatch {
            model: model.dim(),
            data: data.dim(),
        }
        .into());
    }
    if data.is_empty() {
        return Err(crate::fl::FlError::EmptyInput.into());
    }
    let n = data.len() as f64;
    if metric == MetricKind::InverseMse {
        let mse = data.rows().map(|(x, y)| (model.predict(x) - y).powi(2)).sum::<f64>() / n;
        return Ok(if mse.is_finite() { 1.0 / (1.0 + mse) } else { 0.0 });
    }
    let (mut tp, mut fp, mut tn, mut fneg) = (0u64, 0u64, 0u64, 0u64);
    for (x, y) in data.rows() {
        let predicted = model.predict(x) >= 0.5;
        let actual = *y >= 0.5;
        match (predicted, actual) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fneg += 1,
        }
    }
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(match metric {
        MetricKind::Accuracy => ratio(tp + tn, tp + tn + fp + fneg),
        MetricKind::Precision => ratio(tp, tp + fp),
        MetricKind::Recall => ratio(tp, tp + fneg),
        MetricKind::InverseMse => unreachable!(),
    })
}
