use super::model::ModelParams;
use super::FlError;
use crate::content_store::{ContentId, ContentStore};
use crate::secure_agg::{field::add_assign_vec, wire, FixedPointCodec, Fp};
use crate::types::AgentId;

/// Elementwise weighted mean, reduced in input order.
pub fn fedavg(updates: &[ModelParams], weights: &[f64]) -> Result<ModelParams, FlError> {
    let first = updates.first().ok_or(FlError::EmptyInput)?;
    if weights.len() != updates.len() || weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
        return Err(FlError::InvalidWeights);
    }
    let mut acc = vec![0.0; first.dim()];
    let mut total = 0.0;
    for (u, &w) in updates.iter().zip(weights) {
        if u.dim() != first.dim() {
            return Err(FlError::DimensionMismatch {
                model: first.dim(),
                data: u.dim(),
            });
        }
        if u.kind != first.kind {
            return Err(FlError::KindMismatch);
        }
        for (a, v) in acc.iter_mut().zip(&u.weights) {
            *a += w * v;
        }
        total += w;
    }
    acc.iter_mut().for_each(|a| *a /= total);
    let out = ModelParams {
        weights: acc,
        kind: first.kind,
    };
    if !out.is_finite() {
        return Err(FlError::NonFinite("fedavg"));
    }
    Ok(out)
}

/// A subgroup's unmasked sum and how many admitted updates it covers.
#[derive(Clone, Debug, PartialEq)]
pub struct SubgroupSum {
    pub sum: ModelParams,
    pub count: usize,
}

/// Count-weighted combination: `sum of subgroup sums / sum of counts`, which
/// is the plain mean over every admitted participant.
pub fn master_aggregate(subgroups: &[SubgroupSum]) -> Result<ModelParams, FlError> {
    let first = subgroups.first().ok_or(FlError::EmptyInput)?;
    let dim = first.sum.dim();
    let mut acc = vec![0.0; dim];
    let mut count = 0usize;
    for s in subgroups {
        if s.sum.dim() != dim {
            return Err(FlError::DimensionMismatch {
                model: dim,
                data: s.sum.dim(),
            });
        }
        if s.sum.kind != first.sum.kind {
            return Err(FlError::KindMismatch);
        }
        for (a, v) in acc.iter_mut().zip(&s.sum.weights) {
            *a += v;
        }
        count += s.count;
    }
    if count == 0 {
        return Err(FlError::EmptyInput);
    }
    acc.iter_mut().for_each(|a| *a /= count as f64);
    Ok(ModelParams {
        weights: acc,
        kind: first.sum.kind,
    })
}

fn fetch_field(store: &ContentStore, cid: &ContentId, who: AgentId) -> Result<Vec<Fp>, FlError> {
    Ok(wire::decode_blob(store.get(cid, who)?)?)
}

/// A participant's optional audit of the published global model.
///
/// The participant sums the masked updates of its own subgroup (masks cancel
/// when nobody dropped), adds the other subgroups' published sums, divides by
/// the total count and compares with the published global. Agreement within
/// one and a half quantization steps counts as a match.
pub fn verify_subgroup_mean(
    store: &ContentStore,
    participant: AgentId,
    own_subgroup: &[ContentId],
    other_subgroups: &[(ContentId, usize)],
    published_global: &ContentId,
    codec: &FixedPointCodec,
) -> Result<bool, FlError> {
    let global = fetch_field(store, published_global, participant)?;
    let dim = global.len();
    let mut sum = vec![Fp::ZERO; dim];
    let mut count = 0usize;
    for cid in own_subgroup {
        let v = fetch_field(store, cid, participant)?;
        if v.len() != dim {
            return Err(FlError::DimensionMismatch { model: dim, data: v.len() });
        }
        add_assign_vec(&mut sum, &v);
        count += 1;
    }
    let mut recomputed = codec.decode_vec(&sum);
    for (cid, n) in other_subgroups {
        let v = codec.decode_vec(&fetch_field(store, cid, participant)?);
        if v.len() != dim {
            return Err(FlError::DimensionMismatch { model: dim, data: v.len() });
        }
        for (a, b) in recomputed.iter_mut().zip(v) {
            *a += b;
        }
        count += n;
    }
    if count == 0 {
        return Err(FlError::EmptyInput);
    }
    let tolerance = 1.5 / codec.scale();
    Ok(recomputed
        .iter()
        .zip(codec.decode_vec(&global))
        .all(|(r, g)| (r / count as f64 - g).abs() <= tolerance))
}
