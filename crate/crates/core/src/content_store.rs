//! In-process content-addressed blob store standing in for IPFS.
//!
//! Blobs are addressed by the SHA-256 digest of their bytes and never change
//! once written. Agents reach one another through a symmetric reachability
//! relation (default: fully connected). An agent that obtains a blob and is
//! willing to reshare it serves it onward, so availability is the closure of
//! the publisher set over reachable, resharing agents. Resharing is
//! instantaneous within a round.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::types::AgentId;

/// Digest address of an immutable blob.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ContentId(pub [u8; 32]);

impl ContentId {
    /// Content addressing: a pure function of the bytes.
    pub fn of(bytes: &[u8]) -> Self {
        ContentId(Sha256::digest(bytes).into())
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, String> {
        let bytes = hex::decode(s).map_err(|e| e.to_string())?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| "content id must be 32 bytes".to_string())?;
        Ok(ContentId(arr))
    }
}

impl fmt::Debug for ContentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "cid:{}", &self.to_hex()[..12])
    }
}

impl fmt::Display for ContentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for ContentId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ContentId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ContentId::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoredBlob {
    pub cid: ContentId,
    pub bytes: Vec<u8>,
    pub publisher: AgentId,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StoreError {
    #[error("blob {0:?} is not reachable by {1}")]
    NotFound(ContentId, AgentId),
    #[error("refusing to store an empty blob")]
    EmptyBlob,
}

/// Symmetric reachability between agents. Absent pairs are connected.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reachability {
    blocked: BTreeSet<(AgentId, AgentId)>,
}

impl Reachability {
    pub fn fully_connected() -> Self {
        Self::default()
    }

    fn key(a: AgentId, b: AgentId) -> (AgentId, AgentId) {
        if a <= b {
            (a, b)
        } else {
            (b, a)
        }
    }

    /// Firewalls `a` and `b` from each other in both directions.
    pub fn block(&mut self, a: AgentId, b: AgentId) {
        if a != b {
            self.blocked.insert(Self::key(a, b));
        }
    }

    pub fn can_reach(&self, a: AgentId, b: AgentId) -> bool {
        a == b || !self.blocked.contains(&Self::key(a, b))
    }

    pub fn blocked_pairs(&self) -> impl Iterator<Item = (AgentId, AgentId)> + '_ {
        self.blocked.iter().copied()
    }
}

#[derive(Debug, Default)]
pub struct ContentStore {
    blobs: BTreeMap<ContentId, StoredBlob>,
    seeders: BTreeMap<ContentId, BTreeSet<AgentId>>,
    agents: BTreeSet<AgentId>,
    non_resharing: BTreeSet<AgentId>,
    reach: Reachability,
}

impl ContentStore {
    pub fn new(reach: Reachability) -> Self {
        ContentStore {
            reach,
            ..Default::default()
        }
    }

    pub fn register_agent(&mut self, agent: AgentId) {
        self.agents.insert(agent);
    }

    /// Marks an agent as one that serves only its own publications.
    pub fn set_resharing(&mut self, agent: AgentId, reshares: bool) {
        self.agents.insert(agent);
        if reshares {
            self.non_resharing.remove(&agent);
        } else {
            self.non_resharing.insert(agent);
        }
    }

    pub fn reachability(&self) -> &Reachability {
        &self.reach
    }

    /// Stores `bytes` and returns their address. Storing identical bytes
    /// again leaves the blob untouched and adds the publisher as a seeder.
    pub fn put(&mut self, bytes: &[u8], publisher: AgentId) -> Result<ContentId, StoreError> {
        if bytes.is_empty() {
            return Err(StoreError::EmptyBlob);
        }
        let cid = ContentId::of(bytes);
        self.agents.insert(publisher);
        self.blobs.entry(cid).or_insert_with(|| StoredBlob {
            cid,
            bytes: bytes.to_vec(),
            publisher,
        });
        self.seeders.entry(cid).or_default().insert(publisher);
        Ok(cid)
    }

    pub fn contains(&self, cid: &ContentId) -> bool {
        self.blobs.contains_key(cid)
    }

    pub fn publisher(&self, cid: &ContentId) -> Option<AgentId> {
        self.blobs.get(cid).map(|b| b.publisher)
    }

    /// Fetches a blob on behalf of `requester`.
    pub fn get(&self, cid: &ContentId, requester: AgentId) -> Result<&[u8], StoreError> {
        let blob = self
            .blobs
            .get(cid)
            .ok_or(StoreError::NotFound(*cid, requester))?;
        if self.is_reachable(cid, requester) {
            Ok(&blob.bytes)
        } else {
            Err(StoreError::NotFound(*cid, requester))
        }
    }

    fn is_reachable(&self, cid: &ContentId, requester: AgentId) -> bool {
        let Some(seeders) = self.seeders.get(cid) else {
            return false;
        };
        if seeders.iter().any(|s| self.reach.can_reach(requester, *s)) {
            return true;
        }
        // Breadth-first over agents that obtained the blob and reshare it.
        let mut holders: BTreeSet<AgentId> = seeders.clone();
        let mut frontier: VecDeque<AgentId> = seeders.iter().copied().collect();
        while let Some(from) = frontier.pop_front() {
            for &agent in self.agents.iter().chain(std::iter::once(&requester)) {
                if holders.contains(&agent) || !self.reach.can_reach(from, agent) {
                    continue;
                }
                if agent == requester {
                    return true;
                }
                holders.insert(agent);
                if !self.non_resharing.contains(&agent) {
                    frontier.push_back(agent);
                }
            }
        }
        false
    }

    /// How many of `cids` the agent can load.
    pub fn availability_count(&self, agent: AgentId, cids: &[ContentId]) -> usize {
        cids.iter().filter(|c| self.get(c, agent).is_ok()).count()
    }

    /// All stored blobs in digest order.
    pub fn blobs(&self) -> impl Iterator<Item = &StoredBlob> {
        self.blobs.values()
    }

    pub fn len(&self) -> usize {
        self.blobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blobs.is_empty()
    }
}
