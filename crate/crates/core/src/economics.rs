//! Evaluator staking under Harberger taxation.
//!
//! Evaluators hold self-assessed stake NFTs. Each epoch every active stake
//! pays `floor(assessed_value * tax_rate)` into the public-goods pool, and
//! anyone may buy a stake at its assessed value at any time. Slashing moves
//! part or all of the assessed value from the owner's balance to the pool.
//! All amounts are integer units of the stablecoin; the only operation that
//! changes the money supply is [`Economics::mint`].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{AgentId, Ratio};

pub type NftId = u64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StakeNft {
    pub id: NftId,
    pub owner: AgentId,
    pub assessed_value: u64,
    pub tax_rate: Ratio,
    pub active: bool,
}

impl StakeNft {
    pub fn epoch_tax(&self) -> u64 {
        self.tax_rate.floor_mul(self.assessed_value)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Treasury {
    pub public_goods_pool: u64,
    pub balances: BTreeMap<AgentId, u64>,
}

impl Treasury {
    pub fn balance(&self, agent: AgentId) -> u64 {
        self.balances.get(&agent).copied().unwrap_or(0)
    }

    pub fn total_balances(&self) -> u64 {
        self.balances.values().sum()
    }

    pub(crate) fn credit(&mut self, agent: AgentId, amount: u64) {
        if amount > 0 {
            *self.balances.entry(agent).or_insert(0) += amount;
        }
    }

    pub(crate) fn debit(&mut self, agent: AgentId, amount: u64) -> Result<(), EconomicsError> {
        let have = self.balance(agent);
        if have < amount {
            return Err(EconomicsError::InsufficientBalance {
                agent,
                needed: amount,
                available: have,
            });
        }
        if amount > 0 {
            self.balances.insert(agent, have - amount);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EconomicsEntry {
    Minted { to: AgentId, amount: u64 },
    Staked { nft: NftId, owner: AgentId, value: u64 },
    Reassessed { nft: NftId, value: u64 },
    TaxPaid { epoch: u64, nft: NftId, owner: AgentId, amount: u64 },
    Deactivated { nft: NftId, owner: AgentId, reason: String },
    Sold { nft: NftId, seller: AgentId, buyer: AgentId, price: u64 },
    Slashed { nft: NftId, owner: AgentId, amount: u64 },
    SlashSkipped { evaluator: AgentId },
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum EconomicsError {
    #[error("{agent} has {available}, needs {needed}")]
    InsufficientBalance {
        agent: AgentId,
        needed: u64,
        available: u64,
    },
    #[error("stake {0} is inactive")]
    InactiveStake(NftId),
    #[error("unknown stake {0}")]
    UnknownStake(NftId),
    #[error("{0} does not own stake {1}")]
    NotStakeOwner(AgentId, NftId),
    #[error("{0} has no active stake")]
    NoActiveStake(AgentId),
    #[error("epoch {0} was already charged")]
    EpochAlreadyCharged(u64),
    #[error("slash fraction must lie in [0, 1]")]
    InvalidFraction,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Economics {
    pub treasury: Treasury,
    pub stakes: BTreeMap<NftId, StakeNft>,
    next_nft: NftId,
    /// Total external deposits ever minted.
    pub minted: u64,
    charged_epochs: BTreeSet<u64>,
}

impl Economics {
    pub fn mint(&mut self, to: AgentId, amount: u64) -> EconomicsEntry {
        self.treasury.credit(to, amount);
        self.minted += amount;
        EconomicsEntry::Minted { to, amount }
    }

    pub fn transfer(&mut self, from: AgentId, to: AgentId, amount: u64) -> Result<(), EconomicsError> {
        self.treasury.debit(from, amount)?;
        self.treasury.credit(to, amount);
        Ok(())
    }

    /// Creates an active stake. The owner must be able to cover one epoch of tax.
    pub fn stake(&mut self, agent: AgentId, assessed_value: u64, tax_rate: Ratio) -> Result<&StakeNft, EconomicsError> {
        let first_tax = tax_rate.floor_mul(assessed_value);
        let available = self.treasury.balance(agent);
        if available < first_tax || (available == 0 && assessed_value > 0) {
            return Err(EconomicsError::InsufficientBalance {
                agent,
                needed: first_tax.max(1),
                available,
            });
        }
        let id = self.next_nft;
        self.next_nft += 1;
        self.stakes.insert(
            id,
            StakeNft {
                id,
                owner: agent,
                assessed_value,
                tax_rate,
                active: true,
            },
        );
        Ok(&self.stakes[&id])
    }

    pub fn reassess(&mut self, agent: AgentId, nft: NftId, value: u64) -> Result<EconomicsEntry, EconomicsError> {
        let stake = self.stakes.get_mut(&nft).ok_or(EconomicsError::UnknownStake(nft))?;
        if stake.owner != agent {
            return Err(EconomicsError::NotStakeOwner(agent, nft));
        }
        if !stake.active {
            return Err(EconomicsError::InactiveStake(nft));
        }
        stake.assessed_value = value;
        Ok(EconomicsEntry::Reassessed { nft, value })
    }

    /// Charges every active stake for `epoch`. An owner who cannot pay the
    /// full amount pays nothing and loses the stake.
    pub fn charge_tax(&mut self, epoch: u64) -> Result<Vec<EconomicsEntry>, EconomicsError> {
        if !self.charged_epochs.insert(epoch) {
            return Err(EconomicsError::EpochAlreadyCharged(epoch));
        }
        let mut entries = Vec::new();
        for stake in self.stakes.values_mut().filter(|s| s.active) {
            let tax = stake.epoch_tax();
            if self.treasury.debit(stake.owner, tax).is_ok() {
                self.treasury.public_goods_pool += tax;
                entries.push(EconomicsEntry::TaxPaid {
                    epoch,
                    nft: stake.id,
                    owner: stake.owner,
                    amount: tax,
                });
            } else {
                stake.active = false;
                entries.push(EconomicsEntry::Deactivated {
                    nft: stake.id,
                    owner: stake.owner,
                    reason: "tax unpaid".into(),
                });
            }
        }
        Ok(entries)
    }

    /// Harberger purchase at the assessed value. The price goes to the seller
    /// and the assessment carries over until the buyer reassesses.
    pub fn force_sale(&mut self, buyer: AgentId, nft: NftId) -> Result<EconomicsEntry, EconomicsError> {
        let stake = self.stakes.get(&nft).ok_or(EconomicsError::UnknownStake(nft))?;
        if !stake.active {
            return Err(EconomicsError::InactiveStake(nft));
        }
        let (seller, price) = (stake.owner, stake.assessed_value);
        self.transfer(buyer, seller, price)?;
        self.stakes.get_mut(&nft).expect("exists").owner = buyer;
        Ok(EconomicsEntry::Sold {
            nft,
            seller,
            buyer,
            price,
        })
    }

    /// Confiscates `floor(fraction * assessed_value)` from every active stake
    /// the evaluator owns. A full slash, or one the owner cannot cover,
    /// confiscates what is available and deactivates the stake.
    pub fn slash(&mut self, evaluator: AgentId, fraction: Ratio) -> Result<Vec<EconomicsEntry>, EconomicsError> {
        if !fraction.is_unit_interval() {
            return Err(EconomicsError::InvalidFraction);
        }
        let ids: Vec<NftId> = self
            .stakes
            .values()
            .filter(|s| s.active && s.owner == evaluator)
            .map(|s| s.id)
            .collect();
        if ids.is_empty() {
            return Err(EconomicsError::NoActiveStake(evaluator));
        }
        if fraction.num == 0 {
            return Ok(vec![EconomicsEntry::SlashSkipped { evaluator }]);
        }
        let mut entries = Vec::new();
        for id in ids {
            let stake = self.stakes.get_mut(&id).expect("exists");
            let due = fraction.floor_mul(stake.assessed_value);
            let available = self.treasury.balance(evaluator);
            let amount = due.min(available);
            self.treasury.debit(evaluator, amount)?;
            self.treasury.public_goods_pool += amount;
            entries.push(EconomicsEntry::Slashed {
                nft: id,
                owner: evaluator,
                amount,
            });
            if fraction.num >= fraction.den || amount < due {
                stake.active = false;
                entries.push(EconomicsEntry::Deactivated {
                    nft: id,
                    owner: evaluator,
                    reason: "slashed".into(),
                });
            }
        }
        Ok(entries)
    }

    pub fn is_eligible(&self, agent: AgentId) -> bool {
        self.stakes.values().any(|s| s.active && s.owner == agent)
    }

    pub fn active_stakes(&self) -> impl Iterator<Item = &StakeNft> {
        self.stakes.values().filter(|s| s.active)
    }

    /// Money held outside task escrows.
    pub fn circulating(&self) -> u64 {
        self.treasury.total_balances() + self.treasury.public_goods_pool
    }
}
