//! Exact Shapley values by enumerating every coalition.

use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Zero;

use super::AuditError;
use crate::types::AgentId;

pub const MAX_SHAPLEY_PLAYERS: usize = 12;

fn check(n: usize) -> Result<(), AuditError> {
    if n > MAX_SHAPLEY_PLAYERS {
        Err(AuditError::TooManyParticipants {
            max: MAX_SHAPLEY_PLAYERS,
            got: n,
        })
    } else {
        Ok(())
    }
}

fn binomial(n: u64, k: u64) -> u64 {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

/// Shapley values for a game on `n` players given as a bitmask value function.
/// The value function is called once per coalition.
pub fn shapley_exact(n: usize, mut value: impl FnMut(u32) -> BigRational) -> Result<Vec<BigRational>, AuditError> {
    check(n)?;
    let values: Vec<BigRational> = (0..1u32 << n).map(&mut value).collect();
    let mut phi = vec![BigRational::zero(); n];
    for (i, phi_i) in phi.iter_mut().enumerate() {
        let bit = 1u32 << i;
        for s in (0..1u32 << n).filter(|s| s & bit == 0) {
            let size = s.count_ones() as u64;
            // |S|! (n - |S| - 1)! / n!  =  1 / (n * C(n - 1, |S|))
            let weight = BigRational::new(
                BigInt::from(1),
                BigInt::from(n as u64 * binomial(n as u64 - 1, size)),
            );
            *phi_i += (&values[(s | bit) as usize] - &values[s as usize]) * weight;
        }
    }
    Ok(phi)
}

/// Floating-point Shapley values keyed by participant. The value function
/// receives each coalition as a sorted list of members.
pub fn shapley_oracle(
    participants: &[AgentId],
    mut value: impl FnMut(&[AgentId]) -> f64,
) -> Result<BTreeMap<AgentId, f64>, AuditError> {
    let n = participants.len();
    check(n)?;
    let mut sorted = participants.to_vec();
    sorted.sort();
    let values: Vec<f64> = (0..1u32 << n)
        .map(|mask| {
            let members: Vec<AgentId> = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| sorted[i]).collect();
            value(&members)
        })
        .collect();
    let mut out = BTreeMap::new();
    for (i, p) in sorted.iter().enumerate() {
        let bit = 1u32 << i;
        let mut phi = 0.0;
        for s in (0..1u32 << n).filter(|s| s & bit == 0) {
            let weight = 1.0 / (n as f64 * binomial(n as u64 - 1, s.count_ones() as u64) as f64);
            phi += weight * (values[(s | bit) as usize] - values[s as usize]);
        }
        out.insert(*p, phi);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn int(x: i64) -> BigRational {
        BigRational::from_integer(BigInt::from(x))
    }

    /// Permutation definition: average marginal contribution over all n! orders.
    fn by_permutations(n: usize, values: &[i64]) -> Vec<BigRational> {
        fn permute(prefix: &mut Vec<usize>, n: usize, out: &mut Vec<Vec<usize>>) {
            if prefix.len() == n {
                out.push(prefix.clone());
                return;
            }
            for i in 0..n {
                if !prefix.contains(&i) {
                    prefix.push(i);
                    permute(prefix, n, out);
                    prefix.pop();
                }
            }
        }
        let mut orders = Vec::new();
        permute(&mut Vec::new(), n, &mut orders);
        let mut phi = vec![int(0); n];
        for order in &orders {
            let mut mask = 0usize;
            for &i in order {
                let before = values[mask];
                mask |= 1 << i;
                phi[i] += int(values[mask] - before);
            }
        }
        phi.into_iter().map(|x| x / int(orders.len() as i64)).collect()
    }

    #[test]
    fn glove_game() {
        // Player 0 holds a left glove, players 1 and 2 right gloves.
        let v = |s: u32| int(i64::from(s & 1 == 1 && s & 6 != 0));
        let phi = shapley_exact(3, v).unwrap();
        assert_eq!(phi[0], BigRational::new(BigInt::from(2), BigInt::from(3)));
        assert_eq!(phi[1], BigRational::new(BigInt::from(1), BigInt::from(6)));
        assert_eq!(phi[1], phi[2]);
    }

    #[test]
    fn too_many_players() {
        let ids: Vec<AgentId> = (0..13).map(AgentId).collect();
        assert_eq!(
            shapley_oracle(&ids, |_| 0.0),
            Err(AuditError::TooManyParticipants { max: 12, got: 13 })
        );
    }

    #[test]
    fn oracle_matches_exact() {
        let ids = [AgentId(5), AgentId(2), AgentId(9)];
        let phi = shapley_oracle(&ids, |c| c.iter().map(|a| f64::from(a.0)).sum::<f64>().sqrt()).unwrap();
        let sorted = [2.0f64, 5.0, 9.0];
        let exact = shapley_exact(3, |s| {
            let total: f64 = (0..3).filter(|i| s >> i & 1 == 1).map(|i| sorted[i]).sum();
            BigRational::from_float(total.sqrt()).unwrap()
        })
        .unwrap();
        for (i, id) in [AgentId(2), AgentId(5), AgentId(9)].iter().enumerate() {
            use num_traits::ToPrimitive;
            assert!((phi[id] - exact[i].to_f64().unwrap()).abs() < 1e-12);
        }
    }

    fn game() -> impl Strategy<Value = (usize, Vec<i64>)> {
        (1usize..=6).prop_flat_map(|n| (Just(n), proptest::collection::vec(-50i64..50, 1 << n)))
    }

    proptest! {
        #[test]
        fn axioms_hold((n, values) in game(), twin in any::<bool>(), null in any::<bool>()) {
            let mut values = values;
            // Optionally make players 0 and 1 symmetric.
            if twin && n >= 2 {
                for s in 0..(1usize << n) {
                    if s & 1 == 0 && s & 2 != 0 {
                        values[s] = values[(s & !2) | 1];
                    }
                }
            }
            // Optionally make the last player a null player.
            let last = 1usize << (n - 1);
            if null {
                for s in 0..(1usize << n) {
                    if s & last != 0 {
                        values[s] = values[s & !last];
                    }
                }
            }
            let phi = shapley_exact(n, |s| int(values[s as usize])).unwrap();
            let total: BigRational = phi.iter().cloned().sum();
            prop_assert_eq!(total, int(values[(1 << n) - 1] - values[0]));
            prop_assert_eq!(&phi, &by_permutations(n, &values));
            if twin && n >= 2 && !(null && n == 2) {
                prop_assert_eq!(&phi[0], &phi[1]);
            }
            if null {
                prop_assert!(phi[n - 1].is_zero());
            }
        }
    }
}
