use rand::seq::SliceRandom;

use super::dataset::{DomainDataset, Sample};
use crate::error::{Error, Result};
use crate::seed::{rng_for, stream};

/// Infinite class-balanced sampler over several domains.
///
/// Batch `t` holds exactly `per_domain` samples of every domain. Within a
/// domain the two classes split the quota evenly; for an odd quota the
/// extra slot alternates between classes from one iteration to the next.
/// Each (domain, class) pool is walked in a seeded permutation that is
/// reshuffled when exhausted.
///
/// The sampler keeps no state: the samples of batch `t` are a function of
/// `(seed, t)` only, so a resumed run sees the same batches as an
/// uninterrupted one.
#[derive(Clone, Debug)]
pub struct BalancedSampler {
    pools: Vec<[Vec<Sample>; 2]>,
    per_domain: usize,
    seed: u64,
}

impl BalancedSampler {
    pub fn new(domains: &[&DomainDataset], per_domain: usize, seed: u64) -> Result<Self> {
        if per_domain == 0 {
            return Err(Error::InvalidInput("per-domain batch size must be positive".into()));
        }
        if domains.is_empty() {
            return Err(Error::InvalidInput("sampler needs at least one domain".into()));
        }
        let mut pools = Vec::with_capacity(domains.len());
        for d in domains {
            if d.is_empty() {
                return Err(Error::InvalidInput(format!("domain {} has no samples", d.name)));
            }
            let mut by_class: [Vec<Sample>; 2] = Default::default();
            for s in &d.samples {
                by_class[s.label.index()].push(s.clone());
            }
            for pool in &mut by_class {
                pool.sort_by(|a, b| a.id.cmp(&b.id));
            }
            pools.push(by_class);
        }
        Ok(Self {
            pools,
            per_domain,
            seed,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.per_domain * self.pools.len()
    }

    pub fn domains(&self) -> usize {
        self.pools.len()
    }

    /// Class with the extra slot at iteration `t` in domain `d`.
    fn favored(t: u64, d: usize) -> usize {
        ((t + d as u64) % 2) as usize
    }

    /// Samples of class `c` drawn from domain `d` before iteration `t`,
    /// and in iteration `t` itself.
    fn quota(&self, d: usize, c: usize, t: u64) -> (u64, usize) {
        let [real, spoof] = &self.pools[d];
        let k = self.per_domain;
        if real.is_empty() || spoof.is_empty() {
            let take = if self.pools[d][c].is_empty() { 0 } else { k };
            return (t * take as u64, take);
        }
        let base = (k / 2) as u64;
        let odd = k % 2 == 1;
        // Iterations s < t with favored(s, d) == c, i.e. s ≡ c − d (mod 2).
        let residue = ((c + 2 - d % 2) % 2) as u64;
        let extra_before = if odd { count_residue(t, residue) } else { 0 };
        let now = k / 2 + usize::from(odd && Self::favored(t, d) == c);
        (t * base + extra_before, now)
    }

    /// The `t`-th batch, domain by domain, class by class.
    pub fn batch(&self, t: u64) -> Vec<Sample> {
        let mut out = Vec::with_capacity(self.batch_size());
        for d in 0..self.pools.len() {
            for c in 0..2 {
                let (start, n) = self.quota(d, c, t);
                let pool = &self.pools[d][c];
                for pos in start..start + n as u64 {
                    let len = pool.len() as u64;
                    let (epoch, i) = (pos / len, (pos % len) as usize);
                    out.push(pool[self.permutation(d, c, epoch)[i]].clone());
                }
            }
        }
        out
    }

    fn permutation(&self, d: usize, c: usize, epoch: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.pools[d][c].len()).collect();
        idx.shuffle(&mut rng_for(self.seed, &[stream::SAMPLER, d as u64, c as u64, epoch]));
        idx
    }
}

/// Number of `s` in `0..t` with `s % 2 == r`.
fn count_residue(t: u64, r: u64) -> u64 {
    if r == 0 {
        t.div_ceil(2)
    } else {
        t / 2
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::{AttackType, Class};
    use std::collections::HashMap;
    use std::path::PathBuf;

    fn domain(name: &str, real: usize, spoof: usize) -> DomainDataset {
        let mut samples = Vec::new();
        for (label, n) in [(Class::Real, real), (Class::Spoof, spoof)] {
            for i in 0..n {
                samples.push(Sample {
                    id: format!("{name}/{}{i}", label.name()),
                    path: PathBuf::from("x"),
                    label,
                    attack: if label == Class::Real { AttackType::None } else { AttackType::Print },
                    domain: name.into(),
                });
            }
        }
        DomainDataset::new(name, samples).unwrap()
    }

    /// Replays the sampler with explicit per-pool cursors.
    fn stateful_oracle(s: &BalancedSampler, iterations: u64) -> Vec<Vec<Sample>> {
        let mut cursor: HashMap<(usize, usize), u64> = HashMap::new();
        let mut out = Vec::new();
        for t in 0..iterations {
            let mut batch = Vec::new();
            for d in 0..s.pools.len() {
                let both = s.pools[d].iter().all(|p| !p.is_empty());
                for c in 0..2 {
                    let n = if both {
                        s.per_domain / 2
                            + usize::from(s.per_domain % 2 == 1 && (t as usize + d) % 2 == c)
                    } else if s.pools[d][c].is_empty() {
                        0
                    } else {
                        s.per_domain
                    };
                    let pool = &s.pools[d][c];
                    for _ in 0..n {
                        let pos = cursor.entry((d, c)).or_insert(0);
                        let len = pool.len() as u64;
                        batch.push(pool[s.permutation(d, c, *pos / len)[(*pos % len) as usize]].clone());
                        *pos += 1;
                    }
                }
            }
            out.push(batch);
        }
        out
    }

    #[test]
    fn batches_match_a_stateful_walk() {
        let a = domain("a", 4, 7);
        let b = domain("b", 5, 2);
        let c = domain("c", 0, 3);
        for k in [1, 2, 3, 5] {
            let s = BalancedSampler::new(&[&a, &b, &c], k, 11).unwrap();
            let expected = stateful_oracle(&s, 40);
            for (t, batch) in expected.iter().enumerate() {
                assert_eq!(&s.batch(t as u64), batch, "k={k} t={t}");
            }
        }
    }

    #[test]
    fn every_batch_has_per_domain_samples_and_both_classes() {
        let a = domain("a", 4, 7);
        let b = domain("b", 5, 2);
        let s = BalancedSampler::new(&[&a, &b], 3, 5).unwrap();
        for t in 0..50 {
            let batch = s.batch(t);
            assert_eq!(batch.len(), 6);
            for name in ["a", "b"] {
                let mine: Vec<_> = batch.iter().filter(|x| x.domain == name).collect();
                assert_eq!(mine.len(), 3);
                assert!(mine.iter().any(|x| x.label == Class::Real));
                assert!(mine.iter().any(|x| x.label == Class::Spoof));
            }
        }
    }

    #[test]
    fn odd_quota_alternates_and_balances_over_two_batches() {
        let a = domain("a", 10, 10);
        let s = BalancedSampler::new(&[&a], 3, 1).unwrap();
        let reals: Vec<usize> = (0..4)
            .map(|t| s.batch(t).iter().filter(|x| x.label == Class::Real).count())
            .collect();
        assert_eq!(reals, [2, 1, 2, 1]);
    }

    #[test]
    fn every_sample_is_seen_once_per_epoch() {
        let a = domain("a", 6, 6);
        let s = BalancedSampler::new(&[&a], 2, 4).unwrap();
        let mut seen: Vec<String> = (0..6).flat_map(|t| s.batch(t)).map(|x| x.id).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 12);
    }

    #[test]
    fn same_seed_same_batches() {
        let a = domain("a", 6, 6);
        let s1 = BalancedSampler::new(&[&a], 3, 4).unwrap();
        let s2 = BalancedSampler::new(&[&a], 3, 4).unwrap();
        let s3 = BalancedSampler::new(&[&a], 3, 5).unwrap();
        let seq = |s: &BalancedSampler| (0..20).map(|t| s.batch(t)).collect::<Vec<_>>();
        assert_eq!(seq(&s1), seq(&s2));
        assert_ne!(seq(&s1), seq(&s3));
    }
}
