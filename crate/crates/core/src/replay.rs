//! Capacity-bounded rehearsal memory with per-task equal allocation.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ColtError, Result};
use crate::taskstream::{derive_seed, DetectionSample};

pub const DEFAULT_CAPACITY: usize = 250;

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayMemory {
    capacity: usize,
    /// Grouped by task in commit order.
    slots: Vec<DetectionSample>,
    per_task_counts: BTreeMap<usize, usize>,
    committed: Vec<usize>,
}

/// Identity of one stored sample; pixels are reloaded from the dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub task_id: usize,
    pub sample_id: String,
}

impl Default for ReplayMemory {
    fn default() -> Self {
        Self::new(DEFAULT_CAPACITY)
    }
}

/// Quota of the `i`-th committed task when `n` tasks share `capacity`.
pub fn quota(capacity: usize, n: usize, i: usize) -> usize {
    capacity / n + usize::from(i < capacity % n)
}

/// Uniform subsample of `k` positions out of `n`, kept in original order.
fn subsample(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut picked = index::sample(rng, n, k).into_vec();
    picked.sort_unstable();
    picked
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            slots: Vec::new(),
            per_task_counts: BTreeMap::new(),
            committed: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slots(&self) -> &[DetectionSample] {
        &self.slots
    }

    pub fn per_task_counts(&self) -> &BTreeMap<usize, usize> {
        &self.per_task_counts
    }

    /// Task ids in commit order.
    pub fn committed(&self) -> &[usize] {
        &self.committed
    }

    /// Re-divides the budget over every committed task including `task_id`,
    /// shrinking older tasks by uniform subsampling and storing a uniform
    /// subsample of `candidates`.
    pub fn commit_task(&mut self, task_id: usize, candidates: &[DetectionSample], seed: u64) -> Result<()> {
        if self.committed.contains(&task_id) {
            return Err(ColtError::DuplicateCommit(task_id));
        }
        if let Some(bad) = candidates.iter().find(|s| s.task_id != task_id) {
            return Err(ColtError::InvalidSample {
                sample_id: bad.sample_id.clone(),
                reason: format!("candidate for task {task_id} belongs to task {}", bad.task_id),
            });
        }
        let n = self.committed.len() + 1;
        let mut slots = Vec::with_capacity(self.capacity);
        let mut counts = BTreeMap::new();
        let mut offset = 0;
        for (i, &t) in self.committed.iter().enumerate() {
            let have = self.per_task_counts[&t];
            let group = &self.slots[offset..offset + have];
            offset += have;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, task_id as u64, t as u64]));
            let keep = subsample(have, quota(self.capacity, n, i), &mut rng);
            slots.extend(keep.iter().map(|&j| group[j].clone()));
            counts.insert(t, keep.len());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, task_id as u64, u64::MAX]));
        let keep = subsample(candidates.len(), quota(self.capacity, n, n - 1), &mut rng);
        slots.extend(keep.iter().map(|&j| candidates[j].clone()));
        counts.insert(task_id, keep.len());

        self.slots = slots;
        self.per_task_counts = counts;
        self.committed.push(task_id);
        Ok(())
    }

    /// `k` stored samples, drawn without replacement unless `k` exceeds the
    /// memory size.
    pub fn sample_batch(&self, k: usize, seed: u64) -> Result<Vec<&DetectionSample>> {
        if self.slots.is_empty() {
            return Err(ColtError::NoRehearsalData);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.slots.len();
        let picks: Vec<usize> = if k <= n {
            index::sample(&mut rng, n, k).into_vec()
        } else {
            (0..k).map(|_| rng.gen_range(0..n)).collect()
        };
        Ok(picks.into_iter().map(|i| &self.slots[i]).collect())
    }

    pub fn entries(&self) -> Vec<MemoryEntry> {
        self.slots
            .iter()
            .map(|s| MemoryEntry {
                task_id: s.task_id,
                sample_id: s.sample_id.clone(),
            })
            .collect()
    }

    /// Rebuilds a memory from stored entries, resolving pixels via `lookup`.
    pub fn restore<'a>(
        capacity: usize,
        committed: Vec<usize>,
        entries: &[MemoryEntry],
        lookup: impl Fn(&str) -> Option<&'a DetectionSample>,
    ) -> Result<Self> {
        let mut slots = Vec::with_capacity(entries.len());
        let mut counts: BTreeMap<usize, usize> = committed.iter().map(|&t| (t, 0)).collect();
        for e in entries {
            let s = lookup(&e.sample_id)
                .ok_or_else(|| ColtError::CorruptCheckpoint(format!("memory sample {} not in dataset", e.sample_id)))?;
            if s.task_id != e.task_id {
                return Err(ColtError::CorruptCheckpoint(format!(
                    "memory sample {} recorded for task {}, dataset says {}",
                    e.sample_id, e.task_id, s.task_id
                )));
            }
            *counts.get_mut(&e.task_id).ok_or_else(|| {
                ColtError::CorruptCheckpoint(format!("memory holds uncommitted task {}", e.task_id))
            })? += 1;
            slots.push(s.clone());
        }
        if slots.len() > capacity {
            return Err(ColtError::CorruptCheckpoint(format!(
                "memory holds {} samples, capacity {capacity}",
                slots.len()
            )));
        }
        Ok(Self {
            capacity,
            slots,
            per_task_counts: counts,
            committed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskstream::{RgbFrame, Split};
    use proptest::prelude::*;

    fn candidates(task: usize, n: usize) -> Vec<DetectionSample> {
        (0..n)
            .map(|i| DetectionSample {
                sample_id: format!("t{task}-{i}"),
                task_id: task,
                split: Split::Train,
                image: RgbFrame::filled(1, 1, [(i % 251) as u8, task as u8, 0]),
                boxes: vec![],
                labels: vec![],
            })
            .collect()
    }

    #[test]
    fn equal_allocation_two_tasks() {
        let mut m = ReplayMemory::new(250);
        m.commit_task(0, &candidates(0, 447), 1).unwrap();
        assert_eq!(m.len(), 250);
        assert!(m.slots().iter().all(|s| s.task_id == 0));
        m.commit_task(1, &candidates(1, 133), 1).unwrap();
        assert_eq!(m.per_task_counts()[&0], 125);
        assert_eq!(m.per_task_counts()[&1], 125);
    }

    #[test]
    fn never_fabricates() {
        let mut m = ReplayMemory::new(250);
        for t in 0..3 {
            m.commit_task(t, &candidates(t, 200), 0).unwrap();
        }
        assert_eq!(quota(250, 4, 3), 62);
        m.commit_task(3, &candidates(3, 10), 0).unwrap();
        assert_eq!(m.per_task_counts()[&3], 10);
    }

    #[test]
    fn remainder_goes_to_earliest_tasks() {
        let mut m = ReplayMemory::new(10);
        for t in 0..3 {
            m.commit_task(t, &candidates(t, 20), 5).unwrap();
        }
        let counts: Vec<usize> = m.per_task_counts().values().copied().collect();
        assert_eq!(counts, vec![4, 3, 3]);
    }

    #[test]
    fn duplicate_commit_rejected() {
        let mut m = ReplayMemory::new(10);
        m.commit_task(0, &candidates(0, 3), 0).unwrap();
        assert!(matches!(
            m.commit_task(0, &candidates(0, 3), 0),
            Err(ColtError::DuplicateCommit(0))
        ));
    }

    #[test]
    fn sampling_contract() {
        let mut m = ReplayMemory::new(50);
        assert!(matches!(m.sample_batch(2, 0), Err(ColtError::NoRehearsalData)));
        m.commit_task(0, &candidates(0, 30), 0).unwrap();
        let all = m.sample_batch(30, 4).unwrap();
        let mut ids: Vec<&str> = all.iter().map(|s| s.sample_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 30);
        assert_eq!(m.sample_batch(5, 9).unwrap(), m.sample_batch(5, 9).unwrap());
        assert_eq!(m.sample_batch(70, 9).unwrap().len(), 70);
    }

    #[test]
    fn stored_samples_are_value_identical() {
        let c = candidates(0, 40);
        let mut m = ReplayMemory::new(25);
        m.commit_task(0, &c, 3).unwrap();
        for s in m.slots() {
            assert!(c.contains(s));
        }
    }

    #[test]
    fn restore_round_trip() {
        let c0 = candidates(0, 40);
        let c1 = candidates(1, 40);
        let mut m = ReplayMemory::new(25);
        m.commit_task(0, &c0, 3).unwrap();
        m.commit_task(1, &c1, 3).unwrap();
        let all: Vec<DetectionSample> = c0.into_iter().chain(c1).collect();
        let back = ReplayMemory::restore(25, m.committed().to_vec(), &m.entries(), |id| {
            all.iter().find(|s| s.sample_id == id)
        })
        .unwrap();
        assert_eq!(back, m);
        assert!(ReplayMemory::restore(25, vec![0, 1], &m.entries(), |_| None).is_err());
    }

    #[derive(Debug, Clone)]
    enum Action {
        Commit(usize),
        Sample(usize, u64),
    }

    fn action() -> impl Strategy<Value = Action> {
        prop_oneof![
            (0usize..500).prop_map(Action::Commit),
            (0usize..400, any::<u64>()).prop_map(|(k, s)| Action::Sample(k, s)),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn capacity_is_never_exceeded(actions in prop::collection::vec(action(), 1..12), seed in any::<u64>()) {
            let mut m = ReplayMemory::new(DEFAULT_CAPACITY);
            let mut next = 0;
            let mut offered = Vec::new();
            for a in actions {
                match a {
                    Action::Commit(n) => {
                        m.commit_task(next, &candidates(next, n), seed).unwrap();
                        offered.push(n);
                        next += 1;
                    }
                    Action::Sample(k, s) => match m.sample_batch(k, s) {
                        Ok(b) => prop_assert_eq!(b.len(), k),
                        Err(e) => prop_assert!(m.is_empty() && matches!(e, ColtError::NoRehearsalData)),
                    },
                }
                prop_assert!(m.len() <= m.capacity());
                prop_assert_eq!(m.per_task_counts().values().sum::<usize>(), m.len());
            }
            let n = offered.len();
            if n > 0 && offered.iter().all(|&o| o >= quota(DEFAULT_CAPACITY, n, 0)) {
                let counts: Vec<usize> = m.per_task_counts().values().copied().collect();
                let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
                prop_assert!(hi - lo <= 1);
            }
        }
    }
}
