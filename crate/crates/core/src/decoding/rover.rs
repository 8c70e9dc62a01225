//! Recognizer output voting over a word transition network.

use crate::{Error, Result};

/// Slots of aligned candidates; `slots[i][s]` is system `s`'s token in slot
/// `i`, `None` for a null arc.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct WordTransitionNetwork {
    pub slots: Vec<Vec<Option<usize>>>,
    pub systems: usize,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Move {
    Diag,
    Del,
    Ins,
}

impl WordTransitionNetwork {
    pub fn new() -> Self {
        Self::default()
    }

    /// Aligns one more hypothesis into the network by minimum edit cost. A
    /// token matches a slot at no cost when any system already put it there,
    /// and skipping a slot is free when it already holds a null.
    pub fn add(&mut self, hyp: &[usize]) {
        let (n, m) = (self.slots.len(), hyp.len());
        let sub = |i: usize, j: usize| usize::from(!self.slots[i].contains(&Some(hyp[j])));
        let del = |i: usize| usize::from(!self.slots[i].contains(&None));
        let mut cost = vec![vec![usize::MAX; m + 1]; n + 1];
        let mut mv = vec![vec![Move::Diag; m + 1]; n + 1];
        cost[0][0] = 0;
        for i in 0..=n {
            for j in 0..=m {
                if i == 0 && j == 0 {
                    continue;
                }
                let mut best = (usize::MAX, Move::Diag);
                if i > 0 && j > 0 {
                    best = (cost[i - 1][j - 1] + sub(i - 1, j - 1), Move::Diag);
                }
                if i > 0 && cost[i - 1][j] + del(i - 1) < best.0 {
                    best = (cost[i - 1][j] + del(i - 1), Move::Del);
                }
                if j > 0 && cost[i][j - 1] + 1 < best.0 {
                    best = (cost[i][j - 1] + 1, Move::Ins);
                }
                cost[i][j] = best.0;
                mv[i][j] = best.1;
            }
        }
        let mut out: Vec<Vec<Option<usize>>> = Vec::with_capacity(n + m);
        let (mut i, mut j) = (n, m);
        while i > 0 || j > 0 {
            match mv[i][j] {
                Move::Diag => {
                    let mut s = self.slots[i - 1].clone();
                    s.push(Some(hyp[j - 1]));
                    out.push(s);
                    i -= 1;
                    j -= 1;
                }
                Move::Del => {
                    let mut s = self.slots[i - 1].clone();
                    s.push(None);
                    out.push(s);
                    i -= 1;
                }
                Move::Ins => {
                    let mut s = vec![None; self.systems];
                    s.push(Some(hyp[j - 1]));
                    out.push(s);
                    j -= 1;
                }
            }
        }
        out.reverse();
        self.slots = out;
        self.systems += 1;
    }

    /// Per-slot majority vote; ties go to the candidate of the earliest
    /// system and a winning null drops the slot.
    pub fn vote(&self) -> Vec<usize> {
        self.slots
            .iter()
            .filter_map(|slot| {
                let mut best: (usize, Option<usize>) = (0, None);
                for c in slot {
                    let n = slot.iter().filter(|x| *x == c).count();
                    if n > best.0 {
                        best = (n, *c);
                    }
                }
                best.1
            })
            .collect()
    }
}

pub fn rover(hyps: &[Vec<usize>]) -> Result<Vec<usize>> {
    if hyps.len() < 2 {
        return Err(Error::Config(format!("combination needs at least 2 systems, got {}", hyps.len())));
    }
    let mut net = WordTransitionNetwork::new();
    for h in hyps {
        net.add(h);
    }
    Ok(net.vote())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Worked by hand: the second system skips slot 1 at cost 1, the third
    /// substitutes in slot 2 at cost 1; slot 1 then votes 2 over null.
    #[test]
    fn three_system_example() {
        let hyps = [vec![1, 2, 3, 4], vec![1, 3, 4], vec![1, 2, 5, 4]];
        let mut net = WordTransitionNetwork::new();
        for h in &hyps {
            net.add(h);
        }
        assert_eq!(
            net.slots,
            [
                vec![Some(1), Some(1), Some(1)],
                vec![Some(2), None, Some(2)],
                vec![Some(3), Some(3), Some(5)],
                vec![Some(4), Some(4), Some(4)],
            ]
        );
        assert_eq!(net.vote(), [1, 2, 3, 4]);
        assert_eq!(rover(&[vec![1, 2], vec![1], vec![1]]).unwrap(), [1]);
    }

    #[test]
    fn majority_per_slot() {
        let out = rover(&[vec![0, 1, 2], vec![0, 9, 2], vec![0, 1, 3]]).unwrap();
        assert_eq!(out, [0, 1, 2]);
    }

    #[test]
    fn full_disagreement_keeps_first_system() {
        assert_eq!(rover(&[vec![0, 1], vec![2, 3]]).unwrap(), [0, 1]);
        assert_eq!(rover(&[vec![0, 1, 2], vec![5]]).unwrap(), [0, 1, 2]);
        assert_eq!(rover(&[vec![], vec![5]]).unwrap(), Vec::<usize>::new());
    }

    #[test]
    fn every_system_is_a_path() {
        let hyps = [vec![0, 1, 2], vec![1, 2], vec![0, 3, 1, 2], vec![]];
        let mut net = WordTransitionNetwork::new();
        for h in &hyps {
            net.add(h);
        }
        for (s, h) in hyps.iter().enumerate() {
            let path: Vec<usize> = net.slots.iter().filter_map(|slot| slot[s]).collect();
            assert_eq!(&path, h);
        }
    }
}
