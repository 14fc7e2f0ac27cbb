//! Sequence-aware replay: per-step transitions grouped into actor
//! decisions, with observation windows assembled at sample time.

use std::collections::VecDeque;

use rand::Rng;

use crate::cpg::CpgState;
use crate::error::{structural, Result};

/// One environment step. Per-agent vectors are indexed by agent.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub next_state: Vec<f64>,
    pub local: Vec<Vec<f64>>,
    pub next_local: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub reward: f64,
    pub done: bool,
    /// CPG state before and after this step; empty for feed-forward actors.
    pub h: Vec<CpgState>,
    pub h_next: Vec<CpgState>,
    /// Packed bounded CPG parameters active during the step.
    pub params: Vec<Vec<f64>>,
    /// Task goal vector (empty when goal information lives in the
    /// observation).
    pub goal: Vec<f64>,
    pub episode: u64,
    /// Position inside the actor decision that produced the step.
    pub offset: u32,
}

/// A stored decision: `len` consecutive transitions starting at `start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: u64,
    pub len: u32,
}

/// FIFO ring of transitions addressed by a global, ever-increasing index.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    pub capacity: usize,
    /// Global index of the oldest stored transition.
    pub first: u64,
    pub items: VecDeque<Transition>,
    pub segments: VecDeque<Segment>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(structural("replay capacity must be positive"));
        }
        Ok(Self {
            capacity,
            first: 0,
            items: VecDeque::new(),
            segments: VecDeque::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Global index the next pushed transition will receive.
    pub fn next_index(&self) -> u64 {
        self.first + self.items.len() as u64
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
            self.first += 1;
            while self.segments.front().is_some_and(|s| s.start < self.first) {
                self.segments.pop_front();
            }
        }
        self.items.push_back(t);
    }

    /// Registers a finished decision whose transitions were pushed last.
    pub fn close_segment(&mut self, len: u32) -> Result<()> {
        let end = self.next_index();
        if len == 0 || (len as u64) > end - self.first {
            return Err(structural("segment is not fully stored"));
        }
        self.segments.push_back(Segment {
            start: end - len as u64,
            len,
        });
        Ok(())
    }

    pub fn get(&self, index: u64) -> Option<&Transition> {
        index
            .checked_sub(self.first)
            .and_then(|i| self.items.get(i as usize))
    }

    fn at(&self, index: u64) -> &Transition {
        &self.items[(index - self.first) as usize]
    }

    /// Oldest stored index of the episode containing `index`, looking back
    /// at most `limit` steps.
    fn episode_floor(&self, index: u64, limit: usize) -> u64 {
        let ep = self.at(index).episode;
        let mut i = index;
        for _ in 0..limit {
            if i == self.first || self.at(i - 1).episode != ep {
                break;
            }
            i -= 1;
        }
        i
    }

    /// Observations `o_{t-w+1}, …, o_t` for the step at `index`, where
    /// `pick` reads one observation out of a transition. Steps before the
    /// episode start repeat its first observation.
    pub fn window<F>(&self, index: u64, width: usize, pick: F, out: &mut Vec<f64>)
    where
        F: Fn(&Transition) -> &[f64],
    {
        let floor = self.episode_floor(index, width.saturating_sub(1));
        for k in 0..width as u64 {
            let t = (index + k + 1).saturating_sub(width as u64).max(floor);
            out.extend_from_slice(pick(self.at(t)));
        }
    }

    /// Window ending at the observation after the step at `index`.
    pub fn next_window<F, G>(&self, index: u64, width: usize, pick: F, pick_next: G, out: &mut Vec<f64>)
    where
        F: Fn(&Transition) -> &[f64],
        G: Fn(&Transition) -> &[f64],
    {
        if width == 0 {
            return;
        }
        if width > 1 {
            let floor = self.episode_floor(index, width - 2);
            for k in 0..(width - 1) as u64 {
                let t = (index + k + 2).saturating_sub(width as u64).max(floor);
                out.extend_from_slice(pick(self.at(t)));
            }
        }
        out.extend_from_slice(pick_next(self.at(index)));
    }

    /// Uniform sample of stored decisions.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<Segment>> {
        if self.segments.is_empty() {
            return Err(structural("no complete segments stored"));
        }
        Ok((0..count)
            .map(|_| self.segments[rng.random_range(0..self.segments.len())])
            .collect())
    }

    pub fn transitions(&self, seg: Segment) -> impl Iterator<Item = &Transition> {
        (seg.start..seg.start + seg.len as u64).map(move |i| self.at(i))
    }
}
