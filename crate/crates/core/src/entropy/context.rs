use alloc::vec;
use alloc::vec::Vec;

use super::range_coder::PROB_ONE;

pub const CHANNEL_GROUPS: usize = 8;
pub const NEIGHBOR_STATES: usize = 4;
pub const SIGNIFICANCE_STATES: usize = 2;

/// Context id from (plane, channel group, causal neighbour ones, significance).
#[inline]
pub fn context_id(plane: usize, group: usize, neighbors: usize, significant: bool) -> usize {
    ((plane * CHANNEL_GROUPS + group) * NEIGHBOR_STATES + neighbors) * SIGNIFICANCE_STATES + significant as usize
}

pub fn channel_group(channel: usize, channels: usize) -> usize {
    channel * CHANNEL_GROUPS / channels.max(1)
}

/// Adaptive zero/one counts per context with the Krichevsky–Trofimov
/// estimate `p1 = (c1 + 1/2) / (c0 + c1 + 1)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextModel {
    counts: Vec<[u32; 2]>,
}

impl ContextModel {
    pub fn new(planes: usize) -> Self {
        Self {
            counts: vec![[0, 0]; planes * CHANNEL_GROUPS * NEIGHBOR_STATES * SIGNIFICANCE_STATES],
        }
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn counts(&self, ctx: usize) -> (u32, u32) {
        let [c0, c1] = self.counts[ctx];
        (c0, c1)
    }

    pub fn p1(&self, ctx: usize) -> f64 {
        let (c0, c1) = self.counts(ctx);
        (c1 as f64 + 0.5) / (c0 as f64 + c1 as f64 + 1.0)
    }

    /// Probability of a zero in coder units, strictly inside `(0, PROB_ONE)`.
    #[inline]
    pub fn p0_scaled(&self, ctx: usize) -> u32 {
        let [c0, c1] = self.counts[ctx];
        let num = (2 * c0 as u64 + 1) << 16;
        let den = 2 * (c0 as u64 + c1 as u64) + 2;
        ((num / den) as u32).clamp(1, PROB_ONE - 1)
    }

    #[inline]
    pub fn update(&mut self, ctx: usize, bit: bool) {
        let c = &mut self.counts[ctx][bit as usize];
        *c = c.saturating_add(1);
    }
}
