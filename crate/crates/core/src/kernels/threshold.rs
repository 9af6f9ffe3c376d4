use serde::{Deserialize, Serialize};

use super::{fused_transform, Activation};
use crate::bitpack::sign_bit;

/// Values the effective accumulator can take.
///
/// With one-padding (or no padding) the accumulator is an integer in `0..=n`.
/// Zero-padding correction shifts it by half the correction term, so it
/// ranges over the half-integers in `0..=n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccumulatorDomain {
    Integer,
    HalfInteger,
}

impl AccumulatorDomain {
    /// Achievable doubled-accumulator values `2·acc` in increasing order.
    pub fn doubled_values(self, n: usize) -> impl Iterator<Item = i32> {
        let step = match self {
            AccumulatorDomain::Integer => 2,
            AccumulatorDomain::HalfInteger => 1,
        };
        (0..=2 * n as i32).step_by(step)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ThresholdError {
    #[error("output channel {channel} is not monotone in the accumulator")]
    NonMonotone { channel: usize },
}

/// Per-channel thresholds replacing `quantize(float transform(acc))`.
///
/// For channel `c` the output bit is `constant[c]` when set, otherwise
/// `acc < tau[c]` if `flip[c]` and `acc > tau[c]` if not. `acc` is the
/// XOR-popcount accumulator (plus half the zero-padding correction).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ThresholdSet {
    pub tau: Vec<f32>,
    pub flip: Vec<bool>,
    pub constant: Vec<Option<bool>>,
}

/// One channel's threshold in integer form over the doubled accumulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelThreshold {
    Constant(bool),
    /// bit = `acc2 > t`
    Above(i32),
    /// bit = `acc2 < t`
    Below(i32),
}

impl ChannelThreshold {
    #[inline(always)]
    pub fn bit(self, acc2: i32) -> bool {
        match self {
            ChannelThreshold::Constant(b) => b,
            ChannelThreshold::Above(t) => acc2 > t,
            ChannelThreshold::Below(t) => acc2 < t,
        }
    }
}

impl ThresholdSet {
    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }

    pub fn is_consistent(&self) -> bool {
        self.flip.len() == self.tau.len() && self.constant.len() == self.tau.len()
    }

    /// Integer comparison equivalent to the real-valued threshold of
    /// channel `c`, for doubled accumulators `acc2 = 2·acc`.
    pub fn channel(&self, c: usize) -> ChannelThreshold {
        if let Some(b) = self.constant[c] {
            return ChannelThreshold::Constant(b);
        }
        let t2 = 2.0 * self.tau[c] as f64;
        if self.flip[c] {
            ChannelThreshold::Below(t2.ceil() as i32)
        } else {
            ChannelThreshold::Above(t2.floor() as i32)
        }
    }

    pub fn compile(&self) -> Vec<ChannelThreshold> {
        (0..self.len()).map(|c| self.channel(c)).collect()
    }

    /// Output bit of channel `c` for doubled accumulator `acc2`.
    pub fn bit(&self, c: usize, acc2: i32) -> bool {
        self.channel(c).bit(acc2)
    }

    /// Derives thresholds by scanning every achievable accumulator value.
    ///
    /// For each channel the float transform `multiplier·act(n − 2·acc) + bias`
    /// is evaluated exactly as the unfused kernel would, then binarized. The
    /// resulting bit sequence must change at most once; its switch point
    /// becomes `tau` and its direction `flip`.
    pub fn compute(
        n: usize,
        multiplier: &[f32],
        bias: &[f32],
        activation: Activation,
        domain: AccumulatorDomain,
    ) -> Result<ThresholdSet, ThresholdError> {
        assert_eq!(multiplier.len(), bias.len());
        let mut set = ThresholdSet::default();
        for (c, (&m, &b)) in multiplier.iter().zip(bias).enumerate() {
            let mut first: Option<bool> = None;
            let mut switch_at: Option<i32> = None;
            let mut last_before_switch = 0i32;
            for acc2 in domain.doubled_values(n) {
                let dot = n as i32 - acc2;
                let bit = sign_bit(fused_transform(dot as f32, m, b, activation));
                match (first, switch_at) {
                    (None, _) => {
                        first = Some(bit);
                        last_before_switch = acc2;
                    }
                    (Some(f), None) if bit == f => last_before_switch = acc2,
                    (Some(_), None) => switch_at = Some(acc2),
                    (Some(f), Some(_)) if bit == f => return Err(ThresholdError::NonMonotone { channel: c }),
                    _ => {}
                }
            }
            let first = first.unwrap_or(false);
            match switch_at {
                None => {
                    set.tau.push(0.0);
                    set.flip.push(false);
                    set.constant.push(Some(first));
                }
                // bits go 0 → 1: set once acc exceeds the last 0-valued acc
                Some(_) if !first => {
                    set.tau.push(last_before_switch as f32 / 2.0);
                    set.flip.push(false);
                    set.constant.push(None);
                }
                // bits go 1 → 0: set while acc is below the first 0-valued acc
                Some(s) => {
                    set.tau.push(s as f32 / 2.0);
                    set.flip.push(true);
                    set.constant.push(None);
                }
            }
        }
        Ok(set)
    }
}
