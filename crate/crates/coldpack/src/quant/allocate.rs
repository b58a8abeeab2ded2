//! Greedy per-channel bit-width allocation and its exhaustive oracle.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use super::{relative_error, ChannelStats, QuantError};

/// Channel count cap for the dynamic-programming oracle.
pub const EXHAUSTIVE_CHANNEL_LIMIT: usize = 64;

/// Per-channel bit-widths plus budget bookkeeping for one tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitAllocation {
    pub bits: Vec<u8>,
    pub budget_total: usize,
    pub bits_used: usize,
}

/// Heap entry: pops highest gain first, lowest channel index on ties.
struct GainKey {
    gain: f64,
    index: usize,
}

impl PartialEq for GainKey {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for GainKey {}
impl PartialOrd for GainKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for GainKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.gain
            .total_cmp(&other.gain)
            .then_with(|| other.index.cmp(&self.index))
    }
}

fn gain(stats: &ChannelStats, bits: u8) -> f64 {
    relative_error(stats, bits) - relative_error(stats, bits + 1)
}

/// Greedy allocation: start every channel at 1 bit, then repeatedly grant
/// one bit to the channel whose relative error drops the most, until the
/// budget is spent. Gains shrink by a factor of four per granted bit, so
/// the greedy choice is optimal; [`allocate_bits_exhaustive`] cross-checks.
pub fn allocate_bits(stats: &[ChannelStats], budget: usize) -> Result<BitAllocation, QuantError> {
    let channels = stats.len();
    if budget < channels || channels == 0 {
        return Err(QuantError::InfeasibleBudget { budget, channels });
    }
    let target = budget.min(8 * channels);

    let mut bits = vec![1u8; channels];
    let mut used = channels;
    let mut heap: BinaryHeap<GainKey> = (0..channels)
        .map(|i| GainKey {
            gain: gain(&stats[i], 1),
            index: i,
        })
        .collect();

    while used < target {
        let top = heap.pop().expect("heap exhausted below 8 bits per channel");
        let i = top.index;
        bits[i] += 1;
        used += 1;
        if bits[i] < 8 {
            heap.push(GainKey {
                gain: gain(&stats[i], bits[i]),
                index: i,
            });
        }
    }

    Ok(BitAllocation {
        bits,
        budget_total: budget,
        bits_used: used,
    })
}

/// Total relative error of an allocation, summed in channel order.
pub fn total_relative_error(stats: &[ChannelStats], bits: &[u8]) -> f64 {
    stats
        .iter()
        .zip(bits)
        .map(|(s, &b)| relative_error(s, b))
        .sum()
}

/// Exact minimizer of the total relative error under the bit budget, via
/// dynamic programming over (channel, bits used). Test oracle for
/// [`allocate_bits`]; limited to small instances.
pub fn allocate_bits_exhaustive(
    stats: &[ChannelStats],
    budget: usize,
) -> Result<BitAllocation, QuantError> {
    let channels = stats.len();
    if channels > EXHAUSTIVE_CHANNEL_LIMIT {
        return Err(QuantError::InstanceTooLarge {
            channels,
            limit: EXHAUSTIVE_CHANNEL_LIMIT,
        });
    }
    if budget < channels || channels == 0 {
        return Err(QuantError::InfeasibleBudget { budget, channels });
    }
    let cap = budget.min(8 * channels);

    const INF: f64 = f64::INFINITY;
    // dp[i][t]: minimal total RE over the first i channels using exactly t bits
    let mut dp = vec![vec![INF; cap + 1]; channels + 1];
    let mut choice = vec![vec![0u8; cap + 1]; channels + 1];
    dp[0][0] = 0.0;
    for i in 0..channels {
        for t in 0..=cap {
            if dp[i][t] == INF {
                continue;
            }
            for b in 1..=8u8 {
                let nt = t + b as usize;
                if nt > cap {
                    break;
                }
                let cost = dp[i][t] + relative_error(&stats[i], b);
                if cost < dp[i + 1][nt] {
                    dp[i + 1][nt] = cost;
                    choice[i + 1][nt] = b;
                }
            }
        }
    }

    // best total bit count within the budget
    let mut best_t = channels;
    for t in channels..=cap {
        if dp[channels][t] < dp[channels][best_t] {
            best_t = t;
        }
    }

    let mut bits = vec![0u8; channels];
    let mut t = best_t;
    for i in (0..channels).rev() {
        let b = choice[i + 1][t];
        bits[i] = b;
        t -= b as usize;
    }

    Ok(BitAllocation {
        bits,
        budget_total: budget,
        bits_used: best_t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stats_from_k(k: f64) -> ChannelStats {
        // mean_sq 1 makes K = max_abs^2
        ChannelStats {
            max_abs: k.sqrt(),
            mean_sq: 1.0,
            mean_abs: 0.5,
            dim: 16,
        }
    }

    #[test]
    fn identical_channels_split_evenly() {
        let stats = vec![stats_from_k(2.0); 2];
        let alloc = allocate_bits(&stats, 8).unwrap();
        assert_eq!(alloc.bits, vec![4, 4]);
        assert_eq!(alloc.bits_used, 8);
    }

    #[test]
    fn k_ratio_fixture() {
        // K = [4, 1], budget 6: gains favor channel 0 twice, then ties
        // resolve by lower index, giving [4, 2]
        let stats = vec![stats_from_k(4.0), stats_from_k(1.0)];
        let alloc = allocate_bits(&stats, 6).unwrap();
        assert_eq!(alloc.bits, vec![4, 2]);
        let oracle = allocate_bits_exhaustive(&stats, 6).unwrap();
        assert_eq!(
            total_relative_error(&stats, &alloc.bits),
            total_relative_error(&stats, &oracle.bits)
        );
    }

    #[test]
    fn budget_edges() {
        let stats = vec![stats_from_k(3.0); 4];
        assert!(allocate_bits(&stats, 3).is_err()); // below 1 bit/channel
        let all_ones = allocate_bits(&stats, 4).unwrap();
        assert_eq!(all_ones.bits, vec![1; 4]);
        // budget above 8 bits per channel saturates
        let sat = allocate_bits(&stats, 64).unwrap();
        assert_eq!(sat.bits, vec![8; 4]);
        assert_eq!(sat.bits_used, 32);
    }

    #[test]
    fn exhaustive_single_channel_and_forced_minimum() {
        let stats = vec![stats_from_k(2.0)];
        assert_eq!(allocate_bits_exhaustive(&stats, 8).unwrap().bits, vec![8]);
        let stats = vec![stats_from_k(2.0); 3];
        assert_eq!(allocate_bits_exhaustive(&stats, 3).unwrap().bits, vec![1; 3]);
        let big = vec![stats_from_k(1.0); 65];
        assert!(allocate_bits_exhaustive(&big, 65).is_err());
    }

    #[test]
    fn greedy_matches_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let c = rng.gen_range(1..=6);
            let stats: Vec<ChannelStats> = (0..c)
                .map(|_| {
                    let max: f64 = rng.gen_range(0.1..4.0);
                    let mean_sq = rng.gen_range(0.01..1.0) * max * max;
                    ChannelStats {
                        max_abs: max,
                        mean_sq,
                        mean_abs: mean_sq.sqrt() * 0.8,
                        dim: 32,
                    }
                })
                .collect();
            let budget = rng.gen_range(c..=8 * c);
            let greedy = allocate_bits(&stats, budget).unwrap();
            let oracle = allocate_bits_exhaustive(&stats, budget).unwrap();
            assert_eq!(greedy.bits_used, budget.min(8 * c));
            assert_eq!(
                total_relative_error(&stats, &greedy.bits),
                total_relative_error(&stats, &oracle.bits),
                "greedy {:?} vs oracle {:?}",
                greedy.bits,
                oracle.bits
            );
        }
    }

    #[test]
    fn allocation_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        use rand_distr::StandardNormal;
        for _ in 0..30 {
            let c = rng.gen_range(2..8);
            let channels: Vec<Vec<f64>> = (0..c)
                .map(|_| {
                    let scale: f64 = rng.gen_range(0.1..3.0);
                    (0..64)
                        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
                        .collect()
                })
                .collect();
            let stats: Vec<ChannelStats> = channels
                .iter()
                .map(|ch| super::super::channel_stats(ch).unwrap())
                .collect();
            // power-of-two factor keeps the K ratios bit-exact
            let factor = 2.0f64.powi(rng.gen_range(-4..5));
            let scaled_stats: Vec<ChannelStats> = channels
                .iter()
                .map(|ch| {
                    let s: Vec<f64> = ch.iter().map(|&x| x * factor).collect();
                    super::super::channel_stats(&s).unwrap()
                })
                .collect();
            let budget = rng.gen_range(c..=8 * c);
            assert_eq!(
                allocate_bits(&stats, budget).unwrap().bits,
                allocate_bits(&scaled_stats, budget).unwrap().bits
            );
        }
    }
}
