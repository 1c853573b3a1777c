/// Index of the largest element; ties go to the lowest index.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn sum(values: &[f64]) -> f64 {
    values.iter().sum()
}

/// Contiguous user range of shard `s` when `n` users are split into `shards` pieces.
pub(crate) fn shard_range(n: usize, shards: usize, s: usize) -> std::ops::Range<usize> {
    (s * n / shards)..((s + 1) * n / shards)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
        assert_eq!(argmax(&[0.3]), 0);
    }

    #[test]
    fn shards_cover_every_user_once() {
        for n in [0, 1, 7, 64, 100] {
            for shards in [1, 3, 64] {
                let total: usize = (0..shards).map(|s| shard_range(n, shards, s).len()).sum();
                assert_eq!(total, n);
                assert_eq!(shard_range(n, shards, shards - 1).end, n);
            }
        }
    }
}
