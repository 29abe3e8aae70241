//! T5 relative-position bucketing.

/// Bucket for `relative_position = key_pos - query_pos`.
///
/// Small distances get their own bucket, larger ones share logarithmically
/// sized buckets up to `max_distance`, beyond which everything lands in the
/// last bucket. Bidirectional bucketing spends half the buckets on keys
/// after the query; unidirectional bucketing maps all future keys to 0.
pub fn relative_position_bucket(
    relative_position: i64,
    bidirectional: bool,
    num_buckets: usize,
    max_distance: usize,
) -> usize {
    let mut buckets = num_buckets;
    let mut base = 0;
    let n: u64 = if bidirectional {
        buckets /= 2;
        if relative_position > 0 {
            base = buckets;
        }
        relative_position.unsigned_abs()
    } else {
        (-relative_position).max(0) as u64
    };
    let max_exact = buckets / 2;
    if max_exact == 0 {
        return base;
    }
    let n = n as usize;
    if n < max_exact {
        return base + n;
    }
    if max_distance <= max_exact {
        return base + buckets - 1;
    }
    let ratio = (n as f64 / max_exact as f64).ln() / (max_distance as f64 / max_exact as f64).ln();
    let large = max_exact + (ratio * (buckets - max_exact) as f64) as usize;
    base + large.min(buckets - 1)
}

/// Bucket ids for every `(query, key)` pair, row-major `[q_len, k_len]`,
/// with queries starting at absolute position `q_offset`.
pub fn bucket_grid(
    q_len: usize,
    k_len: usize,
    q_offset: usize,
    bidirectional: bool,
    num_buckets: usize,
    max_distance: usize,
) -> Vec<usize> {
    let mut out = Vec::with_capacity(q_len * k_len);
    for q in 0..q_len {
        for k in 0..k_len {
            let rel = k as i64 - (q + q_offset) as i64;
            out.push(relative_position_bucket(rel, bidirectional, num_buckets, max_distance));
        }
    }
    out
}
