//! Deterministic fan-out helper: results come back in input order and any
//! reduction over them happens sequentially, so outputs are bit-identical
//! to a single-threaded run regardless of the worker count.

/// Maps `f` over `items` using up to `threads` workers, preserving order.
pub fn parallel_map<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(|item| f(item)).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    let chunks: Vec<Vec<R>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(|item| f(item)).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    chunks.into_iter().flatten().collect()
}

/// Maps `f` over chunks of an index range, preserving order. `f` receives
/// the start index and length of its chunk.
pub fn parallel_map_ranges<R, F>(total: usize, threads: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize, usize) -> R + Sync,
{
    let threads = threads.max(1).min(total.max(1));
    let chunk = total.div_ceil(threads);
    let ranges: Vec<(usize, usize)> = (0..total)
        .step_by(chunk.max(1))
        .map(|start| (start, chunk.min(total - start)))
        .collect();
    parallel_map(&ranges, threads, |&(start, len)| f(start, len))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved_across_thread_counts() {
        let items: Vec<u64> = (0..1000).collect();
        let one = parallel_map(&items, 1, |&x| x * x);
        let four = parallel_map(&items, 4, |&x| x * x);
        assert_eq!(one, four);
        assert_eq!(one[7], 49);
    }

    #[test]
    fn ranges_cover_everything_once() {
        let chunks = parallel_map_ranges(103, 4, |start, len| (start, len));
        let total: usize = chunks.iter().map(|&(_, len)| len).sum();
        assert_eq!(total, 103);
        let mut next = 0;
        for (start, len) in chunks {
            assert_eq!(start, next);
            next = start + len;
        }
    }
}
