//! Order-preserving fan-out over scoped threads.

/// Applies `f` to every item using up to `threads` workers over contiguous
/// chunks. Results come back in input order, so the output does not depend
/// on scheduling.
pub fn map_ordered<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                s.spawn(move || part.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Default worker count: `CONFAE_THREADS` if set and valid, else 1.
pub fn default_threads() -> usize {
    std::env::var("CONFAE_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order() {
        let xs: Vec<u64> = (0..37).collect();
        let one = map_ordered(&xs, 1, |x| x * x);
        let four = map_ordered(&xs, 4, |x| x * x);
        assert_eq!(one, four);
        assert!(map_ordered::<u64, u64, _>(&[], 3, |x| *x).is_empty());
    }
}
