//! Chunked parallel map with results merged in chunk order.

use std::ops::Range;

use crate::error::{Error, Result};

/// Applies `f` to consecutive ranges of `0..n` of length `chunk` on up to
/// `threads` scoped threads and returns the results in range order.
pub fn map_chunks<T, F>(n: usize, chunk: usize, threads: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(Range<usize>) -> Result<T> + Sync,
{
    let chunk = chunk.max(1);
    let ranges: Vec<Range<usize>> = (0..n).step_by(chunk).map(|s| s..(s + chunk).min(n)).collect();
    if threads <= 1 || ranges.len() <= 1 {
        return ranges.into_iter().map(&f).collect();
    }
    let workers = threads.min(ranges.len());
    let per = ranges.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = ranges
            .chunks(per)
            .map(|group| {
                let f = &f;
                scope.spawn(move || group.iter().cloned().map(f).collect::<Result<Vec<T>>>())
            })
            .collect();
        let mut out = Vec::with_capacity(ranges.len());
        for h in handles {
            out.extend(h.join().map_err(|_| Error::Numerical("worker thread panicked".into()))??);
        }
        Ok(out)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_matches_serial() {
        let serial = map_chunks(23, 4, 1, |r| Ok(r.sum::<usize>())).unwrap();
        for threads in [2, 3, 8] {
            assert_eq!(map_chunks(23, 4, threads, |r| Ok(r.sum::<usize>())).unwrap(), serial);
        }
        assert_eq!(serial.len(), 6);
        assert!(map_chunks(0, 4, 2, |r| Ok(r.len())).unwrap().is_empty());
    }

    #[test]
    fn errors_propagate() {
        let r = map_chunks(10, 2, 3, |r| if r.start == 4 { Err(Error::Numerical("x".into())) } else { Ok(()) });
        assert!(r.is_err());
    }
}
