//! Execution mode switch for the data-parallel loops.
//!
//! With the `parallel` feature (default) [`Exec::Parallel`] fans work out on
//! the rayon global pool. Without it every loop runs sequentially and
//! `Exec::Parallel` is accepted but behaves like `Exec::Sequential`.
//! Results are identical in both modes: each output slot is computed
//! independently and reductions happen in index order afterwards.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// True when this mode will actually use more than one thread.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// `(0..len).map(f).collect()`, possibly in parallel. Output order is index order.
pub fn map_indices<T, F>(exec: Exec, len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return (0..len).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..len).map(f).collect()
}

/// Fills `out[i] = f(i)` chunk by chunk, possibly in parallel.
pub fn fill_chunks<T, F>(exec: Exec, out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(c, slice)| f(c * chunk, slice));
        return;
    }
    let _ = exec;
    out.chunks_mut(chunk)
        .enumerate()
        .for_each(|(c, slice)| f(c * chunk, slice));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let a = map_indices(Exec::Sequential, 1000, |i| i * i);
        let b = map_indices(Exec::Parallel, 1000, |i| i * i);
        assert_eq!(a, b);

        let mut x = vec![0usize; 1001];
        let mut y = vec![0usize; 1001];
        fill_chunks(Exec::Sequential, &mut x, 64, |start, s| {
            for (o, v) in s.iter_mut().enumerate() {
                *v = start + o;
            }
        });
        fill_chunks(Exec::Parallel, &mut y, 64, |start, s| {
            for (o, v) in s.iter_mut().enumerate() {
                *v = start + o;
            }
        });
        assert_eq!(x, y);
        assert_eq!(x[1000], 1000);
    }
}
