//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper returns results in index order, so outputs never depend on
//! scheduling or on the number of worker threads.

/// Execution strategy for batch-level loops.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    #[cfg(feature = "parallel")]
    Rayon,
}

impl Default for Parallelism {
    /// Rayon when the `parallel` feature is on.
    fn default() -> Self {
        #[cfg(feature = "parallel")]
        return Parallelism::Rayon;
        #[cfg(not(feature = "parallel"))]
        Parallelism::Sequential
    }
}

impl Parallelism {
    /// Maps `f` over `0..n`, returning results in index order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            Parallelism::Sequential => (0..n).map(f).collect(),
            #[cfg(feature = "parallel")]
            Parallelism::Rayon => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
        }
    }

    /// Calls `f(i, chunk)` for each `chunk_len`-sized chunk of `out`.
    pub fn for_chunks<F>(self, out: &mut [f32], chunk_len: usize, f: F)
    where
        F: Fn(usize, &mut [f32]) + Sync + Send,
    {
        if chunk_len == 0 {
            return;
        }
        match self {
            Parallelism::Sequential => {
                for (i, c) in out.chunks_mut(chunk_len).enumerate() {
                    f(i, c);
                }
            }
            #[cfg(feature = "parallel")]
            Parallelism::Rayon => {
                use rayon::prelude::*;
                out.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let out = Parallelism::default().map(100, |i| i * 2);
        assert_eq!(out, (0..100).map(|i| i * 2).collect::<Vec<_>>());
    }

    #[test]
    fn chunks_see_their_index() {
        let mut buf = vec![0.0f32; 12];
        Parallelism::default().for_chunks(&mut buf, 4, |i, c| c.fill(i as f32));
        assert_eq!(&buf[8..], &[2.0; 4]);
        let mut seq = vec![0.0f32; 12];
        Parallelism::Sequential.for_chunks(&mut seq, 4, |i, c| c.fill(i as f32));
        assert_eq!(buf, seq);
    }
}
