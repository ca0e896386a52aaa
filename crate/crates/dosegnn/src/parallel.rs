//! Deterministic data parallelism.
//!
//! Work is split into chunks of a fixed size that does not depend on the
//! worker count, each chunk writes a disjoint output slice, and no reduction
//! crosses a chunk boundary. Results are therefore byte-identical for any
//! `--threads` setting; only wall time changes.

use rayon::prelude::*;

/// Row count per parallel chunk for matrix work.
pub const ROW_CHUNK: usize = 2048;

/// Element count per parallel chunk for flat element-wise work.
pub const ELEM_CHUNK: usize = 1 << 16;

/// Applies `f(chunk_start, chunk)` over fixed-size chunks of `out` in
/// parallel. `chunk_start` is the offset of the chunk in `out`.
pub fn for_chunks_mut<T, F>(out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    debug_assert!(chunk > 0);
    out.par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, slice)| f(i * chunk, slice));
}

/// Element-wise map into a new vector, chunk-parallel for large inputs.
pub fn map_elems<F>(input: &[f64], f: F) -> Vec<f64>
where
    F: Fn(f64) -> f64 + Sync,
{
    let mut out = vec![0.0; input.len()];
    if input.len() < ELEM_CHUNK {
        for (o, &x) in out.iter_mut().zip(input) {
            *o = f(x);
        }
    } else {
        for_chunks_mut(&mut out, ELEM_CHUNK, |start, slice| {
            let n = slice.len();
            for (o, &x) in slice.iter_mut().zip(&input[start..start + n]) {
                *o = f(x);
            }
        });
    }
    out
}

/// Binary element-wise map into a new vector.
pub fn zip_elems<F>(a: &[f64], b: &[f64], f: F) -> Vec<f64>
where
    F: Fn(f64, f64) -> f64 + Sync,
{
    debug_assert_eq!(a.len(), b.len());
    let mut out = vec![0.0; a.len()];
    if a.len() < ELEM_CHUNK {
        for i in 0..a.len() {
            out[i] = f(a[i], b[i]);
        }
    } else {
        for_chunks_mut(&mut out, ELEM_CHUNK, |start, slice| {
            for (i, o) in slice.iter_mut().enumerate() {
                *o = f(a[start + i], b[start + i]);
            }
        });
    }
    out
}
