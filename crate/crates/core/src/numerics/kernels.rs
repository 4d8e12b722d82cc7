use super::Real;
use rayon::prelude::*;

const LANES: usize = 8;
const ROW_BLOCK: usize = 16;

/// Dot product with eight independent accumulators so the loop vectorises.
#[inline]
pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = F::zero();
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    for v in acc {
        s += v;
    }
    s
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy<F: Real>(alpha: F, x: &[F], y: &mut [F]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// `(r×k)·(k×c)`
pub fn matmul_nn<F: Real>(a: &[F], b: &[F], r: usize, k: usize, c: usize) -> Vec<F> {
    let mut out = vec![F::zero(); r * c];
    if c == 0 {
        return out;
    }
    out.par_chunks_mut(c).enumerate().for_each(|(i, row)| {
        let ai = &a[i * k..(i + 1) * k];
        for (p, &w) in ai.iter().enumerate() {
            if w != F::zero() {
                axpy(w, &b[p * c..(p + 1) * c], row);
            }
        }
    });
    out
}

/// `(r×k)·(c×k)ᵀ`
pub fn matmul_nt<F: Real>(a: &[F], b: &[F], r: usize, k: usize, c: usize) -> Vec<F> {
    let mut out = vec![F::zero(); r * c];
    if c == 0 {
        return out;
    }
    out.par_chunks_mut(c).enumerate().for_each(|(i, row)| {
        let ai = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(ai, &b[j * k..(j + 1) * k]);
        }
    });
    out
}

/// `(k×r)ᵀ·(k×c)`
pub fn matmul_tn<F: Real>(a: &[F], b: &[F], k: usize, r: usize, c: usize) -> Vec<F> {
    let mut out = vec![F::zero(); r * c];
    if c == 0 {
        return out;
    }
    out.par_chunks_mut(ROW_BLOCK * c)
        .enumerate()
        .for_each(|(blk, chunk)| {
            let i0 = blk * ROW_BLOCK;
            let rows = chunk.len() / c;
            for p in 0..k {
                let bp = &b[p * c..(p + 1) * c];
                let ap = &a[p * r..(p + 1) * r];
                for ii in 0..rows {
                    let w = ap[i0 + ii];
                    if w != F::zero() {
                        axpy(w, bp, &mut chunk[ii * c..(ii + 1) * c]);
                    }
                }
            }
        });
    out
}
