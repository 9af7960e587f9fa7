//! Small dense PCA via power iteration with deflation, used to project
//! feature grids down to a few display channels.

use alloc::vec::Vec;

/// Principal components of `samples` (n rows x dim columns), mean-centered.
///
/// Returns `(mean, components)` where `components` holds `k` unit vectors
/// of length `dim`, ordered by decreasing variance. Power iteration runs
/// for at most `iters` rounds or until the direction moves less than
/// `tol`; each recovered component is deflated out of the working matrix.
/// The sign convention makes the largest-magnitude loading positive.
pub fn principal_components(
    samples: &[f32],
    dim: usize,
    k: usize,
    iters: usize,
    tol: f64,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    assert!(dim > 0 && samples.len() % dim == 0);
    let n = samples.len() / dim;
    let k = k.min(dim);

    let mut mean = alloc::vec![0.0f64; dim];
    for row in samples.chunks_exact(dim) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= n.max(1) as f64;
    }

    // Centered covariance, dim x dim (population normalization).
    let mut cov = alloc::vec![0.0f64; dim * dim];
    for row in samples.chunks_exact(dim) {
        for i in 0..dim {
            let di = row[i] as f64 - mean[i];
            for j in i..dim {
                cov[i * dim + j] += di * (row[j] as f64 - mean[j]);
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            let v = cov[i * dim + j] / n.max(1) as f64;
            cov[i * dim + j] = v;
            cov[j * dim + i] = v;
        }
    }

    let mut components = Vec::with_capacity(k);
    for comp_idx in 0..k {
        let mut v = power_iterate(&cov, dim, comp_idx, iters, tol);
        fix_sign(&mut v);
        // Deflate: cov -= lambda v v^T.
        let lambda = rayleigh(&cov, &v, dim);
        for i in 0..dim {
            for j in 0..dim {
                cov[i * dim + j] -= lambda * v[i] * v[j];
            }
        }
        components.push(v);
    }
    (mean, components)
}

fn power_iterate(cov: &[f64], dim: usize, start: usize, iters: usize, tol: f64) -> Vec<f64> {
    // Deterministic start: basis vector e_{start}, falling back to the
    // next basis vectors if the matrix annihilates the current one.
    for offset in 0..dim {
        let mut v = alloc::vec![0.0f64; dim];
        v[(start + offset) % dim] = 1.0;
        let mut converged_vec: Option<Vec<f64>> = None;
        for _ in 0..iters {
            let mut next = mat_vec(cov, &v, dim);
            let norm = norm2(&next);
            if norm < 1e-300 {
                break; // try the next basis start
            }
            for x in &mut next {
                *x /= norm;
            }
            let delta: f64 = next
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            let moved = libm::sqrt(delta);
            v = next;
            if moved < tol {
                converged_vec = Some(v.clone());
                break;
            }
            converged_vec = Some(v.clone());
        }
        if let Some(v) = converged_vec {
            return v;
        }
    }
    // Fully degenerate (zero covariance): return e_{start}.
    let mut v = alloc::vec![0.0f64; dim];
    v[start % dim] = 1.0;
    v
}

fn mat_vec(m: &[f64], v: &[f64], dim: usize) -> Vec<f64> {
    let mut out = alloc::vec![0.0f64; dim];
    for i in 0..dim {
        let row = &m[i * dim..(i + 1) * dim];
        out[i] = row.iter().zip(v).map(|(a, b)| a * b).sum();
    }
    out
}

fn norm2(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum::<f64>())
}

fn rayleigh(cov: &[f64], v: &[f64], dim: usize) -> f64 {
    let mv = mat_vec(cov, v, dim);
    mv.iter().zip(v).map(|(a, b)| a * b).sum()
}

fn fix_sign(v: &mut [f64]) {
    let mut max_idx = 0;
    let mut max_abs = 0.0f64;
    for (i, &x) in v.iter().enumerate() {
        let a = libm::fabs(x);
        if a > max_abs {
            max_abs = a;
            max_idx = i;
        }
    }
    if v[max_idx] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// Project each sample onto the components: output is n x k row-major.
pub fn project(samples: &[f32], dim: usize, mean: &[f64], components: &[Vec<f64>]) -> Vec<f64> {
    let n = samples.len() / dim;
    let k = components.len();
    let mut out = alloc::vec![0.0f64; n * k];
    for (row_idx, row) in samples.chunks_exact(dim).enumerate() {
        for (ci, comp) in components.iter().enumerate() {
            let mut dot = 0.0f64;
            for i in 0..dim {
                dot += (row[i] as f64 - mean[i]) * comp[i];
            }
            out[row_idx * k + ci] = dot;
        }
    }
    out
}

/// Min-max scale a column of projections to 0..=255; constant columns map
/// to mid-gray 128.
pub fn scale_to_u8(column: &[f64]) -> Vec<u8> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in column {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    column
        .iter()
        .map(|&v| {
            if !(span > 0.0) {
                128u8
            } else {
                libm::round(((v - lo) / span) * 255.0) as u8
            }
        })
        .collect()
}
