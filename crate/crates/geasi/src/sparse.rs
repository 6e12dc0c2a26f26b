//! Compressed sparse row matrices and a Jacobi-preconditioned conjugate
//! gradient solver, used for the P1 mass matrix and the finite-difference
//! lead-field systems.

use crate::error::{GeasiError, Result};
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

/// Coordinate-format accumulator; duplicate entries are summed.
#[derive(Debug, Default)]
pub struct CooBuilder {
    n: usize,
    entries: BTreeMap<(usize, usize), f64>,
}

impl CooBuilder {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            entries: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        *self.entries.entry((i, j)).or_insert(0.0) += v;
    }

    pub fn build(self) -> CsrMatrix {
        let mut row_ptr = vec![0usize; self.n + 1];
        for (&(i, _), _) in &self.entries {
            row_ptr[i + 1] += 1;
        }
        for i in 0..self.n {
            row_ptr[i + 1] += row_ptr[i];
        }
        let nnz = self.entries.len();
        let mut col_idx = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        for ((_, j), v) in self.entries {
            col_idx.push(j);
            values.push(v);
        }
        CsrMatrix {
            n: self.n,
            row_ptr,
            col_idx,
            values,
        }
    }
}

impl CsrMatrix {
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.n {
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.values[k] * x[self.col_idx[k]];
            }
            y[i] = s;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                if self.col_idx[k] == i {
                    d[i] = self.values[k];
                }
            }
        }
        d
    }

    /// Relative residual ||Ax - b|| / ||b||.
    pub fn relative_residual(&self, x: &[f64], b: &[f64]) -> f64 {
        let mut ax = vec![0.0; self.n];
        self.matvec(x, &mut ax);
        let mut rr = 0.0;
        let mut bb = 0.0;
        for i in 0..self.n {
            rr += (ax[i] - b[i]).powi(2);
            bb += b[i].powi(2);
        }
        if bb == 0.0 {
            rr.sqrt()
        } else {
            (rr / bb).sqrt()
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn demean(x: &mut [f64]) {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    for v in x {
        *v -= m;
    }
}

/// Jacobi-preconditioned CG for SPD systems.
///
/// With `zero_mean` the iterates are kept mean-free, which handles the
/// singular pure-Neumann systems (consistent right-hand side required).
pub fn solve_cg(
    a: &CsrMatrix,
    b: &[f64],
    tol: f64,
    max_iter: usize,
    zero_mean: bool,
) -> Result<Vec<f64>> {
    let n = a.n;
    let mut b = b.to_vec();
    if zero_mean {
        demean(&mut b);
    }
    let diag = a.diagonal();
    let inv_diag: Vec<f64> = diag
        .iter()
        .map(|&d| if d.abs() > 1e-300 { 1.0 / d } else { 1.0 })
        .collect();

    let mut x = vec![0.0; n];
    let mut r = b.clone();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(ri, di)| ri * di).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let norm_b = dot(&b, &b).sqrt().max(1e-300);
    let mut ap = vec![0.0; n];

    for _ in 0..max_iter {
        if dot(&r, &r).sqrt() / norm_b < tol {
            if zero_mean {
                demean(&mut x);
            }
            return Ok(x);
        }
        a.matvec(&p, &mut ap);
        if zero_mean {
            demean(&mut ap);
        }
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(GeasiError::Solver(
                "CG encountered a non-positive curvature direction (matrix not SPD?)".into(),
            ));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(GeasiError::NonConvergence(format!(
        "CG did not reach tolerance {tol} in {max_iter} iterations"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cg_solves_small_spd_system() {
        // 1D Laplacian with Dirichlet-like diagonal shift
        let n = 20;
        let mut coo = CooBuilder::new(n);
        for i in 0..n {
            coo.add(i, i, 2.5);
            if i + 1 < n {
                coo.add(i, i + 1, -1.0);
                coo.add(i + 1, i, -1.0);
            }
        }
        let a = coo.build();
        let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let x = solve_cg(&a, &b, 1e-12, 1000, false).unwrap();
        assert!(a.relative_residual(&x, &b) < 1e-10);
    }

    #[test]
    fn cg_zero_mean_handles_singular_neumann() {
        // 1D pure-Neumann Laplacian; consistent zero-sum rhs
        let n = 15;
        let mut coo = CooBuilder::new(n);
        for i in 0..n.saturating_sub(1) {
            coo.add(i, i, 1.0);
            coo.add(i + 1, i + 1, 1.0);
            coo.add(i, i + 1, -1.0);
            coo.add(i + 1, i, -1.0);
        }
        let a = coo.build();
        let mut b = vec![0.0; n];
        b[0] = 1.0;
        b[n - 1] = -1.0;
        let x = solve_cg(&a, &b, 1e-12, 1000, true).unwrap();
        assert!(a.relative_residual(&x, &b) < 1e-8);
        let mean: f64 = x.iter().sum::<f64>() / n as f64;
        assert!(mean.abs() < 1e-12);
    }
}
