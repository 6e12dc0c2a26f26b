//! Small fixed-size vector and symmetric-tensor algebra.
//!
//! Points live in `[f64; 3]`; 2D meshes keep the third component at zero and
//! 2D tensors pad the out-of-plane block with the identity so that the same
//! code paths serve both dimensions.

pub type Point = [f64; 3];

pub fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Point, s: f64) -> Point {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm(a: Point) -> f64 {
    dot(a, a).sqrt()
}

pub fn dist(a: Point, b: Point) -> f64 {
    norm(sub(a, b))
}

pub fn normalize(a: Point) -> Point {
    let n = norm(a);
    if n == 0.0 {
        a
    } else {
        scale(a, 1.0 / n)
    }
}

pub fn cross(a: Point, b: Point) -> Point {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Symmetric 3x3 tensor stored as [xx, yy, zz, xy, xz, yz].
///
/// Conduction tensors (mm^2/ms^2) and their inverse metrics both use this
/// representation. 2D tensors are constructed with zz = 1, xz = yz = 0 so
/// that inversion and quadratic forms restricted to in-plane vectors are
/// unaffected by the padding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymTensor {
    pub c: [f64; 6],
}

impl SymTensor {
    pub fn identity() -> Self {
        Self {
            c: [1.0, 1.0, 1.0, 0.0, 0.0, 0.0],
        }
    }

    pub fn isotropic(dim: usize, v: f64) -> Self {
        let zz = if dim == 2 { 1.0 } else { v };
        Self {
            c: [v, v, zz, 0.0, 0.0, 0.0],
        }
    }

    /// 2D tensor from its in-plane components; out-of-plane block padded with 1.
    pub fn from_2d(xx: f64, yy: f64, xy: f64) -> Self {
        Self {
            c: [xx, yy, 1.0, xy, 0.0, 0.0],
        }
    }

    /// Rank-one update a * (v ⊗ v) added to self.
    pub fn add_outer(&mut self, v: Point, a: f64) {
        self.c[0] += a * v[0] * v[0];
        self.c[1] += a * v[1] * v[1];
        self.c[2] += a * v[2] * v[2];
        self.c[3] += a * v[0] * v[1];
        self.c[4] += a * v[0] * v[2];
        self.c[5] += a * v[1] * v[2];
    }

    pub fn zero_2d() -> Self {
        Self::from_2d(0.0, 0.0, 0.0)
    }

    pub fn zero_3d() -> Self {
        Self {
            c: [0.0; 6],
        }
    }

    pub fn matvec(&self, v: Point) -> Point {
        let [xx, yy, zz, xy, xz, yz] = self.c;
        [
            xx * v[0] + xy * v[1] + xz * v[2],
            xy * v[0] + yy * v[1] + yz * v[2],
            xz * v[0] + yz * v[1] + zz * v[2],
        ]
    }

    /// Quadratic form v^T S v.
    pub fn quad(&self, v: Point) -> f64 {
        dot(self.matvec(v), v)
    }

    /// Metric norm sqrt(v^T S v); clamps tiny negative round-off to zero.
    pub fn metric_norm(&self, v: Point) -> f64 {
        self.quad(v).max(0.0).sqrt()
    }

    pub fn det(&self) -> f64 {
        let [xx, yy, zz, xy, xz, yz] = self.c;
        xx * (yy * zz - yz * yz) - xy * (xy * zz - yz * xz) + xz * (xy * yz - yy * xz)
    }

    pub fn inverse(&self) -> Option<SymTensor> {
        let d = self.det();
        if d.abs() < 1e-300 {
            return None;
        }
        let [xx, yy, zz, xy, xz, yz] = self.c;
        let inv = SymTensor {
            c: [
                (yy * zz - yz * yz) / d,
                (xx * zz - xz * xz) / d,
                (xx * yy - xy * xy) / d,
                -(xy * zz - yz * xz) / d,
                (xy * yz - yy * xz) / d,
                -(xx * yz - xy * xz) / d,
            ],
        };
        Some(inv)
    }

    pub fn scaled(&self, s: f64) -> SymTensor {
        let mut c = self.c;
        for v in &mut c {
            *v *= s;
        }
        SymTensor { c }
    }

    /// Cholesky test for positive definiteness.
    pub fn is_spd(&self) -> bool {
        let [xx, yy, zz, xy, xz, yz] = self.c;
        if xx <= 0.0 {
            return false;
        }
        let l00 = xx.sqrt();
        let l10 = xy / l00;
        let l20 = xz / l00;
        let d1 = yy - l10 * l10;
        if d1 <= 0.0 {
            return false;
        }
        let l11 = d1.sqrt();
        let l21 = (yz - l20 * l10) / l11;
        zz - l20 * l20 - l21 * l21 > 0.0
    }

    /// Eigenvalues of the in-plane 2x2 block.
    pub fn eigenvalues_2d(&self) -> (f64, f64) {
        let [xx, yy, _, xy, _, _] = self.c;
        let tr = xx + yy;
        let det = xx * yy - xy * xy;
        let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
        (tr / 2.0 - disc, tr / 2.0 + disc)
    }
}

/// Solves the 2x2 system [[a, b], [b, c]] x = r.
pub fn solve_sym2(a: f64, b: f64, c: f64, r: [f64; 2]) -> Option<[f64; 2]> {
    let det = a * c - b * b;
    if det.abs() < 1e-300 {
        return None;
    }
    Some([(c * r[0] - b * r[1]) / det, (a * r[1] - b * r[0]) / det])
}

/// Gaussian elimination with partial pivoting for small dense systems.
pub fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut s = b[row];
        for k in row + 1..n {
            s -= a[row][k] * x[k];
        }
        x[row] = s / a[row][row];
    }
    Some(x)
}
