//! Uniform-grid spatial index over a mesh: point location with barycentric
//! coordinates, nearest-node queries and exact projection onto the domain
//! boundary.

use super::{project_point_to_face, SimplicialMesh};
use crate::linalg::{dist, Point};

pub struct MeshSearch<'m> {
    pub mesh: &'m SimplicialMesh,
    origin: Point,
    spacing: f64,
    dims: [usize; 3],
    cell_bins: Vec<Vec<usize>>,
    face_bins: Vec<Vec<usize>>,
    node_bins: Vec<Vec<usize>>,
}

impl<'m> MeshSearch<'m> {
    pub fn new(mesh: &'m SimplicialMesh) -> Self {
        let (lo, hi) = mesh.bounding_box();
        let spacing = (2.0 * mesh.h).max(1e-9);
        let pad = 1e-9 * (1.0 + dist(lo, hi));
        let origin = [lo[0] - pad, lo[1] - pad, lo[2] - pad];
        let mut dims = [1usize; 3];
        for k in 0..mesh.dim {
            dims[k] = (((hi[k] - origin[k]) / spacing).ceil() as usize).max(1);
        }
        let nbins = dims[0] * dims[1] * dims[2];
        let mut s = MeshSearch {
            mesh,
            origin,
            spacing,
            dims,
            cell_bins: vec![Vec::new(); nbins],
            face_bins: vec![Vec::new(); nbins],
            node_bins: vec![Vec::new(); nbins],
        };
        for c in 0..mesh.cell_count() {
            let pts: Vec<Point> = mesh.cell(c).iter().map(|&n| mesh.nodes[n]).collect();
            s.for_bins_of_bbox(&pts, |bins, idx| bins[idx].push(c), BinKind::Cell);
        }
        for f in 0..mesh.boundary_face_count() {
            let pts: Vec<Point> = mesh
                .boundary_face(f)
                .iter()
                .map(|&n| mesh.nodes[n])
                .collect();
            s.for_bins_of_bbox(&pts, |bins, idx| bins[idx].push(f), BinKind::Face);
        }
        for (n, p) in mesh.nodes.iter().enumerate() {
            let idx = s.bin_index(s.clamp_coords(*p));
            s.node_bins[idx].push(n);
        }
        s
    }

    fn coords(&self, p: Point) -> [i64; 3] {
        let mut c = [0i64; 3];
        for k in 0..3 {
            c[k] = ((p[k] - self.origin[k]) / self.spacing).floor() as i64;
        }
        c
    }

    fn clamp_coords(&self, p: Point) -> [usize; 3] {
        let c = self.coords(p);
        let mut out = [0usize; 3];
        for k in 0..3 {
            out[k] = c[k].clamp(0, self.dims[k] as i64 - 1) as usize;
        }
        out
    }

    fn bin_index(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    fn for_bins_of_bbox<F>(&mut self, pts: &[Point], mut f: F, kind: BinKind)
    where
        F: FnMut(&mut Vec<Vec<usize>>, usize),
    {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in pts {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let clo = self.clamp_coords(lo);
        let chi = self.clamp_coords(hi);
        let mut bins = std::mem::take(match kind {
            BinKind::Cell => &mut self.cell_bins,
            BinKind::Face => &mut self.face_bins,
        });
        for z in clo[2]..=chi[2] {
            for y in clo[1]..=chi[1] {
                for x in clo[0]..=chi[0] {
                    let idx = self.bin_index([x, y, z]);
                    f(&mut bins, idx);
                }
            }
        }
        match kind {
            BinKind::Cell => self.cell_bins = bins,
            BinKind::Face => self.face_bins = bins,
        }
    }

    /// Locates the cell containing `x` and its barycentric coordinates, or
    /// `None` when `x` lies outside the domain.
    pub fn locate(&self, x: Point) -> Option<(usize, [f64; 4])> {
        let c = self.coords(x);
        for k in 0..self.mesh.dim {
            if c[k] < 0 || c[k] >= self.dims[k] as i64 {
                return None;
            }
        }
        let idx = self.bin_index(self.clamp_coords(x));
        let mut best: Option<(usize, [f64; 4], f64)> = None;
        for &cell in &self.cell_bins[idx] {
            let bary = self.mesh.barycentric(cell, x);
            let worst = bary[..self.mesh.dim + 1]
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            if worst >= -1e-9 {
                return Some((cell, bary));
            }
            if best.map_or(true, |(_, _, w)| worst > w) {
                best = Some((cell, bary, worst));
            }
        }
        // points that sit on bin boundaries can fall just outside every
        // candidate by round-off; accept the least-negative match
        if let Some((cell, bary, worst)) = best {
            if worst >= -1e-7 {
                return Some((cell, bary));
            }
        }
        None
    }

    pub fn is_inside(&self, x: Point) -> bool {
        self.locate(x).is_some()
    }

    /// Index of the mesh node closest to `x`.
    pub fn nearest_node(&self, x: Point) -> usize {
        let (n, _) = self
            .nearest_in_bins(x, &self.node_bins, |n| dist(self.mesh.nodes[n], x))
            .expect("mesh has nodes");
        n
    }

    /// Projects `x` onto the closure of the domain: interior points are
    /// returned unchanged, exterior points map to the closest boundary point.
    pub fn project_to_domain(&self, x: Point) -> Point {
        if self.is_inside(x) {
            return x;
        }
        let (f, _) = self
            .nearest_in_bins(x, &self.face_bins, |f| {
                let pts: Vec<Point> = self
                    .mesh
                    .boundary_face(f)
                    .iter()
                    .map(|&n| self.mesh.nodes[n])
                    .collect();
                dist(project_point_to_face(&pts, x), x)
            })
            .expect("mesh has boundary faces");
        let pts: Vec<Point> = self
            .mesh
            .boundary_face(f)
            .iter()
            .map(|&n| self.mesh.nodes[n])
            .collect();
        project_point_to_face(&pts, x)
    }

    /// Expanding-shell search over bins, returning the item minimizing `cost`.
    fn nearest_in_bins<F>(
        &self,
        x: Point,
        bins: &[Vec<usize>],
        mut cost: F,
    ) -> Option<(usize, f64)>
    where
        F: FnMut(usize) -> f64,
    {
        let center = self.coords(x);
        let max_dim = *self.dims.iter().max().unwrap() as i64;
        let mut best: Option<(usize, f64)> = None;
        let mut r: i64 = 0;
        loop {
            // shells with minimum possible distance beyond the current best
            // cannot improve the result
            if let Some((_, d)) = best {
                if (r - 1) as f64 * self.spacing > d {
                    return best;
                }
            }
            let mut any_bin = false;
            for z in shell_range(center[2], r, self.dims[2]) {
                for y in shell_range(center[1], r, self.dims[1]) {
                    for xx in shell_range(center[0], r, self.dims[0]) {
                        let on_shell = (xx - center[0]).abs() == r
                            || (y - center[1]).abs() == r
                            || (z - center[2]).abs() == r
                            || r == 0;
                        if !on_shell {
                            continue;
                        }
                        any_bin = true;
                        let idx = self.bin_index([xx as usize, y as usize, z as usize]);
                        for &item in &bins[idx] {
                            let d = cost(item);
                            if best.map_or(true, |(_, bd)| d < bd) {
                                best = Some((item, d));
                            }
                        }
                    }
                }
            }
            r += 1;
            if !any_bin && r > 2 * max_dim + 2 {
                return best;
            }
        }
    }
}

enum BinKind {
    Cell,
    Face,
}

fn shell_range(center: i64, r: i64, dim: usize) -> std::ops::RangeInclusive<i64> {
    let lo = (center - r).clamp(0, dim as i64 - 1);
    let hi = (center + r).clamp(0, dim as i64 - 1);
    lo..=hi
}
