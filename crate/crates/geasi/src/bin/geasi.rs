//! Command-line front end: scenario generation, forward solves, activation
//! and ECG fitting, lead-field precomputation, and a benchmark harness.
//! Exit codes: 0 success, 2 configuration error, 3 solver failure,
//! 4 non-convergence.

use clap::{Parser, Subcommand};
use geasi::config::RunConfig;
use geasi::ecg::{
    compute_lead_fields, conductivities_from_d, fit_ecg, simulate_ecg, EcgFitProblem, EcgTrace,
    LeadFieldSet, LeadSystem, TorsoGrid,
};
use geasi::eikonal::{solve_eikonal, EasSet, EasSite, NO_OWNER};
use geasi::geodesic::{trace_batch, TraceContext, TraceOptions};
use geasi::linalg::dist;
use geasi::mesh::search::MeshSearch;
use geasi::mesh::setup::{generate_square_setup, SquareVelocity};
use geasi::mesh::vtk::{write_vtk, FieldData, VtkFields};
use geasi::mesh::{ConductionTensorField, MeasurementSet, SimplicialMesh};
use geasi::optimizer::{
    evaluate_state, geasi_fit, random_initial_sites, simulate_measurements, FitHistory,
    FitProblem,
};
use geasi::topo::adaptive_fit;
use geasi::{GeasiError, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(name = "geasi", about = "Eikonal activation modeling and earliest-activation-site identification")]
struct Cli {
    /// TOML (or JSON) run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the configured one).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Random seed (overrides the configured one).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Size of the global worker pool.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Print the built-in default configuration as TOML and exit.
    #[arg(long)]
    print_defaults: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the scenario mesh and conduction field and export them.
    GenSetup,
    /// Solve the forward activation problem from the configured sites.
    SolveEikonal,
    /// Identify sites from forward-simulated activation-time measurements.
    FitActivation {
        /// Grow the site count from one seed via split scoring.
        #[arg(long)]
        topo: bool,
    },
    /// Precompute and cache the torso lead fields.
    ComputeLeadFields,
    /// Simulate the multi-lead ECG from the configured sites.
    SimulateEcg,
    /// Identify sites from a self-generated target ECG.
    FitEcg,
    /// Time the solver and batch-tracing stages.
    Benchmark,
}

fn main() {
    let cli = Cli::parse();
    std::process::exit(match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                GeasiError::Config(_)
                | GeasiError::Vtk(_)
                | GeasiError::InvalidSite(_)
                | GeasiError::Io(_) => 2,
                GeasiError::NonConvergence(_) => 4,
                _ => 3,
            }
        }
    });
}

fn run(cli: Cli) -> Result<()> {
    if cli.print_defaults {
        print!("{}", RunConfig::default().with_default_sites().to_toml());
        return Ok(());
    }
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default().with_default_sites(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.display().to_string();
    }
    if let Some(threads) = cli.threads {
        // ignore the error when a pool already exists (e.g. repeated calls
        // in tests); the first initialization wins
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let command = cli
        .command
        .ok_or_else(|| GeasiError::Config("no subcommand given (try --help)".into()))?;
    match command {
        Command::GenSetup => gen_setup(&cfg),
        Command::SolveEikonal => solve_eikonal_cmd(&cfg),
        Command::FitActivation { topo } => fit_activation(&cfg, topo),
        Command::ComputeLeadFields => {
            compute_lead_fields_cmd(&cfg)?;
            Ok(())
        }
        Command::SimulateEcg => simulate_ecg_cmd(&cfg),
        Command::FitEcg => fit_ecg_cmd(&cfg),
        Command::Benchmark => benchmark(&cfg),
    }
}

fn out_path(cfg: &RunConfig, name: &str) -> PathBuf {
    Path::new(&cfg.output_dir).join(name)
}

fn write_summary(cfg: &RunConfig, name: &str, value: &serde_json::Value) -> Result<()> {
    let path = out_path(cfg, name);
    let mut f = std::fs::File::create(&path)?;
    writeln!(f, "{}", serde_json::to_string_pretty(value).unwrap())?;
    println!("wrote {}", path.display());
    Ok(())
}

fn sites_json(eas: &EasSet) -> serde_json::Value {
    serde_json::json!(eas
        .sites
        .iter()
        .zip(&eas.active)
        .map(|(s, &a)| {
            serde_json::json!({
                "position": s.position,
                "time": s.time,
                "active": a,
            })
        })
        .collect::<Vec<_>>())
}

fn gen_setup(cfg: &RunConfig) -> Result<()> {
    let (mesh, tensors, meas) = cfg.build_scenario()?;
    let speeds: Vec<f64> = tensors
        .iter()
        .map(|t| {
            let (a, b) = if mesh.dim == 2 {
                t.eigenvalues_2d()
            } else {
                (t.c[0], t.c[2])
            };
            a.max(b).sqrt()
        })
        .collect();
    let mut gamma = vec![0i64; mesh.node_count()];
    for &n in &meas.nodes {
        gamma[n] = 1;
    }
    let fields = VtkFields {
        point_data: vec![("measurement_node".into(), FieldData::IntScalars(gamma))],
        cell_data: vec![("max_speed".into(), FieldData::Scalars(speeds))],
    };
    let path = out_path(cfg, "setup.vtk");
    write_vtk(&path, &mesh, &fields)?;
    println!("wrote {}", path.display());
    write_summary(
        cfg,
        "setup.json",
        &serde_json::json!({
            "nodes": mesh.node_count(),
            "cells": mesh.cell_count(),
            "dim": mesh.dim,
            "mean_edge_length_mm": mesh.h,
            "measurement_nodes": meas.nodes.len(),
        }),
    )
}

fn solve_eikonal_cmd(cfg: &RunConfig) -> Result<()> {
    let (mesh, tensors, _) = cfg.build_scenario()?;
    let search = MeshSearch::new(&mesh);
    let eas = cfg.site_set(&search)?;
    let start = Instant::now();
    let map = solve_eikonal(&mesh, &search, &tensors, &eas, &cfg.eikonal.to_options())?;
    let elapsed = start.elapsed().as_secs_f64();
    let owners: Vec<i64> = map
        .owner
        .iter()
        .map(|&o| if o == NO_OWNER { -1 } else { o as i64 })
        .collect();
    let fields = VtkFields {
        point_data: vec![
            ("activation_ms".into(), FieldData::Scalars(map.phi.clone())),
            ("owner_site".into(), FieldData::IntScalars(owners)),
        ],
        cell_data: vec![],
    };
    let path = out_path(cfg, "activation.vtk");
    write_vtk(&path, &mesh, &fields)?;
    println!("wrote {}", path.display());
    let max_phi = map.phi.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    write_summary(
        cfg,
        "solve.json",
        &serde_json::json!({
            "sites": sites_json(&map.eas),
            "max_activation_ms": max_phi,
            "wall_time_s": elapsed,
        }),
    )
}

fn write_history_csv(path: &Path, history: &FitHistory) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "iteration,site,active,x,y,z,t,objective,rmse")?;
    for entry in history {
        for (i, site) in entry.sites.iter().enumerate() {
            writeln!(
                f,
                "{},{},{},{:.9},{:.9},{:.9},{:.9},{:.9e},{:.9e}",
                entry.iteration,
                i,
                entry.active[i] as u8,
                site.position[0],
                site.position[1],
                site.position[2],
                site.time,
                entry.objective,
                entry.rmse,
            )?;
        }
    }
    Ok(())
}

fn fit_activation(cfg: &RunConfig, topo: bool) -> Result<()> {
    let (mesh, tensors, meas_template) = cfg.build_scenario()?;
    let search = MeshSearch::new(&mesh);
    let truth = cfg.site_set(&search)?;
    let fim = cfg.eikonal.to_options();
    let measurements =
        simulate_measurements(&mesh, &search, &tensors, &truth, &fim, &meas_template.nodes)?;
    let problem = FitProblem::new(
        &mesh,
        &search,
        &tensors,
        &measurements,
        cfg.fit.t_min,
        cfg.fit.t_max,
        cfg.fit.to_options(&cfg.eikonal),
    )?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(f64, EasSet, FitHistory)> = None;
    for restart in 0..cfg.fit.restarts {
        let n_init = if topo { 1 } else { cfg.fit.n_sites };
        let init = random_initial_sites(&mesh, cfg.fit.t_min, cfg.fit.t_max, n_init, &mut rng)?;
        let (fit, history) = if topo {
            let (fit, epochs) = adaptive_fit(&problem, &cfg.topo.to_config(), &init)?;
            let history = epochs.into_iter().flat_map(|e| e.fit_history).collect();
            (fit, history)
        } else {
            geasi_fit(&problem, &init)?
        };
        let state = evaluate_state(&problem, &fit)?;
        println!(
            "restart {restart}: {} sites, objective {:.6e}, rmse {:.4} ms",
            fit.active_indices().len(),
            state.objective,
            state.rmse
        );
        if best.as_ref().map_or(true, |(o, _, _)| state.objective < *o) {
            best = Some((state.objective, fit, history));
        }
    }
    let (objective, fit, history) = best.expect("at least one restart");
    let elapsed = start.elapsed().as_secs_f64();
    let csv = out_path(cfg, "fit_history.csv");
    write_history_csv(&csv, &history)?;
    println!("wrote {}", csv.display());
    let state = evaluate_state(&problem, &fit)?;
    let fields = VtkFields {
        point_data: vec![(
            "activation_ms".into(),
            FieldData::Scalars(state.map.phi.clone()),
        )],
        cell_data: vec![],
    };
    let vtk = out_path(cfg, "fit_activation.vtk");
    write_vtk(&vtk, &mesh, &fields)?;
    println!("wrote {}", vtk.display());
    write_summary(
        cfg,
        "fit.json",
        &serde_json::json!({
            "sites": sites_json(&fit),
            "objective": objective,
            "rmse_ms": state.rmse,
            "iterations": history.len(),
            "adaptive": topo,
            "wall_time_s": elapsed,
        }),
    )
}

/// Content-addressed lead-field cache: the key covers the grid geometry,
/// conductivities, and electrode layout.
fn lead_cache_key(grid: &TorsoGrid, leads: &LeadSystem) -> u64 {
    let mut h = DefaultHasher::new();
    grid.dim.hash(&mut h);
    grid.shape.hash(&mut h);
    for v in grid.origin.iter().chain(grid.spacing.iter()) {
        v.to_bits().hash(&mut h);
    }
    for s in &grid.sigma {
        for c in s.c {
            c.to_bits().hash(&mut h);
        }
    }
    leads.electrode_nodes.hash(&mut h);
    for row in &leads.rows {
        for v in row {
            v.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

struct EcgContext {
    mesh: SimplicialMesh,
    tensors: ConductionTensorField,
    g_i: ConductionTensorField,
    grid: TorsoGrid,
    leads: LeadSystem,
    fields: LeadFieldSet,
}

fn prepare_ecg(cfg: &RunConfig) -> Result<EcgContext> {
    let (mesh, tensors, _) = cfg.build_scenario()?;
    let search = MeshSearch::new(&mesh);
    let params = cfg.ecg.waveform_params();
    let (g_i, _, g_bulk) = conductivities_from_d(&tensors, &params);
    let grid = TorsoGrid::new(&mesh, &search, &g_bulk, &cfg.ecg.torso_options())?;
    let leads = LeadSystem::axis_aligned(&grid);
    let key = lead_cache_key(&grid, &leads);
    let cache = out_path(cfg, &format!("lead_fields_{key:016x}.json"));
    let fields = if cache.exists() {
        let text = std::fs::read_to_string(&cache)?;
        let fields: Vec<Vec<f64>> = serde_json::from_str(&text)
            .map_err(|e| GeasiError::Config(format!("corrupt lead-field cache: {e}")))?;
        println!("loaded cached lead fields from {}", cache.display());
        LeadFieldSet { fields }
    } else {
        let start = Instant::now();
        let fields = compute_lead_fields(&grid, &leads)?;
        println!(
            "solved {} lead fields in {:.2} s",
            fields.fields.len(),
            start.elapsed().as_secs_f64()
        );
        let mut f = std::fs::File::create(&cache)?;
        writeln!(f, "{}", serde_json::to_string(&fields.fields).unwrap())?;
        println!("wrote {}", cache.display());
        fields
    };
    Ok(EcgContext {
        mesh,
        tensors,
        g_i,
        grid,
        leads,
        fields,
    })
}

fn compute_lead_fields_cmd(cfg: &RunConfig) -> Result<EcgContext> {
    let ctx = prepare_ecg(cfg)?;
    write_summary(
        cfg,
        "lead_fields.json",
        &serde_json::json!({
            "leads": ctx.fields.fields.len(),
            "grid_nodes": ctx.grid.node_count(),
            "electrodes": ctx.leads.electrodes,
        }),
    )?;
    Ok(ctx)
}

fn write_trace_csv(path: &Path, trace: &EcgTrace) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    let header: Vec<String> = std::iter::once("time_ms".to_string())
        .chain((1..=trace.leads.len()).map(|l| format!("lead_{l}")))
        .collect();
    writeln!(f, "{}", header.join(","))?;
    for (k, &t) in trace.times.iter().enumerate() {
        let mut row = vec![format!("{t:.3}")];
        for lead in &trace.leads {
            row.push(format!("{:.9e}", lead[k]));
        }
        writeln!(f, "{}", row.join(","))?;
    }
    Ok(())
}

fn simulate_ecg_cmd(cfg: &RunConfig) -> Result<()> {
    let ctx = prepare_ecg(cfg)?;
    let search = MeshSearch::new(&ctx.mesh);
    let eas = cfg.site_set(&search)?;
    let map = solve_eikonal(
        &ctx.mesh,
        &search,
        &ctx.tensors,
        &eas,
        &cfg.eikonal.to_options(),
    )?;
    let start = Instant::now();
    let trace = simulate_ecg(
        &ctx.mesh,
        &map.phi,
        &ctx.g_i,
        &ctx.grid,
        &ctx.fields,
        &cfg.ecg.waveform_params(),
        &cfg.ecg.time_grid(),
    )?;
    let elapsed = start.elapsed().as_secs_f64();
    let csv = out_path(cfg, "ecg_trace.csv");
    write_trace_csv(&csv, &trace)?;
    println!("wrote {}", csv.display());
    write_summary(
        cfg,
        "ecg.json",
        &serde_json::json!({
            "sites": sites_json(&map.eas),
            "samples": trace.times.len(),
            "leads": trace.leads.len(),
            "wall_time_s": elapsed,
        }),
    )
}

fn fit_ecg_cmd(cfg: &RunConfig) -> Result<()> {
    let ctx = prepare_ecg(cfg)?;
    let search = MeshSearch::new(&ctx.mesh);
    let truth = cfg.site_set(&search)?;
    let fim = cfg.eikonal.to_options();
    let params = cfg.ecg.waveform_params();
    let time = cfg.ecg.time_grid();
    let map = solve_eikonal(&ctx.mesh, &search, &ctx.tensors, &truth, &fim)?;
    let target = simulate_ecg(
        &ctx.mesh,
        &map.phi,
        &ctx.g_i,
        &ctx.grid,
        &ctx.fields,
        &params,
        &time,
    )?;
    // initial guess: truth perturbed by a few edge lengths
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut init = truth.clone();
    for s in &mut init.sites {
        for ax in 0..ctx.mesh.dim {
            s.position[ax] += 5.0 * ctx.mesh.h * (rng.gen::<f64>() - 0.5) * 2.0;
        }
        s.position = search.project_to_domain(s.position);
    }
    let problem = EcgFitProblem {
        mesh: &ctx.mesh,
        search: &search,
        tensors: &ctx.tensors,
        g_i: &ctx.g_i,
        grid: &ctx.grid,
        leads: &ctx.fields,
        params,
        time,
        t_min: cfg.fit.t_min,
        t_max: cfg.fit.t_max,
        opts: cfg.ecg.fit_options(&cfg.eikonal),
    };
    let start = Instant::now();
    let (fit, history) = fit_ecg(&problem, &init, &target)?;
    let elapsed = start.elapsed().as_secs_f64();
    let csv = out_path(cfg, "ecg_fit_history.csv");
    {
        let mut f = std::fs::File::create(&csv)?;
        writeln!(f, "iteration,site,active,x,y,z,t,objective,mismatch")?;
        for entry in &history {
            for (i, site) in entry.sites.iter().enumerate() {
                writeln!(
                    f,
                    "{},{},{},{:.9},{:.9},{:.9},{:.9},{:.9e},{:.9e}",
                    entry.iteration,
                    i,
                    entry.active[i] as u8,
                    site.position[0],
                    site.position[1],
                    site.position[2],
                    site.time,
                    entry.objective,
                    entry.mismatch,
                )?;
            }
        }
    }
    println!("wrote {}", csv.display());
    let final_map = solve_eikonal(&ctx.mesh, &search, &ctx.tensors, &fit, &fim)?;
    let final_trace = simulate_ecg(
        &ctx.mesh,
        &final_map.phi,
        &ctx.g_i,
        &ctx.grid,
        &ctx.fields,
        &params,
        &time,
    )?;
    let mismatch = final_trace.relative_mismatch(&target);
    let worst_site_error = fit
        .sites
        .iter()
        .zip(&truth.sites)
        .map(|(a, b)| dist(a.position, b.position))
        .fold(0.0f64, f64::max);
    write_summary(
        cfg,
        "ecg_fit.json",
        &serde_json::json!({
            "sites": sites_json(&fit),
            "relative_mismatch": mismatch,
            "worst_site_error_mm": worst_site_error,
            "iterations": history.len(),
            "wall_time_s": elapsed,
        }),
    )
}

fn benchmark(cfg: &RunConfig) -> Result<()> {
    let (mesh, tensors, meas) = generate_square_setup(50, &SquareVelocity::default())?;
    let search = MeshSearch::new(&mesh);
    let sites = vec![
        EasSite {
            position: [6.0, 10.0, 0.0],
            time: 0.0,
        },
        EasSite {
            position: [14.0, 10.0, 0.0],
            time: 0.0,
        },
    ];
    let eas = EasSet::new(sites, 0.0, 200.0)?;
    let fim = cfg.eikonal.to_options();

    let start = Instant::now();
    let map = solve_eikonal(&mesh, &search, &tensors, &eas, &fim)?;
    let solve_s = start.elapsed().as_secs_f64();

    let ctx = TraceContext::new(&mesh, &search, &tensors, &map, &fim, TraceOptions::default())?;
    let starts: Vec<_> = meas.nodes.iter().map(|&n| mesh.nodes[n]).collect();
    let threads = rayon::current_num_threads();
    let t0 = Instant::now();
    let paths = trace_batch(&ctx, &starts, None::<fn(usize, usize, usize)>);
    let trace_s = t0.elapsed().as_secs_f64();
    let converged = paths.iter().filter(|p| p.converged).count();

    let measurements = MeasurementSet {
        nodes: meas.nodes.clone(),
        times: meas.nodes.iter().map(|&n| map.phi[n]).collect(),
    };
    let problem = FitProblem::new(
        &mesh,
        &search,
        &tensors,
        &measurements,
        0.0,
        200.0,
        cfg.fit.to_options(&cfg.eikonal),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = random_initial_sites(&mesh, 0.0, 200.0, 2, &mut rng)?;
    let t0 = Instant::now();
    let (_, history) = geasi_fit(&problem, &init)?;
    let fit_s = t0.elapsed().as_secs_f64();

    let summary = serde_json::json!({
        "grid": "50x50 square",
        "threads": threads,
        "eikonal_solve_s": solve_s,
        "trace_batch_s": trace_s,
        "traced_paths": starts.len(),
        "converged_paths": converged,
        "fit_s": fit_s,
        "fit_iterations": history.len(),
    });
    println!("{}", serde_json::to_string_pretty(&summary).unwrap());
    write_summary(cfg, "benchmark.json", &summary)
}
