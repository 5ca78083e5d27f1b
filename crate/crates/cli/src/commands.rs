use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use gsqg::evolution::{
    evolve, orbital_norm, self_transit_time, stability_experiment, EvolutionConfig, PerturbationShape, StabilityConfig,
    TrajectoryReport, TrajectorySummary,
};
use gsqg::fields::{orbital_distance, rearrangement_equimeasurable, shifted_distance, translate_cells, ShiftSearch};
use gsqg::limiting::{solve_limiting, LimitingOptions, LimitingReport, LimitingSolution};
use gsqg::pair::{
    default_battery, desingularization_check, pair_solution_from_density, solve_pair, weak_form_residual, PairGrid,
    PairOptions, PairProblem, PairReport, PairSolution,
};
use gsqg::profiles::PowerProfile;
use gsqg::rearrange::{maximize_over_rearrangement_class, RearrangeOptions, RearrangeReport};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Perturb, RunConfig};
use crate::error::CliError;
use crate::output::{csv, eps_tag, num, RunDir, MANIFEST};

pub const LIMITING_JSON: &str = "limiting.json";

pub fn run(cfg: &RunConfig, out: &mut RunDir) -> Result<(), CliError> {
    match cfg.command.as_str() {
        "solve-limiting" => cmd_solve_limiting(cfg, out).map(|_| ()),
        "solve-pair" => cmd_solve_pair(cfg, out),
        "verify" => cmd_verify(cfg, out),
        "evolve" => cmd_evolve(cfg, out),
        "rearrange" => cmd_rearrange(cfg, out),
        "report" => cmd_report(cfg, out),
        other => Err(CliError::Usage(format!("unknown command '{other}'"))),
    }
}

fn profile(cfg: &RunConfig) -> Result<PowerProfile<f64>, CliError> {
    let (s, p) = (cfg.s.expect("checked"), cfg.p.expect("checked"));
    Ok(PowerProfile::new(p, s, cfg.l)?)
}

#[derive(Serialize)]
struct LimitingFile<'a> {
    #[serde(flatten)]
    report: LimitingReport,
    #[serde(rename = "L")]
    l: f64,
    nr: usize,
    rmax: f64,
    residuals: &'a BTreeMap<String, f64>,
}

fn cmd_solve_limiting(cfg: &RunConfig, out: &mut RunDir) -> Result<LimitingSolution<f64>, CliError> {
    let pr = profile(cfg)?;
    let defaults = LimitingOptions::<f64>::default();
    let opts = LimitingOptions {
        nr: cfg.nr,
        tol: if cfg.command == "solve-limiting" { cfg.tol.unwrap_or(defaults.tol) } else { defaults.tol },
        max_iter: if cfg.command == "solve-limiting" {
            cfg.max_iter.unwrap_or(defaults.max_iter)
        } else {
            defaults.max_iter
        },
        theta: cfg.damping,
        anderson_depth: cfg.anderson_depth,
        coarse_nr: defaults.coarse_nr.min((cfg.nr / 2).max(24)),
        ..defaults
    };
    let sol = out.stage("limiting", |_| Ok(solve_limiting(&pr, cfg.kappa, &opts)?))?;
    let file = LimitingFile {
        report: sol.report(),
        l: cfg.l,
        nr: sol.omega0.nr,
        rmax: sol.omega0.rmax,
        residuals: &sol.residuals,
    };
    out.write_json(LIMITING_JSON, &file)?;
    let rows: Vec<Vec<String>> =
        (0..sol.omega0.nr).map(|k| vec![num(sol.omega0.r(k)), num(sol.omega0.values[k])]).collect();
    out.write_text("limiting_radial.csv", &csv(&["r", "omega"], &rows))?;
    if !sol.converged {
        return Err(CliError::NonConvergence(format!("limiting solver stopped after {} iterations", sol.iterations)));
    }
    Ok(sol)
}

/// Parameters needed to rebuild a pair problem from a run directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StoredProblem {
    pub s: f64,
    pub p: f64,
    #[serde(rename = "L")]
    pub l: f64,
    pub kappa: f64,
    #[serde(rename = "W")]
    pub w: f64,
    pub eps: f64,
    pub n: usize,
    pub half_width: f64,
    pub field: String,
}

impl StoredProblem {
    fn build(&self) -> Result<PairProblem<f64>, CliError> {
        let pr = PowerProfile::new(self.p, self.s, self.l)?;
        let win = PairGrid { n: self.n, half_width: self.half_width };
        Ok(PairProblem::new(&pr, self.kappa, self.w, self.eps, win)?)
    }
}

#[derive(Serialize)]
struct PairFile<'a> {
    problem: &'a StoredProblem,
    report: PairReport,
    residuals: &'a BTreeMap<String, f64>,
    warnings: &'a [String],
}

fn cmd_solve_pair(cfg: &RunConfig, out: &mut RunDir) -> Result<(), CliError> {
    let lim = cmd_solve_limiting(cfg, out)?;
    let pr = profile(cfg)?;
    let defaults = PairOptions::<f64>::default();
    let opts = PairOptions {
        tol: cfg.tol.unwrap_or(defaults.tol),
        max_iter: cfg.max_iter.unwrap_or(defaults.max_iter),
        theta: cfg.damping,
        anderson_depth: cfg.anderson_depth,
        sym_every: cfg.sym_every,
    };
    let window = PairGrid { n: cfg.n, half_width: lim.support_radius * cfg.margin };
    let mut solved = Vec::new();
    for &eps in &cfg.eps {
        let tag = eps_tag(eps);
        let pb = PairProblem::new(&pr, cfg.kappa, cfg.w, eps, window)?;
        for w in &pb.warnings {
            eprintln!("warning ({tag}): {w}");
        }
        let sol = out.stage(&format!("pair {tag}"), |_| Ok(solve_pair(&pb, &lim, &opts)?))?;
        let stored = StoredProblem {
            s: pr.s,
            p: pr.p,
            l: pr.l,
            kappa: cfg.kappa,
            w: cfg.w,
            eps,
            n: cfg.n,
            half_width: window.half_width,
            field: format!("omega_{tag}.gsqg"),
        };
        out.write_field(&stored.field, &sol.omega_eps)?;
        let file =
            PairFile { problem: &stored, report: sol.report(&pb), residuals: &sol.residuals, warnings: &pb.warnings };
        out.write_json(&format!("pair_{tag}.json"), &file)?;
        if !sol.converged {
            return Err(CliError::NonConvergence(format!("pair solver stopped at {tag}")));
        }
        solved.push((pb, sol));
    }
    write_pair_tables(out, lim.e0, &solved)
}

fn write_pair_tables(
    out: &mut RunDir,
    e0: f64,
    solved: &[(PairProblem<f64>, PairSolution<f64>)],
) -> Result<(), CliError> {
    let header = [
        "eps",
        "d_eps",
        "d0",
        "mu_eps",
        "E_eps",
        "E0_minus_E_eps",
        "location",
        "multiplier",
        "weak_form_max",
        "S_eps_sup",
        "support_radius",
        "iterations",
    ];
    let rows: Vec<Vec<String>> = solved
        .iter()
        .map(|(pb, sol)| {
            let r = sol.report(pb);
            vec![
                r.eps.to_string(),
                num(r.d_eps),
                num(r.d0),
                num(r.mu_eps),
                num(r.e_eps),
                num(e0 - r.e_eps),
                num(r.location_identity_residual),
                num(r.multiplier_identity_residual),
                num(r.weak_form_residual_max),
                num(r.s_eps_sup),
                num(r.support_radius),
                r.iterations.to_string(),
            ]
        })
        .collect();
    out.write_text("pairs.csv", &csv(&header, &rows))?;
    let runs: Vec<(&PairSolution<f64>, &PairProblem<f64>)> = solved.iter().map(|(pb, sol)| (sol, pb)).collect();
    let rows: Vec<Vec<String>> = desingularization_check(&runs)
        .iter()
        .map(|d| vec![d.eps.to_string(), num(d.sup_distance), num(d.ratio_to_eps), num(d.right_mass), num(d.left_mass)])
        .collect();
    out.write_text(
        "desingularization.csv",
        &csv(&["eps", "sup_distance", "ratio_to_eps", "right_mass", "left_mass"], &rows),
    )
}

type Stored = (StoredProblem, PairProblem<f64>, PairSolution<f64>);

/// Pair problems and solutions stored in a `solve-pair` directory, largest
/// `eps` first.
pub fn load_pairs(dir: &Path) -> Result<Vec<Stored>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", dir.display())))?;
    let mut stored = Vec::new();
    for entry in entries {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if name.starts_with("pair_eps") && name.ends_with(".json") {
            let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join(&name))?)?;
            let sp: StoredProblem = serde_json::from_value(v["problem"].clone())
                .map_err(|e| CliError::Usage(format!("{name}: bad problem record: {e}")))?;
            stored.push(sp);
        }
    }
    if stored.is_empty() {
        return Err(CliError::Usage(format!("no pair solutions in {}", dir.display())));
    }
    stored.sort_by(|a, b| b.eps.total_cmp(&a.eps));
    stored
        .into_iter()
        .map(|sp| {
            let pb = sp.build()?;
            let field = gsqg::io::read_field::<f64>(&dir.join(&sp.field))
                .map_err(|e| CliError::Usage(format!("{}: {e}", sp.field)))?;
            let sol = pair_solution_from_density(&pb, field)?;
            Ok((sp, pb, sol))
        })
        .collect()
}

fn select_pair(cfg: &RunConfig, dir: &Path) -> Result<Stored, CliError> {
    let mut all = load_pairs(dir)?;
    match cfg.eps.as_slice() {
        [] if all.len() == 1 => Ok(all.remove(0)),
        [] => Err(CliError::Usage(format!("{} holds several solutions; pick one with --eps", dir.display()))),
        [e] => {
            let k = all
                .iter()
                .position(|(sp, _, _)| eps_tag(sp.eps) == eps_tag(*e))
                .ok_or_else(|| CliError::Usage(format!("no solution with eps = {e} in {}", dir.display())))?;
            Ok(all.remove(k))
        }
        _ => Err(CliError::Usage(format!("{} takes a single --eps", cfg.command))),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyRow {
    pub eps: f64,
    pub identity: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Serialize)]
struct VerifyFile<'a> {
    pass: bool,
    #[serde(rename = "E0")]
    e0: f64,
    /// Largest `(E0 − E_ε)/ε^{2−2s}` over the runs.
    energy_fit_constant: f64,
    rows: &'a [VerifyRow],
}

fn cmd_verify(cfg: &RunConfig, out: &mut RunDir) -> Result<(), CliError> {
    let dir = &cfg.from[0];
    let lim: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.join(LIMITING_JSON))
            .map_err(|e| CliError::Usage(format!("missing {LIMITING_JSON} in {}: {e}", dir.display())))?,
    )?;
    let e0 = lim["E0"].as_f64().ok_or_else(|| CliError::Usage(format!("{LIMITING_JSON} has no E0")))?;
    let pairs = out.stage("load", |_| load_pairs(dir))?;
    let mut rows = Vec::new();
    let mut fit: f64 = 0.0;
    for (sp, pb, sol) in &pairs {
        let weak = weak_form_residual(sol, pb, &default_battery(sol, pb));
        let weak_max = weak.iter().map(|r| r.residual).fold(0.0, f64::max);
        let r = &sol.residuals;
        let checks = [
            ("fixed_point", r["fixed_point"], cfg.tol_fixed_point),
            ("location_identity", r["location_identity"], cfg.tol_location),
            ("multiplier_identity", r["multiplier_identity"], cfg.tol_multiplier),
            ("weak_form", weak_max, cfg.tol_weak),
            ("steiner", r["steiner"] / sp.kappa, cfg.tol_steiner),
            ("bracket", sol.e_eps - e0, cfg.tol_bracket),
        ];
        for (name, value, tolerance) in checks {
            rows.push(VerifyRow { eps: sp.eps, identity: name.into(), value, tolerance, pass: value <= tolerance });
        }
        fit = fit.max((e0 - sol.e_eps) / sp.eps.powf(2.0 - 2.0 * sp.s));
    }
    let pass = rows.iter().all(|r| r.pass);
    out.write_json("verify.json", &VerifyFile { pass, e0, energy_fit_constant: fit, rows: &rows })?;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let status = if r.pass { "pass" } else { "fail" };
            vec![r.eps.to_string(), r.identity.clone(), num(r.value), num(r.tolerance), status.into()]
        })
        .collect();
    out.write_text("verify.csv", &csv(&["eps", "identity", "value", "tolerance", "status"], &table))?;
    println!("{:<8} {:<20} {:>12} {:>10}  status", "eps", "identity", "value", "tolerance");
    for r in &rows {
        println!(
            "{:<8} {:<20} {:>12.3e} {:>10.1e}  {}",
            r.eps,
            r.identity,
            r.value,
            r.tolerance,
            if r.pass { "pass" } else { "fail" }
        );
    }
    let failed: Vec<String> =
        rows.iter().filter(|r| !r.pass).map(|r| format!("{} at eps = {}", r.identity, r.eps)).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(format!("verification failed: {}", failed.join(", "))))
    }
}

#[derive(Serialize)]
struct EvolveFile {
    eps: f64,
    transit_time: f64,
    t_final: f64,
    perturbation: Option<PerturbationShape>,
    delta: Option<f64>,
    /// Normalized orbital distance of the initial field.
    initial_distance: f64,
    /// Largest normalized distance of the unperturbed run.
    scheme_floor: Option<f64>,
    summary: TrajectorySummary,
    max_wall_normal_velocity: f64,
    min_value: f64,
    warnings: Vec<String>,
}

fn evolution_config(cfg: &RunConfig, t_final: f64) -> EvolutionConfig<f64> {
    let mut ec = EvolutionConfig::new(t_final);
    ec.dt = cfg.dt;
    ec.cfl = cfg.cfl;
    ec.diag_every = cfg.diag_every;
    ec.snapshot_every = cfg.snapshot_every;
    ec
}

fn write_trajectory(out: &mut RunDir, run: &TrajectoryReport<f64>) -> Result<(), CliError> {
    out.write_text("trajectory.csv", &run.to_csv())?;
    out.write_field("omega_final.gsqg", &run.final_field)?;
    for (step, f) in &run.snapshots {
        out.write_field(&format!("omega_step{step:06}.gsqg"), f)?;
    }
    Ok(())
}

fn cmd_evolve(cfg: &RunConfig, out: &mut RunDir) -> Result<(), CliError> {
    let (sp, pb, sol) = out.stage("load", |_| select_pair(cfg, &cfg.from[0]))?;
    let omega = &sol.omega_eps;
    let transit = self_transit_time(&sol, &pb);
    let t_final = cfg.transits * transit;
    let ec = evolution_config(cfg, t_final);
    if cfg.trials > 0 {
        let sc = StabilityConfig {
            evolution: ec,
            trial_t_final: cfg.trial_transits.map(|k| k * transit),
            delta: cfg.delta,
            trials: cfg.trials,
            seed: cfg.seed,
        };
        let rep = out.stage("stability", |_| Ok(stability_experiment(&sol, &pb, &sc)?))?;
        let rows: Vec<Vec<String>> = rep
            .trials
            .iter()
            .enumerate()
            .map(|(k, t)| {
                vec![
                    k.to_string(),
                    format!("{:?}", t.shape.kind).to_lowercase(),
                    num(t.initial[0]),
                    num(t.initial[1]),
                    num(t.sup[0]),
                    num(t.sup[1]),
                    t.ordered.to_string(),
                ]
            })
            .collect();
        #[derive(Serialize)]
        struct StabilityFile<'a> {
            eps: f64,
            transit_time: f64,
            delta: f64,
            seed: u64,
            report: &'a gsqg::evolution::StabilityReport,
        }
        out.write_json(
            "stability.json",
            &StabilityFile { eps: sp.eps, transit_time: transit, delta: cfg.delta, seed: cfg.seed, report: &rep },
        )?;
        let header = ["trial", "kind", "initial_delta", "initial_half", "sup_delta", "sup_half", "ordered"];
        return out.write_text("stability.csv", &csv(&header, &rows));
    }
    let (init, shape) = match cfg.perturb {
        Perturb::None => (omega.clone(), None),
        Perturb::Kind(kind) => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let shape = PerturbationShape::random(kind, &mut rng);
            (shape.apply(omega, sol.x_eps, sol.support_radius, cfg.delta), Some(shape))
        }
    };
    let run = out.stage("evolve", |_| Ok(evolve(&init, Some(omega), &pb, &ec)?))?;
    for w in &run.warnings {
        eprintln!("warning: {w}");
    }
    let norm = orbital_norm(omega);
    let summary = run.summary();
    let file = EvolveFile {
        eps: sp.eps,
        transit_time: transit,
        t_final,
        perturbation: shape,
        delta: shape.map(|_| cfg.delta),
        initial_distance: run.rows[0].orbital_distance / norm,
        scheme_floor: shape.is_none().then_some(summary.max_normalized_distance),
        summary,
        max_wall_normal_velocity: run.max_wall_normal_velocity,
        min_value: run.min_value,
        warnings: run.warnings.clone(),
    };
    out.write_json("evolve.json", &file)?;
    write_trajectory(out, &run)
}

#[derive(Serialize)]
struct RearrangeFile {
    eps: f64,
    shift_cells: i64,
    #[serde(flatten)]
    report: RearrangeReport,
    equimeasurable: bool,
    orbital_distance: f64,
    orbital_shift: f64,
    /// Distance of `ω_ε` to its own two-cell translate.
    threshold: f64,
    collapsed_to_translate: bool,
}

fn cmd_rearrange(cfg: &RunConfig, out: &mut RunDir) -> Result<(), CliError> {
    let (sp, pb, sol) = out.stage("load", |_| select_pair(cfg, &cfg.from[0]))?;
    let omega = &sol.omega_eps;
    let start = translate_cells(omega, 0, cfg.shift);
    let defaults = RearrangeOptions::<f64>::default();
    let opts =
        RearrangeOptions { tol: cfg.tol.unwrap_or(defaults.tol), max_iter: cfg.max_iter.unwrap_or(defaults.max_iter) };
    let res = out.stage("ascent", |_| Ok(maximize_over_rearrangement_class(&start, &pb, &opts)?))?;
    let equi = rearrangement_equimeasurable(&res.maximizer, omega, 0.0)?;
    let d = orbital_distance(&res.maximizer, omega, ShiftSearch::around(0, cfg.shift.abs() + 5))?;
    let threshold = shifted_distance(omega, omega, 2.0)?;
    let report = res.report();
    let collapsed = equi && report.monotone && d.value <= threshold;
    let file = RearrangeFile {
        eps: sp.eps,
        shift_cells: cfg.shift,
        report,
        equimeasurable: equi,
        orbital_distance: d.value,
        orbital_shift: d.shift,
        threshold,
        collapsed_to_translate: collapsed,
    };
    out.write_json("rearrange.json", &file)?;
    let rows: Vec<Vec<String>> = res.trace.iter().enumerate().map(|(k, e)| vec![k.to_string(), num(*e)]).collect();
    out.write_text("rearrange_trace.csv", &csv(&["iteration", "energy"], &rows))?;
    out.write_field("omega_rearranged.gsqg", &res.maximizer)?;
    if res.stalled {
        return Err(CliError::NonConvergence(format!("ascent used all {} iterations", opts.max_iter)));
    }
    Ok(())
}

/// Scalars of a JSON value with dotted keys; arrays are skipped.
fn flatten(prefix: &str, v: &serde_json::Value, out: &mut Vec<(String, String)>) {
    match v {
        serde_json::Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        serde_json::Value::Array(_) => {}
        serde_json::Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

fn cmd_report(cfg: &RunConfig, out: &mut RunDir) -> Result<(), CliError> {
    let mut collected = serde_json::Map::new();
    let mut rows = Vec::new();
    for dir in &cfg.from {
        let manifest: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.join(MANIFEST))
                .map_err(|e| CliError::Usage(format!("no {MANIFEST} in {}: {e}", dir.display())))?,
        )?;
        let mut files = serde_json::Map::new();
        for f in manifest["files"].as_array().into_iter().flatten() {
            let Some(name) = f["name"].as_str().filter(|n| n.ends_with(".json")) else { continue };
            let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join(name))?)?;
            let mut flat = Vec::new();
            flatten("", &v, &mut flat);
            let source = dir_label(dir);
            rows.extend(flat.into_iter().map(|(k, x)| vec![source.clone(), name.to_string(), k, x]));
            files.insert(name.to_string(), v);
        }
        let entry = serde_json::json!({ "command": manifest["command"], "files": files });
        collected.insert(dir_label(dir), entry);
    }
    out.write_json("report.json", &collected)?;
    // Values may contain commas; quote that column.
    let quoted: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r[0].clone(), r[1].clone(), r[2].clone(), format!("\"{}\"", r[3].replace('"', "\"\""))])
        .collect();
    out.write_text("summary.csv", &csv(&["source", "file", "key", "value"], &quoted))?;
    for r in &rows {
        println!("{:<24} {:<22} {:<40} {}", r[0], r[1], r[2], r[3]);
    }
    Ok(())
}

fn dir_label(dir: &Path) -> String {
    let p: PathBuf = dir.components().collect();
    p.display().to_string()
}
