//! Subcommands. Every command writes CSV files with a header row into the
//! output directory; values are printed in shortest round-trip form, so
//! reruns with the same seed are byte-identical.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sbv_core::boundary::CollarReflection;
use sbv_core::energy::{field_metrics, MetricsRecord};
use sbv_core::field::{FieldPreset, SbvField};
use sbv_core::geom::ConvexPolygon;
use sbv_core::mesh::{p2, Aabb, CellId};
use sbv_core::pipeline::{run_convergence, ApproximationResult};
use sbv_core::projector::{jump_faces, project, project_jittered, PwAffineFunction};
use sbv_core::Error;

use crate::config::{ExperimentConfig, PresetSpec};

#[derive(Debug)]
pub enum CliError {
    /// Unreadable, malformed or invalid configuration.
    Config(String),
    /// Construction or numerical failure.
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidParameter(m) | Error::InvalidDomain(m) => CliError::Config(m),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

fn io(e: impl std::fmt::Display) -> CliError {
    CliError::Numeric(format!("output: {e}"))
}

type CmdResult = Result<Vec<PathBuf>, CliError>;

struct Table {
    path: PathBuf,
    w: csv::Writer<fs::File>,
}

impl Table {
    fn create(dir: &Path, name: &str, header: &[&str]) -> Result<Self, CliError> {
        let path = dir.join(name);
        let mut w = csv::Writer::from_path(&path).map_err(io)?;
        w.write_record(header).map_err(io)?;
        Ok(Table { path, w })
    }

    fn row(&mut self, fields: &[String]) -> Result<(), CliError> {
        self.w.write_record(fields).map_err(io)
    }

    fn finish(mut self) -> Result<PathBuf, CliError> {
        self.w.flush().map_err(io)?;
        Ok(self.path)
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn prepare(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(io)
}

fn build_field(cfg: &ExperimentConfig) -> Result<Arc<dyn SbvField<1>>, CliError> {
    cfg.preset.to_preset().build().map_err(|e| CliError::Config(e.to_string()))
}

/// Cell dump and jump faces of one projection.
pub fn project_cmd(cfg: &ExperimentConfig, out: &Path) -> CmdResult {
    let f = build_field(cfg)?;
    let region = cfg.domain_box(f.domain()).map_err(CliError::Config)?;
    let eps = cfg.project.eps;
    let (pi, zeta) = match cfg.project.zeta {
        Some(z) => {
            let z = p2(z[0], z[1]);
            (project(&*f, eps, z, &region)?, z)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            project_jittered(&*f, eps, &region, &mut rng)?
        }
    };
    prepare(out)?;
    let cells = write_cells(&pi, out)?;
    let faces = write_faces(&pi, &region, out)?;
    let mut meta = Table::create(out, "project_meta.csv", &["eps", "zeta_x", "zeta_y", "cells"])?;
    meta.row(&[num(eps), num(zeta[0]), num(zeta[1]), pi.len().to_string()])?;
    Ok(vec![cells, faces, meta.finish()?])
}

fn write_cells(pi: &PwAffineFunction<1>, out: &Path) -> Result<PathBuf, CliError> {
    let mut t = Table::create(
        out,
        "cells.csv",
        &[
            "cube_i", "cube_j", "perm", "x0", "y0", "x1", "y1", "x2", "y2", "u0", "u1", "u2", "s01", "s02", "s12", "g0x",
            "g0y", "g1x", "g1y", "g2x", "g2y",
        ],
    )?;
    let mut cells: Vec<_> = pi.cells().collect();
    cells.sort_by(|a, b| a.0.cmp(b.0));
    for (id, ci) in cells {
        let CellId { cube, perm } = *id;
        let mut row = vec![cube[0].to_string(), cube[1].to_string(), perm.to_string()];
        for v in ci.simplex().vertices() {
            row.push(num(v[0]));
            row.push(num(v[1]));
        }
        let d = ci.data();
        for i in 0..3 {
            row.push(num(d.u(i)[0]));
        }
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            row.push(num(d.s(i, j)[0]));
        }
        for j in 0..3 {
            let g = ci.grad(j);
            row.push(num(g[(0, 0)]));
            row.push(num(g[(0, 1)]));
        }
        t.row(&row)?;
    }
    t.finish()
}

fn write_faces(pi: &PwAffineFunction<1>, region: &Aabb<2>, out: &Path) -> Result<PathBuf, CliError> {
    let mut t = Table::create(out, "faces.csv", &["ax", "ay", "bx", "by", "jump_a", "jump_b", "nx", "ny"])?;
    for fc in jump_faces(pi, &ConvexPolygon::from_box(region)) {
        t.row(&[
            num(fc.a[0]),
            num(fc.a[1]),
            num(fc.b[0]),
            num(fc.b[1]),
            num(fc.jump_a[0]),
            num(fc.jump_b[0]),
            num(fc.normal[0]),
            num(fc.normal[1]),
        ])?;
    }
    t.finish()
}

/// Metric columns of the convergence table, in order.
const METRICS: [&str; 22] = [
    "l1",
    "lp_grad",
    "phi_sup",
    "dphi_sup",
    "d1",
    "d2",
    "hn1_sym_diff",
    "bulk_approx",
    "bulk_field",
    "surface_approx",
    "surface_field",
    "g0_approx",
    "g0_field",
    "jump_length_approx",
    "jump_length_field",
    "grad_l1_approx",
    "area_approx",
    "jump_l1_approx",
    "grad_l1_field",
    "area_field",
    "jump_l1_field",
    "score",
];

fn metric_values(m: &MetricsRecord, finite_jump: bool) -> [f64; 22] {
    [
        m.l1,
        m.lp_grad,
        m.phi_sup,
        m.dphi_sup,
        m.d1,
        m.d2,
        m.hn1_sym_diff,
        m.bulk_approx,
        m.bulk_field,
        m.surface_approx,
        m.surface_field,
        m.g0_approx,
        m.g0_field,
        m.jump_length_approx,
        m.jump_length_field,
        m.strict_approx.grad_l1,
        m.strict_approx.area,
        m.strict_approx.jump_l1,
        m.strict_field.grad_l1,
        m.strict_field.area,
        m.strict_field.jump_l1,
        m.score(finite_jump),
    ]
}

/// One row per ladder level, the candidate shift table and plot data.
pub fn converge_cmd(cfg: &ExperimentConfig, out: &Path) -> CmdResult {
    let f = build_field(cfg)?;
    let omega = cfg.domain_box(f.domain()).map_err(CliError::Config)?;
    let pc = cfg.pipeline_config();
    let results = run_convergence(&*f, &omega, &cfg.ladder.to_ladder(), &pc);
    prepare(out)?;

    let label = cfg.ladder.label();
    let mut header = vec![
        "level", label, "delta", "delta_prime", "eps", "zeta_x", "zeta_y", "gamma_x", "gamma_y", "beta", "seed",
    ];
    header.extend(METRICS);
    header.push("error");
    let mut table = Table::create(out, "converge.csv", &header)?;
    let mut cand = Table::create(
        out,
        "candidates.csv",
        &[
            "level", "candidate", "zeta_x", "zeta_y", "redraws", "selected", "l1", "lp_grad", "d1", "d2", "hn1_sym_diff",
            "score", "error",
        ],
    )?;
    let mut plots: Vec<Vec<(f64, f64)>> = vec![Vec::new(); METRICS.len()];
    let ladder_vals = cfg.ladder.values();
    let mut failures = 0;
    for (level, (x, r)) in ladder_vals.iter().zip(&results).enumerate() {
        match r {
            Ok(res) => {
                level_row(&mut table, level, *x, res, pc.finite_jump)?;
                for (k, v) in metric_values(&res.metrics, pc.finite_jump).iter().enumerate() {
                    plots[k].push((*x, *v));
                }
                for (i, c) in res.candidates.iter().enumerate() {
                    let m = c.metrics.clone().unwrap_or_default();
                    let blank = c.metrics.is_none();
                    let show = |v: f64| if blank { String::new() } else { num(v) };
                    cand.row(&[
                        level.to_string(),
                        i.to_string(),
                        num(c.zeta[0]),
                        num(c.zeta[1]),
                        c.redraws.to_string(),
                        (i == res.selected).to_string(),
                        show(m.l1),
                        show(m.lp_grad),
                        show(m.d1),
                        show(m.d2),
                        show(m.hn1_sym_diff),
                        show(m.score(pc.finite_jump)),
                        c.error.clone().unwrap_or_default(),
                    ])?;
                }
            }
            Err(e) => {
                failures += 1;
                let mut row = vec![level.to_string(), num(*x)];
                row.resize(header.len() - 1, String::new());
                row.push(e.to_string());
                table.row(&row)?;
            }
        }
    }
    let mut files = vec![table.finish()?, cand.finish()?];
    for (k, name) in METRICS.iter().enumerate() {
        let path = out.join(format!("plot_{name}.dat"));
        let mut text = format!("# {label} {name}\n");
        for (x, y) in &plots[k] {
            text.push_str(&format!("{x} {y}\n"));
        }
        fs::write(&path, text).map_err(io)?;
        files.push(path);
    }
    if failures == results.len() {
        return Err(CliError::Numeric(format!("all {failures} levels failed; see converge.csv")));
    }
    Ok(files)
}

fn level_row(t: &mut Table, level: usize, x: f64, r: &ApproximationResult<1>, finite_jump: bool) -> Result<(), CliError> {
    let p = &r.params;
    let mut row = vec![
        level.to_string(),
        num(x),
        num(p.delta),
        num(p.delta_prime),
        num(p.eps),
        num(p.zeta[0]),
        num(p.zeta[1]),
        num(p.gamma[0]),
        num(p.gamma[1]),
        num(p.beta),
        p.seed.to_string(),
    ];
    row.extend(metric_values(&r.metrics, finite_jump).iter().map(|v| num(*v)));
    row.push(String::new());
    t.row(&row)
}

/// Collar diagnostics and a histogram of sampled bilipschitz ratios.
pub fn reflect_cmd(cfg: &ExperimentConfig, out: &Path) -> CmdResult {
    let d = cfg.lipschitz_domain().map_err(CliError::Config)?;
    let spec = &cfg.reflect;
    let radius = spec.radius.unwrap_or(0.2 * d.min_edge());
    let c = CollarReflection::auto(&d, radius)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let g = c.diagnostics(&mut rng, spec.samples.max(1), spec.pairs.max(1))?;
    prepare(out)?;
    let mut t = Table::create(
        out,
        "reflect.csv",
        &[
            "gamma",
            "collar_width",
            "involution_residual",
            "boundary_residual",
            "swap_fraction",
            "ratio_min",
            "ratio_max",
            "lipschitz",
        ],
    )?;
    t.row(&[
        num(g.gamma),
        num(g.width),
        num(g.involution_residual),
        num(g.boundary_residual),
        num(g.swap_fraction),
        num(g.ratio_min),
        num(g.ratio_max),
        num(g.lipschitz),
    ])?;
    let ratios = sample_ratios(&c, spec.pairs.max(1), &mut rng)?;
    let mut h = Table::create(out, "reflect_hist.csv", &["ratio_lo", "ratio_hi", "count"])?;
    if let (Some(lo), Some(hi)) = (
        ratios.iter().cloned().reduce(f64::min),
        ratios.iter().cloned().reduce(f64::max),
    ) {
        let bins = spec.bins.max(1);
        let w = ((hi - lo) / bins as f64).max(f64::MIN_POSITIVE);
        let mut counts = vec![0usize; bins];
        for r in &ratios {
            counts[(((r - lo) / w) as usize).min(bins - 1)] += 1;
        }
        for (i, n) in counts.iter().enumerate() {
            h.row(&[num(lo + w * i as f64), num(lo + w * (i + 1) as f64), n.to_string()])?;
        }
    }
    Ok(vec![t.finish()?, h.finish()?])
}

fn sample_ratios(c: &CollarReflection, pairs: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>, CliError> {
    use rand::Rng;
    let h = 1e-3 * c.width();
    let mut out = Vec::with_capacity(pairs);
    while out.len() < pairs {
        let x = c.sample(rng);
        let a: f64 = rng.random::<f64>() * std::f64::consts::TAU;
        let y = x + p2(a.cos(), a.sin()) * (h * rng.random::<f64>().max(1e-3));
        if !c.contains(&y) {
            continue;
        }
        let (fx, fy) = (c.reflect(&x)?, c.reflect(&y)?);
        out.push((fx - fy).norm() / (x - y).norm());
    }
    Ok(out)
}

/// Energies and variation measures of the field itself.
pub fn energy_cmd(cfg: &ExperimentConfig, out: &Path) -> CmdResult {
    let f = build_field(cfg)?;
    let omega = cfg.domain_box(f.domain()).map_err(CliError::Config)?;
    let m = field_metrics(&*f, &cfg.psi(), &cfg.surface(), &cfg.densities.g0.to_modulus(), &ConvexPolygon::from_box(&omega));
    prepare(out)?;
    let mut t = Table::create(out, "energy.csv", &["quantity", "value"])?;
    for (k, v) in [
        ("bulk", m.bulk),
        ("surface", m.surface),
        ("g0_jump", m.g0),
        ("jump_length", m.jump_length),
        ("grad_l1", m.strict.grad_l1),
        ("area", m.strict.area),
        ("jump_l1", m.strict.jump_l1),
        ("total_variation", m.strict.total_variation()),
    ] {
        t.row(&[k.to_string(), num(v)])?;
    }
    Ok(vec![t.finish()?])
}

/// Preset names with an example configuration each.
pub fn catalog_text() -> String {
    let mut s = String::new();
    for (name, p) in FieldPreset::names().iter().zip(PresetSpec::examples()) {
        let json = serde_json::to_string(&p).expect("presets serialize");
        s.push_str(&format!("{name}\t{json}\n"));
    }
    s
}
