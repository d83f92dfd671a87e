//! Experiment driver: runs the fine reference and the multiscale methods
//! for a configuration, computes error tables and writes the artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::assembly::{assemble_global, DofMap, OperatorBlocks};
use crate::coeffs::MaterialField;
use crate::config::{ExperimentConfig, Method, SweepAxis};
use crate::diagnostics::{eigen_decay_report, energy_parts, ErrorReport};
use crate::error::{Error, Result};
use crate::mesh::{build_partition_of_unity, MeshPair, PartitionOfUnity};
use crate::scalar::{from_usize, to_f64, Real};
use crate::spectral::{build_multiscale_basis, coupled_spectra, decoupled_spectra, PatchSpectrum, Selection};
use crate::timeloop::{run_march, March, Problem, SolutionHistory};
use crate::vtk;

/// One line of the error report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub experiment_id: String,
    pub method: &'static str,
    #[serde(rename = "L")]
    pub l: usize,
    pub gamma1: f64,
    pub gamma2: f64,
    #[serde(rename = "lambda_L1")]
    pub lambda_l1: f64,
    pub err_theta: f64,
    pub err_u: f64,
    pub err_w: f64,
    pub wall_ms: u64,
}

/// Errors at one stored step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeriesRow {
    pub experiment_id: String,
    pub method: &'static str,
    #[serde(rename = "L")]
    pub l: usize,
    pub step: usize,
    pub time: f64,
    pub err_theta: f64,
    pub err_u: f64,
    pub err_w: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EigenRow {
    pub experiment_id: String,
    pub method: &'static str,
    pub patch: usize,
    /// One-based position in the ascending spectrum.
    pub k: usize,
    pub re: f64,
    pub im: f64,
    /// `H² Re μ`
    pub scaled: f64,
}

/// A method/basis-size combination that failed for one sample.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Failure {
    pub experiment_id: String,
    pub method: &'static str,
    #[serde(rename = "L")]
    pub l: usize,
    pub message: String,
}

#[derive(Clone, Debug, Default)]
pub struct ExperimentOutcome {
    /// Per-sample rows in sample order, then (for several samples) the
    /// sample means with id suffix `:mean`.
    pub rows: Vec<ReportRow>,
    pub series: Vec<SeriesRow>,
    /// Spectra of the first sample only.
    pub eigen: Vec<EigenRow>,
    pub failures: Vec<Failure>,
    /// Milliseconds per phase, summed over samples.
    pub timings: BTreeMap<String, u64>,
    /// `(file name, fine mesh state)` of the first sample.
    pub states: Vec<(String, Vec<f64>)>,
}

impl ExperimentOutcome {
    /// Rows that summarize the experiment: the means when there are
    /// several samples, the only sample otherwise.
    pub fn summary(&self) -> Vec<&ReportRow> {
        let means: Vec<&ReportRow> = self.rows.iter().filter(|r| r.experiment_id.ends_with(":mean")).collect();
        if means.is_empty() {
            self.rows.iter().collect()
        } else {
            means
        }
    }

    pub fn error(&self, method: Method, l: usize) -> Option<f64> {
        self.summary()
            .into_iter()
            .find(|r| r.method == method.as_str() && r.l == l)
            .map(|r| r.err_w)
    }
}

struct SampleOutcome {
    rows: Vec<ReportRow>,
    series: Vec<SeriesRow>,
    eigen: Vec<EigenRow>,
    failures: Vec<Failure>,
    timings: Vec<(String, u64)>,
    states: Vec<(String, Vec<f64>)>,
}

fn ms(t: Instant) -> u64 {
    t.elapsed().as_millis() as u64
}

fn sample_id(config: &ExperimentConfig, prefix: &str, sample: usize) -> String {
    if config.run.samples > 1 {
        format!("{prefix}:s{sample}")
    } else {
        prefix.to_string()
    }
}

/// Runs every sample of `config`, in parallel over samples (on the current
/// rayon pool). The experiment id of every row starts with `id`.
pub fn run_experiment(config: &ExperimentConfig, id: &str) -> Result<ExperimentOutcome> {
    config.validate()?;
    faer::set_global_parallelism(faer::Par::Seq);
    let pair = config.mesh_pair::<f64>()?;
    let samples: Vec<Result<SampleOutcome>> = (0..config.run.samples)
        .into_par_iter()
        .map(|s| run_sample(config, &pair, id, s))
        .collect();
    let mut out = ExperimentOutcome::default();
    for s in samples {
        let s = s?;
        out.rows.extend(s.rows);
        out.series.extend(s.series);
        out.eigen.extend(s.eigen);
        out.failures.extend(s.failures);
        out.states.extend(s.states);
        for (k, v) in s.timings {
            *out.timings.entry(k).or_default() += v;
        }
    }
    if config.run.samples > 1 {
        out.rows.extend(sample_means(&out.rows, &format!("{id}:mean")));
    }
    Ok(out)
}

/// Means over samples of every (method, L), ignoring non-finite entries.
fn sample_means(rows: &[ReportRow], id: &str) -> Vec<ReportRow> {
    let mut groups: BTreeMap<(&'static str, usize), Vec<&ReportRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.method, r.l)).or_default().push(r);
    }
    let mean = |v: &[&ReportRow], f: fn(&ReportRow) -> f64| {
        let finite: Vec<f64> = v.iter().map(|r| f(r)).filter(|x| x.is_finite()).collect();
        if finite.is_empty() {
            f64::NAN
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        }
    };
    groups
        .into_iter()
        .map(|((method, l), v)| ReportRow {
            experiment_id: id.to_string(),
            method,
            l,
            gamma1: v[0].gamma1,
            gamma2: v[0].gamma2,
            lambda_l1: mean(&v, |r| r.lambda_l1),
            err_theta: mean(&v, |r| r.err_theta),
            err_u: mean(&v, |r| r.err_u),
            err_w: mean(&v, |r| r.err_w),
            wall_ms: v.iter().map(|r| r.wall_ms).sum::<u64>() / v.len() as u64,
        })
        .collect()
}

fn errors(blocks: &OperatorBlocks<f64>, reference: &[f64], candidate: &[f64]) -> Result<ErrorReport> {
    energy_parts(blocks, reference, candidate)?.report_or_exact()
}

struct Shared<'a> {
    config: &'a ExperimentConfig,
    pair: &'a MeshPair<f64>,
    material: &'a MaterialField<f64>,
    blocks: &'a OperatorBlocks<f64>,
    dofs: &'a DofMap,
    pou: &'a PartitionOfUnity<f64>,
    fine: &'a SolutionHistory<f64>,
    id: String,
    first: bool,
}

fn run_sample(config: &ExperimentConfig, pair: &MeshPair<f64>, prefix: &str, sample: usize) -> Result<SampleOutcome> {
    let mut timings = Vec::new();
    let t = Instant::now();
    let material = config.material.build(pair, config.run.seed.wrapping_add(sample as u64))?;
    let (blocks, dofs) = assemble_global(&pair.fine, &material)?;
    let pou = build_partition_of_unity(pair, config.mesh.pou, Some(&material.kappa))?;
    timings.push(("assembly".to_string(), ms(t)));

    let grid = config.time_grid::<f64>()?;
    let problem = Problem {
        mesh: &pair.fine,
        blocks: &blocks,
        dofs: &dofs,
        sources: config.sources.build(),
    };
    let t = Instant::now();
    let fine = run_march(&problem, &grid, March::Fine, config.run.store)?;
    timings.push(("fine".to_string(), ms(t)));

    let shared = Shared {
        config,
        pair,
        material: &material,
        blocks: &blocks,
        dofs: &dofs,
        pou: &pou,
        fine: &fine,
        id: sample_id(config, prefix, sample),
        first: sample == 0,
    };
    let mut out = SampleOutcome {
        rows: Vec::new(),
        series: Vec::new(),
        eigen: Vec::new(),
        failures: Vec::new(),
        timings,
        states: Vec::new(),
    };
    if shared.first && config.run.write_vtk {
        for (step, w) in shared.fine.steps.iter().zip(&shared.fine.states) {
            out.states.push((format!("fine_step{step:04}.vtk"), w.clone()));
        }
    }
    for &method in &config.run.methods {
        if method != Method::Fine {
            run_method(&shared, &problem, method, &mut out)?;
        }
    }
    Ok(out)
}

fn run_method(s: &Shared<'_>, problem: &Problem<'_, f64>, method: Method, out: &mut SampleOutcome) -> Result<()> {
    let config = s.config;
    let counts = &config.run.basis_counts;
    let max_l = config.max_basis_count();
    let h = 1.0 / from_usize::<f64>(config.mesh.coarse_nx);
    let t = Instant::now();
    let spectra: Result<Vec<PatchSpectrum<f64>>> = match method {
        Method::Cgmsfem => coupled_spectra(s.pair, s.material, &config.spectral, max_l + 1),
        Method::Gmsfem => {
            let (u, th) = counts
                .iter()
                .map(|&l| config.spectral.decoupled_split(l))
                .fold((0, 0), |a, b| (a.0.max(b.0), a.1.max(b.1)));
            decoupled_spectra(s.pair, s.material, u, th, config.spectral.dof_limit)
        }
        Method::Fine => unreachable!(),
    };
    let spectra_ms = ms(t);
    out.timings.push((format!("{}_spectra", method.as_str()), spectra_ms));
    let spectra = match spectra {
        Ok(sp) => sp,
        Err(e) => {
            for &l in counts {
                fail(s, out, method, l, &e);
            }
            return Ok(());
        }
    };
    if s.first {
        for sp in &spectra {
            for (k, z) in sp.eigenvalues.iter().enumerate().take(max_l + 1) {
                out.eigen.push(EigenRow {
                    experiment_id: s.id.clone(),
                    method: method.as_str(),
                    patch: sp.patch,
                    k: k + 1,
                    re: z.re,
                    im: z.im,
                    scaled: h * h * z.re,
                });
            }
        }
    }
    for &l in counts {
        let t = Instant::now();
        let selection = match method {
            Method::Cgmsfem => Selection::Leading(l),
            _ => {
                let (u, theta) = config.spectral.decoupled_split(l);
                Selection::Split { u, theta }
            }
        };
        let (gamma1, gamma2) = gammas(config, method);
        let lambda_l1 = eigen_decay_report(&spectra, &[l], h).map_or(f64::NAN, |r| r[0].1);
        let history = build_multiscale_basis(
            s.pair,
            s.pou,
            &spectra,
            &vec![selection; spectra.len()],
            s.dofs,
            config.spectral.drop_dependent,
        )
        .and_then(|basis| run_march(problem, &config.time_grid()?, March::Coarse(&basis), config.run.store));
        let march_ms = ms(t);
        out.timings.push((format!("{}_L{l}", method.as_str()), march_ms));
        let history = match history {
            Ok(hist) => hist,
            Err(e) => {
                fail(s, out, method, l, &e);
                continue;
            }
        };
        let last = errors(s.blocks, s.fine.last().unwrap(), history.last().unwrap());
        let report = match last {
            Ok(r) => r,
            Err(e) => {
                fail(s, out, method, l, &e);
                continue;
            }
        };
        out.rows.push(ReportRow {
            experiment_id: s.id.clone(),
            method: method.as_str(),
            l,
            gamma1,
            gamma2,
            lambda_l1,
            err_theta: report.err_theta,
            err_u: report.err_u,
            err_w: report.err_w,
            wall_ms: if config.run.record_wall_time { spectra_ms + march_ms } else { 0 },
        });
        if history.steps.len() > 1 {
            for ((&step, &time), (w, f)) in history
                .steps
                .iter()
                .zip(&history.times)
                .zip(history.states.iter().zip(&s.fine.states))
            {
                // steps without a reference energy yet (e.g. a zero initial
                // state) are skipped
                if let Ok(r) = errors(s.blocks, f, w) {
                    out.series.push(SeriesRow {
                        experiment_id: s.id.clone(),
                        method: method.as_str(),
                        l,
                        step,
                        time,
                        err_theta: r.err_theta,
                        err_u: r.err_u,
                        err_w: r.err_w,
                    });
                }
            }
        }
        if s.first && config.run.write_vtk && l == max_l {
            for (step, w) in history.steps.iter().zip(history.states) {
                out.states.push((format!("{}_L{l}_step{step:04}.vtk", method.as_str()), w));
            }
        }
    }
    Ok(())
}

/// Coupling weights of the spectral problem behind `method`.
fn gammas(config: &ExperimentConfig, method: Method) -> (f64, f64) {
    match method {
        Method::Cgmsfem => (config.spectral.gamma1, config.spectral.gamma2),
        _ => (0.0, 0.0),
    }
}

fn fail(s: &Shared<'_>, out: &mut SampleOutcome, method: Method, l: usize, e: &Error) {
    log::warn!("{} {} L={l}: {e}", s.id, method.as_str());
    out.failures.push(Failure {
        experiment_id: s.id.clone(),
        method: method.as_str(),
        l,
        message: e.to_string(),
    });
    let (gamma1, gamma2) = gammas(s.config, method);
    out.rows.push(ReportRow {
        experiment_id: s.id.clone(),
        method: method.as_str(),
        l,
        gamma1,
        gamma2,
        lambda_l1: f64::NAN,
        err_theta: f64::NAN,
        err_u: f64::NAN,
        err_w: f64::NAN,
        wall_ms: 0,
    });
}

/// A row of the consolidated sweep table: the report columns preceded by
/// the sweep axis and value, followed by `err_w(cgmsfem) / err_w(gmsfem)`
/// at the same `L` (on CGMsFEM rows only).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: &'static str,
    pub value: f64,
    pub experiment_id: String,
    pub method: &'static str,
    #[serde(rename = "L")]
    pub l: usize,
    pub gamma1: f64,
    pub gamma2: f64,
    #[serde(rename = "lambda_L1")]
    pub lambda_l1: f64,
    pub err_theta: f64,
    pub err_u: f64,
    pub err_w: f64,
    pub wall_ms: u64,
    pub cgm_gm_ratio: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub runs: Vec<(f64, ExperimentOutcome)>,
}

impl SweepOutcome {
    /// `err_w` of `method` at every sweep value, in sweep order.
    pub fn errors(&self, method: Method, l: usize) -> Vec<f64> {
        self.runs
            .iter()
            .map(|(_, o)| o.error(method, l).unwrap_or(f64::NAN))
            .collect()
    }
}

pub fn run_sweep(config: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<SweepOutcome> {
    let mut out = SweepOutcome::default();
    for &v in values {
        let c = config.at_sweep_value(axis, v)?;
        let id = format!("{}:{}={v}", config.name, axis.as_str());
        log::info!("sweep {id}");
        let run = run_experiment(&c, &id)?;
        for r in run.summary() {
            let ratio = (r.method == Method::Cgmsfem.as_str())
                .then(|| run.error(Method::Gmsfem, r.l).map(|gm| r.err_w / gm))
                .flatten();
            out.rows.push(SweepRow {
                axis: axis.as_str(),
                value: v,
                experiment_id: r.experiment_id.clone(),
                method: r.method,
                l: r.l,
                gamma1: r.gamma1,
                gamma2: r.gamma2,
                lambda_l1: r.lambda_l1,
                err_theta: r.err_theta,
                err_u: r.err_u,
                err_w: r.err_w,
                wall_ms: r.wall_ms,
                cgm_gm_ratio: ratio,
            });
        }
        out.runs.push((v, run));
    }
    Ok(out)
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct ManifestFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub name: String,
    pub command: String,
    pub package_version: &'static str,
    pub config_sha256: String,
    pub seed: u64,
    pub samples: usize,
    pub workers: usize,
    pub timings_ms: BTreeMap<String, u64>,
    pub total_ms: u64,
    pub failures: Vec<Failure>,
    pub files: Vec<ManifestFile>,
}

/// Where the artifacts of a run go and what the manifest should record.
pub struct OutputContext<'a> {
    pub dir: &'a Path,
    pub command: &'a str,
    pub workers: usize,
    pub started: Instant,
}

impl OutputContext<'_> {
    pub fn finish(&self, config: &ExperimentConfig, files: Vec<PathBuf>, timings: BTreeMap<String, u64>, failures: Vec<Failure>) -> Result<()> {
        let config_text = config.to_toml();
        let config_path = self.dir.join("config.toml");
        fs::write(&config_path, &config_text)?;
        let mut entries = Vec::new();
        for f in files.iter().chain(std::iter::once(&config_path)) {
            entries.push(ManifestFile {
                path: f.strip_prefix(self.dir).unwrap_or(f).display().to_string(),
                sha256: sha256_hex(&fs::read(f)?),
            });
        }
        let manifest = Manifest {
            name: config.name.clone(),
            command: self.command.to_string(),
            package_version: env!("CARGO_PKG_VERSION"),
            config_sha256: sha256_hex(config_text.as_bytes()),
            seed: config.run.seed,
            samples: config.run.samples,
            workers: self.workers,
            timings_ms: timings,
            total_ms: ms(self.started),
            failures,
            files: entries,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Io(e.into()))?;
        fs::write(self.dir.join("manifest.json"), text)?;
        Ok(())
    }
}

/// Writes `report.csv`, `series.csv`, `eigen.csv`, the VTK states, the
/// resolved `config.toml` and `manifest.json`.
pub fn write_experiment(ctx: &OutputContext<'_>, config: &ExperimentConfig, pair: &MeshPair<f64>, outcome: &ExperimentOutcome) -> Result<()> {
    fs::create_dir_all(ctx.dir)?;
    let mut files = Vec::new();
    let report = ctx.dir.join("report.csv");
    write_csv(&report, &outcome.rows)?;
    files.push(report);
    if !outcome.series.is_empty() {
        let p = ctx.dir.join("series.csv");
        write_csv(&p, &outcome.series)?;
        files.push(p);
    }
    let eigen = ctx.dir.join("eigen.csv");
    write_csv(&eigen, &outcome.eigen)?;
    files.push(eigen);
    if !outcome.states.is_empty() {
        let dir = ctx.dir.join("vtk");
        fs::create_dir_all(&dir)?;
        for (name, w) in &outcome.states {
            let p = dir.join(name);
            vtk::write_state(&p, &pair.fine, &format!("{} {name}", config.name), w)?;
            files.push(p);
        }
    }
    ctx.finish(config, files, outcome.timings.clone(), outcome.failures.clone())
}

/// Writes `sweep.csv` plus the per-value report tables.
pub fn write_sweep(ctx: &OutputContext<'_>, config: &ExperimentConfig, outcome: &SweepOutcome) -> Result<()> {
    fs::create_dir_all(ctx.dir)?;
    let mut files = Vec::new();
    let p = ctx.dir.join("sweep.csv");
    write_csv(&p, &outcome.rows)?;
    files.push(p);
    let all: Vec<ReportRow> = outcome.runs.iter().flat_map(|(_, o)| o.rows.clone()).collect();
    let p = ctx.dir.join("report.csv");
    write_csv(&p, &all)?;
    files.push(p);
    let mut timings = BTreeMap::new();
    let mut failures = Vec::new();
    for (_, o) in &outcome.runs {
        for (k, v) in &o.timings {
            *timings.entry(k.clone()).or_default() += v;
        }
        failures.extend(o.failures.iter().cloned());
    }
    ctx.finish(config, files, timings, failures)
}

/// Mesh pair, coupled spectra and eigenvalue table behind `basis-report`.
pub type BasisReport<T> = (MeshPair<T>, Vec<PatchSpectrum<T>>, Vec<EigenRow>);

/// Coupled spectra of a configuration's first sample and the scaled
/// eigenvalue table, for `basis-report`.
pub fn basis_report<T: Real>(config: &ExperimentConfig, modes: usize) -> Result<BasisReport<T>> {
    config.validate()?;
    faer::set_global_parallelism(faer::Par::Seq);
    let pair = config.mesh_pair::<T>()?;
    let material = config.material.build(&pair, config.run.seed)?;
    let spectra = coupled_spectra(&pair, &material, &config.spectral, modes)?;
    let h = to_f64(T::one() / from_usize::<T>(config.mesh.coarse_nx));
    let rows = spectra
        .iter()
        .flat_map(|sp| {
            sp.eigenvalues.iter().take(modes).enumerate().map(move |(k, z)| EigenRow {
                experiment_id: config.name.clone(),
                method: Method::Cgmsfem.as_str(),
                patch: sp.patch,
                k: k + 1,
                re: to_f64(z.re),
                im: to_f64(z.im),
                scaled: h * h * to_f64(z.re),
            })
        })
        .collect();
    Ok((pair, spectra, rows))
}

pub fn write_eigen_table(path: &Path, rows: &[EigenRow]) -> Result<()> {
    write_csv(path, rows)
}
