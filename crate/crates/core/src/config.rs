//! Experiment configuration (TOML) and the built-in presets.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::coeffs::{kle_phases, periodic_phases, raster_field, read_raster, two_phase, InclusionShape, KleBasis, KleSpec, MaterialField};
use crate::error::{Error, Result};
use crate::mesh::{build_mesh_pair, Boundary, MeshPair, PouKind};
use crate::scalar::{lit, Real};
use crate::spectral::SpectralConfig;
use crate::timeloop::{Sources, StoragePolicy, TimeGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub mesh: MeshConfig,
    pub time: TimeConfig,
    pub material: MaterialConfig,
    pub sources: SourceConfig,
    pub spectral: SpectralConfig,
    pub run: RunConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshConfig {
    pub nx: usize,
    pub ny: usize,
    pub coarse_nx: usize,
    pub coarse_ny: usize,
    #[serde(default)]
    pub boundary: Boundary,
    #[serde(default)]
    pub pou: PouKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub final_time: f64,
    pub tau: f64,
}

/// Spatial arrangement of the two phases used by [`FieldSpec::TwoPhase`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PhaseLayout {
    /// No two-phase fields.
    None,
    Periodic { period: usize, shape: InclusionShape },
    /// Inclusions where a fixed KLE sample exceeds its mean.
    KleThreshold {
        length: f64,
        #[serde(default = "default_terms")]
        terms: usize,
        seed: u64,
    },
}

fn default_terms() -> usize {
    50
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FieldSpec {
    Constant {
        value: f64,
    },
    /// `low` in the background, `high` in the inclusions (swapped when
    /// `inverted`).
    TwoPhase {
        low: f64,
        high: f64,
        #[serde(default)]
        inverted: bool,
    },
    /// Lognormal field, resampled for every sample of the run.
    Kle(KleSpec),
    Raster {
        path: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialConfig {
    pub layout: PhaseLayout,
    pub lambda: FieldSpec,
    pub mu: FieldSpec,
    pub kappa: FieldSpec,
    pub beta: FieldSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ForcePreset {
    Zero,
    Constant { value: [f64; 2] },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum HeatPreset {
    Zero,
    Constant {
        value: f64,
    },
    /// `a exp(-|x - c|² / (2 w²))`
    Gaussian {
        amplitude: f64,
        center: [f64; 2],
        width: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Theta0Preset {
    Zero,
    Constant {
        value: f64,
    },
    /// `a x(1-x) y(1-y)`
    Bubble {
        amplitude: f64,
    },
    /// `cos πx cos πy + offset`
    Cosine {
        offset: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    pub force: ForcePreset,
    pub heat: HeatPreset,
    pub theta0: Theta0Preset,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Fine,
    Cgmsfem,
    Gmsfem,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Fine => "fine",
            Method::Cgmsfem => "cgmsfem",
            Method::Gmsfem => "gmsfem",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Basis functions per patch, one run per entry.
    pub basis_counts: Vec<usize>,
    pub methods: Vec<Method>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub store: StoragePolicy,
    /// Fill the `wall_ms` column. Off by default so that reports are
    /// reproducible byte for byte; the manifest always records timings.
    #[serde(default)]
    pub record_wall_time: bool,
    /// Write VTK files of the stored states.
    #[serde(default = "default_true")]
    pub write_vtk: bool,
}

fn default_samples() -> usize {
    1
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    /// `basis_counts` takes the values.
    L,
    /// `high / low` of the two-phase `beta` field.
    BetaContrast,
    /// Standard deviation of the KLE `beta` field.
    Sigma,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::L => "L",
            SweepAxis::BetaContrast => "beta_contrast",
            SweepAxis::Sigma => "sigma",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "L" | "l" => Ok(SweepAxis::L),
            "beta_contrast" | "beta-contrast" => Ok(SweepAxis::BetaContrast),
            "sigma" => Ok(SweepAxis::Sigma),
            _ => Err(format!("unknown sweep axis {s:?} (expected L, beta-contrast or sigma)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

/// Name and TOML text of every built-in preset.
pub const PRESETS: &[(&str, &str)] = &[
    ("periodic", include_str!("../presets/periodic.toml")),
    ("periodic-full", include_str!("../presets/periodic-full.toml")),
    ("test-a", include_str!("../presets/test-a.toml")),
    ("test-a-desk", include_str!("../presets/test-a-desk.toml")),
    ("test-b", include_str!("../presets/test-b.toml")),
    ("test-b-desk", include_str!("../presets/test-b-desk.toml")),
    ("zero-source", include_str!("../presets/zero-source.toml")),
];

pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (_, text) = PRESETS.iter().find(|(n, _)| *n == name).ok_or_else(|| {
            Error::config(
                "preset",
                format!("unknown preset {name:?}; available: {}", preset_names().collect::<Vec<_>>().join(", ")),
            )
        })?;
        Self::from_toml(text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| {
            let path = e.span().map_or_else(|| "<document>".to_string(), |s| format!("byte {}..{}", s.start, s.end));
            Error::config(path, e.message().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut config = Self::from_toml(&text).map_err(|e| match e {
            Error::Config { path: p, message } => Error::Config {
                path: format!("{}: {p}", path.display()),
                message,
            },
            other => other,
        })?;
        // raster paths are relative to the config file
        if let Some(dir) = path.parent() {
            for spec in config.material.fields_mut() {
                if let FieldSpec::Raster { path } = spec {
                    if path.is_relative() {
                        *path = dir.join(&*path);
                    }
                }
            }
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.mesh;
        for (path, v) in [("mesh.nx", m.nx), ("mesh.ny", m.ny), ("mesh.coarse_nx", m.coarse_nx), ("mesh.coarse_ny", m.coarse_ny)] {
            if v == 0 {
                return Err(Error::config(path, "must be at least 1"));
            }
        }
        if !m.nx.is_multiple_of(m.coarse_nx) {
            return Err(Error::config("mesh.coarse_nx", format!("must divide mesh.nx = {}", m.nx)));
        }
        if !m.ny.is_multiple_of(m.coarse_ny) {
            return Err(Error::config("mesh.coarse_ny", format!("must divide mesh.ny = {}", m.ny)));
        }
        if m.boundary == Boundary::None {
            return Err(Error::config("mesh.boundary", "the displacement needs Dirichlet nodes"));
        }
        TimeGrid::uniform(self.time.final_time, self.time.tau)
            .map_err(|e| Error::config("time", e.to_string()))?;
        self.material.validate()?;
        if !self.spectral.gamma1.is_finite() || !self.spectral.gamma2.is_finite() {
            return Err(Error::config("spectral", "gamma1 and gamma2 must be finite"));
        }
        let r = &self.run;
        if r.basis_counts.is_empty() || r.basis_counts.contains(&0) {
            return Err(Error::config("run.basis_counts", "needs at least one positive entry"));
        }
        if r.methods.is_empty() {
            return Err(Error::config("run.methods", "needs at least one method"));
        }
        if r.samples == 0 {
            return Err(Error::config("run.samples", "must be at least 1"));
        }
        if let Some(s) = &self.sweep {
            self.check_sweep(s)?;
        }
        Ok(())
    }

    pub fn check_sweep(&self, sweep: &SweepConfig) -> Result<()> {
        if sweep.values.is_empty() {
            return Err(Error::config("sweep.values", "needs at least one value"));
        }
        match sweep.axis {
            SweepAxis::L => {
                if sweep.values.iter().any(|&v| !(v >= 1.0 && v.fract() == 0.0)) {
                    return Err(Error::config("sweep.values", "L values must be positive integers"));
                }
            }
            SweepAxis::BetaContrast => {
                if !matches!(self.material.beta, FieldSpec::TwoPhase { .. }) {
                    return Err(Error::config("material.beta", "a beta-contrast sweep needs a two-phase beta"));
                }
                if sweep.values.iter().any(|&v| !(v >= 1.0)) {
                    return Err(Error::config("sweep.values", "contrasts must be at least 1"));
                }
            }
            SweepAxis::Sigma => {
                if !matches!(self.material.beta, FieldSpec::Kle(_)) {
                    return Err(Error::config("material.beta", "a sigma sweep needs a KLE beta"));
                }
                if sweep.values.iter().any(|&v| !(v >= 0.0)) {
                    return Err(Error::config("sweep.values", "sigma values must be non-negative"));
                }
            }
        }
        Ok(())
    }

    /// The configuration at one sweep value.
    pub fn at_sweep_value(&self, axis: SweepAxis, value: f64) -> Result<Self> {
        let mut c = self.clone();
        c.sweep = None;
        match axis {
            SweepAxis::L => c.run.basis_counts = vec![value as usize],
            SweepAxis::BetaContrast => match &mut c.material.beta {
                FieldSpec::TwoPhase { low, high, .. } => *high = *low * value,
                _ => return Err(Error::config("material.beta", "a beta-contrast sweep needs a two-phase beta")),
            },
            SweepAxis::Sigma => match &mut c.material.beta {
                FieldSpec::Kle(spec) => spec.sigma = value,
                _ => return Err(Error::config("material.beta", "a sigma sweep needs a KLE beta")),
            },
        }
        c.validate()?;
        Ok(c)
    }

    pub fn mesh_pair<T: Real>(&self) -> Result<MeshPair<T>> {
        let m = &self.mesh;
        build_mesh_pair(m.nx, m.ny, m.coarse_nx, m.coarse_ny, m.boundary)
    }

    pub fn time_grid<T: Real>(&self) -> Result<TimeGrid<T>> {
        TimeGrid::uniform(lit(self.time.final_time), lit(self.time.tau))
    }

    pub fn max_basis_count(&self) -> usize {
        self.run.basis_counts.iter().copied().max().unwrap_or(0)
    }

    /// Whether any coefficient is random, i.e. changes between samples.
    pub fn is_random(&self) -> bool {
        self.material.fields().iter().any(|(_, f)| matches!(f, FieldSpec::Kle(_)))
    }
}

impl MaterialConfig {
    pub fn fields(&self) -> [(&'static str, &FieldSpec); 4] {
        [("lambda", &self.lambda), ("mu", &self.mu), ("kappa", &self.kappa), ("beta", &self.beta)]
    }

    fn fields_mut(&mut self) -> [&mut FieldSpec; 4] {
        [&mut self.lambda, &mut self.mu, &mut self.kappa, &mut self.beta]
    }

    fn validate(&self) -> Result<()> {
        for (name, spec) in self.fields() {
            let path = format!("material.{name}");
            match spec {
                FieldSpec::Constant { value } if !(*value > 0.0) => {
                    return Err(Error::config(path, "value must be positive"));
                }
                FieldSpec::TwoPhase { low, high, .. } => {
                    if !(*low > 0.0 && *high > 0.0) {
                        return Err(Error::config(path, "phase values must be positive"));
                    }
                    if self.layout == PhaseLayout::None {
                        return Err(Error::config(path, "two-phase fields need a material.layout"));
                    }
                }
                FieldSpec::Kle(k) if !(k.length > 0.0 && k.sigma >= 0.0 && k.terms > 0) => {
                    return Err(Error::config(path, "KLE needs length > 0, sigma >= 0 and terms >= 1"));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Builds the per-element coefficients of one sample. KLE fields draw
    /// from `seed`, offset per coefficient so that they are independent.
    pub fn build<T: Real>(&self, pair: &MeshPair<T>, seed: u64) -> Result<MaterialField<T>> {
        let mesh = &pair.fine;
        let phases = match &self.layout {
            PhaseLayout::None => None,
            PhaseLayout::Periodic { period, shape } => Some(periodic_phases(mesh, *period, *shape)?),
            PhaseLayout::KleThreshold { length, terms, seed } => {
                let spec = KleSpec {
                    length: *length,
                    sigma: 1.0,
                    mean: 0.0,
                    terms: *terms,
                };
                Some(kle_phases(mesh, &spec, *seed)?)
            }
        };
        let mut kle_cache: Option<(f64, usize, KleBasis<T>)> = None;
        let mut build = |k: u64, spec: &FieldSpec| -> Result<Vec<T>> {
            let ne = mesh.element_count();
            match spec {
                FieldSpec::Constant { value } => Ok(vec![lit(*value); ne]),
                FieldSpec::TwoPhase { low, high, inverted } => {
                    let phases = phases.as_ref().expect("validated layout");
                    let (a, b) = if *inverted { (*high, *low) } else { (*low, *high) };
                    Ok(two_phase(phases, lit(a), lit(b)))
                }
                FieldSpec::Kle(spec) => {
                    let fresh = !matches!(&kle_cache, Some((l, t, _)) if *l == spec.length && *t == spec.terms);
                    if fresh {
                        kle_cache = Some((spec.length, spec.terms, KleBasis::for_mesh(mesh, spec)?));
                    }
                    let basis = &kle_cache.as_ref().unwrap().2;
                    basis.sample(spec, seed.wrapping_mul(4).wrapping_add(k))
                }
                FieldSpec::Raster { path } => raster_field(mesh, &read_raster(path)?),
            }
        };
        let field = MaterialField {
            lambda: build(0, &self.lambda)?,
            mu: build(1, &self.mu)?,
            kappa: build(2, &self.kappa)?,
            beta: build(3, &self.beta)?,
        };
        field.validate(mesh.element_count())?;
        Ok(field)
    }
}

impl SourceConfig {
    pub fn is_zero(&self) -> bool {
        matches!(self.force, ForcePreset::Zero | ForcePreset::Constant { value: [0.0, 0.0] })
            && matches!(self.heat, HeatPreset::Zero | HeatPreset::Constant { value: 0.0 })
            && matches!(self.theta0, Theta0Preset::Zero | Theta0Preset::Constant { value: 0.0 })
    }

    pub fn build<T: Real>(&self) -> Sources<T> {
        let mut s = Sources::zero();
        if let ForcePreset::Constant { value } = self.force {
            let v = [lit::<T>(value[0]), lit::<T>(value[1])];
            s.force = Arc::new(move |_, _| v);
        }
        match self.heat {
            HeatPreset::Zero => {}
            HeatPreset::Constant { value } => {
                let v = lit::<T>(value);
                s.heat = Arc::new(move |_, _| v);
            }
            HeatPreset::Gaussian {
                amplitude,
                center,
                width,
            } => {
                let (a, cx, cy, w) = (lit::<T>(amplitude), lit::<T>(center[0]), lit::<T>(center[1]), lit::<T>(width));
                let two = lit::<T>(2.0);
                s.heat = Arc::new(move |p, _| {
                    let (dx, dy) = (p[0] - cx, p[1] - cy);
                    a * (-(dx * dx + dy * dy) / (two * w * w)).exp()
                });
            }
        }
        match self.theta0 {
            Theta0Preset::Zero => {}
            Theta0Preset::Constant { value } => {
                let v = lit::<T>(value);
                s.theta0 = Arc::new(move |_| v);
            }
            Theta0Preset::Bubble { amplitude } => {
                let a = lit::<T>(amplitude);
                s.theta0 = Arc::new(move |p| a * p[0] * (T::one() - p[0]) * p[1] * (T::one() - p[1]));
            }
            Theta0Preset::Cosine { offset } => {
                let (o, pi) = (lit::<T>(offset), lit::<T>(std::f64::consts::PI));
                s.theta0 = Arc::new(move |p| (pi * p[0]).cos() * (pi * p[1]).cos() + o);
            }
        }
        s
    }
}
