//! Experiment configuration: JSON schema and conversion into library types.

use std::path::PathBuf;

use sbv_core::boundary::LipschitzDomain;
use sbv_core::energy::{BulkDensity, SurfaceDensity};
use sbv_core::field::{FieldPreset, Modulus};
use sbv_core::mesh::{p2, Aabb};
use sbv_core::pipeline::{Ladder, PipelineConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PresetSpec {
    Affine {
        a: [f64; 2],
        b: f64,
    },
    LineStep {
        point: [f64; 2],
        normal: [f64; 2],
        amplitude: f64,
        #[serde(default)]
        slope: [f64; 2],
    },
    Indicator {
        c: f64,
    },
    GraphStep {
        c0: f64,
        amp: f64,
        freq: f64,
        #[serde(default)]
        phase: f64,
        a0: f64,
        #[serde(default)]
        a1: f64,
    },
    SmoothPlusJump {
        center: [f64; 2],
        radius: f64,
        amplitude: f64,
    },
    StackedLines {
        k: usize,
        power: f64,
    },
    Sawtooth {
        j: usize,
    },
}

impl PresetSpec {
    pub fn to_preset(&self) -> FieldPreset {
        match *self {
            PresetSpec::Affine { a, b } => FieldPreset::Affine { a, b },
            PresetSpec::LineStep {
                point,
                normal,
                amplitude,
                slope,
            } => FieldPreset::LineStep {
                point,
                normal,
                amplitude,
                slope,
            },
            PresetSpec::Indicator { c } => FieldPreset::Indicator { c },
            PresetSpec::GraphStep {
                c0,
                amp,
                freq,
                phase,
                a0,
                a1,
            } => FieldPreset::GraphStep {
                c0,
                amp,
                freq,
                phase,
                a0,
                a1,
            },
            PresetSpec::SmoothPlusJump {
                center,
                radius,
                amplitude,
            } => FieldPreset::SmoothPlusJump {
                center,
                radius,
                amplitude,
            },
            PresetSpec::StackedLines { k, power } => FieldPreset::StackedLines { k, power },
            PresetSpec::Sawtooth { j } => FieldPreset::Sawtooth { j },
        }
    }

    /// One example of every preset, in catalog order.
    pub fn examples() -> Vec<PresetSpec> {
        vec![
            PresetSpec::Affine { a: [1.0, 0.5], b: 0.0 },
            PresetSpec::LineStep {
                point: [0.5, 0.5],
                normal: [0.3, 1.0],
                amplitude: 1.0,
                slope: [0.5, -0.25],
            },
            PresetSpec::Indicator { c: 0.43 },
            PresetSpec::GraphStep {
                c0: 0.3,
                amp: 0.1,
                freq: 1.0,
                phase: 0.0,
                a0: 1.0,
                a1: 0.0,
            },
            PresetSpec::SmoothPlusJump {
                center: [0.5, 0.5],
                radius: 0.3,
                amplitude: 1.0,
            },
            PresetSpec::StackedLines { k: 100, power: 3.0 },
            PresetSpec::Sawtooth { j: 16 },
        ]
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
#[derive(Default)]
pub enum DomainSpec {
    Box { lo: [f64; 2], hi: [f64; 2] },
    Polygon { vertices: Vec<[f64; 2]> },
    Hexagon { center: [f64; 2], radius: f64 },
    /// The preset's own domain (the unit square unless the preset has one).
    #[default]
    Preset,
}


#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LadderSpec {
    Theta(Vec<f64>),
    Eps(Vec<f64>),
}

impl Default for LadderSpec {
    fn default() -> Self {
        LadderSpec::Theta(vec![0.2, 0.1, 0.05])
    }
}

impl LadderSpec {
    pub fn to_ladder(&self) -> Ladder {
        match self {
            LadderSpec::Theta(v) => Ladder::Theta(v.clone()),
            LadderSpec::Eps(v) => Ladder::Eps(v.clone()),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            LadderSpec::Theta(_) => "theta",
            LadderSpec::Eps(_) => "eps",
        }
    }

    pub fn values(&self) -> &[f64] {
        match self {
            LadderSpec::Theta(v) | LadderSpec::Eps(v) => v,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModulusSpec {
    Power { q: f64 },
    CappedPower { q: f64 },
    PlusIdentity { inner: Box<ModulusSpec> },
}

impl ModulusSpec {
    pub fn to_modulus(&self) -> Modulus {
        match self {
            ModulusSpec::Power { q } => Modulus::Power { q: *q },
            ModulusSpec::CappedPower { q } => Modulus::CappedPower { q: *q },
            ModulusSpec::PlusIdentity { inner } => Modulus::PlusIdentity(Box::new(inner.to_modulus())),
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BulkSpec {
    Power { p: f64 },
    Area,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SurfaceSpec {
    Cohesive { modulus: ModulusSpec },
    Brittle { alpha: f64 },
    Anisotropic { modulus: ModulusSpec, kappa: f64 },
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Densities {
    pub psi: BulkSpec,
    pub g: SurfaceSpec,
    pub g0: ModulusSpec,
}

impl Default for Densities {
    fn default() -> Self {
        Densities {
            psi: BulkSpec::Power { p: 2.0 },
            g: SurfaceSpec::Cohesive {
                modulus: ModulusSpec::CappedPower { q: 0.5 },
            },
            g0: ModulusSpec::CappedPower { q: 0.5 },
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSpec {
    pub residual_multiple: f64,
    pub layer_multiple: f64,
    pub band_multiple: f64,
    pub delta_prime_ratio: f64,
    pub finite_jump: bool,
}

impl Default for PipelineSpec {
    fn default() -> Self {
        let d = PipelineConfig::default();
        PipelineSpec {
            residual_multiple: d.residual_multiple,
            layer_multiple: d.layer_multiple,
            band_multiple: d.band_multiple,
            delta_prime_ratio: d.delta_prime_ratio,
            finite_jump: d.finite_jump,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectSpec {
    pub eps: f64,
    /// Grid shift; drawn from the seed when absent.
    pub zeta: Option<[f64; 2]>,
}

impl Default for ProjectSpec {
    fn default() -> Self {
        ProjectSpec { eps: 0.25, zeta: None }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ReflectSpec {
    /// Mollification radius; `0.2` times the shortest edge when absent.
    pub radius: Option<f64>,
    pub samples: usize,
    pub pairs: usize,
    pub bins: usize,
}

impl Default for ReflectSpec {
    fn default() -> Self {
        ReflectSpec {
            radius: None,
            samples: 1000,
            pairs: 10_000,
            bins: 20,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: PresetSpec,
    #[serde(default)]
    pub domain: DomainSpec,
    #[serde(default)]
    pub ladder: LadderSpec,
    #[serde(default)]
    pub densities: Densities,
    #[serde(default = "default_n_zeta")]
    pub n_zeta: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub pipeline: PipelineSpec,
    #[serde(default)]
    pub project: ProjectSpec,
    #[serde(default)]
    pub reflect: ReflectSpec,
}

fn default_n_zeta() -> usize {
    8
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        let c: ExperimentConfig = serde_json::from_str(text).map_err(|e| e.to_string())?;
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<(), String> {
        if self.n_zeta < 8 {
            return Err(format!("n_zeta must be at least 8, got {}", self.n_zeta));
        }
        let v = self.ladder.values();
        if v.is_empty() {
            return Err("ladder is empty".into());
        }
        if v.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err("ladder entries must be positive".into());
        }
        if let LadderSpec::Theta(t) = &self.ladder {
            if t.iter().any(|x| *x > 0.5) {
                return Err("theta ladder entries must lie in (0, 1/2]".into());
            }
        }
        if !(self.project.eps.is_finite() && self.project.eps > 0.0) {
            return Err("project.eps must be positive".into());
        }
        if let Some(z) = self.project.zeta {
            if (z[0] * z[0] + z[1] * z[1]).sqrt() >= self.project.eps {
                return Err("project.zeta must lie in the open eps-disc".into());
            }
        }
        for m in [self.g0_modulus(), self.surface_density_modulus()].into_iter().flatten() {
            m.validate().map_err(|e| e.to_string())?;
        }
        Ok(())
    }

    fn surface_density_modulus(&self) -> Option<Modulus> {
        match &self.densities.g {
            SurfaceSpec::Cohesive { modulus } | SurfaceSpec::Anisotropic { modulus, .. } => Some(modulus.to_modulus()),
            SurfaceSpec::Brittle { .. } => None,
        }
    }

    fn g0_modulus(&self) -> Option<Modulus> {
        Some(self.densities.g0.to_modulus())
    }

    pub fn psi(&self) -> BulkDensity {
        match self.densities.psi {
            BulkSpec::Power { p } => BulkDensity::Power { p },
            BulkSpec::Area => BulkDensity::Area,
        }
    }

    pub fn surface(&self) -> SurfaceDensity {
        match &self.densities.g {
            SurfaceSpec::Cohesive { modulus } => SurfaceDensity::Cohesive(modulus.to_modulus()),
            SurfaceSpec::Brittle { alpha } => SurfaceDensity::Brittle { alpha: *alpha },
            SurfaceSpec::Anisotropic { modulus, kappa } => SurfaceDensity::Anisotropic {
                g0: modulus.to_modulus(),
                kappa: *kappa,
            },
        }
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        let p = &self.pipeline;
        PipelineConfig {
            psi: self.psi(),
            g: self.surface(),
            g0: self.densities.g0.to_modulus(),
            p: match self.densities.psi {
                BulkSpec::Power { p } => p,
                BulkSpec::Area => 1.0,
            },
            n_zeta: self.n_zeta,
            seed: self.seed,
            residual_multiple: p.residual_multiple,
            layer_multiple: p.layer_multiple,
            band_multiple: p.band_multiple,
            delta_prime_ratio: p.delta_prime_ratio,
            finite_jump: p.finite_jump,
        }
    }

    /// Axis-aligned domain for projection and convergence runs.
    pub fn domain_box(&self, preset_domain: Option<Aabb<2>>) -> Result<Aabb<2>, String> {
        let b = match &self.domain {
            DomainSpec::Box { lo, hi } => Aabb::new(p2(lo[0], lo[1]), p2(hi[0], hi[1])),
            DomainSpec::Preset => preset_domain.unwrap_or_else(sbv_core::field::unit_box),
            _ => return Err("this command needs a box domain".into()),
        };
        if !b.is_full_dimensional() {
            return Err("box domain has no interior".into());
        }
        Ok(b)
    }

    /// Polygonal domain for the collar reflection.
    pub fn lipschitz_domain(&self) -> Result<LipschitzDomain, String> {
        let verts = match &self.domain {
            DomainSpec::Box { lo, hi } => vec![p2(lo[0], lo[1]), p2(hi[0], lo[1]), p2(hi[0], hi[1]), p2(lo[0], hi[1])],
            DomainSpec::Preset => return Ok(LipschitzDomain::unit_square()),
            DomainSpec::Polygon { vertices } => vertices.iter().map(|v| p2(v[0], v[1])).collect(),
            DomainSpec::Hexagon { center, radius } => {
                return Ok(LipschitzDomain::hexagon(p2(center[0], center[1]), *radius));
            }
        };
        LipschitzDomain::new(verts).map_err(|e| e.to_string())
    }
}
