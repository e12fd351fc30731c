//! Flat `key = value` experiment configuration.

use std::fmt::Write as _;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::{GaussianDomainsConfig, TwoMoonsConfig};
use crate::diffusion::{DenoiserConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::guidance::{ClassifierConfig, GuidanceConfig, GuidanceRule};
use crate::metrics::ADistanceConfig;
use crate::sampler::{ClassRule, SolverFormula};
use crate::uda::{Regularizer, UdaConfig};

/// Which pipeline is run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// UDA on `D_s → D_t`, no generation.
    Baseline,
    /// UDA on `(D_s ∪ pseudo-labeled D_t) → D_t`.
    PseudoLabel,
    /// Denoiser trained on `D_t` alone, sampled without guidance.
    NoDomainGuidance,
    /// UDA on `D_g → D_t`.
    GeneratedOnly,
    /// UDA on `(D_s ∪ D_g) → D_t`.
    Dacdm,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::PseudoLabel,
        Variant::NoDomainGuidance,
        Variant::GeneratedOnly,
        Variant::Dacdm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::PseudoLabel => "pseudo_label",
            Variant::NoDomainGuidance => "no_domain_guidance",
            Variant::GeneratedOnly => "generated_only",
            Variant::Dacdm => "dacdm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant `{s}`")))
    }

    pub fn generates(self) -> bool {
        matches!(
            self,
            Variant::NoDomainGuidance | Variant::GeneratedOnly | Variant::Dacdm
        )
    }
}

/// How class and domain are imposed on generated samples: each by a model
/// condition or by classifier guidance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ControlMode {
    pub class_by_guidance: bool,
    pub domain_by_guidance: bool,
}

impl ControlMode {
    pub const DEFAULT: ControlMode = ControlMode {
        class_by_guidance: false,
        domain_by_guidance: true,
    };

    pub fn name(self) -> &'static str {
        match (self.class_by_guidance, self.domain_by_guidance) {
            (false, false) => "condition_condition",
            (false, true) => "condition_guidance",
            (true, false) => "guidance_condition",
            (true, true) => "guidance_guidance",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let (c, d) = s
            .split_once('_')
            .ok_or_else(|| Error::config(format!("control mode `{s}` is not `<class>_<domain>`")))?;
        let side = |v: &str| match v {
            "condition" => Ok(false),
            "guidance" => Ok(true),
            _ => Err(Error::config(format!("control `{v}` must be condition or guidance"))),
        };
        Ok(ControlMode {
            class_by_guidance: side(c)?,
            domain_by_guidance: side(d)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSpec {
    TwoMoons(TwoMoonsConfig),
    Gaussian(GaussianDomainsConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub variant: Variant,
    pub control: ControlMode,
    pub data: DataSpec,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub denoiser: DenoiserConfig,
    /// `seed` is ignored; stage seeds derive from the master seed.
    pub denoiser_train: TrainConfig,
    pub classifier: ClassifierConfig,
    pub classifier_train: TrainConfig,
    pub guidance: GuidanceConfig,
    pub solver_steps: usize,
    pub solver_formula: SolverFormula,
    /// Clamp `x_θ` to the denoiser's training box widened by this fraction of
    /// its extent; `None` disables clamping.
    pub clip_margin: Option<f64>,
    /// Generated samples per class (`N_g = K · per_class`).
    pub per_class: usize,
    pub class_rule: ClassRule,
    pub uda: UdaConfig,
    /// Regularizer of the pseudo-labeling model `f*` (defaults to `uda.regularizer`).
    pub pseudo_regularizer: Option<Regularizer>,
    pub a_distance: Option<ADistanceConfig>,
    pub bound: bool,
    pub grid_dirs: usize,
    pub grid_biases: usize,
    pub delta: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            variant: Variant::Dacdm,
            control: ControlMode::DEFAULT,
            data: DataSpec::TwoMoons(TwoMoonsConfig::default()),
            steps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
            denoiser: DenoiserConfig {
                embed_std: 1.0,
                ..DenoiserConfig::default()
            },
            denoiser_train: TrainConfig {
                lr: 0.05,
                batch: 64,
                iters: 30000,
                seed: 0,
            },
            classifier: ClassifierConfig::default(),
            classifier_train: TrainConfig {
                lr: 0.05,
                batch: 64,
                iters: 1500,
                seed: 0,
            },
            guidance: GuidanceConfig::default(),
            solver_steps: 20,
            solver_formula: SolverFormula::Validated,
            clip_margin: Some(0.1),
            per_class: 200,
            class_rule: ClassRule::PerClass,
            uda: UdaConfig::default(),
            pseudo_regularizer: None,
            a_distance: Some(ADistanceConfig::default()),
            bound: true,
            grid_dirs: 24,
            grid_biases: 16,
            delta: 0.05,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse_num(key, p.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(format!("`{key}` must be true or false"))),
    }
}

impl ExperimentConfig {
    /// The derived per-stage learning setup of the UDA model `f*`.
    pub fn pseudo_uda(&self) -> UdaConfig {
        UdaConfig {
            regularizer: self.pseudo_regularizer.unwrap_or(self.uda.regularizer),
            ..self.uda.clone()
        }
    }

    pub fn n_classes(&self) -> usize {
        match &self.data {
            DataSpec::TwoMoons(_) => 2,
            DataSpec::Gaussian(g) => g.class_offsets.len(),
        }
    }

    fn moons_mut(&mut self, key: &str) -> Result<&mut TwoMoonsConfig> {
        match &mut self.data {
            DataSpec::TwoMoons(m) => Ok(m),
            _ => Err(Error::config(format!("`{key}` needs data.kind = two_moons"))),
        }
    }

    fn gauss_mut(&mut self, key: &str) -> Result<&mut GaussianDomainsConfig> {
        match &mut self.data {
            DataSpec::Gaussian(g) => Ok(g),
            _ => Err(Error::config(format!("`{key}` needs data.kind = gaussian"))),
        }
    }

    /// Sets one key. `data.kind` resets the data block to that kind's defaults.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "variant" => self.variant = Variant::parse(v)?,
            "control" => self.control = ControlMode::parse(v)?,
            "data.kind" => {
                self.data = match v {
                    "two_moons" => DataSpec::TwoMoons(TwoMoonsConfig::default()),
                    "gaussian" => DataSpec::Gaussian(GaussianDomainsConfig {
                        mu_source: vec![0.0, 0.0],
                        mu_target: vec![2.0, 0.0],
                        std: 0.5,
                        class_offsets: vec![vec![0.0, 1.0], vec![0.0, -1.0]],
                        n_per_class: vec![100, 100],
                    }),
                    _ => return Err(Error::config(format!("unknown data.kind `{v}`"))),
                }
            }
            "data.n_source" => self.moons_mut(key)?.n_source = parse_num(key, v)?,
            "data.n_target" => self.moons_mut(key)?.n_target = parse_num(key, v)?,
            "data.rotation_deg" => self.moons_mut(key)?.rotation_deg = parse_num(key, v)?,
            "data.translation" => self.moons_mut(key)?.translation = parse_list(key, v)?,
            "data.noise_std" => self.moons_mut(key)?.noise_std = parse_num(key, v)?,
            "data.mu_source" => self.gauss_mut(key)?.mu_source = parse_list(key, v)?,
            "data.mu_target" => self.gauss_mut(key)?.mu_target = parse_list(key, v)?,
            "data.std" => self.gauss_mut(key)?.std = parse_num(key, v)?,
            "data.class_offsets" => {
                self.gauss_mut(key)?.class_offsets = v.split(';').map(|o| parse_list(key, o)).collect::<Result<_>>()?
            }
            "data.n_per_class" => self.gauss_mut(key)?.n_per_class = parse_list(key, v)?,
            "diffusion.T" => self.steps = parse_num(key, v)?,
            "diffusion.beta_start" => self.beta_start = parse_num(key, v)?,
            "diffusion.beta_end" => self.beta_end = parse_num(key, v)?,
            "denoiser.hidden" => self.denoiser.hidden = parse_list(key, v)?,
            "denoiser.time_dim" => self.denoiser.time_dim = parse_num(key, v)?,
            "denoiser.time_scale" => self.denoiser.time_scale = parse_num(key, v)?,
            "denoiser.out_scale" => self.denoiser.out_scale = parse_num(key, v)?,
            "denoiser.embed_std" => self.denoiser.embed_std = parse_num(key, v)?,
            "denoiser.lr" => self.denoiser_train.lr = parse_num(key, v)?,
            "denoiser.batch" => self.denoiser_train.batch = parse_num(key, v)?,
            "denoiser.iters" => self.denoiser_train.iters = parse_num(key, v)?,
            "classifier.hidden" => self.classifier.hidden = parse_list(key, v)?,
            "classifier.time_dim" => self.classifier.time_dim = parse_num(key, v)?,
            "classifier.lr" => self.classifier_train.lr = parse_num(key, v)?,
            "classifier.batch" => self.classifier_train.batch = parse_num(key, v)?,
            "classifier.iters" => self.classifier_train.iters = parse_num(key, v)?,
            "guidance.scale" => self.guidance.scale = parse_num(key, v)?,
            "guidance.rule" => self.guidance.rule = GuidanceRule::parse(v)?,
            "solver.M" => self.solver_steps = parse_num(key, v)?,
            "solver.formula" => self.solver_formula = SolverFormula::parse(v)?,
            "solver.clip_margin" => self.clip_margin = if v == "none" { None } else { Some(parse_num(key, v)?) },
            "generate.per_class" => self.per_class = parse_num(key, v)?,
            "generate.class_rule" => self.class_rule = ClassRule::parse(v)?,
            "uda.regularizer" => self.uda.regularizer = Regularizer::parse(v)?,
            "uda.beta" => self.uda.beta = parse_num(key, v)?,
            "uda.hidden" => self.uda.hidden = parse_list(key, v)?,
            "uda.feature_dim" => self.uda.feature_dim = parse_num(key, v)?,
            "uda.temperature" => self.uda.temperature = parse_num(key, v)?,
            "uda.lr" => self.uda.lr = parse_num(key, v)?,
            "uda.batch" => self.uda.batch = parse_num(key, v)?,
            "uda.iters" => self.uda.iters = parse_num(key, v)?,
            "uda.beta_ramp" => self.uda.beta_ramp = parse_num(key, v)?,
            "pseudo.regularizer" => {
                self.pseudo_regularizer = match v {
                    "same" => None,
                    _ => Some(Regularizer::parse(v)?),
                }
            }
            "metrics.a_distance" => {
                self.a_distance = parse_bool(key, v)?.then(|| self.a_distance.clone().unwrap_or_default())
            }
            "metrics.a_distance_hidden" => {
                self.a_distance.get_or_insert_with(Default::default).hidden = parse_list(key, v)?
            }
            "metrics.a_distance_iters" => {
                self.a_distance.get_or_insert_with(Default::default).iters = parse_num(key, v)?
            }
            "metrics.bound" => self.bound = parse_bool(key, v)?,
            "metrics.grid_dirs" => self.grid_dirs = parse_num(key, v)?,
            "metrics.grid_biases" => self.grid_biases = parse_num(key, v)?,
            "metrics.delta" => self.delta = parse_num(key, v)?,
            _ => return Err(Error::config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Canonical `(key, value)` list; `parse(to_text())` reproduces the config.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let mut e: Vec<(&'static str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("variant", self.variant.name().into()),
            ("control", self.control.name().into()),
        ];
        match &self.data {
            DataSpec::TwoMoons(m) => e.extend([
                ("data.kind", "two_moons".into()),
                ("data.n_source", m.n_source.to_string()),
                ("data.n_target", m.n_target.to_string()),
                ("data.rotation_deg", m.rotation_deg.to_string()),
                ("data.translation", join(&m.translation)),
                ("data.noise_std", m.noise_std.to_string()),
            ]),
            DataSpec::Gaussian(g) => e.extend([
                ("data.kind", "gaussian".into()),
                ("data.mu_source", join(&g.mu_source)),
                ("data.mu_target", join(&g.mu_target)),
                ("data.std", g.std.to_string()),
                (
                    "data.class_offsets",
                    g.class_offsets.iter().map(|o| join(o)).collect::<Vec<_>>().join(";"),
                ),
                ("data.n_per_class", join(&g.n_per_class)),
            ]),
        }
        e.extend([
            ("diffusion.T", self.steps.to_string()),
            ("diffusion.beta_start", self.beta_start.to_string()),
            ("diffusion.beta_end", self.beta_end.to_string()),
            ("denoiser.hidden", join(&self.denoiser.hidden)),
            ("denoiser.time_dim", self.denoiser.time_dim.to_string()),
            ("denoiser.time_scale", self.denoiser.time_scale.to_string()),
            ("denoiser.out_scale", self.denoiser.out_scale.to_string()),
            ("denoiser.embed_std", self.denoiser.embed_std.to_string()),
            ("denoiser.lr", self.denoiser_train.lr.to_string()),
            ("denoiser.batch", self.denoiser_train.batch.to_string()),
            ("denoiser.iters", self.denoiser_train.iters.to_string()),
            ("classifier.hidden", join(&self.classifier.hidden)),
            ("classifier.time_dim", self.classifier.time_dim.to_string()),
            ("classifier.lr", self.classifier_train.lr.to_string()),
            ("classifier.batch", self.classifier_train.batch.to_string()),
            ("classifier.iters", self.classifier_train.iters.to_string()),
            ("guidance.scale", self.guidance.scale.to_string()),
            ("guidance.rule", self.guidance.rule.name().into()),
            ("solver.M", self.solver_steps.to_string()),
            ("solver.formula", self.solver_formula.name().into()),
            (
                "solver.clip_margin",
                self.clip_margin.map_or("none".into(), |m| m.to_string()),
            ),
            ("generate.per_class", self.per_class.to_string()),
            ("generate.class_rule", self.class_rule.name().into()),
            ("uda.regularizer", self.uda.regularizer.name().into()),
            ("uda.beta", self.uda.beta.to_string()),
            ("uda.hidden", join(&self.uda.hidden)),
            ("uda.feature_dim", self.uda.feature_dim.to_string()),
            ("uda.temperature", self.uda.temperature.to_string()),
            ("uda.lr", self.uda.lr.to_string()),
            ("uda.batch", self.uda.batch.to_string()),
            ("uda.iters", self.uda.iters.to_string()),
            ("uda.beta_ramp", self.uda.beta_ramp.to_string()),
            (
                "pseudo.regularizer",
                self.pseudo_regularizer.map_or("same".into(), |r| r.name().into()),
            ),
            ("metrics.a_distance", self.a_distance.is_some().to_string()),
        ]);
        if let Some(a) = &self.a_distance {
            e.push(("metrics.a_distance_hidden", join(&a.hidden)));
            e.push(("metrics.a_distance_iters", a.iters.to_string()));
        }
        e.extend([
            ("metrics.bound", self.bound.to_string()),
            ("metrics.grid_dirs", self.grid_dirs.to_string()),
            ("metrics.grid_biases", self.grid_biases.to_string()),
            ("metrics.delta", self.delta.to_string()),
        ]);
        e
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    /// Starts from the defaults and applies every `key = value` line; `#`
    /// starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        // data.kind first so that data keys apply to the right block
        let lines: Vec<(usize, &str, &str)> = text
            .lines()
            .enumerate()
            .filter_map(|(i, l)| {
                let l = l.split('#').next().unwrap_or("").trim();
                (!l.is_empty()).then_some((i + 1, l))
            })
            .map(|(no, l)| {
                let (k, v) = l
                    .split_once('=')
                    .ok_or_else(|| Error::parse(no, format!("expected `key = value`, found `{l}`")))?;
                Ok((no, k.trim(), v.trim()))
            })
            .collect::<Result<_>>()?;
        let mut ordered: Vec<&(usize, &str, &str)> = lines.iter().filter(|l| l.1 == "data.kind").collect();
        ordered.extend(lines.iter().filter(|l| l.1 != "data.kind"));
        for (no, k, v) in ordered {
            cfg.set(k, v).map_err(|e| Error::parse(*no, e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.solver_steps == 0 || self.solver_steps >= self.steps {
            return Err(Error::config("solver.M must lie in 1..diffusion.T"));
        }
        if self.clip_margin.is_some_and(|m| !(m.is_finite() && m >= 0.0)) {
            return Err(Error::config("solver.clip_margin must be finite and >= 0, or none"));
        }
        if self.variant.generates() && self.per_class == 0 {
            return Err(Error::config(
                "generate.per_class must be >= 1 for generating variants (use variant = baseline instead)",
            ));
        }
        if !self.guidance.scale.is_finite() || self.guidance.scale < 0.0 {
            return Err(Error::config("guidance.scale must be finite and >= 0"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config("metrics.delta must lie in (0, 1)"));
        }
        self.uda.validate()?;
        self.denoiser_train.validate()?;
        self.classifier_train.validate()?;
        crate::schedule::NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        hash_text(&self.to_text())
    }
}

pub fn hash_text(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().take(8).fold(String::new(), |mut s, b| {
        write!(s, "{b:02x}").unwrap();
        s
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_hash_stability() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let mut other = cfg.clone();
        other.set("guidance.scale", "2").unwrap();
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn gaussian_block_round_trips() {
        let cfg = ExperimentConfig::parse("data.std = 0.3\ndata.kind = gaussian\n").unwrap();
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(cfg.n_classes(), 2);
    }

    #[test]
    fn errors_carry_line_numbers() {
        match ExperimentConfig::parse("seed = 1\n\nbogus = 2\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(ExperimentConfig::parse("generate.per_class = 0").is_err());
        assert!(ExperimentConfig::parse("generate.per_class = 0\nvariant = baseline").is_ok());
        assert!(ExperimentConfig::parse("solver.M = 101").is_err());
        assert!(ExperimentConfig::parse("data.std = 1").is_err());
    }

    #[test]
    fn control_mode_names() {
        for s in [
            "condition_condition",
            "condition_guidance",
            "guidance_condition",
            "guidance_guidance",
        ] {
            assert_eq!(ControlMode::parse(s).unwrap().name(), s);
        }
        assert!(ControlMode::parse("guidance").is_err());
    }
}
