//! End-to-end orchestration: pseudo-labeler, denoiser, classifiers,
//! generation, augmented-source UDA and evaluation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::data::{gen_gaussian_domains, gen_two_moons_shift, Domain, DomainDataset};
use crate::diffusion::{train_denoiser, Condition, ConditionedDenoiser};
use crate::error::{Error, Result};
use crate::guidance::{train_class_classifier, train_domain_classifier, Guide, GuideLabel, NoisyClassifier};
use crate::metrics::{a_distance, bound_report, BoundInputs, BoundReport, HypothesisGrid};
use crate::rng::derive_seed;
use crate::sampler::{generate_dataset, make_plan, DataBox, GenerateConfig, ModelInput, Sampler};
use crate::schedule::NoiseSchedule;
use crate::uda::{augment_source, evaluate, pseudo_label, train_uda, Regularizer, TaskModel, UdaConfig};

use super::config::{hash_text, DataSpec, ExperimentConfig, Variant};
use super::store::StageStore;

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Complete,
    Failed { stage: String, message: String },
}

/// Everything a run reports. Wall times are kept apart from metric values so
/// that reruns compare bit-exactly on [`RunManifest::metrics_csv`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub variant: Variant,
    pub status: RunStatus,
    pub pseudo_label_accuracy: Option<f64>,
    pub target_accuracy: Option<f64>,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub n_generated: usize,
    pub eta: Option<f64>,
    /// `(pair, d_A)` with pairs `s_t`, `g_t`, `shat_t`.
    pub a_distance: Vec<(String, f64)>,
    pub bound: Option<BoundReport>,
    /// Domain-classifier accuracy on noised training points, by timestep.
    pub classifier_accuracy_by_t: Vec<(usize, f64)>,
    /// Free-form `key=value` facts about the run (estimators, true data
    /// parameters for Gaussian domains).
    pub notes: Vec<(String, String)>,
    pub stage_seconds: Vec<(String, f64)>,
    pub files: Vec<PathBuf>,
}

impl RunManifest {
    fn new(cfg: &ExperimentConfig) -> Self {
        RunManifest {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            variant: cfg.variant,
            status: RunStatus::Complete,
            pseudo_label_accuracy: None,
            target_accuracy: None,
            per_class_accuracy: Vec::new(),
            n_generated: 0,
            eta: None,
            a_distance: Vec::new(),
            bound: None,
            classifier_accuracy_by_t: Vec::new(),
            notes: run_notes(cfg),
            stage_seconds: Vec::new(),
            files: Vec::new(),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.status == RunStatus::Complete
    }

    /// Converts a failed manifest into the stage error it recorded.
    pub fn into_result(self) -> Result<Self> {
        match &self.status {
            RunStatus::Complete => Ok(self),
            RunStatus::Failed { stage, message } => Err(Error::Stage {
                stage: stage.clone(),
                source: Box::new(Error::Invalid(message.clone())),
            }),
        }
    }

    pub fn accuracy(&self) -> Result<f64> {
        self.target_accuracy
            .ok_or_else(|| Error::invalid("run has no target accuracy"))
    }

    pub fn a_dist(&self, pair: &str) -> Option<f64> {
        self.a_distance.iter().find(|(p, _)| p == pair).map(|(_, v)| *v)
    }

    /// `metric,value` rows of every measured quantity (no timings).
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let mut row = |k: &str, v: String| writeln!(s, "{k},{v}").unwrap();
        row("config_hash", self.config_hash.clone());
        row("seed", self.seed.to_string());
        row("variant", self.variant.name().into());
        if let Some(v) = self.pseudo_label_accuracy {
            row("pseudo_label_accuracy", v.to_string());
        }
        if let Some(v) = self.target_accuracy {
            row("target_accuracy", v.to_string());
        }
        for (k, a) in self.per_class_accuracy.iter().enumerate() {
            row(
                &format!("class_{k}_accuracy"),
                a.map_or(String::new(), |v| v.to_string()),
            );
        }
        row("n_generated", self.n_generated.to_string());
        if let Some(e) = self.eta {
            row("eta", e.to_string());
        }
        for (p, v) in &self.a_distance {
            row(&format!("a_distance_{p}"), v.to_string());
        }
        for (t, a) in &self.classifier_accuracy_by_t {
            row(&format!("domain_classifier_accuracy_t{t}"), a.to_string());
        }
        if let Some(b) = &self.bound {
            for line in b.to_kv().lines() {
                if let Some((k, v)) = line.split_once('=') {
                    if !v.contains(' ') {
                        row(k, v.to_string());
                    }
                }
            }
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "config_hash={}", self.config_hash).unwrap();
        writeln!(s, "seed={}", self.seed).unwrap();
        writeln!(s, "variant={}", self.variant.name()).unwrap();
        match &self.status {
            RunStatus::Complete => writeln!(s, "status=complete").unwrap(),
            RunStatus::Failed { stage, message } => {
                writeln!(s, "status=failed").unwrap();
                writeln!(s, "failed_stage={stage}").unwrap();
                writeln!(s, "failure={}", message.replace('\n', " ")).unwrap();
            }
        }
        for (k, v) in &self.notes {
            writeln!(s, "{k}={v}").unwrap();
        }
        for (stage, secs) in &self.stage_seconds {
            writeln!(s, "time.{stage}={secs:.3}").unwrap();
        }
        for f in &self.files {
            writeln!(s, "file={}", f.display()).unwrap();
        }
        for line in self.metrics_csv().lines().skip(1) {
            if let Some((k, v)) = line.split_once(',') {
                if !matches!(k, "config_hash" | "seed" | "variant") && !k.starts_with("bound.") {
                    writeln!(s, "metric.{k}={v}").unwrap();
                }
            }
        }
        if let Some(b) = &self.bound {
            s.push_str(&b.to_kv());
        }
        s
    }
}

fn run_notes(cfg: &ExperimentConfig) -> Vec<(String, String)> {
    let mut notes = Vec::new();
    if let Some(a) = &cfg.a_distance {
        notes.push((
            "a_distance.estimator".to_string(),
            format!(
                "balanced 50/50 split; probe mlp hidden=[{}] full-batch sgd lr={} iters={}; d=2(1-2err) clamped to [0,2]",
                a.hidden.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
                a.lr,
                a.iters
            ),
        ));
    }
    if let DataSpec::Gaussian(g) = &cfg.data {
        if let Ok(spec) = g.spec() {
            for c in spec.cells() {
                let mean: Vec<String> = c.mean.iter().map(ToString::to_string).collect();
                notes.push((
                    format!("data.cell.{}.{}", c.domain.tag(), c.class),
                    format!("mean={};var={};weight={}", mean.join(","), c.var, c.weight),
                ));
            }
        }
    }
    notes
}

fn key(stage: &str, parts: &[&str]) -> String {
    format!("{stage}-{}", hash_text(&parts.join("\n")))
}

/// Returns the stored artifact or computes, stores and returns it.
fn cached<T>(
    store: &StageStore,
    key: &str,
    make: impl FnOnce() -> Result<T>,
    to_text: impl Fn(&T) -> String,
    from_text: impl Fn(&str) -> Result<T>,
) -> Result<T> {
    if let Some(text) = store.get(key)? {
        return from_text(&text);
    }
    let value = make()?;
    let text = to_text(&value);
    store.put(key, text.clone())?;
    // always continue from the stored form
    from_text(&text)
}

fn dataset_stage(store: &StageStore, key: &str, make: impl FnOnce() -> Result<DomainDataset>) -> Result<DomainDataset> {
    cached(store, key, make, DomainDataset::to_csv, DomainDataset::from_csv)
}

fn uda_stage(
    store: &StageStore,
    labeled_key: &str,
    labeled: &DomainDataset,
    target_key: &str,
    target: &DomainDataset,
    cfg: &UdaConfig,
) -> Result<(String, TaskModel)> {
    let k = key("uda", &[labeled_key, target_key, &format!("{cfg:?}")]);
    let m = cached(
        store,
        &k,
        || Ok(train_uda(labeled, target, cfg)?.model),
        |m| m.to_checkpoint().to_text(),
        |t| TaskModel::from_checkpoint(&Checkpoint::parse(t)?),
    )?;
    Ok((k, m))
}

struct Timer<'a> {
    manifest: &'a mut RunManifest,
}

impl Timer<'_> {
    fn run<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f().map_err(|e| Error::Stage {
            stage: stage.to_string(),
            source: Box::new(e),
        });
        self.manifest
            .stage_seconds
            .push((stage.to_string(), start.elapsed().as_secs_f64()));
        out
    }
}

/// Source and target datasets of a config (deterministic in the master seed).
pub fn load_data(cfg: &ExperimentConfig) -> Result<(DomainDataset, DomainDataset)> {
    let seed = derive_seed(cfg.seed, "data", 0);
    match &cfg.data {
        DataSpec::TwoMoons(m) => gen_two_moons_shift(m, seed),
        DataSpec::Gaussian(g) => gen_gaussian_domains(g, seed).map(|(s, t, _)| (s, t)),
    }
}

/// Runs every stage of a config. Stage failures are recorded in the returned
/// manifest rather than returned as errors; use [`RunManifest::into_result`]
/// to turn them into one.
pub fn run_pipeline(cfg: &ExperimentConfig, store: &StageStore, out_dir: Option<&Path>) -> Result<RunManifest> {
    cfg.validate()?;
    let mut manifest = RunManifest::new(cfg);
    let result = run_stages(cfg, store, &mut manifest);
    if let Err(e) = result {
        let (stage, message) = match e {
            Error::Stage { stage, source } => (stage, source.to_string()),
            other => ("setup".to_string(), other.to_string()),
        };
        manifest.status = RunStatus::Failed { stage, message };
    }
    if let Some(dir) = out_dir {
        write_outputs(cfg, store, &mut manifest, dir)?;
    }
    Ok(manifest)
}

fn write_outputs(cfg: &ExperimentConfig, store: &StageStore, m: &mut RunManifest, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let cfg_path = dir.join("config.txt");
    std::fs::write(&cfg_path, cfg.to_text())?;
    let metrics = dir.join("metrics.csv");
    std::fs::write(&metrics, m.metrics_csv())?;
    m.files.push(cfg_path);
    m.files.push(metrics);
    if !m.a_distance.is_empty() {
        let p = dir.join("a_distance.csv");
        let rows: Vec<(String, Vec<f64>)> = m.a_distance.iter().map(|(k, v)| (k.clone(), vec![*v])).collect();
        std::fs::write(&p, crate::metrics::a_distance_csv(&["run".to_string()], &rows))?;
        m.files.push(p);
    }
    if !m.classifier_accuracy_by_t.is_empty() {
        let p = dir.join("domain_classifier_accuracy.csv");
        let mut s = String::from("t,accuracy\n");
        for (t, a) in &m.classifier_accuracy_by_t {
            writeln!(s, "{t},{a}").unwrap();
        }
        std::fs::write(&p, s)?;
        m.files.push(p);
    }
    if !m.per_class_accuracy.is_empty() {
        let p = dir.join("eval.csv");
        let mut s = String::from("class,accuracy\n");
        for (k, a) in m.per_class_accuracy.iter().enumerate() {
            writeln!(s, "{k},{}", a.map_or(String::new(), |v| v.to_string())).unwrap();
        }
        if let Some(a) = m.target_accuracy {
            writeln!(s, "all,{a}").unwrap();
        }
        std::fs::write(&p, s)?;
        m.files.push(p);
    }
    if let Some(d) = store.dir() {
        m.files.push(d.to_path_buf());
    }
    let p = dir.join("manifest.txt");
    m.files.push(p.clone());
    std::fs::write(&p, m.to_text())?;
    Ok(())
}

fn run_stages(cfg: &ExperimentConfig, store: &StageStore, manifest: &mut RunManifest) -> Result<()> {
    let sched = NoiseSchedule::linear(cfg.steps, cfg.beta_start, cfg.beta_end)?;
    let k_classes = cfg.n_classes();
    let mut timer = Timer { manifest };

    let data_text = cfg
        .entries()
        .into_iter()
        .filter(|(k, _)| k.starts_with("data."))
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join("\n");
    let data_key = key("data", &[&data_text, &cfg.seed.to_string()]);
    let (source, target) = timer.run("data", || {
        let mut pair = None;
        let mut gen = || -> Result<(DomainDataset, DomainDataset)> {
            if pair.is_none() {
                pair = Some(load_data(cfg)?);
            }
            Ok(pair.clone().expect("generated above"))
        };
        let s = dataset_stage(store, &format!("{data_key}-source"), || Ok(gen()?.0))?;
        let t = dataset_stage(store, &format!("{data_key}-target"), || Ok(gen()?.1))?;
        Ok((s, t))
    })?;
    let source_key = format!("{data_key}-source");
    let target_key = format!("{data_key}-target");

    let uda_seed = derive_seed(cfg.seed, "uda", 0);
    let pseudo_cfg = UdaConfig {
        seed: uda_seed,
        ..cfg.pseudo_uda()
    };
    let (fstar_key, fstar) = timer.run("pseudo_labeler", || {
        uda_stage(store, &source_key, &source, &target_key, &target, &pseudo_cfg)
    })?;
    let pseudo = pseudo_label(&fstar, &target)?;
    timer.manifest.pseudo_label_accuracy = Some(evaluate(&fstar, &target)?.accuracy);

    let generated = if cfg.variant.generates() {
        let g = generate_stage(cfg, store, &sched, &mut timer, &source, &pseudo, &fstar_key, k_classes)?;
        Some(g)
    } else {
        None
    };

    let f_cfg = UdaConfig {
        seed: uda_seed,
        ..cfg.uda.clone()
    };
    let (labeled_key, labeled, augment): (String, DomainDataset, Option<DomainDataset>) = match cfg.variant {
        Variant::Baseline => (
            source_key.clone(),
            source.clone(),
            Some(DomainDataset::empty(source.dim, k_classes)),
        ),
        Variant::PseudoLabel => {
            let a = augment_source(&source, &pseudo)?;
            timer.manifest.eta = Some(a.eta);
            (format!("{source_key}+pseudo-{fstar_key}"), a.data, Some(pseudo.clone()))
        }
        Variant::GeneratedOnly => {
            let (gk, g) = generated.clone().expect("generating variant");
            (gk, g, None)
        }
        Variant::NoDomainGuidance | Variant::Dacdm => {
            let (gk, g) = generated.clone().expect("generating variant");
            let a = augment_source(&source, &g)?;
            timer.manifest.eta = Some(a.eta);
            (format!("{source_key}+{gk}"), a.data, Some(g))
        }
    };
    if cfg.variant == Variant::Baseline {
        timer.manifest.eta = Some(1.0);
    }
    timer.manifest.n_generated = generated.as_ref().map_or(0, |(_, g)| g.len());

    let (_, fhat) = timer.run("adapted_model", || {
        uda_stage(store, &labeled_key, &labeled, &target_key, &target, &f_cfg)
    })?;
    let ev = evaluate(&fhat, &target)?;
    timer.manifest.target_accuracy = Some(ev.accuracy);
    timer.manifest.per_class_accuracy = ev.per_class;

    if let Some(acfg) = &cfg.a_distance {
        let acfg = crate::metrics::ADistanceConfig {
            seed: derive_seed(cfg.seed, "a-distance", 0),
            ..acfg.clone()
        };
        let pairs = timer.run("a_distance", || {
            let mut sets: Vec<(&str, &DomainDataset)> = vec![("s_t", &source)];
            if let Some((_, g)) = &generated {
                sets.push(("g_t", g));
            }
            if cfg.variant != Variant::Baseline {
                sets.push(("shat_t", &labeled));
            }
            sets.par_iter()
                .map(|(name, d)| Ok((name.to_string(), a_distance(d, &target, &acfg)?.value)))
                .collect::<Result<Vec<_>>>()
        })?;
        timer.manifest.a_distance = pairs;
    }

    if cfg.bound && cfg.variant != Variant::GeneratedOnly {
        let augment = augment.expect("augmenting variant");
        let src_only = UdaConfig {
            regularizer: Regularizer::None,
            beta: 0.0,
            seed: uda_seed,
            ..cfg.uda.clone()
        };
        let report = timer.run("bound", || {
            let (_, fs) = uda_stage(store, &source_key, &source, &target_key, &target, &src_only)?;
            let grid = HypothesisGrid::fit(&[&source, &augment, &target], cfg.grid_dirs, cfg.grid_biases, cfg.seed)?;
            bound_report(
                &BoundInputs {
                    source_model: &fs,
                    adapted_model: &fhat,
                    source: &source,
                    generated: &augment,
                    target: &target,
                    target_labels_known: true,
                },
                &grid,
                cfg.delta,
            )
        })?;
        timer.manifest.bound = Some(report);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn generate_stage(
    cfg: &ExperimentConfig,
    store: &StageStore,
    sched: &NoiseSchedule,
    timer: &mut Timer<'_>,
    source: &DomainDataset,
    pseudo: &DomainDataset,
    fstar_key: &str,
    k_classes: usize,
) -> Result<(String, DomainDataset)> {
    // With s = 0 nothing is guided: domain falls back to training on D_t only
    // and class to the model condition, i.e. the no-domain-guidance path.
    let unguided = cfg.guidance.scale == 0.0;
    let control = cfg.control;
    let target_only = cfg.variant == Variant::NoDomainGuidance || (control.domain_by_guidance && unguided);
    let class_by_guidance = control.class_by_guidance && !target_only && !unguided;
    let domain_by_guidance = control.domain_by_guidance && !target_only;
    let domain_by_condition = !control.domain_by_guidance && !target_only;
    let sched_text = format!("{}|{}|{}", cfg.steps, cfg.beta_start, cfg.beta_end);

    // denoiser
    let dcfg = crate::diffusion::DenoiserConfig {
        domain_embedding: domain_by_condition,
        ..cfg.denoiser.clone()
    };
    let dtrain = crate::diffusion::TrainConfig {
        seed: derive_seed(cfg.seed, "denoiser", 0),
        ..cfg.denoiser_train
    };
    let den_classes = if class_by_guidance { 1 } else { k_classes };
    let den_key = key(
        "denoiser",
        &[
            fstar_key,
            &format!("{dcfg:?}|{dtrain:?}|{sched_text}|target_only={target_only}|class_guided={class_by_guidance}"),
        ],
    );
    let train_points = || {
        let src = (!target_only).then_some(source.points.iter()).into_iter().flatten();
        src.chain(pseudo.points.iter()).map(|p| p.x.as_slice())
    };
    let clip = cfg
        .clip_margin
        .map(|m| DataBox::around(train_points(), m))
        .transpose()?;
    let denoiser = timer.run("denoiser", || {
        cached(
            store,
            &den_key,
            || {
                let cond = |y: usize, d: Domain| Condition {
                    class: if class_by_guidance { 0 } else { y },
                    domain: domain_by_condition.then_some(d.binary()),
                };
                let mut pairs = Vec::new();
                if !target_only {
                    pairs.extend(source.points.iter().map(|p| (p.x.clone(), cond(p.y, Domain::Source))));
                }
                pairs.extend(pseudo.points.iter().map(|p| (p.x.clone(), cond(p.y, Domain::Target))));
                Ok(train_denoiser(&pairs, den_classes, sched, &dcfg, &dtrain)?.model)
            },
            |m| m.to_checkpoint().to_text(),
            |t| ConditionedDenoiser::from_checkpoint(&Checkpoint::parse(t)?),
        )
    })?;

    let guided = !unguided && (domain_by_guidance || class_by_guidance);
    let ctrain = crate::diffusion::TrainConfig {
        seed: derive_seed(cfg.seed, "classifier", 0),
        ..cfg.classifier_train
    };
    let clf_text = format!("{:?}|{ctrain:?}|{sched_text}", cfg.classifier);
    let domain_clf = if guided && domain_by_guidance {
        let k = key("domain_clf", &[fstar_key, &clf_text]);
        let (model, acc) = timer.run("domain_classifier", || {
            let trained = cached(
                store,
                &k,
                || {
                    let t = train_domain_classifier(source, pseudo, sched, &cfg.classifier, &ctrain)?;
                    Ok((t.model, t.accuracy_by_t))
                },
                |(m, acc)| {
                    let mut ck = m.to_checkpoint("domain_classifier");
                    let text: Vec<String> = acc.iter().map(|(t, a)| format!("{t}:{a}")).collect();
                    ck.meta("accuracy_by_t", text.join(";"));
                    ck.to_text()
                },
                |t| {
                    let ck = Checkpoint::parse(t)?;
                    let raw: String = ck.get_meta("accuracy_by_t")?;
                    let acc = raw
                        .split(';')
                        .filter(|s| !s.is_empty())
                        .map(|p| {
                            let (t, a) = p.split_once(':').ok_or_else(|| Error::invalid("bad accuracy entry"))?;
                            Ok((
                                t.parse().map_err(|_| Error::invalid("bad timestep"))?,
                                a.parse().map_err(|_| Error::invalid("bad accuracy"))?,
                            ))
                        })
                        .collect::<Result<Vec<(usize, f64)>>>()?;
                    Ok((NoisyClassifier::from_checkpoint(&ck)?, acc))
                },
            )?;
            Ok(trained)
        })?;
        timer.manifest.classifier_accuracy_by_t = acc;
        Some(model)
    } else {
        None
    };
    let class_clf = if guided && class_by_guidance {
        let k = key("class_clf", &[fstar_key, &clf_text]);
        Some(timer.run("class_classifier", || {
            cached(
                store,
                &k,
                || {
                    let labeled = source.concat(pseudo)?;
                    Ok(train_class_classifier(&labeled, sched, &cfg.classifier, &ctrain)?.model)
                },
                |m| m.to_checkpoint("class_classifier").to_text(),
                |t| NoisyClassifier::from_checkpoint(&Checkpoint::parse(t)?),
            )
        })?)
    } else {
        None
    };

    let mut terms: Vec<(&dyn crate::guidance::GuidanceSource, GuideLabel)> = Vec::new();
    if let Some(c) = &domain_clf {
        terms.push((c, GuideLabel::Fixed(cfg.guidance.target_domain)));
    }
    if let Some(c) = &class_clf {
        terms.push((c, GuideLabel::SampleClass));
    }
    let guide = Guide {
        terms,
        scale: cfg.guidance.scale,
        rule: cfg.guidance.rule,
    };
    let guide_ref = (!guide.terms.is_empty()).then_some(&guide);

    let plan = make_plan(sched, cfg.solver_steps)?;
    let gcfg = GenerateConfig {
        n: cfg.per_class * k_classes,
        n_classes: k_classes,
        rule: cfg.class_rule,
        formula: cfg.solver_formula,
        input: ModelInput {
            fixed_class: class_by_guidance.then_some(0),
            domain: domain_by_condition.then_some(cfg.guidance.target_domain),
        },
        seed: derive_seed(cfg.seed, "generate", 0),
    };
    let gen_key = key(
        "generated",
        &[
            &den_key,
            &format!(
                "guided={guided}|{:?}|{clf_text}|{:?}|{gcfg:?}",
                cfg.guidance, plan.timesteps
            ),
            &format!("domain_guided={domain_by_guidance}|class_guided={class_by_guidance}|clip={clip:?}"),
        ],
    );
    let data = timer.run("generate", || {
        dataset_stage(store, &gen_key, || {
            let sampler = Sampler::new(&denoiser, guide_ref, sched).with_clip(clip.as_ref());
            generate_dataset(&sampler, &plan, &gcfg)
        })
    })?;
    Ok((gen_key, data))
}

/// Keys that [`run_sweep`] accepts.
pub const SWEEP_KEYS: [&str; 3] = ["generate.per_class", "guidance.scale", "solver.M"];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub key: String,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    /// `value,mean_accuracy,std_accuracy,n_seeds`.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{},mean_accuracy,std_accuracy,n_seeds\n", self.key);
        for r in &self.rows {
            writeln!(s, "{},{},{},{}", r.value, r.mean, r.std, r.accuracies.len()).unwrap();
        }
        s
    }

    /// Two-column `value,mean_accuracy` plot data.
    pub fn plot_csv(&self) -> String {
        let mut s = format!("{},mean_accuracy\n", self.key);
        for r in &self.rows {
            writeln!(s, "{},{}", r.value, r.mean).unwrap();
        }
        s
    }
}

/// Mean and (population) standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// One pipeline run per `(value, seed)`. `generate.per_class = 0` runs the
/// baseline variant, since no samples are generated.
pub fn run_sweep(
    base: &ExperimentConfig,
    sweep_key: &str,
    values: &[String],
    seeds: &[u64],
    store: &StageStore,
) -> Result<SweepResult> {
    if !SWEEP_KEYS.contains(&sweep_key) {
        return Err(Error::config(format!(
            "cannot sweep `{sweep_key}`; expected one of {}",
            SWEEP_KEYS.join(", ")
        )));
    }
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::config("sweep needs at least one value and one seed"));
    }
    let mut jobs = Vec::new();
    for v in values {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.set(sweep_key, v)?;
            if sweep_key == "generate.per_class" && cfg.per_class == 0 {
                cfg.variant = Variant::Baseline;
            }
            cfg.validate()?;
            jobs.push((v.clone(), cfg));
        }
    }
    let accs: Vec<f64> = jobs
        .par_iter()
        .map(|(_, cfg)| run_pipeline(cfg, store, None)?.into_result()?.accuracy())
        .collect::<Result<_>>()?;
    let rows = values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let a = accs[i * seeds.len()..(i + 1) * seeds.len()].to_vec();
            let (mean, std) = mean_std(&a);
            SweepRow {
                value: v.clone(),
                accuracies: a,
                mean,
                std,
            }
        })
        .collect();
    Ok(SweepResult {
        key: sweep_key.to_string(),
        rows,
    })
}
