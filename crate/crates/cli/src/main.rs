use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use dacdm_core::data::{read_dataset, write_dataset};
use dacdm_core::diffusion::train_denoiser;
use dacdm_core::guidance::train_domain_classifier;
use dacdm_core::guidance::Guide;
use dacdm_core::metrics::{a_distance, a_distance_csv, bound_report, BoundInputs, HypothesisGrid};
use dacdm_core::pipeline::{load_data, run_pipeline, run_sweep, ExperimentConfig, StageStore};
use dacdm_core::rng::derive_seed;
use dacdm_core::sampler::{generate_dataset, make_plan, DataBox, GenerateConfig, ModelInput, Sampler};
use dacdm_core::uda::{evaluate, pseudo_label, train_uda, Regularizer, TaskModel, UdaConfig};
use dacdm_core::{Checkpoint, Condition, ConditionedDenoiser, Domain, NoiseSchedule, NoisyClassifier};

#[derive(Parser)]
#[command(
    name = "dacdm",
    version,
    about = "Domain-guided conditional diffusion for unsupervised domain adaptation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides a config key, e.g. `--set uda.iters=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                ExperimentConfig::parse(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => ExperimentConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("override `{kv}` is not KEY=VALUE"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out(&self, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out_dir).with_context(|| format!("creating {}", self.out_dir.display()))?;
        Ok(self.out_dir.join(name))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Writes the source and target datasets of a config.
    GenData(Common),
    /// Trains a task model on labeled + unlabeled target data and pseudo-labels the target.
    TrainUda {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        labeled: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Overrides `uda.regularizer`.
        #[arg(long)]
        regularizer: Option<String>,
    },
    /// Trains the label-conditioned denoiser on source and pseudo-labeled target data.
    TrainDiffusion {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        source: Option<PathBuf>,
        /// Target points carrying pseudo-labels (as written by `train-uda`).
        #[arg(long)]
        target: PathBuf,
    },
    /// Trains the noisy domain classifier (source 0, target 1).
    TrainDomainClf {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
    },
    /// Samples a generated dataset from a trained denoiser.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        denoiser: PathBuf,
        /// Domain classifier for guidance; omit for unguided sampling.
        #[arg(long)]
        domain_clf: Option<PathBuf>,
        /// Datasets the denoiser was trained on; their bounding box (widened by
        /// `solver.clip_margin`) clamps the data prediction. Repeatable.
        #[arg(long)]
        clip_data: Vec<PathBuf>,
    },
    /// Runs the whole pipeline for one config.
    Pipeline(Common),
    /// Runs the pipeline over values of one config key and several seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// One of generate.per_class, guidance.scale, solver.M.
        #[arg(long)]
        key: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
    /// Proxy A-distance between two datasets.
    ADistance {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Evaluates the adaptation bound for a trained model.
    Bound {
        #[command(flatten)]
        common: Common,
        /// Model trained on the source only.
        #[arg(long)]
        source_model: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        source: PathBuf,
        /// Augmenting (generated) set; omit when the model saw only the source.
        #[arg(long)]
        generated: Option<PathBuf>,
        #[arg(long)]
        target: PathBuf,
    },
    /// Accuracy and per-class accuracy of a task model on a labeled dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

fn load_task_model(p: &Path) -> Result<TaskModel> {
    let ck = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
    Ok(TaskModel::from_checkpoint(&ck)?)
}

fn schedule(cfg: &ExperimentConfig) -> Result<NoiseSchedule> {
    Ok(NoiseSchedule::linear(cfg.steps, cfg.beta_start, cfg.beta_end)?)
}

fn dataset(p: &Path) -> Result<dacdm_core::DomainDataset> {
    read_dataset(p).with_context(|| format!("reading {}", p.display()))
}

fn report(path: &Path) {
    println!("wrote {}", path.display());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = c.config()?;
            let (s, t) = load_data(&cfg)?;
            for (name, d) in [("source.csv", &s), ("target.csv", &t)] {
                let p = c.out(name)?;
                write_dataset(d, &p)?;
                report(&p);
            }
        }
        Command::TrainUda {
            common,
            labeled,
            target,
            regularizer,
        } => {
            let mut cfg = common.config()?;
            if let Some(r) = regularizer {
                cfg.uda.regularizer = Regularizer::parse(&r)?;
            }
            let (l, t) = (dataset(&labeled)?, dataset(&target)?);
            let ucfg = UdaConfig {
                seed: derive_seed(cfg.seed, "uda", 0),
                ..cfg.uda.clone()
            };
            let trained = train_uda(&l, &t, &ucfg)?;
            let p = common.out("task_model.ckpt")?;
            trained.model.to_checkpoint().save(&p)?;
            report(&p);
            let p = common.out("pseudo_labels.csv")?;
            write_dataset(&pseudo_label(&trained.model, &t)?, &p)?;
            report(&p);
        }
        Command::TrainDiffusion { common, source, target } => {
            let cfg = common.config()?;
            let sched = schedule(&cfg)?;
            let t = dataset(&target)?;
            let s = match &source {
                Some(p) => dataset(p)?,
                None => dacdm_core::DomainDataset::empty(t.dim, t.n_classes),
            };
            let dcfg = dacdm_core::DenoiserConfig {
                domain_embedding: !cfg.control.domain_by_guidance && source.is_some(),
                ..cfg.denoiser.clone()
            };
            let tcfg = dacdm_core::TrainConfig {
                seed: derive_seed(cfg.seed, "denoiser", 0),
                ..cfg.denoiser_train
            };
            // target points already carry their pseudo-labels
            let dom = |d: Domain| dcfg.domain_embedding.then_some(d.binary());
            let pairs: Vec<(Vec<f64>, Condition)> = s
                .points
                .iter()
                .map(|p| {
                    (
                        p.x.clone(),
                        Condition {
                            class: p.y,
                            domain: dom(Domain::Source),
                        },
                    )
                })
                .chain(t.points.iter().map(|p| {
                    (
                        p.x.clone(),
                        Condition {
                            class: p.y,
                            domain: dom(Domain::Target),
                        },
                    )
                }))
                .collect();
            let trained = train_denoiser(&pairs, t.n_classes, &sched, &dcfg, &tcfg)?;
            let p = common.out("denoiser.ckpt")?;
            trained.model.to_checkpoint().save(&p)?;
            report(&p);
            let mut csv = String::from("iter,loss\n");
            for (i, l) in trained.loss_trace.iter().enumerate() {
                csv.push_str(&format!("{i},{l}\n"));
            }
            let p = common.out("denoiser_loss.csv")?;
            std::fs::write(&p, csv)?;
            report(&p);
        }
        Command::TrainDomainClf { common, source, target } => {
            let cfg = common.config()?;
            let sched = schedule(&cfg)?;
            let tcfg = dacdm_core::TrainConfig {
                seed: derive_seed(cfg.seed, "classifier", 0),
                ..cfg.classifier_train
            };
            let trained =
                train_domain_classifier(&dataset(&source)?, &dataset(&target)?, &sched, &cfg.classifier, &tcfg)?;
            let p = common.out("domain_classifier.ckpt")?;
            trained.model.to_checkpoint("domain_classifier").save(&p)?;
            report(&p);
            let p = common.out("domain_classifier_accuracy.csv")?;
            let mut csv = String::from("t,accuracy\n");
            for (t, a) in &trained.accuracy_by_t {
                csv.push_str(&format!("{t},{a}\n"));
            }
            std::fs::write(&p, csv)?;
            report(&p);
        }
        Command::Generate {
            common,
            denoiser,
            domain_clf,
            clip_data,
        } => {
            let cfg = common.config()?;
            let sched = schedule(&cfg)?;
            let model = ConditionedDenoiser::from_checkpoint(&Checkpoint::load(&denoiser)?)?;
            let clf = match &domain_clf {
                Some(p) => Some(NoisyClassifier::from_checkpoint(&Checkpoint::load(p)?)?),
                None => None,
            };
            let guide = clf.as_ref().map(|c| Guide::domain(c, &cfg.guidance));
            let clip_sets = clip_data.iter().map(|p| dataset(p)).collect::<Result<Vec<_>>>()?;
            let clip = match cfg.clip_margin {
                Some(m) if !clip_sets.is_empty() => Some(DataBox::around(
                    clip_sets.iter().flat_map(|d| d.points.iter().map(|p| p.x.as_slice())),
                    m,
                )?),
                _ => None,
            };
            let sampler = Sampler::new(&model, guide.as_ref(), &sched).with_clip(clip.as_ref());
            let plan = make_plan(&sched, cfg.solver_steps)?;
            let k = model.n_classes();
            let gcfg = GenerateConfig {
                n: cfg.per_class * k,
                n_classes: k,
                rule: cfg.class_rule,
                formula: cfg.solver_formula,
                input: ModelInput {
                    fixed_class: None,
                    domain: model.domain_embed.is_some().then_some(cfg.guidance.target_domain),
                },
                seed: derive_seed(cfg.seed, "generate", 0),
            };
            let data = generate_dataset(&sampler, &plan, &gcfg)?;
            let p = common.out("generated.csv")?;
            write_dataset(&data, &p)?;
            report(&p);
        }
        Command::Pipeline(c) => {
            let cfg = c.config()?;
            let store = StageStore::on_disk(c.out_dir.join("stages"))?;
            let m = run_pipeline(&cfg, &store, Some(&c.out_dir))?;
            print!("{}", m.metrics_csv());
            let m = m.into_result()?;
            println!("target accuracy {:.4}", m.accuracy()?);
        }
        Command::Sweep {
            common,
            key,
            values,
            seeds,
        } => {
            let cfg = common.config()?;
            let store = StageStore::on_disk(common.out_dir.join("stages"))?;
            let res = run_sweep(&cfg, &key, &values, &seeds, &store)?;
            let p = common.out("sweep.csv")?;
            std::fs::write(&p, res.to_csv())?;
            let plot = common.out("sweep_plot.csv")?;
            std::fs::write(&plot, res.plot_csv())?;
            print!("{}", res.to_csv());
            report(&p);
            report(&plot);
        }
        Command::ADistance { common, a, b } => {
            let cfg = common.config()?;
            let acfg = dacdm_core::metrics::ADistanceConfig {
                seed: derive_seed(cfg.seed, "a-distance", 0),
                ..cfg.a_distance.clone().unwrap_or_default()
            };
            let d = a_distance(&dataset(&a)?, &dataset(&b)?, &acfg)?;
            let name = format!(
                "{}_{}",
                a.file_stem().and_then(|s| s.to_str()).unwrap_or("a"),
                b.file_stem().and_then(|s| s.to_str()).unwrap_or("b")
            );
            let csv = a_distance_csv(&["d_A".to_string()], &[(name, vec![d.value])]);
            let p = common.out("a_distance.csv")?;
            std::fs::write(&p, &csv)?;
            print!("{csv}");
            report(&p);
        }
        Command::Bound {
            common,
            source_model,
            model,
            source,
            generated,
            target,
        } => {
            let cfg = common.config()?;
            let (s, t) = (dataset(&source)?, dataset(&target)?);
            let g = match &generated {
                Some(p) => dataset(p)?,
                None => dacdm_core::DomainDataset::empty(s.dim, s.n_classes),
            };
            let (fs, fh) = (load_task_model(&source_model)?, load_task_model(&model)?);
            let grid = HypothesisGrid::fit(&[&s, &g, &t], cfg.grid_dirs, cfg.grid_biases, cfg.seed)?;
            let rep = bound_report(
                &BoundInputs {
                    source_model: &fs,
                    adapted_model: &fh,
                    source: &s,
                    generated: &g,
                    target: &t,
                    target_labels_known: true,
                },
                &grid,
                cfg.delta,
            )?;
            let p = common.out("bound.txt")?;
            std::fs::write(&p, rep.to_kv())?;
            print!("{}", rep.to_kv());
            report(&p);
        }
        Command::Eval { common, model, data } => {
            let m = load_task_model(&model)?;
            let ev = evaluate(&m, &dataset(&data)?)?;
            let p = common.out("eval.csv")?;
            std::fs::write(&p, ev.to_csv())?;
            print!("{}", ev.to_csv());
            report(&p);
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
