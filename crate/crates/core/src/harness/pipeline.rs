use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::{attention_overlays, provenance, ExperimentConfig, HarnessError};
use crate::model::{ModelConfig, Variant};
use crate::simulator::{
    collect_offpolicy, generate_world, run_episode, sample_starts, write_ppm, EpisodeRecord, Image, PlannerPolicy,
    Policy, RandomPolicy, WorldKind, WorldSpec,
};
use crate::training::{train, write_metrics_csv, Dataset, TrainOutcome, TrainedModel};

/// Dataset labels of the toy comparison: held-out samples from the
/// training world, then the swapped test world.
pub const TOY_DATASETS: [&str; 2] = ["train_env_val", "test_env"];

/// A validated config and its hash.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OfflineRow {
    pub variant: String,
    pub seed: u64,
    pub dataset: String,
    /// `validation` when scored on the held-out split of the training data.
    pub split: String,
    pub samples: usize,
    pub head: String,
    pub metric: String,
    pub value: f64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpisodeRow {
    pub world: String,
    pub policy: String,
    /// Training seed of the checkpoint; empty for the random policy.
    pub model_seed: Option<u64>,
    pub episode: usize,
    pub seed: u64,
    pub episode_return: f64,
    pub steps: usize,
    pub max_steps: usize,
    pub completion: f64,
    pub collided: bool,
    pub left_world: bool,
    pub aborted: String,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OnPolicySummary {
    pub world: String,
    pub policy: String,
    pub model_seed: Option<u64>,
    pub episodes: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub mean_completion: f64,
    pub collisions: usize,
    pub aborted: usize,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ToyRun {
    pub variant: String,
    pub seed: u64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    /// Feature-map cells; empty for the variant without a mask.
    pub val_attention_distance: Option<f64>,
    pub best_epoch: usize,
    pub train_seconds: f64,
    pub config_hash: String,
}

#[derive(Clone, Debug, Default)]
pub struct ToyReport {
    pub runs: Vec<ToyRun>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl ToyReport {
    fn runs_of(&self, variant: Variant) -> impl Iterator<Item = &ToyRun> {
        self.runs.iter().filter(move |r| r.variant == variant.name())
    }

    /// Mean validation accuracy in the training world.
    pub fn mean_val(&self, variant: Variant) -> f64 {
        mean_std(&self.runs_of(variant).map(|r| r.val_accuracy).collect::<Vec<_>>()).0
    }

    /// Mean accuracy in the swapped test world.
    pub fn mean_test(&self, variant: Variant) -> f64 {
        mean_std(&self.runs_of(variant).map(|r| r.test_accuracy).collect::<Vec<_>>()).0
    }

    pub fn mean_distance(&self, variant: Variant) -> Option<f64> {
        let d: Option<Vec<f64>> = self.runs_of(variant).map(|r| r.val_attention_distance).collect();
        d.filter(|d| !d.is_empty()).map(|d| mean_std(&d).0)
    }

    /// Variant by dataset table of mean (std) accuracy in percent.
    pub fn table(&self) -> String {
        let mut s = format!("{:<16}{:>20}{:>20}\n", "variant", TOY_DATASETS[0], TOY_DATASETS[1]);
        for v in Variant::ALL {
            let val: Vec<f64> = self.runs_of(v).map(|r| 100.0 * r.val_accuracy).collect();
            let test: Vec<f64> = self.runs_of(v).map(|r| 100.0 * r.test_accuracy).collect();
            if val.is_empty() {
                continue;
            }
            let cell = |x: &[f64]| {
                let (m, sd) = mean_std(x);
                format!("{m:.1} ({sd:.1})")
            };
            s += &format!("{:<16}{:>20}{:>20}\n", v.name(), cell(&val), cell(&test));
        }
        s
    }

    /// One row per variant and dataset.
    pub fn summary_rows(&self, config_hash: &str) -> Vec<ToySummaryRow> {
        let mut rows = Vec::new();
        for v in Variant::ALL {
            let runs: Vec<&ToyRun> = self.runs_of(v).collect();
            if runs.is_empty() {
                continue;
            }
            for (dataset, acc) in [
                (TOY_DATASETS[0], runs.iter().map(|r| r.val_accuracy).collect::<Vec<_>>()),
                (TOY_DATASETS[1], runs.iter().map(|r| r.test_accuracy).collect()),
            ] {
                let (mean, std) = mean_std(&acc);
                rows.push(ToySummaryRow {
                    variant: v.name().into(),
                    dataset: dataset.into(),
                    seeds: runs.iter().map(|r| r.seed.to_string()).collect::<Vec<_>>().join(" "),
                    mean_accuracy: mean,
                    std_accuracy: std,
                    config_hash: config_hash.into(),
                });
            }
        }
        rows
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ToySummaryRow {
    pub variant: String,
    pub dataset: String,
    pub seeds: String,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub config_hash: String,
}

pub(crate) fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Loads an input artifact, naming the file on failure.
pub(crate) fn load_input<T, E: std::fmt::Display>(
    path: &Path,
    load: impl FnOnce(&Path) -> Result<T, E>,
) -> Result<T, HarnessError> {
    if !path.is_file() {
        return Err(HarnessError::MissingInput(path.to_path_buf()));
    }
    load(path).map_err(|e| HarnessError::Input { path: path.to_path_buf(), reason: e.to_string() })
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "input".into())
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self, HarnessError> {
        config.validate()?;
        let hash = config.hash();
        Ok(Self { config, hash })
    }

    /// Reads a config file, or the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self, HarnessError> {
        let config = match path {
            None => ExperimentConfig::default(),
            Some(p) => {
                let text = load_input(p, |p| fs::read_to_string(p))?;
                ExperimentConfig::parse(&text)?
            }
        };
        Self::new(config)
    }

    pub fn model_config(&self, variant: Variant) -> ModelConfig {
        ModelConfig { variant, ..self.config.model.clone() }
    }

    /// Training world and its test counterpart: the swapped world for the
    /// toy setting, a new seed with different backdrop colors otherwise.
    pub fn worlds(&self, seed: u64) -> Result<(WorldSpec, WorldSpec), HarnessError> {
        let w = &self.config.world;
        let params = w.params();
        let mut train_world = generate_world(seed, &params)?;
        train_world.provenance = provenance(&self.hash, seed);
        let test_world = match w.kind {
            WorldKind::Toy => train_world.swap(),
            WorldKind::Procedural => {
                let test_params = crate::simulator::WorldParams {
                    backdrop_palette: w.test_backdrop_palette.clone(),
                    ..params
                };
                let mut t = generate_world(w.test_seed, &test_params)?;
                t.provenance = provenance(&self.hash, w.test_seed);
                t
            }
        };
        Ok((train_world, test_world))
    }

    pub fn collect(&self, world: &WorldSpec, seed: u64, samples: usize) -> Result<Dataset, HarnessError> {
        let c = &self.config;
        let cfg = crate::simulator::CollectConfig { samples, ..c.collect.clone() };
        let mut ds = collect_offpolicy(world, &c.vehicle, &c.render, &cfg, seed)?;
        ds.provenance = format!("{}; {}", provenance(&self.hash, seed), ds.provenance);
        Ok(ds)
    }

    pub fn train(&self, dataset: &Dataset, variant: Variant, seed: u64) -> Result<TrainOutcome, HarnessError> {
        Ok(train(dataset, &self.model_config(variant), &self.config.training, seed, &self.hash)?)
    }

    /// Per-head metrics plus attention distance. Uses the held-out split
    /// when `dataset` is the model's own training data.
    pub fn evaluate_offline(
        &self,
        model: &TrainedModel,
        dataset: &Dataset,
        label: &str,
    ) -> Result<Vec<OfflineRow>, HarnessError> {
        if dataset.is_empty() {
            return Err(HarnessError::Usage(format!("dataset {label} has no samples to evaluate")));
        }
        let (split, indices) = match model.validation_split(dataset) {
            Some(v) => ("validation", v),
            None => ("all", (0..dataset.len()).collect()),
        };
        let report = model.evaluate(dataset, &indices)?;
        let row = |head: &str, metric: &str, value: f64| OfflineRow {
            variant: model.model.variant().to_string(),
            seed: model.meta.seed,
            dataset: label.into(),
            split: split.into(),
            samples: report.samples,
            head: head.into(),
            metric: metric.into(),
            value,
            config_hash: self.hash.clone(),
        };
        let mut rows: Vec<OfflineRow> = report.heads.iter().map(|h| row(&h.name, h.metric, h.value)).collect();
        if let Some(d) = report.attention_distance {
            rows.push(row("attention", "distance", d));
        }
        Ok(rows)
    }

    /// Episodes from shared start poses for every model, plus the random
    /// exploration policy when `random` is set, in each world.
    pub fn evaluate_onpolicy(
        &self,
        models: &[TrainedModel],
        worlds: &[(String, WorldSpec)],
        random: bool,
    ) -> Result<Vec<EpisodeRow>, HarnessError> {
        let c = &self.config;
        let e = &c.evaluation;
        for m in models {
            c.reward.bind(&m.model.config().heads, &m.meta.standardization)?;
            if m.model.config().camera != c.render.rig {
                return Err(HarnessError::Usage(format!(
                    "{} checkpoint (seed {}) was trained with a different camera than render.rig",
                    m.model.variant(),
                    m.meta.seed
                )));
            }
        }
        let mut rows = Vec::new();
        for (name, world) in worlds {
            let starts = sample_starts(world, e.episodes, e.episode.start_clearance, e.start_seed)?;
            let mut policies: Vec<Option<&TrainedModel>> = models.iter().map(Some).collect();
            if random {
                policies.push(None);
            }
            for m in policies {
                let records: Vec<EpisodeRecord> = starts
                    .par_iter()
                    .enumerate()
                    .map(|(i, start)| {
                        let seed = e.start_seed + i as u64;
                        let mut policy: Box<dyn Policy + '_> = match m {
                            Some(m) => Box::new(PlannerPolicy::new(
                                &m.model,
                                &m.meta.standardization,
                                c.planner.clone(),
                                c.reward.clone(),
                            )),
                            None => Box::new(RandomPolicy::new(c.collect.steering.clone(), c.vehicle.dt)),
                        };
                        run_episode(world, &c.vehicle, &c.render, policy.as_mut(), &e.episode, *start, seed)
                    })
                    .collect();
                rows.extend(records.into_iter().enumerate().map(|(i, r)| EpisodeRow {
                    world: name.clone(),
                    policy: r.policy,
                    model_seed: m.map(|m| m.meta.seed),
                    episode: i,
                    seed: r.seed,
                    episode_return: r.episode_return,
                    steps: r.steps,
                    max_steps: r.max_steps,
                    completion: r.completion,
                    collided: r.collided,
                    left_world: r.left_world,
                    aborted: r.aborted.unwrap_or_default(),
                    config_hash: self.hash.clone(),
                }));
            }
        }
        Ok(rows)
    }

    /// Trains every variant for every configured seed on the toy world and
    /// scores held-out and swapped-world accuracy. Artifacts go to `out`
    /// when given; `log` receives progress lines.
    pub fn reproduce_toy(&self, out: Option<&Path>, log: &mut dyn FnMut(&str)) -> Result<ToyReport, HarnessError> {
        let c = &self.config;
        if c.world.kind != WorldKind::Toy {
            return Err(HarnessError::Usage("reproduce-toy needs world.kind = \"toy\"".into()));
        }
        if let Some(dir) = out {
            fs::create_dir_all(dir)?;
        }
        let (train_world, test_world) = self.worlds(c.world.seed)?;
        let train_data = self.collect(&train_world, c.evaluation.collect_seed, c.collect.samples)?;
        let test_data = self.collect(&test_world, c.evaluation.test_collect_seed, c.evaluation.test_samples)?;
        log(&format!("collected {} training and {} test samples", train_data.len(), test_data.len()));
        if let Some(dir) = out {
            train_world.save(&dir.join("world.trajwd"))?;
            test_world.save(&dir.join("world_test.trajwd"))?;
        }
        let all_test: Vec<usize> = (0..test_data.len()).collect();
        let mut report = ToyReport::default();
        for &seed in &c.seeds {
            for variant in Variant::ALL {
                let t0 = Instant::now();
                let outcome = self.train(&train_data, variant, seed)?;
                let secs = t0.elapsed().as_secs_f64();
                let trained = &outcome.trained;
                let val = trained.evaluate(&train_data, &outcome.split.validation)?;
                let test = trained.evaluate(&test_data, &all_test)?;
                let missing = || HarnessError::Usage("the toy comparison needs a discrete terrain head".into());
                let run = ToyRun {
                    variant: variant.name().into(),
                    seed,
                    val_accuracy: val.primary_accuracy().ok_or_else(missing)?,
                    test_accuracy: test.primary_accuracy().ok_or_else(missing)?,
                    val_attention_distance: val.attention_distance,
                    best_epoch: outcome.best_epoch,
                    train_seconds: secs,
                    config_hash: self.hash.clone(),
                };
                log(&format!(
                    "seed {seed} {variant}: val {:.3} test {:.3} distance {} ({secs:.0}s)",
                    run.val_accuracy,
                    run.test_accuracy,
                    run.val_attention_distance.map_or("-".into(), |d| format!("{d:.2}")),
                ));
                if let Some(dir) = out {
                    let base = format!("{variant}_seed{seed}");
                    trained.save(&dir.join(format!("{base}.ckpt")))?;
                    write_metrics_csv(fs::File::create(dir.join(format!("{base}_metrics.csv")))?, &outcome.metrics)?;
                }
                report.runs.push(run);
            }
        }
        if let Some(dir) = out {
            write_csv(&dir.join("toy_runs.csv"), &report.runs)?;
            write_csv(&dir.join("toy_summary.csv"), &report.summary_rows(&self.hash))?;
        }
        Ok(report)
    }

    // File-level commands. Each reads its inputs, writes into `out` and
    // returns the paths it wrote.

    pub fn cmd_gen_world(&self, seed: Option<u64>, out: &Path) -> Result<Vec<PathBuf>, HarnessError> {
        fs::create_dir_all(out)?;
        let (train_world, test_world) = self.worlds(seed.unwrap_or(self.config.world.seed))?;
        let paths = vec![out.join("world.trajwd"), out.join("world_test.trajwd")];
        train_world.save(&paths[0])?;
        test_world.save(&paths[1])?;
        Ok(paths)
    }

    pub fn cmd_collect(&self, world: &Path, seed: Option<u64>, out: &Path) -> Result<Vec<PathBuf>, HarnessError> {
        let w = load_input(world, WorldSpec::load)?;
        fs::create_dir_all(out)?;
        let ds = self.collect(&w, seed.unwrap_or(self.config.evaluation.collect_seed), self.config.collect.samples)?;
        let path = out.join(format!("{}.trajds", stem(world)));
        ds.save(&path)?;
        Ok(vec![path])
    }

    pub fn cmd_train(
        &self,
        dataset: &Path,
        variant: Option<Variant>,
        seed: Option<u64>,
        out: &Path,
    ) -> Result<Vec<PathBuf>, HarnessError> {
        let ds = load_input(dataset, Dataset::load)?;
        fs::create_dir_all(out)?;
        let variant = variant.unwrap_or(self.config.model.variant);
        let seed = seed.unwrap_or(self.config.seeds[0]);
        let outcome = self.train(&ds, variant, seed)?;
        let base = format!("{variant}_seed{seed}");
        let paths = vec![out.join(format!("{base}.ckpt")), out.join(format!("{base}_metrics.csv"))];
        outcome.trained.save(&paths[0])?;
        write_metrics_csv(fs::File::create(&paths[1])?, &outcome.metrics)?;
        Ok(paths)
    }

    pub fn cmd_eval_offline(
        &self,
        checkpoints: &[PathBuf],
        datasets: &[PathBuf],
        out: &Path,
    ) -> Result<(Vec<PathBuf>, Vec<OfflineRow>), HarnessError> {
        if checkpoints.is_empty() || datasets.is_empty() {
            return Err(HarnessError::Usage("eval-offline needs --checkpoint and --dataset".into()));
        }
        let models: Vec<TrainedModel> =
            checkpoints.iter().map(|p| load_input(p, TrainedModel::load)).collect::<Result<_, _>>()?;
        let data: Vec<Dataset> = datasets.iter().map(|p| load_input(p, Dataset::load)).collect::<Result<_, _>>()?;
        let mut rows = Vec::new();
        for m in &models {
            for (path, ds) in datasets.iter().zip(&data) {
                rows.extend(self.evaluate_offline(m, ds, &stem(path))?);
            }
        }
        fs::create_dir_all(out)?;
        let path = out.join("eval_offline.csv");
        write_csv(&path, &rows)?;
        Ok((vec![path], rows))
    }

    pub fn cmd_eval_onpolicy(
        &self,
        checkpoints: &[PathBuf],
        worlds: &[PathBuf],
        out: &Path,
    ) -> Result<(Vec<PathBuf>, Vec<OnPolicySummary>), HarnessError> {
        if worlds.is_empty() {
            return Err(HarnessError::Usage("eval-onpolicy needs at least one --world".into()));
        }
        let models: Vec<TrainedModel> =
            checkpoints.iter().map(|p| load_input(p, TrainedModel::load)).collect::<Result<_, _>>()?;
        let worlds: Vec<(String, WorldSpec)> =
            worlds.iter().map(|p| Ok((stem(p), load_input(p, WorldSpec::load)?))).collect::<Result<_, HarnessError>>()?;
        let rows = self.evaluate_onpolicy(&models, &worlds, true)?;
        let summary = summarize_episodes(&rows, &self.hash);
        fs::create_dir_all(out)?;
        let paths = vec![out.join("episodes.csv"), out.join("onpolicy_summary.csv")];
        write_csv(&paths[0], &rows)?;
        write_csv(&paths[1], &summary)?;
        Ok((paths, summary))
    }

    /// Overlays for one dataset sample: one image per step and one with
    /// all steps superimposed, written as PPM.
    pub fn cmd_export_attention(
        &self,
        checkpoint: &Path,
        dataset: &Path,
        sample: usize,
        out: &Path,
    ) -> Result<Vec<PathBuf>, HarnessError> {
        let m = load_input(checkpoint, TrainedModel::load)?;
        let ds = load_input(dataset, Dataset::load)?;
        if !m.model.variant().has_mask() {
            return Err(HarnessError::Usage("the none variant has no attention mask to export".into()));
        }
        if sample >= ds.len() {
            return Err(HarnessError::Usage(format!("sample {sample} is out of range for {} samples", ds.len())));
        }
        ds.check_compatible(m.model.config())?;
        let output = m.model.predict(&ds.images(&[sample]), &ds.actions(&[sample]))?;
        let masks = output.masks.expect("masked variant returns masks");
        let s = masks.shape();
        let (steps, fh, fw) = (s[1], s[2], s[3]);
        let per_step: Vec<Vec<f64>> = masks.data().chunks(fh * fw).take(steps).map(<[f64]>::to_vec).collect();
        let (_, h, w) = ds.image;
        let frame = Image { width: w, height: h, data: ds.samples[sample].observation.clone() };
        let (step_images, combined) = attention_overlays(&frame, &per_step, fw, fh, m.model.feature_geometry().output_stride());
        fs::create_dir_all(out)?;
        let comment = format!("{}\ncheckpoint {}", provenance(&self.hash, m.meta.seed), stem(checkpoint));
        let base = format!("attention_{}_sample{sample}", m.model.variant());
        let mut paths = Vec::new();
        for (t, img) in step_images.iter().enumerate() {
            let p = out.join(format!("{base}_t{:02}.ppm", t + 1));
            write_ppm(fs::File::create(&p)?, img, &format!("{comment}\nstep {}", t + 1))?;
            paths.push(p);
        }
        let p = out.join(format!("{base}_all.ppm"));
        write_ppm(fs::File::create(&p)?, &combined, &comment)?;
        paths.push(p);
        Ok(paths)
    }
}

/// Mean return per world and policy, in first-appearance order.
pub fn summarize_episodes(rows: &[EpisodeRow], config_hash: &str) -> Vec<OnPolicySummary> {
    let mut keys: Vec<(String, String, Option<u64>)> = Vec::new();
    for r in rows {
        let k = (r.world.clone(), r.policy.clone(), r.model_seed);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(world, policy, model_seed)| {
            let group: Vec<&EpisodeRow> =
                rows.iter().filter(|r| r.world == world && r.policy == policy && r.model_seed == model_seed).collect();
            let (mean, std) = mean_std(&group.iter().map(|r| r.episode_return).collect::<Vec<_>>());
            OnPolicySummary {
                world,
                policy,
                model_seed,
                episodes: group.len(),
                mean_return: mean,
                std_return: std,
                mean_completion: mean_std(&group.iter().map(|r| r.completion).collect::<Vec<_>>()).0,
                collisions: group.iter().filter(|r| r.collided).count(),
                aborted: group.iter().filter(|r| !r.aborted.is_empty()).count(),
                config_hash: config_hash.into(),
            }
        })
        .collect()
}
