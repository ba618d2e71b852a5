//! Experiment steps shared by the CLI and the tests. Work is spread over a
//! rayon pool of `jobs` threads; every unit draws from its own seeded stream
//! and results are collected in input order, so outputs do not depend on
//! `jobs`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use geoattack_core::ga::{self, AttackResources, GaConfig, GaStep};
use geoattack_core::metrics::{score_batch, ScoreReport};
use geoattack_core::partition::{self, TransferMatrix};
use geoattack_core::zoo::{self, AutoencoderPair, Classifier, Split, ToyDataset};
use geoattack_core::{AttackRecord, Metric};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, Family, PartitionChoice};
use crate::container::{self, Container};

/// Runs `f` over `0..n` on `jobs` threads, keeping index order.
pub fn par_map<T, F>(jobs: usize, n: usize, f: F) -> anyhow::Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> anyhow::Result<T> + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?;
    pool.install(|| (0..n).into_par_iter().map(&f).collect())
}

/// File layout under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.bin")
    }

    pub fn model(&self, id: &str) -> PathBuf {
        self.root.join("models").join(format!("{id}.bin"))
    }

    pub fn autoencoder(&self) -> PathBuf {
        self.root.join("models").join("autoencoder.bin")
    }

    pub fn accuracy(&self) -> PathBuf {
        self.root.join("accuracy.csv")
    }

    pub fn transfer_matrix(&self) -> PathBuf {
        self.root.join("transfer_matrix.csv")
    }

    pub fn attack_dir(&self, mode: &str, family: Family) -> PathBuf {
        let fam = match family {
            Family::Linf => "linf",
            Family::Fsa => "fsa",
        };
        self.root.join(format!("attack-{mode}-{fam}"))
    }
}

pub fn generate_dataset(cfg: &ExperimentConfig) -> anyhow::Result<ToyDataset> {
    let d = &cfg.dataset;
    let seed = d.seed.context("dataset seed unresolved")?;
    Ok(zoo::gen_toy_dataset(seed, d.classes, d.per_class, d.size)?)
}

pub fn load_dataset(layout: &Layout) -> anyhow::Result<ToyDataset> {
    let path = layout.dataset();
    let c = Container::read(&path).with_context(|| format!("reading {} (run gen-data first)", path.display()))?;
    Ok(container::dataset_from_container(&c)?)
}

/// One accuracy-table row.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyRow {
    pub id: String,
    pub arch: String,
    pub seed: u64,
    pub epochs: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

pub struct TrainedZoo {
    pub models: Vec<Classifier>,
    pub autoencoder: AutoencoderPair,
    pub accuracy: Vec<AccuracyRow>,
}

/// Trains every classifier and the autoencoder (one job each).
pub fn train_zoo(cfg: &ExperimentConfig, data: &ToyDataset, jobs: usize) -> anyhow::Result<TrainedZoo> {
    let ids = cfg.model_ids();
    let n = cfg.zoo.models.len();
    let mut outputs = par_map(jobs, n + 1, |i| -> anyhow::Result<Result<Classifier, AutoencoderPair>> {
        if i == n {
            let seed = cfg.zoo.autoencoder_seed.context("autoencoder seed unresolved")?;
            return Ok(Err(zoo::train_autoencoder_with(data, seed, &cfg.zoo.autoencoder)?));
        }
        let entry = &cfg.zoo.models[i];
        let seed = entry.seed.context("model seed unresolved")?;
        Ok(Ok(zoo::train_classifier_with(entry.arch, data, seed, &cfg.zoo.train)?))
    })?;
    let autoencoder = match outputs.pop() {
        Some(Err(ae)) => ae,
        _ => unreachable!("last job trains the autoencoder"),
    };
    let models: Vec<Classifier> = outputs.into_iter().map(|r| r.expect("classifier jobs")).collect();
    let accuracy = models
        .iter()
        .zip(&ids)
        .map(|(m, id)| {
            Ok(AccuracyRow {
                id: id.clone(),
                arch: m.arch.tag().into(),
                seed: m.seed,
                epochs: m.epochs,
                train_accuracy: zoo::accuracy(m, data, Split::Train)?,
                test_accuracy: m.accuracy,
            })
        })
        .collect::<anyhow::Result<_>>()?;
    Ok(TrainedZoo {
        models,
        autoencoder,
        accuracy,
    })
}

pub fn load_zoo(cfg: &ExperimentConfig, layout: &Layout) -> anyhow::Result<(Vec<Classifier>, AutoencoderPair)> {
    let models = cfg
        .model_ids()
        .iter()
        .map(|id| {
            let path = layout.model(id);
            let c = Container::read(&path).with_context(|| format!("reading {} (run train-zoo first)", path.display()))?;
            Ok(container::classifier_from_container(&c)?)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let path = layout.autoencoder();
    let c = Container::read(&path).with_context(|| format!("reading {} (run train-zoo first)", path.display()))?;
    Ok((models, container::autoencoder_from_container(&c)?))
}

/// The first `n` held-out images that every zoo model labels correctly.
pub fn evaluation_inputs(data: &ToyDataset, models: &[Classifier], n: usize) -> anyhow::Result<Vec<usize>> {
    let test = data.indices(Split::Test);
    let x = data.images.gather_first(&test);
    let mut ok = vec![true; test.len()];
    for m in models {
        for (k, p) in m.predict(&x)?.into_iter().enumerate() {
            ok[k] &= p == data.labels[test[k]];
        }
    }
    let picked: Vec<usize> = test.iter().zip(&ok).filter(|(_, &o)| o).map(|(&i, _)| i).take(n).collect();
    if picked.is_empty() {
        bail!("no held-out image is classified correctly by every model");
    }
    Ok(picked)
}

pub fn compute_transfer_matrix(
    cfg: &ExperimentConfig,
    data: &ToyDataset,
    models: &[Classifier],
    inputs: &[usize],
    jobs: usize,
) -> anyhow::Result<TransferMatrix> {
    let ids = cfg.model_ids();
    let pool_ids: Vec<String> = cfg.pool.iter().map(|&i| ids[i].clone()).collect();
    let refs: Vec<&Classifier> = cfg.pool.iter().map(|&i| &models[i]).collect();
    let rows = par_map(jobs, refs.len(), |s| {
        Ok(partition::transfer_row(s, &refs, data, inputs, &cfg.transfer)?)
    })?;
    Ok(TransferMatrix::from_rows(pool_ids, &rows)?)
}

/// `(train, validation)` as zoo indices.
pub fn resolve_partition(cfg: &ExperimentConfig, w: Option<&TransferMatrix>) -> anyhow::Result<(Vec<usize>, Vec<usize>)> {
    match &cfg.partition {
        PartitionChoice::Fixed { train, validation } => Ok((train.clone(), validation.clone())),
        PartitionChoice::Auto => {
            let w = w.context("automatic partition needs the transfer matrix")?;
            let local: Vec<usize> = (0..cfg.pool.len()).collect();
            let best = partition::best_partition(w, &local, cfg.partition_k)?;
            let map = |v: &[usize]| v.iter().map(|&i| cfg.pool[i]).collect();
            Ok((map(&best.train), map(&best.validation)))
        }
    }
}

/// Full `K`-step trajectories for every input (the η sweep selects from them).
#[allow(clippy::too_many_arguments)]
pub fn ga_trajectories(
    data: &ToyDataset,
    inputs: &[usize],
    f: &[&Classifier],
    h: &[&Classifier],
    ga_cfg: &GaConfig,
    resources: &AttackResources<'_>,
    jobs: usize,
) -> anyhow::Result<Vec<Vec<GaStep>>> {
    par_map(jobs, inputs.len(), |k| {
        let i = inputs[k];
        Ok(ga::ga_trajectory(&data.image(i), data.labels[i], f, h, ga_cfg, resources, i, None)?)
    })
}

pub fn select_records(
    trajectories: &[Vec<GaStep>],
    data: &ToyDataset,
    inputs: &[usize],
    eta: f64,
    metric: Metric,
) -> anyhow::Result<Vec<AttackRecord>> {
    trajectories
        .iter()
        .zip(inputs)
        .map(|(s, &i)| Ok(ga::select_stop(s, eta, i, data.labels[i], metric)?))
        .collect()
}

/// One score row per η.
pub fn eta_sweep(
    trajectories: &[Vec<GaStep>],
    data: &ToyDataset,
    inputs: &[usize],
    grid: &[f64],
    metric: Metric,
    test_model: &Classifier,
) -> anyhow::Result<Vec<(f64, ScoreReport)>> {
    grid.iter()
        .map(|&eta| {
            let recs = select_records(trajectories, data, inputs, eta, metric)?;
            Ok((eta, score_batch(&recs, test_model)?))
        })
        .collect()
}

pub fn fixed_records(
    data: &ToyDataset,
    inputs: &[usize],
    f: &[&Classifier],
    epsilon_k: f64,
    ga_cfg: &GaConfig,
    resources: &AttackResources<'_>,
    jobs: usize,
) -> anyhow::Result<Vec<AttackRecord>> {
    par_map(jobs, inputs.len(), |k| {
        let i = inputs[k];
        Ok(ga::run_fixed_baseline(&data.image(i), data.labels[i], f, epsilon_k, ga_cfg, resources, i)?)
    })
}

/// Adversarial batch container.
pub fn records_to_container(records: &[AttackRecord]) -> anyhow::Result<Container> {
    let mut c = Container::new("adversarial");
    let parts: Vec<_> = records.iter().map(|r| r.adversarial.clone()).collect();
    c.tensors
        .insert("images".into(), geoattack_core::DenseArray::stack_first(&parts)?);
    c.arrays.insert("index".into(), records.iter().map(|r| r.index as u64).collect());
    c.arrays.insert("label".into(), records.iter().map(|r| r.label as u64).collect());
    c.arrays.insert("k_star".into(), records.iter().map(|r| r.stop_index as u64).collect());
    let floats = |f: fn(&AttackRecord) -> f64| geoattack_core::DenseArray::new(vec![records.len()], records.iter().map(f).collect());
    c.tensors.insert("distance".into(), floats(|r| r.distance)?);
    c.tensors.insert("budget".into(), floats(|r| r.budget)?);
    c.text.insert(
        "metric".into(),
        records.first().map(|r| r.metric.tag()).unwrap_or("linf").into(),
    );
    Ok(c)
}

pub fn records_from_container(c: &Container) -> anyhow::Result<Vec<AttackRecord>> {
    if c.kind != "adversarial" {
        bail!("expected an adversarial container, found {}", c.kind);
    }
    let get = |k: &str| c.tensors.get(k).with_context(|| format!("missing {k}"));
    let arr = |k: &str| c.arrays.get(k).with_context(|| format!("missing {k}"));
    let images = get("images")?;
    let (index, label, kstar) = (arr("index")?, arr("label")?, arr("k_star")?);
    let (dist, budget) = (get("distance")?, get("budget")?);
    let metric = match c.text.get("metric").map(String::as_str) {
        Some("unrestricted") => Metric::Unrestricted,
        _ => Metric::Linf,
    };
    let n = index.len();
    if images.shape()[0] != n || label.len() != n || kstar.len() != n || dist.len() != n || budget.len() != n {
        bail!("adversarial container columns disagree in length");
    }
    Ok((0..n)
        .map(|k| AttackRecord {
            index: index[k] as usize,
            label: label[k] as usize,
            adversarial: images.slice_first(k),
            metric,
            distance: dist.data()[k],
            budget: budget.data()[k],
            stop_index: kstar[k] as usize,
            validation_confidence: None,
            predictions: Vec::new(),
            style: None,
        })
        .collect())
}
