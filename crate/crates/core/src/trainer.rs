//! Gradient-descent loops and per-iteration snapshots.
//!
//! One iteration is one SGD step on one mini-batch. Mini-batches are drawn
//! without replacement from a seeded per-epoch shuffle; the reparameterisation
//! noise comes from the same seeded stream, so a run is fully determined by
//! `(dataset, config, labels)`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::LabelStore;
use crate::dataset::Dataset;
use crate::exec::Exec;
use crate::model::{self, Architecture, LossBreakdown, LossWeights, ModelError, ModelParameters, Vec3, LATENT_DIM};
use crate::numerics::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("fine-tuning needs at least one labelled sample")]
    NoLabels,
    #[error("dataset has dimension {dataset} but the model expects {model}")]
    DimensionMismatch { dataset: usize, model: usize },
    #[error("label store covers {store} samples, dataset has {dataset}")]
    StoreSize { store: usize, dataset: usize },
    #[error("non-finite loss at iteration {iteration}: {losses:?}")]
    NonFiniteLoss { iteration: u64, losses: LossBreakdown },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub steps_per_update: usize,
    pub beta: f64,
    pub lambda: f64,
    pub seed: u64,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    /// Emit every k-th training snapshot; the last one of a run is always emitted.
    pub snapshot_every: usize,
    /// Swap a labelled sample into batches that would otherwise have none.
    pub ensure_labeled_in_batch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            pretrain_epochs: 20,
            steps_per_update: 50,
            beta: 1.0,
            lambda: 10.0,
            seed: 0,
            encoder_hidden: 128,
            decoder_hidden: 128,
            snapshot_every: 1,
            ensure_labeled_in_batch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(TrainError::Config(m.to_owned()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if self.steps_per_update == 0 {
            return fail("steps_per_update must be at least 1");
        }
        if self.snapshot_every == 0 {
            return fail("snapshot_every must be at least 1");
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) || !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return fail("beta and lambda must be finite and non-negative");
        }
        if self.encoder_hidden == 0 || self.decoder_hidden == 0 {
            return fail("hidden widths must be at least 1");
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            beta: self.beta,
            lambda: self.lambda,
        }
    }

    pub fn architecture(&self, input_dim: usize, classes: usize) -> Architecture {
        Architecture {
            input_dim,
            encoder_hidden: self.encoder_hidden,
            decoder_hidden: self.decoder_hidden,
            classes,
        }
    }

    /// Fresh parameters for `dataset`, seeded by `self.seed`.
    pub fn init_params(&self, dataset: &Dataset) -> Result<ModelParameters> {
        Ok(ModelParameters::init(
            self.architecture(dataset.dim(), dataset.classes()),
            self.seed,
        )?)
    }
}

/// Embedding of the whole dataset at one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub iteration: u64,
    pub positions: Vec<Vec3>,
    pub label_state: Vec<Option<usize>>,
    pub losses: LossBreakdown,
}

/// Cluster-separation statistics over labelled samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Defined when at least two classes have two or more labelled samples.
    pub silhouette: Option<f64>,
    /// Mean pairwise distance within classes; needs a class with two samples.
    pub mean_intra_class_distance: Option<f64>,
    /// Mean distance between class centroids; needs two labelled classes.
    pub mean_inter_class_centroid_distance: Option<f64>,
    pub labeled: usize,
}

impl Metrics {
    pub fn is_defined(&self) -> bool {
        self.silhouette.is_some()
    }
}

const EMBED_CHUNK: usize = 256;

/// Posterior mean of every sample.
pub fn embed_all(params: &ModelParameters, dataset: &Dataset) -> Result<Vec<Vec3>> {
    embed_all_with(Exec::default(), params, dataset)
}

pub fn embed_all_with(exec: Exec, params: &ModelParameters, dataset: &Dataset) -> Result<Vec<Vec3>> {
    if dataset.dim() != params.input_dim() {
        return Err(TrainError::DimensionMismatch {
            dataset: dataset.dim(),
            model: params.input_dim(),
        });
    }
    let n = dataset.len();
    let chunks = n.div_ceil(EMBED_CHUNK);
    let work = n * dataset.dim() * params.architecture().encoder_hidden;
    let parts = exec.map(chunks, work, |c| {
        let rows: Vec<usize> = (c * EMBED_CHUNK..((c + 1) * EMBED_CHUNK).min(n)).collect();
        let (mu, _) = model::encode_batch(Exec::Sequential, &dataset.images().select_rows(&rows), params)
            .expect("dimension checked above");
        (0..mu.rows())
            .map(|i| [mu.get(i, 0), mu.get(i, 1), mu.get(i, 2)])
            .collect::<Vec<Vec3>>()
    });
    Ok(parts.concat())
}

/// Noise-free objective over the whole dataset (`z = mu`).
pub fn evaluate(
    exec: Exec,
    params: &ModelParameters,
    dataset: &Dataset,
    labels: &[Option<usize>],
    weights: LossWeights,
) -> Result<LossBreakdown> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let noise = Matrix::zeros(dataset.len(), LATENT_DIM);
    Ok(model::total_loss_with(
        exec,
        dataset.images(),
        labels,
        params,
        &noise,
        weights,
    )?)
}

/// Fraction of samples whose predicted class (from `mu`) matches `eval_labels`.
pub fn classifier_accuracy(params: &ModelParameters, dataset: &Dataset) -> Result<Option<f64>> {
    let Some(truth) = dataset.eval_labels() else {
        return Ok(None);
    };
    if dataset.is_empty() {
        return Ok(None);
    }
    let positions = embed_all(params, dataset)?;
    let correct = positions
        .iter()
        .zip(truth)
        .filter(|(p, &t)| model::predict_class(**p, params) == t)
        .count();
    Ok(Some(correct as f64 / dataset.len() as f64))
}

fn distance(a: &Vec3, b: &Vec3) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn compute_metrics(positions: &[Vec3], labels: &LabelStore) -> Metrics {
    compute_metrics_with(Exec::default(), positions, &labels.classes_view())
}

/// Silhouette and distance statistics for samples whose label is `Some`.
pub fn compute_metrics_with(exec: Exec, positions: &[Vec3], labels: &[Option<usize>]) -> Metrics {
    assert_eq!(positions.len(), labels.len(), "one label slot per position");
    let classes = labels.iter().flatten().map(|&c| c + 1).max().unwrap_or(0);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, l) in labels.iter().enumerate() {
        if let Some(c) = *l {
            members[c].push(i);
        }
    }
    let groups: Vec<&Vec<usize>> = members.iter().filter(|m| !m.is_empty()).collect();
    let labeled: usize = groups.iter().map(|g| g.len()).sum();

    let mut intra_sum = 0.0;
    let mut intra_pairs = 0usize;
    for g in &groups {
        for (a, &i) in g.iter().enumerate() {
            for &j in &g[a + 1..] {
                intra_sum += distance(&positions[i], &positions[j]);
                intra_pairs += 1;
            }
        }
    }
    let mean_intra_class_distance = (intra_pairs > 0).then(|| intra_sum / intra_pairs as f64);

    let centroids: Vec<Vec3> = groups
        .iter()
        .map(|g| {
            let mut c = [0.0; 3];
            for &i in g.iter() {
                for k in 0..3 {
                    c[k] += positions[i][k];
                }
            }
            c.map(|v| v / g.len() as f64)
        })
        .collect();
    let mut inter_sum = 0.0;
    let mut inter_pairs = 0usize;
    for a in 0..centroids.len() {
        for b in a + 1..centroids.len() {
            inter_sum += distance(&centroids[a], &centroids[b]);
            inter_pairs += 1;
        }
    }
    let mean_inter_class_centroid_distance = (inter_pairs > 0).then(|| inter_sum / inter_pairs as f64);

    let defined = groups.iter().filter(|g| g.len() >= 2).count() >= 2;
    let silhouette = defined.then(|| {
        let flat: Vec<(usize, usize)> = groups
            .iter()
            .enumerate()
            .flat_map(|(gi, g)| g.iter().map(move |&i| (gi, i)))
            .collect();
        let scores = exec.map(flat.len(), flat.len() * labeled * 4, |k| {
            let (gi, i) = flat[k];
            let own = groups[gi];
            if own.len() < 2 {
                return 0.0;
            }
            let mean_to = |g: &Vec<usize>| g.iter().map(|&j| distance(&positions[i], &positions[j])).sum::<f64>();
            let a = mean_to(own) / (own.len() - 1) as f64;
            let b = groups
                .iter()
                .enumerate()
                .filter(|(gj, _)| *gj != gi)
                .map(|(_, g)| mean_to(g) / g.len() as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom > 0.0 {
                (b - a) / denom
            } else {
                0.0
            }
        });
        scores.iter().sum::<f64>() / scores.len() as f64
    });

    Metrics {
        silhouette,
        mean_intra_class_distance,
        mean_inter_class_centroid_distance,
        labeled,
    }
}

/// Stateful SGD driver shared by pre-training, fine-tuning and sessions.
#[derive(Debug, Clone)]
pub struct Trainer {
    params: ModelParameters,
    config: TrainConfig,
    exec: Exec,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    iteration: u64,
}

impl Trainer {
    pub fn new(params: ModelParameters, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            params,
            config,
            exec: Exec::default(),
            rng,
            order: Vec::new(),
            cursor: 0,
            iteration: 0,
        })
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn params(&self) -> &ModelParameters {
        &self.params
    }

    pub fn into_params(self) -> ModelParameters {
        self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Mini-batches per epoch for a dataset of `n` samples.
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.config.batch_size)
    }

    fn check(&self, dataset: &Dataset, labels: Option<&LabelStore>) -> Result<()> {
        if dataset.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        if dataset.dim() != self.params.input_dim() {
            return Err(TrainError::DimensionMismatch {
                dataset: dataset.dim(),
                model: self.params.input_dim(),
            });
        }
        if let Some(store) = labels {
            if store.len() != dataset.len() {
                return Err(TrainError::StoreSize {
                    store: store.len(),
                    dataset: dataset.len(),
                });
            }
        }
        Ok(())
    }

    fn next_batch(&mut self, n: usize, labels: Option<&LabelStore>) -> Vec<usize> {
        if self.order.len() != n || self.cursor >= n {
            self.order = (0..n).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.config.batch_size).min(n);
        let mut batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        if self.config.ensure_labeled_in_batch {
            if let Some(store) = labels {
                if !batch.iter().any(|&i| store.class_of(i).is_some()) {
                    let labeled: Vec<usize> = (0..n).filter(|&i| store.class_of(i).is_some()).collect();
                    if !labeled.is_empty() {
                        let pick = labeled[self.rng.random_range(0..labeled.len())];
                        *batch.last_mut().expect("batch is never empty") = pick;
                    }
                }
            }
        }
        batch
    }

    /// One gradient step. `labels = None` trains the unsupervised objective.
    ///
    /// Returns the mini-batch losses evaluated before the update.
    pub fn step(&mut self, dataset: &Dataset, labels: Option<&LabelStore>) -> Result<LossBreakdown> {
        self.check(dataset, labels)?;
        let batch = self.next_batch(dataset.len(), labels);
        let x = dataset.images().select_rows(&batch);
        let batch_labels: Vec<Option<usize>> = match labels {
            Some(store) => batch.iter().map(|&i| store.class_of(i)).collect(),
            None => vec![None; batch.len()],
        };
        let noise_data: Vec<f64> = (0..batch.len() * LATENT_DIM)
            .map(|_| self.rng.sample(StandardNormal))
            .collect();
        let noise = Matrix::from_vec(batch.len(), LATENT_DIM, noise_data);
        let (losses, grads) = model::loss_and_gradients(
            self.exec,
            &x,
            &batch_labels,
            &self.params,
            &noise,
            self.config.weights(),
        )?;
        let iteration = self.iteration + 1;
        if !losses.is_finite() {
            return Err(TrainError::NonFiniteLoss { iteration, losses });
        }
        self.params = model::sgd_step(&self.params, &grads, self.config.learning_rate)?;
        self.iteration = iteration;
        Ok(losses)
    }

    pub fn embed(&self, dataset: &Dataset) -> Result<Vec<Vec3>> {
        embed_all_with(self.exec, &self.params, dataset)
    }

    pub fn snapshot(&self, dataset: &Dataset, labels: Option<&LabelStore>, losses: LossBreakdown) -> Result<Snapshot> {
        Ok(Snapshot {
            iteration: self.iteration,
            positions: self.embed(dataset)?,
            label_state: labels.map_or_else(|| vec![None; dataset.len()], LabelStore::classes_view),
            losses,
        })
    }

    fn should_emit(&self, step_in_run: usize, run_len: usize) -> bool {
        step_in_run == run_len || step_in_run.is_multiple_of(self.config.snapshot_every)
    }

    /// `steps` gradient steps, emitting snapshots as configured.
    pub fn run(
        &mut self,
        dataset: &Dataset,
        labels: Option<&LabelStore>,
        steps: usize,
        on_snapshot: &mut dyn FnMut(Snapshot),
    ) -> Result<()> {
        for s in 1..=steps {
            let losses = self.step(dataset, labels)?;
            if self.should_emit(s, steps) {
                on_snapshot(self.snapshot(dataset, labels, losses)?);
            }
        }
        Ok(())
    }
}

/// Unsupervised (VAE-only) training from a fresh initialisation.
pub fn pretrain(
    dataset: &Dataset,
    config: &TrainConfig,
    on_snapshot: &mut dyn FnMut(Snapshot),
) -> Result<ModelParameters> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let params = config.init_params(dataset)?;
    pretrain_from(params, dataset, config, on_snapshot)
}

pub fn pretrain_from(
    params: ModelParameters,
    dataset: &Dataset,
    config: &TrainConfig,
    on_snapshot: &mut dyn FnMut(Snapshot),
) -> Result<ModelParameters> {
    let mut trainer = Trainer::new(params, config.clone())?;
    let steps = config.pretrain_epochs * trainer.steps_per_epoch(dataset.len());
    trainer.run(dataset, None, steps, on_snapshot)?;
    Ok(trainer.into_params())
}

/// `steps_per_update` steps of the full objective on the annotated dataset.
pub fn fine_tune(
    params: ModelParameters,
    dataset: &Dataset,
    labels: &LabelStore,
    config: &TrainConfig,
    on_snapshot: &mut dyn FnMut(Snapshot),
) -> Result<ModelParameters> {
    if !labels.has_labels() {
        return Err(TrainError::NoLabels);
    }
    let mut trainer = Trainer::new(params, config.clone())?;
    trainer.run(dataset, Some(labels), config.steps_per_update, on_snapshot)?;
    Ok(trainer.into_params())
}
