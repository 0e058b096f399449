//! The toy-scale training loop.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::aligned_voxels;
use crate::entropy::quantize::to_symbols;
use crate::entropy::{FactorizedModel, PARAMS_PER_CHANNEL};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::network::forward::{self, MapCache};
use crate::network::{scale_coords, Model, NetworkConfig, NetworkWeights, Prune};
use crate::prior::{dequantize_params, quantize_params, select_template, TemplateModel};
use crate::sparse::CoordSet;

use super::adam::Adam;
use super::dataset::Sample;
use super::loss::LossBreakdown;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambdas: Vec<f64>,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Epochs per λ, starting from the shared base model.
    pub epochs: usize,
    /// Epochs of the shared base model.
    pub warmup_epochs: usize,
    /// λ of the base model; the smallest λ (highest rate) when unset.
    pub warmup_lambda: Option<f64>,
    pub batch_size: usize,
    pub seed: u64,
    pub network: NetworkConfig,
    /// Train on residuals against the body prior; otherwise on the latent itself.
    pub prior: bool,
    /// Prior surface samples per source point.
    pub sampling_ratio: f64,
    /// Logistic scale of the initial entropy model.
    pub entropy_init_scale: f64,
    /// Directory receiving one model file per λ.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambdas: vec![0.2, 0.5, 1.1, 2.5, 6.0, 9.0, 13.0],
            learning_rate: 16e-4,
            weight_decay: 1e-4,
            epochs: 8,
            warmup_epochs: 8,
            warmup_lambda: None,
            batch_size: 4,
            seed: 0,
            network: NetworkConfig::default(),
            prior: true,
            sampling_ratio: 1.0,
            entropy_init_scale: 4.0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if self.lambdas.is_empty()
            || self.lambdas.iter().chain(&self.warmup_lambda).any(|&l| !(l.is_finite() && l > 0.0))
        {
            return Err(Error::Config("every λ must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.sampling_ratio.is_finite() && self.sampling_ratio > 0.0) {
            return Err(Error::Config("sampling ratio must be positive".into()));
        }
        if !(self.entropy_init_scale.is_finite() && self.entropy_init_scale > 0.0) {
            return Err(Error::Config("entropy init scale must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate at `step` of `total`: halved at 50% and again at 75%.
    pub fn learning_rate_at(&self, step: usize, total: usize) -> f64 {
        let mut lr = self.learning_rate;
        if 2 * step >= total {
            lr *= 0.5;
        }
        if 4 * step >= 3 * total {
            lr *= 0.5;
        }
        lr
    }
}

/// One trained operating point.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub lambda: f64,
    pub model: Model,
    /// Loss of the final optimizer step.
    pub last: LossBreakdown,
}

struct Prepared {
    /// Source coordinates at scales `0..=L`.
    truth: Vec<Arc<CoordSet>>,
    aligned: Option<Arc<CoordSet>>,
    precision: u8,
    cache: MapCache,
}

/// Per-layer gradient sums in [`NetworkWeights::iter`] order, then the
/// entropy parameters.
struct GradSum {
    layers: Vec<(Vec<f64>, Option<Vec<f64>>)>,
    entropy: Vec<f64>,
}

impl GradSum {
    fn zeros(w: &NetworkWeights<f64>, entropy: usize) -> Self {
        GradSum {
            layers: w
                .iter()
                .map(|(_, k)| (vec![0.0; k.weights.len()], k.bias.as_ref().map(|b| vec![0.0; b.len()])))
                .collect(),
            entropy: vec![0.0; entropy],
        }
    }

    fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b.iter().flatten()))
            .chain(&self.entropy)
            .all(|v| v.is_finite())
    }
}

fn accumulate(dst: &mut [f64], src: Option<&[f32]>) {
    if let Some(src) = src {
        for (d, &s) in dst.iter_mut().zip(src) {
            *d += s as f64;
        }
    }
}

/// Gradient-based trainer for one network and entropy model.
pub struct Trainer {
    config: TrainConfig,
    samples: Vec<Prepared>,
    weights: NetworkWeights<f64>,
    entropy: FactorizedModel,
    adam: Adam,
    steps: u64,
}

impl Trainer {
    /// Prepares every sample: multiscale ground truth and, with the prior on,
    /// the aligned cloud derived from the sample's quantized parameters.
    pub fn new(dataset: &[Sample], templates: &[TemplateModel], config: &TrainConfig) -> Result<Trainer> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        let scales = config.network.scales;
        let samples = dataset
            .iter()
            .enumerate()
            .map(|(i, s)| {
                if s.voxels.is_empty() {
                    return Err(Error::Degenerate(format!("training sample {i} is empty")));
                }
                if (s.precision as usize) < scales {
                    return Err(Error::Config(format!(
                        "sample {i} has precision {} below {scales} scales",
                        s.precision
                    )));
                }
                let truth = scale_coords(&s.voxels, scales);
                let aligned = if config.prior {
                    let params = dequantize_params(&quantize_params(&s.params)?);
                    let template = select_template(templates, params.gender)
                        .ok_or_else(|| Error::Config("prior training needs a template".into()))?;
                    let n = (truth[0].len() as f64 * config.sampling_ratio).round().max(1.0) as usize;
                    let seed = config.seed.wrapping_add(i as u64);
                    let v = aligned_voxels(template, &params, n, seed, s.precision)?;
                    (!v.is_empty()).then(|| Arc::new(CoordSet::from_sorted_unique(v)))
                } else {
                    None
                };
                Ok(Prepared {
                    truth,
                    aligned,
                    precision: s.precision,
                    cache: MapCache::default(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let weights = NetworkWeights::init(&config.network, config.seed)?;
        let entropy = FactorizedModel::new(
            config.network.latent_channels,
            config.entropy_init_scale,
            config.seed.wrapping_add(1),
        );
        let adam = Self::optimizer(&weights, &entropy, config.weight_decay);
        Ok(Trainer {
            config: config.clone(),
            samples,
            weights,
            entropy,
            adam,
            steps: 0,
        })
    }

    fn optimizer(weights: &NetworkWeights<f64>, entropy: &FactorizedModel, decay: f64) -> Adam {
        let mut sizes = Vec::new();
        for (_, k) in weights.iter() {
            sizes.push(k.weights.len());
            sizes.push(k.bias.as_ref().map_or(0, Vec::len));
        }
        sizes.push(entropy.params().len());
        Adam::new(&sizes, decay)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Optimizer steps taken so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn weights(&self) -> &NetworkWeights<f64> {
        &self.weights
    }

    pub fn entropy(&self) -> &FactorizedModel {
        &self.entropy
    }

    /// Replaces the parameters and clears the optimizer moments.
    pub fn restore(&mut self, weights: NetworkWeights<f64>, entropy: FactorizedModel) -> Result<()> {
        if weights.config() != &self.config.network || entropy.channels() != self.config.network.latent_channels {
            return Err(Error::Config("restored parameters do not match the network".into()));
        }
        self.weights = weights;
        self.entropy = entropy;
        self.reset_optimizer();
        Ok(())
    }

    pub fn reset_optimizer(&mut self) {
        self.adam = Self::optimizer(&self.weights, &self.entropy, self.config.weight_decay);
    }

    /// Builds the loss graph of sample `i` and, when `grads` is given,
    /// accumulates its gradients.
    fn sample_loss(
        &mut self,
        i: usize,
        w: &NetworkWeights<f32>,
        lambda: f64,
        rng: &mut ChaCha8Rng,
        grads: Option<&mut GradSum>,
    ) -> Result<LossBreakdown> {
        let net = &self.config.network;
        let (scales, ch) = (net.scales, net.latent_channels);
        let prep = &mut self.samples[i];
        let n0 = prep.truth[0].len() as f64;
        let mut g = Graph::<f32>::new();
        let bound = forward::bind(&mut g, w);
        let cache = &mut prep.cache;

        let source = forward::extract(&mut g, &bound, w, &prep.truth[0], cache)?;
        let (latent_coords, latent) = source.last().cloned().expect("at least one scale");
        let warped = match &prep.aligned {
            Some(a) => {
                let stack = forward::extract(&mut g, &bound, w, a, cache)?;
                Some(forward::warp(&mut g, &bound, w, &stack, latent_coords.clone(), cache)?)
            }
            None => None,
        };
        let delta = match warped {
            Some(v) => g.sub(latent, v)?,
            None => latent,
        };
        let noise: Vec<f32> = (0..g.value(delta).len()).map(|_| rng.random_range(-0.5..0.5)).collect();
        let noisy = g.straight_through(delta, &noise);
        let params = g.leaf(
            self.entropy.params().iter().map(|&v| v as f32).collect(),
            PARAMS_PER_CHANNEL,
        );
        let bits = g.bits(noisy, params, ch)?;
        let latent_hat = match warped {
            Some(v) => g.add(v, noisy)?,
            None => noisy,
        };
        let out = forward::propagate(
            &mut g,
            &bound,
            w,
            latent_hat,
            latent_coords,
            prep.precision,
            Prune::Truth(&prep.truth[..scales]),
            cache,
        )?;
        let mut terms: Vec<(Var, f64)> = vec![(bits, lambda / n0)];
        let mut distortion = 0.0;
        for (b, block) in out.blocks.iter().enumerate() {
            let truth = &prep.truth[scales - 1 - b];
            let targets: Vec<bool> = block.candidates.iter().map(|c| truth.contains(c)).collect();
            let bce = g.bce(block.logits, Arc::new(targets))?;
            distortion += g.scalar(bce);
            terms.push((bce, 1.0));
        }
        let loss = LossBreakdown::new(lambda, g.scalar(bits) / n0, distortion);
        if let Some(sum) = grads {
            let total = g.lin_comb(&terms);
            let gr = g.backward(total);
            for ((name, _), (gw, gb)) in w.iter().zip(sum.layers.iter_mut()) {
                let (wv, bv) = bound.get(name)?;
                accumulate(gw, gr.get(wv));
                if let (Some(gb), Some(bv)) = (gb.as_mut(), bv) {
                    accumulate(gb, gr.get(bv));
                }
            }
            accumulate(&mut sum.entropy, gr.get(params));
        }
        Ok(loss)
    }

    fn noise_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.steps);
        rng
    }

    /// Loss of sample `i` under the current parameters without updating them.
    pub fn evaluate(&mut self, i: usize, lambda: f64) -> Result<LossBreakdown> {
        if i >= self.samples.len() {
            return Err(Error::Contract(format!("sample {i} of {}", self.samples.len())));
        }
        let w = self.weights.cast::<f32>();
        let mut rng = self.noise_rng();
        self.sample_loss(i, &w, lambda, &mut rng, None)
    }

    /// One optimizer step on the samples in `batch`; returns their mean loss.
    /// A non-finite loss or gradient leaves the parameters untouched.
    pub fn step(&mut self, batch: &[usize], lambda: f64, lr: f64) -> Result<LossBreakdown> {
        if batch.is_empty() || batch.iter().any(|&i| i >= self.samples.len()) {
            return Err(Error::Contract("batch indices out of range".into()));
        }
        let w = self.weights.cast::<f32>();
        let mut rng = self.noise_rng();
        let mut sum = GradSum::zeros(&self.weights, self.entropy.params().len());
        let (mut r, mut d) = (0.0, 0.0);
        for &i in batch {
            let l = self.sample_loss(i, &w, lambda, &mut rng, Some(&mut sum))?;
            r += l.rate;
            d += l.distortion;
        }
        let n = batch.len() as f64;
        let loss = LossBreakdown::new(lambda, r / n, d / n);
        if !loss.total.is_finite() || !sum.all_finite() {
            return Err(Error::Training(format!("non-finite loss at step {}", self.steps)));
        }
        self.steps += 1;
        self.adam.tick();
        let scale = 1.0 / n;
        let mut group = 0;
        for ((_, k), (gw, gb)) in self.weights.iter_mut().zip(&mut sum.layers) {
            gw.iter_mut().for_each(|g| *g *= scale);
            self.adam.update(group, &mut k.weights, gw, lr, true);
            if let (Some(b), Some(gb)) = (k.bias.as_mut(), gb.as_mut()) {
                gb.iter_mut().for_each(|g| *g *= scale);
                self.adam.update(group + 1, b, gb, lr, false);
            }
            group += 2;
        }
        sum.entropy.iter_mut().for_each(|g| *g *= scale);
        self.adam.update(group, self.entropy.params_mut(), &sum.entropy, lr, false);
        Ok(loss)
    }

    /// Rounded residual symbols of sample `i`, as the encoder produces them.
    fn residual_symbols(&mut self, i: usize, w: &NetworkWeights<f32>) -> Result<Vec<i32>> {
        let prep = &mut self.samples[i];
        let mut g = Graph::<f32>::new();
        let bound = forward::bind(&mut g, w);
        let cache = &mut prep.cache;
        let source = forward::extract(&mut g, &bound, w, &prep.truth[0], cache)?;
        let (coords, latent) = source.last().cloned().expect("at least one scale");
        let delta = match &prep.aligned {
            Some(a) => {
                let stack = forward::extract(&mut g, &bound, w, a, cache)?;
                let warped = forward::warp(&mut g, &bound, w, &stack, coords, cache)?;
                g.sub(latent, warped)?
            }
            None => latent,
        };
        Ok(to_symbols(g.value(delta)))
    }

    /// The current parameters as a codec model, with symbol ranges fitted
    /// to the residuals of the whole training set.
    pub fn model(&mut self) -> Result<Model> {
        let w = self.weights.cast::<f32>();
        let mut symbols = Vec::new();
        for i in 0..self.samples.len() {
            symbols.extend(self.residual_symbols(i, &w)?);
        }
        let mut entropy = self.entropy.clone();
        entropy.fit_ranges(&symbols);
        Model::new(w, entropy)
    }

    /// Runs `epochs` passes at `lambda`, logging every step.
    fn run(&mut self, lambda: f64, epochs: usize, order: &mut ChaCha8Rng, log: &mut dyn Write) -> Result<LossBreakdown> {
        let batch = self.config.batch_size.min(self.samples.len());
        let per_epoch = self.samples.len().div_ceil(batch);
        let total = epochs * per_epoch;
        let mut last = None;
        let mut step = 0;
        let mut indices: Vec<usize> = (0..self.samples.len()).collect();
        for _ in 0..epochs {
            indices.shuffle(order);
            for chunk in indices.chunks(batch) {
                let lr = self.config.learning_rate_at(step, total);
                let loss = self.step(chunk, lambda, lr)?;
                writeln!(log, "{}", loss.log_line(self.steps as usize))?;
                last = Some(loss);
                step += 1;
            }
        }
        match last {
            Some(l) => Ok(l),
            None => {
                let w = self.weights.cast::<f32>();
                let mut rng = self.noise_rng();
                self.sample_loss(0, &w, lambda, &mut rng, None)
            }
        }
    }
}

fn checkpoint_path(dir: &Path, lambda: f64, suffix: &str) -> PathBuf {
    dir.join(format!("lambda_{lambda}{suffix}.pgw"))
}

/// Trains one model per λ. A base model is trained for `warmup_epochs`
/// (at the smallest λ unless configured), then each λ starts from it for
/// `epochs`. Each step's
/// loss goes to `log` as `step,lambda,R,D,total`.
///
/// On a non-finite loss the last good parameters are written next to the
/// checkpoints (when a directory is configured) and training stops with
/// [`Error::Training`].
pub fn train(
    dataset: &[Sample],
    templates: &[TemplateModel],
    config: &TrainConfig,
    log: &mut dyn Write,
) -> Result<Vec<TrainedModel>> {
    let mut trainer = Trainer::new(dataset, templates, config)?;
    let mut order = ChaCha8Rng::seed_from_u64(config.seed);
    order.set_stream(u64::MAX);
    if let Some(dir) = &config.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let guard = |trainer: &mut Trainer, lambda: f64, r: Result<LossBreakdown>| -> Result<LossBreakdown> {
        if let (Err(Error::Training(msg)), Some(dir)) = (&r, &config.checkpoint_dir) {
            let path = checkpoint_path(dir, lambda, ".last_good");
            trainer.model()?.save(&path)?;
            return Err(Error::Training(format!("{msg}; last good model saved to {}", path.display())));
        }
        r
    };

    let base_lambda = config
        .warmup_lambda
        .unwrap_or_else(|| config.lambdas.iter().copied().fold(f64::INFINITY, f64::min));
    let r = trainer.run(base_lambda, config.warmup_epochs, &mut order, log);
    guard(&mut trainer, base_lambda, r)?;
    let base = (trainer.weights.clone(), trainer.entropy.clone());

    let mut out = Vec::with_capacity(config.lambdas.len());
    for &lambda in &config.lambdas {
        trainer.restore(base.0.clone(), base.1.clone())?;
        let r = trainer.run(lambda, config.epochs, &mut order, log);
        let last = guard(&mut trainer, lambda, r)?;
        let model = trainer.model()?;
        if let Some(dir) = &config.checkpoint_dir {
            model.save(checkpoint_path(dir, lambda, ""))?;
        }
        log::info!("λ = {lambda}: R = {:.4} bpp, D = {:.4}", last.rate, last.distortion);
        out.push(TrainedModel { lambda, model, last });
    }
    Ok(out)
}
