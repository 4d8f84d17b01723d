use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bank::DiscriminatorBank;
use super::losses::{generator_total_loss, lsgan_d_loss, GanLossWeights};
use crate::codec::CodecModel;
use crate::dsp::{AudioBuffer, MelScale, MultiScaleMel};
use crate::error::{Error, Result};
use crate::numerics::{adamw_step, AdamWConfig, AdamWState, Binder, Graph, ParamStore, Tensor};
use crate::quantizer::mean_perplexity_usage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Samples per training segment; the codec's mel segment when unset.
    pub segment: Option<usize>,
    pub seed: u64,
    pub generator: AdamWConfig,
    pub discriminator: AdamWConfig,
    pub weights: GanLossWeights,
    /// Mel-loss analysis scales; half, one and two mel windows when unset.
    pub mel_scales: Option<Vec<MelScale>>,
    /// Fraction of steps allowed to be skipped for non-finite values.
    pub max_skip_fraction: f64,
    /// Generator parameter-name prefixes held fixed.
    pub frozen: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 4,
            segment: None,
            seed: 0,
            generator: AdamWConfig::default(),
            discriminator: AdamWConfig::default(),
            weights: GanLossWeights::default(),
            mel_scales: None,
            max_skip_fraction: 0.01,
            frozen: Vec::new(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale profile: 200 steps of 4 one-second segments at lr 1e-3.
    pub fn desk() -> Self {
        let opt = AdamWConfig {
            lr: 1e-3,
            ..AdamWConfig::default()
        };
        Self {
            steps: 200,
            batch_size: 4,
            generator: opt.clone(),
            discriminator: opt,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("training: steps and batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.max_skip_fraction) {
            return Err(Error::Config("training: max_skip_fraction must lie in [0, 1]".into()));
        }
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.weights.validate()
    }

    pub fn scales(&self, model: &CodecModel) -> Vec<MelScale> {
        self.mel_scales.clone().unwrap_or_else(|| {
            let w = model.spec().mel.window;
            [w / 2, w, 2 * w].into_iter().map(MelScale::quarter_hop).collect()
        })
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub mel: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub fm: f64,
    pub commit: f64,
    pub ppl: f64,
    pub usage: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub metrics: Vec<StepMetrics>,
    pub skipped: usize,
    /// Mean perplexity and usage over each epoch's pooled code histograms.
    pub epoch_codebook: Vec<(f64, f64)>,
}

impl TrainReport {
    /// Mel loss of the first recorded step.
    pub fn initial_mel(&self) -> Option<f64> {
        self.metrics.first().map(|m| m.mel)
    }

    /// Mean mel loss over the last `window` recorded steps.
    pub fn final_mel(&self, window: usize) -> Option<f64> {
        let n = window.min(self.metrics.len());
        if n == 0 {
            return None;
        }
        Some(self.metrics[self.metrics.len() - n..].iter().map(|m| m.mel).sum::<f64>() / n as f64)
    }
}

/// Generator and discriminator parameters with their optimiser states.
pub struct GanState {
    pub bank: DiscriminatorBank,
    pub disc_params: ParamStore,
    pub gen_opt: AdamWState,
    pub disc_opt: AdamWState,
}

impl GanState {
    pub fn new(bank: DiscriminatorBank, seed: u64) -> Result<Self> {
        let mut disc_params = ParamStore::new();
        bank.init_params(&mut disc_params, seed)?;
        Ok(Self {
            bank,
            disc_params,
            gen_opt: AdamWState::default(),
            disc_opt: AdamWState::default(),
        })
    }
}

fn sample_batch(corpus: &[AudioBuffer], batch: usize, segment: usize, rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(batch * segment);
    for _ in 0..batch {
        let clip = corpus[rng.gen_range(0..corpus.len())].samples();
        if clip.len() > segment {
            let off = rng.gen_range(0..=clip.len() - segment);
            data.extend_from_slice(&clip[off..off + segment]);
        } else {
            data.extend_from_slice(clip);
            data.resize(data.len() + segment - clip.len(), 0.0);
        }
    }
    Tensor::new([batch, segment], data)
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// Alternating discriminator / generator training of `model`.
///
/// Per step: encode → quantize → decode a batch of random segments; update
/// the discriminators on the detached output; update the generator on the
/// weighted mel, adversarial, feature-matching and commitment losses; then
/// apply the EMA codebook update. Learning rates decay per epoch, an epoch
/// being one pass worth of batches over the corpus. Steps with non-finite
/// values are skipped; skipping more than the allowed fraction aborts.
pub fn dlt_train(
    corpus: &[AudioBuffer],
    model: &mut CodecModel,
    gan: &mut GanState,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<TrainReport> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Input("training corpus is empty".into()));
    }
    let sr = model.spec().mel.sample_rate;
    if let Some(c) = corpus.iter().find(|c| c.sample_rate() != sr) {
        return Err(Error::Input(format!("corpus clip at {} Hz, codec expects {sr} Hz", c.sample_rate())));
    }
    let segment = cfg.segment.unwrap_or(model.spec().mel.segment);
    let adversarial = cfg.weights.adversarial();
    if adversarial && segment < gan.bank.min_len() {
        return Err(Error::Config(format!(
            "segment of {segment} samples is shorter than the discriminators' minimum {}",
            gan.bank.min_len()
        )));
    }
    let mel_loss = MultiScaleMel::new(&model.spec().mel, &cfg.scales(model))?;
    let steps_per_epoch = corpus.len().div_ceil(cfg.batch_size);
    let max_skips = (cfg.max_skip_fraction * cfg.steps as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd209);
    let mut report = TrainReport {
        metrics: Vec::with_capacity(cfg.steps),
        skipped: 0,
        epoch_codebook: Vec::new(),
    };
    let n_codes = model.spec().n_codes;
    let mut epoch_hist: Vec<Vec<u64>> = Vec::new();

    for step in 0..cfg.steps {
        let epoch = step / steps_per_epoch;
        if step > 0 && step % steps_per_epoch == 0 && !epoch_hist.is_empty() {
            report.epoch_codebook.push(mean_perplexity_usage(&epoch_hist)?);
            epoch_hist.clear();
        }
        let g_lr = cfg.generator.lr_at_epoch(epoch);
        let d_lr = cfg.discriminator.lr_at_epoch(epoch);
        let batch = sample_batch(corpus, cfg.batch_size, segment, &mut rng)?;
        model.prepare_quantizer(&batch)?;

        match train_step(model, gan, cfg, &mel_loss, &batch, &mut drop_rng, g_lr, d_lr, adversarial) {
            Ok((mut m, hist)) => {
                m.step = step + 1;
                m.epoch = epoch;
                if epoch_hist.is_empty() {
                    epoch_hist = vec![vec![0; n_codes]; hist.len()];
                }
                for (acc, h) in epoch_hist.iter_mut().zip(&hist) {
                    acc.iter_mut().zip(h).for_each(|(a, b)| *a += b);
                }
                on_step(&m);
                report.metrics.push(m);
            }
            Err(Error::NonFinite(what)) => {
                report.skipped += 1;
                if report.skipped > max_skips {
                    return Err(Error::TrainingAborted(format!(
                        "{} of {} steps skipped for non-finite values (last: {what})",
                        report.skipped, cfg.steps
                    )));
                }
            }
            Err(e) => return Err(e),
        }
    }
    if !epoch_hist.is_empty() {
        report.epoch_codebook.push(mean_perplexity_usage(&epoch_hist)?);
    }
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut CodecModel,
    gan: &mut GanState,
    cfg: &TrainConfig,
    mel_loss: &MultiScaleMel,
    batch: &Tensor<f32>,
    drop_rng: &mut ChaCha8Rng,
    g_lr: f64,
    d_lr: f64,
    adversarial: bool,
) -> Result<(StepMetrics, Vec<Vec<u64>>)> {
    let mut g = Graph::<f32>::new();
    let mut binder = cfg.frozen.iter().fold(Binder::new(model.params()), |b, p| b.freeze_prefix(p.clone()));
    let y = g.constant(batch);
    let fwd = model.forward_graph(&mut g, &mut binder, y, Some(drop_rng), None)?;
    let y_hat_values = g.tensor(fwd.audio_hat);
    if !y_hat_values.is_finite() {
        return Err(Error::NonFinite("generator output".into()));
    }

    // Discriminator update on the detached generator output.
    let mut adv_d = 0.0;
    if adversarial {
        let mut dg = Graph::<f32>::new();
        let mut db = Binder::new(&gan.disc_params);
        let real = dg.constant(batch);
        let fake = dg.constant(&y_hat_values);
        let r = gan.bank.discriminate(&mut dg, &mut db, real)?;
        let f = gan.bank.discriminate(&mut dg, &mut db, fake)?;
        let loss = lsgan_d_loss(&mut dg, &r, &f)?;
        adv_d = finite(dg.scalar(loss) as f64, "discriminator loss")?;
        dg.backward(loss)?;
        let grads = db.grads(&dg);
        if let Some(n) = grads.keys().find(|n| !n.starts_with("disc/")) {
            return Err(Error::Input(format!("discriminator step produced a gradient for `{n}`")));
        }
        adamw_step(&mut gan.disc_params, &grads, &mut gan.disc_opt, &cfg.discriminator, d_lr)?;
    }

    // Generator update against the refreshed, frozen discriminators.
    let mel = mel_loss.loss_graph(&mut g, y, fwd.audio_hat)?;
    let mut disc_binder = Binder::new(&gan.disc_params).freeze_prefix("");
    let disc = if adversarial {
        let r = gan.bank.discriminate(&mut g, &mut disc_binder, y)?;
        let f = gan.bank.discriminate(&mut g, &mut disc_binder, fwd.audio_hat)?;
        Some((r, f))
    } else {
        None
    };
    let loss = generator_total_loss(&mut g, mel, fwd.commitment, disc.as_ref().map(|(r, f)| (r, f)), &cfg.weights)?;
    finite(g.scalar(loss.total) as f64, "generator loss")?;
    g.backward(loss.total)?;
    let grads = binder.grads(&g);
    if !disc_binder.grads(&g).is_empty() || grads.keys().any(|n| n.starts_with("disc/")) {
        return Err(Error::Input("generator step produced discriminator gradients".into()));
    }
    let scalar = |n: Option<crate::numerics::NodeId>| n.map_or(0.0, |n| g.scalar(n) as f64);
    let hist = fwd.trace.histograms(model.spec().n_codes);
    let (ppl, usage) = mean_perplexity_usage(&hist)?;
    let metrics = StepMetrics {
        step: 0,
        epoch: 0,
        mel: g.scalar(loss.mel) as f64,
        adv_g: scalar(loss.adv),
        adv_d,
        fm: scalar(loss.fm),
        commit: g.scalar(loss.commit) as f64,
        ppl,
        usage,
        lr: g_lr,
    };
    drop(binder);
    drop(disc_binder);
    let trace = fwd.trace;
    drop(g);
    adamw_step(model.params_mut(), &grads, &mut gan.gen_opt, &cfg.generator, g_lr)?;
    model.quantizer_mut().ema_update(&trace)?;
    model.record_step();
    Ok((metrics, hist))
}

/// Mean multi-scale mel loss of `model`'s reconstructions of `clips`.
pub fn reconstruction_mel_loss(model: &CodecModel, clips: &[AudioBuffer], scales: &[MelScale]) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::Input("no clips to evaluate".into()));
    }
    let loss = MultiScaleMel::new(&model.spec().mel, scales)?;
    let mut total = 0.0;
    for c in clips {
        let (y, _) = model.reconstruct(c)?;
        total += loss.loss(c, &y)?;
    }
    Ok(total / clips.len() as f64)
}
