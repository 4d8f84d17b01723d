use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;

use super::decoder::Decoder;
use super::encoder::Encoder;
use super::spec::{CodecSpec, InitSource};
use crate::dsp::{log_mel_graph, AudioBuffer, Filterbank};
use crate::error::{Error, Result};
use crate::numerics::{Binder, Checkpoint, Graph, LayerSpec, NodeId, ParamStore, Real, Tensor};
use crate::quantizer::{QuantizeOutput, QuantizeTrace, Quantizer};

const SPEC_KEY: &str = "codec_spec";
const STEPS_KEY: &str = "trained_steps";

/// Encoder, quantizer and decoder with their parameters.
#[derive(Clone, Debug)]
pub struct CodecModel {
    spec: CodecSpec,
    params: ParamStore,
    quantizer: Quantizer,
    encoder: Encoder,
    decoder: Decoder,
    filterbank: Filterbank,
    trained_steps: u64,
}

/// Graph nodes of one encode → quantize → decode pass.
pub struct ForwardNodes {
    /// `[B, L]`, cropped to the input length.
    pub audio_hat: NodeId,
    pub commitment: NodeId,
    pub trace: QuantizeTrace,
    pub frames: usize,
}

/// Which component a parameter belongs to, by name.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Encoder,
    Decoder,
    Quantizer,
}

impl Part {
    pub fn prefix(self) -> &'static str {
        match self {
            Part::Encoder => "encoder/",
            Part::Decoder => "decoder/",
            Part::Quantizer => "vq/",
        }
    }
}

fn shapes_of<'a>(layers: impl IntoIterator<Item = &'a LayerSpec>) -> Vec<(String, Vec<usize>)> {
    layers
        .into_iter()
        .flat_map(|l| l.param_shapes().into_iter().map(move |(s, shape, _)| (l.param_name(s), shape)))
        .collect()
}

/// Every tensor a codec built from `spec` carries, with its shape, without
/// allocating any of them.
pub fn parameter_layout(spec: &CodecSpec) -> Result<Vec<(String, Vec<usize>)>> {
    spec.validate()?;
    let encoder = Encoder::new(&spec.encoder, spec.mel.n_mels)?;
    let decoder = Decoder::new(&spec.decoder, spec.encoder.out_dim())?;
    let mut out = shapes_of(encoder.layers());
    out.extend(shapes_of(decoder.layers()));
    out.extend(vq_layout(spec)?);
    Ok(out)
}

fn vq_layout(spec: &CodecSpec) -> Result<Vec<(String, Vec<usize>)>> {
    let cfg = spec.vq_config();
    let q = Quantizer::new(cfg.clone(), 0)?;
    let mut out = Vec::new();
    if cfg.projection == crate::quantizer::Projection::Factorized {
        for g in 0..cfg.n_group {
            out.extend(shapes_of([&q.pre_layer(g), &q.post_layer(g)]));
        }
    }
    let (k, d) = (cfg.n_codes, cfg.code_dim);
    for g in 0..cfg.n_group {
        for r in 0..cfg.n_residual {
            let p = format!("vq/{g}/{r}");
            out.push((format!("{p}/embeddings"), vec![k, d]));
            out.push((format!("{p}/ema_cluster_size"), vec![k]));
            out.push((format!("{p}/ema_embed_sum"), vec![k, d]));
            out.push((format!("{p}/staleness"), vec![k]));
            out.push((format!("{p}/initialized"), vec![1]));
        }
    }
    Ok(out)
}

fn copy_checked(dst: &mut ParamStore, src: &ParamStore, layout: &[(String, Vec<usize>)]) -> Result<()> {
    for (name, shape) in layout {
        let t = src.get(name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::shape(format!("tensor `{name}`"), shape, t.shape()));
        }
        dst.insert(name.clone(), t.clone());
    }
    Ok(())
}

/// Build a codec, loading `from(...)` sources from disk.
pub fn build_codec(spec: &CodecSpec) -> Result<CodecModel> {
    build_codec_with(spec, |p| Checkpoint::load(p))
}

/// Build a codec, resolving `from(...)` sources through `resolve`.
pub fn build_codec_with(spec: &CodecSpec, mut resolve: impl FnMut(&Path) -> Result<Checkpoint>) -> Result<CodecModel> {
    spec.validate()?;
    let latent = spec.encoder.out_dim();
    let encoder = Encoder::new(&spec.encoder, spec.mel.n_mels)?;
    let decoder = Decoder::new(&spec.decoder, latent)?;
    let mut quantizer = Quantizer::new(spec.vq_config(), spec.seed)?;
    let mut params = ParamStore::new();
    let mut cache: BTreeMap<PathBuf, Checkpoint> = BTreeMap::new();
    let mut source = |p: &PathBuf| -> Result<ParamStore> {
        if !cache.contains_key(p) {
            cache.insert(p.clone(), resolve(p)?);
        }
        Ok(cache[p].tensors.clone())
    };

    match &spec.encoder_init {
        InitSource::Scratch => {
            for l in encoder.layers() {
                l.init(&mut params, spec.seed)?;
            }
        }
        InitSource::From(p) => copy_checked(&mut params, &source(p)?, &shapes_of(encoder.layers()))?,
    }
    match &spec.decoder_init {
        InitSource::Scratch => {
            for l in decoder.layers() {
                l.init(&mut params, spec.seed)?;
            }
        }
        InitSource::From(p) => copy_checked(&mut params, &source(p)?, &shapes_of(decoder.layers()))?,
    }
    match &spec.vq_init {
        InitSource::Scratch => quantizer.init_params(&mut params, spec.seed)?,
        InitSource::From(p) => {
            let src = source(p)?;
            let layout = vq_layout(spec)?;
            let projections: Vec<_> = layout.iter().filter(|(n, _)| n.ends_with(".weight") || n.ends_with(".bias")).cloned().collect();
            copy_checked(&mut ParamStore::new(), &src, &layout)?;
            copy_checked(&mut params, &src, &projections)?;
            quantizer = Quantizer::import(spec.vq_config(), &src, spec.seed)?;
        }
    }
    let filterbank = Filterbank::new(spec.mel.sample_rate, spec.mel.window, spec.mel.n_mels, spec.mel.fmin, spec.mel.fmax)?;
    Ok(CodecModel {
        spec: spec.clone(),
        params,
        quantizer,
        encoder,
        decoder,
        filterbank,
        trained_steps: 0,
    })
}

impl CodecModel {
    pub fn spec(&self) -> &CodecSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn quantizer(&self) -> &Quantizer {
        &self.quantizer
    }

    pub fn quantizer_mut(&mut self) -> &mut Quantizer {
        &mut self.quantizer
    }

    /// Split borrow for training: parameters read-only, quantizer mutable.
    pub fn params_and_quantizer_mut(&mut self) -> (&ParamStore, &mut Quantizer) {
        (&self.params, &mut self.quantizer)
    }

    pub fn part_names(&self, part: Part) -> Vec<String> {
        self.params
            .names()
            .filter(|n| n.starts_with(part.prefix()))
            .map(String::from)
            .collect()
    }

    /// Optimiser steps applied to this model, carried through checkpoints.
    pub fn trained_steps(&self) -> u64 {
        self.trained_steps
    }

    /// Swap in an equivalent spec, e.g. one without the init sources used to build.
    pub(crate) fn replace_spec(&mut self, spec: CodecSpec) {
        self.spec = spec;
    }

    pub(crate) fn record_step(&mut self) {
        self.trained_steps += 1;
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.encoder.out_dim()
    }

    fn check_rate(&self, audio: &AudioBuffer) -> Result<()> {
        if audio.sample_rate() != self.spec.mel.sample_rate {
            return Err(Error::Input(format!(
                "audio sample rate {} does not match codec rate {}",
                audio.sample_rate(),
                self.spec.mel.sample_rate
            )));
        }
        Ok(())
    }

    /// `audio: [B, L]` → latents `[B·T, latent_dim]` and the frame count `T`.
    pub fn latents_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        binder: &mut Binder<'_>,
        audio: NodeId,
        drop: Option<&mut ChaCha8Rng>,
    ) -> Result<(NodeId, usize)> {
        let mel = log_mel_graph(g, audio, &self.filterbank, self.spec.mel.window, self.spec.mel.hop)?;
        let s = g.shape(mel).to_vec();
        let (b, frames) = (s[0], s[1]);
        let mel = g.permute(mel, [0, 2, 1])?;
        let z = self.encoder.forward(g, binder, mel, drop)?;
        let z = g.permute(z, [0, 2, 1])?;
        let z = g.reshape(z, vec![b * frames, self.latent_dim()])?;
        Ok((z, frames))
    }

    /// Latents `[B·T, latent_dim]` → waveform `[B, T·hop]`.
    pub fn decode_graph<T: Real>(&self, g: &mut Graph<T>, binder: &mut Binder<'_>, latents: NodeId, batch: usize) -> Result<NodeId> {
        let s = g.shape(latents).to_vec();
        if s.len() != 2 || s[1] != self.latent_dim() {
            return Err(Error::shape("decoder latents", &[s.first().copied().unwrap_or(0), self.latent_dim()], &s));
        }
        if batch == 0 || s[0] % batch != 0 {
            return Err(Error::Input(format!("{} latent rows do not split into {batch} clips", s[0])));
        }
        let frames = s[0] / batch;
        let z = g.reshape(latents, vec![batch, frames, self.latent_dim()])?;
        let z = g.permute(z, [0, 2, 1])?;
        let y = self.decoder.forward(g, binder, z)?;
        g.reshape(y, vec![batch, frames * self.spec.decoder.hop()])
    }

    /// Full differentiable pass on `audio: [B, L]`. The codebooks must be
    /// initialised; `forced` replaces nearest-code search.
    pub fn forward_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        binder: &mut Binder<'_>,
        audio: NodeId,
        drop: Option<&mut ChaCha8Rng>,
        forced: Option<&[Vec<u32>]>,
    ) -> Result<ForwardNodes> {
        let s = g.shape(audio).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("codec input [batch, samples]", &[1, s.iter().product()], &s));
        }
        let (z, frames) = self.latents_graph(g, binder, audio, drop)?;
        let q = self.quantizer.quantize_graph(g, binder, z, forced)?;
        let y = self.decode_graph(g, binder, q.quantized, s[0])?;
        let audio_hat = g.narrow(y, 1, 0, s[1])?;
        Ok(ForwardNodes {
            audio_hat,
            commitment: q.commitment,
            trace: q.trace,
            frames,
        })
    }

    /// Seed uninitialised codebooks from the latents of `batch: [B, L]`.
    pub fn prepare_quantizer(&mut self, batch: &Tensor<f32>) -> Result<()> {
        if self.quantizer.is_initialized() {
            return Ok(());
        }
        let latents = {
            let mut g = Graph::<f32>::new();
            let mut b = Binder::new(&self.params);
            let x = g.constant(batch);
            let (z, _) = self.latents_graph(&mut g, &mut b, x, None)?;
            g.tensor(z)
        };
        let mut g = Graph::<f32>::new();
        let mut b = Binder::new(&self.params);
        let z = g.constant(&latents);
        self.quantizer.initialize(&mut g, &mut b, z)
    }

    /// Latents `[frames, latent_dim]` of one clip; frames equal mel frames.
    pub fn encode(&self, audio: &AudioBuffer) -> Result<Tensor<f32>> {
        self.check_rate(audio)?;
        let mut g = Graph::<f32>::new();
        let mut b = Binder::new(&self.params);
        let x = g.constant(&Tensor::new([1, audio.len()], audio.samples().to_vec())?);
        let (z, _) = self.latents_graph(&mut g, &mut b, x, None)?;
        let out = g.tensor(z);
        if !out.is_finite() {
            return Err(Error::NonFinite("encoder output".into()));
        }
        Ok(out)
    }

    pub fn quantize(&self, latents: &Tensor<f32>) -> Result<QuantizeOutput> {
        self.quantizer.quantize(&self.params, latents)
    }

    /// Waveform of `frames · hop` samples from latents `[frames, latent_dim]`.
    pub fn decode(&self, latents: &Tensor<f32>) -> Result<AudioBuffer> {
        let mut g = Graph::<f32>::new();
        let mut b = Binder::new(&self.params);
        let z = g.constant(latents);
        let y = self.decode_graph(&mut g, &mut b, z, 1)?;
        AudioBuffer::new(g.value(y).to_vec(), self.spec.mel.sample_rate)
    }

    /// Waveform from code streams `codes[q][frame]`.
    pub fn decode_codes(&self, codes: &[Vec<u32>]) -> Result<AudioBuffer> {
        let mut g = Graph::<f32>::new();
        let mut b = Binder::new(&self.params);
        let z = self.quantizer.dequantize_graph(&mut g, &mut b, codes)?;
        let y = self.decode_graph(&mut g, &mut b, z, 1)?;
        AudioBuffer::new(g.value(y).to_vec(), self.spec.mel.sample_rate)
    }

    /// Encode, quantize and decode one clip; output cropped to the input length.
    pub fn reconstruct(&self, audio: &AudioBuffer) -> Result<(AudioBuffer, QuantizeOutput)> {
        let q = self.quantize(&self.encode(audio)?)?;
        let y = self.decode(&q.quantized)?;
        let mut samples = y.into_samples();
        samples.truncate(audio.len());
        Ok((AudioBuffer::new(samples, audio.sample_rate())?, q))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = self.params.clone();
        self.quantizer.export(&mut tensors);
        let mut ck = Checkpoint::new(tensors);
        ck.metadata.insert(SPEC_KEY.into(), serde_json::to_string(&self.spec)?);
        ck.metadata.insert(STEPS_KEY.into(), self.trained_steps.to_string());
        Ok(ck)
    }

    /// Rebuild from a checkpoint written by [`CodecModel::to_checkpoint`];
    /// every tensor comes from the checkpoint regardless of init sources.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let spec: CodecSpec = serde_json::from_str(
            ck.metadata
                .get(SPEC_KEY)
                .ok_or_else(|| Error::Checkpoint(format!("metadata has no `{SPEC_KEY}`")))?,
        )?;
        let loaded = CodecSpec {
            encoder_init: InitSource::From("<checkpoint>".into()),
            decoder_init: InitSource::From("<checkpoint>".into()),
            vq_init: InitSource::From("<checkpoint>".into()),
            ..spec.clone()
        };
        let layout = parameter_layout(&spec)?;
        let names: std::collections::BTreeSet<&str> = layout.iter().map(|(n, _)| n.as_str()).collect();
        if let Some(extra) = ck.tensors.names().find(|n| !names.contains(n)) {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        let trained_steps = match ck.metadata.get(STEPS_KEY) {
            Some(v) => v
                .parse()
                .map_err(|_| Error::Checkpoint(format!("`{STEPS_KEY}` is not a step count: {v:?}")))?,
            None => 0,
        };
        let mut model = build_codec_with(&loaded, |_| Ok(ck.clone()))?;
        model.spec = spec;
        model.trained_steps = trained_steps;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
