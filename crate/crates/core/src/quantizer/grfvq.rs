use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::codebook::Codebook;
use super::config::{Projection, VQConfig};
use super::metrics::mean_perplexity_usage;
use crate::error::{Error, Result};
use crate::numerics::{Binder, Graph, LayerKind, LayerSpec, NodeId, ParamStore, Real, Tensor};

/// Grouped, residual, factorized vector quantizer with EMA codebooks.
///
/// Codebooks are indexed flat as `q = group * n_residual + round`.
#[derive(Clone, Debug)]
pub struct Quantizer {
    cfg: VQConfig,
    codebooks: Vec<Codebook>,
    rng: ChaCha8Rng,
}

/// Per-codebook assignments and the vectors they were assigned from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct QuantizeTrace {
    pub indices: Vec<Vec<u32>>,
    /// Row-major `[frames, code_dim]` residual inputs of each codebook.
    pub vectors: Vec<Vec<f32>>,
}

impl QuantizeTrace {
    pub fn histograms(&self, n_codes: usize) -> Vec<Vec<u64>> {
        self.indices
            .iter()
            .map(|idx| {
                let mut h = vec![0u64; n_codes];
                for &k in idx {
                    h[k as usize] += 1;
                }
                h
            })
            .collect()
    }

    /// Sum over codebooks' last round of the squared residual left after lookup.
    pub fn residual_error(&self, cfg: &VQConfig, quantizer: &Quantizer) -> f64 {
        let mut err = 0.0;
        for g in 0..cfg.n_group {
            let q = cfg.codebook_index(g, cfg.n_residual - 1);
            let cb = &quantizer.codebooks[q];
            for (v, &k) in self.vectors[q].chunks_exact(cfg.code_dim).zip(&self.indices[q]) {
                err += v
                    .iter()
                    .zip(cb.code(k as usize))
                    .map(|(a, b)| ((a - b) as f64).powi(2))
                    .sum::<f64>();
            }
        }
        err
    }
}

/// Nodes produced by recording a quantization on a graph.
pub struct QuantizeNodes {
    /// Straight-through quantized latents `[frames, latent_dim]`.
    pub quantized: NodeId,
    /// Weighted commitment loss (scalar).
    pub commitment: NodeId,
    pub trace: QuantizeTrace,
}

/// Result of quantizing concrete latents.
#[derive(Clone, Debug)]
pub struct QuantizeOutput {
    /// `indices[q][frame]`, codebook `q = group * n_residual + round`.
    pub indices: Vec<Vec<u32>>,
    pub quantized: Tensor<f32>,
    pub commitment_loss: f64,
    pub histograms: Vec<Vec<u64>>,
}

impl QuantizeOutput {
    pub fn perplexity_usage(&self) -> Result<(f64, f64)> {
        mean_perplexity_usage(&self.histograms)
    }
}

/// Mean squared error between projected latents and (constant) codes, scaled by `weight`.
pub fn commitment_loss<T: Real>(g: &mut Graph<T>, latents: NodeId, codes: NodeId, weight: f64) -> Result<NodeId> {
    let codes = g.stop_gradient(codes)?;
    let mse = g.mse(latents, codes)?;
    Ok(g.scale(mse, T::lit(weight)))
}

impl Quantizer {
    pub fn new(cfg: VQConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let codebooks = (0..cfg.n_codebooks())
            .map(|_| Codebook::zeros(cfg.n_codes, cfg.code_dim))
            .collect();
        Ok(Self {
            cfg,
            codebooks,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x7671),
        })
    }

    /// A quantizer over explicit codebooks (flat order), e.g. for fixtures.
    pub fn with_codebooks(cfg: VQConfig, codebooks: Vec<Codebook>, seed: u64) -> Result<Self> {
        let mut q = Self::new(cfg, seed)?;
        if codebooks.len() != q.cfg.n_codebooks()
            || codebooks
                .iter()
                .any(|c| c.n_codes != q.cfg.n_codes || c.dim != q.cfg.code_dim)
        {
            return Err(Error::Config("codebook count or shape does not match quantizer config".into()));
        }
        q.codebooks = codebooks;
        Ok(q)
    }

    pub fn config(&self) -> &VQConfig {
        &self.cfg
    }

    pub fn codebooks(&self) -> &[Codebook] {
        &self.codebooks
    }

    pub fn codebook(&self, group: usize, round: usize) -> &Codebook {
        &self.codebooks[self.cfg.codebook_index(group, round)]
    }

    pub fn codebook_mut(&mut self, group: usize, round: usize) -> &mut Codebook {
        let q = self.cfg.codebook_index(group, round);
        &mut self.codebooks[q]
    }

    pub fn is_initialized(&self) -> bool {
        self.codebooks.iter().all(|c| c.initialized)
    }

    pub fn pre_layer(&self, group: usize) -> LayerSpec {
        LayerSpec::new(
            format!("vq/{group}/pre"),
            LayerKind::Linear {
                in_features: self.cfg.group_dim(),
                out_features: self.cfg.code_dim,
            },
        )
    }

    pub fn post_layer(&self, group: usize) -> LayerSpec {
        LayerSpec::new(
            format!("vq/{group}/post"),
            LayerKind::Linear {
                in_features: self.cfg.code_dim,
                out_features: self.cfg.group_dim(),
            },
        )
    }

    /// Initialise the trainable projections (no-op for identity projection).
    pub fn init_params(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        if self.cfg.projection == Projection::Factorized {
            for g in 0..self.cfg.n_group {
                self.pre_layer(g).init(store, seed)?;
                self.post_layer(g).init(store, seed)?;
            }
        }
        Ok(())
    }

    /// Names of the trainable projection tensors.
    pub fn param_names(&self) -> Vec<String> {
        if self.cfg.projection == Projection::Identity {
            return vec![];
        }
        (0..self.cfg.n_group)
            .flat_map(|g| {
                let (pre, post) = (self.pre_layer(g), self.post_layer(g));
                ["weight", "bias"]
                    .into_iter()
                    .flat_map(move |s| [pre.param_name(s), post.param_name(s)])
            })
            .collect()
    }

    fn check_latents<T: Real>(&self, g: &Graph<T>, latents: NodeId) -> Result<usize> {
        let s = g.shape(latents);
        if s.len() != 2 || s[1] != self.cfg.latent_dim {
            return Err(Error::shape("quantizer latents", &[s.first().copied().unwrap_or(0), self.cfg.latent_dim], s));
        }
        if let Some(i) = g.value(latents).iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("quantizer latents at index {i}")));
        }
        Ok(s[0])
    }

    fn project_in<T: Real>(&self, g: &mut Graph<T>, binder: &mut Binder<'_>, latents: NodeId, group: usize) -> Result<NodeId> {
        let gd = self.cfg.group_dim();
        let slice = g.narrow(latents, 1, group * gd, gd)?;
        match self.cfg.projection {
            Projection::Factorized => self.pre_layer(group).apply(g, binder, slice),
            Projection::Identity => Ok(slice),
        }
    }

    fn project_out<T: Real>(&self, g: &mut Graph<T>, binder: &mut Binder<'_>, x: NodeId, group: usize) -> Result<NodeId> {
        match self.cfg.projection {
            Projection::Factorized => self.post_layer(group).apply(g, binder, x),
            Projection::Identity => Ok(x),
        }
    }

    /// Seed any uninitialised codebooks from this batch: round 0 from the
    /// projected latents, later rounds from the residuals left by earlier ones.
    pub fn initialize<T: Real>(&mut self, g: &mut Graph<T>, binder: &mut Binder<'_>, latents: NodeId) -> Result<()> {
        if self.is_initialized() {
            return Ok(());
        }
        self.check_latents(g, latents)?;
        let d = self.cfg.code_dim;
        for group in 0..self.cfg.n_group {
            let z = self.project_in(g, binder, latents, group)?;
            let mut residual: Vec<f32> = g.value(z).iter().map(|v| v.as_f64() as f32).collect();
            for round in 0..self.cfg.n_residual {
                let q = self.cfg.codebook_index(group, round);
                if !self.codebooks[q].initialized {
                    let rng = &mut self.rng;
                    self.codebooks[q].init_from_data(&residual, rng)?;
                }
                let cb = &self.codebooks[q];
                for v in residual.chunks_exact_mut(d) {
                    let k = cb.nearest(v).0 as usize;
                    for (x, c) in v.iter_mut().zip(cb.code(k)) {
                        *x -= c;
                    }
                }
            }
        }
        Ok(())
    }

    /// Record quantization of `latents: [frames, latent_dim]`. With `forced`,
    /// the given codes are used instead of nearest-neighbour search.
    pub fn quantize_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        binder: &mut Binder<'_>,
        latents: NodeId,
        forced: Option<&[Vec<u32>]>,
    ) -> Result<QuantizeNodes> {
        if !self.is_initialized() {
            return Err(Error::Input("quantizer codebooks are not initialised".into()));
        }
        let frames = self.check_latents(g, latents)?;
        if let Some(f) = forced {
            if f.len() != self.cfg.n_codebooks() || f.iter().any(|v| v.len() != frames) {
                return Err(Error::Input("forced codes do not match codebook count and frame count".into()));
            }
        }
        let d = self.cfg.code_dim;
        let mut trace = QuantizeTrace {
            indices: vec![Vec::new(); self.cfg.n_codebooks()],
            vectors: vec![Vec::new(); self.cfg.n_codebooks()],
        };
        let mut outs = Vec::with_capacity(self.cfg.n_group);
        let mut commit: Option<NodeId> = None;
        for group in 0..self.cfg.n_group {
            let z = self.project_in(g, binder, latents, group)?;
            let zv: Vec<T> = g.value(z).to_vec();
            let mut residual = zv.clone();
            let mut qsum = vec![T::zero(); zv.len()];
            for round in 0..self.cfg.n_residual {
                let q = self.cfg.codebook_index(group, round);
                let cb = &self.codebooks[q];
                let as_f32: Vec<f32> = residual.iter().map(|v| v.as_f64() as f32).collect();
                let idx = match forced {
                    Some(f) => {
                        if let Some(&k) = f[q].iter().find(|&&k| k as usize >= cb.n_codes) {
                            return Err(Error::Input(format!("code {k} out of range")));
                        }
                        f[q].clone()
                    }
                    None => cb.assign(&as_f32),
                };
                for (t, &k) in idx.iter().enumerate() {
                    let code = cb.code(k as usize);
                    for j in 0..d {
                        let c = T::lit(code[j] as f64);
                        residual[t * d + j] -= c;
                        qsum[t * d + j] += c;
                    }
                }
                trace.indices[q] = idx;
                trace.vectors[q] = as_f32;
            }
            let codes = g.constant_vec(vec![frames, d], qsum.clone())?;
            let c = commitment_loss(g, z, codes, self.cfg.commitment_weight)?;
            commit = Some(match commit {
                None => c,
                Some(prev) => g.add(prev, c)?,
            });
            let st = g.straight_through(z, qsum)?;
            outs.push(self.project_out(g, binder, st, group)?);
        }
        let quantized = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
        let commitment = g.scale(commit.expect("n_group >= 1"), T::lit(1.0 / self.cfg.n_group as f64));
        Ok(QuantizeNodes {
            quantized,
            commitment,
            trace,
        })
    }

    /// Latents `[frames, latent_dim]` reconstructed from codes alone.
    pub fn dequantize_graph<T: Real>(&self, g: &mut Graph<T>, binder: &mut Binder<'_>, codes: &[Vec<u32>]) -> Result<NodeId> {
        if codes.len() != self.cfg.n_codebooks() {
            return Err(Error::Input(format!(
                "expected {} code streams, got {}",
                self.cfg.n_codebooks(),
                codes.len()
            )));
        }
        let frames = codes[0].len();
        if frames == 0 || codes.iter().any(|c| c.len() != frames) {
            return Err(Error::Input("code streams must be nonempty and of equal length".into()));
        }
        let d = self.cfg.code_dim;
        let mut outs = Vec::new();
        for group in 0..self.cfg.n_group {
            let mut qsum = vec![T::zero(); frames * d];
            for round in 0..self.cfg.n_residual {
                let q = self.cfg.codebook_index(group, round);
                let cb = &self.codebooks[q];
                for (t, &k) in codes[q].iter().enumerate() {
                    if k as usize >= cb.n_codes {
                        return Err(Error::Input(format!("code {k} out of range for codebook {q}")));
                    }
                    for (j, &c) in cb.code(k as usize).iter().enumerate() {
                        qsum[t * d + j] += T::lit(c as f64);
                    }
                }
            }
            let node = g.constant_vec(vec![frames, d], qsum)?;
            outs.push(self.project_out(g, binder, node, group)?);
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            g.concat(&outs, 1)
        }
    }

    /// Quantize concrete latents with frozen codebooks.
    pub fn quantize(&self, params: &ParamStore, latents: &Tensor<f32>) -> Result<QuantizeOutput> {
        let mut g = Graph::<f32>::new();
        let mut binder = Binder::new(params);
        let x = g.constant(latents);
        let nodes = self.quantize_graph(&mut g, &mut binder, x, None)?;
        Ok(QuantizeOutput {
            histograms: nodes.trace.histograms(self.cfg.n_codes),
            indices: nodes.trace.indices,
            quantized: g.tensor(nodes.quantized),
            commitment_loss: g.scalar(nodes.commitment) as f64,
        })
    }

    /// EMA update of every codebook from a trace, followed by dead-code
    /// re-seeding when enabled. Returns the number of re-seeded codes.
    pub fn ema_update(&mut self, trace: &QuantizeTrace) -> Result<usize> {
        if trace.indices.len() != self.codebooks.len() {
            return Err(Error::Input("trace does not match quantizer".into()));
        }
        let mut reseeded = 0;
        for (q, cb) in self.codebooks.iter_mut().enumerate() {
            cb.ema_update(&trace.indices[q], &trace.vectors[q], self.cfg.ema_decay, self.cfg.epsilon)?;
            if let Some(u) = self.cfg.dead_code_threshold {
                reseeded += cb.reseed_dead_codes(&trace.vectors[q], u, &mut self.rng);
            }
        }
        Ok(reseeded)
    }

    pub fn export(&self, store: &mut ParamStore) {
        for group in 0..self.cfg.n_group {
            for round in 0..self.cfg.n_residual {
                self.codebook(group, round).export(&format!("vq/{group}/{round}"), store);
            }
        }
    }

    pub fn import(cfg: VQConfig, store: &ParamStore, seed: u64) -> Result<Self> {
        let mut q = Self::new(cfg, seed)?;
        for group in 0..q.cfg.n_group {
            for round in 0..q.cfg.n_residual {
                let cb = Codebook::import(&format!("vq/{group}/{round}"), store, q.cfg.n_codes, q.cfg.code_dim)?;
                *q.codebook_mut(group, round) = cb;
            }
        }
        Ok(q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_cfg(n_residual: usize, n_group: usize, n_codes: usize, dim: usize) -> VQConfig {
        let mut c = VQConfig::new(n_residual, n_group, n_codes, dim, dim * n_group);
        c.projection = Projection::Identity;
        c
    }

    #[test]
    fn exact_row_is_selected_with_zero_commitment() {
        let cb = Codebook::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]).unwrap();
        let q = Quantizer::with_codebooks(identity_cfg(1, 1, 2, 2), vec![cb], 0).unwrap();
        let x = Tensor::new([1, 2], vec![-3.0, 0.5]).unwrap();
        let out = q.quantize(&ParamStore::new(), &x).unwrap();
        assert_eq!(out.indices, vec![vec![1]]);
        assert_eq!(out.commitment_loss, 0.0);
        assert_eq!(out.quantized.data(), x.data());
    }

    #[test]
    fn two_rounds_recover_sum_of_codes() {
        let v = vec![1.0f32, 0.0];
        let w = vec![0.0f32, 0.25];
        let cb0 = Codebook::from_rows(&[v.clone(), vec![-5.0, -5.0]]).unwrap();
        let cb1 = Codebook::from_rows(&[vec![3.0, 3.0], w.clone()]).unwrap();
        let q = Quantizer::with_codebooks(identity_cfg(2, 1, 2, 2), vec![cb0, cb1], 0).unwrap();
        let x = Tensor::new([1, 2], vec![1.0, 0.25]).unwrap();
        let out = q.quantize(&ParamStore::new(), &x).unwrap();
        assert_eq!(out.indices, vec![vec![0], vec![1]]);
        assert_eq!(out.quantized.data(), &[1.0, 0.25]);
        assert_eq!(out.commitment_loss, 0.0);
    }

    #[test]
    fn commitment_scalar_case() {
        let mut g = Graph::<f64>::new();
        let z = g.input(&Tensor::new([1], vec![1.0]).unwrap());
        let c = g.constant(&Tensor::new([1], vec![0.0]).unwrap());
        let l = commitment_loss(&mut g, z, c, 0.25).unwrap();
        assert_eq!(g.scalar(l), 0.25);
        let l0 = commitment_loss(&mut g, z, c, 0.0).unwrap();
        assert_eq!(g.scalar(l0), 0.0);
        g.backward(l).unwrap();
        assert_eq!(g.grad(z).unwrap(), &[0.5]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn uninitialised_codebooks_rejected() {
        let q = Quantizer::new(identity_cfg(1, 1, 4, 2), 0).unwrap();
        let x = Tensor::new([1, 2], vec![0.0, 0.0]).unwrap();
        assert!(q.quantize(&ParamStore::new(), &x).is_err());
    }

    #[test]
    fn non_finite_latents_rejected() {
        let cb = Codebook::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let q = Quantizer::with_codebooks(identity_cfg(1, 1, 2, 1), vec![cb], 0).unwrap();
        let x = Tensor::new([2, 1], vec![0.0, f32::NAN]).unwrap();
        assert!(matches!(q.quantize(&ParamStore::new(), &x), Err(Error::NonFinite(_))));
    }
}
