use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Binder, Graph, LayerKind, LayerSpec, NodeId, ParamStore, Real};

const SLOPE: f64 = 0.1;
/// Added to STFT power before the square root.
const MAGNITUDE_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeriodConfig {
    pub periods: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub channels: Vec<usize>,
}

/// Waveform discriminators at average-pooled scales (pool factor 1 = raw audio).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleConfig {
    pub pool_factors: Vec<usize>,
    pub channels: Vec<usize>,
    pub kernels: Vec<usize>,
    pub strides: Vec<usize>,
}

/// Spectrogram discriminators; frequency bins act as input channels of a
/// convolution over time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub n_ffts: Vec<usize>,
    pub hops: Vec<usize>,
    pub filters: usize,
    pub layers: usize,
    pub kernel: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankConfig {
    pub period: Option<PeriodConfig>,
    pub scale: Option<ScaleConfig>,
    pub stft: Option<StftConfig>,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            period: Some(PeriodConfig {
                periods: vec![5, 8, 13, 19, 30],
                kernel: 5,
                stride: 3,
                channels: vec![32, 128, 512, 1024],
            }),
            scale: Some(ScaleConfig {
                pool_factors: vec![1, 2, 4],
                channels: vec![16, 64, 256, 1024, 1024],
                kernels: vec![15, 41, 41, 41, 5],
                strides: vec![1, 4, 4, 4, 1],
            }),
            stft: Some(StftConfig {
                n_ffts: vec![1024, 2048, 512, 256, 128],
                hops: vec![256, 512, 128, 64, 32],
                filters: 32,
                layers: 3,
                kernel: 3,
            }),
        }
    }
}

impl BankConfig {
    /// Same families and periods with narrow layers and quarter-size FFTs.
    pub fn desk() -> Self {
        Self {
            period: Some(PeriodConfig {
                periods: vec![5, 8, 13, 19, 30],
                kernel: 5,
                stride: 3,
                channels: vec![8, 16],
            }),
            scale: Some(ScaleConfig {
                pool_factors: vec![1, 2, 4],
                channels: vec![8, 16, 16],
                kernels: vec![15, 11, 5],
                strides: vec![1, 4, 1],
            }),
            stft: Some(StftConfig {
                n_ffts: vec![256, 512, 128, 64, 32],
                hops: vec![64, 128, 32, 16, 8],
                filters: 8,
                layers: 2,
                kernel: 3,
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("discriminators: {m}")));
        if let Some(p) = &self.period {
            if p.periods.is_empty() || p.periods.windows(2).any(|w| w[0] >= w[1]) || p.periods[0] == 0 {
                return bad(format!("periods must be positive and strictly increasing, got {:?}", p.periods));
            }
            if p.kernel == 0 || p.stride == 0 || p.channels.is_empty() || p.channels.contains(&0) {
                return bad("period kernel, stride and channels must be >= 1".into());
            }
        }
        if let Some(s) = &self.scale {
            let n = s.channels.len();
            if s.pool_factors.is_empty() || s.pool_factors.contains(&0) || n == 0 || s.kernels.len() != n || s.strides.len() != n {
                return bad("scale channels, kernels and strides must be nonempty and of equal length".into());
            }
            if s.channels.contains(&0) || s.kernels.contains(&0) || s.strides.contains(&0) {
                return bad("scale channels, kernels and strides must be >= 1".into());
            }
        }
        if let Some(f) = &self.stft {
            if f.n_ffts.is_empty() || f.n_ffts.len() != f.hops.len() {
                return bad(format!("STFT lists differ in length ({} vs {})", f.n_ffts.len(), f.hops.len()));
            }
            if f.n_ffts.iter().zip(&f.hops).any(|(&n, &h)| n < 2 || h == 0 || h > n) {
                return bad("each STFT needs n_fft >= 2 and 1 <= hop <= n_fft".into());
            }
            if f.filters == 0 || f.layers == 0 || f.kernel == 0 {
                return bad("STFT filters, layers and kernel must be >= 1".into());
            }
        }
        if self.period.is_none() && self.scale.is_none() && self.stft.is_none() {
            return bad("at least one discriminator family is required".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Input {
    Period(usize),
    Pooled(usize),
    Stft { n_fft: usize, hop: usize },
}

#[derive(Clone, Debug)]
struct Sub {
    name: String,
    input: Input,
    hidden: Vec<LayerSpec>,
    out: LayerSpec,
}

/// Graph nodes of one discriminator bank evaluation.
#[derive(Clone, Debug, Default)]
pub struct DiscriminatorOutput {
    /// One score map per sub-discriminator.
    pub scores: Vec<NodeId>,
    /// Hidden activations per sub-discriminator.
    pub features: Vec<Vec<NodeId>>,
    pub names: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct DiscriminatorBank {
    cfg: BankConfig,
    subs: Vec<Sub>,
}

fn conv(name: String, cin: usize, cout: usize, kernel: usize, stride: usize) -> LayerSpec {
    LayerSpec::new(
        name,
        LayerKind::Conv1d {
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            padding: (kernel - 1) / 2,
            dilation: 1,
        },
    )
}

impl DiscriminatorBank {
    pub fn new(cfg: &BankConfig) -> Result<Self> {
        cfg.validate()?;
        let mut subs = Vec::new();
        if let Some(p) = &cfg.period {
            for &period in &p.periods {
                let name = format!("disc/mpd{period}");
                let mut cin = 1;
                let hidden = p
                    .channels
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| {
                        let l = conv(format!("{name}/conv{i}"), cin, c, p.kernel, p.stride);
                        cin = c;
                        l
                    })
                    .collect();
                subs.push(Sub {
                    out: conv(format!("{name}/out"), cin, 1, 3, 1),
                    name,
                    input: Input::Period(period),
                    hidden,
                });
            }
        }
        if let Some(s) = &cfg.scale {
            for &factor in &s.pool_factors {
                let name = format!("disc/msd{factor}");
                let mut cin = 1;
                let hidden = (0..s.channels.len())
                    .map(|i| {
                        let l = conv(format!("{name}/conv{i}"), cin, s.channels[i], s.kernels[i], s.strides[i]);
                        cin = s.channels[i];
                        l
                    })
                    .collect();
                subs.push(Sub {
                    out: conv(format!("{name}/out"), cin, 1, 3, 1),
                    name,
                    input: Input::Pooled(factor),
                    hidden,
                });
            }
        }
        if let Some(f) = &cfg.stft {
            for (i, (&n_fft, &hop)) in f.n_ffts.iter().zip(&f.hops).enumerate() {
                let name = format!("disc/mstft{i}");
                let mut cin = n_fft / 2 + 1;
                let hidden = (0..f.layers)
                    .map(|j| {
                        let l = conv(format!("{name}/conv{j}"), cin, f.filters, f.kernel, 1);
                        cin = f.filters;
                        l
                    })
                    .collect();
                subs.push(Sub {
                    out: conv(format!("{name}/out"), cin, 1, f.kernel, 1),
                    name,
                    input: Input::Stft { n_fft, hop },
                    hidden,
                });
            }
        }
        Ok(Self { cfg: cfg.clone(), subs })
    }

    pub fn config(&self) -> &BankConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.subs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subs.is_empty()
    }

    pub fn init_params(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        for s in &self.subs {
            for l in s.hidden.iter().chain([&s.out]) {
                l.init(store, seed)?;
            }
        }
        Ok(())
    }

    /// Shortest clip every sub-discriminator accepts.
    pub fn min_len(&self) -> usize {
        self.subs
            .iter()
            .map(|s| match s.input {
                Input::Period(p) => 2 * p,
                Input::Pooled(f) => 2 * f,
                Input::Stft { n_fft, .. } => n_fft,
            })
            .max()
            .unwrap_or(1)
    }

    /// Score `audio: [B, L]` with every sub-discriminator.
    pub fn discriminate<T: Real>(&self, g: &mut Graph<T>, binder: &mut Binder<'_>, audio: NodeId) -> Result<DiscriminatorOutput> {
        let s = g.shape(audio).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("discriminator input [batch, samples]", &[1, s.iter().product()], &s));
        }
        let (b, len) = (s[0], s[1]);
        if len < self.min_len() {
            return Err(Error::Input(format!(
                "audio of {len} samples is too short for the discriminators (minimum {})",
                self.min_len()
            )));
        }
        let mut out = DiscriminatorOutput::default();
        let slope = T::lit(SLOPE);
        for sub in &self.subs {
            let mut x = match sub.input {
                Input::Period(p) => period_view(g, audio, p)?,
                Input::Pooled(f) => {
                    let x = g.reshape(audio, vec![b, 1, len])?;
                    if f == 1 {
                        x
                    } else {
                        g.avg_pool1d(x, f, f)?
                    }
                }
                Input::Stft { n_fft, hop } => {
                    let p = g.stft_power(audio, n_fft, hop)?;
                    let p = g.add_scalar(p, T::lit(MAGNITUDE_FLOOR));
                    let m = g.sqrt(p);
                    g.permute(m, [0, 2, 1])?
                }
            };
            let mut feats = Vec::with_capacity(sub.hidden.len());
            for l in &sub.hidden {
                let h = l.apply(g, binder, x)?;
                x = g.leaky_relu(h, slope);
                feats.push(x);
            }
            out.scores.push(sub.out.apply(g, binder, x)?);
            out.features.push(feats);
            out.names.push(sub.name.clone());
        }
        Ok(out)
    }
}

/// `[B, L]` → `[B·p, 1, ⌈L/p⌉]`: row `b·p + j` holds samples `j, j+p, …`,
/// after reflect-padding the tail to a multiple of `p`.
pub fn period_view<T: Real>(g: &mut Graph<T>, audio: NodeId, period: usize) -> Result<NodeId> {
    let s = g.shape(audio).to_vec();
    let (b, len) = (s[0], s[1]);
    let pad = (period - len % period) % period;
    let x = if pad > 0 { g.pad_reflect(audio, 0, pad)? } else { audio };
    let x = g.reshape(x, vec![b, 1, len + pad])?;
    g.period_fold(x, period)
}
