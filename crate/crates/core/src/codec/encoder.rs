use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::spec::EncoderSpec;
use crate::error::Result;
use crate::numerics::{same_padding, Binder, Graph, LayerKind, LayerSpec, NodeId, Real};

/// ConvNeXt-style encoder over log-mel frames. Every stage is stride 1, so
/// the latent frame rate equals the mel frame rate.
#[derive(Clone, Debug)]
pub struct Encoder {
    spec: EncoderSpec,
    stem: LayerSpec,
    stem_norm: LayerSpec,
    stages: Vec<Stage>,
    norm: LayerSpec,
}

#[derive(Clone, Debug)]
struct Stage {
    /// Norm + pointwise conv changing the channel count, absent when it is unchanged.
    transition: Option<(LayerSpec, LayerSpec)>,
    blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
struct Block {
    dw: LayerSpec,
    norm: LayerSpec,
    expand: LayerSpec,
    contract: LayerSpec,
}

fn pointwise(name: String, cin: usize, cout: usize) -> LayerSpec {
    LayerSpec::conv_same(name, cin, cout, 1, 1)
}

fn norm(name: String, channels: usize) -> LayerSpec {
    LayerSpec::new(name, LayerKind::LayerNorm { channels })
}

impl Encoder {
    pub fn new(spec: &EncoderSpec, in_channels: usize) -> Result<Self> {
        spec.validate()?;
        let k = spec.kernel;
        let d0 = spec.dims[0];
        let mut stages = Vec::new();
        for (i, (&depth, &dim)) in spec.depths.iter().zip(&spec.dims).enumerate() {
            let p = format!("encoder/stage{i}");
            let prev = if i == 0 { d0 } else { spec.dims[i - 1] };
            let transition = (prev != dim).then(|| (norm(format!("{p}/down_norm"), prev), pointwise(format!("{p}/down"), prev, dim)));
            let blocks = (0..depth)
                .map(|j| {
                    let b = format!("{p}/block{j}");
                    Block {
                        dw: LayerSpec::new(
                            format!("{b}/dw"),
                            LayerKind::DepthwiseConv1d {
                                channels: dim,
                                kernel: k,
                                stride: 1,
                                padding: same_padding(k, 1),
                                dilation: 1,
                            },
                        ),
                        norm: norm(format!("{b}/norm"), dim),
                        expand: pointwise(format!("{b}/pw1"), dim, dim * spec.expansion),
                        contract: pointwise(format!("{b}/pw2"), dim * spec.expansion, dim),
                    }
                })
                .collect();
            stages.push(Stage { transition, blocks });
        }
        Ok(Self {
            spec: spec.clone(),
            stem: LayerSpec::conv_same("encoder/stem", in_channels, d0, k, 1),
            stem_norm: norm("encoder/stem_norm".into(), d0),
            stages,
            norm: norm("encoder/norm".into(), spec.out_dim()),
        })
    }

    pub fn layers(&self) -> Vec<&LayerSpec> {
        let mut out = vec![&self.stem, &self.stem_norm];
        for s in &self.stages {
            if let Some((a, b)) = &s.transition {
                out.extend([a, b]);
            }
            for b in &s.blocks {
                out.extend([&b.dw, &b.norm, &b.expand, &b.contract]);
            }
        }
        out.push(&self.norm);
        out
    }

    /// `mel: [B, n_mels, T]` → `[B, out_dim, T]`. With `drop` set, residual
    /// branches are dropped per sample at the configured rate.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        binder: &mut Binder<'_>,
        mel: NodeId,
        mut drop: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let x = self.stem.apply(g, binder, mel)?;
        let mut x = self.stem_norm.apply(g, binder, x)?;
        for stage in &self.stages {
            if let Some((n, down)) = &stage.transition {
                let h = n.apply(g, binder, x)?;
                x = down.apply(g, binder, h)?;
            }
            for b in &stage.blocks {
                let h = b.dw.apply(g, binder, x)?;
                let h = b.norm.apply(g, binder, h)?;
                let h = b.expand.apply(g, binder, h)?;
                let h = g.gelu(h);
                let mut h = b.contract.apply(g, binder, h)?;
                if let Some(rng) = drop.as_deref_mut() {
                    h = drop_path(g, h, self.spec.drop_rate, rng)?;
                }
                x = g.add(x, h)?;
            }
        }
        self.norm.apply(g, binder, x)
    }
}

/// Zero the branch for each sample with probability `rate`, rescaling survivors.
fn drop_path<T: Real>(g: &mut Graph<T>, h: NodeId, rate: f64, rng: &mut ChaCha8Rng) -> Result<NodeId> {
    if rate <= 0.0 {
        return Ok(h);
    }
    let shape = g.shape(h).to_vec();
    let per = shape[1..].iter().product::<usize>();
    let mut mask = Vec::with_capacity(shape[0] * per);
    for _ in 0..shape[0] {
        let keep = if rng.gen::<f64>() < rate { 0.0 } else { 1.0 / (1.0 - rate) };
        mask.extend(std::iter::repeat(T::lit(keep)).take(per));
    }
    let m = g.constant_vec(shape, mask)?;
    g.mul(h, m)
}
