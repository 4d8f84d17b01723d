use super::spec::DecoderSpec;
use crate::error::Result;
use crate::numerics::{Binder, Graph, LayerKind, LayerSpec, NodeId, Real};

const SLOPE: f64 = 0.1;
const FINAL_SLOPE: f64 = 0.01;

/// HiFi-GAN style generator: transposed-conv upsamplers, each followed by a
/// multi-receptive-field fusion of dilated residual blocks.
#[derive(Clone, Debug)]
pub struct Decoder {
    pre: LayerSpec,
    ups: Vec<Upsampler>,
    post: LayerSpec,
}

#[derive(Clone, Debug)]
struct Upsampler {
    up: LayerSpec,
    /// `[kernel][dilation] -> (dilated conv, plain conv)`
    resblocks: Vec<Vec<(LayerSpec, LayerSpec)>>,
}

/// Transposed-conv kernel and padding giving an output exactly `rate` times longer.
pub fn upsampler_geometry(rate: usize) -> (usize, usize) {
    let kernel = 2 * rate + rate % 2;
    (kernel, (kernel - rate) / 2)
}

impl Decoder {
    pub fn new(spec: &DecoderSpec, in_channels: usize) -> Result<Self> {
        spec.validate()?;
        let c0 = spec.initial_channels;
        let mut ups = Vec::new();
        let mut ch = c0;
        for (i, &rate) in spec.rates.iter().enumerate() {
            let out = spec.channels_after(i);
            let (kernel, padding) = upsampler_geometry(rate);
            let up = LayerSpec::new(
                format!("decoder/up{i}"),
                LayerKind::ConvTranspose1d {
                    in_channels: ch,
                    out_channels: out,
                    kernel,
                    stride: rate,
                    padding,
                },
            );
            let resblocks = spec
                .resblock_kernels
                .iter()
                .zip(&spec.resblock_dilations)
                .enumerate()
                .map(|(j, (&k, dils))| {
                    dils.iter()
                        .enumerate()
                        .map(|(m, &d)| {
                            let p = format!("decoder/up{i}/res{j}/{m}");
                            (
                                LayerSpec::conv_same(format!("{p}/c1"), out, out, k, d),
                                LayerSpec::conv_same(format!("{p}/c2"), out, out, k, 1),
                            )
                        })
                        .collect()
                })
                .collect();
            ups.push(Upsampler { up, resblocks });
            ch = out;
        }
        Ok(Self {
            pre: LayerSpec::conv_same("decoder/pre", in_channels, c0, spec.pre_kernel, 1),
            ups,
            post: LayerSpec::conv_same("decoder/post", ch, 1, spec.post_kernel, 1),
        })
    }

    pub fn layers(&self) -> Vec<&LayerSpec> {
        let mut out = vec![&self.pre];
        for u in &self.ups {
            out.push(&u.up);
            for rb in &u.resblocks {
                for (a, b) in rb {
                    out.extend([a, b]);
                }
            }
        }
        out.push(&self.post);
        out
    }

    /// `[B, latent_dim, T]` → waveform `[B, 1, T·Πrates]` in (-1, 1).
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, binder: &mut Binder<'_>, latents: NodeId) -> Result<NodeId> {
        let slope = T::lit(SLOPE);
        let mut x = self.pre.apply(g, binder, latents)?;
        for u in &self.ups {
            let a = g.leaky_relu(x, slope);
            x = u.up.apply(g, binder, a)?;
            let mut fused: Option<NodeId> = None;
            for rb in &u.resblocks {
                let mut h = x;
                for (c1, c2) in rb {
                    let t = g.leaky_relu(h, slope);
                    let t = c1.apply(g, binder, t)?;
                    let t = g.leaky_relu(t, slope);
                    let t = c2.apply(g, binder, t)?;
                    h = g.add(h, t)?;
                }
                fused = Some(match fused {
                    None => h,
                    Some(f) => g.add(f, h)?,
                });
            }
            let n = u.resblocks.len() as f64;
            x = g.scale(fused.expect("at least one resblock"), T::lit(1.0 / n));
        }
        let a = g.leaky_relu(x, T::lit(FINAL_SLOPE));
        let y = self.post.apply(g, binder, a)?;
        Ok(g.tanh(y))
    }
}
