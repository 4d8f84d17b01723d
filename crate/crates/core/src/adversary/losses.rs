use serde::{Deserialize, Serialize};

use super::bank::DiscriminatorOutput;
use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanLossWeights {
    pub mel: f64,
    pub fm: f64,
    /// Weight of the generator's adversarial term; 0 turns training into
    /// plain mel + commitment regression.
    pub adv: f64,
}

impl Default for GanLossWeights {
    fn default() -> Self {
        Self {
            mel: 45.0,
            fm: 2.0,
            adv: 1.0,
        }
    }
}

impl GanLossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.mel, self.fm, self.adv].iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0, got {self:?}")));
        }
        Ok(())
    }

    pub fn adversarial(&self) -> bool {
        self.adv > 0.0 || self.fm > 0.0
    }
}

fn sum_nodes<T: Real>(g: &mut Graph<T>, nodes: &[NodeId]) -> Result<NodeId> {
    let mut acc = *nodes.first().ok_or_else(|| Error::Input("no discriminator outputs".into()))?;
    for &n in &nodes[1..] {
        acc = g.add(acc, n)?;
    }
    Ok(acc)
}

/// `mean((x - target)²)`.
fn mean_sq_from<T: Real>(g: &mut Graph<T>, x: NodeId, target: f64) -> NodeId {
    let d = g.add_scalar(x, T::lit(-target));
    let sq = g.square(d);
    g.mean(sq)
}

/// Σₖ mean((Dₖ(y) − 1)²) + mean(Dₖ(ŷ)²).
pub fn lsgan_d_loss<T: Real>(g: &mut Graph<T>, real: &DiscriminatorOutput, fake: &DiscriminatorOutput) -> Result<NodeId> {
    if real.scores.len() != fake.scores.len() {
        return Err(Error::Input(format!(
            "real and fake outputs come from different banks ({} vs {} scores)",
            real.scores.len(),
            fake.scores.len()
        )));
    }
    let mut terms = Vec::with_capacity(2 * real.scores.len());
    for (&r, &f) in real.scores.iter().zip(&fake.scores) {
        terms.push(mean_sq_from(g, r, 1.0));
        terms.push(mean_sq_from(g, f, 0.0));
    }
    sum_nodes(g, &terms)
}

/// Σₖ mean((Dₖ(ŷ) − 1)²).
pub fn lsgan_g_loss<T: Real>(g: &mut Graph<T>, fake: &DiscriminatorOutput) -> Result<NodeId> {
    let terms: Vec<NodeId> = fake.scores.iter().map(|&f| mean_sq_from(g, f, 1.0)).collect();
    sum_nodes(g, &terms)
}

/// Mean over every feature map of the L1 distance to the (detached) real features.
pub fn feature_matching_loss<T: Real>(g: &mut Graph<T>, real: &[Vec<NodeId>], fake: &[Vec<NodeId>]) -> Result<NodeId> {
    if real.len() != fake.len() || real.iter().zip(fake).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::Input("feature-map lists do not match".into()));
    }
    let mut terms = Vec::new();
    for (rs, fs) in real.iter().zip(fake) {
        for (&r, &f) in rs.iter().zip(fs) {
            if g.shape(r) != g.shape(f) {
                return Err(Error::shape("feature map", g.shape(r), g.shape(f)));
            }
            let r = g.stop_gradient(r)?;
            terms.push(g.l1(f, r)?);
        }
    }
    let n = terms.len();
    let total = sum_nodes(g, &terms)?;
    Ok(g.scale(total, T::lit(1.0 / n as f64)))
}

/// Named terms of the generator objective.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorLoss {
    pub total: NodeId,
    pub mel: NodeId,
    pub adv: Option<NodeId>,
    pub fm: Option<NodeId>,
    pub commit: NodeId,
}

/// `w.mel·mel + w.adv·adv + w.fm·fm + commit`; the adversarial terms are
/// present when both discriminator outputs are given.
pub fn generator_total_loss<T: Real>(
    g: &mut Graph<T>,
    mel: NodeId,
    commit: NodeId,
    disc: Option<(&DiscriminatorOutput, &DiscriminatorOutput)>,
    w: &GanLossWeights,
) -> Result<GeneratorLoss> {
    let mut total = g.scale(mel, T::lit(w.mel));
    total = g.add(total, commit)?;
    let (mut adv, mut fm) = (None, None);
    if let Some((real, fake)) = disc {
        let a = lsgan_g_loss(g, fake)?;
        let sa = g.scale(a, T::lit(w.adv));
        total = g.add(total, sa)?;
        let f = feature_matching_loss(g, &real.features, &fake.features)?;
        let sf = g.scale(f, T::lit(w.fm));
        total = g.add(total, sf)?;
        adv = Some(a);
        fm = Some(f);
    }
    Ok(GeneratorLoss { total, mel, adv, fm, commit })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn out(g: &mut Graph<f64>, scores: &[f64], n: usize) -> DiscriminatorOutput {
        let mut o = DiscriminatorOutput::default();
        for &s in scores {
            o.scores.push(g.input(&Tensor::full([1, 1, n], s)));
            o.features.push(vec![g.input(&Tensor::full([1, 2, n], s))]);
        }
        o
    }

    #[test]
    fn d_loss_reference_values() {
        let mut g = Graph::new();
        let (r, f) = (out(&mut g, &[1.0, 1.0], 4), out(&mut g, &[0.0, 0.0], 4));
        let l = lsgan_d_loss(&mut g, &r, &f).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let (r, f) = (out(&mut g, &[0.0], 3), out(&mut g, &[1.0], 3));
        let l = lsgan_d_loss(&mut g, &r, &f).unwrap();
        assert_eq!(g.scalar(l), 2.0);
        let (r, f) = (out(&mut g, &[0.5, 0.5], 5), out(&mut g, &[0.5, 0.5], 5));
        let l = lsgan_d_loss(&mut g, &r, &f).unwrap();
        assert_eq!(g.scalar(l), 1.0);
    }

    #[test]
    fn g_loss_reference_values() {
        let mut g = Graph::new();
        let f = out(&mut g, &[1.0, 1.0, 1.0], 2);
        let l = lsgan_g_loss(&mut g, &f).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let f = out(&mut g, &[0.0, 0.0, 0.0], 2);
        let l = lsgan_g_loss(&mut g, &f).unwrap();
        assert_eq!(g.scalar(l), 3.0);
    }

    #[test]
    fn feature_matching_offset_and_detach() {
        let mut g = Graph::new();
        let r = out(&mut g, &[0.25, -1.0], 6);
        let same = feature_matching_loss(&mut g, &r.features, &r.features).unwrap();
        assert_eq!(g.scalar(same), 0.0);
        let f = out(&mut g, &[0.25 + 0.75, -1.0 + 0.75], 6);
        let l = feature_matching_loss(&mut g, &r.features, &f.features).unwrap();
        assert_eq!(g.scalar(l), 0.75);
        g.backward(l).unwrap();
        assert!(g.grad(r.features[0][0]).is_none());
        assert!(g.grad(f.features[0][0]).is_some());
        assert!(feature_matching_loss(&mut g, &r.features, &f.features[..1]).is_err());
    }

    #[test]
    fn total_reduces_to_commitment() {
        let mut g = Graph::new();
        let mel = g.input(&Tensor::scalar(0.0));
        let commit = g.input(&Tensor::scalar(0.125));
        let r = out(&mut g, &[0.3], 4);
        let f = out(&mut g, &[1.0], 4);
        // fake features equal to real only when scores agree; use the real ones
        let fake = DiscriminatorOutput {
            scores: f.scores.clone(),
            features: r.features.clone(),
            names: vec![],
        };
        let t = generator_total_loss(&mut g, mel, commit, Some((&r, &fake)), &GanLossWeights::default()).unwrap();
        assert_eq!(g.scalar(t.total), 0.125);

        let w = GanLossWeights {
            mel: 0.0,
            fm: 0.0,
            adv: 1.0,
        };
        let mel = g.input(&Tensor::scalar(3.0));
        let zero_f = out(&mut g, &[0.0], 4);
        let t = generator_total_loss(&mut g, mel, commit, Some((&r, &zero_f)), &w).unwrap();
        assert_eq!(g.scalar(t.total), 1.0 + 0.125);
    }
}
