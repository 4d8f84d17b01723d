//! Linear preference optimisation loss over chosen/rejected response pairs.
//!
//! With policy/reference probability ratios `x1` (chosen) and `x2`
//! (rejected) and margin `m = x1 − x2 − 1/(2β)`:
//!
//! ```text
//! x1_ste = r1·max(0, x1 − sg(x2) − 1/(2β))
//! x2_ste = r2·max(0, sg(x1) − x2 − 1/(2β))
//! γ      = 2β·2/(r1 + r2)
//! loss   = γ·(x1_ste + x2_ste) + λ·max(0, −ln max(x1_ste, ε))
//! ```
//!
//! `sg` blocks the gradient, so `x2` reaches the loss only through
//! `x2_ste` and `x1` only through `x1_ste` and the barrier. When the margin
//! is inactive the barrier sits at its ceiling `λ·(−ln ε)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LpoHyper {
    pub beta: f64,
    pub r1: f64,
    pub r2: f64,
    /// Barrier weight.
    pub lambda: f64,
    /// Floor inside the barrier's logarithm.
    pub epsilon: f64,
    /// Log-ratios are clamped to `±clamp` nats before exponentiation.
    pub clamp: f64,
}

impl Default for LpoHyper {
    fn default() -> Self {
        Self {
            beta: 0.2,
            r1: 1.0,
            r2: 0.4,
            lambda: 10.0,
            epsilon: 1e-6,
            clamp: 30.0,
        }
    }
}

impl LpoHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = self.beta > 0.0
            && self.r1 > 0.0
            && self.r2 > 0.0
            && self.lambda >= 0.0
            && self.epsilon > 0.0
            && self.clamp > 0.0
            && [self.beta, self.r1, self.r2, self.lambda, self.epsilon, self.clamp].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "LPO needs beta, r1, r2, epsilon, clamp > 0 and lambda >= 0, got {self:?}"
            )))
        }
    }

    pub fn gamma(&self) -> f64 {
        2.0 * self.beta * 2.0 / (self.r1 + self.r2)
    }

    /// `1/(2β)`, the margin offset.
    pub fn offset(&self) -> f64 {
        1.0 / (2.0 * self.beta)
    }
}

/// Summed token log-probabilities of a chosen (`w`) and rejected (`l`)
/// response under the policy and the reference model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferencePair {
    #[serde(default)]
    pub id: String,
    pub logp_policy_w: f64,
    pub logp_ref_w: f64,
    pub logp_policy_l: f64,
    pub logp_ref_l: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ratios {
    pub x1: f64,
    pub x2: f64,
    /// How many of the two log-ratios hit the clamp.
    pub clamped: usize,
}

/// Probability ratios of the chosen and rejected responses, computed from
/// clamped log-ratios.
pub fn ratios(pair: &PreferencePair, hyper: &LpoHyper) -> Result<Ratios> {
    let vals = [pair.logp_policy_w, pair.logp_ref_w, pair.logp_policy_l, pair.logp_ref_l];
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input(format!("pair `{}` has a non-finite log-probability", pair.id)));
    }
    let mut clamped = 0;
    let mut ratio = |d: f64| {
        if d.abs() > hyper.clamp {
            clamped += 1;
        }
        d.clamp(-hyper.clamp, hyper.clamp).exp()
    };
    let x1 = ratio(pair.logp_policy_w - pair.logp_ref_w);
    let x2 = ratio(pair.logp_policy_l - pair.logp_ref_l);
    Ok(Ratios { x1, x2, clamped })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LpoValue {
    pub loss: f64,
    pub d_x1: f64,
    pub d_x2: f64,
    /// `x1 − x2 − 1/(2β)`.
    pub margin: f64,
    pub x1_ste: f64,
    pub x2_ste: f64,
    pub barrier: f64,
    /// Margin positive, so both hinges pass gradient.
    pub hinge_active: bool,
    /// `x1_ste` below ε: the barrier is at its ceiling.
    pub barrier_saturated: bool,
}

/// Loss and its derivatives with respect to `x1` and `x2`.
pub fn lpo_loss(x1: f64, x2: f64, hyper: &LpoHyper) -> Result<LpoValue> {
    hyper.validate()?;
    if !(x1 > 0.0 && x2 > 0.0 && x1.is_finite() && x2.is_finite()) {
        return Err(Error::Input(format!("ratios must be positive and finite, got x1 = {x1}, x2 = {x2}")));
    }
    let gamma = hyper.gamma();
    let margin = x1 - x2 - hyper.offset();
    let active = margin > 0.0;
    let hinge = margin.max(0.0);
    let x1_ste = hyper.r1 * hinge;
    let x2_ste = hyper.r2 * hinge;
    let guarded = x1_ste.max(hyper.epsilon);
    let barrier = (-guarded.ln()).max(0.0);
    let loss = gamma * (x1_ste + x2_ste) + hyper.lambda * barrier;

    let (mut d_x1, mut d_x2) = (0.0, 0.0);
    if active {
        d_x1 = gamma * hyper.r1;
        d_x2 = -gamma * hyper.r2;
        if x1_ste > hyper.epsilon && x1_ste < 1.0 {
            d_x1 -= hyper.lambda * hyper.r1 / x1_ste;
        }
    }
    Ok(LpoValue {
        loss,
        d_x1,
        d_x2,
        margin,
        x1_ste,
        x2_ste,
        barrier,
        hinge_active: active,
        barrier_saturated: x1_ste < hyper.epsilon,
    })
}

/// The loss as graph nodes over scalar (or elementwise) `x1`, `x2`, with
/// the detached operands built from [`Graph::stop_gradient`].
pub fn lpo_loss_graph<T: Real>(g: &mut Graph<T>, x1: NodeId, x2: NodeId, hyper: &LpoHyper) -> Result<NodeId> {
    hyper.validate()?;
    let off = T::lit(-hyper.offset());
    let x2_detached = g.stop_gradient(x2)?;
    let x1_detached = g.stop_gradient(x1)?;

    let m1 = g.sub(x1, x2_detached)?;
    let m1 = g.add_scalar(m1, off);
    let m1 = g.scale(m1, T::lit(hyper.r1));
    let x1_ste = g.max_const(m1, T::zero());

    let m2 = g.sub(x1_detached, x2)?;
    let m2 = g.add_scalar(m2, off);
    let m2 = g.scale(m2, T::lit(hyper.r2));
    let x2_ste = g.max_const(m2, T::zero());

    let hinges = g.add(x1_ste, x2_ste)?;
    let hinges = g.scale(hinges, T::lit(hyper.gamma()));
    let guarded = g.max_const(x1_ste, T::lit(hyper.epsilon));
    let log = g.log(guarded);
    let neg = g.scale(log, T::lit(-1.0));
    let barrier = g.max_const(neg, T::zero());
    let barrier = g.scale(barrier, T::lit(hyper.lambda));
    let total = g.add(hinges, barrier)?;
    Ok(g.mean(total))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairDiagnostics {
    pub id: String,
    pub x1: f64,
    pub x2: f64,
    pub loss: f64,
    pub d_x1: f64,
    pub d_x2: f64,
    pub margin: f64,
    pub hinge_active: bool,
    pub barrier_saturated: bool,
    pub clamped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LpoBatch {
    pub mean_loss: f64,
    pub pairs: Vec<PairDiagnostics>,
    pub active_hinges: usize,
    pub saturated_barriers: usize,
    pub clamp_events: usize,
}

/// Mean loss over `pairs`, summed in input order, with per-pair diagnostics.
pub fn lpo_batch(pairs: &[PreferencePair], hyper: &LpoHyper) -> Result<LpoBatch> {
    if pairs.is_empty() {
        return Err(Error::Input("LPO batch is empty".into()));
    }
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        let r = ratios(p, hyper)?;
        let v = lpo_loss(r.x1, r.x2, hyper)?;
        out.push(PairDiagnostics {
            id: p.id.clone(),
            x1: r.x1,
            x2: r.x2,
            loss: v.loss,
            d_x1: v.d_x1,
            d_x2: v.d_x2,
            margin: v.margin,
            hinge_active: v.hinge_active,
            barrier_saturated: v.barrier_saturated,
            clamped: r.clamped,
        });
    }
    let mean_loss = out.iter().map(|d| d.loss).sum::<f64>() / out.len() as f64;
    Ok(LpoBatch {
        mean_loss,
        active_hinges: out.iter().filter(|d| d.hinge_active).count(),
        saturated_barriers: out.iter().filter(|d| d.barrier_saturated).count(),
        clamp_events: out.iter().map(|d| d.clamped).sum(),
        pairs: out,
    })
}

/// Standard sigmoid preference loss `−ln σ(β·(Δ_w − Δ_l))` for comparison,
/// where `Δ` is the policy−reference log-ratio.
pub fn dpo_loss(pair: &PreferencePair, beta: f64) -> f64 {
    let z = beta * ((pair.logp_policy_w - pair.logp_ref_w) - (pair.logp_policy_l - pair.logp_ref_l));
    // −ln σ(z) = ln(1 + e^{−z}), evaluated stably
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}
