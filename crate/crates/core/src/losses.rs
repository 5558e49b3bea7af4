//! Cross-entropy, the information-maximisation (IM) clustering loss, the
//! combined training objective and the multi-head mutual-information bounds.
//!
//! For an `N×K` soft assignment `z` with column means `z̄`,
//!
//! ```text
//! H(Z|X) = −(1/N) Σᵢ Σₖ zᵢₖ ln zᵢₖ
//! H(Z)   = −Σₖ z̄ₖ ln z̄ₖ
//! L_IM   = H(Z|X) − H(Z)  = −I(X; Z)
//! ```
//!
//! Logarithms are natural; probabilities are clamped at `1e-12` inside the
//! logarithm only, so rows keep summing to exactly what the projector emitted.

use crate::error::{Error, Result};
use crate::nn::ProjectorOutput;
use crate::tensor::tape::{softmax_in_place, LOG_CLAMP};
use crate::tensor::{NodeId, Scalar, Tape, Tensor};

/// Tolerance on row sums accepted by [`ClusterAssignment::new`].
pub const ROW_SUM_TOL: f64 = 1e-4;

/// A validated row-stochastic `N×K` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment<T> {
    z: Tensor<T>,
}

impl<T: Scalar> ClusterAssignment<T> {
    pub fn new(z: Tensor<T>) -> Result<Self> {
        if z.rank() != 2 {
            return Err(Error::Dimension(format!("assignment must be N×K, got {:?}", z.shape())));
        }
        let k = z.shape()[1];
        for (i, row) in z.data().chunks_exact(k).enumerate() {
            if row.iter().any(|&v| !(v.as_f64() >= -ROW_SUM_TOL && v.as_f64() <= 1.0 + ROW_SUM_TOL)) {
                return Err(Error::Contract(format!("row {i} has entries outside [0, 1]")));
            }
            let s: f64 = row.iter().map(|v| v.as_f64()).sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Contract(format!("row {i} sums to {s}, not 1")));
            }
        }
        Ok(Self { z })
    }

    /// Row-wise softmax of arbitrary finite logits.
    pub fn from_logits(logits: &Tensor<T>) -> Result<Self> {
        if logits.rank() != 2 {
            return Err(Error::Dimension("logits must be N×K".into()));
        }
        let k = logits.shape()[1];
        let mut z = logits.clone();
        z.data_mut().chunks_exact_mut(k).for_each(softmax_in_place);
        Self::new(z)
    }

    /// Hard assignment: row `i` puts all mass on `labels[i]`.
    pub fn one_hot(labels: &[usize], k: usize) -> Result<Self> {
        let mut data = vec![T::zero(); labels.len() * k];
        for (i, &l) in labels.iter().enumerate() {
            if l >= k {
                return Err(Error::Label { label: l, classes: k });
            }
            data[i * k + l] = T::one();
        }
        Self::new(Tensor::new(vec![labels.len(), k], data)?)
    }

    pub fn z(&self) -> &Tensor<T> {
        &self.z
    }

    pub fn rows(&self) -> usize {
        self.z.shape()[0]
    }

    pub fn clusters(&self) -> usize {
        self.z.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let k = self.clusters();
        &self.z.data()[i * k..(i + 1) * k]
    }

    /// `z̄ₖ = (1/N) Σᵢ zᵢₖ`.
    pub fn marginal(&self) -> Vec<f64> {
        let k = self.clusters();
        let mut m = vec![0.0; k];
        for row in self.z.data().chunks_exact(k) {
            for (a, v) in m.iter_mut().zip(row) {
                *a += v.as_f64();
            }
        }
        let n = self.rows() as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }
}

fn xlogx_clamped(p: f64) -> f64 {
    p * p.max(LOG_CLAMP).ln()
}

/// The two entropies of one assignment and their difference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImTerms {
    pub loss: f64,
    pub h_cond: f64,
    pub h_marg: f64,
}

impl ImTerms {
    pub fn mutual_information(&self) -> f64 {
        -self.loss
    }
}

pub fn im_loss<T: Scalar>(z: &ClusterAssignment<T>) -> ImTerms {
    let n = z.rows() as f64;
    let h_cond = -z.z().data().iter().map(|v| xlogx_clamped(v.as_f64())).sum::<f64>() / n;
    let h_marg = -z.marginal().into_iter().map(xlogx_clamped).sum::<f64>();
    ImTerms {
        loss: h_cond - h_marg,
        h_cond,
        h_marg,
    }
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone(), false);
    let ce = tape.cross_entropy(l, labels)?;
    Ok(tape.value(ce).item().as_f64())
}

/// Tape nodes of one IM loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImNodes {
    pub loss: NodeId,
    pub h_cond: NodeId,
    pub h_marg: NodeId,
}

pub fn im_loss_node<T: Scalar>(tape: &mut Tape<T>, z: NodeId) -> Result<ImNodes> {
    let h_cond = tape.cond_entropy(z)?;
    let h_marg = tape.marginal_entropy(z)?;
    let loss = tape.sub(h_cond, h_marg)?;
    Ok(ImNodes { loss, h_cond, h_marg })
}

/// IM loss of one projector head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadLoss {
    pub layer: usize,
    pub head: usize,
    pub nodes: ImNodes,
}

/// `Σ_ℓ λ_ℓ Σ_c L_IM^{ℓ,c}` over all projector heads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImObjective {
    pub total: NodeId,
    pub heads: Vec<HeadLoss>,
}

/// Builds the summed IM objective. `lambda[ℓ-1]` weights layer `ℓ`.
pub fn im_objective<T: Scalar>(
    tape: &mut Tape<T>,
    outputs: &[ProjectorOutput],
    lambda: &[f64],
) -> Result<ImObjective> {
    if outputs.is_empty() {
        return Err(Error::Contract("the IM objective needs at least one projector".into()));
    }
    let mut heads = Vec::with_capacity(outputs.len());
    let mut layer_order: Vec<usize> = Vec::new();
    for o in outputs {
        heads.push(HeadLoss {
            layer: o.layer,
            head: o.head,
            nodes: im_loss_node(tape, o.z)?,
        });
        if !layer_order.contains(&o.layer) {
            layer_order.push(o.layer);
        }
    }
    let mut per_layer = Vec::with_capacity(layer_order.len());
    for &layer in &layer_order {
        let w = *lambda
            .get(layer - 1)
            .ok_or_else(|| Error::Config(format!("no lambda for layer {layer}")))?;
        let terms: Vec<NodeId> = heads.iter().filter(|h| h.layer == layer).map(|h| h.nodes.loss).collect();
        let s = tape.add_all(&terms)?;
        per_layer.push(if w == 1.0 { s } else { tape.scale(s, w)? });
    }
    let total = tape.add_all(&per_layer)?;
    Ok(ImObjective { total, heads })
}

/// Nodes of the combined objective `L_CE + Σ_ℓ λ_ℓ Σ_c L_IM^{ℓ,c}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LossGraph {
    pub total: NodeId,
    pub ce: NodeId,
    pub im: ImObjective,
}

pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: NodeId,
    labels: &[usize],
    outputs: &[ProjectorOutput],
    lambda: &[f64],
) -> Result<LossGraph> {
    let ce = tape.cross_entropy(logits, labels)?;
    let im = im_objective(tape, outputs, lambda)?;
    let total = tape.add(ce, im.total)?;
    Ok(LossGraph { total, ce, im })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadReport {
    pub layer: usize,
    pub head: usize,
    pub im: f64,
    pub h_cond: f64,
    pub h_marg: f64,
}

/// Scalar values of every component of the objective, for logging.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub ce: Option<f64>,
    pub heads: Vec<HeadReport>,
    /// Weighted IM sum.
    pub im_total: f64,
    pub total: f64,
    pub lambda: Vec<f64>,
}

impl LossReport {
    pub fn from_objective<T: Scalar>(tape: &Tape<T>, im: &ImObjective, ce: Option<NodeId>, lambda: &[f64]) -> Self {
        let v = |id: NodeId| tape.value(id).item().as_f64();
        let heads: Vec<HeadReport> = im
            .heads
            .iter()
            .map(|h| HeadReport {
                layer: h.layer,
                head: h.head,
                im: v(h.nodes.loss),
                h_cond: v(h.nodes.h_cond),
                h_marg: v(h.nodes.h_marg),
            })
            .collect();
        let im_total = v(im.total);
        let ce = ce.map(v);
        Self {
            ce,
            heads,
            im_total,
            total: ce.unwrap_or(0.0) + im_total,
            lambda: lambda.to_vec(),
        }
    }

    pub fn from_graph<T: Scalar>(tape: &Tape<T>, g: &LossGraph, lambda: &[f64]) -> Self {
        let mut r = Self::from_objective(tape, &g.im, Some(g.ce), lambda);
        r.total = tape.value(g.total).item().as_f64();
        r
    }

    fn mean_of(&self, f: impl Fn(&HeadReport) -> f64) -> f64 {
        if self.heads.is_empty() {
            return 0.0;
        }
        self.heads.iter().map(f).sum::<f64>() / self.heads.len() as f64
    }

    pub fn mean_head_im(&self) -> f64 {
        self.mean_of(|h| h.im)
    }

    pub fn mean_h_marg(&self) -> f64 {
        self.mean_of(|h| h.h_marg)
    }

    pub fn mean_h_cond(&self) -> f64 {
        self.mean_of(|h| h.h_cond)
    }

    /// Mean `(H(Z|X), H(Z))` over the heads of `layer`.
    pub fn layer_entropies(&self, layer: usize) -> Option<(f64, f64)> {
        let hs: Vec<_> = self.heads.iter().filter(|h| h.layer == layer).collect();
        if hs.is_empty() {
            return None;
        }
        let n = hs.len() as f64;
        Some((
            hs.iter().map(|h| h.h_cond).sum::<f64>() / n,
            hs.iter().map(|h| h.h_marg).sum::<f64>() / n,
        ))
    }
}

/// Bounds on `I(X; Z₁..Z_C)` for conditionally independent heads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfoBounds {
    /// `max_c H(Z_c) − Σ_c H(Z_c|X)`.
    pub lower: f64,
    /// `Σ_c I(X; Z_c)`.
    pub upper: f64,
}

fn check_same_rows<T: Scalar>(zs: &[ClusterAssignment<T>]) -> Result<usize> {
    let first = zs
        .first()
        .ok_or_else(|| Error::Contract("need at least one assignment".into()))?;
    let n = first.rows();
    if let Some(bad) = zs.iter().find(|z| z.rows() != n) {
        return Err(Error::Contract(format!(
            "assignments cover different rows ({n} vs {})",
            bad.rows()
        )));
    }
    Ok(n)
}

pub fn lemma1_bounds<T: Scalar>(zs: &[ClusterAssignment<T>]) -> Result<InfoBounds> {
    check_same_rows(zs)?;
    let terms: Vec<ImTerms> = zs.iter().map(im_loss).collect();
    let max_marg = terms.iter().map(|t| t.h_marg).fold(f64::NEG_INFINITY, f64::max);
    let sum_cond: f64 = terms.iter().map(|t| t.h_cond).sum();
    let upper = terms.iter().map(|t| t.mutual_information()).sum();
    Ok(InfoBounds {
        lower: max_marg - sum_cond,
        upper,
    })
}

/// Largest joint outcome space [`joint_mi_bruteforce`] will enumerate.
pub const MAX_JOINT_OUTCOMES: usize = 1_000_000;

fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

/// Exact `I(X; Z₁..Z_C)` for heads conditionally independent given `X`, by
/// enumerating every joint outcome. `px` is the distribution of `X` over the
/// `N` rows; `None` means uniform.
///
/// Both the joint entropy and the joint conditional entropy are computed
/// from the enumerated joint distribution, so the result does not rely on
/// any per-head decomposition.
pub fn joint_mi_bruteforce<T: Scalar>(zs: &[ClusterAssignment<T>], px: Option<&[f64]>) -> Result<f64> {
    let n = check_same_rows(zs)?;
    let uniform = vec![1.0 / n as f64; n];
    let px = px.unwrap_or(&uniform);
    if px.len() != n {
        return Err(Error::Contract(format!("px has {} entries for {n} rows", px.len())));
    }
    if px.iter().any(|&p| !(p >= 0.0)) || (px.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Contract("px is not a distribution".into()));
    }
    let mut outcomes: usize = 1;
    for z in zs {
        outcomes = outcomes
            .checked_mul(z.clusters())
            .filter(|&o| o <= MAX_JOINT_OUTCOMES)
            .ok_or_else(|| Error::Size(format!("joint outcome space exceeds {MAX_JOINT_OUTCOMES}")))?;
    }
    let mut joint = vec![0.0f64; outcomes];
    let mut h_joint_given_x = 0.0;
    let mut digits = vec![0usize; zs.len()];
    for (i, &w) in px.iter().enumerate() {
        digits.iter_mut().for_each(|d| *d = 0);
        for p_joint in joint.iter_mut() {
            let p: f64 = zs.iter().zip(&digits).map(|(z, &d)| z.row(i)[d].as_f64()).product();
            *p_joint += w * p;
            h_joint_given_x -= w * plogp(p);
            // odometer over the mixed-radix outcome index
            for (d, z) in digits.iter_mut().zip(zs).rev() {
                *d += 1;
                if *d < z.clusters() {
                    break;
                }
                *d = 0;
            }
        }
    }
    let h_joint: f64 = -joint.iter().map(|&p| plogp(p)).sum::<f64>();
    Ok(h_joint - h_joint_given_x)
}
