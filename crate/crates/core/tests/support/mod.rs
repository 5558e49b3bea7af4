#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tttlab_core::losses::{im_loss_node, total_loss};
use tttlab_core::nn::{BnMode, ModelBundle, ModelSpec, ProjectorKind, ProjectorSpec, TrainableSet};
use tttlab_core::tensor::tape::BnStatsSource;
use tttlab_core::tensor::{NodeId, Tape};
use tttlab_core::{Result, Tensor};

pub const H: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;

/// Largest element-wise `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Autodiff vs central differences for a scalar function of `inputs`.
///
/// `build` records the function onto a tape from one leaf per input and
/// returns the scalar output node. Returns the worst relative error.
pub fn check<F>(inputs: &[Tensor<f64>], build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let leaves: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &leaves).unwrap();
    let grads = tape.backward(out).unwrap();

    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = xs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = build(&mut tape, &leaves).unwrap();
        tape.value(out).item()
    };

    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for (i, &leaf) in leaves.iter().enumerate() {
        let analytic = grads
            .get(leaf)
            .map(|g| g.to_f64_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..inputs[i].numel() {
            let x0 = xs[i].data()[j];
            xs[i].data_mut()[j] = x0 + H;
            let fp = eval(&xs);
            xs[i].data_mut()[j] = x0 - H;
            let fm = eval(&xs);
            xs[i].data_mut()[j] = x0;
            numeric.push((fp - fm) / (2.0 * H));
        }
        worst = worst.max(rel_err(&analytic, &numeric, 1e-6));
    }
    worst
}

pub fn random(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Reduces any node to a scalar by a fixed random weighting.
pub fn weighted_sum(tape: &mut Tape<f64>, x: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, tape.shape(x), 1.0);
    let w = tape.leaf(w, false);
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

pub struct GradCase {
    pub name: &'static str,
    pub rel_err: f64,
    pub elements: usize,
}

/// Every composite checked by the gradient suite.
pub fn gradient_suite(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |name, inputs: &[Tensor<f64>], err| {
        out.push(GradCase {
            name,
            rel_err: err,
            elements: inputs.iter().map(|t| t.numel()).sum(),
        })
    };

    let ins = [random(&mut rng, &[3, 4], 1.0), random(&mut rng, &[4, 5], 1.0)];
    let e = check(&ins, |t, l| {
        let y = t.matmul(l[0], l[1])?;
        weighted_sum(t, y, 1)
    });
    push("matmul", &ins, e);

    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let ins = [random(&mut rng, &[2, 2, 5, 5], 1.0), random(&mut rng, &[3, 2, 3, 3], 1.0)];
        let e = check(&ins, |t, l| {
            let y = t.conv2d(l[0], l[1], stride, pad)?;
            weighted_sum(t, y, 2)
        });
        push("conv2d", &ins, e);
    }

    let ins = [
        random(&mut rng, &[3, 2, 3, 3], 2.0),
        random(&mut rng, &[2], 1.5),
        random(&mut rng, &[2], 1.0),
    ];
    let e = check(&ins, |t, l| {
        let (y, _) = t.batch_norm(l[0], l[1], l[2], BnStatsSource::Batch, 1e-5)?;
        weighted_sum(t, y, 3)
    });
    push("batchnorm", &ins, e);

    let ins = [random(&mut rng, &[5, 4], 3.0)];
    let e = check(&ins, |t, l| {
        let y = t.softmax_rows(l[0])?;
        weighted_sum(t, y, 4)
    });
    push("softmax", &ins, e);

    let ins = [random(&mut rng, &[6, 5], 2.0)];
    let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..5)).collect();
    let e = check(&ins, |t, l| t.cross_entropy(l[0], &labels));
    push("cross_entropy", &ins, e);

    let ins = [random(&mut rng, &[24, 6], 3.0)];
    let e = check(&ins, |t, l| {
        let z = t.softmax_rows(l[0])?;
        Ok(im_loss_node(t, z)?.loss)
    });
    push("im_loss", &ins, e);

    for kind in [ProjectorKind::Normal, ProjectorKind::Large] {
        let (e, n) = ct3_end_to_end(&mut rng, kind);
        out.push(GradCase {
            name: "ct3_end_to_end",
            rel_err: e,
            elements: n,
        });
    }
    out
}

/// Full model forward with batch statistics, CE + multi-layer multi-head IM.
fn ct3_end_to_end(rng: &mut ChaCha8Rng, kind: ProjectorKind) -> (f64, usize) {
    let spec = ModelSpec {
        in_channels: 1,
        image_size: 4,
        channels: vec![3, 4],
        num_classes: 3,
        bn_eps: 1e-5,
        bn_momentum: 0.1,
        projectors: ProjectorSpec {
            layers: vec![1, 2],
            heads: 2,
            k: 3,
            kind,
            lambda: vec![1.0, 0.7],
        },
    };
    let mut model = ModelBundle::<f64>::new(spec, rng.random()).unwrap();
    // non-trivial BN affine and projector biases
    for p in model.params_mut() {
        if p.name.ends_with("bias") || p.name.ends_with("bn.weight") {
            let shape = p.value.shape().to_vec();
            p.value = Tensor::from_fn(&shape, |_| rng.random_range(0.5..1.5));
        }
    }
    let x = random(rng, &[3, 1, 4, 4], 1.0);
    let labels = [0, 2, 1];

    let loss = |m: &ModelBundle<f64>, rg: bool| -> (f64, Vec<Tensor<f64>>) {
        let mut m = m.clone();
        let set = if rg { TrainableSet::all(&m) } else { TrainableSet::none(&m) };
        let mut tape = Tape::new();
        let pass = m.forward(&mut tape, &x, BnMode::BatchOnly, &set).unwrap();
        let g = total_loss(&mut tape, pass.logits, &labels, &pass.z, &[1.0, 0.7]).unwrap();
        let v = tape.value(g.total).item();
        if !rg {
            return (v, Vec::new());
        }
        let grads = tape.backward(g.total).unwrap();
        let gs = pass
            .param_nodes
            .iter()
            .zip(m.params())
            .map(|(&n, p)| grads.get(n).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect();
        (v, gs)
    };

    let (_, analytic) = loss(&model, true);
    let mut worst: f64 = 0.0;
    let mut elements = 0;
    for (pi, a) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(a.numel());
        for j in 0..a.numel() {
            let x0 = model.params()[pi].value.data()[j];
            model.params_mut()[pi].value.data_mut()[j] = x0 + H;
            let fp = loss(&model, false).0;
            model.params_mut()[pi].value.data_mut()[j] = x0 - H;
            let fm = loss(&model, false).0;
            model.params_mut()[pi].value.data_mut()[j] = x0;
            numeric.push((fp - fm) / (2.0 * H));
        }
        elements += a.numel();
        worst = worst.max(rel_err(&a.to_f64_vec(), &numeric, 1e-6));
    }
    (worst, elements)
}
