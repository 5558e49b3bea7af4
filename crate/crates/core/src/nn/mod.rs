//! The model: a block-structured CNN feature extractor that exposes a tap
//! after every block, a linear classifier on the last tap, and any number of
//! clustering projectors attached to the taps.

mod snapshot;
mod trainable;

pub use snapshot::Snapshot;
pub use trainable::{select_trainable, TrainMode, TrainableSet};

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::checkpoint::Entry;
use crate::tensor::tape::BnStatsSource;
use crate::tensor::{BnBatchStats, Gradients, NodeId, Parameter, Scalar, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectorKind {
    /// One 1×1 linear map `C → K`.
    Normal,
    /// `C → ⌊C/2⌋ → K` with a ReLU in between.
    Large,
}

/// Where clustering projectors go and how they look.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectorSpec {
    /// 1-based extractor blocks carrying projectors.
    pub layers: Vec<usize>,
    pub heads: usize,
    pub k: usize,
    pub kind: ProjectorKind,
    /// Weight of each layer's information loss, indexed by block.
    pub lambda: Vec<f64>,
}

impl Default for ProjectorSpec {
    fn default() -> Self {
        Self {
            layers: vec![1, 2],
            heads: 15,
            k: 10,
            kind: ProjectorKind::Normal,
            lambda: vec![1.0; 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub in_channels: usize,
    pub image_size: usize,
    /// Output channels of each extractor block.
    pub channels: Vec<usize>,
    pub num_classes: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub projectors: ProjectorSpec,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            in_channels: 1,
            image_size: 16,
            channels: vec![16, 32, 64, 64],
            num_classes: 8,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            projectors: ProjectorSpec::default(),
        }
    }
}

impl ModelSpec {
    pub fn blocks(&self) -> usize {
        self.channels.len()
    }

    pub fn without_projectors(mut self) -> Self {
        self.projectors.layers.clear();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        let n = self.blocks();
        if n == 0 || self.channels.contains(&0) || self.in_channels == 0 || self.num_classes < 2 {
            return cfg("model needs at least one block, non-zero widths and ≥ 2 classes".into());
        }
        if self.image_size == 0 || self.image_size % (1 << n) != 0 {
            return cfg(format!(
                "image size {} must be a positive multiple of 2^{n} for {n} pooled blocks",
                self.image_size
            ));
        }
        let p = &self.projectors;
        if p.layers.iter().any(|&l| l == 0 || l > n) {
            return cfg(format!("projector layers {:?} must lie in 1..={n}", p.layers));
        }
        if p.layers.windows(2).any(|w| w[0] >= w[1]) {
            return cfg(format!("projector layers {:?} must be strictly increasing", p.layers));
        }
        if !p.layers.is_empty() && (p.heads == 0 || p.k < 2) {
            return cfg("projectors need ≥ 1 head and K ≥ 2".into());
        }
        if p.lambda.len() != n {
            return cfg(format!("lambda needs one weight per block ({n}), got {}", p.lambda.len()));
        }
        if p.kind == ProjectorKind::Large
            && p.layers.iter().any(|&l| self.channels[l - 1] < 2)
        {
            return cfg("a large projector needs at least 2 input channels".into());
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return cfg("bn_eps must be positive and bn_momentum in [0, 1]".into());
        }
        Ok(())
    }
}

/// How batch-norm layers pick their statistics during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Current-batch statistics; running estimates are refreshed.
    Train,
    /// Current-batch statistics; nothing is persisted.
    BatchOnly,
    /// Stored running estimates.
    Eval,
}

impl BnMode {
    pub fn uses_batch_stats(self) -> bool {
        !matches!(self, BnMode::Eval)
    }
}

/// Running mean and variance of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BnState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    /// Exponential update; the variance estimate uses the unbiased batch variance.
    pub fn update(&mut self, stats: &BnBatchStats, momentum: f64) {
        let n = stats.count as f64;
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        for (r, &m) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = T::from_f64((1.0 - momentum) * r.as_f64() + momentum * m);
        }
        for (r, &v) in self.running_var.iter_mut().zip(&stats.var) {
            *r = T::from_f64((1.0 - momentum) * r.as_f64() + momentum * v * unbias);
        }
    }
}

/// Parameter indices of one conv → batch-norm → ReLU → pool block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub conv: usize,
    pub gamma: usize,
    pub beta: usize,
}

/// Parameter indices of one affine map `rows · W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
}

/// One clustering head on one tap.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub kind: ProjectorKind,
    /// 1-based block whose tap feeds this head.
    pub layer: usize,
    /// 1-based head index within the layer.
    pub head: usize,
    pub k: usize,
    pub maps: Vec<Linear>,
}

/// Soft cluster assignment produced by one projector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectorOutput {
    pub layer: usize,
    pub head: usize,
    /// `N×K` row-stochastic node, `N = B·H_ℓ·W_ℓ`.
    pub z: NodeId,
}

/// Node ids produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub taps: Vec<NodeId>,
    pub logits: NodeId,
    pub z: Vec<ProjectorOutput>,
    /// Leaf node of every parameter, by parameter index.
    pub param_nodes: Vec<NodeId>,
}

/// Feature extractor, classifier and projectors with their state.
#[derive(Debug, Clone)]
pub struct ModelBundle<T> {
    spec: ModelSpec,
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
    blocks: Vec<Block>,
    bn: Vec<BnState<T>>,
    classifier: Linear,
    projectors: Vec<Projector>,
    source: Option<Arc<Snapshot<T>>>,
}

struct Init<'a, T> {
    params: &'a mut Vec<Parameter<T>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Init<'_, T> {
    fn kaiming(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let bound = (6.0 / fan_in as f64).sqrt();
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..bound)));
        self.push(name, t)
    }

    fn constant(&mut self, name: String, shape: &[usize], v: f64) -> usize {
        self.push(name, Tensor::full(shape, T::from_f64(v)))
    }

    fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        self.params.push(Parameter::new(name, t));
        self.params.len() - 1
    }
}

impl<T: Scalar> ModelBundle<T> {
    /// Builds a freshly initialised model (Kaiming-uniform weights,
    /// unit batch-norm scale, zero biases).
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = Vec::new();
        let mut init = Init {
            params: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut blocks = Vec::new();
        let mut bn = Vec::new();
        let mut cin = spec.in_channels;
        for (i, &cout) in spec.channels.iter().enumerate() {
            let p = format!("extractor.block{}", i + 1);
            blocks.push(Block {
                conv: init.kaiming(format!("{p}.conv.weight"), &[cout, cin, 3, 3], cin * 9),
                gamma: init.constant(format!("{p}.bn.weight"), &[cout], 1.0),
                beta: init.constant(format!("{p}.bn.bias"), &[cout], 0.0),
            });
            bn.push(BnState::new(cout));
            cin = cout;
        }
        let classifier = Linear {
            weight: init.kaiming("classifier.weight".into(), &[cin, spec.num_classes], cin),
            bias: init.constant("classifier.bias".into(), &[spec.num_classes], 0.0),
        };
        let ps = &spec.projectors;
        let mut projectors = Vec::new();
        for &layer in &ps.layers {
            let c = spec.channels[layer - 1];
            for head in 1..=ps.heads {
                let p = format!("projector.layer{layer}.head{head}");
                let widths = match ps.kind {
                    ProjectorKind::Normal => vec![c, ps.k],
                    ProjectorKind::Large => vec![c, c / 2, ps.k],
                };
                let maps = widths
                    .windows(2)
                    .enumerate()
                    .map(|(j, w)| Linear {
                        weight: init.kaiming(format!("{p}.fc{}.weight", j + 1), &[w[0], w[1]], w[0]),
                        bias: init.constant(format!("{p}.fc{}.bias", j + 1), &[w[1]], 0.0),
                    })
                    .collect();
                projectors.push(Projector {
                    kind: ps.kind,
                    layer,
                    head,
                    k: ps.k,
                    maps,
                });
            }
        }
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Ok(Self {
            spec,
            params,
            index,
            blocks,
            bn,
            classifier,
            projectors,
            source: None,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn bn_states(&self) -> &[BnState<T>] {
        &self.bn
    }

    pub fn bn_states_mut(&mut self) -> &mut [BnState<T>] {
        &mut self.bn
    }

    pub fn projectors(&self) -> &[Projector] {
        &self.projectors
    }

    /// Highest block carrying a projector.
    pub fn top_projector_layer(&self) -> Option<usize> {
        self.projectors.iter().map(|p| p.layer).max()
    }

    /// Records the current state as the source state episodes reset to.
    pub fn mark_source(&mut self) {
        self.source = Some(Arc::new(Snapshot::capture(self, None)));
    }

    pub fn source_snapshot(&self) -> Option<Arc<Snapshot<T>>> {
        self.source.clone()
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Runs the network on `x` (`B×C×S×S`), recording onto `tape`.
    ///
    /// Parameters in `trainable` become gradient-carrying leaves. In
    /// [`BnMode::Train`] the running statistics are refreshed from the batch.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        x: &Tensor<T>,
        mode: BnMode,
        trainable: &TrainableSet,
    ) -> Result<ForwardPass> {
        self.forward_with(tape, x, mode, trainable, true)
    }

    /// Like [`ModelBundle::forward`] but stops at the logits; `pass.z` is empty.
    pub fn forward_classifier(
        &mut self,
        tape: &mut Tape<T>,
        x: &Tensor<T>,
        mode: BnMode,
        trainable: &TrainableSet,
    ) -> Result<ForwardPass> {
        self.forward_with(tape, x, mode, trainable, false)
    }

    fn forward_with(
        &mut self,
        tape: &mut Tape<T>,
        x: &Tensor<T>,
        mode: BnMode,
        trainable: &TrainableSet,
        with_heads: bool,
    ) -> Result<ForwardPass> {
        let (pass, stats) = self.record(tape, x, mode, trainable, with_heads)?;
        if mode == BnMode::Train {
            let m = self.spec.bn_momentum;
            for (state, s) in self.bn.iter_mut().zip(&stats) {
                if let Some(s) = s {
                    state.update(s, m);
                }
            }
        }
        Ok(pass)
    }

    /// Logits for `x` without touching any state. `mode` must not be `Train`.
    pub fn predict_logits(&self, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        if mode == BnMode::Train {
            return Err(Error::Contract("predict_logits cannot refresh running statistics".into()));
        }
        let mut tape = Tape::new();
        let (pass, _) = self.record(&mut tape, x, mode, &TrainableSet::none(self), false)?;
        Ok(tape.value(pass.logits).clone())
    }

    fn record(
        &self,
        tape: &mut Tape<T>,
        x: &Tensor<T>,
        mode: BnMode,
        trainable: &TrainableSet,
        with_heads: bool,
    ) -> Result<(ForwardPass, Vec<Option<BnBatchStats>>)> {
        let s = &self.spec;
        let expected = [s.in_channels, s.image_size, s.image_size];
        if x.rank() != 4 || x.shape()[1..] != expected {
            return Err(Error::Dimension(format!(
                "model input must be B×{}×{}×{}, got {:?}",
                expected[0],
                expected[1],
                expected[2],
                x.shape()
            )));
        }
        if mode.uses_batch_stats() && x.shape()[0] < 2 {
            return Err(Error::BatchSize { got: x.shape()[0] });
        }
        if trainable.len() != self.params.len() {
            return Err(Error::Structure("trainable set built for a different model".into()));
        }
        let param_nodes: Vec<NodeId> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.leaf(p.value.clone(), trainable.contains(i)))
            .collect();
        let mut h = tape.leaf(x.clone(), false);
        let mut taps = Vec::with_capacity(self.blocks.len());
        let mut stats = Vec::with_capacity(self.blocks.len());
        for (block, state) in self.blocks.iter().zip(&self.bn) {
            let conv = tape.conv2d(h, param_nodes[block.conv], 1, 1)?;
            let source = match mode {
                BnMode::Eval => BnStatsSource::Running {
                    mean: &state.running_mean,
                    var: &state.running_var,
                },
                _ => BnStatsSource::Batch,
            };
            let (bn, st) = tape.batch_norm(
                conv,
                param_nodes[block.gamma],
                param_nodes[block.beta],
                source,
                s.bn_eps,
            )?;
            stats.push(st);
            let act = tape.relu(bn)?;
            h = tape.avg_pool2(act)?;
            taps.push(h);
        }
        let pooled = tape.global_avg_pool(h)?;
        let logits = self.linear(tape, pooled, &self.classifier, &param_nodes)?;

        // heads of one layer share a single wide first map
        let mut z = Vec::with_capacity(self.projectors.len());
        let mut layers: Vec<usize> = self.projectors.iter().map(|p| p.layer).collect();
        layers.dedup();
        for layer in layers.into_iter().filter(|_| with_heads) {
            let heads: Vec<&Projector> = self.projectors.iter().filter(|p| p.layer == layer).collect();
            let rows = tape.nchw_to_rows(taps[layer - 1])?;
            let first: Vec<&Linear> = heads.iter().map(|p| &p.maps[0]).collect();
            let w = tape.concat_cols(&first.iter().map(|m| param_nodes[m.weight]).collect::<Vec<_>>())?;
            let b = tape.concat_cols(&first.iter().map(|m| param_nodes[m.bias]).collect::<Vec<_>>())?;
            let mut wide = tape.matmul(rows, w)?;
            wide = tape.add_bias(wide, b)?;
            if heads.iter().any(|p| p.maps.len() > 1) {
                wide = tape.relu(wide)?;
            }
            let mut start = 0;
            for p in heads {
                let width = self.params[p.maps[0].bias].value.numel();
                let mut a = tape.slice_cols(wide, start, width)?;
                start += width;
                for (j, map) in p.maps.iter().enumerate().skip(1) {
                    if j > 1 {
                        a = tape.relu(a)?;
                    }
                    a = self.linear(tape, a, map, &param_nodes)?;
                }
                z.push(ProjectorOutput {
                    layer: p.layer,
                    head: p.head,
                    z: tape.softmax_rows(a)?,
                });
            }
        }
        Ok((
            ForwardPass {
                taps,
                logits,
                z,
                param_nodes,
            },
            stats,
        ))
    }

    fn linear(&self, tape: &mut Tape<T>, x: NodeId, map: &Linear, nodes: &[NodeId]) -> Result<NodeId> {
        let y = tape.matmul(x, nodes[map.weight])?;
        tape.add_bias(y, nodes[map.bias])
    }

    /// Moves leaf gradients of `pass` onto the parameters. Parameters that
    /// received no gradient are left with `grad = None`.
    pub fn store_grads(&mut self, pass: &ForwardPass, grads: &mut Gradients<T>) -> Result<()> {
        for (p, &node) in self.params.iter_mut().zip(&pass.param_nodes) {
            p.grad = None;
            if let Some(g) = grads.take(node) {
                p.set_grad(g)?;
            }
        }
        Ok(())
    }

    /// Parameters followed by batch-norm running statistics, in a fixed order.
    pub fn to_entries(&self) -> Vec<Entry> {
        let mut out: Vec<Entry> = self.params.iter().map(|p| Entry::new(p.name.clone(), &p.value)).collect();
        for (i, st) in self.bn.iter().enumerate() {
            let n = st.running_mean.len();
            let p = format!("extractor.block{}.bn", i + 1);
            out.push(Entry::new(
                format!("{p}.running_mean"),
                &Tensor::new(vec![n], st.running_mean.clone()).expect("bn length"),
            ));
            out.push(Entry::new(
                format!("{p}.running_var"),
                &Tensor::new(vec![n], st.running_var.clone()).expect("bn length"),
            ));
        }
        out
    }

    /// Loads parameters and running statistics by name. Unknown names are
    /// ignored so optimizer entries can share a file with the model.
    pub fn load_entries(&mut self, entries: &[Entry]) -> Result<()> {
        let by_name: HashMap<&str, &Entry> = entries.iter().map(|e| (e.name.as_str(), e)).collect();
        let fetch = |name: &str, shape: &[usize]| -> Result<Tensor<T>> {
            let e = by_name
                .get(name)
                .ok_or_else(|| Error::Structure(format!("checkpoint lacks `{name}`")))?;
            if e.tensor.shape() != shape {
                return Err(Error::Structure(format!(
                    "`{name}` has shape {:?} in the checkpoint but {shape:?} in the model",
                    e.tensor.shape()
                )));
            }
            Ok(e.tensor.to_tensor())
        };
        let mut values = Vec::with_capacity(self.params.len());
        for p in &self.params {
            values.push(fetch(&p.name, p.value.shape())?);
        }
        let mut bn = Vec::with_capacity(self.bn.len());
        for (i, st) in self.bn.iter().enumerate() {
            let n = [st.running_mean.len()];
            let p = format!("extractor.block{}.bn", i + 1);
            bn.push(BnState {
                running_mean: fetch(&format!("{p}.running_mean"), &n)?.into_data(),
                running_var: fetch(&format!("{p}.running_var"), &n)?.into_data(),
            });
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = v;
            p.grad = None;
        }
        self.bn = bn;
        Ok(())
    }
}
