//! Small sequential networks whose weight layers carry SQuantization state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::io::container::{ActQuant, Codes, PackedModel, Record, RecordBody, SparseQuantRecord};
use crate::kernels::{PACT_ALPHA_FLOOR, PACT_ALPHA_INIT};
use crate::ops::linear::ConvGeometry;
use crate::ops::norm::BN_MOMENTUM;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::trainer::order::{apply_order_mode_with_threshold, Squantized, WeightPolicy};

/// Architecture description. Hidden blocks are weight layer, batch norm,
/// ReLU and (when activations are quantized) a PACT site; the classifier
/// is a plain dense layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelSpec {
    /// Convolutions with padding 1: the first 3x3 with stride 1, the rest
    /// 4x4 with stride 2 (halving even extents). Followed by average
    /// pooling, flatten and the classifier.
    Cnn {
        channels: Vec<usize>,
        pool: usize,
    },
    Mlp {
        hidden: Vec<usize>,
    },
}

impl ModelSpec {
    /// The 4-layer CNN used for desk-scale experiments.
    pub fn desk_cnn() -> Self {
        ModelSpec::Cnn {
            channels: vec![16, 32, 64],
            pool: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightKind {
    Conv,
    Dense,
}

#[derive(Debug, Clone)]
enum WeightOp {
    Conv { stride: usize, padding: usize },
    Dense { bias: ParamId },
}

/// One weight layer: its shadow weights plus the projection used by the
/// most recent forward pass.
#[derive(Debug, Clone)]
pub struct LayerState {
    pub name: String,
    pub weight: ParamId,
    pub exempt: bool,
    pub compression: Option<Squantized>,
    op: WeightOp,
    /// Activation site feeding this layer, if any.
    act_site: Option<ParamId>,
}

impl LayerState {
    pub fn kind(&self) -> WeightKind {
        match self.op {
            WeightOp::Conv { .. } => WeightKind::Conv,
            WeightOp::Dense { .. } => WeightKind::Dense,
        }
    }
}

#[derive(Debug, Clone)]
struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: Vec<f32>,
    running_var: Vec<f32>,
}

#[derive(Debug, Clone)]
enum Layer {
    Weight(usize),
    BatchNorm(String, BatchNorm),
    Relu,
    ActQuant(ParamId),
    AvgPool(usize),
    Flatten,
}

/// Shapes and input statistics of a weight layer, recorded on every forward.
#[derive(Debug, Clone, Default)]
pub struct LayerTrace {
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    /// Fraction of nonzero input activations.
    pub input_density: f64,
}

/// Per-layer size summary used by the reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightLayerStat {
    pub name: String,
    pub kind: WeightKind,
    pub n_total: usize,
    pub n_nonzero: usize,
    pub k_bits: u32,
    pub exempt: bool,
}

impl WeightLayerStat {
    pub fn sparsity(&self) -> f64 {
        1.0 - self.n_nonzero as f64 / self.n_total as f64
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    pub params: ParamStore,
    layers: Vec<Layer>,
    weights: Vec<LayerState>,
    traces: Vec<LayerTrace>,
    input_shape: Vec<usize>,
    classes: usize,
    act_bits: u32,
}

fn kaiming(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f32).sqrt(), rng)
}

impl Network {
    /// Builds and initializes a network for `[C, H, W]` inputs. Activation
    /// sites are only created when `act_bits < 32`.
    pub fn build(
        spec: &ModelSpec,
        input_shape: &[usize],
        classes: usize,
        act_bits: u32,
        seed: u64,
    ) -> Result<Self> {
        if input_shape.len() != 3 || input_shape.contains(&0) {
            return Err(Error::Config(format!(
                "input shape must be [C, H, W] with positive extents, got {input_shape:?}"
            )));
        }
        if classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        let mut b = Builder {
            net: Network {
                params: ParamStore::new(),
                layers: Vec::new(),
                weights: Vec::new(),
                traces: Vec::new(),
                input_shape: input_shape.to_vec(),
                classes,
                act_bits,
            },
            rng: ChaCha8Rng::seed_from_u64(seed),
            pending_act: None,
        };
        match spec {
            ModelSpec::Cnn { channels, pool } => {
                if channels.is_empty() || *pool == 0 {
                    return Err(Error::Config(
                        "cnn needs at least one conv layer and pool >= 1".into(),
                    ));
                }
                let (mut c, mut h, mut w) = (input_shape[0], input_shape[1], input_shape[2]);
                for (i, &out) in channels.iter().enumerate() {
                    let (kernel, stride) = if i == 0 { (3, 1) } else { (4, 2) };
                    let geom =
                        ConvGeometry::new(&[1, c, h, w], &[out, c, kernel, kernel], stride, 1)
                            .map_err(|e| {
                                Error::Config(format!("conv{} does not fit the input: {e}", i + 1))
                            })?;
                    b.conv(i + 1, c, out, kernel, stride);
                    b.hidden_tail(i + 1, out);
                    (c, h, w) = (out, geom.out_h, geom.out_w);
                }
                if h % pool != 0 || w % pool != 0 {
                    return Err(Error::Config(format!(
                        "pool {pool} does not divide the {h}x{w} feature map"
                    )));
                }
                b.net.layers.push(Layer::AvgPool(*pool));
                b.net.layers.push(Layer::Flatten);
                b.dense("fc", c * (h / pool) * (w / pool), classes);
            }
            ModelSpec::Mlp { hidden } => {
                b.net.layers.push(Layer::Flatten);
                let mut width: usize = input_shape.iter().product();
                for (i, &out) in hidden.iter().enumerate() {
                    b.dense(&format!("fc{}", i + 1), width, out);
                    b.hidden_tail(i + 1, out);
                    width = out;
                }
                b.dense("fc", width, classes);
            }
        }
        let mut net = b.net;
        net.traces = vec![LayerTrace::default(); net.weights.len()];
        net.set_default_exemptions(false);
        Ok(net)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn act_bits(&self) -> u32 {
        self.act_bits
    }

    pub fn layers(&self) -> &[LayerState] {
        &self.weights
    }

    pub fn layer(&self, name: &str) -> Option<&LayerState> {
        self.weights.iter().find(|l| l.name == name)
    }

    pub fn traces(&self) -> &[LayerTrace] {
        &self.traces
    }

    /// Ids of all PACT clipping levels.
    pub fn alpha_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::ActQuant(id) => Some(*id),
                _ => None,
            })
            .collect()
    }

    /// Exempts the first and last weight layer; with `sparsify_last` the
    /// classifier is compressed too.
    pub fn set_default_exemptions(&mut self, sparsify_last: bool) {
        let n = self.weights.len();
        for (i, l) in self.weights.iter_mut().enumerate() {
            l.exempt = i == 0 || (i == n - 1 && !sparsify_last);
        }
    }

    /// Exempts exactly the named layers.
    pub fn set_exemptions(&mut self, names: &[String]) -> Result<()> {
        for n in names {
            if self.layer(n).is_none() {
                return Err(Error::Config(format!("unknown layer `{n}` in exemptions")));
            }
        }
        for l in &mut self.weights {
            l.exempt = names.contains(&l.name);
        }
        Ok(())
    }

    /// Recomputes the projection of every non-exempt layer. With
    /// `reuse_threshold`, layers that already have a threshold keep it.
    pub fn refresh_compression(
        &mut self,
        policy: &WeightPolicy,
        reuse_threshold: bool,
    ) -> Result<()> {
        for l in &mut self.weights {
            if l.exempt {
                l.compression = None;
                continue;
            }
            let prev = if reuse_threshold {
                l.compression.as_ref().map(|c| c.threshold)
            } else {
                None
            };
            let projected =
                apply_order_mode_with_threshold(self.params.get(l.weight), policy, prev).map_err(
                    |e| match e {
                        Error::DegenerateLayer { reason, .. } => Error::DegenerateLayer {
                            layer: l.name.clone(),
                            reason,
                        },
                        other => other,
                    },
                )?;
            l.compression = Some(projected);
        }
        Ok(())
    }

    pub fn clear_compression(&mut self) {
        for l in &mut self.weights {
            l.compression = None;
        }
    }

    /// Weights the forward pass currently uses for each weight layer.
    pub fn effective_weights(&self) -> Vec<(String, Tensor)> {
        self.weights
            .iter()
            .map(|l| {
                let t = match &l.compression {
                    Some(c) => c.effective.clone(),
                    None => self.params.get(l.weight).clone(),
                };
                (l.name.clone(), t)
            })
            .collect()
    }

    /// Floors every clipping level after an optimizer step.
    pub fn clamp_alphas(&mut self) {
        for id in self.alpha_ids() {
            let a = &mut self.params.get_mut(id).data_mut()[0];
            if !(*a >= PACT_ALPHA_FLOOR) {
                *a = PACT_ALPHA_FLOOR;
            }
        }
    }

    pub fn set_alphas(&mut self, alpha: f32) {
        for id in self.alpha_ids() {
            self.params.get_mut(id).data_mut()[0] = alpha;
        }
    }

    /// Records a forward pass. In training mode batch norm uses batch
    /// statistics and updates its running estimates.
    pub fn forward(&mut self, graph: &mut Graph, input: NodeId, train: bool) -> Result<NodeId> {
        let mut h = input;
        for li in 0..self.layers.len() {
            h = match &mut self.layers[li] {
                Layer::Weight(wi) => {
                    let wi = *wi;
                    let x = graph.value(h);
                    let nonzero = x.data().iter().filter(|v| **v != 0.0).count();
                    let trace = &mut self.traces[wi];
                    trace.input_shape = x.shape().to_vec();
                    trace.input_density = nonzero as f64 / x.numel() as f64;
                    let l = &self.weights[wi];
                    let mut w = graph.param(&self.params, l.weight);
                    if let Some(c) = &l.compression {
                        w = graph.masked_ste(w, c.effective.clone(), c.mask.clone())?;
                    }
                    let out = match l.op {
                        WeightOp::Conv { stride, padding } => {
                            graph.conv2d(h, w, stride, padding)?
                        }
                        WeightOp::Dense { bias } => {
                            let b = graph.param(&self.params, bias);
                            graph.dense(h, w, b)?
                        }
                    };
                    self.traces[wi].output_shape = graph.value(out).shape().to_vec();
                    out
                }
                Layer::BatchNorm(_, bn) => {
                    let g = graph.param(&self.params, bn.gamma);
                    let b = graph.param(&self.params, bn.beta);
                    if train {
                        let out = graph.batchnorm_train(h, g, b)?;
                        for (r, m) in bn.running_mean.iter_mut().zip(&out.batch_mean) {
                            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                        }
                        for (r, v) in bn.running_var.iter_mut().zip(&out.batch_var) {
                            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                        }
                        out.node
                    } else {
                        graph.batchnorm_eval(h, g, b, &bn.running_mean, &bn.running_var)?
                    }
                }
                Layer::Relu => graph.relu(h),
                Layer::ActQuant(alpha) => {
                    let a = graph.param(&self.params, *alpha);
                    graph.pact(h, a, self.act_bits)?
                }
                Layer::AvgPool(k) => graph.avg_pool(h, *k)?,
                Layer::Flatten => graph.flatten(h)?,
            };
        }
        Ok(h)
    }

    /// Forward pass in evaluation mode, returning the logits.
    pub fn predict(&mut self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(images.clone());
        let out = self.forward(&mut g, x, false)?;
        Ok(g.value(out).clone())
    }

    /// Sizes of each weight layer under the current projection.
    pub fn weight_stats(&self) -> Vec<WeightLayerStat> {
        self.weights
            .iter()
            .map(|l| {
                let n_total = self.params.get(l.weight).numel();
                let (n_nonzero, k_bits) = match &l.compression {
                    Some(c) => (c.mask.count_kept(), c.quant.map_or(32, |q| q.k)),
                    None => (n_total, 32),
                };
                WeightLayerStat {
                    name: l.name.clone(),
                    kind: l.kind(),
                    n_total,
                    n_nonzero,
                    k_bits,
                    exempt: l.exempt,
                }
            })
            .collect()
    }

    /// Runs one sample through the network to fill the layer traces.
    pub fn trace_shapes(&mut self) -> Result<()> {
        let mut shape = vec![1];
        shape.extend_from_slice(&self.input_shape);
        self.predict(&Tensor::zeros(&shape)).map(|_| ())
    }

    /// All tensors in deployment form: compressed weight layers as sparse
    /// records, everything else at full precision. PACT levels ride on the
    /// record of the layer they feed.
    pub fn pack(&self) -> Result<PackedModel> {
        self.export(true)
    }

    /// Full-precision snapshot of every parameter and running statistic.
    pub fn checkpoint(&self) -> Result<PackedModel> {
        self.export(false)
    }

    fn act_for(&self, l: &LayerState) -> Option<ActQuant> {
        l.act_site.map(|id| ActQuant {
            alpha: self.params.get(id).data()[0],
            k_act: self.act_bits,
        })
    }

    fn export(&self, compressed: bool) -> Result<PackedModel> {
        let mut records = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Weight(wi) => {
                    let l = &self.weights[*wi];
                    let w = self.params.get(l.weight);
                    let mut rec = match (&l.compression, compressed) {
                        (Some(c), true) => sparse_record(&l.name, w.shape(), c),
                        _ => Record::full(format!("{}.weight", l.name), w),
                    };
                    rec.act = self.act_for(l);
                    records.push(rec);
                    if let WeightOp::Dense { bias } = l.op {
                        records.push(Record::full(self.params.name(bias), self.params.get(bias)));
                    }
                }
                Layer::BatchNorm(name, bn) => {
                    for id in [bn.gamma, bn.beta] {
                        records.push(Record::full(self.params.name(id), self.params.get(id)));
                    }
                    records.push(Record::full(
                        format!("{name}.running_mean"),
                        &Tensor::from_vec(bn.running_mean.clone()),
                    ));
                    records.push(Record::full(
                        format!("{name}.running_var"),
                        &Tensor::from_vec(bn.running_var.clone()),
                    ));
                }
                _ => {}
            }
        }
        Ok(PackedModel { records })
    }

    /// Loads weights, biases, batch-norm state and clipping levels from a
    /// packed model or checkpoint. Compression state is cleared: decoded
    /// weights are used as they are.
    pub fn load(&mut self, model: &PackedModel) -> Result<()> {
        let missing = |n: &str| Error::Format(format!("model has no record `{n}`"));
        for li in 0..self.layers.len() {
            match &mut self.layers[li] {
                Layer::Weight(wi) => {
                    let l = &self.weights[*wi];
                    let name = format!("{}.weight", l.name);
                    let rec = model.get(&name).ok_or_else(|| missing(&name))?;
                    let t = rec.decode()?;
                    assign(&mut self.params, l.weight, &t, &name)?;
                    if let (Some(site), Some(act)) = (l.act_site, rec.act) {
                        if act.k_act != self.act_bits {
                            return Err(Error::Consistency(format!(
                                "`{name}` was trained with {}-bit activations, network uses {}",
                                act.k_act, self.act_bits
                            )));
                        }
                        self.params.get_mut(site).data_mut()[0] = act.alpha;
                    }
                    if let WeightOp::Dense { bias } = l.op {
                        let bname = self.params.name(bias).to_string();
                        let rec = model.get(&bname).ok_or_else(|| missing(&bname))?;
                        assign(&mut self.params, bias, &rec.decode()?, &bname)?;
                    }
                }
                Layer::BatchNorm(name, bn) => {
                    for id in [bn.gamma, bn.beta] {
                        let pname = self.params.name(id).to_string();
                        let rec = model.get(&pname).ok_or_else(|| missing(&pname))?;
                        assign(&mut self.params, id, &rec.decode()?, &pname)?;
                    }
                    for (suffix, dst) in [
                        ("running_mean", &mut bn.running_mean),
                        ("running_var", &mut bn.running_var),
                    ] {
                        let rname = format!("{name}.{suffix}");
                        let t = model.get(&rname).ok_or_else(|| missing(&rname))?.decode()?;
                        if t.numel() != dst.len() {
                            return Err(Error::Dimension(format!("`{rname}` has the wrong size")));
                        }
                        dst.copy_from_slice(t.data());
                    }
                }
                _ => {}
            }
        }
        self.clear_compression();
        Ok(())
    }
}

fn assign(params: &mut ParamStore, id: ParamId, t: &Tensor, name: &str) -> Result<()> {
    if params.get(id).shape() != t.shape() {
        return Err(Error::Dimension(format!(
            "`{name}` has shape {:?}, network expects {:?}",
            t.shape(),
            params.get(id).shape()
        )));
    }
    params.assign(id, t.data())
}

fn sparse_record(name: &str, shape: &[usize], c: &Squantized) -> Record {
    let body = match c.quant {
        Some(q) => SparseQuantRecord {
            k: q.k,
            min: q.min,
            max: q.max,
            mask: c.mask.clone(),
            codes: Codes::Grid(c.codes.clone()),
        },
        None => SparseQuantRecord {
            k: 32,
            min: c.threshold,
            max: 0.0,
            mask: c.mask.clone(),
            codes: Codes::Raw(
                c.effective
                    .data()
                    .iter()
                    .zip(c.mask.bits())
                    .filter(|(_, &keep)| keep)
                    .map(|(&v, _)| v)
                    .collect(),
            ),
        },
    };
    Record {
        name: format!("{name}.weight"),
        shape: shape.to_vec(),
        body: RecordBody::Sparse(body),
        act: None,
    }
}

struct Builder {
    net: Network,
    rng: ChaCha8Rng,
    pending_act: Option<ParamId>,
}

impl Builder {
    fn push_weight(&mut self, name: String, weight: ParamId, op: WeightOp) {
        let idx = self.net.weights.len();
        self.net.weights.push(LayerState {
            name,
            weight,
            exempt: false,
            compression: None,
            op,
            act_site: self.pending_act.take(),
        });
        self.net.layers.push(Layer::Weight(idx));
    }

    fn conv(&mut self, i: usize, cin: usize, cout: usize, kernel: usize, stride: usize) {
        let name = format!("conv{i}");
        let w = kaiming(
            &[cout, cin, kernel, kernel],
            cin * kernel * kernel,
            &mut self.rng,
        );
        let id = self.net.params.add(format!("{name}.weight"), w);
        self.push_weight(name, id, WeightOp::Conv { stride, padding: 1 });
    }

    fn dense(&mut self, name: &str, fan_in: usize, out: usize) {
        let w = kaiming(&[out, fan_in], fan_in, &mut self.rng);
        let id = self.net.params.add(format!("{name}.weight"), w);
        let bias = self
            .net
            .params
            .add(format!("{name}.bias"), Tensor::zeros(&[out]));
        self.push_weight(name.to_string(), id, WeightOp::Dense { bias });
    }

    fn hidden_tail(&mut self, i: usize, width: usize) {
        let name = format!("bn{i}");
        let gamma = self
            .net
            .params
            .add(format!("{name}.gamma"), Tensor::full(&[width], 1.0));
        let beta = self
            .net
            .params
            .add(format!("{name}.beta"), Tensor::zeros(&[width]));
        self.net.layers.push(Layer::BatchNorm(
            name,
            BatchNorm {
                gamma,
                beta,
                running_mean: vec![0.0; width],
                running_var: vec![1.0; width],
            },
        ));
        self.net.layers.push(Layer::Relu);
        if self.net.act_bits < 32 {
            let alpha = self
                .net
                .params
                .add(format!("act{i}.alpha"), Tensor::scalar(PACT_ALPHA_INIT));
            self.net.layers.push(Layer::ActQuant(alpha));
            self.pending_act = Some(alpha);
        }
    }
}
