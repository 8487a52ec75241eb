//! Delayed SQuantization training.
//!
//! Activations are quantized from the first iteration. Once `delay`
//! iterations have passed, every forward pass re-derives each compressible
//! layer's threshold, mask and grid from its shadow weights and trains
//! through the projection with a masked straight-through gradient.

pub mod order;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{compression_rate, CompressionReport};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::io::container::PackedModel;
use crate::io::dataset::{DataSpec, DatasetHandle};
use crate::nn::{ModelSpec, Network, WeightKind, WeightLayerStat};
use crate::ops::loss::argmax_rows;
use crate::optim::{sgd_step, SgdConfig, SgdState};
use crate::tensor::Tensor;

pub use order::{
    apply_order_mode, apply_order_mode_with_threshold, OrderMode, Squantized, WeightPolicy,
};

const SUPPORTED_BITS: [u32; 5] = [2, 3, 4, 8, 32];
/// Batch order comes from `ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_SALT)`,
/// reshuffled at the start of every epoch.
pub const SHUFFLE_SALT: u64 = 0x5eed_5a1e_0000_0001;
const EVAL_BATCH: usize = 256;

fn default_momentum() -> f32 {
    0.9
}
fn default_weight_decay() -> f32 {
    1e-4
}
fn default_true() -> bool {
    true
}
fn default_refresh() -> usize {
    1
}
fn default_alpha() -> f32 {
    crate::kernels::PACT_ALPHA_INIT
}

/// Parameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SQuantConfig {
    pub k_weight: u32,
    pub k_act: u32,
    pub sigma: f64,
    /// Iterations before weights are SQuantized; `floor(total / 3)` when absent.
    #[serde(default)]
    pub delay_iters: Option<usize>,
    pub total_iters: usize,
    pub order_mode: OrderMode,
    /// Layers kept at full precision; first conv and last dense when absent.
    #[serde(default)]
    pub exempt_layers: Option<Vec<String>>,
    /// Use the mean / mean+2std range for 2-bit weights.
    #[serde(default)]
    pub clamp_mode_2bit: bool,
    /// Piecewise-constant `(from_iter, lr)` steps; the first must start at 0.
    pub lr_schedule: Vec<(usize, f32)>,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default = "default_momentum")]
    pub momentum: f32,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f32,
    #[serde(default = "default_true")]
    pub nesterov: bool,
    /// Recompute thresholds every this many iterations; masks and grids are
    /// refreshed on every iteration regardless.
    #[serde(default = "default_refresh")]
    pub threshold_refresh_every: usize,
    /// Compress the classifier too (it is exempt by default).
    #[serde(default)]
    pub sparsify_last_fc: bool,
    #[serde(default = "default_alpha")]
    pub pact_alpha_init: f32,
}

impl SQuantConfig {
    /// Baseline-free defaults for quick experiments.
    pub fn new(k_weight: u32, k_act: u32, sigma: f64, total_iters: usize) -> Self {
        SQuantConfig {
            k_weight,
            k_act,
            sigma,
            delay_iters: None,
            total_iters,
            order_mode: OrderMode::QonS,
            exempt_layers: None,
            clamp_mode_2bit: false,
            lr_schedule: vec![(0, 0.05)],
            batch_size: 64,
            seed: 0,
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            nesterov: true,
            threshold_refresh_every: 1,
            sparsify_last_fc: false,
            pact_alpha_init: default_alpha(),
        }
    }

    pub fn delay(&self) -> usize {
        self.delay_iters.unwrap_or(self.total_iters / 3)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (what, k) in [("k_weight", self.k_weight), ("k_act", self.k_act)] {
            if !SUPPORTED_BITS.contains(&k) {
                return bad(format!("{what} = {k}, expected one of {SUPPORTED_BITS:?}"));
            }
        }
        if self.total_iters == 0 {
            return bad("total_iters must be positive".into());
        }
        if self.delay() > self.total_iters {
            return bad(format!(
                "delay_iters {} exceeds total_iters {}",
                self.delay(),
                self.total_iters
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.threshold_refresh_every == 0 {
            return bad("threshold_refresh_every must be positive".into());
        }
        if !self.sigma.is_finite() {
            return bad("sigma must be finite".into());
        }
        if !(self.pact_alpha_init > 0.0) || !self.pact_alpha_init.is_finite() {
            return bad("pact_alpha_init must be positive".into());
        }
        match self.lr_schedule.first() {
            Some((0, _)) => {}
            _ => return bad("lr_schedule must start at iteration 0".into()),
        }
        if self.lr_schedule.windows(2).any(|w| w[1].0 <= w[0].0) {
            return bad("lr_schedule iterations must increase".into());
        }
        for &(_, lr) in &self.lr_schedule {
            self.sgd(lr)
                .validate()
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn lr_at(&self, iter: usize) -> f32 {
        self.lr_schedule
            .iter()
            .take_while(|(from, _)| *from <= iter)
            .last()
            .map_or(self.lr_schedule[0].1, |&(_, lr)| lr)
    }

    fn sgd(&self, lr: f32) -> SgdConfig {
        SgdConfig {
            lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            nesterov: self.nesterov,
        }
    }

    pub fn weight_policy(&self) -> WeightPolicy {
        WeightPolicy {
            order: self.order_mode,
            k: self.k_weight,
            sigma: self.sigma,
            clamp_2bit: self.clamp_mode_2bit,
        }
    }

    /// Whether weights are ever projected.
    fn compresses(&self) -> bool {
        self.order_mode != OrderMode::Baseline
            && !(self.k_weight >= 32 && self.order_mode == OrderMode::QuantizeOnly)
    }
}

/// A complete run description: training parameters plus model and data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub squant: SQuantConfig,
    pub model: ModelSpec,
    pub data: DataSpec,
}

impl RunConfig {
    pub fn build_network(&self, input_shape: &[usize], classes: usize) -> Result<Network> {
        let mut net = Network::build(
            &self.model,
            input_shape,
            classes,
            self.squant.k_act,
            self.squant.seed,
        )?;
        net.set_alphas(self.squant.pact_alpha_init);
        Ok(net)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    /// Only activations are quantized.
    QuantizeActivation,
    /// Weights and activations are SQuantized.
    Squantize,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::QuantizeActivation => "activation",
            Phase::Squantize => "squantize",
        }
    }
}

/// Metrics of one training iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub phase: Phase,
    pub loss: f32,
    pub top1: f64,
    pub overall_sparsity: f64,
    pub layer_sparsity: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub name: String,
    pub kind: WeightKind,
    pub n_total: usize,
    pub sparsity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Last iteration of the epoch.
    pub iter: usize,
    pub phase: Phase,
    pub loss: f64,
    pub train_top1: f64,
    pub test_top1: Option<f64>,
    pub layers: Vec<LayerSparsity>,
    pub sparsity_conv: f64,
    pub sparsity_fc: f64,
    pub sparsity_all: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
    /// Loss of every iteration.
    pub losses: Vec<f32>,
    pub final_train_top1: f64,
    pub final_test_top1: Option<f64>,
    pub compression: CompressionReport,
}

impl TrainReport {
    pub fn final_sparsity(&self) -> f64 {
        self.compression.sparsity_all
    }
}

fn sparsity_split(stats: &[WeightLayerStat]) -> (Vec<LayerSparsity>, f64, f64, f64) {
    let layers = stats
        .iter()
        .map(|s| LayerSparsity {
            name: s.name.clone(),
            kind: s.kind,
            n_total: s.n_total,
            sparsity: s.sparsity(),
        })
        .collect::<Vec<_>>();
    let split = |f: &dyn Fn(&LayerSparsity) -> bool| {
        let (mut n, mut z) = (0.0f64, 0.0f64);
        for l in layers.iter().filter(|l| f(l)) {
            n += l.n_total as f64;
            z += l.n_total as f64 * l.sparsity;
        }
        if n > 0.0 {
            z / n
        } else {
            0.0
        }
    };
    let conv = split(&|l| l.kind == WeightKind::Conv);
    let fc = split(&|l| l.kind == WeightKind::Dense);
    let all = split(&|_| true);
    (layers, conv, fc, all)
}

/// Top-1 accuracy and mean loss in evaluation mode.
pub fn evaluate(net: &mut Network, data: &DatasetHandle) -> Result<(f64, f64)> {
    let mut correct = 0usize;
    let mut loss_sum = 0.0f64;
    let n = data.len();
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_BATCH).min(n);
        let rows: Vec<usize> = (start..end).collect();
        let (images, labels) = data.batch(&rows)?;
        let mut g = Graph::new();
        let x = g.input(images);
        let logits = net.forward(&mut g, x, false)?;
        correct += count_correct(g.value(logits), &labels, net.classes());
        let loss = g.softmax_xent(logits, &labels)?;
        loss_sum += g.value(loss).data()[0] as f64 * (end - start) as f64;
        start = end;
    }
    Ok((correct as f64 / n as f64, loss_sum / n as f64))
}

fn count_correct(logits: &Tensor, labels: &[usize], classes: usize) -> usize {
    argmax_rows(logits.data(), classes)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count()
}

/// Applies the run's exemptions to `net`.
pub fn resolve_exemptions(net: &mut Network, cfg: &SQuantConfig) -> Result<()> {
    match &cfg.exempt_layers {
        Some(names) => net.set_exemptions(names),
        None => {
            net.set_default_exemptions(cfg.sparsify_last_fc);
            Ok(())
        }
    }
}

/// Trains `net` on `train`, evaluating on `test` after every epoch.
pub fn train(
    net: &mut Network,
    train: &DatasetHandle,
    test: Option<&DatasetHandle>,
    cfg: &SQuantConfig,
) -> Result<TrainReport> {
    train_with_observer(net, train, test, cfg, &mut |_| Ok(()))
}

/// As [`train`], calling `observer` after every iteration.
pub fn train_with_observer(
    net: &mut Network,
    train: &DatasetHandle,
    test: Option<&DatasetHandle>,
    cfg: &SQuantConfig,
    observer: &mut dyn FnMut(&IterRecord) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    if train.sample_shape() != net.input_shape() || train.classes != net.classes() {
        return Err(Error::Config(format!(
            "data of shape {:?} with {} classes does not fit a network for {:?} / {}",
            train.sample_shape(),
            train.classes,
            net.input_shape(),
            net.classes()
        )));
    }
    if net.act_bits() != cfg.k_act {
        return Err(Error::Config(format!(
            "network quantizes activations to {} bits, config asks for {}",
            net.act_bits(),
            cfg.k_act
        )));
    }
    resolve_exemptions(net, cfg)?;
    net.clear_compression();
    let policy = cfg.weight_policy();
    let delay = cfg.delay();
    let mut sgd = SgdState::new(cfg.sgd(cfg.lr_at(0)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT);
    let n = train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = 0usize;

    let mut losses = Vec::with_capacity(cfg.total_iters);
    let mut epochs = Vec::new();
    let (mut epoch_loss, mut epoch_correct, mut epoch_seen) = (0.0f64, 0usize, 0usize);

    for iter in 0..cfg.total_iters {
        if cursor == 0 {
            order.shuffle(&mut rng);
        }
        let end = (cursor + cfg.batch_size).min(n);
        let rows = &order[cursor..end];
        cursor = if end == n { 0 } else { end };

        let phase = if iter < delay {
            Phase::QuantizeActivation
        } else {
            Phase::Squantize
        };
        if phase == Phase::Squantize && cfg.compresses() {
            let reuse = (iter - delay) % cfg.threshold_refresh_every != 0;
            net.refresh_compression(&policy, reuse)?;
        }
        sgd.set_lr(cfg.lr_at(iter))?;

        let (images, labels) = train.batch(rows)?;
        let mut g = Graph::new();
        let x = g.input(images);
        let logits = net.forward(&mut g, x, true)?;
        let correct = count_correct(g.value(logits), &labels, net.classes());
        let loss_node = g.softmax_xent(logits, &labels)?;
        let loss = g.value(loss_node).data()[0];
        if !loss.is_finite() {
            return Err(Error::Divergence { iter, loss });
        }
        g.backward(loss_node, &mut net.params)?;
        sgd_step(&mut net.params, &mut sgd)?;
        net.clamp_alphas();
        // a step can overflow the weights while the loss that produced it
        // is still finite
        if net.params.iter().any(|(_, p)| !p.value.is_finite()) {
            return Err(Error::Divergence { iter, loss });
        }

        losses.push(loss);
        epoch_loss += loss as f64 * labels.len() as f64;
        epoch_correct += correct;
        epoch_seen += labels.len();
        let stats = net.weight_stats();
        let (layer_sp, _, _, overall) = sparsity_split(&stats);
        observer(&IterRecord {
            iter,
            phase,
            loss,
            top1: correct as f64 / labels.len() as f64,
            overall_sparsity: overall,
            layer_sparsity: layer_sp.into_iter().map(|l| (l.name, l.sparsity)).collect(),
        })?;

        if cursor == 0 || iter + 1 == cfg.total_iters {
            // evaluate the projection of the weights just updated
            if phase == Phase::Squantize && cfg.compresses() {
                net.refresh_compression(&policy, false)?;
            }
            let test_top1 = match test {
                Some(t) => Some(evaluate(net, t)?.0),
                None => None,
            };
            let (layers, conv, fc, all) = sparsity_split(&net.weight_stats());
            epochs.push(EpochReport {
                epoch: epochs.len(),
                iter,
                phase,
                loss: epoch_loss / epoch_seen as f64,
                train_top1: epoch_correct as f64 / epoch_seen as f64,
                test_top1,
                layers,
                sparsity_conv: conv,
                sparsity_fc: fc,
                sparsity_all: all,
            });
            (epoch_loss, epoch_correct, epoch_seen) = (0.0, 0, 0);
        }
    }

    let (final_train_top1, _) = evaluate(net, train)?;
    let final_test_top1 = epochs.last().and_then(|e| e.test_top1);
    Ok(TrainReport {
        epochs,
        losses,
        final_train_top1,
        final_test_top1,
        compression: compression_rate(&net.weight_stats())?,
    })
}

/// Drops the shadow weights: compressed layers are emitted as sparse
/// records holding the projection the last forward pass used.
pub fn finalize(net: &Network) -> Result<PackedModel> {
    net.pack()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_lookup() {
        let mut c = SQuantConfig::new(4, 4, 0.0, 100);
        c.lr_schedule = vec![(0, 0.1), (50, 0.01), (80, 0.001)];
        assert_eq!(c.lr_at(0), 0.1);
        assert_eq!(c.lr_at(49), 0.1);
        assert_eq!(c.lr_at(50), 0.01);
        assert_eq!(c.lr_at(99), 0.001);
        c.validate().unwrap();
    }

    #[test]
    fn validation() {
        let ok = SQuantConfig::new(4, 4, 0.0, 30);
        assert_eq!(ok.delay(), 10);
        let mut c = ok.clone();
        c.k_weight = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ok.clone();
        c.delay_iters = Some(31);
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.lr_schedule = vec![(1, 0.1)];
        assert!(c.validate().is_err());
        let mut c = ok;
        c.lr_schedule = vec![(0, 0.1), (0, 0.01)];
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_mirrors_fields() {
        let json = r#"{
            "k_weight": 4, "k_act": 4, "sigma": 0.2, "total_iters": 90,
            "order_mode": "QonS", "lr_schedule": [[0, 0.1], [60, 0.01]],
            "batch_size": 32, "seed": 3, "exempt_layers": ["conv1"]
        }"#;
        let c: SQuantConfig = serde_json::from_str(json).unwrap();
        assert_eq!(c.delay(), 30);
        assert_eq!(c.momentum, 0.9);
        assert_eq!(c.exempt_layers.as_deref(), Some(&["conv1".to_string()][..]));
        let back: SQuantConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
