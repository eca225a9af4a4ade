//! The decoder network: temporal convolution → BN → spiking population,
//! spatial convolution → BN → spiking population, time-average pooling and a
//! linear classifier on the resulting spike rates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SpikeTensor;
use crate::error::{Error, Result};
use crate::graph::{BnStats, ConvEvents, Graph, Mode, NodeId, RunningStats, SpikeMode};
use crate::neurons::{
    beta_to_logit, Dynamics, EifParams, IzhikevichParams, NeuronKind, PlifParams, QifParams,
    SurrogateKind,
};
use crate::tensor::{ParamId, ParamStore, Tensor};

pub const MODEL_STORE_TAG: u32 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SnnConfig {
    pub c_in: usize,
    pub bins: usize,
    pub n_classes: usize,
    pub c_h: usize,
    pub k_temp: usize,
    pub k_spat: usize,
    pub v_th: f64,
    pub u_reset: f64,
    pub beta_init: f64,
    pub surrogate: SurrogateKind,
    pub neuron: NeuronKind,
    pub enable_tc: bool,
    pub enable_sc: bool,
    /// One learnable leak per channel instead of one per layer.
    pub per_channel_tau: bool,
    pub conv_bias: bool,
    pub classifier_bias: bool,
    pub qif: QifParams,
    pub eif: EifParams,
    pub izhikevich: IzhikevichParams,
}

impl Default for SnnConfig {
    fn default() -> Self {
        Self::for_input(66, 100, 3)
    }
}

impl SnnConfig {
    /// Defaults for a `c_in × bins` input: `C_h = ⌊C_in/2⌋`, 64-tap kernels,
    /// threshold 1 and initial leak 0.5.
    pub fn for_input(c_in: usize, bins: usize, n_classes: usize) -> Self {
        Self {
            c_in,
            bins,
            n_classes,
            c_h: (c_in / 2).max(1),
            k_temp: 64,
            k_spat: 64,
            v_th: 1.0,
            u_reset: 0.0,
            beta_init: 0.5,
            surrogate: SurrogateKind::default(),
            neuron: NeuronKind::Plif,
            enable_tc: true,
            enable_sc: true,
            per_channel_tau: false,
            conv_bias: false,
            classifier_bias: true,
            qif: QifParams::default(),
            eif: EifParams::default(),
            izhikevich: IzhikevichParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("c_in", self.c_in),
            ("bins", self.bins),
            ("n_classes", self.n_classes),
            ("c_h", self.c_h),
            ("k_temp", self.k_temp),
            ("k_spat", self.k_spat),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if !(self.beta_init > 0.0 && self.beta_init < 1.0) {
            return Err(Error::config("beta_init", "must lie in (0, 1)"));
        }
        if !(self.v_th > self.u_reset) {
            return Err(Error::config("v_th", "must exceed u_reset"));
        }
        self.surrogate.validate()
    }

    /// Step rule used by both spiking layers.
    pub fn dynamics(&self) -> Dynamics {
        let plif = PlifParams {
            w: beta_to_logit(self.beta_init),
            v_th: self.v_th,
            u_reset: self.u_reset,
        };
        match self.neuron {
            NeuronKind::Plif => Dynamics::Plif(plif),
            NeuronKind::Lif => Dynamics::Lif(plif),
            NeuronKind::Qif => Dynamics::Qif(QifParams {
                v_th: self.v_th,
                u_reset: self.u_reset,
                ..self.qif
            }),
            NeuronKind::Eif => Dynamics::Eif(EifParams {
                v_th: self.v_th,
                u_reset: self.u_reset,
                ..self.eif
            }),
            NeuronKind::Izhikevich => Dynamics::Izhikevich(self.izhikevich),
        }
    }

    /// Width of the pooled feature vector.
    pub fn feature_width(&self) -> usize {
        self.c_h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct TcBlock {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub bn_gamma: ParamId,
    pub bn_shift: ParamId,
    pub leak: Option<ParamId>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ScBlock {
    pub kernel: ParamId,
    pub bn_gamma: ParamId,
    pub bn_shift: ParamId,
    pub leak: Option<ParamId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnnModel {
    pub(crate) config: SnnConfig,
    pub(crate) params: ParamStore,
    pub(crate) tc: Option<TcBlock>,
    pub(crate) sc: Option<ScBlock>,
    pub(crate) classifier: ParamId,
    pub(crate) classifier_bias: Option<ParamId>,
    pub(crate) tc_stats: RunningStats,
    pub(crate) sc_stats: RunningStats,
}

/// Node handles of one recorded forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    pub input: NodeId,
    pub tc_conv: Option<NodeId>,
    /// Output of the first block (spikes, or the pass-through projection).
    pub tc_out: NodeId,
    pub sc_conv: Option<NodeId>,
    pub sc_out: NodeId,
    pub features: NodeId,
    pub logits: NodeId,
}

/// Running-statistics updates produced by a train-mode pass; commit them
/// with [`SnnModel::commit_stats`].
#[derive(Debug, Clone)]
pub struct StatsUpdate {
    tc: RunningStats,
    sc: RunningStats,
}

/// Measured events for one spike-driven convolution layer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LayerEvents {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Positions along the convolved axis.
    pub positions: usize,
    pub kernel: usize,
    pub input_events: f64,
    pub accumulates: f64,
    /// Spikes emitted by the layer's neuron population.
    pub output_spikes: f64,
}

impl LayerEvents {
    /// Mean events per input element.
    pub fn input_rate(&self) -> f64 {
        self.input_events / (self.in_channels * self.positions) as f64
    }
}

/// Per-layer counts from an instrumented forward pass, summed over the batch.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Instrumentation {
    pub batch: usize,
    pub tc: Option<LayerEvents>,
    pub sc: Option<LayerEvents>,
}

fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

/// Dense `[B, C, T]` tensor from spike-count trials.
pub fn batch_tensor(trials: &[&SpikeTensor]) -> Result<Tensor> {
    let first = trials
        .first()
        .ok_or_else(|| Error::Dimension("empty batch".into()))?;
    let (c, t) = (first.channels(), first.bins());
    let mut data = Vec::with_capacity(trials.len() * c * t);
    for x in trials {
        if (x.channels(), x.bins()) != (c, t) {
            return Err(Error::Dimension(format!(
                "batch mixes {c}x{t} and {}x{} trials",
                x.channels(),
                x.bins()
            )));
        }
        data.extend(x.counts().iter().map(|&v| f64::from(v)));
    }
    Tensor::new(vec![trials.len(), c, t], data)
}

impl SnnModel {
    pub fn new(config: SnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::with_tag(MODEL_STORE_TAG);
        let learn_leak = config.neuron == NeuronKind::Plif;
        let leak_len = if config.per_channel_tau { config.c_h } else { 1 };
        let w0 = beta_to_logit(config.beta_init);
        let (c_in, c_h) = (config.c_in, config.c_h);

        let tc = config.enable_tc.then(|| {
            let fan_in = c_in * config.k_temp;
            TcBlock {
                weight: params.add(
                    "tc.weight",
                    kaiming_uniform(&mut rng, &[c_h, c_in, config.k_temp], fan_in),
                ),
                bias: config
                    .conv_bias
                    .then(|| params.add("tc.bias", Tensor::zeros(&[c_h]))),
                bn_gamma: params.add("tc.bn.gamma", Tensor::full(&[c_h], 1.0)),
                bn_shift: params.add("tc.bn.shift", Tensor::zeros(&[c_h])),
                leak: learn_leak.then(|| params.add("tc.leak", Tensor::full(&[leak_len], w0))),
            }
        });
        let sc = config.enable_sc.then(|| ScBlock {
            kernel: params.add(
                "sc.kernel",
                kaiming_uniform(&mut rng, &[config.k_spat, 1], config.k_spat),
            ),
            bn_gamma: params.add("sc.bn.gamma", Tensor::full(&[c_h], 1.0)),
            bn_shift: params.add("sc.bn.shift", Tensor::zeros(&[c_h])),
            leak: learn_leak.then(|| params.add("sc.leak", Tensor::full(&[leak_len], w0))),
        });
        let classifier = params.add(
            "classifier.weight",
            kaiming_uniform(&mut rng, &[config.n_classes, c_h], c_h),
        );
        let classifier_bias = config
            .classifier_bias
            .then(|| params.add("classifier.bias", Tensor::zeros(&[config.n_classes])));
        Ok(Self {
            tc_stats: RunningStats::new(c_h),
            sc_stats: RunningStats::new(c_h),
            config,
            params,
            tc,
            sc,
            classifier,
            classifier_bias,
        })
    }

    pub fn config(&self) -> &SnnConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn running_stats(&self) -> (&RunningStats, &RunningStats) {
        (&self.tc_stats, &self.sc_stats)
    }

    pub(crate) fn running_stats_mut(&mut self) -> (&mut RunningStats, &mut RunningStats) {
        (&mut self.tc_stats, &mut self.sc_stats)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 3 || s[1] != self.config.c_in || s[2] != self.config.bins {
            return Err(Error::Shape {
                op: "model input",
                expected: vec![s.first().copied().unwrap_or(0), self.config.c_in, self.config.bins],
                actual: s.to_vec(),
            });
        }
        Ok(())
    }

    /// Records the forward pass on `g`. In [`Mode::Train`] batch norms use
    /// batch statistics and the returned [`StatsUpdate`] carries the updated
    /// running estimates.
    pub fn build(
        &self,
        g: &mut Graph,
        input: NodeId,
        mode: Mode,
    ) -> Result<(ForwardNodes, Option<StatsUpdate>)> {
        self.check_input(g.value(input))?;
        let cfg = &self.config;
        let dynamics = cfg.dynamics();
        let mut tc_stats = self.tc_stats.clone();
        let mut sc_stats = self.sc_stats.clone();
        let train = mode == Mode::Train;

        let (tc_conv, tc_out) = match &self.tc {
            Some(b) => {
                let w = g.param(&self.params, b.weight);
                let bias = b.bias.map(|id| g.param(&self.params, id));
                let conv = g.conv1d(input, w, bias)?;
                let gamma = g.param(&self.params, b.bn_gamma);
                let shift = g.param(&self.params, b.bn_shift);
                let stats = if train {
                    BnStats::Batch(&mut tc_stats)
                } else {
                    BnStats::Running(&self.tc_stats)
                };
                let z = g.batch_norm(conv, gamma, shift, stats)?;
                let leak = b.leak.map(|id| g.param(&self.params, id));
                (Some(conv), g.spiking(z, dynamics, leak, cfg.surrogate)?)
            }
            None => (None, self.pass_through(g, input)?),
        };
        let (sc_conv, sc_out) = match &self.sc {
            Some(b) => {
                let k = g.param(&self.params, b.kernel);
                let conv = g.conv2d_spatial(tc_out, k)?;
                let gamma = g.param(&self.params, b.bn_gamma);
                let shift = g.param(&self.params, b.bn_shift);
                let stats = if train {
                    BnStats::Batch(&mut sc_stats)
                } else {
                    BnStats::Running(&self.sc_stats)
                };
                let z = g.batch_norm(conv, gamma, shift, stats)?;
                let leak = b.leak.map(|id| g.param(&self.params, id));
                (Some(conv), g.spiking(z, dynamics, leak, cfg.surrogate)?)
            }
            None => (None, tc_out),
        };
        let features = g.avg_pool_time(sc_out)?;
        let w = g.param(&self.params, self.classifier);
        let bias = self.classifier_bias.map(|id| g.param(&self.params, id));
        let logits = g.linear(features, w, bias)?;
        let nodes = ForwardNodes {
            input,
            tc_conv,
            tc_out,
            sc_conv,
            sc_out,
            features,
            logits,
        };
        let update = train.then_some(StatsUpdate {
            tc: tc_stats,
            sc: sc_stats,
        });
        Ok((nodes, update))
    }

    /// Identity when `C_in == C_h`, otherwise non-overlapping group averaging.
    fn pass_through(&self, g: &mut Graph, input: NodeId) -> Result<NodeId> {
        if self.config.c_in == self.config.c_h {
            Ok(input)
        } else {
            g.group_average(input, self.config.c_h)
        }
    }

    pub fn commit_stats(&mut self, update: StatsUpdate) {
        if self.tc.is_some() {
            self.tc_stats = update.tc;
        }
        if self.sc.is_some() {
            self.sc_stats = update.sc;
        }
    }

    fn eval_graph(&self, batch: &[&SpikeTensor]) -> Result<(Graph, ForwardNodes)> {
        let mut g = Graph::new(SpikeMode::Hard);
        let x = g.input(batch_tensor(batch)?, false);
        let (nodes, _) = self.build(&mut g, x, Mode::Eval)?;
        Ok((g, nodes))
    }

    /// Eval-mode logits `[B, N_class]`.
    pub fn forward(&self, batch: &[&SpikeTensor]) -> Result<Tensor> {
        let (g, nodes) = self.eval_graph(batch)?;
        Ok(g.value(nodes.logits).clone())
    }

    /// Pooled spike-rate features `[B, C_h]` (the classifier input).
    pub fn extract_features(&self, batch: &[&SpikeTensor]) -> Result<Tensor> {
        let (g, nodes) = self.eval_graph(batch)?;
        Ok(g.value(nodes.features).clone())
    }

    /// Eval-mode logits plus the accumulate events each spike-driven
    /// convolution actually executed.
    pub fn forward_instrumented(&self, batch: &[&SpikeTensor]) -> Result<(Tensor, Instrumentation)> {
        let (g, nodes) = self.eval_graph(batch)?;
        Ok((g.value(nodes.logits).clone(), self.instrumentation(&g, &nodes, batch.len())))
    }

    pub(crate) fn instrumentation(&self, g: &Graph, nodes: &ForwardNodes, batch: usize) -> Instrumentation {
        let cfg = &self.config;
        let spikes = |id: NodeId| g.value(id).data().iter().sum::<f64>();
        let layer = |ev: ConvEvents, cin, cout, pos, k, out: NodeId| LayerEvents {
            in_channels: cin,
            out_channels: cout,
            positions: pos,
            kernel: k,
            input_events: ev.input_events,
            accumulates: ev.accumulates,
            output_spikes: spikes(out),
        };
        Instrumentation {
            batch,
            tc: nodes.tc_conv.and_then(|id| g.events(id)).map(|ev| {
                layer(ev, cfg.c_in, cfg.c_h, cfg.bins, cfg.k_temp, nodes.tc_out)
            }),
            sc: nodes.sc_conv.and_then(|id| g.events(id)).map(|ev| {
                layer(ev, 1, 1, cfg.c_h * cfg.bins, cfg.k_spat, nodes.sc_out)
            }),
        }
    }
}

/// Index of the largest logit per row; ties go to the lowest class index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.dim(1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SnnConfig {
        SnnConfig {
            c_h: 3,
            k_temp: 5,
            k_spat: 3,
            ..SnnConfig::for_input(6, 12, 3)
        }
    }

    fn trial(seed: u64) -> SpikeTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SpikeTensor::new(6, 12, (0..72).map(|_| rng.gen_range(0..3)).collect()).unwrap()
    }

    #[test]
    fn parameter_shapes_follow_config() {
        let m = SnnModel::new(tiny(), 0).unwrap();
        let shapes: Vec<(String, Vec<usize>)> = m
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec()))
            .collect();
        assert_eq!(shapes[0], ("tc.weight".into(), vec![3, 6, 5]));
        assert!(shapes.contains(&("sc.kernel".into(), vec![3, 1])));
        assert!(shapes.contains(&("classifier.weight".into(), vec![3, 3])));
        assert!(shapes.contains(&("tc.leak".into(), vec![1])));
    }

    #[test]
    fn table_one_parameter_count() {
        // conv weights C_in*C_h*64 and 64, BN 2*C_h per block, classifier C_h*N_class
        let cfg = SnnConfig {
            classifier_bias: false,
            ..SnnConfig::for_input(80, 100, 3)
        };
        let m = SnnModel::new(cfg, 0).unwrap();
        let expected = 80 * 40 * 64 + 2 * 40 + 1 + 64 + 2 * 40 + 1 + 40 * 3;
        assert_eq!(m.num_parameters(), expected);
    }

    #[test]
    fn zero_input_gives_zero_logits() {
        let m = SnnModel::new(tiny(), 1).unwrap();
        let z = SpikeTensor::zeros(6, 12);
        let logits = m.forward(&[&z, &z]).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        assert!(m.extract_features(&[&z]).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_trials_give_identical_rows() {
        let m = SnnModel::new(tiny(), 2).unwrap();
        let x = trial(5);
        let logits = m.forward(&[&x, &x, &x]).unwrap();
        assert_eq!(logits.row(0), logits.row(1));
        assert_eq!(logits.row(0), logits.row(2));
        assert_eq!(m.forward(&[&x]).unwrap().row(0), logits.row(0));
    }

    #[test]
    fn features_are_rates() {
        let m = SnnModel::new(tiny(), 3).unwrap();
        let xs: Vec<SpikeTensor> = (0..4).map(trial).collect();
        let refs: Vec<&SpikeTensor> = xs.iter().collect();
        let f = m.extract_features(&refs).unwrap();
        assert_eq!(f.shape(), &[4, 3]);
        assert!(f.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let m = SnnModel::new(tiny(), 0).unwrap();
        let x = SpikeTensor::zeros(5, 12);
        assert!(matches!(m.forward(&[&x]), Err(Error::Shape { .. })));
    }

    #[test]
    fn ablations_keep_shapes_valid() {
        for (tc, sc) in [(false, true), (true, false), (false, false)] {
            let cfg = SnnConfig {
                enable_tc: tc,
                enable_sc: sc,
                ..tiny()
            };
            let m = SnnModel::new(cfg, 0).unwrap();
            let x = trial(1);
            assert_eq!(m.forward(&[&x]).unwrap().shape(), &[1, 3]);
        }
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![0, 1]);
    }
}
