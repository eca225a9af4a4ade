//! Neural activity vectors (per-segment spike counts) and the linear fusion
//! head that combines them with the network's pooled rate features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SpikeTensor;
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, NodeId, SpikeMode};
use crate::model::{batch_tensor, ForwardNodes, SnnModel, StatsUpdate};
use crate::tensor::{ParamId, ParamStore, Tensor};

pub const HEAD_STORE_TAG: u32 = 1;

/// `C × b` matrix of spike counts per channel and time segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NavFeatures {
    channels: usize,
    segments: usize,
    matrix: Vec<u32>,
}

impl NavFeatures {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn segments(&self) -> usize {
        self.segments
    }

    pub fn get(&self, channel: usize, segment: usize) -> u32 {
        self.matrix[channel * self.segments + segment]
    }

    /// Row-major flattening, channel by channel.
    pub fn as_slice(&self) -> &[u32] {
        &self.matrix
    }

    pub fn total(&self) -> u64 {
        self.matrix.iter().map(|&v| u64::from(v)).sum()
    }
}

pub fn extract_nav(x: &SpikeTensor, segments: usize) -> Result<NavFeatures> {
    let t = x.bins();
    if segments == 0 || t % segments != 0 {
        return Err(Error::InvalidArgument(format!(
            "{segments} segments do not divide {t} bins"
        )));
    }
    let len = t / segments;
    let mut matrix = Vec::with_capacity(x.channels() * segments);
    for c in 0..x.channels() {
        for seg in x.row(c).chunks(len) {
            matrix.push(seg.iter().map(|&v| u32::from(v)).sum());
        }
    }
    Ok(NavFeatures {
        channels: x.channels(),
        segments,
        matrix,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Hidden width of each projector.
    pub d: usize,
    /// Number of time segments in the activity vector.
    pub segments: usize,
    pub enable_pdf: bool,
    pub enable_pnav: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            d: 128,
            segments: 10,
            enable_pdf: true,
            enable_pnav: true,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self, bins: usize) -> Result<()> {
        if self.d == 0 {
            return Err(Error::config("d", "must be positive"));
        }
        if self.segments == 0 || bins % self.segments != 0 {
            return Err(Error::config(
                "segments",
                format!("must divide the {bins} time bins"),
            ));
        }
        Ok(())
    }
}

/// Per-feature standardisation fitted on training activity vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct NavScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NavScaler {
    pub fn identity(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            std: vec![1.0; width],
        }
    }

    /// Population statistics; constant features get unit scale.
    pub fn fit(navs: &[NavFeatures]) -> Result<Self> {
        let first = navs
            .first()
            .ok_or_else(|| Error::InvalidArgument("no activity vectors to fit".into()))?;
        let w = first.matrix.len();
        let n = navs.len() as f64;
        let mut mean = vec![0.0; w];
        for nav in navs {
            for (m, &v) in mean.iter_mut().zip(&nav.matrix) {
                *m += f64::from(v);
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; w];
        for nav in navs {
            for ((s, &v), m) in var.iter_mut().zip(&nav.matrix).zip(&mean) {
                *s += (f64::from(v) - m).powi(2);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    /// Standardised `[B, C·b]` batch.
    pub fn transform(&self, navs: &[NavFeatures]) -> Result<Tensor> {
        let w = self.width();
        let mut data = Vec::with_capacity(navs.len() * w);
        for nav in navs {
            if nav.matrix.len() != w {
                return Err(Error::Shape {
                    op: "nav scaler",
                    expected: vec![w],
                    actual: vec![nav.matrix.len()],
                });
            }
            data.extend(
                nav.matrix
                    .iter()
                    .zip(self.mean.iter().zip(&self.std))
                    .map(|(&v, (m, s))| (f64::from(v) - m) / s),
            );
        }
        Tensor::new(vec![navs.len(), w], data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionHead {
    pub(crate) config: FusionConfig,
    pub(crate) deep_width: usize,
    pub(crate) nav_width: usize,
    pub(crate) n_classes: usize,
    pub(crate) params: ParamStore,
    pub(crate) p_df: Option<ParamId>,
    pub(crate) p_nav: Option<ParamId>,
    pub(crate) classifier: ParamId,
    pub(crate) classifier_bias: ParamId,
    pub(crate) scaler: NavScaler,
}

impl FusionHead {
    /// Head for `deep_width` pooled features and `channels × segments` NAV
    /// entries. The NAV scaler starts as the identity.
    pub fn new(
        config: FusionConfig,
        deep_width: usize,
        channels: usize,
        n_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        if config.d == 0 || config.segments == 0 {
            return Err(Error::config("d", "d and segments must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |shape: &[usize], fan_in: usize| {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
        };
        let d = config.d;
        let nav_width = channels * config.segments;
        let mut params = ParamStore::with_tag(HEAD_STORE_TAG);
        let p_df = config
            .enable_pdf
            .then(|| params.add("head.p_df", init(&[d, deep_width], deep_width)));
        let p_nav = config
            .enable_pnav
            .then(|| params.add("head.p_nav", init(&[d, nav_width], nav_width)));
        let width = if config.enable_pdf { d } else { deep_width }
            + if config.enable_pnav { d } else { nav_width };
        let classifier = params.add("head.classifier.weight", init(&[n_classes, width], width));
        let classifier_bias = params.add("head.classifier.bias", Tensor::zeros(&[n_classes]));
        Ok(Self {
            config,
            deep_width,
            nav_width,
            n_classes,
            params,
            p_df,
            p_nav,
            classifier,
            classifier_bias,
            scaler: NavScaler::identity(nav_width),
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn scaler(&self) -> &NavScaler {
        &self.scaler
    }

    pub fn set_scaler(&mut self, scaler: NavScaler) -> Result<()> {
        if scaler.width() != self.nav_width {
            return Err(Error::Shape {
                op: "nav scaler",
                expected: vec![self.nav_width],
                actual: vec![scaler.width()],
            });
        }
        self.scaler = scaler;
        Ok(())
    }

    /// Width of the concatenated classifier input.
    pub fn fused_width(&self) -> usize {
        self.params.get(self.classifier).value.dim(1)
    }

    pub fn nav_batch(&self, trials: &[&SpikeTensor]) -> Result<Tensor> {
        let navs = trials
            .iter()
            .map(|x| extract_nav(x, self.config.segments))
            .collect::<Result<Vec<_>>>()?;
        self.scaler.transform(&navs)
    }

    /// Records `classifier · concat(P_DF·deep, P_NAV·nav)` on `g`.
    pub fn build(&self, g: &mut Graph, deep: NodeId, nav: NodeId) -> Result<NodeId> {
        let a = match self.p_df {
            Some(id) => {
                let w = g.param(&self.params, id);
                g.linear(deep, w, None)?
            }
            None => deep,
        };
        let b = match self.p_nav {
            Some(id) => {
                let w = g.param(&self.params, id);
                g.linear(nav, w, None)?
            }
            None => nav,
        };
        let joint = g.concat(a, b)?;
        let w = g.param(&self.params, self.classifier);
        let bias = g.param(&self.params, self.classifier_bias);
        g.linear(joint, w, Some(bias))
    }

    /// Logits from pooled features `[B, C_h]` and standardised NAV `[B, C·b]`.
    pub fn fuse_forward(&self, deep: &Tensor, nav: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(SpikeMode::Hard);
        let d = g.input(deep.clone(), false);
        let n = g.input(nav.clone(), false);
        let out = self.build(&mut g, d, n)?;
        Ok(g.value(out).clone())
    }
}

/// The network alone, or the network feeding a fusion head.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub model: SnnModel,
    pub head: Option<FusionHead>,
}

/// Node handles of a recorded decoder pass.
#[derive(Debug, Clone, Copy)]
pub struct DecoderNodes {
    pub model: ForwardNodes,
    pub nav: Option<NodeId>,
    pub logits: NodeId,
}

impl Decoder {
    pub fn new(model: SnnModel, head: Option<FusionHead>) -> Self {
        Self { model, head }
    }

    /// Records the full pass for `batch` on `g`. The input carries gradient
    /// when `input_grad` is set.
    pub fn build(
        &self,
        g: &mut Graph,
        batch: &[&SpikeTensor],
        mode: Mode,
        input_grad: bool,
    ) -> Result<(DecoderNodes, Option<StatsUpdate>)> {
        let x = g.input(batch_tensor(batch)?, input_grad);
        let (nodes, update) = self.model.build(g, x, mode)?;
        let (nav, logits) = match &self.head {
            Some(head) => {
                let nav = g.input(head.nav_batch(batch)?, false);
                (Some(nav), head.build(g, nodes.features, nav)?)
            }
            None => (None, nodes.logits),
        };
        Ok((
            DecoderNodes {
                model: nodes,
                nav,
                logits,
            },
            update,
        ))
    }

    pub fn logits(&self, batch: &[&SpikeTensor]) -> Result<Tensor> {
        let mut g = Graph::new(SpikeMode::Hard);
        let (nodes, _) = self.build(&mut g, batch, Mode::Eval, false)?;
        Ok(g.value(nodes.logits).clone())
    }

    pub fn n_classes(&self) -> usize {
        self.model.config().n_classes
    }

    pub fn num_parameters(&self) -> usize {
        self.model.num_parameters() + self.head.as_ref().map_or(0, |h| h.params.num_scalars())
    }

    /// Fits the head's NAV scaler on `trials` (no-op without a head).
    pub fn fit_scaler(&mut self, trials: &[&SpikeTensor]) -> Result<()> {
        if let Some(head) = &mut self.head {
            let navs = trials
                .iter()
                .map(|x| extract_nav(x, head.config.segments))
                .collect::<Result<Vec<_>>>()?;
            head.set_scaler(NavScaler::fit(&navs)?)?;
        }
        Ok(())
    }

    pub(crate) fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        let mut v = vec![self.model.params_mut()];
        if let Some(h) = &mut self.head {
            v.push(&mut h.params);
        }
        v
    }
}
