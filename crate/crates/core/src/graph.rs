//! Tape-based reverse-mode differentiation over the layer operations the
//! decoder uses.
//!
//! Operations are recorded in execution order as nodes; [`Graph::backward`]
//! walks the tape once in reverse and accumulates parameter gradients into a
//! [`ParamStore`]. Spike nonlinearities use the surrogate derivative in the
//! backward pass. In [`SpikeMode::Soft`] the forward pass also uses the
//! surrogate's primitive and a soft reset gate, which makes the whole network
//! smooth and finite-difference checkable.
//!
//! Both convolutions run event-driven: each nonzero input element scatters
//! into the outputs it touches. For any fixed output element the
//! contributions arrive in the same order as the textbook nested loop, so
//! results match a naive implementation bit for bit.

use crate::error::{Error, Result};
use crate::neurons::{logit_to_beta, logit_to_beta_grad, Dynamics, SurrogateKind};
use crate::tensor::{ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpikeMode {
    #[default]
    Hard,
    Soft,
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Batch-norm running statistics (not trained by gradient).
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Number of train-mode updates applied so far.
    pub updates: u64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            updates: 0,
        }
    }
}

/// Statistics source for [`Graph::batch_norm`]: batch statistics that also
/// update the running estimates, or frozen running estimates.
#[derive(Debug)]
pub enum BnStats<'a> {
    Batch(&'a mut RunningStats),
    Running(&'a RunningStats),
}

/// Event counts measured while executing a convolution.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ConvEvents {
    /// Sum of the input tensor (spike events, counts weighted by value).
    pub input_events: f64,
    /// Accumulate operations executed, padded taps included.
    pub accumulates: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    /// Eval-mode batch norms that ran on never-updated running statistics.
    pub bn_uninitialized: usize,
    /// EIF steps whose exponential term hit the clamp.
    pub eif_clamped: usize,
}

#[derive(Debug, Clone)]
struct SpikeTrace {
    u: Vec<f64>,
    aux: Vec<f64>,
    h: Vec<f64>,
    o: Vec<f64>,
    beta: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    Conv1d {
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        pad: usize,
    },
    Conv2dSpatial {
        x: NodeId,
        k: NodeId,
        pad: usize,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        shift: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Spiking {
        x: NodeId,
        leak: Option<NodeId>,
        dynamics: Dynamics,
        surrogate: SurrogateKind,
        trace: Box<SpikeTrace>,
    },
    AvgPoolTime {
        x: NodeId,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    GroupAverage {
        x: NodeId,
        groups: Vec<(usize, usize)>,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Dot {
        x: NodeId,
        weights: Tensor,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    events: Option<ConvEvents>,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    spike_mode: SpikeMode,
    diagnostics: Diagnostics,
}

fn shape_err(op: &'static str, expected: &[usize], actual: &[usize]) -> Error {
    Error::Shape {
        op,
        expected: expected.to_vec(),
        actual: actual.to_vec(),
    }
}

/// Non-overlapping channel groups mapping `c_in` channels onto `c_out`. When
/// `c_out > c_in` groups have one member and inputs repeat.
pub fn channel_groups(c_in: usize, c_out: usize) -> Vec<(usize, usize)> {
    (0..c_out)
        .map(|j| {
            let start = j * c_in / c_out;
            let end = ((j + 1) * c_in / c_out).max(start + 1).min(c_in);
            (start, end)
        })
        .collect()
}

impl Graph {
    pub fn new(spike_mode: SpikeMode) -> Self {
        Self {
            nodes: Vec::new(),
            spike_mode,
            diagnostics: Diagnostics::default(),
        }
    }

    pub fn spike_mode(&self) -> SpikeMode {
        self.spike_mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn events(&self, id: NodeId) -> Option<ConvEvents> {
        self.nodes[id.0].events
    }

    pub fn diagnostics(&self) -> &Diagnostics {
        &self.diagnostics
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            events: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Records a constant input. `requires_grad` makes its gradient available
    /// through [`Gradients::node`].
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Input, requires_grad)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(store.get(id).value.clone(), Op::Param(id), true)
    }

    /// Same-padded, stride-1 cross-correlation over time:
    /// `x [B, C_in, T]`, `w [C_out, C_in, k]` → `[B, C_out, T]`.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 3 || ws.len() != 3 || ws[1] != xs[1] || ws[2] == 0 {
            return Err(shape_err("conv1d", &[0, ws.get(1).copied().unwrap_or(0), 0], &xs));
        }
        let (bsz, c_in, t_len) = (xs[0], xs[1], xs[2]);
        let (c_out, k) = (ws[0], ws[2]);
        if let Some(b) = bias {
            if self.value(b).shape() != [c_out] {
                return Err(shape_err("conv1d bias", &[c_out], self.value(b).shape()));
            }
        }
        let pad = (k - 1) / 2;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; bsz * c_out * t_len];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for (i, row) in out.chunks_mut(t_len).enumerate() {
                row.fill(bv[i % c_out]);
            }
        }
        // kernels reversed so each event updates a contiguous output run
        let wrev: Vec<f64> = wv.chunks(k).flat_map(|r| r.iter().rev().copied()).collect();
        let mut ev = ConvEvents::default();
        for b in 0..bsz {
            let ob = &mut out[b * c_out * t_len..(b + 1) * c_out * t_len];
            for c in 0..c_in {
                let xrow = &xv[(b * c_in + c) * t_len..(b * c_in + c + 1) * t_len];
                for (t_in, &xval) in xrow.iter().enumerate() {
                    if xval == 0.0 {
                        continue;
                    }
                    ev.input_events += xval;
                    // output t = t_in + pad - kk must land in [0, T)
                    let kk_lo = (t_in + pad + 1).saturating_sub(t_len);
                    let kk_hi = (t_in + pad).min(k - 1);
                    let o_lo = t_in + pad - kk_hi;
                    let n = kk_hi - kk_lo + 1;
                    let m_lo = k - 1 - kk_hi;
                    for j in 0..c_out {
                        let wr = &wrev[(j * c_in + c) * k + m_lo..][..n];
                        let orow = &mut ob[j * t_len + o_lo..][..n];
                        for (o, &wk) in orow.iter_mut().zip(wr) {
                            *o += wk * xval;
                        }
                    }
                    ev.accumulates += xval * (c_out * k) as f64;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || bias.is_some_and(|b| self.rg(b));
        let id = self.push(
            Tensor::new(vec![bsz, c_out, t_len], out)?,
            Op::Conv1d { x, w, bias, pad },
            rg,
        );
        self.nodes[id.0].events = Some(ev);
        Ok(id)
    }

    /// Convolution along the channel axis with a width-1 kernel, treating
    /// each `[C, T]` sample as a one-channel image: `k [k_spat, 1]`.
    pub fn conv2d_spatial(&mut self, x: NodeId, k: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ks = self.value(k).shape().to_vec();
        if xs.len() != 3 || ks.len() != 2 || ks[1] != 1 || ks[0] == 0 {
            return Err(shape_err("conv2d_spatial", &[ks.first().copied().unwrap_or(0), 1], &ks));
        }
        let (bsz, ch, t_len) = (xs[0], xs[1], xs[2]);
        let klen = ks[0];
        let pad = (klen - 1) / 2;
        let xv = self.value(x).data();
        let kv = self.value(k).data();
        let mut out = vec![0.0; bsz * ch * t_len];
        let mut ev = ConvEvents::default();
        for b in 0..bsz {
            let base = b * ch * t_len;
            for c_in in 0..ch {
                let kk_lo = (c_in + pad + 1).saturating_sub(ch);
                let kk_hi = (c_in + pad).min(klen - 1);
                for t in 0..t_len {
                    let xval = xv[base + c_in * t_len + t];
                    if xval == 0.0 {
                        continue;
                    }
                    ev.input_events += xval;
                    for kk in kk_lo..=kk_hi {
                        out[base + (c_in + pad - kk) * t_len + t] += kv[kk] * xval;
                    }
                    ev.accumulates += xval * klen as f64;
                }
            }
        }
        let rg = self.rg(x) || self.rg(k);
        let id = self.push(
            Tensor::new(vec![bsz, ch, t_len], out)?,
            Op::Conv2dSpatial { x, k, pad },
            rg,
        );
        self.nodes[id.0].events = Some(ev);
        Ok(id)
    }

    /// Per-channel normalisation of `x [B, C, T]` over batch and time.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        shift: NodeId,
        stats: BnStats<'_>,
    ) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 {
            return Err(shape_err("batch_norm", &[0, 0, 0], &xs));
        }
        let (bsz, ch, t_len) = (xs[0], xs[1], xs[2]);
        for p in [gamma, shift] {
            if self.value(p).shape() != [ch] {
                return Err(shape_err("batch_norm affine", &[ch], self.value(p).shape()));
            }
        }
        let running_len = match &stats {
            BnStats::Batch(r) => r.mean.len(),
            BnStats::Running(r) => r.mean.len(),
        };
        if running_len != ch {
            return Err(shape_err("batch_norm running stats", &[ch], &[running_len]));
        }
        let n = bsz * t_len;
        if n == 0 {
            return Err(Error::Dimension("batch_norm over empty batch".into()));
        }
        let batch_stats = matches!(stats, BnStats::Batch(_));
        if let BnStats::Running(r) = &stats {
            if r.updates == 0 {
                self.diagnostics.bn_uninitialized += 1;
            }
        }
        let xv = self.value(x).data();
        let mut mean = vec![0.0; ch];
        let mut var = vec![0.0; ch];
        if let BnStats::Batch(running) = stats {
            for c in 0..ch {
                let mut s = 0.0;
                for b in 0..bsz {
                    s += xv[(b * ch + c) * t_len..(b * ch + c + 1) * t_len].iter().sum::<f64>();
                }
                let m = s / n as f64;
                let mut ss = 0.0;
                for b in 0..bsz {
                    for &v in &xv[(b * ch + c) * t_len..(b * ch + c + 1) * t_len] {
                        ss += (v - m) * (v - m);
                    }
                }
                mean[c] = m;
                var[c] = ss / n as f64;
            }
            for c in 0..ch {
                let unbiased = if n > 1 {
                    var[c] * n as f64 / (n - 1) as f64
                } else {
                    var[c]
                };
                running.mean[c] = (1.0 - BN_MOMENTUM) * running.mean[c] + BN_MOMENTUM * mean[c];
                running.var[c] = (1.0 - BN_MOMENTUM) * running.var[c] + BN_MOMENTUM * unbiased;
            }
            running.updates += 1;
        } else if let BnStats::Running(running) = stats {
            mean.copy_from_slice(&running.mean);
            var.copy_from_slice(&running.var);
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gv = self.value(gamma).data();
        let sv = self.value(shift).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for b in 0..bsz {
            for c in 0..ch {
                let off = (b * ch + c) * t_len;
                for t in 0..t_len {
                    let z = (xv[off + t] - mean[c]) * inv_std[c];
                    xhat[off + t] = z;
                    out[off + t] = gv[c] * z + sv[c];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(shift);
        Ok(self.push(
            Tensor::new(xs, out)?,
            Op::BatchNorm {
                x,
                gamma,
                shift,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    /// Runs a neuron population over the time axis of `x [B, C, T]`, each
    /// `(b, c)` sequence starting from the model's initial state.
    ///
    /// `leak` holds logits of the leak `beta` (shape `[1]` shared or `[C]`
    /// per channel); it is only consulted for PLIF dynamics.
    pub fn spiking(
        &mut self,
        x: NodeId,
        dynamics: Dynamics,
        leak: Option<NodeId>,
        surrogate: SurrogateKind,
    ) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 {
            return Err(shape_err("spiking", &[0, 0, 0], &xs));
        }
        let (bsz, ch, t_len) = (xs[0], xs[1], xs[2]);
        let leak = match dynamics {
            Dynamics::Plif(_) => leak,
            _ => None,
        };
        let beta: Vec<f64> = match (&dynamics, leak) {
            (Dynamics::Plif(_), Some(l)) => {
                let lv = self.value(l).data();
                if lv.len() != 1 && lv.len() != ch {
                    return Err(shape_err("spiking leak", &[ch], self.value(l).shape()));
                }
                (0..ch).map(|c| logit_to_beta(lv[c % lv.len()])).collect()
            }
            (Dynamics::Plif(p) | Dynamics::Lif(p), _) => vec![p.beta(); ch],
            _ => vec![0.0; ch],
        };
        let soft = self.spike_mode == SpikeMode::Soft;
        let threshold = dynamics.threshold();
        let reset = dynamics.reset();
        let (u0, aux0) = dynamics.initial();
        let has_aux = dynamics.has_aux();
        let total = bsz * ch * t_len;
        let xv = self.value(x).data();
        let mut trace = SpikeTrace {
            u: vec![0.0; total],
            aux: if has_aux { vec![0.0; total] } else { Vec::new() },
            h: vec![0.0; total],
            o: vec![0.0; total],
            beta: beta.clone(),
        };
        let mut clamped = 0usize;
        for b in 0..bsz {
            for c in 0..ch {
                let off = (b * ch + c) * t_len;
                let mut u = u0;
                let mut aux = aux0;
                for t in 0..t_len {
                    let i = off + t;
                    let chg = dynamics.charge_with_beta(beta[c], u, aux, xv[i]);
                    if !chg.h.is_finite() {
                        return Err(Error::Overflow { step: t });
                    }
                    clamped += usize::from(chg.clamped);
                    let o = if soft {
                        surrogate.primitive(chg.h - threshold)
                    } else if chg.h >= threshold {
                        1.0
                    } else {
                        0.0
                    };
                    trace.u[i] = u;
                    trace.h[i] = chg.h;
                    trace.o[i] = o;
                    if has_aux {
                        trace.aux[i] = aux;
                        aux = dynamics.recovery(u, aux, o).0;
                    }
                    u = if soft {
                        o * reset + (1.0 - o) * chg.h
                    } else if o == 1.0 {
                        reset
                    } else {
                        chg.h
                    };
                }
            }
        }
        self.diagnostics.eif_clamped += clamped;
        let out = Tensor::new(xs, trace.o.clone())?;
        let rg = self.rg(x) || leak.is_some_and(|l| self.rg(l));
        Ok(self.push(
            out,
            Op::Spiking {
                x,
                leak,
                dynamics,
                surrogate,
                trace: Box::new(trace),
            },
            rg,
        ))
    }

    /// Mean over the last axis: `[B, C, T]` → `[B, C]`.
    pub fn avg_pool_time(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 || xs[2] == 0 {
            return Err(shape_err("avg_pool_time", &[0, 0, 1], &xs));
        }
        let t_len = xs[2];
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(t_len)
            .map(|r| r.iter().sum::<f64>() / t_len as f64)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![xs[0], xs[1]], out)?,
            Op::AvgPoolTime { x },
            rg,
        ))
    }

    /// `x [B, d_in]`, `w [d_out, d_in]` → `[B, d_out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] {
            return Err(shape_err("linear", &[0, ws.get(1).copied().unwrap_or(0)], &xs));
        }
        let (bsz, d_in, d_out) = (xs[0], xs[1], ws[0]);
        if let Some(b) = bias {
            if self.value(b).shape() != [d_out] {
                return Err(shape_err("linear bias", &[d_out], self.value(b).shape()));
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = bias.map(|b| self.value(b).data());
        let mut out = vec![0.0; bsz * d_out];
        for b in 0..bsz {
            let xr = &xv[b * d_in..(b + 1) * d_in];
            for o in 0..d_out {
                let wr = &wv[o * d_in..(o + 1) * d_in];
                let mut acc = 0.0;
                for i in 0..d_in {
                    acc += wr[i] * xr[i];
                }
                if let Some(bv) = bv {
                    acc += bv[o];
                }
                out[b * d_out + o] = acc;
            }
        }
        let rg = self.rg(x) || self.rg(w) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(vec![bsz, d_out], out)?,
            Op::Linear { x, w, bias },
            rg,
        ))
    }

    /// Feature-axis concatenation of two `[B, ·]` tensors.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let as_ = self.value(a).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if as_.len() != 2 || bs.len() != 2 || as_[0] != bs[0] {
            return Err(shape_err("concat", &as_, &bs));
        }
        let (bsz, da, db) = (as_[0], as_[1], bs[1]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(bsz * (da + db));
        for r in 0..bsz {
            out.extend_from_slice(&av[r * da..(r + 1) * da]);
            out.extend_from_slice(&bv[r * db..(r + 1) * db]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![bsz, da + db], out)?, Op::Concat { a, b }, rg))
    }

    /// Fixed channel projection `[B, C_in, T]` → `[B, C_out, T]` by averaging
    /// the groups from [`channel_groups`].
    pub fn group_average(&mut self, x: NodeId, c_out: usize) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 || c_out == 0 || xs[1] == 0 {
            return Err(shape_err("group_average", &[0, c_out, 0], &xs));
        }
        let (bsz, c_in, t_len) = (xs[0], xs[1], xs[2]);
        let groups = channel_groups(c_in, c_out);
        let xv = self.value(x).data();
        let mut out = vec![0.0; bsz * c_out * t_len];
        for b in 0..bsz {
            for (j, &(s, e)) in groups.iter().enumerate() {
                let orow = &mut out[(b * c_out + j) * t_len..(b * c_out + j + 1) * t_len];
                for c in s..e {
                    let xr = &xv[(b * c_in + c) * t_len..(b * c_in + c + 1) * t_len];
                    for t in 0..t_len {
                        orow[t] += xr[t];
                    }
                }
                let inv = 1.0 / (e - s) as f64;
                orow.iter_mut().for_each(|v| *v *= inv);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![bsz, c_out, t_len], out)?,
            Op::GroupAverage { x, groups },
            rg,
        ))
    }

    /// Mean softmax cross-entropy over the batch; returns a scalar node.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let ls = self.value(logits).shape().to_vec();
        if ls.len() != 2 || ls[0] != labels.len() || ls[0] == 0 {
            return Err(shape_err("cross_entropy", &[labels.len(), 0], &ls));
        }
        let (bsz, k) = (ls[0], ls[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!("label {bad} >= {k} classes")));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; bsz * k];
        let mut loss = 0.0;
        for b in 0..bsz {
            let row = &lv[b * k..(b + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (i, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                probs[b * k + i] = e;
                z += e;
            }
            for p in &mut probs[b * k..(b + 1) * k] {
                *p /= z;
            }
            loss += -(row[labels[b]] - m - z.ln());
        }
        loss /= bsz as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Scalar `sum(x * weights)`; a convenient probe loss for gradient checks.
    pub fn dot(&mut self, x: NodeId, weights: Tensor) -> Result<NodeId> {
        if self.value(x).shape() != weights.shape() {
            return Err(shape_err("dot", weights.shape(), self.value(x).shape()));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Dot { x, weights }, rg))
    }

    /// Back-propagates from the scalar `loss` and adds parameter gradients
    /// into `store`. Returns every node gradient for inspection.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore) -> Result<Gradients> {
        self.backward_into(loss, &mut [store])
    }

    /// As [`Graph::backward`], routing each parameter gradient to the store
    /// whose tag matches the parameter id.
    pub fn backward_into(&self, loss: NodeId, stores: &mut [&mut ParamStore]) -> Result<Gradients> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::Backward("an empty graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Backward(format!(
                "a non-scalar node of shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.backward_node(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(pid), Some(g)) = (&node.op, &grads[idx]) {
                let store = stores
                    .iter_mut()
                    .find(|s| s.tag() == pid.tag())
                    .ok_or_else(|| {
                        Error::Backward(format!("a graph without store tag {}", pid.tag()))
                    })?;
                store.get_mut(*pid).grad.add_assign(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gv = g.data();
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv1d { x, w, bias, pad } => {
                let xs = self.value(*x).shape();
                let (bsz, c_in, t_len) = (xs[0], xs[1], xs[2]);
                let ws = self.value(*w).shape();
                let (c_out, k) = (ws[0], ws[2]);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if self.rg(*w) {
                    let mut gw = vec![0.0; wv.len()];
                    // output gradients reversed in time so taps read forwards
                    let grev: Vec<f64> =
                        gv.chunks(t_len).flat_map(|r| r.iter().rev().copied()).collect();
                    for b in 0..bsz {
                        let gb = &grev[b * c_out * t_len..(b + 1) * c_out * t_len];
                        for c in 0..c_in {
                            let xrow = &xv[(b * c_in + c) * t_len..(b * c_in + c + 1) * t_len];
                            for (t_in, &xval) in xrow.iter().enumerate() {
                                if xval == 0.0 {
                                    continue;
                                }
                                let kk_lo = (t_in + pad + 1).saturating_sub(t_len);
                                let kk_hi = (t_in + pad).min(k - 1);
                                let n = kk_hi - kk_lo + 1;
                                let m_lo = t_len + kk_lo - 1 - t_in - pad;
                                for j in 0..c_out {
                                    let gr = &gb[j * t_len + m_lo..][..n];
                                    let gwrow = &mut gw[(j * c_in + c) * k + kk_lo..][..n];
                                    for (gwk, &g) in gwrow.iter_mut().zip(gr) {
                                        *gwk += g * xval;
                                    }
                                }
                            }
                        }
                    }
                    accumulate(grads, *w, ws, gw);
                }
                if self.rg(*x) {
                    let mut gx = vec![0.0; xv.len()];
                    for b in 0..bsz {
                        for c in 0..c_in {
                            let gxrow = &mut gx[(b * c_in + c) * t_len..(b * c_in + c + 1) * t_len];
                            for j in 0..c_out {
                                let grow = &gv[(b * c_out + j) * t_len..(b * c_out + j + 1) * t_len];
                                let wrow = &wv[(j * c_in + c) * k..(j * c_in + c + 1) * k];
                                for (t_in, gxv) in gxrow.iter_mut().enumerate() {
                                    let kk_lo = (t_in + pad + 1).saturating_sub(t_len);
                                    let kk_hi = (t_in + pad).min(k - 1);
                                    for kk in kk_lo..=kk_hi {
                                        *gxv += grow[t_in + pad - kk] * wrow[kk];
                                    }
                                }
                            }
                        }
                    }
                    accumulate(grads, *x, xs, gx);
                }
                if let Some(bn) = bias {
                    if self.rg(*bn) {
                        let mut gb = vec![0.0; c_out];
                        for (i, row) in gv.chunks(t_len).enumerate() {
                            gb[i % c_out] += row.iter().sum::<f64>();
                        }
                        accumulate(grads, *bn, &[c_out], gb);
                    }
                }
            }
            Op::Conv2dSpatial { x, k, pad } => {
                let xs = self.value(*x).shape();
                let (bsz, ch, t_len) = (xs[0], xs[1], xs[2]);
                let kv = self.value(*k).data();
                let klen = kv.len();
                let xv = self.value(*x).data();
                if self.rg(*k) {
                    let mut gk = vec![0.0; klen];
                    for b in 0..bsz {
                        let base = b * ch * t_len;
                        for c_in in 0..ch {
                            let kk_lo = (c_in + pad + 1).saturating_sub(ch);
                            let kk_hi = (c_in + pad).min(klen - 1);
                            for t in 0..t_len {
                                let xval = xv[base + c_in * t_len + t];
                                if xval == 0.0 {
                                    continue;
                                }
                                for kk in kk_lo..=kk_hi {
                                    gk[kk] += gv[base + (c_in + pad - kk) * t_len + t] * xval;
                                }
                            }
                        }
                    }
                    accumulate(grads, *k, &[klen, 1], gk);
                }
                if self.rg(*x) {
                    let mut gx = vec![0.0; xv.len()];
                    for b in 0..bsz {
                        let base = b * ch * t_len;
                        for c_in in 0..ch {
                            let kk_lo = (c_in + pad + 1).saturating_sub(ch);
                            let kk_hi = (c_in + pad).min(klen - 1);
                            let gxrow = &mut gx[base + c_in * t_len..base + (c_in + 1) * t_len];
                            for kk in kk_lo..=kk_hi {
                                let src = base + (c_in + pad - kk) * t_len;
                                let grow = &gv[src..src + t_len];
                                for t in 0..t_len {
                                    gxrow[t] += grow[t] * kv[kk];
                                }
                            }
                        }
                    }
                    accumulate(grads, *x, xs, gx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                shift,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let xs = self.value(*x).shape();
                let (bsz, ch, t_len) = (xs[0], xs[1], xs[2]);
                let n = (bsz * t_len) as f64;
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![0.0; ch];
                let mut sum_gx = vec![0.0; ch];
                for b in 0..bsz {
                    for c in 0..ch {
                        let off = (b * ch + c) * t_len;
                        for t in 0..t_len {
                            sum_g[c] += gv[off + t];
                            sum_gx[c] += gv[off + t] * xhat[off + t];
                        }
                    }
                }
                if self.rg(*gamma) {
                    accumulate(grads, *gamma, &[ch], sum_gx.clone());
                }
                if self.rg(*shift) {
                    accumulate(grads, *shift, &[ch], sum_g.clone());
                }
                if self.rg(*x) {
                    let mut gx = vec![0.0; gv.len()];
                    for b in 0..bsz {
                        for c in 0..ch {
                            let off = (b * ch + c) * t_len;
                            let scale = gam[c] * inv_std[c];
                            for t in 0..t_len {
                                let i = off + t;
                                gx[i] = if *batch_stats {
                                    scale * (gv[i] - sum_g[c] / n - xhat[i] * sum_gx[c] / n)
                                } else {
                                    scale * gv[i]
                                };
                            }
                        }
                    }
                    accumulate(grads, *x, xs, gx);
                }
            }
            Op::Spiking {
                x,
                leak,
                dynamics,
                surrogate,
                trace,
            } => {
                let xs = self.value(*x).shape();
                let (bsz, ch, t_len) = (xs[0], xs[1], xs[2]);
                let threshold = dynamics.threshold();
                let reset = dynamics.reset();
                let has_aux = dynamics.has_aux();
                let xv = self.value(*x).data();
                let mut gx = vec![0.0; xv.len()];
                let mut gbeta = vec![0.0; ch];
                for b in 0..bsz {
                    for c in 0..ch {
                        let off = (b * ch + c) * t_len;
                        let beta = trace.beta[c];
                        // gradients flowing into u_{t+1} and aux_{t+1}
                        let mut gu_next = 0.0;
                        let mut ga_next = 0.0;
                        for t in (0..t_len).rev() {
                            let i = off + t;
                            let u = trace.u[i];
                            let aux = if has_aux { trace.aux[i] } else { 0.0 };
                            let h = trace.h[i];
                            let o = trace.o[i];
                            let chg = dynamics.charge_with_beta(beta, u, aux, xv[i]);
                            let s = surrogate.grad(h - threshold);
                            let (_, da_du, da_da, da_do) = dynamics.recovery(u, aux, o);
                            let gh = gv[i] * s
                                + gu_next * ((1.0 - o) + (reset - h) * s)
                                + ga_next * da_do * s;
                            gx[i] = gh * chg.dh_dinput;
                            gbeta[c] += gh * chg.dh_dbeta;
                            let gu = gh * chg.dh_du + ga_next * da_du;
                            let ga = gh * chg.dh_daux + ga_next * da_da;
                            gu_next = gu;
                            ga_next = ga;
                        }
                    }
                }
                if self.rg(*x) {
                    accumulate(grads, *x, xs, gx);
                }
                if let Some(l) = leak {
                    if self.rg(*l) {
                        let lv = self.value(*l).data();
                        let mut gl = vec![0.0; lv.len()];
                        for c in 0..ch {
                            let li = c % lv.len();
                            gl[li] += gbeta[c] * logit_to_beta_grad(lv[li]);
                        }
                        accumulate(grads, *l, self.value(*l).shape(), gl);
                    }
                }
            }
            Op::AvgPoolTime { x } => {
                let xs = self.value(*x).shape();
                let t_len = xs[2];
                let inv = 1.0 / t_len as f64;
                let mut gx = Vec::with_capacity(xs.iter().product());
                for &gval in gv {
                    gx.extend(std::iter::repeat(gval * inv).take(t_len));
                }
                accumulate(grads, *x, xs, gx);
            }
            Op::Linear { x, w, bias } => {
                let xs = self.value(*x).shape();
                let (bsz, d_in) = (xs[0], xs[1]);
                let d_out = self.value(*w).dim(0);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if self.rg(*w) {
                    let mut gw = vec![0.0; wv.len()];
                    for b in 0..bsz {
                        for o in 0..d_out {
                            let gval = gv[b * d_out + o];
                            let gwr = &mut gw[o * d_in..(o + 1) * d_in];
                            for i in 0..d_in {
                                gwr[i] += gval * xv[b * d_in + i];
                            }
                        }
                    }
                    accumulate(grads, *w, &[d_out, d_in], gw);
                }
                if self.rg(*x) {
                    let mut gx = vec![0.0; xv.len()];
                    for b in 0..bsz {
                        for o in 0..d_out {
                            let gval = gv[b * d_out + o];
                            let wr = &wv[o * d_in..(o + 1) * d_in];
                            for i in 0..d_in {
                                gx[b * d_in + i] += gval * wr[i];
                            }
                        }
                    }
                    accumulate(grads, *x, xs, gx);
                }
                if let Some(bn) = bias {
                    if self.rg(*bn) {
                        let mut gb = vec![0.0; d_out];
                        for row in gv.chunks(d_out) {
                            for (a, v) in gb.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        accumulate(grads, *bn, &[d_out], gb);
                    }
                }
            }
            Op::Concat { a, b } => {
                let da = self.value(*a).dim(1);
                let db = self.value(*b).dim(1);
                let bsz = self.value(*a).dim(0);
                if self.rg(*a) {
                    let ga: Vec<f64> = (0..bsz)
                        .flat_map(|r| gv[r * (da + db)..r * (da + db) + da].iter().copied())
                        .collect();
                    accumulate(grads, *a, &[bsz, da], ga);
                }
                if self.rg(*b) {
                    let gb: Vec<f64> = (0..bsz)
                        .flat_map(|r| gv[r * (da + db) + da..(r + 1) * (da + db)].iter().copied())
                        .collect();
                    accumulate(grads, *b, &[bsz, db], gb);
                }
            }
            Op::GroupAverage { x, groups } => {
                let xs = self.value(*x).shape();
                let (bsz, c_in, t_len) = (xs[0], xs[1], xs[2]);
                let c_out = groups.len();
                let mut gx = vec![0.0; bsz * c_in * t_len];
                for b in 0..bsz {
                    for (j, &(s, e)) in groups.iter().enumerate() {
                        let inv = 1.0 / (e - s) as f64;
                        let grow = &gv[(b * c_out + j) * t_len..(b * c_out + j + 1) * t_len];
                        for c in s..e {
                            let gxr = &mut gx[(b * c_in + c) * t_len..(b * c_in + c + 1) * t_len];
                            for t in 0..t_len {
                                gxr[t] += grow[t] * inv;
                            }
                        }
                    }
                }
                accumulate(grads, *x, xs, gx);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let ls = self.value(*logits).shape();
                let (bsz, k) = (ls[0], ls[1]);
                let scale = gv[0] / bsz as f64;
                let mut gl = probs.clone();
                for b in 0..bsz {
                    gl[b * k + labels[b]] -= 1.0;
                }
                gl.iter_mut().for_each(|v| *v *= scale);
                accumulate(grads, *logits, ls, gl);
            }
            Op::Dot { x, weights } => {
                let gx = weights.data().iter().map(|w| w * gv[0]).collect();
                accumulate(grads, *x, weights.shape(), gx);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, shape: &[usize], g: Vec<f64>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), g).expect("gradient shape"));
        }
    }
}

/// Per-node gradients from one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }
}
