//! Adam training with early stopping, the leave-one-session-out driver and
//! the ablation, sweep and significance helpers built on it.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{loso_split, SessionSet, SpikeTensor, Trial};
use crate::energy::{profile_model, EnergyModel, FfCountMode};
use crate::error::{Error, Result};
use crate::fusion::{Decoder, FusionConfig, FusionHead};
use crate::graph::{Graph, Mode, SpikeMode};
use crate::model::{argmax_rows, SnnConfig, SnnModel};
use crate::neurons::NeuronKind;
use crate::tensor::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub seeds: Vec<u64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 256,
            max_epochs: 800,
            patience: 100,
            val_fraction: 0.2,
            seeds: vec![0, 1, 2, 3, 4],
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs", "must be positive"));
        }
        if self.patience > self.max_epochs {
            return Err(Error::config("patience", "must not exceed max_epochs"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::config("val_fraction", "must lie in (0, 1)"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::config("adam_beta", "must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("adam_eps", "must be positive"));
        }
        Ok(())
    }
}

/// Adam with bias correction; moment buffers are keyed by store tag and
/// parameter order.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    moments: Vec<(u32, Vec<Vec<f64>>, Vec<Vec<f64>>)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            moments: Vec::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    }

    pub fn step(&mut self, stores: &mut [&mut ParamStore]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for store in stores.iter_mut() {
            let tag = store.tag();
            let pos = match self.moments.iter().position(|(t, ..)| *t == tag) {
                Some(p) => p,
                None => {
                    let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
                    self.moments.push((tag, zeros.clone(), zeros));
                    self.moments.len() - 1
                }
            };
            let (_, ms, vs) = &mut self.moments[pos];
            for ((p, m), v) in store.iter_mut().zip(ms.iter_mut()).zip(vs.iter_mut()) {
                let g = p.grad.data();
                let w = p.value.data_mut();
                for i in 0..w.len() {
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                    let mh = m[i] / c1;
                    let vh = v[i] / c2;
                    w[i] -= self.lr * mh / (vh.sqrt() + self.eps);
                }
            }
        }
    }
}

/// Model and optional fusion head settings; enough to rebuild a decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub snn: SnnConfig,
    pub fusion: Option<FusionConfig>,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        self.snn.validate()?;
        if let Some(f) = &self.fusion {
            f.validate(self.snn.bins)?;
        }
        Ok(())
    }

    pub fn build(&self, seed: u64) -> Result<Decoder> {
        let model = SnnModel::new(self.snn.clone(), seed)?;
        let head = match &self.fusion {
            Some(f) => Some(FusionHead::new(
                *f,
                self.snn.feature_width(),
                self.snn.c_in,
                self.snn.n_classes,
                mix(seed, 0x4845_4144),
            )?),
            None => None,
        };
        Ok(Decoder::new(model, head))
    }
}

/// SplitMix64 finaliser over `a + golden·(b+1)`.
fn mix(a: u64, b: u64) -> u64 {
    let mut z = a.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(b.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were restored (1-based).
    pub best_epoch: usize,
    pub stopping_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: String,
    pub session: usize,
    pub session_id: u32,
    pub seed: u64,
    pub history: TrainHistory,
    pub test_accuracy: f64,
    /// Mean per-trial energy on the test session, picojoules.
    pub energy_pj: f64,
    #[serde(skip)]
    pub wall_time_s: f64,
}

fn labels(trials: &[&Trial]) -> Vec<usize> {
    trials.iter().map(|t| t.label).collect()
}

fn spikes<'a>(trials: &[&'a Trial]) -> Vec<&'a SpikeTensor> {
    trials.iter().map(|t| &t.spikes).collect()
}

/// Eval-mode accuracy and mean cross-entropy.
pub fn evaluate_with_loss(decoder: &Decoder, trials: &[&Trial], batch_size: usize) -> Result<(f64, f64)> {
    if trials.is_empty() {
        return Err(Error::InvalidArgument("no trials to evaluate".into()));
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    for chunk in trials.chunks(batch_size.max(1)) {
        let mut g = Graph::new(SpikeMode::Hard);
        let (nodes, _) = decoder.build(&mut g, &spikes(chunk), Mode::Eval, false)?;
        let y = labels(chunk);
        let l = g.cross_entropy(nodes.logits, &y)?;
        loss += g.value(l).data()[0] * chunk.len() as f64;
        let pred = argmax_rows(g.value(nodes.logits));
        correct += pred.iter().zip(&y).filter(|(p, y)| p == y).count();
    }
    let n = trials.len() as f64;
    Ok((correct as f64 / n, loss / n))
}

pub fn evaluate(decoder: &Decoder, trials: &[&Trial]) -> Result<f64> {
    Ok(evaluate_with_loss(decoder, trials, 256)?.0)
}

/// Predicted class per trial.
pub fn predict(decoder: &Decoder, trials: &[&SpikeTensor]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(trials.len());
    for chunk in trials.chunks(256) {
        out.extend(argmax_rows(&decoder.logits(chunk)?));
    }
    Ok(out)
}

/// Minimises cross-entropy with Adam, keeping the decoder state of the best
/// validation epoch (accuracy, then lower loss). The NAV scaler, if any, is
/// fitted on `train` first.
pub fn train(
    decoder: &mut Decoder,
    train: &[&Trial],
    val: &[&Trial],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument("empty train or validation partition".into()));
    }
    decoder.fit_scaler(&spikes(train))?;
    let mut adam = Adam::from_config(cfg);
    let mut order: Vec<&Trial> = train.to_vec();
    let mut best = decoder.clone();
    let mut best_key = (f64::NEG_INFINITY, f64::INFINITY);
    let mut best_epoch = 0;
    let mut epochs = Vec::new();
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut g = Graph::new(SpikeMode::Hard);
            let (nodes, update) = decoder.build(&mut g, &spikes(batch), Mode::Train, false)?;
            let loss = g.cross_entropy(nodes.logits, &labels(batch))?;
            let lv = g.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("non-finite training loss {lv}"),
                });
            }
            total += lv * batch.len() as f64;
            let mut stores = decoder.stores_mut();
            stores.iter_mut().for_each(|s| s.zero_grad());
            g.backward_into(loss, &mut stores)?;
            adam.step(&mut stores);
            if let Some(u) = update {
                decoder.model.commit_stats(u);
            }
        }
        let (acc, vloss) = evaluate_with_loss(decoder, val, cfg.batch_size)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss: total / order.len() as f64,
            val_accuracy: acc,
            val_loss: vloss,
        });
        if acc > best_key.0 || (acc == best_key.0 && vloss < best_key.1) {
            best_key = (acc, vloss);
            best_epoch = epoch;
            best = decoder.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let stopping_epoch = epochs.len();
    *decoder = best;
    Ok(TrainHistory {
        epochs,
        best_epoch,
        stopping_epoch,
    })
}

/// Mean ± sample standard deviation of test accuracy (percent) per session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session: usize,
    pub session_id: u32,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentTable {
    pub variant: String,
    pub sessions: Vec<SessionSummary>,
    /// Mean of the per-session means.
    pub overall: f64,
    pub energy_pj: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let s = if xs.len() > 1 {
        (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (m, s)
}

impl ExperimentTable {
    pub fn from_records(variant: impl Into<String>, records: &[RunRecord]) -> Self {
        let mut sessions: Vec<SessionSummary> = Vec::new();
        for r in records {
            match sessions.iter_mut().find(|s| s.session == r.session) {
                Some(s) => s.accuracies.push(100.0 * r.test_accuracy),
                None => sessions.push(SessionSummary {
                    session: r.session,
                    session_id: r.session_id,
                    accuracies: vec![100.0 * r.test_accuracy],
                    mean: 0.0,
                    std: 0.0,
                }),
            }
        }
        for s in &mut sessions {
            (s.mean, s.std) = mean_std(&s.accuracies);
        }
        let means: Vec<f64> = sessions.iter().map(|s| s.mean).collect();
        let energies: Vec<f64> = records.iter().map(|r| r.energy_pj).collect();
        Self {
            variant: variant.into(),
            sessions,
            overall: if means.is_empty() { 0.0 } else { mean_std(&means).0 },
            energy_pj: if energies.is_empty() { 0.0 } else { mean_std(&energies).0 },
        }
    }

    /// Mean accuracy (percent) of each seed across sessions, in seed order.
    pub fn per_seed_means(&self) -> Vec<f64> {
        let n = self.sessions.first().map_or(0, |s| s.accuracies.len());
        (0..n)
            .map(|i| mean_std(&self.sessions.iter().map(|s| s.accuracies[i]).collect::<Vec<_>>()).0)
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n{:<10} {:>18}\n", self.variant, "session", "accuracy (%)");
        for s in &self.sessions {
            let _ = writeln!(out, "{:<10} {:>9.2} ± {:<6.2}", s.session_id, s.mean, s.std);
        }
        let _ = writeln!(out, "{:<10} {:>9.2}", "average", self.overall);
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,session,mean,std\n");
        for s in &self.sessions {
            let _ = writeln!(out, "{},{},{},{}", self.variant, s.session_id, s.mean, s.std);
        }
        let _ = writeln!(out, "{},average,{},", self.variant, self.overall);
        out
    }
}

/// Called after every finished run with its record and trained decoder.
pub type RunHook<'a> = &'a (dyn Fn(&RunRecord, &Decoder) -> Result<()> + Sync);

#[derive(Clone, Copy)]
pub struct LosoOptions<'a> {
    /// Worker threads for independent runs.
    pub jobs: usize,
    pub energy: EnergyModel,
    pub ff_mode: FfCountMode,
    pub on_run: Option<RunHook<'a>>,
    /// Restrict to these test sessions (all when `None`).
    pub sessions: Option<&'a [usize]>,
}

impl Default for LosoOptions<'_> {
    fn default() -> Self {
        Self {
            jobs: 1,
            energy: EnergyModel::default(),
            ff_mode: FfCountMode::Dims,
            on_run: None,
            sessions: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LosoResult {
    pub records: Vec<RunRecord>,
    pub table: ExperimentTable,
}

impl LosoResult {
    /// One JSON object per run.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialise"));
            out.push('\n');
        }
        out
    }
}

fn run_one(
    data: &SessionSet,
    variant: &str,
    session: usize,
    seed: u64,
    dcfg: &DecoderConfig,
    tcfg: &TrainConfig,
    opts: &LosoOptions<'_>,
) -> Result<RunRecord> {
    let start = Instant::now();
    let split = loso_split(data, session, tcfg.val_fraction, mix(seed, session as u64))?;
    let mut decoder = dcfg.build(seed)?;
    let history = train(&mut decoder, &split.train, &split.val, tcfg, mix(seed ^ 0x5348_5546, session as u64))?;
    let test_accuracy = evaluate(&decoder, &split.test)?;
    let energy = profile_model(&decoder, &spikes(&split.test), &opts.energy, opts.ff_mode)?;
    let record = RunRecord {
        variant: variant.to_string(),
        session,
        session_id: data.sessions()[session].id,
        seed,
        history,
        test_accuracy,
        energy_pj: energy.energy_pj,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    if let Some(hook) = opts.on_run {
        hook(&record, &decoder)?;
    }
    Ok(record)
}

/// Leave-one-session-out over every (test session, seed) pair.
pub fn run_loso(
    data: &SessionSet,
    dcfg: &DecoderConfig,
    tcfg: &TrainConfig,
    opts: &LosoOptions<'_>,
) -> Result<LosoResult> {
    run_loso_named(data, "snn", dcfg, tcfg, opts)
}

pub fn run_loso_named(
    data: &SessionSet,
    variant: &str,
    dcfg: &DecoderConfig,
    tcfg: &TrainConfig,
    opts: &LosoOptions<'_>,
) -> Result<LosoResult> {
    dcfg.validate()?;
    tcfg.validate()?;
    if data.sessions().len() < 2 {
        return Err(Error::InvalidArgument("leave-one-session-out needs at least 2 sessions".into()));
    }
    if (data.channels(), data.bins(), data.n_classes()) != (dcfg.snn.c_in, dcfg.snn.bins, dcfg.snn.n_classes) {
        return Err(Error::Shape {
            op: "dataset vs model",
            expected: vec![dcfg.snn.c_in, dcfg.snn.bins, dcfg.snn.n_classes],
            actual: vec![data.channels(), data.bins(), data.n_classes()],
        });
    }
    let sessions: Vec<usize> = match opts.sessions {
        Some(s) => {
            if let Some(&bad) = s.iter().find(|&&i| i >= data.sessions().len()) {
                return Err(Error::InvalidArgument(format!("session index {bad} out of range")));
            }
            s.to_vec()
        }
        None => (0..data.sessions().len()).collect(),
    };
    let jobs: Vec<(usize, u64)> = sessions
        .iter()
        .flat_map(|&s| tcfg.seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let go = || {
        jobs.par_iter()
            .map(|&(s, seed)| run_one(data, variant, s, seed, dcfg, tcfg, opts))
            .collect::<Result<Vec<_>>>()
    };
    let records = if opts.jobs <= 1 {
        jobs.iter()
            .map(|&(s, seed)| run_one(data, variant, s, seed, dcfg, tcfg, opts))
            .collect::<Result<Vec<_>>>()?
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(go)?
    };
    let table = ExperimentTable::from_records(variant, &records);
    Ok(LosoResult { records, table })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Blocks {
    Full,
    NoTc,
    NoSc,
}

impl Blocks {
    pub fn name(&self) -> &'static str {
        match self {
            Blocks::Full => "full",
            Blocks::NoTc => "no-tc",
            Blocks::NoSc => "no-sc",
        }
    }
}

/// Fusion setting of an ablation variant: off, or on with the two
/// projector switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionVariant {
    Off,
    On { pdf: bool, pnav: bool },
}

impl FusionVariant {
    pub fn name(&self) -> String {
        match self {
            FusionVariant::Off => "ff-off".into(),
            FusionVariant::On { pdf, pnav } => format!(
                "ff-on(pdf={},pnav={})",
                if *pdf { "on" } else { "off" },
                if *pnav { "on" } else { "off" }
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub blocks: Vec<Blocks>,
    pub neurons: Vec<NeuronKind>,
    pub fusion: Vec<FusionVariant>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self {
            blocks: vec![Blocks::Full, Blocks::NoTc, Blocks::NoSc],
            neurons: NeuronKind::ALL.to_vec(),
            fusion: vec![
                FusionVariant::Off,
                FusionVariant::On { pdf: true, pnav: true },
                FusionVariant::On { pdf: true, pnav: false },
                FusionVariant::On { pdf: false, pnav: true },
                FusionVariant::On { pdf: false, pnav: false },
            ],
        }
    }
}

impl AblationGrid {
    /// Full PLIF model with fusion, over the four projector settings.
    pub fn projector_study() -> Self {
        Self {
            blocks: vec![Blocks::Full],
            neurons: vec![NeuronKind::Plif],
            fusion: vec![
                FusionVariant::On { pdf: true, pnav: true },
                FusionVariant::On { pdf: true, pnav: false },
                FusionVariant::On { pdf: false, pnav: true },
                FusionVariant::On { pdf: false, pnav: false },
            ],
        }
    }

    pub fn variants(&self, base: &DecoderConfig) -> Vec<(String, DecoderConfig)> {
        let mut out = Vec::new();
        for &b in &self.blocks {
            for &n in &self.neurons {
                for &f in &self.fusion {
                    let mut cfg = base.clone();
                    cfg.snn.enable_tc = b != Blocks::NoTc;
                    cfg.snn.enable_sc = b != Blocks::NoSc;
                    cfg.snn.neuron = n;
                    cfg.fusion = match f {
                        FusionVariant::Off => None,
                        FusionVariant::On { pdf, pnav } => Some(FusionConfig {
                            enable_pdf: pdf,
                            enable_pnav: pnav,
                            ..base.fusion.unwrap_or_default()
                        }),
                    };
                    out.push((format!("{}/{}/{}", b.name(), n.name(), f.name()), cfg));
                }
            }
        }
        out
    }
}

/// One LOSO experiment per grid variant, in grid order.
pub fn ablate(
    data: &SessionSet,
    base: &DecoderConfig,
    tcfg: &TrainConfig,
    grid: &AblationGrid,
    opts: &LosoOptions<'_>,
) -> Result<Vec<LosoResult>> {
    grid.variants(base)
        .iter()
        .map(|(name, cfg)| run_loso_named(data, name, cfg, tcfg, opts))
        .collect()
}

/// Joined summary of several experiments.
pub fn comparison_table(results: &[LosoResult]) -> (String, String) {
    let mut text = format!("{:<40} {:>10} {:>10} {:>12}\n", "variant", "mean (%)", "std (%)", "energy (uJ)");
    let mut csv = String::from("variant,mean,std,energy_uj\n");
    for r in results {
        let (_, sd) = mean_std(&r.table.per_seed_means());
        let _ = writeln!(
            text,
            "{:<40} {:>10.2} {:>10.2} {:>12.4}",
            r.table.variant,
            r.table.overall,
            sd,
            r.table.energy_pj / 1e6
        );
        let _ = writeln!(csv, "{},{},{},{}", r.table.variant, r.table.overall, sd, r.table.energy_pj / 1e6);
    }
    (text, csv)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    /// Hidden channel count of the network.
    Ch,
    /// Projector width of the fusion head.
    D,
}

impl SweepParam {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ch" | "c_h" => Some(SweepParam::Ch),
            "d" => Some(SweepParam::D),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: usize,
    pub accuracy: f64,
    pub std: f64,
    pub energy_pj: f64,
}

pub fn sweep(
    data: &SessionSet,
    base: &DecoderConfig,
    tcfg: &TrainConfig,
    param: SweepParam,
    values: &[usize],
    opts: &LosoOptions<'_>,
) -> Result<(Vec<SweepRow>, Vec<LosoResult>)> {
    if values.is_empty() {
        return Err(Error::config("values", "sweep needs at least one value"));
    }
    let mut rows = Vec::new();
    let mut results = Vec::new();
    for &v in values {
        let mut cfg = base.clone();
        let name = match param {
            SweepParam::Ch => {
                cfg.snn.c_h = v;
                format!("c_h={v}")
            }
            SweepParam::D => {
                cfg.fusion = Some(FusionConfig {
                    d: v,
                    ..base.fusion.unwrap_or_default()
                });
                format!("d={v}")
            }
        };
        let res = run_loso_named(data, &name, &cfg, tcfg, opts)?;
        let (_, sd) = mean_std(&res.table.per_seed_means());
        rows.push(SweepRow {
            value: v,
            accuracy: res.table.overall,
            std: sd,
            energy_pj: res.table.energy_pj,
        });
        results.push(res);
    }
    Ok((rows, results))
}

pub fn format_sweep(param: SweepParam, rows: &[SweepRow]) -> (String, String) {
    let p = match param {
        SweepParam::Ch => "c_h",
        SweepParam::D => "d",
    };
    let mut text = format!("{:<8} {:>10} {:>10} {:>12}\n", p, "mean (%)", "std (%)", "energy (uJ)");
    let mut csv = format!("{p},mean,std,energy_uj\n");
    for r in rows {
        let _ = writeln!(text, "{:<8} {:>10.2} {:>10.2} {:>12.4}", r.value, r.accuracy, r.std, r.energy_pj / 1e6);
        let _ = writeln!(csv, "{},{},{},{}", r.value, r.accuracy, r.std, r.energy_pj / 1e6);
    }
    (text, csv)
}

/// Two-sided paired t-test p-value.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "paired samples need equal lengths >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (m, sd) = mean_std(&diffs);
    if !(sd > 0.0) {
        return Err(Error::Degenerate("paired differences have zero variance".into()));
    }
    let n = diffs.len() as f64;
    let t = m / (sd / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::Degenerate(e.to_string()))?;
    Ok((2.0 * dist.sf(t.abs())).min(1.0))
}
