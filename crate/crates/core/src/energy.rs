//! Operation counting and energy estimates.
//!
//! Spike-driven layers cost accumulate (AC) operations proportional to the
//! input firing rate; dense layers cost multiply-accumulates (MAC).
//! Convolution counts assume stride 1 and same padding, and padded taps are
//! counted as executed, so a layer costs `C_in·C_out·T·k` per input event
//! rate unit regardless of where the event falls.

use std::fmt::Write as _;
use std::iter::Sum;
use std::ops::{Add, AddAssign};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SpikeTensor;
use crate::error::{Error, Result};
use crate::fusion::Decoder;
use crate::graph::{Graph, Mode, SpikeMode};
use crate::model::SnnConfig;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct OpCount {
    pub mac: u64,
    pub ac: f64,
}

impl OpCount {
    pub const ZERO: OpCount = OpCount { mac: 0, ac: 0.0 };

    pub fn mac(mac: u64) -> Self {
        Self { mac, ac: 0.0 }
    }

    pub fn ac(ac: f64) -> Self {
        Self { mac: 0, ac }
    }
}

impl Add for OpCount {
    type Output = OpCount;

    fn add(self, rhs: OpCount) -> OpCount {
        OpCount {
            mac: self.mac + rhs.mac,
            ac: self.ac + rhs.ac,
        }
    }
}

impl AddAssign for OpCount {
    fn add_assign(&mut self, rhs: OpCount) {
        *self = *self + rhs;
    }
}

impl Sum for OpCount {
    fn sum<I: Iterator<Item = OpCount>>(iter: I) -> OpCount {
        iter.fold(OpCount::ZERO, Add::add)
    }
}

/// Energy per operation in picojoules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyModel {
    pub e_mac: f64,
    pub e_ac: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        Self {
            e_mac: 4.6,
            e_ac: 0.9,
        }
    }
}

impl EnergyModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.e_mac > 0.0) {
            return Err(Error::config("e_mac", "must be positive"));
        }
        if !(self.e_ac > 0.0) {
            return Err(Error::config("e_ac", "must be positive"));
        }
        Ok(())
    }
}

pub fn count_conv_snn(c_in: usize, c_out: usize, t: usize, k: usize, r: f64) -> OpCount {
    OpCount::ac((c_in * c_out * t * k) as f64 * r)
}

pub fn count_conv_ann(c_in: usize, c_out: usize, t: usize, k: usize) -> OpCount {
    OpCount::mac((c_in * c_out * t * k) as u64)
}

/// One batch-norm or one neuron layer over `C × T` activations.
pub fn count_bn_plif(c: usize, t: usize) -> OpCount {
    OpCount::mac((2 * c * t) as u64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FfCountMode {
    /// Actual projector sizes: `C·b·d + C_h·d`.
    #[default]
    Dims,
    /// The `C·T·d/b + C_h·d` form, equal to `Dims` when `T = b²`.
    Paper,
}

pub fn count_ff(c: usize, t: usize, d: usize, b: usize, c_h: usize, mode: FfCountMode) -> OpCount {
    let nav = match mode {
        FfCountMode::Dims => c * b * d,
        FfCountMode::Paper => c * t * d / b,
    };
    OpCount::mac((nav + c_h * d) as u64)
}

pub fn count_classifier(d_f: usize, n_class: usize) -> OpCount {
    OpCount::mac((d_f * n_class) as u64)
}

/// Picojoules.
pub fn total_energy(counts: OpCount, model: &EnergyModel) -> f64 {
    model.e_mac * counts.mac as f64 + model.e_ac * counts.ac
}

/// One layer of a stack to be counted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    ConvSnn {
        c_in: usize,
        c_out: usize,
        t: usize,
        k: usize,
        r: f64,
    },
    ConvAnn {
        c_in: usize,
        c_out: usize,
        t: usize,
        k: usize,
    },
    Bn {
        c: usize,
        t: usize,
    },
    Plif {
        c: usize,
        t: usize,
    },
    FfProjectors {
        c: usize,
        t: usize,
        d: usize,
        b: usize,
        c_h: usize,
    },
    Classifier {
        d_f: usize,
        n_class: usize,
    },
    /// Precomputed totals, for published baselines.
    Ops {
        mac: u64,
        #[serde(default)]
        ac: f64,
    },
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        let dims: &[usize] = match self {
            LayerSpec::ConvSnn { c_in, c_out, t, k, r } => {
                if !(*r >= 0.0) {
                    return Err(Error::config("r", "firing rate must be non-negative"));
                }
                &[*c_in, *c_out, *t, *k]
            }
            LayerSpec::ConvAnn { c_in, c_out, t, k } => &[*c_in, *c_out, *t, *k],
            LayerSpec::Bn { c, t } | LayerSpec::Plif { c, t } => &[*c, *t],
            LayerSpec::FfProjectors { c, t, b, .. } => {
                if *b == 0 || t % b != 0 {
                    return Err(Error::config("b", "must divide t"));
                }
                &[*c, *t]
            }
            LayerSpec::Classifier { d_f, n_class } => &[*d_f, *n_class],
            LayerSpec::Ops { ac, .. } => {
                if !(*ac >= 0.0) {
                    return Err(Error::config("ac", "must be non-negative"));
                }
                &[]
            }
        };
        if dims.contains(&0) {
            return Err(Error::config("dims", "layer dimensions must be positive"));
        }
        Ok(())
    }

    pub fn count(&self, ff_mode: FfCountMode) -> OpCount {
        match *self {
            LayerSpec::ConvSnn { c_in, c_out, t, k, r } => count_conv_snn(c_in, c_out, t, k, r),
            LayerSpec::ConvAnn { c_in, c_out, t, k } => count_conv_ann(c_in, c_out, t, k),
            LayerSpec::Bn { c, t } | LayerSpec::Plif { c, t } => count_bn_plif(c, t),
            LayerSpec::FfProjectors { c, t, d, b, c_h } => count_ff(c, t, d, b, c_h, ff_mode),
            LayerSpec::Classifier { d_f, n_class } => count_classifier(d_f, n_class),
            LayerSpec::Ops { mac, ac } => OpCount { mac, ac },
        }
    }
}

pub fn count_stack(layers: &[LayerSpec], ff_mode: FfCountMode) -> OpCount {
    layers.iter().map(|l| l.count(ff_mode)).sum()
}

/// A named layer stack, typically an external baseline description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    #[serde(default)]
    pub params: Option<u64>,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn count(&self, ff_mode: FfCountMode) -> OpCount {
        count_stack(&self.layers, ff_mode)
    }
}

/// Reads a JSON array of [`ModelSpec`] objects.
pub fn load_model_specs(path: impl AsRef<Path>) -> Result<Vec<ModelSpec>> {
    let text = std::fs::read_to_string(path)?;
    let specs: Vec<ModelSpec> =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("layer spec file: {e}")))?;
    for s in &specs {
        for l in &s.layers {
            l.validate()?;
        }
    }
    Ok(specs)
}

/// The decoder's layer stack with measured firing rates `r_tc`, `r_sc` of
/// the inputs to the two spike-driven convolutions.
pub fn snn_layers(decoder: &Decoder, r_tc: f64, r_sc: f64, ff_mode: FfCountMode) -> Vec<LayerSpec> {
    stack(decoder, Some((r_tc, r_sc)), ff_mode)
}

/// A non-spiking network with the same convolution and classifier
/// dimensions: every layer runs as MACs and there are no neuron layers.
pub fn ann_equivalent_layers(decoder: &Decoder, ff_mode: FfCountMode) -> Vec<LayerSpec> {
    stack(decoder, None, ff_mode)
}

fn stack(decoder: &Decoder, rates: Option<(f64, f64)>, ff_mode: FfCountMode) -> Vec<LayerSpec> {
    let cfg: &SnnConfig = decoder.model.config();
    let (c_in, c_h, t) = (cfg.c_in, cfg.c_h, cfg.bins);
    let mut layers = Vec::new();
    if cfg.enable_tc {
        layers.push(match rates {
            Some((r, _)) => LayerSpec::ConvSnn { c_in, c_out: c_h, t, k: cfg.k_temp, r },
            None => LayerSpec::ConvAnn { c_in, c_out: c_h, t, k: cfg.k_temp },
        });
        layers.push(LayerSpec::Bn { c: c_h, t });
        if rates.is_some() {
            layers.push(LayerSpec::Plif { c: c_h, t });
        }
    }
    if cfg.enable_sc {
        let t_sc = c_h * t;
        layers.push(match rates {
            Some((_, r)) => LayerSpec::ConvSnn { c_in: 1, c_out: 1, t: t_sc, k: cfg.k_spat, r },
            None => LayerSpec::ConvAnn { c_in: 1, c_out: 1, t: t_sc, k: cfg.k_spat },
        });
        layers.push(LayerSpec::Bn { c: c_h, t });
        if rates.is_some() {
            layers.push(LayerSpec::Plif { c: c_h, t });
        }
    }
    match &decoder.head {
        None => layers.push(LayerSpec::Classifier { d_f: c_h, n_class: cfg.n_classes }),
        Some(head) => {
            let fc = head.config();
            let (d, b) = (fc.d, fc.segments);
            if fc.enable_pdf && fc.enable_pnav {
                layers.push(LayerSpec::FfProjectors { c: c_in, t, d, b, c_h });
            } else if fc.enable_pdf {
                layers.push(LayerSpec::Ops { mac: (c_h * d) as u64, ac: 0.0 });
            } else if fc.enable_pnav {
                let full = count_ff(c_in, t, d, b, c_h, ff_mode).mac - (c_h * d) as u64;
                layers.push(LayerSpec::Ops { mac: full, ac: 0.0 });
            }
            layers.push(LayerSpec::Classifier {
                d_f: head.fused_width(),
                n_class: cfg.n_classes,
            });
        }
    }
    layers
}

/// Per-trial means from [`profile_model`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyProfile {
    pub trials: usize,
    /// Mean firing rate of the temporal-convolution input.
    pub r_tc: f64,
    /// Mean firing rate of the spatial-convolution input.
    pub r_sc: f64,
    /// Formula counts with per-trial measured rates.
    pub analytic: OpCount,
    /// Same MAC terms, AC replaced by the accumulates the forward pass ran.
    pub instrumented: OpCount,
    pub energy_pj: f64,
    pub instrumented_energy_pj: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct TrialProfile {
    r_tc: f64,
    r_sc: f64,
    analytic: OpCount,
    instrumented: OpCount,
}

fn profile_trial(decoder: &Decoder, x: &SpikeTensor, ff_mode: FfCountMode) -> Result<TrialProfile> {
    let cfg = decoder.model.config();
    let mut g = Graph::new(SpikeMode::Hard);
    let (nodes, _) = decoder.build(&mut g, &[x], Mode::Eval, false)?;
    let inst = decoder.model.instrumentation(&g, &nodes.model, 1);
    let r_tc = inst.tc.map_or(0.0, |l| l.input_rate());
    let r_sc = inst.sc.map_or(0.0, |l| l.input_rate());
    let analytic = count_stack(&snn_layers(decoder, r_tc, r_sc, ff_mode), ff_mode);
    let measured_ac = inst.tc.map_or(0.0, |l| l.accumulates) + inst.sc.map_or(0.0, |l| l.accumulates);
    debug_assert_eq!(cfg.enable_tc, inst.tc.is_some());
    Ok(TrialProfile {
        r_tc,
        r_sc,
        analytic,
        instrumented: OpCount {
            mac: analytic.mac,
            ac: measured_ac,
        },
    })
}

/// Mean per-trial operation counts and energy over `trials`, each trial
/// costed with its own measured layer-input firing rates.
pub fn profile_model(
    decoder: &Decoder,
    trials: &[&SpikeTensor],
    energy: &EnergyModel,
    ff_mode: FfCountMode,
) -> Result<EnergyProfile> {
    if trials.is_empty() {
        return Err(Error::InvalidArgument("no trials to profile".into()));
    }
    let per: Vec<TrialProfile> = trials
        .par_iter()
        .map(|x| profile_trial(decoder, x, ff_mode))
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let mean = |f: &dyn Fn(&TrialProfile) -> f64| per.iter().map(f).sum::<f64>() / n;
    let mac = per[0].analytic.mac;
    let analytic = OpCount {
        mac,
        ac: mean(&|p| p.analytic.ac),
    };
    let instrumented = OpCount {
        mac,
        ac: mean(&|p| p.instrumented.ac),
    };
    Ok(EnergyProfile {
        trials: per.len(),
        r_tc: mean(&|p| p.r_tc),
        r_sc: mean(&|p| p.r_sc),
        analytic,
        instrumented,
        energy_pj: mean(&|p| total_energy(p.analytic, energy)),
        instrumented_energy_pj: mean(&|p| total_energy(p.instrumented, energy)),
    })
}

/// A row of the energy comparison table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyRow {
    pub model: String,
    pub params: Option<u64>,
    pub counts: OpCount,
    pub energy_pj: f64,
}

impl EnergyRow {
    pub fn new(model: impl Into<String>, params: Option<u64>, counts: OpCount, energy: &EnergyModel) -> Self {
        Self {
            model: model.into(),
            params,
            counts,
            energy_pj: total_energy(counts, energy),
        }
    }
}

/// Plain-text and CSV renderings; the ratio column divides each row's energy
/// by the energy of `rows[reference]`.
pub fn format_energy_table(rows: &[EnergyRow], reference: usize) -> (String, String) {
    let base = rows.get(reference).map_or(f64::NAN, |r| r.energy_pj);
    let ratio = |r: &EnergyRow| if base > 0.0 { r.energy_pj / base } else { f64::NAN };
    let params = |r: &EnergyRow| r.params.map_or("-".to_string(), |p| p.to_string());
    let mut text = format!(
        "{:<24} {:>10} {:>12} {:>14} {:>12} {:>10}\n",
        "model", "params", "MAC (M)", "AC (M)", "energy (uJ)", "ratio"
    );
    let mut csv = String::from("model,params,mac,ac,energy_uj,ratio\n");
    for r in rows {
        let _ = writeln!(
            text,
            "{:<24} {:>10} {:>12.4} {:>14.6} {:>12.4} {:>10.2}",
            r.model,
            params(r),
            r.counts.mac as f64 / 1e6,
            r.counts.ac / 1e6,
            r.energy_pj / 1e6,
            ratio(r)
        );
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.model,
            params(r),
            r.counts.mac,
            r.counts.ac,
            r.energy_pj / 1e6,
            ratio(r)
        );
    }
    (text, csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_counts() {
        assert_eq!(count_conv_snn(2, 3, 10, 4, 0.5).ac, 120.0);
        assert_eq!(count_conv_snn(2, 3, 10, 4, 0.0).ac, 0.0);
        assert_eq!(count_conv_ann(2, 3, 10, 4).mac, 240);
        assert_eq!(count_conv_ann(1, 1, 37, 1).mac, 37);
    }

    #[test]
    fn bn_ff_and_classifier_counts() {
        assert_eq!(count_bn_plif(1, 1).mac, 2);
        assert_eq!(count_bn_plif(40, 100).mac, 8000);
        assert_eq!(count_ff(66, 100, 128, 10, 33, FfCountMode::Dims).mac, 88_704);
        assert_eq!(
            count_ff(66, 100, 128, 10, 33, FfCountMode::Paper),
            count_ff(66, 100, 128, 10, 33, FfCountMode::Dims)
        );
        assert_eq!(count_ff(66, 100, 0, 10, 33, FfCountMode::Dims).mac, 0);
        assert_eq!(count_classifier(40, 3).mac, 120);
        assert_eq!(count_classifier(17, 1).mac, 17);
        assert_eq!(count_classifier(0, 3).mac, 0);
    }

    #[test]
    fn energy_totals() {
        let e = EnergyModel::default();
        assert_eq!(total_energy(OpCount::ZERO, &e), 0.0);
        let both = total_energy(OpCount { mac: 1_000_000, ac: 1e6 }, &e);
        assert!((both - 5.5e6).abs() < 1e-6);
        let shallow = total_energy(OpCount::mac(16_160_000), &e) / 1e6;
        assert!((shallow - 74.3).abs() / 74.3 < 0.01);
    }

    #[test]
    fn layer_spec_json_round_trip() {
        let spec = ModelSpec {
            name: "net".into(),
            params: Some(10),
            layers: vec![
                LayerSpec::ConvAnn { c_in: 2, c_out: 3, t: 10, k: 4 },
                LayerSpec::Bn { c: 3, t: 10 },
                LayerSpec::Ops { mac: 5, ac: 0.0 },
            ],
        };
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("\"kind\":\"conv_ann\""));
        let back: ModelSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
        assert_eq!(back.count(FfCountMode::Dims).mac, 240 + 60 + 5);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(LayerSpec::ConvSnn { c_in: 1, c_out: 1, t: 1, k: 1, r: -0.1 }.validate().is_err());
        assert!(LayerSpec::Bn { c: 0, t: 3 }.validate().is_err());
        assert!(LayerSpec::FfProjectors { c: 1, t: 10, d: 1, b: 3, c_h: 1 }.validate().is_err());
    }

    #[test]
    fn table_has_ratio_column() {
        let e = EnergyModel::default();
        let rows = vec![
            EnergyRow::new("snn", Some(1), OpCount::ac(1e6), &e),
            EnergyRow::new("ann", None, OpCount::mac(1_000_000), &e),
        ];
        let (text, csv) = format_energy_table(&rows, 0);
        assert!(text.lines().nth(2).unwrap().trim_end().ends_with("5.11"));
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(2).unwrap().starts_with("ann,-,1000000,0,"));
    }
}
