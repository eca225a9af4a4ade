//! Flat key-value settings shared by the config file and the command line.
//! Every key is optional; command-line values win over file values, which
//! win over library defaults.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::Deserialize;
use spikedecode::data::SynthConfig;
use spikedecode::energy::{EnergyModel, FfCountMode};
use spikedecode::fusion::FusionConfig;
use spikedecode::model::SnnConfig;
use spikedecode::neurons::{NeuronKind, SurrogateKind, SurrogateVariant};
use spikedecode::training::{DecoderConfig, TrainConfig};
use spikedecode::{Error, Result};

macro_rules! settings {
    ($($(#[$doc:meta])* $field:ident: $ty:ty,)*) => {
        #[derive(Debug, Clone, Default, Args, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct Settings {
            $(
                $(#[$doc])*
                #[arg(long)]
                #[serde(default)]
                pub $field: Option<$ty>,
            )*
        }

        impl Settings {
            /// Fields set in `over` replace those in `self`.
            pub fn overlay(self, over: Settings) -> Settings {
                Settings { $($field: over.$field.or(self.$field),)* }
            }
        }
    };
}

settings! {
    /// TOML file with any of these keys (flags override it)
    config: PathBuf,
    /// Output directory
    out_dir: PathBuf,
    /// Worker threads for independent runs
    jobs: usize,
    /// Progress messages on stderr
    verbose: bool,

    n_sessions: usize,
    trials_per_session: usize,
    channels: usize,
    bins: usize,
    n_classes: usize,
    base_rate: f64,
    class_contrast: f64,
    active_fraction: f64,
    session_drift: f64,
    /// Data-generation seed
    seed: u64,

    c_h: usize,
    k_temp: usize,
    k_spat: usize,
    v_th: f64,
    u_reset: f64,
    beta_init: f64,
    /// sigmoid or arctan
    surrogate: String,
    surrogate_alpha: f64,
    /// plif, lif, qif, eif or izhikevich
    neuron: String,
    enable_tc: bool,
    enable_sc: bool,
    per_channel_tau: bool,
    conv_bias: bool,
    classifier_bias: bool,

    lr: f64,
    batch_size: usize,
    max_epochs: usize,
    patience: usize,
    val_fraction: f64,
    /// Comma-separated training seeds
    #[arg(value_delimiter = ',')]
    seeds: Vec<u64>,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_eps: f64,

    /// Attach the activity-vector fusion head
    fusion: bool,
    d: usize,
    segments: usize,
    enable_pdf: bool,
    enable_pnav: bool,

    e_mac: f64,
    e_ac: f64,
    /// dims or paper
    ff_count: String,
}

pub fn load_file(path: &Path) -> Result<Settings> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))
}

/// File settings (if `flags.config` names one) overlaid by the flags.
pub fn resolve(flags: Settings) -> Result<Settings> {
    match &flags.config {
        Some(path) => Ok(load_file(path)?.overlay(flags)),
        None => Ok(flags),
    }
}

impl Settings {
    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn jobs(&self) -> usize {
        self.jobs.unwrap_or(1)
    }

    pub fn verbose(&self) -> bool {
        self.verbose.unwrap_or(false)
    }

    pub fn synth(&self) -> Result<SynthConfig> {
        let d = SynthConfig::default();
        let cfg = SynthConfig {
            n_sessions: self.n_sessions.unwrap_or(d.n_sessions),
            trials_per_session: self.trials_per_session.unwrap_or(d.trials_per_session),
            channels: self.channels.unwrap_or(d.channels),
            bins: self.bins.unwrap_or(d.bins),
            n_classes: self.n_classes.unwrap_or(d.n_classes),
            base_rate: self.base_rate.unwrap_or(d.base_rate),
            class_contrast: self.class_contrast.unwrap_or(d.class_contrast),
            active_fraction: self.active_fraction.unwrap_or(d.active_fraction),
            session_drift: self.session_drift.unwrap_or(d.session_drift),
            seed: self.seed.unwrap_or(d.seed),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Model settings for data of shape `c_in × bins` with `n_classes`.
    pub fn snn(&self, c_in: usize, bins: usize, n_classes: usize) -> Result<SnnConfig> {
        let d = SnnConfig::for_input(c_in, bins, n_classes);
        let variant = match self.surrogate.as_deref() {
            None => d.surrogate.variant,
            Some(s) if s.eq_ignore_ascii_case("sigmoid") => SurrogateVariant::Sigmoid,
            Some(s) if s.eq_ignore_ascii_case("arctan") => SurrogateVariant::Arctan,
            Some(s) => return Err(Error::config("surrogate", format!("unknown surrogate {s:?}"))),
        };
        let neuron = match self.neuron.as_deref() {
            None => d.neuron,
            Some(s) => NeuronKind::parse(s)
                .ok_or_else(|| Error::config("neuron", format!("unknown neuron {s:?}")))?,
        };
        let cfg = SnnConfig {
            c_h: self.c_h.unwrap_or(d.c_h),
            k_temp: self.k_temp.unwrap_or(d.k_temp),
            k_spat: self.k_spat.unwrap_or(d.k_spat),
            v_th: self.v_th.unwrap_or(d.v_th),
            u_reset: self.u_reset.unwrap_or(d.u_reset),
            beta_init: self.beta_init.unwrap_or(d.beta_init),
            surrogate: SurrogateKind {
                variant,
                alpha: self.surrogate_alpha.unwrap_or(d.surrogate.alpha),
            },
            neuron,
            enable_tc: self.enable_tc.unwrap_or(d.enable_tc),
            enable_sc: self.enable_sc.unwrap_or(d.enable_sc),
            per_channel_tau: self.per_channel_tau.unwrap_or(d.per_channel_tau),
            conv_bias: self.conv_bias.unwrap_or(d.conv_bias),
            classifier_bias: self.classifier_bias.unwrap_or(d.classifier_bias),
            ..d
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn fusion_config(&self) -> FusionConfig {
        let d = FusionConfig::default();
        FusionConfig {
            d: self.d.unwrap_or(d.d),
            segments: self.segments.unwrap_or(d.segments),
            enable_pdf: self.enable_pdf.unwrap_or(d.enable_pdf),
            enable_pnav: self.enable_pnav.unwrap_or(d.enable_pnav),
        }
    }

    pub fn decoder(&self, c_in: usize, bins: usize, n_classes: usize) -> Result<DecoderConfig> {
        let cfg = DecoderConfig {
            snn: self.snn(c_in, bins, n_classes)?,
            fusion: self.fusion.unwrap_or(false).then(|| self.fusion_config()),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            lr: self.lr.unwrap_or(d.lr),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            max_epochs: self.max_epochs.unwrap_or(d.max_epochs),
            patience: self.patience.unwrap_or(d.patience),
            val_fraction: self.val_fraction.unwrap_or(d.val_fraction),
            seeds: self.seeds.clone().unwrap_or(d.seeds),
            adam_beta1: self.adam_beta1.unwrap_or(d.adam_beta1),
            adam_beta2: self.adam_beta2.unwrap_or(d.adam_beta2),
            adam_eps: self.adam_eps.unwrap_or(d.adam_eps),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn energy(&self) -> Result<EnergyModel> {
        let d = EnergyModel::default();
        let cfg = EnergyModel {
            e_mac: self.e_mac.unwrap_or(d.e_mac),
            e_ac: self.e_ac.unwrap_or(d.e_ac),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn ff_count(&self) -> Result<FfCountMode> {
        match self.ff_count.as_deref() {
            None => Ok(FfCountMode::Dims),
            Some(s) if s.eq_ignore_ascii_case("dims") => Ok(FfCountMode::Dims),
            Some(s) if s.eq_ignore_ascii_case("paper") => Ok(FfCountMode::Paper),
            Some(s) => Err(Error::config("ff_count", format!("unknown mode {s:?}"))),
        }
    }
}
