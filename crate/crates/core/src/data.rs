//! Spike-count containers, the synthetic recording generator, leave-one-session-out
//! splitting and the `SPKD` session-set file format.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};

pub const SESSION_FILE_MAGIC: &[u8; 4] = b"SPKD";
pub const SESSION_FILE_VERSION: u32 = 1;

/// Spike counts for one trial, stored channel-major (`counts[c * bins + t]`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpikeTensor {
    channels: usize,
    bins: usize,
    counts: Vec<u16>,
}

impl SpikeTensor {
    pub fn new(channels: usize, bins: usize, counts: Vec<u16>) -> Result<Self> {
        if channels * bins != counts.len() {
            return Err(Error::Dimension(format!(
                "{} counts do not fill a {channels}x{bins} tensor",
                counts.len()
            )));
        }
        Ok(Self {
            channels,
            bins,
            counts,
        })
    }

    pub fn zeros(channels: usize, bins: usize) -> Self {
        Self {
            channels,
            bins,
            counts: vec![0; channels * bins],
        }
    }

    pub fn from_rows(rows: &[Vec<u16>]) -> Result<Self> {
        let bins = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != bins) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(rows.len(), bins, rows.concat())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn counts(&self) -> &[u16] {
        &self.counts
    }

    pub fn get(&self, channel: usize, bin: usize) -> u16 {
        self.counts[channel * self.bins + bin]
    }

    pub fn row(&self, channel: usize) -> &[u16] {
        &self.counts[channel * self.bins..(channel + 1) * self.bins]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| u64::from(c)).sum()
    }

    /// Sums non-overlapping windows of `factor` bins. Window sums saturate at
    /// `u16::MAX`.
    pub fn downsample(&self, factor: usize) -> Result<SpikeTensor> {
        if factor == 0 || self.bins % factor != 0 {
            return Err(Error::Dimension(format!(
                "downsample factor {factor} does not divide {} bins",
                self.bins
            )));
        }
        let out_bins = self.bins / factor;
        let mut counts = Vec::with_capacity(self.channels * out_bins);
        for c in 0..self.channels {
            for window in self.row(c).chunks_exact(factor) {
                let s: u32 = window.iter().map(|&v| u32::from(v)).sum();
                counts.push(s.min(u32::from(u16::MAX)) as u16);
            }
        }
        SpikeTensor::new(self.channels, out_bins, counts)
    }

    /// Mean spike events per channel-bin; exceeds 1 only for count-valued inputs.
    pub fn firing_rate(&self) -> f64 {
        if self.counts.is_empty() {
            return 0.0;
        }
        self.total() as f64 / self.counts.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub spikes: SpikeTensor,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub id: u32,
    pub trials: Vec<Trial>,
}

/// Labeled trials grouped by recording session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionSet {
    channels: usize,
    bins: usize,
    n_classes: usize,
    sessions: Vec<Session>,
}

impl SessionSet {
    pub fn new(
        channels: usize,
        bins: usize,
        n_classes: usize,
        sessions: Vec<Session>,
    ) -> Result<Self> {
        if n_classes == 0 {
            return Err(Error::Dimension("session set needs at least one class".into()));
        }
        let mut seen = vec![false; n_classes];
        for s in &sessions {
            for (i, trial) in s.trials.iter().enumerate() {
                if trial.spikes.channels() != channels || trial.spikes.bins() != bins {
                    return Err(Error::Dimension(format!(
                        "session {} trial {i} is {}x{}, expected {channels}x{bins}",
                        s.id,
                        trial.spikes.channels(),
                        trial.spikes.bins()
                    )));
                }
                if trial.label >= n_classes {
                    return Err(Error::Dimension(format!(
                        "session {} trial {i} label {} >= {n_classes} classes",
                        s.id, trial.label
                    )));
                }
                seen[trial.label] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Dimension(format!(
                "class {missing} has no trials"
            )));
        }
        Ok(Self {
            channels,
            bins,
            n_classes,
            sessions,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn sessions(&self) -> &[Session] {
        &self.sessions
    }

    pub fn n_trials(&self) -> usize {
        self.sessions.iter().map(|s| s.trials.len()).sum()
    }

    pub fn trials(&self) -> impl Iterator<Item = &Trial> {
        self.sessions.iter().flat_map(|s| s.trials.iter())
    }

    pub fn mean_firing_rate(&self) -> f64 {
        let n = self.n_trials();
        if n == 0 {
            return 0.0;
        }
        self.trials().map(|t| t.spikes.firing_rate()).sum::<f64>() / n as f64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(SESSION_FILE_MAGIC);
        w.u32(SESSION_FILE_VERSION);
        w.u32(self.channels as u32);
        w.u32(self.bins as u32);
        w.u32(self.n_classes as u32);
        w.u32(self.sessions.len() as u32);
        for s in &self.sessions {
            w.u32(s.id);
            w.u32(s.trials.len() as u32);
            for t in &s.trials {
                w.u16(t.label as u16);
                for &c in t.spikes.counts() {
                    w.u16(c);
                }
            }
        }
        w.finish_with_crc()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(4)?;
        if magic != SESSION_FILE_MAGIC {
            return Err(Error::Format(format!(
                "bad magic {magic:?}, expected \"SPKD\""
            )));
        }
        let version = r.u32()?;
        if version != SESSION_FILE_VERSION {
            return Err(Error::Format(format!(
                "unsupported session-set version {version}"
            )));
        }
        let channels = r.u32()? as usize;
        let bins = r.u32()? as usize;
        let n_classes = r.u32()? as usize;
        let n_sessions = r.u32()? as usize;
        let cells = channels * bins;
        let mut sessions = Vec::with_capacity(n_sessions.min(1 << 16));
        for _ in 0..n_sessions {
            let id = r.u32()?;
            let n_trials = r.u32()? as usize;
            let trial_bytes = 2 + 2 * cells;
            if r.remaining() < n_trials.saturating_mul(trial_bytes) {
                return Err(Error::Truncated {
                    offset: r.position(),
                    needed: n_trials * trial_bytes - r.remaining(),
                });
            }
            let mut trials = Vec::with_capacity(n_trials);
            for _ in 0..n_trials {
                let label = r.u16()? as usize;
                let counts = (0..cells).map(|_| r.u16()).collect::<Result<Vec<_>>>()?;
                trials.push(Trial {
                    spikes: SpikeTensor::new(channels, bins, counts)?,
                    label,
                });
            }
            sessions.push(Session { id, trials });
        }
        r.verify_trailing_crc()?;
        SessionSet::new(channels, bins, n_classes, sessions)
            .map_err(|e| Error::Format(format!("invalid session set: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

/// Free-function forms of the session-set codec.
pub fn save_session_set(data: &SessionSet, path: impl AsRef<Path>) -> Result<()> {
    data.save(path)
}

pub fn load_session_set(path: impl AsRef<Path>) -> Result<SessionSet> {
    SessionSet::load(path)
}

pub fn downsample(raw: &SpikeTensor, factor: usize) -> Result<SpikeTensor> {
    raw.downsample(factor)
}

pub fn firing_rate(x: &SpikeTensor) -> f64 {
    x.firing_rate()
}

/// Parameters of the Poisson stand-in for recorded sessions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_sessions: usize,
    pub trials_per_session: usize,
    pub channels: usize,
    pub bins: usize,
    pub n_classes: usize,
    /// Expected spikes per bin on an unmodulated channel.
    pub base_rate: f64,
    /// Rate multiplier on a class's active channel block.
    pub class_contrast: f64,
    pub active_fraction: f64,
    /// Std of the per-(session, channel) log-rate perturbation.
    pub session_drift: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_sessions: 6,
            trials_per_session: 300,
            channels: 66,
            bins: 100,
            n_classes: 3,
            base_rate: 0.1,
            class_contrast: 2.0,
            active_fraction: 0.2,
            session_drift: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_sessions", self.n_sessions),
            ("trials_per_session", self.trials_per_session),
            ("channels", self.channels),
            ("bins", self.bins),
            ("n_classes", self.n_classes),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if self.trials_per_session * self.n_sessions < self.n_classes {
            return Err(Error::config(
                "trials_per_session",
                "too few trials to cover every class",
            ));
        }
        if !(self.base_rate >= 0.0 && self.base_rate.is_finite()) {
            return Err(Error::config("base_rate", "must be finite and >= 0"));
        }
        if !(self.class_contrast >= 0.0 && self.class_contrast.is_finite()) {
            return Err(Error::config("class_contrast", "must be finite and >= 0"));
        }
        if !(self.active_fraction > 0.0 && self.active_fraction <= 1.0) {
            return Err(Error::config("active_fraction", "must lie in (0, 1]"));
        }
        if !(self.session_drift >= 0.0 && self.session_drift.is_finite()) {
            return Err(Error::config("session_drift", "must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn active_channels(&self) -> usize {
        ((self.active_fraction * self.channels as f64).ceil() as usize).clamp(1, self.channels)
    }

    /// Channels whose rate is scaled by `class_contrast` for `class`: a
    /// contiguous block, disjoint across classes while they fit and wrapping
    /// cyclically otherwise.
    pub fn active_block(&self, class: usize) -> Vec<usize> {
        let n = self.active_channels();
        (0..n).map(|i| (class * n + i) % self.channels).collect()
    }
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SessionSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut modulation = vec![vec![1.0f64; cfg.channels]; cfg.n_classes];
    for (class, row) in modulation.iter_mut().enumerate() {
        for c in cfg.active_block(class) {
            row[c] = cfg.class_contrast;
        }
    }

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let drift: Vec<Vec<f64>> = (0..cfg.n_sessions)
        .map(|_| {
            (0..cfg.channels)
                .map(|_| (cfg.session_drift * normal.sample(&mut rng)).exp())
                .collect()
        })
        .collect();

    let mut sessions = Vec::with_capacity(cfg.n_sessions);
    for (s, session_drift) in drift.iter().enumerate() {
        let mut trials = Vec::with_capacity(cfg.trials_per_session);
        for i in 0..cfg.trials_per_session {
            let label = i % cfg.n_classes;
            let mut counts = Vec::with_capacity(cfg.channels * cfg.bins);
            for c in 0..cfg.channels {
                let rate = (cfg.base_rate * modulation[label][c] * session_drift[c]).max(0.0);
                if rate > 0.0 {
                    let poisson = Poisson::new(rate).map_err(|e| {
                        Error::InvalidArgument(format!("poisson rate {rate}: {e}"))
                    })?;
                    for _ in 0..cfg.bins {
                        let draw: f64 = poisson.sample(&mut rng);
                        counts.push(draw.min(f64::from(u16::MAX)) as u16);
                    }
                } else {
                    counts.extend(std::iter::repeat(0).take(cfg.bins));
                }
            }
            trials.push(Trial {
                spikes: SpikeTensor::new(cfg.channels, cfg.bins, counts)?,
                label,
            });
        }
        sessions.push(Session {
            id: s as u32,
            trials,
        });
    }
    SessionSet::new(cfg.channels, cfg.bins, cfg.n_classes, sessions)
}

/// Train / validation / test partitions borrowed from a [`SessionSet`].
#[derive(Debug, Clone)]
pub struct LosoSplit<'a> {
    pub train: Vec<&'a Trial>,
    pub val: Vec<&'a Trial>,
    pub test: Vec<&'a Trial>,
}

pub fn loso_split(
    data: &SessionSet,
    test_session: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<LosoSplit<'_>> {
    if test_session >= data.sessions.len() {
        return Err(Error::InvalidArgument(format!(
            "test session {test_session} out of range ({} sessions)",
            data.sessions.len()
        )));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "val_fraction {val_fraction} outside (0, 1)"
        )));
    }
    let test: Vec<&Trial> = data.sessions[test_session].trials.iter().collect();
    let mut rest: Vec<&Trial> = data
        .sessions
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != test_session)
        .flat_map(|(_, s)| s.trials.iter())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rest.shuffle(&mut rng);
    let n_val = (rest.len() as f64 * val_fraction).round() as usize;
    let val = rest.split_off(rest.len() - n_val);
    Ok(LosoSplit {
        train: rest,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            n_sessions: 3,
            trials_per_session: 12,
            channels: 8,
            bins: 20,
            n_classes: 3,
            base_rate: 0.3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn downsample_zero_and_ones() {
        let z = SpikeTensor::zeros(1, 12_000).downsample(120).unwrap();
        assert_eq!((z.channels(), z.bins()), (1, 100));
        assert!(z.counts().iter().all(|&c| c == 0));

        let ones = SpikeTensor::new(1, 240, vec![1; 240]).unwrap();
        assert_eq!(ones.downsample(120).unwrap().counts(), &[120, 120]);
    }

    #[test]
    fn downsample_single_spike_lands_in_first_bin() {
        let mut counts = vec![0u16; 12_000];
        counts[119] = 1;
        let d = SpikeTensor::new(1, 12_000, counts).unwrap().downsample(120).unwrap();
        assert_eq!(d.get(0, 0), 1);
        assert_eq!(d.total(), 1);
    }

    #[test]
    fn downsample_rejects_non_divisor() {
        let x = SpikeTensor::zeros(2, 100);
        assert!(matches!(x.downsample(7), Err(Error::Dimension(_))));
        assert!(matches!(x.downsample(0), Err(Error::Dimension(_))));
    }

    #[test]
    fn firing_rate_examples() {
        assert_eq!(SpikeTensor::zeros(3, 7).firing_rate(), 0.0);
        assert_eq!(SpikeTensor::new(4, 5, vec![1; 20]).unwrap().firing_rate(), 1.0);
        let x = SpikeTensor::from_rows(&[vec![1, 0], vec![0, 1]]).unwrap();
        assert_eq!(x.firing_rate(), 0.5);
    }

    #[test]
    fn zero_rate_gives_silent_trials() {
        let cfg = SynthConfig {
            base_rate: 0.0,
            ..small_cfg()
        };
        let data = generate_synthetic(&cfg).unwrap();
        assert!(data.trials().all(|t| t.spikes.total() == 0));
    }

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let a = generate_synthetic(&small_cfg()).unwrap();
        let b = generate_synthetic(&small_cfg()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_bytes(), b.to_bytes());
        for s in a.sessions() {
            let mut per_class = [0usize; 3];
            for t in &s.trials {
                per_class[t.label] += 1;
            }
            assert_eq!(per_class, [4, 4, 4]);
        }
        let c = generate_synthetic(&SynthConfig {
            seed: 1,
            ..small_cfg()
        })
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn active_blocks_are_disjoint_when_they_fit() {
        let cfg = SynthConfig::default();
        assert_eq!(cfg.active_channels(), 14);
        assert_eq!(cfg.active_block(1), (14..28).collect::<Vec<_>>());
        let crowded = SynthConfig {
            channels: 10,
            active_fraction: 0.5,
            ..SynthConfig::default()
        };
        assert_eq!(crowded.active_block(2), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn contrast_raises_active_block_rate() {
        let cfg = SynthConfig {
            trials_per_session: 90,
            session_drift: 0.0,
            class_contrast: 4.0,
            ..small_cfg()
        };
        let data = generate_synthetic(&cfg).unwrap();
        let block: Vec<usize> = cfg.active_block(0);
        let mut on = 0u64;
        let mut off = 0u64;
        for t in data.trials() {
            let s: u64 = block
                .iter()
                .map(|&c| t.spikes.row(c).iter().map(|&v| u64::from(v)).sum::<u64>())
                .sum();
            if t.label == 0 {
                on += s;
            } else {
                off += s;
            }
        }
        // class 0 trials are a third of the set; off covers the other two thirds
        assert!(on as f64 > 1.5 * (off as f64 / 2.0));
    }

    #[test]
    fn invalid_config_names_field() {
        let err = generate_synthetic(&SynthConfig {
            n_sessions: 0,
            ..small_cfg()
        })
        .unwrap_err();
        assert!(err.to_string().contains("n_sessions"));
    }

    #[test]
    fn loso_split_partitions() {
        let cfg = SynthConfig {
            n_sessions: 14,
            trials_per_session: 10,
            ..small_cfg()
        };
        let data = generate_synthetic(&cfg).unwrap();
        let split = loso_split(&data, 0, 0.2, 3).unwrap();
        assert_eq!(split.test.len(), 10);
        assert!(split
            .test
            .iter()
            .zip(&data.sessions()[0].trials)
            .all(|(a, b)| std::ptr::eq(*a, b)));
        assert_eq!(split.train.len() + split.val.len(), 130);
        assert_eq!(split.val.len(), 26);
        let again = loso_split(&data, 0, 0.2, 3).unwrap();
        assert!(split
            .train
            .iter()
            .zip(&again.train)
            .all(|(a, b)| std::ptr::eq(*a, *b)));
    }

    #[test]
    fn loso_split_eight_two_ratio() {
        let cfg = SynthConfig {
            n_sessions: 2,
            trials_per_session: 1000,
            channels: 2,
            bins: 4,
            ..SynthConfig::default()
        };
        let data = generate_synthetic(&cfg).unwrap();
        let split = loso_split(&data, 1, 0.2, 0).unwrap();
        assert_eq!((split.train.len(), split.val.len()), (800, 200));
    }

    #[test]
    fn loso_split_errors() {
        let data = generate_synthetic(&small_cfg()).unwrap();
        assert!(loso_split(&data, 3, 0.2, 0).is_err());
        assert!(loso_split(&data, 0, 0.0, 0).is_err());
        assert!(loso_split(&data, 0, 1.0, 0).is_err());
    }

    #[test]
    fn file_errors_are_distinct() {
        let data = generate_synthetic(&small_cfg()).unwrap();
        let bytes = data.to_bytes();
        assert_eq!(SessionSet::from_bytes(&bytes).unwrap(), data);

        assert!(matches!(
            SessionSet::from_bytes(&[]),
            Err(Error::Truncated { .. })
        ));

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            SessionSet::from_bytes(&bad_magic),
            Err(Error::Format(_))
        ));

        assert!(matches!(
            SessionSet::from_bytes(&bytes[..bytes.len() - 10]),
            Err(Error::Truncated { .. })
        ));

        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 0x01;
        assert!(matches!(
            SessionSet::from_bytes(&flipped),
            Err(Error::Checksum { .. })
        ));
    }

    #[test]
    fn session_set_rejects_missing_class() {
        let t = Trial {
            spikes: SpikeTensor::zeros(2, 3),
            label: 0,
        };
        let err = SessionSet::new(2, 3, 2, vec![Session { id: 0, trials: vec![t] }]);
        assert!(err.is_err());
    }
}
