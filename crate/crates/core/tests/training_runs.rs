use spikedecode::data::{generate_synthetic, loso_split, SessionSet, SynthConfig};
use spikedecode::fusion::FusionConfig;
use spikedecode::model::SnnConfig;
use spikedecode::training::{
    ablate, evaluate, run_loso, sweep, train, AblationGrid, DecoderConfig, LosoOptions, SweepParam,
    TrainConfig,
};

fn data() -> SessionSet {
    generate_synthetic(&SynthConfig {
        n_sessions: 3,
        trials_per_session: 60,
        channels: 16,
        bins: 20,
        base_rate: 0.3,
        class_contrast: 4.0,
        active_fraction: 0.3,
        seed: 5,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn decoder_cfg(fusion: bool) -> DecoderConfig {
    DecoderConfig {
        snn: SnnConfig {
            k_temp: 5,
            k_spat: 3,
            ..SnnConfig::for_input(16, 20, 3)
        },
        fusion: fusion.then(|| FusionConfig {
            d: 8,
            segments: 5,
            ..FusionConfig::default()
        }),
    }
}

fn train_cfg(max_epochs: usize, patience: usize) -> TrainConfig {
    TrainConfig {
        lr: 1e-2,
        batch_size: 32,
        max_epochs,
        patience,
        seeds: vec![0, 1],
        ..TrainConfig::default()
    }
}

#[test]
fn early_stopping_restores_the_best_epoch() {
    let data = data();
    let split = loso_split(&data, 0, 0.2, 1).unwrap();
    for fusion in [false, true] {
        let mut dec = decoder_cfg(fusion).build(3).unwrap();
        let cfg = train_cfg(12, 3);
        let hist = train(&mut dec, &split.train, &split.val, &cfg, 9).unwrap();
        assert!(hist.stopping_epoch <= cfg.max_epochs);
        assert_eq!(hist.stopping_epoch, hist.epochs.len());
        let best = hist.epochs.iter().map(|e| e.val_accuracy).fold(0.0, f64::max);
        assert_eq!(hist.epochs[hist.best_epoch - 1].val_accuracy, best);
        assert_eq!(evaluate(&dec, &split.val).unwrap(), best);
        if hist.stopping_epoch < cfg.max_epochs {
            assert_eq!(hist.stopping_epoch - hist.best_epoch, cfg.patience);
        }
    }
}

#[test]
fn separable_task_is_learned() {
    let data = data();
    let res = run_loso(&data, &decoder_cfg(false), &train_cfg(15, 15), &LosoOptions::default()).unwrap();
    assert!(res.table.overall >= 90.0, "{}", res.table.to_text());
}

#[test]
fn loso_is_deterministic_and_independent_of_jobs() {
    let data = data();
    let cfg = train_cfg(3, 3);
    let a = run_loso(&data, &decoder_cfg(true), &cfg, &LosoOptions::default()).unwrap();
    let b = run_loso(&data, &decoder_cfg(true), &cfg, &LosoOptions::default()).unwrap();
    assert_eq!(a.to_jsonl(), b.to_jsonl());
    let par = LosoOptions {
        jobs: 3,
        ..LosoOptions::default()
    };
    let c = run_loso(&data, &decoder_cfg(true), &cfg, &par).unwrap();
    assert_eq!(a.to_jsonl(), c.to_jsonl());
    assert_eq!(a.records.len(), 6);
}

#[test]
fn ablation_grid_and_single_value_sweep() {
    let data = data();
    let cfg = TrainConfig {
        seeds: vec![0],
        ..train_cfg(2, 2)
    };
    let opts = LosoOptions::default();
    let grid = AblationGrid::default();
    let results = ablate(&data, &decoder_cfg(false), &cfg, &grid, &opts).unwrap();
    assert_eq!(results.len(), grid.variants(&decoder_cfg(false)).len());

    let base = decoder_cfg(false);
    let plain = run_loso(&data, &base, &cfg, &opts).unwrap();
    let (rows, _) = sweep(&data, &base, &cfg, SweepParam::Ch, &[base.snn.c_h], &opts).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].accuracy, plain.table.overall);
}
