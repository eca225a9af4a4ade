use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikedecode::data::{generate_synthetic, SpikeTensor, SynthConfig};
use spikedecode::energy::{
    ann_equivalent_layers, count_conv_snn, count_stack, profile_model, snn_layers, total_energy,
    EnergyModel, FfCountMode, OpCount,
};
use spikedecode::fusion::FusionConfig;
use spikedecode::model::{SnnConfig, SnnModel};
use spikedecode::neurons::NeuronKind;
use spikedecode::training::DecoderConfig;

fn random_trial(rng: &mut ChaCha8Rng, c: usize, t: usize, p: f64) -> SpikeTensor {
    let counts = (0..c * t).map(|_| if rng.gen_bool(p) { rng.gen_range(1..3) } else { 0 }).collect();
    SpikeTensor::new(c, t, counts).unwrap()
}

#[test]
fn analytic_counts_equal_instrumented_events() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let energy = EnergyModel::default();
    let mut fired = 0;
    for case in 0..50u64 {
        let c_in = rng.gen_range(2..12);
        let t = 10 * rng.gen_range(1..5);
        let mut snn = SnnConfig::for_input(c_in, t, rng.gen_range(2..5));
        snn.c_h = rng.gen_range(1..10);
        snn.k_temp = rng.gen_range(1..12);
        snn.k_spat = rng.gen_range(1..8);
        snn.v_th = rng.gen_range(0.05..0.5);
        snn.neuron = [NeuronKind::Plif, NeuronKind::Lif][case as usize % 2];
        snn.enable_tc = case % 7 != 3;
        snn.enable_sc = case % 5 != 2;
        snn.per_channel_tau = case % 3 == 0;
        let fusion = (case % 4 == 0).then(|| FusionConfig {
            d: rng.gen_range(1..16),
            segments: 10,
            ..FusionConfig::default()
        });
        let cfg = DecoderConfig { snn, fusion };
        let dec = cfg.build(case).unwrap();
        let p = rng.gen_range(0.05..0.5);
        let x = random_trial(&mut rng, c_in, t, p);
        let prof = profile_model(&dec, &[&x], &energy, FfCountMode::Dims).unwrap();

        assert_eq!(prof.analytic.mac, prof.instrumented.mac);
        // the formula goes through the rate r, the counter through events
        let analytic = prof.analytic.ac;
        assert!((analytic - prof.instrumented.ac).abs() <= 1e-12 * analytic.max(1.0), "case {case}");
        if cfg.snn.enable_tc || c_in == cfg.snn.c_h {
            // binary spikes and integer counts: whole accumulate counts
            assert_eq!(prof.instrumented.ac.fract(), 0.0);
            assert_eq!(analytic.round(), prof.instrumented.ac, "case {case}");
        }

        let (_, inst) = dec.model.forward_instrumented(&[&x]).unwrap();
        if let Some(tc) = inst.tc {
            assert_eq!(tc.input_events, x.total() as f64);
            let expect = count_conv_snn(c_in, cfg.snn.c_h, t, cfg.snn.k_temp, tc.input_rate());
            assert!((expect.ac - tc.accumulates).abs() <= 1e-9 * expect.ac.max(1.0));
        }
        if let Some(sc) = inst.sc {
            fired += usize::from(sc.input_events > 0.0);
        }
    }
    assert!(fired > 10, "only {fired} configs produced spatial-layer input");
}

#[test]
fn shallow_convnet_reference_energy() {
    let e = total_energy(OpCount::mac(16_160_000), &EnergyModel::default());
    let uj = e / 1e6;
    assert!((uj - 74.3).abs() / 74.3 < 0.01, "{uj}");
    assert!((uj - 73.88).abs() / 73.88 < 0.03);
    let both = total_energy(OpCount { mac: 1_000_000, ac: 1e6 }, &EnergyModel::default());
    assert!((both - 5.5e6).abs() < 1e-6);
}

#[test]
fn silent_data_costs_no_accumulates() {
    let dec = DecoderConfig {
        snn: SnnConfig::for_input(8, 20, 3),
        fusion: None,
    }
    .build(0)
    .unwrap();
    let x = SpikeTensor::zeros(8, 20);
    let prof = profile_model(&dec, &[&x, &x], &EnergyModel::default(), FfCountMode::Dims).unwrap();
    assert_eq!(prof.analytic.ac, 0.0);
    assert_eq!(prof.instrumented.ac, 0.0);
    assert!(prof.analytic.mac > 0);
}

#[test]
fn energy_monotone_in_hidden_channels_at_fixed_rates() {
    let mut last = 0.0;
    for c_h in [1, 2, 4, 8, 16, 33, 64] {
        let model = SnnModel::new(
            SnnConfig {
                c_h,
                ..SnnConfig::for_input(66, 100, 3)
            },
            0,
        )
        .unwrap();
        let dec = spikedecode::fusion::Decoder::new(model, None);
        let e = total_energy(
            count_stack(&snn_layers(&dec, 0.1, 0.1, FfCountMode::Dims), FfCountMode::Dims),
            &EnergyModel::default(),
        );
        assert!(e >= last, "c_h {c_h}: {e} < {last}");
        last = e;
    }
}

#[test]
fn more_input_spikes_cost_more_energy() {
    let dec = DecoderConfig {
        snn: SnnConfig::for_input(66, 100, 3),
        fusion: None,
    }
    .build(3)
    .unwrap();
    let mut energies = Vec::new();
    for contrast in [1.0, 2.0, 4.0] {
        let data = generate_synthetic(&SynthConfig {
            n_sessions: 1,
            trials_per_session: 30,
            class_contrast: contrast,
            ..SynthConfig::default()
        })
        .unwrap();
        let trials: Vec<&SpikeTensor> = data.trials().map(|t| &t.spikes).collect();
        let prof = profile_model(&dec, &trials, &EnergyModel::default(), FfCountMode::Dims).unwrap();
        energies.push(prof.energy_pj);
    }
    assert!(energies[0] < energies[1] && energies[1] < energies[2], "{energies:?}");
}

#[test]
fn spiking_network_is_cheaper_than_same_size_ann() {
    let dec = DecoderConfig {
        snn: SnnConfig::for_input(66, 100, 3),
        fusion: None,
    }
    .build(0)
    .unwrap();
    let data = generate_synthetic(&SynthConfig {
        n_sessions: 1,
        trials_per_session: 20,
        ..SynthConfig::default()
    })
    .unwrap();
    let trials: Vec<&SpikeTensor> = data.trials().map(|t| &t.spikes).collect();
    let energy = EnergyModel::default();
    let prof = profile_model(&dec, &trials, &energy, FfCountMode::Dims).unwrap();
    let ann = total_energy(count_stack(&ann_equivalent_layers(&dec, FfCountMode::Dims), FfCountMode::Dims), &energy);
    assert!(ann > prof.energy_pj);
}
