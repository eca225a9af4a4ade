//! Layer outputs against straightforward reference computations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikedecode::data::SpikeTensor;
use spikedecode::fusion::{extract_nav, FusionConfig, FusionHead};
use spikedecode::graph::{BnStats, Graph, RunningStats, SpikeMode};
use spikedecode::neurons::{
    plif_step, plif_unroll_closed_form, simulate, Dynamics, NeuronState, PlifParams,
};
use spikedecode::tensor::Tensor;

fn naive_conv1d(x: &Tensor, w: &Tensor, bias: &[f64]) -> Vec<f64> {
    let (b, c_in, t) = (x.dim(0), x.dim(1), x.dim(2));
    let (c_out, k) = (w.dim(0), w.dim(2));
    let pad = (k - 1) / 2;
    let mut out = vec![0.0; b * c_out * t];
    for bi in 0..b {
        for o in 0..c_out {
            for tt in 0..t {
                let mut acc = bias[o];
                for c in 0..c_in {
                    for kk in 0..k {
                        let src = tt as isize + kk as isize - pad as isize;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        let xv = x.data()[(bi * c_in + c) * t + src as usize];
                        if xv != 0.0 {
                            acc += w.data()[(o * c_in + c) * k + kk] * xv;
                        }
                    }
                }
                out[(bi * c_out + o) * t + tt] = acc;
            }
        }
    }
    out
}

fn naive_conv2d_spatial(x: &Tensor, kern: &[f64]) -> Vec<f64> {
    let (b, ch, t) = (x.dim(0), x.dim(1), x.dim(2));
    let pad = (kern.len() - 1) / 2;
    let mut out = vec![0.0; b * ch * t];
    for bi in 0..b {
        for row in 0..ch {
            for tt in 0..t {
                let mut acc = 0.0;
                for (kk, &kv) in kern.iter().enumerate() {
                    let src = row as isize + kk as isize - pad as isize;
                    if src < 0 || src >= ch as isize {
                        continue;
                    }
                    let xv = x.data()[(bi * ch + src as usize) * t + tt];
                    if xv != 0.0 {
                        acc += kv * xv;
                    }
                }
                out[(bi * ch + row) * t + tt] = acc;
            }
        }
    }
    out
}

/// Spike-count style input: mostly zeros, small integer counts.
fn sparse(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        if rng.gen_bool(0.6) {
            0.0
        } else {
            f64::from(rng.gen_range(1..4u8))
        }
    })
}

#[test]
fn conv1d_matches_nested_loops_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..100 {
        let b = rng.gen_range(1..=2);
        let c_in = rng.gen_range(1..=8);
        let c_out = rng.gen_range(1..=8);
        let t = rng.gen_range(1..=16);
        let k = rng.gen_range(1..=16);
        let x = if case % 2 == 0 {
            sparse(&mut rng, &[b, c_in, t])
        } else {
            Tensor::from_fn(&[b, c_in, t], |_| rng.gen_range(-1.0..1.0))
        };
        let w = Tensor::from_fn(&[c_out, c_in, k], |_| rng.gen_range(-1.0..1.0));
        let bias: Vec<f64> = (0..c_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new(SpikeMode::Hard);
        let xi = g.input(x.clone(), false);
        let wi = g.input(w.clone(), false);
        let bi = g.input(Tensor::new(vec![c_out], bias.clone()).unwrap(), false);
        let out = g.conv1d(xi, wi, Some(bi)).unwrap();
        assert_eq!(g.value(out).shape(), &[b, c_out, t]);
        assert_eq!(g.value(out).data(), &naive_conv1d(&x, &w, &bias)[..], "case {case}");
    }
}

#[test]
fn conv1d_spec_shape_example() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = Tensor::from_fn(&[1, 3, 10], |_| rng.gen_range(-1.0..1.0));
    let w = Tensor::from_fn(&[2, 3, 4], |_| rng.gen_range(-1.0..1.0));
    let mut g = Graph::new(SpikeMode::Hard);
    let xi = g.input(x.clone(), false);
    let wi = g.input(w.clone(), false);
    let out = g.conv1d(xi, wi, None).unwrap();
    assert_eq!(g.value(out).data(), &naive_conv1d(&x, &w, &[0.0, 0.0])[..]);
}

#[test]
fn conv2d_spatial_matches_nested_loops_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for case in 0..100 {
        let b = rng.gen_range(1..=2);
        let ch = rng.gen_range(1..=8);
        let t = rng.gen_range(1..=16);
        let k = rng.gen_range(1..=8);
        let x = if case % 2 == 0 {
            sparse(&mut rng, &[b, ch, t])
        } else {
            Tensor::from_fn(&[b, ch, t], |_| rng.gen_range(-1.0..1.0))
        };
        let kern: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new(SpikeMode::Hard);
        let xi = g.input(x.clone(), false);
        let ki = g.input(Tensor::new(vec![k, 1], kern.clone()).unwrap(), false);
        let out = g.conv2d_spatial(xi, ki).unwrap();
        assert_eq!(g.value(out).data(), &naive_conv2d_spatial(&x, &kern)[..], "case {case}");
    }
}

#[test]
fn conv_event_counts_include_padded_taps() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..50 {
        let (c_in, c_out, t, k) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..12), rng.gen_range(1..8));
        let x = sparse(&mut rng, &[1, c_in, t]);
        let events: f64 = x.data().iter().sum();
        let mut g = Graph::new(SpikeMode::Hard);
        let xi = g.input(x, false);
        let wi = g.input(Tensor::full(&[c_out, c_in, k], 0.5), false);
        let out = g.conv1d(xi, wi, None).unwrap();
        let ev = g.events(out).unwrap();
        assert_eq!(ev.input_events, events);
        assert_eq!(ev.accumulates, events * (c_out * k) as f64);
    }
}

#[test]
fn linear_matches_naive_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..50 {
        let (b, d_in, d_out) = (rng.gen_range(1..5), rng.gen_range(1..9), rng.gen_range(1..6));
        let x = Tensor::from_fn(&[b, d_in], |_| rng.gen_range(-1.0..1.0));
        let w = Tensor::from_fn(&[d_out, d_in], |_| rng.gen_range(-1.0..1.0));
        let bias = Tensor::from_fn(&[d_out], |_| rng.gen_range(-1.0..1.0));
        let mut g = Graph::new(SpikeMode::Hard);
        let (xi, wi, bi) = (g.input(x.clone(), false), g.input(w.clone(), false), g.input(bias.clone(), false));
        let out = g.linear(xi, wi, Some(bi)).unwrap();
        for r in 0..b {
            for o in 0..d_out {
                let mut acc = 0.0;
                for i in 0..d_in {
                    acc += w.data()[o * d_in + i] * x.data()[r * d_in + i];
                }
                acc += bias.data()[o];
                assert!((g.value(out).data()[r * d_out + o] - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn batch_norm_train_mode_standardises_each_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let (b, c, t) = (6, 4, 25);
    let x = Tensor::from_fn(&[b, c, t], |i| rng.gen_range(-3.0..5.0) * (1 + (i / t) % c) as f64);
    let mut g = Graph::new(SpikeMode::Hard);
    let xi = g.input(x, false);
    let gamma = g.input(Tensor::full(&[c], 1.0), false);
    let shift = g.input(Tensor::zeros(&[c]), false);
    let mut stats = RunningStats::new(c);
    let out = g.batch_norm(xi, gamma, shift, BnStats::Batch(&mut stats)).unwrap();
    let v = g.value(out).data();
    for ch in 0..c {
        let vals: Vec<f64> = (0..b).flat_map(|bi| v[(bi * c + ch) * t..(bi * c + ch + 1) * t].to_vec()).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-6, "channel {ch} mean {mean}");
        // eps in the denominator shifts the std by about eps / (2 var)
        assert!((std - 1.0).abs() < 1e-5, "channel {ch} std {std}");
    }
    assert_eq!(stats.updates, 1);
}

#[test]
fn fusion_head_matches_naive_matmul_and_concat() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..30 {
        let (b, deep_w, channels, segments, d, n_class) = (
            rng.gen_range(1..4),
            rng.gen_range(1..6),
            rng.gen_range(1..5),
            rng.gen_range(1..4),
            rng.gen_range(1..6),
            rng.gen_range(2..4),
        );
        let (pdf, pnav) = (case % 4 != 1, case % 4 != 2);
        let cfg = FusionConfig {
            d,
            segments,
            enable_pdf: pdf,
            enable_pnav: pnav,
        };
        let mut head = FusionHead::new(cfg, deep_w, channels, n_class, case).unwrap();
        for p in head.params_mut().iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
        let deep = Tensor::from_fn(&[b, deep_w], |_| rng.gen_range(0.0..1.0));
        let nav = Tensor::from_fn(&[b, channels * segments], |_| rng.gen_range(-2.0..2.0));
        let got = head.fuse_forward(&deep, &nav).unwrap();

        let param = |name: &str| head.params().iter().find(|p| p.name == name).map(|p| p.value.clone());
        let matvec = |w: &Tensor, x: &[f64]| -> Vec<f64> {
            (0..w.dim(0))
                .map(|o| (0..w.dim(1)).map(|i| w.data()[o * w.dim(1) + i] * x[i]).sum())
                .collect()
        };
        let wc = param("head.classifier.weight").unwrap();
        let bc = param("head.classifier.bias").unwrap();
        for r in 0..b {
            let mut joint = match param("head.p_df") {
                Some(w) => matvec(&w, deep.row(r)),
                None => deep.row(r).to_vec(),
            };
            joint.extend(match param("head.p_nav") {
                Some(w) => matvec(&w, nav.row(r)),
                None => nav.row(r).to_vec(),
            });
            let logits: Vec<f64> = matvec(&wc, &joint).iter().zip(bc.data()).map(|(a, b)| a + b).collect();
            for (x, y) in got.row(r).iter().zip(&logits) {
                assert!((x - y).abs() < 1e-12, "case {case}");
            }
        }
    }
}

#[test]
fn nav_equals_brute_force_bin_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for _ in 0..200 {
        let segments = rng.gen_range(1..6);
        let (c, t) = (rng.gen_range(1..7), segments * rng.gen_range(1..8));
        let counts: Vec<u16> = (0..c * t).map(|_| rng.gen_range(0..5)).collect();
        let x = SpikeTensor::new(c, t, counts).unwrap();
        let nav = extract_nav(&x, segments).unwrap();
        let len = t / segments;
        for ch in 0..c {
            for s in 0..segments {
                let mut n = 0u32;
                for bin in 0..t {
                    if bin / len == s {
                        n += u32::from(x.get(ch, bin));
                    }
                }
                assert_eq!(nav.get(ch, s), n);
            }
        }
    }
}

#[test]
fn nav_conserves_spike_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    for _ in 0..1000 {
        let segments = [1, 2, 5, 10][rng.gen_range(0..4)];
        let (c, t) = (rng.gen_range(1..12), 10 * rng.gen_range(1..11));
        let counts: Vec<u16> = (0..c * t).map(|_| if rng.gen_bool(0.8) { 0 } else { rng.gen_range(1..6) }).collect();
        let x = SpikeTensor::new(c, t, counts).unwrap();
        let nav = extract_nav(&x, segments).unwrap();
        assert_eq!(nav.total(), x.total());
        for ch in 0..c {
            let row: u64 = x.row(ch).iter().map(|&v| u64::from(v)).sum();
            let seg: u64 = (0..segments).map(|s| u64::from(nav.get(ch, s))).sum();
            assert_eq!(row, seg);
        }
    }
}

#[test]
fn plif_iteration_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for _ in 0..1000 {
        let beta = rng.gen_range(0.05..0.95);
        let params = PlifParams::from_beta(beta, 1.0, 0.0).unwrap();
        let n = rng.gen_range(1..40);
        // inputs below the threshold keep every partial sum subthreshold
        let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..0.999)).collect();
        let mut state = NeuronState::resting(1, 0.0);
        for &zi in &z {
            let out = plif_step(&state, &params, &[zi]).unwrap();
            assert_eq!(out.spikes, vec![0]);
            state = out.state;
        }
        let closed = plif_unroll_closed_form(params.beta(), &z);
        assert!((state.u[0] - closed).abs() < 1e-12);
    }
}

#[test]
fn plif_constant_drive() {
    let params = PlifParams::from_beta(0.5, 1.0, 0.0).unwrap();
    let dynamics = Dynamics::Plif(params);
    let ones = vec![vec![1.0]; 10_000];
    let (trains, _) = simulate(&dynamics, NeuronState::resting(1, 0.0), &ones).unwrap();
    assert!(trains.iter().all(|s| s[0] == 0));
    let twos = vec![vec![2.0]; 10_000];
    let (trains, _) = simulate(&dynamics, NeuronState::resting(1, 0.0), &twos).unwrap();
    assert!(trains.iter().all(|s| s[0] == 1));
    let out = plif_step(&NeuronState::resting(1, 0.0), &params, &[2.0]).unwrap();
    assert_eq!((out.spikes[0], out.state.u[0]), (1, 0.0));
}

#[test]
fn large_drive_spikes_every_step_in_the_graph() {
    let mut g = Graph::new(SpikeMode::Hard);
    let x = g.input(Tensor::full(&[2, 3, 50], 10.0), false);
    let dynamics = Dynamics::Plif(PlifParams::from_beta(0.7, 1.0, 0.0).unwrap());
    let out = g.spiking(x, dynamics, None, Default::default()).unwrap();
    assert!(g.value(out).data().iter().all(|&o| o == 1.0));
}
