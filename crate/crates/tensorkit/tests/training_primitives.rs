use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tensorkit::{xavier_bound, xavier_uniform, AdamConfig, AdamState, ParamStore, Tensor};

#[test]
fn xavier_bound_and_moments() {
    assert!((xavier_bound(3, 3) - 1.0).abs() < 1e-15);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = xavier_uniform(&[9], 3, 3, &mut rng).unwrap();
    assert!(t.data().iter().all(|v| v.abs() <= 1.0));

    let (fi, fo) = (30, 50);
    let a = xavier_bound(fi, fo);
    let t = xavier_uniform(&[100_000], fi, fo, &mut rng).unwrap();
    let n = t.len() as f64;
    let mean = t.data().iter().sum::<f64>() / n;
    let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 0.01 * a, "mean {mean}");
    assert!((var / (a * a / 3.0) - 1.0).abs() < 0.05, "var {var}");
}

#[test]
fn xavier_is_seed_deterministic() {
    let a = xavier_uniform(&[4, 3, 3, 3], 27, 36, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = xavier_uniform(&[4, 3, 3, 3], 27, 36, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn adam_zero_gradient_keeps_params() {
    let mut p = vec![Tensor::from_vec(vec![0.3, -1.2]).unwrap()];
    let before = p.clone();
    let mut s = AdamState::new(AdamConfig::default(), &p);
    s.step(&mut p, &[vec![0.0, 0.0]], None).unwrap();
    assert_eq!(p, before);
    assert_eq!(s.steps(), 1);
}

#[test]
fn adam_first_step_is_lr_times_sign() {
    let mut p = vec![Tensor::from_vec(vec![0.0, 0.0]).unwrap()];
    let mut s = AdamState::new(AdamConfig { lr: 0.001, eps: 1e-8, ..Default::default() }, &p);
    s.step(&mut p, &[vec![1.0, -1.0]], None).unwrap();
    // m̂ = g, v̂ = g², so Δθ = −lr·g/(|g| + ε).
    let expected = 0.001 / (1.0 + 1e-8);
    assert!((p[0].data()[0] + expected).abs() < 1e-15);
    assert!((p[0].data()[1] - expected).abs() < 1e-15);
    assert!(s.second_moment(0).iter().all(|&v| v >= 0.0));
}

#[test]
fn adam_rejects_nan_and_respects_mask() {
    let mut p = vec![Tensor::from_vec(vec![1.0]).unwrap(), Tensor::from_vec(vec![2.0]).unwrap()];
    let mut s = AdamState::new(AdamConfig::default(), &p);
    assert!(s.step(&mut p, &[vec![f64::NAN], vec![0.0]], None).is_err());
    s.step(&mut p, &[vec![1.0], vec![1.0]], Some(&[false, true])).unwrap();
    assert_eq!(p[0].data(), &[1.0]);
    assert_ne!(p[1].data(), &[2.0]);
    assert_eq!(s.first_moment(0), &[0.0]);
}

proptest! {
    #[test]
    fn adam_with_zero_lr_is_identity(vals in prop::collection::vec(-10.0f64..10.0, 1..20),
                                     grads in prop::collection::vec(-10.0f64..10.0, 20)) {
        let mut p = vec![Tensor::from_vec(vals.clone()).unwrap()];
        let mut s = AdamState::new(AdamConfig { lr: 0.0, ..Default::default() }, &p);
        for _ in 0..3 {
            s.step(&mut p, &[grads[..vals.len()].to_vec()], None).unwrap();
        }
        prop_assert_eq!(p[0].data(), vals.as_slice());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(
        tensors in prop::collection::vec(
            (prop::collection::vec(1usize..4, 1..4), any::<u64>()), 0..5)
    ) {
        let mut store = ParamStore::new();
        for (i, (shape, bits)) in tensors.iter().enumerate() {
            let n: usize = shape.iter().product();
            let data = (0..n as u64).map(|j| f64::from_bits(bits.wrapping_mul(j + 1) & !(0x7ffu64 << 52) | (0x3ffu64 << 52))).collect();
            store.push(format!("layer{i}.weight"), Tensor::new(shape.clone(), data).unwrap()).unwrap();
        }
        let mut bytes = Vec::new();
        store.write_to(&mut bytes).unwrap();
        prop_assert!(bytes.starts_with(b"HNET1\n"));
        let back = ParamStore::read_from(bytes.as_slice()).unwrap();
        prop_assert_eq!(back.names(), store.names());
        for (a, b) in back.tensors().iter().zip(store.tensors()) {
            prop_assert_eq!(a.shape(), b.shape());
            let ab: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(ab, bb);
        }
    }
}

#[test]
fn checkpoint_layout_and_errors() {
    let mut store = ParamStore::new();
    store.push("w", Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap()).unwrap();
    store.push("b", Tensor::scalar(0.5)).unwrap();
    let mut bytes = Vec::new();
    store.write_to(&mut bytes).unwrap();
    let header = b"HNET1\nw 1,2\nb 1\n\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(&bytes[header.len()..header.len() + 8], &1.0f64.to_le_bytes());
    assert_eq!(bytes.len(), header.len() + 24);

    assert!(ParamStore::read_from(&b"HNET2\n\n"[..]).is_err());
    assert!(ParamStore::read_from(&bytes[..bytes.len() - 1]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(ParamStore::read_from(extra.as_slice()).is_err());
    assert!(store.push("b", Tensor::scalar(1.0)).is_err());
    assert!(store.push("has space", Tensor::scalar(1.0)).is_err());
}
