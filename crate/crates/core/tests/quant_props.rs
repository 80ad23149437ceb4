//! Dynamic int8 quantization properties and model-level accounting.

use colfig_core::quant::{
    compute_quant_params, dequantize, quantize, quantize_model, quantize_tensor, QuantPolicy,
};
use colfig_core::weights::{decode, encode};
use colfig_core::{StoredTensor, Tensor, WeightSet};
use proptest::prelude::*;

fn tensor(values: Vec<f32>) -> Tensor {
    Tensor::new(&[values.len()], values).unwrap()
}

/// `(q + 128) * S + f_min` evaluated exactly (f64 holds every product of an
/// 8-bit integer and an f32).
fn exact_reconstruction(q: i8, scale: f32, f_min: f32) -> f64 {
    (q as f64 + 128.0) * scale as f64 + f_min as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn endpoints_and_range(values in prop::collection::vec(-1e3f32..1e3, 2..300)) {
        let f = tensor(values);
        let p = compute_quant_params(&f).unwrap();
        prop_assume!(p.f_max > p.f_min);
        let q = quantize(&f, &p);
        for (&v, &qv) in f.data().iter().zip(q.qdata()) {
            if v == p.f_min {
                prop_assert_eq!(qv, -128);
            }
            if v == p.f_max {
                prop_assert_eq!(qv, 127);
            }
        }
    }

    #[test]
    fn exact_reconstruction_within_half_step(values in prop::collection::vec(-1e3f32..1e3, 1..300)) {
        let f = tensor(values);
        let q = quantize_tensor(&f).unwrap();
        let p = q.params();
        for (&v, &qv) in f.data().iter().zip(q.qdata()) {
            let err = (exact_reconstruction(qv, p.scale, p.f_min) - v as f64).abs();
            prop_assert!(err <= p.scale as f64 / 2.0 + 1e-9, "err {} S {}", err, p.scale);
        }
    }

    #[test]
    fn unit_range_tensors_meet_bound_in_f32(values in prop::collection::vec(-1f32..1.0, 1..1000)) {
        let f = tensor(values);
        let q = quantize_tensor(&f).unwrap();
        let s = q.params().scale as f64;
        for (&a, &b) in f.data().iter().zip(dequantize(&q).data()) {
            prop_assert!((a as f64 - b as f64).abs() <= s / 2.0 + 1e-6);
        }
    }

    #[test]
    fn constant_tensors_round_trip(c in -1e3f32..1e3, n in 1usize..100) {
        let f = tensor(vec![c; n]);
        let q = quantize_tensor(&f).unwrap();
        prop_assert_eq!(q.params().scale, 1.0);
        prop_assert!(q.qdata().iter().all(|&v| v == -128));
        prop_assert_eq!(dequantize(&q), f);
    }

    #[test]
    fn scale_is_covariant(values in prop::collection::vec(-10f32..10.0, 2..50), k in -20i32..20) {
        // power-of-two factors scale every f32 exactly, so S scales exactly
        // and the integer codes do not move
        let c = 2f32.powi(k);
        let f = tensor(values.clone());
        let g = tensor(values.iter().map(|v| v * c).collect());
        let (pf, pg) = (compute_quant_params(&f).unwrap(), compute_quant_params(&g).unwrap());
        prop_assume!(pf.f_max > pf.f_min);
        prop_assert_eq!(pg.scale, pf.scale * c);
        prop_assert_eq!(pg.zero_point, pf.zero_point);
        let (qg, qf) = (quantize(&g, &pg), quantize(&f, &pf));
        prop_assert_eq!(qg.qdata(), qf.qdata());
    }

    #[test]
    fn scale_tracks_range(values in prop::collection::vec(-1e3f32..1e3, 2..50)) {
        let f = tensor(values);
        let p = compute_quant_params(&f).unwrap();
        prop_assume!(p.f_max > p.f_min);
        let want = (p.f_max as f64 - p.f_min as f64) / 255.0;
        prop_assert!((p.scale as f64 / want - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn zero_point_formula(values in prop::collection::vec(-50f32..50.0, 2..40)) {
        let f = tensor(values);
        let p = compute_quant_params(&f).unwrap();
        prop_assume!(p.f_max > p.f_min);
        let s = (p.f_max as f64 - p.f_min as f64) / 255.0;
        // f64::round is half away from zero
        prop_assert_eq!(p.zero_point as f64, (-(p.f_min as f64) / s).round() - 128.0);
    }
}

#[test]
fn documented_examples() {
    let p = compute_quant_params(&tensor(vec![-1.0, 0.5, 1.0])).unwrap();
    assert_eq!(p.scale, (2.0f64 / 255.0) as f32);
    // -(-1) / (2/255) = 127.5 rounds away from zero to 128
    assert_eq!(p.zero_point, 0);
    let q = quantize(&tensor(vec![-1.0, 0.5, 1.0]), &p);
    // (0.5 + 1) / (2/255) = 191.25 -> 191
    assert_eq!(q.qdata(), &[-128, 63, 127]);
}

fn sample_set() -> WeightSet {
    let mut w = WeightSet::new();
    w.insert(
        "a.pointwise.weight".into(),
        StoredTensor::Float(Tensor::from_fn(&[4, 3, 1, 1], |i| (i as f32 - 5.0) / 7.0).unwrap()),
    );
    w.insert(
        "a.pointwise.bias".into(),
        StoredTensor::Float(Tensor::from_fn(&[4], |i| i as f32).unwrap()),
    );
    w.insert(
        "head.weight".into(),
        StoredTensor::Float(Tensor::full(&[2, 4], 0.25).unwrap()),
    );
    w
}

#[test]
fn empty_policy_is_identity_with_warning() {
    let w = sample_set();
    let (out, report) = quantize_model(&w, &QuantPolicy::none()).unwrap();
    assert_eq!(out, w);
    assert_eq!(report.bytes_before, report.bytes_after);
    assert_eq!(report.warnings.len(), 1);
}

#[test]
fn model_report_matches_per_tensor_oracle() {
    let w = sample_set();
    let (out, report) = quantize_model(&w, &QuantPolicy::projections()).unwrap();
    assert_eq!(report.tensors.len(), 2);
    assert!(out["a.pointwise.weight"].is_quantized());
    assert!(!out["a.pointwise.bias"].is_quantized());
    for r in &report.tensors {
        let StoredTensor::Float(f) = &w[&r.name] else {
            unreachable!()
        };
        let recon = dequantize(&quantize_tensor(f).unwrap());
        let errs: Vec<f64> = f
            .data()
            .iter()
            .zip(recon.data())
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .collect();
        assert_eq!(r.max_abs_error, errs.iter().cloned().fold(0.0, f64::max));
        assert_eq!(
            r.mean_abs_error,
            errs.iter().sum::<f64>() / errs.len() as f64
        );
    }
    // constant head weight reconstructs exactly
    let head = report
        .tensors
        .iter()
        .find(|r| r.name == "head.weight")
        .unwrap();
    assert_eq!(head.max_abs_error, 0.0);
    // 12 + 8 quantized elements: 4n before, n + 16 after
    assert_eq!(report.bytes_before, 4 * (12 + 4 + 8));
    assert_eq!(report.bytes_after, (12 + 16) + 4 * 4 + (8 + 16));
    assert_eq!(decode(&encode(&out)).unwrap(), out);
}

#[test]
fn rejects_non_finite() {
    assert!(quantize_tensor(&tensor(vec![1.0, f32::NAN])).is_err());
    assert!(quantize_tensor(&tensor(vec![f32::INFINITY])).is_err());
}
