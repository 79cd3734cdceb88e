use std::f64::consts::PI;

use mvcl_core::rng;
use mvcl_core::views::{derivative_view, dft_oracle, extract_views, frequency_view};
use mvcl_core::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn col(v: &[f64]) -> Tensor<f64> {
    Tensor::new([v.len(), 1], v.to_vec()).unwrap()
}

#[test]
fn stencil_is_exact_on_quadratics() {
    let mut r = rng::stream(11, &[1]);
    for _ in 0..100 {
        let (a, b, c): (f64, f64, f64) = (r.gen_range(-5.0..5.0), r.gen_range(-5.0..5.0), r.gen_range(-5.0..5.0));
        let dt = r.gen_range(0.01..2.0);
        let len = r.gen_range(3..80);
        let x: Vec<f64> = (0..len).map(|i| {
            let t = i as f64 * dt;
            a + b * t + c * t * t
        }).collect();
        let d = derivative_view(&col(&x), dt).unwrap();
        for i in 2..len {
            let want = b + 2.0 * c * i as f64 * dt;
            assert!((d.data()[i] - want).abs() < 1e-9 * (1.0 + want.abs()), "t={i}: {} vs {want}", d.data()[i]);
        }
        assert_eq!(d.data()[0], d.data()[2]);
        assert_eq!(d.data()[1], d.data()[2]);
    }
}

#[test]
fn fast_transform_matches_direct_summation() {
    let mut r = rng::stream(12, &[1]);
    for case in 0..200 {
        let len = if case < 8 { 1 << (case + 1) } else { r.gen_range(3..=256) };
        let x: Vec<f64> = (0..len).map(|_| r.gen_range(-10.0..10.0)).collect();
        let fast = frequency_view(&col(&x)).unwrap();
        let slow = dft_oracle(&x);
        let scale = slow.iter().map(|z| z.norm()).fold(1.0, f64::max);
        for (f, s) in fast.data().iter().zip(&slow) {
            assert!((f - s.norm()).abs() <= 1e-6 * scale, "L={len}: {f} vs {}", s.norm());
        }
        let energy: f64 = x.iter().map(|v| v * v).sum();
        let spectral: f64 = fast.data().iter().map(|v| v * v).sum::<f64>() / len as f64;
        assert!((energy - spectral).abs() <= 1e-6 * energy, "Parseval at L={len}");
    }
}

#[test]
fn cosine_lands_in_its_two_bins() {
    let x: Vec<f64> = (0..8).map(|t| (2.0 * PI * t as f64 / 8.0).cos()).collect();
    let f = frequency_view(&col(&x)).unwrap();
    for (k, v) in f.data().iter().enumerate() {
        let want = if k == 1 || k == 7 { 4.0 } else { 0.0 };
        assert!((v - want).abs() < 1e-9);
    }
    let impulse = dft_oracle(&[1.0, 0.0, 0.0, 0.0]);
    assert!(impulse.iter().all(|z| (z.re - 1.0).abs() < 1e-15 && z.im.abs() < 1e-15));
}

#[test]
fn trend_plus_sinusoid_splits_across_views() {
    let (len, slope, amp, cycles) = (64usize, 0.1, 2.0, 5.0);
    let w = 2.0 * PI * cycles / len as f64;
    let x: Vec<f64> = (0..len).map(|t| slope * t as f64 + amp * (w * t as f64).sin()).collect();
    let v = extract_views(&col(&x), 1.0).unwrap();
    // The backward stencil on sin has a closed form: Im[(3 − 4e^{−iw} + e^{−2iw})/2 · e^{iwt}] · amp.
    let (c1, s1, c2, s2) = (w.cos(), w.sin(), (2.0 * w).cos(), (2.0 * w).sin());
    let (re, im) = ((3.0 - 4.0 * c1 + c2) / 2.0, (4.0 * s1 - s2) / 2.0);
    for t in 2..len {
        let phase = w * t as f64;
        let want = slope + amp * (re * phase.sin() + im * phase.cos());
        assert!((v.derivative.data()[t] - want).abs() < 1e-9);
        // And the stencil tracks the analytic derivative to second order.
        assert!((v.derivative.data()[t] - (slope + amp * w * phase.cos())).abs() < amp * w.powi(3));
    }
    let detrended: Vec<f64> = (0..len).map(|t| amp * (w * t as f64).sin()).collect();
    let peak = frequency_view(&col(&detrended)).unwrap();
    let top = (1..len / 2).max_by(|&a, &b| peak.data()[a].total_cmp(&peak.data()[b])).unwrap();
    assert_eq!(top, cycles as usize);
    assert!((peak.data()[top] - amp * len as f64 / 2.0).abs() < 1e-9);
    // The ramp leaks into low bins, but the sinusoid still stands out locally.
    let f = v.frequency.data();
    let k = cycles as usize;
    assert!(f[k] > 2.0 * f[k - 1] && f[k] > 2.0 * f[k + 1]);
}

#[test]
fn constant_input_views() {
    let v = extract_views(&col(&[0.0; 10]), 1.0).unwrap();
    assert!(v.derivative.data().iter().all(|&d| d == 0.0));
    let v = extract_views(&col(&[3.0; 10]), 0.5).unwrap();
    assert!(v.derivative.data().iter().all(|&d| d == 0.0));
    assert!((v.frequency.data()[0] - 30.0).abs() < 1e-12);
    assert!(v.frequency.data()[1..].iter().all(|&d| d.abs() < 1e-12));
    assert!(derivative_view(&col(&[1.0, 2.0]), 1.0).is_err());
    assert!(derivative_view(&col(&[1.0, 2.0, 3.0]), 0.0).is_err());
}

fn series() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (3usize..70, 1usize..4).prop_flat_map(|(len, d)| (Just(len), Just(d), prop::collection::vec(-5.0f64..5.0, len * d)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn views_keep_shape_and_are_pure((len, d, data) in series(), dt in 0.01f64..3.0) {
        let x = Tensor::new([len, d], data).unwrap();
        let a = extract_views(&x, dt).unwrap();
        let b = extract_views(&x, dt).unwrap();
        prop_assert_eq!(&a, &b);
        for t in [&a.temporal, &a.derivative, &a.frequency] {
            prop_assert_eq!(t.shape(), &[len, d]);
        }
        prop_assert_eq!(&a.temporal, &x);
    }

    #[test]
    fn modulus_ignores_circular_shifts((len, d, data) in series(), shift in 0usize..70) {
        let x = Tensor::new([len, d], data.clone()).unwrap();
        let rolled: Vec<f64> = (0..len * d).map(|i| {
            let (t, c) = (i / d, i % d);
            data[((t + shift) % len) * d + c]
        }).collect();
        let y = Tensor::new([len, d], rolled).unwrap();
        let (fx, fy) = (frequency_view(&x).unwrap(), frequency_view(&y).unwrap());
        let scale = fx.data().iter().cloned().fold(1.0, f64::max);
        for (a, b) in fx.data().iter().zip(fy.data()) {
            prop_assert!((a - b).abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn channels_transform_independently((len, d, data) in series()) {
        let x = Tensor::new([len, d], data.clone()).unwrap();
        let f = frequency_view(&x).unwrap();
        let dv = derivative_view(&x, 1.0).unwrap();
        for c in 0..d {
            let ch: Vec<f64> = (0..len).map(|t| data[t * d + c]).collect();
            let fc = frequency_view(&col(&ch)).unwrap();
            let dc = derivative_view(&col(&ch), 1.0).unwrap();
            for t in 0..len {
                prop_assert_eq!(f.data()[t * d + c], fc.data()[t]);
                prop_assert_eq!(dv.data()[t * d + c], dc.data()[t]);
            }
        }
    }
}
