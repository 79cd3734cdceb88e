use mvcl_core::numerics::Graph;
use mvcl_core::objectives::{augment, cross_entropy, info_nce, total_loss, AugmentationPolicy, LossSpec, Stage};
use mvcl_core::rng;
use mvcl_core::Tensor;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

const TAU: f64 = 0.07;

fn gaussian(shape: [usize; 2], r: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.sample(StandardNormal))
}

#[test]
fn uniform_and_separated_closed_forms() {
    for n in [2usize, 4, 16] {
        let same = Tensor::<f64>::full([n, 16], 0.25);
        let got = info_nce(&same, &same, TAU).unwrap();
        assert!((got - (n as f64).ln()).abs() < 1e-6, "uniform N={n}: {got}");

        let eye = Tensor::<f64>::from_fn([n, 16], |i| if i / 16 == i % 16 { 1.0 } else { 0.0 });
        let got = info_nce(&eye, &eye, TAU).unwrap();
        let want = (1.0 + (n as f64 - 1.0) * (-1.0 / TAU).exp()).ln();
        assert!((got - want).abs() < 1e-6, "separated N={n}: {got} vs {want}");
        // ln N − loss is the mutual-information surrogate: ≈ ln N only when separated.
        assert!(((n as f64).ln() - got - (n as f64).ln()).abs() < 1e-5);
    }
    assert!((info_nce(&Tensor::<f64>::full([4, 3], 1.0), &Tensor::full([4, 3], 1.0), TAU).unwrap() - 1.38629).abs() < 1e-5);
    let zero_row = Tensor::<f64>::from_fn([2, 3], |i| if i < 3 { 0.0 } else { 1.0 });
    assert!(info_nce(&zero_row, &zero_row, TAU).is_err());
}

#[test]
fn cross_entropy_closed_forms() {
    for c in [2usize, 4, 7] {
        let got = cross_entropy(&Tensor::<f64>::full([3, c], 0.4), &[0, 1, c - 1]).unwrap();
        assert!((got - (c as f64).ln()).abs() < 1e-7);
    }
    let got = cross_entropy(&Tensor::<f64>::new([1, 2], vec![1.0, 2.0]).unwrap(), &[0]).unwrap();
    assert!((got - (1.0 + 1f64.exp()).ln()).abs() < 1e-12);
    let sure = cross_entropy(&Tensor::<f64>::new([1, 3], vec![800.0, 0.0, -5.0]).unwrap(), &[0]).unwrap();
    assert!(sure >= 0.0 && sure < 1e-300);
    assert!(cross_entropy(&Tensor::<f64>::zeros([1, 2]), &[2]).is_err());
}

#[test]
fn pulling_a_positive_closer_lowers_the_loss() {
    for instance in 0..100u64 {
        let mut r = rng::stream(instance, &[31]);
        let z = gaussian([4, 64], &mut r);
        let aug = gaussian([4, 64], &mut r);
        let row = |t: &Tensor<f64>, i: usize| t.data()[i * 64..(i + 1) * 64].to_vec();
        let unit = |v: Vec<f64>| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect::<Vec<_>>()
        };
        let (from, to) = (unit(row(&aug, 0)), unit(row(&z, 0)));
        // Other anchors orthogonal to the path plane keep every negative
        // similarity involving the moving row fixed at zero.
        let mut plane = vec![from.clone()];
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut t = to.clone();
        let k = dot(&t, &from);
        t.iter_mut().zip(&from).for_each(|(v, f)| *v -= k * f);
        plane.push(unit(t));
        let mut zd = z.data().to_vec();
        for i in 1..4 {
            let mut v = row(&z, i);
            for b in &plane {
                let k = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= k * y);
            }
            zd[i * 64..(i + 1) * 64].copy_from_slice(&v);
        }
        let z = Tensor::new([4, 64], zd).unwrap();
        let mut last = f64::INFINITY;
        for step in 0..=10 {
            let s = step as f64 / 10.0;
            let moved = unit(from.iter().zip(&to).map(|(a, b)| (1.0 - s) * a + s * b).collect());
            let mut data = aug.data().to_vec();
            data[..64].copy_from_slice(&moved);
            let loss = info_nce(&z, &Tensor::new([4, 64], data).unwrap(), TAU).unwrap();
            assert!(loss < last, "instance {instance} step {step}: {loss} after {last}");
            last = loss;
        }
    }
}

#[test]
fn jitter_and_scaling_have_their_nominal_spread() {
    let len = 4000;
    let mut r = rng::stream(5, &[1]);
    let x = gaussian([len, 1], &mut r);
    let mean = x.data().iter().sum::<f64>() / len as f64;
    let std = (x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len as f64).sqrt();

    let jitter = AugmentationPolicy { scaling: false, ..AugmentationPolicy::default() };
    let mut diffs = Vec::new();
    for seed in 0..25 {
        let a = augment(&x, &jitter, seed).unwrap();
        diffs.extend(a.data().iter().zip(x.data()).map(|(p, q)| p - q));
    }
    let m = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let s = (diffs.iter().map(|d| (d - m).powi(2)).sum::<f64>() / diffs.len() as f64).sqrt() / std;
    assert!((s - 0.1).abs() < 0.01, "jitter std {s}");

    let scaling = AugmentationPolicy { jitter: false, ..AugmentationPolicy::default() };
    let factors: Vec<f64> = (0..2000)
        .map(|seed| augment(&x, &scaling, seed).unwrap().data()[0] / x.data()[0])
        .collect();
    let fm = factors.iter().sum::<f64>() / factors.len() as f64;
    let fs = (factors.iter().map(|f| (f - fm).powi(2)).sum::<f64>() / factors.len() as f64).sqrt();
    assert!((fm - 1.0).abs() < 0.01 && (fs - 0.1).abs() < 0.01, "scale {fm} ± {fs}");

    assert_eq!(augment(&x, &AugmentationPolicy::default(), 3).unwrap(), augment(&x, &AugmentationPolicy::default(), 3).unwrap());
    assert_ne!(augment(&x, &AugmentationPolicy::default(), 3).unwrap(), augment(&x, &AugmentationPolicy::default(), 4).unwrap());
}

fn record(stage: Stage, lambda: f64, labels: Option<&[usize]>, seed: u64) -> mvcl_core::objectives::LossReport {
    let mut r = rng::stream(seed, &[2]);
    let mut g = Graph::<f64>::new();
    let z = [0, 1, 2].map(|_| Some(g.constant(gaussian([6, 5], &mut r))));
    let za = [0, 1, 2].map(|_| Some(g.constant(gaussian([6, 5], &mut r))));
    let logits = g.constant(gaussian([6, 3], &mut r));
    let spec = LossSpec { stage, lambda, tau: TAU, symmetric: false };
    let vars = total_loss(&mut g, z, za, Some(logits), labels, spec).unwrap();
    vars.report(&g, lambda)
}

#[test]
fn total_loss_combines_its_parts() {
    let labels = [0, 1, 2, 2, 1, 0];
    let ce_only = record(Stage::Finetune, 0.0, Some(&labels), 1);
    assert_eq!(ce_only.l_total, ce_only.l_ce);
    assert_eq!(ce_only.l_cl, 0.0);

    let mixed = record(Stage::Finetune, 0.1, Some(&labels), 1);
    assert_eq!(mixed.l_ce, ce_only.l_ce);
    assert!((mixed.l_total - (0.1 * mixed.l_cl + mixed.l_ce)).abs() < 1e-12);
    mixed.check().unwrap();

    let pre = record(Stage::Pretrain, 0.1, None, 1);
    let pre_labeled = record(Stage::Pretrain, 0.1, Some(&[2, 2, 2, 2, 2, 2]), 1);
    assert_eq!(pre, pre_labeled);
    assert_eq!(pre.l_total, pre.l_cl);
    assert_eq!(pre.l_cl, mixed.l_cl);
    pre.check().unwrap();

    let mut broken = mixed;
    broken.l_cl += 1.0;
    assert!(broken.check().is_err());
}

fn rows() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>, Vec<f64>)> {
    (2usize..10, 2usize..12).prop_flat_map(|(n, d)| {
        (
            Just(n),
            Just(d),
            prop::collection::vec(-3.0f64..3.0, n * d),
            prop::collection::vec(-3.0f64..3.0, n * d),
            prop::collection::vec(0.01f64..100.0, 2 * n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn info_nce_ignores_row_scale((n, d, a, b, s) in rows(), tau in 0.05f64..1.0) {
        let norm = |v: &[f64]| v.chunks(d).all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-6);
        prop_assume!(norm(&a) && norm(&b));
        let z = Tensor::new([n, d], a.clone()).unwrap();
        let za = Tensor::new([n, d], b.clone()).unwrap();
        let scaled = |v: &[f64], f: &[f64]| Tensor::new([n, d], v.iter().enumerate().map(|(i, x)| x * f[i / d]).collect()).unwrap();
        let base = info_nce(&z, &za, tau).unwrap();
        let moved = info_nce(&scaled(&a, &s[..n]), &scaled(&b, &s[n..]), tau).unwrap();
        prop_assert!((base - moved).abs() < 1e-6, "{base} vs {moved}");
        prop_assert!(base >= 0.0);
        prop_assert!((n as f64).ln() - base <= (n as f64).ln());
    }

    #[test]
    fn cross_entropy_matches_direct_probabilities(
        (n, c, logits, labels) in (1usize..8, 2usize..9).prop_flat_map(|(n, c)| (
            Just(n), Just(c), prop::collection::vec(-10.0f64..10.0, n * c), prop::collection::vec(0..c, n)))
    ) {
        let want = logits.chunks(c).zip(&labels).map(|(row, &y)| {
            let p = row[y].exp() / row.iter().map(|v| v.exp()).sum::<f64>();
            -p.ln()
        }).sum::<f64>() / n as f64;
        let got = cross_entropy(&Tensor::new([n, c], logits).unwrap(), &labels).unwrap();
        prop_assert!((got - want).abs() < 1e-7);
    }
}
