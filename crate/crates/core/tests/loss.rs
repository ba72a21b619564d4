use mqmha::loss::{
    averaged_margin, cosine_logits, inter_topk_loss, loss_equivalent_form, ClassCenters, LossConfig, MarginSchedule,
    PenaltyMode,
};
use mqmha::{Error, Tensor};
use proptest::prelude::*;

/// Mean AM-Softmax cross-entropy with target margin `m`.
fn am_softmax_oracle(cos: &Tensor, labels: &[usize], s: f64, m: f64) -> f64 {
    let (n, c) = cos.dims2().unwrap();
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = cos.row(i);
        let target = s * (row[y] - m);
        let logits: Vec<f64> = (0..c).map(|j| if j == y { target } else { s * row[j] }).collect();
        let peak = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = peak + logits.iter().map(|z| (z - peak).exp()).sum::<f64>().ln();
        total += lse - target;
    }
    total / n as f64
}

#[derive(Debug, Clone)]
struct Instance {
    cos: Tensor,
    labels: Vec<usize>,
    scale: f64,
    margin: f64,
    margin_prime: f64,
}

fn instance() -> impl Strategy<Value = Instance> {
    (1usize..6, 2usize..9)
        .prop_flat_map(|(n, c)| {
            (
                prop::collection::vec(-1.0f64..1.0, n * c),
                prop::collection::vec(0..c, n),
                1.0f64..40.0,
                0.0f64..0.5,
                0.0f64..0.3,
                Just((n, c)),
            )
        })
        .prop_map(|(data, labels, scale, margin, margin_prime, (n, c))| Instance {
            cos: Tensor::new(vec![n, c], data).unwrap(),
            labels,
            scale,
            margin,
            margin_prime,
        })
}

fn config(inst: &Instance, k_top: usize, mode: PenaltyMode) -> LossConfig {
    LossConfig {
        scale: inst.scale,
        margin: inst.margin,
        margin_prime: inst.margin_prime,
        k_top,
        sub_centers: 1,
        penalty_mode: mode,
        classes: inst.cos.shape()[1],
        ramp_margin_prime: false,
    }
}

fn mode() -> impl Strategy<Value = PenaltyMode> {
    prop_oneof![Just(PenaltyMode::Additive), Just(PenaltyMode::Angular)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn k_zero_reduces_to_am_softmax(inst in instance(), mode in mode()) {
        let got = inter_topk_loss(&inst.cos, &inst.labels, &config(&inst, 0, mode), inst.margin).unwrap().loss;
        let want = am_softmax_oracle(&inst.cos, &inst.labels, inst.scale, inst.margin);
        prop_assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }

    #[test]
    fn all_negatives_penalized_is_am_softmax_with_summed_margin(inst in instance()) {
        let c = inst.cos.shape()[1];
        let got = inter_topk_loss(&inst.cos, &inst.labels, &config(&inst, c - 1, PenaltyMode::Additive), inst.margin)
            .unwrap()
            .loss;
        let want = am_softmax_oracle(&inst.cos, &inst.labels, inst.scale, inst.margin + inst.margin_prime);
        prop_assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
    }

    #[test]
    fn both_forms_agree(inst in instance(), k_frac in 0.0f64..=1.0, mode in mode(), ramp in 0.0f64..=1.0) {
        let c = inst.cos.shape()[1];
        let k = ((c - 1) as f64 * k_frac).round() as usize;
        let cfg = config(&inst, k, mode);
        let m_current = inst.margin * ramp;
        let a = inter_topk_loss(&inst.cos, &inst.labels, &cfg, m_current).unwrap().loss;
        let b = loss_equivalent_form(&inst.cos, &inst.labels, &cfg, m_current).unwrap();
        prop_assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
    }

    #[test]
    fn additive_loss_is_nondecreasing_in_margin_prime(inst in instance(), extra in 0.0f64..0.3) {
        let c = inst.cos.shape()[1];
        let low = config(&inst, c / 2, PenaltyMode::Additive);
        let high = LossConfig { margin_prime: inst.margin_prime + extra, ..low.clone() };
        let a = inter_topk_loss(&inst.cos, &inst.labels, &low, inst.margin).unwrap().loss;
        let b = inter_topk_loss(&inst.cos, &inst.labels, &high, inst.margin).unwrap().loss;
        prop_assert!(b >= a - 1e-12);
    }

    #[test]
    fn averaged_margin_is_affine_in_k(m in 0.0f64..1.0, mp in 0.0f64..1.0, c in 2usize..50, k_frac in 0.0f64..=1.0) {
        let k = ((c - 1) as f64 * k_frac).round() as usize;
        let got = averaged_margin(m, mp, k, c).unwrap();
        let lo = averaged_margin(m, mp, 0, c).unwrap();
        let hi = averaged_margin(m, mp, c - 1, c).unwrap();
        prop_assert_eq!(lo, m);
        prop_assert_eq!(hi, m + mp);
        let t = k as f64 / (c - 1) as f64;
        prop_assert!((got - (lo + t * (hi - lo))).abs() <= 1e-15);
    }

    #[test]
    fn cosine_logits_match_brute_force(n in 1usize..5, c in 1usize..5, subs in 1usize..4, dim in 1usize..6, seed in any::<u64>(),
                                       raw in prop::collection::vec(-3.0f64..3.0, 5 * 6)) {
        let emb = Tensor::new(vec![n, dim], raw[..n * dim].iter().map(|v| v + 1e-3).collect()).unwrap();
        prop_assume!((0..n).all(|i| emb.row(i).iter().any(|v| v.abs() > 1e-6)));
        let centers = ClassCenters::random(c, subs, dim, seed).unwrap();
        let out = cosine_logits(&emb, &centers).unwrap();
        for i in 0..n {
            let x = emb.row(i);
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            for j in 0..c {
                let mut best = (f64::NEG_INFINITY, 0);
                for k in 0..subs {
                    let w = centers.center(j, k);
                    let nw = w.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let cs = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / (nx * nw);
                    if cs > best.0 {
                        best = (cs, k);
                    }
                }
                let got = out.cos.at2(i, j);
                prop_assert!((got - best.0).abs() <= 1e-12);
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&got));
                prop_assert_eq!(out.selected[i * c + j], best.1);
            }
        }
    }
}

#[test]
fn averaged_margin_of_the_reported_setting() {
    let v = averaged_margin(0.2, 0.06, 5, 5994).unwrap();
    assert!((v - (0.2 + 0.3 / 5993.0)).abs() < 1e-15);
}

#[test]
fn overlarge_k_is_clamped_with_a_warning() {
    let cos = Tensor::from_rows(&[[0.9, 0.1, 0.3]]).unwrap();
    let mut cfg = LossConfig::inter_topk(3);
    cfg.k_top = 7;
    let out = inter_topk_loss(&cos, &[0], &cfg, 0.2).unwrap();
    assert_eq!(out.warnings.len(), 1);
    cfg.k_top = 2;
    let clamped = inter_topk_loss(&cos, &[0], &cfg, 0.2).unwrap();
    assert_eq!(out.loss, clamped.loss);
    assert!(clamped.warnings.is_empty());
}

#[test]
fn label_out_of_range_is_an_input_error() {
    let cos = Tensor::from_rows(&[[0.9, 0.1]]).unwrap();
    let cfg = LossConfig::am_softmax(2);
    assert!(matches!(inter_topk_loss(&cos, &[2], &cfg, 0.2), Err(Error::Input(_))));
}

#[test]
fn margin_ramp_is_linear_then_flat() {
    let s = MarginSchedule::new(0.2, 100).unwrap();
    assert_eq!(s.at(0), 0.0);
    assert!((s.at(50) - 0.1).abs() < 1e-15);
    assert_eq!(s.at(100), 0.2);
    assert_eq!(s.at(10_000), 0.2);
    let mut prev = 0.0;
    for step in 0..150 {
        assert!(s.at(step) >= prev);
        prev = s.at(step);
    }
}

#[test]
fn renormalized_centers_have_unit_norm() {
    let mut centers = ClassCenters::random(6, 3, 5, 9).unwrap();
    centers.tensor_mut().data_mut().iter_mut().for_each(|v| *v *= 3.7);
    centers.renormalize();
    assert!(centers.max_norm_deviation() <= 1e-12);
}
