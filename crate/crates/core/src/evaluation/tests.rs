use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::StandardNormal;

use super::*;
use crate::model::{init_params, CausalMode, ModelConfig};
use crate::rng::{rng_from_seed, Rng};

fn brute_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut twice = 0u64;
    for &a in id {
        for &b in ood {
            twice += if a > b { 2 } else if a == b { 1 } else { 0 };
        }
    }
    twice as f64 / (2 * id.len() * ood.len()) as f64
}

fn brute_fpr(id: &[f64], ood: &[f64], target: f64) -> f64 {
    let mut best: Option<f64> = None;
    for &t in id.iter().chain(ood) {
        let tpr = id.iter().filter(|&&s| s >= t).count() as f64 / id.len() as f64;
        if tpr >= target && best.is_none_or(|b| t > b) {
            best = Some(t);
        }
    }
    let t = best.expect("the smallest ID score always qualifies");
    ood.iter().filter(|&&s| s >= t).count() as f64 / ood.len() as f64
}

/// Every multiset of size 1..=8 over {0, 0.5, 1}.
fn small_multisets() -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for len in 1..=8usize {
        for zeros in 0..=len {
            for halves in 0..=len - zeros {
                let ones = len - zeros - halves;
                let mut v = vec![0.0; zeros];
                v.extend(std::iter::repeat_n(0.5, halves));
                v.extend(std::iter::repeat_n(1.0, ones));
                out.push(v);
            }
        }
    }
    out
}

#[test]
fn auroc_examples() {
    assert_eq!(auroc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
    assert_eq!(auroc(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.5);
    assert_eq!(auroc(&[0.9, 0.3], &[0.5, 0.1]).unwrap(), 0.75);
    assert!(matches!(auroc(&[], &[0.1]), Err(Error::Validation(_))));
    assert!(auroc(&[0.1], &[f64::NAN]).is_err());
}

#[test]
fn fpr_examples() {
    assert_eq!(fpr_at_tpr(&[0.9, 0.8, 0.95], &[0.1, 0.7], 0.95).unwrap(), 0.0);
    assert!(fpr_at_tpr(&[], &[0.1], 0.95).is_err());
    assert!(fpr_at_tpr(&[0.1], &[0.1], 0.0).is_err());
    let same = [0.1, 0.4, 0.4, 0.7, 0.9, 0.2, 0.3];
    let f = fpr_at_tpr(&same, &same, 0.95).unwrap();
    assert!(f >= 0.95 - 1.0 / same.len() as f64);
}

#[test]
fn metrics_match_brute_force_on_small_multisets() {
    let sets = small_multisets();
    assert_eq!(sets.len(), 164);
    for a in &sets {
        for b in &sets {
            assert_eq!(auroc(a, b).unwrap(), brute_auroc(a, b), "{a:?} {b:?}");
            assert_eq!(fpr_at_tpr(a, b, 0.95).unwrap(), brute_fpr(a, b, 0.95), "{a:?} {b:?}");
        }
    }
}

#[test]
fn fpr_matches_sweep_on_repeated_id_scores() {
    let mut rng = rng_from_seed(3);
    let id: Vec<f64> = (0..20).flat_map(|_| [0.9, 0.8, 0.7, 0.6, 0.5]).collect();
    let ood: Vec<f64> = (0..100).map(|_| rng.random::<f64>()).collect();
    assert_eq!(fpr_at_tpr(&id, &ood, 0.95).unwrap(), brute_fpr(&id, &ood, 0.95));
    for _ in 0..50 {
        let a: Vec<f64> = (0..100).map(|_| (rng.random::<f64>() * 20.0).round() / 20.0).collect();
        let b: Vec<f64> = (0..100).map(|_| (rng.random::<f64>() * 20.0).round() / 20.0 - 0.1).collect();
        assert_eq!(auroc(&a, &b).unwrap(), brute_auroc(&a, &b));
        assert_eq!(fpr_at_tpr(&a, &b, 0.95).unwrap(), brute_fpr(&a, &b, 0.95));
    }
}

proptest! {
    #[test]
    fn auroc_is_antisymmetric(a in prop::collection::vec(-3.0f64..3.0, 1..40), b in prop::collection::vec(-3.0f64..3.0, 1..40)) {
        prop_assert_eq!(auroc(&a, &b).unwrap() + auroc(&b, &a).unwrap(), 1.0);
    }

    #[test]
    fn metrics_are_rank_invariant(
        a in prop::collection::vec(-3.0f64..3.0, 1..40),
        b in prop::collection::vec(-3.0f64..3.0, 1..40),
        target in 0.05f64..1.0,
    ) {
        let t = |v: &[f64]| v.iter().map(|x| (x * 0.7).exp() + 2.0).collect::<Vec<_>>();
        prop_assert_eq!(auroc(&a, &b).unwrap(), auroc(&t(&a), &t(&b)).unwrap());
        prop_assert_eq!(fpr_at_tpr(&a, &b, target).unwrap(), fpr_at_tpr(&t(&a), &t(&b), target).unwrap());
        prop_assert_eq!(fpr_at_tpr(&a, &b, target).unwrap(), brute_fpr(&a, &b, target));
    }

    #[test]
    fn metrics_ignore_order(mut a in prop::collection::vec(0u8..3, 1..9), b in prop::collection::vec(0u8..3, 1..9)) {
        let f = |v: &[u8]| v.iter().map(|&x| f64::from(x) / 2.0).collect::<Vec<_>>();
        let before = (auroc(&f(&a), &f(&b)).unwrap(), fpr_at_tpr(&f(&a), &f(&b), 0.95).unwrap());
        a.reverse();
        prop_assert_eq!(before, (auroc(&f(&a), &f(&b)).unwrap(), fpr_at_tpr(&f(&a), &f(&b), 0.95).unwrap()));
    }
}

fn config(classes: usize) -> ModelConfig {
    let mut cfg = ModelConfig::new(4, 2, 2, 2, classes);
    cfg.hidden_width = 5;
    cfg.causal_mode = CausalMode::Weak;
    cfg
}

fn dataset(n: usize, classes: i64, tag: DistributionTag, rng: &mut Rng) -> LabeledDataset {
    let features = (0..n * 4).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
    let labels = (0..n as i64).map(|i| if tag == DistributionTag::SemanticShift { -1 } else { i % classes }).collect();
    LabeledDataset::new(4, features, labels, tag, "eval-test").unwrap()
}

#[test]
fn accuracy_counts_and_rejects_semantic_shift() {
    let params = init_params(&config(3), 1).unwrap();
    let mut rng = rng_from_seed(1);
    let mut one = dataset(1, 3, DistributionTag::Id, &mut rng);
    let p = predict_rows(&params, &one.feature_matrix(), &EvalConfig::default()).unwrap();
    let predicted = argmax(p.row(0)) as i64;
    one = LabeledDataset::new(4, one.features().to_vec(), vec![predicted], DistributionTag::Id, "one").unwrap();
    assert_eq!(accuracy(&params, &one, &EvalConfig::default()).unwrap(), 1.0);

    let ood = dataset(5, 3, DistributionTag::SemanticShift, &mut rng);
    assert!(matches!(accuracy(&params, &ood, &EvalConfig::default()), Err(Error::Validation(_))));
}

#[test]
fn random_labels_give_chance_accuracy() {
    let params = init_params(&config(2), 2).unwrap();
    let mut rng = rng_from_seed(2);
    let base = dataset(10_000, 2, DistributionTag::Id, &mut rng);
    let mut labels = base.labels().to_vec();
    use rand::seq::SliceRandom;
    labels.shuffle(&mut rng);
    let ds = LabeledDataset::new(4, base.features().to_vec(), labels, DistributionTag::Id, "perm").unwrap();
    let acc = accuracy(&params, &ds, &EvalConfig::default()).unwrap();
    assert!((0.45..=0.55).contains(&acc), "{acc}");

    let doubled = ds.concat(&ds).unwrap();
    assert_eq!(accuracy(&params, &doubled, &EvalConfig::default()).unwrap(), acc);
}

#[test]
fn msp_bounds() {
    let zero = ModelParams::zeros(config(10)).unwrap();
    let mut rng = rng_from_seed(3);
    let x = dataset(3, 10, DistributionTag::Id, &mut rng).feature_matrix();
    for s in msp_score(&zero, &x, &EvalConfig::default()).unwrap() {
        assert!((s - 0.1).abs() < 1e-12);
    }
    let params = init_params(&config(10), 3).unwrap();
    let x = dataset(100, 10, DistributionTag::Id, &mut rng).feature_matrix();
    for cfg in [EvalConfig::default(), EvalConfig { monte_carlo: true, ..EvalConfig::default() }] {
        for s in msp_score(&params, &x, &cfg).unwrap() {
            assert!(s <= 1.0 && s >= 0.1 - 1e-12);
        }
    }
    let mut saturated = ModelParams::zeros(config(10)).unwrap();
    let last = saturated.config.hidden_layers;
    let b = saturated.get_mut(&format!("classifier.l{last}.bias")).unwrap();
    b.data[4] = 20.0;
    for s in msp_score(&saturated, &x, &EvalConfig::default()).unwrap() {
        // 1 / (1 + 9 e^-20)
        assert!(s >= 0.999);
        assert!((s - 1.0 / (1.0 + 9.0 * (-20.0f64).exp())).abs() < 1e-12);
    }
}

#[test]
fn suite_structure_and_determinism() {
    let params = init_params(&config(3), 4).unwrap();
    let mut rng = rng_from_seed(4);
    let id = dataset(60, 3, DistributionTag::Id, &mut rng);
    let only_id = vec![("id".to_string(), id.clone())];
    let r = evaluate_suite(&params, &only_id, &EvalConfig::default()).unwrap();
    assert!(r.idc_acc.is_empty() && r.detection.is_empty());
    assert_eq!(r.mean_idc_acc(), None);

    let sets = vec![
        ("id".to_string(), id),
        ("noise".to_string(), dataset(40, 3, DistributionTag::CovariateShift, &mut rng)),
        ("far".to_string(), dataset(30, 3, DistributionTag::SemanticShift, &mut rng)),
    ];
    let a = evaluate_suite(&params, &sets, &EvalConfig::default()).unwrap();
    let b = evaluate_suite(&params, &sets, &EvalConfig::default()).unwrap();
    assert_eq!(a, b);
    assert!((0.0..=1.0).contains(&a.id_acc));
    assert!(a.idc_acc.values().all(|v| (0.0..=1.0).contains(v)));
    let d = a.detection["far"];
    assert!((0.0..=1.0).contains(&d.auroc) && (0.0..=1.0).contains(&d.fpr95));
    assert_eq!(a.num_eval_examples["noise"], 40);
    assert!(a.to_csv().contains("auroc/far,"));

    let no_id = vec![sets[1].clone()];
    assert!(matches!(evaluate_suite(&params, &no_id, &EvalConfig::default()), Err(Error::Validation(_))));
}
