use std::collections::BTreeMap;

use percept_core::cells::*;
use percept_core::injection::{ConceptState, StateCache};
use percept_core::nn::{build_model, LayerSpec, ModelGraph, NeuronId, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn normals(rng: &mut ChaCha8Rng, n: usize, mean: f64, sd: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let (u1, u2): (f64, f64) = (rng.gen_range(f64::EPSILON..1.0), rng.gen());
            mean + sd * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect()
}

/// Midrank by counting: (#smaller) + (#equal + 1) / 2.
fn rank_oracle(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|&x| {
            let less = xs.iter().filter(|&&y| y < x).count() as f64;
            let equal = xs.iter().filter(|&&y| y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

/// Textbook Pearson from raw sums.
fn pearson_oracle(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    let sab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let saa: f64 = a.iter().map(|x| x * x).sum();
    let sbb: f64 = b.iter().map(|y| y * y).sum();
    let den = ((n * saa - sa * sa) * (n * sbb - sb * sb)).sqrt();
    if den == 0.0 {
        0.0
    } else {
        ((n * sab - sa * sb) / den).abs()
    }
}

fn spearman_oracle(p: &[f64], n: &[f64]) -> f64 {
    let pooled: Vec<f64> = p.iter().chain(n).copied().collect();
    let labels: Vec<f64> = (0..pooled.len()).map(|i| if i < p.len() { 1.0 } else { 0.0 }).collect();
    pearson_oracle(&rank_oracle(&pooled), &labels)
}

/// Every threshold below, between and above the pooled values, both orientations.
fn accuracy_oracle(p: &[f64], n: &[f64]) -> f64 {
    let mut cuts: Vec<f64> = p.iter().chain(n).copied().collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut thresholds = vec![cuts[0] - 1.0];
    thresholds.extend(cuts.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    thresholds.push(cuts[cuts.len() - 1] + 1.0);
    let total = (p.len() + n.len()) as f64;
    thresholds
        .iter()
        .flat_map(|&t| {
            let up = p.iter().filter(|&&x| x > t).count() + n.iter().filter(|&&x| x <= t).count();
            let down = p.iter().filter(|&&x| x <= t).count() + n.iter().filter(|&&x| x > t).count();
            [up as f64 / total, down as f64 / total]
        })
        .fold(0.0, f64::max)
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let (np, nn) = (rng.gen_range(1..40), rng.gen_range(1..40));
    // Coarse values so ties are common.
    let draw = |rng: &mut ChaCha8Rng, shift: f64| (rng.gen_range(0..12) as f64 + shift) / 4.0;
    let shift = rng.gen_range(0.0..3.0);
    let p = (0..np).map(|_| draw(rng, shift)).collect();
    let n = (0..nn).map(|_| draw(rng, 0.0)).collect();
    (p, n)
}

#[test]
fn spearman_matches_rank_oracle_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let (p, n) = random_instance(&mut rng);
        let (got, want) = (spearman_sensitivity(&p, &n), spearman_oracle(&p, &n));
        assert!((got - want).abs() < 1e-12, "{got} vs {want} on {p:?} / {n:?}");
    }
}

#[test]
fn spearman_examples() {
    assert!((spearman_sensitivity(&[0.7, 0.8, 0.9], &[0.1, 0.2, 0.3]) - 0.8783).abs() < 5e-5);
    assert_eq!(spearman_sensitivity(&[0.3; 5], &[0.3; 7]), 0.0);
    let values: Vec<f64> = (0..1000).map(|i| i as f64).collect();
    let p: Vec<f64> = values.iter().step_by(2).copied().collect();
    let n: Vec<f64> = values.iter().skip(1).step_by(2).copied().collect();
    assert!(spearman_sensitivity(&p, &n) < 0.1);
}

#[test]
fn accuracy_matches_exhaustive_sweep_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let (p, n) = random_instance(&mut rng);
        assert_eq!(accuracy_sensitivity(&p, &n), accuracy_oracle(&p, &n), "{p:?} / {n:?}");
    }
    assert_eq!(accuracy_sensitivity(&[0.2, 0.8, 0.9], &[0.1, 0.3, 0.4]), 5.0 / 6.0);
    assert_eq!(accuracy_sensitivity(&[5.0, 6.0], &[1.0, 2.0]), 1.0);
    assert_eq!(accuracy_sensitivity(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]), 0.5);
}

/// 1 - 2 Phi(-1) by direct integration of the normal density.
fn gaussian_overlap_complement() -> f64 {
    let steps = 200_000;
    let (a, b) = (-12.0, -1.0);
    let h = (b - a) / steps as f64;
    let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let tail: f64 = (0..steps).map(|i| 0.5 * h * (pdf(a + h * i as f64) + pdf(a + h * (i + 1) as f64))).sum();
    1.0 - 2.0 * tail
}

#[test]
fn intersection_of_shifted_normals_matches_closed_form() {
    let expected = gaussian_overlap_complement();
    assert!((expected - 0.6827).abs() < 1e-3);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let p = normals(&mut rng, 2000, 0.0, 1.0);
    let n = normals(&mut rng, 2000, 2.0, 1.0);
    let got = intersection_sensitivity(&p, &n);
    assert!((got - expected).abs() < 0.05, "{got} vs {expected}");
}

#[test]
fn intersection_extremes() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let p = normals(&mut rng, 300, 1.0, 0.5);
    assert!(intersection_sensitivity(&p, &p) <= 0.02);
    let far_p = normals(&mut rng, 300, 10.0, 1.0);
    let far_n = normals(&mut rng, 300, -10.0, 1.0);
    assert!(intersection_sensitivity(&far_p, &far_n) >= 0.99);
    assert_eq!(Metric::Intersection.eval(&[2.0; 10], &[2.0; 10]), 0.0);
}

#[test]
fn kde_integrates_to_one_on_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for (mp, mn, sd) in [(0.0, 2.0, 1.0), (0.0, 0.3, 0.1), (5.0, -5.0, 3.0)] {
        let p = normals(&mut rng, 500, mp, sd);
        let n = normals(&mut rng, 800, mn, sd);
        let grid = DensityGrid::new(&p, &n);
        for kde in [&grid.kde_p, &grid.kde_n] {
            let d: Vec<f64> = grid.points().map(|x| kde.density(x)).collect();
            assert_eq!(d.len(), GRID_POINTS);
            assert!((grid.trapezoid(&d) - 1.0).abs() < 1e-3);
        }
    }
}

#[test]
fn silverman_bandwidth_by_hand() {
    // sd = sqrt(2.5), IQR = 2 for 1..5 (linear interpolation).
    let kde = Kde::new(&[1.0, 2.0, 3.0, 4.0, 5.0], 4.0);
    let expected = 0.9 * (2.5f64.sqrt()).min(2.0 / 1.34) * 5f64.powf(-0.2);
    assert!((kde.bandwidth() - expected).abs() < 1e-15);
    // IQR is zero here, so the standard deviation alone sets the width.
    let kde = Kde::new(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 10.0], 10.0);
    let mean = 10.0 / 7.0;
    let sd = ((6.0 * mean * mean + (10.0 - mean) * (10.0 - mean)) / 6.0f64).sqrt();
    assert!((kde.bandwidth() - 0.9 * sd * 7f64.powf(-0.2)).abs() < 1e-12);
    assert_eq!(Kde::new(&[3.0; 4], 2.0).bandwidth(), 2e-3);
    assert_eq!(Kde::new(&[3.0; 4], 0.0).bandwidth(), 1e-6);
}

#[test]
fn median_and_mode_agree_on_symmetric_samples() {
    // A single draw of the density mode has a spread near 0.13 at n = 2000,
    // so the agreement is checked on the average over 16 draws.
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let n = normals(&mut rng, 2000, 0.0, 1.0);
    let deltas: Vec<f64> = (0..16)
        .map(|_| {
            let p = normals(&mut rng, 2000, 5.0, 1.0);
            kde_modes(&p, &n).0 - median(&p)
        })
        .collect();
    let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
    assert!(mean.abs() < 0.1, "{deltas:?}");
    assert!(deltas.iter().all(|d| d.abs() < 0.5), "{deltas:?}");
    assert_eq!(median(&[1.0, 2.0, 100.0]), 2.0);
    assert_eq!(kde_modes(&[4.25], &[-1.5]), (4.25, -1.5));
    assert_eq!(median(&[4.25]), 4.25);
}

fn dataset(cols: Vec<(Vec<f64>, Vec<f64>)>) -> ConceptDataset {
    let (np, nn) = (cols[0].0.len(), cols[0].1.len());
    let c = cols.len();
    let mut p = vec![0f32; np * c];
    let mut n = vec![0f32; nn * c];
    for (j, (cp, cn)) in cols.iter().enumerate() {
        cp.iter().enumerate().for_each(|(r, v)| p[r * c + j] = *v as f32);
        cn.iter().enumerate().for_each(|(r, v)| n[r * c + j] = *v as f32);
    }
    ConceptDataset::new(
        "X",
        (0..c).map(|j| NeuronId::new(1, j)).collect(),
        (0..np).map(|i| format!("p{i}")).collect(),
        (0..nn).map(|i| format!("n{i}")).collect(),
        ActivationMatrix::new(np, c, p).unwrap(),
        ActivationMatrix::new(nn, c, n).unwrap(),
    )
    .unwrap()
}

#[test]
fn scan_edge_columns() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let noise_p: Vec<f64> = (0..50).map(|_| rng.gen_range(0.0..1.0)).collect();
    let noise_n: Vec<f64> = (0..50).map(|_| rng.gen_range(0.2..1.2)).collect();
    let ds = dataset(vec![
        (noise_p.clone(), noise_n.clone()),
        (noise_p, noise_n),
        (vec![0.5; 50], vec![0.5; 50]),
        (vec![1.0; 50], vec![0.0; 50]),
    ]);
    for metric in Metric::ALL {
        let rec = scan_columns(&ds, metric);
        assert_eq!(rec.len(), 4);
        assert!(rec.windows(2).all(|w| w[0].neuron < w[1].neuron));
        assert_eq!(rec[0].value, rec[1].value);
        assert_eq!(rec[2].value, 0.0, "{metric}");
        assert!(rec.iter().all(|r| (0.0..=1.0).contains(&r.value)));
    }
    assert_eq!(scan_columns(&ds, Metric::Accuracy)[3].value, 1.0);
}

#[test]
fn scan_rejects_foreign_neurons() {
    let model = build_model(&[2], &[LayerSpec::dense(2, 1), LayerSpec::Sigmoid], 0).unwrap();
    let ds = dataset(vec![(vec![1.0], vec![0.0]), (vec![1.0], vec![0.0])]);
    assert!(matches!(scan_model(&model, &ds, Metric::Accuracy), Err(CellsError::UnknownNeuron(_))));
}

fn records(values: &[f64]) -> Vec<SensitivityRecord> {
    values.iter().enumerate().map(|(i, &v)| SensitivityRecord { neuron: NeuronId::new(1, i), metric: Metric::Accuracy, value: v }).collect()
}

#[test]
fn threshold_search_stops_after_patience_and_prefers_short_prefix() {
    let recs = records(&[0.9, 0.8, 0.95, 0.7, 0.6, 0.55, 0.52, 0.51, 0.4]);
    // Admission order: 2, 0, 1, 3, 4, 5, 6, 7.
    let scores = [0.6, 0.8, 0.8, 0.7, 0.75, 0.7, 0.99, 0.99];
    let mut calls = 0;
    let sel = threshold_search("X", Metric::Accuracy, &recs, &SelectionConfig::default(), |prefix| {
        calls += 1;
        Ok(scores[prefix.len() - 1])
    })
    .unwrap();
    assert_eq!(sel.neurons, vec![NeuronId::new(1, 2), NeuronId::new(1, 0)]);
    assert_eq!(sel.validation_score, 0.8);
    assert_eq!(sel.threshold, 0.9);
    // Best at 2, so admissions 3..=6 are tried and the search stops there.
    assert_eq!(calls, 6);
    assert_eq!(sel.curve.len(), 6);
}

#[test]
fn all_noise_records_have_no_concept_neurons() {
    let err = threshold_search("X", Metric::Accuracy, &records(&[0.3, 0.5, 0.1]), &SelectionConfig::default(), |_| Ok(1.0));
    assert!(matches!(err, Err(CellsError::NoConceptNeurons { .. })));
}

/// Twenty tapped neurons: the first copies the label, the rest are uniform noise.
struct Mock {
    model: ModelGraph,
    head: Vec<f64>,
    bias: f64,
}

fn mock() -> Mock {
    let mut model =
        build_model(&[20], &[LayerSpec::dense(20, 20), LayerSpec::Relu, LayerSpec::dense(20, 1), LayerSpec::Sigmoid], 0).unwrap();
    let mut eye = vec![0.0; 20 * 20 + 20];
    (0..20).for_each(|i| eye[i * 20 + i] = 1.0);
    model.set_params(0, eye).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mut head: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.5..1.5)).collect();
    head[0] = 8.0;
    let bias = -8.0 * 0.75 - head[1..].iter().map(|w| w * 0.5).sum::<f64>();
    let mut params = head.clone();
    params.push(bias);
    model.set_params(2, params).unwrap();
    Mock { model, head, bias }
}

fn mock_input(rng: &mut ChaCha8Rng, positive: bool) -> Vec<f64> {
    let mut x: Vec<f64> = (0..20).map(|_| rng.gen_range(0.0..1.0)).collect();
    x[0] = if positive { rng.gen_range(1.0..1.5) } else { rng.gen_range(0.0..0.5) };
    x
}

/// Output of the mock with the listed neurons replaced, computed by hand.
fn mock_label(m: &Mock, x: &[f64], replace: &BTreeMap<usize, f64>) -> bool {
    let z: f64 = (0..20).map(|j| m.head[j] * replace.get(&j).copied().unwrap_or(x[j].max(0.0))).sum::<f64>() + m.bias;
    1.0 / (1.0 + (-z).exp()) >= 0.5
}

#[test]
fn single_predictive_neuron_selects_small_prefix_on_mock_model() {
    let m = mock();
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let pos: Vec<Vec<f64>> = (0..100).map(|_| mock_input(&mut rng, true)).collect();
    let neg: Vec<Vec<f64>> = (0..100).map(|_| mock_input(&mut rng, false)).collect();
    let to_f32 = |rows: &[Vec<f64>]| rows.iter().flat_map(|r| r.iter().map(|v| *v as f32)).collect::<Vec<_>>();
    let ds = ConceptDataset::new(
        "X",
        (0..20).map(|j| NeuronId::new(1, j)).collect(),
        (0..100).map(|i| format!("p{i}")).collect(),
        (0..100).map(|i| format!("n{i}")).collect(),
        ActivationMatrix::new(100, 20, to_f32(&pos)).unwrap(),
        ActivationMatrix::new(100, 20, to_f32(&neg)).unwrap(),
    )
    .unwrap();
    let recs = scan_model(&m.model, &ds, Metric::Accuracy).unwrap();
    assert_eq!(ranked(&recs)[0].neuron, NeuronId::new(1, 0));

    // Validation: 50 negatives to push present, 50 positives to push absent.
    let mut cases = Vec::new();
    let mut raw = Vec::new();
    for i in 0..100 {
        let positive = i % 2 == 1;
        let x = mock_input(&mut rng, positive);
        let state = if positive { ConceptState::Absent } else { ConceptState::Present };
        cases.push((Tensor::vector(x.clone()).unwrap(), state, !positive));
        raw.push((x, state, !positive));
    }
    let val = ValidationSet::build(&m.model, 1, &cases).unwrap();
    let sel = select_concept_neurons(&m.model, &ds, &recs, &val, &SelectionConfig::default()).unwrap();
    assert!(!sel.neurons.is_empty() && sel.neurons.len() <= 4, "{:?}", sel.neurons);
    assert!(sel.neurons.iter().all(|id| recs[id.offset].value >= sel.threshold));

    // Exhaustive hand evaluation of every prefix of the ranked order.
    let order: Vec<usize> = ranked(&recs).iter().filter(|r| r.value > 0.5).map(|r| r.neuron.offset).collect();
    let med = |rows: &[Vec<f64>], j: usize| median(&rows.iter().map(|r| r[j] as f32 as f64).collect::<Vec<_>>());
    let prefix_score = |k: usize| {
        let present: BTreeMap<usize, f64> = order[..k].iter().map(|&j| (j, med(&pos, j))).collect();
        let absent: BTreeMap<usize, f64> = order[..k].iter().map(|&j| (j, med(&neg, j))).collect();
        let hits =
            raw.iter().filter(|(x, s, e)| mock_label(&m, x, if *s == ConceptState::Present { &present } else { &absent }) == *e).count();
        hits as f64 / raw.len() as f64
    };
    assert_eq!(prefix_score(sel.neurons.len()), sel.validation_score);
    for k in sel.neurons.len()..=order.len() {
        assert!(sel.validation_score >= prefix_score(k), "prefix {k}");
    }
    for (k, s) in sel.curve.iter().enumerate() {
        assert_eq!(*s, prefix_score(k + 1));
    }
}

#[test]
fn injection_values_per_state() {
    let ds = dataset(vec![(vec![1.0, 2.0, 100.0], vec![0.0, -1.0, 0.5]), (vec![3.0, 3.0, 3.0], vec![7.0, 7.0, 7.0])]);
    let ids = [NeuronId::new(1, 0), NeuronId::new(1, 1)];
    let (present, absent) = compute_injection_values(&ds, &ids, ValueMethod::Median).unwrap();
    assert_eq!(present.state, ConceptState::Present);
    assert_eq!(present.values[&ids[0]], 2.0);
    assert_eq!(absent.values[&ids[0]], 0.0);
    let (present, absent) = compute_injection_values(&ds, &ids, ValueMethod::Mode).unwrap();
    assert_eq!((present.values[&ids[1]], absent.values[&ids[1]]), (3.0, 7.0));
    assert!(compute_injection_values(&ds, &[], ValueMethod::Median).is_err());
    assert!(compute_injection_values(&ds, &[NeuronId::new(5, 0)], ValueMethod::Median).is_err());
}

#[test]
fn dump_roundtrip_and_corruption() {
    let model = build_model(&[4], &[LayerSpec::dense(4, 6), LayerSpec::Relu, LayerSpec::dense(6, 1), LayerSpec::Sigmoid], 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut sample =
        |tag: &str, i: usize| (format!("{tag}{i}"), Tensor::vector((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap());
    let pos: Vec<_> = (0..5).map(|i| sample("p", i)).collect();
    let neg: Vec<_> = (0..3).map(|i| sample("n", i)).collect();
    let ids = NeuronScope::All.neurons(&model).unwrap();
    let ds = ConceptDataset::collect(&model, "X", ids.clone(), &pos, &neg).unwrap();

    // Matches live taps.
    for (r, (_, x)) in pos.iter().enumerate() {
        let (_, taps) = model.forward_taps(x).unwrap();
        let live: Vec<f32> = taps.values().iter().map(|v| *v as f32).collect();
        assert_eq!(ds.acts_p.row(r), live.as_slice());
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.dump");
    ds.export_dump(&path).unwrap();
    assert_eq!(import_activation_dump(&path).unwrap(), ds);

    let bytes = ds.to_dump_bytes();
    let mut corrupt = bytes.clone();
    let last = corrupt.len() - 1;
    corrupt[last] ^= 1;
    assert!(matches!(ConceptDataset::from_dump_bytes(&corrupt), Err(CellsError::Checksum { .. })));
    assert!(matches!(ConceptDataset::from_dump_bytes(&bytes[..bytes.len() - 4]), Err(CellsError::Dimension(_))));
}

#[test]
fn scopes_resolve() {
    let model = build_model(
        &[4],
        &[LayerSpec::dense(4, 6), LayerSpec::Relu, LayerSpec::dense(6, 3), LayerSpec::Relu, LayerSpec::dense(3, 1), LayerSpec::Sigmoid],
        3,
    )
    .unwrap();
    assert_eq!(NeuronScope::Dense.neurons(&model).unwrap().len(), 9);
    assert_eq!(NeuronScope::All.neurons(&model).unwrap().len(), model.neuron_count());
    assert_eq!("layers:3".parse::<NeuronScope>().unwrap().neurons(&model).unwrap().len(), 3);
    assert!("layers:99".parse::<NeuronScope>().unwrap().neurons(&model).is_err());
    assert!("dense-ish".parse::<NeuronScope>().is_err());
    let _ = StateCache::from_states(0, vec![]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metric_properties(
        p in prop::collection::vec(-5.0f64..5.0, 1..30),
        n in prop::collection::vec(-5.0f64..5.0, 1..30),
        rot in 0usize..30,
    ) {
        for metric in Metric::ALL {
            let v = metric.eval(&p, &n);
            prop_assert!((0.0..=1.0).contains(&v));
            let mut q = p.clone();
            q.rotate_left(rot % p.len());
            q.reverse();
            prop_assert!((metric.eval(&q, &n) - v).abs() < 1e-12);
        }
        prop_assert_eq!(accuracy_sensitivity(&p, &n), accuracy_sensitivity(&n, &p));
        prop_assert!((intersection_sensitivity(&p, &n) - intersection_sensitivity(&n, &p)).abs() < 1e-12);
        let mono = |xs: &[f64]| xs.iter().map(|x| x.exp() * 3.0 + 1.0).collect::<Vec<_>>();
        prop_assert!((spearman_sensitivity(&mono(&p), &mono(&n)) - spearman_sensitivity(&p, &n)).abs() < 1e-12);
        prop_assert_eq!(accuracy_sensitivity(&mono(&p), &mono(&n)), accuracy_sensitivity(&p, &n));
    }
}
