use std::collections::BTreeMap;

use percept_core::injection::*;
use percept_core::nn::{build_model, LayerSpec, ModelGraph, NeuronId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn net() -> ModelGraph {
    let specs = [
        LayerSpec::conv_same(1, 2, 3),
        LayerSpec::Relu,
        LayerSpec::Flatten,
        LayerSpec::dense(32, 6),
        LayerSpec::Relu,
        LayerSpec::dense(6, 4),
        LayerSpec::Relu,
        LayerSpec::dense(4, 1),
        LayerSpec::Sigmoid,
    ];
    build_model(&[1, 4, 4], &specs, 31).unwrap()
}

fn inputs(n: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| Tensor::new(vec![1, 4, 4], (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()).collect()
}

fn plan(state: ConceptState, values: &[((usize, usize), f64)]) -> InjectionPlan {
    InjectionPlan::new("C", state, values.iter().map(|&(id, v)| (NeuronId::from(id), v)).collect())
}

fn bits(xs: &[f64]) -> Vec<u64> {
    xs.iter().map(|v| v.to_bits()).collect()
}

#[test]
fn empty_plan_is_plain_forward() {
    let model = net();
    for x in inputs(10, 1) {
        let (out, taps) = model.forward_taps(&x).unwrap();
        let pass = inject_forward(&model, &x, &[]).unwrap();
        assert_eq!(bits(pass.output.data()), bits(out.data()));
        assert_eq!(bits(pass.taps.values()), bits(taps.values()));
        let pass = inject_forward(&model, &x, &[InjectionPlan::empty("C", ConceptState::Present)]).unwrap();
        assert_eq!(bits(pass.taps.values()), bits(taps.values()));
    }
}

#[test]
fn replacement_is_exact_and_upstream_untouched() {
    let model = net();
    let p = plan(ConceptState::Present, &[((4, 2), 7.5), ((6, 0), 0.0), ((1, 5), 3.25)]);
    for x in inputs(5, 2) {
        let (_, plain) = model.forward_taps(&x).unwrap();
        let pass = inject_forward(&model, &x, std::slice::from_ref(&p)).unwrap();
        for (&id, &v) in &p.values {
            assert_eq!(pass.taps.get(&model, id), Some(v));
        }
        // Everything before the first planned layer is unchanged.
        let first = model.layer_range(1).start;
        assert_eq!(&pass.taps.values()[..first], &plain.values()[..first]);
        // Replacement, not accumulation: applying the plan twice changes nothing.
        let twice = inject_forward(&model, &x, &[p.clone(), p.clone()]).unwrap();
        assert_eq!(bits(twice.taps.values()), bits(pass.taps.values()));
        assert_eq!(twice.conflicts.len(), 3);
    }
}

#[test]
fn later_plan_wins_on_conflict() {
    let model = net();
    let x = &inputs(1, 3)[0];
    let a = plan(ConceptState::Present, &[((4, 1), 1.0)]);
    let b = plan(ConceptState::Absent, &[((4, 1), 2.0)]);
    let pass = inject_forward(&model, x, &[a, b]).unwrap();
    assert_eq!(pass.taps.get(&model, NeuronId::new(4, 1)), Some(2.0));
    assert_eq!(pass.conflicts, vec![NeuronId::new(4, 1)]);
}

#[test]
fn layer_outputs_hand_computed_after_replacement() {
    // Dense 2 -> 2 (relu) -> 1 (sigmoid) with known weights.
    let mut model = build_model(&[2], &[LayerSpec::dense(2, 2), LayerSpec::Relu, LayerSpec::dense(2, 1), LayerSpec::Sigmoid], 0).unwrap();
    model.set_params(0, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    model.set_params(2, vec![2.0, -3.0, 0.5]).unwrap();
    let x = Tensor::vector(vec![0.4, 0.9]).unwrap();
    let p = plan(ConceptState::Present, &[((1, 1), 0.1)]);
    let out = inject_forward(&model, &x, &[p]).unwrap().output.data()[0];
    let z: f64 = 2.0 * 0.4 - 3.0 * 0.1 + 0.5;
    assert!((out - 1.0 / (1.0 + (-z).exp())).abs() < 1e-15);
}

#[test]
fn invalid_plans_are_rejected() {
    let model = net();
    let x = &inputs(1, 4)[0];
    let bad = plan(ConceptState::Present, &[((4, 99), 1.0)]);
    assert!(matches!(inject_forward(&model, x, &[bad]), Err(InjectionError::UnknownNeuron(_))));
    let nan = plan(ConceptState::Present, &[((4, 0), f64::NAN)]);
    assert!(matches!(inject_forward(&model, x, &[nan]), Err(InjectionError::NonFinite(_))));
}

#[test]
fn expectation_eval_identity_and_inversion() {
    let model = net();
    let xs = inputs(40, 5);
    let labels: Vec<bool> = xs.iter().map(|x| model.score(x).unwrap() >= 0.5).collect();
    let same: Vec<(Tensor, bool)> = xs.iter().cloned().zip(labels.iter().copied()).collect();
    let flipped: Vec<(Tensor, bool)> = xs.iter().cloned().zip(labels.iter().map(|l| !l)).collect();
    let empty = InjectionPlan::empty("C", ConceptState::Present);
    assert_eq!(expectation_eval(&model, &empty, &same).unwrap(), 1.0);
    assert_eq!(expectation_eval(&model, &empty, &flipped).unwrap(), 0.0);
    assert!(matches!(expectation_eval(&model, &empty, &[]), Err(InjectionError::EmptyEvalSet)));
}

#[test]
fn saturating_plan_forces_label() {
    let model = net();
    let xs = inputs(30, 6);
    // Pin the last hidden layer to values that push the logit far up or down.
    let head = model.params(7).to_vec();
    let up: Vec<((usize, usize), f64)> = (0..4).map(|j| ((6, j), if head[j] > 0.0 { 50.0 } else { 0.0 })).collect();
    let down: Vec<((usize, usize), f64)> = (0..4).map(|j| ((6, j), if head[j] < 0.0 { 50.0 } else { 0.0 })).collect();
    let yes: Vec<(Tensor, bool)> = xs.iter().map(|x| (x.clone(), true)).collect();
    let no: Vec<(Tensor, bool)> = xs.iter().map(|x| (x.clone(), false)).collect();
    if head[..4].iter().any(|w| *w > 0.0) {
        assert_eq!(expectation_eval(&model, &plan(ConceptState::Present, &up), &yes).unwrap(), 1.0);
    }
    if head[..4].iter().any(|w| *w < 0.0) {
        assert_eq!(expectation_eval(&model, &plan(ConceptState::Absent, &down), &no).unwrap(), 1.0);
    }
}

#[test]
fn cached_resume_is_bit_identical() {
    let model = net();
    let xs = inputs(12, 7);
    let p = plan(ConceptState::Present, &[((4, 0), 0.3), ((6, 3), 1.7)]);
    let compiled = CompiledPlan::new(&model, &[&p]).unwrap();
    let cache = StateCache::build(&model, 4, &xs).unwrap();
    let cached = cache.scores(&model, &compiled).unwrap();
    for (x, s) in xs.iter().zip(&cached) {
        let full = inject_forward(&model, x, std::slice::from_ref(&p)).unwrap().output.data()[0];
        assert_eq!(full.to_bits(), s.to_bits());
    }
    let plain = cache.scores(&model, &CompiledPlan::default()).unwrap();
    for (x, s) in xs.iter().zip(&plain) {
        assert_eq!(model.score(x).unwrap().to_bits(), s.to_bits());
    }
    let early = CompiledPlan::new(&model, &[&plan(ConceptState::Present, &[((1, 0), 1.0)])]).unwrap();
    assert!(matches!(cache.scores(&model, &early), Err(InjectionError::BeforeCache { layer: 1, start: 4 })));
    let sub = cache.select(&[3, 5]);
    assert_eq!(sub.scores(&model, &compiled).unwrap(), vec![cached[3], cached[5]]);
}

#[test]
fn plan_json_format() {
    let p = plan(ConceptState::Absent, &[((8, 3), 0.25), ((10, 1), -1.0)]);
    let json: serde_json::Value = serde_json::from_str(&p.to_json()).unwrap();
    assert_eq!(json["state"], "absent");
    assert_eq!(json["values"], serde_json::json!([[8, 3, 0.25], [10, 1, -1.0]]));
    assert_eq!(InjectionPlan::from_json(&p.to_json()).unwrap(), p);
    let dup = r#"{"concept":"C","state":"present","values":[[1,1,0.5],[1,1,0.7]]}"#;
    assert!(InjectionPlan::from_json(dup).is_err());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.json");
    p.save(&path).unwrap();
    assert_eq!(InjectionPlan::load(&path).unwrap(), p);
    let _: BTreeMap<NeuronId, f64> = p.values;
}
