//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits 0 either way; the unit and integration targets are the gate.
//!
//! Data and the trained model are cached under the cargo target tmpdir, so a
//! second run skips the 10k-sample training.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use percept_core::cells::{accuracy_sensitivity, intersection_sensitivity, spearman_sensitivity, Metric};
use percept_core::harness::*;
use percept_core::injection::{decide, CompiledPlan};
use percept_core::nn::{accuracy, build_model, checkpoint_load, checkpoint_save, default_architecture, sgd_fit, Hyper};
use percept_core::ontology::{ConceptDag, TYPE_A};
use percept_core::trains::{generate_dataset, DatasetConfig, Manifest};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRAIN_SEED: u64 = 1;
const TEST_SEED: u64 = 2;
const EXPERIMENT_SEED: u64 = 3;
const MODEL_SEED: u64 = 3;
const FIT_SEED: u64 = 4;
const HARNESS_SEED: u64 = 7;

struct Report {
    passed: usize,
    failed: usize,
}

impl Report {
    fn line(&mut self, ok: bool, name: &str, detail: String) {
        if ok {
            self.passed += 1;
        } else {
            self.failed += 1;
        }
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    }
}

fn cache_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn dataset(dir: &Path, n: usize, seed: u64) -> Manifest {
    if let Ok(m) = Manifest::load(dir) {
        if m.len() == n {
            return m;
        }
    }
    let _ = fs::remove_dir_all(dir);
    let cfg = DatasetConfig { n, balance: 0.5, seed, width: 128, height: 32 };
    generate_dataset(&cfg, ConceptDag::default_dag(), dir).expect("dataset generation")
}

fn all_rows(m: &Manifest) -> Vec<usize> {
    (0..m.len()).collect()
}

/// Trained model and its training time in seconds, from the cache when present.
fn trained_model(train: &Manifest) -> (percept_core::nn::ModelGraph, f64, bool) {
    let path = cache_dir().join("model.pcpt");
    let time_path = cache_dir().join("training_seconds");
    if let (Ok(model), Ok(secs)) = (checkpoint_load(&path), fs::read_to_string(&time_path)) {
        if let Ok(secs) = secs.trim().parse() {
            return (model, secs, true);
        }
    }
    let data = train.labeled(&all_rows(train), TYPE_A).expect("labels");
    let model = build_model(&[1, 32, 128], &default_architecture(32, 128), MODEL_SEED).expect("model");
    let hyper = Hyper { lr: 0.01, batch: 32, epochs: 8, momentum: 0.9, weight_decay: 0.0 };
    let t = Instant::now();
    let fit = sgd_fit(&model, &data, &hyper, FIT_SEED).expect("training");
    let secs = t.elapsed().as_secs_f64();
    checkpoint_save(&fit.model, &path).expect("save model");
    fs::write(&time_path, format!("{secs}\n")).expect("save time");
    (fit.model, secs, false)
}

fn normals(rng: &mut ChaCha8Rng, n: usize, mean: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let (u1, u2): (f64, f64) = (rng.gen_range(f64::EPSILON..1.0), rng.gen());
            mean + (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect()
}

fn rank_oracle(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|&x| {
            let less = xs.iter().filter(|&&y| y < x).count() as f64;
            let equal = xs.iter().filter(|&&y| y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

fn spearman_oracle(p: &[f64], n: &[f64]) -> f64 {
    let a = rank_oracle(&p.iter().chain(n).copied().collect::<Vec<_>>());
    let b: Vec<f64> = (0..a.len()).map(|i| if i < p.len() { 1.0 } else { 0.0 }).collect();
    let k = a.len() as f64;
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    let sab: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let saa: f64 = a.iter().map(|x| x * x).sum();
    let sbb: f64 = b.iter().map(|y| y * y).sum();
    let den = ((k * saa - sa * sa) * (k * sbb - sb * sb)).sqrt();
    if den == 0.0 {
        0.0
    } else {
        ((k * sab - sa * sb) / den).abs()
    }
}

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
            [up as f64 / total, (total - up as f64) / total]
        })
        .fold(0.0, f64::max)
}

fn metric_oracles(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst, mut mismatches) = (0.0f64, 0);
    for _ in 0..100 {
        let (np, nn) = (rng.gen_range(1..60), rng.gen_range(1..60));
        let shift = rng.gen_range(0.0..3.0);
        let p: Vec<f64> = (0..np).map(|_| (rng.gen_range(0..12) as f64 + shift) / 4.0).collect();
        let n: Vec<f64> = (0..nn).map(|_| rng.gen_range(0..12) as f64 / 4.0).collect();
        worst = worst.max((spearman_sensitivity(&p, &n) - spearman_oracle(&p, &n)).abs());
        mismatches += usize::from(accuracy_sensitivity(&p, &n) != accuracy_oracle(&p, &n));
    }
    r.line(worst < 1e-12, "spearman-oracle", format!("max |diff| {worst:.1e} over 100 instances"));
    r.line(mismatches == 0, "accuracy-oracle", format!("{mismatches} of 100 instances differ from the exhaustive sweep"));
    let p = normals(&mut rng, 2000, 0.0);
    let n = normals(&mut rng, 2000, 2.0);
    let v = intersection_sensitivity(&p, &n);
    r.line((v - 0.683).abs() <= 0.05, "intersection-normals", format!("N(0,1) vs N(2,1), n=2000: {v:.4} (target 0.683 +- 0.05)"));
}

fn main() {
    let mut r = Report { passed: 0, failed: 0 };
    let start = Instant::now();
    metric_oracles(&mut r);

    fs::create_dir_all(cache_dir()).expect("cache dir");
    let train = dataset(&cache_dir().join("train"), 10_000, TRAIN_SEED);
    let test = dataset(&cache_dir().join("test"), 2000, TEST_SEED);
    let exp = dataset(&cache_dir().join("experiment"), 10_000, EXPERIMENT_SEED);
    let (model, train_secs, cached) = trained_model(&train);
    let acc = accuracy(&model, &test.labeled(&all_rows(&test), TYPE_A).expect("labels")).expect("accuracy");
    let positives = test.records.iter().filter(|x| x.label(TYPE_A) == Some(true)).count();
    r.line(
        acc >= 0.97 && train_secs <= 900.0,
        "model-accuracy",
        format!(
            "{acc:.4} on {} held-out ({positives} positive); training {train_secs:.0}s{}",
            test.len(),
            if cached { " (recorded when the cached model was trained)" } else { "" }
        ),
    );

    let config = HarnessConfig { seed: HARNESS_SEED, ..HarnessConfig::default() };
    let t = Instant::now();
    let wb = Workbench::new(model.clone(), exp.clone(), ConceptDag::default_dag().clone(), config.clone()).expect("workbench");
    println!("info workbench: {} samples, {} neurons, {:.0?}", wb.manifest.len(), wb.scope().len(), t.elapsed());
    let relevant = config.relevant.clone();

    // Census.
    let cen = census(&wb, &relevant, &config.nonrelevant).expect("census");
    let with_neurons = cen.tuned.iter().filter(|t| t.relevant && t.count >= 1).count();
    let tuned: Vec<String> = cen.tuned.iter().filter(|t| t.relevant).map(|t| format!("{}={}", t.concept, t.count)).collect();
    r.line(
        with_neurons == relevant.len(),
        "census-tuned",
        format!("relevant concepts with neurons at the tuned threshold: {}", tuned.join(" ")),
    );
    let pairs: Vec<&Pairing> = cen.pairings.iter().filter(|p| p.metric == Metric::Intersection).collect();
    let holding = pairs.iter().filter(|p| p.holds()).count();
    let detail: Vec<String> =
        pairs.iter().map(|p| format!("{}>{}:{:.3}/{:.3}", p.relevant, p.nonrelevant, p.relevant_max, p.nonrelevant_max)).collect();
    r.line(holding >= 3, "census-pairings", format!("{holding}/4 intersection pairings hold ({})", detail.join(" ")));
    for metric in [Metric::Spearman, Metric::Accuracy] {
        let n = cen.pairings.iter().filter(|p| p.metric == metric && p.holds()).count();
        println!("info census pairings with {metric}: {n}/4");
    }

    // Injection success with intersection neurons and median values.
    let t = Instant::now();
    let cmp = metric_comparison(&wb, &relevant, &[Metric::Intersection]).expect("metric comparison");
    let secs = t.elapsed().as_secs_f64();
    let avg = cmp.average(Metric::Intersection).unwrap_or(0.0);
    let per: Vec<String> = relevant
        .iter()
        .map(|c| format!("{c}={}", fmt_ratio(cmp.cell(&wb.canonical(c).unwrap(), Metric::Intersection).and_then(|x| x.mean))))
        .collect();
    r.line(avg >= 0.85 && secs <= 600.0, "injection-success", format!("average {avg:.3} ({}), {secs:.0}s", per.join(" ")));
    let first = cmp.report(&wb);

    // Empty plans against plain forward passes on every set.
    let empty = CompiledPlan::default();
    let (mut rows, mut agree) = (0usize, 0usize);
    for c in &relevant {
        let split = wb.split(c).expect("split");
        for kind in SetKind::ALL {
            let set = split.sets.get(kind);
            let scores = wb.scores(set, &empty).expect("scores");
            for (&row, s) in set.iter().zip(scores) {
                let plain = model.score(&exp.load_image(row).expect("image").to_tensor()).expect("forward");
                rows += 1;
                agree += usize::from(decide(s) == decide(plain));
            }
        }
    }
    r.line(rows > 0 && agree == rows, "empty-plan-identity", format!("{agree}/{rows} set rows keep the plain-forward label"));

    // Data efficiency.
    let sweep = data_efficiency_sweep(&wb, &relevant, &config.sizes).expect("data sweep");
    let close: Vec<(String, Option<f64>, Option<f64>)> = sweep.curves.iter().map(|c| (c.concept.clone(), c.at(40), c.at(2000))).collect();
    let n_close = close.iter().filter(|(_, a, b)| matches!((a, b), (Some(a), Some(b)) if (a - b).abs() <= 0.10)).count();
    let detail: Vec<String> = close.iter().map(|(c, a, b)| format!("{c}:{}/{}", fmt_ratio(*a), fmt_ratio(*b))).collect();
    r.line(n_close >= 3, "data-efficiency", format!("{n_close}/4 within 0.10 at 40 vs 2000 ({})", detail.join(" ")));

    // Neuron-count sweep.
    let ns = neuron_count_sweep(&wb, &relevant, &config.counts).expect("neuron sweep");
    let peaked = ns.curves.iter().filter(|c| matches!((c.max(), c.last()), (Some(m), Some(l)) if m > l)).count();
    let detail: Vec<String> =
        ns.curves.iter().map(|c| format!("{}:max {} last {}", c.concept, fmt_ratio(c.max()), fmt_ratio(c.last()))).collect();
    r.line(
        peaked == ns.curves.len(),
        "neuron-sweep",
        format!("{peaked}/{} curves peak before the full scope ({})", ns.curves.len(), detail.join(", ")),
    );

    // Correction.
    let corr = correction_experiment(&wb, &["∃has.ReinforcedCar".to_string(), "∃has.PassengerCar".to_string()]).expect("correction");
    let ok = corr.rows.iter().all(|x| match x.ratio {
        Some(v) => v >= 0.80,
        None => x.cases < config.min_false_negatives,
    });
    let detail: Vec<String> = corr
        .rows
        .iter()
        .map(|x| {
            format!("{}: {} cases, {}", x.concept, x.cases, x.ratio.map_or_else(|| INSUFFICIENT_DATA.to_string(), |v| format!("{v:.3}")))
        })
        .collect();
    r.line(ok, "correction", format!("{} false negatives; {}", corr.false_negatives, detail.join("; ")));

    // Probes and the relation experiment.
    let probes = train_probes(&wb, &["EmptyTrain".to_string(), "∃has.PassengerCar".to_string()]).expect("probes");
    let ok = probes.iter().all(|p| p.1.test_accuracy >= 0.95);
    let detail: Vec<String> = probes.iter().map(|p| format!("{}={:.3} (n={})", p.1.concept, p.1.test_accuracy, p.1.test_size)).collect();
    r.line(ok, "probe-accuracy", detail.join(" "));
    let rel = relation_experiment(&wb, "EmptyTrain", "∃has.PassengerCar").expect("relation");
    let ok = rel.rows.iter().all(|x| x.flip_rate.is_some_and(|v| (0.0..=1.0).contains(&v)) && x.empty_plan_flip_rate == Some(0.0));
    let detail: Vec<String> = rel
        .rows
        .iter()
        .map(|x| {
            format!(
                "{}->{}: {} (empty {}) n={}",
                x.injected,
                x.probed,
                fmt_ratio(x.flip_rate),
                fmt_ratio(x.empty_plan_flip_rate),
                x.samples
            )
        })
        .collect();
    r.line(ok, "relation-flips", detail.join("; "));

    // Determinism: a fresh workbench reproduces the report byte for byte.
    let wb2 = Workbench::new(model, exp, ConceptDag::default_dag().clone(), config).expect("workbench");
    let second = metric_comparison(&wb2, &relevant, &[Metric::Intersection]).expect("rerun").report(&wb2);
    let dirs = [cache_dir().join("run1"), cache_dir().join("run2")];
    first.write(&dirs[0], "first").expect("write");
    second.write(&dirs[1], "second").expect("write");
    let mut same = !first.tables.is_empty();
    for t in &first.tables {
        let name = format!("{}.csv", t.name);
        same &= fs::read(dirs[0].join(&name)).ok() == fs::read(dirs[1].join(&name)).ok();
    }
    r.line(same, "determinism", format!("{} CSVs compared between two runs", first.tables.len()));

    println!("info {} passed, {} failed, {:.0?} total", r.passed, r.failed, start.elapsed());
}
