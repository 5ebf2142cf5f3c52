use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::ArgMatches;
use percept_core::cells::{scan_model, write_sensitivity_csv, ConceptDataset, Metric, NeuronScope, ValueMethod};
use percept_core::harness::{
    activation_method_comparison, census, correction_experiment, data_efficiency_sweep, fmt_ratio, metric_comparison, neuron_count_sweep,
    relation_experiment, train_probes, ConceptSelection, ExperimentReport, HarnessConfig, Table, Workbench,
};
use percept_core::injection::{decide, injected_score, CompiledPlan, ConceptState, InjectionPlan};
use percept_core::nn::{
    accuracy, build_model, checkpoint_load, checkpoint_save, default_architecture, sgd_fit_with, Hyper, ModelGraph, Tensor,
};
use percept_core::ontology::ConceptDag;
use percept_core::probes::Probe;
use percept_core::seeds;
use percept_core::trains::{generate_dataset, subsample_indices, DatasetConfig, LabelFilter, Manifest};
use percept_service::AppState;

use crate::config::{self, resolve};
use crate::{
    CliError, Context, CorrectionArgs, DumpArgs, ExperimentArgs, ExperimentKind, GenDataArgs, HarnessArgs, InjectArgs, MetricsArgs,
    ProbeArgs, RelationArgs, ScanArgs, SelectArgs, ServeArgs, TrainArgs,
};

const CORRECTION_CONCEPTS: [&str; 2] = ["∃has.ReinforcedCar", "∃has.PassengerCar"];

/// File-name form of a concept: alphanumerics kept, the rest `_`.
pub fn slug(concept: &str) -> String {
    let s: String = concept.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
    s.trim_matches('_').to_string()
}

fn dag() -> &'static ConceptDag {
    ConceptDag::default_dag()
}

fn parse<T: std::str::FromStr<Err = String>>(s: &str) -> Result<T, CliError> {
    s.parse().map_err(CliError::Usage)
}

fn load_model(path: &Path) -> Result<ModelGraph, CliError> {
    checkpoint_load(path).map_err(|e| with_path(e.into(), path))
}

fn with_path(e: CliError, path: &Path) -> CliError {
    match e {
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        other => other,
    }
}

fn load_manifest(path: &Path) -> Result<Manifest, CliError> {
    Manifest::load(path).map_err(|e| with_path(e.into(), path))
}

fn write_table(dir: &Path, table: &Table) -> Result<(), CliError> {
    fs::write(dir.join(format!("{}.csv", table.name)), table.to_csv())?;
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    fs::write(path, serde_json::to_string_pretty(value).expect("json serialises") + "\n")?;
    Ok(())
}

fn section_args<T: serde::Serialize + serde::de::DeserializeOwned>(
    ctx: &Context,
    args: &T,
    matches: &ArgMatches,
    section: &str,
    harness_flags: bool,
) -> Result<T, CliError> {
    let table = match section.split_once('.') {
        Some((outer, inner)) => match ctx.file.section(outer)?.and_then(|t| t.get(inner)) {
            None => None,
            Some(toml::Value::Table(t)) => Some(t),
            Some(_) => return Err(CliError::Usage(format!("config: [{section}] must be a table"))),
        },
        None => ctx.file.section(section)?,
    };
    if let Some(t) = table {
        config::check_keys(t, &crate::arg_ids(&ctx.command), section, harness_flags)?;
    }
    resolve(args, matches, table, section)
}

fn workbench(ctx: &Context, model: &Option<PathBuf>, data: &Option<PathBuf>, flags: &HarnessArgs) -> Result<Workbench, CliError> {
    let cfg = config::harness(&ctx.file, flags.overrides()?, ctx.seed)?;
    let model = load_model(ctx.require(model, "model")?)?;
    let manifest = load_manifest(ctx.require(data, "data")?)?;
    let t = Instant::now();
    let wb = Workbench::new(model, manifest, dag().clone(), cfg)?;
    log::info!("workbench: {} samples, {} scoped neurons, cached in {:.1?}", wb.manifest.len(), wb.scope().len(), t.elapsed());
    Ok(wb)
}

fn concepts_or(wb: &Workbench, given: &[String], fallback: &[String]) -> Result<Vec<String>, CliError> {
    let list = if given.is_empty() { fallback } else { given };
    Ok(list.iter().map(|c| wb.canonical(c)).collect::<Result<_, _>>()?)
}

fn write_report(ctx: &Context, report: &ExperimentReport) -> Result<(), CliError> {
    report.write(&ctx.run_dir, &chrono::Local::now().to_rfc3339())?;
    for t in &report.tables {
        log::info!("{}:\n{}", t.name, t.to_markdown());
    }
    log::info!("report written to {}", ctx.run_dir.display());
    Ok(())
}

pub fn gen_data(ctx: &Context, args: &GenDataArgs, m: &ArgMatches) -> Result<(), CliError> {
    let args = section_args(ctx, args, m, "gen-data", false)?;
    ctx.echo("gen-data", &args, None)?;
    let cfg = DatasetConfig { n: args.n, balance: args.balance, seed: ctx.seed, width: args.width, height: args.height };
    let t = Instant::now();
    let manifest = generate_dataset(&cfg, dag(), &ctx.run_dir)?;
    let task = dag().task();
    let pos = manifest.records.iter().filter(|r| r.label(task) == Some(true)).count();
    log::info!(
        "{} samples ({pos} {task}, {} not) in {:.1?} -> {}",
        manifest.len(),
        manifest.len() - pos,
        t.elapsed(),
        ctx.run_dir.display()
    );
    Ok(())
}

pub fn train(ctx: &Context, args: &TrainArgs, m: &ArgMatches) -> Result<(), CliError> {
    let args = section_args(ctx, args, m, "train", false)?;
    ctx.echo("train", &args, None)?;
    let manifest = load_manifest(ctx.require(&args.data, "data")?)?;
    if manifest.is_empty() {
        return Err(CliError::Data("training manifest is empty".into()));
    }
    let task = dag().task();
    let all: Vec<usize> = (0..manifest.len()).collect();
    let data = manifest.labeled(&all, task)?;
    let (h, w) = (data.images[0].height, data.images[0].width);
    let model = build_model(&[1, h, w], &default_architecture(h, w), seeds::derive_named(ctx.seed, "init"))?;
    let hyper = Hyper { lr: args.lr, batch: args.batch, epochs: args.epochs, momentum: args.momentum, weight_decay: args.weight_decay };
    let t = Instant::now();
    let mut log_rows = Table::new("training", &["epoch", "loss"]);
    let fit = sgd_fit_with(&model, &data, &hyper, seeds::derive_named(ctx.seed, "fit"), &mut |epoch, loss| {
        log::info!("epoch {} loss {loss:.5} ({:.0?})", epoch + 1, t.elapsed());
        log_rows.push(vec![(epoch + 1).to_string(), format!("{loss:.6}")]);
    })?;
    let seconds = t.elapsed().as_secs_f64();
    checkpoint_save(&fit.model, &ctx.run_dir.join("model.pcpt"))?;
    write_table(&ctx.run_dir, &log_rows)?;
    let train_acc = accuracy(&fit.model, &data)?;
    let mut metrics = serde_json::json!({
        "samples": manifest.len(),
        "epochs": args.epochs,
        "train_accuracy": train_acc,
        "training_seconds": seconds,
    });
    if let Some(test) = &args.test {
        let tm = load_manifest(test)?;
        let test_acc = accuracy(&fit.model, &tm.labeled(&(0..tm.len()).collect::<Vec<_>>(), task)?)?;
        log::info!("held-out accuracy {test_acc:.4} on {} samples", tm.len());
        metrics["test_accuracy"] = test_acc.into();
        metrics["test_samples"] = tm.len().into();
    }
    write_json(&ctx.run_dir.join("metrics.json"), &metrics)?;
    log::info!("train accuracy {train_acc:.4}; model written to {}", ctx.run_dir.join("model.pcpt").display());
    Ok(())
}

/// Up to `per_class` positives and negatives of `concept`, drawn from the whole manifest.
fn concept_dataset(
    ctx: &Context,
    model: &ModelGraph,
    manifest: &Manifest,
    concept: &str,
    scope: &NeuronScope,
    per_class: usize,
) -> Result<ConceptDataset, CliError> {
    let concept = dag().canonical(concept)?.to_string();
    let neurons = scope.neurons(model)?;
    let draw = |value: bool| -> Result<Vec<(String, Tensor)>, CliError> {
        let filter = LabelFilter::new(vec![(concept.clone(), value)]);
        let seed = seeds::derive_named(ctx.seed, &format!("sample:{concept}:{value}"));
        subsample_indices(manifest, &filter, per_class, seed)
            .into_iter()
            .map(|i| Ok((manifest.records[i].id.clone(), manifest.load_image(i)?.to_tensor())))
            .collect()
    };
    let (pos, neg) = (draw(true)?, draw(false)?);
    if pos.is_empty() || neg.is_empty() {
        return Err(CliError::Data(format!("{concept}: {} positives and {} negatives in the dataset", pos.len(), neg.len())));
    }
    log::info!("{concept}: {} positives, {} negatives, {} neurons", pos.len(), neg.len(), neurons.len());
    Ok(ConceptDataset::collect(model, &concept, neurons, &pos, &neg)?)
}

pub fn scan(ctx: &Context, args: &ScanArgs, m: &ArgMatches) -> Result<(), CliError> {
    let args = section_args(ctx, args, m, "scan", false)?;
    ctx.echo("scan", &args, None)?;
    let metrics = if args.metric == "all" { Metric::ALL.to_vec() } else { vec![parse::<Metric>(&args.metric)?] };
    let scope: NeuronScope = parse(&args.scope)?;
    let concept = args.concept.as_deref().ok_or_else(|| CliError::Usage("scan needs --concept".into()))?;
    let model = load_model(ctx.require(&args.model, "model")?)?;
    let manifest = load_manifest(ctx.require(&args.data, "data")?)?;
    let ds = concept_dataset(ctx, &model, &manifest, concept, &scope, args.per_class)?;
    let mut records = Vec::new();
    for metric in metrics {
        let t = Instant::now();
        let r = scan_model(&model, &ds, metric)?;
        let best = r.iter().map(|r| r.value).fold(f64::NEG_INFINITY, f64::max);
        log::info!("{metric}: {} neurons scanned in {:.1?}, max {best:.4}", r.len(), t.elapsed());
        records.extend(r);
    }
    let file = fs::File::create(ctx.run_dir.join("sensitivity.csv"))?;
    write_sensitivity_csv(&records, std::io::BufWriter::new(file))?;
    Ok(())
}

pub fn export_dump(ctx: &Context, args: &DumpArgs, m: &ArgMatches) -> Result<(), CliError> {
    let args = section_args(ctx, args, m, "export-dump", false)?;
    ctx.echo("export-dump", &args, None)?;
    let scope: NeuronScope = parse(&args.scope)?;
    let concept = args.concept.as_deref().ok_or_else(|| CliError::Usage("export-dump needs --concept".into()))?;
    let model = load_model(ctx.require(&args.model, "model")?)?;
    let manifest = load_manifest(ctx.require(&args.data, "data")?)?;
    let ds = concept_dataset(ctx, &model, &manifest, concept, &scope, args.per_class)?;
    let path = ctx.run_dir.join("activations.dump");
    ds.export_dump(&path)?;
    log::info!("dump written to {}", path.display());
    Ok(())
}

pub fn select(ctx: &Context, args: &SelectArgs, m: &ArgMatches) -> Result<(), CliError> {
    let mut args = section_args(ctx, args, m, "select", true)?;
    args.harness = crate::reparse_harness(m);
    let metric: Metric = parse(&args.metric)?;
    let method: ValueMethod = parse(&args.method)?;
    let wb = workbench(ctx, &args.model, &args.data, &args.harness)?;
    ctx.echo("select", &args, Some(&wb.config))?;
    let concepts = concepts_or(&wb, &args.concepts, &wb.config.relevant)?;
    let mut table = Table::new("selections", &["concept", "metric", "method", "neurons", "threshold", "validation_score", "file"]);
    for c in &concepts {
        let split = wb.split(c)?;
        match wb.concept_selection(&split, metric, method)? {
            Some(sel) => {
                let file = format!("selection-{}.json", slug(c));
                sel.save(&ctx.run_dir.join(&file))?;
                log::info!(
                    "{c}: {} neurons, threshold {:.4}, validation {:.4}",
                    sel.selection.neurons.len(),
                    sel.selection.threshold,
                    sel.selection.validation_score
                );
                table.push(vec![
                    c.clone(),
                    metric.to_string(),
                    method.to_string(),
                    sel.selection.neurons.len().to_string(),
                    format!("{:.6}", sel.selection.threshold),
                    fmt_ratio(Some(sel.selection.validation_score)),
                    file,
                ]);
            }
            None => {
                log::warn!("{c}: no neuron above the selection floor");
                table.push(vec![
                    c.clone(),
                    metric.to_string(),
                    method.to_string(),
                    "0".into(),
                    String::new(),
                    String::new(),
                    String::new(),
                ]);
            }
        }
    }
    write_table(&ctx.run_dir, &table)
}

pub fn inject(ctx: &Context, args: &InjectArgs, m: &ArgMatches) -> Result<(), CliError> {
    let args = section_args(ctx, args, m, "inject", false)?;
    ctx.echo("inject", &args, None)?;
    let state: ConceptState = parse(&args.state)?;
    let filter = LabelFilter::parse(&args.filter).map_err(|e| CliError::Usage(e.to_string()))?;
    for (c, _) in &filter.terms {
        dag().canonical(c)?;
    }
    let model = load_model(ctx.require(&args.model, "model")?)?;
    let manifest = load_manifest(ctx.require(&args.data, "data")?)?;
    let mut plans: Vec<InjectionPlan> = args.plans.iter().map(|p| InjectionPlan::load(p)).collect::<Result<_, _>>()?;
    for p in &args.selections {
        plans.push(ConceptSelection::load(p)?.plan(state).clone());
    }
    let compiled = CompiledPlan::new(&model, &plans.iter().collect::<Vec<_>>())?;
    let rows = subsample_indices(&manifest, &filter, args.limit, seeds::derive_named(ctx.seed, "inject"));
    if rows.is_empty() {
        return Err(CliError::Data(format!("no sample matches '{}'", args.filter)));
    }
    let task = dag().task();
    let mut table = Table::new("injection", &["sample_id", task, "plain_score", "plain_label", "injected_score", "injected_label"]);
    let mut changed = 0;
    for &r in &rows {
        let rec = &manifest.records[r];
        let x = manifest.load_image(r)?.to_tensor();
        let plain = model.score(&x)?;
        let injected = injected_score(&model, &x, &compiled)?;
        changed += usize::from(decide(plain) != decide(injected));
        table.push(vec![
            rec.id.clone(),
            rec.label(task).map_or(String::new(), |b| b.to_string()),
            format!("{plain:.6}"),
            decide(plain).to_string(),
            format!("{injected:.6}"),
            decide(injected).to_string(),
        ]);
    }
    log::info!("{} plans, {} neurons; {changed} of {} labels changed", plans.len(), compiled.neurons().len(), rows.len());
    write_table(&ctx.run_dir, &table)
}

pub fn probe(ctx: &Context, args: &ProbeArgs, m: &ArgMatches) -> Result<(), CliError> {
    let mut args = section_args(ctx, args, m, "probe", true)?;
    args.harness = crate::reparse_harness(m);
    let wb = workbench(ctx, &args.model, &args.data, &args.harness)?;
    ctx.echo("probe", &args, Some(&wb.config))?;
    let concepts = concepts_or(&wb, &args.concepts, &[])?;
    let mut table = Table::new("probes", &["concept", "test_accuracy", "train_size", "test_size", "file"]);
    for (probe, s) in train_probes(&wb, &concepts)? {
        let file = format!("probe-{}.probe", slug(&s.concept));
        probe.save(&ctx.run_dir.join(&file))?;
        log::info!("{}: held-out accuracy {:.4} ({} test samples)", s.concept, s.test_accuracy, s.test_size);
        table.push(vec![s.concept.clone(), fmt_ratio(Some(s.test_accuracy)), s.train_size.to_string(), s.test_size.to_string(), file]);
    }
    write_table(&ctx.run_dir, &table)
}

fn experiment_common(ctx: &Context, common: &mut ExperimentArgs, m: &ArgMatches) -> Result<(Workbench, HarnessConfig), CliError> {
    common.harness = crate::reparse_harness(m);
    let wb = workbench(ctx, &common.model, &common.data, &common.harness)?;
    let cfg = wb.config.clone();
    Ok((wb, cfg))
}

pub fn experiment(ctx: &Context, kind: &ExperimentKind, m: &ArgMatches) -> Result<(), CliError> {
    let t = Instant::now();
    let report = match kind {
        ExperimentKind::Metrics(a) => {
            let mut a: MetricsArgs = section_args(ctx, a, m, "experiment.metrics", true)?;
            let (wb, cfg) = experiment_common(ctx, &mut a.common, m)?;
            ctx.echo("experiment", &a, Some(&cfg))?;
            let metrics: Vec<Metric> = a.metrics.iter().map(|s| parse(s)).collect::<Result<_, _>>()?;
            let concepts = concepts_or(&wb, &a.common.concepts, &cfg.relevant)?;
            metric_comparison(&wb, &concepts, &metrics)?.report(&wb)
        }
        ExperimentKind::Activation(a) => {
            let mut a = section_args(ctx, a, m, "experiment.activation", true)?;
            let (wb, cfg) = experiment_common(ctx, &mut a, m)?;
            ctx.echo("experiment", &a, Some(&cfg))?;
            activation_method_comparison(&wb, &concepts_or(&wb, &a.concepts, &cfg.relevant)?)?.report(&wb)
        }
        ExperimentKind::Neurons(a) => {
            let mut a = section_args(ctx, a, m, "experiment.neurons", true)?;
            let (wb, cfg) = experiment_common(ctx, &mut a, m)?;
            ctx.echo("experiment", &a, Some(&cfg))?;
            neuron_count_sweep(&wb, &concepts_or(&wb, &a.concepts, &cfg.relevant)?, &cfg.counts)?.report(&wb)
        }
        ExperimentKind::Data(a) => {
            let mut a = section_args(ctx, a, m, "experiment.data", true)?;
            let (wb, cfg) = experiment_common(ctx, &mut a, m)?;
            ctx.echo("experiment", &a, Some(&cfg))?;
            data_efficiency_sweep(&wb, &concepts_or(&wb, &a.concepts, &cfg.relevant)?, &cfg.sizes)?.report(&wb)
        }
        ExperimentKind::Relation(a) => {
            let mut a: RelationArgs = section_args(ctx, a, m, "experiment.relation", true)?;
            let (wb, cfg) = experiment_common(ctx, &mut a.common, m)?;
            ctx.echo("experiment", &a, Some(&cfg))?;
            relation_experiment(&wb, &a.first, &a.second)?.report(&wb)
        }
        ExperimentKind::Correction(a) => {
            let mut a: CorrectionArgs = section_args(ctx, a, m, "experiment.correction", true)?;
            let (wb, cfg) = experiment_common(ctx, &mut a.common, m)?;
            ctx.echo("experiment", &a, Some(&cfg))?;
            let fallback: Vec<String> = CORRECTION_CONCEPTS.map(String::from).to_vec();
            correction_experiment(&wb, &concepts_or(&wb, &a.common.concepts, &fallback)?)?.report(&wb)
        }
        ExperimentKind::Census(a) => {
            let mut a = section_args(ctx, a, m, "experiment.census", true)?;
            let (wb, cfg) = experiment_common(ctx, &mut a, m)?;
            ctx.echo("experiment", &a, Some(&cfg))?;
            if !a.concepts.is_empty() {
                return Err(CliError::Usage("census takes its concepts from [harness] relevant and nonrelevant".into()));
            }
            census(&wb, &cfg.relevant, &cfg.nonrelevant)?.report(&wb)
        }
    };
    log::info!("{} finished in {:.1?}", report.id, t.elapsed());
    write_report(ctx, &report)
}

fn load_selections(dir: &Path) -> Result<Vec<ConceptSelection>, CliError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("selection-") && n.ends_with(".json")))
        .collect();
    paths.sort();
    paths.iter().map(|p| Ok(ConceptSelection::load(p)?)).collect()
}

pub fn serve(ctx: &Context, args: &ServeArgs, m: &ArgMatches) -> Result<(), CliError> {
    let mut args = section_args(ctx, args, m, "serve", true)?;
    args.harness = crate::reparse_harness(m);
    let addr: SocketAddr = format!("{}:{}", args.host, args.port)
        .parse()
        .or_else(|_| format!("[{}]:{}", args.host, args.port).parse())
        .map_err(|_| CliError::Usage(format!("bad bind address {}:{}", args.host, args.port)))?;
    let wb = workbench(ctx, &args.model, &args.data, &args.harness)?;
    ctx.echo("serve", &args, Some(&wb.config))?;
    let selections = match &args.selections {
        Some(dir) => load_selections(dir)?,
        None => {
            let mut v = Vec::new();
            for c in wb.config.relevant.clone() {
                let split = wb.split(&c)?;
                match wb.concept_selection(&split, Metric::Intersection, ValueMethod::Median)? {
                    Some(sel) => v.push(sel),
                    None => log::warn!("{c}: no selection"),
                }
            }
            v
        }
    };
    let probes: Vec<Probe> = if args.probes.is_empty() {
        train_probes(&wb, &wb.config.relevant.clone())?.into_iter().map(|p| p.0).collect()
    } else {
        args.probes.iter().map(|p| Probe::load(p)).collect::<Result<_, _>>()?
    };
    log::info!("{} selections, {} probes", selections.len(), probes.len());
    let state = AppState::new(wb, selections, probes).map_err(|e| CliError::Data(e.to_string()))?;
    if !addr.ip().is_loopback() {
        log::warn!("binding {addr}: the API has no authentication");
    }
    percept_service::serve_blocking(state, addr).map_err(|e| CliError::Data(format!("serve {addr}: {e}")))
}
