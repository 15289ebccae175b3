use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use log::info;

use gpq::data::{split_protocol1, split_protocol2, synth_gaussian_mixture, Dataset, ProtocolSplit};
use gpq::encoder::FeatureEncoder;
use gpq::eval::{evaluate_queries, EvalReport, Query};
use gpq::pipeline;
use gpq::trainer::{ProtoUpdate, Trainer};
use gpq::{GpqError, GpqModel, RetrievalIndex, TrainConfig};

use crate::manifest::RunManifest;
use crate::{
    Baseline, BuildArgs, Command, EvalArgs, Protocol, ProtoUpdateArg, QueryArgs, ReportFormat, SplitArgs, Switch,
    SynthArgs, TrainArgs,
};

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(&a),
        Command::Split(a) => split(&a),
        Command::Train(a) => train(&a),
        Command::Build(a) => build(&a),
        Command::Query(a) => query(&a),
        Command::Eval(a) => eval(&a),
    }
}

/// GPQD binary, or CSV when the extension is `.csv`.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let ds = if is_csv {
        let file = File::open(path).map_err(GpqError::from)?;
        Dataset::from_csv(file, None)
    } else {
        Dataset::load(path)
    };
    ds.with_context(|| format!("cannot load dataset {}", path.display()))
}

fn load_split(path: &Path) -> Result<ProtocolSplit> {
    ProtocolSplit::load(path).with_context(|| format!("cannot load split {}", path.display()))
}

fn load_model(path: &Path) -> Result<GpqModel> {
    GpqModel::load(path).with_context(|| format!("cannot load model {}", path.display()))
}

fn load_index(path: &Path) -> Result<RetrievalIndex> {
    RetrievalIndex::load(path).with_context(|| format!("cannot load index {}", path.display()))
}

fn check_input_dim(model: &GpqModel, ds: &Dataset) -> Result<()> {
    if model.encoder.input_dim() != ds.dim {
        return Err(GpqError::ShapeMismatch(format!(
            "model expects {}-dim inputs, dataset has {}",
            model.encoder.input_dim(),
            ds.dim
        ))
        .into());
    }
    Ok(())
}

fn check_index(model: &GpqModel, index: &RetrievalIndex) -> Result<()> {
    if model.shape().dim != index.shape().dim {
        return Err(GpqError::ShapeMismatch(format!(
            "model produces {}-dim features, index holds {}-dim codewords",
            model.shape().dim,
            index.shape().dim
        ))
        .into());
    }
    Ok(())
}

fn elapsed(m: &mut RunManifest, phase: &str, start: Instant) {
    m.timings.insert(phase.to_string(), start.elapsed().as_secs_f64());
}

fn synth(a: &SynthArgs) -> Result<()> {
    let start = Instant::now();
    let ds = synth_gaussian_mixture(a.classes as usize, a.per_class as usize, a.dim as usize, a.spread, a.seed)?;
    ds.save(&a.out)
        .with_context(|| format!("cannot write {}", a.out.display()))?;
    let mut m = RunManifest::new("synth");
    m.set("classes", a.classes)
        .set("per_class", a.per_class)
        .set("dim", a.dim)
        .set("spread", a.spread);
    m.seeds.insert("data".into(), a.seed);
    m.output(&a.out)?;
    elapsed(&mut m, "synth", start);
    m.write()?;
    println!(
        "wrote {} items, dim {}, {} classes to {}",
        ds.len(),
        ds.dim,
        ds.num_classes,
        a.out.display()
    );
    Ok(())
}

fn split(a: &SplitArgs) -> Result<()> {
    let start = Instant::now();
    let ds = load_dataset(&a.data)?;
    let split = match a.protocol {
        Protocol::One => split_protocol1(&ds, a.labels_per_class, a.query_per_class, a.seed)?,
        Protocol::Two => split_protocol2(&ds, a.seed)?,
    };
    split
        .save(&a.out)
        .with_context(|| format!("cannot write {}", a.out.display()))?;
    let mut m = RunManifest::new("split");
    m.set("protocol", split.protocol);
    if a.protocol == Protocol::One {
        m.set("labels_per_class", a.labels_per_class)
            .set("query_per_class", a.query_per_class);
    }
    m.seeds.insert("split".into(), a.seed);
    m.input(&a.data)?;
    m.output(&a.out)?;
    elapsed(&mut m, "split", start);
    m.write()?;
    println!(
        "labeled={} unlabeled={} database={} query={}",
        split.labeled.len(),
        split.unlabeled.len(),
        split.database.len(),
        split.query.len()
    );
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut c = TrainConfig {
        alpha: a.alpha,
        beta: a.beta,
        num_codewords: a.num_codewords,
        sub_dim: a.sub_dim,
        hidden: a.hidden,
        lambda1: a.lambda1,
        lambda2: a.lambda2,
        lr: a.lr,
        decay_rate: a.decay_rate,
        decay_interval: a.decay_interval,
        batch_size: a.batch_size,
        epochs: a.epochs,
        seed: a.seed,
        classifier: a.classifier,
        proto_update: match a.proto_update {
            ProtoUpdateArg::Never => ProtoUpdate::Never,
            ProtoUpdateArg::AfterTraining => ProtoUpdate::AfterTraining,
            ProtoUpdateArg::EveryEpoch => ProtoUpdate::EveryEpoch,
        },
        ..TrainConfig::default()
    };
    c.set_bits(a.bits as usize)?;
    c.validate()?;
    Ok(c)
}

pub fn log_path(a: &TrainArgs) -> PathBuf {
    a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.as_os_str().to_os_string();
        p.push(".log");
        PathBuf::from(p)
    })
}

fn train(a: &TrainArgs) -> Result<()> {
    let config = train_config(a)?;
    let start = Instant::now();
    let ds = load_dataset(&a.data)?;
    let split = load_split(&a.split)?;
    let labeled = pipeline::labeled_set(&ds, &split.labeled)?;
    let unlabeled = ds.rows(&split.unlabeled)?;
    let mut m = RunManifest::new("train");
    elapsed(&mut m, "load", start);

    let start = Instant::now();
    let log_file = log_path(a);
    let mut log = BufWriter::new(
        File::create(&log_file).with_context(|| format!("cannot create {}", log_file.display()))?,
    );
    let mut trainer = Trainer::new(&labeled, &unlabeled, config.clone())?;
    for _ in 0..config.epochs {
        let line = trainer.run_epoch()?.log_line();
        info!("{line}");
        writeln!(log, "{line}")?;
    }
    log.flush()?;
    drop(log);
    let state = trainer.finish()?;
    elapsed(&mut m, "train", start);

    state
        .model
        .save(&a.out)
        .with_context(|| format!("cannot write {}", a.out.display()))?;
    m.config = serde_json::from_value(serde_json::to_value(&config)?)?;
    m.set("bits", a.bits);
    m.seeds.insert("encoder".into(), config.seed);
    m.seeds.insert("codebook".into(), config.seed + 1);
    m.seeds.insert("prototypes".into(), config.seed + 2);
    m.seeds.insert("batches".into(), config.seed);
    m.input(&a.data)?;
    m.input(&a.split)?;
    m.output(&a.out)?;
    m.output(&log_file)?;
    m.write()?;
    let shape = state.model.shape();
    println!(
        "wrote {} (M={} K={} d={}, {} bits, {} epochs, {} steps)",
        a.out.display(),
        shape.num_subspaces,
        shape.num_codewords,
        shape.sub_dim,
        shape.code_bits(),
        config.epochs,
        state.step()
    );
    Ok(())
}

fn build(a: &BuildArgs) -> Result<()> {
    let start = Instant::now();
    let model = load_model(&a.model)?;
    let ds = load_dataset(&a.data)?;
    check_input_dim(&model, &ds)?;
    let ids: Vec<u64> = match &a.split {
        Some(p) => load_split(p)?.database,
        None => (0..ds.len() as u64).collect(),
    };
    let alpha = a.alpha.unwrap_or(model.codebook.alpha);
    let update = (a.proto_update == Switch::On).then_some(alpha);
    let index = pipeline::build_index(&model, &ds, &ids, update)?;
    index
        .save(&a.out)
        .with_context(|| format!("cannot write {}", a.out.display()))?;
    let mut m = RunManifest::new("build");
    m.set("proto_update", a.proto_update == Switch::On)
        .set("proto_update_alpha", update)
        .set("items", index.len())
        .set("code_bits", index.shape().code_bits());
    m.input(&a.model)?;
    m.input(&a.data)?;
    if let Some(p) = &a.split {
        m.input(p)?;
    }
    m.output(&a.out)?;
    elapsed(&mut m, "build", start);
    m.write()?;
    println!(
        "indexed {} items at {} bytes per code into {}",
        index.len(),
        index.shape().code_bytes(),
        a.out.display()
    );
    Ok(())
}

/// Headerless CSV of raw vectors.
fn read_vectors(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| GpqError::Parse(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| GpqError::Parse(format!("{} line {}: {e}", path.display(), n + 1)))?;
        let row = rec
            .iter()
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| GpqError::Parse(format!("{} line {}: {e}", path.display(), n + 1)))?;
        rows.push(row);
    }
    Ok(rows)
}

fn query(a: &QueryArgs) -> Result<()> {
    let start = Instant::now();
    let model = load_model(&a.model)?;
    let index = load_index(&a.index)?;
    check_index(&model, &index)?;
    let (names, raws): (Vec<String>, Vec<Vec<f64>>) = match (&a.data, &a.vectors) {
        (Some(data), _) => {
            let ds = load_dataset(data)?;
            (a.ids.iter().map(|i| i.to_string()).collect(), ds.rows(&a.ids)?)
        }
        (None, Some(path)) => {
            let rows = read_vectors(path)?;
            ((1..=rows.len()).map(|i| format!("line {i}")).collect(), rows)
        }
        (None, None) => {
            return Err(GpqError::InvalidConfig("give --data with --ids, or --vectors".into()).into());
        }
    };
    let features = model.features(&raws)?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    for (name, feature) in names.iter().zip(&features) {
        if names.len() > 1 {
            writeln!(out, "# query {name}")?;
        }
        let hits = index.search_topk(feature, a.k as usize)?;
        for (rank, hit) in hits.iter().enumerate() {
            writeln!(out, "{}\t{}\t{:.6}", rank + 1, hit.id, hit.score)?;
        }
    }
    out.flush()?;
    if let Some(path) = &a.manifest {
        let mut m = RunManifest::new("query");
        m.set("k", a.k).set("queries", names.len());
        m.input(&a.model)?;
        m.input(&a.index)?;
        elapsed(&mut m, "query", start);
        fs::write(path, serde_json::to_string_pretty(&m)? + "\n")
            .with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let start = Instant::now();
    let model = load_model(&a.model)?;
    let index = load_index(&a.index)?;
    check_index(&model, &index)?;
    let ds = load_dataset(&a.data)?;
    check_input_dim(&model, &ds)?;
    let split = load_split(&a.split)?;
    let queries: Vec<Query> = pipeline::model_queries(&model, &ds, &split.query)?;
    let per = evaluate_queries(&queries, &index, &pipeline::judge(&ds), a.cutoff, &a.precision_at)?;
    let mut report = EvalReport::from_metrics(&per, &a.precision_at, &index);
    let mut m = RunManifest::new("eval");
    elapsed(&mut m, "eval", start);
    if a.baseline == Baseline::Pq {
        let start = Instant::now();
        let shape = index.shape();
        report.map_baseline = Some(pipeline::baseline_map(
            &ds,
            &split,
            shape.code_bits(),
            shape.num_codewords,
            a.seed,
        )?);
        m.seeds.insert("baseline".into(), a.seed);
        elapsed(&mut m, "baseline", start);
    }
    let text = match a.format {
        ReportFormat::KeyValue => report.to_key_values(),
        ReportFormat::Table => report.to_table(),
    };
    print!("{text}");
    if let Some(path) = &a.out {
        fs::write(path, &text).with_context(|| format!("cannot write {}", path.display()))?;
        m.set("precision_at", &a.precision_at)
            .set("cutoff", a.cutoff)
            .set("baseline", a.baseline == Baseline::Pq);
        m.input(&a.model)?;
        m.input(&a.index)?;
        m.input(&a.data)?;
        m.input(&a.split)?;
        m.output(path)?;
        m.write()?;
    }
    Ok(())
}
