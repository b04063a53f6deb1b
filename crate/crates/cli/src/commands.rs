use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use usda::analysis::{self, TraceRecord};
use usda::corpus::{
    self, CorpusFormat, CorpusSplit, DaVocab, Dialogue, LoadOptions, SplitManifest, SplitName,
};
use usda::dar_cluster::DEFAULT_STOP_WORDS;
use usda::model::{DarKind, UsdaModel};
use usda::pretrain::{self, ConfounderOptions, GenerationOptions, PretrainModel, PretrainSample};
use usda::synthetic::{self, SyntheticSpec};
use usda::trainer::{self, EpochRecord, TrainMode};
use usda::{EncoderConfig, EvalReport, Vocab};

use crate::config::{self, PretrainFile, TrainFile};
use crate::manifest::{sidecar, RunManifest};
use crate::{AnalyzeCommand, Cli, Command, Global, SplitArgs};

const MANIFEST: &str = "manifest.json";

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let g = &cli.global;
    match cli.command {
        Command::GenSynthetic(a) => gen_synthetic(g, a),
        Command::GenPretrain(a) => gen_pretrain(g, a),
        Command::Pretrain(a) => run_pretrain(g, a),
        Command::Train(a) => run_train(g, a),
        Command::Eval(a) => run_eval(g, a),
        Command::Analyze(a) => match a {
            AnalyzeCommand::Impact(a) => analyze_impact(a),
            AnalyzeCommand::Gates(a) => analyze_gates(a),
            AnalyzeCommand::PerClass(a) => analyze_per_class(a),
            AnalyzeCommand::Turns(a) => analyze_turns(g, a),
            AnalyzeCommand::Clusters(a) => analyze_clusters(g, a),
        },
    }
}

fn resolve(global: &Global, path: &Path) -> PathBuf {
    match &global.data_dir {
        Some(dir) if path.is_relative() => dir.join(path),
        _ => path.to_path_buf(),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn parse_split(name: &str) -> Result<Option<SplitName>> {
    if name == "all" {
        return Ok(None);
    }
    name.parse().map(Some).map_err(|e: String| anyhow!(e))
}

fn gen_synthetic(global: &Global, a: crate::GenSyntheticArgs) -> Result<()> {
    let defaults = SyntheticSpec::default();
    let spec = SyntheticSpec {
        size: a.size,
        seed: global.seed.unwrap_or(0),
        rule: a.rule,
        signal: a.signal.unwrap_or(defaults.signal),
        min_turns: a.min_turns.unwrap_or(defaults.min_turns),
        max_turns: a.max_turns.unwrap_or(defaults.max_turns),
        ..defaults
    };
    let dialogues = synthetic::generate(&spec)?;
    corpus::write_dialogues_file(&a.out, &dialogues, Some(&synthetic::da_vocab()))?;
    let mut m = RunManifest::new("gen-synthetic", &spec, spec.seed)?;
    m.outputs.push(a.out.display().to_string());
    m.write(&sidecar(&a.out))?;
    log::info!("wrote {} dialogues to {}", dialogues.len(), a.out.display());
    Ok(())
}

/// Dialogues of one file, optionally restricted to one split of it.
fn read_subset(
    path: &Path,
    split: Option<&str>,
    split_file: Option<&Path>,
) -> Result<(Vec<Dialogue>, Option<DaVocab>)> {
    match split {
        None | Some("all") => {
            let file = corpus::read_dialogues(path)?;
            Ok((file.dialogues, file.da_vocab))
        }
        Some(name) => {
            let split_file =
                split_file.ok_or_else(|| anyhow!("--split {name} needs --split-file"))?;
            let which = parse_split(name)?.expect("not all");
            let c = load_split(path, Some(split_file), [8, 1, 1], 0, false)?;
            Ok((c.split(which).to_vec(), c.da_vocab))
        }
    }
}

fn load_split(
    path: &Path,
    split_file: Option<&Path>,
    ratios: [usize; 3],
    seed: u64,
    stratified: bool,
) -> Result<CorpusSplit> {
    let manifest = split_file.map(SplitManifest::read).transpose()?;
    let format = if path.is_dir() {
        CorpusFormat::SplitDir
    } else {
        CorpusFormat::Jsonl
    };
    let options = LoadOptions {
        ratios,
        seed,
        stratified,
        manifest,
    };
    corpus::load_corpus(path, format, &options)
        .with_context(|| format!("loading {}", path.display()))
}

fn gen_pretrain(global: &Global, a: crate::GenPretrainArgs) -> Result<()> {
    let data = resolve(global, &a.data);
    let (dialogues, _) = read_subset(&data, a.split.as_deref(), a.split_file.as_deref())?;
    let mut srs = false;
    let mut did = false;
    for task in a.tasks.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        match task {
            "srs" => srs = true,
            "did" => did = true,
            other => bail!("unknown pre-training task {other:?}"),
        }
    }
    if !(srs || did) {
        bail!("--tasks selects no task");
    }
    let options = GenerationOptions {
        srs,
        did,
        neg_ratio: a.neg_ratio,
        seed: global.seed.unwrap_or(0),
        confounder: ConfounderOptions {
            threshold: a.threshold,
            sim_min: a.sim_min,
            direction: a.threshold_direction,
            ..Default::default()
        },
    };
    let samples = pretrain::generate_samples(&dialogues, &options)?;
    for s in &samples {
        s.check()?;
    }
    let file = fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut w = BufWriter::new(file);
    pretrain::write_samples(&mut w, &samples)?;
    w.flush()?;
    let mut m = RunManifest::new("gen-pretrain", &options, options.seed)?;
    m.add_data(&data)?;
    if let Some(f) = &a.split_file {
        m.add_data(f)?;
    }
    m.outputs.push(a.out.display().to_string());
    m.write(&sidecar(&a.out))?;
    log::info!(
        "wrote {} samples from {} dialogues",
        samples.len(),
        dialogues.len()
    );
    Ok(())
}

fn read_sample_file(path: &Path) -> Result<Vec<PretrainSample>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    pretrain::read_samples(BufReader::new(file))
        .with_context(|| format!("reading {}", path.display()))
}

#[derive(Serialize)]
struct PretrainMetrics<'a> {
    manifest: &'a str,
    num_samples: usize,
    history: &'a [pretrain::PretrainEpoch],
}

fn run_pretrain(global: &Global, a: crate::PretrainArgs) -> Result<()> {
    let mut cfg: PretrainFile = config::load(a.config.as_deref())?;
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    if let Some(p) = a.data {
        cfg.data = Some(p);
    }
    if let Some(p) = a.valid {
        cfg.valid = Some(p);
    }
    if let Some(e) = a.epochs {
        cfg.pretrain.epochs = e;
    }
    cfg.pretrain.seed = cfg.seed;
    let data = resolve(
        global,
        cfg.data
            .as_deref()
            .ok_or_else(|| anyhow!("no pre-training data given"))?,
    );
    let samples = read_sample_file(&data)?;
    let valid_path = cfg.valid.as_deref().map(|p| resolve(global, p));
    let valid = valid_path
        .as_deref()
        .map(read_sample_file)
        .transpose()?
        .unwrap_or_default();

    let vocab = Vocab::build(
        samples.iter().map(|s| &s.dialogue),
        cfg.vocab.min_count,
        cfg.vocab.max_size,
    );
    let mut model = PretrainModel::new(cfg.encoder.clone(), vocab, cfg.seed)?;
    let history = pretrain::pretrain(&mut model, &samples, &valid, &cfg.pretrain)?;

    create_dir(&a.out)?;
    let mut ckpt = model.to_checkpoint();
    ckpt.manifest = Some(MANIFEST.to_string());
    ckpt.save(&a.out.join("pretrain.json"))?;
    write_json(
        &a.out.join("metrics.json"),
        &PretrainMetrics {
            manifest: MANIFEST,
            num_samples: samples.len(),
            history: &history,
        },
    )?;
    let mut m = RunManifest::new("pretrain", &cfg, cfg.seed)?;
    m.add_data(&data)?;
    if let Some(p) = &valid_path {
        m.add_data(p)?;
    }
    m.outputs = vec!["pretrain.json".into(), "metrics.json".into()];
    m.write(&a.out.join(MANIFEST))?;
    if let Some(last) = history.last().and_then(|h| h.valid.as_ref()) {
        println!(
            "SRS\tF1={:.4}\nDID\tF1={:.4}",
            last.srs.macro_f1, last.did.macro_f1
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainMetrics<'a> {
    manifest: &'a str,
    mode: TrainMode,
    best_epoch: Option<usize>,
    best_selection: Option<f64>,
    history: &'a [EpochRecord],
    valid: Option<EvalReport>,
    test: Option<EvalReport>,
}

/// Evaluation flavour implied by the model's dialogue-act head.
fn eval_mode(model: &UsdaModel) -> TrainMode {
    match model.config.dar {
        DarKind::Crf => TrainMode::Mtl,
        DarKind::Cluster => TrainMode::StlUse,
    }
}

fn strip_labels(ds: &mut [Dialogue]) {
    for d in ds {
        d.da_labels = None;
    }
}

fn run_train(global: &Global, a: crate::TrainArgs) -> Result<()> {
    let mut cfg: TrainFile = config::load(a.config.as_deref())?;
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = a.mode {
        cfg.train.mode = mode;
    }
    if let Some(p) = a.data {
        cfg.data.path = Some(p);
    }
    if let Some(e) = a.epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(l) = a.lambda {
        cfg.train.lambda = l;
    }
    cfg.train.seed = cfg.seed;
    cfg.model.dar = cfg.train.mode.dar_kind();
    cfg.train.validate()?;

    let data = resolve(
        global,
        cfg.data
            .path
            .as_deref()
            .ok_or_else(|| anyhow!("no training data given"))?,
    );
    let split_file = cfg.data.split_file.as_deref().map(|p| resolve(global, p));
    let mut split = load_split(
        &data,
        split_file.as_deref(),
        cfg.data.ratios,
        cfg.seed,
        cfg.data.stratified,
    )?;
    if split.train.is_empty() {
        bail!("training split is empty");
    }
    if cfg.model.dar == DarKind::Crf {
        let corpus_da = split
            .num_da()
            .ok_or_else(|| anyhow!("mode {} needs dialogue-act labels", cfg.train.mode))?;
        if cfg.model.num_da == 0 {
            cfg.model.num_da = corpus_da;
        } else if cfg.model.num_da != corpus_da {
            bail!(
                "config num_da {} but the corpus has {corpus_da} acts",
                cfg.model.num_da
            );
        }
    }
    if cfg.train.mode == TrainMode::Clu {
        strip_labels(&mut split.train);
        strip_labels(&mut split.valid);
    }

    let mut model = match &a.init_from {
        Some(path) => {
            let pre =
                PretrainModel::load(path).with_context(|| format!("loading {}", path.display()))?;
            let requested = EncoderConfig {
                vocab_size: pre.config.vocab_size,
                ..cfg.model.encoder.clone()
            };
            if pre.config != requested {
                log::warn!("encoder settings taken from the pre-trained checkpoint");
            }
            cfg.model.encoder = pre.config.clone();
            pre.joint_model(cfg.model.clone(), cfg.seed)?
        }
        None => {
            let vocab = Vocab::build(&split.train, cfg.vocab.min_count, cfg.vocab.max_size);
            UsdaModel::new(cfg.model.clone(), vocab, cfg.seed)?
        }
    };
    cfg.model = model.config.clone();
    model.da_vocab = split.da_vocab.clone();

    let outcome = trainer::train_with(&mut model, &split.train, &split.valid, &cfg.train, |r| {
        log::info!(
            "epoch {}: loss={:.5} use={:.5} dar={:.5} selection={:.4}",
            r.epoch,
            r.train_loss,
            r.train_use_loss,
            r.train_dar_loss,
            r.selection
        )
    })?;
    let mode = eval_mode(&model);
    let evaluate = |ds: &[Dialogue]| -> Result<Option<EvalReport>> {
        if ds.is_empty() {
            return Ok(None);
        }
        Ok(Some(trainer::evaluate(&model, ds, mode)?))
    };
    let valid = evaluate(&split.valid)?;
    let test = evaluate(&split.test)?;

    create_dir(&a.out)?;
    let mut ckpt = model.to_checkpoint();
    ckpt.manifest = Some(MANIFEST.to_string());
    ckpt.save(&a.out.join("model.json"))?;
    split.manifest().write(&a.out.join("split.json"))?;
    write_json(
        &a.out.join("metrics.json"),
        &TrainMetrics {
            manifest: MANIFEST,
            mode: cfg.train.mode,
            best_epoch: outcome.best_epoch,
            best_selection: outcome.best_selection,
            history: &outcome.history,
            valid: valid.clone(),
            test: test.clone(),
        },
    )?;
    let mut report = String::new();
    for (name, r) in [("valid", &valid), ("test", &test)] {
        if let Some(r) = r {
            writeln!(report, "# {name} ({} dialogues)", r.num_dialogues)?;
            report.push_str(&r.render());
        }
    }
    write_text(&a.out.join("report.txt"), &report)?;

    let mut m = RunManifest::new("train", &cfg, cfg.seed)?;
    m.add_data(&data)?;
    if let Some(p) = &split_file {
        m.add_data(p)?;
    }
    if let Some(path) = &a.init_from {
        let parent_manifest = path
            .parent()
            .map(|p| p.join(MANIFEST))
            .filter(|p| p.exists());
        m.add_lineage(
            "pretrain",
            path,
            parent_manifest.map(|p| p.display().to_string()),
        )?;
    }
    m.outputs = ["model.json", "split.json", "metrics.json", "report.txt"]
        .map(String::from)
        .to_vec();
    m.write(&a.out.join(MANIFEST))?;
    print!("{report}");
    Ok(())
}

/// The requested split of `data`, using the split file written next to the
/// checkpoint when none is given.
fn eval_dialogues(
    global: &Global,
    checkpoint: &Path,
    data: &Path,
    s: &SplitArgs,
) -> Result<(Vec<Dialogue>, Option<PathBuf>)> {
    let data = resolve(global, data);
    let which = parse_split(&s.split)?;
    let split_file = s.split_file.clone().or_else(|| {
        let p = checkpoint.parent()?.join("split.json");
        p.exists().then_some(p)
    });
    match which {
        None => Ok((corpus::read_dialogues(&data)?.dialogues, None)),
        Some(w) => {
            let Some(f) = split_file else {
                bail!("--split {} needs a split file", s.split);
            };
            let c = load_split(&data, Some(&f), [8, 1, 1], 0, false)?;
            Ok((c.split(w).to_vec(), Some(f)))
        }
    }
}

fn load_model(path: &Path) -> Result<UsdaModel> {
    UsdaModel::load(path).with_context(|| format!("loading {}", path.display()))
}

#[derive(Serialize)]
struct EvalMetrics<'a> {
    manifest: &'a str,
    split: &'a str,
    report: &'a EvalReport,
}

fn run_eval(global: &Global, a: crate::EvalArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let (dialogues, split_file) = eval_dialogues(global, &a.checkpoint, &a.data, &a.split)?;
    let report = trainer::evaluate(&model, &dialogues, eval_mode(&model))?;
    print!("{}", report.render());

    let mut m = RunManifest::new(
        "eval",
        &serde_json::json!({ "split": a.split.split, "tag": a.tag }),
        global.seed.unwrap_or(0),
    )?;
    m.add_data(&resolve(global, &a.data))?;
    if let Some(f) = &split_file {
        m.add_data(f)?;
    }
    let ckpt_manifest = a
        .checkpoint
        .parent()
        .map(|p| p.join(MANIFEST))
        .filter(|p| p.exists());
    m.add_lineage(
        "train",
        &a.checkpoint,
        ckpt_manifest.map(|p| p.display().to_string()),
    )?;
    let mut manifest_path = None;
    if let Some(out) = &a.out {
        let mp = sidecar(out);
        let name = mp
            .file_name()
            .expect("file name")
            .to_string_lossy()
            .into_owned();
        write_json(
            out,
            &EvalMetrics {
                manifest: &name,
                split: &a.split.split,
                report: &report,
            },
        )?;
        m.outputs.push(out.display().to_string());
        manifest_path = Some(mp);
    }
    if let Some(path) = &a.traces {
        let records = analysis::collect_traces(&model, &dialogues, &a.tag)?;
        let file =
            fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = BufWriter::new(file);
        analysis::write_traces(&mut w, &records)?;
        w.flush()?;
        m.outputs.push(path.display().to_string());
        manifest_path.get_or_insert_with(|| sidecar(path));
    }
    if let Some(mp) = manifest_path {
        m.write(&mp)?;
    }
    Ok(())
}

fn load_traces(path: &Path) -> Result<Vec<TraceRecord>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    analysis::read_traces(BufReader::new(file))
        .with_context(|| format!("reading {}", path.display()))
}

fn join(acts: &[usize]) -> String {
    acts.iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn analyze_impact(a: crate::ImpactArgs) -> Result<()> {
    let records = load_traces(&a.traces)?;
    let mut out = String::from("acts\tclass\timpact\tsupport\n");
    match &a.query {
        Some(q) => {
            let acts: Vec<usize> = q
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .with_context(|| format!("bad act {s:?} in --query"))
                })
                .collect::<Result<_>>()?;
            let support = records
                .iter()
                .filter(|r| !analysis::occurrences(&r.predicted_da, &acts).is_empty())
                .count();
            let score = analysis::impact_score(&records, &acts, a.class, a.gate_convention)?;
            let shown = score.map_or("absent".to_string(), |s| format!("{s:.6}"));
            writeln!(out, "{}\t{}\t{shown}\t{support}", join(&acts), a.class)?;
        }
        None => {
            let ranked = analysis::top_subsequences(
                &records,
                a.class,
                a.max_len,
                a.top_n,
                a.min_support,
                a.gate_convention,
            )?;
            for s in ranked {
                writeln!(
                    out,
                    "{}\t{}\t{:.6}\t{}",
                    join(&s.acts),
                    a.class,
                    s.impact,
                    s.support
                )?;
            }
        }
    }
    write_text(&a.out, &out)
}

fn analyze_gates(a: crate::GatesArgs) -> Result<()> {
    let records = load_traces(&a.traces)?;
    let groups = analysis::gate_distribution(&records, a.bins, a.gate_convention)?;
    let mut out = String::from("group\tcount\tmean\tmedian\tq1\tq3\tmin\tmax\n");
    for (tag, s) in &groups {
        writeln!(
            out,
            "{tag}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            s.count, s.mean, s.median, s.q1, s.q3, s.min, s.max
        )?;
    }
    out.push_str("\ngroup\tbin_low\tbin_high\tcount\n");
    for (tag, s) in &groups {
        for (lo, hi, c) in &s.histogram {
            writeln!(out, "{tag}\t{lo:.4}\t{hi:.4}\t{c}")?;
        }
    }
    write_text(&a.out, &out)
}

fn analyze_per_class(a: crate::PerClassArgs) -> Result<()> {
    let records = load_traces(&a.traces)?;
    let report = analysis::per_class(&records, a.num_da)?;
    let mut out = String::from("task\tclass\tprecision\trecall\tf1\tsupport\tmean_gate\n");
    for c in &report.satisfaction.per_class {
        let gate = report
            .mean_gate
            .get(&c.class)
            .map_or(String::new(), |g| format!("{g:.6}"));
        writeln!(
            out,
            "use\t{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{gate}",
            c.class, c.precision, c.recall, c.f1, c.support
        )?;
    }
    if let Some(da) = &report.dialogue_acts {
        for c in &da.per_class {
            writeln!(
                out,
                "dar\t{}\t{:.6}\t{:.6}\t{:.6}\t{}\t",
                c.class, c.precision, c.recall, c.f1, c.support
            )?;
        }
    }
    write_text(&a.out, &out)
}

fn analyze_turns(global: &Global, a: crate::TurnsArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let (dialogues, _) = eval_dialogues(global, &a.checkpoint, &a.data, &a.split)?;
    let points = analysis::turn_sensitivity(&model, &dialogues, a.max_turns)?;
    let mut out = String::from("turns\tmacro_f1\taccuracy\n");
    for p in points {
        writeln!(out, "{}\t{:.6}\t{:.6}", p.turns, p.macro_f1, p.accuracy)?;
    }
    write_text(&a.out, &out)
}

fn analyze_clusters(global: &Global, a: crate::ClustersArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let (dialogues, _) = eval_dialogues(global, &a.checkpoint, &a.data, &a.split)?;
    let clusters = model.cluster_top_words(&dialogues, DEFAULT_STOP_WORDS, a.top)?;
    let mut out = String::from("cluster\tturns\trank\tword\tcount\n");
    for c in clusters {
        for (rank, (w, n)) in c.words.iter().enumerate() {
            writeln!(out, "{}\t{}\t{}\t{w}\t{n}", c.cluster, c.turns, rank + 1)?;
        }
    }
    write_text(&a.out, &out)
}
