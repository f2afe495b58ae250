use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use bhd_rag::config::RunConfig;
use bhd_rag::corpus::{
    self, apply_refinements, build_corpus, draft_description, load_manifest, read_hu_png, read_volume,
    retrieval_corpus, save_manifest, CorpusBuildOptions, ExpertKnowledge, KeepList, Split, View,
    DEFAULT_DESCRIPTION_TEMPLATE,
};
use bhd_rag::eval::{self, CaseLog, CaseUnit, EvalOptions, ReportRow};
use bhd_rag::featurizer::{featurize_hu, load_features, save_features, FeatureSet};
use bhd_rag::generator::{Backend, BackendKind};
use bhd_rag::orchestrator::{Pipeline, QueryImage, RemovedRetriever};
use bhd_rag::retriever::{build_index, load_head, load_index, save_head, save_index, train};
use bhd_rag::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "bhd-rag", version, about = "Retrieval-augmented BHD diagnosis from chest CT slices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Slice CT volumes into a corpus with baseline features.
    CorpusBuild(CorpusBuildArgs),
    /// Draft descriptions for train slices and apply expert edits.
    Describe(DescribeArgs),
    /// Train the embedding head.
    Train(TrainArgs),
    /// Embed the retrieval corpus into a searchable index.
    Index(CommonArgs),
    /// Diagnose a single image or test slice.
    Query(QueryArgs),
    /// Evaluate the test split.
    Eval(EvalArgs),
    /// Evaluate the test split at several k.
    Sweep(SweepArgs),
    /// Evaluate the retriever x typical-features grid.
    Ablate(EvalArgs),
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum BackendArg {
    Mock,
    Http,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum CaseUnitArg {
    Slice,
    KeySlice,
    PatientMajority,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum RemovedArg {
    RandomK,
    None,
}

#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    head: Option<PathBuf>,
    /// Root directory that manifest image refs are relative to.
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
}

#[derive(Args, Debug)]
struct CorpusBuildArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Directory of `<stem>.json` sidecars with `<stem>.raw` voxels.
    #[arg(long)]
    volumes: Option<PathBuf>,
    #[arg(long)]
    keep_list: Option<PathBuf>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    min_gap: Option<usize>,
    #[arg(long)]
    no_stratify: bool,
}

#[derive(Args, Debug)]
struct DescribeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// JSON object of slice id to refined description.
    #[arg(long)]
    edits: Option<PathBuf>,
    /// Redraft slices that already have a description.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct PipelineArgs {
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    expert: Option<PathBuf>,
    #[arg(long)]
    no_retriever: bool,
    #[arg(long)]
    no_typical_features: bool,
    #[arg(long)]
    same_view_only: bool,
    #[arg(long, value_enum)]
    removed_retriever: Option<RemovedArg>,
    #[arg(long)]
    parallelism: Option<usize>,
}

#[derive(Args, Debug)]
struct QueryArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// 16-bit HU PNG to diagnose.
    #[arg(long, conflicts_with = "slice_id", required_unless_present = "slice_id")]
    image: Option<PathBuf>,
    #[arg(long, default_value = "transverse")]
    view: String,
    /// Test slice from the manifest to diagnose.
    #[arg(long)]
    slice_id: Option<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long, value_enum)]
    case_unit: Option<CaseUnitArg>,
    /// Also write every prompt bundle into the run directory.
    #[arg(long)]
    write_prompts: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    eval: EvalArgs,
    #[arg(long, value_delimiter = ',')]
    ks: Vec<usize>,
}

const DEFAULT_KS: [usize; 6] = [1, 3, 6, 9, 12, 15];

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{report}");
            ExitCode::from(1)
        }
    }
}

/// Output of one subcommand, recorded in its run manifest.
struct Run {
    command: &'static str,
    config: RunConfig,
    dir: PathBuf,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn start(command: &'static str, config: RunConfig) -> Result<Self> {
        config.validate()?;
        let run_id = config.run_id.clone().unwrap_or_else(|| command.to_string());
        let dir = config.paths.output_dir.join(run_id);
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        Ok(Self {
            command,
            config,
            dir,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    fn finish(mut self) -> Result<()> {
        let config_path = self.dir.join("config.toml");
        write_file(&config_path, self.config.to_toml().as_bytes())?;
        self.outputs.push(config_path);
        let manifest = json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": self.config.effective_seed(),
            "inputs": self.inputs,
            "outputs": self.outputs,
        });
        let path = self.dir.join("run.json");
        write_file(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn load_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut c = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if common.seed.is_some() {
        c.seed = common.seed;
    }
    if common.run_id.is_some() {
        c.run_id = common.run_id.clone();
    }
    let p = &mut c.paths;
    for (slot, flag) in [
        (&mut p.manifest, &common.manifest),
        (&mut p.features, &common.features),
        (&mut p.index, &common.index),
        (&mut p.head, &common.head),
        (&mut p.output_dir, &common.output_dir),
    ] {
        if let Some(v) = flag {
            *slot = v.clone();
        }
    }
    if common.images.is_some() {
        p.images = common.images.clone();
    }
    if let Some(b) = common.backend {
        c.backend.kind = match b {
            BackendArg::Mock => BackendKind::Mock,
            BackendArg::Http => BackendKind::Http,
        };
    }
    if let Some(e) = &common.endpoint {
        c.backend.http.endpoint = e.clone();
    }
    if let Some(m) = &common.model {
        c.backend.http.model = m.clone();
    }
    Ok(c.resolve())
}

fn apply_pipeline_args(c: &mut RunConfig, a: &PipelineArgs) {
    if let Some(k) = a.k {
        c.pipeline.k = k;
    }
    if a.expert.is_some() {
        c.paths.expert = a.expert.clone();
    }
    if a.no_retriever {
        c.pipeline.use_retriever = false;
    }
    if a.no_typical_features {
        c.pipeline.use_typical_features = false;
    }
    if a.same_view_only {
        c.pipeline.same_view_only = true;
    }
    if let Some(r) = a.removed_retriever {
        c.pipeline.removed_retriever = match r {
            RemovedArg::RandomK => RemovedRetriever::RandomK,
            RemovedArg::None => RemovedRetriever::NoEvidence,
        };
    }
    if let Some(n) = a.parallelism {
        c.pipeline.parallelism = n;
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::CorpusBuild(a) => corpus_build(a),
        Command::Describe(a) => describe(a),
        Command::Train(a) => train_cmd(a),
        Command::Index(a) => index_cmd(a),
        Command::Query(a) => query(a),
        Command::Eval(a) => evaluate_cmd("eval", a, None),
        Command::Sweep(a) => {
            let ks = a.ks;
            evaluate_cmd("sweep", a.eval, Some(ks))
        }
        Command::Ablate(a) => evaluate_cmd("ablate", a, None),
    }
}

fn corpus_build(a: CorpusBuildArgs) -> Result<()> {
    let mut c = load_config(&a.common)?;
    if a.volumes.is_some() {
        c.paths.volumes = a.volumes.clone();
    }
    if a.keep_list.is_some() {
        c.paths.keep_list = a.keep_list.clone();
    }
    if let Some(f) = a.test_fraction {
        c.corpus.test_fraction = f;
    }
    if let Some(g) = a.min_gap {
        c.corpus.min_gap = g;
    }
    if a.no_stratify {
        c.corpus.stratify = false;
    }
    let mut run = Run::start("corpus-build", c)?;
    let c = run.config.clone();
    let volume_dir = c
        .paths
        .volumes
        .clone()
        .ok_or_else(|| Error::InvalidConfig("corpus-build needs --volumes or paths.volumes".into()))?;

    let mut headers: Vec<PathBuf> = fs::read_dir(&volume_dir)
        .map_err(|e| io_err(&volume_dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    headers.sort();
    if headers.is_empty() {
        return Err(Error::InvalidVolume(format!("no volume sidecars in {}", volume_dir.display())));
    }
    let volumes = headers.iter().map(|h| read_volume(h)).collect::<Result<Vec<_>>>()?;
    run.inputs.extend(headers);
    let keep = match &c.paths.keep_list {
        Some(path) => {
            run.inputs.push(path.clone());
            Some(KeepList::load(path)?)
        }
        None => None,
    };

    let opts = CorpusBuildOptions {
        test_fraction: c.corpus.test_fraction,
        seed: c.effective_seed(),
        min_gap: c.corpus.min_gap,
        stratify: c.corpus.stratify,
    };
    let image_root = c.paths.image_root();
    let entries = build_corpus(&volumes, keep.as_ref(), &opts, &image_root)?;
    let mut features = FeatureSet::new();
    for e in &entries {
        let hu = read_hu_png(&corpus::resolve_image(&image_root, &e.slice.image_ref))?;
        features.insert(
            e.slice_id(),
            featurize_hu(&hu, c.corpus.window_center, c.corpus.window_width)?,
        )?;
    }
    save_manifest(&c.paths.manifest, &entries)?;
    save_features(&c.paths.features, &features)?;
    let n_test = entries.iter().filter(|e| e.slice.split == Split::Test).count();
    println!(
        "{} slices from {} volumes ({} train, {} test)",
        entries.len(),
        volumes.len(),
        entries.len() - n_test,
        n_test
    );
    run.outputs.extend([c.paths.manifest.clone(), c.paths.features.clone(), image_root]);
    run.finish()
}

fn describe(a: DescribeArgs) -> Result<()> {
    let mut c = load_config(&a.common)?;
    if a.edits.is_some() {
        c.paths.edits = a.edits.clone();
    }
    let mut run = Run::start("describe", c)?;
    let c = run.config.clone();
    let manifest = load_manifest(&c.paths.manifest)?;
    run.inputs.push(c.paths.manifest.clone());
    let image_root = c.paths.image_root();
    let backend = c.backend.build()?;

    let mut drafted = 0usize;
    let mut entries = Vec::with_capacity(manifest.len());
    for e in manifest {
        let needs = e.slice.split == Split::Train && (a.overwrite || e.description.trim().is_empty());
        if needs {
            entries.push(draft_description(&e.slice, &image_root, &backend, DEFAULT_DESCRIPTION_TEMPLATE)?);
            drafted += 1;
        } else {
            entries.push(e);
        }
    }
    let mut refined = 0usize;
    if let Some(path) = &c.paths.edits {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let edits: BTreeMap<String, String> = serde_json::from_str(&text)?;
        refined = edits.len();
        entries = apply_refinements(&entries, &edits)?;
        run.inputs.push(path.clone());
    }
    save_manifest(&c.paths.manifest, &entries)?;
    println!("drafted {drafted} description(s), applied {refined} expert edit(s)");
    run.outputs.push(c.paths.manifest.clone());
    run.finish()
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut c = load_config(&a.common)?;
    if let Some(e) = a.epochs {
        c.training.epochs = e;
    }
    if let Some(lr) = a.lr {
        c.training.lr = lr;
    }
    if let Some(b) = a.batch_size {
        c.training.batch_size = b;
    }
    if let Some(d) = a.embed_dim {
        c.training.embed_dim = d;
    }
    let mut run = Run::start("train", c)?;
    let c = run.config.clone();
    let manifest = load_manifest(&c.paths.manifest)?;
    let features = load_features(&c.paths.features)?;
    run.inputs.extend([c.paths.manifest.clone(), c.paths.features.clone()]);
    let records: Vec<_> = manifest
        .iter()
        .filter(|e| e.slice.split == Split::Train)
        .map(|e| e.slice.clone())
        .collect();

    let outcome = train(&records, &features, &c.training)?;
    save_head(&c.paths.head, &outcome.head)?;
    let mut csv = String::from("epoch,loss\n");
    for (i, loss) in outcome.loss_history.iter().enumerate() {
        let _ = writeln!(csv, "{},{loss:.17e}", i + 1);
    }
    let history = run.dir.join("loss_history.csv");
    write_file(&history, csv.as_bytes())?;
    match (outcome.loss_history.first(), outcome.loss_history.last()) {
        (Some(first), Some(last)) => println!(
            "trained {} epochs on {} slices: loss {first:.6} -> {last:.6}",
            outcome.loss_history.len(),
            records.len()
        ),
        _ => println!("0 epochs: wrote initialized head"),
    }
    run.outputs.extend([c.paths.head.clone(), history]);
    run.finish()
}

fn index_cmd(a: CommonArgs) -> Result<()> {
    let c = load_config(&a)?;
    let mut run = Run::start("index", c)?;
    let c = run.config.clone();
    let manifest = load_manifest(&c.paths.manifest)?;
    let features = load_features(&c.paths.features)?;
    let head = load_head(&c.paths.head)?;
    run.inputs.extend([c.paths.manifest.clone(), c.paths.features.clone(), c.paths.head.clone()]);
    let corpus = retrieval_corpus(&manifest);
    let index = build_index(&corpus, &features, &head)?;
    save_index(&c.paths.index, &index)?;
    println!("indexed {} described train slices", index.len());
    run.outputs.push(c.paths.index.clone());
    run.finish()
}

/// Loaded artifacts needed to run the pipeline.
struct Loaded {
    manifest: Vec<corpus::CorpusEntry>,
    features: FeatureSet,
    index: bhd_rag::retriever::CosineIndex,
    head: bhd_rag::retriever::EmbeddingHead,
    expert: ExpertKnowledge,
    backend: Backend,
}

fn load_all(run: &mut Run) -> Result<Loaded> {
    let c = &run.config;
    let backend = c.backend.build()?;
    let manifest = load_manifest(&c.paths.manifest)?;
    let features = load_features(&c.paths.features)?;
    let index = load_index(&c.paths.index)?;
    let head = load_head(&c.paths.head)?;
    let expert = match &c.paths.expert {
        Some(path) => ExpertKnowledge::load(path)?,
        None => ExpertKnowledge::empty(),
    };
    run.inputs.extend([
        c.paths.manifest.clone(),
        c.paths.features.clone(),
        c.paths.index.clone(),
        c.paths.head.clone(),
    ]);
    run.inputs.extend(c.paths.expert.clone());
    Ok(Loaded {
        manifest,
        features,
        index,
        head,
        expert,
        backend,
    })
}

fn query(a: QueryArgs) -> Result<()> {
    let mut c = load_config(&a.common)?;
    apply_pipeline_args(&mut c, &a.pipeline);
    let mut run = Run::start("query", c)?;
    let l = load_all(&mut run)?;
    let c = run.config.clone();
    let pipeline = Pipeline::new(&l.index, &l.head, &l.manifest, c.paths.image_root(), &l.backend)?.with_expert(l.expert.clone());

    let diagnosis = match (&a.image, &a.slice_id) {
        (Some(image), _) => {
            let view = View::parse(&a.view)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown view {:?}", a.view)))?;
            let hu = read_hu_png(image)?;
            let features = featurize_hu(&hu, c.corpus.window_center, c.corpus.window_width)?;
            let slice_id = image
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "query".into());
            run.inputs.push(image.clone());
            let q = QueryImage {
                slice_id,
                view,
                image_path: image.clone(),
            };
            pipeline.diagnose_image(&q, &features, &c.pipeline)?
        }
        (None, Some(id)) => {
            let entry = l
                .manifest
                .iter()
                .find(|e| e.slice_id() == id)
                .ok_or_else(|| Error::MissingFeature(id.clone()))?;
            let features = l.features.get(id).ok_or_else(|| Error::MissingFeature(id.clone()))?;
            pipeline.diagnose(&entry.slice, features, &c.pipeline)?
        }
        (None, None) => unreachable!("clap requires --image or --slice-id"),
    };

    let label = diagnosis
        .response
        .label
        .map(|l| l.canonical().to_string())
        .unwrap_or_else(|| "UNPARSEABLE".into());
    let mut out = format!("diagnosis: {label}\n");
    if diagnosis.bundle.evidence.is_empty() {
        out.push_str("no evidence\n");
    } else {
        let _ = writeln!(out, "{:>4}  {:<32} {:<8} {:<11} {:>10}", "rank", "slice_id", "label", "view", "similarity");
        for (i, e) in diagnosis.bundle.evidence.iter().enumerate() {
            let _ = writeln!(
                out,
                "{:>4}  {:<32} {:<8} {:<11} {:>10.6}",
                i + 1,
                e.entry.slice_id(),
                e.entry.slice.class_label.as_str(),
                e.entry.slice.view.as_str(),
                e.similarity
            );
        }
    }
    print!("{out}");
    let _ = std::io::stdout().flush();

    let path = run.dir.join("diagnosis.json");
    let record = json!({
        "label": diagnosis.response.label,
        "raw_output": diagnosis.response.raw_output,
        "prompt": diagnosis.bundle.to_audit_json(),
    });
    write_file(&path, serde_json::to_string_pretty(&record)?.as_bytes())?;
    run.outputs.push(path);
    run.finish()
}

fn write_cases(path: &Path, cases: &[CaseLog]) -> Result<()> {
    let mut body = String::new();
    for case in cases {
        body.push_str(&serde_json::to_string(case)?);
        body.push('\n');
    }
    write_file(path, body.as_bytes())
}

fn evaluate_cmd(command: &'static str, a: EvalArgs, ks: Option<Vec<usize>>) -> Result<()> {
    let mut c = load_config(&a.common)?;
    apply_pipeline_args(&mut c, &a.pipeline);
    if let Some(u) = a.case_unit {
        c.eval.case_unit = match u {
            CaseUnitArg::Slice => CaseUnit::Slice,
            CaseUnitArg::KeySlice => CaseUnit::KeySlicePerPatient,
            CaseUnitArg::PatientMajority => CaseUnit::PatientMajority,
        };
    }
    if a.write_prompts {
        c.eval.write_prompts = true;
    }
    if let Some(ks) = &ks {
        if !ks.is_empty() {
            c.eval.ks = ks.clone();
        } else if c.eval.ks.is_empty() {
            c.eval.ks = DEFAULT_KS.to_vec();
        }
    }
    let mut run = Run::start(command, c)?;
    let l = load_all(&mut run)?;
    let c = run.config.clone();
    let pipeline = Pipeline::new(&l.index, &l.head, &l.manifest, c.paths.image_root(), &l.backend)?.with_expert(l.expert.clone());
    let tests: Vec<_> = l
        .manifest
        .iter()
        .filter(|e| e.slice.split == Split::Test)
        .map(|e| e.slice.clone())
        .collect();
    let opts = EvalOptions {
        case_unit: c.eval.case_unit,
        prompt_dir: c.eval.write_prompts.then(|| run.dir.join("prompts")),
    };

    let results: Vec<(ReportRow, Vec<CaseLog>)> = match command {
        "sweep" => eval::k_sweep(&pipeline, &tests, &l.features, &c.pipeline, &c.eval.ks, &opts)?,
        "ablate" => eval::ablation_grid(&pipeline, &tests, &l.features, &c.pipeline, &opts)?,
        _ => {
            let e = eval::evaluate(&pipeline, &tests, &l.features, &c.pipeline, &opts)?;
            vec![(ReportRow::new(&c.pipeline, e.report), e.cases)]
        }
    };

    let rows: Vec<ReportRow> = results.iter().map(|(r, _)| r.clone()).collect();
    let report = run.dir.join("report.csv");
    write_file(&report, eval::report_csv(&rows).as_bytes())?;
    run.outputs.push(report);
    for (row, cases) in &results {
        let name = if results.len() == 1 {
            "cases.jsonl".to_string()
        } else {
            format!(
                "cases_r{}_t{}_k{}.jsonl",
                u8::from(row.use_retriever),
                u8::from(row.use_typical_features),
                row.k
            )
        };
        let path = run.dir.join(name);
        write_cases(&path, cases)?;
        run.outputs.push(path);
    }
    if let Some(dir) = opts.prompt_dir {
        run.outputs.push(dir);
    }
    print!("{}", eval::report_csv(&rows));
    run.finish()
}
