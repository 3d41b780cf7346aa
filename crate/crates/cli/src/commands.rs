use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::Args;
use ndarray::Array3;
use radalign::alignment::{train, AlignModel};
use radalign::datagen::{generate, load_dataset, read_image, save_dataset, Example, SynthSpec, MANIFEST};
use radalign::interpret::{attention_maps, export_attention};
use radalign::knowledge::{load_criteria, mine_criteria, save_criteria, CriterionSet, MiningError};
use radalign::metrics::{evaluate, finding_agreement};
use radalign::promptgen::{
    generate_reports, GenerationParams, HttpLlmClient, LlmClient, MockLlmClient, PromptBundle, ReportError,
    RetryPolicy, Template,
};
use radalign::retrieval::{build_index, load_index, query_topk, save_index};
use serde::Serialize;
use serde_json::json;

use crate::config::{LlmBackend, LlmConfig, RunConfig};
use crate::error::{checkpoint_error, criteria_error, guard, index_error, read_to_string, require, CliError};

type Result<T> = std::result::Result<T, CliError>;

/// One JSON line on stdout. A closed pipe is not an error.
fn emit(value: &impl Serialize) -> Result<()> {
    let line = serde_json::to_string(value).expect("output serializes");
    print_out(&format!("{line}\n"))
}

fn print_out(text: &str) -> Result<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::Other(format!("stdout: {e}"))),
        _ => Ok(()),
    }
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(CliError::other)
}

/// First of the flag and the config fallback, else an error naming both.
fn pick(flag: Option<PathBuf>, fallback: &Option<PathBuf>, flag_name: &str, key: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| CliError::Other(format!("{flag_name} is required (or set paths.{key} in the config)")))
}

fn load_model(path: &Path) -> Result<AlignModel> {
    AlignModel::load_checkpoint(require(path)?).map_err(|e| checkpoint_error(path, e))
}

fn load_data(path: &Path) -> Result<Vec<Example>> {
    Ok(load_dataset(require(path)?)?)
}

fn criteria_or_fixture(path: Option<&Path>) -> Result<CriterionSet> {
    match path {
        Some(p) => load_criteria(require(p)?).map_err(|e| criteria_error(p, e)),
        None => Ok(CriterionSet::chest_xray_fixture()),
    }
}

/// Reads `.rimg` tensors directly; anything else is decoded as an image
/// file and scaled to `[0, 1]`.
pub fn load_image(path: &Path, channels: usize) -> Result<Array3<f64>> {
    require(path)?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("rimg")) {
        return Ok(read_image(path)?);
    }
    let img = image::open(path).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match channels {
        1 => img.to_luma32f().into_raw().into_iter().map(f64::from).collect(),
        3 => img.to_rgb32f().into_raw().into_iter().map(f64::from).collect(),
        c => return Err(CliError::Other(format!("model expects {c} channels; images support 1 or 3"))),
    };
    Ok(Array3::from_shape_vec((h, w, channels), data).expect("decoded buffer matches its dimensions"))
}

fn image_id(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn llm_client(cfg: &LlmConfig, backend: LlmBackend, reference: CriterionSet) -> Result<Box<dyn LlmClient>> {
    Ok(match backend {
        LlmBackend::Mock => Box::new(MockLlmClient::with_reference(reference)),
        LlmBackend::Http => {
            let timeout = Duration::from_secs(cfg.timeout_secs);
            let client = match (&cfg.endpoint, &cfg.model) {
                (Some(endpoint), Some(model)) => {
                    let key = std::env::var(radalign::promptgen::ENV_API_KEY).ok().filter(|k| !k.is_empty());
                    HttpLlmClient::new(endpoint, model, key, timeout)
                }
                _ => HttpLlmClient::from_env(timeout),
            };
            Box::new(client.map_err(CliError::other)?)
        }
    })
}

#[derive(Debug, Args)]
pub struct MineArgs {
    /// Report corpus: a text file with reports separated by blank lines, or a dataset directory.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_criteria: Option<usize>,
    #[arg(long, value_enum)]
    pub llm: Option<LlmBackend>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

fn read_corpus(path: &Path) -> Result<Vec<String>> {
    if require(path)?.is_dir() {
        return Ok(load_dataset(path)?.into_iter().map(|e| e.report).collect());
    }
    let text = read_to_string(path)?;
    Ok(text
        .split("\n\n")
        .map(str::trim)
        .filter(|r| !r.is_empty())
        .map(String::from)
        .collect())
}

pub fn mine(args: MineArgs) -> Result<()> {
    let cfg = RunConfig::load_or_default(args.config.as_deref())?;
    let corpus = read_corpus(&args.corpus)?;
    guard(&args.out, args.force)?;
    let n = args.n_criteria.unwrap_or(cfg.mining.n_criteria);
    let fixture = CriterionSet::chest_xray_fixture();
    let client = llm_client(&cfg.llm, args.llm.unwrap_or(cfg.llm.backend), fixture.clone())?;
    let outcome = runtime()?
        .block_on(mine_criteria(&corpus, client.as_ref(), n, &fixture.labels))
        .map_err(|e| match e {
            MiningError::Transport(e) => CliError::Llm(e.to_string()),
            other => CliError::other(other),
        })?;
    save_criteria(&outcome.criteria, &args.out).map_err(|e| criteria_error(&args.out, e))?;
    emit(&json!({
        "out": args.out,
        "client": client.name(),
        "reports": corpus.len(),
        "criteria": outcome.criteria.num_criteria(),
        "descriptions": outcome.criteria.total_descriptions(),
    }))?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Generator settings as JSON; defaults when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub criteria: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

fn load_spec(path: &Path) -> Result<SynthSpec> {
    let json = read_to_string(path)?;
    let de = &mut serde_json::Deserializer::from_str(&json);
    serde_path_to_error::deserialize(de).map_err(|e| CliError::Schema {
        path: path.to_owned(),
        field: e.path().to_string(),
        message: e.into_inner().to_string(),
    })
}

pub fn gen(args: GenArgs) -> Result<()> {
    let spec = match &args.spec {
        Some(p) => load_spec(p)?,
        None => SynthSpec::default(),
    };
    let cs = criteria_or_fixture(args.criteria.as_deref())?;
    guard(&args.out.join(MANIFEST), args.force)?;
    let data = generate(&spec, &cs).map_err(CliError::other)?;
    save_dataset(&args.out, &data)?;
    let mut counts: BTreeMap<&str, usize> = cs.labels.iter().map(|l| (l.code.as_str(), 0)).collect();
    for ex in &data {
        for &l in &ex.labels {
            *counts.get_mut(cs.labels[l].code.as_str()).expect("label in set") += 1;
        }
    }
    emit(&json!({ "out": args.out, "examples": data.len(), "label_counts": counts }))?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub criteria: Option<PathBuf>,
    /// Checkpoint path; the loss trace goes to `<out>.loss.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

fn loss_csv_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".loss.csv");
    PathBuf::from(s)
}

pub fn train_cmd(args: TrainArgs) -> Result<()> {
    let cfg = RunConfig::load_or_default(args.config.as_deref())?;
    let data_path = pick(args.data, &cfg.paths.dataset, "--data", "dataset")?;
    let out = pick(args.out, &cfg.paths.checkpoint, "--out", "checkpoint")?;
    let criteria_path = args.criteria.or_else(|| cfg.paths.criteria.clone());
    let cs = criteria_or_fixture(criteria_path.as_deref())?;
    let data = load_data(&data_path)?;
    let csv = loss_csv_path(&out);
    guard(&out, args.force)?;
    guard(&csv, args.force)?;
    let model = AlignModel::new(cfg.model.clone(), cs).map_err(CliError::other)?;
    let run = train(model, &data, &cfg.train).map_err(CliError::other)?;
    let fingerprint = run.model.save_checkpoint(&out).map_err(|e| checkpoint_error(&out, e))?;
    radalign::io::write_atomic(&csv, run.trace.to_csv().as_bytes()).map_err(|e| CliError::io(&csv, e))?;
    emit(&json!({
        "checkpoint": out,
        "fingerprint": fingerprint.to_hex(),
        "loss_csv": csv,
        "examples": data.len(),
        "epochs": cfg.train.epochs,
        "optimizer_steps": run.optimizer_steps,
        "initial_loss": run.trace.initial().map(|e| e.total),
        "final_loss": run.trace.last().map(|e| e.total),
    }))?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

pub fn index(args: IndexArgs) -> Result<()> {
    let model = load_model(&args.checkpoint)?;
    let data = load_data(&args.data)?;
    guard(&args.out, args.force)?;
    let index = build_index(&model, &data).map_err(CliError::other)?;
    save_index(&index, &args.out).map_err(|e| index_error(&args.out, e))?;
    emit(&json!({
        "index": args.out,
        "entries": index.len(),
        "skipped": data.len() - index.len(),
        "fingerprint": index.model_fingerprint.to_hex(),
    }))?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// May be repeated; one JSON line per image.
    #[arg(long, required = true)]
    pub image: Vec<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn infer(args: InferArgs) -> Result<()> {
    let cfg = RunConfig::load_or_default(args.config.as_deref())?;
    let model = load_model(&args.checkpoint)?;
    for path in &args.image {
        let img = load_image(path, model.config().encoder.channels)?;
        let inf = model.infer(img.view()).map_err(CliError::other)?;
        let bundle = PromptBundle::assemble(model.criteria(), &inf, &[], cfg.report.threshold, "");
        emit(&json!({
            "image": path,
            "predictions": bundle.predictions,
            "findings": bundle.findings,
        }))?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// May be repeated; one JSON line per image, in order.
    #[arg(long, required = true)]
    pub image: Vec<PathBuf>,
    /// Prompt template file; its id is the file stem.
    #[arg(long)]
    pub template: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub llm: Option<LlmBackend>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Serialize)]
struct ReportRecord<'a> {
    image: &'a Path,
    client: String,
    template_id: String,
    retries: u32,
    text: String,
    finding_agreement: f64,
    bundle: &'a PromptBundle,
    prompt: String,
    warnings: &'a [String],
}

pub fn report(args: ReportArgs) -> Result<()> {
    let cfg = RunConfig::load_or_default(args.config.as_deref())?;
    let checkpoint = pick(args.checkpoint, &cfg.paths.checkpoint, "--checkpoint", "checkpoint")?;
    let index_path = pick(args.index, &cfg.paths.index, "--index", "index")?;
    let k = args.k.unwrap_or(cfg.retrieval.k);
    if k == 0 {
        return Err(CliError::Other("--k must be at least 1".into()));
    }
    let model = load_model(&checkpoint)?;
    let index = load_index(require(&index_path)?).map_err(|e| index_error(&index_path, e))?;
    let mut warnings = Vec::new();
    if let Some(mismatch) = index.check_fingerprint(&model) {
        tracing::warn!("{mismatch}");
        warnings.push(mismatch.to_string());
    }
    let template = match args.template.as_deref().or(cfg.paths.template.as_deref()) {
        Some(p) => Template::from_file(require(p)?).map_err(CliError::other)?,
        None => Template::default(),
    };

    let mut bundles = Vec::with_capacity(args.image.len());
    for path in &args.image {
        let img = load_image(path, model.config().encoder.channels)?;
        let inf = model.infer(img.view()).map_err(CliError::other)?;
        let hits = query_topk(&index, inf.attended.z_hat.view(), k).map_err(CliError::other)?;
        bundles.push(PromptBundle::assemble(model.criteria(), &inf, &hits, cfg.report.threshold, &template.id));
    }

    let client = llm_client(&cfg.llm, args.llm.unwrap_or(cfg.llm.backend), model.criteria().clone())?;
    let params = GenerationParams { temperature: cfg.llm.temperature, max_tokens: cfg.llm.max_tokens };
    let retry = RetryPolicy { max_retries: cfg.llm.max_retries, base_delay: Duration::from_millis(cfg.llm.base_delay_ms) };
    let drafts = runtime()?.block_on(generate_reports(
        &bundles,
        &template,
        client.as_ref(),
        &params,
        &retry,
        cfg.report.in_flight,
    ));

    for ((path, bundle), draft) in args.image.iter().zip(&bundles).zip(drafts) {
        let draft = draft.map_err(|e| match e {
            e @ ReportError::Llm { .. } => CliError::Llm(format!("{}: {e}", path.display())),
            other => CliError::other(other),
        })?;
        emit(&ReportRecord {
            image: path,
            client: draft.client_name,
            template_id: draft.template_id,
            retries: draft.retries,
            finding_agreement: finding_agreement(&draft.text, &bundle.findings),
            text: draft.text,
            bundle,
            prompt: draft.prompt,
            warnings: &warnings,
        })?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Print the full result as JSON instead of the table.
    #[arg(long)]
    pub json: bool,
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let model = load_model(&args.checkpoint)?;
    let data = load_data(&args.data)?;
    let result = evaluate(&model, &data).map_err(CliError::other)?;
    if args.json {
        emit(&result)?;
    } else {
        print_out(&result.table())?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct AttnArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub force: bool,
}

pub fn attn(args: AttnArgs) -> Result<()> {
    let model = load_model(&args.checkpoint)?;
    let img = load_image(&args.image, model.config().encoder.channels)?;
    guard(&args.out_dir.join("attention.json"), args.force)?;
    let grid = model.forward(img.view()).map_err(CliError::other)?.grid_shape();
    let maps = attention_maps(&model, img.view()).map_err(CliError::other)?;
    let side = export_attention(&maps, grid, &image_id(&args.image), &args.out_dir).map_err(CliError::other)?;
    emit(&json!({
        "out_dir": args.out_dir,
        "grid_shape": side.grid_shape,
        "files": side.tokens.iter().map(|t| &t.file).collect::<Vec<_>>(),
    }))?;
    Ok(())
}

pub fn defaults() -> Result<()> {
    print_out(&format!("{}\n", serde_json::to_string_pretty(&RunConfig::default()).expect("config serializes")))
}
