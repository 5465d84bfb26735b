//! `saunet` command line: phantom generation, training, prediction,
//! evaluation, ablation suites and plots.
//!
//! Run configuration lives in JSON files; flags only name paths and
//! override seeds. Exit codes: 0 success, 2 usage or input error, 3 state or
//! corruption error (bad checkpoint, divergence, failed suite variant).

pub mod plot;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::Error;
use crate::metrics::{evaluate_cases, overall_line, parse_report_csv, write_report, Connectivity, EvalItem, MetricsConfig, MetricsReport};
use crate::model::{load_checkpoint, predict_case, Checkpoint, LayerInfo, LayerKind, Model, ModelConfig};
use crate::phantom::{generate_dataset, PhantomConfig};
use crate::preprocessing::PipelineConfig;
use crate::training::{train, LossTrace, TrainConfig};
use crate::volume_io::{list_cases, load_dataset, load_mask, save_mask, Case, INDEX_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_STATE: i32 = 3;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const TRACE_FILE: &str = "trace.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ABLATION_CSV_HEADER: &str = "variant,dice,avd,f1";

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn state(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_STATE,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Checkpoint(_) | Error::Diverged { .. } => EXIT_STATE,
            _ => EXIT_USAGE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Everything a run needs besides its data.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pipeline: PipelineConfig,
    pub metrics: MetricsConfig,
}

impl RunConfig {
    pub fn validate(&self) -> crate::Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.pipeline.grid.validate()?;
        self.model.check_spatial(self.pipeline.grid.chunk_shape())
    }

    /// `--seed` drives both parameter init and batch order.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.model.seed = s;
            self.train.seed = s;
        }
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub dir: PathBuf,
    pub case_ids: Vec<String>,
}

/// Written next to every training run; feeding it back through
/// `train --config` repeats the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub dataset: DatasetInfo,
    /// Relative to the manifest's directory.
    pub checkpoints: Vec<PathBuf>,
    pub trace: PathBuf,
}

/// Reads a [`RunConfig`], or the config embedded in a [`RunManifest`].
pub fn load_run_config(path: &Path) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
    let is_manifest = value.get("config").is_some() && value.get("tool_version").is_some();
    let result = if is_manifest {
        serde_json::from_value::<RunManifest>(value).map(|m| m.config)
    } else {
        serde_json::from_value::<RunConfig>(value)
    };
    result.map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))
}

#[derive(Parser, Debug)]
#[command(name = "saunet", version, about = "3D spatial-attention U-Net for WMH segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train from scratch; writes checkpoints, trace.csv and manifest.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Segment every case of a dataset at its original shape.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted masks against truths.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 26, value_parser = parse_connectivity)]
        connectivity: u8,
    },
    /// Train and score each variant of an ablation suite.
    Ablate {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Synthetic data.
    Phantom {
        #[command(subcommand)]
        action: PhantomAction,
    },
    /// Loss curve or per-scanner bar chart as PNG plus JSON sidecar.
    Plot(PlotArgs),
}

#[derive(Subcommand, Debug)]
pub enum PhantomAction {
    /// Write a phantom dataset directory.
    Make {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// PhantomConfig JSON; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    #[arg(long, required_unless_present = "report", conflicts_with = "report")]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_connectivity(s: &str) -> std::result::Result<u8, String> {
    let n: u8 = s.parse().map_err(|_| format!("not a number: {s}"))?;
    Connectivity::try_from(n).map(|_| n).map_err(|e| e.to_string())
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn execute(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Train { config, data, out, seed } => cmd_train(&config, &data, &out, seed).map(|_| ()),
        Command::Predict { ckpt, data, out } => cmd_predict(&ckpt, &data, &out),
        Command::Evaluate {
            pred,
            truth,
            out,
            connectivity,
        } => {
            let report = cmd_evaluate(&pred, &truth, &out, connectivity)?;
            println!("{}", overall_line(&report));
            Ok(())
        }
        Command::Ablate { suite, data, out, seed } => cmd_ablate(&suite, &data, &out, seed).map(|_| ()),
        Command::Phantom {
            action: PhantomAction::Make { out, n, seed, config },
        } => cmd_phantom_make(&out, n, seed, config.as_deref()),
        Command::Plot(args) => cmd_plot(&args),
    }
}

fn require_dir(dir: &Path) -> CliResult<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(CliError::usage(format!("data directory not found: {}", dir.display())))
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::usage(format!("cannot create {}: {e}", dir.display())))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    std::fs::write(path, text).map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))
}

fn load_cases(data: &Path) -> CliResult<Vec<Case>> {
    require_dir(data)?;
    let cases = load_dataset(data)?;
    if cases.is_empty() {
        return Err(CliError::usage(format!("no cases found in {}", data.display())));
    }
    Ok(cases)
}

/// Trains into `out` and returns the manifest it wrote.
pub fn cmd_train(config: &Path, data: &Path, out: &Path, seed: Option<u64>) -> CliResult<RunManifest> {
    require_dir(data)?;
    let cfg = load_run_config(config)?.with_seed(seed);
    cfg.validate()?;
    let cases = load_cases(data)?;
    create_dir(out)?;
    train_run(&cfg, data, &cases, out)
}

fn train_run(cfg: &RunConfig, data: &Path, cases: &[Case], out: &Path) -> CliResult<RunManifest> {
    log::info!("training on {} cases for {} steps", cases.len(), cfg.train.steps);
    let trained = train(&cfg.model, &cfg.train, &cfg.pipeline, cases, Some(out))?;
    let trace_path = out.join(TRACE_FILE);
    std::fs::write(&trace_path, trained.trace.to_csv()).map_err(|e| CliError::usage(format!("{}: {e}", trace_path.display())))?;
    let mut checkpoints = trained.checkpoints;
    if checkpoints.is_empty() {
        // steps = 0: still leave the initial parameters behind
        let p = out.join("ckpt_0.bin");
        crate::model::save_checkpoint(&p, &trained.model, &cfg.pipeline, 0)?;
        checkpoints.push(p);
    }
    let manifest = RunManifest {
        tool_version: TOOL_VERSION.to_string(),
        seed: cfg.train.seed,
        config: cfg.clone(),
        dataset: DatasetInfo {
            dir: data.to_path_buf(),
            case_ids: cases.iter().map(|c| c.id.clone()).collect(),
        },
        checkpoints: checkpoints
            .iter()
            .map(|p| p.file_name().map(PathBuf::from).unwrap_or_else(|| p.clone()))
            .collect(),
        trace: PathBuf::from(TRACE_FILE),
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

fn open_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    if !path.is_file() {
        return Err(CliError::usage(format!("checkpoint not found: {}", path.display())));
    }
    let ck = load_checkpoint(path).map_err(|e| CliError::state(e.to_string()))?;
    ck.manifest
        .model
        .check_spatial(ck.manifest.pipeline.grid.chunk_shape())
        .map_err(|e| CliError::state(format!("checkpoint model does not fit its pipeline: {e}")))?;
    Ok(ck)
}

/// Writes `<id>_mask.raw` and `<id>_geometry.json` per case.
pub fn cmd_predict(ckpt: &Path, data: &Path, out: &Path) -> CliResult<()> {
    let ck = open_checkpoint(ckpt)?;
    let cases = load_cases(data)?;
    create_dir(out)?;
    predict_into(&ck.model, &ck.manifest.pipeline, &cases, out)
}

fn predict_into(model: &Model<f32>, pipeline: &PipelineConfig, cases: &[Case], out: &Path) -> CliResult<()> {
    for case in cases {
        let (mask, geom) = predict_case(model, pipeline, case)?;
        save_mask(&mask, &out.join(format!("{}_mask.raw", case.id)))?;
        write_json(&out.join(format!("{}_geometry.json", case.id)), &geom)?;
        log::info!("{}: {} foreground voxels", case.id, mask.data.iter().filter(|&&v| v != 0).count());
    }
    Ok(())
}

/// `id -> (scanner, mask path)`. Uses the truth entries of `cases.json` when
/// present, otherwise every `<id>_mask.*` file.
fn mask_index(dir: &Path) -> CliResult<BTreeMap<String, (String, PathBuf)>> {
    require_dir(dir)?;
    let mut out = BTreeMap::new();
    if dir.join(INDEX_FILE).exists() {
        for e in list_cases(dir)? {
            if let Some(t) = e.truth {
                out.insert(e.id, (e.scanner, t));
            }
        }
        return Ok(out);
    }
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::usage(format!("{}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry.map_err(|e| CliError::usage(e.to_string()))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        for suffix in ["_mask.raw", "_mask.nii.gz", "_mask.nii"] {
            if let Some(id) = name.strip_suffix(suffix) {
                out.insert(id.to_string(), ("unknown".to_string(), path.clone()));
            }
        }
    }
    Ok(out)
}

/// Pairs masks by case id, scores them and writes the report. Scanner names
/// come from the truth side. Any unpaired id fails the command after the
/// paired cases are written.
pub fn cmd_evaluate(pred: &Path, truth: &Path, out: &Path, connectivity: u8) -> CliResult<MetricsReport> {
    let cfg = MetricsConfig {
        connectivity: Connectivity::try_from(connectivity).map_err(|e| CliError::usage(e.to_string()))?,
        ..MetricsConfig::default()
    };
    let preds = mask_index(pred)?;
    let truths = mask_index(truth)?;
    let mut unmatched: Vec<String> = preds.keys().filter(|k| !truths.contains_key(*k)).map(|k| format!("{k} (prediction only)")).collect();
    unmatched.extend(truths.keys().filter(|k| !preds.contains_key(*k)).map(|k| format!("{k} (truth only)")));

    let mut items = Vec::new();
    for (id, (scanner, tpath)) in &truths {
        let Some((_, ppath)) = preds.get(id) else { continue };
        items.push(EvalItem {
            case_id: id.clone(),
            scanner: scanner.clone(),
            pred: load_mask(ppath)?,
            truth: load_mask(tpath)?,
        });
    }
    if items.is_empty() {
        return Err(CliError::usage(format!(
            "no case ids shared by {} and {}",
            pred.display(),
            truth.display()
        )));
    }
    let report = evaluate_cases(&items, &cfg);
    write_report(&report, out)?;
    for f in &report.failures {
        eprintln!("case {} not scored: {}", f.case_id, f.reason);
    }
    if !unmatched.is_empty() {
        return Err(CliError::usage(format!("unpaired cases: {}", unmatched.join(", "))));
    }
    if !report.failures.is_empty() {
        return Err(CliError::usage(format!("{} case(s) could not be scored", report.failures.len())));
    }
    Ok(report)
}

/// A named model (and optionally training) override on top of the suite base.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteVariant {
    pub name: String,
    #[serde(default)]
    pub model: Value,
    #[serde(default)]
    pub train: Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSuite {
    #[serde(default)]
    pub base: RunConfig,
    pub variants: Vec<SuiteVariant>,
}

impl AblationSuite {
    /// The rows of the paper's ablation table, in order.
    pub fn paper(base: RunConfig) -> Self {
        let v = |name: &str, model: Value| SuiteVariant {
            name: name.into(),
            model,
            train: Value::Null,
        };
        let bn = serde_json::json!({"norm": "batch", "use_sam": false, "use_aspp": false});
        Self {
            base,
            variants: vec![
                v(
                    "backbone_333",
                    serde_json::json!({"encoder_kernel": [3, 3, 3], "resample_kernel": [2, 2, 2],
                        "norm": "batch", "use_sam": false, "use_aspp": false}),
                ),
                v("backbone_331", bn),
                v("gn", serde_json::json!({"use_sam": false, "use_aspp": false})),
                v("gn_aspp", serde_json::json!({"use_sam": false, "use_aspp": true})),
                v("gn_sam", serde_json::json!({"use_sam": true, "use_aspp": false})),
                v("full", serde_json::json!({"use_sam": true, "use_aspp": true})),
            ],
        }
    }

    pub fn resolve(&self, variant: &SuiteVariant) -> crate::Result<RunConfig> {
        let mut cfg = self.base.clone();
        cfg.model = overlay(&cfg.model, &variant.model)?;
        cfg.train = overlay(&cfg.train, &variant.train)?;
        Ok(cfg)
    }
}

fn overlay<T: Serialize + for<'de> Deserialize<'de>>(base: &T, patch: &Value) -> crate::Result<T> {
    let mut v = serde_json::to_value(base)?;
    match patch {
        Value::Null => {}
        Value::Object(fields) => {
            let obj = v.as_object_mut().expect("config serializes to an object");
            for (k, val) in fields {
                obj.insert(k.clone(), val.clone());
            }
        }
        other => return Err(Error::Config(format!("variant override must be an object, got {other}"))),
    }
    Ok(serde_json::from_value(v)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub dice: Option<f64>,
    pub avd: Option<f64>,
    pub f1: Option<f64>,
    pub error: Option<String>,
    /// Layer listing of the variant's graph.
    pub layers: Vec<LayerInfo>,
}

impl AblationRow {
    pub fn has_attention(&self) -> bool {
        self.layers.iter().any(|l| matches!(l.kind, LayerKind::SpatialAttention { .. }))
    }

    pub fn has_aspp(&self) -> bool {
        self.layers.iter().any(|l| matches!(l.kind, LayerKind::Aspp { .. }))
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let f = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
    let mut s = format!("{ABLATION_CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.variant, f(r.dice), f(r.avd), f(r.f1)));
    }
    s
}

fn run_variant(suite: &AblationSuite, variant: &SuiteVariant, cases: &[Case], data: &Path, dir: &Path, seed: Option<u64>) -> (Vec<LayerInfo>, CliResult<MetricsReport>) {
    let cfg = match suite.resolve(variant) {
        Ok(c) => c.with_seed(seed),
        Err(e) => return (Vec::new(), Err(e.into())),
    };
    let layers = Model::<f32>::build(&cfg.model).map(|m| m.layers()).unwrap_or_default();
    let result = (|| {
        cfg.validate()?;
        create_dir(dir)?;
        write_json(&dir.join("layers.json"), &layers)?;
        train_run(&cfg, data, cases, dir)?;
        let ck = open_checkpoint(&dir.join(format!("ckpt_{}.bin", cfg.train.steps)))?;
        let pred_dir = dir.join("pred");
        create_dir(&pred_dir)?;
        let mut items = Vec::new();
        for case in cases {
            let Some(truth) = &case.truth else { continue };
            let (mask, geom) = predict_case(&ck.model, &ck.manifest.pipeline, case)?;
            save_mask(&mask, &pred_dir.join(format!("{}_mask.raw", case.id)))?;
            write_json(&pred_dir.join(format!("{}_geometry.json", case.id)), &geom)?;
            items.push(EvalItem {
                case_id: case.id.clone(),
                scanner: case.scanner.clone(),
                pred: mask,
                truth: truth.clone(),
            });
        }
        if items.is_empty() {
            return Err(CliError::usage("no case has a ground-truth mask"));
        }
        let report = evaluate_cases(&items, &cfg.metrics);
        write_report(&report, &dir.join("report.csv"))?;
        Ok(report)
    })();
    (layers, result)
}

/// Runs every suite variant, writes `ablation.csv` / `ablation.json` and
/// returns the rows. A failing variant gets an `NA` row and the suite goes
/// on; the command then exits with the state code.
pub fn cmd_ablate(suite_path: &Path, data: &Path, out: &Path, seed: Option<u64>) -> CliResult<Vec<AblationRow>> {
    let text = std::fs::read_to_string(suite_path).map_err(|e| CliError::usage(format!("cannot read suite {}: {e}", suite_path.display())))?;
    let suite: AblationSuite = serde_json::from_str(&text).map_err(|e| CliError::usage(format!("suite {}: {e}", suite_path.display())))?;
    if suite.variants.is_empty() {
        return Err(CliError::usage("suite lists no variants"));
    }
    let cases = load_cases(data)?;
    create_dir(out)?;

    let mut rows = Vec::with_capacity(suite.variants.len());
    for (i, variant) in suite.variants.iter().enumerate() {
        let safe: String = variant.name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
        let dir = out.join(format!("{i:02}_{safe}"));
        log::info!("variant {}: {}", i, variant.name);
        let (layers, result) = run_variant(&suite, variant, &cases, data, &dir, seed);
        let row = match result {
            Ok(r) => AblationRow {
                variant: variant.name.clone(),
                dice: Some(r.overall.dice),
                avd: r.overall.avd,
                f1: Some(r.overall.f1),
                error: None,
                layers,
            },
            Err(e) => {
                eprintln!("variant {} failed: {}", variant.name, e.message);
                AblationRow {
                    variant: variant.name.clone(),
                    dice: None,
                    avd: None,
                    f1: None,
                    error: Some(e.message),
                    layers,
                }
            }
        };
        rows.push(row);
    }
    let csv = out.join("ablation.csv");
    std::fs::write(&csv, ablation_csv(&rows)).map_err(|e| CliError::usage(format!("{}: {e}", csv.display())))?;
    write_json(&out.join("ablation.json"), &rows)?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        return Err(CliError::state(format!("{failed} of {} variants failed", rows.len())));
    }
    Ok(rows)
}

pub fn cmd_phantom_make(out: &Path, n: usize, seed: u64, config: Option<&Path>) -> CliResult<()> {
    let cfg = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::usage(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str::<PhantomConfig>(&text).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?
        }
        None => PhantomConfig::default(),
    };
    let cases = generate_dataset(n, &cfg, seed)?;
    crate::volume_io::save_dataset(out, &cases)?;
    log::info!("wrote {} phantom cases to {}", cases.len(), out.display());
    Ok(())
}

pub fn cmd_plot(args: &PlotArgs) -> CliResult<()> {
    let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| CliError::usage(format!("cannot read {}: {e}", p.display())));
    if let Some(t) = &args.trace {
        let trace = LossTrace::parse_csv(&read(t)?)?;
        plot::plot_trace(&trace, &args.out)?;
    } else if let Some(r) = &args.report {
        let cases = parse_report_csv(&read(r)?)?;
        if cases.is_empty() {
            return Err(CliError::usage(format!("{} has no case rows", r.display())));
        }
        plot::plot_report(&MetricsReport::from_cases(cases, Vec::new()), &args.out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_codes() {
        assert_eq!(CliError::from(Error::Checkpoint("crc".into())).code, EXIT_STATE);
        assert_eq!(CliError::from(Error::Diverged { step: 3, loss: f64::NAN }).code, EXIT_STATE);
        assert_eq!(CliError::from(Error::Config("x".into())).code, EXIT_USAGE);
    }

    #[test]
    fn paper_suite_resolves() {
        let suite = AblationSuite::paper(RunConfig::default());
        let names: Vec<_> = suite.variants.iter().map(|v| v.name.as_str()).collect();
        assert_eq!(names, ["backbone_333", "backbone_331", "gn", "gn_aspp", "gn_sam", "full"]);
        let iso = suite.resolve(&suite.variants[0]).unwrap();
        assert_eq!(iso.model, ModelConfig::backbone_isotropic());
        let full = suite.resolve(&suite.variants[5]).unwrap();
        assert_eq!(full.model, ModelConfig::default());
    }

    #[test]
    fn overlay_rejects_unknown_fields() {
        let suite = AblationSuite::paper(RunConfig::default());
        let bad = SuiteVariant {
            name: "x".into(),
            model: serde_json::json!({"use_samm": true}),
            train: Value::Null,
        };
        assert!(suite.resolve(&bad).is_err());
    }

    #[test]
    fn connectivity_flag() {
        assert!(parse_connectivity("6").is_ok());
        assert!(parse_connectivity("7").is_err());
    }

    #[test]
    fn help_exits_zero_and_bad_flag_two() {
        assert_eq!(run(["saunet", "--help"]), EXIT_OK);
        assert_eq!(run(["saunet", "train", "--nope"]), EXIT_USAGE);
    }
}
