//! Batch commands: kernel building, training, evaluation, cross-validation and
//! synthetic data generation.
//!
//! Every command reads one JSON config, applies `--set key=value` overrides and
//! draws all of its randomness from a single generator seeded by `seed`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::eval::{self, GridResult, RankMetrics, SplitMode, CURVE_LEN};
use crate::io::{self, SavedModel};
use crate::kernels::{self, KernelBasis, KernelMatrix, DEFAULT_EIG_FLOOR};
use crate::linalg;
use crate::meanfit::{self, MeanModel};
use crate::par;
use crate::posterior;
use crate::ranking::{self, LabeledObservations, RankPathPoint, RankTrainConfig};

#[derive(Debug, Parser)]
#[command(name = "tracegp", version, about = "Trace-norm matrix-variate GP ranking")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build an exponential graph kernel and its basis.
    Kernel(KernelArgs),
    /// Train one model per negative set and grid point.
    Train(ConfigArgs),
    /// Score a trained ensemble on held-out labels.
    Evaluate(EvaluateArgs),
    /// Five-fold cross-validation with model selection by MAP@100.
    Cv(ConfigArgs),
    /// Generate a synthetic dataset.
    Synth(ConfigArgs),
}

#[derive(Debug, Args)]
pub struct KernelArgs {
    /// Graph file (`nodes` header, then `i<TAB>j[<TAB>w]` edges).
    #[arg(long)]
    pub graph: PathBuf,
    /// Output kernel matrix.
    #[arg(long)]
    pub out: PathBuf,
    /// Output basis matrix. Defaults to the kernel path with `.basis` appended.
    #[arg(long)]
    pub basis_out: Option<PathBuf>,
    /// Use `exp(−L) + I` instead of `exp(−L)`.
    #[arg(long)]
    pub add_identity: bool,
    /// Relative eigenvalue floor for the basis.
    #[arg(long, default_value_t = DEFAULT_EIG_FLOOR)]
    pub eig_floor: f64,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON config file.
    #[arg(long)]
    pub config: PathBuf,
    /// Override a config key, e.g. `--set trainer.outer_max_iter=20`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Manifest written by `train`.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Held-out labels; their positives are the relevant items.
    #[arg(long)]
    pub test_labels: PathBuf,
    /// Metrics JSON. Defaults to `evaluation.json` in the output directory;
    /// the curves go next to it with a `.tsv` extension.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Kernel(a) => cmd_kernel(&a.graph, &a.out, a.basis_out.as_deref(), a.add_identity, a.eig_floor),
        Command::Train(a) => cmd_train(&load_config(&a.config, &a.overrides)?).map(|_| ()),
        Command::Evaluate(a) => {
            let cfg = load_config(&a.config.config, &a.config.overrides)?;
            cmd_evaluate(&cfg, &a.manifest, &a.test_labels, a.out.as_deref()).map(|_| ())
        }
        Command::Cv(a) => cmd_cv(&load_config(&a.config, &a.overrides)?).map(|_| ()),
        Command::Synth(a) => cmd_synth(&load_synth_config(&a.config, &a.overrides)?),
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelOptions {
    pub add_identity: bool,
    pub eig_floor: f64,
}

impl Default for KernelOptions {
    fn default() -> Self {
        Self {
            add_identity: false,
            eig_floor: DEFAULT_EIG_FLOOR,
        }
    }
}

/// Values of `α` and a log-spaced grid of `s = λ/λ_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub alphas: Vec<f64>,
    pub s_count: usize,
    pub s_min: f64,
    pub s_max: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            alphas: vec![1.0, 0.8, 0.6, 0.4, 0.0],
            s_count: 30,
            s_min: 1e-3,
            s_max: 1.0,
        }
    }
}

impl GridConfig {
    /// Descending `s` values.
    pub fn s_grid(&self) -> Vec<f64> {
        meanfit::log_grid(self.s_count, self.s_min, self.s_max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub mode: SplitMode,
    /// Negative sets per training run. Zero trains once on the labels file as given.
    pub n_negative_sets: usize,
    /// Cells per negative set. Defaults to the number of training positives.
    pub negatives_per_set: Option<usize>,
    /// Keep this fraction of the positive associations, drawn uniformly.
    pub subsample: Option<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            mode: SplitMode::Entrywise,
            n_negative_sets: 10,
            negatives_per_set: None,
            subsample: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Row graph, or a kernel matrix file written by `kernel`/`synth`.
    pub row_graph: PathBuf,
    /// Column graph or kernel file. Identity kernel when absent.
    #[serde(default)]
    pub col_graph: Option<PathBuf>,
    pub labels: PathBuf,
    #[serde(default)]
    pub kernel: KernelOptions,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub trainer: RankTrainConfig,
    #[serde(default)]
    pub eval: EvalOptions,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl ExperimentConfig {
    fn seed(&self) -> u64 {
        self.seed.expect("validated config has a seed")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed.is_none() {
            return Err(Error::Config("`seed` is required".into()));
        }
        let g = &self.grid;
        if g.alphas.is_empty() || g.s_count == 0 {
            return Err(Error::Config("the hyperparameter grid is empty".into()));
        }
        if g.alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Config("every alpha must lie in [0, 1]".into()));
        }
        if !(g.s_min > 0.0 && g.s_min <= g.s_max) {
            return Err(Error::Config("need 0 < s_min ≤ s_max".into()));
        }
        if !(self.kernel.eig_floor >= 0.0) {
            return Err(Error::Config("kernel.eig_floor must be ≥ 0".into()));
        }
        if let Some(f) = self.eval.subsample {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config("eval.subsample must lie in (0, 1]".into()));
            }
        }
        self.trainer
            .validate()
            .map_err(|e| Error::Config(format!("trainer: {e}")))?;
        for p in [Some(&self.row_graph), self.col_graph.as_ref(), Some(&self.labels)]
            .into_iter()
            .flatten()
        {
            if !p.is_file() {
                return Err(Error::Config(format!("referenced file {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

/// Synthetic dataset parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_rows: usize,
    pub n_cols: usize,
    /// Rank of the latent matrix. Full-rank prior sample when absent.
    pub rank: Option<usize>,
    pub row_length_scale: f64,
    pub col_length_scale: f64,
    pub positives_per_row: usize,
    pub noise_var: f64,
    pub output_dir: PathBuf,
    pub seed: Option<u64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_rows: 200,
            n_cols: 300,
            rank: Some(3),
            row_length_scale: 0.1,
            col_length_scale: 0.1,
            positives_per_row: 10,
            noise_var: 0.0,
            output_dir: PathBuf::from("synth"),
            seed: None,
        }
    }
}

fn read_config_value(path: &Path, overrides: &[String]) -> Result<(Value, PathBuf)> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut value: Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((value, base))
}

/// Sets a dotted key. The value is parsed as JSON, falling back to a string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not KEY=VALUE")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?} descends into a non-object")))?;
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    node.as_object_mut()
        .ok_or_else(|| Error::Config(format!("override {key:?} descends into a non-object")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Reads an experiment config; relative paths are taken from the config's directory.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let (value, base) = read_config_value(path, overrides)?;
    let mut cfg: ExperimentConfig =
        serde_json::from_value(value).map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
    cfg.row_graph = resolve(&base, &cfg.row_graph);
    cfg.col_graph = cfg.col_graph.map(|p| resolve(&base, &p));
    cfg.labels = resolve(&base, &cfg.labels);
    cfg.output_dir = resolve(&base, &cfg.output_dir);
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_synth_config(path: &Path, overrides: &[String]) -> Result<SynthConfig> {
    let (value, base) = read_config_value(path, overrides)?;
    let mut cfg: SynthConfig =
        serde_json::from_value(value).map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
    cfg.output_dir = resolve(&base, &cfg.output_dir);
    if cfg.seed.is_none() {
        return Err(Error::Config("`seed` is required".into()));
    }
    if cfg.n_rows == 0 || cfg.n_cols == 0 {
        return Err(Error::Config("n_rows and n_cols must be positive".into()));
    }
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Shared plumbing

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn is_matrix_file(path: &Path) -> Result<bool> {
    use std::io::Read;
    let mut magic = [0u8; 4];
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let n = f.read(&mut magic).map_err(|e| Error::io(path, e))?;
    Ok(n == 4 && &magic == io::MATRIX_MAGIC)
}

fn graph_kernel(path: &Path, add_identity: bool) -> Result<(KernelMatrix, usize)> {
    let g = io::read_graph(path)?;
    let k = kernels::exponential_kernel(&kernels::normalized_laplacian(&g), add_identity)?;
    Ok((k, g.edges().len()))
}

/// Basis from a graph file or a kernel matrix file.
fn load_basis(path: Option<&Path>, n: usize, opts: &KernelOptions) -> Result<Arc<KernelBasis>> {
    let Some(path) = path else {
        return Ok(Arc::new(KernelBasis::identity(n)));
    };
    let k = if is_matrix_file(path)? {
        KernelMatrix::new(io::read_matrix(path)?)?
    } else {
        graph_kernel(path, opts.add_identity)?.0
    };
    if k.dim() != n {
        return Err(Error::shape(format!(
            "{} has {} nodes but the labels have {n}",
            path.display(),
            k.dim()
        )));
    }
    Ok(Arc::new(kernels::kernel_basis(&k, opts.eig_floor)?))
}

struct Dataset {
    labels: LabeledObservations,
    positives: Vec<(usize, usize)>,
    g_m: Arc<KernelBasis>,
    g_n: Arc<KernelBasis>,
}

fn load_dataset(cfg: &ExperimentConfig, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let labels = io::read_labels(&cfg.labels)?;
    let mut positives = labels.positives();
    if let Some(frac) = cfg.eval.subsample {
        let keep = ((positives.len() as f64 * frac).round() as usize).clamp(1, positives.len().max(1));
        let mut picked = rand::seq::index::sample(rng, positives.len(), keep).into_vec();
        picked.sort_unstable();
        positives = picked.into_iter().map(|i| positives[i]).collect();
    }
    if positives.is_empty() {
        return Err(Error::invalid(format!(
            "{} has no positive labels",
            cfg.labels.display()
        )));
    }
    let g_m = load_basis(Some(&cfg.row_graph), labels.n_rows(), &cfg.kernel)?;
    let g_n = load_basis(cfg.col_graph.as_deref(), labels.n_cols(), &cfg.kernel)?;
    Ok(Dataset {
        labels,
        positives,
        g_m,
        g_n,
    })
}

/// Training label sets: positives plus one sampled negative set each, or the
/// file's own labels when no negative sets are requested.
fn training_sets(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    positives: &[(usize, usize)],
    seed: u64,
) -> Result<Vec<LabeledObservations>> {
    let (rows, cols) = (ds.labels.n_rows(), ds.labels.n_cols());
    if cfg.eval.n_negative_sets == 0 {
        let keep: std::collections::BTreeSet<(usize, usize)> = positives.iter().copied().collect();
        let triples = ds
            .labels
            .triples()
            .iter()
            .filter(|&&(m, n, y)| y < 0 || keep.contains(&(m, n)))
            .copied()
            .collect();
        return Ok(vec![LabeledObservations::new(rows, cols, triples)?]);
    }
    let size = cfg.eval.negatives_per_set.unwrap_or(positives.len());
    let sets = eval::sample_negatives(positives, rows, cols, cfg.eval.n_negative_sets, size, seed)?;
    sets.into_iter()
        .map(|negs| {
            let triples = positives
                .iter()
                .map(|&(m, n)| (m, n, 1i8))
                .chain(negs.into_iter().map(|(m, n)| (m, n, -1i8)))
                .collect();
            LabeledObservations::new(rows, cols, triples)
        })
        .collect()
}

/// Grid paths for every training set, in set order.
fn train_sets(
    cfg: &ExperimentConfig,
    sets: &[LabeledObservations],
    g_m: &Arc<KernelBasis>,
    g_n: &Arc<KernelBasis>,
) -> Vec<Result<Vec<RankPathPoint>>> {
    let s_grid = cfg.grid.s_grid();
    par::map(sets, cfg.trainer.parallel, |labels| {
        ranking::train_path(labels, g_m, g_n, &cfg.trainer, &cfg.grid.alphas, &s_grid)
    })
}

fn model_file_name(set: usize, ai: usize, si: usize) -> String {
    format!("set{set:02}_a{ai}_s{si:02}.tgpm")
}

/// Grid indices `(ai, si)` of the `k`-th point of a path.
fn grid_position(k: usize, n_s: usize) -> (usize, usize) {
    (k / n_s, k % n_s)
}

// ---------------------------------------------------------------------------
// kernel

#[derive(Debug, Serialize)]
struct KernelSummary {
    n_nodes: usize,
    n_edges: usize,
    add_identity: bool,
    eig_min: f64,
    eig_max: f64,
    trace: f64,
    basis_dim: usize,
}

pub fn cmd_kernel(
    graph: &Path,
    out: &Path,
    basis_out: Option<&Path>,
    add_identity: bool,
    eig_floor: f64,
) -> Result<()> {
    if !(eig_floor >= 0.0) {
        return Err(Error::Config("--eig-floor must be ≥ 0".into()));
    }
    let (k, n_edges) = graph_kernel(graph, add_identity)?;
    let basis = kernels::kernel_basis(&k, eig_floor)?;
    let basis_path = basis_out.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".basis");
        PathBuf::from(p)
    });
    io::write_matrix(out, k.entries())?;
    io::write_matrix(&basis_path, basis.entries())?;
    let ev = k.eigenvalues();
    let summary = KernelSummary {
        n_nodes: k.dim(),
        n_edges,
        add_identity,
        eig_min: ev.min(),
        eig_max: ev.max(),
        trace: ev.sum(),
        basis_dim: basis.dim(),
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&summary).expect("summary serializes")
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub set: usize,
    pub alpha: f64,
    pub s: f64,
    pub lambda: f64,
    /// Model path relative to the manifest, absent when training failed.
    pub file: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub n_rows: usize,
    pub n_cols: usize,
    pub seed: u64,
    pub alphas: Vec<f64>,
    pub s_grid: Vec<f64>,
    pub n_sets: usize,
    pub n_positives: usize,
    pub models: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize)]
struct TrainRecord {
    set: usize,
    alpha: f64,
    s: f64,
    lambda: f64,
    objective_trace: Vec<f64>,
    outer_iterations: usize,
    converged: bool,
    inner_failures: usize,
    rank_of_b: Option<usize>,
}

#[derive(Debug, Serialize)]
struct TrainReport {
    models: Vec<TrainRecord>,
}

/// Trains every negative set over the grid and writes the models, `manifest.json`
/// and `train_report.json` into the output directory.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Manifest> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed());
    let ds = load_dataset(cfg, &mut rng)?;
    let neg_seed: u64 = rng.random();
    let sets = training_sets(cfg, &ds, &ds.positives, neg_seed)?;
    let results = train_sets(cfg, &sets, &ds.g_m, &ds.g_n);

    let model_dir = cfg.output_dir.join("models");
    create_dir(&model_dir)?;
    let n_s = cfg.grid.s_count;
    let mut entries = Vec::new();
    let mut records = Vec::new();
    let mut first_error = None;
    let mut n_ok = 0;
    for (set, result) in results.into_iter().enumerate() {
        let points = match result {
            Ok(p) => p,
            Err(e) => {
                entries.push(ManifestEntry {
                    set,
                    alpha: f64::NAN,
                    s: f64::NAN,
                    lambda: f64::NAN,
                    file: None,
                    error: Some(e.to_string()),
                });
                first_error.get_or_insert(e);
                continue;
            }
        };
        for (k, point) in points.into_iter().enumerate() {
            let (ai, si) = grid_position(k, n_s);
            let mut entry = ManifestEntry {
                set,
                alpha: point.alpha,
                s: point.s,
                lambda: point.lambda,
                file: None,
                error: None,
            };
            match point.outcome {
                Ok(out) => {
                    let name = format!("models/{}", model_file_name(set, ai, si));
                    let mut hyperparams = cfg.trainer.hyperparams.clone();
                    hyperparams.alpha = point.alpha;
                    hyperparams.lambda = point.lambda;
                    io::write_model(
                        &cfg.output_dir.join(&name),
                        &SavedModel {
                            model: out.model,
                            hyperparams,
                            ranking: Some(out.state),
                        },
                    )?;
                    records.push(TrainRecord {
                        set,
                        alpha: point.alpha,
                        s: point.s,
                        lambda: point.lambda,
                        objective_trace: out.objective_trace,
                        outer_iterations: out.outer_iterations,
                        converged: out.converged,
                        inner_failures: out.inner_failures,
                        rank_of_b: out.last_fit.map(|r| r.rank_of_b),
                    });
                    entry.file = Some(name);
                    n_ok += 1;
                }
                Err(e) => {
                    entry.error = Some(e.to_string());
                    first_error.get_or_insert(e);
                }
            }
            entries.push(entry);
        }
    }
    if n_ok == 0 {
        return Err(first_error.unwrap_or_else(|| Error::Numerical("no model was trained".into())));
    }
    let manifest = Manifest {
        n_rows: ds.labels.n_rows(),
        n_cols: ds.labels.n_cols(),
        seed: cfg.seed(),
        alphas: cfg.grid.alphas.clone(),
        s_grid: cfg.grid.s_grid(),
        n_sets: sets.len(),
        n_positives: ds.positives.len(),
        models: entries,
    };
    io::write_json(&cfg.output_dir.join("manifest.json"), &manifest)?;
    io::write_json(
        &cfg.output_dir.join("train_report.json"),
        &TrainReport { models: records },
    )?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// evaluate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub alpha: f64,
    pub s: f64,
    pub n_models: usize,
    pub metrics: RankMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub n_test_positives: usize,
    pub cells: Vec<CellMetrics>,
}

fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn mismatch(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: format!("manifest/model mismatch: {}", msg.into()),
    }
}

/// Loads the models of each grid cell, checking them against the manifest.
fn load_cells(manifest_path: &Path, manifest: &Manifest) -> Result<Vec<(f64, f64, Vec<MeanModel>)>> {
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut cells: Vec<(f64, f64, Vec<MeanModel>)> = Vec::new();
    for &alpha in &manifest.alphas {
        for &s in &manifest.s_grid {
            cells.push((alpha, s, Vec::new()));
        }
    }
    for entry in &manifest.models {
        let Some(file) = &entry.file else { continue };
        let path = dir.join(file);
        let saved = io::read_model(&path)?;
        let cell = cells
            .iter_mut()
            .find(|c| c.0 == entry.alpha && c.1 == entry.s)
            .ok_or_else(|| {
                mismatch(
                    &path,
                    format!("grid point (α={}, s={}) is not in the grid", entry.alpha, entry.s),
                )
            })?;
        if saved.model.n_rows() != manifest.n_rows || saved.model.n_cols() != manifest.n_cols {
            return Err(mismatch(
                &path,
                format!(
                    "model covers {}x{}, manifest {}x{}",
                    saved.model.n_rows(),
                    saved.model.n_cols(),
                    manifest.n_rows,
                    manifest.n_cols
                ),
            ));
        }
        if saved.hyperparams.alpha != entry.alpha || saved.hyperparams.lambda != entry.lambda {
            return Err(mismatch(&path, "stored α or λ differs from the manifest entry"));
        }
        cell.2.push(saved.model);
    }
    Ok(cells)
}

fn curves_tsv(header: &str, rows: impl Iterator<Item = (String, Vec<f64>, Vec<f64>)>) -> String {
    let mut out = format!("{header}\tk\tprecision\trecall\n");
    for (key, p, r) in rows {
        for k in 0..CURVE_LEN {
            out.push_str(&format!("{key}\t{}\t{}\t{}\n", k + 1, p[k], r[k]));
        }
    }
    out
}

/// Ensemble metrics for every grid cell on the positives of `test_labels`.
pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    manifest_path: &Path,
    test_labels: &Path,
    out: Option<&Path>,
) -> Result<Evaluation> {
    let manifest = read_manifest(manifest_path)?;
    let test = io::read_labels(test_labels)?;
    if (test.n_rows(), test.n_cols()) != (manifest.n_rows, manifest.n_cols) {
        return Err(Error::shape(format!(
            "test labels cover {}x{} but the models {}x{}",
            test.n_rows(),
            test.n_cols(),
            manifest.n_rows,
            manifest.n_cols
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed());
    let train = load_dataset(cfg, &mut rng)?;
    if (train.labels.n_rows(), train.labels.n_cols()) != (manifest.n_rows, manifest.n_cols) {
        return Err(mismatch(
            manifest_path,
            "training labels and manifest cover different grids",
        ));
    }
    let test_pos = test.positives();
    let mut cells = Vec::new();
    for (alpha, s, models) in load_cells(manifest_path, &manifest)? {
        if models.is_empty() {
            continue;
        }
        let scores = eval::ensemble_dense(&models)?;
        let metrics = eval::evaluate(&scores, &test_pos, &train.positives, cfg.trainer.parallel)?;
        cells.push(CellMetrics {
            alpha,
            s,
            n_models: models.len(),
            metrics,
        });
    }
    let result = Evaluation {
        n_test_positives: test_pos.len(),
        cells,
    };
    let json_path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output_dir.join("evaluation.json"));
    if let Some(parent) = json_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    io::write_json(&json_path, &result)?;
    let tsv = curves_tsv(
        "alpha\ts",
        result.cells.iter().map(|c| {
            (
                format!("{}\t{}", c.alpha, c.s),
                c.metrics.precision_at.clone(),
                c.metrics.recall_at.clone(),
            )
        }),
    );
    io::atomic_write(&json_path.with_extension("tsv"), tsv.as_bytes())?;
    Ok(result)
}

// ---------------------------------------------------------------------------
// cv

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (zero for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub alpha: f64,
    pub s: f64,
    pub auc: f64,
    pub map100: f64,
    pub precision_at_100: f64,
    pub recall_at_100: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub n_train_positives: usize,
    pub n_test_positives: usize,
    /// Full metrics of the selected grid cell.
    pub selected: RankMetrics,
    pub cells: Vec<CellSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridScore {
    pub alpha: f64,
    pub s: f64,
    pub map100_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub auc: MeanStd,
    pub map100: MeanStd,
    pub precision_at_100: MeanStd,
    pub recall_at_100: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub mode: SplitMode,
    pub seed: u64,
    pub selected_alpha: f64,
    pub selected_s: f64,
    pub grid: Vec<GridScore>,
    pub folds: Vec<FoldResult>,
    pub aggregate: Aggregate,
}

fn summarize(alpha: f64, s: f64, m: &RankMetrics) -> CellSummary {
    CellSummary {
        alpha,
        s,
        auc: m.auc,
        map100: m.map100,
        precision_at_100: m.precision_at[CURVE_LEN - 1],
        recall_at_100: m.recall_at[CURVE_LEN - 1],
    }
}

/// Per-cell metrics of one fold, `None` where every model of a cell failed.
fn run_fold(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    train_pos: &[(usize, usize)],
    test_pos: &[(usize, usize)],
    seed: u64,
) -> Result<Vec<Option<RankMetrics>>> {
    let sets = training_sets(cfg, ds, train_pos, seed)?;
    let results = train_sets(cfg, &sets, &ds.g_m, &ds.g_n);
    let n_cells = cfg.grid.alphas.len() * cfg.grid.s_count;
    let mut per_cell: Vec<Vec<MeanModel>> = vec![Vec::new(); n_cells];
    let mut first_error = None;
    for result in results {
        match result {
            Ok(points) => {
                for (k, p) in points.into_iter().enumerate() {
                    match p.outcome {
                        Ok(o) => per_cell[k].push(o.model),
                        Err(e) => {
                            first_error.get_or_insert(e);
                        }
                    }
                }
            }
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    if per_cell.iter().all(Vec::is_empty) {
        return Err(first_error.unwrap_or_else(|| Error::Numerical("no model was trained".into())));
    }
    per_cell
        .iter()
        .map(|models| {
            if models.is_empty() {
                return Ok(None);
            }
            let scores = eval::ensemble_dense(models)?;
            eval::evaluate(&scores, test_pos, train_pos, cfg.trainer.parallel).map(Some)
        })
        .collect()
}

/// Five-fold cross-validation over the positive associations. The grid cell
/// with the best mean MAP@100 is reported per fold and aggregated.
pub fn cmd_cv(cfg: &ExperimentConfig) -> Result<CvResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed());
    let ds = load_dataset(cfg, &mut rng)?;
    let split_seed: u64 = rng.random();
    let fold_seeds: Vec<u64> = (0..eval::N_FOLDS).map(|_| rng.random()).collect();
    let rows: Vec<usize> = ds.positives.iter().map(|p| p.0).collect();
    let plan = eval::make_splits(&rows, cfg.eval.mode, split_seed)?;

    let fold_cells = par::map_range(eval::N_FOLDS, cfg.trainer.parallel, |f| {
        let (train, test) = plan.train_test(f);
        let train_pos: Vec<_> = train.iter().map(|&i| ds.positives[i]).collect();
        let test_pos: Vec<_> = test.iter().map(|&i| ds.positives[i]).collect();
        run_fold(cfg, &ds, &train_pos, &test_pos, fold_seeds[f])
            .map(|cells| (train_pos.len(), test_pos.len(), cells))
            .map_err(|e| e.context(&format!("fold {f}")))
    });
    let fold_cells = fold_cells.into_iter().collect::<Result<Vec<_>>>()?;

    let s_grid = cfg.grid.s_grid();
    let cell_keys: Vec<(f64, f64)> = cfg
        .grid
        .alphas
        .iter()
        .flat_map(|&a| s_grid.iter().map(move |&s| (a, s)))
        .collect();
    let grid: Vec<GridScore> = cell_keys
        .iter()
        .enumerate()
        .map(|(k, &(alpha, s))| {
            let maps: Option<Vec<f64>> = fold_cells.iter().map(|f| f.2[k].as_ref().map(|m| m.map100)).collect();
            GridScore {
                alpha,
                s,
                map100_mean: maps.map_or(f64::NAN, |v| MeanStd::of(&v).mean),
            }
        })
        .collect();
    let candidates: Vec<GridResult> = grid
        .iter()
        .map(|g| GridResult {
            alpha: g.alpha,
            lambda: g.s,
            map100: g.map100_mean,
        })
        .collect();
    let (alpha, s) = eval::select_model(&candidates)
        .map_err(|_| Error::Numerical("no grid cell was trained in every fold".into()))?;
    let k_sel = cell_keys
        .iter()
        .position(|&c| c == (alpha, s))
        .expect("selected cell is in the grid");

    let folds: Vec<FoldResult> = fold_cells
        .into_iter()
        .enumerate()
        .map(|(fold, (n_train, n_test, cells))| FoldResult {
            fold,
            n_train_positives: n_train,
            n_test_positives: n_test,
            selected: cells[k_sel].clone().expect("selected cell has metrics in every fold"),
            cells: cells
                .iter()
                .zip(&cell_keys)
                .filter_map(|(m, &(a, s))| m.as_ref().map(|m| summarize(a, s, m)))
                .collect(),
        })
        .collect();
    let agg = |f: &dyn Fn(&RankMetrics) -> f64| MeanStd::of(&folds.iter().map(|r| f(&r.selected)).collect::<Vec<_>>());
    let aggregate = Aggregate {
        auc: agg(&|m| m.auc),
        map100: agg(&|m| m.map100),
        precision_at_100: agg(&|m| m.precision_at[CURVE_LEN - 1]),
        recall_at_100: agg(&|m| m.recall_at[CURVE_LEN - 1]),
    };
    let result = CvResult {
        mode: cfg.eval.mode,
        seed: cfg.seed(),
        selected_alpha: alpha,
        selected_s: s,
        grid,
        folds,
        aggregate,
    };
    create_dir(&cfg.output_dir)?;
    io::write_json(&cfg.output_dir.join("cv.json"), &result)?;
    let mean_curve = |get: fn(&RankMetrics) -> &Vec<f64>| -> Vec<f64> {
        (0..CURVE_LEN)
            .map(|k| result.folds.iter().map(|f| get(&f.selected)[k]).sum::<f64>() / result.folds.len() as f64)
            .collect()
    };
    let tsv = curves_tsv(
        "fold",
        result
            .folds
            .iter()
            .map(|f| {
                (
                    f.fold.to_string(),
                    f.selected.precision_at.clone(),
                    f.selected.recall_at.clone(),
                )
            })
            .chain(std::iter::once((
                "mean".to_string(),
                mean_curve(|m| &m.precision_at),
                mean_curve(|m| &m.recall_at),
            ))),
    );
    io::atomic_write(&cfg.output_dir.join("cv_curves.tsv"), tsv.as_bytes())?;
    Ok(result)
}

// ---------------------------------------------------------------------------
// synth

#[derive(Debug, Serialize)]
struct SynthRecord<'a> {
    config: &'a SynthConfig,
    latent_numerical_rank: usize,
    n_labels: usize,
    files: BTreeMap<&'static str, &'static str>,
}

/// Draws a latent matrix from squared-exponential Kronecker kernels, labels it
/// and writes labels, latent matrix, kernels and a provenance record.
pub fn cmd_synth(cfg: &SynthConfig) -> Result<()> {
    let seed = cfg.seed.expect("validated synth config has a seed");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z_seed: u64 = rng.random();
    let label_seed: u64 = rng.random();
    let k_m = kernels::squared_exponential_kernel(cfg.n_rows, cfg.row_length_scale)?;
    let k_n = kernels::squared_exponential_kernel(cfg.n_cols, cfg.col_length_scale)?;
    let z: DMatrix<f64> = match cfg.rank {
        Some(r) => posterior::sample_low_rank_prior(&k_m, &k_n, r, z_seed)?,
        None => posterior::sample_prior(&k_m, &k_n, z_seed)?,
    };
    let labels = ranking::sample_labels(&z, cfg.positives_per_row, cfg.noise_var, label_seed)?;

    create_dir(&cfg.output_dir)?;
    let provenance = vec![
        "generated by tracegp synth".to_string(),
        format!("seed {seed}"),
        format!("n_rows {} n_cols {}", cfg.n_rows, cfg.n_cols),
        format!("rank {}", cfg.rank.map_or("full".to_string(), |r| r.to_string())),
        format!(
            "row_length_scale {} col_length_scale {}",
            cfg.row_length_scale, cfg.col_length_scale
        ),
        format!(
            "positives_per_row {} noise_var {}",
            cfg.positives_per_row, cfg.noise_var
        ),
    ];
    let out = &cfg.output_dir;
    io::atomic_write(
        &out.join("labels.tsv"),
        io::format_labels(&labels, &provenance).as_bytes(),
    )?;
    io::write_matrix(&out.join("latent.krnl"), &z)?;
    io::write_matrix(&out.join("row_kernel.krnl"), k_m.entries())?;
    io::write_matrix(&out.join("col_kernel.krnl"), k_n.entries())?;
    let record = SynthRecord {
        config: cfg,
        latent_numerical_rank: linalg::numerical_rank(&z, 1e-8),
        n_labels: labels.len(),
        files: BTreeMap::from([
            ("labels", "labels.tsv"),
            ("latent", "latent.krnl"),
            ("row_kernel", "row_kernel.krnl"),
            ("col_kernel", "col_kernel.krnl"),
        ]),
    };
    io::write_json(&out.join("synth.json"), &record)
}
