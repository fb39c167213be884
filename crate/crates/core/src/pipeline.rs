//! Command-line pipeline: configuration, subcommands and run manifests.
//!
//! Every subcommand writes its outputs under the output directory together
//! with `manifest_<command>.json`, which records the config hash, seed,
//! input and artifact digests. Relative paths inside a config file are
//! resolved against the directory holding that file.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::Read;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::{
    label_corpus, load_silver, write_silver, CategorySet, HyperParams, SdgCorpus, SilverRecord,
    ABLATION_CONFIGS,
};
use crate::calibration::{self, stratified_split, Calibrator, SearchSpace, Strategy};
use crate::error::{Error, Result};
use crate::evaluation::{self, LabelSet};
use crate::extraction::{
    embed_concepts, write_atomic, Embedder, ExtractionConfig, Extractor, HashEmbedder, HttpService,
    LookupEmbedder,
};
use crate::homophily::{self, GraphKind, MembershipMode, ModularityRow};
use crate::model::{self, float_cell, PatentRecord, SdgId, SdgVector};
use crate::query::{self, SplitConfig};
use crate::regressor::{self, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub paths: Paths,
    pub labeling: LabelingConfig,
    pub calibration: CalibrationConfig,
    pub evaluation: EvaluationConfig,
    pub modularity: ModularityConfig,
    pub regression: RegressionConfig,
    pub extraction: ExtractionConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            paths: Paths::default(),
            labeling: LabelingConfig::default(),
            calibration: CalibrationConfig::default(),
            evaluation: EvaluationConfig::default(),
            modularity: ModularityConfig::default(),
            regression: RegressionConfig::default(),
            extraction: ExtractionConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub patents: Option<PathBuf>,
    pub sdg_corpus: Option<PathBuf>,
    /// `src_id,dst_id` CSV for the citation graph.
    pub citations: Option<PathBuf>,
    pub features: Option<PathBuf>,
    /// Silver labels; defaults to `silver.jsonl` in the output directory.
    pub silver: Option<PathBuf>,
}

/// Which patents `label` runs on, given the calibration split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    #[default]
    All,
    Remainder,
    Validation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelingConfig {
    pub tau_function: f64,
    pub tau_solution: f64,
    pub tau_application: f64,
    pub top_n: usize,
    pub rrf_k: f64,
    pub categories: CategorySet,
    pub subset: Subset,
}

impl Default for LabelingConfig {
    fn default() -> Self {
        let p = HyperParams::default();
        LabelingConfig {
            tau_function: p.tau_function,
            tau_solution: p.tau_solution,
            tau_application: p.tau_application,
            top_n: p.top_n,
            rrf_k: p.rrf_k,
            categories: CategorySet::SILVER,
            subset: Subset::All,
        }
    }
}

impl LabelingConfig {
    pub fn params(&self) -> HyperParams {
        HyperParams {
            tau_function: self.tau_function,
            tau_solution: self.tau_solution,
            tau_application: self.tau_application,
            top_n: self.top_n,
            rrf_k: self.rrf_k,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub validation_fraction: f64,
    pub strategy: Strategy,
    pub categories: CategorySet,
    /// The search seed is always the top-level seed.
    pub space: Option<SearchSpace>,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            validation_fraction: 0.4,
            strategy: Strategy::Tpe,
            categories: CategorySet::ALL,
            space: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub bm25_top_k: usize,
    /// Method name to a JSONL file of `{"patent_id", "sdgs"}` predictions.
    pub baselines: BTreeMap<String, PathBuf>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            bm25_top_k: 10,
            baselines: BTreeMap::new(),
        }
    }
}

/// Membership source for modularity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Silver,
    Npl,
    Cpc,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Silver => "silver",
            Method::Npl => "npl",
            Method::Cpc => "cpc",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModularityConfig {
    pub ps: Vec<f64>,
    pub kinds: Vec<GraphKind>,
    pub methods: Vec<Method>,
    pub membership: MembershipMode,
}

impl Default for ModularityConfig {
    fn default() -> Self {
        ModularityConfig {
            ps: vec![0.35, 0.5, 0.75, 1.0],
            kinds: vec![GraphKind::Citation],
            methods: vec![Method::Silver],
            membership: MembershipMode::Raw,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressionConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weighted: bool,
    pub test_fraction: f64,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RegressionConfig {
            lr: t.lr,
            epochs: t.epochs,
            batch_size: t.batch_size,
            weighted: t.weighted,
            test_fraction: 0.2,
        }
    }
}

impl PipelineConfig {
    /// Reads a TOML config and resolves its relative paths against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
        let mut cfg: PipelineConfig = toml::from_str(&text)
            .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve(base);
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        for p in [
            &mut self.paths.patents,
            &mut self.paths.sdg_corpus,
            &mut self.paths.citations,
            &mut self.paths.features,
            &mut self.paths.silver,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        self.evaluation.baselines.values_mut().for_each(fix);
        fix(&mut self.extraction.cache_dir);
    }

    pub fn validate(&self) -> Result<()> {
        self.labeling
            .params()
            .validate()
            .map_err(|e| Error::config("labeling", e.to_string()))?;
        let f = self.calibration.validation_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::config("calibration.validation_fraction", "must be in (0, 1)"));
        }
        if let Some(space) = &self.calibration.space {
            space
                .validate()
                .map_err(|e| Error::config("calibration.space", e.to_string()))?;
        }
        if self.modularity.ps.iter().any(|p| !(*p > 0.0 && *p <= 1.0)) {
            return Err(Error::config("modularity.ps", "values must lie in (0, 1]"));
        }
        let t = self.regression.test_fraction;
        if !(0.0..1.0).contains(&t) {
            return Err(Error::config("regression.test_fraction", "must be in [0, 1)"));
        }
        self.extraction.validate()
    }

    /// Every input path named in the config must exist before a command
    /// starts. The silver path may be an output, so it is exempt.
    fn check_paths(&self) -> Result<()> {
        let named = [
            ("paths.patents", &self.paths.patents),
            ("paths.sdg_corpus", &self.paths.sdg_corpus),
            ("paths.citations", &self.paths.citations),
            ("paths.features", &self.paths.features),
        ];
        for (field, path) in named {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(Error::config(field, format!("{} does not exist", p.display())));
                }
            }
        }
        for (name, p) in &self.evaluation.baselines {
            if !p.exists() {
                return Err(Error::config(
                    format!("evaluation.baselines.{name}"),
                    format!("{} does not exist", p.display()),
                ));
            }
        }
        Ok(())
    }

    fn required(&self, path: &Option<PathBuf>, field: &str) -> Result<PathBuf> {
        path.clone()
            .ok_or_else(|| Error::config(field, "required by this command"))
    }

    fn silver_path(&self) -> PathBuf {
        self.paths
            .silver
            .clone()
            .unwrap_or_else(|| self.out_dir.join("silver.jsonl"))
    }

    /// Digest of the config with the output directory blanked, so reruns
    /// into another directory share it.
    fn digest(&self) -> Result<String> {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&c)?)))
    }
}

#[derive(Debug, Parser)]
#[command(name = "patent-sdg", version, about = "Weak supervision of patent SDG labels")]
pub struct Cli {
    /// TOML pipeline config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `out_dir` from the config.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads; defaults to one per core.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract and embed concepts for patents or SDG documents.
    Extract(ExtractArgs),
    /// Write silver SDG vectors for the patent corpus.
    Label(LabelArgs),
    /// Search labeling hyperparameters on the validation split.
    Calibrate(CalibrateArgs),
    /// Recall of silver labels and baselines against NPL anchors.
    Evaluate,
    /// SDG co-occurrence matrices and their correlations.
    Cooccur,
    /// Overlapping modularity of SDG memberships on patent graphs.
    Modularity(ModularityArgs),
    /// Split a boolean search query under a length limit.
    SplitQuery(SplitQueryArgs),
    /// Train the SDG regressor on silver labels.
    Regress(RegressArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RecordKind {
    Patents,
    Documents,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "patents")]
    pub kind: RecordKind,
    /// Call the extraction service on cache misses.
    #[arg(long)]
    pub online: bool,
    /// JSONL of `{"text", "embedding"}` rows.
    #[arg(long, conflicts_with = "hash_dim")]
    pub embeddings: Option<PathBuf>,
    /// Use hashed bag-of-words embeddings of this size instead.
    #[arg(long)]
    pub hash_dim: Option<usize>,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    /// Hyperparameters as written by `calibrate`.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub tau_function: Option<f64>,
    #[arg(long)]
    pub tau_solution: Option<f64>,
    #[arg(long)]
    pub tau_application: Option<f64>,
    #[arg(long)]
    pub top_n: Option<usize>,
    /// Categories to fuse, e.g. `function+solution`.
    #[arg(long)]
    pub categories: Option<String>,
    #[arg(long, value_enum)]
    pub subset: Option<Subset>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// JSON search space; fields left out take their defaults.
    #[arg(long)]
    pub space: Option<PathBuf>,
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ModularityArgs {
    #[arg(long = "p")]
    pub ps: Vec<f64>,
    #[arg(long = "kind")]
    pub kinds: Vec<GraphKind>,
    #[arg(long = "method", value_enum)]
    pub methods: Vec<Method>,
    #[arg(long)]
    pub membership: Option<MembershipMode>,
}

#[derive(Debug, Args)]
pub struct SplitQueryArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Directory for the part files; defaults to `query_parts` in the output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = SplitConfig::default().max_chars)]
    pub max_chars: usize,
    #[arg(long, default_value_t = SplitConfig::default().max_and_chain)]
    pub max_and_chain: usize,
    /// Verify by truth table that the parts match the original.
    #[arg(long)]
    pub check: bool,
}

#[derive(Debug, Args)]
pub struct RegressArgs {
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub silver: Option<PathBuf>,
    #[arg(long)]
    pub weighted: bool,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Extract(_) => "extract",
            Command::Label(_) => "label",
            Command::Calibrate(_) => "calibrate",
            Command::Evaluate => "evaluate",
            Command::Cooccur => "cooccur",
            Command::Modularity(_) => "modularity",
            Command::SplitQuery(_) => "split-query",
            Command::Regress(_) => "regress",
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::config("--threads", "must be positive"));
        }
        // Fails only if a pool already exists, as in repeated in-process runs.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    apply_overrides(&mut cfg, &cli.command)?;
    cfg.validate()?;

    let mut run = Run::new(cli.command.name(), &cfg)?;
    let outcome = cfg.check_paths().and_then(|()| match &cli.command {
        Command::Extract(a) => extract(&cfg, a, &mut run),
        Command::Label(a) => label(&cfg, a, &mut run),
        Command::Calibrate(_) => calibrate(&cfg, &mut run),
        Command::Evaluate => evaluate(&cfg, &mut run),
        Command::Cooccur => cooccur(&cfg, &mut run),
        Command::Modularity(_) => modularity(&cfg, &mut run),
        Command::SplitQuery(a) => split_query(&cfg, a, &mut run),
        Command::Regress(_) => regress(&cfg, &mut run),
    });
    run.finish(outcome)
}

/// Folds command-line settings into the config so the manifest hash covers
/// them.
fn apply_overrides(cfg: &mut PipelineConfig, command: &Command) -> Result<()> {
    match command {
        Command::Label(a) => {
            let l = &mut cfg.labeling;
            if let Some(path) = &a.params {
                let p: HyperParams = read_json(path)?;
                l.tau_function = p.tau_function;
                l.tau_solution = p.tau_solution;
                l.tau_application = p.tau_application;
                l.top_n = p.top_n;
                l.rrf_k = p.rrf_k;
            }
            l.tau_function = a.tau_function.unwrap_or(l.tau_function);
            l.tau_solution = a.tau_solution.unwrap_or(l.tau_solution);
            l.tau_application = a.tau_application.unwrap_or(l.tau_application);
            l.top_n = a.top_n.unwrap_or(l.top_n);
            if let Some(c) = &a.categories {
                l.categories =
                    CategorySet::parse(c).map_err(|e| Error::config("--categories", e.to_string()))?;
            }
            l.subset = a.subset.unwrap_or(l.subset);
        }
        Command::Calibrate(a) => {
            let c = &mut cfg.calibration;
            if let Some(path) = &a.space {
                c.space = Some(read_json(path)?);
            }
            if let Some(s) = a.strategy {
                c.strategy = s;
            }
            if let Some(seed) = a.seed {
                cfg.seed = seed;
            }
            let space = c.space.get_or_insert_with(SearchSpace::default);
            space.budget = a.budget.unwrap_or(space.budget);
            space.seed = cfg.seed;
        }
        Command::Modularity(a) => {
            let m = &mut cfg.modularity;
            if !a.ps.is_empty() {
                m.ps = a.ps.clone();
            }
            if !a.kinds.is_empty() {
                m.kinds = a.kinds.clone();
            }
            if !a.methods.is_empty() {
                m.methods = a.methods.clone();
            }
            m.membership = a.membership.unwrap_or(m.membership);
        }
        Command::Regress(a) => {
            if a.features.is_some() {
                cfg.paths.features = a.features.clone();
            }
            if a.silver.is_some() {
                cfg.paths.silver = a.silver.clone();
            }
            cfg.regression.weighted |= a.weighted;
        }
        Command::Extract(a) => cfg.extraction.offline &= !a.online,
        Command::Evaluate | Command::Cooccur | Command::SplitQuery(_) => {}
    }
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))
}

fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f
            .read(&mut buf)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config_sha256: &'a str,
    seed: u64,
    inputs: &'a BTreeMap<String, String>,
    artifacts: BTreeMap<String, String>,
    status: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    stale: Vec<String>,
}

/// Artifact names listed by an existing manifest, if it can be read.
fn previous_artifacts(manifest: &Path) -> Vec<String> {
    let Ok(text) = fs::read_to_string(manifest) else {
        return Vec::new();
    };
    let keys = |field: &str, v: &serde_json::Value| -> Vec<String> {
        match v.get(field) {
            Some(serde_json::Value::Object(m)) => m.keys().cloned().collect(),
            Some(serde_json::Value::Array(a)) => a.iter().filter_map(|k| k.as_str().map(String::from)).collect(),
            _ => Vec::new(),
        }
    };
    match serde_json::from_str::<serde_json::Value>(&text) {
        Ok(v) => [keys("artifacts", &v), keys("stale", &v)].concat(),
        Err(_) => Vec::new(),
    }
}

/// Tracks what a command read and wrote.
pub struct Run {
    command: &'static str,
    out_dir: PathBuf,
    config_sha256: String,
    seed: u64,
    inputs: BTreeMap<String, String>,
    artifacts: Vec<(String, PathBuf)>,
}

impl Run {
    fn new(command: &'static str, cfg: &PipelineConfig) -> Result<Self> {
        fs::create_dir_all(&cfg.out_dir)
            .map_err(|e| Error::io(format!("creating {}", cfg.out_dir.display()), e))?;
        Ok(Run {
            command,
            out_dir: cfg.out_dir.clone(),
            config_sha256: cfg.digest()?,
            seed: cfg.seed,
            inputs: BTreeMap::new(),
            artifacts: Vec::new(),
        })
    }

    /// Records an input under `role` and returns its path.
    fn input(&mut self, role: &str, path: &Path) -> Result<PathBuf> {
        self.inputs.insert(role.to_string(), sha256_file(path)?);
        Ok(path.to_path_buf())
    }

    /// Registers an artifact in the output directory.
    fn artifact(&mut self, name: &str) -> PathBuf {
        let path = self.out_dir.join(name);
        self.register(path)
    }

    fn register(&mut self, path: PathBuf) -> PathBuf {
        let key = path
            .strip_prefix(&self.out_dir)
            .map(|p| p.to_string_lossy().replace('\\', "/"))
            .unwrap_or_else(|_| path.display().to_string());
        self.artifacts.push((key, path.clone()));
        path
    }

    fn finish(self, outcome: Result<()>) -> Result<()> {
        let mut artifacts = BTreeMap::new();
        let mut stale = Vec::new();
        for (key, path) in &self.artifacts {
            if !path.exists() {
                continue;
            }
            if outcome.is_ok() {
                artifacts.insert(key.clone(), sha256_file(path)?);
            } else {
                stale.push(key.clone());
            }
        }
        let path = self.out_dir.join(format!("manifest_{}.json", self.command));
        if outcome.is_err() {
            // Outputs of the last run of this command no longer match its manifest.
            for key in previous_artifacts(&path) {
                let file = self.out_dir.join(&key);
                if file.exists() && !stale.contains(&key) {
                    stale.push(key);
                }
            }
        }
        stale.sort();
        let manifest = Manifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            config_sha256: &self.config_sha256,
            seed: self.seed,
            inputs: &self.inputs,
            artifacts,
            status: if outcome.is_ok() { "ok" } else { "failed" },
            error: outcome.as_ref().err().map(ToString::to_string),
            stale,
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        write_atomic(&path, &bytes)?;
        outcome
    }
}

fn load_inputs(cfg: &PipelineConfig, run: &mut Run) -> Result<(Vec<PatentRecord>, SdgCorpus)> {
    let patents = run.input("patents", &cfg.required(&cfg.paths.patents, "paths.patents")?)?;
    let corpus = run.input("sdg_corpus", &cfg.required(&cfg.paths.sdg_corpus, "paths.sdg_corpus")?)?;
    Ok((
        model::load_patents(&patents)?,
        SdgCorpus::new(model::load_sdg_corpus(&corpus)?)?,
    ))
}

fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn extract(cfg: &PipelineConfig, args: &ExtractArgs, run: &mut Run) -> Result<()> {
    let input = run.input("records", &args.input)?;
    let embedder: Box<dyn Embedder> = match (&args.embeddings, args.hash_dim) {
        (Some(path), _) => Box::new(LookupEmbedder::load(&run.input("embeddings", path)?)?),
        (None, Some(dim)) => Box::new(HashEmbedder::new(dim)?),
        (None, None) => {
            return Err(Error::config("--embeddings", "give --embeddings or --hash-dim"))
        }
    };
    let service = if cfg.extraction.offline {
        None
    } else {
        Some(HttpService::new(&cfg.extraction)?)
    };
    let extractor = Extractor::new(
        &cfg.extraction,
        service.as_ref().map(|s| s as &dyn crate::extraction::ConceptService),
    )?;
    let out = run.register(args.out.clone());
    let dim = embedder.dim();

    match args.kind {
        RecordKind::Patents => {
            let mut records = model::load_patents(&input)?;
            let texts: Vec<String> = records.iter().map(PatentRecord::text).collect();
            for (r, t) in records.iter_mut().zip(extractor.extract_all(&texts)?) {
                r.concepts = embed_concepts(&t, embedder.as_ref(), dim)?;
            }
            model::write_patents(&out, &records)
        }
        RecordKind::Documents => {
            let mut docs = model::load_sdg_corpus(&input)?;
            let texts: Vec<String> = docs.iter().map(|d| d.text()).collect();
            for (d, t) in docs.iter_mut().zip(extractor.extract_all(&texts)?) {
                d.concepts = embed_concepts(&t, embedder.as_ref(), dim)?;
            }
            model::write_sdg_corpus(&out, &docs)
        }
    }
}

fn subset_patents(cfg: &PipelineConfig, patents: Vec<PatentRecord>, subset: Subset) -> Result<Vec<PatentRecord>> {
    if subset == Subset::All {
        return Ok(patents);
    }
    let split = stratified_split(&patents, cfg.calibration.validation_fraction, cfg.seed)?;
    let keep: BTreeSet<usize> = match subset {
        Subset::Validation => split.validation.into_iter().collect(),
        _ => split.remainder.into_iter().collect(),
    };
    Ok(patents
        .into_iter()
        .enumerate()
        .filter(|(i, _)| keep.contains(i))
        .map(|(_, p)| p)
        .collect())
}

fn label(cfg: &PipelineConfig, args: &LabelArgs, run: &mut Run) -> Result<()> {
    let (patents, corpus) = load_inputs(cfg, run)?;
    let patents = subset_patents(cfg, patents, cfg.labeling.subset)?;
    let records = label_corpus(&patents, &corpus, &cfg.labeling.params(), cfg.labeling.categories)?;
    let unmatched = records.iter().filter(|r| r.no_match).count();
    log::info!("labeled {} patents, {unmatched} without a match", records.len());
    let out = match &args.out {
        Some(p) => run.register(p.clone()),
        None => run.register(cfg.silver_path()),
    };
    write_silver(&out, &records)
}

#[derive(Serialize)]
struct SplitIds<'a> {
    validation_fraction: f64,
    seed: u64,
    validation: Vec<&'a str>,
    remainder: Vec<&'a str>,
    merged_classes: &'a [SdgId],
}

fn calibrate(cfg: &PipelineConfig, run: &mut Run) -> Result<()> {
    let (patents, corpus) = load_inputs(cfg, run)?;
    let split = stratified_split(&patents, cfg.calibration.validation_fraction, cfg.seed)?;
    let validation: Vec<PatentRecord> = split.validation.iter().map(|&i| patents[i].clone()).collect();
    let ids = |idx: &[usize]| idx.iter().map(|&i| patents[i].patent_id.as_str()).collect();
    write_json_pretty(
        &run.artifact("split.json"),
        &SplitIds {
            validation_fraction: cfg.calibration.validation_fraction,
            seed: cfg.seed,
            validation: ids(&split.validation),
            remainder: ids(&split.remainder),
            merged_classes: &split.merged_classes,
        },
    )?;

    let space = cfg.calibration.space.clone().unwrap_or_default();
    let calibrator = Calibrator::new(&validation, &corpus, cfg.calibration.categories)?;
    let trials_path = run.artifact("trials.jsonl");
    let opt = calibration::optimize(&space, cfg.calibration.strategy, &calibrator)?;
    model::write_jsonl(&trials_path, &opt.trials)?;
    log::info!(
        "best trial {} with loss {:.6}",
        opt.best.trial,
        opt.best.value.unwrap_or(f64::NAN)
    );
    write_json_pretty(&run.artifact("best_params.json"), &opt.best.params)
}

/// Anchored patents that also have silver labels, as reference sets.
fn reference_labels(patents: &[PatentRecord], silver: &[SilverRecord]) -> BTreeMap<String, LabelSet> {
    let labeled: BTreeSet<&str> = silver.iter().map(|r| r.patent_id.as_str()).collect();
    evaluation::anchor_labels(patents)
        .into_iter()
        .filter(|(id, _)| labeled.contains(id.as_str()))
        .collect()
}

fn evaluate(cfg: &PipelineConfig, run: &mut Run) -> Result<()> {
    let (patents, corpus) = load_inputs(cfg, run)?;
    let silver = load_silver(&run.input("silver", &cfg.silver_path())?)?;
    let refs = reference_labels(&patents, &silver);
    if refs.is_empty() {
        return Err(Error::invalid("no labeled patent has NPL anchors"));
    }
    let anchored: Vec<PatentRecord> = patents
        .iter()
        .filter(|p| refs.contains_key(&p.patent_id))
        .cloned()
        .collect();

    let mut methods: Vec<(String, BTreeMap<String, LabelSet>)> = vec![(
        "silver".into(),
        silver
            .iter()
            .filter(|r| refs.contains_key(&r.patent_id))
            .map(|r| (r.patent_id.clone(), evaluation::binarize(&r.sdg_vector)))
            .collect(),
    )];
    methods.push((
        "bm25".into(),
        evaluation::bm25_labels(&anchored, &corpus, cfg.evaluation.bm25_top_k)?,
    ));
    for (name, path) in &cfg.evaluation.baselines {
        let mut preds = evaluation::load_label_sets(&run.input(&format!("baseline.{name}"), path)?)?;
        preds.retain(|id, _| refs.contains_key(id));
        for id in refs.keys() {
            preds.entry(id.clone()).or_default();
        }
        methods.push((name.clone(), preds));
    }

    let mut summary = csv::Writer::from_path(run.artifact("recall_summary.csv"))?;
    summary.write_record(["method", "patents", "macro_recall", "micro_recall"])?;
    for (name, preds) in &methods {
        let report = evaluation::recall_scores(preds, &refs)?;
        evaluation::write_recall_csv(&run.artifact(&format!("recall_{name}.csv")), &report)?;
        summary.write_record([
            name.as_str(),
            &refs.len().to_string(),
            &float_cell(report.macro_recall),
            &float_cell(report.micro_recall),
        ])?;
    }
    summary.flush().map_err(|e| Error::io("writing recall summary", e))?;

    let params = silver
        .first()
        .map_or_else(|| cfg.labeling.params(), |r| r.params.hyper);
    let rows = evaluation::ablation_suite(&corpus, &anchored, &params, &ABLATION_CONFIGS)?;
    evaluation::write_ablation_csv(&run.artifact("ablation.csv"), &rows)?;

    let ref_sets: Vec<LabelSet> = refs.values().cloned().collect();
    let mut columns = vec![("npl".to_string(), evaluation::sdg_frequencies(&ref_sets))];
    for (name, preds) in &methods {
        let sets: Vec<LabelSet> = preds.values().cloned().collect();
        columns.push((name.clone(), evaluation::sdg_frequencies(&sets)));
    }
    let columns: Vec<(&str, _)> = columns.iter().map(|(n, c)| (n.as_str(), *c)).collect();
    evaluation::write_histogram_csv(&run.artifact("histograms.csv"), &columns)
}

fn cooccur(cfg: &PipelineConfig, run: &mut Run) -> Result<()> {
    let patents = model::load_patents(&run.input("patents", &cfg.required(&cfg.paths.patents, "paths.patents")?)?)?;
    let silver = load_silver(&run.input("silver", &cfg.silver_path())?)?;
    let refs = reference_labels(&patents, &silver);
    let silver_sets: Vec<LabelSet> = silver.iter().map(|r| evaluation::binarize(&r.sdg_vector)).collect();
    let npl_sets: Vec<LabelSet> = refs.into_values().collect();

    let mut normalized = Vec::new();
    for (name, sets) in [("silver", &silver_sets), ("npl", &npl_sets)] {
        let raw = evaluation::cooccurrence(sets);
        let norm = evaluation::row_normalize(&raw);
        evaluation::write_matrix_csv(&run.artifact(&format!("cooc_{name}.csv")), &raw)?;
        evaluation::write_matrix_csv(&run.artifact(&format!("cooc_{name}_norm.csv")), &norm)?;
        normalized.push(norm);
    }

    let freq = |sets: &[LabelSet]| -> Vec<f64> {
        evaluation::sdg_frequencies(sets).iter().map(|&c| c as f64).collect()
    };
    let comparisons = [
        ("sdg_frequency", freq(&silver_sets), freq(&npl_sets)),
        (
            "cooccurrence_profile",
            normalized[0].off_diagonal(),
            normalized[1].off_diagonal(),
        ),
    ];
    let mut w = csv::Writer::from_path(run.artifact("correlations.csv"))?;
    w.write_record(["comparison", "n", "pearson", "spearman"])?;
    for (name, x, y) in &comparisons {
        // Undefined correlations (constant input) are left blank.
        let cell = |r: Result<f64>| match r {
            Ok(v) => float_cell(v),
            Err(e) => {
                log::warn!("{name}: {e}");
                String::new()
            }
        };
        w.write_record([
            name.to_string(),
            x.len().to_string(),
            cell(evaluation::pearson(x, y)),
            cell(evaluation::spearman(x, y)),
        ])?;
    }
    w.flush().map_err(|e| Error::io("writing correlations", e))
}

fn modularity(cfg: &PipelineConfig, run: &mut Run) -> Result<()> {
    let m = &cfg.modularity;
    let patents = model::load_patents(&run.input("patents", &cfg.required(&cfg.paths.patents, "paths.patents")?)?)?;
    let silver: HashMap<String, SdgVector> = if m.methods.contains(&Method::Silver) {
        load_silver(&run.input("silver", &cfg.silver_path())?)?
            .into_iter()
            .map(|r| (r.patent_id, r.sdg_vector))
            .collect()
    } else {
        HashMap::new()
    };
    let npl: HashMap<String, SdgVector> = patents
        .iter()
        .filter(|p| !p.anchor_sdgs.is_empty())
        .map(|p| Ok((p.patent_id.clone(), calibration::anchor_distribution(p)?.0)))
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for &kind in &m.kinds {
        let edges = match kind {
            GraphKind::Citation => Some(run.input(
                "citations",
                &cfg.required(&cfg.paths.citations, "paths.citations")?,
            )?),
            _ => None,
        };
        let graph = homophily::build_graph(&patents, kind, edges.as_deref())?;
        log::info!("{kind} graph: {} nodes, {} arcs", graph.node_count(), graph.arc_count());
        for &method in &m.methods {
            let w = match method {
                Method::Silver => homophily::memberships(&graph, &silver, m.membership),
                Method::Npl => homophily::memberships(&graph, &npl, m.membership),
                Method::Cpc => homophily::cpc_memberships(&graph, &patents)?,
            };
            for (p, q) in homophily::modularity_sweep(&graph, &w, &m.ps)? {
                rows.push(ModularityRow {
                    kind,
                    method: method.name().to_string(),
                    p,
                    q,
                });
            }
        }
    }
    homophily::write_modularity_csv(&run.artifact("modularity.csv"), &rows)
}

#[derive(Serialize)]
struct QueryPart<'a> {
    file: &'a str,
    chars: usize,
}

fn split_query(cfg: &PipelineConfig, args: &SplitQueryArgs, run: &mut Run) -> Result<()> {
    let raw = fs::read_to_string(run.input("query", &args.input)?)
        .map_err(|e| Error::io(format!("reading {}", args.input.display()), e))?;
    let split_cfg = SplitConfig {
        max_chars: args.max_chars,
        max_and_chain: args.max_and_chain,
    };
    let parts = query::split_query(&raw, &split_cfg)?;
    if args.check {
        let original = query::parse(&query::sanitize(&raw)?)?;
        let nodes = parts.iter().map(|p| query::parse(p)).collect::<Result<Vec<_>>>()?;
        if let Some(witness) = query::counterexample(&nodes, &original)? {
            return Err(Error::Unsplittable(format!(
                "parts disagree with the query under {witness:?}"
            )));
        }
    }

    let dir = args.out.clone().unwrap_or_else(|| cfg.out_dir.join("query_parts"));
    fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    // Parts from an earlier, longer split would otherwise linger.
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))? {
        let path = entry.map_err(|e| Error::io("listing parts", e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("part_") && name.ends_with(".txt") {
            fs::remove_file(&path).map_err(|e| Error::io(format!("removing {}", path.display()), e))?;
        }
    }
    let mut listing = Vec::new();
    let names: Vec<String> = (1..=parts.len()).map(|i| format!("part_{i:04}.txt")).collect();
    for (name, part) in names.iter().zip(&parts) {
        let path = run.register(dir.join(name));
        write_atomic(&path, format!("{part}\n").as_bytes())?;
        listing.push(QueryPart {
            file: name,
            chars: part.chars().count(),
        });
    }
    log::info!("split into {} parts", parts.len());
    write_json_pretty(&run.register(dir.join("parts.json")), &listing)
}

fn regress(cfg: &PipelineConfig, run: &mut Run) -> Result<()> {
    let r = &cfg.regression;
    let features = regressor::load_features(&run.input(
        "features",
        &cfg.required(&cfg.paths.features, "paths.features")?,
    )?)?;
    let silver = load_silver(&run.input("silver", &cfg.silver_path())?)?;
    let (mut ids, _) = regressor::join_silver(&features, &silver)?;

    let n_test = (r.test_fraction * ids.len() as f64).round() as usize;
    if n_test >= ids.len() {
        return Err(Error::config("regression.test_fraction", "leaves no training rows"));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let test_ids: BTreeSet<&str> = ids[..n_test].iter().map(String::as_str).collect();
    let (test_rows, train_rows): (Vec<_>, Vec<_>) = features
        .iter()
        .cloned()
        .partition(|(id, _)| test_ids.contains(id.as_str()));

    let (_, train_batch) = regressor::join_silver(&train_rows, &silver)?;
    let train_cfg = TrainConfig {
        lr: r.lr,
        epochs: r.epochs,
        seed: cfg.seed,
        batch_size: r.batch_size,
        weighted: r.weighted,
    };
    let training = regressor::train(&train_batch, &train_cfg)?;
    write_json_pretty(&run.artifact("model.json"), &training.model)?;

    let mut h = csv::Writer::from_path(run.artifact("history.csv"))?;
    h.write_record(["epoch", "loss"])?;
    for (i, l) in training.history.iter().enumerate() {
        h.write_record([(i + 1).to_string(), float_cell(*l)])?;
    }
    h.flush().map_err(|e| Error::io("writing history", e))?;

    let mut reports = vec![("train", regressor::error_report(&training.model, &train_batch)?)];
    if n_test > 0 {
        let (_, test_batch) = regressor::join_silver(&test_rows, &silver)?;
        reports.push(("test", regressor::error_report(&training.model, &test_batch)?));
    }
    let mut w = csv::Writer::from_path(run.artifact("regression_errors.csv"))?;
    w.write_record(["split", "sdg", "mse", "mae"])?;
    for (split, report) in &reports {
        for e in &report.per_sdg {
            w.write_record([split.to_string(), e.sdg.to_string(), float_cell(e.mse), float_cell(e.mae)])?;
        }
        w.write_record([split.to_string(), "all".into(), float_cell(report.mse), float_cell(report.mae)])?;
    }
    w.flush().map_err(|e| Error::io("writing regression errors", e))
}
