//! Command-line verbs.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use shoeprint_core::evalkit::{self, Corpus, CorpusOptions, ExperimentOptions, Regime, Scenario, ScenarioData};
use shoeprint_core::forest::{self, Dataset, ForestModel, HyperGrid, Hyperparams};
use shoeprint_core::icp::{self, IcpConfig};
use shoeprint_core::imgproc;
use shoeprint_core::pipeline::{self, PipelineConfig, PrintOptions};
use shoeprint_core::pointcloud::{Foot, PointCloud, Region};
use shoeprint_core::synthgen::{self, CorpusSpec};

use crate::api::{self, AppState, ServiceConfig};
use crate::error::{Result, ServiceError};
use crate::jobs::{self, AlignmentSummary, ModelRegistry};
use crate::population::Population;

#[derive(Debug, Parser)]
#[command(name = "shoeprint", version, about = "Shoeprint alignment, similarity features and mated-pair scoring")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Edge-detect an image and write its point cloud as CSV.
    Extract(ExtractArgs),
    /// Align two point-cloud CSVs and print the transform mapping K onto Q.
    Align(AlignArgs),
    /// Compute the 35 similarity features of an image pair.
    Features(PairArgs),
    /// Train a random forest on feature CSVs.
    Train(TrainArgs),
    /// Score an image pair with a trained model.
    Predict(PredictArgs),
    /// Evaluate a model on feature CSVs.
    Evaluate(EvaluateArgs),
    /// Generate a synthetic corpus with its registry.
    Synth(SynthArgs),
    /// Run the regime by scenario experiment matrix.
    Experiment(ExperimentArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// PipelineConfig JSON; overrides the defaults.
    #[arg(long)]
    pub pipeline: Option<PathBuf>,
    /// Edge pixels darker than this become points.
    #[arg(long)]
    pub darkness_threshold: Option<u8>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl PipelineArgs {
    fn config(&self, fallback: Option<&Path>) -> Result<PipelineConfig> {
        let path = self.pipeline.as_deref().or(fallback.filter(|p| p.exists()));
        let mut cfg = match path {
            Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
            None => PipelineConfig::default(),
        };
        if let Some(t) = self.darkness_threshold {
            cfg.darkness_threshold = t;
        }
        cfg.seed = self.seed;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    pub image: PathBuf,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = imgproc::DEFAULT_DARKNESS_THRESHOLD)]
    pub darkness_threshold: u8,
    /// Mirror the image before extraction.
    #[arg(long)]
    pub reflect: bool,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    pub q_points: PathBuf,
    pub k_points: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Include all candidate runs in the output.
    #[arg(long)]
    pub candidates: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum CutArg {
    Toe,
    Heel,
    Inside,
    Outside,
}

impl From<CutArg> for Region {
    fn from(c: CutArg) -> Region {
        match c {
            CutArg::Toe => Region::Toe,
            CutArg::Heel => Region::Heel,
            CutArg::Inside => Region::Inside,
            CutArg::Outside => Region::Outside,
        }
    }
}

#[derive(Debug, Args)]
pub struct PairArgs {
    pub q_image: PathBuf,
    pub k_image: PathBuf,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Keep only this region of Q.
    #[arg(long, value_enum)]
    pub q_cut: Option<CutArg>,
    /// Keep only this region of K.
    #[arg(long, value_enum)]
    pub k_cut: Option<CutArg>,
    /// Foot of the prints, needed for inside/outside cuts.
    #[arg(long, default_value = "L")]
    pub foot: Foot,
    /// Mirror K before extraction (opposite-foot comparisons).
    #[arg(long)]
    pub reflect_k: bool,
}

impl PairArgs {
    fn analyze(&self) -> Result<pipeline::PairAnalysis> {
        let cfg = self.pipeline.config(None)?;
        let q = imgproc::load_gray(&self.q_image)?;
        let k = imgproc::load_gray(&self.k_image)?;
        let q_opts = PrintOptions { cut: self.q_cut.map(|c| (c.into(), self.foot)), reflect: false };
        let k_opts = PrintOptions { cut: self.k_cut.map(|c| (c.into(), self.foot)), reflect: self.reflect_k };
        Ok(pipeline::analyze_images(&q, q_opts, &k, k_opts, &cfg)?)
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum GridArg {
    /// Train with the given hyperparameters only.
    None,
    /// Cross-validate all 144 grid points and train the best.
    Full,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(required = true)]
    pub features: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = GridArg::None)]
    pub grid: GridArg,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub n_trees: usize,
    /// Omit for unlimited depth.
    #[arg(long)]
    pub max_depth: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub min_split: usize,
    #[arg(long, default_value_t = 1)]
    pub min_leaf: usize,
    /// Append category indicator columns derived from each row's scenario.
    #[arg(long)]
    pub indicators: bool,
    /// Write the full cross-validation table here.
    #[arg(long)]
    pub cv_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub pair: PairArgs,
    /// Category for models trained with indicator columns.
    #[arg(long, default_value = "pristine")]
    pub category: String,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(required = true)]
    pub features: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// CorpusSpec JSON; missing fields take their defaults.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub models: Option<usize>,
    #[arg(long)]
    pub shoes_per_model: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Registry CSV; features are computed from its images.
    #[arg(long, conflicts_with = "features", required_unless_present = "features")]
    pub registry: Option<PathBuf>,
    /// Directory of precomputed `<Scenario>_train.csv` / `<Scenario>_test.csv` files.
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated regimes: baseline, full, full-indicators, category, scenario, loo, category-loo.
    #[arg(long, value_delimiter = ',', default_value = "baseline,full")]
    pub regime: Vec<String>,
    /// Comma-separated scenarios to featurize (registry mode); default all.
    #[arg(long, value_delimiter = ',')]
    pub scenarios: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub n_trees: usize,
    #[arg(long, default_value_t = 0.7)]
    pub train_fraction: f64,
    /// PipelineConfig JSON; defaults to `pipeline.json` next to the registry when present.
    #[arg(long)]
    pub pipeline: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "SOLE_PORT", default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "0.0.0.0")]
    pub host: String,
    #[arg(long, env = "SOLE_MODEL_DIR")]
    pub model_dir: Option<PathBuf>,
    #[arg(long)]
    pub population_dir: Option<PathBuf>,
    /// Built UI bundle served at `/`.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
    #[arg(long, env = "SOLE_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    pub workers: u16,
    #[arg(long, default_value_t = 64)]
    pub queue: usize,
    #[arg(long, default_value_t = 25)]
    pub max_upload_mb: usize,
    #[arg(long)]
    pub pipeline: Option<PathBuf>,
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn read_datasets(paths: &[PathBuf]) -> Result<Dataset> {
    let parts = paths.iter().map(Dataset::read_csv_path).collect::<shoeprint_core::Result<Vec<_>>>()?;
    let refs: Vec<&Dataset> = parts.iter().collect();
    Ok(Dataset::concat(&refs)?)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Extract(a) => extract(a),
        Command::Align(a) => align(a),
        Command::Features(a) => features(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Synth(a) => synth(a),
        Command::Experiment(a) => experiment(a),
        Command::Serve(a) => serve(a),
    }
}

fn extract(a: ExtractArgs) -> Result<()> {
    let mut img = imgproc::load_gray(&a.image)?;
    if a.reflect {
        img = img.flip_horizontal();
    }
    let cloud = imgproc::extract_points(&imgproc::edge_detect(&img), a.darkness_threshold);
    match a.out {
        Some(path) => {
            cloud.write_csv(fs::File::create(&path)?)?;
            print_json(&json!({ "points": cloud.len(), "out": path }))
        }
        None => Ok(cloud.write_csv(io::stdout().lock())?),
    }
}

fn align(a: AlignArgs) -> Result<()> {
    let q = PointCloud::read_csv(fs::File::open(&a.q_points)?)?;
    let k = PointCloud::read_csv(fs::File::open(&a.k_points)?)?;
    let res = icp::align(&q, &k, &IcpConfig { seed: a.seed, ..IcpConfig::default() })?;
    if a.candidates {
        print_json(&res)
    } else {
        print_json(&AlignmentSummary::from(&res))
    }
}

fn features(a: PairArgs) -> Result<()> {
    let res = a.analyze()?;
    print_json(&json!({
        "alignment": AlignmentSummary::from(&res.alignment),
        "features": jobs::named_features(&res.features.values),
    }))
}

fn train(a: TrainArgs) -> Result<()> {
    let mut data = read_datasets(&a.features)?;
    if a.indicators {
        data = data.with_indicators(evalkit::category_of_name)?;
    }
    let mut params = Hyperparams { n_trees: a.n_trees, max_depth: a.max_depth, min_split: a.min_split, min_leaf: a.min_leaf };
    let mut summary = json!({ "rows": data.len(), "out": a.out });
    if let GridArg::Full = a.grid {
        let grid = HyperGrid::default();
        let res = forest::grid_search_cv(&data, &grid, a.folds, a.seed)?;
        params = res.best;
        summary["grid_points"] = json!(res.table.len());
        summary["best_cv_accuracy"] = json!(res.best_accuracy);
        if let Some(p) = &a.cv_out {
            fs::write(p, serde_json::to_string_pretty(&res)?)?;
        }
    }
    let model = forest::train(&data, params, a.seed)?;
    model.save(&a.out)?;
    summary["hyperparams"] = json!(params);
    summary["oob_accuracy"] = json!(model.oob_accuracy);
    print_json(&summary)
}

fn predict(a: PredictArgs) -> Result<()> {
    let model = ForestModel::load(&a.model)?;
    let category = jobs::parse_category(&a.category)?;
    let res = a.pair.analyze()?;
    let p = jobs::posterior(&model, &res.features.values, category)?;
    print_json(&json!({ "posterior": p }))
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let model = ForestModel::load(&a.model)?;
    let mut data = read_datasets(&a.features)?;
    if model.indicator_columns {
        data = data.with_indicators(evalkit::category_of_name)?;
    }
    print_json(&evalkit::evaluate(&model, &data)?)
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec: CorpusSpec = match &a.spec {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => CorpusSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(m) = a.models {
        spec.n_models = m;
    }
    if let Some(n) = a.shoes_per_model {
        spec.shoes_per_model = n;
    }
    let records = synthgen::generate_corpus(&spec, &a.out)?;
    let pipeline_path = a.out.join("pipeline.json");
    fs::write(&pipeline_path, serde_json::to_string_pretty(&synthgen::pipeline_config(spec.seed))?)?;
    fs::write(a.out.join("spec.json"), serde_json::to_string_pretty(&spec)?)?;
    print_json(&json!({
        "records": records.len(),
        "registry": a.out.join("registry.csv"),
        "pipeline": pipeline_path,
    }))
}

fn parse_list<T: std::str::FromStr<Err = shoeprint_core::Error>>(items: &[String]) -> Result<Vec<T>> {
    items.iter().filter(|s| !s.trim().is_empty()).map(|s| s.parse::<T>().map_err(ServiceError::from)).collect()
}

fn experiment(a: ExperimentArgs) -> Result<()> {
    let regimes: Vec<Regime> = parse_list(&a.regime)?;
    if regimes.is_empty() {
        return Err(ServiceError::BadRequest("no regime given".into()));
    }
    fs::create_dir_all(&a.out)?;
    let (data, missing) = match (&a.registry, &a.features) {
        (Some(registry), _) => {
            let scenarios: Vec<Scenario> = if a.scenarios.is_empty() { Scenario::ALL.to_vec() } else { parse_list(&a.scenarios)? };
            let fallback = registry.parent().map(|d| d.join("pipeline.json"));
            let pipeline_args = PipelineArgs { pipeline: a.pipeline.clone(), darkness_threshold: None, seed: a.seed };
            let cfg = pipeline_args.config(fallback.as_deref())?;
            let opts = CorpusOptions { train_fraction: a.train_fraction, seed: a.seed, ..CorpusOptions::default() };
            let corpus = Corpus::load(registry, &opts)?;
            let data = evalkit::build_scenario_data(&corpus, &scenarios, &cfg, a.seed)?;
            data.save_dir(a.out.join("features"))?;
            (data, Vec::new())
        }
        (None, Some(dir)) => ScenarioData::load_dir(dir)?,
        (None, None) => return Err(ServiceError::BadRequest("pass --registry or --features".into())),
    };
    let opts = ExperimentOptions { params: Hyperparams { n_trees: a.n_trees, ..Hyperparams::default() }, seed: a.seed };
    let report = evalkit::run_experiment_matrix(&data, &regimes, &opts)?;
    fs::write(a.out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    fs::write(a.out.join("accuracy.csv"), report.accuracy_csv())?;
    fs::write(a.out.join("emd.csv"), report.emd_csv())?;

    let population = Population::from_data(&data);
    let mut plot = serde_json::Map::new();
    for sc in population.scenarios() {
        let per_metric: serde_json::Map<String, serde_json::Value> = forest::FEATURE_NAMES
            .iter()
            .filter_map(|m| population.metric(m, sc, 30, 128).ok().map(|p| (m.to_string(), json!(p))))
            .collect();
        plot.insert(sc.name().to_string(), per_metric.into());
    }
    fs::write(a.out.join("plot_data.json"), serde_json::to_string(&plot)?)?;

    print_json(&json!({
        "models_trained": report.models_trained,
        "cells": report.cells.len(),
        "scenarios": data.scenarios().len(),
        "missing_files": missing.len(),
        "out": a.out,
    }))
}

fn serve(a: ServeArgs) -> Result<()> {
    let mut pipeline_cfg = match &a.pipeline {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => PipelineConfig::default(),
    };
    pipeline_cfg.seed = a.seed;
    let config = ServiceConfig {
        seed: a.seed,
        workers: a.workers as usize,
        queue_capacity: a.queue,
        max_image_bytes: a.max_upload_mb * 1024 * 1024,
        pipeline: pipeline_cfg,
        static_dir: a.static_dir.clone(),
    };
    let models = match &a.model_dir {
        Some(d) => ModelRegistry::load_dir(d)?,
        None => ModelRegistry::default(),
    };
    if models.ids().is_empty() {
        log::warn!("no models loaded; pair submissions will be rejected");
    }
    let population = match &a.population_dir {
        Some(d) => Population::load_dir(d)?,
        None => Population::default(),
    };
    let state = AppState::new(config, models, population);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port)).await?;
        let addr = listener.local_addr()?;
        print_json(&json!({ "listening": addr.to_string() }))?;
        axum::serve(listener, api::router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
