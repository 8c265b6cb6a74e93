//! Command-line driver for dataset generation, training, evaluation,
//! and parameter sweeps over dynamic graphs under distribution shift.
//!
//! Every command that produces files owns a run directory under the
//! run root (`--run-root` or `EVOGRAPH_RUN_ROOT`), named from the
//! digest of its resolved configuration plus the seed, and writes a
//! manifest listing each artifact. Exit codes: 0 on success, 1 for
//! user errors (bad input, missing files, malformed configs), 2 for
//! internal errors (numerical failures, divergence).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use clap::{Parser, Subcommand};

use evograph::checkpoint::{
    mat_to_text, Checkpoint, FINAL_PREFIX, GATES_TENSOR, MASK_INVARIANT_TENSOR,
    MASK_VARIANT_TENSOR,
};
use evograph::config::Config;
use evograph::encoder::encode;
use evograph::esvae::{cluster_pseudo_labels, sample_generated_library};
use evograph::evaluation::{mean_std, report, ood_split_links, EdgeTags};
use evograph::graph::{DynamicGraph, TaskKind, TemporalSplit};
use evograph::invariance::{self, masks};
use evograph::run::{create_run_dir, run_dir_name, RunManifest, MANIFEST_FILE};
use evograph::synthetic::{
    gen_env_suite, gen_feature_shift, gen_sbm_node_cls, EnvMode, EnvSuiteSpec, FeatureShiftSpec,
    SbmSpec,
};
use evograph::tensor::Mat;
use evograph::training::{evaluate_metric, train, Ablation, TrainConfig, TrainOutcome};
use evograph::{Error, Result};

#[derive(Parser)]
#[command(
    name = "evograph",
    version,
    about = "Dynamic-graph learning under distribution shift: generate datasets, train, evaluate, sweep"
)]
struct Cli {
    /// Root directory for run outputs.
    #[arg(long, env = "EVOGRAPH_RUN_ROOT", default_value = "runs", global = true)]
    run_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a key-value spec file.
    Generate {
        /// Spec file; the `protocol` key picks the generator.
        spec: PathBuf,
        /// Spec overrides as `--key value` pairs.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Train a model and persist the best-validation checkpoint.
    Train {
        /// Training config file (must name a `dataset`).
        config: PathBuf,
        /// Config overrides as `--key value` pairs, e.g. `--ablate no-intervention`.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// `standard` scores one range; `ood-pair` scores the range with
        /// and without the withheld environment and emits delta columns.
        #[arg(long, default_value = "standard")]
        protocol: String,
        /// Timestamp range to score: `train`, `val`, or `test`.
        #[arg(long, default_value = "test")]
        range: String,
        /// Parameter set to load: `best` or `final`.
        #[arg(long, default_value = "best")]
        params: String,
        /// Edge-provenance sidecar (required by `ood-pair`).
        #[arg(long)]
        tags: Option<PathBuf>,
        /// Withheld edge tag (required by `ood-pair`).
        #[arg(long)]
        rule: Option<String>,
    },
    /// Train a grid of configurations and summarize per-cell metrics.
    Sweep {
        /// Base training config file.
        config: PathBuf,
        /// Grid axis `key=v1,v2,...`; repeat for a product grid.
        #[arg(long = "grid")]
        grid: Vec<String>,
        /// Comma-separated training seeds per cell.
        #[arg(long, default_value = "0")]
        seeds: String,
        /// Bounded worker-pool size.
        #[arg(long, default_value_t = 2)]
        workers: usize,
        /// Base config overrides `key=value`; repeatable.
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Validate a dataset file and optional provenance sidecar.
    Validate {
        dataset: PathBuf,
        #[arg(long)]
        tags: Option<PathBuf>,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

/// 1 for user errors, 2 for internal failures.
fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Parse { .. } | Error::Io(_) => 1,
        Error::Index(_) | Error::Numeric(_) | Error::Domain(_) | Error::Diverged { .. } => 2,
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { spec, overrides } => cmd_generate(&cli.run_root, &spec, &overrides),
        Command::Train { config, overrides } => cmd_train(&cli.run_root, &config, &overrides),
        Command::Eval {
            checkpoint,
            dataset,
            protocol,
            range,
            params,
            tags,
            rule,
        } => cmd_eval(
            &cli.run_root,
            &checkpoint,
            &dataset,
            &protocol,
            &range,
            &params,
            tags.as_deref(),
            rule.as_deref(),
        ),
        Command::Sweep {
            config,
            grid,
            seeds,
            workers,
            set,
        } => cmd_sweep(&cli.run_root, &config, &grid, &seeds, workers, &set),
        Command::Validate { dataset, tags } => cmd_validate(&dataset, tags.as_deref()),
    }
}

/// Parses trailing `--key value` override tokens.
fn parse_overrides(tokens: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = tokens.iter();
    while let Some(tok) = it.next() {
        let key = tok.strip_prefix("--").ok_or_else(|| {
            Error::Config(format!("expected a `--key` override, got {tok:?}"))
        })?;
        if key.is_empty() {
            return Err(Error::Config("empty override key".into()));
        }
        let value = it
            .next()
            .ok_or_else(|| Error::Config(format!("override --{key} is missing its value")))?;
        out.push((key.to_string(), value.clone()));
    }
    Ok(out)
}

fn load_config(path: &Path, overrides: &[String]) -> Result<Config> {
    let mut cfg = Config::from_file(path)?;
    let pairs = parse_overrides(overrides)?;
    cfg.apply_overrides(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())));
    Ok(cfg)
}

/// Applies the `ablate` key's documented side effect: ablating the
/// interventions zeroes the risk weight, ablating the environment model
/// zeroes the environment weight. The resolved values are what the
/// manifest records.
fn resolve_ablation(cfg: &mut Config) -> Result<()> {
    if let Some(name) = cfg.get("ablate").map(str::to_string) {
        match Ablation::parse(&name)? {
            Ablation::NoIntervention => cfg.set("beta1", "0.0"),
            Ablation::NoEsvae => cfg.set("beta2", "0.0"),
            Ablation::None => {}
        }
    }
    Ok(())
}

fn read_graph(path: &Path) -> Result<DynamicGraph> {
    let file = File::open(path).map_err(|e| {
        Error::Config(format!("cannot open dataset {}: {e}", path.display()))
    })?;
    let g = DynamicGraph::read_evg1(BufReader::new(file))?;
    g.ensure_valid()?;
    Ok(g)
}

fn kind_token(kind: TaskKind) -> &'static str {
    match kind {
        TaskKind::Link => "link",
        TaskKind::NodeClass => "node",
    }
}

fn metric_name(kind: TaskKind) -> &'static str {
    match kind {
        TaskKind::Link => "auc",
        TaskKind::NodeClass => "accuracy",
    }
}

// ---------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------

struct GeneratedDataset {
    graph: DynamicGraph,
    tags: EdgeTags,
    split: TemporalSplit,
    ood_rule: Option<String>,
}

fn build_dataset(cfg: &Config) -> Result<GeneratedDataset> {
    let seed = cfg.get_u64("seed", 0)?;
    match cfg.require("protocol")? {
        "sbm" => {
            let def = SbmSpec::default();
            let spec = SbmSpec {
                num_nodes: cfg.get_usize("nodes", def.num_nodes)?,
                t_len: cfg.get_usize("t_len", def.t_len)?,
                classes: cfg.get_usize("classes", def.classes)?,
                intra: cfg.get_f64("intra", def.intra)?,
                inter: cfg.get_f64("inter", def.inter)?,
                shift_level: cfg.get_f64("shift_level", def.shift_level)?,
                feature_dim: cfg.get_usize("feature_dim", def.feature_dim)?,
                feature_signal: cfg.get_f64("feature_signal", def.feature_signal)?,
                seed,
            };
            let out = gen_sbm_node_cls(&spec)?;
            Ok(GeneratedDataset {
                graph: out.graph,
                tags: out.tags,
                split: out.split,
                ood_rule: None,
            })
        }
        mode @ ("stationary" | "nonstationary") => {
            let def = EnvSuiteSpec::default();
            let spec = EnvSuiteSpec {
                mode: EnvMode::parse(mode)?,
                num_nodes: cfg.get_usize("nodes", def.num_nodes)?,
                t_len: cfg.get_usize("t_len", def.t_len)?,
                factors: cfg.get_usize("factors", def.factors)?,
                gamma_inv: cfg.get_f64("gamma_inv", def.gamma_inv)?,
                gamma_dyn: cfg.get_f64("gamma_dyn", def.gamma_dyn)?,
                block_dim: cfg.get_usize("block_dim", def.block_dim)?,
                mean_degree: cfg.get_f64("mean_degree", def.mean_degree)?,
                low_noise: cfg.get_f64("low_noise", def.low_noise)?,
                high_noise: cfg.get_f64("high_noise", def.high_noise)?,
                community_center: cfg.get_f64("community_center", def.community_center)?,
                factor_center: cfg.get_f64("factor_center", def.factor_center)?,
                static_noise: cfg.get_f64("static_noise", def.static_noise)?,
                identity_spread: cfg.get_f64("identity_spread", def.identity_spread)?,
                dynamic_mean: cfg.get_f64("dynamic_mean", def.dynamic_mean)?,
                dynamic_noise: cfg.get_f64("dynamic_noise", def.dynamic_noise)?,
                per_step_dynamic: cfg.get_bool("per_step_dynamic", def.per_step_dynamic)?,
                withheld_factor: cfg.get_usize("withheld_factor", def.withheld_factor)?,
                seed,
            };
            let out = gen_env_suite(&spec)?;
            Ok(GeneratedDataset {
                graph: out.graph,
                tags: out.tags,
                split: out.split,
                ood_rule: out.ood_rule,
            })
        }
        "feature-shift" => {
            let base_path = cfg.require("base")?;
            let base = read_graph(Path::new(base_path))?;
            let def = FeatureShiftSpec::default();
            let spec = FeatureShiftSpec {
                p_bar: cfg.get_f64("p_bar", def.p_bar)?,
                sigma: cfg.get_f64("sigma", def.sigma)?,
                dim: cfg.get_usize("dim", def.dim)?,
                max_iters: cfg.get_usize("max_iters", def.max_iters)?,
                seed,
            };
            let out = gen_feature_shift(&base, &spec)?;
            let t_out = out.graph.len();
            let mut split = TemporalSplit {
                train: (1, t_out.saturating_sub(3).max(1)),
                val: (t_out - 2, t_out - 2),
                test: (t_out - 1, t_out),
            };
            if out.graph.kind() == TaskKind::Link {
                split.test = (t_out - 1, t_out - 1);
            }
            Ok(GeneratedDataset {
                graph: out.graph,
                tags: out.tags,
                split,
                ood_rule: None,
            })
        }
        other => Err(Error::Config(format!(
            "unknown protocol {other:?} (expected sbm, stationary, nonstationary, or feature-shift)"
        ))),
    }
}

fn cmd_generate(root: &Path, spec_path: &Path, overrides: &[String]) -> Result<()> {
    let started = Instant::now();
    let spec_cfg = load_config(spec_path, overrides)?;
    let seed = spec_cfg.get_u64("seed", 0)?;
    let out = build_dataset(&spec_cfg)?;

    let mut resolved = spec_cfg.clone();
    resolved.set("task", kind_token(out.graph.kind()));
    resolved.set("train_range", format!("{}..{}", out.split.train.0, out.split.train.1));
    resolved.set("val_range", format!("{}..{}", out.split.val.0, out.split.val.1));
    resolved.set("test_range", format!("{}..{}", out.split.test.0, out.split.test.1));
    if let Some(rule) = &out.ood_rule {
        resolved.set("ood_rule", rule);
    }

    let mut dataset_bytes = Vec::new();
    out.graph.write_evg1(&mut dataset_bytes)?;
    let tags_text = out.tags.to_text();

    let dir = root.join(run_dir_name("generate", &resolved, seed));
    if dir.join(MANIFEST_FILE).exists() {
        // Idempotence for identical spec + seed: nothing to redo when
        // the existing artifacts are byte-identical.
        let same_dataset = std::fs::read(dir.join("dataset.evg1"))? == dataset_bytes;
        let same_tags = std::fs::read_to_string(dir.join("tags.txt"))? == tags_text;
        if same_dataset && same_tags {
            println!("unchanged: {}", dir.display());
            return Ok(());
        }
        return Err(Error::Contract(format!(
            "run directory {} holds different artifacts for the same spec digest",
            dir.display()
        )));
    }
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("dataset.evg1"), &dataset_bytes)?;
    std::fs::write(dir.join("tags.txt"), &tags_text)?;

    let mut manifest = RunManifest::new(
        "generate",
        spec_path.display().to_string(),
        resolved,
        seed,
    );
    manifest.add_artifact("dataset", "dataset.evg1");
    manifest.add_artifact("tags", "tags.txt");
    manifest.wall_time_secs = started.elapsed().as_secs_f64();
    manifest.write(&dir)?;

    println!("dataset: {}", dir.join("dataset.evg1").display());
    println!(
        "{} nodes, {} snapshots, {} features, task {}",
        out.graph.node_count(),
        out.graph.len(),
        out.graph.feature_dim(),
        kind_token(out.graph.kind()),
    );
    Ok(())
}

// ---------------------------------------------------------------------
// train
// ---------------------------------------------------------------------

struct TrainSummary {
    best_epoch: usize,
    best_val: f64,
    test_metric: f64,
}

/// Trains from a resolved config and writes the run directory. Returns
/// the directory and the headline metrics.
fn run_train_once(root: &Path, cfg: &Config, config_label: &str) -> Result<(PathBuf, TrainSummary)> {
    let started = Instant::now();
    let mut cfg = cfg.clone();
    resolve_ablation(&mut cfg)?;

    let dataset_path = cfg.require("dataset")?.to_string();
    let g = read_graph(Path::new(&dataset_path))?;
    let tc = TrainConfig::from_config(&cfg, g.feature_dim())?;
    tc.validate(&g)?;

    let outcome = train(&g, &tc)?;
    let test_stamps: Vec<usize> = tc.split.test_timestamps().collect();
    let test_metric = evaluate_metric(&g, &tc, &outcome.params, &test_stamps)?;

    let ckpt = build_checkpoint(&g, &tc, &cfg, &outcome)?;
    let dir = create_run_dir(root, "train", &cfg, tc.seed)?;
    ckpt.write(&dir.join("model.evc"))?;
    std::fs::write(
        dir.join("history.csv"),
        evograph::training::history_csv(&outcome.history),
    )?;
    std::fs::write(
        dir.join("masks.txt"),
        mat_to_text(ckpt.require_tensor(MASK_INVARIANT_TENSOR)?),
    )?;

    let mut manifest = RunManifest::new("train", config_label, cfg.clone(), tc.seed);
    manifest.add_artifact("checkpoint", "model.evc");
    manifest.add_artifact("history", "history.csv");
    manifest.add_artifact("masks", "masks.txt");
    if tc.ablation != Ablation::NoEsvae {
        let assignments = cluster_assignments_text(&g, &tc, &outcome)?;
        std::fs::write(dir.join("clusters.txt"), assignments)?;
        manifest.add_artifact("clusters", "clusters.txt");
    }
    manifest.wall_time_secs = started.elapsed().as_secs_f64();
    manifest.write(&dir)?;

    Ok((
        dir,
        TrainSummary {
            best_epoch: outcome.best_epoch,
            best_val: outcome.best_val,
            test_metric,
        },
    ))
}

/// Assembles the persisted container: best and final parameters, the
/// stability gates and derived masks, the generated environment library
/// grouped per timestamp, and the resolved config as metadata.
fn build_checkpoint(
    g: &DynamicGraph,
    tc: &TrainConfig,
    cfg: &Config,
    outcome: &TrainOutcome,
) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::new();
    ckpt.insert_params(&outcome.params)?;
    for (name, value) in outcome.final_params.iter() {
        ckpt.insert(format!("{FINAL_PREFIX}{name}"), value.clone())?;
    }
    ckpt.insert(GATES_TENSOR, outcome.gates.clone())?;
    let pair = masks(&outcome.gates, outcome.params.get(invariance::WEIGHT_NAME))?;
    ckpt.insert(MASK_INVARIANT_TENSOR, pair.invariant().clone())?;
    ckpt.insert(MASK_VARIANT_TENSOR, pair.variant().clone())?;

    if tc.ablation != Ablation::NoEsvae {
        let library = sample_generated_library(
            &outcome.params,
            &tc.esvae,
            tc.split.train.1,
            tc.generated_count,
            tc.seed,
        )?;
        let mut grouped: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
        for (sample, t) in library {
            grouped.entry(t).or_default().push(sample);
        }
        for (t, rows) in grouped {
            let dim = rows[0].len();
            let mut m = Mat::zeros((rows.len(), dim));
            for (i, row) in rows.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    m[(i, j)] = v;
                }
            }
            ckpt.insert(format!("library.t{t}"), m)?;
        }
    }

    for key in cfg.keys().map(str::to_string).collect::<Vec<_>>() {
        if let Some(value) = cfg.get(&key) {
            ckpt.insert_meta(format!("cfg.{key}"), value)?;
        }
    }
    ckpt.insert_meta("task", kind_token(g.kind()))?;
    ckpt.insert_meta("node_count", g.node_count())?;
    ckpt.insert_meta("feature_dim", g.feature_dim())?;
    ckpt.insert_meta("repr_dim", tc.encoder.hidden_dim)?;
    ckpt.insert_meta("seed", tc.seed)?;
    ckpt.insert_meta("best_epoch", outcome.best_epoch)?;
    ckpt.insert_meta("best_val", format!("{:?}", outcome.best_val))?;
    Ok(ckpt)
}

/// Text table `v cluster` of the environment pseudo-label assignment
/// under the best parameters.
fn cluster_assignments_text(
    g: &DynamicGraph,
    tc: &TrainConfig,
    outcome: &TrainOutcome,
) -> Result<String> {
    let g_train = g.prefix(tc.split.train.1);
    let h = encode(&g_train, &tc.encoder, &outcome.params)?;
    let task = cluster_pseudo_labels(&g_train, &h, tc.esvae.clusters, tc.esvae.top_k, tc.seed)?;
    let mut out = String::new();
    for (v, cluster) in task.assignment.iter().enumerate() {
        out.push_str(&format!("{v} {cluster}\n"));
    }
    Ok(out)
}

fn cmd_train(root: &Path, config_path: &Path, overrides: &[String]) -> Result<()> {
    let cfg = load_config(config_path, overrides)?;
    let (dir, summary) = run_train_once(root, &cfg, &config_path.display().to_string())?;
    println!("run: {}", dir.display());
    println!(
        "best epoch {} with val {:?}; test {:?}",
        summary.best_epoch, summary.best_val, summary.test_metric
    );
    Ok(())
}

// ---------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    root: &Path,
    checkpoint_path: &Path,
    dataset_path: &Path,
    protocol: &str,
    range: &str,
    params_sel: &str,
    tags_path: Option<&Path>,
    rule: Option<&str>,
) -> Result<()> {
    let started = Instant::now();
    // Load and check everything before creating any files, so a failed
    // evaluation leaves no partial run directory behind.
    let ckpt = Checkpoint::read(checkpoint_path).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!(
            "cannot open checkpoint {}: {io}",
            checkpoint_path.display()
        )),
        other => other,
    })?;
    let g = read_graph(dataset_path)?;

    let want_n: usize = parse_meta(&ckpt, "node_count")?;
    let want_d: usize = parse_meta(&ckpt, "feature_dim")?;
    if g.node_count() != want_n || g.feature_dim() != want_d {
        return Err(Error::Config(format!(
            "dimension mismatch: checkpoint expects {want_n} nodes x {want_d} features, \
             dataset has {} x {}",
            g.node_count(),
            g.feature_dim()
        )));
    }

    let mut cfg = Config::new();
    for (key, value) in ckpt.meta_iter() {
        if let Some(stripped) = key.strip_prefix("cfg.") {
            cfg.set(stripped, value);
        }
    }
    let tc = TrainConfig::from_config(&cfg, g.feature_dim())?;
    let params = match params_sel {
        "best" => ckpt.to_params()?,
        "final" => ckpt.params_with_prefix(FINAL_PREFIX)?,
        other => {
            return Err(Error::Config(format!(
                "unknown parameter set {other:?} (expected best or final)"
            )))
        }
    };
    let stamps: Vec<usize> = match range {
        "train" => tc.split.train_timestamps().collect(),
        "val" => tc.split.val_timestamps().collect(),
        "test" => tc.split.test_timestamps().collect(),
        other => {
            return Err(Error::Config(format!(
                "unknown range {other:?} (expected train, val, or test)"
            )))
        }
    };
    let metric = metric_name(g.kind());

    let (csv, table) = match protocol {
        "standard" => {
            let value = evaluate_metric(&g, &tc, &params, &stamps)?;
            let csv = format!("range,metric,value\n{range},{metric},{value:?}\n");
            let table = format!("metric      {metric}\nrange       {range}\nvalue       {value:.4}\n");
            println!("{metric} on {range}: {value:?}");
            (csv, table)
        }
        "ood-pair" => {
            if g.kind() != TaskKind::Link {
                return Err(Error::Config(
                    "protocol ood-pair applies to link datasets only".into(),
                ));
            }
            let tags_path = tags_path.ok_or_else(|| {
                Error::Config("protocol ood-pair needs --tags <sidecar>".into())
            })?;
            let rule = rule
                .ok_or_else(|| Error::Config("protocol ood-pair needs --rule <tag>".into()))?;
            let tags = EdgeTags::parse(&std::fs::read_to_string(tags_path)?)?;
            let split = ood_split_links(&g, &tags, rule)?;
            for w in &split.warnings {
                eprintln!("warning: {w}");
            }
            // Without the withheld environment (in-distribution view)
            // versus the full graph (with the OOD edges).
            let without = evaluate_metric(&split.train_view, &tc, &params, &stamps)?;
            let with = evaluate_metric(&split.test_view, &tc, &params, &stamps)?;
            let rep = report(metric, &[tc.seed], &[(without, with)])?;
            println!("{}", rep.text_table().trim_end());
            (rep.csv(), rep.text_table())
        }
        other => {
            return Err(Error::Config(format!(
                "unknown protocol {other:?} (expected standard or ood-pair)"
            )))
        }
    };

    let mut resolved = Config::new();
    resolved.set("checkpoint", checkpoint_path.display());
    resolved.set("dataset", dataset_path.display());
    resolved.set("protocol", protocol);
    resolved.set("range", range);
    resolved.set("params", params_sel);
    if let Some(r) = rule {
        resolved.set("rule", r);
    }
    let seed = tc.seed;
    let dir = create_run_dir(root, "eval", &resolved, seed)?;
    std::fs::write(dir.join("report.csv"), csv)?;
    std::fs::write(dir.join("report.txt"), table)?;
    let mut manifest = RunManifest::new("eval", checkpoint_path.display().to_string(), resolved, seed);
    manifest.add_artifact("report_csv", "report.csv");
    manifest.add_artifact("report_txt", "report.txt");
    manifest.wall_time_secs = started.elapsed().as_secs_f64();
    manifest.write(&dir)?;
    println!("report: {}", dir.join("report.csv").display());
    Ok(())
}

fn parse_meta<T: std::str::FromStr>(ckpt: &Checkpoint, key: &str) -> Result<T> {
    ckpt.require_meta(key)?
        .parse()
        .map_err(|_| Error::Contract(format!("checkpoint metadata {key} is malformed")))
}

// ---------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------

/// Config keys the training pipeline understands; grid axes must name
/// one of these or a key already present in the base config.
const TRAIN_KEYS: &[&str] = &[
    "dataset", "epochs", "learning_rate", "beta1", "beta2", "seed", "train_range", "val_range",
    "test_range", "negatives_per_positive", "hidden_dim", "encoder_layers", "attention_heads",
    "static_dim", "dynamic_dim", "decoder_hidden", "clusters", "top_k", "margin",
    "alpha1", "alpha2", "delta", "cutoff", "normalize_gate", "intervention_rounds",
    "intervention_ratio", "match_timestamp", "generated_fraction", "generated_count", "ablate",
];

struct GridAxis {
    key: String,
    values: Vec<String>,
}

fn parse_grid(axes: &[String], base: &Config) -> Result<Vec<GridAxis>> {
    let mut out = Vec::new();
    for axis in axes {
        let (key, values) = axis.split_once('=').ok_or_else(|| {
            Error::Config(format!("grid axis {axis:?} must look like key=v1,v2"))
        })?;
        if !TRAIN_KEYS.contains(&key) && !base.contains(key) {
            return Err(Error::Config(format!("unknown grid key {key:?}")));
        }
        let values: Vec<String> = values.split(',').map(str::to_string).collect();
        if values.is_empty() || values.iter().any(String::is_empty) {
            return Err(Error::Config(format!("grid axis {axis:?} has empty values")));
        }
        out.push(GridAxis {
            key: key.to_string(),
            values,
        });
    }
    Ok(out)
}

/// Cartesian product of axis values; one empty cell when no axes given.
fn grid_cells(axes: &[GridAxis]) -> Vec<Vec<(String, String)>> {
    let mut cells: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for axis in axes {
        let mut next = Vec::with_capacity(cells.len() * axis.values.len());
        for cell in &cells {
            for value in &axis.values {
                let mut grown = cell.clone();
                grown.push((axis.key.clone(), value.clone()));
                next.push(grown);
            }
        }
        cells = next;
    }
    cells
}

fn cmd_sweep(
    root: &Path,
    config_path: &Path,
    grid: &[String],
    seeds: &str,
    workers: usize,
    set: &[String],
) -> Result<()> {
    let started = Instant::now();
    if workers == 0 {
        return Err(Error::Config("worker pool size must be positive".into()));
    }
    let mut base = Config::from_file(config_path)?;
    for entry in set {
        let (key, value) = entry.split_once('=').ok_or_else(|| {
            Error::Config(format!("--set {entry:?} must look like key=value"))
        })?;
        base.set(key, value);
    }
    let axes = parse_grid(grid, &base)?;
    let cells = grid_cells(&axes);
    let seeds: Vec<u64> = seeds
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("bad seed {s:?}")))
        })
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        return Err(Error::Config("need at least one seed".into()));
    }

    let mut resolved = base.clone();
    resolved.set("sweep_grid", grid.join(";"));
    resolved.set(
        "sweep_seeds",
        seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
    );
    let sweep_dir = create_run_dir(root, "sweep", &resolved, seeds[0])?;

    // One job per (cell, seed); a bounded pool of workers drains the
    // queue, each job writing its own child run directory.
    struct Job {
        cell: usize,
        seed: u64,
        cfg: Config,
    }
    let mut queue: Vec<Job> = Vec::new();
    for (ci, cell) in cells.iter().enumerate() {
        for &seed in &seeds {
            let mut cfg = base.clone();
            for (key, value) in cell {
                cfg.set(key, value);
            }
            cfg.set("seed", seed);
            queue.push(Job {
                cell: ci,
                seed,
                cfg,
            });
        }
    }
    let queue = Mutex::new(queue);
    let results: Mutex<Vec<(usize, u64, std::result::Result<f64, String>)>> =
        Mutex::new(Vec::new());
    let label = config_path.display().to_string();

    std::thread::scope(|scope| {
        for _ in 0..workers.min(cells.len() * seeds.len()) {
            scope.spawn(|| loop {
                let job = match queue.lock().expect("queue lock").pop() {
                    Some(job) => job,
                    None => break,
                };
                let outcome = run_train_once(&sweep_dir, &job.cfg, &label)
                    .map(|(_, summary)| summary.test_metric)
                    .map_err(|e| e.to_string());
                results
                    .lock()
                    .expect("results lock")
                    .push((job.cell, job.seed, outcome));
            });
        }
    });
    let results = results.into_inner().expect("results lock");

    // Deterministic summary: group by cell, average over seeds.
    let mut by_cell: BTreeMap<usize, Vec<(u64, std::result::Result<f64, String>)>> =
        BTreeMap::new();
    for (cell, seed, outcome) in results {
        by_cell.entry(cell).or_default().push((seed, outcome));
    }
    let axis_names: Vec<&str> = axes.iter().map(|a| a.key.as_str()).collect();
    let mut summary = String::from("cell");
    for name in &axis_names {
        summary.push(',');
        summary.push_str(name);
    }
    summary.push_str(",seeds,mean,std,failures\n");
    let mut failures = 0usize;
    for (ci, cell) in cells.iter().enumerate() {
        let mut runs = by_cell.remove(&ci).unwrap_or_default();
        runs.sort_by_key(|(seed, _)| *seed);
        let values: Vec<f64> = runs
            .iter()
            .filter_map(|(_, outcome)| outcome.as_ref().ok().copied())
            .collect();
        let failed = runs.len() - values.len();
        failures += failed;
        for (seed, outcome) in &runs {
            if let Err(msg) = outcome {
                eprintln!("cell {ci} seed {seed} failed: {msg}");
            }
        }
        let (mean, std) = if values.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            mean_std(&values)
        };
        summary.push_str(&ci.to_string());
        for (_, value) in cell {
            summary.push(',');
            summary.push_str(value);
        }
        summary.push_str(&format!(",{},{:?},{:?},{}\n", values.len(), mean, std, failed));
    }
    std::fs::write(sweep_dir.join("summary.csv"), &summary)?;

    let mut manifest = RunManifest::new("sweep", label, resolved, seeds[0]);
    manifest.add_artifact("summary", "summary.csv");
    manifest.wall_time_secs = started.elapsed().as_secs_f64();
    manifest.write(&sweep_dir)?;
    println!("summary: {}", sweep_dir.join("summary.csv").display());
    println!(
        "{} cells x {} seeds, {} failures",
        cells.len(),
        seeds.len(),
        failures
    );
    if failures > 0 {
        return Err(Error::Numeric(format!(
            "{failures} sweep child runs failed; see summary.csv"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------
// validate
// ---------------------------------------------------------------------

fn cmd_validate(dataset: &Path, tags_path: Option<&Path>) -> Result<()> {
    let g = read_graph(dataset)?;
    let edges: usize = g.snapshots().iter().map(|s| s.edges().len()).sum();
    println!(
        "valid: {} nodes, {} snapshots, {} features, {} edges, task {}",
        g.node_count(),
        g.len(),
        g.feature_dim(),
        edges,
        kind_token(g.kind()),
    );
    if let Some(path) = tags_path {
        let tags = EdgeTags::parse(&std::fs::read_to_string(path)?)?;
        let matched = tags
            .iter()
            .filter(|((t, u, v), _)| {
                g.snapshot(*t).map(|s| s.has_edge(*u, *v)).unwrap_or(false)
            })
            .count();
        println!("tags: {} entries, {matched} match stored edges", tags.len());
    }
    Ok(())
}
