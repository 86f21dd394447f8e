//! Command-line entry point: validation, statistics, feature/gold builds,
//! staged training, evaluation, sweeps, and embedding export.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use crate::config::{parse_override, SystemConfig};
use crate::data::{
    load_corpus, load_corpus_lenient, LoadOptions, SplitFilter,
};
use crate::encoders::{FeatureStore, MediaEncoder};
use crate::error::EmpatheiaError;
use crate::eval::{evaluate, export_embeddings, write_embeddings, EvalRequest};
use crate::features::Modality;
use crate::generators::{extract_gold_content, extract_gold_style, GoldCache};
use crate::manifest::RunManifest;
use crate::rng::derive_seed;
use crate::stats::compute_stats;
use crate::synth::{build_synthetic_store, StoreSpec};
use crate::training::{build_model, train, Stage, TrainRequest, ALL_STAGES};

#[derive(Parser)]
#[command(name = "empatheia", version, about = "Multimodal empathetic response toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON config file layered over built-in defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// dotted-path override, e.g. --set model.d_model=32 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// master seed fanned out to every module
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn build(&self) -> Result<SystemConfig, EmpatheiaError> {
        let mut pairs: Vec<(String, Value)> = Vec::new();
        if let Some(seed) = self.seed {
            pairs.push(("seed".to_string(), Value::from(seed)));
        }
        for raw in &self.overrides {
            pairs.push(parse_override(raw)?);
        }
        SystemConfig::layered(self.config.as_deref(), &pairs)
    }
}

#[derive(Args, Clone)]
struct CorpusArgs {
    /// dialogue corpus (JSON array or JSONL; directories hold per-split files)
    corpus: PathBuf,
    /// restrict to one split
    #[arg(long, default_value = "all")]
    split: String,
    /// accept {low, mid, high} timbre values as tone aliases
    #[arg(long)]
    timbre_aliases: bool,
}

impl CorpusArgs {
    fn split(&self) -> Result<SplitFilter, EmpatheiaError> {
        SplitFilter::parse(&self.split)
            .ok_or_else(|| EmpatheiaError::domain(format!("unknown split {:?}", self.split)))
    }

    fn opts(&self) -> LoadOptions {
        LoadOptions { timbre_aliases: self.timbre_aliases }
    }

    fn load(&self) -> Result<Vec<crate::data::Dialogue>, EmpatheiaError> {
        load_corpus(&self.corpus, self.split()?, self.opts())
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Coe,
    Ccl,
    Sac,
    Overall,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepParam {
    NBlocks,
    NSignalTokens,
    AlphaBeta,
}

#[derive(Subcommand)]
enum Command {
    /// Check every dialogue against the schema; print violations one per line
    Validate {
        #[command(flatten)]
        corpus: CorpusArgs,
    },
    /// Corpus statistics (counts, averages, label histograms)
    Stats {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
    /// Populate the feature store: encode media refs, synthesize the rest
    BuildFeatures {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        store: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Extract gold content/style targets for every response slot
    BuildGold {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        store: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run one training stage, or all four in sequence
    Train {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long)]
        store: PathBuf,
        /// root directory for run artifacts
        #[arg(long, default_value = "runs")]
        runs: PathBuf,
        #[arg(long, default_value = "run")]
        run_name: String,
        /// start the requested stage from fresh parameters
        #[arg(long)]
        from_scratch: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a checkpoint; writes report.json/report.csv
    Eval {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// stage directory holding `checkpoint` and its manifest
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train+evaluate across a config grid; prints one CSV row per point
    Sweep {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long, value_enum)]
        param: SweepParam,
        /// comma-separated grid; alpha-beta points are alpha:beta pairs
        #[arg(long)]
        grid: String,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Sample media-backed turns and export fused style embeddings
    ExportEmbeddings {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
        /// sample count (0 exports nothing)
        #[arg(long)]
        samples: Option<usize>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

/// `EMPATHEIA_STORE` beats the flag so wrappers can relocate every store at
/// once; the switch is logged.
fn store_root(flag: &Path) -> PathBuf {
    match std::env::var_os("EMPATHEIA_STORE") {
        Some(root) if !root.is_empty() => {
            let root = PathBuf::from(root);
            eprintln!(
                "store root {} (EMPATHEIA_STORE overrides {})",
                root.display(),
                flag.display()
            );
            root
        }
        _ => flag.to_path_buf(),
    }
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32, EmpatheiaError> {
    match cmd {
        Command::Validate { corpus } => cmd_validate(&corpus),
        Command::Stats { corpus, format } => cmd_stats(&corpus, format),
        Command::BuildFeatures { corpus, store, config } => {
            cmd_build_features(&corpus, &store_root(&store), &config.build()?)
        }
        Command::BuildGold { corpus, store, config } => {
            cmd_build_gold(&corpus, &store_root(&store), &config.build()?)
        }
        Command::Train { corpus, stage, store, runs, run_name, from_scratch, config } => {
            cmd_train(
                &corpus,
                stage,
                &store_root(&store),
                &runs,
                &run_name,
                from_scratch,
                &config.build()?,
            )
        }
        Command::Eval { corpus, checkpoint, store, out, config } => {
            cmd_eval(&corpus, &checkpoint, &store_root(&store), &out, &config)
        }
        Command::Sweep { corpus, param, grid, out, config } => {
            cmd_sweep(&corpus, param, &grid, &out, &config)
        }
        Command::ExportEmbeddings { corpus, checkpoint, store, out, samples, config } => {
            cmd_export(&corpus, &checkpoint, &store_root(&store), &out, samples, &config)
        }
    }
}

fn cmd_validate(corpus: &CorpusArgs) -> Result<i32, EmpatheiaError> {
    let loaded = load_corpus_lenient(&corpus.corpus, corpus.split()?, corpus.opts())?;
    let mut stdout = std::io::stdout().lock();
    for v in &loaded.violations {
        writeln!(stdout, "{v}").map_err(|e| EmpatheiaError::io(Path::new("stdout"), e))?;
    }
    eprintln!(
        "validate: {} dialogues, {} violations",
        loaded.dialogues.len(),
        loaded.violations.len()
    );
    Ok(if loaded.violations.is_empty() { 0 } else { 1 })
}

fn cmd_stats(corpus: &CorpusArgs, format: Format) -> Result<i32, EmpatheiaError> {
    let dialogues = corpus.load()?;
    let stats = compute_stats(&dialogues);
    let text = match format {
        Format::Json => stats.to_json(),
        Format::Csv => stats.to_csv(),
    };
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{}", text.trim_end()).map_err(|e| EmpatheiaError::io(Path::new("stdout"), e))?;
    Ok(0)
}

/// Encode a referenced clip, attributing failures to the utterance that
/// carries the ref.
fn encode_ref(
    enc: &MediaEncoder,
    conv: &str,
    utt: usize,
    source_ref: &str,
    modality: Modality,
) -> Result<ndarray::Array2<f64>, EmpatheiaError> {
    match enc.encode(source_ref, modality) {
        Ok(m) => Ok(m.features.data),
        Err(e) => Err(EmpatheiaError::precondition(format!(
            "{conv}/{utt}: {} ref {source_ref:?} unusable: {e}",
            modality.as_str()
        ))),
    }
}

fn cmd_build_features(
    corpus: &CorpusArgs,
    root: &Path,
    cfg: &SystemConfig,
) -> Result<i32, EmpatheiaError> {
    let dialogues = corpus.load()?;
    let mut store = FeatureStore::open_or_create(root)?;
    let enc = MediaEncoder::new(None, cfg.model.d_enc);
    let mut ref_entries = 0usize;
    for d in &dialogues {
        for slot in crate::data::utterance_slots(d) {
            for (source_ref, modality) in [
                (slot.audio_ref, Modality::Speech),
                (slot.video_ref, Modality::Video),
            ] {
                let Some(source_ref) = source_ref else { continue };
                let key = FeatureStore::key(&d.conversation_id, slot.index, modality.as_str());
                if store.contains(&key) {
                    continue;
                }
                let data =
                    encode_ref(&enc, &d.conversation_id, slot.index, source_ref, modality)?;
                store.put(&d.conversation_id, slot.index, modality.as_str(), &data)?;
                ref_entries += 1;
            }
        }
    }
    let spec = StoreSpec {
        d_enc: cfg.model.d_enc,
        seed: derive_seed(cfg.seed, "feature-store"),
        ..Default::default()
    };
    let (store, report) = build_synthetic_store(&dialogues, root, &spec)?;
    eprintln!(
        "build-features: {} entries ({} from refs, {} synthesized), {} dialogues skipped",
        store.len(),
        ref_entries,
        report.entries_written,
        report.skipped_dialogues.len()
    );
    for id in &report.skipped_dialogues {
        eprintln!("  skipped (no emotion label): {id}");
    }
    RunManifest::new("build-features", "build-features", cfg)
        .with_input("corpus", corpus.corpus.display().to_string())
        .write(root)?;
    Ok(0)
}

fn cmd_build_gold(
    corpus: &CorpusArgs,
    root: &Path,
    cfg: &SystemConfig,
) -> Result<i32, EmpatheiaError> {
    let dialogues = corpus.load()?;
    let store = FeatureStore::open(root)?;
    let params = build_model(cfg)?;
    let gcfg = cfg.generator();
    let mut gold = GoldCache::open_or_create(store.root())?;
    let mut written = 0usize;
    let mut skipped = 0usize;
    for d in &dialogues {
        for turn in &d.turns {
            let ridx = turn.response_index();
            let have_media = ["speech", "video"]
                .iter()
                .all(|k| store.contains(&FeatureStore::key(&d.conversation_id, ridx, k)));
            if !have_media {
                skipped += 1;
                continue;
            }
            let (c_s, c_v) = extract_gold_content(
                &params, &gcfg, &store, &d.conversation_id, ridx, &turn.response,
            )?;
            let (s_s, s_v) = extract_gold_style(&params, &gcfg, &store, &d.conversation_id, ridx)?;
            gold.put("content_s", &d.conversation_id, ridx, &c_s)?;
            gold.put("content_v", &d.conversation_id, ridx, &c_v)?;
            gold.put("style_s", &d.conversation_id, ridx, &s_s)?;
            gold.put("style_v", &d.conversation_id, ridx, &s_v)?;
            written += 4;
        }
    }
    eprintln!("build-gold: {written} entries written, {skipped} turns without media skipped");
    RunManifest::new("build-gold", "build-gold", cfg)
        .with_input("corpus", corpus.corpus.display().to_string())
        .write(&store.root().join("gold"))?;
    Ok(0)
}

fn stages_for(arg: StageArg) -> Vec<Stage> {
    match arg {
        StageArg::Coe => vec![Stage::Coe],
        StageArg::Ccl => vec![Stage::Ccl],
        StageArg::Sac => vec![Stage::Sac],
        StageArg::Overall => vec![Stage::Overall],
        StageArg::All => ALL_STAGES.to_vec(),
    }
}

fn cmd_train(
    corpus: &CorpusArgs,
    stage: StageArg,
    store_root: &Path,
    runs: &Path,
    run_name: &str,
    from_scratch: bool,
    cfg: &SystemConfig,
) -> Result<i32, EmpatheiaError> {
    let dialogues = corpus.load()?;
    let store = FeatureStore::open_or_create(store_root)?;
    let req = TrainRequest {
        cfg,
        corpus: &dialogues,
        store: &store,
        runs_root: runs,
        run_name,
        stages: stages_for(stage),
        from_scratch,
        corpus_label: corpus.corpus.display().to_string(),
        store_label: store_root.display().to_string(),
    };
    let results = train(&req)?;
    for r in &results {
        let last = r.rows.last().expect("at least one step");
        eprintln!(
            "stage {}: {} steps, {} samples ({} skipped), final l_oal {:.6} -> {}",
            r.stage.name(),
            r.rows.len(),
            r.used_samples,
            r.skipped,
            last.l_oal,
            r.stage_dir.display()
        );
    }
    Ok(0)
}

/// Effective config for checkpoint consumers: the snapshot recorded next to
/// the checkpoint, layered under any fresh file and flag overrides.
fn checkpoint_config(
    checkpoint_dir: &Path,
    args: &ConfigArgs,
) -> Result<SystemConfig, EmpatheiaError> {
    let manifest = RunManifest::read(&checkpoint_dir.join(crate::manifest::MANIFEST_FILE))?;
    let mut base = serde_json::to_value(&manifest.config).expect("config serializes");
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| EmpatheiaError::io(path, e))?;
        let patch: Value = serde_json::from_str(&text)
            .map_err(|e| EmpatheiaError::Parse(format!("config file {}: {e}", path.display())))?;
        crate::config::merge_value(&mut base, patch);
    }
    if let Some(seed) = args.seed {
        crate::config::set_path(&mut base, "seed", Value::from(seed))?;
    }
    for raw in &args.overrides {
        let (k, v) = parse_override(raw)?;
        crate::config::set_path(&mut base, &k, v)?;
    }
    let cfg: SystemConfig = serde_json::from_value(base)
        .map_err(|e| EmpatheiaError::Parse(format!("effective config: {e}")))?;
    cfg.cross_validate()?;
    Ok(cfg)
}

fn load_checkpoint(
    checkpoint_dir: &Path,
    cfg: &SystemConfig,
) -> Result<crate::params::ParamStore, EmpatheiaError> {
    let file = checkpoint_dir.join("checkpoint");
    if !file.is_file() {
        return Err(EmpatheiaError::precondition(format!(
            "no checkpoint file under {}",
            checkpoint_dir.display()
        )));
    }
    let mut params = build_model(cfg)?;
    params.load_into(&file)?;
    Ok(params)
}

fn cmd_eval(
    corpus: &CorpusArgs,
    checkpoint: &Path,
    store_root: &Path,
    out: &Path,
    config: &ConfigArgs,
) -> Result<i32, EmpatheiaError> {
    let cfg = checkpoint_config(checkpoint, config)?;
    let dialogues = corpus.load()?;
    let store = FeatureStore::open_or_create(store_root)?;
    let params = load_checkpoint(checkpoint, &cfg)?;
    let report = evaluate(&EvalRequest {
        cfg: &cfg,
        params: &params,
        corpus: &dialogues,
        store: &store,
    })?;
    report.write(out)?;
    RunManifest::new("eval", "eval", &cfg)
        .with_input("corpus", corpus.corpus.display().to_string())
        .with_input("checkpoint", checkpoint.display().to_string())
        .write(out)?;
    eprintln!(
        "eval: {} samples, acc {:.4}, dist1 {:.4}, dist2 {:.4} -> {}",
        report.n_samples,
        report.acc,
        report.dist1,
        report.dist2,
        out.display()
    );
    Ok(0)
}

fn cmd_export(
    corpus: &CorpusArgs,
    checkpoint: &Path,
    store_root: &Path,
    out: &Path,
    samples: Option<usize>,
    config: &ConfigArgs,
) -> Result<i32, EmpatheiaError> {
    let cfg = checkpoint_config(checkpoint, config)?;
    let dialogues = corpus.load()?;
    let store = FeatureStore::open(store_root)?;
    let params = load_checkpoint(checkpoint, &cfg)?;
    let n = samples.unwrap_or(cfg.eval.embedding_samples);
    let rows = export_embeddings(&cfg, &params, &dialogues, &store, n, cfg.seed)?;
    let path = write_embeddings(out, &rows, cfg.model.sd_style)?;
    RunManifest::new("export-embeddings", "export-embeddings", &cfg)
        .with_input("corpus", corpus.corpus.display().to_string())
        .with_input("checkpoint", checkpoint.display().to_string())
        .write(out)?;
    eprintln!("export-embeddings: {} rows -> {}", rows.len(), path.display());
    Ok(0)
}

fn sweep_overrides(param: SweepParam, point: &str) -> Result<Vec<(String, Value)>, EmpatheiaError> {
    match param {
        SweepParam::NBlocks => {
            let n: u64 = point.parse().map_err(|_| {
                EmpatheiaError::domain(format!("grid value {point:?} is not an integer"))
            })?;
            Ok(vec![
                ("model.cs_blocks".into(), Value::from(n)),
                ("model.sd_blocks".into(), Value::from(n)),
            ])
        }
        SweepParam::NSignalTokens => {
            let n: u64 = point.parse().map_err(|_| {
                EmpatheiaError::domain(format!("grid value {point:?} is not an integer"))
            })?;
            Ok(vec![("model.n_signal_tokens".into(), Value::from(n))])
        }
        SweepParam::AlphaBeta => {
            let (a, b) = point.split_once(':').ok_or_else(|| {
                EmpatheiaError::domain(format!("grid value {point:?} is not alpha:beta"))
            })?;
            let a: f64 = a.parse().map_err(|_| {
                EmpatheiaError::domain(format!("alpha {a:?} is not a number"))
            })?;
            let b: f64 = b.parse().map_err(|_| {
                EmpatheiaError::domain(format!("beta {b:?} is not a number"))
            })?;
            Ok(vec![
                ("train.alpha".into(), Value::from(a)),
                ("train.beta".into(), Value::from(b)),
            ])
        }
    }
}

fn sweep_param_name(param: SweepParam) -> &'static str {
    match param {
        SweepParam::NBlocks => "n_blocks",
        SweepParam::NSignalTokens => "n_signal_tokens",
        SweepParam::AlphaBeta => "alpha_beta",
    }
}

fn cmd_sweep(
    corpus: &CorpusArgs,
    param: SweepParam,
    grid: &str,
    out: &Path,
    config: &ConfigArgs,
) -> Result<i32, EmpatheiaError> {
    let dialogues = corpus.load()?;
    let points: Vec<&str> = grid.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if points.is_empty() {
        return Err(EmpatheiaError::domain("sweep grid is empty"));
    }
    std::fs::create_dir_all(out).map_err(|e| EmpatheiaError::io(out, e))?;
    let mut csv = String::from(
        "point,n_samples,acc,dist1,dist2,ssim,cpbd,sync_cf,final_l_oal\n",
    );
    for point in &points {
        let mut args = config.clone();
        for (k, v) in sweep_overrides(param, point)? {
            args.overrides.push(format!("{k}={v}"));
        }
        let cfg = args.build()?;
        let point_dir = out.join(format!("{}-{}", sweep_param_name(param), point.replace(':', "x")));
        let store_dir = point_dir.join("store");

        // each grid point owns its store, gold cache, and run directory
        build_point_store(&cfg, &dialogues, &store_dir)?;
        let store = FeatureStore::open(&store_dir)?;
        let req = TrainRequest {
            cfg: &cfg,
            corpus: &dialogues,
            store: &store,
            runs_root: &point_dir,
            run_name: "run",
            stages: ALL_STAGES.to_vec(),
            from_scratch: false,
            corpus_label: corpus.corpus.display().to_string(),
            store_label: store_dir.display().to_string(),
        };
        let results = train(&req)?;
        let last = results.last().expect("four stages ran");
        let mut params = build_model(&cfg)?;
        params.load_into(&last.checkpoint)?;
        let report = evaluate(&EvalRequest {
            cfg: &cfg,
            params: &params,
            corpus: &dialogues,
            store: &store,
        })?;
        report.write(&point_dir)?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        csv.push_str(&format!(
            "{point},{},{:e},{:e},{:e},{},{},{},{:e}\n",
            report.n_samples,
            report.acc,
            report.dist1,
            report.dist2,
            opt(report.ssim),
            opt(report.cpbd),
            opt(report.sync_cf),
            last.rows.last().expect("steps ran").l_oal,
        ));
        eprintln!("sweep point {point}: acc {:.4} -> {}", report.acc, point_dir.display());
    }
    let csv_path = out.join("sweep.csv");
    std::fs::write(&csv_path, &csv).map_err(|e| EmpatheiaError::io(&csv_path, e))?;
    RunManifest::new("sweep", "sweep", &config.build()?)
        .with_input("corpus", corpus.corpus.display().to_string())
        .with_input("grid", grid)
        .write(out)?;
    let mut stdout = std::io::stdout().lock();
    write!(stdout, "{csv}").map_err(|e| EmpatheiaError::io(Path::new("stdout"), e))?;
    Ok(0)
}

/// Synthesize features and gold targets for one sweep point.
fn build_point_store(
    cfg: &SystemConfig,
    dialogues: &[crate::data::Dialogue],
    store_dir: &Path,
) -> Result<(), EmpatheiaError> {
    let spec = StoreSpec {
        d_enc: cfg.model.d_enc,
        seed: derive_seed(cfg.seed, "feature-store"),
        ..Default::default()
    };
    let (store, _) = build_synthetic_store(dialogues, store_dir, &spec)?;
    let params = build_model(cfg)?;
    let gcfg = cfg.generator();
    let mut gold = GoldCache::open_or_create(store.root())?;
    for d in dialogues {
        for turn in &d.turns {
            let ridx = turn.response_index();
            let key_ok = ["speech", "video"]
                .iter()
                .all(|k| store.contains(&FeatureStore::key(&d.conversation_id, ridx, k)));
            if !key_ok {
                continue;
            }
            let (c_s, c_v) = extract_gold_content(
                &params, &gcfg, &store, &d.conversation_id, ridx, &turn.response,
            )?;
            let (s_s, s_v) = extract_gold_style(&params, &gcfg, &store, &d.conversation_id, ridx)?;
            gold.put("content_s", &d.conversation_id, ridx, &c_s)?;
            gold.put("content_v", &d.conversation_id, ridx, &c_v)?;
            gold.put("style_s", &d.conversation_id, ridx, &s_s)?;
            gold.put("style_v", &d.conversation_id, ridx, &s_v)?;
        }
    }
    Ok(())
}
