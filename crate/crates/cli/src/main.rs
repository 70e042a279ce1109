//! `moeforge`: corpus generation, training, curriculum derivation and
//! routing analysis driven by JSON config files.

mod manifest;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use moeforge::analysis::{self, UsageOptions, UsageWeighting};
use moeforge::corpus::{generate_corpus, Corpus, CorpusConfig, Split};
use moeforge::curriculum::{self, CurriculumPlan, ResourceThresholds, ValidationHistory};
use moeforge::model::{ForwardOptions, Model, Stack};
use moeforge::ndcore::Tape;
use moeforge::trainer::{self, TrainConfig};

use manifest::{RunManifest, UsageError};

#[derive(Parser)]
#[command(name = "moeforge", version, about = "Sparse mixture-of-experts translation laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-task corpus.
    Gen {
        /// Corpus config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a generated corpus.
    Train {
        /// Training config (JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Curriculum plan (JSON); replaces any plan in the config.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the final model's routing decisions as JSON lines.
        #[arg(long)]
        dump_routing: bool,
    },
    /// Derive a curriculum plan.
    Curriculum {
        #[arg(long, value_enum)]
        mode: CurriculumMode,
        /// Training log CSV (step mode).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Corpus JSON lines (count mode).
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Number of bins (step mode).
        #[arg(long, default_value_t = 3)]
        n: usize,
        /// Total updates of the run the plan is for.
        #[arg(long)]
        updates: u64,
        /// Descending size thresholds (count mode).
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<usize>>,
        /// Characteristic steps per bin (count mode).
        #[arg(long, value_delimiter = ',')]
        steps: Option<Vec<u64>>,
        /// Merge the first M bins of the derived plan into one.
        #[arg(long)]
        merge_first: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Routing analyses of a trained checkpoint.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Training config; defaults to config.json next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Which::All)]
        which: Which,
        #[arg(long, value_enum, default_value_t = SplitArg::Valid)]
        split: SplitArg,
        #[arg(long, value_enum, default_value_t = WeightingArg::Top1)]
        weighting: WeightingArg,
        /// First random-routing seed.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Number of random-routing seeds.
        #[arg(long, default_value_t = 2)]
        random_seeds: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dump_routing: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CurriculumMode {
    Count,
    Step,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Which {
    Usage,
    E50,
    Coloc,
    Sim,
    Random,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightingArg {
    Top1,
    GateWeighted,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(manifest::exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen { config, seed, out } => cmd_gen(&config, seed, &out),
        Command::Train { config, corpus, plan, seed, out, dump_routing } => {
            cmd_train(&config, &corpus, plan.as_deref(), seed, &out, dump_routing)
        }
        Command::Curriculum { mode, log, corpus, n, updates, thresholds, steps, merge_first, out } => {
            cmd_curriculum(mode, log.as_deref(), corpus.as_deref(), n, updates, thresholds, steps, merge_first, &out)
        }
        Command::Analyze { checkpoint, corpus, config, which, split, weighting, seed, random_seeds, out, dump_routing } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Valid => Split::Valid,
            };
            let weighting = match weighting {
                WeightingArg::Top1 => UsageWeighting::Top1,
                WeightingArg::GateWeighted => UsageWeighting::GateWeighted,
            };
            let seeds: Vec<u64> = (seed..seed + random_seeds).collect();
            let args = AnalyzeArgs { which, split, weighting, seeds, dump_routing };
            cmd_analyze(&checkpoint, &corpus, config.as_deref(), &args, &out)
        }
    }
}

/// Parses a JSON config, reporting the file, field and line on failure.
fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| UsageError(format!("config {}: {e}", path.display())).into())
}

fn read_corpus(path: &Path) -> Result<Corpus> {
    let file = File::open(path).map_err(|e| UsageError(format!("cannot read corpus {}: {e}", path.display())))?;
    Ok(Corpus::read_jsonl(std::io::BufReader::new(file))?)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
}

fn cmd_gen(config: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg: CorpusConfig = read_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let corpus = generate_corpus(&cfg)?;
    std::fs::create_dir_all(out)?;
    corpus.write_jsonl(create(out, "corpus.jsonl")?)?;
    let mut m = RunManifest::new("gen", &cfg, cfg.seed, None)?;
    m.add_output(out, "corpus.jsonl")?;
    m.write(out)?;
    println!("wrote {} tasks to {}", corpus.num_tasks(), out.join("corpus.jsonl").display());
    Ok(())
}

fn cmd_train(config: &Path, corpus_path: &Path, plan: Option<&Path>, seed: Option<u64>, out: &Path, dump: bool) -> Result<()> {
    let mut cfg: TrainConfig = read_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(p) = plan {
        let text = std::fs::read_to_string(p).map_err(|e| UsageError(format!("cannot read plan {}: {e}", p.display())))?;
        cfg.curriculum = Some(CurriculumPlan::from_json(&text)?);
    }
    let corpus = read_corpus(corpus_path)?;
    cfg.out_dir = Some(out.to_path_buf());
    let result = trainer::train(&cfg, &corpus)?;

    let mut m = RunManifest::new("train", &cfg, cfg.seed, Some(cfg.model.moe_mode.to_string()))?;
    m.add_input(corpus_path)?;
    let interval = cfg.valid_interval.max(1);
    for step in (interval..=cfg.total_updates).step_by(interval as usize) {
        m.add_output(out, &file_name(&trainer::checkpoint_path(out, step)))?;
    }
    m.add_output(out, "config.json")?;
    m.add_output(out, "train_log.csv")?;
    if dump {
        dump_routing(&result.model, &corpus, out)?;
        m.add_output(out, "routing.jsonl")?;
    }
    m.write(out)?;
    for t in 0..corpus.num_tasks() {
        if let Some((val, train)) = result.log.final_ppl(t) {
            println!("task {t}: valid ppl {val:.4}, train ppl {train:.4}");
        }
    }
    Ok(())
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

#[allow(clippy::too_many_arguments)]
fn cmd_curriculum(
    mode: CurriculumMode,
    log: Option<&Path>,
    corpus: Option<&Path>,
    n: usize,
    updates: u64,
    thresholds: Option<Vec<usize>>,
    steps: Option<Vec<u64>>,
    merge_first: Option<usize>,
    out: &Path,
) -> Result<()> {
    let (mut plan, input, settings) = match mode {
        CurriculumMode::Step => {
            let log = log.ok_or_else(|| UsageError("step mode needs --log".into()))?;
            let file = File::open(log).map_err(|e| UsageError(format!("cannot read log {}: {e}", log.display())))?;
            let history = ValidationHistory::from_log_csv(file)?;
            let s_best = curriculum::s_best_map(&history)?;
            let plan = curriculum::partition_step_based(&s_best, n, updates)?;
            (plan, log, serde_json::json!({ "mode": "step", "n": n, "updates": updates, "merge_first": merge_first }))
        }
        CurriculumMode::Count => {
            let path = corpus.ok_or_else(|| UsageError("count mode needs --corpus".into()))?;
            let c = read_corpus(path)?;
            let th = thresholds.unwrap_or_else(|| curriculum::FULL_SCALE_COUNT_THRESHOLDS.to_vec());
            let st = steps.unwrap_or_else(|| curriculum::FULL_SCALE_COUNT_STEPS.to_vec());
            let specs = c.task_specs(&ResourceThresholds::default());
            let plan = curriculum::partition_count_based(&specs, &th, &st, updates)?;
            let settings = serde_json::json!({
                "mode": "count", "thresholds": th, "steps": st, "updates": updates, "merge_first": merge_first
            });
            (plan, path, settings)
        }
    };
    if let Some(m) = merge_first {
        plan = curriculum::merge_bins(&plan, &(1..=m).collect::<Vec<_>>())?;
    }
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("plan.json"), plan.to_json()? + "\n")?;
    let mut m = RunManifest::new("curriculum", &settings, 0, None)?;
    m.add_input(input)?;
    m.add_output(out, "plan.json")?;
    m.write(out)?;
    for (i, b) in plan.bins.iter().enumerate() {
        println!("bin {}: k={} tasks={:?}", i + 1, b.k, b.tasks);
    }
    Ok(())
}

struct AnalyzeArgs {
    which: Which,
    split: Split,
    weighting: UsageWeighting,
    seeds: Vec<u64>,
    dump_routing: bool,
}

fn cmd_analyze(checkpoint: &Path, corpus_path: &Path, config: Option<&Path>, args: &AnalyzeArgs, out: &Path) -> Result<()> {
    let config_path = match config {
        Some(p) => p.to_path_buf(),
        None => checkpoint.parent().unwrap_or(Path::new(".")).join("config.json"),
    };
    let cfg: TrainConfig = read_config(&config_path)?;
    let corpus = read_corpus(corpus_path)?;
    let model = trainer::load_model(&cfg.model, checkpoint)?;
    let tasks: Vec<usize> = (0..corpus.num_tasks()).collect();
    std::fs::create_dir_all(out)?;

    let settings = serde_json::json!({
        "model": cfg.model,
        "split": args.split,
        "weighting": args.weighting,
        "random_seeds": args.seeds,
    });
    let first_seed = args.seeds.first().copied().unwrap_or(0);
    let mut m = RunManifest::new("analyze", &settings, first_seed, Some(cfg.model.moe_mode.to_string()))?;
    m.add_input(checkpoint)?;
    m.add_input(corpus_path)?;

    let wants = |w: Which| args.which == w || args.which == Which::All;
    let opts = UsageOptions { split: args.split, weighting: args.weighting, ..Default::default() };
    let report = analysis::collect_usage(&model, &corpus, &tasks, &opts)?;
    if let Some(notice) = &report.notice {
        eprintln!("notice: {notice}");
    }
    let thresholds = ResourceThresholds::desk();

    if wants(Which::Usage) {
        analysis::write_usage_csv(create(out, "usage.csv")?, &report.usages)?;
        m.add_output(out, "usage.csv")?;
    }
    if wants(Which::E50) {
        let mut rows = report.usages.clone();
        rows.extend(analysis::group_usage(&report.usages, |t| corpus.group_label(t, &thresholds))?);
        analysis::write_e50_csv(create(out, "e50.csv")?, &rows)?;
        m.add_output(out, "e50.csv")?;
    }
    if wants(Which::Coloc) {
        let rows = if report.notice.is_some() { Vec::new() } else { analysis::colocation_table(&report)? };
        analysis::write_coloc_csv(create(out, "coloc.csv")?, &rows)?;
        m.add_output(out, "coloc.csv")?;
    }
    if wants(Which::Sim) {
        let mut w = create(out, "similarity.csv")?;
        let mut sides = BTreeMap::new();
        for (name, stack) in [("encoder", Stack::Encoder), ("decoder", Stack::Decoder)] {
            let groups = analysis::group_vectors(&report.usages, stack);
            if groups.len() >= 2 {
                let labels: Vec<String> = groups.iter().map(|(g, _)| g.clone()).collect();
                let vecs: Vec<Vec<f64>> = groups.into_iter().map(|(_, v)| v).collect();
                sides.insert(name, (labels, analysis::similarity_matrix(&vecs)?));
            }
        }
        write_similarity(&mut w, &sides)?;
        m.add_output(out, "similarity.csv")?;
    }
    if wants(Which::Random) {
        let rows = if report.notice.is_some() {
            Vec::new()
        } else {
            analysis::random_routing_eval(&model, &corpus, &tasks, &args.seeds, trainer::eval_threads())?
        };
        analysis::write_random_csv(create(out, "random.csv")?, &rows)?;
        m.add_output(out, "random.csv")?;
    }
    if args.dump_routing {
        dump_routing(&model, &corpus, out)?;
        m.add_output(out, "routing.jsonl")?;
    }
    m.write(out)?;
    println!("analysis written to {}", out.display());
    Ok(())
}

type SimilarityTable = (Vec<String>, Vec<Vec<Option<f64>>>);

fn write_similarity(w: &mut impl std::io::Write, sides: &BTreeMap<&str, SimilarityTable>) -> Result<()> {
    if sides.is_empty() {
        writeln!(w, "side,group_a,group_b,cosine")?;
        return Ok(());
    }
    let mut buf = Vec::new();
    for (i, (side, (labels, m))) in sides.iter().enumerate() {
        buf.clear();
        analysis::write_similarity_csv(&mut buf, side, labels, m)?;
        // Keep one header for the combined file.
        let text = String::from_utf8(buf.clone())?;
        let body = if i == 0 { text.as_str() } else { text.split_once('\n').map_or("", |(_, rest)| rest) };
        w.write_all(body.as_bytes())?;
    }
    Ok(())
}

/// Routing decisions of the first few validation examples of every task.
fn dump_routing(model: &Model, corpus: &Corpus, out: &Path) -> Result<()> {
    use rand::SeedableRng;
    let mut w = create(out, "routing.jsonl")?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    for task in 0..corpus.num_tasks() {
        let examples = corpus.examples(task, Split::Valid)?;
        let items: Vec<_> = examples.iter().take(4).map(|e| (task, e)).collect();
        if items.is_empty() {
            continue;
        }
        let batch = corpus.batch_of(&items);
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &batch, &ForwardOptions::eval(), &mut rng)?;
        for r in &fwd.routing {
            r.decision.write_jsonl(&mut w, &format!("task{task}.{}", r.layer))?;
        }
    }
    Ok(())
}
