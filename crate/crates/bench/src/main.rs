//! Command-line benchmark driver: corpus generation, training, decoding,
//! presence QA, listing hallucination, ablation grids, timing comparisons,
//! and relevance heatmaps, all seeded and configured from one JSON file
//! with flag overrides.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use lime_core::lime::{self, EditMode, LimeConfig, TargetMode};
use lime_core::model::{argmax, Model, MultimodalSequence, Sampling};
use lime_core::relevance::{propagate, RelevanceConfig};
use lime_core::tensor::Graph;

use lime_bench::config::{derive_seeds, BenchConfig, SEED_ENV_VAR};
use lime_bench::corpus::{generate_corpus, Corpus, QaExample};
use lime_bench::harness::{
    run_ablation, run_caption_experiment, run_overhead, run_pope_experiment, Method,
    CAPTION_MAX_TOKENS, POPE_MAX_TOKENS,
};
use lime_bench::heatmap::{render_heatmap, render_step_frames};
use lime_bench::report::{
    BenchmarkReport, CaptionSection, DecodeSection, OverheadSection, PopeSection, ReportBody,
    ReportMeta, TrainSection,
};
use lime_bench::scene::Scene;
use lime_bench::{BenchError, Result};

#[derive(Parser)]
#[command(
    name = "lime-bench",
    about = "Synthetic multimodal benchmark for relevance-guided decoding"
)]
struct Cli {
    /// JSON configuration file; command-line flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed. Defaults to the LIME_SEED environment variable, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Report destination (pretty JSON); a CSV sibling with the same stem
    /// is written next to it. Without this flag the JSON goes to stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CorpusFlags {
    /// Override the number of training scenes.
    #[arg(long)]
    training_scenes: Option<usize>,
    /// Override the number of held-out evaluation scenes.
    #[arg(long)]
    eval_scenes: Option<usize>,
}

impl CorpusFlags {
    fn apply(&self, config: &mut BenchConfig) {
        if let Some(n) = self.training_scenes {
            config.corpus.training_scenes = n;
        }
        if let Some(n) = self.eval_scenes {
            config.corpus.eval_scenes = n;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EditModeArg {
    Both,
    KeysOnly,
    ValuesOnly,
}

impl From<EditModeArg> for EditMode {
    fn from(v: EditModeArg) -> EditMode {
        match v {
            EditModeArg::Both => EditMode::Both,
            EditModeArg::KeysOnly => EditMode::KeysOnly,
            EditModeArg::ValuesOnly => EditMode::ValuesOnly,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TargetModeArg {
    Argmax,
    Reference,
}

impl From<TargetModeArg> for TargetMode {
    fn from(v: TargetModeArg) -> TargetMode {
        match v {
            TargetModeArg::Argmax => TargetMode::Argmax,
            TargetModeArg::Reference => TargetMode::Reference,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Vanilla,
    Lime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Random,
    Popular,
    Adversarial,
    PopularConfusion,
    All,
}

#[derive(Args, Clone)]
struct LimeFlags {
    /// Optimization iterations per decoding step.
    #[arg(long)]
    steps: Option<usize>,
    /// Adam learning rate for the perturbation.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Weight of the KL anchor term.
    #[arg(long)]
    lambda: Option<f64>,
    /// Relevance softmax temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// Which cached tensors the perturbation may edit.
    #[arg(long, value_enum)]
    edit_mode: Option<EditModeArg>,
    /// How the relevance target token is picked.
    #[arg(long, value_enum)]
    target_mode: Option<TargetModeArg>,
    /// Stabilizer for relevance propagation.
    #[arg(long)]
    relevance_epsilon: Option<f64>,
}

impl LimeFlags {
    fn apply(&self, config: &mut LimeConfig) {
        if let Some(v) = self.steps {
            config.steps = v;
        }
        if let Some(v) = self.learning_rate {
            config.learning_rate = v;
        }
        if let Some(v) = self.lambda {
            config.lambda = v;
        }
        if let Some(v) = self.tau {
            config.tau = v;
        }
        if let Some(v) = self.edit_mode {
            config.edit_mode = v.into();
        }
        if let Some(v) = self.target_mode {
            config.target_mode = v.into();
        }
        if let Some(v) = self.relevance_epsilon {
            config.relevance_epsilon = v;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the corpus, train a model on it, and save the weights.
    Train {
        /// Where to write the trained model.
        #[arg(long)]
        model_out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Probability of withholding the perceptual rows per presentation.
        #[arg(long)]
        bias_rate: Option<f64>,
        #[command(flatten)]
        corpus: CorpusFlags,
    },
    /// Decode one evaluation scene and print the generation.
    Decode {
        #[arg(long)]
        model: PathBuf,
        /// Index into the held-out evaluation scenes.
        #[arg(long, default_value_t = 0)]
        scene: usize,
        /// Ask about this object symbol; omitted, the prompt asks for the
        /// full object listing instead.
        #[arg(long)]
        query: Option<usize>,
        #[arg(long, value_enum, default_value_t = MethodArg::Lime)]
        method: MethodArg,
        #[arg(long, default_value_t = POPE_MAX_TOKENS)]
        max_tokens: usize,
        /// Write one JSON line per decoding step report (enhanced arm only).
        #[arg(long)]
        trace: Option<PathBuf>,
        #[command(flatten)]
        lime: LimeFlags,
        #[command(flatten)]
        corpus: CorpusFlags,
    },
    /// Presence QA over the evaluation splits.
    Pope {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value_t = MethodArg::Lime)]
        method: MethodArg,
        #[arg(long, value_enum, default_value_t = SplitArg::All)]
        split: SplitArg,
        /// Cap the number of examples taken from each split.
        #[arg(long)]
        limit: Option<usize>,
        #[command(flatten)]
        lime: LimeFlags,
        #[command(flatten)]
        corpus: CorpusFlags,
    },
    /// Object-listing hallucination over the evaluation scenes.
    Caption {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value_t = MethodArg::Lime)]
        method: MethodArg,
        /// Cap the number of scenes captioned.
        #[arg(long)]
        limit: Option<usize>,
        #[command(flatten)]
        lime: LimeFlags,
        #[command(flatten)]
        corpus: CorpusFlags,
    },
    /// Sweep edit modes and KL weights over the adversarial split.
    Ablate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.1, 1.0])]
        lambdas: Vec<f64>,
        #[arg(long, value_enum, value_delimiter = ',',
              default_values_t = vec![EditModeArg::KeysOnly, EditModeArg::ValuesOnly, EditModeArg::Both])]
        edit_modes: Vec<EditModeArg>,
        #[arg(long)]
        limit: Option<usize>,
        #[command(flatten)]
        lime: LimeFlags,
        #[command(flatten)]
        corpus: CorpusFlags,
    },
    /// Render relevance heatmaps for one evaluation scene.
    Heatmap {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        scene: usize,
        /// Ask about this object symbol; omitted, the listing prompt is used.
        #[arg(long)]
        query: Option<usize>,
        #[arg(long, value_enum, default_value_t = MethodArg::Lime)]
        method: MethodArg,
        /// Directory the images and sidecars are written into.
        #[arg(long, default_value = "heatmaps")]
        dir: PathBuf,
        /// File-name stem for the rendered frames.
        #[arg(long, default_value = "relevance")]
        stem: String,
        #[command(flatten)]
        lime: LimeFlags,
        #[command(flatten)]
        corpus: CorpusFlags,
    },
    /// Throughput comparison across optimization budgets.
    Overhead {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1, 3, 7, 15])]
        steps_list: Vec<usize>,
        /// Cap the number of timed examples.
        #[arg(long)]
        limit: Option<usize>,
        #[command(flatten)]
        lime: LimeFlags,
        #[command(flatten)]
        corpus: CorpusFlags,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV_VAR) {
        Ok(text) => text.trim().parse().map_err(|_| {
            BenchError::Config(format!("{SEED_ENV_VAR} must be an unsigned integer, got {text:?}"))
        }),
        Err(_) => Ok(0),
    }
}

fn load_config(path: Option<&Path>) -> Result<BenchConfig> {
    match path {
        Some(p) => BenchConfig::load(p),
        None => Ok(BenchConfig::default()),
    }
}

fn emit(report: &BenchmarkReport, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => {
            report.write_json(path)?;
            let csv_path = path.with_extension("csv");
            report.write_csv(&csv_path)?;
            println!("wrote {}", path.display());
            println!("wrote {}", csv_path.display());
            Ok(())
        }
        None => {
            print!("{}", report.to_json()?);
            Ok(())
        }
    }
}

fn meta(seed: u64, method: &Method, config: &BenchConfig, model: &Model) -> ReportMeta {
    ReportMeta {
        seed,
        method: method.name().to_string(),
        lime: method.lime_config().copied(),
        corpus: config.corpus.clone(),
        model: model.config.clone(),
    }
}

fn method_of(arg: MethodArg, config: &BenchConfig, flags: &LimeFlags) -> Method {
    match arg {
        MethodArg::Vanilla => Method::Vanilla,
        MethodArg::Lime => {
            let mut lime_config = config.lime;
            flags.apply(&mut lime_config);
            Method::Lime(lime_config)
        }
    }
}

fn select_examples(corpus: &Corpus, split: SplitArg, limit: Option<usize>) -> Vec<QaExample> {
    let take = |examples: &[QaExample]| -> Vec<QaExample> {
        match limit {
            Some(n) => examples.iter().take(n).cloned().collect(),
            None => examples.to_vec(),
        }
    };
    match split {
        SplitArg::Random => take(&corpus.eval.random),
        SplitArg::Popular => take(&corpus.eval.popular),
        SplitArg::Adversarial => take(&corpus.eval.adversarial),
        SplitArg::PopularConfusion => take(&corpus.eval.popular_confusion),
        SplitArg::All => {
            let mut out = take(&corpus.eval.random);
            out.extend(take(&corpus.eval.popular));
            out.extend(take(&corpus.eval.adversarial));
            out.extend(take(&corpus.eval.popular_confusion));
            out
        }
    }
}

fn eval_scene(corpus: &Corpus, index: usize) -> Result<&Scene> {
    corpus.eval.caption_scenes.get(index).ok_or_else(|| {
        BenchError::Config(format!(
            "scene index {index} outside the {} evaluation scenes",
            corpus.eval.caption_scenes.len()
        ))
    })
}

/// Prompt sequence for one scene: a QA prompt when a symbol is queried,
/// the listing prompt otherwise.
fn scene_sequence(model: &Model, scene: &Scene, query: Option<usize>) -> Result<MultimodalSequence> {
    let seq = match query {
        Some(symbol) => MultimodalSequence::build(
            model,
            &scene.patches(),
            &scene.region_of(symbol),
            &scene.qa_prompt(symbol),
            false,
        )?,
        None => MultimodalSequence::build(
            model,
            &scene.patches(),
            &scene.occupied_cells(),
            &scene.caption_prompt(),
            false,
        )?,
    };
    Ok(seq)
}

fn run(cli: Cli) -> Result<()> {
    let seed = resolve_seed(cli.seed)?;
    let seeds = derive_seeds(seed);
    let out = cli.out.as_deref();

    match cli.command {
        Command::Train {
            model_out,
            epochs,
            batch_size,
            learning_rate,
            bias_rate,
            corpus: corpus_flags,
        } => {
            let mut config = load_config(cli.config.as_deref())?;
            corpus_flags.apply(&mut config);
            if let Some(v) = epochs {
                config.train.epochs = v;
            }
            if let Some(v) = batch_size {
                config.train.batch_size = v;
            }
            if let Some(v) = learning_rate {
                config.train.learning_rate = v;
            }
            if let Some(v) = bias_rate {
                config.train.bias_rate = v;
            }
            config.validate()?;

            let corpus = generate_corpus(seeds.corpus, &config.corpus)?;
            let mut model = Model::init(config.model.clone(), seeds.model)?;
            let log = model.train(
                &corpus.training,
                &config.train.to_train_config(seeds.train),
            )?;
            let eval_examples: Vec<_> = corpus
                .eval
                .random
                .iter()
                .map(|e| e.train_example())
                .collect();
            let eval_accuracy = model.qa_accuracy(&eval_examples, false)?;
            model.save(&model_out)?;
            println!(
                "trained {} epochs on {} examples; eval accuracy {:.3}; saved {}",
                config.train.epochs,
                corpus.training.len(),
                eval_accuracy,
                model_out.display()
            );

            let report = BenchmarkReport {
                meta: meta(seed, &Method::Vanilla, &config, &model),
                body: ReportBody::Train(TrainSection {
                    epochs: config.train.epochs,
                    examples: corpus.training.len(),
                    epoch_losses: log.epoch_losses.clone(),
                    eval_accuracy,
                    model_path: model_out.display().to_string(),
                }),
            };
            emit(&report, out)
        }

        Command::Decode {
            model,
            scene,
            query,
            method,
            max_tokens,
            trace,
            lime: lime_flags,
            corpus: corpus_flags,
        } => {
            let mut config = load_config(cli.config.as_deref())?;
            corpus_flags.apply(&mut config);
            let model = Model::load(&model)?;
            let corpus = generate_corpus(seeds.corpus, &config.corpus)?;
            let scene = eval_scene(&corpus, scene)?;
            if let Some(symbol) = query {
                if symbol >= config.corpus.object_count {
                    return Err(BenchError::Config(format!(
                        "query symbol {symbol} outside the {}-object vocabulary",
                        config.corpus.object_count
                    )));
                }
            }
            let method = method_of(method, &config, &lime_flags);
            if trace.is_some() && matches!(method, Method::Vanilla) {
                return Err(BenchError::Config(
                    "step traces exist only for the lime method".into(),
                ));
            }
            let mut seq = scene_sequence(&model, scene, query)?;
            let budget = max_tokens.min(model.config.max_sequence.saturating_sub(seq.len()));

            let started = std::time::Instant::now();
            let (generated, hit_end, steps) = match &method {
                Method::Vanilla => {
                    let (mut cache, tail) = model.prefill(&seq)?;
                    let decoded =
                        model.decode(&mut seq, &mut cache, tail, budget, Sampling::Greedy)?;
                    (decoded.tokens, decoded.hit_end, decoded.steps.len())
                }
                Method::Lime(lime_config) => {
                    let decoded = lime::decode(&model, &mut seq, lime_config, budget)?;
                    if let Some(trace_path) = &trace {
                        let mut file = std::fs::File::create(trace_path).map_err(|e| {
                            BenchError::Io(format!("{}: {e}", trace_path.display()))
                        })?;
                        for report in &decoded.reports {
                            let line = serde_json::to_string(report)
                                .map_err(|e| BenchError::Serde(e.to_string()))?;
                            writeln!(file, "{line}").map_err(|e| {
                                BenchError::Io(format!("{}: {e}", trace_path.display()))
                            })?;
                        }
                        println!("wrote {}", trace_path.display());
                    }
                    (decoded.tokens, decoded.hit_end, decoded.reports.len())
                }
            };
            let seconds = started.elapsed().as_secs_f64();
            println!(
                "scene {} ({} arm): {:?} ({} steps, end marker {})",
                scene.id,
                method.name(),
                generated,
                steps,
                if hit_end { "reached" } else { "not reached" }
            );

            let report = BenchmarkReport {
                meta: meta(seed, &method, &config, &model),
                body: ReportBody::Decode(DecodeSection {
                    scene_id: scene.id,
                    query_symbol: query,
                    generated,
                    hit_end,
                    steps: steps as u64,
                    seconds,
                }),
            };
            emit(&report, out)
        }

        Command::Pope {
            model,
            method,
            split,
            limit,
            lime: lime_flags,
            corpus: corpus_flags,
        } => {
            let mut config = load_config(cli.config.as_deref())?;
            corpus_flags.apply(&mut config);
            let model = Model::load(&model)?;
            let corpus = generate_corpus(seeds.corpus, &config.corpus)?;
            let examples = select_examples(&corpus, split, limit);
            let method = method_of(method, &config, &lime_flags);
            let run = run_pope_experiment(&model, &examples, &method, POPE_MAX_TOKENS)?;
            for a in &run.aggregates {
                println!(
                    "{} split: accuracy {:.3}, f1 {:.3} over {} examples",
                    a.split.as_str(),
                    a.score.accuracy,
                    a.score.f1,
                    a.examples
                );
            }
            let report = BenchmarkReport {
                meta: meta(seed, &method, &config, &model),
                body: ReportBody::Pope(PopeSection {
                    records: run.records,
                    aggregates: run.aggregates,
                    arm: run.arm,
                }),
            };
            emit(&report, out)
        }

        Command::Caption {
            model,
            method,
            limit,
            lime: lime_flags,
            corpus: corpus_flags,
        } => {
            let mut config = load_config(cli.config.as_deref())?;
            corpus_flags.apply(&mut config);
            let model = Model::load(&model)?;
            let corpus = generate_corpus(seeds.corpus, &config.corpus)?;
            let scenes: Vec<Scene> = match limit {
                Some(n) => corpus.eval.caption_scenes.iter().take(n).cloned().collect(),
                None => corpus.eval.caption_scenes.clone(),
            };
            let method = method_of(method, &config, &lime_flags);
            let run = run_caption_experiment(
                &model,
                &scenes,
                config.corpus.object_count,
                &method,
                CAPTION_MAX_TOKENS,
            )?;
            println!(
                "{} captions: hallucinated-caption rate {:.3}, hallucinated-mention rate {:.3}, recall {:.3}",
                run.score.caption_count, run.score.chair_s, run.score.chair_i, run.score.recall
            );
            let report = BenchmarkReport {
                meta: meta(seed, &method, &config, &model),
                body: ReportBody::Caption(CaptionSection {
                    records: run.records,
                    score: run.score,
                    arm: run.arm,
                }),
            };
            emit(&report, out)
        }

        Command::Ablate {
            model,
            lambdas,
            edit_modes,
            limit,
            lime: lime_flags,
            corpus: corpus_flags,
        } => {
            let mut config = load_config(cli.config.as_deref())?;
            corpus_flags.apply(&mut config);
            let model = Model::load(&model)?;
            let corpus = generate_corpus(seeds.corpus, &config.corpus)?;
            let examples = select_examples(&corpus, SplitArg::Adversarial, limit);
            let mut base = config.lime;
            lime_flags.apply(&mut base);
            let modes: Vec<EditMode> = edit_modes.into_iter().map(EditMode::from).collect();
            let grid = run_ablation(&model, &examples, &modes, &lambdas, &base)?;
            println!(
                "vanilla accuracy {:.3}; {} grid cells",
                grid.vanilla.accuracy,
                grid.cells.len()
            );
            let report = BenchmarkReport {
                meta: meta(seed, &Method::Lime(base), &config, &model),
                body: ReportBody::Ablation(grid),
            };
            emit(&report, out)
        }

        Command::Heatmap {
            model,
            scene,
            query,
            method,
            dir,
            stem,
            lime: lime_flags,
            corpus: corpus_flags,
        } => {
            let mut config = load_config(cli.config.as_deref())?;
            corpus_flags.apply(&mut config);
            let model = Model::load(&model)?;
            let corpus = generate_corpus(seeds.corpus, &config.corpus)?;
            let scene = eval_scene(&corpus, scene)?;
            let method = method_of(method, &config, &lime_flags);
            let seq = scene_sequence(&model, scene, query)?;
            let region = seq.grounding_indices().to_vec();
            std::fs::create_dir_all(&dir)
                .map_err(|e| BenchError::Io(format!("{}: {e}", dir.display())))?;

            match &method {
                Method::Vanilla => {
                    let mut g = Graph::new();
                    let trace = model.build_forward(&mut g, &seq, None, false)?;
                    let target = argmax(g.value(trace.logits_last));
                    let propagated =
                        propagate(&mut g, &trace, target, &RelevanceConfig::default())?;
                    let map = propagated.map(&g, &seq);
                    let image = dir.join(format!("{stem}.ppm"));
                    let sidecar = render_heatmap(&map, scene, &region, &image)?;
                    println!("wrote {}", image.display());
                    println!("wrote {}", sidecar.display());
                }
                Method::Lime(lime_config) => {
                    let (_, tail) = model.prefill(&seq)?;
                    let (_delta, report) =
                        lime::optimize_step_delta(&model, &seq, &tail, lime_config)?;
                    let frames = render_step_frames(&report, scene, &region, &dir, &stem)?;
                    for frame in &frames {
                        println!("wrote {}", frame.display());
                    }
                    println!("wrote {}", dir.join(format!("{stem}.json")).display());
                }
            }
            Ok(())
        }

        Command::Overhead {
            model,
            steps_list,
            limit,
            lime: lime_flags,
            corpus: corpus_flags,
        } => {
            let mut config = load_config(cli.config.as_deref())?;
            corpus_flags.apply(&mut config);
            let model = Model::load(&model)?;
            let corpus = generate_corpus(seeds.corpus, &config.corpus)?;
            let examples = select_examples(&corpus, SplitArg::Random, limit);
            let mut base = config.lime;
            lime_flags.apply(&mut base);
            let rows = run_overhead(&model, &examples, &steps_list, &base)?;
            for row in &rows {
                println!(
                    "{} steps: slowdown {:.2}x ({:.2} vs {:.2} tokens/sec)",
                    row.steps,
                    row.report.slowdown,
                    row.report.vanilla.tokens_per_second,
                    row.report.enhanced.tokens_per_second
                );
            }
            let report = BenchmarkReport {
                meta: meta(seed, &Method::Lime(base), &config, &model),
                body: ReportBody::Overhead(OverheadSection { rows }),
            };
            emit(&report, out)
        }
    }
}
