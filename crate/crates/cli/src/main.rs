//! Command-line interface: synthesize logs, split them causally, train
//! affinity models, and evaluate them.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use playrank::eval::{evaluate, per_entity, seen_unseen_split, write_per_entity_tsv, EvalReport};
use playrank::ingest::{causal_split, read_log, write_log_file, EntityType, SplitSpec};
use playrank::labeling::WeightingKind;
use playrank::model::Hyperparameters;
use playrank::pipeline::{train_pipeline, PipelineConfig, PipelineOutput};
use playrank::synthgen::{generate, SynthConfig};
use playrank::trainer::{Optimizer, TrainConfig};
use playrank::vocab::EntityTypeTable;
use playrank::Model;

#[derive(Parser)]
#[command(
    name = "playrank",
    version,
    about = "User-entity affinity embeddings from playback-duration logs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic playback log from planted factors
    Synth(SynthArgs),
    /// Split a playback log causally into train/dev/test files
    Split(SplitArgs),
    /// Train an affinity model from a playback log
    Train(TrainArgs),
    /// Evaluate a trained model on a test log
    Evaluate(EvaluateArgs),
    /// Dump a model's vocabularies as identifier<TAB>index text
    ExportVocab(ExportVocabArgs),
}

fn parse_weighting(s: &str) -> Result<WeightingKind, String> {
    s.parse()
        .map_err(|e: playrank::labeling::ParseWeightingError| e.to_string())
}

fn parse_optimizer(s: &str) -> Result<Optimizer, String> {
    s.parse()
        .map_err(|e: playrank::trainer::ParseOptimizerError| e.to_string())
}

#[derive(clap::Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 1000)]
    users: usize,
    #[arg(long, default_value_t = 500)]
    entities: usize,
    /// Rank of the planted factors
    #[arg(long, default_value_t = 8)]
    rank: usize,
    /// Probability of a wrong resolution (negative affinity)
    #[arg(long, default_value_t = 0.2)]
    neg_rate: f64,
    /// Probability of a near-threshold duration override
    #[arg(long, default_value_t = 0.0)]
    distraction_rate: f64,
    #[arg(long, default_value_t = 20.0)]
    requests_mean: f64,
    #[arg(long, default_value_t = 60)]
    candidate_pool: usize,
    #[arg(long, default_value_t = 3)]
    confusion_set: usize,
    /// Log-normal sigma of the duration noise
    #[arg(long, default_value_t = 0.25)]
    noise: f64,
    #[arg(long, default_value_t = 3.0)]
    sharpness: f64,
    #[arg(long, default_value_t = 10)]
    days: u32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Entity-type mix, e.g. song=0.6,album=0.2,station=0.2
    #[arg(long, default_value = "song=0.6,album=0.2,station=0.2")]
    type_fractions: String,
    /// Threshold table file (type<TAB>seconds); music defaults when absent
    #[arg(long)]
    thresholds: Option<PathBuf>,
    /// Output log path
    #[arg(long)]
    out: PathBuf,
    /// Where to store the planted factors in the model format
    #[arg(long)]
    truth_out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct SplitArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    dev_day: u32,
    #[arg(long)]
    test_day: u32,
    /// Abort on the first malformed line instead of counting and skipping
    #[arg(long)]
    strict: bool,
    #[arg(long)]
    train_out: PathBuf,
    #[arg(long)]
    dev_out: PathBuf,
    #[arg(long)]
    test_out: PathBuf,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    dev_day: u32,
    #[arg(long)]
    test_day: u32,
    #[arg(long)]
    strict: bool,
    /// Identifiers seen fewer times than this fold into UNK
    #[arg(long, default_value_t = 5)]
    min_count: usize,
    /// Embedding dimension
    #[arg(long, default_value_t = 50)]
    k: usize,
    /// Learning rate
    #[arg(long, default_value_t = 0.2)]
    eta: f64,
    /// Regularization strength
    #[arg(long, default_value_t = 0.005)]
    lambda: f64,
    /// Training triples per observation
    #[arg(long, default_value_t = 3)]
    negatives_per_obs: usize,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    init_scale: f64,
    #[arg(long, default_value = "convex-quad", value_parser = parse_weighting)]
    weighting: WeightingKind,
    #[arg(long, default_value = "adagrad", value_parser = parse_optimizer)]
    optimizer: Optimizer,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Window size for bounded-memory shuffling; 0 keeps stream order
    #[arg(long, default_value_t = 0)]
    shuffle_buffer: usize,
    /// Train on positive-affinity observations only
    #[arg(long)]
    positives_only: bool,
    /// Threshold table file (type<TAB>seconds); music defaults when absent
    #[arg(long)]
    thresholds: Option<PathBuf>,
    #[arg(long)]
    model_out: PathBuf,
    /// Machine-readable training summary (name<TAB>value<TAB>count lines)
    #[arg(long)]
    summary_out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Threshold multipliers for label re-binarization
    #[arg(long, value_delimiter = ',', default_value = "1,5")]
    auc_multipliers: Vec<f64>,
    /// Also compute per-entity correlations
    #[arg(long)]
    per_entity: bool,
    #[arg(long, default_value_t = 10)]
    per_entity_min_count: usize,
    #[arg(long, default_value_t = 0.01)]
    per_entity_alpha: f64,
    /// Also split the test set by (user, entity) pairs seen in training
    #[arg(long, requires = "train")]
    seen_unseen: bool,
    /// Training log for the seen/unseen membership
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    strict: bool,
    /// Machine-readable summary (name<TAB>value<TAB>count lines)
    #[arg(long)]
    summary_out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct ExportVocabArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    users_out: PathBuf,
    #[arg(long)]
    entities_out: PathBuf,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth(args) => synth(args),
        Command::Split(args) => split(args),
        Command::Train(args) => train(args),
        Command::Evaluate(args) => evaluate_cmd(args),
        Command::ExportVocab(args) => export_vocab(args),
    }
}

fn load_thresholds(path: &Option<PathBuf>) -> Result<EntityTypeTable> {
    match path {
        Some(path) => EntityTypeTable::load_tsv(
            File::open(path).with_context(|| format!("opening {}", path.display()))?,
        )
        .with_context(|| format!("parsing threshold table {}", path.display())),
        None => Ok(EntityTypeTable::music_defaults()),
    }
}

fn parse_fractions(spec: &str) -> Result<Vec<(EntityType, f64)>> {
    spec.split(',')
        .map(|part| {
            let (ty, fraction) = part
                .split_once('=')
                .with_context(|| format!("expected type=fraction, got {part:?}"))?;
            let fraction: f64 = fraction
                .trim()
                .parse()
                .with_context(|| format!("bad fraction in {part:?}"))?;
            Ok((EntityType::new(ty), fraction))
        })
        .collect()
}

fn synth(args: SynthArgs) -> Result<()> {
    let config = SynthConfig {
        users: args.users,
        entities: args.entities,
        true_rank: args.rank,
        type_fractions: parse_fractions(&args.type_fractions)?,
        thresholds: load_thresholds(&args.thresholds)?,
        requests_per_user_mean: args.requests_mean,
        candidate_pool: args.candidate_pool,
        negative_rate: args.neg_rate,
        confusion_set: args.confusion_set,
        distraction_rate: args.distraction_rate,
        duration_noise: args.noise,
        duration_sharpness: args.sharpness,
        days: args.days,
        seed: args.seed,
    };
    let output = generate::<playrank::Factor>(&config)?;
    write_log_file(&args.out, &output.observations)
        .with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "wrote {} observations for {} users x {} entities to {}",
        output.observations.len(),
        args.users,
        args.entities,
        args.out.display()
    );
    if let Some(truth_out) = &args.truth_out {
        output
            .truth
            .save(truth_out)
            .with_context(|| format!("writing {}", truth_out.display()))?;
        println!("wrote planted factors to {}", truth_out.display());
    }
    Ok(())
}

fn split(args: SplitArgs) -> Result<()> {
    let log = read_log(&args.input, args.strict)
        .with_context(|| format!("reading {}", args.input.display()))?;
    if log.rejected > 0 {
        println!("skipped {} malformed lines", log.rejected);
    }
    let split = causal_split(
        log.observations,
        SplitSpec {
            dev_day: args.dev_day,
            test_day: args.test_day,
        },
    )?;
    write_log_file(&args.train_out, &split.train)?;
    write_log_file(&args.dev_out, &split.dev)?;
    write_log_file(&args.test_out, &split.test)?;
    println!(
        "train {} | dev {} | test {} | discarded {}",
        split.train.len(),
        split.dev.len(),
        split.test.len(),
        split.discarded
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let log = read_log(&args.input, args.strict)
        .with_context(|| format!("reading {}", args.input.display()))?;
    if log.rejected > 0 {
        println!("skipped {} malformed lines", log.rejected);
    }
    let table = load_thresholds(&args.thresholds)?;
    let config = PipelineConfig {
        split: SplitSpec {
            dev_day: args.dev_day,
            test_day: args.test_day,
        },
        min_count: args.min_count,
        weighting: args.weighting,
        positives_only: args.positives_only,
        train: TrainConfig {
            hp: Hyperparameters {
                k: args.k,
                eta: args.eta,
                lambda: args.lambda,
                negatives_per_obs: args.negatives_per_obs,
                epochs: args.epochs,
                init_scale: args.init_scale,
            },
            optimizer: args.optimizer,
            workers: args.workers,
            seed: args.seed,
            shuffle_buffer: args.shuffle_buffer,
        },
    };
    let output: PipelineOutput<playrank::Factor> =
        train_pipeline(log.observations, table, &config)?;

    println!(
        "trained on {} observations ({} users, {} entities; dev {}, test {}, discarded {})",
        output.train_rows,
        output.model.user_vocab.len(),
        output.model.entity_vocab.len(),
        output.dev.len(),
        output.test.len(),
        output.discarded
    );
    println!(
        "UNK resolution fractions: user {:.4}, entity {:.4}, either {:.4}",
        output.unk.user_fraction, output.unk.entity_fraction, output.unk.either_fraction
    );
    for (epoch, (loss, triples)) in output
        .report
        .epoch_mean_loss
        .iter()
        .zip(&output.report.epoch_triples)
        .enumerate()
    {
        println!(
            "epoch {}/{}: mean loss {loss:.6} over {triples} triples",
            epoch + 1,
            args.epochs
        );
    }
    println!("wall time: {:.2}s", output.report.wall_time_secs);

    output
        .model
        .save(&args.model_out)
        .with_context(|| format!("writing {}", args.model_out.display()))?;
    println!("wrote model to {}", args.model_out.display());

    if let Some(summary_out) = &args.summary_out {
        let mut writer = BufWriter::new(File::create(summary_out)?);
        output.report.write_tsv(&mut writer)?;
        writeln!(
            writer,
            "train_rows\t{}\t{}",
            output.train_rows, output.train_rows
        )?;
        writeln!(
            writer,
            "unk_user_fraction\t{}\t{}",
            output.unk.user_fraction, output.train_rows
        )?;
        writeln!(
            writer,
            "unk_entity_fraction\t{}\t{}",
            output.unk.entity_fraction, output.train_rows
        )?;
        writeln!(
            writer,
            "unk_either_fraction\t{}\t{}",
            output.unk.either_fraction, output.train_rows
        )?;
        println!("wrote training summary to {}", summary_out.display());
    }
    Ok(())
}

fn print_report_table(report: &EvalReport, heading: &str) {
    println!();
    println!("{heading}");
    println!("{:<28} {:>14} {:>10}", "metric", "value", "n");
    let corr_row = |name: &str, cell: &Result<playrank::eval::CorrCell, _>| match cell {
        Ok(c) => {
            println!("{:<28} {:>14.6} {:>10}", name, c.rho, c.n);
            println!(
                "{:<28} {:>14.6} {:>10}",
                format!("{name}_p"),
                c.p_value,
                c.n
            );
        }
        Err(reason) => println!("{:<28} (skipped: {reason})", name),
    };
    corr_row("rho", &report.rho);
    corr_row("rho_normalized", &report.rho_normalized);
    for (ty, cell) in &report.rho_per_type {
        corr_row(&format!("rho_{ty}"), cell);
    }
    for (multiplier, cell) in &report.auc_at {
        let name = format!("auc_{multiplier}T");
        match cell {
            Ok(a) => println!(
                "{:<28} {:>14.6} {:>10}",
                name,
                a.value,
                a.positives + a.negatives
            ),
            Err(reason) => println!("{:<28} (skipped: {reason})", name),
        }
    }
    println!("{:<28} {:>14} {:>10}", "test_rows", "", report.n);
}

fn evaluate_cmd(args: EvaluateArgs) -> Result<()> {
    let model = Model::load(&args.model)
        .with_context(|| format!("loading model {}", args.model.display()))?;
    let test = read_log(&args.test, args.strict)
        .with_context(|| format!("reading {}", args.test.display()))?;
    if test.rejected > 0 {
        println!("skipped {} malformed lines", test.rejected);
    }
    let test = test.observations;

    let report = evaluate(&model, &test, &model.type_table, &args.auc_multipliers)?;
    print_report_table(&report, "overall");
    let mut summary = Vec::new();
    report.write_tsv(&mut summary, "")?;

    if args.per_entity {
        let pe = per_entity(
            &model,
            &test,
            args.per_entity_min_count,
            args.per_entity_alpha,
        );
        println!();
        println!(
            "per-entity: {} included, {} excluded (count <= {} or p >= {})",
            pe.entities.len(),
            pe.excluded,
            args.per_entity_min_count,
            args.per_entity_alpha
        );
        for (ty, buckets) in &pe.histograms {
            let populated: Vec<String> = buckets
                .iter()
                .enumerate()
                .filter(|(_, &count)| count > 0)
                .map(|(b, &count)| {
                    format!(
                        "[{:.2},{:.2}): {count}",
                        -1.0 + b as f64 * 0.05,
                        -0.95 + b as f64 * 0.05
                    )
                })
                .collect();
            println!("rho({ty}) histogram: {}", populated.join("  "));
        }
        write_per_entity_tsv(&mut summary, &pe)?;
    }

    if args.seen_unseen {
        let train_path = args.train.as_ref().expect("clap enforces --train");
        let train = read_log(train_path, args.strict)
            .with_context(|| format!("reading {}", train_path.display()))?
            .observations;
        let partition = seen_unseen_split(&train, &test, &model.user_vocab, &model.entity_vocab);
        let unk_fraction = partition.unk_involved as f64 / test.len().max(1) as f64;
        println!();
        println!(
            "seen/unseen: {} seen, {} unseen, UNK-involved fraction {:.4}",
            partition.seen.len(),
            partition.unseen.len(),
            unk_fraction
        );
        writeln!(
            summary,
            "seen_rows\t{}\t{}",
            partition.seen.len(),
            partition.seen.len()
        )?;
        writeln!(
            summary,
            "unseen_rows\t{}\t{}",
            partition.unseen.len(),
            partition.unseen.len()
        )?;
        writeln!(
            summary,
            "unk_involved_fraction\t{}\t{}",
            unk_fraction,
            test.len()
        )?;
        for (subset, prefix) in [(&partition.seen, "seen_"), (&partition.unseen, "unseen_")] {
            if subset.is_empty() {
                println!("{}subset empty; metrics skipped", prefix);
                writeln!(summary, "# skip\t{prefix}*\tempty subset")?;
                continue;
            }
            let sub_report = evaluate(&model, subset, &model.type_table, &args.auc_multipliers)?;
            print_report_table(&sub_report, prefix.trim_end_matches('_'));
            sub_report.write_tsv(&mut summary, prefix)?;
        }
    }

    if let Some(summary_out) = &args.summary_out {
        std::fs::write(summary_out, &summary)
            .with_context(|| format!("writing {}", summary_out.display()))?;
        println!();
        println!("wrote summary to {}", summary_out.display());
    }
    Ok(())
}

fn export_vocab(args: ExportVocabArgs) -> Result<()> {
    let model = Model::load(&args.model)
        .with_context(|| format!("loading model {}", args.model.display()))?;
    model
        .user_vocab
        .save_tsv(BufWriter::new(File::create(&args.users_out)?))?;
    model
        .entity_vocab
        .save_tsv(BufWriter::new(File::create(&args.entities_out)?))?;
    println!(
        "wrote {} user ids to {} and {} entity ids to {}",
        model.user_vocab.len(),
        args.users_out.display(),
        model.entity_vocab.len(),
        args.entities_out.display()
    );
    Ok(())
}
