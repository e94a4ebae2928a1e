use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use raid::attack::{evaluate_attack, AttackConfig, AttackDataset, AttackReport, ClassifierConfig};
use raid::checkpoint;
use raid::data::{self, AttributeScheme, Dataset, KCore, RatingFormat};
use raid::eval::{evaluate_model, RecReport, DEFAULT_CUTOFFS};
use raid::model::EmbeddingModel;
use raid::synth::{self, SynthConfig};
use raid::train::{dp_perturb, sub_seed, train_raid_from, EpochLog, TrainConfig};
use raid::RaidError;

const ATTACK_SEED_OFFSET: u64 = 1;
const EVAL_SEED_OFFSET: u64 = 2;
const DP_STREAM: u64 = 21;

const RUN_FILE: &str = "run.json";
const CHECKPOINT_FILE: &str = "checkpoint.bin";
const LOG_FILE: &str = "train_log.csv";
const ATTACK_FILE: &str = "attack.json";
const EVAL_FILE: &str = "eval.json";

#[derive(Parser)]
#[command(name = "raid", version, about = "Train recommenders that resist attribute inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset in the MovieLens-1M file layout.
    Synth(SynthArgs),
    /// Parse, filter and split a ratings file into a dataset directory.
    Ingest(IngestArgs),
    /// Train a model into a run directory.
    Train(TrainArgs),
    /// Cross-validated attribute-inference attack on a run's user embeddings.
    Attack(AttackArgs),
    /// Leave-one-out HR and NDCG of a run.
    Eval(EvalArgs),
    /// Merge run reports into Markdown and CSV tables.
    Report(ReportArgs),
}

#[derive(Args, Serialize)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 600)]
    users: usize,
    #[arg(long, default_value_t = 300)]
    items: usize,
    #[arg(long, default_value_t = 25)]
    per_user: usize,
    #[arg(long, default_value_t = 1.5)]
    strength: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum FormatArg {
    Dat,
    Csv,
}

#[derive(Clone, Copy, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum AttributeArg {
    Gender,
    Age,
}

#[derive(Args, Serialize)]
struct IngestArgs {
    #[arg(long)]
    ratings: PathBuf,
    /// `user::gender::age::occupation::zip` attribute file.
    #[arg(long)]
    users: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::Dat)]
    format: FormatArg,
    #[arg(long, value_enum, default_value_t = AttributeArg::Gender)]
    attribute: AttributeArg,
    #[arg(long, default_value_t = 5)]
    min_user: usize,
    #[arg(long, default_value_t = 5)]
    min_item: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum DefenseArg {
    None,
    Raid,
    Dp,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = DefenseArg::None)]
    defense: DefenseArg,
    /// Label used in combined reports; defaults to the defense.
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    xi: Option<usize>,
    /// Noise scale for `--defense dp`.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    e1: Option<usize>,
    #[arg(long)]
    e2: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    support_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ClassifierArg {
    Logreg,
    Mlp,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long, value_enum, default_value_t = ClassifierArg::Logreg)]
    classifier: ClassifierArg,
    /// Global seed; the attack uses seed + 1.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    /// Global seed, recorded as seed + 2; ranking itself is deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories holding attack and eval reports.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct RunRecord {
    name: String,
    dataset: PathBuf,
    defense: DefenseArg,
    seed: u64,
    sigma: Option<f64>,
    train: TrainConfig,
    epochs_completed: usize,
    skipped_negative_users: usize,
}

#[derive(Serialize, Deserialize)]
struct AttackOutput {
    run: PathBuf,
    global_seed: u64,
    config: AttackConfig,
    report: AttackReport,
}

#[derive(Serialize, Deserialize)]
struct EvalOutput {
    run: PathBuf,
    global_seed: u64,
    seed: u64,
    cutoffs: Vec<usize>,
    report: RecReport,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, RaidError> {
    let text = fs::read_to_string(path).map_err(|source| RaidError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn write_text(path: &Path, text: &str) -> Result<(), RaidError> {
    fs::write(path, text).map_err(|source| RaidError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RaidError> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn create_dir(dir: &Path) -> Result<(), RaidError> {
    fs::create_dir_all(dir).map_err(|source| RaidError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn cmd_synth(a: &SynthArgs) -> Result<(), RaidError> {
    let cfg = SynthConfig {
        num_users: a.users,
        num_items: a.items,
        interactions_per_user: a.per_user,
        attribute_strength: a.strength,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let d = synth::generate(&cfg)?;
    synth::write_movielens(&d, &a.out)?;
    write_json(&a.out.join("synth.json"), &cfg)?;
    info!("wrote {} ratings for {} users to {}", d.ratings.len(), d.users.len(), a.out.display());
    Ok(())
}

fn cmd_ingest(a: &IngestArgs) -> Result<(), RaidError> {
    let format = match a.format {
        FormatArg::Dat => RatingFormat::MovielensDat,
        FormatArg::Csv => RatingFormat::Csv,
    };
    let scheme = match a.attribute {
        AttributeArg::Gender => AttributeScheme::Gender2,
        AttributeArg::Age => AttributeScheme::Age3,
    };
    let ratings = data::parse_ratings(&a.ratings, format)?;
    let users = a.users.as_ref().map(data::parse_users).transpose()?;
    let ds = data::ingest(
        &ratings,
        users.as_deref().map(|u| (u, scheme)),
        KCore {
            min_user: a.min_user,
            min_item: a.min_item,
        },
        a.seed,
    )?;
    ds.save(&a.out)?;
    write_json(&a.out.join("ingest.json"), a)?;
    let m = &ds.manifest;
    info!(
        "{} users, {} items, {} interactions ({} train)",
        m.num_users, m.num_items, m.num_interactions, m.num_train
    );
    Ok(())
}

fn train_config(a: &TrainArgs) -> TrainConfig {
    let mut c = TrainConfig {
        seed: a.seed,
        ..TrainConfig::default()
    };
    if let Some(v) = a.eta {
        c.eta = v;
    }
    if let Some(v) = a.tau {
        c.barycenter.tau = v;
    }
    if let Some(v) = a.xi {
        c.xi = v;
    }
    if let Some(v) = a.mu {
        c.mu = v;
    }
    if let Some(v) = a.e1 {
        c.e1 = v;
    }
    if let Some(v) = a.e2 {
        c.e2 = v;
    }
    if let Some(v) = a.dim {
        c.embedding_dim = v;
    }
    if let Some(v) = a.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = a.support_size {
        c.barycenter.support_size = v;
    }
    if a.defense != DefenseArg::Raid {
        c.eta = 0.0;
    }
    c
}

fn write_log(path: &Path, log: &[EpochLog]) -> Result<(), RaidError> {
    let mut text = String::from("epoch,phase,ce_loss,defense_loss,barycenter_refreshed,couplings_converged\n");
    let opt = |x: Option<f64>| x.map(|v| format!("{v:e}")).unwrap_or_default();
    for e in log {
        let phase = serde_json::to_value(e.phase)?;
        writeln!(
            text,
            "{},{},{},{},{},{}",
            e.epoch,
            phase.as_str().unwrap_or_default(),
            opt(e.ce_loss),
            opt(e.defense_loss),
            e.barycenter_refreshed,
            e.couplings_converged
        )
        .expect("string write");
    }
    write_text(path, &text)
}

fn cmd_train(a: &TrainArgs) -> Result<(), RaidError> {
    if a.defense == DefenseArg::Dp && a.sigma.is_none() {
        return Err(RaidError::InvalidInput("--defense dp needs --sigma".into()));
    }
    let config = train_config(a);
    config.validate()?;
    let ds = Dataset::load(&a.data)?;
    let labels = ds
        .labels
        .clone()
        .ok_or_else(|| RaidError::InvalidInput("dataset has no attribute labels".into()))?;
    create_dir(&a.out)?;
    let ckpt = a.out.join(CHECKPOINT_FILE);
    let init = EmbeddingModel::gaussian(
        ds.num_users(),
        ds.num_items(),
        config.embedding_dim,
        config.init_std,
        config.seed,
    )?;
    checkpoint::save(&init, &ckpt)?;

    let mut log = Vec::new();
    let mut save_err = None;
    let result = train_raid_from(init, &ds.train_data(), &labels, &config, |entry, model| {
        log.push(entry.clone());
        if let Err(e) = checkpoint::save(model, &ckpt) {
            save_err.get_or_insert(e);
        }
    });
    write_log(&a.out.join(LOG_FILE), &log)?;
    if let Some(e) = save_err {
        return Err(e);
    }
    let outcome = result?;

    if a.defense == DefenseArg::Dp {
        let sigma = a.sigma.expect("checked above");
        let noisy = dp_perturb(&outcome.model, sigma, sub_seed(config.seed, DP_STREAM, 0))?;
        checkpoint::save(&noisy, &ckpt)?;
    }
    let record = RunRecord {
        name: a.name.clone().unwrap_or_else(|| default_name(a.defense).into()),
        dataset: a.data.clone(),
        defense: a.defense,
        seed: a.seed,
        sigma: a.sigma.filter(|_| a.defense == DefenseArg::Dp),
        train: config,
        epochs_completed: outcome.log.len(),
        skipped_negative_users: outcome.skipped_negative_users,
    };
    write_json(&a.out.join(RUN_FILE), &record)
}

fn default_name(d: DefenseArg) -> &'static str {
    match d {
        DefenseArg::None => "Original",
        DefenseArg::Raid => "RAID",
        DefenseArg::Dp => "DP",
    }
}

fn load_run(run: &Path) -> Result<(RunRecord, Dataset, EmbeddingModel), RaidError> {
    let record: RunRecord = read_json(&run.join(RUN_FILE))?;
    let model = checkpoint::load(run.join(CHECKPOINT_FILE))?;
    let ds = Dataset::load(&record.dataset)?;
    if model.num_users() != ds.num_users() || model.num_items() != ds.num_items() {
        return Err(RaidError::InvalidInput("checkpoint does not match its dataset".into()));
    }
    Ok((record, ds, model))
}

fn cmd_attack(a: &AttackArgs) -> Result<(), RaidError> {
    let (_, ds, model) = load_run(&a.run)?;
    let labels = ds
        .labels
        .as_ref()
        .ok_or_else(|| RaidError::InvalidInput("dataset has no attribute labels".into()))?;
    let seed = a.seed + ATTACK_SEED_OFFSET;
    let config = AttackConfig {
        classifier: match a.classifier {
            ClassifierArg::Logreg => ClassifierConfig::logreg(),
            ClassifierArg::Mlp => ClassifierConfig::mlp(),
        },
        seed,
        ..AttackConfig::default()
    };
    let report = evaluate_attack(&AttackDataset::from_model(&model, labels)?, &config)?;
    info!("attack: F1 {:.4}, BAcc {:.4}", report.f1_micro, report.bacc);
    write_json(
        &a.run.join(ATTACK_FILE),
        &AttackOutput {
            run: a.run.clone(),
            global_seed: a.seed,
            config,
            report,
        },
    )
}

fn cmd_eval(a: &EvalArgs) -> Result<(), RaidError> {
    let (_, ds, model) = load_run(&a.run)?;
    let report = evaluate_model(&model, &ds.eval_cases(), &DEFAULT_CUTOFFS)?;
    info!("eval: HR@10 {:.4}, NDCG@10 {:.4}", report.hr[&10], report.ndcg[&10]);
    write_json(
        &a.run.join(EVAL_FILE),
        &EvalOutput {
            run: a.run.clone(),
            global_seed: a.seed,
            seed: a.seed + EVAL_SEED_OFFSET,
            cutoffs: DEFAULT_CUTOFFS.to_vec(),
            report,
        },
    )
}

struct Row {
    name: String,
    attack: Option<AttackReport>,
    rec: Option<RecReport>,
}

fn cmd_report(a: &ReportArgs) -> Result<(), RaidError> {
    let mut rows = Vec::new();
    for run in &a.runs {
        let record: RunRecord = read_json(&run.join(RUN_FILE))?;
        let attack = run.join(ATTACK_FILE);
        let eval = run.join(EVAL_FILE);
        rows.push(Row {
            name: record.name,
            attack: attack
                .is_file()
                .then(|| read_json::<AttackOutput>(&attack).map(|o| o.report))
                .transpose()?,
            rec: eval
                .is_file()
                .then(|| read_json::<EvalOutput>(&eval).map(|o| o.report))
                .transpose()?,
        });
    }
    rows.sort_by(|x, y| x.name.cmp(&y.name));

    let mut header = vec!["method".to_string(), "F1".into(), "BAcc".into()];
    for k in DEFAULT_CUTOFFS {
        header.push(format!("HR@{k}"));
    }
    for k in DEFAULT_CUTOFFS {
        header.push(format!("NDCG@{k}"));
    }
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut line = vec![
                r.name.clone(),
                cell(r.attack.as_ref().map(|a| a.f1_micro)),
                cell(r.attack.as_ref().map(|a| a.bacc)),
            ];
            for k in DEFAULT_CUTOFFS {
                line.push(cell(r.rec.as_ref().and_then(|x| x.hr.get(&k).copied())));
            }
            for k in DEFAULT_CUTOFFS {
                line.push(cell(r.rec.as_ref().and_then(|x| x.ndcg.get(&k).copied())));
            }
            line
        })
        .collect();

    create_dir(&a.out)?;
    let mut md = format!("| {} |\n|{}\n", header.join(" | "), "---|".repeat(header.len()));
    let mut csv = header.join(",") + "\n";
    for line in &table {
        md += &format!("| {} |\n", line.join(" | "));
        csv += &(line.join(",") + "\n");
    }
    write_text(&a.out.join("report.md"), &md)?;
    write_text(&a.out.join("report.csv"), &csv)?;
    print!("{md}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Ingest(a) => cmd_ingest(a),
        Command::Train(a) => cmd_train(a),
        Command::Attack(a) => cmd_attack(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                RaidError::NumericalAbort { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
