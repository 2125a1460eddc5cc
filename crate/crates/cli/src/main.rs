use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use crossclust::config::{extract, field_names, parse_key_values, reject_unknown, KeyValues};
use crossclust::data::{generate, read_dataset, read_labels, write_dataset, SynthConfig};
use crossclust::metrics::{evaluate_labels, uniformity};
use crossclust::numerics::{softmax_columns, Matrix, SeededRng};
use crossclust::pseudo_label::{read_label_dump, write_label_dump};
use crossclust::sinkhorn::{round_to_labels, solve_balanced, TransportConfig};
use crossclust::trainer::{
    finetune_from, load_branches, pretrain, save_branches, write_history_csv, Ablation, FinetuneOptions,
    TrainConfig, TrainData,
};

const PRETRAINED: &str = "pretrained.ckpt";
const FINETUNED: &str = "finetuned.ckpt";

#[derive(Parser)]
#[command(name = "crossclust", version, about = "Two-branch collaborative clustering on synthetic domains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic source/target dataset.
    GenerateData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain both branches with their base losses.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finetune a pretrained checkpoint.
    Finetune {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to `<out>/pretrained.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "full")]
        ablation: AblationArg,
        #[arg(long, value_enum, default_value = "on")]
        balance: Switch,
    },
    /// Score one column of a label dump against ground truth.
    Evaluate {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Label column (0 = domain-shared branch, 1 = target-specific branch).
        #[arg(long, default_value_t = 0)]
        branch: usize,
        /// Number of clusters; defaults to the largest predicted label plus one.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Balance random predictions with the transport solver.
    SinkhornDemo {
        #[arg(long, default_value_t = 8)]
        k: usize,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10.0)]
        xi: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    Bm,
    Ocm,
    Full,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Bm => Ablation::Bm,
            AblationArg::Ocm => Ablation::Ocm,
            AblationArg::Full => Ablation::Full,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenerateData { config, out } => generate_data(config.as_deref(), &out),
        Command::Pretrain { config, data, out } => run_pretrain(config.as_deref(), &data, &out),
        Command::Finetune {
            config,
            data,
            checkpoint,
            out,
            ablation,
            balance,
        } => {
            let opts = FinetuneOptions {
                ablation: ablation.into(),
                balance: matches!(balance, Switch::On),
            };
            let checkpoint = checkpoint.unwrap_or_else(|| out.join(PRETRAINED));
            run_finetune(config.as_deref(), &data, &checkpoint, &out, opts)
        }
        Command::Evaluate { labels, truth, branch, k } => run_evaluate(&labels, &truth, branch, k),
        Command::SinkhornDemo { k, n, seed, xi } => sinkhorn_demo(k, n, seed, xi),
    }
}

/// One file may carry data and training keys; anything else is an error.
fn load_config(path: Option<&Path>) -> Result<KeyValues> {
    let Some(path) = path else {
        return Ok(KeyValues::new());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let kv = parse_key_values(&text)?;
    reject_unknown(&kv, &[field_names::<SynthConfig>(), field_names::<TrainConfig>()])?;
    Ok(kv)
}

fn load_data(dir: &Path) -> Result<TrainData<f64>> {
    let bundle = read_dataset(dir).with_context(|| format!("reading dataset in {}", dir.display()))?;
    Ok(TrainData::from_bundle(&bundle)?)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn generate_data(config: Option<&Path>, out: &Path) -> Result<()> {
    let synth: SynthConfig = extract(&load_config(config)?)?;
    let bundle = generate(&synth)?;
    write_dataset(out, &bundle)?;
    println!(
        "wrote {} source and {} target samples to {}",
        bundle.num_source(),
        bundle.num_target(),
        out.display()
    );
    Ok(())
}

fn run_pretrain(config: Option<&Path>, data_dir: &Path, out: &Path) -> Result<()> {
    let cfg: TrainConfig = extract(&load_config(config)?)?;
    let data = load_data(data_dir)?;
    fs::create_dir_all(out)?;
    let (states, history) = pretrain(&data, &cfg)?;
    let mut w = create(&out.join(PRETRAINED))?;
    save_branches(&states, &mut w)?;
    w.flush()?;
    let mut h = create(&out.join("pretrain_history.csv"))?;
    write_history_csv(&mut h, &history)?;
    h.flush()?;
    println!("pretrained checkpoint written to {}", out.join(PRETRAINED).display());
    Ok(())
}

fn run_finetune(
    config: Option<&Path>,
    data_dir: &Path,
    checkpoint: &Path,
    out: &Path,
    opts: FinetuneOptions,
) -> Result<()> {
    let cfg: TrainConfig = extract(&load_config(config)?)?;
    let data = load_data(data_dir)?;
    let mut r = BufReader::new(File::open(checkpoint).with_context(|| format!("opening {}", checkpoint.display()))?);
    let pretrained = load_branches(&mut r, data.num_target())?;

    let label_dir = out.join("labels");
    fs::create_dir_all(&label_dir)?;
    let mut refresh = 0usize;
    let (states, report) = finetune_from(&pretrained, &data, &cfg, opts, |epoch, b0, b1| {
        refresh += 1;
        let path = label_dir.join(format!("refresh_{refresh:05}_epoch_{epoch:04}.txt"));
        let mut w = BufWriter::new(File::create(path)?);
        write_label_dump(&mut w, b0, b1)?;
        w.flush()?;
        Ok(())
    })?;

    let mut w = create(&out.join(FINETUNED))?;
    save_branches(&states, &mut w)?;
    w.flush()?;
    let mut h = create(&out.join("history.csv"))?;
    write_history_csv(&mut h, &report.history)?;
    h.flush()?;

    let metrics = if report.final_metrics.len() == 2 {
        json!({
            "ablation": report.ablation,
            "balance": report.balance,
            "seed": report.seed,
            "branches": report.final_metrics,
            "mean_acc": report.mean_acc(),
            "branch_gap": report.branch_gap(),
        })
    } else {
        json!({ "ablation": report.ablation, "balance": report.balance, "seed": report.seed })
    };
    let text = serde_json::to_string_pretty(&metrics)?;
    fs::write(out.join("metrics.json"), &text)?;
    println!("{text}");
    Ok(())
}

fn run_evaluate(labels: &Path, truth: &Path, branch: usize, k: Option<usize>) -> Result<()> {
    let columns = read_label_dump(BufReader::new(
        File::open(labels).with_context(|| format!("opening {}", labels.display()))?,
    ))?;
    let Some(pred) = columns.get(branch) else {
        bail!("label dump has {} columns, asked for column {branch}", columns.len());
    };
    let truth = read_labels(truth)?;
    let k = k.unwrap_or_else(|| pred.iter().max().map_or(1, |m| m + 1));
    if let Some(&l) = pred.iter().find(|&&l| l >= k) {
        bail!("label {l} is out of range for k = {k}");
    }
    let record = evaluate_labels(pred, &truth, k)?;
    println!("{}", serde_json::to_string(&record)?);
    Ok(())
}

fn sinkhorn_demo(k: usize, n: usize, seed: u64, xi: f64) -> Result<()> {
    let mut rng = SeededRng::new(seed);
    let logits = Matrix::from_fn(k, n, |_, _| rng.normal());
    let p_hat = softmax_columns(&logits);
    let cfg = TransportConfig { xi, ..TransportConfig::default() };
    let q = solve_balanced(&p_hat, &cfg)?;
    let labels = round_to_labels(&q, true);
    let mut sizes = vec![0usize; k];
    labels.iter().for_each(|&l| sizes[l] += 1);
    let out = json!({
        "k": k,
        "n": n,
        "seed": seed,
        "iterations": q.iters_used,
        "converged": q.converged,
        "row_marginal_err": q.row_marginal_err,
        "col_marginal_err": q.col_marginal_err,
        "cluster_sizes": sizes,
        "uniformity": uniformity(&labels, k),
        "max_uniformity": (k as f64).ln(),
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}
