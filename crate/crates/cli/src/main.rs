use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use supportset::corpus::{generate_corpus, read_corpus, write_corpus, Corpus, CorpusSample, CorpusSpec};
use supportset::error::{Error, Result};
use supportset::evaluation::{entropy_summary, export_attention, RetrievalMetrics, RetrievalResult};
use supportset::objectives::Variant;
use supportset::trainer::{
    ablate, evaluate, load_checkpoint, save_checkpoint, split_indices, train_with, AblationGrid, AblationTable,
    RowStatus, TrainConfig,
};

const EXIT_USAGE: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

/// Support-set video-text training laboratory on synthetic corpora.
#[derive(Parser)]
#[command(name = "supportset", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    GenData(GenData),
    /// Train a model and write a checkpoint plus a JSON report.
    Train(Train),
    /// Retrieval metrics of a checkpoint on a corpus.
    Eval(Eval),
    /// Run a grid of training configurations.
    Ablate(Ablate),
    /// Dump the support weights a checkpoint assigns within one batch.
    ExportAttention(ExportAttention),
}

#[derive(Args)]
struct SeedArg {
    /// Overrides the seed from the spec or config file.
    #[arg(long, env = "SUPPORTSET_SEED")]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenData {
    /// JSON corpus spec; inline flags override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    video_len: Option<usize>,
    #[arg(long)]
    caption_len: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args)]
struct Train {
    /// JSON training config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Report path; defaults to the checkpoint path with `.report.json` appended.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    ks: Vec<usize>,
    /// Evaluate only the held-out split the checkpoint's config defines.
    #[arg(long)]
    heldout: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Ablate {
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Cells run concurrently.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    /// Base seed for grids that list no seeds.
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args)]
struct ExportAttention {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Which batch of the corpus, taken in file order.
    #[arg(long, default_value_t = 0)]
    batch_index: usize,
    /// Defaults to the checkpoint's training batch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Defaults to the checkpoint's variant.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    #[arg(long)]
    out: PathBuf,
    /// Also render a heatmap.
    #[arg(long)]
    png: Option<PathBuf>,
    /// Heatmap pixels per weight.
    #[arg(long, default_value_t = 16)]
    cell: usize,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    serde_json::from_value(serde_json::Value::String(s.to_lowercase()))
        .map_err(|_| format!("unknown variant {s:?}; expected none, identity, full, hybrid or cross"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::ExportAttention(a) => export_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { EXIT_USAGE } else { EXIT_RUNTIME })
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn gen_data(a: GenData) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => read_json(p)?,
        None => CorpusSpec::default(),
    };
    let overrides = [
        (a.classes, &mut spec.num_classes),
        (a.per_class, &mut spec.samples_per_class),
        (a.video_len, &mut spec.video_len),
        (a.caption_len, &mut spec.caption_len_max),
        (a.feature_dim, &mut spec.feature_dim),
        (a.vocab, &mut spec.vocab_size),
    ];
    for (flag, field) in overrides {
        if let Some(v) = flag {
            *field = v;
        }
    }
    if let Some(n) = a.noise {
        spec.intra_class_noise = n;
    }
    if let Some(s) = a.seed.seed {
        spec.seed = s;
    }
    let corpus = generate_corpus(&spec)?;
    write_corpus(&corpus, &a.out)?;
    println!(
        "wrote {} samples ({} classes, {} frames x {} features, vocab {}) to {}",
        corpus.len(),
        spec.num_classes,
        spec.video_len,
        spec.feature_dim,
        spec.vocab_size,
        a.out.display()
    );
    Ok(())
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    let corpus = read_corpus(path)?;
    corpus.validate()?;
    Ok(corpus)
}

fn train_cmd(a: Train) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let corpus = load_corpus(&a.corpus)?;
    let out = train_with(&cfg, &corpus, |e| {
        println!(
            "epoch {:>3}  steps {:>4}  contrast {:.4}  caption {:.4}  total {:.4}",
            e.epoch + 1,
            e.steps,
            e.loss.contrast,
            e.loss.caption,
            e.loss.total
        );
    })?;
    save_checkpoint(&a.out, &cfg, &out.model)?;
    let report_path = a.report.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".report.json");
        p.into()
    });
    write_json(&report_path, &out.report)?;
    if let Some(m) = &out.report.heldout {
        print_metrics("held-out", m);
    }
    println!("checkpoint {}", a.out.display());
    println!("report     {}", report_path.display());
    Ok(())
}

fn print_metrics(scope: &str, m: &RetrievalMetrics) {
    let line = |r: &RetrievalResult| {
        let recalls: Vec<String> = r.recall_at.iter().map(|(k, v)| format!("R@{k} {v:.3}")).collect();
        format!("{}  MedR {:.1}", recalls.join("  "), r.median_rank)
    };
    println!("{scope} text->video  {}", line(&m.text_to_video));
    println!("{scope} video->text  {}", line(&m.video_to_text));
}

fn eval_cmd(a: Eval) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let corpus = load_corpus(&a.corpus)?;
    let cfg = ck.config.clone();
    let model = ck.into_model()?;
    model.check_compatible(&corpus.header)?;
    let samples: Vec<&CorpusSample> = if a.heldout {
        let (_, held) = split_indices(&corpus, cfg.holdout_fraction, cfg.seed);
        held.iter().map(|&i| &corpus.samples[i]).collect()
    } else {
        corpus.samples.iter().collect()
    };
    if samples.is_empty() {
        return Err(Error::Input("no samples to evaluate".into()));
    }
    let metrics = evaluate(&model, &samples, &a.ks)?;
    print_metrics(if a.heldout { "held-out" } else { "corpus" }, &metrics);
    if let Some(p) = &a.out {
        write_json(p, &metrics)?;
    }
    Ok(())
}

fn ablate_cmd(a: Ablate) -> Result<()> {
    let mut grid = AblationGrid::load(&a.grid)?;
    if let Some(s) = a.seed.seed {
        grid.base.insert("seed".into(), s.into());
    }
    let corpus = load_corpus(&a.corpus)?;
    let table = ablate(&grid, &corpus, a.parallel);
    write_json(&a.out, &table)?;
    print_table(&table);
    Ok(())
}

fn print_table(table: &AblationTable) {
    println!("{:<28} {:>6}  {:>7} {:>7} {:>7} {:>7}", "cell", "seed", "R@1", "R@5", "R@10", "MedR");
    for row in &table.rows {
        match (&row.status, &row.metrics) {
            (RowStatus::Ok, Some(m)) => {
                let r = |k| m.t2v_recall(k).map_or("-".to_string(), |v| format!("{v:.3}"));
                let medr = m.text_to_video.as_ref().map_or("-".to_string(), |t| format!("{:.1}", t.median_rank));
                println!("{:<28} {:>6}  {:>7} {:>7} {:>7} {:>7}", row.label, row.seed, r(1), r(5), r(10), medr);
            }
            _ => println!("{:<28} {:>6}  error: {}", row.label, row.seed, row.error.as_deref().unwrap_or("unknown")),
        }
    }
}

fn export_cmd(a: ExportAttention) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let corpus = load_corpus(&a.corpus)?;
    let cfg = ck.config.clone();
    let model = ck.into_model()?;
    model.check_compatible(&corpus.header)?;
    let size = a.batch_size.unwrap_or(cfg.batch_size).min(corpus.len());
    if size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let batch: Vec<&CorpusSample> = corpus
        .samples
        .chunks(size)
        .nth(a.batch_index)
        .ok_or_else(|| {
            Error::Input(format!(
                "batch {} does not exist; the corpus has {} batches of {size}",
                a.batch_index,
                corpus.len().div_ceil(size)
            ))
        })?
        .iter()
        .collect();
    let variant = a.variant.unwrap_or(cfg.variant);
    let dump = export_attention(&model, &batch, variant, cfg.temperature, cfg.support_sim)?;
    dump.write_json(&a.out)?;
    if let Some(p) = &a.png {
        dump.write_png(p, a.cell)?;
    }
    let ent = entropy_summary(&dump);
    let support = if variant == Variant::Cross { dump.size() - 1 } else { dump.size() };
    println!(
        "{} samples, variant {}, row entropy mean {:.3} (min {:.3}, max {:.3}, uniform {:.3})",
        dump.size(),
        variant.label(),
        ent.mean,
        ent.min,
        ent.max,
        (support.max(1) as f64).ln()
    );
    println!("weights {}", a.out.display());
    Ok(())
}
