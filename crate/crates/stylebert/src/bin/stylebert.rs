//! Operator CLI: build assets, inspect characters, run masking statistics,
//! pretrain, evaluate and probe. Exit codes: 0 success, 2 usage or config
//! error, 3 runtime failure. Set `STYLEBERT_LOG=debug` for verbose logs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use stylebert::encoders::{encode_char, FeatureAlphabets, Vocab};
use stylebert::feature_tables::FeatureDictionary;
use stylebert::masking::{mask_statistics, MaskingStrategy, SynonymLexicon};
use stylebert::model::{load_checkpoint, save_checkpoint, Checkpoint};
use stylebert::trainer::{
    evaluate_mlm, pretrain, probe_feature_signal, EvalRecord, TrainConfig, TrainInputs,
};

#[derive(Parser)]
#[command(name = "stylebert", version, about = "Fusion-embedding MLM toolkit")]
struct Cli {
    /// JSON run config; explicit flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print the fully resolved config as JSON and exit.
    #[arg(long, global = true)]
    dump_config: bool,
    /// Master seed; overrides the config's train and masking seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads. 1 guarantees bit-exact reproducibility.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a character vocabulary from a corpus.
    BuildVocab {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        min_count: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print one character's dictionary record and encoded index sequences.
    InspectChar {
        #[arg(long = "char")]
        character: char,
    },
    /// Mask the whole corpus once and report realized rates.
    MaskStats {
        /// Override the configured strategy (CM, WWM, NGRAM, MAC).
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Run MLM pretraining; writes report and checkpoints to the out dir.
    Pretrain {
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from an earlier checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Masked-LM evaluation of a checkpoint on the corpus.
    EvalMlm {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Feature-signal probe: tone and radical accuracy, features vs word-only.
    Probe,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct PathsConfig {
    pinyin: PathBuf,
    wubi: PathBuf,
    chaizi: PathBuf,
    corpus: PathBuf,
    vocab: PathBuf,
    segments: Option<PathBuf>,
    lexicon: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            pinyin: "pinyin.tsv".into(),
            wubi: "wubi.tsv".into(),
            chaizi: "chaizi.tsv".into(),
            corpus: "corpus.txt".into(),
            vocab: "vocab.txt".into(),
            segments: None,
            lexicon: None,
            checkpoint: None,
            out_dir: "out".into(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    paths: PathsConfig,
    train: TrainConfig,
}

enum CliError {
    /// Bad flags, config, or missing/malformed inputs. Exit 2.
    Usage(String),
    /// Failure during compute or while writing outputs. Exit 3.
    Runtime(String),
}

type CliResult<T> = Result<T, CliError>;

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("STYLEBERT_LOG", "warn"),
    )
    .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut config = match &cli.config {
        None => RunConfig::default(),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| usage(format!("bad config {}: {e}", path.display())))?
        }
    };
    if let Some(seed) = cli.seed {
        config.train.seed = seed;
        config.train.masking.seed = seed;
    }
    Ok(config)
}

fn run(cli: Cli) -> CliResult<()> {
    let mut config = load_config(&cli)?;
    apply_overrides(&cli.command, &mut config)?;
    if cli.dump_config {
        println!("{}", serde_json::to_string_pretty(&config).map_err(runtime)?);
        return Ok(());
    }
    match &cli.command {
        Command::BuildVocab { min_count, .. } => build_vocab(&config, *min_count),
        Command::InspectChar { character } => inspect_char(&config, *character),
        Command::MaskStats { .. } => mask_stats(&config, cli.threads),
        Command::Pretrain { resume, .. } => run_pretrain(&config, cli.threads, resume.as_deref()),
        Command::EvalMlm { checkpoint } => eval_mlm(&config, cli.threads, checkpoint.as_deref()),
        Command::Probe => probe(&config),
    }
}

fn apply_overrides(command: &Command, config: &mut RunConfig) -> CliResult<()> {
    match command {
        Command::BuildVocab { corpus, out, .. } => {
            if let Some(c) = corpus {
                config.paths.corpus = c.clone();
            }
            if let Some(o) = out {
                config.paths.vocab = o.clone();
            }
        }
        Command::MaskStats { strategy: Some(s) } => {
            config.train.masking.strategy = match s.as_str() {
                "CM" => MaskingStrategy::CM,
                "WWM" => MaskingStrategy::WWM,
                "NGRAM" => MaskingStrategy::NGRAM,
                "MAC" => MaskingStrategy::MAC,
                other => return Err(usage(format!("unknown strategy {other}"))),
            };
        }
        Command::Pretrain { steps: Some(s), .. } => config.train.steps = *s,
        Command::EvalMlm { checkpoint: Some(c) } => {
            config.paths.checkpoint = Some(c.clone());
        }
        _ => {}
    }
    Ok(())
}

fn read_lines(path: &Path) -> CliResult<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    Ok(text.lines().map(|l| l.to_string()).filter(|l| !l.is_empty()).collect())
}

fn load_dict(paths: &PathsConfig) -> CliResult<(FeatureDictionary, FeatureAlphabets)> {
    let dict = FeatureDictionary::load(&paths.pinyin, &paths.wubi, &paths.chaizi)
        .map_err(usage)?;
    let alphabets = FeatureAlphabets::from_dictionary(&dict);
    Ok((dict, alphabets))
}

fn load_vocab(paths: &PathsConfig) -> CliResult<Vocab> {
    let text = std::fs::read_to_string(&paths.vocab)
        .map_err(|e| usage(format!("cannot read vocab {}: {e}", paths.vocab.display())))?;
    Vocab::parse(&text).map_err(usage)
}

fn load_segments(paths: &PathsConfig, lines: usize) -> CliResult<Option<Vec<Vec<usize>>>> {
    let Some(path) = &paths.segments else { return Ok(None) };
    let rows = read_lines(path)?;
    if rows.len() != lines {
        return Err(usage(format!(
            "segmentation {} has {} lines, corpus has {lines}",
            path.display(),
            rows.len()
        )));
    }
    Ok(Some(
        rows.iter()
            .map(|r| r.split(' ').filter(|w| !w.is_empty()).map(|w| w.chars().count()).collect())
            .collect(),
    ))
}

fn load_lexicon(paths: &PathsConfig) -> CliResult<Option<SynonymLexicon>> {
    match &paths.lexicon {
        None => Ok(None),
        Some(p) => Ok(Some(SynonymLexicon::load(p).map_err(usage)?)),
    }
}

fn ensure_out_dir(paths: &PathsConfig) -> CliResult<()> {
    std::fs::create_dir_all(&paths.out_dir)
        .map_err(|e| runtime(format!("cannot create {}: {e}", paths.out_dir.display())))
}

fn write_out(paths: &PathsConfig, name: &str, contents: &str) -> CliResult<PathBuf> {
    let path = paths.out_dir.join(name);
    std::fs::write(&path, contents)
        .map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

fn build_vocab(config: &RunConfig, min_count: u64) -> CliResult<()> {
    let lines = read_lines(&config.paths.corpus)?;
    let vocab = Vocab::build(&lines, min_count).map_err(usage)?;
    let out = &config.paths.vocab;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)
                .map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))?;
        }
    }
    std::fs::write(out, vocab.render())
        .map_err(|e| runtime(format!("cannot write {}: {e}", out.display())))?;
    let digest = vocab.digest();
    let digest_path = PathBuf::from(format!("{}.sha256", out.display()));
    std::fs::write(&digest_path, format!("{digest}\n"))
        .map_err(|e| runtime(format!("cannot write {}: {e}", digest_path.display())))?;
    println!("tokens={} digest={digest}", vocab.size());
    Ok(())
}

fn inspect_char(config: &RunConfig, character: char) -> CliResult<()> {
    let (dict, alphabets) = load_dict(&config.paths)?;
    let record = dict.lookup(character);
    println!("character {character}");
    match &record.pinyin {
        Some(p) => {
            let mut parts: Vec<String> = p.letters.iter().map(|c| c.to_string()).collect();
            parts.push(p.tone.to_string());
            println!("pinyin {}", parts.join(" "));
        }
        None => println!("pinyin -"),
    }
    match &record.wubi {
        Some(w) => println!(
            "wubi {}",
            w.keys.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ")
        ),
        None => println!("wubi -"),
    }
    match &record.chaizi {
        Some(c) => println!(
            "chaizi {}",
            c.radicals.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(" ")
        ),
        None => println!("chaizi -"),
    }
    let vocab = Vocab::parse(&(stylebert::encoders::SPECIAL_TOKENS.join("\n") + "\n"))
        .map_err(usage)?;
    let mut trunc = 0;
    let token = encode_char(
        character,
        &vocab,
        &dict,
        &alphabets,
        config.train.model.chaizi_capacity,
        &mut trunc,
    )
    .map_err(runtime)?;
    for (name, fs) in
        [("pinyin", &token.pinyin), ("wubi", &token.wubi), ("chaizi", &token.chaizi)]
    {
        println!("{name}_indices {:?} true_length {}", fs.indices, fs.true_length);
    }
    Ok(())
}

fn mask_stats(config: &RunConfig, threads: usize) -> CliResult<()> {
    config.train.validate().map_err(usage)?;
    let (dict, alphabets) = load_dict(&config.paths)?;
    let lines = read_lines(&config.paths.corpus)?;
    let segments = load_segments(&config.paths, lines.len())?;
    let lexicon = load_lexicon(&config.paths)?;
    let vocab = if config.paths.vocab.exists() {
        load_vocab(&config.paths)?
    } else {
        Vocab::build(&lines, 1).map_err(usage)?
    };

    let mut truncations = 0;
    let mut sequences = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        let wl = segments.as_ref().map(|s| s[i].as_slice());
        let seq = stylebert::encoders::encode_sentence(
            line,
            &vocab,
            &dict,
            &alphabets,
            config.train.max_len,
            config.train.model.chaizi_capacity,
            wl,
            &mut truncations,
        )
        .map_err(usage)?;
        sequences.push((seq, line.chars().collect::<Vec<char>>()));
    }

    let stats = mask_statistics(
        &sequences,
        &vocab,
        &dict,
        &alphabets,
        lexicon.as_ref(),
        &config.train.masking,
        threads,
    )
    .map_err(runtime)?;

    ensure_out_dir(&config.paths)?;
    write_out(
        &config.paths,
        "mask_stats.json",
        &serde_json::to_string_pretty(&stats).map_err(runtime)?,
    )?;
    write_out(&config.paths, "mask_stats.txt", &stats.render_text())?;
    print!("{}", stats.render_text());
    Ok(())
}

fn run_pretrain(config: &RunConfig, threads: usize, resume: Option<&Path>) -> CliResult<()> {
    config.train.validate().map_err(usage)?;
    let (dict, alphabets) = load_dict(&config.paths)?;
    let lines = read_lines(&config.paths.corpus)?;
    let segments = load_segments(&config.paths, lines.len())?;
    let lexicon = load_lexicon(&config.paths)?;
    let vocab = load_vocab(&config.paths)?;
    let inputs = TrainInputs {
        lines: &lines,
        segmentations: segments.as_deref(),
        vocab: &vocab,
        dict: &dict,
        alphabets: &alphabets,
        lexicon: lexicon.as_ref(),
    };
    ensure_out_dir(&config.paths)?;

    let mut checkpoint: Option<Checkpoint> = match resume {
        None => None,
        Some(p) => Some(load_checkpoint(p).map_err(usage)?),
    };

    // run in segments so a checkpoint lands at every eval point; resuming
    // is bit-exact, so this equals one uninterrupted run
    let eval_every = config.train.eval_every.max(1);
    let mut records: Vec<EvalRecord> = Vec::new();
    let mut final_loss = f64::NAN;
    let mut digests = Vec::new();
    let mut at = checkpoint
        .as_ref()
        .and_then(|c| c.optimizer.as_ref().map(|o| o.step))
        .unwrap_or(0);
    while at < config.train.steps {
        let pause = (at + eval_every - at % eval_every).min(config.train.steps);
        let (model, opt, report) =
            pretrain(&inputs, &config.train, threads, checkpoint.take(), Some(pause))
                .map_err(runtime)?;
        let path = config.paths.out_dir.join(format!("checkpoint-{pause}.ckpt"));
        save_checkpoint(&path, &model, Some(&opt)).map_err(runtime)?;
        log::info!("step {pause}: wrote {}", path.display());
        records.extend(report.records);
        final_loss = report.final_loss;
        digests.push(report.trace_digest);
        checkpoint = Some(Checkpoint { model, optimizer: Some(opt) });
        at = pause;
    }
    let Checkpoint { model, optimizer } = checkpoint.expect("steps > 0");
    let final_path = config.paths.out_dir.join("checkpoint-final.ckpt");
    save_checkpoint(&final_path, &model, optimizer.as_ref()).map_err(runtime)?;

    // drop wall-clock throughput so the persisted report is byte-identical
    // across reruns with the same seed
    let jsonl: String = records
        .iter()
        .map(|r| {
            let mut v = serde_json::to_value(r).unwrap();
            v.as_object_mut().unwrap().remove("tokens_per_sec");
            v.to_string() + "\n"
        })
        .collect();
    write_out(&config.paths, "report.jsonl", &jsonl)?;
    let digest = stylebert::util::sha256_hex(digests.join(",").as_bytes());
    let summary = format!(
        "steps={}\nfinal_loss={final_loss:.6}\ntrace_digest={digest}\n",
        config.train.steps
    );
    write_out(&config.paths, "summary.txt", &summary)?;
    print!("{summary}");
    Ok(())
}

fn eval_mlm(config: &RunConfig, threads: usize, checkpoint: Option<&Path>) -> CliResult<()> {
    let path = checkpoint
        .map(Path::to_path_buf)
        .or_else(|| config.paths.checkpoint.clone())
        .ok_or_else(|| usage("eval-mlm needs --checkpoint or paths.checkpoint"))?;
    let ck = load_checkpoint(&path).map_err(usage)?;
    let (dict, alphabets) = load_dict(&config.paths)?;
    let lines = read_lines(&config.paths.corpus)?;
    let segments = load_segments(&config.paths, lines.len())?;
    let lexicon = load_lexicon(&config.paths)?;
    let vocab = load_vocab(&config.paths)?;
    if ck.model.vocab_digest != vocab.digest() {
        return Err(usage("checkpoint was built against a different vocab"));
    }
    let inputs = TrainInputs {
        lines: &lines,
        segmentations: segments.as_deref(),
        vocab: &vocab,
        dict: &dict,
        alphabets: &alphabets,
        lexicon: lexicon.as_ref(),
    };
    let metrics = evaluate_mlm(
        &ck.model,
        &inputs,
        &config.train.masking,
        config.train.seed,
        config.train.max_len,
        config.train.batch_size,
        threads,
    )
    .map_err(runtime)?;
    ensure_out_dir(&config.paths)?;
    write_out(
        &config.paths,
        "eval.json",
        &serde_json::to_string_pretty(&metrics).map_err(runtime)?,
    )?;
    println!(
        "loss={:.6} accuracy={:.6} masked_positions={}",
        metrics.loss, metrics.accuracy, metrics.masked_positions
    );
    Ok(())
}

fn probe(config: &RunConfig) -> CliResult<()> {
    config.train.model.validate().map_err(usage)?;
    let (dict, alphabets) = load_dict(&config.paths)?;
    let report = probe_feature_signal(&dict, &alphabets, &config.train.model, config.train.seed)
        .map_err(runtime)?;
    ensure_out_dir(&config.paths)?;
    write_out(
        &config.paths,
        "probe.json",
        &serde_json::to_string_pretty(&report).map_err(runtime)?,
    )?;
    println!(
        "tone enabled={:.4} word_only={:.4} chance={:.4}",
        report.tone_enabled, report.tone_word_only, report.tone_chance
    );
    println!(
        "radical({}) enabled={:.4} word_only={:.4} chance={:.4}",
        report.designated_radical,
        report.radical_enabled,
        report.radical_word_only,
        report.radical_chance
    );
    Ok(())
}
