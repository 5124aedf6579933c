//! Command-line front end: train, decode, score, average and info, plus
//! synth and features for preparing data.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::audio::{
    extract, make_synthetic, read_pcm, Dataset, FeatureConfig, SyntheticTask, Utterance,
};
use crate::config::{apply_entries, parse_entries, parse_override, section, RunConfig};
use crate::decode::{
    beam_search, format_hypotheses, greedy_decode, parse_transcripts, ModelScorer, SearchOptions,
};
use crate::error::{Error, Result};
use crate::model::{count_params, preset, Checkpoint, ModelConfig};
use crate::optim::{average_checkpoints, Example, Trainer};
use crate::tensor::{Precision, PrecisionGuard};
use crate::text::{word_wer, Vocab, WerStats};

#[derive(Debug, Parser)]
#[command(
    name = "convtx",
    version,
    about = "Convolutional-context transformer speech recognizer"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a config file; writes one checkpoint per epoch.
    Train(TrainArgs),
    /// Beam-search every utterance of a feature container.
    Decode(DecodeArgs),
    /// Word error rate of hypothesis files against references.
    Score(ScoreArgs),
    /// Average the newest checkpoints in a directory.
    Average(AverageArgs),
    /// Parameter counts of a preset or config.
    Info(InfoArgs),
    /// Write a synthetic corpus, its vocab and a matching config.
    Synth(SynthArgs),
    /// Extract log-mel features from 16-bit PCM files.
    Features(FeaturesArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// `key=value` overrides applied after the file.
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub beam: usize,
    /// Argmax decoding instead of beam search.
    #[arg(long)]
    pub greedy: bool,
    /// Defaults to twice the encoder length plus ten.
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Hypothesis file; stdout when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Reference and hypothesis files, in pairs.
    #[arg(required = true, num_args = 2..)]
    pub files: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AverageArgs {
    #[arg(long)]
    pub dir: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub last_n: usize,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct InfoArgs {
    /// canonical, best or toy.
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub utterances: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub frames_per_token: Option<usize>,
    #[arg(long)]
    pub max_tokens: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    /// Lines of `id<TAB>audio.pcm<TAB>transcript`; paths relative to the manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Feature settings are read from its `features.*` keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// 2 for numeric aborts, 1 for everything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite { .. } => 2,
        _ => 1,
    }
}

pub fn run(cli: Cli, out: &mut dyn std::io::Write) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(&a, out),
        Command::Decode(a) => decode(&a, out),
        Command::Score(a) => score(&a, out),
        Command::Average(a) => average(&a, out),
        Command::Info(a) => info(&a, out),
        Command::Synth(a) => synth(&a, out),
        Command::Features(a) => features(&a, out),
    }
}

fn emit(out: &mut dyn std::io::Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Pairs each utterance's features with its encoded transcript.
pub fn examples(dataset: &Dataset, vocab: &Vocab) -> Vec<Example> {
    dataset
        .utterances
        .iter()
        .map(|u| Example {
            id: u.id.clone(),
            features: u.features.clone(),
            tokens: vocab.encode(&u.text),
        })
        .collect()
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch-{epoch:04}.ckpt")
}

fn train(a: &TrainArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let cfg = RunConfig::load(&a.config, &a.overrides)?;
    let base = base_dir(&a.config);
    let dataset = Dataset::read(&RunConfig::resolve(&base, &cfg.data.train))?;
    let vocab = Vocab::load(&RunConfig::resolve(&base, &cfg.data.vocab))?;
    if vocab.len() > cfg.model.vocab_size {
        return Err(Error::config(
            "model.vocab_size",
            format!(
                "{} is smaller than the vocab's {} ids",
                cfg.model.vocab_size,
                vocab.len()
            ),
        ));
    }
    let dir = RunConfig::resolve(&base, &cfg.checkpoint_dir);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_file(&dir.join("run.cfg"), cfg.to_text().as_bytes())?;
    let log_path = dir.join("metrics.log");
    let mut log = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;

    let data = examples(&dataset, &vocab);
    let epochs = cfg.epochs;
    let mut trainer = Trainer::new(cfg)?;
    for _ in 0..epochs {
        let stats = trainer.run_epoch(&data, &mut |ck, stats| {
            ck.write(&dir.join(checkpoint_name(stats.epoch)))?;
            writeln!(log, "{}", stats.log_line()).map_err(|e| Error::io(&log_path, e))
        })?;
        emit(out, &format!("{}\n", stats.log_line()))?;
    }
    Ok(())
}

fn header_precision(ck: &Checkpoint) -> Precision {
    ck.header
        .get("precision")
        .and_then(|v| serde_json::from_str(v).ok())
        .unwrap_or(Precision::F32)
}

fn decode(a: &DecodeArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let ck = Checkpoint::read(&a.checkpoint)?;
    let model = ck.to_model()?;
    let _precision = PrecisionGuard::new(header_precision(&ck));
    let dataset = Dataset::read(&a.data)?;
    let vocab = Vocab::load(&a.vocab)?;
    if vocab.len() > model.config().vocab_size {
        return Err(Error::Input(format!(
            "vocab has {} ids but the model only {}",
            vocab.len(),
            model.config().vocab_size
        )));
    }
    let mut records = Vec::with_capacity(dataset.len());
    for u in &dataset.utterances {
        let mut scorer = ModelScorer::new(&model, &u.features)?;
        let opts = SearchOptions::new(
            a.beam,
            a.max_len.unwrap_or_else(|| scorer.default_max_len()),
        );
        let best = if a.greedy {
            greedy_decode(&mut scorer, &opts)?
        } else {
            beam_search(&mut scorer, &opts)?.best
        };
        records.push((
            u.id.clone(),
            best.score,
            hypothesis_text(&vocab, &best.tokens)?,
        ));
    }
    let text = format_hypotheses(&records);
    match &a.output {
        Some(p) => write_file(p, text.as_bytes()),
        None => emit(out, &text),
    }
}

/// Text of a hypothesis; ids the vocab does not know read as UNK.
pub fn hypothesis_text(vocab: &Vocab, tokens: &[usize]) -> Result<String> {
    let ids: Vec<usize> = tokens
        .iter()
        .map(|&t| if t < vocab.len() { t } else { crate::text::UNK })
        .collect();
    vocab.decode(&ids)
}

fn read_transcripts(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_transcripts(&text)
}

/// Per-pair and aggregate S/I/D/WER. Hypotheses are matched to references
/// by utterance id; a missing hypothesis counts as empty.
pub fn score_pairs(pairs: &[(PathBuf, PathBuf)]) -> Result<(Vec<(String, WerStats)>, WerStats)> {
    let mut rows = Vec::new();
    let mut total = WerStats::default();
    for (r, h) in pairs {
        let refs = read_transcripts(r)?;
        let hyps: std::collections::HashMap<String, String> =
            read_transcripts(h)?.into_iter().collect();
        let mut set = WerStats::default();
        for (id, words) in &refs {
            let hyp = hyps.get(id).map(String::as_str).unwrap_or("");
            set += word_wer(words, hyp)
                .map_err(|_| Error::Input(format!("reference `{id}` is empty")))?;
        }
        if set.ref_len == 0 {
            return Err(Error::Input(format!(
                "{} has no reference words",
                r.display()
            )));
        }
        total += set;
        rows.push((format!("{} vs {}", r.display(), h.display()), set));
    }
    Ok((rows, total))
}

fn wer_line(name: &str, s: &WerStats) -> String {
    format!(
        "{name}: S={} I={} D={} N={} WER={:.2}%\n",
        s.substitutions,
        s.insertions,
        s.deletions,
        s.ref_len,
        100.0 * s.rate()
    )
}

fn score(a: &ScoreArgs, out: &mut dyn std::io::Write) -> Result<()> {
    if !a.files.len().is_multiple_of(2) {
        return Err(Error::Input(
            "score takes reference/hypothesis files in pairs".into(),
        ));
    }
    let pairs: Vec<(PathBuf, PathBuf)> = a
        .files
        .chunks(2)
        .map(|c| (c[0].clone(), c[1].clone()))
        .collect();
    let (rows, total) = score_pairs(&pairs)?;
    let mut s = String::new();
    for (name, st) in &rows {
        s.push_str(&wer_line(name, st));
    }
    s.push_str(&wer_line("total", &total));
    emit(out, &s)
}

/// `epoch-*.ckpt` files in a directory, oldest first.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.starts_with("epoch-") && name.ends_with(".ckpt")
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Averages the newest `last_n` checkpoints, recording the inputs in the header.
pub fn average_dir(dir: &Path, last_n: usize) -> Result<Checkpoint> {
    let files = list_checkpoints(dir)?;
    if files.is_empty() {
        return Err(Error::Input(format!("no checkpoints in {}", dir.display())));
    }
    let chosen = &files[files.len().saturating_sub(last_n.max(1))..];
    let set = chosen
        .iter()
        .map(|p| Checkpoint::read(p))
        .collect::<Result<Vec<_>>>()?;
    let mut avg = average_checkpoints(&set)?;
    let names: Vec<String> = chosen
        .iter()
        .map(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default()
                .to_string()
        })
        .collect();
    avg.header.set(
        "checkpoint.averaged_from",
        serde_json::to_string(&names).expect("strings serialize"),
    );
    Ok(avg)
}

fn average(a: &AverageArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let avg = average_dir(&a.dir, a.last_n)?;
    avg.write(&a.output)?;
    emit(
        out,
        &format!(
            "averaged {} checkpoints into {}\n",
            avg.header.get("checkpoint.averaged_count").unwrap_or("?"),
            a.output.display()
        ),
    )
}

/// Parameter table of a model config.
pub fn info_table(cfg: &ModelConfig) -> Result<String> {
    let count = count_params(cfg)?;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "d_model={} heads={} ffn_width={} enc_layers={} dec_layers={} vocab={} emb_dim={}",
        cfg.d_model,
        cfg.heads,
        cfg.ffn_width,
        cfg.enc_layers,
        cfg.dec_layers,
        cfg.vocab_size,
        cfg.emb_dim
    );
    let _ = writeln!(s, "{:<20} {:>14}", "component", "parameters");
    for (name, n) in &count.components {
        let _ = writeln!(s, "{name:<20} {n:>14}");
    }
    let _ = writeln!(s, "{:<20} {:>14}", "total", count.total);
    Ok(s)
}

fn info(a: &InfoArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let cfg = match (&a.preset, &a.config) {
        (_, Some(path)) => RunConfig::load(path, &a.overrides)?.model,
        (name, None) => {
            let base = preset(name.as_deref().unwrap_or("canonical"))?;
            let entries = a
                .overrides
                .iter()
                .map(|o| parse_override(o))
                .collect::<Result<Vec<_>>>()?;
            let entries = section(&entries, "model");
            let cfg: ModelConfig = apply_entries(&base, &entries)?;
            cfg.validate()?;
            cfg
        }
    };
    emit(out, &info_table(&cfg)?)
}

fn synth(a: &SynthArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let mut task = SyntheticTask::toy();
    if let Some(n) = a.noise {
        task.noise = n;
    }
    if let Some(n) = a.frames_per_token {
        task.frames_per_token = n;
    }
    if let Some(n) = a.max_tokens {
        task.max_tokens = n;
    }
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let data = make_synthetic(&task, a.utterances, a.seed)?;
    data.write(&a.out_dir.join("train.data"))?;
    let vocab = task.vocab()?;
    write_file(&a.out_dir.join("vocab.txt"), vocab.to_text().as_bytes())?;
    let refs: Vec<(String, f64, String)> = data
        .utterances
        .iter()
        .map(|u| (u.id.clone(), 0.0, u.text.clone()))
        .collect();
    let mut ref_text = String::new();
    for (id, _, text) in &refs {
        ref_text.push_str(&format!("{id}\t{text}\n"));
    }
    write_file(&a.out_dir.join("train.ref"), ref_text.as_bytes())?;
    let mut cfg = RunConfig::default();
    cfg.model.vocab_size = vocab.len();
    cfg.model.feature_dim = task.feature_dim;
    cfg.features.mel_bins = task.feature_dim;
    cfg.epochs = 40;
    write_file(&a.out_dir.join("toy.cfg"), cfg.to_text().as_bytes())?;
    emit(
        out,
        &format!(
            "wrote {} utterances, {} vocab ids and toy.cfg to {}\n",
            data.len(),
            vocab.len(),
            a.out_dir.display()
        ),
    )
}

fn features(a: &FeaturesArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let fcfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let entries = section(&parse_entries(&text)?, "features");
            let c: FeatureConfig = apply_entries(&FeatureConfig::default(), &entries)?;
            c.validate()?;
            c
        }
        None => FeatureConfig::default(),
    };
    let text = std::fs::read_to_string(&a.manifest).map_err(|e| Error::io(&a.manifest, e))?;
    let base = base_dir(&a.manifest);
    let mut data = Dataset::default();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.splitn(3, '\t').collect();
        let [id, audio, words] = cols.as_slice() else {
            return Err(Error::format(
                "manifest",
                format!("line {}: expected id, audio path and transcript", n + 1),
            ));
        };
        let samples = read_pcm(&RunConfig::resolve(&base, audio))?;
        data.utterances.push(Utterance {
            id: id.to_string(),
            features: extract(&samples, &fcfg)?,
            text: words.to_string(),
        });
    }
    data.write(&a.output)?;
    emit(
        out,
        &format!(
            "wrote {} utterances to {}\n",
            data.len(),
            a.output.display()
        ),
    )
}
