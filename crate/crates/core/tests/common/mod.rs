#![allow(dead_code)]

use convtx::audio::{make_synthetic, Dataset, SyntheticTask};
use convtx::cli::examples;
use convtx::config::RunConfig;
use convtx::decode::{beam_search, greedy_decode, ModelScorer, SearchOptions};
use convtx::model::{Batch, Checkpoint, EvalStats, Model};
use convtx::optim::{EpochStats, Example, Trainer};
use convtx::tensor::{Precision, PrecisionGuard};
use convtx::text::{word_wer, Vocab, WerStats};
use convtx::Result;

pub struct ToyData {
    pub dataset: Dataset,
    pub vocab: Vocab,
    pub examples: Vec<Example>,
}

pub fn toy_data(n: usize, seed: u64) -> ToyData {
    let task = SyntheticTask::toy();
    let dataset = make_synthetic(&task, n, seed).unwrap();
    let vocab = task.vocab().unwrap();
    let examples = examples(&dataset, &vocab);
    ToyData {
        dataset,
        vocab,
        examples,
    }
}

pub fn toy_config(seed: u64, epochs: usize) -> RunConfig {
    RunConfig {
        seed,
        epochs,
        ..RunConfig::default()
    }
}

pub struct ToyRun {
    pub checkpoints: Vec<Checkpoint>,
    pub stats: Vec<EpochStats>,
    pub model: Model,
}

pub fn train(cfg: RunConfig, examples: &[Example]) -> Result<ToyRun> {
    let epochs = cfg.epochs;
    let mut trainer = Trainer::new(cfg)?;
    let mut checkpoints = Vec::new();
    let mut stats = Vec::new();
    for _ in 0..epochs {
        let s = trainer.run_epoch(examples, &mut |ck, _| {
            checkpoints.push(ck);
            Ok(())
        })?;
        stats.push(s);
    }
    Ok(ToyRun {
        checkpoints,
        stats,
        model: trainer.model,
    })
}

/// Teacher-forced loss and token accuracy over the whole set, in 32-bit mode.
pub fn evaluate(model: &Model, examples: &[Example]) -> EvalStats {
    let _p = PrecisionGuard::new(Precision::F32);
    let mut total = EvalStats::default();
    for e in examples {
        let b = Batch::from_utterances(&[(&e.features, &e.tokens[..])]).unwrap();
        let s = model.evaluate(&b).unwrap();
        total.nll_sum += s.nll_sum;
        total.correct += s.correct;
        total.tokens += s.tokens;
    }
    total
}

/// Corpus WER of greedy (`beam = None`) or beam decoding, in 32-bit mode.
pub fn corpus_wer(model: &Model, data: &ToyData, beam: Option<usize>) -> WerStats {
    let _p = PrecisionGuard::new(Precision::F32);
    let mut total = WerStats::default();
    for u in &data.dataset.utterances {
        let mut scorer = ModelScorer::new(model, &u.features).unwrap();
        let opts = SearchOptions::new(beam.unwrap_or(1), scorer.default_max_len());
        let hyp = match beam {
            None => greedy_decode(&mut scorer, &opts).unwrap(),
            Some(_) => beam_search(&mut scorer, &opts).unwrap().best,
        };
        let text = data.vocab.decode(&hyp.tokens).unwrap();
        total += word_wer(&u.text, &text).unwrap();
    }
    total
}
