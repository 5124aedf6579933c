//! Left-to-right beam and greedy search.
//!
//! Scores are raw summed log-probabilities with no length normalization.
//! Candidates are ordered by score, then by token ids lexicographically, so
//! every search is a pure function of its scorer.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::model::{Model, Session};
use crate::tensor::{Tensor, Var};
use crate::text::{BOS, EOS, PAD};

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// BOS first.
    pub tokens: Vec<usize>,
    pub score: f64,
    /// True exactly when the last token is EOS.
    pub finished: bool,
}

impl Hypothesis {
    fn root() -> Self {
        Hypothesis {
            tokens: vec![BOS],
            score: 0.0,
            finished: false,
        }
    }

    fn extend(&self, token: usize, logp: f64, eos: usize) -> Self {
        let mut tokens = self.tokens.clone();
        tokens.push(token);
        Hypothesis {
            tokens,
            score: self.score + logp,
            finished: token == eos,
        }
    }
}

/// Better first: higher score, then smaller token sequence.
pub fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Next-token log-probabilities for a prefix.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOptions {
    pub beam: usize,
    /// Tokens generated after BOS, EOS included.
    pub max_len: usize,
    pub eos: usize,
    /// Tokens never proposed.
    pub banned: Vec<usize>,
}

impl SearchOptions {
    pub fn new(beam: usize, max_len: usize) -> Self {
        SearchOptions {
            beam,
            max_len,
            eos: EOS,
            banned: vec![PAD, BOS],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub best: Hypothesis,
    /// Finished hypotheses best first, or the live ones (unfinished) when
    /// nothing reached EOS.
    pub nbest: Vec<Hypothesis>,
}

pub fn beam_search(scorer: &mut dyn StepScorer, opts: &SearchOptions) -> Result<SearchResult> {
    if opts.beam == 0 || opts.max_len == 0 {
        return Err(Error::Contract("beam and max_len must be >= 1".into()));
    }
    let v = scorer.vocab_size();
    let mut live = vec![Hypothesis::root()];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..opts.max_len {
        let mut cands = Vec::with_capacity(live.len() * v);
        for h in &live {
            let lp = scorer.log_probs(&h.tokens)?;
            if lp.len() != v {
                return Err(Error::dim(
                    "beam_search",
                    format!("{} scores for vocab {v}", lp.len()),
                ));
            }
            for (tok, &l) in lp.iter().enumerate() {
                if !opts.banned.contains(&tok) {
                    cands.push(h.extend(tok, l, opts.eos));
                }
            }
        }
        cands.sort_by(rank);
        cands.truncate(opts.beam);
        live.clear();
        for c in cands {
            if c.finished {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
        finished.sort_by(rank);
        // log-probabilities only decrease, so no live extension can win
        match (finished.first(), live.first()) {
            (_, None) => break,
            (Some(f), Some(l)) if f.score > l.score => break,
            _ => {}
        }
    }
    let nbest = if finished.is_empty() { live } else { finished };
    Ok(SearchResult {
        best: nbest[0].clone(),
        nbest,
    })
}

/// Argmax token each step (lowest id on ties) until EOS or `max_len`.
pub fn greedy_decode(scorer: &mut dyn StepScorer, opts: &SearchOptions) -> Result<Hypothesis> {
    let mut h = Hypothesis::root();
    for _ in 0..opts.max_len {
        let lp = scorer.log_probs(&h.tokens)?;
        let best = (0..lp.len())
            .filter(|t| !opts.banned.contains(t))
            .max_by(|&a, &b| lp[a].total_cmp(&lp[b]).then(b.cmp(&a)))
            .ok_or_else(|| Error::Contract("every token is banned".into()))?;
        h = h.extend(best, lp[best], opts.eos);
        if h.finished {
            break;
        }
    }
    Ok(h)
}

/// Scores prefixes with a model against one utterance's encoder memory.
pub struct ModelScorer<'m> {
    session: Session<'m>,
    memory: Var,
    encoded_len: usize,
    mark: usize,
}

impl<'m> ModelScorer<'m> {
    /// Encodes `features [T, F]`.
    pub fn new(model: &'m Model, features: &Tensor) -> Result<Self> {
        let mut session = Session::inference(model);
        let memory = session.encode(features)?;
        Ok(Self::finish(session, memory))
    }

    /// Uses precomputed memory `[T', d_model]`.
    pub fn from_memory(model: &'m Model, memory: Tensor) -> Self {
        let mut session = Session::inference(model);
        let memory = session.tape.constant(memory);
        Self::finish(session, memory)
    }

    fn finish(session: Session<'m>, memory: Var) -> Self {
        let encoded_len = session.tape.shape(memory)[0];
        let mark = session.tape.len();
        ModelScorer {
            session,
            memory,
            encoded_len,
            mark,
        }
    }

    pub fn encoded_len(&self) -> usize {
        self.encoded_len
    }

    /// Default search bound: twice the encoder length plus ten.
    pub fn default_max_len(&self) -> usize {
        2 * self.encoded_len + 10
    }
}

impl StepScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.session.config().vocab_size
    }

    fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        self.session.tape.truncate(self.mark);
        let logits = self.session.decode(self.memory, prefix)?;
        let u = prefix.len();
        let last = self.session.tape.slice(logits, 0, u - 1, 1)?;
        let lp = self.session.tape.log_softmax(last, 1)?;
        Ok(self.session.tape.value(lp).data().to_vec())
    }
}

/// Beam search over one utterance with the default length bound.
pub fn decode_utterance(model: &Model, features: &Tensor, beam: usize) -> Result<SearchResult> {
    let mut scorer = ModelScorer::new(model, features)?;
    let opts = SearchOptions::new(beam, scorer.default_max_len());
    beam_search(&mut scorer, &opts)
}

/// `id<TAB>score<TAB>text` lines.
pub fn format_hypotheses(records: &[(String, f64, String)]) -> String {
    let mut s = String::new();
    for (id, score, text) in records {
        s.push_str(&format!("{id}\t{score:.6}\t{text}\n"));
    }
    s
}

/// Reads `id<TAB>text` references or `id<TAB>score<TAB>text` hypotheses.
pub fn parse_transcripts(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let (id, words) = match cols.as_slice() {
            [id, words] => (id, words),
            [id, score, words] => {
                score.parse::<f64>().map_err(|_| {
                    Error::format("transcript", format!("line {}: bad score `{score}`", n + 1))
                })?;
                (id, words)
            }
            _ => {
                return Err(Error::format(
                    "transcript",
                    format!("line {}: expected 2 or 3 tab-separated fields", n + 1),
                ))
            }
        };
        out.push((id.to_string(), words.to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Log-probabilities from a fixed table keyed by a hash of the prefix.
    struct TableScorer {
        v: usize,
        seed: u64,
    }

    impl StepScorer for TableScorer {
        fn vocab_size(&self) -> usize {
            self.v
        }

        fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
            let key = prefix.iter().fold(self.seed, |a, &t| {
                a.wrapping_mul(31).wrapping_add(t as u64 + 1)
            });
            let mut rng = ChaCha8Rng::seed_from_u64(key);
            let z: Vec<f64> = (0..self.v).map(|_| rng.random_range(-2.0..2.0)).collect();
            let lse = z.iter().map(|x| x.exp()).sum::<f64>().ln();
            Ok(z.iter().map(|x| x - lse).collect())
        }
    }

    /// Forces a fixed sequence.
    struct Forced(Vec<usize>, usize);

    impl StepScorer for Forced {
        fn vocab_size(&self) -> usize {
            self.1
        }

        fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
            let want = self.0.get(prefix.len() - 1).copied().unwrap_or(EOS);
            Ok((0..self.1)
                .map(|t| if t == want { 0.0 } else { -1e9 })
                .collect())
        }
    }

    fn exhaustive(s: &mut dyn StepScorer, opts: &SearchOptions) -> Hypothesis {
        let mut all = Vec::new();
        let mut stack = vec![Hypothesis::root()];
        while let Some(h) = stack.pop() {
            if h.finished || h.tokens.len() > opts.max_len {
                all.push(h);
                continue;
            }
            let lp = s.log_probs(&h.tokens).unwrap();
            for t in 0..s.vocab_size() {
                if !opts.banned.contains(&t) {
                    stack.push(h.extend(t, lp[t], opts.eos));
                }
            }
        }
        let finished: Vec<_> = all.iter().filter(|h| h.finished).cloned().collect();
        let mut pool = if finished.is_empty() { all } else { finished };
        pool.sort_by(rank);
        pool.remove(0)
    }

    #[test]
    fn full_beam_equals_exhaustive() {
        for seed in 0..40 {
            for max_len in 1..=3 {
                let mut s = TableScorer { v: 4, seed };
                let opts = SearchOptions {
                    beam: 4usize.pow(max_len as u32),
                    max_len,
                    eos: EOS,
                    banned: vec![],
                };
                let got = beam_search(&mut s, &opts).unwrap().best;
                let want = exhaustive(&mut s, &opts);
                assert_eq!(got.tokens, want.tokens, "seed {seed}, len {max_len}");
                assert_eq!(got.score, want.score);
            }
        }
    }

    #[test]
    fn narrower_beams_never_beat_exhaustive() {
        for seed in 0..40 {
            let opts = |beam| SearchOptions {
                beam,
                max_len: 3,
                eos: EOS,
                banned: vec![PAD],
            };
            let want = exhaustive(&mut TableScorer { v: 4, seed }, &opts(64));
            for beam in 1..=27 {
                let got = beam_search(&mut TableScorer { v: 4, seed }, &opts(beam))
                    .unwrap()
                    .best;
                if got.finished {
                    assert!(got.score <= want.score);
                }
            }
        }
    }

    #[test]
    fn beam_one_is_greedy() {
        for seed in 0..50 {
            let opts = SearchOptions::new(1, 6);
            let b = beam_search(&mut TableScorer { v: 6, seed }, &opts)
                .unwrap()
                .best;
            let g = greedy_decode(&mut TableScorer { v: 6, seed }, &opts).unwrap();
            assert_eq!(b, g);
        }
    }

    #[test]
    fn forced_sequence_for_any_beam() {
        let seq = vec![4, 5, 3, 4, EOS];
        for beam in [1, 2, 5, 20] {
            let r =
                beam_search(&mut Forced(seq.clone(), 6), &SearchOptions::new(beam, 10)).unwrap();
            assert_eq!(r.best.tokens[1..], seq[..]);
            assert!(r.best.finished);
        }
        let g = greedy_decode(&mut Forced(seq.clone(), 6), &SearchOptions::new(1, 10)).unwrap();
        assert_eq!(g.tokens[1..], seq[..]);
    }

    #[test]
    fn unfinished_result_is_flagged() {
        // a wider beam would keep an improbable EOS ending and return it
        let r = beam_search(&mut Forced(vec![4; 20], 6), &SearchOptions::new(1, 5)).unwrap();
        assert!(!r.best.finished);
        assert_eq!(r.best.tokens.len(), 6);
        assert!(beam_search(&mut Forced(vec![], 6), &SearchOptions::new(0, 5)).is_err());
    }

    #[test]
    fn search_is_deterministic_and_scores_fall() {
        let opts = SearchOptions::new(5, 6);
        let a = beam_search(&mut TableScorer { v: 7, seed: 3 }, &opts).unwrap();
        let b = beam_search(&mut TableScorer { v: 7, seed: 3 }, &opts).unwrap();
        assert_eq!(a, b);
        for h in &a.nbest {
            assert_eq!(h.finished, h.tokens.last() == Some(&EOS));
            let mut s = TableScorer { v: 7, seed: 3 };
            let mut acc = 0.0;
            for i in 1..h.tokens.len() {
                let next = acc + s.log_probs(&h.tokens[..i]).unwrap()[h.tokens[i]];
                assert!(next <= acc);
                acc = next;
            }
            assert!((acc - h.score).abs() < 1e-12);
        }
    }

    #[test]
    fn transcript_files() {
        let recs = vec![
            ("u1".to_string(), -1.5, "a b".to_string()),
            ("u2".to_string(), 0.0, String::new()),
        ];
        let text = format_hypotheses(&recs);
        let parsed = parse_transcripts(&text).unwrap();
        assert_eq!(
            parsed,
            vec![("u1".into(), "a b".into()), ("u2".into(), String::new())]
        );
        assert_eq!(
            parse_transcripts("x\thello world\n").unwrap()[0].1,
            "hello world"
        );
        assert!(parse_transcripts("no tabs here\n").is_err());
        assert!(parse_transcripts("a\tnan-ish\tb\n").is_err());
    }
}
