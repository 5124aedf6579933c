//! Subword vocabulary, tokenization and word error rate.
//!
//! Vocab files hold one unit per line (anything after a tab is ignored, so
//! `unit<TAB>score` lists load too). An optional first line
//! `#boundary <marker>` names the word-start marker; it defaults to `▁`.

use std::collections::HashMap;
use std::ops::AddAssign;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
/// Number of reserved ids ahead of the loaded units.
pub const RESERVED: usize = 4;

pub const RESERVED_SYMBOLS: [&str; RESERVED] = ["<pad>", "<s>", "</s>", "<unk>"];
pub const DEFAULT_BOUNDARY: &str = "\u{2581}";

/// Cost of emitting UNK for one character during segmentation.
const UNK_COST: usize = 1 << 20;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
    boundary: String,
    longest: usize,
}

impl Vocab {
    /// Reserved ids followed by `units` in order.
    pub fn new(units: impl IntoIterator<Item = String>, boundary: &str) -> Result<Self> {
        if boundary.is_empty() || boundary.chars().any(char::is_whitespace) {
            return Err(Error::format(
                "vocab",
                "boundary marker must be a non-empty word",
            ));
        }
        let mut symbols: Vec<String> = RESERVED_SYMBOLS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> = symbols.iter().cloned().zip(0..).collect();
        for unit in units {
            if unit.is_empty() || unit.chars().any(char::is_whitespace) {
                return Err(Error::format(
                    "vocab",
                    format!("unit {unit:?} is empty or has whitespace"),
                ));
            }
            if index.contains_key(&unit) {
                return Err(Error::format("vocab", format!("duplicate unit {unit:?}")));
            }
            index.insert(unit.clone(), symbols.len());
            symbols.push(unit);
        }
        let longest = symbols[RESERVED..]
            .iter()
            .map(|s| s.chars().count())
            .max()
            .unwrap_or(0);
        Ok(Vocab {
            symbols,
            index,
            boundary: boundary.to_string(),
            longest,
        })
    }

    /// Word-start and word-internal units for each character.
    pub fn characters(chars: &str) -> Result<Self> {
        let mut units = Vec::new();
        for c in chars.chars() {
            units.push(format!("{DEFAULT_BOUNDARY}{c}"));
            units.push(c.to_string());
        }
        Self::new(units, DEFAULT_BOUNDARY)
    }

    /// Parses a unit list. Lines naming a reserved symbol are skipped since
    /// those already have fixed ids.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().peekable();
        let mut boundary = DEFAULT_BOUNDARY.to_string();
        if let Some(rest) = lines.peek().and_then(|l| l.strip_prefix("#boundary")) {
            boundary = rest.trim().to_string();
            lines.next();
        }
        let units = lines
            .map(|l| {
                l.split('\t')
                    .next()
                    .unwrap_or_default()
                    .trim_end_matches('\r')
            })
            .filter(|u| !u.is_empty() && !RESERVED_SYMBOLS.contains(u))
            .map(str::to_string)
            .collect::<Vec<_>>();
        Self::new(units, &boundary)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("#boundary {}\n", self.boundary);
        for u in &self.symbols[RESERVED..] {
            s.push_str(u);
            s.push('\n');
        }
        s
    }

    /// Total ids, reserved ones included.
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.len() == RESERVED
    }

    pub fn boundary(&self) -> &str {
        &self.boundary
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    /// `[BOS, units…, EOS]`. Each word is segmented into the fewest units
    /// with the boundary marker in front; characters no unit covers become UNK.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        for word in text.split_whitespace() {
            let marked: Vec<char> = self.boundary.chars().chain(word.chars()).collect();
            ids.extend(self.segment(&marked));
        }
        ids.push(EOS);
        ids
    }

    fn segment(&self, chars: &[char]) -> Vec<usize> {
        let n = chars.len();
        // best[i]: (cost, first unit id, its length) for the suffix at i
        let mut best: Vec<(usize, usize, usize)> = vec![(usize::MAX, UNK, 1); n + 1];
        best[n] = (0, PAD, 0);
        let mut buf = String::new();
        for i in (0..n).rev() {
            best[i] = (best[i + 1].0.saturating_add(UNK_COST), UNK, 1);
            for len in (1..=self.longest.min(n - i)).rev() {
                buf.clear();
                buf.extend(&chars[i..i + len]);
                if let Some(&id) = self.index.get(buf.as_str()).filter(|&&id| id >= RESERVED) {
                    let cost = best[i + len].0.saturating_add(1);
                    if cost < best[i].0 {
                        best[i] = (cost, id, len);
                    }
                }
            }
        }
        let mut out = Vec::new();
        let mut i = 0;
        while i < n {
            let (_, id, len) = best[i];
            out.push(id);
            i += len;
        }
        out
    }

    /// Joins units back into text. A leading BOS is optional, the first EOS
    /// ends the sequence and only PAD may follow it.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let body = ids.strip_prefix(&[BOS]).unwrap_or(ids);
        let end = body.iter().position(|&i| i == EOS).unwrap_or(body.len());
        if let Some(&bad) = body[end..].iter().skip(1).find(|&&i| i != PAD) {
            return Err(Error::Input(format!("id {bad} after EOS")));
        }
        let mut s = String::new();
        for &id in &body[..end] {
            match id {
                PAD => return Err(Error::Input("PAD inside a sequence".into())),
                BOS => return Err(Error::Input("BOS inside a sequence".into())),
                UNK => s.push_str(RESERVED_SYMBOLS[UNK]),
                _ => s.push_str(self.symbol(id).ok_or_else(|| {
                    Error::Input(format!("id {id} outside vocab of {}", self.len()))
                })?),
            }
        }
        Ok(s.replace(&self.boundary, " ")
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" "))
    }
}

/// Edit counts of a hypothesis against a reference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WerStats {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
}

impl WerStats {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    pub fn rate(&self) -> f64 {
        self.errors() as f64 / self.ref_len as f64
    }
}

impl AddAssign for WerStats {
    fn add_assign(&mut self, o: Self) {
        self.substitutions += o.substitutions;
        self.insertions += o.insertions;
        self.deletions += o.deletions;
        self.ref_len += o.ref_len;
    }
}

/// Minimum-edit alignment counts. Among optimal alignments the backtrace
/// prefers match/substitution, then deletion, then insertion.
pub fn wer<T: PartialEq>(reference: &[T], hyp: &[T]) -> Result<WerStats> {
    if reference.is_empty() {
        return Err(Error::Contract(
            "WER of an empty reference is undefined".into(),
        ));
    }
    let (n, m) = (reference.len(), hyp.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut st = WerStats {
        ref_len: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0
            && j > 0
            && d[i][j] == d[i - 1][j - 1] + usize::from(reference[i - 1] != hyp[j - 1])
        {
            st.substitutions += usize::from(reference[i - 1] != hyp[j - 1]);
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            st.deletions += 1;
            i -= 1;
        } else {
            st.insertions += 1;
            j -= 1;
        }
    }
    Ok(st)
}

/// Word-level WER of two texts.
pub fn word_wer(reference: &str, hyp: &str) -> Result<WerStats> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hyp.split_whitespace().collect();
    wer(&r, &h)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use proptest::prelude::*;

    use super::*;

    /// All (S, I, D) triples reachable by any alignment path.
    fn all_alignments(
        r: &[u8],
        h: &[u8],
        acc: (usize, usize, usize),
        out: &mut HashSet<(usize, usize, usize)>,
    ) {
        match (r.split_first(), h.split_first()) {
            (None, None) => {
                out.insert(acc);
            }
            (Some((a, rr)), Some((b, hh))) => {
                all_alignments(rr, hh, (acc.0 + usize::from(a != b), acc.1, acc.2), out);
                all_alignments(rr, h, (acc.0, acc.1, acc.2 + 1), out);
                all_alignments(r, hh, (acc.0, acc.1 + 1, acc.2), out);
            }
            (Some((_, rr)), None) => all_alignments(rr, h, (acc.0, acc.1, acc.2 + 1), out),
            (None, Some((_, hh))) => all_alignments(r, hh, (acc.0, acc.1 + 1, acc.2), out),
        }
    }

    #[test]
    fn hand_cases() {
        let w = wer(&["a", "b", "c"], &["a", "b", "c"]).unwrap();
        assert_eq!(
            (w.substitutions, w.insertions, w.deletions, w.rate()),
            (0, 0, 0, 0.0)
        );
        let w = word_wer("a b c", "a c").unwrap();
        assert_eq!((w.substitutions, w.insertions, w.deletions), (0, 0, 1));
        assert!((w.rate() - 1.0 / 3.0).abs() < 1e-15);
        assert!(matches!(wer::<u8>(&[], &[1]), Err(Error::Contract(_))));
    }

    proptest! {
        #[test]
        fn wer_matches_exhaustive_alignment(
            r in prop::collection::vec(0u8..3, 1..=8),
            h in prop::collection::vec(0u8..3, 0..=8),
        ) {
            let w = wer(&r, &h).unwrap();
            let mut all = HashSet::new();
            all_alignments(&r, &h, (0, 0, 0), &mut all);
            let min = all.iter().map(|(s, i, d)| s + i + d).min().unwrap();
            prop_assert_eq!(w.errors(), min);
            prop_assert!(all.contains(&(w.substitutions, w.insertions, w.deletions)));
        }

        #[test]
        fn edit_distance_is_a_metric(
            a in prop::collection::vec(0u8..3, 1..=7),
            b in prop::collection::vec(0u8..3, 1..=7),
            c in prop::collection::vec(0u8..3, 1..=7),
        ) {
            let d = |x: &[u8], y: &[u8]| wer(x, y).unwrap().errors();
            prop_assert_eq!(d(&a, &a), 0);
            prop_assert_eq!(d(&a, &b), d(&b, &a));
            prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
            let (ab, ba) = (wer(&a, &b).unwrap(), wer(&b, &a).unwrap());
            prop_assert_eq!(ab.insertions + a.len(), ab.deletions + b.len());
            prop_assert_eq!(ba.insertions + b.len(), ba.deletions + a.len());
        }

        #[test]
        fn character_vocab_round_trips(words in prop::collection::vec("[abcd]{1,5}", 0..6)) {
            let v = Vocab::characters("abcd").unwrap();
            let text = words.join(" ");
            let ids = v.encode(&text);
            prop_assert_eq!(ids[0], BOS);
            prop_assert_eq!(*ids.last().unwrap(), EOS);
            prop_assert!(!ids.contains(&UNK));
            prop_assert_eq!(v.decode(&ids).unwrap(), text);
        }
    }

    #[test]
    fn empty_text() {
        let v = Vocab::characters("ab").unwrap();
        assert_eq!(v.encode(""), vec![BOS, EOS]);
        assert_eq!(v.decode(&[BOS, EOS]).unwrap(), "");
    }

    #[test]
    fn segmentation_prefers_fewest_units() {
        let units = ["\u{2581}a", "\u{2581}ab", "bc", "b"].map(String::from);
        let v = Vocab::new(units, DEFAULT_BOUNDARY).unwrap();
        // greedy longest match would strand the final `c`
        let ids = v.encode("abc");
        assert_eq!(
            ids,
            vec![BOS, v.id("\u{2581}a").unwrap(), v.id("bc").unwrap(), EOS]
        );
        assert_eq!(v.decode(&ids).unwrap(), "abc");
    }

    #[test]
    fn unknown_characters_become_unk() {
        let v = Vocab::characters("ab").unwrap();
        let ids = v.encode("axb");
        assert_eq!(
            ids,
            vec![
                BOS,
                v.id("\u{2581}a").unwrap(),
                UNK,
                v.id("b").unwrap(),
                EOS
            ]
        );
        assert_eq!(v.decode(&ids).unwrap(), "a<unk>b");
    }

    #[test]
    fn malformed_sequences_are_rejected() {
        let v = Vocab::characters("ab").unwrap();
        assert!(v.decode(&[BOS, 4, PAD, 5, EOS]).is_err());
        assert!(v.decode(&[BOS, 4, BOS, EOS]).is_err());
        assert!(v.decode(&[BOS, 4, EOS, 5]).is_err());
        assert!(v.decode(&[BOS, 99, EOS]).is_err());
        assert_eq!(v.decode(&[BOS, 4, EOS, PAD, PAD]).unwrap(), "a");
        assert_eq!(v.decode(&[4, 4]).unwrap(), "a a");
    }

    #[test]
    fn file_with_header_and_scores() {
        let mut text = String::from("#boundary @@\n<unk>\t0\n");
        for i in 0..5000 {
            text.push_str(&format!("@@u{i}\t-{i}.5\n"));
        }
        let v = Vocab::from_text(&text).unwrap();
        assert_eq!(v.len(), 5000 + RESERVED);
        assert_eq!(v.boundary(), "@@");
        assert_eq!(v.id("@@u0"), Some(RESERVED));
        let back = Vocab::from_text(&v.to_text()).unwrap();
        assert_eq!(back, v);
        assert!(Vocab::from_text("a\na\n").is_err());
    }
}
