//! Story corpora: vocabulary, fixed prompt/target slots, draft corruption,
//! a seedable synthetic grammar and plain-text ingestion.

mod grammar;
mod ingest;

pub use grammar::{generate_corpus, GrammarConfig, DEFAULT_GRAMMAR};
pub use ingest::{ingest_text_corpus, read_corpus_file, write_corpus_file, IngestResult};

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::rng::{rng, uniform};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved tokens first, then `words` in the given order (duplicates and
    /// reserved spellings dropped).
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Self { tokens: Vec::new(), index: HashMap::new() };
        for w in RESERVED.iter().map(|s| s.to_string()).chain(words.into_iter().map(|s| s.as_ref().to_string())) {
            if !v.index.contains_key(&w) {
                v.index.insert(w.clone(), v.tokens.len());
                v.tokens.push(w);
            }
        }
        v
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], |s| s.as_str())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Whitespace tokenisation; unknown words map to UNK.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    /// One token per line.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let words: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
        if words.len() < RESERVED.len() || words[..RESERVED.len()] != RESERVED {
            return Err(Error::Invalid("vocabulary file must start with the reserved tokens".into()));
        }
        Ok(Self::new(&words[RESERVED.len()..]))
    }
}

/// Fixed-slot token ids with a validity mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TokenSequence {
    /// `tokens` left-aligned in `slots` positions, PAD elsewhere.
    pub fn from_tokens(tokens: &[usize], slots: usize) -> Result<Self> {
        if tokens.len() > slots {
            return Err(Error::Invalid(format!("{} tokens overflow {slots} slots", tokens.len())));
        }
        let mut ids = vec![PAD; slots];
        ids[..tokens.len()].copy_from_slice(tokens);
        let mask = (0..slots).map(|i| i < tokens.len()).collect();
        Ok(Self { ids, mask })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn real_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn real_tokens(&self) -> Vec<usize> {
        self.ids.iter().zip(&self.mask).filter(|(_, &m)| m).map(|(&i, _)| i).collect()
    }

    /// Slots `[start, end)` as a region.
    pub fn region(&self, start: usize, end: usize) -> Self {
        Self { ids: self.ids[start..end].to_vec(), mask: self.mask[start..end].to_vec() }
    }

    pub fn concat(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.ids.extend_from_slice(&other.ids);
        out.mask.extend_from_slice(&other.mask);
        out
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.ids.len() != self.mask.len() {
            return Err(Error::Invalid("ids and mask lengths differ".into()));
        }
        if let Some(&bad) = self.ids.iter().find(|&&i| i >= vocab_size) {
            return Err(Error::Invalid(format!("token id {bad} outside vocabulary of {vocab_size}")));
        }
        Ok(())
    }
}

/// One prompt/target pair before slot padding.
#[derive(Clone, Debug, PartialEq)]
pub struct StoryExample {
    pub prompt: Vec<usize>,
    pub target: Vec<usize>,
    pub raw_text: (String, String),
}

impl StoryExample {
    /// Tokenises a prompt/target text pair; with `append_eos` the target ends
    /// in an explicit EOS so fixed-slot outputs can be truncated.
    pub fn from_text(vocab: &Vocabulary, prompt: &str, target: &str, append_eos: bool) -> Self {
        let mut t = vocab.encode(target);
        if append_eos {
            t.push(EOS);
        }
        Self { prompt: vocab.encode(prompt), target: t, raw_text: (prompt.to_string(), target.to_string()) }
    }

    pub fn fits(&self, m: usize, n: usize) -> bool {
        self.prompt.len() <= m && self.target.len() <= n - m
    }
}

/// Prompt in slots `[0, m)`, target in `[m, n)`.
pub fn pad_to_slots(example: &StoryExample, m: usize, n: usize) -> Result<TokenSequence> {
    if m == 0 || m >= n {
        return Err(Error::Config(format!("slot split m={m} n={n}")));
    }
    if !example.fits(m, n) {
        return Err(Error::Invalid(format!(
            "example overflows slots: prompt {} > {m} or target {} > {}",
            example.prompt.len(),
            example.target.len(),
            n - m
        )));
    }
    let p = TokenSequence::from_tokens(&example.prompt, m)?;
    let t = TokenSequence::from_tokens(&example.target, n - m)?;
    Ok(p.concat(&t))
}

/// Several fixed-slot sequences stacked row-wise, as fed to the models.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotBatch {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub slots: usize,
}

impl SlotBatch {
    pub fn new(seqs: &[&TokenSequence]) -> Result<Self> {
        let first = seqs.first().ok_or_else(|| Error::Invalid("empty batch".into()))?;
        let slots = first.len();
        if seqs.iter().any(|s| s.len() != slots) {
            return Err(Error::Shape("batch sequences differ in length".into()));
        }
        Ok(Self {
            ids: seqs.iter().flat_map(|s| s.ids.iter().copied()).collect(),
            mask: seqs.iter().flat_map(|s| s.mask.iter().copied()).collect(),
            batch: seqs.len(),
            slots,
        })
    }

    /// Row weights selecting real tokens in slot range `[start, end)` of every
    /// sequence, each scaled by `scale`.
    pub fn weights(&self, start: usize, end: usize, scale: f64) -> Vec<f64> {
        (0..self.ids.len())
            .map(|r| {
                let s = r % self.slots;
                if s >= start && s < end && self.mask[r] { scale } else { 0.0 }
            })
            .collect()
    }

    pub fn count(&self, start: usize, end: usize) -> usize {
        self.weights(start, end, 1.0).iter().filter(|&&w| w > 0.0).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorruptionSpec {
    pub p_drop: f64,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(p_drop: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_drop) {
            return Err(Error::Config(format!("p_drop {p_drop} outside [0, 1]")));
        }
        Ok(Self { p_drop, seed })
    }
}

/// Drops each real token independently with probability `p_drop`; survivors
/// are left-compacted and the region re-padded.
///
/// One uniform draw is consumed per real token in order, so for a fixed seed
/// the dropped set at a lower rate is contained in the dropped set at a
/// higher rate.
pub fn corrupt_draft(target: &TokenSequence, spec: &CorruptionSpec) -> TokenSequence {
    let mut r = rng(spec.seed);
    let kept: Vec<usize> = target
        .real_tokens()
        .into_iter()
        .filter(|_| uniform(&mut r) >= spec.p_drop)
        .collect();
    TokenSequence::from_tokens(&kept, target.len()).expect("kept tokens fit the region")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new(["a", "b", "c", "d"])
    }

    #[test]
    fn reserved_ids_and_roundtrip() {
        let v = vocab();
        assert_eq!(v.id("<pad>"), PAD);
        assert_eq!(v.id("<eos>"), EOS);
        for id in 0..v.size() {
            assert_eq!(v.id(v.token(id)), id);
        }
        assert_eq!(v.decode(&v.encode("a b c")), "a b c");
        assert_eq!(v.encode("a zzz"), vec![v.id("a"), UNK]);
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
    }

    #[test]
    fn pad_empty_target() {
        let v = vocab();
        let ex = StoryExample::from_text(&v, "a b", "", false);
        let s = pad_to_slots(&ex, 4, 8).unwrap();
        assert!(s.ids[4..].iter().all(|&i| i == PAD));
        assert!(s.mask[4..].iter().all(|&m| !m));
    }

    #[test]
    fn pad_full_prompt_and_partial_target() {
        let ex = StoryExample { prompt: vec![4; 16], target: vec![5; 5], raw_text: Default::default() };
        let s = pad_to_slots(&ex, 16, 32).unwrap();
        assert!(s.mask[..16].iter().all(|&m| m));
        assert_eq!(s.mask[16..].iter().filter(|&&m| m).count(), 5);
        let over = StoryExample { prompt: vec![4; 17], ..ex };
        assert!(pad_to_slots(&over, 16, 32).is_err());
    }

    #[test]
    fn corruption_extremes() {
        let t = TokenSequence::from_tokens(&[4, 5, 6, 7], 8).unwrap();
        assert_eq!(corrupt_draft(&t, &CorruptionSpec::new(0.0, 1).unwrap()), t);
        let empty = corrupt_draft(&t, &CorruptionSpec::new(1.0, 1).unwrap());
        assert_eq!(empty.real_count(), 0);
        assert!(empty.ids.iter().all(|&i| i == PAD));
        assert!(CorruptionSpec::new(1.5, 0).is_err());
    }

    #[test]
    fn corruption_keep_rate_binomial() {
        // 10,000 real tokens drawn as 625 regions of 16.
        let region = TokenSequence::from_tokens(&(4..20).collect::<Vec<_>>(), 16).unwrap();
        let kept: usize = (0..625u64)
            .map(|i| corrupt_draft(&region, &CorruptionSpec::new(0.05, 77 + i).unwrap()).real_count())
            .sum();
        // Binomial(10000, 0.95): mean 9500, sd sqrt(10000 * 0.95 * 0.05) = 21.79
        let sd = (10000.0f64 * 0.95 * 0.05).sqrt();
        assert!((kept as f64 - 9500.0).abs() <= 3.0 * sd, "kept {kept}");
    }

    #[test]
    fn corruption_is_nested_across_rates() {
        let region = TokenSequence::from_tokens(&(4..20).collect::<Vec<_>>(), 16).unwrap();
        for seed in 0..50 {
            let lo = corrupt_draft(&region, &CorruptionSpec::new(0.03, seed).unwrap()).real_tokens();
            let hi = corrupt_draft(&region, &CorruptionSpec::new(0.10, seed).unwrap()).real_tokens();
            assert!(hi.iter().all(|t| lo.contains(t)));
        }
    }

    proptest! {
        #[test]
        fn corruption_only_removes(tokens in proptest::collection::vec(4usize..40, 0..16), p in 0.0f64..=1.0, seed: u64) {
            let region = TokenSequence::from_tokens(&tokens, 16).unwrap();
            let out = corrupt_draft(&region, &CorruptionSpec::new(p, seed).unwrap());
            let kept = out.real_tokens();
            // kept tokens form an order-preserving subsequence of the input
            let mut it = tokens.iter();
            for k in &kept {
                prop_assert!(it.any(|t| t == k));
            }
            prop_assert_eq!(out.len(), 16);
            // mask is a prefix
            let n = out.real_count();
            prop_assert!(out.mask[..n].iter().all(|&m| m));
            prop_assert!(out.mask[n..].iter().all(|&m| !m));
        }

        #[test]
        fn tokenizer_roundtrip(words in proptest::collection::vec(0usize..4, 0..20)) {
            let v = vocab();
            let text = words.iter().map(|&i| ["a", "b", "c", "d"][i]).collect::<Vec<_>>().join(" ");
            prop_assert_eq!(v.decode(&v.encode(&text)), text);
        }
    }
}
