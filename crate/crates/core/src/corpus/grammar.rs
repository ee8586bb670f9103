use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{StoryExample, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::rng::{derive_seed, rng, SeededRng};

/// Built-in story grammar. Prompt sentences introduce an entity and a set of
/// lexical bindings; continuation sentences reuse them, so the target is
/// largely predictable from the prompt. Words written with a `##` suffix
/// piece emulate rare multi-piece tokens.
pub const DEFAULT_GRAMMAR: &str = r#"
prompt_sentences = 2
continuation_sentences = 2

entities = [
  { name = "anna", pronoun = "she", possessive = "her" },
  { name = "ben", pronoun = "he", possessive = "his" },
  { name = "carla", pronoun = "she", possessive = "her" },
  { name = "david", pronoun = "he", possessive = "his" },
  { name = "emma", pronoun = "she", possessive = "her" },
  { name = "frank", pronoun = "he", possessive = "his" },
  { name = "grace", pronoun = "she", possessive = "her" },
  { name = "henry", pronoun = "he", possessive = "his" },
  { name = "iris", pronoun = "she", possessive = "her" },
  { name = "jack", pronoun = "he", possessive = "his" },
  { name = "kate", pronoun = "she", possessive = "her" },
  { name = "leo", pronoun = "he", possessive = "his" },
  { name = "mia", pronoun = "she", possessive = "her" },
  { name = "noah", pronoun = "he", possessive = "his" },
  { name = "olga", pronoun = "she", possessive = "her" },
  { name = "paul", pronoun = "he", possessive = "his" },
  { name = "rosa", pronoun = "she", possessive = "her" },
  { name = "sam", pronoun = "he", possessive = "his" },
  { name = "tina", pronoun = "she", possessive = "her" },
  { name = "victor", pronoun = "he", possessive = "his" },
]

prompt_templates = [
  "{name} went to the {place} .",
  "{name} wanted a new {object} !",
  "{name} lived near the {place} .",
  "{name} was a {adjective} {role} .",
  "{name} met {friend} at the {place} !",
  "one day {pronoun} {verb} a {object} .",
  "{pronoun} asked {friend} about the {object} !",
  "{pronoun} felt {feeling} that {time} .",
]

continuation_templates = [
  "{pronoun} found the {object} there .",
  "{friend} {verb} the {object} too !",
  "{pronoun} took the {object} home .",
  "then {name} felt {feeling} !",
  "{name} thanked {friend} .",
  "{possessive} {object} was very {adjective} !",
  "they left {time} .",
  "{friend} laughed at {name} !",
  "later {pronoun} {verb} it again .",
  "the {object} made {name} {feeling} !",
  "{name} and {friend} left together .",
  "{pronoun} {verb} a {adjective} {object} !",
]

[lexicon]
place = ["park", "market", "beach", "library", "school", "office", "garden", "station", "museum", "harbor", "forest", "bakery", "stadium", "river", "farm", "cinema", "hospital", "castle", "zoo", "lake", "carn ##ival", "obser ##vatory"]
object = ["book", "bike", "lamp", "kite", "phone", "hat", "cake", "ball", "guitar", "camera", "map", "ticket", "letter", "umbrella", "clock", "puppy", "ring", "painting", "scarf", "basket", "violin", "key", "tele ##scope", "harmon ##ica", "kaleido ##scope"]
adjective = ["happy", "tall", "quiet", "brave", "clever", "kind", "busy", "shy", "loud", "old", "young", "tired", "bright", "strange", "gentle"]
role = ["teacher", "doctor", "baker", "farmer", "painter", "student", "driver", "singer", "nurse", "pilot", "quarter ##back", "libr ##arian"]
verb = ["bought", "found", "lost", "fixed", "painted", "cleaned", "sold", "borrowed", "carried", "dropped", "hid", "wrapped", "opened", "broke", "shared"]
feeling = ["glad", "sad", "proud", "nervous", "excited", "angry", "calm", "lucky", "curious", "bored", "grateful"]
time = ["that morning", "that night", "at noon", "all day", "on sunday", "after lunch", "before dinner"]
"#;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Entity {
    pub name: String,
    pub pronoun: String,
    pub possessive: String,
}

/// Probabilistic template grammar.
///
/// Placeholders: `{name}`, `{pronoun}`, `{possessive}` refer to the story's
/// main entity, `{friend}` to a second distinct entity, and `{category}` to a
/// lexicon entry. Every placeholder is bound once per story, so repeated
/// references corefer.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GrammarConfig {
    pub prompt_sentences: usize,
    pub continuation_sentences: usize,
    pub entities: Vec<Entity>,
    pub prompt_templates: Vec<String>,
    pub continuation_templates: Vec<String>,
    pub lexicon: BTreeMap<String, Vec<String>>,
}

const ENTITY_SLOTS: [&str; 4] = ["name", "pronoun", "possessive", "friend"];

enum Piece<'a> {
    Word(&'a str),
    Slot(&'a str),
}

fn pieces(template: &str) -> impl Iterator<Item = Piece<'_>> {
    template.split_whitespace().map(|w| {
        if let Some(inner) = w.strip_prefix('{').and_then(|s| s.strip_suffix('}')) {
            Piece::Slot(inner)
        } else {
            Piece::Word(w)
        }
    })
}

impl GrammarConfig {
    pub fn default_grammar() -> Self {
        Self::from_toml(DEFAULT_GRAMMAR).expect("built-in grammar parses")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let g: Self = toml::from_str(text).map_err(|e| Error::Grammar(e.to_string()))?;
        g.check_structure()?;
        Ok(g)
    }

    fn check_structure(&self) -> Result<()> {
        if self.prompt_sentences < 2 || self.continuation_sentences < 2 {
            return Err(Error::Grammar("need at least 2 prompt and 2 continuation sentences".into()));
        }
        if self.prompt_templates.len() < self.prompt_sentences
            || self.continuation_templates.len() < self.continuation_sentences
        {
            return Err(Error::Grammar("fewer templates than sentences per story".into()));
        }
        if self.entities.len() < 2 {
            return Err(Error::Grammar("need at least 2 entities".into()));
        }
        for t in self.prompt_templates.iter().chain(&self.continuation_templates) {
            for p in pieces(t) {
                if let Piece::Slot(s) = p {
                    if !ENTITY_SLOTS.contains(&s) && !self.lexicon.contains_key(s) {
                        return Err(Error::Grammar(format!("template {t:?} uses unknown slot {{{s}}}")));
                    }
                }
            }
        }
        if let Some((k, _)) = self.lexicon.iter().find(|(_, v)| v.is_empty()) {
            return Err(Error::Grammar(format!("lexicon category {k} is empty")));
        }
        let v = self.vocabulary();
        if v.size() > 512 {
            return Err(Error::Grammar(format!("vocabulary of {} exceeds 512 tokens", v.size())));
        }
        Ok(())
    }

    /// Every token the grammar can emit, after the reserved tokens, in order
    /// of first appearance.
    pub fn vocabulary(&self) -> Vocabulary {
        let mut words: Vec<String> = Vec::new();
        let mut seen = BTreeSet::new();
        let mut add = |w: &str| {
            if seen.insert(w.to_string()) {
                words.push(w.to_string());
            }
        };
        for e in &self.entities {
            add(&e.name);
            add(&e.pronoun);
            add(&e.possessive);
        }
        for t in self.prompt_templates.iter().chain(&self.continuation_templates) {
            for p in pieces(t) {
                if let Piece::Word(w) = p {
                    add(w);
                }
            }
        }
        for entries in self.lexicon.values() {
            for e in entries {
                e.split_whitespace().for_each(&mut add);
            }
        }
        Vocabulary::new(words)
    }

    fn slot_max_len(&self, slot: &str) -> usize {
        match self.lexicon.get(slot) {
            Some(entries) => entries.iter().map(|e| e.split_whitespace().count()).max().unwrap_or(0),
            None => 1,
        }
    }

    fn template_max_len(&self, t: &str) -> usize {
        pieces(t)
            .map(|p| match p {
                Piece::Word(_) => 1,
                Piece::Slot(s) => self.slot_max_len(s),
            })
            .sum()
    }

    /// Worst-case check that any story fits `prompt_budget` prompt tokens and
    /// `target_budget` target tokens (`reserve` extra target tokens, e.g. EOS).
    pub fn check_budgets(&self, prompt_budget: usize, target_budget: usize, reserve: usize) -> Result<()> {
        let check = |templates: &[String], k: usize, budget: usize, what: &str| -> Result<()> {
            let mut lens: Vec<(usize, &String)> = templates.iter().map(|t| (self.template_max_len(t), t)).collect();
            lens.sort_by_key(|l| std::cmp::Reverse(l.0));
            let worst: usize = lens.iter().take(k).map(|l| l.0).sum();
            if worst > budget {
                return Err(Error::Grammar(format!(
                    "{what} can reach {worst} tokens, over the budget of {budget}; offending template {:?}",
                    lens[0].1
                )));
            }
            Ok(())
        };
        check(&self.prompt_templates, self.prompt_sentences, prompt_budget, "prompt")?;
        check(
            &self.continuation_templates,
            self.continuation_sentences,
            target_budget.saturating_sub(reserve),
            "continuation",
        )
    }

    fn realize(&self, templates: &[&String], bindings: &mut HashMap<String, String>, r: &mut SeededRng) -> String {
        let mut out: Vec<String> = Vec::new();
        for t in templates {
            for p in pieces(t) {
                match p {
                    Piece::Word(w) => out.push(w.to_string()),
                    Piece::Slot(s) => {
                        let v = bindings.entry(s.to_string()).or_insert_with(|| {
                            let entries = &self.lexicon[s];
                            entries[r.random_range(0..entries.len())].clone()
                        });
                        out.push(v.clone());
                    }
                }
            }
        }
        out.join(" ")
    }

    fn pick<'a>(templates: &'a [String], k: usize, r: &mut SeededRng) -> Vec<&'a String> {
        let mut idx: Vec<usize> = (0..templates.len()).collect();
        for i in 0..k {
            let j = r.random_range(i..idx.len());
            idx.swap(i, j);
        }
        idx[..k].iter().map(|&i| &templates[i]).collect()
    }

    /// One story from a dedicated stream.
    pub fn sample_story(&self, r: &mut SeededRng) -> (String, String) {
        let main = r.random_range(0..self.entities.len());
        let mut friend = r.random_range(0..self.entities.len() - 1);
        if friend >= main {
            friend += 1;
        }
        let e = &self.entities[main];
        let mut bindings: HashMap<String, String> = HashMap::from([
            ("name".to_string(), e.name.clone()),
            ("pronoun".to_string(), e.pronoun.clone()),
            ("possessive".to_string(), e.possessive.clone()),
            ("friend".to_string(), self.entities[friend].name.clone()),
        ]);
        let p = Self::pick(&self.prompt_templates, self.prompt_sentences, r);
        let c = Self::pick(&self.continuation_templates, self.continuation_sentences, r);
        let prompt = self.realize(&p, &mut bindings, r);
        let cont = self.realize(&c, &mut bindings, r);
        (prompt, cont)
    }
}

/// Deterministic synthetic corpus. Example `i` draws from a stream derived
/// from `(seed, i)`, so the corpus is a pure function of its arguments.
pub fn generate_corpus(
    seed: u64,
    count: usize,
    grammar: &GrammarConfig,
    m: usize,
    n: usize,
    append_eos: bool,
) -> Result<Vec<StoryExample>> {
    if count == 0 {
        return Err(Error::Config("corpus count must be >= 1".into()));
    }
    if m == 0 || m >= n {
        return Err(Error::Config(format!("slot split m={m} n={n}")));
    }
    grammar.check_budgets(m, n - m, usize::from(append_eos))?;
    let vocab = grammar.vocabulary();
    let out: Vec<StoryExample> = (0..count)
        .map(|i| {
            let mut r = rng(derive_seed(seed, i as u64));
            let (p, t) = grammar.sample_story(&mut r);
            StoryExample::from_text(&vocab, &p, &t, append_eos)
        })
        .collect();
    debug_assert!(out.iter().all(|e| e.fits(m, n)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{EOS, UNK};

    #[test]
    fn deterministic_given_seed() {
        let g = GrammarConfig::default_grammar();
        let a = generate_corpus(1337, 3, &g, 16, 32, true).unwrap();
        let b = generate_corpus(1337, 3, &g, 16, 32, true).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(1338, 3, &g, 16, 32, true).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn fits_budgets_and_has_no_unknowns() {
        let g = GrammarConfig::default_grammar();
        let corpus = generate_corpus(1337, 2000, &g, 16, 32, true).unwrap();
        for e in &corpus {
            assert!(e.prompt.len() <= 16 && e.target.len() <= 16);
            assert!(!e.prompt.contains(&UNK) && !e.target.contains(&UNK));
            assert_eq!(*e.target.last().unwrap(), EOS);
        }
    }

    // Independent count over the emitted text (not the id stream).
    #[test]
    fn target_unigrams_are_diverse() {
        let g = GrammarConfig::default_grammar();
        let corpus = generate_corpus(1337, 2000, &g, 16, 32, true).unwrap();
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut total = 0usize;
        for e in &corpus {
            for w in e.raw_text.1.split_whitespace() {
                *counts.entry(w).or_default() += 1;
                total += 1;
            }
        }
        let max = counts.values().copied().max().unwrap() as f64 / total as f64;
        assert!(counts.len() >= 50, "{} distinct", counts.len());
        assert!(max <= 0.15, "max unigram frequency {max}");
    }

    #[test]
    fn continuation_shares_prompt_entities() {
        let g = GrammarConfig::default_grammar();
        let corpus = generate_corpus(7, 500, &g, 16, 32, false).unwrap();
        let shared = corpus
            .iter()
            .filter(|e| e.target.iter().any(|t| e.prompt.contains(t) && *t > 3))
            .count();
        assert!(shared as f64 / corpus.len() as f64 > 0.9);
    }

    #[test]
    fn over_budget_template_is_named() {
        let mut g = GrammarConfig::default_grammar();
        g.continuation_templates.push("a b c d e f g h i j k l m n o p q".into());
        let err = generate_corpus(1, 10, &g, 16, 32, true).unwrap_err();
        assert!(err.to_string().contains("a b c d e f g h i j k l m n o p q"), "{err}");
    }

    #[test]
    fn unknown_slot_rejected() {
        let mut text = DEFAULT_GRAMMAR.to_string();
        text = text.replace("\"then {name} felt {feeling} !\"", "\"then {name} felt {mood} !\"");
        assert!(GrammarConfig::from_toml(&text).is_err());
        assert!(GrammarConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn vocabulary_is_small() {
        let v = GrammarConfig::default_grammar().vocabulary();
        assert!(v.size() <= 512);
        assert!(v.size() > 100);
    }
}
