//! Closed-grammar word-level tokenizer and the diagnosis label set.
//!
//! The vocabulary is built from the finite template grammar of the synthetic
//! record generator, so tokenize/detokenize round-trips losslessly on every
//! generated text. Specials occupy fixed ids: `<pad>`=0, `<bos>`=1,
//! `<eos>`=2, `question:`=3, `answer:`=4.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const QUESTION_MARKER_ID: u32 = 3;
pub const ANSWER_MARKER_ID: u32 = 4;

pub const QUESTION_MARKER: &str = "question:";
pub const ANSWER_MARKER: &str = "answer:";

/// The diagnosis question, fixed across the whole task.
pub const QUESTION_TEXT: &str = "what will this subject be diagnosed with ?";

/// Three-way diagnosis label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DiagnosisClass {
    Nc,
    Mci,
    Dem,
}

impl DiagnosisClass {
    pub const ALL: [DiagnosisClass; 3] = [DiagnosisClass::Nc, DiagnosisClass::Mci, DiagnosisClass::Dem];

    pub fn label(self) -> &'static str {
        match self {
            DiagnosisClass::Nc => "NC",
            DiagnosisClass::Mci => "MCI",
            DiagnosisClass::Dem => "DEM",
        }
    }

    /// Canonical answer string generated for and matched against decodes.
    pub fn answer(self) -> &'static str {
        match self {
            DiagnosisClass::Nc => "non demented",
            DiagnosisClass::Mci => "mild cognitive impairment",
            DiagnosisClass::Dem => "dementia",
        }
    }

    pub fn index(self) -> usize {
        match self {
            DiagnosisClass::Nc => 0,
            DiagnosisClass::Mci => 1,
            DiagnosisClass::Dem => 2,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "NC" => Ok(DiagnosisClass::Nc),
            "MCI" => Ok(DiagnosisClass::Mci),
            "DEM" => Ok(DiagnosisClass::Dem),
            other => Err(Error::invalid(format!("unknown class label `{other}`"))),
        }
    }
}

/// Bijective word <-> id mapping over the closed grammar.
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Build the full grammar vocabulary: specials at their fixed ids, then
    /// every word any generated text can contain, sorted for determinism.
    pub fn grammar() -> Self {
        let mut words: Vec<String> = vec![
            "<pad>".into(),
            "<bos>".into(),
            "<eos>".into(),
            QUESTION_MARKER.into(),
            ANSWER_MARKER.into(),
        ];
        let mut body: BTreeSet<String> = BTreeSet::new();
        for w in [
            // record template
            "subject", "aged", "sex", "male", "female", "education", "years", "ses", "mmse",
            "score", "cdr", "rating", "logical", "memory",
            // question
            "what", "will", "this", "be", "diagnosed", "with", "?",
            // answers
            "non", "demented", "mild", "cognitive", "impairment", "dementia",
            // cdr fractional value
            "0.5",
        ] {
            body.insert(w.to_string());
        }
        for n in 0..=30u32 {
            body.insert(n.to_string());
        }
        for n in 40..=95u32 {
            body.insert(n.to_string());
        }
        words.extend(body);
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Vocabulary { words, index }
    }

    pub fn size(&self) -> usize {
        self.words.len()
    }

    pub fn id_of(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Result<&str> {
        self.words
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::OutOfVocab {
                id,
                vocab: self.words.len(),
            })
    }

    /// Lowercase, whitespace-split word ids. No specials are inserted.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        let lowered = text.to_lowercase();
        let mut out = Vec::new();
        for word in lowered.split_whitespace() {
            match self.index.get(word) {
                Some(&id) => out.push(id),
                None => {
                    return Err(Error::OutOfGrammar { word: word.into() });
                }
            }
        }
        Ok(out)
    }

    pub fn detokenize(&self, ids: &[u32]) -> Result<String> {
        let words: Vec<&str> = ids
            .iter()
            .map(|&id| self.word(id))
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }
}
