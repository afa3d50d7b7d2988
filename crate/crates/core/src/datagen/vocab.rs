use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Output task selected by the task token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    Asr,
    /// Translate into the given target language.
    Translate(usize),
}

/// Dense token layout shared by every CTC head and the prompt encoder.
///
/// ```text
/// 0                      blank
/// 1 ..= K·M              language symbols, M per language
/// then K                 <lang-k>
/// then 1                 <nolang>
/// then 1                 <asr>
/// then K                 <st-k>
/// then 1                 <na>
/// ```
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    num_languages: usize,
    symbols_per_language: usize,
    size: usize,
}

impl Vocabulary {
    pub const BLANK: usize = 0;

    pub fn new(num_languages: usize, symbols_per_language: usize) -> Result<Self> {
        if num_languages < 2 {
            return Err(Error::config("need at least two languages"));
        }
        if symbols_per_language == 0 {
            return Err(Error::config("languages need at least one symbol"));
        }
        let size = 1 + num_languages * symbols_per_language + 2 * num_languages + 3;
        if size > u16::MAX as usize {
            return Err(Error::config("vocabulary does not fit 16-bit ids"));
        }
        Ok(Vocabulary {
            num_languages,
            symbols_per_language,
            size,
        })
    }

    /// Re-derives the size from the layout; used after deserializing.
    pub fn validate(&self) -> Result<()> {
        let expected = Vocabulary::new(self.num_languages, self.symbols_per_language)?;
        if expected.size != self.size {
            return Err(Error::config(format!(
                "vocabulary size {} does not match layout ({})",
                self.size, expected.size
            )));
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn num_languages(&self) -> usize {
        self.num_languages
    }

    pub fn symbols_per_language(&self) -> usize {
        self.symbols_per_language
    }

    pub fn blank(&self) -> usize {
        Self::BLANK
    }

    fn specials_base(&self) -> usize {
        1 + self.num_languages * self.symbols_per_language
    }

    pub fn symbol(&self, lang: usize, index: usize) -> usize {
        debug_assert!(lang < self.num_languages && index < self.symbols_per_language);
        1 + lang * self.symbols_per_language + index
    }

    pub fn symbol_range(&self, lang: usize) -> Range<usize> {
        let start = 1 + lang * self.symbols_per_language;
        start..start + self.symbols_per_language
    }

    /// Language whose symbol range contains `id`.
    pub fn language_of_symbol(&self, id: usize) -> Option<usize> {
        (id >= 1 && id < self.specials_base()).then(|| (id - 1) / self.symbols_per_language)
    }

    pub fn symbol_index(&self, id: usize) -> Option<usize> {
        self.language_of_symbol(id).map(|_| (id - 1) % self.symbols_per_language)
    }

    pub fn lang_token(&self, lang: usize) -> usize {
        self.specials_base() + lang
    }

    pub fn language_of_token(&self, id: usize) -> Option<usize> {
        let base = self.specials_base();
        (id >= base && id < base + self.num_languages).then(|| id - base)
    }

    pub fn nolang(&self) -> usize {
        self.specials_base() + self.num_languages
    }

    pub fn asr(&self) -> usize {
        self.nolang() + 1
    }

    pub fn st_token(&self, lang: usize) -> usize {
        self.asr() + 1 + lang
    }

    pub fn na(&self) -> usize {
        self.asr() + 1 + self.num_languages
    }

    pub fn task_token(&self, task: Task) -> usize {
        match task {
            Task::Asr => self.asr(),
            Task::Translate(k) => self.st_token(k),
        }
    }

    pub fn task_of_token(&self, id: usize) -> Option<Task> {
        if id == self.asr() {
            Some(Task::Asr)
        } else if id > self.asr() && id < self.na() {
            Some(Task::Translate(id - self.asr() - 1))
        } else {
            None
        }
    }

    pub fn is_symbol(&self, id: usize) -> bool {
        self.language_of_symbol(id).is_some()
    }

    pub fn is_special(&self, id: usize) -> bool {
        id >= self.specials_base() && id < self.size
    }

    /// Tokens that may stand in the language slot of the encoder input.
    pub fn is_lang_input(&self, id: usize) -> bool {
        self.language_of_token(id).is_some() || id == self.nolang()
    }

    /// Human-readable name, e.g. `s1.4`, `<lang-2>`, `<st-0>`.
    pub fn token_name(&self, id: usize) -> String {
        if id == Self::BLANK {
            "<blank>".into()
        } else if let Some(l) = self.language_of_symbol(id) {
            format!("s{l}.{}", (id - 1) % self.symbols_per_language)
        } else if let Some(l) = self.language_of_token(id) {
            format!("<lang-{l}>")
        } else if id == self.nolang() {
            "<nolang>".into()
        } else if id == self.asr() {
            "<asr>".into()
        } else if let Some(Task::Translate(k)) = self.task_of_token(id) {
            format!("<st-{k}>")
        } else if id == self.na() {
            "<na>".into()
        } else {
            format!("<unk:{id}>")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_follows_layout() {
        // 1 blank + 30 symbols + (3 lang + nolang + asr + 3 st + na)
        assert_eq!(Vocabulary::new(3, 10).unwrap().size(), 40);
        // 1 blank + 10 symbols + (2 lang + nolang + asr + 2 st + na)
        assert_eq!(Vocabulary::new(2, 5).unwrap().size(), 18);
        assert_eq!(Vocabulary::new(3, 12).unwrap().size(), 46);
    }

    #[test]
    fn construction_is_deterministic() {
        assert_eq!(Vocabulary::new(3, 10).unwrap(), Vocabulary::new(3, 10).unwrap());
    }

    #[test]
    fn rejects_degenerate_layouts() {
        assert!(Vocabulary::new(1, 10).is_err());
        assert!(Vocabulary::new(3, 0).is_err());
    }

    #[test]
    fn ids_are_dense_and_distinct() {
        let v = Vocabulary::new(3, 4).unwrap();
        let mut ids = vec![v.blank()];
        for l in 0..3 {
            ids.extend(v.symbol_range(l));
        }
        ids.extend((0..3).map(|l| v.lang_token(l)));
        ids.push(v.nolang());
        ids.push(v.asr());
        ids.extend((0..3).map(|l| v.st_token(l)));
        ids.push(v.na());
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), ids.len());
        assert_eq!(sorted, (0..v.size()).collect::<Vec<_>>());
    }

    #[test]
    fn classification_round_trips() {
        let v = Vocabulary::new(3, 4).unwrap();
        for l in 0..3 {
            for i in 0..4 {
                let s = v.symbol(l, i);
                assert_eq!(v.language_of_symbol(s), Some(l));
                assert_eq!(v.symbol_index(s), Some(i));
                assert!(!v.is_special(s));
            }
            assert_eq!(v.language_of_token(v.lang_token(l)), Some(l));
            assert_eq!(v.task_of_token(v.st_token(l)), Some(Task::Translate(l)));
        }
        assert_eq!(v.task_of_token(v.asr()), Some(Task::Asr));
        assert_eq!(v.task_of_token(v.na()), None);
        assert!(v.is_lang_input(v.nolang()));
        assert!(!v.is_lang_input(v.asr()));
        assert!(!v.is_special(v.blank()));
    }
}
