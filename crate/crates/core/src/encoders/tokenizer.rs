use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const END: usize = 2;

/// Words of the hand-crafted query template.
pub const TEMPLATE: &str = "a photo of {}";

/// Fixed word vocabulary: the reserved ids, the template words, then class
/// names in the order given.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn split_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

impl Vocabulary {
    pub fn new<'a>(class_names: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self {
            words: vec!["<pad>".into(), "<unk>".into(), "<end>".into()],
            index: HashMap::new(),
        };
        for (i, w) in v.words.iter().enumerate() {
            v.index.insert(w.clone(), i);
        }
        let template_words = split_words(&TEMPLATE.replace("{}", ""));
        for w in template_words
            .into_iter()
            .chain(class_names.into_iter().flat_map(split_words))
        {
            if !v.index.contains_key(&w) {
                v.index.insert(w.clone(), v.words.len());
                v.words.push(w);
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Token ids padded to `max_len`, with the end token placed after the
    /// last kept word. Overlong input keeps its first `max_len - 1` words.
    pub fn tokenize(&self, text: &str, max_len: usize) -> TokenizedQuery {
        assert!(max_len >= 1, "max_len must leave room for the end token");
        let words = split_words(text);
        let keep = words.len().min(max_len - 1);
        let mut ids: Vec<usize> = words[..keep].iter().map(|w| self.id(w)).collect();
        let end_pos = ids.len();
        ids.push(END);
        ids.resize(max_len, PAD);
        TokenizedQuery {
            ids,
            end_pos,
            truncated: words.len() > keep,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedQuery {
    pub ids: Vec<usize>,
    pub end_pos: usize,
    pub truncated: bool,
}

/// Tokenized "a photo of {class}" query for every class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassPromptSet {
    pub classes: Vec<String>,
    pub queries: Vec<TokenizedQuery>,
}

impl ClassPromptSet {
    pub fn new(vocab: &Vocabulary, classes: &[String], max_len: usize) -> Self {
        let queries = classes
            .iter()
            .map(|c| vocab.tokenize(&TEMPLATE.replace("{}", c), max_len))
            .collect();
        Self {
            classes: classes.to_vec(),
            queries,
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// JSON object: class name → token ids.
    pub fn to_json(&self) -> serde_json::Value {
        let map: BTreeMap<&str, &Vec<usize>> = self
            .classes
            .iter()
            .zip(&self.queries)
            .map(|(c, q)| (c.as_str(), &q.ids))
            .collect();
        serde_json::to_value(map).expect("string keys serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizes_with_end_and_padding() {
        let v = Vocabulary::new(["cat", "dog"]);
        let q = v.tokenize("A photo, of CAT!", 8);
        assert_eq!(q.ids[..5], [v.id("a"), v.id("photo"), v.id("of"), v.id("cat"), END]);
        assert!(q.ids[5..].iter().all(|&i| i == PAD));
        assert_eq!(q.end_pos, 4);
        assert!(!q.truncated);
    }

    #[test]
    fn empty_and_overlong_queries() {
        let v = Vocabulary::new(["cat"]);
        let q = v.tokenize("", 4);
        assert_eq!(q.ids, vec![END, PAD, PAD, PAD]);
        assert_eq!(q.end_pos, 0);
        let q = v.tokenize("a a a a a a", 4);
        assert_eq!(q.end_pos, 3);
        assert!(q.truncated);
        assert_eq!(q.ids[3], END);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = Vocabulary::new(["cat"]);
        assert_eq!(v.tokenize("zebra", 4).ids[0], UNK);
    }

    #[test]
    fn class_prompt_json() {
        let v = Vocabulary::new(["cat"]);
        let set = ClassPromptSet::new(&v, &["cat".to_string()], 6);
        let j = set.to_json();
        assert_eq!(j["cat"].as_array().unwrap().len(), 6);
    }
}
