//! Text tokenizers and the frozen English stopword list.

use alloc::string::String;
use alloc::vec::Vec;

/// Version tag carried by every metric report and enriched record.
pub const TOKENIZER_VERSION: &str = "punct-split-v1";

/// Frozen copy of the NLTK English stopword list (179 entries).
pub const STOPWORDS: [&str; 179] = [
    "i", "me", "my", "myself", "we", "our", "ours", "ourselves", "you", "you're", "you've",
    "you'll", "you'd", "your", "yours", "yourself", "yourselves", "he", "him", "his", "himself",
    "she", "she's", "her", "hers", "herself", "it", "it's", "its", "itself", "they", "them",
    "their", "theirs", "themselves", "what", "which", "who", "whom", "this", "that", "that'll",
    "these", "those", "am", "is", "are", "was", "were", "be", "been", "being", "have", "has",
    "had", "having", "do", "does", "did", "doing", "a", "an", "the", "and", "but", "if", "or",
    "because", "as", "until", "while", "of", "at", "by", "for", "with", "about", "against",
    "between", "into", "through", "during", "before", "after", "above", "below", "to", "from",
    "up", "down", "in", "out", "on", "off", "over", "under", "again", "further", "then", "once",
    "here", "there", "when", "where", "why", "how", "all", "any", "both", "each", "few", "more",
    "most", "other", "some", "such", "no", "nor", "not", "only", "own", "same", "so", "than",
    "too", "very", "s", "t", "can", "will", "just", "don", "don't", "should", "should've", "now",
    "d", "ll", "m", "o", "re", "ve", "y", "ain", "aren", "aren't", "couldn", "couldn't", "didn",
    "didn't", "doesn", "doesn't", "hadn", "hadn't", "hasn", "hasn't", "haven", "haven't", "isn",
    "isn't", "ma", "mightn", "mightn't", "mustn", "mustn't", "needn", "needn't", "shan",
    "shan't", "shouldn", "shouldn't", "wasn", "wasn't", "weren", "weren't", "won", "won't",
    "wouldn", "wouldn't",
];

pub fn is_stopword(token: &str) -> bool {
    let lower = lowercase(token);
    STOPWORDS.iter().any(|s| *s == lower)
}

/// A token is sent to the knowledge source only if it is not a stopword and
/// carries at least one alphanumeric character.
pub fn is_queryable(token: &str) -> bool {
    !token.is_empty() && token.chars().any(char::is_alphanumeric) && !is_stopword(token)
}

pub fn lowercase(text: &str) -> String {
    text.chars().flat_map(char::to_lowercase).collect()
}

/// Lowercase + whitespace split. Used for dataset statistics.
pub fn whitespace_tokens(text: &str) -> Vec<String> {
    lowercase(text).split_whitespace().map(String::from).collect()
}

/// Lowercase tokenizer that splits punctuation into standalone tokens.
///
/// Alphanumeric runs form words; an apostrophe stays inside a word when it
/// sits between two alphanumeric characters ("don't"). Any other
/// non-whitespace character becomes its own token.
pub fn word_tokens(text: &str) -> Vec<String> {
    let chars: Vec<char> = lowercase(text).chars().collect();
    let mut out = Vec::new();
    let mut current = String::new();
    for (i, &c) in chars.iter().enumerate() {
        if c.is_alphanumeric() {
            current.push(c);
            continue;
        }
        let inner_apostrophe = (c == '\'' || c == '\u{2019}')
            && !current.is_empty()
            && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric());
        if inner_apostrophe {
            current.push('\'');
            continue;
        }
        if !current.is_empty() {
            out.push(core::mem::take(&mut current));
        }
        if !c.is_whitespace() {
            out.push(String::from(c));
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}
