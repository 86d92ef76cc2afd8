//! Text helpers shared by every stage: label normalization, the default
//! token counter, sentence segmentation and the small lexical heuristics the
//! deterministic rulebook relies on.

use std::collections::HashSet;
use std::ops::Range;
use std::sync::OnceLock;

use regex::Regex;

/// Equality key for labels: trimmed, internal whitespace collapsed, lowercased.
pub fn normalize_label(label: &str) -> String {
    collapse_whitespace(label).to_lowercase()
}

/// Stored form of a label: trimmed and whitespace-collapsed, casing kept.
pub fn clean_label(label: &str) -> String {
    collapse_whitespace(label)
}

pub fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Answer normalization used by the exact matcher and the ERR audit:
/// lowercase, trim, collapse whitespace, strip terminal punctuation.
pub fn normalize_answer(text: &str) -> String {
    let collapsed = collapse_whitespace(text).to_lowercase();
    collapsed
        .trim_end_matches(|c: char| matches!(c, '.' | ',' | ';' | ':' | '!' | '?'))
        .trim()
        .to_string()
}

/// Token counter used for context budgets.
pub trait Tokenizer: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

/// Counts maximal alphanumeric runs plus every other non-whitespace character.
#[derive(Debug, Clone, Copy, Default)]
pub struct WordPunctTokenizer;

impl Tokenizer for WordPunctTokenizer {
    fn count(&self, text: &str) -> usize {
        let mut count = 0;
        let mut in_word = false;
        for c in text.chars() {
            if c.is_alphanumeric() {
                if !in_word {
                    count += 1;
                    in_word = true;
                }
            } else {
                in_word = false;
                if !c.is_whitespace() {
                    count += 1;
                }
            }
        }
        count
    }
}

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?' | '…')
}

fn is_closer(c: char) -> bool {
    matches!(c, '"' | '\'' | ')' | ']' | '”' | '’' | '»')
}

/// Byte offsets just past each sentence terminator (and any closing quotes)
/// that is followed by whitespace or the end of the text.
pub fn sentence_ends(text: &str) -> Vec<usize> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut ends = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let (_, c) = chars[i];
        if is_terminator(c) {
            let mut j = i + 1;
            while j < chars.len() && (is_terminator(chars[j].1) || is_closer(chars[j].1)) {
                j += 1;
            }
            let at_break = j == chars.len() || chars[j].1.is_whitespace();
            if at_break {
                let end = if j == chars.len() { text.len() } else { chars[j].0 };
                ends.push(end);
            }
            i = j;
        } else {
            i += 1;
        }
    }
    ends
}

/// Sentence spans, leading whitespace excluded. Text after the final
/// terminator forms a trailing unterminated sentence.
pub fn sentence_spans(text: &str) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    let mut start = 0;
    let push = |from: usize, to: usize, spans: &mut Vec<Range<usize>>| {
        let slice = &text[from..to];
        let lead = slice.len() - slice.trim_start().len();
        let from = from + lead;
        if from < to {
            spans.push(from..to);
        }
    };
    for end in sentence_ends(text) {
        push(start, end, &mut spans);
        start = end;
    }
    if start < text.len() && !text[start..].trim().is_empty() {
        let trimmed_end = start + text[start..].trim_end().len();
        push(start, trimmed_end, &mut spans);
    }
    spans
}

pub fn split_sentences(text: &str) -> Vec<&str> {
    sentence_spans(text).into_iter().map(|r| &text[r]).collect()
}

pub fn first_sentence(text: &str) -> &str {
    sentence_spans(text)
        .first()
        .map(|r| &text[r.clone()])
        .unwrap_or_else(|| text.trim())
}

pub fn ends_with_terminator(text: &str) -> bool {
    let trimmed = text.trim_end();
    let core = trimmed.trim_end_matches(is_closer);
    core.chars().last().is_some_and(is_terminator)
}

/// Truncates to at most `max_chars` characters, backing off to a word
/// boundary when one exists in the kept prefix.
pub fn truncate_chars(text: &str, max_chars: usize) -> String {
    if text.chars().count() <= max_chars {
        return text.to_string();
    }
    let cut: String = text.chars().take(max_chars).collect();
    match cut.rfind(char::is_whitespace) {
        Some(pos) if pos > 0 => cut[..pos].trim_end().to_string(),
        _ => cut,
    }
}

/// Lowercase alphanumeric word tokens.
pub fn word_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

const STOPWORDS: &[&str] = &[
    "a", "about", "after", "all", "also", "am", "an", "and", "any", "are", "as", "at", "be",
    "been", "before", "being", "but", "by", "can", "could", "did", "do", "does", "for", "from",
    "had", "has", "have", "he", "her", "here", "his", "how", "i", "if", "in", "into", "is", "it",
    "its", "just", "let", "ll", "me", "more", "my", "of", "on", "or", "our", "s", "she", "so",
    "some", "than", "that", "the", "their", "them", "then", "there", "these", "they", "this",
    "those", "to", "up", "us", "was", "we", "were", "what", "when", "where", "which", "while",
    "who", "why", "will", "with", "would", "you", "your", "t", "re", "ve", "d", "m", "provide",
    "name", "names", "list", "please", "tell", "give",
];

pub fn is_stopword(word: &str) -> bool {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| STOPWORDS.iter().copied().collect())
        .contains(word)
}

/// Light plural stripping so "prices" and "price" compare equal.
pub fn stem(word: &str) -> String {
    if word.len() > 4 && word.ends_with("ies") {
        format!("{}y", &word[..word.len() - 3])
    } else if word.len() > 3 && word.ends_with('s') && !word.ends_with("ss") {
        word[..word.len() - 1].to_string()
    } else {
        word.to_string()
    }
}

/// Stemmed, stopword-free tokens.
pub fn content_words(text: &str) -> Vec<String> {
    word_tokens(text)
        .into_iter()
        .filter(|w| !is_stopword(w))
        .map(|w| stem(&w))
        .collect()
}

/// Capitalized words that never open a proper-noun phrase.
const STOP_CAPS: &[&str] = &[
    "A", "According", "Also", "An", "And", "As", "At", "Breakfast", "But", "Can", "Certainly",
    "Con", "Contention", "Could", "Day", "Dinner", "Evening", "Finally", "First", "For", "From",
    "Given", "Great", "Guests", "He", "Here", "How", "I", "If", "In", "It", "Its", "Let", "Let's",
    "Lets", "Lunch", "Many", "Maybe", "Morning", "My", "Next", "No", "Now", "OK", "Okay", "On",
    "One", "Or", "Our", "Overall", "Perhaps", "Plus", "Pro", "Resolved", "Second", "She", "So",
    "Sure", "Thanks", "That", "The", "Then", "There", "These", "They", "Third", "This", "Those",
    "To", "Together", "We", "Well", "What", "When", "Where", "Which", "Who", "Why", "Will",
    "Would", "Yes", "You", "Your",
];

fn is_stop_cap(word: &str) -> bool {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| STOP_CAPS.iter().copied().collect())
        .contains(word)
}

fn is_capitalized_word(word: &str) -> bool {
    let mut chars = word.chars();
    match chars.next() {
        Some(c) if c.is_uppercase() => chars.all(|c| c.is_alphabetic() || c == '-' || c == '\''),
        _ => false,
    }
}

fn citation_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b([A-Z][a-z]+(?:-[A-Z][a-z]+)?) \((\d{4})\)").unwrap())
}

/// Named-entity candidates in order of appearance: runs of two or more
/// capitalized words, plus author-year citations such as `Harlow (2019)`.
pub fn proper_noun_phrases(text: &str) -> Vec<String> {
    let mut found: Vec<(usize, String)> = Vec::new();

    let mut run: Vec<&str> = Vec::new();
    let mut run_start = 0usize;
    let flush = |run: &mut Vec<&str>, start: usize, found: &mut Vec<(usize, String)>| {
        if run.len() >= 2 {
            found.push((start, run.join(" ")));
        }
        run.clear();
    };

    let mut offset = 0usize;
    for raw in text.split_whitespace() {
        let pos = text[offset..].find(raw).map(|p| p + offset).unwrap_or(offset);
        offset = pos + raw.len();

        let lead_trimmed = raw.trim_start_matches(|c: char| !c.is_alphanumeric());
        let opens_quote = lead_trimmed.len() != raw.len();
        let mut word = lead_trimmed.trim_end_matches(|c: char| !c.is_alphanumeric());
        let trailing = &lead_trimmed[word.len()..];
        let mut breaks_after = !trailing.is_empty();
        for suffix in ["'s", "’s"] {
            if let Some(stripped) = word.strip_suffix(suffix) {
                word = stripped;
                breaks_after = true;
            }
        }
        if opens_quote {
            flush(&mut run, run_start, &mut found);
        }
        if is_capitalized_word(word) && !(run.is_empty() && is_stop_cap(word)) {
            if run.is_empty() {
                run_start = pos;
            }
            run.push(word);
        } else {
            flush(&mut run, run_start, &mut found);
        }
        if breaks_after {
            flush(&mut run, run_start, &mut found);
        }
    }
    flush(&mut run, run_start, &mut found);

    for caps in citation_regex().captures_iter(text) {
        let m = caps.get(0).unwrap();
        found.push((m.start(), m.as_str().to_string()));
    }
    found.sort_by_key(|(pos, _)| *pos);
    let mut seen = HashSet::new();
    found
        .into_iter()
        .map(|(_, s)| s)
        .filter(|s| seen.insert(s.clone()))
        .collect()
}

/// 64-bit FNV-1a; stable across platforms and releases.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// ASCII-case-insensitive whole-phrase search; returns the byte offset of
/// the first match whose neighbours are not alphanumeric.
pub fn find_phrase(haystack: &str, phrase: &str) -> Option<usize> {
    let hay = haystack.to_ascii_lowercase();
    let needle = phrase.to_ascii_lowercase();
    if needle.is_empty() {
        return None;
    }
    let alnum = |c: char| c.is_alphanumeric();
    let mut from = 0;
    while let Some(rel) = hay[from..].find(&needle) {
        let start = from + rel;
        let end = start + needle.len();
        let before_ok = hay[..start].chars().next_back().is_none_or(|c| !alnum(c));
        let after_ok = hay[end..].chars().next().is_none_or(|c| !alnum(c));
        let start_ok = !needle.starts_with(alnum) || before_ok;
        let end_ok = !needle.ends_with(alnum) || after_ok;
        if start_ok && end_ok {
            return Some(start);
        }
        from = start + needle.chars().next().map_or(1, char::len_utf8);
    }
    None
}

pub fn contains_phrase(haystack: &str, phrase: &str) -> bool {
    find_phrase(haystack, phrase).is_some()
}

pub fn title_case(text: &str) -> String {
    text.split_whitespace()
        .map(|w| {
            let mut chars = w.chars();
            match chars.next() {
                Some(c) => c.to_uppercase().collect::<String>() + chars.as_str(),
                None => String::new(),
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Uppercases the first character only.
pub fn title_case_first(text: &str) -> String {
    let mut chars = text.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    }
}
