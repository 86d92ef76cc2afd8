use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::Payload;
use crate::text::{clean_label, normalize_label};

const MAX_LABEL_CHARS: usize = 120;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum OutputShape {
    SingleLabel,
    LabelList { allow_empty: bool },
    Text,
    FilterTriple,
    MergePairs,
    Verdict,
    Count,
}

impl OutputShape {
    pub fn describe(self) -> &'static str {
        match self {
            OutputShape::SingleLabel => "a single label on one line",
            OutputShape::LabelList { .. } => "a JSON array of label strings",
            OutputShape::Text => "the requested text",
            OutputShape::FilterTriple => {
                "a JSON object with list-valued keys \"scopes\", \"event_types\" and \"entity_types\""
            }
            OutputShape::MergePairs => "a JSON array of [absorbed, survivor] pairs",
            OutputShape::Verdict => "ENTAILED or NOT_ENTAILED",
            OutputShape::Count => "a single non-negative integer",
        }
    }
}

fn strip_fences(raw: &str) -> &str {
    let t = raw.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let rest = rest.split_once('\n').map(|(_, body)| body).unwrap_or("");
    rest.trim_end().strip_suffix("```").unwrap_or(rest).trim()
}

fn check_label(raw: &str) -> Result<String, String> {
    let label = clean_label(raw.trim_matches(|c: char| c == '"' || c == '\'' || c == '`'));
    if label.is_empty() {
        return Err("label is empty".into());
    }
    if label.chars().count() > MAX_LABEL_CHARS {
        return Err(format!("label longer than {MAX_LABEL_CHARS} characters"));
    }
    Ok(label)
}

fn string_list(value: &Value, what: &str) -> Result<Vec<String>, String> {
    let Value::Array(items) = value else {
        return Err(format!("{what} is not a list"));
    };
    let mut out: Vec<String> = Vec::new();
    for item in items {
        let Value::String(s) = item else {
            return Err(format!("{what} contains a non-string item"));
        };
        let label = check_label(s)?;
        if !out.iter().any(|o| normalize_label(o) == normalize_label(&label)) {
            out.push(label);
        }
    }
    Ok(out)
}

/// Parses raw provider output against a shape; the error is a short reason
/// suitable for a repair instruction.
pub fn parse_output(shape: OutputShape, raw: &str) -> Result<Payload, String> {
    let body = strip_fences(raw);
    match shape {
        OutputShape::SingleLabel => {
            let mut lines = body.lines().map(str::trim).filter(|l| !l.is_empty());
            let first = lines.next().ok_or("output is empty")?;
            if lines.next().is_some() {
                return Err("expected exactly one line".into());
            }
            let first = first.strip_suffix('.').unwrap_or(first);
            Ok(Payload::Label(check_label(first)?))
        }
        OutputShape::LabelList { allow_empty } => {
            let value: Value = serde_json::from_str(body).map_err(|e| format!("invalid JSON: {e}"))?;
            let labels = string_list(&value, "output")?;
            if labels.is_empty() && !allow_empty {
                return Err("list must not be empty".into());
            }
            Ok(Payload::Labels(labels))
        }
        OutputShape::Text => {
            if body.is_empty() {
                return Err("output is empty".into());
            }
            Ok(Payload::Text(body.to_string()))
        }
        OutputShape::FilterTriple => {
            let value: Value = serde_json::from_str(body).map_err(|e| format!("invalid JSON: {e}"))?;
            let Value::Object(obj) = value else {
                return Err("expected a JSON object".into());
            };
            let field = |k: &str| -> Result<Vec<String>, String> {
                string_list(obj.get(k).ok_or_else(|| format!("missing key `{k}`"))?, k)
            };
            Ok(Payload::Filter {
                scopes: field("scopes")?,
                event_types: field("event_types")?,
                entity_types: field("entity_types")?,
            })
        }
        OutputShape::MergePairs => {
            let value: Value = serde_json::from_str(body).map_err(|e| format!("invalid JSON: {e}"))?;
            let Value::Array(items) = value else {
                return Err("expected a JSON array".into());
            };
            let mut pairs = Vec::new();
            for item in &items {
                let pair = string_list(item, "pair")?;
                if pair.len() != 2 {
                    return Err("each pair needs exactly two distinct labels".into());
                }
                pairs.push((pair[0].clone(), pair[1].clone()));
            }
            Ok(Payload::Merges(pairs))
        }
        OutputShape::Verdict => {
            let word = body
                .split(|c: char| !(c.is_alphanumeric() || c == '_'))
                .find(|w| !w.is_empty())
                .unwrap_or("")
                .to_ascii_uppercase();
            match word.as_str() {
                "ENTAILED" => Ok(Payload::Verdict(true)),
                "NOT_ENTAILED" => Ok(Payload::Verdict(false)),
                _ => Err("expected ENTAILED or NOT_ENTAILED".into()),
            }
        }
        OutputShape::Count => body
            .trim_end_matches('.')
            .parse::<u64>()
            .map(Payload::Count)
            .map_err(|_| "expected a non-negative integer".into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn labels_are_cleaned() {
        assert_eq!(
            parse_output(OutputShape::SingleLabel, "  \"Price  Inquiry\".\n").unwrap(),
            Payload::Label("Price Inquiry".into())
        );
        assert!(parse_output(OutputShape::SingleLabel, "a\nb").is_err());
        assert!(parse_output(OutputShape::SingleLabel, "   ").is_err());
    }

    #[test]
    fn lists_dedup_and_respect_emptiness() {
        let p = parse_output(OutputShape::LabelList { allow_empty: true }, "```json\n[\"Price\", \"price\", \"Rating\"]\n```").unwrap();
        assert_eq!(p, Payload::Labels(vec!["Price".into(), "Rating".into()]));
        assert!(parse_output(OutputShape::LabelList { allow_empty: false }, "[]").is_err());
        assert!(parse_output(OutputShape::LabelList { allow_empty: true }, "[1]").is_err());
    }

    #[test]
    fn filter_triple_requires_all_keys() {
        let ok = r#"{"scopes":["Day 1"],"event_types":[],"entity_types":["Price"]}"#;
        assert!(matches!(parse_output(OutputShape::FilterTriple, ok), Ok(Payload::Filter { .. })));
        assert!(parse_output(OutputShape::FilterTriple, r#"{"scopes":[]}"#).is_err());
    }

    #[test]
    fn verdicts_counts_and_merges() {
        assert_eq!(parse_output(OutputShape::Verdict, "not_entailed."), Ok(Payload::Verdict(false)));
        assert_eq!(parse_output(OutputShape::Count, "3"), Ok(Payload::Count(3)));
        assert!(parse_output(OutputShape::Count, "-1").is_err());
        assert_eq!(
            parse_output(OutputShape::MergePairs, r#"[["B","A"]]"#),
            Ok(Payload::Merges(vec![("B".into(), "A".into())]))
        );
        assert!(parse_output(OutputShape::MergePairs, r#"[["A","a"]]"#).is_err());
    }

    fn conforms(shape: OutputShape, p: &Payload) -> bool {
        let label_ok = |s: &String| !s.trim().is_empty() && s.chars().count() <= MAX_LABEL_CHARS;
        match (shape, p) {
            (OutputShape::SingleLabel, Payload::Label(s)) => label_ok(s) && !s.contains('\n'),
            (OutputShape::LabelList { allow_empty }, Payload::Labels(v)) => (allow_empty || !v.is_empty()) && v.iter().all(label_ok),
            (OutputShape::Text, Payload::Text(s)) => !s.trim().is_empty(),
            (OutputShape::FilterTriple, Payload::Filter { scopes, event_types, entity_types }) => {
                scopes.iter().chain(event_types).chain(entity_types).all(label_ok)
            }
            (OutputShape::MergePairs, Payload::Merges(v)) => v.iter().all(|(a, b)| label_ok(a) && label_ok(b)),
            (OutputShape::Verdict, Payload::Verdict(_)) => true,
            (OutputShape::Count, Payload::Count(_)) => true,
            _ => false,
        }
    }

    fn shapes() -> impl Strategy<Value = OutputShape> {
        prop_oneof![
            Just(OutputShape::SingleLabel),
            Just(OutputShape::LabelList { allow_empty: true }),
            Just(OutputShape::LabelList { allow_empty: false }),
            Just(OutputShape::Text),
            Just(OutputShape::FilterTriple),
            Just(OutputShape::MergePairs),
            Just(OutputShape::Verdict),
            Just(OutputShape::Count),
        ]
    }

    fn mutated_outputs() -> impl Strategy<Value = String> {
        let seeds = prop_oneof![
            Just(r#"["Price","Rating"]"#.to_string()),
            Just(r#"{"scopes":["Day 1"],"event_types":["Book"],"entity_types":[]}"#.to_string()),
            Just(r#"[["A","B"]]"#.to_string()),
            Just("ENTAILED".to_string()),
            Just("42".to_string()),
            Just("Price Inquiry".to_string()),
            ".*".prop_map(|s| s),
        ];
        (seeds, prop::collection::vec((any::<usize>(), any::<char>(), 0u8..3), 0..4)).prop_map(|(s, edits)| {
            let mut chars: Vec<char> = s.chars().collect();
            for (pos, c, op) in edits {
                let i = if chars.is_empty() { 0 } else { pos % (chars.len() + 1) };
                match op {
                    0 => chars.insert(i, c),
                    1 if i < chars.len() => {
                        chars.remove(i);
                    }
                    _ if i < chars.len() => chars[i] = c,
                    _ => {}
                }
            }
            chars.into_iter().collect()
        })
    }

    proptest! {
        #[test]
        fn parsed_payloads_always_conform(shape in shapes(), raw in mutated_outputs()) {
            if let Ok(p) = parse_output(shape, &raw) {
                prop_assert!(conforms(shape, &p), "{shape:?} accepted {raw:?} as {p:?}");
            }
        }
    }
}
