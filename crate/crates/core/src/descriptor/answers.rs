use std::collections::BTreeMap;

use serde_json::{Map, Value};

use super::{AnswerKind, DescriptorError, QuerySet};

/// Finds the first balanced `{...}` block in `raw` that parses as a JSON
/// object. Chat models like to wrap their JSON in prose.
pub fn extract_json_object(raw: &str) -> Option<Map<String, Value>> {
    let bytes = raw.as_bytes();
    let mut start = 0;
    while let Some(off) = raw[start..].find('{') {
        let open = start + off;
        if let Some(close) = matching_brace(bytes, open) {
            if let Ok(Value::Object(map)) = serde_json::from_str(&raw[open..=close]) {
                return Some(map);
            }
        }
        start = open + 1;
    }
    None
}

/// Index of the `}` closing the `{` at `open`, honouring JSON strings.
fn matching_brace(bytes: &[u8], open: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(open) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

fn value_strings(v: &Value, out: &mut Vec<String>) {
    match v {
        Value::String(s) => out.push(s.clone()),
        Value::Array(items) => items.iter().for_each(|i| value_strings(i, out)),
        Value::Number(n) => out.push(n.to_string()),
        Value::Bool(b) => out.push(b.to_string()),
        Value::Null | Value::Object(_) => {}
    }
}

/// Parses an LLM answer to a query prompt into per-key answer lists.
///
/// Keys match case-insensitively. List-kind answers are split on commas and
/// trimmed; single-kind answers become a one-element list.
pub fn parse_query_answers(
    raw: &str,
    queryset: &QuerySet,
) -> Result<BTreeMap<String, Vec<String>>, DescriptorError> {
    let obj = extract_json_object(raw).ok_or(DescriptorError::NoJsonObject)?;
    let mut answers = BTreeMap::new();
    for q in queryset.queries() {
        let wanted = q.key.trim();
        let value = obj
            .iter()
            .find(|(k, _)| k.trim().eq_ignore_ascii_case(wanted))
            .map(|(_, v)| v)
            .ok_or_else(|| DescriptorError::MissingField(q.key.clone()))?;
        let mut raw_items = Vec::new();
        value_strings(value, &mut raw_items);
        let items: Vec<String> = match q.answer_kind {
            AnswerKind::List => raw_items
                .iter()
                .flat_map(|s| s.split(','))
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect(),
            AnswerKind::Single => {
                let joined = raw_items
                    .iter()
                    .map(|s| s.trim())
                    .filter(|s| !s.is_empty())
                    .collect::<Vec<_>>()
                    .join(", ");
                if joined.is_empty() {
                    vec![]
                } else {
                    vec![joined]
                }
            }
        };
        if items.is_empty() {
            return Err(DescriptorError::EmptyAnswer(q.key.clone()));
        }
        answers.insert(q.key.clone(), items);
    }
    Ok(answers)
}

/// Renders answers as one sentence per query, in query-set order:
/// `The {key} of the photo {is|are} {answers}.`
pub fn render_descriptor(
    answers: &BTreeMap<String, Vec<String>>,
    queryset: &QuerySet,
) -> Result<String, DescriptorError> {
    let mut sentences = Vec::with_capacity(queryset.len());
    for q in queryset.queries() {
        let items = answers
            .get(&q.key)
            .or_else(|| answers.iter().find(|(k, _)| k.eq_ignore_ascii_case(&q.key)).map(|(_, v)| v))
            .ok_or_else(|| DescriptorError::MissingField(q.key.clone()))?;
        if items.is_empty() {
            return Err(DescriptorError::EmptyAnswer(q.key.clone()));
        }
        let verb = if items.len() > 1 || q.plural { "are" } else { "is" };
        let body = items.join(", ");
        let body = body.trim_end_matches('.');
        sentences.push(format!("The {} of the photo {verb} {body}.", q.key));
    }
    Ok(sentences.join(" "))
}
