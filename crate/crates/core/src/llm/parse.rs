use std::collections::HashSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryAnswer {
    Yes,
    No,
}

/// Lowercases the reply, splits it into runs of letters and returns the first
/// "yes" or "no" token. Replies with neither count as "no".
pub fn parse_binary_answer(reply: &str) -> BinaryAnswer {
    let lower = reply.to_lowercase();
    lower
        .split(|c: char| !c.is_alphabetic())
        .find_map(|tok| match tok {
            "yes" => Some(BinaryAnswer::Yes),
            "no" => Some(BinaryAnswer::No),
            _ => None,
        })
        .unwrap_or(BinaryAnswer::No)
}

/// Byte range of the first balanced `{...}` in `s`, ignoring braces inside JSON strings.
fn first_balanced_object(s: &str) -> Option<&str> {
    let start = s.find('{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, ch) in s[start..].char_indices() {
        if in_string {
            if escaped {
                escaped = false;
            } else if ch == '\\' {
                escaped = true;
            } else if ch == '"' {
                in_string = false;
            }
            continue;
        }
        match ch {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&s[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Pulls the selected qid out of a selection reply. Only the first balanced
/// JSON object is considered; the qid must be one of `allowed`.
pub fn extract_selection<'a, I>(reply: &str, allowed: I) -> Option<String>
where
    I: IntoIterator<Item = &'a str>,
{
    let object = first_balanced_object(reply)?;
    let value: serde_json::Value = serde_json::from_str(object).ok()?;
    let qid = value.get("wikidata_id")?.as_str()?.trim();
    if qid.is_empty() {
        return None;
    }
    let allowed: HashSet<&str> = allowed.into_iter().collect();
    allowed.contains(qid).then(|| qid.to_string())
}
