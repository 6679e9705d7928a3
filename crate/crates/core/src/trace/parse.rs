//! Single-pass scanner for the tagged rollout text.

use super::{EventKind, TraceEvent};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TraceError {
    /// A close tag with no matching open tag, or one that closes a different
    /// tag than the open one.
    #[error("malformed tag `{found}` at byte {position}")]
    MalformedTag { position: usize, found: String },
    /// A recognized open tag inside another open tag. The protocol is flat.
    #[error("tag `{inner}` opened inside `{outer}` at byte {position}")]
    NestedTag {
        outer: String,
        inner: String,
        position: usize,
    },
    /// Tag body exceeds the configured size cap.
    #[error("`{tag}` body exceeds {limit} bytes")]
    BodyTooLarge { tag: String, limit: usize },
    /// A search or answer body with no usable parts.
    #[error("empty search body")]
    EmptySearch,
}

/// Scanner limits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParserConfig {
    /// Maximum bytes allowed between an open and close tag.
    pub max_body_bytes: usize,
}

impl Default for ParserConfig {
    fn default() -> Self {
        // 64 KiB holds any sane tag body; a runaway generation hits the cap
        // instead of ballooning memory.
        ParserConfig {
            max_body_bytes: 64 * 1024,
        }
    }
}

/// A final tag that was opened but never closed when input ended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IncompleteTag {
    pub kind: EventKind,
    /// Body text accumulated up to end of input.
    pub partial_body: String,
}

/// What a scan produced: the closed events, plus the trailing unclosed tag
/// if input ended mid-event.
#[derive(Debug, Clone, PartialEq)]
pub struct ParseOutcome {
    pub events: Vec<TraceEvent>,
    pub incomplete: Option<IncompleteTag>,
}

/// Tag names the scanner recognizes. `tool` and `graph` are accepted aliases
/// for `search` and `plan`.
fn recognize(name: &str) -> Option<EventKind> {
    match name {
        "think" => Some(EventKind::Think),
        "plan" | "graph" => Some(EventKind::Plan),
        "search" | "tool" => Some(EventKind::Search),
        "observation" => Some(EventKind::Observation),
        "reflection" => Some(EventKind::Reflection),
        "answer" => Some(EventKind::Answer),
        _ => None,
    }
}

/// A `<name>` or `</name>` token at `pos`, if the text there spells one with
/// a recognized name. Attribute-bearing or unknown tokens do not count.
fn tag_token(text: &str, pos: usize) -> Option<(bool, EventKind, &str, usize)> {
    let rest = &text[pos..];
    debug_assert!(rest.starts_with('<'));
    let (closing, name_start) = if rest.len() > 1 && rest.as_bytes()[1] == b'/' {
        (true, 2)
    } else {
        (false, 1)
    };
    let after = &rest[name_start..];
    let end = after.find('>')?;
    let name = &after[..end];
    let kind = recognize(name)?;
    Some((closing, kind, name, pos + name_start + end + 1))
}

/// Scans `text` for protocol events.
///
/// Text outside tags is ignored — policies interleave prose freely. Inside a
/// tag, everything up to the matching close tag is the body, verbatim;
/// unrecognized angle-bracket tokens (like the `<node …>` elements of a plan
/// body) pass through as body text. An unclosed tag at end of input is
/// reported via [`ParseOutcome::incomplete`] rather than as an error, since
/// generation stops mid-tag by design.
pub fn parse_stream(text: &str, config: &ParserConfig) -> Result<ParseOutcome, TraceError> {
    let mut events = Vec::new();
    let mut open: Option<(EventKind, String, usize)> = None; // kind, literal name, body start
    let mut pos = 0;
    while let Some(offset) = text[pos..].find('<') {
        let at = pos + offset;
        let Some((closing, kind, name, token_end)) = tag_token(text, at) else {
            pos = at + 1;
            continue;
        };
        match (&open, closing) {
            (None, false) => {
                open = Some((kind, name.to_string(), token_end));
            }
            (None, true) => {
                return Err(TraceError::MalformedTag {
                    position: at,
                    found: format!("</{name}>"),
                });
            }
            (Some((_, open_name, _)), false) => {
                return Err(TraceError::NestedTag {
                    outer: open_name.clone(),
                    inner: name.to_string(),
                    position: at,
                });
            }
            (Some((open_kind, open_name, body_start)), true) => {
                if name != open_name {
                    return Err(TraceError::MalformedTag {
                        position: at,
                        found: format!("</{name}>"),
                    });
                }
                let body = &text[*body_start..at];
                check_body_len(body, open_name, config)?;
                events.push(TraceEvent::new(*open_kind, body));
                open = None;
            }
        }
        pos = token_end;
    }
    let incomplete = match open {
        Some((kind, name, body_start)) => {
            let body = &text[body_start..];
            check_body_len(body, &name, config)?;
            Some(IncompleteTag {
                kind,
                partial_body: body.to_string(),
            })
        }
        None => None,
    };
    Ok(ParseOutcome { events, incomplete })
}

fn check_body_len(body: &str, tag: &str, config: &ParserConfig) -> Result<(), TraceError> {
    if body.len() > config.max_body_bytes {
        return Err(TraceError::BodyTooLarge {
            tag: tag.to_string(),
            limit: config.max_body_bytes,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::Payload;

    fn parse(text: &str) -> ParseOutcome {
        parse_stream(text, &ParserConfig::default()).unwrap()
    }

    #[test]
    fn basic_sequence() {
        let out = parse("<think>hmm</think><search>a | b</search>");
        assert_eq!(out.events.len(), 2);
        assert_eq!(out.events[0].kind, EventKind::Think);
        assert_eq!(out.events[0].body, "hmm");
        assert_eq!(out.events[1].kind, EventKind::Search);
        assert_eq!(
            out.events[1].payload,
            Some(Payload::Queries(vec!["a".into(), "b".into()]))
        );
        assert!(out.incomplete.is_none());
    }

    #[test]
    fn text_outside_tags_is_ignored() {
        let out = parse("preamble <think>x</think> middle chatter <answer>y</answer> tail");
        assert_eq!(out.events.len(), 2);
        assert_eq!(out.events[0].body, "x");
        assert_eq!(out.events[1].body, "y");
    }

    #[test]
    fn aliases_normalize() {
        let out = parse("<tool>q</tool>");
        assert_eq!(out.events[0].kind, EventKind::Search);
        let out = parse("<graph><node id=\"s1\">search(\"q\")</node></graph>");
        assert_eq!(out.events[0].kind, EventKind::Plan);
    }

    #[test]
    fn alias_close_must_match_open_spelling() {
        let err = parse_stream("<tool>q</search>", &ParserConfig::default()).unwrap_err();
        assert!(matches!(err, TraceError::MalformedTag { .. }));
    }

    #[test]
    fn unrecognized_tokens_are_text() {
        let out = parse("<think>a < b and <q> stays</think>");
        assert_eq!(out.events[0].body, "a < b and <q> stays");
        // Outside a tag they are ignored like any other text.
        let out = parse("<q>noise</q><answer>x</answer>");
        assert_eq!(out.events.len(), 1);
    }

    #[test]
    fn node_elements_stay_in_plan_body() {
        let body = "<node id=\"s1\" depends=\"\">search(\"q\")</node>";
        let out = parse(&format!("<plan>{body}</plan>"));
        assert_eq!(out.events[0].body, body);
    }

    #[test]
    fn unclosed_final_tag_is_incomplete_not_error() {
        let out = parse("<think>done</think><answer>partia");
        assert_eq!(out.events.len(), 1);
        assert_eq!(
            out.incomplete,
            Some(IncompleteTag {
                kind: EventKind::Answer,
                partial_body: "partia".to_string()
            })
        );
    }

    #[test]
    fn stray_close_is_malformed() {
        let err = parse_stream("</think>", &ParserConfig::default()).unwrap_err();
        assert_eq!(
            err,
            TraceError::MalformedTag {
                position: 0,
                found: "</think>".to_string()
            }
        );
    }

    #[test]
    fn mismatched_close_is_malformed() {
        let err = parse_stream("<think>x</answer>", &ParserConfig::default()).unwrap_err();
        assert!(matches!(err, TraceError::MalformedTag { position: 8, .. }));
    }

    #[test]
    fn nested_open_is_rejected() {
        let err = parse_stream(
            "<think><search>q</search></think>",
            &ParserConfig::default(),
        )
        .unwrap_err();
        assert_eq!(
            err,
            TraceError::NestedTag {
                outer: "think".to_string(),
                inner: "search".to_string(),
                position: 7
            }
        );
    }

    #[test]
    fn body_cap_applies_to_closed_and_unclosed() {
        let config = ParserConfig { max_body_bytes: 8 };
        let err = parse_stream("<think>123456789</think>", &config).unwrap_err();
        assert!(matches!(err, TraceError::BodyTooLarge { limit: 8, .. }));
        let err = parse_stream("<think>123456789", &config).unwrap_err();
        assert!(matches!(err, TraceError::BodyTooLarge { .. }));
        assert!(parse_stream("<think>12345678</think>", &config).is_ok());
    }

    #[test]
    fn empty_input_and_empty_bodies() {
        let out = parse("");
        assert!(out.events.is_empty() && out.incomplete.is_none());
        let out = parse("<think></think>");
        assert_eq!(out.events[0].body, "");
    }

    #[test]
    fn lone_angle_brackets_do_not_confuse_scanner() {
        let out = parse("1 < 2 <think>a<b</think> x > y");
        assert_eq!(out.events[0].body, "a<b");
    }
}
