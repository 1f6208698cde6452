use std::path::Path;

use super::{CorpusError, DialogueExample, Result, Utterance};

pub fn parse_jsonl(text: &str) -> Result<Vec<DialogueExample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let ex: DialogueExample = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        ex.validate().map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        out.push(ex);
    }
    Ok(out)
}

pub fn load_jsonl(path: &Path) -> Result<Vec<DialogueExample>> {
    parse_jsonl(&std::fs::read_to_string(path)?)
}

pub fn to_jsonl(corpus: &[DialogueExample]) -> String {
    let mut s = String::new();
    for ex in corpus {
        s.push_str(&serde_json::to_string(ex).expect("examples serialize"));
        s.push('\n');
    }
    s
}

pub fn write_jsonl(path: &Path, corpus: &[DialogueExample]) -> Result<()> {
    std::fs::write(path, to_jsonl(corpus))?;
    Ok(())
}

/// Converts a PERSONA-CHAT style text dump (`*_both_original.txt`) into
/// examples targeted at the partner.
///
/// Each dialogue is a run of numbered lines restarting at 1. Lines
/// `N partner's persona: ...` give the profile; lines
/// `N partner_utterance<TAB>own_reply[<TAB><TAB>candidates]` give turns.
/// Every turn yields one example whose context is the history ending in the
/// partner's utterance and whose response is the own reply.
pub fn convert_persona_chat(text: &str) -> Result<Vec<DialogueExample>> {
    let mut out = Vec::new();
    let mut profile: Vec<String> = Vec::new();
    let mut history: Vec<Utterance> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end();
        if line.is_empty() {
            continue;
        }
        let (num, rest) = line.split_once(' ').ok_or_else(|| CorpusError::Parse {
            line: i + 1,
            message: "expected a leading turn number".into(),
        })?;
        if num == "1" {
            profile.clear();
            history.clear();
        }
        if let Some(desc) = rest.strip_prefix("partner's persona:") {
            profile.push(desc.trim().to_string());
            continue;
        }
        if rest.starts_with("your persona:") {
            continue;
        }
        let mut fields = rest.split('\t');
        let user = fields.next().unwrap_or("").trim();
        let reply = fields.next().unwrap_or("").trim();
        if user.is_empty() || reply.is_empty() {
            return Err(CorpusError::Parse {
                line: i + 1,
                message: "turn needs a partner utterance and a reply separated by a tab".into(),
            });
        }
        history.push(Utterance::user(user));
        if !profile.is_empty() && user != "__SILENCE__" {
            let ex = DialogueExample {
                profile: profile.clone(),
                context: history.clone(),
                response: reply.to_string(),
                category: None,
            };
            if ex.validate().is_ok() {
                out.push(ex);
            }
        }
        history.push(Utterance::agent(reply));
    }
    Ok(out)
}
