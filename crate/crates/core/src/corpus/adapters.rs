//! Thin readers for the native layouts of the supported dialogue datasets.
//!
//! Each adapter turns file contents into [`RawRecord`]s; validation and
//! speaker normalization happen afterwards in one place.

use std::collections::BTreeMap;

use serde::Deserialize;

use super::{CorpusError, RawDialogue, RawRecord, Source};

pub const ADAPTERS: [&str; 6] = [
    "canonical",
    "dailydialog",
    "topicalchat",
    "empatheticdialogues",
    "personachat",
    "wizardofwikipedia",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Adapter {
    /// One canonical JSON dialogue per line.
    Canonical,
    /// `dialogues_text.txt`: one dialogue per line, utterances ended by `__eou__`.
    DailyDialog,
    /// A JSON object keyed by conversation id with `content: [{message, agent}]`.
    TopicalChat,
    /// CSV with `conv_id`, `utterance_idx`, `speaker_idx`, `utterance`; commas escaped as `_comma_`.
    EmpatheticDialogues,
    /// ParlAI text format: numbered lines `N partner\tself`, persona lines skipped.
    PersonaChat,
    /// A JSON array of `{dialog: [{speaker, text}]}`.
    WizardOfWikipedia,
}

impl Adapter {
    pub fn from_name(name: &str) -> Result<Adapter, CorpusError> {
        let key: String = name
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .flat_map(|c| c.to_lowercase())
            .collect();
        Ok(match key.as_str() {
            "canonical" | "jsonl" => Adapter::Canonical,
            "dailydialog" => Adapter::DailyDialog,
            "topicalchat" => Adapter::TopicalChat,
            "empatheticdialogues" => Adapter::EmpatheticDialogues,
            "personachat" => Adapter::PersonaChat,
            "wizardofwikipedia" | "wow" => Adapter::WizardOfWikipedia,
            _ => return Err(CorpusError::UnknownAdapter(name.to_string())),
        })
    }

    pub fn parse(self, text: &str, source: &Source) -> Vec<RawRecord> {
        match self {
            Adapter::Canonical => canonical(text),
            Adapter::DailyDialog => daily_dialog(text, source),
            Adapter::TopicalChat => topical_chat(text, source),
            Adapter::EmpatheticDialogues => empathetic(text, source),
            Adapter::PersonaChat => persona_chat(text, source),
            Adapter::WizardOfWikipedia => wizard(text, source),
        }
    }
}

fn canonical(text: &str) -> Vec<RawRecord> {
    #[derive(Deserialize)]
    struct Turn {
        speaker: String,
        text: String,
    }
    #[derive(Deserialize)]
    struct Record {
        id: String,
        #[serde(default)]
        source: Option<Source>,
        turns: Vec<Turn>,
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let r: Record = serde_json::from_str(line).map_err(|e| (i + 1, e.to_string()))?;
            Ok(RawDialogue {
                id: r.id,
                source: r.source,
                turns: r.turns.into_iter().map(|t| (t.speaker, t.text)).collect(),
            })
        })
        .collect()
}

fn prefix(source: &Source) -> String {
    source.to_string().to_lowercase()
}

fn daily_dialog(text: &str, source: &Source) -> Vec<RawRecord> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let utterances: Vec<&str> = line
                .split("__eou__")
                .map(str::trim)
                .filter(|u| !u.is_empty())
                .collect();
            // Speakers alternate implicitly.
            let turns = utterances
                .iter()
                .enumerate()
                .map(|(k, u)| (format!("s{}", k % 2), (*u).to_string()))
                .collect();
            Ok(RawDialogue {
                id: format!("{}-{:05}", prefix(source), i + 1),
                source: Some(source.clone()),
                turns,
            })
        })
        .collect()
}

fn json_error(e: serde_json::Error) -> Vec<RawRecord> {
    vec![Err((e.line().max(1), e.to_string()))]
}

fn topical_chat(text: &str, source: &Source) -> Vec<RawRecord> {
    #[derive(Deserialize)]
    struct Message {
        message: String,
        agent: String,
    }
    #[derive(Deserialize)]
    struct Conversation {
        content: Vec<Message>,
    }
    let convs: BTreeMap<String, Conversation> = match serde_json::from_str(text) {
        Ok(c) => c,
        Err(e) => return json_error(e),
    };
    convs
        .into_iter()
        .map(|(id, c)| {
            Ok(RawDialogue {
                id,
                source: Some(source.clone()),
                turns: c.content.into_iter().map(|m| (m.agent, m.message)).collect(),
            })
        })
        .collect()
}

fn wizard(text: &str, source: &Source) -> Vec<RawRecord> {
    #[derive(Deserialize)]
    struct Utterance {
        speaker: String,
        text: String,
    }
    #[derive(Deserialize)]
    struct Episode {
        dialog: Vec<Utterance>,
    }
    let episodes: Vec<Episode> = match serde_json::from_str(text) {
        Ok(e) => e,
        Err(e) => return json_error(e),
    };
    episodes
        .into_iter()
        .enumerate()
        .map(|(i, ep)| {
            let turns = ep
                .dialog
                .into_iter()
                .map(|u| {
                    // "0_Wizard" / "1_Apprentice": the role name identifies the party.
                    let role = u.speaker.split_once('_').map_or(u.speaker.as_str(), |(_, r)| r);
                    (role.to_string(), u.text)
                })
                .collect();
            Ok(RawDialogue {
                id: format!("{}-{:05}", prefix(source), i + 1),
                source: Some(source.clone()),
                turns,
            })
        })
        .collect()
}

fn empathetic(text: &str, source: &Source) -> Vec<RawRecord> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers = match reader.headers() {
        Ok(h) => h.clone(),
        Err(e) => return vec![Err((1, e.to_string()))],
    };
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(conv), Some(idx), Some(spk), Some(utt)) = (
        col("conv_id"),
        col("utterance_idx"),
        col("speaker_idx"),
        col("utterance"),
    ) else {
        return vec![Err((1, "missing conv_id/utterance_idx/speaker_idx/utterance header".into()))];
    };

    let mut out: Vec<RawRecord> = Vec::new();
    let mut order: Vec<String> = Vec::new();
    let mut convs: BTreeMap<String, Vec<(u32, String, String)>> = BTreeMap::new();
    for row in reader.records() {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line() as usize);
                out.push(Err((line, e.to_string())));
                continue;
            }
        };
        let line = row.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| row.get(i).unwrap_or("");
        let Ok(n) = field(idx).trim().parse::<u32>() else {
            out.push(Err((line, format!("bad utterance_idx `{}`", field(idx)))));
            continue;
        };
        let id = field(conv).to_string();
        if !convs.contains_key(&id) {
            order.push(id.clone());
        }
        convs.entry(id).or_default().push((
            n,
            field(spk).to_string(),
            field(utt).replace("_comma_", ","),
        ));
    }
    for id in order {
        let mut rows = convs.remove(&id).unwrap_or_default();
        rows.sort_by_key(|r| r.0);
        out.push(Ok(RawDialogue {
            id,
            source: Some(source.clone()),
            turns: rows.into_iter().map(|(_, s, u)| (s, u)).collect(),
        }));
    }
    out
}

fn persona_chat(text: &str, source: &Source) -> Vec<RawRecord> {
    let mut out = Vec::new();
    let mut current: Option<Vec<(String, String)>> = None;
    let mut count = 0usize;
    let mut flush = |turns: Option<Vec<(String, String)>>, out: &mut Vec<RawRecord>| {
        if let Some(turns) = turns {
            count += 1;
            out.push(Ok(RawDialogue {
                id: format!("{}-{:05}", prefix(source), count),
                source: Some(source.clone()),
                turns,
            }));
        }
    };
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((num, rest)) = line.split_once(' ') else {
            out.push(Err((i + 1, "expected `N text`".into())));
            continue;
        };
        let Ok(num) = num.parse::<u32>() else {
            out.push(Err((i + 1, format!("bad line number `{num}`"))));
            continue;
        };
        if num == 1 {
            flush(current.take(), &mut out);
            current = Some(Vec::new());
        }
        if rest.contains("persona:") {
            continue;
        }
        let turns = current.get_or_insert_with(Vec::new);
        let mut fields = rest.split('\t');
        if let Some(partner) = fields.next() {
            // "__SILENCE__" marks a conversation opened by the other side.
            if partner.trim() != "__SILENCE__" {
                turns.push(("partner".into(), partner.to_string()));
            }
        }
        if let Some(own) = fields.next() {
            turns.push(("self".into(), own.to_string()));
        }
    }
    flush(current.take(), &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::super::{collect, IngestMode, Speaker};
    use super::*;

    fn run(adapter: &str, text: &str, source: Source) -> super::super::Ingested {
        let a = Adapter::from_name(adapter).unwrap();
        collect(a.parse(text, &source), &source, IngestMode::Strict).unwrap()
    }

    #[test]
    fn dailydialog_eou() {
        let text = "Well , what's the matter with you ? __eou__ I've got a sore throat . __eou__ Have you got a headache ? __eou__\nHi __eou__\n";
        let out = run("dailydialog", text, Source::DailyDialog);
        assert_eq!(out.dialogues.len(), 1);
        assert_eq!(out.dialogues[0].turns.len(), 3);
        assert_eq!(out.dialogues[0].id, "dailydialog-00001");
        assert_eq!(out.skips.reasons["too_few_turns"], 1);
    }

    #[test]
    fn topical_chat_json() {
        let text = r#"{"t_b": {"content": [{"message": "Hi", "agent": "agent_2"}, {"message": "Yo", "agent": "agent_1"}]},
                       "t_a": {"content": [{"message": "A", "agent": "agent_1"}, {"message": "B", "agent": "agent_2"}, {"message": "C", "agent": "agent_1"}]}}"#;
        let out = run("topicalchat", text, Source::TopicalChat);
        assert_eq!(out.dialogues.len(), 2);
        assert_eq!(out.dialogues[0].id, "t_a");
        // Normalized by first appearance, not by label number.
        assert_eq!(out.dialogues[1].turns[0].speaker, Speaker::User1);
        assert_eq!(out.dialogues[1].turns[0].text, "Hi");
    }

    #[test]
    fn broken_whole_file_json_reports_line() {
        let a = Adapter::TopicalChat;
        let recs = a.parse("{\n\"x\": [", &Source::TopicalChat);
        assert!(matches!(&recs[0], Err((2, _))));
    }

    #[test]
    fn wizard_roles() {
        let text = r#"[{"dialog": [{"speaker": "0_Wizard", "text": "a"}, {"speaker": "1_Apprentice", "text": "b"}, {"speaker": "0_Wizard", "text": "c"}]},
                       {"dialog": [{"speaker": "0_Wizard", "text": "a"}, {"speaker": "0_Wizard", "text": "b"}]}]"#;
        let out = run("wizard_of_wikipedia", text, Source::WizardOfWikipedia);
        assert_eq!(out.dialogues.len(), 1);
        assert_eq!(out.skips.reasons["non_alternating"], 1);
    }

    #[test]
    fn empathetic_csv() {
        let text = "conv_id,utterance_idx,context,prompt,speaker_idx,utterance\n\
hit:0_conv:1,2,sad,x,2,Oh no_comma_ that's bad\n\
hit:0_conv:1,1,sad,x,1,I lost my keys\n\
hit:0_conv:1,3,sad,x,1,Yes it is\n\
hit:1_conv:2,1,joy,y,5,Great day\n";
        let out = run("empatheticdialogues", text, Source::EmpatheticDialogues);
        assert_eq!(out.dialogues.len(), 1);
        let d = &out.dialogues[0];
        assert_eq!(d.turns[0].text, "I lost my keys");
        assert_eq!(d.turns[1].text, "Oh no, that's bad");
        assert_eq!(out.skips.reasons["too_few_turns"], 1);
    }

    #[test]
    fn persona_chat_parlai() {
        let text = "1 your persona: i like cats.\n2 hi how are you ?\ti am good .\n3 cool .\tthanks !\n1 your persona: i run.\n2 __SILENCE__\thello there\n3 hey\tbye\n";
        let out = run("personachat", text, Source::PersonaChat);
        assert_eq!(out.dialogues.len(), 2);
        assert_eq!(out.dialogues[0].turns.len(), 4);
        assert_eq!(out.dialogues[1].turns[0].text, "hello there");
        assert_eq!(out.dialogues[1].turns.len(), 3);
    }
}
