use std::fmt::Write as _;

use super::{AnswerKind, DescriptorError, DescriptorVariant, QuerySet};
use crate::corpus::Dialogue;

const SHARE_MARKER: &str = "(share a photo)";

/// One `speaker: text` line per turn, followed by the share marker
/// attributed to the sharer.
pub fn render_dialogue(dialogue: &Dialogue) -> String {
    let mut out = String::new();
    for turn in &dialogue.turns {
        let _ = writeln!(out, "{}: {}", turn.speaker, turn.text.trim());
    }
    let _ = write!(out, "{}: {SHARE_MARKER}", dialogue.sharer);
    out
}

/// Builds the LLM prompt for a descriptor variant.
///
/// `speaker A` in the instructions names whoever shares the photo.
pub fn build_prompt(
    dialogue: &Dialogue,
    variant: DescriptorVariant,
    queryset: &QuerySet,
) -> Result<String, DescriptorError> {
    let sharer = dialogue.sharer;
    let context = render_dialogue(dialogue);
    let mut prompt = format!("Please read the following dialogue context:\n{context}\n\n");
    match variant {
        DescriptorVariant::Summary => {
            let _ = writeln!(
                prompt,
                "Based on the dialogue context, please summarize the information of speaker {sharer}."
            );
        }
        DescriptorVariant::Guessing => {
            let _ = writeln!(
                prompt,
                "Based on the dialogue context, please describe the photograph shared by speaker {sharer}."
            );
        }
        DescriptorVariant::Queries => {
            let _ = writeln!(
                prompt,
                "Based on the dialogue context, please describe the photograph shared by speaker {sharer}."
            );
            prompt.push_str("List the answer in JSON format.\n");
            for q in queryset.queries() {
                let slot = match q.answer_kind {
                    AnswerKind::List => "simply list the answer by ','".to_string(),
                    AnswerKind::Single => format!("one {}", q.template_noun),
                };
                let _ = writeln!(prompt, "- {}: {{{slot}}}", q.key);
            }
        }
        other => return Err(DescriptorError::UnsupportedVariant(other)),
    }
    prompt.push_str("\nAnswers:");
    Ok(prompt)
}
