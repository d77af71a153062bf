use serde::{Deserialize, Serialize};

use crate::corpus::GroundingExample;

pub const INSTRUCTION_SLOT: &str = "{instruction}";
pub const IMAGE_SLOT: &str = "{image}";

/// Prompt layout shared by training and inference. Targets are absolute
/// pixel click points written `(x, y)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub text: String,
    /// What `{image}` renders to in text prompts.
    #[serde(default = "default_image_token")]
    pub image_token: String,
}

fn default_image_token() -> String {
    "<image>".into()
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            text: "{image}\nLocate the GUI element described by the instruction and answer with \
                   its click point as (x, y) in absolute pixel coordinates.\nInstruction: {instruction}"
                .into(),
            image_token: default_image_token(),
        }
    }
}

impl PromptTemplate {
    pub fn new(text: &str) -> Result<Self, String> {
        let t = Self {
            text: text.into(),
            image_token: default_image_token(),
        };
        t.check()?;
        Ok(t)
    }

    pub fn check(&self) -> Result<(), String> {
        for slot in [INSTRUCTION_SLOT, IMAGE_SLOT] {
            if !self.text.contains(slot) {
                return Err(format!("prompt template lacks the {slot} placeholder"));
            }
        }
        Ok(())
    }

    /// Substitute placeholders in one left-to-right pass, so placeholder-like
    /// text inside the instruction is kept verbatim.
    fn fill(&self, instruction: &str, image: &str) -> String {
        let mut out = String::with_capacity(self.text.len() + instruction.len());
        let mut rest = self.text.as_str();
        loop {
            let next = [INSTRUCTION_SLOT, IMAGE_SLOT]
                .into_iter()
                .filter_map(|slot| rest.find(slot).map(|i| (i, slot)))
                .min_by_key(|(i, _)| *i);
            match next {
                Some((i, slot)) => {
                    out.push_str(&rest[..i]);
                    out.push_str(if slot == INSTRUCTION_SLOT { instruction } else { image });
                    rest = &rest[i + slot.len()..];
                }
                None => {
                    out.push_str(rest);
                    return out;
                }
            }
        }
    }

    pub fn render(&self, instruction: &str) -> String {
        self.fill(instruction, &self.image_token)
    }

    /// Rendering for transports that carry the image out of band.
    pub fn render_text_only(&self, instruction: &str) -> String {
        self.fill(instruction, "").trim_start().to_string()
    }
}

/// Prompt and target text for one example. The target is the box midpoint,
/// floored on both axes.
pub fn format_example(ex: &GroundingExample, template: &PromptTemplate) -> (String, String) {
    let c = ex.bbox.floor_center();
    (template.render(&ex.instruction), format!("({}, {})", c.x, c.y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Platform;

    fn ex(bbox: [u32; 4], instruction: &str) -> GroundingExample {
        GroundingExample {
            id: "e".into(),
            image_ref: "a.png".into(),
            image_width: 100,
            image_height: 100,
            platform: Platform::Web,
            source: "s".into(),
            instruction: instruction.into(),
            bbox: bbox.into(),
            element_type: None,
        }
    }

    #[test]
    fn target_is_floored_center() {
        let t = PromptTemplate::default();
        assert_eq!(format_example(&ex([10, 20, 30, 40], "x"), &t).1, "(20, 30)");
        assert_eq!(format_example(&ex([0, 0, 3, 3], "x"), &t).1, "(1, 1)");
    }

    #[test]
    fn golden_prompt() {
        let (prompt, _) = format_example(&ex([1, 1, 2, 2], "click the search icon"), &PromptTemplate::default());
        assert_eq!(
            prompt,
            "<image>\nLocate the GUI element described by the instruction and answer with its click \
             point as (x, y) in absolute pixel coordinates.\nInstruction: click the search icon"
        );
        assert!(prompt.contains("click the search icon"));
    }

    #[test]
    fn placeholder_text_in_instruction_is_literal() {
        let t = PromptTemplate::new("{image}|{instruction}|").unwrap();
        assert_eq!(t.render("press {image} now"), "<image>|press {image} now|");
        assert_eq!(t.render_text_only("go"), "|go|");
    }

    #[test]
    fn template_requires_slots() {
        assert!(PromptTemplate::new("no slots").is_err());
        assert!(PromptTemplate::new("{instruction}").is_err());
    }
}
