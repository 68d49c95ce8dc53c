//! Reasoner prompt assembly, reply parsing, and the LLM-free caption templates.
//!
//! Base prompts live as text resources next to a manifest that pins each
//! file's SHA-256. The built-in set is compiled in; [`TemplateStore::load_dir`]
//! reads an edited copy from disk and verifies it the same way.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{single_line, TaskKind};

pub const CAPTION_MARKER: &str = "Image Content:";
pub const INSTRUCTION_MARKER: &str = "Instruction:";
pub const REPLY_MARKER: &str = "Edited Description:";

pub const DEFAULT_TEMPLATE_ID: &str = "cir-default";

/// SHA-256 of the built-in default base prompt.
pub const DEFAULT_PROMPT_SHA256: &str =
    "3f1e3b341f5432b3c39cd67057e0e5fa5bf440e83d75f13f3cea8090460dca26";

const BUILTIN_MANIFEST: &str = include_str!("../templates/manifest.json");
const BUILTIN_FILES: &[(&str, &str)] = &[
    ("cir-default.txt", include_str!("../templates/cir-default.txt")),
    (
        "genecis-focus-attribute.txt",
        include_str!("../templates/genecis-focus-attribute.txt"),
    ),
    (
        "genecis-change-attribute.txt",
        include_str!("../templates/genecis-change-attribute.txt"),
    ),
    (
        "genecis-focus-object.txt",
        include_str!("../templates/genecis-focus-object.txt"),
    ),
    (
        "genecis-change-object.txt",
        include_str!("../templates/genecis-change-object.txt"),
    ),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IclExample {
    pub caption: String,
    pub instruction: String,
    pub edited_description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template_id: String,
    pub base_prompt: String,
    pub caption_marker: String,
    pub instruction_marker: String,
    pub reply_marker: String,
    #[serde(default)]
    pub icl_examples: Vec<IclExample>,
}

impl PromptTemplate {
    pub fn new(template_id: impl Into<String>, base_prompt: impl Into<String>) -> Result<Self> {
        let t = Self {
            template_id: template_id.into(),
            base_prompt: base_prompt.into(),
            caption_marker: CAPTION_MARKER.into(),
            instruction_marker: INSTRUCTION_MARKER.into(),
            reply_marker: REPLY_MARKER.into(),
            icl_examples: Vec::new(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn with_examples(mut self, examples: Vec<IclExample>) -> Self {
        self.icl_examples = examples;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.base_prompt.is_empty() {
            return Err(Error::InvalidInput(format!(
                "template `{}` has an empty base prompt",
                self.template_id
            )));
        }
        if self.caption_marker.is_empty()
            || self.instruction_marker.is_empty()
            || self.reply_marker.is_empty()
        {
            return Err(Error::InvalidInput(format!(
                "template `{}` has an empty marker",
                self.template_id
            )));
        }
        Ok(())
    }
}

fn required_line(field: &str, value: &str) -> Result<String> {
    let line = single_line(value);
    if line.is_empty() {
        return Err(Error::InvalidInput(format!("{field} must be nonempty")));
    }
    Ok(line)
}

/// Base prompt, then any in-context examples, then the live caption and instruction.
pub fn build_reasoner_request(
    template: &PromptTemplate,
    caption: &str,
    instruction: &str,
) -> Result<String> {
    let caption = required_line("caption", caption)?;
    let instruction = required_line("instruction", instruction)?;
    let (cm, im, rm) = (
        &template.caption_marker,
        &template.instruction_marker,
        &template.reply_marker,
    );
    let mut out = String::with_capacity(template.base_prompt.len() + 256);
    out.push_str(&template.base_prompt);
    out.push('\n');
    for ex in &template.icl_examples {
        out.push_str(&format!(
            "{cm} {}\n{im} {}\n{rm} {}\n",
            single_line(&ex.caption),
            single_line(&ex.instruction),
            single_line(&ex.edited_description)
        ));
    }
    out.push_str(&format!("{cm} {caption}\n{im} {instruction}"));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedReply {
    pub text: String,
    pub marker_missing: bool,
}

/// Text after the last reply marker; the whole reply if the marker never appears.
pub fn parse_edited_description(reply: &str, template: &PromptTemplate) -> Result<ParsedReply> {
    let (body, marker_missing) = match reply.rfind(&template.reply_marker) {
        Some(at) => (&reply[at + template.reply_marker.len()..], false),
        None => (reply, true),
    };
    let text = single_line(body);
    if text.is_empty() {
        return Err(Error::EmptyModelOutput("reasoner reply has no edited description".into()));
    }
    Ok(ParsedReply {
        text,
        marker_missing,
    })
}

/// Target captions built without a language model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetTemplate {
    /// `a {domain} of a {caption}`
    DomainConversion,
    /// `a photo of {caption} that {instruction}`
    CaptionTemplate,
}

impl TargetTemplate {
    pub fn id(self) -> &'static str {
        match self {
            TargetTemplate::DomainConversion => "domain-conversion",
            TargetTemplate::CaptionTemplate => "caption-template",
        }
    }
}

pub fn template_target(kind: TargetTemplate, caption: &str, instruction_or_domain: &str) -> Result<String> {
    let caption = required_line("caption", caption)?;
    let other = required_line(
        match kind {
            TargetTemplate::DomainConversion => "domain",
            TargetTemplate::CaptionTemplate => "instruction",
        },
        instruction_or_domain,
    )?;
    Ok(match kind {
        TargetTemplate::DomainConversion => format!("a {other} of a {caption}"),
        TargetTemplate::CaptionTemplate => format!("a photo of {caption} that {other}"),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    template_id: String,
    file: String,
    sha256: String,
    #[serde(default)]
    caption_marker: Option<String>,
    #[serde(default)]
    instruction_marker: Option<String>,
    #[serde(default)]
    reply_marker: Option<String>,
    #[serde(default)]
    icl_examples: Vec<IclExample>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    templates: Vec<ManifestEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone)]
pub struct TemplateStore {
    templates: BTreeMap<String, PromptTemplate>,
}

impl TemplateStore {
    pub fn builtin() -> Self {
        Self::from_manifest(BUILTIN_MANIFEST, "builtin manifest", |file| {
            BUILTIN_FILES
                .iter()
                .find(|(name, _)| *name == file)
                .map(|(_, text)| text.as_bytes().to_vec())
                .ok_or_else(|| Error::Config(format!("builtin template file `{file}` missing")))
        })
        .expect("builtin templates are checksum-pinned")
    }

    /// Loads `manifest.json` and the files it names from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let text = fs::read_to_string(&manifest_path)?;
        Self::from_manifest(&text, &manifest_path.display().to_string(), |file| {
            Ok(fs::read(dir.join(file))?)
        })
    }

    fn from_manifest(
        text: &str,
        source_name: &str,
        read: impl Fn(&str) -> Result<Vec<u8>>,
    ) -> Result<Self> {
        let manifest: Manifest =
            serde_json::from_str(text).map_err(|e| Error::parse(source_name, &e))?;
        let mut templates = BTreeMap::new();
        for entry in manifest.templates {
            let bytes = read(&entry.file)?;
            let actual = sha256_hex(&bytes);
            if !actual.eq_ignore_ascii_case(&entry.sha256) {
                return Err(Error::ChecksumMismatch {
                    id: entry.template_id,
                    expected: entry.sha256,
                    actual,
                });
            }
            let base_prompt = String::from_utf8(bytes).map_err(|_| {
                Error::Config(format!("template `{}` is not UTF-8", entry.file))
            })?;
            let template = PromptTemplate {
                template_id: entry.template_id.clone(),
                base_prompt,
                caption_marker: entry.caption_marker.unwrap_or_else(|| CAPTION_MARKER.into()),
                instruction_marker: entry
                    .instruction_marker
                    .unwrap_or_else(|| INSTRUCTION_MARKER.into()),
                reply_marker: entry.reply_marker.unwrap_or_else(|| REPLY_MARKER.into()),
                icl_examples: entry.icl_examples,
            };
            template.validate()?;
            templates.insert(entry.template_id, template);
        }
        Ok(Self { templates })
    }

    pub fn get(&self, template_id: &str) -> Result<&PromptTemplate> {
        self.templates.get(template_id).ok_or_else(|| {
            Error::Config(format!(
                "unknown template `{template_id}` (available: {})",
                self.templates.keys().cloned().collect::<Vec<_>>().join(", ")
            ))
        })
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    /// The template registered under the task's default id.
    pub fn for_task(&self, task: TaskKind) -> Result<&PromptTemplate> {
        self.get(default_template_id(task)?)
    }
}

pub fn default_template_id(task: TaskKind) -> Result<&'static str> {
    Ok(match task {
        TaskKind::Cir => DEFAULT_TEMPLATE_ID,
        TaskKind::GenecisFocusAttribute => "genecis-focus-attribute",
        TaskKind::GenecisChangeAttribute => "genecis-change-attribute",
        TaskKind::GenecisFocusObject => "genecis-focus-object",
        TaskKind::GenecisChangeObject => "genecis-change-object",
        TaskKind::DomainConversion => {
            return Err(Error::UnsupportedTask(task.to_string()));
        }
    })
}

/// Built-in reasoner template for a task. Domain conversion never calls the reasoner.
pub fn task_template(task: TaskKind) -> Result<PromptTemplate> {
    TemplateStore::builtin().for_task(task).cloned()
}
