//! Code-comprehension task datasets built from the corpus and its rejects:
//! instruction evolution, data filtering and code review.

mod evolve;
mod review;

use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::GatewayError;
use crate::ingest::Sample;
use crate::quality::{QualityFlag, QualityVerdict};

pub use evolve::{
    evolve_instruction, synth_instruction_evolution_task, EvolutionMethod, EvolutionTemplates, META_EVOLUTION_METHOD,
    META_ORIGIN_ID, SOURCE_EVOLCODE,
};
pub use review::{
    is_selected, parse_review, review_task, synth_code_review, ReviewRecord, ReviewTemplate,
};

/// Source tag carried by task samples.
pub const SOURCE_TASK: &str = "task";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    InstructionEvolution,
    DataFiltering,
    CodeReview,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::InstructionEvolution, TaskKind::DataFiltering, TaskKind::CodeReview];

    /// File stem used when a kind is written to its own JSONL.
    pub fn slug(self) -> &'static str {
        match self {
            TaskKind::InstructionEvolution => "instruction_evolution",
            TaskKind::DataFiltering => "data_filtering",
            TaskKind::CodeReview => "code_review",
        }
    }
}

/// One task sample. Serialized with an `output` field so the JSONL loads
/// back through the `jsonl-instruction-output` reader.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub id: String,
    pub kind: TaskKind,
    pub instruction: String,
    #[serde(rename = "output")]
    pub response: String,
    pub origin_ids: Vec<String>,
}

impl TaskRecord {
    pub fn validate(&self) -> Result<(), String> {
        if self.origin_ids.is_empty() {
            return Err(format!("{}: origin_ids is empty", self.id));
        }
        if self.instruction.trim().is_empty() || self.response.trim().is_empty() {
            return Err(format!("{}: empty instruction or response", self.id));
        }
        let ok = match self.kind {
            TaskKind::InstructionEvolution => self.response.contains("### Rewritten Instruction"),
            TaskKind::DataFiltering => {
                FILTER_CATEGORIES.iter().any(|c| self.response.starts_with(&format!("({})", c.letter)))
            }
            TaskKind::CodeReview => review::parse_review(&self.response).is_ok() && self.instruction.contains("### Code"),
        };
        if ok {
            Ok(())
        } else {
            Err(format!("{}: response does not match the {:?} schema", self.id, self.kind))
        }
    }

    pub fn to_sample(&self) -> Sample {
        let mut sample = Sample::new(self.id.clone(), SOURCE_TASK, self.instruction.clone(), self.response.clone());
        sample.meta.insert("kind".into(), serde_json::to_value(self.kind).expect("kind").as_str().unwrap_or("").into());
        sample.meta.insert("origin_ids".into(), serde_json::to_string(&self.origin_ids).expect("ids"));
        sample
    }
}

#[derive(Debug, Error)]
pub enum TaskError {
    #[error(transparent)]
    Provider(#[from] GatewayError),
    #[error("sample `{0}` has an empty instruction")]
    EmptyInstruction(String),
    #[error("evolution of `{id}` rejected after {attempts} attempt(s): {reason}")]
    EvolutionRejected { id: String, attempts: u32, reason: String },
    #[error("evolved instruction of `{0}` is identical to the original")]
    DegenerateEvolution(String),
    #[error("verdict of `{id}` has no flag among the four categories: {flags}")]
    UnmappableFlag { id: String, flags: String },
    #[error("sample `{0}` contains no code block")]
    NoCode(String),
    #[error("review of `{id}` unparseable after {attempts} attempt(s): {reason}")]
    ParseFailure { id: String, attempts: u32, reason: String },
}

pub struct FilterCategory {
    pub letter: char,
    pub flag: QualityFlag,
    pub description: &'static str,
}

/// The four low-quality categories, in labeling priority order.
pub const FILTER_CATEGORIES: [FilterCategory; 4] = [
    FilterCategory {
        letter: 'a',
        flag: QualityFlag::TooShortNoCode,
        description: "the response is excessively short and lacks code",
    },
    FilterCategory { letter: 'b', flag: QualityFlag::CompileFailure, description: "the code fails to compile" },
    FilterCategory { letter: 'c', flag: QualityFlag::PoorClarity, description: "the code has poor clarity" },
    FilterCategory {
        letter: 'd',
        flag: QualityFlag::NotFunctionForm,
        description: "the code does not follow the function form required by the instruction",
    },
];

/// Category letter for a set of flags under the fixed a > b > c > d priority.
pub fn filter_category(verdict: &QualityVerdict) -> Option<&'static FilterCategory> {
    FILTER_CATEGORIES.iter().find(|c| verdict.flags.contains(&c.flag))
}

/// Present a rejected sample with the four labeled options; the answer is
/// the highest-priority matching category and a rationale from the evidence.
pub fn synth_data_filtering_task(rejected: &Sample, verdict: &QualityVerdict) -> Result<TaskRecord, TaskError> {
    let Some(category) = filter_category(verdict) else {
        let flags: Vec<String> = verdict.flags.iter().map(|f| format!("{f:?}")).collect();
        return Err(TaskError::UnmappableFlag { id: rejected.id.clone(), flags: flags.join(", ") });
    };
    let options: Vec<String> =
        FILTER_CATEGORIES.iter().map(|c| format!("({}) {}", c.letter, capitalize(c.description))).collect();
    let instruction = format!(
        "The following instruction-response pair is low-quality training data. Classify it into exactly one of these categories:\n{}\n\n### Instruction\n{}\n\n### Response\n{}",
        options.join("\n"),
        rejected.instruction,
        rejected.response()
    );
    let evidence = verdict.evidence.get(&category.flag).map(String::as_str).unwrap_or("");
    let response = format!(
        "({}) {}: {}.",
        category.letter,
        capitalize(category.description),
        evidence.trim_end_matches('.')
    );
    Ok(TaskRecord {
        id: format!("task-filter-{}", rejected.id),
        kind: TaskKind::DataFiltering,
        instruction,
        response,
        origin_ids: vec![rejected.id.clone()],
    })
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Write records of one kind as JSONL.
pub fn write_tasks(path: &Path, records: &[TaskRecord]) -> std::io::Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for record in records {
        writeln!(out, "{}", serde_json::to_string(record).expect("task serializes"))?;
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn verdict(flags: &[QualityFlag]) -> QualityVerdict {
        QualityVerdict::new(flags.iter().map(|f| (*f, format!("{f:?} evidence"))).collect::<BTreeMap<_, _>>(), vec![])
    }

    fn reject() -> Sample {
        Sample::new("r1", "src", "What is 6*7?", "42")
    }

    #[test]
    fn too_short_is_category_a() {
        let rec = synth_data_filtering_task(&reject(), &verdict(&[QualityFlag::TooShortNoCode])).unwrap();
        assert!(rec.response.starts_with("(a) "));
        assert!(rec.response.contains("TooShortNoCode evidence"));
        assert!(rec.instruction.contains("(d) "));
        rec.validate().unwrap();
    }

    #[test]
    fn notebook_only_is_unmappable() {
        let err = synth_data_filtering_task(&reject(), &verdict(&[QualityFlag::NotebookForm])).unwrap_err();
        assert!(matches!(err, TaskError::UnmappableFlag { .. }));
    }

    #[test]
    fn priority_picks_compile_over_function_form() {
        let v = verdict(&[QualityFlag::NotFunctionForm, QualityFlag::CompileFailure]);
        assert!(synth_data_filtering_task(&reject(), &v).unwrap().response.starts_with("(b) "));
    }

    #[test]
    fn category_consistent_with_flags() {
        use QualityFlag::*;
        let mapped = [TooShortNoCode, CompileFailure, PoorClarity, NotFunctionForm];
        // every non-empty subset of the mapped flags
        for mask in 1u32..16 {
            let flags: Vec<_> = (0..4).filter(|i| mask & (1 << i) != 0).map(|i| mapped[i]).collect();
            let rec = synth_data_filtering_task(&reject(), &verdict(&flags)).unwrap();
            let first = (0..4).find(|i| mask & (1 << i) != 0).unwrap();
            let letter = ['a', 'b', 'c', 'd'][first];
            assert!(rec.response.starts_with(&format!("({letter})")), "{flags:?}");
        }
    }

    #[test]
    fn task_records_load_as_samples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data_filtering.jsonl");
        let rec = synth_data_filtering_task(&reject(), &verdict(&[QualityFlag::TooShortNoCode])).unwrap();
        write_tasks(&path, std::slice::from_ref(&rec)).unwrap();
        let (samples, skipped) = crate::ingest::load_all(&path, SOURCE_TASK, "jsonl-instruction-output").unwrap();
        assert_eq!(skipped, 0);
        assert_eq!(samples[0].id, rec.id);
        assert_eq!(samples[0].source, "task");
        assert_eq!(samples[0].response(), rec.response);
        assert_eq!(samples[0].meta["kind"], "DataFiltering");
        let back: TaskRecord = serde_json::from_str(&serde_json::to_string(&rec).unwrap()).unwrap();
        assert_eq!(back, rec);
    }
}
