use serde::{Deserialize, Serialize};

use crate::gateway::{ChatRequest, Gateway, Purpose};
use crate::ingest::Sample;

use super::{TaskError, TaskKind, TaskRecord};

/// Source tag carried by evolved samples.
pub const SOURCE_EVOLCODE: &str = "evolcode";
pub const META_ORIGIN_ID: &str = "origin_id";
pub const META_EVOLUTION_METHOD: &str = "evolution_method";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvolutionMethod {
    AddConstraints,
    RaiseComplexity,
    DemandExplanation,
}

impl EvolutionMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            EvolutionMethod::AddConstraints => "add_constraints",
            EvolutionMethod::RaiseComplexity => "raise_complexity",
            EvolutionMethod::DemandExplanation => "demand_explanation",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [EvolutionMethod::AddConstraints, EvolutionMethod::RaiseComplexity, EvolutionMethod::DemandExplanation]
            .into_iter()
            .find(|m| m.as_str() == s)
    }

    fn directive(self) -> &'static str {
        match self {
            EvolutionMethod::AddConstraints => {
                "Add new constraints and requirements to the original problem, adding approximately 10 additional words."
            }
            EvolutionMethod::RaiseComplexity => {
                "Propose higher time or space complexity requirements, but please refrain from doing so frequently."
            }
            EvolutionMethod::DemandExplanation => {
                "Require a detailed explanation of each step of the solution in addition to the code."
            }
        }
    }

    fn change(self) -> &'static str {
        match self {
            EvolutionMethod::AddConstraints => "adds new constraints and requirements",
            EvolutionMethod::RaiseComplexity => "raises the time or space complexity requirements",
            EvolutionMethod::DemandExplanation => "asks for a step-by-step explanation of the solution",
        }
    }
}

/// Evolution prompt set, applied round-robin by sample position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolutionTemplates {
    pub methods: Vec<EvolutionMethod>,
    /// `{method}` and `{instruction}` are substituted.
    pub template: String,
    pub max_attempts: u32,
}

impl Default for EvolutionTemplates {
    fn default() -> Self {
        EvolutionTemplates {
            methods: vec![
                EvolutionMethod::AddConstraints,
                EvolutionMethod::RaiseComplexity,
                EvolutionMethod::DemandExplanation,
            ],
            template: "Please increase the difficulty of the given programming test question a bit.\nYou can increase the difficulty using, but not limited to, the following method:\n{method}\n\n#Given Prompt#:\n{instruction}\n\n#Rewritten Prompt#:\n".into(),
            max_attempts: 3,
        }
    }
}

impl EvolutionTemplates {
    pub fn method_for(&self, index: usize) -> EvolutionMethod {
        self.methods[index % self.methods.len()]
    }

    pub fn render(&self, method: EvolutionMethod, instruction: &str) -> ChatRequest {
        let user = self.template.replace("{method}", method.directive()).replace("{instruction}", instruction);
        ChatRequest::new(Purpose::Evolve, user).with_max_output(512)
    }
}

/// Evolve the instruction of `sample` with the method scheduled for `index`
/// and generate a fresh response for it.
///
/// The rewritten instruction must be strictly longer than the original;
/// shorter or equal rewrites are regenerated up to `max_attempts` times.
pub fn evolve_instruction(
    sample: &Sample,
    gateway: &Gateway,
    templates: &EvolutionTemplates,
    index: usize,
) -> Result<Sample, TaskError> {
    let original = sample.instruction.trim();
    if original.is_empty() {
        return Err(TaskError::EmptyInstruction(sample.id.clone()));
    }
    let method = templates.method_for(index);
    let request = templates.render(method, original);
    let attempts = templates.max_attempts.max(1);
    let mut reason = String::new();
    for attempt in 0..attempts {
        let answer = gateway.complete(&request.clone().with_attempt(attempt))?;
        let evolved = answer.trim().trim_start_matches("#Rewritten Prompt#:").trim();
        if evolved.chars().count() <= original.chars().count() {
            reason = format!("rewrite has {} characters, original {}", evolved.chars().count(), original.chars().count());
            continue;
        }
        let response = gateway.complete(&ChatRequest::new(Purpose::Evolve, evolved).with_max_output(2048))?;
        let mut out = Sample::new(format!("{}-evol", sample.id), SOURCE_EVOLCODE, evolved, response);
        out.meta.insert(META_ORIGIN_ID.into(), sample.id.clone());
        out.meta.insert(META_EVOLUTION_METHOD.into(), method.as_str().into());
        return Ok(out);
    }
    Err(TaskError::EvolutionRejected { id: sample.id.clone(), attempts, reason })
}

/// Teach the evolution step itself: given the original instruction, produce
/// the evolved one and explain the difference.
pub fn synth_instruction_evolution_task(original: &Sample, evolved: &Sample) -> Result<TaskRecord, TaskError> {
    let before = original.instruction.trim();
    let after = evolved.instruction.trim();
    if before == after {
        return Err(TaskError::DegenerateEvolution(original.id.clone()));
    }
    let method = evolved
        .meta
        .get(META_EVOLUTION_METHOD)
        .and_then(|m| EvolutionMethod::parse(m))
        .unwrap_or(EvolutionMethod::AddConstraints);
    let words = |s: &str| s.split_whitespace().count();
    let explanation = match after.strip_prefix(before) {
        Some(added) if !added.trim().is_empty() => format!(
            "The rewritten instruction keeps the original task unchanged and {}: \"{}\"",
            method.change(),
            added.trim()
        ),
        _ => format!(
            "The rewritten instruction restates the original {}-word task as a {}-word version that {}.",
            words(before),
            words(after),
            method.change()
        ),
    };
    let instruction = format!(
        "Rewrite the programming instruction below into a more demanding version. {} Then explain how your version differs from the original.\n\n### Original Instruction\n{before}",
        method.directive()
    );
    let response = format!("### Rewritten Instruction\n{after}\n\n### Differences\n{explanation}");
    Ok(TaskRecord {
        id: format!("task-evol-{}", original.id),
        kind: TaskKind::InstructionEvolution,
        instruction,
        response,
        origin_ids: vec![original.id.clone(), evolved.id.clone()],
    })
}
