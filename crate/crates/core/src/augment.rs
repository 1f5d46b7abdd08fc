//! The nine query reformulation strategies and their prompts.

use alloc::format;
use alloc::string::{String, ToString};

use crate::error::{Error, Result};
use crate::hash::FramedHasher;
use crate::types::{Origin, Query};

pub const AUGMENT_PROMPT_VERSION: &str = "kap-augment/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentationStrategy {
    pub id: u8,
    pub instruction: &'static str,
}

pub const STRATEGIES: [AugmentationStrategy; 9] = [
    AugmentationStrategy {
        id: 1,
        instruction: "Replace every keyword in the question with a synonym (for example, 修改 becomes 變更). Keep the question complete and its meaning unchanged.",
    },
    AugmentationStrategy {
        id: 2,
        instruction: "Replace half of the keywords in the question with synonyms and keep the other half exactly as written. Keep the question complete and its meaning unchanged.",
    },
    AugmentationStrategy {
        id: 3,
        instruction: "Extract the core keywords of the question and output them as a space-separated list, without any other words.",
    },
    AugmentationStrategy {
        id: 4,
        instruction: "Extract the core keywords of the question, replace every one of them with a synonym, and output them as a space-separated list.",
    },
    AugmentationStrategy {
        id: 5,
        instruction: "Extract the core keywords of the question, replace only half of them with synonyms while keeping the rest as originally phrased, and output them as a space-separated list.",
    },
    AugmentationStrategy {
        id: 6,
        instruction: "Change the sentence structure by altering the word order, for example swapping the subject and the verb, while preserving the original meaning.",
    },
    AugmentationStrategy {
        id: 7,
        instruction: "Condense the question into its most concise form that still carries its essential meaning.",
    },
    AugmentationStrategy {
        id: 8,
        instruction: "First condense the question into its most concise form, then vary the structure of that condensed form, for example by reordering the subject and the verb.",
    },
    AugmentationStrategy {
        id: 9,
        instruction: "Rephrase the question in an informal, conversational style, as a customer might ask it in a chat.",
    },
];

pub fn strategy(id: u8) -> Option<&'static AugmentationStrategy> {
    STRATEGIES.iter().find(|s| s.id == id)
}

pub fn variant_qid(parent: &str, strategy_id: u8) -> String {
    format!("{parent}-s{strategy_id}")
}

pub const AUGMENT_SYSTEM_TEXT: &str = "You rewrite search questions about Traditional Chinese \
financial documents. Apply exactly the transformation you are given and nothing else.";

/// `(system, user)` prompt for one question and one strategy.
pub fn augment_prompt(question: &str, strategy: &AugmentationStrategy) -> (String, String) {
    let user = format!(
        "## TRANSFORMATION {}\n{}\n\n## QUESTION\n{}\n\n## OUTPUT FORMAT\nReturn only the rewritten question in Traditional Chinese on a single line, with no quotes, numbering or commentary.",
        strategy.id, strategy.instruction, question
    );
    (AUGMENT_SYSTEM_TEXT.to_string(), user)
}

pub fn augment_cache_key(system: &str, user: &str, model_id: &str) -> String {
    FramedHasher::new()
        .field(system.as_bytes())
        .field(user.as_bytes())
        .field(model_id.as_bytes())
        .field(AUGMENT_PROMPT_VERSION.as_bytes())
        .finish_hex()
}

/// Builds the augmented query from the provider's reformulation. The
/// variant inherits the candidate pool, gold set and category.
pub fn make_variant(original: &Query, strategy_id: u8, text: &str) -> Result<Query> {
    if !original.is_original() {
        return Err(Error::NotAnOriginal(original.qid.clone()));
    }
    if strategy(strategy_id).is_none() {
        return Err(Error::BadStrategy { qid: original.qid.clone(), strategy: strategy_id });
    }
    Ok(Query {
        qid: variant_qid(&original.qid, strategy_id),
        query: text.to_string(),
        source: original.source.clone(),
        ground_truth: original.ground_truth.clone(),
        category: original.category,
        origin: Some(Origin { parent: original.qid.clone(), strategy: strategy_id }),
    })
}
