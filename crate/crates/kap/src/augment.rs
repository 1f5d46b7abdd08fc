//! Question augmentation: nine reformulations per original question.

use std::collections::BTreeSet;

use kap_core::augment::{
    augment_cache_key, augment_prompt, make_variant, variant_qid, AugmentationStrategy, AUGMENT_PROMPT_VERSION, STRATEGIES,
};
use kap_core::{PromptRequest, Query};

use crate::cache::IndexEntry;
use crate::enhance::strip_wrapper;
use crate::error::{KapError, Result};
use crate::par;
use crate::provider::Gateway;

/// Wrapper markup stripped and lines joined with single spaces.
fn one_line(raw: &str) -> String {
    strip_wrapper(raw).split_whitespace().collect::<Vec<_>>().join(" ")
}

/// The request and cache entry for one question under one strategy.
pub fn prepare_variant(original: &Query, strategy: &AugmentationStrategy, model_id: &str) -> (PromptRequest, IndexEntry) {
    let (system_text, user_text) = augment_prompt(&original.query, strategy);
    let entry = IndexEntry {
        key: augment_cache_key(&system_text, &user_text, model_id),
        qid: Some(original.qid.clone()),
        strategy: Some(strategy.id),
        fingerprint: AUGMENT_PROMPT_VERSION.into(),
        ..Default::default()
    };
    (PromptRequest { system_text, user_text, image: None }, entry)
}

/// The nine variants of one original question, in strategy order.
pub fn generate_variants(original: &Query, gateway: &Gateway, model_id: &str) -> Result<Vec<Query>> {
    if !original.is_original() {
        return Err(kap_core::Error::NotAnOriginal(original.qid.clone()).into());
    }
    STRATEGIES
        .iter()
        .map(|s| {
            let (request, entry) = prepare_variant(original, s, model_id);
            let post = |raw: &str| {
                let t = one_line(raw);
                if t.is_empty() {
                    Err(KapError::EmptyVariant { qid: original.qid.clone(), strategy: s.id })
                } else {
                    Ok(t)
                }
            };
            let (text, _) = gateway.call(&entry, &request, model_id, post)?;
            Ok(make_variant(original, s.id, &text)?)
        })
        .collect()
}

/// Every input question followed by its variants. Variants already present
/// in the input are kept as they are and not regenerated.
pub fn augment_questions(queries: &[Query], gateway: &Gateway, model_id: &str, workers: usize) -> Result<Vec<Query>> {
    let present: BTreeSet<&str> = queries.iter().map(|q| q.qid.as_str()).collect();
    let originals: Vec<&Query> = queries
        .iter()
        .filter(|q| q.is_original() && STRATEGIES.iter().any(|s| !present.contains(variant_qid(&q.qid, s.id).as_str())))
        .collect();
    let generated = par::map(&originals, workers, |q| generate_variants(q, gateway, model_id));
    let mut failures = Vec::new();
    let mut fresh = std::collections::BTreeMap::new();
    for (q, r) in originals.iter().zip(generated) {
        match r {
            Ok(v) => {
                fresh.insert(q.qid.as_str(), v);
            }
            Err(e) => failures.push(format!("{}: {e}", q.qid)),
        }
    }
    if !failures.is_empty() {
        return Err(KapError::PagesFailed(failures));
    }
    let mut out = Vec::new();
    for q in queries {
        if !q.is_original() {
            continue;
        }
        out.push(q.clone());
        let variants = fresh.remove(q.qid.as_str()).unwrap_or_default();
        for s in STRATEGIES {
            let qid = variant_qid(&q.qid, s.id);
            if let Some(existing) = queries.iter().find(|v| v.qid == qid) {
                out.push(existing.clone());
            } else if let Some(v) = variants.iter().find(|v| v.qid == qid) {
                out.push(v.clone());
            }
        }
    }
    let orphans: Vec<&Query> = queries.iter().filter(|q| !q.is_original() && !out.iter().any(|o| o.qid == q.qid)).collect();
    out.extend(orphans.into_iter().cloned());
    kap_core::types::validate_questions(&out)?;
    Ok(out)
}
