//! Browser bindings for three workbench operations: readability profiles,
//! code-vs-reference scoring, and Krippendorff's alpha over a pasted CSV.
//!
//! Every export returns a JSON string; the page parses it.

use qualcode::agreement::{RatingMatrix, Scale};
use qualcode::experiment::{score_pair, MetricFlags};
use qualcode::gateway::StubEmbedder;
use qualcode::readability;
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Readability profile of `text` as JSON.
pub fn profile_json(text: &str) -> Result<String, String> {
    let p = readability::profile(text).map_err(|e| e.to_string())?;
    Ok(serde_json::to_string(&p).expect("profile serializes"))
}

/// ROUGE-1/2/L and BERTScore (hash-seeded stub embeddings) of a candidate
/// code against a reference code.
pub fn score_json(candidate: &str, reference: &str) -> Result<String, String> {
    let scores = score_pair(candidate, reference, MetricFlags::default(), &StubEmbedder::default())
        .map_err(|e| e.to_string())?;
    Ok(serde_json::to_string(&scores).expect("scores serialize"))
}

/// Alpha on each requested scale (`all` for nominal, ordinal and interval)
/// over an `item,observer...` CSV with blanks for missing ratings.
pub fn alpha_json(csv: &str, scale: &str) -> Result<String, String> {
    let m = RatingMatrix::from_csv(csv.as_bytes()).map_err(|e| e.to_string())?;
    let scales = match scale {
        "all" | "" => vec![Scale::Nominal, Scale::Ordinal, Scale::Interval],
        s => vec![s.parse::<Scale>().map_err(|e| e.to_string())?],
    };
    let results: Vec<_> = scales
        .into_iter()
        .map(|s| m.alpha(s).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    Ok(json!({ "items": m.items.len(), "observers": m.observers.len(), "results": results }).to_string())
}

#[wasm_bindgen]
pub fn readability_profile(text: &str) -> Result<String, JsError> {
    profile_json(text).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn score_codes(candidate: &str, reference: &str) -> Result<String, JsError> {
    score_json(candidate, reference).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn krippendorff_alpha(csv: &str, scale: &str) -> Result<String, JsError> {
    alpha_json(csv, scale).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn profile_matches_core() {
        let v: Value = serde_json::from_str(&profile_json("She doesn't always understand correctly what I say.").unwrap()).unwrap();
        assert_eq!(v["char_length"], 51);
        assert_eq!(v["syllable_count"], 14);
        assert!(profile_json("   ").is_err());
    }

    #[test]
    fn identical_codes_score_one() {
        let v: Value = serde_json::from_str(&score_json("fear of failure", "Fear of failure").unwrap()).unwrap();
        assert_eq!(v["rouge"]["rouge1"]["f1"], 1.0);
        assert!((v["bertscore"]["f1"].as_f64().unwrap() - 1.0).abs() < 1e-12);
        assert!(score_json("", "x").is_err());
    }

    #[test]
    fn alpha_on_pasted_matrix() {
        let v: Value = serde_json::from_str(&alpha_json("item,a,b\nx,1,1\ny,1,2\n", "nominal").unwrap()).unwrap();
        assert_eq!(v["results"][0]["alpha"], 0.0);
        let all: Value = serde_json::from_str(&alpha_json("item,a,b\nx,1,1\ny,2,2\nz,3,3\n", "all").unwrap()).unwrap();
        assert_eq!(all["results"].as_array().unwrap().len(), 3);
        assert!(alpha_json("item,a\nx,1\n", "bogus").is_err());
    }
}
