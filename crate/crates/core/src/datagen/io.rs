//! JSONL dataset records: one preference pair per line, plus a vocabulary
//! sidecar mapping token ids to surface strings.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DatagenError, PreferencePair, Provenance, Scheme};
use crate::confidence::TokenWeights;
use crate::constraint_lang::{parse_instruction, serialize_instruction, Response, Token, Vocab};

/// Instruction or response payload: canonical token ids for the synthetic
/// language, raw text for natural-language pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Payload {
    Tokens(Vec<Token>),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub chosen_ins: Payload,
    pub chosen_resp: Payload,
    pub rejected_ins: Payload,
    pub rejected_resp: Payload,
    pub dropped_indices: Vec<usize>,
    pub scheme: Scheme,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_chosen: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_rejected: Option<Vec<f64>>,
    pub provenance: Provenance,
}

impl PairRecord {
    pub fn from_pair(pair: &PreferencePair, vocab: &Vocab) -> Result<Self, DatagenError> {
        Ok(Self {
            chosen_ins: Payload::Tokens(serialize_instruction(&pair.chosen_instruction, vocab)?),
            chosen_resp: Payload::Tokens(pair.chosen_response.tokens().to_vec()),
            rejected_ins: Payload::Tokens(serialize_instruction(&pair.rejected_instruction, vocab)?),
            rejected_resp: Payload::Tokens(pair.rejected_response.tokens().to_vec()),
            dropped_indices: pair.dropped_indices.clone(),
            scheme: pair.scheme,
            weights_chosen: pair.weights.as_ref().map(|w| w.chosen.clone()),
            weights_rejected: pair.weights.as_ref().map(|w| w.rejected.clone()),
            provenance: pair.provenance.clone(),
        })
    }

    /// Converts a token record back into a pair. `line` is only used in
    /// error messages.
    pub fn to_pair(&self, vocab: &Vocab, line: usize) -> Result<PreferencePair, DatagenError> {
        let err = |message: String| DatagenError::Schema { line, message };
        let tokens = |field: &str, p: &Payload| match p {
            Payload::Tokens(t) => Ok(t.clone()),
            Payload::Text(_) => Err(err(format!("field `{field}` holds text, expected token ids"))),
        };
        let ins = |field: &str, p: &Payload| {
            parse_instruction(&tokens(field, p)?, vocab).map_err(|e| err(format!("field `{field}`: {e}")))
        };
        let resp = |field: &str, p: &Payload| {
            Response::from_tokens(tokens(field, p)?, vocab).map_err(|e| err(format!("field `{field}`: {e}")))
        };
        let weights = match (&self.weights_chosen, &self.weights_rejected) {
            (Some(c), Some(r)) => Some(TokenWeights { chosen: c.clone(), rejected: r.clone() }),
            (None, None) => None,
            (None, Some(_)) => return Err(err("missing field `weights_chosen`".into())),
            (Some(_), None) => return Err(err("missing field `weights_rejected`".into())),
        };
        Ok(PreferencePair {
            chosen_instruction: ins("chosen_ins", &self.chosen_ins)?,
            chosen_response: resp("chosen_resp", &self.chosen_resp)?,
            rejected_instruction: ins("rejected_ins", &self.rejected_ins)?,
            rejected_response: resp("rejected_resp", &self.rejected_resp)?,
            dropped_indices: self.dropped_indices.clone(),
            scheme: self.scheme,
            weights,
            provenance: self.provenance.clone(),
        })
    }
}

/// Path of the vocabulary sidecar written next to a dataset.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".vocab.tsv");
    PathBuf::from(s)
}

pub fn write_records(records: &[PairRecord], path: &Path) -> Result<(), DatagenError> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Writes one JSON object per line and the vocabulary sidecar.
pub fn write_dataset(pairs: &[PreferencePair], path: &Path, vocab: &Vocab) -> Result<(), DatagenError> {
    let records = pairs.iter().map(|p| PairRecord::from_pair(p, vocab)).collect::<Result<Vec<_>, _>>()?;
    write_records(&records, path)?;
    fs::write(sidecar_path(path), vocab.sidecar())?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<PairRecord>, DatagenError> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(line)
            .map_err(|e| DatagenError::Schema { line: i + 1, message: e.to_string() })?;
        out.push(record);
    }
    Ok(out)
}

pub fn read_dataset(path: &Path, vocab: &Vocab) -> Result<Vec<PreferencePair>, DatagenError> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: PairRecord = serde_json::from_str(line)
            .map_err(|e| DatagenError::Schema { line: i + 1, message: e.to_string() })?;
        out.push(record.to_pair(vocab, i + 1)?);
    }
    Ok(out)
}

/// SHA-256 of the dataset file bytes, hex encoded.
pub fn dataset_hash(path: &Path) -> Result<String, DatagenError> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}
