//! Deterministic fixture-backed mock backend.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::util::sha256_hex;

use super::{finalize_answers, VlmAnswer, VlmBackend, VlmError, VlmRequest};

/// Fixture lookup key: SHA-256 of the region bytes, a pipe, then the exact
/// prompt string.
pub fn fixture_key(region: &[u8], prompt: &str) -> String {
    format!("{}|{}", sha256_hex(region), prompt)
}

/// One line of the fixture file. Human-editable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub key: String,
    pub answers: Vec<VlmAnswer>,
}

/// Mock backend answering from a fixture table. Identical request bytes
/// always produce byte-identical answers; unknown keys return an empty
/// answer list rather than an error.
#[derive(Debug, Clone, Default)]
pub struct MockVlm {
    answers: HashMap<String, Vec<VlmAnswer>>,
    id: String,
}

impl MockVlm {
    pub fn new(records: impl IntoIterator<Item = FixtureRecord>) -> Self {
        // Later records for the same key win, so fixture files can be
        // amended by appending.
        let answers = records.into_iter().map(|r| (r.key, r.answers)).collect();
        Self {
            answers,
            id: "mock".to_string(),
        }
    }

    /// Loads a line-delimited fixture file.
    pub fn from_path(path: &Path) -> Result<Self, VlmError> {
        let file = File::open(path)
            .map_err(|e| VlmError::Fixture(format!("open {}: {e}", path.display())))?;
        let mut records = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line =
                line.map_err(|e| VlmError::Fixture(format!("read {}: {e}", path.display())))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: FixtureRecord = serde_json::from_str(&line).map_err(|e| {
                VlmError::Fixture(format!("{}:{}: {e}", path.display(), idx + 1))
            })?;
            if let Some(bad) = record.answers.iter().find(|a| a.text.is_empty()) {
                return Err(VlmError::Fixture(format!(
                    "{}:{}: empty answer text (score {})",
                    path.display(),
                    idx + 1,
                    bad.score
                )));
            }
            records.push(record);
        }
        Ok(Self::new(records))
    }

    /// Writes fixture records line-delimited, for fixture generators.
    pub fn write_fixture<W: Write>(
        mut writer: W,
        records: &[FixtureRecord],
    ) -> std::io::Result<()> {
        for record in records {
            let line = serde_json::to_string(record).expect("fixture record serializes");
            writer.write_all(line.as_bytes())?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }
}

impl VlmBackend for MockVlm {
    fn query(&self, request: &VlmRequest) -> Result<Vec<VlmAnswer>, VlmError> {
        let key = fixture_key(request.region(), request.prompt());
        let answers = self.answers.get(&key).cloned().unwrap_or_default();
        Ok(finalize_answers(answers, request.num_answers()))
    }

    fn backend_id(&self) -> &str {
        &self.id
    }
}
