//! Calibration dataset as JSON lines:
//! `{"id": "...", "modality": ["visual", "text", ...], "embeddings": [[...], ...]}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AtvError, Result};
use crate::model::{Modality, TokenSequence};
use crate::numerics::Matrix;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    id: String,
    modality: Vec<Modality>,
    embeddings: Vec<Vec<f32>>,
}

fn parse_line(text: &str, d_model: Option<usize>) -> std::result::Result<TokenSequence, String> {
    let line: Line = serde_json::from_str(text).map_err(|e| e.to_string())?;
    if line.modality.len() != line.embeddings.len() {
        return Err(format!(
            "`{}`: {} modality labels for {} embedding rows",
            line.id,
            line.modality.len(),
            line.embeddings.len()
        ));
    }
    if line.embeddings.is_empty() {
        return Err(format!("`{}`: no tokens", line.id));
    }
    let width = d_model.unwrap_or(line.embeddings[0].len());
    if let Some(r) = line.embeddings.iter().position(|r| r.len() != width) {
        return Err(format!(
            "`{}`: row {r} has width {}, expected {width}",
            line.id,
            line.embeddings[r].len()
        ));
    }
    if !line.modality.contains(&Modality::Text) {
        return Err(format!("`{}`: no \"text\" token", line.id));
    }
    let n = line.embeddings.len();
    let emb = Matrix::from_vec(n, width, line.embeddings.concat()).map_err(|e| format!("`{}`: {e}", line.id))?;
    TokenSequence::new(line.id, emb, line.modality).map_err(|e| e.to_string())
}

/// Reads every non-blank line. Errors carry the 1-based line number.
/// With `d_model = None` the first sample fixes the width.
pub fn read_calibration_from(reader: impl BufRead, d_model: Option<usize>) -> Result<Vec<TokenSequence>> {
    let mut out: Vec<TokenSequence> = Vec::new();
    let mut width = d_model;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let seq = parse_line(&line, width).map_err(|message| AtvError::Jsonl { line: i + 1, message })?;
        width = Some(seq.embeddings.cols());
        out.push(seq);
    }
    Ok(out)
}

pub fn read_calibration(path: impl AsRef<Path>, d_model: Option<usize>) -> Result<Vec<TokenSequence>> {
    read_calibration_from(BufReader::new(File::open(path)?), d_model)
}

pub fn write_calibration_to(mut w: impl Write, samples: &[TokenSequence]) -> Result<()> {
    for s in samples {
        let line = Line {
            id: s.id.clone(),
            modality: s.modality.clone(),
            embeddings: s.embeddings.row_iter().map(<[f32]>::to_vec).collect(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_calibration(path: impl AsRef<Path>, samples: &[TokenSequence]) -> Result<()> {
    write_calibration_to(BufWriter::new(File::create(path)?), samples)
}
