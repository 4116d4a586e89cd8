use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use scot_core::store::write_table;
use scot_core::{EmbeddingTable, Error};

use crate::failure::{Context, Failure};
use crate::settings::{require_file, snapshot_beside, Resolver};

#[derive(Args)]
pub struct IngestArgs {
    /// Text tables, read in order into one SEMB table.
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Input format; by default `.jsonl`/`.json` files are JSONL and anything else TSV.
    #[arg(long)]
    format: Option<TextFormat>,
    /// Source tag stored in the table header.
    #[arg(long)]
    tag: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextFormat {
    /// One `{"id": ..., "embedding": [...]}` object per line.
    Jsonl,
    /// `id<TAB>x1<TAB>x2...` per line; blank lines and `#` comments skipped.
    Tsv,
}

#[derive(Deserialize)]
struct JsonRow {
    id: String,
    embedding: Vec<f32>,
}

fn guess_format(path: &Path) -> TextFormat {
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl" | "json") => TextFormat::Jsonl,
        _ => TextFormat::Tsv,
    }
}

fn parse_line(line: &str, lineno: usize, format: TextFormat) -> Result<(String, Vec<f32>), Error> {
    match format {
        TextFormat::Jsonl => {
            let row: JsonRow = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: lineno,
                msg: e.to_string(),
            })?;
            Ok((row.id, row.embedding))
        }
        TextFormat::Tsv => {
            let mut fields = line.split('\t');
            let id = fields.next().unwrap_or_default().trim().to_string();
            if id.is_empty() {
                return Err(Error::Parse {
                    line: lineno,
                    msg: "empty id".into(),
                });
            }
            let values = fields
                .map(|f| f.trim().parse::<f32>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    line: lineno,
                    msg: e.to_string(),
                })?;
            Ok((id, values))
        }
    }
}

pub fn read_rows(path: &Path, format: TextFormat) -> Result<Vec<(String, Vec<f32>)>, Failure> {
    let text = fs::read_to_string(path).at(path.display())?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        rows.push(parse_line(line, i + 1, format).at(path.display())?);
    }
    Ok(rows)
}

pub fn run(a: IngestArgs, mut r: Resolver) -> Result<(), Failure> {
    let inputs = r.list("inputs", a.inputs, Vec::new())?;
    let out: PathBuf = r.required("out", a.out)?;
    let format = r.optional("format", a.format)?;
    let tag = r.value("tag", a.tag, "text-import".to_string())?;
    r.finish()?;
    if inputs.is_empty() {
        return Err(Failure::config("no input files"));
    }
    for p in &inputs {
        require_file(p)?;
    }

    let mut rows = Vec::new();
    for p in &inputs {
        rows.extend(read_rows(p, format.unwrap_or_else(|| guess_format(p)))?);
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput.into());
    }
    let table = EmbeddingTable::from_raw(rows, tag)?;
    write_table(&table, &out).at(out.display())?;
    r.write_snapshot(&snapshot_beside(&out))?;
    println!("rows={} dim={}", table.len(), table.dim());
    Ok(())
}
