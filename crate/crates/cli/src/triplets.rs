use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use scot_core::forge::{default_grammar, gen_template_triplet, llm_generate_many, validate_triplet};
use scot_core::store::write_triplets;
use scot_core::{Error, LlmEndpointConfig, Rng, TextTriplet};

use crate::failure::{Context, Failure};
use crate::http::HttpTransport;
use crate::settings::{require_file, snapshot_beside, Resolver};

#[derive(Args)]
pub struct TripletArgs {
    /// Caption corpus: JSONL `{"id", "caption"}` lines or plain caption lines.
    #[arg(long)]
    captions: Option<PathBuf>,
    #[arg(long)]
    mode: Option<ForgeMode>,
    /// Accepted triplets, JSONL.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Rejected records with reasons; defaults to `<out>.rejections.jsonl`.
    #[arg(long)]
    rejections: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Generation endpoint URL (llm mode).
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Prompt with a `{caption}` slot.
    #[arg(long)]
    prompt_template: Option<String>,
    #[arg(long)]
    timeout_secs: Option<f64>,
    #[arg(long)]
    max_retries: Option<u32>,
    #[arg(long)]
    temperature: Option<f64>,
    /// First retry delay in milliseconds; doubles per retry.
    #[arg(long)]
    backoff_ms: Option<u64>,
    #[arg(long)]
    max_in_flight: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForgeMode {
    Template,
    Llm,
}

#[derive(Deserialize)]
struct CaptionRow {
    id: String,
    caption: String,
}

#[derive(Serialize)]
struct RejectionRow<'a> {
    id: &'a str,
    caption: &'a str,
    reason: String,
}

/// Lines starting with `{` are JSON records; other lines are bare captions
/// named by their 1-based line number.
pub fn read_captions(path: &Path) -> Result<Vec<(String, String)>, Failure> {
    let text = fs::read_to_string(path).at(path.display())?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('{') {
            let row: CaptionRow = serde_json::from_str(line)
                .map_err(|e| Error::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                })
                .at(path.display())?;
            out.push((row.id, row.caption));
        } else {
            out.push((format!("cap-{:06}", i + 1), line.to_string()));
        }
    }
    Ok(out)
}

fn template_pass(captions: &[(String, String)], seed: u64) -> Vec<Result<TextTriplet, String>> {
    let grammar = default_grammar();
    captions
        .iter()
        .enumerate()
        .map(|(i, (id, caption))| {
            let mut rng = Rng::derive(seed, &[i as u64]);
            let t = gen_template_triplet(id, caption, &grammar, &mut rng).map_err(|e| e.to_string())?;
            validate_triplet(&t).map_err(|e| e.to_string())?;
            Ok(t)
        })
        .collect()
}

pub fn run(a: TripletArgs, mut r: Resolver) -> Result<(), Failure> {
    let dflt = LlmEndpointConfig::default();
    let captions_path: PathBuf = r.required("captions", a.captions)?;
    let mode = r.value("mode", a.mode, ForgeMode::Template)?;
    let out: PathBuf = r.required("out", a.out)?;
    let rejections = r.value("rejections", a.rejections, {
        let mut n = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        n.push(".rejections.jsonl");
        out.with_file_name(n)
    })?;
    let seed = r.value("seed", a.seed, 0u64)?;
    let llm = if mode == ForgeMode::Llm {
        let timeout_secs = r.value("timeout_secs", a.timeout_secs, dflt.timeout.as_secs_f64())?;
        if !(timeout_secs > 0.0 && timeout_secs.is_finite()) {
            return Err(Failure::config("timeout_secs must be positive"));
        }
        let backoff_ms = r.value("backoff_ms", a.backoff_ms, dflt.initial_backoff.as_millis() as u64)?;
        Some(LlmEndpointConfig {
            base_url: r.value("endpoint", a.endpoint, dflt.base_url.clone())?,
            model_name: r.value("model", a.model, dflt.model_name.clone())?,
            prompt_template: r.value("prompt_template", a.prompt_template, dflt.prompt_template.clone())?,
            timeout: Duration::from_secs_f64(timeout_secs),
            max_retries: r.value("max_retries", a.max_retries, dflt.max_retries)?,
            temperature: r.value("temperature", a.temperature, dflt.temperature)?,
            initial_backoff: Duration::from_millis(backoff_ms),
            max_in_flight: r.value("max_in_flight", a.max_in_flight, dflt.max_in_flight)?,
        })
    } else {
        None
    };
    r.finish()?;
    require_file(&captions_path)?;

    let captions = read_captions(&captions_path)?;
    if captions.is_empty() {
        return Err(Failure::from(Error::EmptyInput).context(captions_path.display()));
    }
    let results: Vec<Result<TextTriplet, String>> = match &llm {
        None => template_pass(&captions, seed),
        Some(cfg) => {
            let transport = HttpTransport::from_env().map_err(Failure::config)?;
            llm_generate_many(&captions, cfg, &transport)?
                .into_iter()
                .map(|res| res.map_err(|e| e.to_string()))
                .collect()
        }
    };

    let mut accepted = Vec::new();
    let mut log = BufWriter::new(fs::File::create(&rejections).at(rejections.display())?);
    for ((id, caption), res) in captions.iter().zip(results) {
        match res {
            Ok(t) => accepted.push(t),
            Err(reason) => {
                let row = RejectionRow { id, caption, reason };
                serde_json::to_writer(&mut log, &row).map_err(std::io::Error::from)?;
                log.write_all(b"\n")?;
            }
        }
    }
    log.flush()?;
    let rejected = captions.len() - accepted.len();
    write_triplets(&out, &accepted).at(out.display())?;
    r.write_snapshot(&snapshot_beside(&out))?;
    println!("accepted={} rejected={}", accepted.len(), rejected);
    if accepted.is_empty() {
        return Err(Failure::data(
            "NoTripletsAccepted",
            format!("all {rejected} records rejected; see {}", rejections.display()),
        ));
    }
    Ok(())
}
