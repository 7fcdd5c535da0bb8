//! `link` and `retrieve`: backend selection and config resolution.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use log::warn;
use mhel_core::calibration::{DevRetrievalRecord, ScoredQid};
use mhel_core::corpus::{
    load_corpus, manifest_path, to_canonical_json, write_predictions, write_report,
    PredictionRecord,
};
use mhel_core::encoder::{Encoder, EncoderConfig, EncoderKind};
use mhel_core::index::VectorIndex;
use mhel_core::kb::KbStore;
use mhel_core::llm::{http_chat, ChatBackend};
use mhel_core::manifest::{unix_now, BackendInfo, RunManifest, VERSION};
use mhel_core::mock::ScriptedChat;
use mhel_core::pipeline::{link_corpus, LinkerDeps, PipelineConfig, Route};
use serde::Deserialize;

use crate::{FailureArg, PromptArg, VariantArg};

pub const ENCODER_ENV: &str = "MHEL_ENCODER_ENDPOINT";
pub const CHAT_ENV: &str = "MHEL_CHAT_ENDPOINT";

#[derive(Args, Debug)]
pub struct EncoderArgs {
    /// `mock`, `precomputed` or an http(s) URL [default: $MHEL_ENCODER_ENDPOINT]
    #[arg(long)]
    encoder_endpoint: Option<String>,
    /// Vectors for the precomputed encoder, keyed by mention_id.
    #[arg(long)]
    encoder_vectors: Option<PathBuf>,
    #[arg(long)]
    encoder_keys: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct LinkArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// JSON config; relative paths inside it are resolved against its directory.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Prediction JSONL; the run manifest goes to `<out>.manifest.json`.
    #[arg(long)]
    out: PathBuf,
    /// Entity store written by `import-kb`.
    #[arg(long)]
    kb: Option<PathBuf>,
    #[arg(long)]
    vectors: Option<PathBuf>,
    #[arg(long)]
    ids: Option<PathBuf>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long, value_enum)]
    prompt: Option<PromptArg>,
    /// Candidate block size K.
    #[arg(long)]
    k: Option<usize>,
    /// Routing threshold θ; `inf` sends every mention to the LLM.
    #[arg(long, allow_hyphen_values = true)]
    theta: Option<f64>,
    #[command(flatten)]
    encoder: EncoderArgs,
    /// `mock:<script.json>` or an http(s) URL [default: $MHEL_CHAT_ENDPOINT]
    #[arg(long)]
    chat_endpoint: Option<String>,
    #[arg(long)]
    max_inflight: Option<usize>,
    #[arg(long, value_enum)]
    on_backend_failure: Option<FailureArg>,
    #[arg(long)]
    max_tokens: Option<u32>,
}

#[derive(Args, Debug)]
pub struct RetrieveArgs {
    /// Corpus with gold_qid on every mention.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vectors: PathBuf,
    #[arg(long)]
    ids: PathBuf,
    #[command(flatten)]
    encoder: EncoderArgs,
    #[arg(long, default_value_t = 50)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

/// The `--config` file. Every key is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    pipeline: PipelineConfig,
    kb: Option<PathBuf>,
    vectors: Option<PathBuf>,
    ids: Option<PathBuf>,
    encoder_endpoint: Option<String>,
    encoder_vectors: Option<PathBuf>,
    encoder_keys: Option<PathBuf>,
    chat_endpoint: Option<String>,
}

impl ConfigFile {
    fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: ConfigFile = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.kb,
            &mut cfg.vectors,
            &mut cfg.ids,
            &mut cfg.encoder_vectors,
            &mut cfg.encoder_keys,
        ]
        .into_iter()
        .flatten()
        {
            *p = base.join(&*p);
        }
        if let Some(script) = cfg
            .chat_endpoint
            .as_deref()
            .and_then(|e| e.strip_prefix("mock:"))
        {
            cfg.chat_endpoint = Some(format!("mock:{}", base.join(script).display()));
        }
        Ok(cfg)
    }
}

/// Flag, then config value, then environment variable.
fn endpoint(flag: Option<String>, config: Option<String>, env: &str, what: &str) -> Result<String> {
    flag.or(config)
        .or_else(|| std::env::var(env).ok().filter(|v| !v.is_empty()))
        .ok_or_else(|| {
            anyhow!("no {what} endpoint: pass --{what}-endpoint, set it in the config or set {env}")
        })
}

fn required(flag: Option<PathBuf>, config: Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or(config)
        .ok_or_else(|| anyhow!("missing --{name} (or \"{name}\" in the config)"))
}

fn is_url(s: &str) -> bool {
    s.starts_with("http://") || s.starts_with("https://")
}

fn build_encoder(
    endpoint: &str,
    dim: usize,
    vectors: Option<PathBuf>,
    keys: Option<PathBuf>,
    max_inflight: usize,
) -> Result<Box<dyn Encoder>> {
    let mut cfg = match endpoint {
        "mock" => EncoderConfig::mock(dim),
        "precomputed" => EncoderConfig {
            backend: EncoderKind::Precomputed,
            vectors,
            keys,
            ..EncoderConfig::mock(dim)
        },
        url if is_url(url) => EncoderConfig::http(url, dim),
        other => {
            bail!("unsupported encoder endpoint {other:?}: use mock, precomputed or an http(s) URL")
        }
    };
    cfg.max_inflight = max_inflight;
    Ok(cfg.build()?)
}

fn build_chat(endpoint: &str, max_inflight: usize) -> Result<Box<dyn ChatBackend>> {
    if let Some(script) = endpoint.strip_prefix("mock:") {
        return Ok(Box::new(ScriptedChat::load(Path::new(script))?));
    }
    if is_url(endpoint) {
        return Ok(Box::new(http_chat(endpoint, max_inflight)?));
    }
    bail!("unsupported chat endpoint {endpoint:?}: use mock:<script.json> or an http(s) URL")
}

pub fn link(args: LinkArgs) -> Result<()> {
    let started_at = unix_now();
    let file = match &args.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };

    let mut config = file.pipeline;
    if let Some(v) = args.variant {
        config.variant = v.into();
    }
    if let Some(p) = args.prompt {
        config.prompt_mode = p.into();
    }
    if let Some(k) = args.k {
        config.block_size = k;
    }
    if let Some(t) = args.theta {
        config.threshold = Some(t);
    }
    if let Some(n) = args.max_inflight {
        config.max_inflight = n;
    }
    if let Some(f) = args.on_backend_failure {
        config.backend_failure_policy = f.into();
    }
    if let Some(n) = args.max_tokens {
        config.max_tokens = n;
    }
    config.validate()?;

    let kb_path = required(args.kb, file.kb, "kb")?;
    let vectors_path = required(args.vectors, file.vectors, "vectors")?;
    let ids_path = required(args.ids, file.ids, "ids")?;
    let encoder_endpoint = endpoint(
        args.encoder.encoder_endpoint,
        file.encoder_endpoint,
        ENCODER_ENV,
        "encoder",
    )?;
    let chat_endpoint = endpoint(args.chat_endpoint, file.chat_endpoint, CHAT_ENV, "chat")?;

    let corpus = load_corpus(&args.corpus)?;
    let store = KbStore::open(&kb_path)?;
    let index = VectorIndex::load(&vectors_path, &ids_path)?;
    let encoder = build_encoder(
        &encoder_endpoint,
        index.dim(),
        args.encoder.encoder_vectors.or(file.encoder_vectors),
        args.encoder.encoder_keys.or(file.encoder_keys),
        config.max_inflight,
    )?;
    let chat = build_chat(&chat_endpoint, config.max_inflight)?;

    let deps = LinkerDeps {
        encoder: encoder.as_ref(),
        index: &index,
        store: &store,
        chat: chat.as_ref(),
    };
    let (decisions, stats) = link_corpus(&corpus.mentions, &config, deps)?;
    let failures = decisions
        .iter()
        .filter(|d| d.route == Route::BackendFallback)
        .count();
    if failures > 0 {
        warn!("{failures} mentions fell back to the top-1 candidate after chat failures");
    }
    let records: Vec<PredictionRecord> = decisions.iter().map(PredictionRecord::from).collect();
    write_predictions(&args.out, &records)?;

    let manifest = RunManifest {
        tool: "mhel".into(),
        version: VERSION.into(),
        config,
        backends: BackendInfo {
            encoder_endpoint,
            encoder_dim: index.dim(),
            chat_endpoint,
        },
        corpus_path: args.corpus.display().to_string(),
        corpus: corpus.manifest,
        kb_path: kb_path.display().to_string(),
        vectors_path: vectors_path.display().to_string(),
        ids_path: ids_path.display().to_string(),
        predictions_path: args.out.display().to_string(),
        started_at,
        finished_at: unix_now(),
        stats,
    };
    let manifest_out = manifest_path(&args.out);
    write_report(&manifest_out, &manifest)?;
    let s = &manifest.stats;
    println!(
        "linked {} mentions: {} easy, {} chat calls, {} NIL -> {}",
        s.mentions,
        s.count(Route::EasyTop1),
        s.chat_calls,
        s.nil_predictions,
        args.out.display()
    );
    Ok(())
}

pub fn retrieve(args: RetrieveArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let index = VectorIndex::load(&args.vectors, &args.ids)?;
    let endpoint = endpoint(args.encoder.encoder_endpoint, None, ENCODER_ENV, "encoder")?;
    let encoder = build_encoder(
        &endpoint,
        index.dim(),
        args.encoder.encoder_vectors,
        args.encoder.encoder_keys,
        4,
    )?;
    let marked = corpus
        .mentions
        .iter()
        .map(|m| m.marked())
        .collect::<Result<Vec<_>, _>>()?;
    let vectors = encoder.encode_batch(&marked)?;

    let file =
        File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut out = BufWriter::new(file);
    for (m, v) in corpus.mentions.iter().zip(&vectors) {
        let gold_qid = m
            .gold_qid
            .clone()
            .ok_or_else(|| anyhow!("mention {} has no gold_qid", m.mention_id))?;
        let hits = index
            .search(v, args.k)?
            .into_iter()
            .map(|h| ScoredQid {
                qid: h.qid,
                score: h.score,
            })
            .collect();
        let rec = DevRetrievalRecord {
            mention_id: m.mention_id.clone(),
            gold_qid,
            hits,
        };
        writeln!(out, "{}", to_canonical_json(&rec))?;
    }
    out.flush()?;
    println!(
        "wrote top-{} retrievals for {} mentions to {}",
        args.k,
        corpus.mentions.len(),
        args.out.display()
    );
    Ok(())
}
