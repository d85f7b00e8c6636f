//! Subcommand implementations. Each takes a plain argument struct so the
//! integration tests can drive commands in-process; `main` wires them to
//! the argument parser. All outputs are deterministic given (config, seed):
//! no timestamps, sorted orderings, seeded randomness only.

use crate::config::RunConfig;
use crate::imgfmt;
use crate::jsonl;
use crate::synth;
use echo_moe::checkpoint;
use echo_moe::error::{Error, Result};
use echo_moe::metrics::{evaluate_corpus, EvalPair};
use echo_moe::model::{decode_text, encode_text, ForwardCtx, Model, SequenceInput};
use echo_moe::moe::{dispatch_stats, Modality};
use echo_moe::tape::Tape;
use echo_moe::textpipe::{self, InstructionRecord};
use echo_moe::train::{train_loop, write_metrics_jsonl, TrainReport};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub struct SynthArgs {
    pub config: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub count: Option<usize>,
    pub image_side: Option<usize>,
    pub duplicate_rate: Option<f64>,
    pub instruction_count: Option<usize>,
}

pub fn cmd_synth(args: &SynthArgs) -> Result<PathBuf> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
        cfg.sync_seeds();
    }
    if let Some(out) = &args.out_dir {
        cfg.out_dir = out.clone();
    }
    if let Some(count) = args.count {
        cfg.synth.count = count;
    }
    if let Some(side) = args.image_side {
        cfg.synth.image_side = side;
    }
    if let Some(rate) = args.duplicate_rate {
        cfg.synth.duplicate_rate = rate;
    }
    if let Some(n) = args.instruction_count {
        cfg.synth.instruction_count = n;
    }
    let out = synth::generate(&cfg)?;
    synth::write_corpus(&cfg, &cfg.out_dir, &out)?;
    println!(
        "synth: {} caption pairs, {} instruction records ({} planted near-duplicates) -> {}",
        out.captions.len(),
        out.instructions.len(),
        out.truth.planted.len(),
        cfg.out_dir.display()
    );
    Ok(cfg.out_dir)
}

/// Load a caption corpus file plus its images into model inputs.
pub fn load_caption_corpus(path: &Path) -> Result<(Vec<synth::CaptionRecord>, Vec<SequenceInput>)> {
    let records: Vec<synth::CaptionRecord> = jsonl::read_jsonl(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut inputs = Vec::with_capacity(records.len());
    for rec in &records {
        let image = imgfmt::read_image(&base.join(&rec.image))?;
        inputs.push(SequenceInput {
            image: Some(image),
            prompt_ids: encode_text(&rec.prompt),
            answer_ids: encode_text(&rec.answer),
        });
    }
    Ok((records, inputs))
}

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub stage: u8,
    pub corpus: PathBuf,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub from_checkpoint: Option<PathBuf>,
}

pub struct TrainOutcome {
    pub checkpoint_dir: PathBuf,
    pub report: TrainReport,
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutcome> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
        cfg.sync_seeds();
    }
    if let Some(out) = &args.out_dir {
        cfg.out_dir = out.clone();
    }
    let (_, corpus) = load_caption_corpus(&args.corpus)?;

    let (mut model, mut plan, stage_dir) = match args.stage {
        1 => {
            let model = Model::init(cfg.model.clone(), cfg.seed)?;
            (model, cfg.stage_i.clone(), "stage1")
        }
        2 => {
            let from = args.from_checkpoint.as_ref().ok_or_else(|| {
                Error::Config("stage 2 requires --from-checkpoint <stage 1 directory>".into())
            })?;
            let loaded = checkpoint::load(from)?;
            let mut model = loaded.model;
            if model.adapters.is_none() {
                model.attach_adapters(cfg.lora.rank, cfg.lora.alpha, cfg.lora.dropout, cfg.seed)?;
            }
            (model, cfg.stage_ii.clone(), "stage2")
        }
        other => {
            return Err(Error::Config(format!("unknown training stage {other}; use 1 or 2")))
        }
    };
    if let Some(epochs) = args.epochs {
        plan.epochs = epochs;
    }

    let report = train_loop(&mut model, &plan, &corpus)?;
    let ckpt_dir = cfg.out_dir.join(stage_dir);
    let echo = cfg.echo();
    checkpoint::save(&ckpt_dir, &model, cfg.seed, &echo)?;
    write_metrics_jsonl(&ckpt_dir.join("metrics.jsonl"), &report, &echo)?;

    println!(
        "train stage {}: {} steps, final per-token loss {:.6}, {} trainable elements",
        args.stage, report.total_steps, report.final_ar, report.trainable_elements
    );
    if let Some(n) = report.adapter_elements {
        println!("adapters: {n} trainable elements");
    }
    println!("frozen-parameter digest: {}", model.store.hash_frozen());
    println!("checkpoint: {}", ckpt_dir.display());
    Ok(TrainOutcome { checkpoint_dir: ckpt_dir, report })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PromptLine {
    pub id: String,
    #[serde(default)]
    pub image: Option<String>,
    pub prompt: String,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct DecodedLine {
    pub id: String,
    pub text: String,
}

pub struct DecodeArgs {
    pub checkpoint: PathBuf,
    pub prompts: PathBuf,
    pub out: PathBuf,
    pub max_new: Option<usize>,
}

pub fn cmd_decode(args: &DecodeArgs) -> Result<Vec<DecodedLine>> {
    let loaded = checkpoint::load(&args.checkpoint)?;
    let model = loaded.model;
    let prompts: Vec<PromptLine> = jsonl::read_jsonl(&args.prompts)?;
    let base = args.prompts.parent().unwrap_or_else(|| Path::new("."));
    let max_new = args.max_new.unwrap_or(40);
    let mut out_lines = Vec::with_capacity(prompts.len());
    for p in &prompts {
        if p.prompt.is_empty() {
            return Err(Error::Data(format!("prompt {:?} is empty", p.id)));
        }
        let image = match &p.image {
            Some(rel) => Some(imgfmt::read_image(&base.join(rel))?),
            None => None,
        };
        let ids = model.greedy_decode(image.as_ref(), &encode_text(&p.prompt), max_new)?;
        let text = decode_text(&ids);
        println!("{text}");
        out_lines.push(DecodedLine { id: p.id.clone(), text });
    }
    jsonl::write_jsonl(
        &args.out,
        &loaded.config_echo,
        serde_json::json!({"kind": "decoded", "max_new": max_new}),
        &out_lines,
    )?;
    Ok(out_lines)
}

pub struct EvalArgs {
    pub pred: PathBuf,
    pub reference: PathBuf,
    pub tags: Option<PathBuf>,
    pub expect_tags: Option<String>,
    pub out_csv: Option<PathBuf>,
    pub tokenize: String,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<echo_moe::metrics::Report> {
    let read_lines = |p: &Path| -> Result<Vec<String>> {
        Ok(std::fs::read_to_string(p)
            .map_err(|e| Error::Data(format!("reading {}: {e}", p.display())))?
            .lines()
            .map(|l| l.to_string())
            .collect())
    };
    let pred = read_lines(&args.pred)?;
    let reference = read_lines(&args.reference)?;
    if pred.len() != reference.len() {
        return Err(Error::Data(format!(
            "{} predictions vs {} references",
            pred.len(),
            reference.len()
        )));
    }
    let tags = match &args.tags {
        Some(p) => {
            let t = read_lines(p)?;
            if t.len() != pred.len() {
                return Err(Error::Data(format!(
                    "{} tags for {} predictions",
                    t.len(),
                    pred.len()
                )));
            }
            t
        }
        None => vec!["all".to_string(); pred.len()],
    };
    let tokenize: fn(&str) -> Vec<String> = match args.tokenize.as_str() {
        "words" => textpipe::normalize,
        "chars" => textpipe::normalize_chars,
        other => {
            return Err(Error::Config(format!(
                "unknown tokenize mode {other:?}; use words or chars"
            )))
        }
    };
    let pairs: Vec<EvalPair> = pred
        .iter()
        .zip(&reference)
        .zip(&tags)
        .map(|((c, r), t)| EvalPair {
            candidate: tokenize(c),
            reference: tokenize(r),
            tag: t.clone(),
        })
        .collect();
    let expected: Option<Vec<String>> = args
        .expect_tags
        .as_ref()
        .map(|s| s.split(',').map(|t| t.trim().to_string()).collect());
    let report = evaluate_corpus(&pairs, expected.as_deref())?;
    print!("{}", report.to_table());
    for w in &report.warnings {
        println!("warning: tag {w:?} has no pairs");
    }
    if let Some(csv_path) = &args.out_csv {
        let meta = serde_json::json!({
            "pred": args.pred.display().to_string(),
            "reference": args.reference.display().to_string(),
            "tokenize": args.tokenize,
        });
        let body = format!("# config={meta}\n{}", report.to_csv());
        std::fs::write(csv_path, body)
            .map_err(|e| Error::Data(format!("writing {}: {e}", csv_path.display())))?;
    }
    Ok(report)
}

pub struct DedupArgs {
    pub input: PathBuf,
    pub accepted: PathBuf,
    pub rejected: PathBuf,
    pub rouge: f64,
    pub hamming: u32,
}

pub struct DedupSummary {
    pub accepted: usize,
    pub rejected: usize,
}

pub fn cmd_dedup(args: &DedupArgs) -> Result<DedupSummary> {
    let records: Vec<InstructionRecord> = jsonl::read_jsonl(&args.input)?;
    let outcome = textpipe::dedup(&records, args.rouge, args.hamming)?;
    let thresholds = serde_json::json!({
        "rouge_threshold": args.rouge,
        "hamming_threshold": args.hamming,
        "input": args.input.display().to_string(),
    });
    jsonl::write_jsonl(
        &args.accepted,
        &thresholds,
        serde_json::json!({"kind": "accepted"}),
        &outcome.accepted,
    )?;
    jsonl::write_jsonl(
        &args.rejected,
        &thresholds,
        serde_json::json!({"kind": "rejected"}),
        &outcome.rejected,
    )?;
    println!(
        "dedup: {} accepted, {} rejected (rouge > {}, hamming <= {})",
        outcome.accepted.len(),
        outcome.rejected.len(),
        args.rouge,
        args.hamming
    );
    Ok(DedupSummary { accepted: outcome.accepted.len(), rejected: outcome.rejected.len() })
}

pub struct RouteStatsArgs {
    pub checkpoint: PathBuf,
    pub corpus: PathBuf,
    pub out: PathBuf,
}

pub fn cmd_route_stats(args: &RouteStatsArgs) -> Result<String> {
    let loaded = checkpoint::load(&args.checkpoint)?;
    let model = loaded.model;
    let (_, inputs) = load_caption_corpus(&args.corpus)?;
    if inputs.is_empty() {
        return Err(Error::Contract("route statistics over an empty corpus".into()));
    }
    let n_blocks = model.cfg.n_blocks;
    let mut per_layer_decisions = vec![Vec::new(); n_blocks];
    let mut per_layer_modality: Vec<Vec<Modality>> = vec![Vec::new(); n_blocks];
    for seq in &inputs {
        let mut text = seq.prompt_ids.clone();
        text.push(model.cfg.sep_id);
        text.extend(&seq.answer_ids);
        text.push(model.cfg.eos_id);
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::eval();
        let fwd = model.forward_tokens(&mut tape, seq.image.as_ref(), &text, &mut ctx)?;
        for (l, r) in fwd.routing.into_iter().enumerate() {
            per_layer_decisions[l].push(r.decision);
            per_layer_modality[l].extend(fwd.modality.iter().copied());
        }
    }

    let mut csv = format!("# config={}\n", loaded.config_echo);
    csv.push_str("layer,expert,F,G,F_image,F_text\n");
    for l in 0..n_blocks {
        let merged = echo_moe::model::merge_decisions(&per_layer_decisions[l])?;
        let stats = dispatch_stats(&merged, &per_layer_modality[l])?;
        let f_sum: f64 = stats.dispatch.iter().sum();
        if (f_sum - stats.top_k as f64).abs() > 1e-9 {
            return Err(Error::Train(format!(
                "layer {l}: dispatch ratios sum to {f_sum}, expected top-k {}",
                stats.top_k
            )));
        }
        for e in 0..model.cfg.n_experts {
            let _ = writeln!(
                csv,
                "{l},{e},{:.6},{:.6},{:.6},{:.6}",
                stats.dispatch[e], stats.mean_gate[e], stats.dispatch_image[e], stats.dispatch_text[e]
            );
        }
    }
    std::fs::write(&args.out, &csv)
        .map_err(|e| Error::Data(format!("writing {}: {e}", args.out.display())))?;
    print!("{csv}");
    Ok(csv)
}
