//! Synthetic corpus generation.
//!
//! Caption pairs: each sample plants one geometric feature combination
//! (shape, tone, size, quadrant) on a blank grid, and the caption is a
//! deterministic function of that combination, so a model that reads the
//! image can reproduce the caption exactly. Instruction records: mostly
//! mutually dissimilar question/answer pairs built from unique pseudo-words,
//! plus a configured fraction of planted near-duplicates (one word of a
//! prior record's answer replaced), recorded in a truth sidecar.

use crate::config::RunConfig;
use crate::imgfmt;
use crate::jsonl;
use echo_moe::error::{Error, Result};
use echo_moe::rng::SplitMix64;
use echo_moe::tensor::Tensor;
use echo_moe::textpipe::{InstructionRecord, TemplateClass};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SHAPES: [&str; 4] = ["square", "cross", "stripe", "dot"];
pub const TONES: [&str; 2] = ["dim", "bright"];
pub const SIZES: [&str; 2] = ["small", "big"];
pub const SPOTS: [&str; 4] = ["top left", "top right", "low left", "low right"];
pub const REGIONS: [&str; 7] =
    ["thyroid", "breast", "liver", "kidney", "heart", "vessel", "gynecology"];

pub const PROMPT: &str = "describe";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Combo {
    pub shape: usize,
    pub tone: usize,
    pub size: usize,
    pub spot: usize,
}

pub fn caption_of(c: Combo) -> String {
    format!(
        "{} {} {} {}",
        TONES[c.tone], SIZES[c.size], SHAPES[c.shape], SPOTS[c.spot]
    )
}

/// Render the combination on a `side × side` single-channel grid.
pub fn render(side: usize, c: Combo) -> Tensor {
    let mut img = Tensor::zeros(vec![side, side, 1]);
    let v = if c.tone == 0 { 0.4 } else { 1.0 };
    let ext = if c.size == 0 { side / 4 } else { side / 2 };
    let (oy, ox) = match c.spot {
        0 => (0, 0),
        1 => (0, side - ext),
        2 => (side - ext, 0),
        _ => (side - ext, side - ext),
    };
    for y in 0..ext {
        for x in 0..ext {
            let on = match c.shape {
                0 => true,
                1 => y == ext / 2 || x == ext / 2,
                2 => y % 2 == 0,
                _ => {
                    let dy = y as i64 - ext as i64 / 2;
                    let dx = x as i64 - ext as i64 / 2;
                    dy * dy + dx * dx <= (ext as i64 / 3).pow(2)
                }
            };
            if on {
                img.data_mut()[(oy + y) * side + (ox + x)] = v;
            }
        }
    }
    img
}

/// One caption-corpus line; the image path is relative to the corpus file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub id: String,
    pub image: String,
    pub prompt: String,
    pub answer: String,
    pub tag: String,
}

/// Truth sidecar for the planted near-duplicates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DedupTruth {
    pub planted: Vec<String>,
    pub pairs: Vec<DupPair>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DupPair {
    pub dup: String,
    pub source: String,
}

pub struct SynthOutput {
    pub captions: Vec<CaptionRecord>,
    /// Feature combination behind each caption, aligned by index.
    pub combos: Vec<Combo>,
    pub instructions: Vec<InstructionRecord>,
    pub truth: DedupTruth,
}

fn pseudo_word(rng: &mut SplitMix64) -> String {
    format!("w{:010x}", rng.next_u64() & 0xff_ffff_ffff)
}

pub fn generate(cfg: &RunConfig) -> Result<SynthOutput> {
    let side = cfg.synth.image_side;
    let step = cfg.model.patch * cfg.model.merge_side();
    if step == 0 || side % step != 0 || side / step == 0 {
        return Err(Error::Config(format!(
            "image side {side} not divisible by patch {} times merge side {}",
            cfg.model.patch,
            cfg.model.merge_side()
        )));
    }

    // caption pairs over distinct feature combinations
    let mut combos = Vec::new();
    for shape in 0..SHAPES.len() {
        for tone in 0..TONES.len() {
            for size in 0..SIZES.len() {
                for spot in 0..SPOTS.len() {
                    combos.push(Combo { shape, tone, size, spot });
                }
            }
        }
    }
    let mut rng = SplitMix64::labeled(cfg.seed, "synth-combos");
    rng.shuffle(&mut combos);
    let picked: Vec<Combo> = (0..cfg.synth.count).map(|i| combos[i % combos.len()]).collect();
    let captions: Vec<CaptionRecord> = picked
        .iter()
        .enumerate()
        .map(|(i, &c)| CaptionRecord {
            id: format!("cap_{i:04}"),
            image: format!("images/cap_{i:04}.img"),
            prompt: PROMPT.to_string(),
            answer: caption_of(c),
            tag: SHAPES[c.shape].to_string(),
        })
        .collect();

    // instruction records with planted near-duplicates
    let n_total = cfg.synth.instruction_count;
    let n_dup = ((cfg.synth.duplicate_rate * n_total as f64).round() as usize).min(n_total);
    let n_orig = n_total - n_dup;
    let mut irng = SplitMix64::labeled(cfg.seed, "synth-instructions");
    let mut instructions: Vec<InstructionRecord> = (0..n_orig)
        .map(|i| {
            let region = REGIONS[irng.next_below(REGIONS.len())];
            let q_words: Vec<String> = (0..4).map(|_| pseudo_word(&mut irng)).collect();
            let a_words: Vec<String> = (0..7).map(|_| pseudo_word(&mut irng)).collect();
            InstructionRecord {
                id: format!("ins_{i:04}"),
                question: format!("what does the {region} section show in study {}", q_words.join(" ")),
                answer: format!("the {region} study shows {}", a_words.join(" ")),
                template_class: if i % 2 == 0 { TemplateClass::Open } else { TemplateClass::Closed },
                modality: region.to_string(),
                source: "synth".to_string(),
            }
        })
        .collect();
    let mut truth = DedupTruth { planted: Vec::new(), pairs: Vec::new() };
    for i in 0..n_dup {
        let src = &instructions[irng.next_below(n_orig)];
        let mut dup = src.clone();
        dup.id = format!("dup_{i:04}");
        // replace the last answer word so similarity stays just below exact
        let mut words: Vec<&str> = dup.answer.split(' ').collect();
        let fresh = pseudo_word(&mut irng);
        let last = words.len() - 1;
        words[last] = &fresh;
        let answer = words.join(" ");
        truth.pairs.push(DupPair { dup: dup.id.clone(), source: src.id.clone() });
        truth.planted.push(dup.id.clone());
        dup.answer = answer;
        instructions.push(dup);
    }
    truth.planted.sort();

    Ok(SynthOutput { captions, combos: picked, instructions, truth })
}

/// Write corpus files under `out_dir`: captions.jsonl + images/,
/// instructions.jsonl, dedup_truth.json, synth_meta.json.
pub fn write_corpus(cfg: &RunConfig, out_dir: &Path, out: &SynthOutput) -> Result<()> {
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir)
        .map_err(|e| Error::Data(format!("creating {}: {e}", images_dir.display())))?;
    let echo = cfg.echo();

    for (rec, &combo) in out.captions.iter().zip(&out.combos) {
        let img = render(cfg.synth.image_side, combo);
        imgfmt::write_image(&out_dir.join(&rec.image), &img)?;
    }

    jsonl::write_jsonl(
        &out_dir.join("captions.jsonl"),
        &echo,
        serde_json::json!({"kind": "captions"}),
        &out.captions,
    )?;
    jsonl::write_jsonl(
        &out_dir.join("instructions.jsonl"),
        &echo,
        serde_json::json!({"kind": "instructions"}),
        &out.instructions,
    )?;
    let truth_text = serde_json::to_string_pretty(&out.truth)
        .map_err(|e| Error::Data(format!("truth encode: {e}")))?;
    std::fs::write(out_dir.join("dedup_truth.json"), truth_text)
        .map_err(|e| Error::Data(format!("writing truth sidecar: {e}")))?;
    let meta = serde_json::to_string_pretty(&serde_json::json!({"config": echo}))
        .map_err(|e| Error::Data(format!("meta encode: {e}")))?;
    std::fs::write(out_dir.join("synth_meta.json"), meta)
        .map_err(|e| Error::Data(format!("writing synth meta: {e}")))?;
    Ok(())
}
