use clap::{Parser, Subcommand};
use echo_moe_cli::commands::{
    cmd_decode, cmd_dedup, cmd_eval, cmd_route_stats, cmd_synth, cmd_train, DecodeArgs, DedupArgs,
    EvalArgs, RouteStatsArgs, SynthArgs, TrainArgs,
};
use echo_moe_cli::exit_code_for;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "echo-moe",
    about = "Dual-path mixture-of-experts multimodal transformer: corpus generation, two-stage training, greedy decoding, dedup, evaluation, and routing statistics",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic caption corpus and an instruction corpus with
    /// planted near-duplicates
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        image_side: Option<usize>,
        #[arg(long)]
        duplicate_rate: Option<f64>,
        #[arg(long)]
        instruction_count: Option<usize>,
    },
    /// Train stage 1 (expert additions only) or stage 2 (adds low-rank
    /// adapters; requires a stage 1 checkpoint)
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        stage: u8,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        from_checkpoint: Option<PathBuf>,
    },
    /// Greedy-decode prompts against a checkpoint
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_new: Option<usize>,
    },
    /// Score predictions against references (BLEU-1, ROUGE-1, ROUGE-L,
    /// METEOR), grouped by tag
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        tags: Option<PathBuf>,
        #[arg(long)]
        expect_tags: Option<String>,
        #[arg(long)]
        out_csv: Option<PathBuf>,
        #[arg(long, default_value = "words")]
        tokenize: String,
    },
    /// Stream records through the near-duplicate filter
    Dedup {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        accepted: PathBuf,
        #[arg(long)]
        rejected: PathBuf,
        #[arg(long, default_value_t = 0.7)]
        rouge: f64,
        #[arg(long, default_value_t = 3)]
        hamming: u32,
    },
    /// Per-layer, per-expert dispatch ratios and mean gating probabilities
    /// over a corpus, split by modality
    RouteStats {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> echo_moe::Result<()> {
    match cli.command {
        Command::Synth {
            config,
            out_dir,
            seed,
            count,
            image_side,
            duplicate_rate,
            instruction_count,
        } => {
            cmd_synth(&SynthArgs {
                config,
                out_dir,
                seed,
                count,
                image_side,
                duplicate_rate,
                instruction_count,
            })?;
        }
        Command::Train { config, stage, corpus, out_dir, seed, epochs, from_checkpoint } => {
            cmd_train(&TrainArgs { config, stage, corpus, out_dir, seed, epochs, from_checkpoint })?;
        }
        Command::Decode { checkpoint, prompts, out, max_new } => {
            cmd_decode(&DecodeArgs { checkpoint, prompts, out, max_new })?;
        }
        Command::Eval { pred, reference, tags, expect_tags, out_csv, tokenize } => {
            cmd_eval(&EvalArgs { pred, reference, tags, expect_tags, out_csv, tokenize })?;
        }
        Command::Dedup { input, accepted, rejected, rouge, hamming } => {
            cmd_dedup(&DedupArgs { input, accepted, rejected, rouge, hamming })?;
        }
        Command::RouteStats { checkpoint, corpus, out } => {
            cmd_route_stats(&RouteStatsArgs { checkpoint, corpus, out })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e) as u8)
        }
    }
}
