use a2v_cli::commands::{
    cmd_adapt, cmd_evaluate, cmd_generate, cmd_inspect, cmd_synth_data, cmd_train, AdaptOpts,
    EvaluateOpts, GenerateOpts, TrainOpts,
};
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

/// Audio-driven talking-head generation pipeline.
#[derive(Parser)]
#[command(name = "a2v", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the three-phase curriculum on a clip manifest.
    Train {
        /// TOML configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory for checkpoints and the training log.
        #[arg(long)]
        out: PathBuf,
        /// Loss-set cap matching the ablation rows: BM, BM+CL+TAL or
        /// BM+CL+TAL+BL.
        #[arg(long)]
        ablation: Option<String>,
        /// Continue from a checkpoint produced under the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Synthesise a frame sequence from one image and a WAV file.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Few-shot adapt a trained checkpoint to an unseen identity.
    Adapt {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        audio: PathBuf,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        /// Fine-tuning learning rate (default: train lr / 10).
        #[arg(long)]
        lr: Option<f64>,
        /// all_generator or modulation_only.
        #[arg(long, default_value = "all_generator")]
        scope: String,
        /// Accept checkpoints that never reached phase 2.
        #[arg(long)]
        allow_untrained: bool,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare generated frames against references and write a report.
    Evaluate {
        /// Directory of clips (or a manifest) on the generated side.
        #[arg(long)]
        generated: PathBuf,
        /// Directory of clips (or a manifest) on the reference side.
        #[arg(long)]
        reference: PathBuf,
        /// Report output path (line-delimited records).
        #[arg(long)]
        report: PathBuf,
        /// Checkpoint supplying the identity embedder and the landmark
        /// regressor for generated-side blink counts.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// External per-clip word-error-rate figures (JSON object).
        #[arg(long)]
        wer_file: Option<PathBuf>,
    },
    /// Generate the deterministic synthetic corpus.
    SynthData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print checkpoint contents.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train { config, manifest, out, ablation, resume } => {
            cmd_train(&TrainOpts { config, manifest, out, ablation, resume })
        }
        Cmd::Generate { ckpt, image, audio, out } => {
            cmd_generate(&GenerateOpts { ckpt, image, audio, out })
        }
        Cmd::Adapt { ckpt, image, audio, epochs, lr, scope, allow_untrained, out } => {
            cmd_adapt(&AdaptOpts { ckpt, image, audio, epochs, lr, scope, allow_untrained, out })
        }
        Cmd::Evaluate { generated, reference, report, ckpt, wer_file } => {
            cmd_evaluate(&EvaluateOpts { generated, reference, report, ckpt, wer_file })
        }
        Cmd::SynthData { n, seed, out } => cmd_synth_data(n, seed, &out),
        Cmd::Inspect { ckpt } => cmd_inspect(&ckpt),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
