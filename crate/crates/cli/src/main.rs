use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use genie_cli::{cmd_ablate, cmd_distill, cmd_eval, cmd_pretrain, cmd_quantize, PipelineError, RunConfig};

#[derive(Parser)]
#[command(name = "genie", version, about = "Zero-shot quantization pipeline for small CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the model on the desk dataset.
    Pretrain(Common),
    /// Distill calibration images from the pretrained model.
    Distill(Common),
    /// Quantize with the distilled images and write a report.
    Quantize(Common),
    /// Evaluate a model or quantized checkpoint.
    Eval(Common),
    /// Run the data-mode x quantizer x size x norm matrix.
    Ablate(Common),
}

fn run(cli: Cli) -> Result<String, PipelineError> {
    let (common, which) = match &cli.command {
        Command::Pretrain(c) => (c, "pretrain"),
        Command::Distill(c) => (c, "distill"),
        Command::Quantize(c) => (c, "quantize"),
        Command::Eval(c) => (c, "eval"),
        Command::Ablate(c) => (c, "ablate"),
    };
    let cfg = RunConfig::load(&common.config)?.with_overrides(common.seed, common.out.clone())?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    Ok(match which {
        "pretrain" => format!("wrote {}", cmd_pretrain(&cfg)?.display()),
        "distill" => format!("wrote {}", cmd_distill(&cfg)?.display()),
        "quantize" => {
            let r = cmd_quantize(&cfg)?;
            format!(
                "fp32 {:.2}  soft {:.2}  hardened {:.2}  hV binarization {:.4}",
                r.fp32_accuracy, r.quant_accuracy_soft, r.quant_accuracy_hard, r.hv_binarization
            )
        }
        "eval" => {
            let e = cmd_eval(&cfg)?;
            format!("{} ({}): accuracy {:.2} over {} samples", e.checkpoint, e.kind, e.accuracy, e.samples)
        }
        _ => {
            let r = cmd_ablate(&cfg)?;
            format!("{} runs written to {}", r.rows.len(), cfg.out_dir.join("ablation.json").display())
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(msg) => {
            println!("{}", msg);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
