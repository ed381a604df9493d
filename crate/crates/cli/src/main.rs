use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use drivescene_cli::config::PipelineConfig;
use drivescene_cli::errors::RunError;
use drivescene_cli::mock_server::{load_script, mock_inference_server};
use drivescene_cli::runs;

/// Driving-scene pipeline: pseudo-label mining, scene synthesis, prompt
/// optimization, toy distillation, quantization, and evaluation.
#[derive(Parser)]
#[command(name = "drivescene", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline config JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory override.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Run seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Inference endpoint override (also DRIVESCENE_ENDPOINT).
    #[arg(long)]
    endpoint: Option<String>,
    /// Scripted mock responses (JSON map image_ref -> text); uses the
    /// in-process mock client instead of HTTP.
    #[arg(long)]
    mock_script: Option<PathBuf>,
}

impl Common {
    fn build_config(&self) -> Result<PipelineConfig, RunError> {
        let mut config = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        if let Some(output) = &self.output {
            config.paths.output_dir = Some(output.clone());
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(endpoint) = &self.endpoint {
            config.inference.endpoint = Some(endpoint.clone());
        }
        if let Some(script) = &self.mock_script {
            config.inference.mock_script = Some(script.clone());
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Fuse per-frame VLM and expert labels into mined pseudo-labels.
    Mine {
        #[command(flatten)]
        common: Common,
        /// Frame stream JSONL override.
        #[arg(long)]
        frames: Option<PathBuf>,
        /// Expert label JSONL override.
        #[arg(long)]
        expert_labels: Option<PathBuf>,
        /// VLM label JSONL; when omitted, labels come from the endpoint.
        #[arg(long)]
        vlm_labels: Option<PathBuf>,
    },
    /// Generate scene specs, ground-truth labels, and a filtered manifest.
    Synthesize {
        #[command(flatten)]
        common: Common,
        /// Number of scenes override.
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Hill-climb the prompt library against the eval Average.
    PromptOpt {
        #[command(flatten)]
        common: Common,
        /// Optimization rounds override.
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Train the toy teacher, persist soft labels, train adapter students.
    Distill {
        #[command(flatten)]
        common: Common,
    },
    /// Benchmark activation-aware quantization against round-to-nearest.
    Quantize {
        #[command(flatten)]
        common: Common,
        /// Instance count override.
        #[arg(long)]
        instances: Option<usize>,
    },
    /// Score predictions against references and write the report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        references: PathBuf,
    },
    /// Render a stored report JSON as the aligned text table.
    Report {
        #[arg(long)]
        report: PathBuf,
    },
    /// Serve scripted inference responses over HTTP (test double).
    MockServe {
        /// JSON map from image_ref to response text.
        #[arg(long)]
        script: PathBuf,
        /// Port to bind on 127.0.0.1; 0 picks a free port.
        #[arg(long, default_value_t = 0)]
        port: u16,
    },
}

fn dispatch(command: Command) -> Result<(), RunError> {
    match command {
        Command::Mine {
            common,
            frames,
            expert_labels,
            vlm_labels,
        } => {
            let mut config = common.build_config()?;
            if let Some(path) = frames {
                config.paths.frames = Some(path);
            }
            if let Some(path) = expert_labels {
                config.paths.expert_labels = Some(path);
            }
            if let Some(path) = vlm_labels {
                config.paths.vlm_labels = Some(path);
            }
            print_artifacts(runs::run_mine(&config)?);
        }
        Command::Synthesize { common, scenes } => {
            let mut config = common.build_config()?;
            if let Some(n) = scenes {
                config.synth.scenes = n;
            }
            print_artifacts(runs::run_synth(&config)?);
        }
        Command::PromptOpt { common, budget } => {
            let mut config = common.build_config()?;
            if let Some(b) = budget {
                config.prompt_opt.budget = b;
            }
            print_artifacts(runs::run_prompt_opt(&config)?);
        }
        Command::Distill { common } => {
            let config = common.build_config()?;
            print_artifacts(runs::run_distill(&config)?);
        }
        Command::Quantize { common, instances } => {
            let mut config = common.build_config()?;
            if let Some(n) = instances {
                config.quant.instances = n;
            }
            print_artifacts(runs::run_quant(&config)?);
        }
        Command::Evaluate {
            common,
            predictions,
            references,
        } => {
            let config = common.build_config()?;
            let (artifacts, report) = runs::run_eval(&config, &predictions, &references)?;
            print!("{}", report.render_table());
            print_artifacts(artifacts);
        }
        Command::Report { report } => {
            print!("{}", runs::run_report(&report)?);
        }
        Command::MockServe { script, port } => {
            let script = load_script(&script)
                .map_err(|e| RunError::input(format!("script: {e}")))?;
            let handle = mock_inference_server(script, port)
                .map_err(|e| RunError::runtime("mock-serve", e))?;
            println!("mock inference server listening on {}", handle.endpoint());
            println!("POST {}/v1/chat/completions; Ctrl-C to stop", handle.endpoint());
            loop {
                std::thread::sleep(std::time::Duration::from_secs(3600));
            }
        }
    }
    Ok(())
}

fn print_artifacts(artifacts: runs::StageArtifacts) {
    for file in &artifacts.files {
        println!("{}: {}", artifacts.stage, file.display());
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            // Usage problems are input errors under the exit-code contract.
            let _ = e.print();
            return ExitCode::from(1);
        }
        Err(e) => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::from(error.exit_code() as u8)
        }
    }
}
