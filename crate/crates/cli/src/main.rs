mod bench;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gcrpnet::checkpoint::Checkpoint;
use gcrpnet::config::RunConfig;
use gcrpnet::data::{synth_dataset, DatasetSpec};
use gcrpnet::gradcheck::{block_suite, model_check, op_suite, GradCheckOptions, GradCheckReport};
use gcrpnet::model::ModelConfig;
use gcrpnet::scan::{less2d_orders, Direction};
use gcrpnet::train::{self, config_for_checkpoint, evaluate, infer};
use gcrpnet::{Error, Result};

const OP_TOLERANCE: f64 = 1e-4;
const MODEL_TOLERANCE: f64 = 1e-3;

#[derive(Parser)]
#[command(name = "gcrpnet", version, about = "Salient object detection with block-wise selective scans and grid graph attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a dataset directory (images/ + GT/).
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint (must carry optimizer state).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Config override, `key=value`; repeatable, applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Write saliency maps for every image in a directory.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to config.txt next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score prediction PNGs against ground-truth PNGs with the same stems.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Generate a synthetic dataset of textured shapes.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[arg(long, value_enum)]
        scope: Scope,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print a scan order as an array of flat indices.
    ScanDump {
        #[arg(long)]
        h: usize,
        #[arg(long)]
        w: usize,
        #[arg(long, default_value_t = 1)]
        grid: usize,
        #[arg(long, default_value = "right")]
        dir: Direction,
    },
    /// Time one operation.
    Bench {
        #[arg(long, value_enum)]
        op: bench::Op,
        /// Comma-separated dims; meaning depends on the op.
        #[arg(long)]
        shape: String,
        #[arg(long, default_value_t = 10)]
        iters: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    Op,
    Block,
    Model,
}

enum Outcome {
    Done,
    /// A numerical check ran but did not pass.
    Failed,
}

fn run(cmd: Command) -> Result<Outcome> {
    match cmd {
        Command::Train { config, data, out, resume, overrides } => {
            let mut cfg = match &config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            for kv in &overrides {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
                cfg.set(k.trim(), v.trim())?;
            }
            cfg.validate()?;
            let data = DatasetSpec::open(&data)?;
            let s = train::train(cfg, data, &out, resume.as_deref())?;
            println!(
                "steps={} first_loss={} last_loss={} checkpoint={}",
                s.steps,
                s.first_loss.map_or("-".into(), |v| format!("{v:.6}")),
                s.last_loss.map_or("-".into(), |v| format!("{v:.6}")),
                s.checkpoint.display()
            );
        }
        Command::Infer { ckpt, images, out, config } => {
            let cfg = config_for_checkpoint(&ckpt, config.as_deref())?;
            let n = infer(&cfg, &Checkpoint::load(&ckpt)?, &images, &out)?;
            println!("wrote {n} maps to {}", out.display());
        }
        Command::Eval { pred, gt, report } => {
            let r = evaluate(&pred, &gt)?;
            r.write(&report)?;
            print!("{}", r.key_values());
        }
        Command::Synth { n, size, seed, out } => {
            if n == 0 || size < 8 {
                return Err(Error::InvalidArgument("synth needs n >= 1 and size >= 8".into()));
            }
            let spec = synth_dataset(n, size, seed, &out)?;
            println!("wrote {} samples to {}", spec.len(), out.display());
        }
        Command::Gradcheck { scope, seed } => return gradcheck(scope, seed),
        Command::ScanDump { h, w, grid, dir } => {
            let orders = less2d_orders(h, w, grid)?;
            let order = &orders[Direction::ALL.iter().position(|&d| d == dir).expect("all directions listed")];
            let items: Vec<String> = order.forward.iter().map(|i| i.to_string()).collect();
            println!("[{}]", items.join(", "));
        }
        Command::Bench { op, shape, iters } => bench::run(op, &shape, iters)?,
    }
    Ok(Outcome::Done)
}

fn report_line(name: &str, r: &GradCheckReport, tol: f64) -> bool {
    let ok = r.max_rel_error() <= tol;
    let at = r.worst.as_ref().map_or(String::new(), |p| format!(" at {}[{}]", p.label, p.index));
    println!(
        "{} {name:<28} probes {:>4} max_rel {:.3e}{at}",
        if ok { "ok  " } else { "FAIL" },
        r.probes,
        r.max_rel_error()
    );
    ok
}

fn gradcheck(scope: Scope, seed: u64) -> Result<Outcome> {
    let mut ok = true;
    match scope {
        Scope::Op | Scope::Block => {
            let (cases, opts) = match scope {
                Scope::Op => (op_suite(seed), GradCheckOptions { seed, ..Default::default() }),
                _ => (block_suite(seed), GradCheckOptions { max_probes: 24, seed, ..Default::default() }),
            };
            for case in cases {
                ok &= report_line(case.name, &case.run(opts)?, OP_TOLERANCE);
            }
        }
        Scope::Model => {
            let opts = GradCheckOptions { max_probes: 16, seed, ..Default::default() };
            ok &= report_line("model", &model_check(&ModelConfig::tiny(), 120, opts)?, MODEL_TOLERANCE);
        }
    }
    Ok(if ok { Outcome::Done } else { Outcome::Failed })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Ok(v) = std::env::var("GCRP_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("could not size the thread pool: {e}");
                }
            }
            _ => {
                eprintln!("error: GCRP_THREADS must be a positive integer, got `{v}`");
                return ExitCode::from(2);
            }
        }
    }
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Failed) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
