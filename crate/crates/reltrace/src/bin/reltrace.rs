//! Command-line front end for the relation-tracing toolkit.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use reltrace::cli::{
    cmd_analyze, cmd_attribute, cmd_eval, cmd_gen, cmd_plant, load_run_config, RunConfig,
};
use reltrace::model::ModelConfig;

#[derive(Parser)]
#[command(
    name = "reltrace",
    version,
    about = "Trace, probe, and attribute relational signals in small decoder models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Command-line overrides applied on top of the JSON run config.
#[derive(Args, Clone)]
struct Overrides {
    #[arg(long, env = "RELTRACE_CONFIG")]
    config: PathBuf,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    q: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    feature_kind: Option<String>,
    #[arg(long, env = "RELTRACE_WORKERS")]
    workers: Option<usize>,
    #[arg(long)]
    stats: Option<PathBuf>,
}

impl Overrides {
    fn apply(&self) -> reltrace::Result<RunConfig> {
        let mut cfg = load_run_config(&self.config)?;
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = &self.$field {
                    cfg.$field = v.clone();
                }
            };
        }
        set!(corpus);
        set!(weights);
        set!(out_dir);
        set!(feature_kind);
        set!(seeds);
        if self.stats.is_some() {
            cfg.stats = self.stats.clone();
        }
        for (src, dst) in [
            (self.n, &mut cfg.n),
            (self.k, &mut cfg.k),
            (self.q, &mut cfg.q),
            (self.m, &mut cfg.m),
            (self.episodes, &mut cfg.episodes),
            (self.workers, &mut cfg.workers),
        ] {
            if let Some(v) = src {
                *dst = v;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic relation corpus from a spec file.
    Gen {
        #[arg(long, env = "RELTRACE_SPEC")]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Construct planted-circuit model weights for a corpus spec.
    Plant {
        #[arg(long, env = "RELTRACE_SPEC")]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 64)]
        d_model: usize,
        #[arg(long, default_value_t = 16)]
        d_head: usize,
        #[arg(long, default_value_t = 96)]
        d_ff: usize,
        /// 0 = size the vocabulary from the spec.
        #[arg(long, default_value_t = 0)]
        vocab: usize,
        #[arg(long, default_value_t = false)]
        rope: bool,
    },
    /// Run the episode evaluation pipeline.
    Eval {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Emit attribution JSON and heatmaps for a single query.
    Attribute {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        episode: usize,
        #[arg(long, default_value_t = 0)]
        query: usize,
    },
    /// Aggregate lexical-alignment, concentration, and correlation stats.
    Analyze {
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn run(cli: Cli) -> reltrace::Result<()> {
    match cli.command {
        Command::Gen { spec, out } => cmd_gen(&spec, &out),
        Command::Plant { spec, out, layers, heads, d_model, d_head, d_ff, vocab, rope } => {
            let config = ModelConfig {
                n_layers: layers,
                n_heads: heads,
                d_model,
                d_head,
                d_ff,
                vocab_size: vocab,
                use_rope: rope,
                norm_eps: 1e-6,
                max_seq_len: 4096,
            };
            cmd_plant(&spec, &config, &out)
        }
        Command::Eval { overrides } => {
            let cfg = overrides.apply()?;
            let out = cmd_eval(&cfg)?;
            println!("mean accuracy {:.4} over {} seeds", out.mean_accuracy, out.per_seed.len());
            Ok(())
        }
        Command::Attribute { overrides, seed, episode, query } => {
            let cfg = overrides.apply()?;
            let out = cmd_attribute(&cfg, seed, episode, query)?;
            println!(
                "predicted {} (gold {:?}), head completeness err {:.3e}",
                out.report.class_names[out.report.predicted],
                out.report.gold.map(|g| out.report.class_names[g].clone()),
                out.report.completeness.head_error
            );
            Ok(())
        }
        Command::Analyze { overrides } => {
            let cfg = overrides.apply()?;
            let out = cmd_analyze(&cfg)?;
            println!(
                "queries {} mean mass {:.3} strong-align(incorrect) {:?}",
                out.alignment.n_queries, out.alignment.mean_mass, out.alignment.strong_align_incorrect
            );
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
