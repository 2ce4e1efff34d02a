use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flrp::config::{parse_alphas, parse_methods, RunConfig};
use flrp::flrp_core::attribution::Method;
use flrp::flrp_core::evalkit::SubstitutionConfig;
use flrp::manifest::{read_csv, resolve, MorphRow};
use flrp::model::load_selection_for;
use flrp::pipeline::{self, Explainer, BONAFIDE_SELECTION_FILE};
use flrp::{Error, Result};

/// Focused relevance propagation toolkit for a toy morph detector.
#[derive(Parser)]
#[command(name = "flrp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Overrides every seed in the configuration
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    model: PathBuf,
    /// Morph Neuron selection JSON
    #[arg(long)]
    selection: Option<PathBuf>,
    /// Comma-separated methods: lrp, flrp, sensitivity
    #[arg(long)]
    method: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic genuine/morph dataset
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train the toy detector on a generated dataset
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by `gen`
        #[arg(long)]
        data: PathBuf,
    },
    /// Select Morph and Bona-fide Neurons on the training split
    Select {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Write raw and colorized relevance maps
    Explain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        m: ModelArgs,
        /// Evaluation manifest; its morphs are explained
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// PPM images, named by file stem
        images: Vec<PathBuf>,
    },
    /// Substitution sweep report over an evaluation manifest
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        m: ModelArgs,
        /// Bona-fide Neuron selection (default: next to --selection)
        #[arg(long)]
        bona_selection: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated substitution percentages
        #[arg(long)]
        alphas: Option<String>,
    },
    /// Mask-difference histograms between methods
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        m: ModelArgs,
        #[arg(long)]
        manifest: PathBuf,
        /// Single substitution percentage
        #[arg(long)]
        alphas: Option<String>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn methods(m: &ModelArgs, cfg: &RunConfig) -> Result<Vec<Method>> {
    match &m.method {
        Some(s) => parse_methods(s),
        None => Ok(cfg.eval.methods.clone()),
    }
}

fn explainer(m: &ModelArgs, cfg: &RunConfig) -> Result<Explainer> {
    Explainer::load(&m.model, m.selection.as_deref(), cfg.rules)
}

fn stem(p: &Path) -> Result<String> {
    p.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| Error::Usage(format!("cannot name output for {}", p.display())))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common } => {
            let cfg = load_config(&common)?;
            let out = pipeline::gen(&cfg.dataset, &common.out)?;
            println!(
                "train {} / test {} / val {} samples written to {}",
                out.counts[0],
                out.counts[1],
                out.counts[2],
                common.out.display()
            );
        }
        Command::Train { common, data } => {
            let cfg = load_config(&common)?;
            let out = pipeline::train(&cfg.train, &data, &common.out)?;
            for l in &out.logs {
                match l.val_accuracy {
                    Some(v) => println!(
                        "epoch {:>3} loss {:.4} train {:.3} val {:.3}",
                        l.epoch, l.loss, l.train_accuracy, v
                    ),
                    None => println!(
                        "epoch {:>3} loss {:.4} train {:.3}",
                        l.epoch, l.loss, l.train_accuracy
                    ),
                }
            }
            if let Some(t) = out.test {
                println!(
                    "test accuracy {:.4} apcer {:.4} bpcer {:.4} eer {:.4} (n={})",
                    t.accuracy, t.apcer, t.bpcer, t.eer, t.n
                );
            }
            println!("model {} ({})", out.model_path.display(), out.model_hash);
        }
        Command::Select {
            common,
            model,
            data,
        } => {
            load_config(&common)?;
            let out = pipeline::select(&model, &data, &common.out)?;
            let grid = out.morph.grid_height * out.morph.grid_width;
            if out.bona_fide.cells.len() < grid {
                eprintln!(
                    "warning: {} of {} cells have no Bona-fide Neuron",
                    grid - out.bona_fide.cells.len(),
                    grid
                );
            }
            println!(
                "{}\n{}",
                out.morph_path.display(),
                out.bona_fide_path.display()
            );
        }
        Command::Explain {
            common,
            m,
            manifest,
            images,
        } => {
            let cfg = load_config(&common)?;
            let methods = methods(&m, &cfg)?;
            let mut inputs = Vec::new();
            if let Some(man) = &manifest {
                let rows: Vec<MorphRow> = read_csv(man)?;
                inputs.extend(
                    rows.into_iter()
                        .map(|r| (r.id, resolve(man, &r.morph_path))),
                );
            }
            for p in images {
                inputs.push((stem(&p)?, p));
            }
            if inputs.is_empty() {
                return Err(Error::Usage(
                    "no images given (pass paths or --manifest)".into(),
                ));
            }
            let ex = explainer(&m, &cfg)?;
            let written = pipeline::explain(&ex, &inputs, &methods, &common.out)?;
            println!(
                "{} files written to {}",
                written.len(),
                common.out.display()
            );
        }
        Command::Evaluate {
            common,
            m,
            bona_selection,
            manifest,
            alphas,
        } => {
            let cfg = load_config(&common)?;
            let methods = methods(&m, &cfg)?;
            let sub = SubstitutionConfig {
                alpha_percent: match alphas {
                    Some(a) => parse_alphas(&a)?,
                    None => cfg.eval.alphas.clone(),
                },
                include_undetected: cfg.eval.include_undetected,
            };
            sub.validate().map_err(|e| Error::Usage(e.to_string()))?;
            let sel = m
                .selection
                .as_ref()
                .ok_or_else(|| Error::Data("evaluate needs --selection".into()))?;
            let bona_path =
                bona_selection.unwrap_or_else(|| sel.with_file_name(BONAFIDE_SELECTION_FILE));
            let ex = explainer(&m, &cfg)?;
            let bona = load_selection_for(&bona_path, &ex.model_hash)?;
            let reports = pipeline::evaluate(&ex, &bona, &manifest, &methods, &sub, &common.out)?;
            for r in &reports {
                for row in &r.rows {
                    println!(
                        "{:<12} alpha {:>5} nll {:.4} apcer {:.4} morph_act {:.4} bona_act {:.4} n {}",
                        r.method,
                        row.alpha_percent,
                        row.mean_nll,
                        row.apcer,
                        row.morph_neuron_act,
                        row.bonafide_neuron_act,
                        row.n
                    );
                }
            }
        }
        Command::Compare {
            common,
            m,
            manifest,
            alphas,
        } => {
            let cfg = load_config(&common)?;
            let methods = methods(&m, &cfg)?;
            let alpha = match alphas {
                Some(a) => match parse_alphas(&a)?[..] {
                    [a] => a,
                    _ => return Err(Error::Usage("compare takes a single alpha".into())),
                },
                None => cfg.eval.compare_alpha,
            };
            if !(alpha > 0.0 && alpha <= 100.0) {
                return Err(Error::Usage(format!("alpha {} outside (0, 100]", alpha)));
            }
            let ex = explainer(&m, &cfg)?;
            for (s, _) in
                pipeline::compare(&ex, &manifest, &methods, alpha, cfg.eval.bins, &common.out)?
            {
                println!(
                    "{} vs {} alpha {} n {} mean {:.4} std {:.4}",
                    s.method_a, s.method_b, s.alpha, s.n, s.mean, s.std
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
