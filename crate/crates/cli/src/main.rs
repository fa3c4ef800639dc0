use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ifmatch_core::experiment::{
    self, branch_threshold_matrix, compare, paradigm_threshold_matrix, run_experiment, ExperimentConfig,
};
use ifmatch_core::featperturb::{
    draw_strategy, shear_offsets, Direction, DrawParams, Intensity, PerturbDraw, Strategy,
};
use ifmatch_core::nets::{load_checkpoint, save_checkpoint};
use ifmatch_core::schedulers::ThresholdKind;
use ifmatch_core::trainer::{evaluate, restore_models, Branch1Threshold, Paradigm};
use ifmatch_core::{Error, Result, Tensor};

#[derive(Parser)]
#[command(
    name = "ifmatch",
    version,
    about = "Desk-scale semi-supervised training with image and feature perturbations"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the labeled/unlabeled/test split and write its manifest.
    Split {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(short, long, default_value = "manifest.csv")]
        out: PathBuf,
    },
    /// Train and write metrics.csv, checkpoint.ifm and config.txt.
    Train {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(short, long, default_value = "run")]
        out: PathBuf,
        /// Override trainer.steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on the test split of its config.
    Eval {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Apply one feature perturbation to a fixture tensor and write before/after CSVs.
    PerturbDemo {
        strategy: Strategy,
        /// Parameters such as `dir=left len=2`; unset ones are drawn from --seed.
        params: Vec<String>,
        /// Fixture shape N,C,H,W.
        #[arg(long, default_value = "1,2,5,5", value_delimiter = ',')]
        shape: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Level::Strong)]
        intensity: Level,
        #[arg(short, long, default_value = ".")]
        out: PathBuf,
    },
    /// Run a config matrix over shared seeds and print a ranked table.
    Compare {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Matrix::Paradigm)]
        matrix: Matrix,
        #[arg(long, value_delimiter = ',', default_value = "fixmatch_baseline,ifmatch")]
        paradigms: Vec<Paradigm>,
        /// Branch-2 threshold kinds; defaults to the config's kind.
        #[arg(long, value_delimiter = ',')]
        thresholds: Vec<ThresholdKind>,
        #[arg(long, value_delimiter = ',', default_value = "constant,mirror")]
        branch1: Vec<Branch1Threshold>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Per-run metrics and summary.csv go here.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Level {
    Weak,
    Strong,
}

#[derive(Clone, Copy, ValueEnum)]
enum Matrix {
    /// paradigm × branch-2 threshold
    Paradigm,
    /// branch-1 rule × branch-2 threshold
    Branch,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => experiment::parse_config(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn demo_params(strategy: Strategy, args: &[String], shape: [usize; 4], random: &PerturbDraw) -> Result<DrawParams> {
    let mut kv = Vec::new();
    for a in args {
        let (k, v) = a.split_once('=').ok_or_else(|| Error::Config {
            line: 0,
            msg: format!("parameter '{a}' is not key=value"),
        })?;
        kv.push((k.trim(), v.trim()));
    }
    let bad = |msg: String| Error::Config { line: 0, msg };
    let get = |key: &str| kv.iter().find(|(k, _)| *k == key).map(|(_, v)| *v);
    let num = |key: &str, fallback: usize| -> Result<usize> {
        get(key).map_or(Ok(fallback), |v| {
            v.parse()
                .map_err(|_| bad(format!("{key}: expected an integer, found '{v}'")))
        })
    };
    let known: &[&str] = match strategy {
        Strategy::ChannelDrop => &["keep"],
        Strategy::SpatialDrop => &["x", "y", "h", "w"],
        Strategy::Translate | Strategy::Shear => &["dir", "len"],
        Strategy::ValueSmooth => &["k", "alpha"],
    };
    if let Some((k, _)) = kv.iter().find(|(k, _)| !known.contains(k)) {
        return Err(bad(format!("{strategy} takes {}; '{k}' is unknown", known.join(", "))));
    }
    let [_, _, h, w] = shape;
    Ok(match &random.params {
        DrawParams::ChannelDrop { keep } => DrawParams::ChannelDrop {
            keep: match get("keep") {
                Some(v) => v
                    .split(',')
                    .map(|b| match b.trim() {
                        "1" => Ok(true),
                        "0" => Ok(false),
                        o => Err(bad(format!("keep: expected 0/1 flags, found '{o}'"))),
                    })
                    .collect::<Result<_>>()?,
                None => keep.clone(),
            },
        },
        DrawParams::SpatialDrop { x, y, h: rh, w: rw } => DrawParams::SpatialDrop {
            x: num("x", *x)?,
            y: num("y", *y)?,
            h: num("h", *rh)?,
            w: num("w", *rw)?,
        },
        DrawParams::Translate { dir, len } => DrawParams::Translate {
            dir: get("dir").map_or(Ok(*dir), |v| v.parse().map_err(bad))?,
            len: num("len", *len)?,
        },
        DrawParams::Shear { dir, len, .. } => {
            let dir: Direction = get("dir").map_or(Ok(*dir), |v| v.parse().map_err(bad))?;
            let len = num("len", *len)?;
            let lines = if matches!(dir, Direction::Left | Direction::Right) {
                h
            } else {
                w
            };
            DrawParams::Shear {
                dir,
                len,
                offsets: shear_offsets(len, lines),
            }
        }
        DrawParams::ValueSmooth { k, alpha } => DrawParams::ValueSmooth {
            k: num("k", *k)?,
            alpha: get("alpha").map_or(Ok(*alpha), |v| {
                v.parse()
                    .map_err(|_| bad(format!("alpha: expected a number, found '{v}'")))
            })?,
        },
    })
}

/// Long format `n,c,y,x,value`, values in shortest round-trip form.
fn tensor_csv(t: &Tensor) -> Result<String> {
    let [_, c, h, w] = t.dims4("perturb-demo")?;
    let mut s = String::from("n,c,y,x,value\n");
    let d = t.data();
    for (i, v) in d.iter().enumerate() {
        let (x, y) = (i % w, (i / w) % h);
        let (ch, b) = ((i / (w * h)) % c, i / (w * h * c));
        let _ = writeln!(s, "{b},{ch},{y},{x},{v:?}");
    }
    Ok(s)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Split { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let split = cfg.load_split()?;
            split.write_manifest(&out)?;
            println!(
                "labeled {}  unlabeled {}  test {}  -> {}",
                split.labeled.len(),
                split.unlabeled.len(),
                split.test.len(),
                out.display()
            );
        }
        Cmd::Train {
            config,
            out,
            steps,
            seed,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(k) = steps {
                cfg.train.steps = k;
            }
            if let Some(s) = seed {
                cfg = cfg.with_seed(s);
            }
            create_dir(&out)?;
            let (record, ckpt) = run_experiment(&cfg)?;
            write(&out.join("config.txt"), &cfg.to_text())?;
            experiment::emit_metrics(&record, &out.join("metrics.csv"))?;
            save_checkpoint(&out.join("checkpoint.ifm"), &ckpt)?;
            let s = record.summary;
            println!(
                "steps {}  last ema_acc {:.4}  best ema_acc {:.4}  mean naive ratio {:.4}",
                cfg.train.steps, s.last_ema_acc, s.best_ema_acc, s.mean_naive_ratio
            );
        }
        Cmd::Eval { config, checkpoint } => {
            let cfg = load_config(config.as_deref())?;
            let tensors = load_checkpoint(&checkpoint)?;
            let (live, ema) = restore_models(&cfg.model, &tensors)?;
            let split = cfg.load_split()?;
            let batch = cfg.train.eval_batch;
            let a = evaluate(&live, live.params(), &split.test, batch)?;
            let e = evaluate(&live, &ema, &split.test, batch)?;
            println!(
                "acc {:.4}  ema_acc {:.4}  (test samples {})",
                a.accuracy,
                e.accuracy,
                split.test.len()
            );
            for (k, (pa, pe)) in a.per_class.iter().zip(&e.per_class).enumerate() {
                let show = |v: &Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
                println!("  class {k}: acc {}  ema_acc {}", show(pa), show(pe));
            }
        }
        Cmd::PerturbDemo {
            strategy,
            params,
            shape,
            seed,
            intensity,
            out,
        } => {
            let shape: [usize; 4] = shape.as_slice().try_into().map_err(|_| Error::Config {
                line: 0,
                msg: "--shape takes four extents N,C,H,W".into(),
            })?;
            let intensity = match intensity {
                Level::Weak => Intensity::Weak,
                Level::Strong => Intensity::Strong,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let random = draw_strategy(strategy, [shape[1], shape[2], shape[3]], intensity, &mut rng)?;
            let draw = PerturbDraw {
                intensity,
                params: demo_params(strategy, &params, shape, &random)?,
            };
            draw.validate(shape[1], shape[2], shape[3])?;
            let [_, c, h, w] = shape;
            let before = Tensor::from_fn(&shape, |i| {
                let (x, y, ch) = (i % w, (i / w) % h, (i / (w * h)) % c);
                (ch * 100 + y * 10 + x) as f64 / 10.0
            });
            let after = draw.apply(&before, None)?;
            create_dir(&out)?;
            write(&out.join("before.csv"), &tensor_csv(&before)?)?;
            write(&out.join("after.csv"), &tensor_csv(&after)?)?;
            println!("{strategy}: {:?} -> {}", draw.params, out.display());
        }
        Cmd::Compare {
            config,
            matrix,
            paradigms,
            thresholds,
            branch1,
            seeds,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let kinds = if thresholds.is_empty() {
                vec![cfg.train.threshold]
            } else {
                thresholds
            };
            let cells = match matrix {
                Matrix::Paradigm => paradigm_threshold_matrix(&cfg, &paradigms, &kinds),
                Matrix::Branch => branch_threshold_matrix(&cfg, &branch1, &kinds),
            };
            if let Some(dir) = &out {
                create_dir(dir)?;
            }
            let report = compare(&cells, &seeds, experiment::worker_threads(), out.as_deref())?;
            print!("{}", report.table());
            if let Some(dir) = &out {
                write(&dir.join("summary.csv"), &report.csv())?;
            }
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
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
