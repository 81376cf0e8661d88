use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use semflow::diffcore::GradcheckConfig;
use semflow::evalkit::{
    evaluate, load_model, parse_views, render_frame, render_views, write_frame, RenderOptions,
};
use semflow::model::{encode_detached, SceneInput};
use semflow::scene_synth::{
    add_flow_noise, generate_scene, occlude_region, read_dataset, write_dataset, Rect, SceneRecipe,
};
use semflow::trainer::{
    loss_gradcheck, module_checks, run_training, LabelSchedule, TrainConfig, TrainOutput,
    CHECK_MODULES,
};
use semflow::{Error, Result};

#[derive(Parser)]
#[command(
    name = "semflow",
    version,
    about = "Semantic radiance fields for dynamic scenes"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic dataset.
    Synth {
        #[arg(long, default_value = "balloon")]
        recipe: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on one or more datasets (comma separated).
    Train {
        #[arg(long, value_delimiter = ',', required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render views listed in a pose file.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dataset supplying the input video (default: the one recorded with the checkpoint).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score training views against a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "full")]
        split: String,
        #[arg(long)]
        report: PathBuf,
    },
    /// Render every training view with the given classes removed.
    Edit {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',')]
        remove: Vec<u8>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Compare tape gradients with central differences.
    Gradcheck {
        #[arg(long)]
        module: Option<String>,
    },
    /// Write a perturbed copy of a dataset.
    Perturb {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with = "occlude")]
        flow_noise: Option<f64>,
        /// `frame,x,y,w,h` with a 1-based frame.
        #[arg(long, value_delimiter = ',')]
        occlude: Option<Vec<usize>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (default: `<data>-perturbed`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!("error: kind=usage msg={first}");
            return ExitCode::from(2);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: kind={} msg={msg}", e.kind());
            ExitCode::from(1)
        }
    }
}

fn data_dir(explicit: Option<PathBuf>, recorded: &[PathBuf]) -> Result<PathBuf> {
    explicit
        .or_else(|| recorded.first().cloned())
        .ok_or_else(|| {
            Error::InvalidArgument("no dataset given and none recorded with the checkpoint".into())
        })
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth { recipe, seed, out } => {
            let scene = generate_scene(&SceneRecipe::named(&recipe)?, seed)?;
            write_dataset(&scene, &out)?;
            println!("wrote {} frames of {recipe} to {}", scene.n, out.display());
        }
        Cmd::Train { data, config, out } => {
            let cfg = match config {
                Some(p) => TrainConfig::load(&p)?,
                None => TrainConfig::default(),
            };
            let scenes = data
                .iter()
                .map(|d| read_dataset(d))
                .collect::<Result<Vec<_>>>()?;
            let o = TrainOutput {
                dir: &out,
                data: &data,
            };
            let res = run_training::<f32>(&scenes, &cfg, Some(o))?;
            match (res.log.first(), res.log.last()) {
                (Some(a), Some(b)) => println!(
                    "trained {} steps: total {:.6} -> {:.6} in {:.1} s; checkpoint {}",
                    res.log.len(),
                    a.total,
                    b.total,
                    b.wall_ms / 1e3,
                    out.join("model.sfck").display()
                ),
                _ => println!(
                    "no steps run; checkpoint {}",
                    out.join("model.sfck").display()
                ),
            }
        }
        Cmd::Render {
            ckpt,
            poses,
            out,
            data,
        } => {
            let loaded = load_model::<f32>(&ckpt)?;
            let scene = read_dataset(&data_dir(data, &loaded.data)?)?;
            let text = std::fs::read_to_string(&poses).map_err(|e| io_err(&poses, e))?;
            let views = parse_views(&poses, &text, scene.n)?;
            let input = SceneInput::from_scene(&scene);
            let maps = encode_detached(&loaded.model, &input)?;
            let r = render_views(
                &loaded.model,
                &input,
                &maps,
                &views,
                &out,
                &RenderOptions::default(),
            )?;
            println!("rendered {} views to {}", r.len(), out.display());
        }
        Cmd::Eval {
            ckpt,
            data,
            split,
            report,
        } => {
            let split = LabelSchedule::parse(&split)?;
            let loaded = load_model::<f32>(&ckpt)?;
            let scene = read_dataset(&data)?;
            let rep = evaluate(&loaded.model, &scene, split)?;
            std::fs::write(&report, rep.to_csv()).map_err(|e| io_err(&report, e))?;
            let a = &rep.all;
            println!(
                "total_acc={:.4} avg_acc={:.4} miou={:.4} psnr={:.2} ssim={:.4} epe={}",
                a.pixel.total_acc,
                a.pixel.avg_acc,
                a.pixel.miou,
                a.psnr,
                a.ssim,
                a.epe.map_or("na".into(), |v| format!("{v:.3}"))
            );
        }
        Cmd::Edit {
            ckpt,
            remove,
            out,
            data,
        } => {
            let loaded = load_model::<f32>(&ckpt)?;
            let scene = read_dataset(&data_dir(data, &loaded.data)?)?;
            let input = SceneInput::from_scene(&scene);
            let maps = encode_detached(&loaded.model, &input)?;
            std::fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
            let opts = RenderOptions {
                remove,
                ..Default::default()
            };
            for f in 0..scene.n {
                let r = render_frame(&loaded.model, &input, &maps, &scene.poses[f], f, &opts)?;
                write_frame(&out, &format!("frame_{:03}", f + 1), &r)?;
            }
            println!("rendered {} edited frames to {}", scene.n, out.display());
        }
        Cmd::Gradcheck { module } => {
            let modules: Vec<&str> = match module.as_deref() {
                None | Some("all") => CHECK_MODULES.to_vec(),
                Some(m) => vec![m],
            };
            let cfg = GradcheckConfig::default();
            let mut failed = Vec::new();
            for m in modules {
                for (group, blocks) in module_checks(m)? {
                    let rep = loss_gradcheck(group, &blocks, &cfg)?;
                    let status = if rep.passed() { "pass" } else { "fail" };
                    println!(
                        "gradcheck module={m} loss={group} blocks={} coords={} skipped={} max_err={:.3e} status={status}",
                        if blocks.is_empty() { "all".to_string() } else { blocks.join("+") },
                        rep.entries.len(),
                        rep.skipped.len(),
                        rep.max_error()
                    );
                    if !rep.passed() {
                        failed.push(format!("{m}/{group}"));
                    }
                }
            }
            if !failed.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "gradcheck failed: {}",
                    failed.join(", ")
                )));
            }
        }
        Cmd::Perturb {
            data,
            flow_noise,
            occlude,
            seed,
            out,
        } => {
            let scene = read_dataset(&data)?;
            let perturbed = match (flow_noise, occlude) {
                (Some(beta), None) => add_flow_noise(&scene, beta, seed)?,
                (None, Some(v)) if v.len() != 5 => {
                    return Err(Error::InvalidArgument(format!(
                        "--occlude takes frame,x,y,w,h; got {} values",
                        v.len()
                    )))
                }
                (None, Some(v)) => occlude_region(
                    &scene,
                    v[0],
                    Rect {
                        x: v[1],
                        y: v[2],
                        w: v[3],
                        h: v[4],
                    },
                )?,
                _ => {
                    return Err(Error::InvalidArgument(
                        "give exactly one of --flow-noise or --occlude".into(),
                    ))
                }
            };
            let out = out.unwrap_or_else(|| {
                let mut s = data.clone().into_os_string();
                s.push("-perturbed");
                PathBuf::from(s)
            });
            write_dataset(&perturbed, &out)?;
            println!("wrote perturbed dataset to {}", out.display());
        }
    }
    Ok(())
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}
