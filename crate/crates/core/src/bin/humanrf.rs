use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use humanrf::config::Config;
use humanrf::eval::{evaluate, frame_metrics, sweep_views};
use humanrf::image::Mask;
use humanrf::model::{Checkpoint, Model};
use humanrf::synthcap::{generate_dataset, Dataset, Split};
use humanrf::trainer::train;

#[derive(Parser, Debug)]
#[command(name = "humanrf", version, about = "Single-image generalizable human radiance field")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Overrides the number of ring views.
        #[arg(long)]
        views: Option<usize>,
    },
    /// Train and write checkpoints plus a per-step log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        jitter: Option<Switch>,
    },
    /// Render one target view and pose from one input frame.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        subject: usize,
        #[arg(long, default_value_t = 0)]
        input_pose: usize,
        #[arg(long, default_value_t = 0)]
        input_view: usize,
        #[arg(long)]
        target_pose: Option<usize>,
        #[arg(long)]
        target_view: Option<usize>,
    },
    /// Novel-view and novel-pose metrics on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Input-view sweep over a 12-camera ring of the test split.
    SweepViews {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Poses to sweep (comma list); all poses when omitted.
        #[arg(long, value_delimiter = ',')]
        poses: Option<Vec<usize>>,
    },
}

fn load_config(common: &Common) -> anyhow::Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p).map_err(humanrf::Error::from)?,
        None => Config::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(d) = &common.data {
        cfg.dataset = d.display().to_string();
    }
    cfg.validate().map_err(humanrf::Error::from)?;
    Ok(cfg)
}

fn load_model(path: &Path, common: &Common) -> anyhow::Result<(Model, Config)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let model = ck.model()?;
    let mut cfg = model.cfg.clone();
    if let Some(d) = &common.data {
        cfg.dataset = d.display().to_string();
    }
    Ok((model, cfg))
}

fn load_dataset(cfg: &Config, model: &Model) -> anyhow::Result<Dataset> {
    let dir = Path::new(&cfg.dataset);
    let data = Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    if data.resolution != model.cfg.resolution {
        return Err(humanrf::Error::Data(format!(
            "dataset resolution {} differs from checkpoint resolution {}",
            data.resolution, model.cfg.resolution
        ))
        .into());
    }
    Ok(data)
}

fn out_dir(common: &Common, default: &str) -> anyhow::Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from(default));
    std::fs::create_dir_all(&dir).map_err(humanrf::Error::io(&dir))?;
    Ok(dir)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Gen { common, views } => {
            let mut cfg = load_config(&common)?;
            if let Some(v) = views {
                cfg.views = v;
            }
            let dir = common.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.dataset));
            let manifest = generate_dataset(&cfg, &dir).map_err(humanrf::Error::from)?;
            println!(
                "wrote {} files for {} subjects x {} poses x {} views to {}",
                manifest.len(),
                cfg.train_subjects + cfg.test_subjects,
                cfg.poses,
                cfg.views,
                dir.display()
            );
        }
        Command::Train {
            common,
            checkpoint,
            jitter,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(j) = jitter {
                cfg.jitter = matches!(j, Switch::On);
            }
            let resume = checkpoint.as_deref().map(Checkpoint::load).transpose()?;
            let dir = Path::new(&cfg.dataset);
            let data = Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
            let out = out_dir(&common, "run")?;
            let summary = train(&cfg, &data, &out, resume.as_ref())?;
            println!(
                "config_hash {} steps {} last {}",
                cfg.hash(),
                summary.logs.last().map_or(0, |l| l.step + 1),
                summary.last_checkpoint.display()
            );
        }
        Command::Render {
            common,
            checkpoint,
            subject,
            input_pose,
            input_view,
            target_pose,
            target_view,
        } => {
            let (model, cfg) = load_model(&checkpoint, &common)?;
            let data = load_dataset(&cfg, &model)?;
            let (tp, tv) = (target_pose.unwrap_or(input_pose), target_view.unwrap_or(input_view));
            if subject >= data.subjects.len() || input_pose.max(tp) >= data.poses || input_view.max(tv) >= data.views {
                bail!(humanrf::Error::Data("frame index out of range".into()));
            }
            let input = data.frame(subject, input_pose, input_view);
            let target = data.frame(subject, tp, tv);
            let is = input.state(&model.template).map_err(humanrf::Error::from)?;
            let ts = target.state(&model.template).map_err(humanrf::Error::from)?;
            let out = model.render_view(input, &is, &target.cam, &ts)?;
            let dir = out_dir(&common, "render")?;
            let stem = format!("s{subject:02}_p{input_pose}v{input_view}_to_p{tp}v{tv}");
            let img_path = dir.join(format!("{stem}.png"));
            out.image.save_png(&img_path).map_err(humanrf::Error::from)?;
            let mask = Mask {
                width: out.image.width,
                height: out.image.height,
                data: out.opacity.iter().map(|&o| o > 0.5).collect(),
            };
            mask.save_png(&dir.join(format!("{stem}_mask.png")))
                .map_err(humanrf::Error::from)?;
            let m = frame_metrics(stem.clone(), &out.image, &target.image, &out.rect)?;
            println!(
                "{}\tpsnr {:.4}\tssim {:.4}\topacity_area {}\ttarget_mask_area {}",
                img_path.display(),
                m.psnr,
                m.ssim,
                mask.count(),
                target.mask.count()
            );
        }
        Command::Eval { common, checkpoint } => {
            let (model, cfg) = load_model(&checkpoint, &common)?;
            let data = load_dataset(&cfg, &model)?;
            let report = evaluate(&model, &data, Split::Test)?;
            let dir = out_dir(&common, "eval")?;
            let path = dir.join("eval.tsv");
            std::fs::write(&path, report.to_text()).map_err(humanrf::Error::io(&path))?;
            let (vp, vs) = report.novel_view.mean();
            let (pp, ps) = report.novel_pose.mean();
            println!("novel_view\tpsnr {vp:.4}\tssim {vs:.4}");
            println!("novel_pose\tpsnr {pp:.4}\tssim {ps:.4}");
        }
        Command::SweepViews {
            common,
            checkpoint,
            poses,
        } => {
            let (model, cfg) = load_model(&checkpoint, &common)?;
            let data = load_dataset(&cfg, &model)?;
            let subjects = data.split(Split::Test);
            let poses = poses.unwrap_or_else(|| (0..data.poses).collect());
            let report = sweep_views(&model, &data, &subjects, &poses)?;
            let dir = out_dir(&common, "sweep")?;
            let path = dir.join("sweep.tsv");
            let text = report.to_text();
            std::fs::write(&path, &text).map_err(humanrf::Error::io(&path))?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<humanrf::Error>().map_or(2, |e| e.exit_code());
            ExitCode::from(code as u8)
        }
    }
}
