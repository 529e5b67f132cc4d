use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use ghs_core::avatario::sequence::FrameRecord;
use ghs_core::avatario::{
    load_avatar, load_baked, load_checkpoint, load_dataset, load_sequence, make_synthetic, read_mask,
    save_avatar, save_baked, save_checkpoint, save_sequence, smooth_landmarks, write_image, OneEuroConfig,
    SyntheticConfig,
};
use ghs_core::fastpath::{bake, render_aligned, FastRenderer, RansacConfig};
use ghs_core::rig::{FrameParams, Rig};
use ghs_core::trainer::{evaluate, finetune_frame, initial_avatar, psnr, render, RenderOptions, Stage, TrainConfig, Trainer};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Full,
}

impl Preset {
    fn config(self) -> TrainConfig {
        match self {
            Preset::Desk => TrainConfig::desk(),
            Preset::Full => TrainConfig::full(),
        }
    }
}

#[derive(Parser)]
#[command(name = "ghs", version, about = "Gaussian head + neural texture avatars")]
struct Cli {
    #[arg(long, global = true, value_enum, default_value = "desk")]
    preset: Preset,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Output directory, or output file for `bake`.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic capture: images, head masks and sequences.
    MakeSynthetic {
        #[arg(long, default_value_t = 120)]
        frames: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        /// Scale of all motion; 0 gives a static scene.
        #[arg(long, default_value_t = 1.0)]
        motion: f64,
    },
    /// Train an avatar on a sequence.
    Fit {
        #[arg(long)]
        sequence: PathBuf,
        /// Held-out sequence evaluated after each stage.
        #[arg(long)]
        eval: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this stage (1, 2 or 3).
        #[arg(long)]
        until_stage: Option<usize>,
        /// Refine tracking of the first N evaluation frames after training.
        #[arg(long, default_value_t = 0)]
        finetune_frames: usize,
        #[arg(long)]
        smooth_landmarks: bool,
    },
    /// Render a sequence with the full networks.
    Render {
        #[arg(long)]
        avatar: PathBuf,
        #[arg(long)]
        sequence: PathBuf,
    },
    /// Flatten the networks into a baked asset.
    Bake {
        #[arg(long)]
        avatar: PathBuf,
        /// Training sequence used to filter anchors.
        #[arg(long)]
        sequence: PathBuf,
        /// Texture-frame mask; texels below 0.5 become white.
        #[arg(long)]
        background_mask: Option<PathBuf>,
    },
    /// Render a sequence from a baked asset without any network.
    RenderFast {
        #[arg(long)]
        baked: PathBuf,
        #[arg(long)]
        sequence: PathBuf,
    },
    /// Drive an avatar with another sequence's parameters.
    Reenact {
        #[arg(long, required_unless_present = "baked")]
        avatar: Option<PathBuf>,
        #[arg(long)]
        sequence: PathBuf,
        /// Use this baked asset instead of the networks.
        #[arg(long)]
        baked: Option<PathBuf>,
    },
}

fn frame_name(i: usize) -> String {
    format!("{i:05}.png")
}

fn make_synthetic_cmd(cli: &Cli, frames: usize, size: usize, motion: f64) -> Result<()> {
    let cfg = SyntheticConfig {
        frames,
        width: size,
        height: size,
        focal: 1.25 * size as f64,
        motion,
        ..SyntheticConfig::default()
    };
    let scene = make_synthetic(&cfg, cli.seed)?;
    let out = &cli.out;
    std::fs::create_dir_all(out.join("images"))?;
    std::fs::create_dir_all(out.join("masks"))?;
    let mut all = Vec::with_capacity(frames);
    for f in &scene.frames {
        let name = frame_name(f.params.index);
        write_image(out.join("images").join(&name), &f.image)?;
        write_image(out.join("masks").join(&name), &f.head_mask)?;
        let mut r = FrameRecord::from_params(&f.params);
        r.image = Some(format!("images/{name}"));
        r.head_mask = Some(format!("masks/{name}"));
        all.push(r);
    }
    let (test, train): (Vec<_>, Vec<_>) = all
        .iter()
        .cloned()
        .enumerate()
        .partition(|(i, _)| scene.holdout.contains(i));
    let strip = |v: Vec<(usize, FrameRecord)>| v.into_iter().map(|(_, r)| r).collect::<Vec<_>>();
    save_sequence(out.join("sequence.jsonl"), &all)?;
    save_sequence(out.join("train.jsonl"), &strip(train))?;
    save_sequence(out.join("test.jsonl"), &strip(test))?;
    let hs: Vec<Vec<f64>> = scene.homographies.iter().map(|h| h.transpose().as_slice().to_vec()).collect();
    std::fs::write(
        out.join("homographies.json"),
        serde_json::to_string(&serde_json::json!({ "frame_to_canonical_row_major": hs }))?,
    )?;
    info!(
        "wrote {} frames ({} held out) to {}",
        frames,
        scene.holdout.len(),
        out.display()
    );
    Ok(())
}

fn fit_cmd(
    cli: &Cli,
    sequence: &Path,
    eval: Option<&Path>,
    resume: Option<&Path>,
    until_stage: Option<usize>,
    finetune_frames: usize,
    smooth: bool,
) -> Result<()> {
    let mut data = load_dataset(sequence).with_context(|| format!("loading {}", sequence.display()))?;
    if smooth {
        let mut params: Vec<FrameParams> = data.frames.iter().map(|f| f.params.clone()).collect();
        smooth_landmarks(&mut params, OneEuroConfig::default())?;
        for (f, p) in data.frames.iter_mut().zip(params) {
            f.params = p;
        }
    }
    let test = eval.map(load_dataset).transpose()?;
    let config = cli.preset.config();
    let mut trainer = match resume {
        Some(p) => load_checkpoint(p, config)?,
        None => Trainer::new(
            initial_avatar(Rig::toy(), data.frames[0].params.clone(), &config, cli.seed),
            config,
            cli.seed,
        ),
    };
    std::fs::create_dir_all(&cli.out)?;
    let last = until_stage.map(Stage::from_number).transpose()?.unwrap_or(Stage::Refine);
    while let Some(stage) = trainer.next_stage().filter(|s| *s <= last) {
        let t0 = Instant::now();
        trainer.run_stage(stage, &data)?;
        info!("stage {} done in {:.1}s", stage.number(), t0.elapsed().as_secs_f64());
        if let Some(test) = &test {
            info!("held-out PSNR {:.2} dB", evaluate(&trainer.avatar, test)?);
        }
        save_checkpoint(&trainer, cli.out.join("checkpoint.ghsa"))?;
        std::fs::write(cli.out.join("log.csv"), trainer.log_csv())?;
    }
    save_avatar(&trainer.avatar, cli.out.join("avatar.ghsa"))?;
    if let (Some(test), true) = (&test, finetune_frames > 0) {
        for f in test.frames.iter().take(finetune_frames) {
            let before = psnr(&render(&trainer.avatar, &f.params, RenderOptions::inference())?.rgb, &f.image)?;
            let tuned = finetune_frame(&trainer.avatar, &f.params, &f.image, 20, 1e-4)?;
            let after = psnr(&render(&trainer.avatar, &tuned, RenderOptions::inference())?.rgb, &f.image)?;
            info!("frame {}: {before:.2} dB -> {after:.2} dB after fine-tuning", f.params.index);
        }
    }
    Ok(())
}

/// Renders every record and reports PSNR where a target image exists.
fn render_all(
    out: &Path,
    sequence: &Path,
    mut draw: impl FnMut(&FrameParams) -> Result<ghs_core::coremath::Grid>,
) -> Result<()> {
    let records = load_sequence(sequence)?;
    let base = sequence.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(out)?;
    let (mut total, mut scored) = (0.0, 0usize);
    let t0 = Instant::now();
    for r in &records {
        let p = r.params();
        let img = draw(&p)?;
        write_image(out.join(frame_name(p.index)), &img)?;
        if let Some(gt) = &r.image {
            total += psnr(&img, &ghs_core::avatario::read_image(base.join(gt))?)?;
            scored += 1;
        }
    }
    let ms = 1e3 * t0.elapsed().as_secs_f64() / records.len().max(1) as f64;
    info!("rendered {} frames, {ms:.1} ms/frame", records.len());
    if scored > 0 {
        println!("mean PSNR {:.2} dB over {scored} frames", total / scored as f64);
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::MakeSynthetic { frames, size, motion } => make_synthetic_cmd(cli, *frames, *size, *motion),
        Command::Fit {
            sequence,
            eval,
            resume,
            until_stage,
            finetune_frames,
            smooth_landmarks,
        } => fit_cmd(
            cli,
            sequence,
            eval.as_deref(),
            resume.as_deref(),
            *until_stage,
            *finetune_frames,
            *smooth_landmarks,
        ),
        Command::Render { avatar, sequence } => {
            let av = load_avatar(avatar)?;
            render_all(&cli.out, sequence, |p| Ok(render(&av, p, RenderOptions::inference())?.rgb))
        }
        Command::Bake {
            avatar,
            sequence,
            background_mask,
        } => {
            let av = load_avatar(avatar)?;
            if av.anchors.is_empty() {
                bail!("avatar has no anchors; train through stage 2 first");
            }
            let frames: Vec<FrameParams> = load_sequence(sequence)?.iter().map(FrameRecord::params).collect();
            let mask = background_mask.as_deref().map(read_mask).transpose()?;
            let baked = bake(&av, &frames, mask.as_ref(), &RansacConfig::default(), cli.seed)?;
            info!("baked {} anchors", baked.anchors.len());
            if let Some(dir) = cli.out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            save_baked(&baked, &cli.out)?;
            Ok(())
        }
        Command::RenderFast { baked, sequence } => {
            let b = load_baked(baked)?;
            let mut r = FastRenderer::new(&b);
            render_all(&cli.out, sequence, |p| Ok(r.render(p)?.image.rgb))
        }
        Command::Reenact {
            avatar,
            sequence,
            baked,
        } => match baked {
            Some(b) => {
                let b = load_baked(b)?;
                let mut r = FastRenderer::new(&b);
                render_all(&cli.out, sequence, |p| Ok(r.render(p)?.image.rgb))
            }
            None => {
                let av = load_avatar(avatar.as_ref().expect("clap enforces one source"))?;
                render_all(&cli.out, sequence, |p| Ok(render_aligned(&av, p)?.0.rgb))
            }
        },
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global()?;
    }
    run(&cli)
}
