//! Three-stage optimization of an avatar against a frame sequence.

pub mod adam;
pub mod density;
pub mod forward;
pub mod losses;

use std::fmt::Write as _;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchors::{clamp_anchor_params, frustum_cleanup, init_anchors, AnchorInitConfig};
use crate::coremath::{logit, sigmoid, Grid, Vec2};
use crate::error::{Error, Result};
use crate::model::{Avatar, ModelConfig};
use crate::renderer::Window;
use crate::rig::{pseudo_gt_lookup, FrameParams, PseudoGt};

pub use adam::AdamState;
pub use density::{densify_and_prune, DensityConfig, Densified, GradStats};
pub use forward::{backward, forward, render, ExtraGrads, Forward, Grads, RenderOptions};
pub use losses::{
    anchor_alpha_loss_grad, anchor_loss_grad, feature_loss_grad, flame_loss_grad, head_loss_grad, loss_anchor,
    loss_anchor_alpha, loss_flame, loss_head, loss_rgb, loss_vgg, loss_warp, rgb_loss_grad, warp_loss_grad,
    FeatureExtractor, FlameWeights, PyramidGradients,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    /// Head Gaussians against a constant background.
    Warmup,
    /// All layers and all losses.
    Main,
    /// Texture refinement with geometry frozen.
    Refine,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Warmup, Stage::Main, Stage::Refine];

    pub fn number(self) -> usize {
        match self {
            Stage::Warmup => 1,
            Stage::Main => 2,
            Stage::Refine => 3,
        }
    }

    pub fn from_number(n: usize) -> Result<Stage> {
        match n {
            1 => Ok(Stage::Warmup),
            2 => Ok(Stage::Main),
            3 => Ok(Stage::Refine),
            _ => Err(Error::InvalidArgument(format!("no stage {n}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub expr: f64,
    pub pose: f64,
    pub weights: f64,
    pub vgg: f64,
    pub head: f64,
    pub warp: f64,
    pub anchor_alpha: f64,
    pub anchor: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            expr: 1000.0,
            pose: 1000.0,
            weights: 1.0,
            vgg: 0.1,
            head: 1.0,
            warp: 0.025,
            anchor_alpha: 0.15,
            anchor: 1.0,
        }
    }
}

/// Unweighted loss values of one step. `flame` already carries its
/// internal weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub rgb: f64,
    pub flame: f64,
    pub vgg: f64,
    pub head: f64,
    pub warp: f64,
    pub anchor_alpha: f64,
    pub anchor: f64,
}

impl LossWeights {
    /// Same regularizer weights with every stage-2 extra switched off.
    pub fn without_extras(self) -> Self {
        Self {
            vgg: 0.0,
            head: 0.0,
            warp: 0.0,
            anchor_alpha: 0.0,
            anchor: 0.0,
            ..self
        }
    }

    pub fn flame(&self) -> FlameWeights {
        FlameWeights {
            expr: self.expr,
            pose: self.pose,
            weights: self.weights,
        }
    }

    pub fn total(&self, stage: Stage, t: &LossTerms) -> f64 {
        let base = t.rgb + t.flame;
        match stage {
            Stage::Warmup => base,
            Stage::Main => {
                base + self.vgg * t.vgg
                    + self.head * t.head
                    + self.warp * t.warp
                    + self.anchor_alpha * t.anchor_alpha
                    + self.anchor * t.anchor
            }
            Stage::Refine => base + self.vgg * t.vgg + self.anchor * t.anchor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub warmup: usize,
    pub main: usize,
    pub refine: usize,
}

impl StageSchedule {
    pub fn iterations(&self, stage: Stage) -> usize {
        match stage {
            Stage::Warmup => self.warmup,
            Stage::Main => self.main,
            Stage::Refine => self.refine,
        }
    }

    pub fn total(&self) -> usize {
        self.warmup + self.main + self.refine
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub position_init: f64,
    pub position_final: f64,
    pub sh_dc: f64,
    pub sh_rest: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
    pub mlp: f64,
    pub texture: f64,
    pub anchor: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position_init: 1.6e-4,
            position_final: 1.6e-6,
            sh_dc: 2.5e-3,
            sh_rest: 2.5e-3 / 20.0,
            opacity: 0.05,
            scale: 5e-3,
            rotation: 1e-3,
            mlp: 1e-3,
            texture: 1e-3,
            anchor: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub schedule: StageSchedule,
    pub model: ModelConfig,
    /// Side of the random square patch used per step; `None` renders the
    /// whole frame.
    pub patch_size: Option<usize>,
    pub lr: LearningRates,
    pub weights: LossWeights,
    /// Global iterations at which network, texture and anchor rates halve.
    pub lr_halve_at: Vec<usize>,
    /// Global iterations at which the expression and pose weights halve.
    pub flame_halve_at: Vec<usize>,
    /// Global iteration from which the perceptual loss is active.
    pub vgg_start: usize,
    pub densify_every: usize,
    pub densify_until: usize,
    pub grad_threshold: f64,
    pub grad_threshold_vgg: f64,
    pub max_gaussians: usize,
    pub head_opacity_init: f64,
    pub anchors: AnchorInitConfig,
    pub cleanup_every: usize,
}

impl TrainConfig {
    /// Paper-scale settings.
    pub fn full() -> Self {
        Self {
            schedule: StageSchedule {
                warmup: 4000,
                main: 46000,
                refine: 20000,
            },
            model: ModelConfig::default(),
            patch_size: None,
            lr: LearningRates::default(),
            weights: LossWeights::default(),
            lr_halve_at: vec![30000, 60000],
            flame_halve_at: vec![15000, 30000, 45000],
            vgg_start: 10000,
            densify_every: 100,
            densify_until: 25000,
            grad_threshold: 2.5e-4,
            grad_threshold_vgg: 8e-3,
            max_gaussians: 200_000,
            head_opacity_init: 0.1,
            anchors: AnchorInitConfig::default(),
            cleanup_every: 10000,
        }
    }

    /// Single-core settings for 128x128 images.
    pub fn desk() -> Self {
        Self {
            schedule: StageSchedule {
                warmup: 400,
                main: 4600,
                refine: 2000,
            },
            model: ModelConfig {
                mlp_width: 64,
                padding: 16,
                ..ModelConfig::default()
            },
            patch_size: Some(64),
            lr_halve_at: vec![3000, 6000],
            flame_halve_at: vec![1500, 3000, 4500],
            vgg_start: 1000,
            densify_until: 2500,
            max_gaussians: 6000,
            anchors: AnchorInitConfig {
                count: 256,
                allow_fewer: true,
                ..AnchorInitConfig::default()
            },
            cleanup_every: 1000,
            ..Self::full()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            _ => Err(Error::InvalidArgument(format!("unknown preset {name:?}"))),
        }
    }

    /// Loss weights in effect at a global iteration.
    pub fn weights_at(&self, iteration: usize) -> LossWeights {
        let halvings = self.flame_halve_at.iter().filter(|&&k| iteration >= k).count() as i32;
        let f = 0.5f64.powi(halvings);
        LossWeights {
            expr: self.weights.expr * f,
            pose: self.weights.pose * f,
            vgg: if iteration >= self.vgg_start { self.weights.vgg } else { 0.0 },
            ..self.weights
        }
    }

    fn rate_scale(&self, iteration: usize) -> f64 {
        0.5f64.powi(self.lr_halve_at.iter().filter(|&&k| iteration >= k).count() as i32)
    }

    fn position_lr(&self, iteration: usize) -> f64 {
        let t = (iteration as f64 / self.schedule.total().max(1) as f64).clamp(0.0, 1.0);
        (self.lr.position_init.ln() * (1.0 - t) + self.lr.position_final.ln() * t).exp()
    }
}

/// Fresh avatar for `rig` with warm-up Gaussians on every reference vertex
/// and networks sized by the config.
pub fn initial_avatar(rig: crate::rig::Rig, canonical: FrameParams, config: &TrainConfig, seed: u64) -> Avatar {
    let head = crate::model::init_warmup_gaussians(&rig, config.model.sh_degree, config.head_opacity_init);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Avatar::new(rig, head, canonical, &config.model, &mut rng)
}

/// One training frame: parameters, target image and head alpha mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainFrame {
    pub params: FrameParams,
    pub image: Grid,
    pub head_mask: Grid,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub frames: Vec<TrainFrame>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Adam state of every trainable tensor.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub head_mu: AdamState,
    pub head_scale: AdamState,
    pub head_quat: AdamState,
    pub head_opacity: AdamState,
    pub head_sh: AdamState,
    pub anchor_mu: AdamState,
    pub anchor_scale: AdamState,
    pub anchor_rgb: AdamState,
    pub anchor_opacity: AdamState,
    pub deform: Vec<AdamState>,
    pub warp: Vec<AdamState>,
    pub fine: Vec<AdamState>,
    pub coarse: AdamState,
    pub latent: AdamState,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub stage: Stage,
    pub total: f64,
    pub terms: LossTerms,
    pub gaussians: usize,
    pub anchors: usize,
}

pub const LOG_HEADER: &str = "iter,stage,total,rgb,flame,vgg,head,warp,anchor_alpha,anchor,gaussians,anchors";

impl LogRow {
    pub fn csv(&self) -> String {
        let t = &self.terms;
        format!(
            "{},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{},{}",
            self.iteration,
            self.stage.number(),
            self.total,
            t.rgb,
            t.flame,
            t.vgg,
            t.head,
            t.warp,
            t.anchor_alpha,
            t.anchor,
            self.gaussians,
            self.anchors
        )
    }
}

fn crop(g: &Grid, w: Window) -> Grid {
    if w.x0 == 0 && w.y0 == 0 && w.width == g.width && w.height == g.height {
        return g.clone();
    }
    Grid::from_fn(w.width, w.height, g.channels, |x, y, c| g.at(x + w.x0, y + w.y0)[c])
}

fn axpy(y: &mut Grid, a: f64, x: &Grid) {
    y.data.iter_mut().zip(&x.data).for_each(|(y, x)| *y += a * x);
}

fn scaled<T: std::ops::Mul<f64, Output = T> + Copy>(v: Vec<T>, s: f64) -> Vec<T> {
    v.into_iter().map(|x| x * s).collect()
}

pub struct Trainer {
    pub avatar: Avatar,
    pub config: TrainConfig,
    pub optim: OptimState,
    /// Global iteration across all stages.
    pub iteration: usize,
    pub completed: Option<Stage>,
    pub log: Vec<LogRow>,
    pub(crate) grad_stats: GradStats,
    pub(crate) scene_extent: f64,
    pub(crate) rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(avatar: Avatar, config: TrainConfig, seed: u64) -> Self {
        let means: Vec<_> = avatar.head.gaussians.iter().map(|g| g.mu).collect();
        let scene_extent = if means.is_empty() {
            1.0
        } else {
            let c = means.iter().sum::<crate::coremath::Vec3>() / means.len() as f64;
            1.1 * means.iter().map(|m| (m - c).norm()).fold(0.0, f64::max)
        };
        let optim = OptimState {
            deform: avatar.deform.mlp.tensors().iter().map(|t| AdamState::new(t.len())).collect(),
            warp: avatar.warp.mlp.tensors().iter().map(|t| AdamState::new(t.len())).collect(),
            fine: avatar.fine.mlp.tensors().iter().map(|t| AdamState::new(t.len())).collect(),
            ..OptimState::default()
        };
        Self {
            grad_stats: GradStats::new(avatar.head.len()),
            avatar,
            config,
            optim,
            iteration: 0,
            completed: None,
            log: Vec::new(),
            scene_extent,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_stage(&self) -> Option<Stage> {
        match self.completed {
            None => Some(Stage::Warmup),
            Some(Stage::Warmup) => Some(Stage::Main),
            Some(Stage::Main) => Some(Stage::Refine),
            Some(Stage::Refine) => None,
        }
    }

    /// Runs every remaining stage.
    pub fn fit(&mut self, data: &Dataset) -> Result<()> {
        while let Some(s) = self.next_stage() {
            self.run_stage(s, data)?;
        }
        Ok(())
    }

    pub fn run_stage(&mut self, stage: Stage, data: &Dataset) -> Result<()> {
        match self.next_stage() {
            Some(s) if s == stage => {}
            Some(s) => {
                return Err(Error::InvalidState(format!(
                    "stage {} requested but stage {} is next",
                    stage.number(),
                    s.number()
                )))
            }
            None => return Err(Error::InvalidState("all stages already completed".into())),
        }
        if data.is_empty() {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        if stage == Stage::Main && self.avatar.anchors.is_empty() {
            self.init_anchors(data)?;
        }
        let n = self.config.schedule.iterations(stage);
        info!("stage {}: {n} iterations", stage.number());
        for _ in 0..n {
            let row = self.step(stage, data)?;
            if row.iteration % 500 == 0 {
                info!("{}", row.csv());
            } else if row.iteration % 100 == 0 {
                debug!("{}", row.csv());
            }
        }
        self.completed = Some(stage);
        Ok(())
    }

    /// Picks anchors from the current Gaussians using the canonical frame's
    /// head mask.
    pub fn init_anchors(&mut self, data: &Dataset) -> Result<()> {
        let canon = &self.avatar.canonical;
        let tf = data
            .frames
            .iter()
            .find(|f| f.params.index == canon.index)
            .unwrap_or(&data.frames[0]);
        let av = &self.avatar;
        let set = init_anchors(
            &av.head,
            canon,
            &tf.head_mask,
            &av.rig,
            &av.deform,
            av.texture.padding,
            &self.config.anchors,
        )?;
        info!("initialized {} anchors", set.len());
        self.avatar.anchors = set;
        let na = self.avatar.anchors.len();
        self.optim.anchor_mu = AdamState::new(3 * na);
        self.optim.anchor_scale = AdamState::new(na);
        self.optim.anchor_rgb = AdamState::new(3 * na);
        self.optim.anchor_opacity = AdamState::new(na);
        Ok(())
    }

    fn render_options(stage: Stage) -> RenderOptions {
        match stage {
            Stage::Warmup => RenderOptions {
                anchors: false,
                body: false,
                anchor_warp: false,
                body_visibility_cutoff: 0.0,
            },
            Stage::Main => RenderOptions {
                anchors: true,
                body: true,
                anchor_warp: true,
                body_visibility_cutoff: 0.0,
            },
            Stage::Refine => RenderOptions {
                anchors: false,
                body: true,
                anchor_warp: true,
                body_visibility_cutoff: 0.0,
            },
        }
    }

    fn pick_window(&mut self, w: usize, h: usize) -> Window {
        match self.config.patch_size {
            Some(p) if p < w || p < h => {
                let pw = p.min(w);
                let ph = p.min(h);
                Window {
                    x0: self.rng.random_range(0..=w - pw),
                    y0: self.rng.random_range(0..=h - ph),
                    width: pw,
                    height: ph,
                }
            }
            _ => Window::full(w, h),
        }
    }

    /// Loss terms and gradients for one frame and window.
    pub fn loss_and_grads(
        &self,
        stage: Stage,
        tf: &TrainFrame,
        window: Window,
        weights: &LossWeights,
    ) -> Result<(LossTerms, Forward, Grads)> {
        let av = &self.avatar;
        let n = av.head.len();
        let fwd = forward(av, &tf.params, window, Self::render_options(stage))?;
        let gt = crop(&tf.image, window);
        let (rgb, mut d_img) = rgb_loss_grad(&fwd.image, &gt)?;
        let mut terms = LossTerms {
            rgb,
            ..LossTerms::default()
        };
        let mut extra = ExtraGrads::default();

        let mut mus: Vec<_> = av.head.gaussians.iter().map(|g| g.mu).collect();
        if fwd.deform_outs.len() > n {
            mus.extend(av.anchors.anchors.iter().map(|a| a.mu));
        }
        let gts: Vec<PseudoGt> = mus
            .par_iter()
            .map(|m| pseudo_gt_lookup(&av.rig, m))
            .collect::<Result<_>>()?;
        let (flame, d_flame) = flame_loss_grad(&fwd.deform_outs, &gts, &weights.flame(), n);
        terms.flame = flame;
        extra.deform = Some(d_flame);

        if stage != Stage::Warmup && weights.vgg > 0.0 {
            let (l, g) = feature_loss_grad(&PyramidGradients::default(), &fwd.image, &gt)?;
            terms.vgg = l;
            axpy(&mut d_img, weights.vgg, &g);
        }
        if stage == Stage::Main {
            let mask = crop(&tf.head_mask, window);
            let (l, mut g) = head_loss_grad(&fwd.head_layer.alpha, &mask)?;
            terms.head = l;
            g.data.iter_mut().for_each(|v| *v *= weights.head);
            extra.head_alpha = Some(g);

            let (l, g) = warp_loss_grad(fwd.body_delta());
            terms.warp = l;
            extra.body_delta = Some(scaled(g, weights.warp));

            let ops: Vec<f64> = av.anchors.anchors.iter().map(|a| a.opacity).collect();
            let (l, g) = anchor_alpha_loss_grad(&ops);
            terms.anchor_alpha = l;
            extra.anchor_opacity = Some(scaled(g, weights.anchor_alpha));
        }
        if stage != Stage::Warmup && !av.anchors.is_empty() {
            let targets: Vec<Vec2> = av.anchors.anchors.iter().map(|a| a.target_uv).collect();
            let warped = fwd.anchor_texture_xy(av.anchors.len());
            let (l, g) = anchor_loss_grad(&targets, &warped);
            terms.anchor = l;
            extra.anchor_texture_xy = Some(scaled(g, weights.anchor));
        }

        let mut grads = Grads::zeros(av);
        backward(av, &fwd, &d_img, &extra, &mut grads);
        Ok((terms, fwd, grads))
    }

    /// One optimization step on a random frame and patch.
    pub fn step(&mut self, stage: Stage, data: &Dataset) -> Result<LogRow> {
        let it = self.iteration;
        let tf = &data.frames[self.rng.random_range(0..data.frames.len())];
        let (w, h) = (tf.params.cam.width, tf.params.cam.height);
        let window = self.pick_window(w, h);
        let weights = self.config.weights_at(it);
        let (terms, _fwd, grads) = self.loss_and_grads(stage, tf, window, &weights)?;
        let total = weights.total(stage, &terms);

        let densifying = stage != Stage::Refine && it < self.config.densify_until;
        if densifying {
            // image-plane gradients in normalized device units, rescaled as
            // if the loss were averaged over the whole frame
            let k = window.len() as f64 / (w * h) as f64;
            let ndc: Vec<Vec2> = grads
                .head_mu2d
                .iter()
                .map(|g| Vec2::new(g.x * w as f64 * 0.5, g.y * h as f64 * 0.5) * k)
                .collect();
            self.grad_stats.add(&ndc, &grads.head_visible);
        }

        self.apply(stage, &grads, it);
        self.iteration += 1;

        if densifying && self.config.densify_every > 0 && self.iteration % self.config.densify_every == 0 {
            self.densify(it);
        }
        if stage == Stage::Main
            && self.config.cleanup_every > 0
            && self.iteration % self.config.cleanup_every == 0
            && !self.avatar.anchors.is_empty()
        {
            self.cleanup_anchors();
        }

        let row = LogRow {
            iteration: it,
            stage,
            total,
            terms,
            gaussians: self.avatar.head.len(),
            anchors: self.avatar.anchors.len(),
        };
        self.log.push(row);
        Ok(row)
    }

    fn densify(&mut self, it: usize) {
        let threshold = if it >= self.config.vgg_start {
            self.config.grad_threshold_vgg
        } else {
            self.config.grad_threshold
        };
        let cfg = DensityConfig {
            grad_threshold: threshold,
            scene_extent: self.scene_extent,
            max_gaussians: self.config.max_gaussians,
        };
        let d = densify_and_prune(&self.avatar.head, &self.grad_stats, &cfg, &mut self.rng);
        if d.cloned + d.split + d.pruned > 0 {
            debug!(
                "iter {it}: cloned {} split {} pruned {} -> {}",
                d.cloned,
                d.split,
                d.pruned,
                d.set.len()
            );
        }
        let sl = self.avatar.head.sh_len();
        let o = &mut self.optim;
        o.head_mu.remap_rows(&d.source, 3);
        o.head_scale.remap_rows(&d.source, 3);
        o.head_quat.remap_rows(&d.source, 4);
        o.head_opacity.remap_rows(&d.source, 1);
        o.head_sh.remap_rows(&d.source, sl);
        self.avatar.head = d.set;
        self.grad_stats = GradStats::new(self.avatar.head.len());
    }

    fn cleanup_anchors(&mut self) {
        let av = &mut self.avatar;
        let before = av.anchors.len();
        let kept = frustum_cleanup(&mut av.anchors, &av.canonical, &av.rig, &av.deform);
        if kept.len() != before {
            debug!("anchor cleanup removed {}", before - kept.len());
            let src: Vec<Option<usize>> = kept.iter().map(|&k| Some(k)).collect();
            let o = &mut self.optim;
            o.anchor_mu.remap_rows(&src, 3);
            o.anchor_scale.remap_rows(&src, 1);
            o.anchor_rgb.remap_rows(&src, 3);
            o.anchor_opacity.remap_rows(&src, 1);
        }
    }

    /// Adam update of every parameter trainable in `stage`.
    fn apply(&mut self, stage: Stage, g: &Grads, it: usize) {
        let cfg = &self.config;
        let lr = cfg.lr;
        let rs = cfg.rate_scale(it);
        let geometry = stage != Stage::Refine;
        let body = stage != Stage::Warmup;
        let anchors = stage == Stage::Main;
        let av = &mut self.avatar;
        let o = &mut self.optim;
        let n = av.head.len();

        if geometry {
            let mut p: Vec<f64> = av.head.gaussians.iter().flat_map(|x| x.mu.iter().copied()).collect();
            let d: Vec<f64> = g.head_mu.iter().flat_map(|x| x.iter().copied()).collect();
            o.head_mu.step(&mut p, &d, cfg.position_lr(it) * self.scene_extent);
            for (x, c) in av.head.gaussians.iter_mut().zip(p.chunks(3)) {
                x.mu = crate::coremath::Vec3::new(c[0], c[1], c[2]);
            }

            let mut p: Vec<f64> = av
                .head
                .gaussians
                .iter()
                .flat_map(|x| x.scale.iter().map(|s| s.ln()).collect::<Vec<_>>())
                .collect();
            let d: Vec<f64> = av
                .head
                .gaussians
                .iter()
                .zip(&g.head_scale)
                .flat_map(|(x, d)| (0..3).map(move |k| d[k] * x.scale[k]))
                .collect();
            o.head_scale.step(&mut p, &d, lr.scale);
            for (x, c) in av.head.gaussians.iter_mut().zip(p.chunks(3)) {
                x.scale = crate::coremath::Vec3::new(c[0].exp(), c[1].exp(), c[2].exp());
            }

            let mut p: Vec<f64> = av.head.gaussians.iter().flat_map(|x| x.quat.to_array()).collect();
            let d: Vec<f64> = g.head_quat.iter().flat_map(|q| q.to_array()).collect();
            o.head_quat.step(&mut p, &d, lr.rotation);
            for (x, c) in av.head.gaussians.iter_mut().zip(p.chunks(4)) {
                x.quat = crate::coremath::Quat::new(c[0], c[1], c[2], c[3]);
            }

            let mut grads = crate::mlp::MlpGrads::clone(&g.deform);
            for ((p, d), s) in av.deform.mlp.tensors_mut().into_iter().zip(grads.tensors_mut()).zip(&mut o.deform) {
                s.step(p, d, lr.mlp * rs);
            }
        }

        // head appearance is trainable in every stage
        let mut p: Vec<f64> = av.head.gaussians.iter().map(|x| logit(x.opacity)).collect();
        let d: Vec<f64> = av
            .head
            .gaussians
            .iter()
            .zip(&g.head_opacity)
            .map(|(x, d)| d * x.opacity * (1.0 - x.opacity))
            .collect();
        o.head_opacity.step(&mut p, &d, lr.opacity);
        for (x, v) in av.head.gaussians.iter_mut().zip(&p) {
            x.opacity = sigmoid(*v);
        }
        let sl = av.head.sh_len();
        let mut p: Vec<f64> = av.head.gaussians.iter().flat_map(|x| x.sh.iter().copied()).collect();
        o.head_sh.step_with(&mut p, &g.head_sh, |i| if i % sl < 3 { lr.sh_dc } else { lr.sh_rest });
        for (x, c) in av.head.gaussians.iter_mut().zip(p.chunks(sl.max(1))) {
            x.sh.copy_from_slice(c);
        }
        debug_assert_eq!(av.head.len(), n);

        if anchors && !av.anchors.is_empty() {
            let alr = lr.anchor * rs;
            let a = &mut av.anchors.anchors;
            let mut p: Vec<f64> = a.iter().flat_map(|x| x.mu.iter().copied()).collect();
            let d: Vec<f64> = g.anchor_mu.iter().flat_map(|x| x.iter().copied()).collect();
            o.anchor_mu.step(&mut p, &d, alr);
            for (x, c) in a.iter_mut().zip(p.chunks(3)) {
                x.mu = crate::coremath::Vec3::new(c[0], c[1], c[2]);
            }
            let mut p: Vec<f64> = a.iter().flat_map(|x| x.rgb.iter().copied()).collect();
            let d: Vec<f64> = g.anchor_rgb.iter().flat_map(|x| x.iter().copied()).collect();
            o.anchor_rgb.step(&mut p, &d, alr);
            for (x, c) in a.iter_mut().zip(p.chunks(3)) {
                x.rgb = crate::coremath::Vec3::new(c[0], c[1], c[2]);
            }
            let mut p: Vec<f64> = a.iter().map(|x| x.scale).collect();
            o.anchor_scale.step(&mut p, &g.anchor_scale, alr);
            a.iter_mut().zip(&p).for_each(|(x, v)| x.scale = *v);
            let mut p: Vec<f64> = a.iter().map(|x| x.opacity).collect();
            o.anchor_opacity.step(&mut p, &g.anchor_opacity, alr);
            a.iter_mut().zip(&p).for_each(|(x, v)| x.opacity = v.min(1.0));
            clamp_anchor_params(&mut av.anchors);
        }

        if body {
            let tlr = lr.texture * rs;
            o.coarse.step(&mut av.texture.coarse.data, &g.body.coarse.data, tlr);
            o.latent.step(&mut av.texture.latent.data, &g.body.latent.data, tlr);
            let mut wg = g.body.warp.clone();
            for ((p, d), s) in av.warp.mlp.tensors_mut().into_iter().zip(wg.tensors_mut()).zip(&mut o.warp) {
                s.step(p, d, lr.mlp * rs);
            }
            let mut fg = g.body.fine.clone();
            for ((p, d), s) in av.fine.mlp.tensors_mut().into_iter().zip(fg.tensors_mut()).zip(&mut o.fine) {
                s.step(p, d, lr.mlp * rs);
            }
        }
    }

    pub fn log_csv(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for r in &self.log {
            let _ = writeln!(s, "{}", r.csv());
        }
        s
    }
}

pub fn psnr(a: &Grid, b: &Grid) -> Result<f64> {
    let mse = loss_rgb(a, b)?;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Mean PSNR of final renders against the dataset images.
pub fn evaluate(av: &Avatar, data: &Dataset) -> Result<f64> {
    let mut sum = 0.0;
    for f in &data.frames {
        let r = render(av, &f.params, RenderOptions::inference())?;
        sum += psnr(&r.rgb, &f.image)?;
    }
    Ok(sum / data.len().max(1) as f64)
}

/// Test-time refinement of a frame's tracking parameters (joint rotations,
/// expression, camera position, landmarks) against its image, using
/// finite-difference gradients of the RGB loss.
pub fn finetune_frame(av: &Avatar, frame: &FrameParams, image: &Grid, iterations: usize, lr: f64) -> Result<FrameParams> {
    fn pack(f: &FrameParams) -> Vec<f64> {
        let mut v = f.theta.clone();
        v.extend(&f.psi);
        v.extend(f.cam.position.iter());
        for l in &f.ldmk {
            v.extend(l.iter());
        }
        v
    }
    fn unpack(f: &FrameParams, v: &[f64]) -> FrameParams {
        let mut o = f.clone();
        let (nt, ne) = (f.theta.len(), f.psi.len());
        o.theta.copy_from_slice(&v[..nt]);
        o.psi.copy_from_slice(&v[nt..nt + ne]);
        o.cam.position = crate::coremath::Vec3::new(v[nt + ne], v[nt + ne + 1], v[nt + ne + 2]);
        for (k, l) in o.ldmk.iter_mut().enumerate() {
            *l = Vec2::new(v[nt + ne + 3 + 2 * k], v[nt + ne + 4 + 2 * k]);
        }
        o
    }
    let loss = |v: &[f64]| -> Result<f64> {
        let f = unpack(frame, v);
        let r = render(av, &f, RenderOptions::inference())?;
        loss_rgb(&r.rgb, image)
    };
    let mut v = pack(frame);
    let mut state = AdamState::new(v.len());
    let h = 1e-4;
    for _ in 0..iterations {
        let mut grad = vec![0.0; v.len()];
        for i in 0..v.len() {
            let mut p = v.clone();
            p[i] += h;
            let lp = loss(&p)?;
            p[i] -= 2.0 * h;
            let lm = loss(&p)?;
            grad[i] = (lp - lm) / (2.0 * h);
        }
        state.step(&mut v, &grad, lr);
    }
    Ok(unpack(frame, &v))
}
