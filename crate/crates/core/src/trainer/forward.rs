//! Differentiable rendering of a full avatar for one frame.

use crate::coremath::{sh_eval, sh_to_rgb_vjp, Grid, Mat3, Quat, ShEval, Vec2, Vec3};
use crate::error::Result;
use crate::gaussmodel::{build_covariance, build_covariance_vjp, project_mean_cov, project_mean_cov_vjp, Splat2D};
use crate::mlp::{MlpCache, MlpGrads};
use crate::model::Avatar;
use crate::neuraltex::{body_backward, body_forward, BodyEval, BodyGrads, WarpEval};
use crate::renderer::{bin_splats, composite_unclamped, Binning, Framebuffer, RenderLayer, Window};
use crate::rig::{deform_point_vjp, skin, skin_vjp, DeformGrad, DeformOutput, FrameParams, FramePose, Skin};

/// Which layers take part in a render.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub anchors: bool,
    pub body: bool,
    /// Evaluate the anchor warp needed by the anchor loss.
    pub anchor_warp: bool,
    /// Skip body evaluation where the Gaussian layers leave less than this
    /// much visibility. Zero evaluates every pixel.
    pub body_visibility_cutoff: f64,
}

impl RenderOptions {
    /// Final renders: head Gaussians over the body texture.
    pub fn inference() -> Self {
        Self {
            anchors: false,
            body: true,
            anchor_warp: false,
            body_visibility_cutoff: 1e-4,
        }
    }
}

/// Projected state of one Gaussian that survived culling.
#[derive(Debug, Clone)]
struct Projected {
    splat: usize,
    mu_cam: Vec3,
    cov_cam: Mat3,
    dir: Vec3,
    dir_norm: f64,
    sh: Option<ShEval>,
}

/// Everything kept from a forward pass.
pub struct Forward {
    pub window: Window,
    pub frame: FrameParams,
    pose: FramePose,
    pub deform_outs: Vec<DeformOutput>,
    deform_cache: MlpCache,
    skins: Vec<Skin>,
    head_cov: Vec<Mat3>,
    head_proj: Vec<Option<Projected>>,
    pub head_splats: Vec<Splat2D>,
    head_bin: Binning,
    anchor_proj: Vec<Option<Projected>>,
    pub anchor_splats: Vec<Splat2D>,
    anchor_bin: Option<Binning>,
    pub head_layer: RenderLayer,
    pub anchor_layer: RenderLayer,
    pub body: Option<BodyEval>,
    /// Window pixel index of each body evaluation.
    body_pixels: Vec<usize>,
    pub body_color: Option<Grid>,
    /// Anchor image positions and their warp, for anchors in front of the
    /// camera.
    pub anchor_xhat: Vec<Option<Vec2>>,
    pub anchor_warp: Option<WarpEval>,
    anchor_warp_index: Vec<usize>,
    pub cond: Vec<f64>,
    pub image: Grid,
}

/// Gradients of every avatar parameter.
#[derive(Debug, Clone)]
pub struct Grads {
    pub head_mu: Vec<Vec3>,
    pub head_scale: Vec<Vec3>,
    pub head_quat: Vec<Quat>,
    pub head_opacity: Vec<f64>,
    pub head_sh: Vec<f64>,
    pub anchor_mu: Vec<Vec3>,
    pub anchor_scale: Vec<f64>,
    pub anchor_rgb: Vec<Vec3>,
    pub anchor_opacity: Vec<f64>,
    pub deform: MlpGrads,
    pub body: BodyGrads,
    /// Gradient on the encoded frame conditioning.
    pub cond: Vec<f64>,
    /// Image-plane mean gradient of each head Gaussian (pixels), for
    /// density control.
    pub head_mu2d: Vec<Vec2>,
    pub head_visible: Vec<bool>,
}

impl Grads {
    pub fn zeros(av: &Avatar) -> Self {
        let n = av.head.len();
        let na = av.anchors.len();
        Self {
            head_mu: vec![Vec3::zeros(); n],
            head_scale: vec![Vec3::zeros(); n],
            head_quat: vec![Quat::new(0.0, 0.0, 0.0, 0.0); n],
            head_opacity: vec![0.0; n],
            head_sh: vec![0.0; n * av.head.sh_len()],
            anchor_mu: vec![Vec3::zeros(); na],
            anchor_scale: vec![0.0; na],
            anchor_rgb: vec![Vec3::zeros(); na],
            anchor_opacity: vec![0.0; na],
            deform: MlpGrads::zeros_like(&av.deform.mlp),
            body: BodyGrads::zeros(&av.texture, &av.warp, &av.fine),
            cond: vec![0.0; av.cond.encoded_dim(&av.rig)],
            head_mu2d: vec![Vec2::zeros(); n],
            head_visible: vec![false; n],
        }
    }
}

/// Extra loss gradients entering the backward pass besides the image.
#[derive(Debug, Clone, Default)]
pub struct ExtraGrads {
    /// On the head layer alpha, per window pixel.
    pub head_alpha: Option<Grid>,
    /// On the body warp offsets, per body evaluation.
    pub body_delta: Option<Vec<Vec2>>,
    /// On the warped anchor texture coordinates, per anchor (zeros for
    /// anchors without a projection).
    pub anchor_texture_xy: Option<Vec<Vec2>>,
    /// On the deformation outputs (head then anchors).
    pub deform: Option<Vec<DeformGrad>>,
    pub anchor_opacity: Option<Vec<f64>>,
}

fn normalize_with_norm(v: Vec3) -> (Vec3, f64) {
    let n = v.norm();
    if n > 0.0 {
        (v / n, n)
    } else {
        (Vec3::z(), 0.0)
    }
}

pub fn forward(av: &Avatar, frame: &FrameParams, window: Window, opts: RenderOptions) -> Result<Forward> {
    let cam = &frame.cam;
    let pose = av.rig.frame_pose(frame);
    let n = av.head.len();
    let use_anchors = !av.anchors.is_empty() && (opts.anchors || opts.anchor_warp);
    let mut mus: Vec<Vec3> = av.head.gaussians.iter().map(|g| g.mu).collect();
    if use_anchors {
        mus.extend(av.anchors.anchors.iter().map(|a| a.mu));
    }
    let (deform_outs, deform_cache) = av.deform.eval_batch(&mus);
    let skins: Vec<Skin> = deform_outs.iter().map(|d| skin(&pose, d)).collect();

    let mut head_cov = Vec::with_capacity(n);
    let mut head_proj = Vec::with_capacity(n);
    let mut head_splats = Vec::with_capacity(n);
    for (i, g) in av.head.gaussians.iter().enumerate() {
        let s = &skins[i];
        let cov = build_covariance(g.scale, g.quat)?;
        head_cov.push(cov);
        let mu_d = s.rot * g.mu + s.trans;
        let cov_d = s.rot * cov * s.rot.transpose();
        let mu_cam = cam.world_to_cam(&mu_d);
        let cov_cam = cam.rot * cov_d * cam.rot.transpose();
        let Ok(p) = project_mean_cov(&mu_cam, &cov_cam, cam) else {
            head_proj.push(None);
            continue;
        };
        let (dir, dir_norm) = normalize_with_norm(mu_d - cam.position);
        let e = sh_eval(&g.sh, &dir)?;
        head_proj.push(Some(Projected {
            splat: head_splats.len(),
            mu_cam,
            cov_cam,
            dir,
            dir_norm,
            sh: Some(e),
        }));
        head_splats.push(Splat2D {
            mu2d: p.mu2d,
            cov2d: p.cov2d,
            depth: p.depth,
            rgb: e.rgb,
            opacity: g.opacity,
        });
    }

    let mut anchor_proj = Vec::new();
    let mut anchor_splats = Vec::new();
    let mut anchor_xhat = vec![None; av.anchors.len()];
    if use_anchors {
        for (k, a) in av.anchors.anchors.iter().enumerate() {
            let s = &skins[n + k];
            let mu_d = s.rot * a.mu + s.trans;
            let cov_d = s.rot * s.rot.transpose() * (a.scale * a.scale);
            let mu_cam = cam.world_to_cam(&mu_d);
            let cov_cam = cam.rot * cov_d * cam.rot.transpose();
            let Ok(p) = project_mean_cov(&mu_cam, &cov_cam, cam) else {
                anchor_proj.push(None);
                continue;
            };
            anchor_xhat[k] = Some(p.mu2d);
            anchor_proj.push(Some(Projected {
                splat: anchor_splats.len(),
                mu_cam,
                cov_cam,
                dir: Vec3::zeros(),
                dir_norm: 0.0,
                sh: None,
            }));
            anchor_splats.push(Splat2D {
                mu2d: p.mu2d,
                cov2d: p.cov2d,
                depth: p.depth,
                rgb: a.rgb,
                opacity: a.opacity,
            });
        }
    }

    let head_bin = bin_splats(&head_splats, window);
    let head_layer = head_bin.render();
    let (anchor_bin, anchor_layer) = if use_anchors && opts.anchors {
        let b = bin_splats(&anchor_splats, window);
        let l = b.render();
        (Some(b), l)
    } else {
        (None, RenderLayer::empty(window.width, window.height))
    };

    let cond = av.cond.encode(&av.rig, frame);
    let (w, h) = (cam.width, cam.height);
    let mut body = None;
    let mut body_pixels = Vec::new();
    let mut body_color = None;
    if opts.body {
        let mut pixels = Vec::with_capacity(window.len());
        for y in 0..window.height {
            for x in 0..window.width {
                let p = y * window.width + x;
                let vis = (1.0 - anchor_layer.alpha.data[p]) * (1.0 - head_layer.alpha.data[p]);
                if opts.body_visibility_cutoff > 0.0 && vis < opts.body_visibility_cutoff {
                    continue;
                }
                body_pixels.push(p);
                pixels.push(Vec2::new((x + window.x0) as f64, (y + window.y0) as f64));
            }
        }
        let e = body_forward(&av.texture, &av.warp, &av.fine, &pixels, &cond, w, h);
        let mut img = Grid::filled(window.width, window.height, 3, 0.0);
        for (&p, c) in body_pixels.iter().zip(&e.color) {
            img.data[3 * p..3 * p + 3].copy_from_slice(c.as_slice());
        }
        body = Some(e);
        body_color = Some(img);
    }

    let mut anchor_warp = None;
    let mut anchor_warp_index = Vec::new();
    if use_anchors && opts.anchor_warp {
        let mut pts = Vec::new();
        for (k, x) in anchor_xhat.iter().enumerate() {
            if let Some(x) = x {
                pts.push(*x);
                anchor_warp_index.push(k);
            }
        }
        anchor_warp = Some(av.warp.warp_batch(&pts, &cond, av.texture.padding, w, h));
    }

    let image = composite_unclamped(&anchor_layer, &head_layer, body_color.as_ref(), av.background)?;
    Ok(Forward {
        window,
        frame: frame.clone(),
        pose,
        deform_outs,
        deform_cache,
        skins,
        head_cov,
        head_proj,
        head_splats,
        head_bin,
        anchor_proj,
        anchor_splats,
        anchor_bin,
        head_layer,
        anchor_layer,
        body,
        body_pixels,
        body_color,
        anchor_xhat,
        anchor_warp,
        anchor_warp_index,
        cond,
        image,
    })
}

impl Forward {
    /// Warped texture coordinate of each anchor with a projection.
    pub fn anchor_texture_xy(&self, n_anchors: usize) -> Vec<Option<Vec2>> {
        let mut out = vec![None; n_anchors];
        if let Some(w) = &self.anchor_warp {
            for (j, &k) in self.anchor_warp_index.iter().enumerate() {
                out[k] = Some(w.texture_xy[j]);
            }
        }
        out
    }

    /// Warp offsets of the body evaluations.
    pub fn body_delta(&self) -> &[Vec2] {
        self.body.as_ref().map_or(&[], |b| &b.warp.delta)
    }
}

/// Renders a full frame for display (clamped).
pub fn render(av: &Avatar, frame: &FrameParams, opts: RenderOptions) -> Result<Framebuffer> {
    let f = forward(av, frame, Window::full(frame.cam.width, frame.cam.height), opts)?;
    let mut rgb = f.image;
    rgb.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(Framebuffer {
        rgb,
        background: av.background,
    })
}

/// Backward pass for an image gradient `d_image` (window sized, unclamped
/// composite) plus any direct loss gradients.
pub fn backward(av: &Avatar, fwd: &Forward, d_image: &Grid, extra: &ExtraGrads, grads: &mut Grads) {
    let win = fwd.window;
    let np = win.len();
    let cam = &fwd.frame.cam;
    let n = av.head.len();
    let has_anchor_layer = fwd.anchor_bin.is_some();

    let mut d_head_color = Grid::new(win.width, win.height, 3);
    let mut d_head_alpha = extra
        .head_alpha
        .clone()
        .unwrap_or_else(|| Grid::new(win.width, win.height, 1));
    let mut d_anchor_color = Grid::new(win.width, win.height, 3);
    let mut d_anchor_alpha = Grid::new(win.width, win.height, 1);
    let mut d_body = vec![Vec3::zeros(); fwd.body_pixels.len()];
    let mut body_slot = vec![usize::MAX; np];
    for (j, &p) in fwd.body_pixels.iter().enumerate() {
        body_slot[p] = j;
    }
    for p in 0..np {
        let aa = fwd.anchor_layer.alpha.data[p];
        let ah = fwd.head_layer.alpha.data[p];
        let mut da_anchor = 0.0;
        let mut da_head = 0.0;
        for c in 0..3 {
            let dc = d_image.data[3 * p + c];
            let t = match &fwd.body_color {
                Some(b) => b.data[3 * p + c],
                None => av.background[c],
            };
            let hc = fwd.head_layer.color.data[3 * p + c];
            d_anchor_color.data[3 * p + c] = dc;
            da_anchor -= dc * (hc + (1.0 - ah) * t);
            d_head_color.data[3 * p + c] = (1.0 - aa) * dc;
            da_head -= (1.0 - aa) * dc * t;
            if body_slot[p] != usize::MAX {
                d_body[body_slot[p]][c] = (1.0 - aa) * (1.0 - ah) * dc;
            }
        }
        d_anchor_alpha.data[p] = da_anchor;
        d_head_alpha.data[p] += da_head;
    }

    // body texture and warp
    if let Some(b) = &fwd.body {
        let dc = body_backward(
            &av.texture,
            &av.warp,
            &av.fine,
            b,
            &d_body,
            extra.body_delta.as_deref(),
            &mut grads.body,
        );
        grads.cond.iter_mut().zip(&dc).for_each(|(a, b)| *a += b);
    }

    // anchor warp loss
    let mut d_anchor_mu2d = vec![Vec2::zeros(); av.anchors.len()];
    if let (Some(w), Some(d_xt)) = (&fwd.anchor_warp, &extra.anchor_texture_xy) {
        let d: Vec<Vec2> = fwd.anchor_warp_index.iter().map(|&k| d_xt[k]).collect();
        let (dp, dc) = av.warp.backward(w, &d, &mut grads.body.warp, true);
        let dp = dp.expect("point gradient requested");
        for (j, &k) in fwd.anchor_warp_index.iter().enumerate() {
            d_anchor_mu2d[k] += d[j] + dp[j];
        }
        grads.cond.iter_mut().zip(&dc).for_each(|(a, b)| *a += b);
    }

    let head_sg = fwd.head_bin.backward(&d_head_color, &d_head_alpha);
    let anchor_sg = fwd
        .anchor_bin
        .as_ref()
        .map(|b| b.backward(&d_anchor_color, &d_anchor_alpha));

    let mut deform_grads: Vec<DeformGrad> = match &extra.deform {
        Some(d) => d.clone(),
        None => fwd
            .deform_outs
            .iter()
            .map(|_| DeformGrad::zeros(av.deform.n_expr, av.deform.n_pose_features, av.deform.n_joints))
            .collect(),
    };
    let mut d_mu_direct = vec![Vec3::zeros(); fwd.deform_outs.len()];

    for (i, g) in av.head.gaussians.iter().enumerate() {
        let Some(pr) = &fwd.head_proj[i] else { continue };
        let sg = head_sg[pr.splat];
        grads.head_opacity[i] += sg.opacity;
        grads.head_mu2d[i] += sg.mu2d;
        grads.head_visible[i] |= sg != Default::default();
        let sl = av.head.sh_len();
        let d_dir = sh_to_rgb_vjp(
            &g.sh,
            &pr.dir,
            pr.sh.as_ref().expect("head colour"),
            &sg.rgb,
            &mut grads.head_sh[i * sl..(i + 1) * sl],
        );
        let mut d_mu_d = if pr.dir_norm > 0.0 {
            (d_dir - pr.dir * pr.dir.dot(&d_dir)) / pr.dir_norm
        } else {
            Vec3::zeros()
        };
        let (d_mu_cam, d_cov_cam) = project_mean_cov_vjp(&pr.mu_cam, &pr.cov_cam, cam, &sg.mu2d, &sg.cov2d);
        d_mu_d += cam.rot.transpose() * d_mu_cam;
        let d_cov_d = cam.rot.transpose() * d_cov_cam * cam.rot;
        let s = &fwd.skins[i];
        let (d_rot, d_t, d_mu, d_cov) = deform_point_vjp(&s.rot, &g.mu, &fwd.head_cov[i], &d_mu_d, &d_cov_d);
        let (d_scale, d_quat) = build_covariance_vjp(g.scale, g.quat, &d_cov);
        grads.head_scale[i] += d_scale;
        let q = &mut grads.head_quat[i];
        q.w += d_quat.w;
        q.x += d_quat.x;
        q.y += d_quat.y;
        q.z += d_quat.z;
        d_mu_direct[i] += d_mu;
        skin_vjp(&fwd.pose, s, &d_rot, &d_t, &mut deform_grads[i]);
    }

    if !fwd.anchor_proj.is_empty() {
        for (k, a) in av.anchors.anchors.iter().enumerate() {
            let Some(pr) = &fwd.anchor_proj[k] else { continue };
            let mut d_mu2d = d_anchor_mu2d[k];
            let mut d_cov2d = crate::coremath::Mat2::zeros();
            if has_anchor_layer {
                let sg = anchor_sg.as_ref().expect("anchor layer")[pr.splat];
                grads.anchor_rgb[k] += sg.rgb;
                grads.anchor_opacity[k] += sg.opacity;
                d_mu2d += sg.mu2d;
                d_cov2d = sg.cov2d;
            }
            if d_mu2d == Vec2::zeros() && d_cov2d == crate::coremath::Mat2::zeros() {
                continue;
            }
            let (d_mu_cam, d_cov_cam) = project_mean_cov_vjp(&pr.mu_cam, &pr.cov_cam, cam, &d_mu2d, &d_cov2d);
            let d_mu_d = cam.rot.transpose() * d_mu_cam;
            let d_cov_d = cam.rot.transpose() * d_cov_cam * cam.rot;
            let s = &fwd.skins[n + k];
            let cov = Mat3::identity() * (a.scale * a.scale);
            let (d_rot, d_t, d_mu, d_cov) = deform_point_vjp(&s.rot, &a.mu, &cov, &d_mu_d, &d_cov_d);
            grads.anchor_scale[k] += 2.0 * a.scale * d_cov.trace();
            d_mu_direct[n + k] += d_mu;
            skin_vjp(&fwd.pose, s, &d_rot, &d_t, &mut deform_grads[n + k]);
        }
    }
    if let Some(d) = &extra.anchor_opacity {
        grads.anchor_opacity.iter_mut().zip(d).for_each(|(a, b)| *a += b);
    }

    let d_in = av
        .deform
        .backward(&fwd.deform_cache, &fwd.deform_outs, &deform_grads, &mut grads.deform);
    for (i, g) in grads.head_mu.iter_mut().enumerate() {
        *g += d_mu_direct[i] + d_in[i];
    }
    for k in 0..grads.anchor_mu.len().min(d_in.len().saturating_sub(n)) {
        grads.anchor_mu[k] += d_mu_direct[n + k] + d_in[n + k];
    }
}
