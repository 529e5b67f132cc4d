//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints its own PASS/FAIL line; exits non-zero if any fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ghs_core::anchors::{Anchor, AnchorSet, MIN_OPACITY, MIN_SCALE};
use ghs_core::avatario::asset::{avatar_container, avatar_from_container};
use ghs_core::avatario::container::Container;
use ghs_core::avatario::{make_synthetic, SyntheticConfig, SyntheticScene};
use ghs_core::coremath::{
    apply_homography, normalize_homography, svd_least_squares_homography, Grid, Mat2, Mat3, Quat, Vec2, Vec3,
};
use ghs_core::fastpath::{bake, ransac_filter, render_fast, RansacConfig};
use ghs_core::gaussmodel::{Camera, Gaussian3D, GaussianSet, Splat2D};
use ghs_core::model::{Avatar, ModelConfig};
use ghs_core::renderer::{composite, splat_layer, RenderLayer, Window, MAX_ALPHA, MIN_ALPHA};
use ghs_core::rig::{vertex_attributes, FrameParams, PseudoGt, Rig};
use ghs_core::trainer::{
    evaluate, initial_avatar, loss_anchor, loss_anchor_alpha, loss_flame, loss_head, loss_rgb, loss_vgg,
    loss_warp, render, Dataset, FlameWeights, PyramidGradients, RenderOptions, Stage, StageSchedule, TrainConfig,
    TrainFrame, Trainer,
};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(limit: Duration, t: Duration, what: &str) -> Result<(), String> {
    ensure(t <= limit, format!("{what} took {:.1}s (limit {:.0}s)", t.as_secs_f64(), limit.as_secs_f64()))
}

// ---------------------------------------------------------------- 1

fn brute_force_layer(splats: &[Splat2D], w: usize, h: usize) -> RenderLayer {
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&a, &b| splats[a].depth.total_cmp(&splats[b].depth).then(a.cmp(&b)));
    let mut out = RenderLayer::empty(w, h);
    for y in 0..h {
        for x in 0..w {
            let (mut t, mut c) = (1.0, Vec3::zeros());
            for &i in &order {
                let s = &splats[i];
                let d = Vec2::new(x as f64, y as f64) - s.mu2d;
                let q = s.cov2d.try_inverse().expect("positive definite");
                let a = (s.opacity * (-0.5 * d.dot(&(q * d))).exp()).min(MAX_ALPHA);
                if a < MIN_ALPHA {
                    continue;
                }
                c += s.rgb * a * t;
                t *= 1.0 - a;
            }
            out.color.at_mut(x, y).copy_from_slice(c.as_slice());
            out.alpha.at_mut(x, y)[0] = 1.0 - t;
        }
    }
    out
}

fn formula_oracles() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let splats: Vec<Splat2D> = (0..3)
            .map(|_| {
                let (a, b) = (rng.random_range(0.6..3.0), rng.random_range(0.6..3.0));
                let c = rng.random_range(-0.7..0.7) * a * b;
                Splat2D {
                    mu2d: Vec2::new(rng.random_range(-1.0..9.0), rng.random_range(-1.0..9.0)),
                    cov2d: Mat2::new(a * a, c, c, b * b),
                    depth: rng.random_range(0.5..5.0),
                    rgb: Vec3::new(rng.random(), rng.random(), rng.random()),
                    opacity: rng.random_range(0.1..1.0),
                }
            })
            .collect();
        let fast = splat_layer(&splats, 8, 8);
        let slow = brute_force_layer(&splats, 8, 8);
        for (a, b) in fast.color.data.iter().chain(&fast.alpha.data).zip(slow.color.data.iter().chain(&slow.alpha.data)) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-6, format!("rasterizer differs from per-pixel sum by {worst:e}"))?;

    // One pixel: anchor (0.2, 0.1, 0.05) at alpha 0.25 over head (0.3, 0.4,
    // 0.1) at alpha 0.5 over body (0.8, 0.6, 0.4) gives (0.725, 0.625, 0.275).
    let mut anchor = RenderLayer::empty(1, 1);
    anchor.color.data.copy_from_slice(&[0.2, 0.1, 0.05]);
    anchor.alpha.data[0] = 0.25;
    let mut head = RenderLayer::empty(1, 1);
    head.color.data.copy_from_slice(&[0.3, 0.4, 0.1]);
    head.alpha.data[0] = 0.5;
    let body = Grid {
        width: 1,
        height: 1,
        channels: 3,
        data: vec![0.8, 0.6, 0.4],
    };
    let fb = composite(&anchor, &head, Some(&body), Vec3::repeat(1.0)).map_err(|e| e.to_string())?;
    let expect = [0.725, 0.625, 0.275];
    let mut err = fb.rgb.data.iter().zip(expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    // Premultiplied anchor (0.25, 0, 0) at 0.25, head (0.2, 0.2, 0) at 0.5,
    // white body: (0.25,0,0) + 0.75 (0.2,0.2,0) + 0.375 (1,1,1).
    anchor.color.data.copy_from_slice(&[0.25, 0.0, 0.0]);
    head.color.data.copy_from_slice(&[0.2, 0.2, 0.0]);
    let white = Grid::filled(1, 1, 3, 1.0);
    let fb = composite(&anchor, &head, Some(&white), Vec3::repeat(1.0)).map_err(|e| e.to_string())?;
    for (a, b) in fb.rgb.data.iter().zip([0.775, 0.525, 0.375]) {
        err = err.max((a - b).abs());
    }
    ensure(err <= 1e-12, format!("composite off by {err:e}"))?;
    within(Duration::from_secs(5), t0.elapsed(), "formula oracles")?;
    Ok(format!("max splat error {worst:.1e}, composite error {err:.1e}"))
}

// ---------------------------------------------------------------- 2

fn tiny_frame(index: usize, t: f64) -> FrameParams {
    let mut theta = vec![0.0; 12];
    for (i, v) in theta.iter_mut().enumerate().skip(3) {
        *v = 0.15 * ((i as f64) * 0.7 + t).sin();
    }
    FrameParams {
        index,
        timestamp: index as f64,
        theta,
        psi: (0..8).map(|k| 0.3 * ((k as f64) + t).cos()).collect(),
        cam: Camera::looking_forward(Vec3::new(0.05 * t, -0.02, -2.5), 20.0, 8, 8),
        ldmk: [Vec2::new(3.5, 4.0), Vec2::new(1.0, 6.0), Vec2::new(6.0, 6.5), Vec2::new(3.5, 2.0)],
        has_nose: false,
    }
}

fn tiny_avatar(seed: u64) -> Avatar {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        mlp_width: 8,
        mlp_hidden_layers: 2,
        padding: 2,
        latent_dim: 4,
        sh_degree: 1,
        include_nose: false,
    };
    let gaussians = (0..3)
        .map(|_| Gaussian3D {
            mu: Vec3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(-0.2..0.2)),
            scale: Vec3::new(rng.random_range(0.08..0.2), rng.random_range(0.08..0.2), rng.random_range(0.08..0.2)),
            quat: Quat::new(1.0, rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)),
            opacity: rng.random_range(0.3..0.8),
            sh: (0..12).map(|_| rng.random_range(-0.3..0.3)).collect(),
        })
        .collect();
    let head = GaussianSet { sh_degree: 1, gaussians };
    let mut av = Avatar::new(Rig::toy(), head, tiny_frame(0, 0.0), &cfg, &mut rng);
    for t in av
        .deform
        .mlp
        .tensors_mut()
        .into_iter()
        .chain(av.warp.mlp.tensors_mut())
        .chain(av.fine.mlp.tensors_mut())
    {
        t.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
    }
    av.texture.coarse.data.iter_mut().for_each(|v| *v = rng.random());
    av.anchors = AnchorSet {
        anchors: (0..2)
            .map(|_| Anchor {
                mu: Vec3::new(rng.random_range(-0.4..0.4), rng.random_range(0.0..0.4), 0.2),
                scale: rng.random_range(0.1..0.2),
                rgb: Vec3::new(rng.random(), rng.random(), rng.random()),
                opacity: rng.random_range(0.2..0.6),
                target_uv: Vec2::new(rng.random_range(2.0..9.0), rng.random_range(2.0..9.0)),
            })
            .collect(),
    };
    av
}

fn tiny_train_frame(rng: &mut ChaCha8Rng, index: usize, t: f64) -> TrainFrame {
    TrainFrame {
        params: tiny_frame(index, t),
        image: Grid::from_fn(8, 8, 3, |_, _, _| rng.random()),
        head_mask: Grid::from_fn(8, 8, 1, |_, _, _| rng.random()),
    }
}

fn tiny_config() -> TrainConfig {
    let mut c = TrainConfig::desk();
    c.schedule = StageSchedule {
        warmup: 3,
        main: 4,
        refine: 3,
    };
    c.patch_size = Some(6);
    c.vgg_start = 0;
    c.densify_every = 0;
    c.anchors.count = 2;
    c
}

struct GradCheck {
    tr: Trainer,
    stage: Stage,
    frame: TrainFrame,
    checked: usize,
    worst: f64,
    failures: Vec<String>,
}

impl GradCheck {
    fn loss(&self) -> f64 {
        let w = self.tr.config.weights_at(self.tr.iteration);
        let (t, _, _) = self.tr.loss_and_grads(self.stage, &self.frame, Window::full(8, 8), &w).expect("loss");
        w.total(self.stage, &t)
    }

    fn check(&mut self, name: &str, analytic: f64, set: impl Fn(&mut Avatar, f64)) {
        let h = 1e-5;
        set(&mut self.tr.avatar, h);
        let lp = self.loss();
        set(&mut self.tr.avatar, -2.0 * h);
        let lm = self.loss();
        set(&mut self.tr.avatar, h);
        let fd = (lp - lm) / (2.0 * h);
        let scale = fd.abs().max(analytic.abs());
        let rel = (fd - analytic).abs() / scale.max(1e-300);
        self.checked += 1;
        if (fd - analytic).abs() > 1e-3 * scale + 1e-7 {
            self.failures.push(format!("{name}: fd {fd:e} vs analytic {analytic:e}"));
        } else if scale > 1e-4 {
            self.worst = self.worst.max(rel);
        }
    }
}

fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let (mut checked, mut worst, mut failures) = (0, 0.0f64, Vec::new());
    for (stage, seed) in [(Stage::Warmup, 0), (Stage::Main, 1), (Stage::Main, 2), (Stage::Refine, 3)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let frame = tiny_train_frame(&mut rng, 3, 0.7);
        let tr = Trainer::new(tiny_avatar(seed), tiny_config(), seed);
        let w = tr.config.weights_at(0);
        let (_, _, g) = tr.loss_and_grads(stage, &frame, Window::full(8, 8), &w).map_err(|e| e.to_string())?;
        let mut c = GradCheck {
            tr,
            stage,
            frame,
            checked: 0,
            worst: 0.0,
            failures: Vec::new(),
        };
        for i in 0..3 {
            for k in 0..3 {
                c.check("mean", g.head_mu[i][k], |a, h| a.head.gaussians[i].mu[k] += h);
                c.check("scale", g.head_scale[i][k], |a, h| a.head.gaussians[i].scale[k] += h);
            }
            let q = g.head_quat[i].to_array();
            for (k, &qk) in q.iter().enumerate() {
                c.check("quat", qk, |a, h| {
                    let mut v = a.head.gaussians[i].quat.to_array();
                    v[k] += h;
                    a.head.gaussians[i].quat = Quat::from_array(v);
                });
            }
            c.check("opacity", g.head_opacity[i], |a, h| a.head.gaussians[i].opacity += h);
            for k in 0..12 {
                c.check("sh", g.head_sh[12 * i + k], |a, h| a.head.gaussians[i].sh[k] += h);
            }
        }
        let nl = c.tr.avatar.deform.mlp.layers.len();
        for l in 0..nl {
            let n = c.tr.avatar.deform.mlp.layers[l].weight.len();
            for k in [0, n / 2, n - 1] {
                c.check("deform weight", g.deform.layers[l].weight.as_slice().expect("contiguous")[k], |a, h| {
                    a.deform.mlp.layers[l].weight.as_slice_mut().expect("contiguous")[k] += h
                });
            }
            c.check("deform bias", g.deform.layers[l].bias[0], |a, h| a.deform.mlp.layers[l].bias[0] += h);
        }
        if stage != Stage::Warmup {
            let cw = c.tr.avatar.texture.coarse.width;
            for (x, y) in [(3, 3), (5, 6), (7, 2), (4, 8)] {
                for ch in 0..3 {
                    let idx = (y * cw + x) * 3 + ch;
                    c.check("coarse texel", g.body.coarse.data[idx], |a, h| a.texture.coarse.data[idx] += h);
                }
                for ch in 0..4 {
                    let idx = (y * cw + x) * 4 + ch;
                    c.check("latent texel", g.body.latent.data[idx], |a, h| a.texture.latent.data[idx] += h);
                }
            }
            for l in 0..c.tr.avatar.warp.mlp.layers.len() {
                let n = c.tr.avatar.warp.mlp.layers[l].weight.len();
                for k in [1, n / 2, n - 1] {
                    c.check("warp weight", g.body.warp.layers[l].weight.as_slice().expect("contiguous")[k], |a, h| {
                        a.warp.mlp.layers[l].weight.as_slice_mut().expect("contiguous")[k] += h
                    });
                }
            }
            for l in 0..c.tr.avatar.fine.mlp.layers.len() {
                let n = c.tr.avatar.fine.mlp.layers[l].weight.len();
                for k in [1, n / 2, n - 1] {
                    c.check("fine weight", g.body.fine.layers[l].weight.as_slice().expect("contiguous")[k], |a, h| {
                        a.fine.mlp.layers[l].weight.as_slice_mut().expect("contiguous")[k] += h
                    });
                }
            }
        }
        if stage == Stage::Main {
            for k in 0..2 {
                for ch in 0..3 {
                    c.check("anchor mean", g.anchor_mu[k][ch], |a, h| a.anchors.anchors[k].mu[ch] += h);
                    c.check("anchor rgb", g.anchor_rgb[k][ch], |a, h| a.anchors.anchors[k].rgb[ch] += h);
                }
                c.check("anchor scale", g.anchor_scale[k], |a, h| a.anchors.anchors[k].scale += h);
                c.check("anchor opacity", g.anchor_opacity[k], |a, h| a.anchors.anchors[k].opacity += h);
            }
        }
        checked += c.checked;
        worst = worst.max(c.worst);
        failures.extend(c.failures.into_iter().map(|f| format!("stage {}: {f}", stage.number())));
    }
    ensure(failures.is_empty(), format!("{} of {checked} checks failed: {}", failures.len(), failures.join("; ")))?;
    within(Duration::from_secs(60), t0.elapsed(), "gradient suite")?;
    Ok(format!("{checked} finite-difference checks, worst relative error {worst:.1e}"))
}

// ---------------------------------------------------------------- 3

fn random_homography(rng: &mut ChaCha8Rng) -> Mat3 {
    Mat3::new(
        1.0 + rng.random_range(-0.2..0.2),
        rng.random_range(-0.2..0.2),
        rng.random_range(-10.0..10.0),
        rng.random_range(-0.2..0.2),
        1.0 + rng.random_range(-0.2..0.2),
        rng.random_range(-10.0..10.0),
        rng.random_range(-1e-3..1e-3),
        rng.random_range(-1e-3..1e-3),
        1.0,
    )
}

fn homography_suite() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let h = random_homography(&mut rng);
        let src: Vec<Vec2> = (0..20)
            .map(|_| Vec2::new(rng.random_range(0.0..128.0), rng.random_range(0.0..128.0)))
            .collect();
        let dst: Vec<Vec2> = src.iter().map(|p| apply_homography(&h, *p).expect("finite")).collect();
        let est = svd_least_squares_homography(&src, &dst).map_err(|e| e.to_string())?;
        worst = worst.max((normalize_homography(&est) - normalize_homography(&h)).abs().max());
    }
    ensure(worst <= 1e-6, format!("DLT error {worst:e}"))?;

    // Anchors on the static body plane of a short synthetic clip.
    let scene = make_synthetic(
        &SyntheticConfig {
            width: 64,
            height: 64,
            focal: 80.0,
            frames: 6,
            ..SyntheticConfig::default()
        },
        3,
    )
    .map_err(|e| e.to_string())?;
    let rig = &scene.rig;
    let canon = &scene.frames[0].params;
    let padding = 8.0;
    let body: Vec<usize> = (0..rig.mesh.vertices.len())
        .filter(|&i| rig.mesh.weights[i * rig.n_joints()] >= 1.0 - 1e-9)
        .filter(|&i| canon.cam.project_world(&rig.mesh.vertices[i]).is_some_and(|p| canon.cam.contains_pixel(&p)))
        .step_by(2)
        .take(100)
        .collect();
    let deform: Vec<_> = body.iter().map(|&i| vertex_attributes(rig, i)).collect();
    let frames: Vec<FrameParams> = scene.frames.iter().map(|f| f.params.clone()).collect();
    let cfg = RansacConfig::default();
    let n = body.len();
    let n_out = n / 10;
    let mut exact = 0;
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let outliers: Vec<usize> = rand::seq::index::sample(&mut rng, n, n_out).into_vec();
        let anchors = AnchorSet {
            anchors: body
                .iter()
                .enumerate()
                .map(|(k, &i)| {
                    let p = canon.cam.project_world(&rig.mesh.vertices[i]).expect("visible");
                    let mut uv = p + Vec2::repeat(padding);
                    if outliers.contains(&k) {
                        let a = rng.random_range(0.0..std::f64::consts::TAU);
                        uv += 50.0 * Vec2::new(a.cos(), a.sin());
                    }
                    Anchor {
                        mu: rig.mesh.vertices[i],
                        scale: 0.01,
                        rgb: Vec3::zeros(),
                        opacity: 0.5,
                        target_uv: uv,
                    }
                })
                .collect(),
        };
        let (_, kept) = ransac_filter(&anchors, &deform, &frames, rig, &cfg, &mut rng).map_err(|e| e.to_string())?;
        let expected: Vec<usize> = (0..n).filter(|k| !outliers.contains(k)).collect();
        if kept == expected {
            exact += 1;
        }
    }
    ensure(exact >= 95, format!("outlier set recovered exactly in {exact}/100 trials"))?;
    within(Duration::from_secs(10), t0.elapsed(), "homography suite")?;
    Ok(format!("DLT error {worst:.1e}; exact outlier removal in {exact}/100 trials"))
}

// ---------------------------------------------------------------- 4-6

struct DeskFit {
    scene: SyntheticScene,
    avatar: Avatar,
    psnr_stage2: f64,
    psnr_stage3: f64,
    first_loss: f64,
    final_loss: f64,
    elapsed: Duration,
}

fn desk_fit() -> Result<DeskFit, String> {
    let t0 = Instant::now();
    let scene = make_synthetic(&SyntheticConfig::default(), 0).map_err(|e| e.to_string())?;
    let (train, test) = (scene.train(), scene.test());
    let config = TrainConfig::desk();
    let av = initial_avatar(scene.rig.clone(), train.frames[0].params.clone(), &config, 0);
    let mut tr = Trainer::new(av, config, 0);
    tr.run_stage(Stage::Warmup, &train).map_err(|e| e.to_string())?;
    tr.run_stage(Stage::Main, &train).map_err(|e| e.to_string())?;
    let psnr_stage2 = evaluate(&tr.avatar, &test).map_err(|e| e.to_string())?;
    println!("  held-out PSNR after stage 2: {psnr_stage2:.2} dB ({:.0}s)", t0.elapsed().as_secs_f64());
    tr.run_stage(Stage::Refine, &train).map_err(|e| e.to_string())?;
    let psnr_stage3 = evaluate(&tr.avatar, &test).map_err(|e| e.to_string())?;
    let tail = &tr.log[tr.log.len().saturating_sub(50)..];
    Ok(DeskFit {
        first_loss: tr.log[0].total,
        final_loss: tail.iter().map(|r| r.total).sum::<f64>() / tail.len() as f64,
        elapsed: t0.elapsed(),
        avatar: tr.avatar,
        scene,
        psnr_stage2,
        psnr_stage3,
    })
}

fn end_to_end(fit: &DeskFit) -> Outcome {
    let drop = fit.psnr_stage3 - fit.psnr_stage2;
    let ratio = fit.first_loss / fit.final_loss;
    let summary = format!(
        "held-out PSNR {:.2} dB (stage 2 {:.2} dB, change {drop:+.2} dB), loss decrease {ratio:.1}x, {:.0}s",
        fit.psnr_stage3,
        fit.psnr_stage2,
        fit.elapsed.as_secs_f64()
    );
    ensure(fit.psnr_stage3 >= 30.0, format!("{summary}: PSNR below 30 dB"))?;
    ensure(drop >= -0.5, format!("{summary}: refinement lost more than 0.5 dB"))?;
    ensure(ratio >= 10.0, format!("{summary}: loss decreased less than 10x"))?;
    within(Duration::from_secs(30 * 60), fit.elapsed, "desk fit")?;
    Ok(summary)
}

fn baked(fit: &DeskFit) -> Result<ghs_core::fastpath::BakedAvatar, String> {
    let frames: Vec<FrameParams> = fit.scene.train().frames.iter().map(|f| f.params.clone()).collect();
    bake(&fit.avatar, &frames, None, &RansacConfig::default(), 0).map_err(|e| e.to_string())
}

fn fast_fidelity(fit: &DeskFit, baked: &ghs_core::fastpath::BakedAvatar) -> Outcome {
    let test = fit.scene.test();
    let mut mae = [0.0; 3];
    let mut queries = 0;
    for f in &test.frames {
        let before = fit.avatar.mlp_queries();
        let fast = render_fast(baked, &f.params).map_err(|e| e.to_string())?;
        queries += fit.avatar.mlp_queries() - before;
        let slow = render(&fit.avatar, &f.params, RenderOptions::inference()).map_err(|e| e.to_string())?;
        for (p, (a, b)) in fast.rgb.data.iter().zip(&slow.rgb.data).enumerate() {
            mae[p % 3] += (a - b).abs();
        }
    }
    let px = (test.len() * fit.avatar.width() * fit.avatar.height()) as f64;
    let mae = mae.map(|v| 255.0 * v / px);
    let summary = format!(
        "MAE per channel {:.2}/{:.2}/{:.2} (/255) over {} frames, {queries} MLP queries",
        mae[0],
        mae[1],
        mae[2],
        test.len()
    );
    ensure(mae.iter().all(|&m| m <= 2.0), format!("{summary}: above 2/255"))?;
    ensure(queries == 0, format!("{summary}: fast path queried a network"))?;
    Ok(summary)
}

fn fast_speed(fit: &DeskFit, baked: &ghs_core::fastpath::BakedAvatar) -> Outcome {
    let test = fit.scene.test();
    let time = |f: &dyn Fn(&FrameParams)| {
        let t0 = Instant::now();
        for _ in 0..2 {
            for fr in &test.frames {
                f(&fr.params);
            }
        }
        t0.elapsed().as_secs_f64() / (2 * test.len()) as f64
    };
    let slow = time(&|p| {
        render(&fit.avatar, p, RenderOptions::inference()).expect("render");
    });
    let fast = time(&|p| {
        render_fast(baked, p).expect("render");
    });
    let ratio = fast / slow;
    let summary = format!("{:.1} ms vs {:.1} ms per frame, ratio {ratio:.2}", 1e3 * fast, 1e3 * slow);
    ensure(ratio <= 0.6, format!("{summary}: above 0.6"))?;
    Ok(summary)
}

// ---------------------------------------------------------------- 7

fn tiny_dataset(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Dataset {
        frames: (0..4).map(|i| tiny_train_frame(&mut rng, i, i as f64 * 0.3)).collect(),
    }
}

fn loss_trace(threads: usize, seed: u64) -> Vec<f64> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("pool");
    pool.install(|| {
        let data = tiny_dataset(5);
        let mut tr = Trainer::new(tiny_avatar(5), tiny_config(), seed);
        tr.fit(&data).expect("fit");
        tr.log.iter().map(|r| r.total).collect()
    })
}

fn invariants() -> Outcome {
    let err = |e: ghs_core::Error| e.to_string();
    // clamps after every step
    let data = tiny_dataset(3);
    let mut tr = Trainer::new(tiny_avatar(3), tiny_config(), 3);
    tr.config.lr.anchor = 0.5;
    tr.run_stage(Stage::Warmup, &data).map_err(err)?;
    for a in &mut tr.avatar.anchors.anchors {
        a.opacity = MIN_OPACITY;
        a.scale = MIN_SCALE;
    }
    for _ in 0..30 {
        tr.step(Stage::Main, &data).map_err(err)?;
        for a in &tr.avatar.anchors.anchors {
            ensure(a.opacity >= MIN_OPACITY && a.scale >= MIN_SCALE, "anchor clamp violated")?;
        }
    }

    // stage-3 freezing
    let data = tiny_dataset(2);
    let mut tr = Trainer::new(tiny_avatar(2), tiny_config(), 2);
    tr.run_stage(Stage::Warmup, &data).map_err(err)?;
    tr.run_stage(Stage::Main, &data).map_err(err)?;
    let before = tr.avatar.clone();
    tr.run_stage(Stage::Refine, &data).map_err(err)?;
    let after = &tr.avatar;
    let frozen = before.head.gaussians.iter().zip(&after.head.gaussians).all(|(a, b)| {
        a.mu.map(f64::to_bits) == b.mu.map(f64::to_bits)
            && a.scale.map(f64::to_bits) == b.scale.map(f64::to_bits)
            && a.quat.to_array().map(f64::to_bits) == b.quat.to_array().map(f64::to_bits)
    }) && before.anchors == after.anchors
        && before.deform == after.deform;
    ensure(frozen, "stage 3 changed a frozen parameter")?;
    ensure(before.texture != after.texture, "stage 3 did not train the texture")?;

    // asset round trip
    let bytes = avatar_container(after).to_bytes();
    let back = avatar_from_container(&Container::from_bytes(&bytes).map_err(err)?).map_err(err)?;
    ensure(avatar_container(&back).to_bytes() == bytes && &back == after, "asset round trip is not exact")?;

    // determinism
    let a = loss_trace(1, 11);
    ensure(a == loss_trace(1, 11), "single-thread loss trace differs between runs")?;
    let b = loss_trace(4, 11);
    let worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs() / x.abs()).fold(0.0, f64::max);
    ensure(worst <= 1e-6, format!("4-thread trace differs by {worst:e} relative"))?;
    Ok(format!("clamps, stage-3 freezing, asset round trip; thread variance {worst:.1e}"))
}

// ---------------------------------------------------------------- 8

fn zero_losses() -> Outcome {
    let err = |e: ghs_core::Error| e.to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let img = Grid::from_fn(16, 12, 3, |_, _, _| rng.random());
    let mut values = Vec::new();
    values.push(("rgb", loss_rgb(&img, &img).map_err(err)?));
    values.push(("vgg", loss_vgg(&PyramidGradients::default(), &img, &img).map_err(err)?));

    let rig = Rig::toy();
    let pred: Vec<_> = (0..5).map(|v| vertex_attributes(&rig, v * 100)).collect();
    let gt: Vec<PseudoGt> = pred
        .iter()
        .enumerate()
        .map(|(k, d)| PseudoGt {
            vertex: k * 100,
            expr: d.expr.clone(),
            pose: d.pose.clone(),
            weights: d.weights.clone(),
        })
        .collect();
    let w = FlameWeights {
        expr: 1000.0,
        pose: 1000.0,
        weights: 1.0,
    };
    values.push(("flame", loss_flame(&pred, &gt, &w, 5)));

    let alpha = Grid::from_fn(16, 12, 1, |_, _, _| rng.random::<f64>() * 0.5);
    let head = Grid::from_fn(16, 12, 1, |x, y, _| alpha.at(x, y)[0] + 0.1);
    values.push(("head", loss_head(&alpha, &head).map_err(err)?));
    values.push(("warp", loss_warp(&vec![Vec2::zeros(); 64])));
    values.push(("anchor opacity", loss_anchor_alpha(&[0.0; 10])));

    // Anchors initialized on the canonical frame with a zero warp network.
    let scene = make_synthetic(
        &SyntheticConfig {
            width: 32,
            height: 32,
            focal: 40.0,
            frames: 1,
            ..SyntheticConfig::default()
        },
        8,
    )
    .map_err(err)?;
    let mut cfg = TrainConfig::desk();
    cfg.model.mlp_width = 8;
    cfg.model.padding = 4;
    cfg.anchors.count = 16;
    let mut av = initial_avatar(scene.rig.clone(), scene.frames[0].params.clone(), &cfg, 8);
    for l in &mut av.warp.mlp.layers {
        l.weight.fill(0.0);
        l.bias.fill(0.0);
    }
    let data = Dataset {
        frames: scene.frames.clone(),
    };
    let mut tr = Trainer::new(av, cfg, 8);
    tr.init_anchors(&data).map_err(err)?;
    let fwd = ghs_core::trainer::forward(
        &tr.avatar,
        &data.frames[0].params,
        Window::full(32, 32),
        RenderOptions {
            anchors: true,
            body: true,
            anchor_warp: true,
            body_visibility_cutoff: 0.0,
        },
    )
    .map_err(err)?;
    let targets: Vec<Vec2> = tr.avatar.anchors.anchors.iter().map(|a| a.target_uv).collect();
    values.push(("anchor", loss_anchor(&targets, &fwd.anchor_texture_xy(targets.len()))));

    let nonzero: Vec<String> = values.iter().filter(|(_, v)| *v != 0.0).map(|(n, v)| format!("{n}={v:e}")).collect();
    ensure(nonzero.is_empty(), format!("non-zero: {}", nonzero.join(", ")))?;
    Ok(format!("{} losses exactly zero ({} anchors)", values.len(), targets.len()))
}

fn main() {
    // `cargo test` forwards harness flags such as --nocapture. Numeric
    // arguments pick criteria (`-- 1 8`); any other filter that does not
    // match this target skips it.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let picked: Vec<usize> = args.iter().filter_map(|a| a.parse().ok()).collect();
    if picked.is_empty() && !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    let run = |n: usize| picked.is_empty() || picked.contains(&n);
    let mut failed = 0;
    let mut report = |n: usize, name: &str, r: Outcome| match r {
        Ok(msg) => println!("criterion {n} PASS {name}: {msg}"),
        Err(msg) => {
            failed += 1;
            println!("criterion {n} FAIL {name}: {msg}");
        }
    };
    if run(1) {
        report(1, "formula oracles", formula_oracles());
    }
    if run(2) {
        report(2, "gradient suite", gradient_suite());
    }
    if run(3) {
        report(3, "homography suite", homography_suite());
    }
    if run(4) || run(5) || run(6) {
        match desk_fit() {
            Ok(fit) => {
                report(4, "synthetic end-to-end fit", end_to_end(&fit));
                match baked(&fit) {
                    Ok(b) => {
                        report(5, "fast-path fidelity", fast_fidelity(&fit, &b));
                        report(6, "fast-path speed", fast_speed(&fit, &b));
                    }
                    Err(e) => {
                        report(5, "fast-path fidelity", Err(format!("bake failed: {e}")));
                        report(6, "fast-path speed", Err(format!("bake failed: {e}")));
                    }
                }
            }
            Err(e) => {
                for (n, name) in [(4, "synthetic end-to-end fit"), (5, "fast-path fidelity"), (6, "fast-path speed")] {
                    report(n, name, Err(format!("fit failed: {e}")));
                }
            }
        }
    }
    if run(7) {
        report(7, "invariant suites", invariants());
    }
    if run(8) {
        report(8, "zero losses", zero_losses());
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all selected acceptance criteria passed");
}
