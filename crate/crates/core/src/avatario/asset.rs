//! Avatar, checkpoint and baked-avatar files built on [`Container`].

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use std::path::Path;

use super::container::Container;
use crate::anchors::{Anchor, AnchorSet};
use crate::coremath::{num_sh_coeffs, Grid, Quat, Vec2, Vec3};
use crate::error::{Error, Result};
use crate::fastpath::BakedAvatar;
use crate::gaussmodel::{Gaussian3D, GaussianSet};
use crate::mlp::{Activation, Dense, Mlp};
use crate::model::Avatar;
use crate::neuraltex::{Conditioning, FineNet, NeuralTexture, WarpNet};
use crate::rig::{DeformNet, DeformOutput, FrameParams, ReferenceMesh, Rig};
use crate::trainer::{GradStats, LogRow, OptimState, Stage, TrainConfig, Trainer};

pub const AVATAR_KIND: &str = "avatar";
pub const CHECKPOINT_KIND: &str = "checkpoint";
pub const BAKED_KIND: &str = "baked";

fn meta_field<T: serde::de::DeserializeOwned>(meta: &Value, key: &str) -> Result<T> {
    let v = meta.get(key).ok_or_else(|| Error::corrupt(key, "missing metadata"))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::corrupt(key, e.to_string()))
}

fn vec3s(c: &Container, name: &str, n: usize) -> Result<Vec<Vec3>> {
    Ok(c.data(name, 3 * n)?.chunks_exact(3).map(Vec3::from_column_slice).collect())
}

fn flat3(v: &[Vec3]) -> Vec<f64> {
    v.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

fn put_grid(c: &mut Container, name: &str, g: &Grid) {
    c.push(name, vec![g.height, g.width, g.channels], g.data.clone());
}

fn get_grid(c: &Container, name: &str) -> Result<Grid> {
    let b = c.blob(name)?;
    if b.shape.len() != 3 {
        return Err(Error::corrupt(name, "grid blob must be rank 3"));
    }
    Ok(Grid {
        height: b.shape[0],
        width: b.shape[1],
        channels: b.shape[2],
        data: b.data.clone(),
    })
}

fn put_mlp(c: &mut Container, meta: &mut Value, name: &str, mlp: &Mlp) {
    for (i, l) in mlp.layers.iter().enumerate() {
        let (r, k) = l.weight.dim();
        c.push(format!("{name}.{i}.weight"), vec![r, k], l.weight.iter().copied().collect());
        c.push(format!("{name}.{i}.bias"), vec![k], l.bias.to_vec());
    }
    meta[name] = json!({ "layers": mlp.layers.len(), "activation": mlp.output_activation });
}

fn get_mlp(c: &Container, name: &str) -> Result<Mlp> {
    let m = c.meta.get(name).ok_or_else(|| Error::corrupt(name, "missing metadata"))?;
    let n: usize = meta_field(m, "layers")?;
    let act: Activation = meta_field(m, "activation")?;
    let mut layers = Vec::with_capacity(n);
    for i in 0..n {
        let wname = format!("{name}.{i}.weight");
        let w = c.blob(&wname)?;
        if w.shape.len() != 2 {
            return Err(Error::corrupt(wname, "weight must be rank 2"));
        }
        let weight = Array2::from_shape_vec((w.shape[0], w.shape[1]), w.data.clone())
            .map_err(|e| Error::corrupt(&wname, e.to_string()))?;
        let bias = Array1::from(c.data(&format!("{name}.{i}.bias"), w.shape[1])?.to_vec());
        if let Some(prev) = layers.last().map(|l: &Dense| l.weight.ncols()) {
            if prev != weight.nrows() {
                return Err(Error::corrupt(wname, "layer sizes do not chain"));
            }
        }
        layers.push(Dense { weight, bias });
    }
    Ok(Mlp::from_layers(layers, act))
}

fn put_rig(c: &mut Container, meta: &mut Value, rig: &Rig) {
    let nv = rig.mesh.vertices.len();
    let nj = rig.n_joints();
    c.push("rig.vertices", vec![nv, 3], flat3(&rig.mesh.vertices));
    c.push("rig.expr_basis", vec![rig.mesh.expr_basis.len()], rig.mesh.expr_basis.clone());
    c.push("rig.pose_basis", vec![rig.mesh.pose_basis.len()], rig.mesh.pose_basis.clone());
    c.push("rig.weights", vec![nv, nj], rig.mesh.weights.clone());
    c.push("rig.rest_joints", vec![nj, 3], flat3(&rig.rest_joints));
    c.push("rig.joint_regressor", vec![rig.joint_regressor.len()], rig.joint_regressor.clone());
    meta["rig"] = json!({
        "parents": rig.parents,
        "n_expr": rig.n_expr,
        "conditioning_joints": rig.conditioning_joints,
    });
}

fn get_rig(c: &Container) -> Result<Rig> {
    let m = c.meta.get("rig").ok_or_else(|| Error::corrupt("rig", "missing metadata"))?;
    let parents: Vec<Option<usize>> = meta_field(m, "parents")?;
    let nj = parents.len();
    let nv = c.blob("rig.vertices")?.data.len() / 3;
    let rig = Rig {
        rest_joints: vec3s(c, "rig.rest_joints", nj)?,
        n_expr: meta_field(m, "n_expr")?,
        joint_regressor: c.blob("rig.joint_regressor")?.data.clone(),
        conditioning_joints: meta_field(m, "conditioning_joints")?,
        mesh: ReferenceMesh {
            vertices: vec3s(c, "rig.vertices", nv)?,
            expr_basis: c.blob("rig.expr_basis")?.data.clone(),
            pose_basis: c.blob("rig.pose_basis")?.data.clone(),
            weights: c.data("rig.weights", nv * nj)?.to_vec(),
        },
        parents,
    };
    rig.validate().map_err(|e| Error::corrupt("rig", e.to_string()))?;
    Ok(rig)
}

fn put_gaussians(c: &mut Container, meta: &mut Value, name: &str, set: &GaussianSet) {
    let n = set.gaussians.len();
    let g = &set.gaussians;
    c.push(format!("{name}.mu"), vec![n, 3], g.iter().flat_map(|g| [g.mu.x, g.mu.y, g.mu.z]).collect());
    c.push(
        format!("{name}.scale"),
        vec![n, 3],
        g.iter().flat_map(|g| [g.scale.x, g.scale.y, g.scale.z]).collect(),
    );
    c.push(
        format!("{name}.quat"),
        vec![n, 4],
        g.iter().flat_map(|g| [g.quat.w, g.quat.x, g.quat.y, g.quat.z]).collect(),
    );
    c.push(format!("{name}.opacity"), vec![n], g.iter().map(|g| g.opacity).collect());
    let len = 3 * num_sh_coeffs(set.sh_degree);
    c.push(format!("{name}.sh"), vec![n, len], g.iter().flat_map(|g| g.sh.iter().copied()).collect());
    meta[name] = json!({ "count": n, "sh_degree": set.sh_degree });
}

fn get_gaussians(c: &Container, name: &str) -> Result<GaussianSet> {
    let m = c.meta.get(name).ok_or_else(|| Error::corrupt(name, "missing metadata"))?;
    let n: usize = meta_field(m, "count")?;
    let sh_degree: usize = meta_field(m, "sh_degree")?;
    let len = 3 * num_sh_coeffs(sh_degree);
    let mu = vec3s(c, &format!("{name}.mu"), n)?;
    let scale = vec3s(c, &format!("{name}.scale"), n)?;
    let quat = c.data(&format!("{name}.quat"), 4 * n)?;
    let opacity = c.data(&format!("{name}.opacity"), n)?;
    let sh = c.data(&format!("{name}.sh"), len * n)?;
    let gaussians = (0..n)
        .map(|i| Gaussian3D {
            mu: mu[i],
            scale: scale[i],
            quat: Quat {
                w: quat[4 * i],
                x: quat[4 * i + 1],
                y: quat[4 * i + 2],
                z: quat[4 * i + 3],
            },
            opacity: opacity[i],
            sh: sh[len * i..len * (i + 1)].to_vec(),
        })
        .collect();
    Ok(GaussianSet { sh_degree, gaussians })
}

fn put_anchors(c: &mut Container, set: &AnchorSet) {
    let a = &set.anchors;
    let n = a.len();
    c.push("anchors.mu", vec![n, 3], a.iter().flat_map(|a| [a.mu.x, a.mu.y, a.mu.z]).collect());
    c.push("anchors.scale", vec![n], a.iter().map(|a| a.scale).collect());
    c.push("anchors.rgb", vec![n, 3], a.iter().flat_map(|a| [a.rgb.x, a.rgb.y, a.rgb.z]).collect());
    c.push("anchors.opacity", vec![n], a.iter().map(|a| a.opacity).collect());
    c.push(
        "anchors.target_uv",
        vec![n, 2],
        a.iter().flat_map(|a| [a.target_uv.x, a.target_uv.y]).collect(),
    );
}

fn get_anchors(c: &Container) -> Result<AnchorSet> {
    let n = c.blob("anchors.scale")?.data.len();
    let mu = vec3s(c, "anchors.mu", n)?;
    let rgb = vec3s(c, "anchors.rgb", n)?;
    let scale = c.data("anchors.scale", n)?;
    let opacity = c.data("anchors.opacity", n)?;
    let uv = c.data("anchors.target_uv", 2 * n)?;
    Ok(AnchorSet {
        anchors: (0..n)
            .map(|i| Anchor {
                mu: mu[i],
                scale: scale[i],
                rgb: rgb[i],
                opacity: opacity[i],
                target_uv: Vec2::new(uv[2 * i], uv[2 * i + 1]),
            })
            .collect(),
    })
}

fn put_deform_outputs(c: &mut Container, name: &str, d: &[DeformOutput]) {
    for (part, get) in [
        ("expr", (|d: &DeformOutput| &d.expr) as fn(&DeformOutput) -> &Vec<f64>),
        ("pose", |d| &d.pose),
        ("weights", |d| &d.weights),
    ] {
        let k = d.first().map_or(0, |x| get(x).len());
        c.push(
            format!("{name}.{part}"),
            vec![d.len(), k],
            d.iter().flat_map(|x| get(x).iter().copied()).collect(),
        );
    }
}

fn get_deform_outputs(c: &Container, name: &str) -> Result<Vec<DeformOutput>> {
    let part = |p: &str| -> Result<(usize, usize, Vec<f64>)> {
        let b = c.blob(&format!("{name}.{p}"))?;
        if b.shape.len() != 2 {
            return Err(Error::corrupt(format!("{name}.{p}"), "must be rank 2"));
        }
        Ok((b.shape[0], b.shape[1], b.data.clone()))
    };
    let (n, ke, e) = part("expr")?;
    let (np, kp, p) = part("pose")?;
    let (nw, kw, w) = part("weights")?;
    if np != n || nw != n {
        return Err(Error::corrupt(name, "row counts differ"));
    }
    Ok((0..n)
        .map(|i| DeformOutput {
            expr: e[i * ke..(i + 1) * ke].to_vec(),
            pose: p[i * kp..(i + 1) * kp].to_vec(),
            weights: w[i * kw..(i + 1) * kw].to_vec(),
        })
        .collect())
}

/// Serializes a trained avatar.
pub fn avatar_container(av: &Avatar) -> Container {
    let mut meta = json!({
        "canonical": av.canonical,
        "include_nose": av.cond.include_nose,
        "padding": av.texture.padding,
        "deform": {},
    });
    let mut c = Container::new(AVATAR_KIND, Value::Null);
    put_rig(&mut c, &mut meta, &av.rig);
    put_gaussians(&mut c, &mut meta, "head", &av.head);
    put_anchors(&mut c, &av.anchors);
    put_mlp(&mut c, &mut meta, "deform", &av.deform.mlp);
    put_mlp(&mut c, &mut meta, "warp", &av.warp.mlp);
    put_mlp(&mut c, &mut meta, "fine", &av.fine.mlp);
    put_grid(&mut c, "texture.coarse", &av.texture.coarse);
    put_grid(&mut c, "texture.latent", &av.texture.latent);
    c.push("background", vec![3], vec![av.background.x, av.background.y, av.background.z]);
    c.meta = meta;
    c
}

/// Rebuilds an avatar, validating shapes against the rig.
pub fn avatar_from_container(c: &Container) -> Result<Avatar> {
    let rig = get_rig(c)?;
    let canonical: FrameParams = meta_field(&c.meta, "canonical")?;
    let cond = Conditioning {
        include_nose: meta_field(&c.meta, "include_nose")?,
    };
    let deform = DeformNet {
        mlp: get_mlp(c, "deform")?,
        n_expr: rig.n_expr,
        n_pose_features: rig.n_pose_features(),
        n_joints: rig.n_joints(),
    };
    if deform.mlp.layers.last().map(|l| l.weight.ncols()) != Some(deform.output_dim()) {
        return Err(Error::corrupt("deform", "output size does not match rig"));
    }
    let texture = NeuralTexture {
        coarse: get_grid(c, "texture.coarse")?,
        latent: get_grid(c, "texture.latent")?,
        padding: meta_field(&c.meta, "padding")?,
    };
    let bg = c.data("background", 3)?;
    Ok(Avatar {
        head: get_gaussians(c, "head")?,
        anchors: get_anchors(c)?,
        deform,
        texture,
        warp: WarpNet {
            mlp: get_mlp(c, "warp")?,
        },
        fine: FineNet {
            mlp: get_mlp(c, "fine")?,
        },
        cond,
        canonical,
        background: Vec3::new(bg[0], bg[1], bg[2]),
        rig,
    })
}

pub fn save_avatar(av: &Avatar, path: impl AsRef<Path>) -> Result<()> {
    avatar_container(av).write(path)
}

pub fn load_avatar(path: impl AsRef<Path>) -> Result<Avatar> {
    let c = Container::read(path)?;
    c.expect_kind(AVATAR_KIND)?;
    avatar_from_container(&c)
}

/// Writes the avatar plus all optimizer state needed to resume training.
pub fn save_checkpoint(t: &Trainer, path: impl AsRef<Path>) -> Result<()> {
    let mut c = avatar_container(&t.avatar);
    c.kind = CHECKPOINT_KIND.to_string();
    c.push("train.grad_sum", vec![t.grad_stats.sum.len()], t.grad_stats.sum.clone());
    c.push(
        "train.grad_count",
        vec![t.grad_stats.count.len()],
        t.grad_stats.count.iter().map(|&n| n as f64).collect(),
    );
    c.push("train.scene_extent", vec![1], vec![t.scene_extent]);
    c.meta["train"] = json!({
        "iteration": t.iteration,
        "completed": t.completed,
        "optim": t.optim,
        "log": t.log,
        "rng_seed": t.rng.get_seed(),
        "rng_stream": t.rng.get_stream(),
        "rng_word_pos": t.rng.get_word_pos().to_string(),
    });
    c.write(path)
}

/// Restores a trainer; the config is supplied by the caller since it is
/// not part of the file.
pub fn load_checkpoint(path: impl AsRef<Path>, config: TrainConfig) -> Result<Trainer> {
    let c = Container::read(path)?;
    c.expect_kind(CHECKPOINT_KIND)?;
    let avatar = avatar_from_container(&c)?;
    let m = c.meta.get("train").ok_or_else(|| Error::corrupt("train", "missing metadata"))?;
    let n = avatar.head.len();
    let mut t = Trainer::new(avatar, config, 0);
    t.iteration = meta_field(m, "iteration")?;
    t.completed = meta_field::<Option<Stage>>(m, "completed")?;
    t.optim = meta_field::<OptimState>(m, "optim")?;
    t.log = meta_field::<Vec<LogRow>>(m, "log")?;
    t.grad_stats = GradStats {
        sum: c.data("train.grad_sum", n)?.to_vec(),
        count: c.data("train.grad_count", n)?.iter().map(|&v| v as u32).collect(),
    };
    t.scene_extent = c.data("train.scene_extent", 1)?[0];
    let seed: [u8; 32] = meta_field(m, "rng_seed")?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(meta_field(m, "rng_stream")?);
    let pos: String = meta_field(m, "rng_word_pos")?;
    rng.set_word_pos(pos.parse().map_err(|_| Error::corrupt("rng_word_pos", "not an integer"))?);
    t.rng = rng;
    Ok(t)
}

pub fn baked_container(b: &BakedAvatar) -> Container {
    let mut meta = json!({
        "padding": b.padding,
        "canonical_index": b.canonical_index,
    });
    let mut c = Container::new(BAKED_KIND, Value::Null);
    put_rig(&mut c, &mut meta, &b.rig);
    put_gaussians(&mut c, &mut meta, "head", &b.head);
    put_deform_outputs(&mut c, "head_deform", &b.head_deform);
    put_anchors(&mut c, &b.anchors);
    put_deform_outputs(&mut c, "anchor_deform", &b.anchor_deform);
    put_grid(&mut c, "texture", &b.texture);
    c.push("background", vec![3], vec![b.background.x, b.background.y, b.background.z]);
    c.meta = meta;
    c
}

pub fn baked_from_container(c: &Container) -> Result<BakedAvatar> {
    c.expect_kind(BAKED_KIND)?;
    let head = get_gaussians(c, "head")?;
    let head_deform = get_deform_outputs(c, "head_deform")?;
    let anchors = get_anchors(c)?;
    let anchor_deform = get_deform_outputs(c, "anchor_deform")?;
    if head_deform.len() != head.len() || anchor_deform.len() != anchors.len() {
        return Err(Error::corrupt("deform", "attribute rows do not match primitives"));
    }
    let texture = get_grid(c, "texture")?;
    if texture.channels != 3 {
        return Err(Error::corrupt("texture", "baked texture must be RGB"));
    }
    let bg = c.data("background", 3)?;
    Ok(BakedAvatar {
        rig: get_rig(c)?,
        head,
        head_deform,
        anchors,
        anchor_deform,
        texture,
        padding: meta_field(&c.meta, "padding")?,
        canonical_index: meta_field(&c.meta, "canonical_index")?,
        background: Vec3::new(bg[0], bg[1], bg[2]),
    })
}

pub fn save_baked(b: &BakedAvatar, path: impl AsRef<Path>) -> Result<()> {
    baked_container(b).write(path)
}

pub fn load_baked(path: impl AsRef<Path>) -> Result<BakedAvatar> {
    baked_from_container(&Container::read(path)?)
}
