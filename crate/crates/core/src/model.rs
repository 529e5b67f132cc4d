//! The complete avatar: head Gaussians, anchors, deformation network and
//! neural body texture.

use rand::Rng;

use crate::anchors::AnchorSet;
use crate::coremath::{Quat, Vec3};
use crate::gaussmodel::{Gaussian3D, GaussianSet};
use crate::neuraltex::{Conditioning, FineNet, NeuralTexture, WarpNet};
use crate::rig::{DeformNet, FrameParams, Rig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub mlp_width: usize,
    pub mlp_hidden_layers: usize,
    pub padding: usize,
    pub latent_dim: usize,
    pub sh_degree: usize,
    pub include_nose: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mlp_width: 128,
            mlp_hidden_layers: 4,
            padding: 50,
            latent_dim: 32,
            sh_degree: 3,
            include_nose: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Avatar {
    pub rig: Rig,
    pub head: GaussianSet,
    pub anchors: AnchorSet,
    pub deform: DeformNet,
    pub texture: NeuralTexture,
    pub warp: WarpNet,
    pub fine: FineNet,
    pub cond: Conditioning,
    pub canonical: FrameParams,
    pub background: Vec3,
}

impl Avatar {
    pub fn new(rig: Rig, head: GaussianSet, canonical: FrameParams, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let cond = Conditioning {
            include_nose: cfg.include_nose,
        };
        let cd = cond.encoded_dim(&rig);
        let deform = DeformNet::new(&rig, cfg.mlp_width, cfg.mlp_hidden_layers, rng);
        let texture = NeuralTexture::new(
            canonical.cam.width,
            canonical.cam.height,
            cfg.padding,
            cfg.latent_dim,
            rng,
        );
        let warp = WarpNet::new(cd, cfg.mlp_width, cfg.mlp_hidden_layers, rng);
        let fine = FineNet::new(cfg.latent_dim, cd, cfg.mlp_width, cfg.mlp_hidden_layers, rng);
        Self {
            rig,
            head,
            anchors: AnchorSet::default(),
            deform,
            texture,
            warp,
            fine,
            cond,
            canonical,
            background: Vec3::repeat(1.0),
        }
    }

    pub fn width(&self) -> usize {
        self.canonical.cam.width
    }

    pub fn height(&self) -> usize {
        self.canonical.cam.height
    }

    /// Total MLP rows evaluated so far across all three networks.
    pub fn mlp_queries(&self) -> u64 {
        self.deform.mlp.query_count() + self.warp.mlp.query_count() + self.fine.mlp.query_count()
    }
}

/// Reference vertices that move with a non-root bone; vertices bound only
/// to the static root belong to the body and are left to the texture.
pub fn head_vertices(rig: &Rig) -> Vec<usize> {
    let nj = rig.n_joints();
    (0..rig.mesh.vertices.len())
        .filter(|&i| rig.mesh.weights[i * nj] < 1.0 - 1e-9)
        .collect()
}

/// Gaussians on the rig's head vertices only.
pub fn init_head_gaussians(rig: &Rig, sh_degree: usize, opacity: f64) -> GaussianSet {
    gaussians_on_vertices(rig, &head_vertices(rig), sh_degree, opacity)
}

/// Warm-up Gaussians on every reference vertex, so the body is covered
/// before anchors are picked from it.
pub fn init_warmup_gaussians(rig: &Rig, sh_degree: usize, opacity: f64) -> GaussianSet {
    let all: Vec<usize> = (0..rig.mesh.vertices.len()).collect();
    gaussians_on_vertices(rig, &all, sh_degree, opacity)
}

/// One isotropic Gaussian per listed vertex, scaled by the mean distance
/// to its three nearest listed neighbours.
fn gaussians_on_vertices(rig: &Rig, vertices: &[usize], sh_degree: usize, opacity: f64) -> GaussianSet {
    let v: Vec<Vec3> = vertices.iter().map(|&i| rig.mesh.vertices[i]).collect();
    let sh_len = 3 * crate::coremath::num_sh_coeffs(sh_degree);
    let gaussians = v
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut d: Vec<f64> = v
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| (p - q).norm())
                .collect();
            d.sort_by(f64::total_cmp);
            let k = d.len().min(3).max(1);
            let s = d.iter().take(k).sum::<f64>() / k as f64;
            let s = s.max(1e-3);
            Gaussian3D {
                mu: *p,
                scale: Vec3::repeat(s),
                quat: Quat::IDENTITY,
                opacity,
                sh: vec![0.0; sh_len],
            }
        })
        .collect();
    GaussianSet { sh_degree, gaussians }
}
