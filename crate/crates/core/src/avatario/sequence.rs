//! Frame sequences as JSON Lines, one record per frame.
//!
//! ```json
//! {"index":0,"timestamp":0.0,"theta":[...],"psi":[...],
//!  "camera":{"rotation":[[1,0,0],[0,1,0],[0,0,1]],"position":[0,0,-2.5],
//!            "focal":[160,160],"principal":[63.5,63.5],"size":[128,128]},
//!  "landmarks":[[x,y],[x,y],[x,y],[x,y]],"has_nose":false,
//!  "image":"frames/0000.png","head_mask":"masks/0000.png"}
//! ```
//!
//! Image paths are relative to the sequence file. Indices must strictly
//! increase and intrinsics must stay fixed unless a record sets
//! `"intrinsics_change": true`.

use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use super::imageio::{read_image, read_mask};
use crate::coremath::{Mat3, Vec2, Vec3};
use crate::error::{Error, Result};
use crate::gaussmodel::Camera;
use crate::rig::FrameParams;
use crate::trainer::{Dataset, TrainFrame};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    /// World-to-camera rotation, row-major.
    pub rotation: [[f64; 3]; 3],
    /// Camera centre in world coordinates.
    pub position: [f64; 3],
    pub focal: [f64; 2],
    pub principal: [f64; 2],
    pub size: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: usize,
    pub timestamp: f64,
    pub theta: Vec<f64>,
    pub psi: Vec<f64>,
    pub camera: CameraRecord,
    pub landmarks: [[f64; 2]; 4],
    #[serde(default)]
    pub has_nose: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_mask: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub intrinsics_change: bool,
}

impl From<&Camera> for CameraRecord {
    fn from(c: &Camera) -> Self {
        let r = &c.rot;
        Self {
            rotation: [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]]),
            position: [c.position.x, c.position.y, c.position.z],
            focal: [c.fx, c.fy],
            principal: [c.cx, c.cy],
            size: [c.width, c.height],
        }
    }
}

impl From<&CameraRecord> for Camera {
    fn from(c: &CameraRecord) -> Self {
        let r = &c.rotation;
        Self {
            rot: Mat3::new(
                r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
            ),
            position: Vec3::from(c.position),
            fx: c.focal[0],
            fy: c.focal[1],
            cx: c.principal[0],
            cy: c.principal[1],
            width: c.size[0],
            height: c.size[1],
        }
    }
}

impl FrameRecord {
    pub fn from_params(p: &FrameParams) -> Self {
        Self {
            index: p.index,
            timestamp: p.timestamp,
            theta: p.theta.clone(),
            psi: p.psi.clone(),
            camera: CameraRecord::from(&p.cam),
            landmarks: p.ldmk.map(|l| [l.x, l.y]),
            has_nose: p.has_nose,
            image: None,
            head_mask: None,
            intrinsics_change: false,
        }
    }

    pub fn params(&self) -> FrameParams {
        FrameParams {
            index: self.index,
            timestamp: self.timestamp,
            theta: self.theta.clone(),
            psi: self.psi.clone(),
            cam: Camera::from(&self.camera),
            ldmk: self.landmarks.map(|l| Vec2::new(l[0], l[1])),
            has_nose: self.has_nose,
        }
    }
}

fn same_intrinsics(a: &CameraRecord, b: &CameraRecord) -> bool {
    a.focal == b.focal && a.principal == b.principal && a.size == b.size
}

/// Checks index ordering and intrinsics consistency.
pub fn validate_sequence(records: &[FrameRecord]) -> Result<()> {
    for (k, w) in records.windows(2).enumerate() {
        let (a, b) = (&w[0], &w[1]);
        if b.index <= a.index {
            return Err(Error::InvalidArgument(format!(
                "record {}: frame index {} does not increase past {}",
                k + 1,
                b.index,
                a.index
            )));
        }
        if !b.intrinsics_change && !same_intrinsics(&a.camera, &b.camera) {
            return Err(Error::InvalidArgument(format!(
                "record {}: intrinsics changed without intrinsics_change",
                k + 1
            )));
        }
    }
    for r in records {
        Camera::from(&r.camera).validate()?;
    }
    Ok(())
}

pub fn load_sequence(path: impl AsRef<Path>) -> Result<Vec<FrameRecord>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: FrameRecord = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidArgument(format!("line {}: {e}", n + 1)))?;
        out.push(r);
    }
    validate_sequence(&out)?;
    Ok(out)
}

pub fn save_sequence(path: impl AsRef<Path>, records: &[FrameRecord]) -> Result<()> {
    validate_sequence(records)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    base.join(rel)
}

/// Loads a sequence and its images. Frames without a head mask get an
/// all-zero mask.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let records = load_sequence(path)?;
    let mut frames = Vec::with_capacity(records.len());
    for r in &records {
        let params = r.params();
        let img = r
            .image
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument(format!("frame {} has no image", r.index)))?;
        let image = read_image(resolve(base, img))?;
        if image.width != params.cam.width || image.height != params.cam.height {
            return Err(Error::Shape(format!(
                "frame {}: image is {}x{}, camera is {}x{}",
                r.index, image.width, image.height, params.cam.width, params.cam.height
            )));
        }
        let head_mask = match r.head_mask.as_deref() {
            Some(m) => read_mask(resolve(base, m))?,
            None => crate::coremath::Grid::new(image.width, image.height, 1),
        };
        if !head_mask.same_shape(&crate::coremath::Grid::new(image.width, image.height, 1)) {
            return Err(Error::Shape(format!("frame {}: head mask size", r.index)));
        }
        frames.push(TrainFrame {
            params,
            image,
            head_mask,
        });
    }
    Ok(Dataset { frames })
}
