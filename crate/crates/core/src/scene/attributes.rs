use serde::{Deserialize, Serialize};

use super::SceneInstance;
use crate::error::{Error, Result};

/// Lower clamp on each bounding-box side so volume and side ratios stay positive.
pub const BOX_EPS: f64 = 1e-6;

/// Geometric summary of one instance's point set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceAttributes {
    pub mean: [f64; 3],
    /// Population standard deviation per axis.
    pub std: [f64; 3],
    pub bbox: [f64; 3],
    pub volume: f64,
    pub max_side: f64,
}

pub fn compute_attributes(instance: &SceneInstance) -> Result<InstanceAttributes> {
    let pts = &instance.points;
    if pts.is_empty() {
        return Err(Error::Validation {
            scene: String::new(),
            line: 0,
            detail: format!("instance {} has no points", instance.id),
        });
    }
    let n = pts.len() as f64;
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    let mut bbox = [0.0; 3];
    for a in 0..3 {
        // Sorting makes every reduction independent of point order.
        let mut axis: Vec<f64> = pts.iter().map(|p| p[a]).collect();
        axis.sort_by(f64::total_cmp);
        let m = axis.iter().sum::<f64>() / n;
        let var = axis.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
        mean[a] = m;
        std[a] = var.sqrt();
        bbox[a] = (axis[axis.len() - 1] - axis[0]).max(BOX_EPS);
    }
    let volume = bbox[0] * bbox[1] * bbox[2];
    let max_side = bbox[0].max(bbox[1]).max(bbox[2]);
    Ok(InstanceAttributes {
        mean,
        std,
        bbox,
        volume,
        max_side,
    })
}
