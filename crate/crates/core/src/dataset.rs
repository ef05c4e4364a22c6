//! In-memory dataset: IMU stream, feature-track frames, optional ground truth.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::sensors::{ImuSample, PinholeIntrinsics};
use crate::spline::RigidTransform;

/// One image's feature observations, sorted by feature id.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    /// Exposure time of the first row.
    pub t: f64,
    pub observations: Vec<(u64, Vector2<f64>)>,
}

impl Frame {
    pub fn new(t: f64, mut observations: Vec<(u64, Vector2<f64>)>) -> Self {
        observations.sort_by_key(|o| o.0);
        Self { t, observations }
    }
}

/// Body pose at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StampedPose {
    pub t: f64,
    pub rot: Matrix3<f64>,
    pub pos: Vector3<f64>,
}

/// Sensor setup shared by every file of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub intrinsics: PinholeIntrinsics,
    /// Body-to-camera rotation as a scalar-last quaternion.
    pub extrinsic_rotation: [f64; 4],
    /// Camera origin in the body frame, meters.
    pub extrinsic_translation: [f64; 3],
    pub imu_rate: f64,
    pub frame_rate: f64,
    /// Ground-truth line delay in microseconds, when known.
    pub line_delay_us: Option<f64>,
}

impl DatasetMeta {
    pub fn extrinsic(&self) -> RigidTransform {
        let t = self.extrinsic_translation;
        RigidTransform::new(crate::lie::from_quaternion(self.extrinsic_rotation), Vector3::new(t[0], t[1], t[2]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub imu: Vec<ImuSample>,
    pub frames: Vec<Frame>,
    pub ground_truth: Option<Vec<StampedPose>>,
}
