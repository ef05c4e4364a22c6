//! Plain-text file formats.
//!
//! Timestamps are written with 9 decimals, every other number in Rust's
//! shortest round-trip form, so write -> read -> write is byte-identical.
//!
//! * IMU: `t, gx, gy, gz, ax, ay, az` (s, rad/s, m/s^2)
//! * tracks: `frame_t, feature_id, u, v` (s, -, px, px)
//! * trajectory: `t tx ty tz qx qy qz qw` (scalar-last quaternion)
//! * calibration trace: `t, line_delay_us`
//! * solve reports: one CSV row per window solve, header included
//!
//! Lines starting with `#` are comments.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Vector2, Vector3};

use crate::dataset::{Dataset, DatasetMeta, Frame, StampedPose};
use crate::error::IoError;
use crate::estimator::WindowReport;
use crate::lie;
use crate::sensors::ImuSample;

pub const META_FILE: &str = "meta.toml";
pub const IMU_FILE: &str = "imu.csv";
pub const TRACKS_FILE: &str = "tracks.csv";
pub const GROUND_TRUTH_FILE: &str = "groundtruth.txt";

/// Pose timestamps refer to the first image row of each frame.
pub const TRAJECTORY_HEADER: &str = "# t tx ty tz qx qy qz qw  (body pose in world; t is the first-row time of the frame)";

fn io_err(path: &Path, source: std::io::Error) -> IoError {
    IoError::Io { path: path.display().to_string(), source }
}

fn read(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn write(path: &Path, text: &str) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Non-comment, non-blank lines with their 1-based line numbers.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_fields(path: &Path, line: usize, text: &str, sep: Option<char>, n: usize) -> Result<Vec<f64>, IoError> {
    let fields: Vec<&str> = match sep {
        Some(c) => text.split(c).map(str::trim).collect(),
        None => text.split_whitespace().collect(),
    };
    let err = |msg: String| IoError::Parse { path: path.display().to_string(), line, msg };
    if fields.len() != n {
        return Err(err(format!("expected {n} fields, found {}", fields.len())));
    }
    fields
        .iter()
        .map(|f| f.parse::<f64>().map_err(|_| err(format!("cannot parse {f:?} as a number"))))
        .collect()
}

fn check_increasing(path: &Path, line: usize, prev: Option<f64>, t: f64) -> Result<(), IoError> {
    match prev {
        Some(p) if !(t > p) => Err(IoError::NotMonotone { path: path.display().to_string(), line, prev: p, t }),
        _ => Ok(()),
    }
}

pub fn format_imu(samples: &[ImuSample]) -> String {
    let mut s = String::from("# t, gx, gy, gz, ax, ay, az\n");
    for m in samples {
        let (g, a) = (m.gyro, m.accel);
        let _ = writeln!(s, "{:.9}, {}, {}, {}, {}, {}, {}", m.t, g.x, g.y, g.z, a.x, a.y, a.z);
    }
    s
}

pub fn parse_imu(path: &Path, text: &str) -> Result<Vec<ImuSample>, IoError> {
    let mut out: Vec<ImuSample> = Vec::new();
    for (line, l) in data_lines(text) {
        let v = parse_fields(path, line, l, Some(','), 7)?;
        check_increasing(path, line, out.last().map(|s| s.t), v[0])?;
        out.push(ImuSample::new(v[0], Vector3::new(v[1], v[2], v[3]), Vector3::new(v[4], v[5], v[6])));
    }
    Ok(out)
}

pub fn format_tracks(frames: &[Frame]) -> String {
    let mut s = String::from("# frame_t, feature_id, u, v\n");
    for f in frames {
        for (id, px) in &f.observations {
            let _ = writeln!(s, "{:.9}, {}, {}, {}", f.t, id, px.x, px.y);
        }
    }
    s
}

/// Rows are grouped into frames by timestamp. Frame times must increase
/// and feature ids must be unique within a frame.
pub fn parse_tracks(path: &Path, text: &str) -> Result<Vec<Frame>, IoError> {
    let mut frames: Vec<Frame> = Vec::new();
    for (line, l) in data_lines(text) {
        let v = parse_fields(path, line, l, Some(','), 4)?;
        let (t, id) = (v[0], v[1]);
        if !(id >= 0.0 && id.fract() == 0.0) {
            return Err(IoError::Parse { path: path.display().to_string(), line, msg: format!("bad feature id {id}") });
        }
        let obs = (id as u64, Vector2::new(v[2], v[3]));
        match frames.last_mut() {
            Some(f) if f.t == t => {
                if f.observations.iter().any(|o| o.0 == obs.0) {
                    return Err(IoError::Parse {
                        path: path.display().to_string(),
                        line,
                        msg: format!("feature {} appears twice in frame {t:.9}", obs.0),
                    });
                }
                f.observations.push(obs);
            }
            last => {
                check_increasing(path, line, last.map(|f| f.t), t)?;
                frames.push(Frame { t, observations: vec![obs] });
            }
        }
    }
    for f in &mut frames {
        f.observations.sort_by_key(|o| o.0);
    }
    Ok(frames)
}

/// Quaternion of `rot` that survives a read and a second write unchanged.
///
/// Converting a parsed quaternion back to a matrix and again to a quaternion
/// can move the last bit. Iterating that map from `rot` ends in a fixed
/// point or a short cycle; the smallest member of that cycle is written, and
/// reading it back lands in the same cycle.
fn stable_quaternion(rot: &nalgebra::Matrix3<f64>) -> [f64; 4] {
    let lex = |a: &[f64; 4], b: &[f64; 4]| a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal);
    let mut seen = vec![lie::to_quaternion(rot)];
    for _ in 0..4096 {
        let next = lie::to_quaternion(&lie::from_quaternion(*seen.last().unwrap()));
        if let Some(k) = seen.iter().position(|q| *q == next) {
            return seen[k..].iter().copied().min_by(lex).unwrap();
        }
        seen.push(next);
    }
    seen[0]
}

pub fn format_trajectory(poses: &[StampedPose]) -> Result<String, IoError> {
    let mut s = String::from(TRAJECTORY_HEADER);
    s.push('\n');
    for (i, p) in poses.iter().enumerate() {
        if i > 0 && !(p.t > poses[i - 1].t) {
            return Err(IoError::NotMonotone { path: "<trajectory>".into(), line: i + 1, prev: poses[i - 1].t, t: p.t });
        }
        let q = stable_quaternion(&p.rot);
        let _ = writeln!(s, "{:.9} {} {} {} {} {} {} {}", p.t, p.pos.x, p.pos.y, p.pos.z, q[0], q[1], q[2], q[3]);
    }
    Ok(s)
}

pub fn parse_trajectory(path: &Path, text: &str) -> Result<Vec<StampedPose>, IoError> {
    let mut out: Vec<StampedPose> = Vec::new();
    for (line, l) in data_lines(text) {
        let v = parse_fields(path, line, l, None, 8)?;
        check_increasing(path, line, out.last().map(|p| p.t), v[0])?;
        out.push(StampedPose { t: v[0], rot: lie::from_quaternion([v[4], v[5], v[6], v[7]]), pos: Vector3::new(v[1], v[2], v[3]) });
    }
    Ok(out)
}

/// The `x` whose `x * 1e6` is exactly `us`, when it exists, so that a
/// written trace reads back to the same seconds.
fn seconds_from_us(us: f64) -> f64 {
    let x = us * 1e-6;
    let near = [x, x.next_up(), x.next_down(), x.next_up().next_up(), x.next_down().next_down()];
    near.into_iter().find(|c| c * 1e6 == us).unwrap_or(x)
}

/// Line delay samples are `(t, seconds)` in memory and microseconds on disk.
pub fn format_trace(trace: &[(f64, f64)]) -> String {
    let mut s = String::from("# t, line_delay_us\n");
    for (t, tr) in trace {
        let _ = writeln!(s, "{:.9}, {}", t, tr * 1e6);
    }
    s
}

pub fn parse_trace(path: &Path, text: &str) -> Result<Vec<(f64, f64)>, IoError> {
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (line, l) in data_lines(text) {
        let v = parse_fields(path, line, l, Some(','), 2)?;
        check_increasing(path, line, out.last().map(|p| p.0), v[0])?;
        out.push((v[0], seconds_from_us(v[1])));
    }
    Ok(out)
}

pub const REPORTS_HEADER: &str = "t,keyframe,frames,span_first,span_last,span_line_delay_us,visual_factors,imu_factors,prior_dim,iterations,accepted_steps,initial_cost,final_cost,termination";

pub fn format_reports(reports: &[WindowReport]) -> String {
    let mut s = String::from(REPORTS_HEADER);
    s.push('\n');
    for r in reports {
        let _ = writeln!(
            s,
            "{:.9},{},{},{},{},{},{},{},{},{},{},{},{},{:?}",
            r.t,
            u8::from(r.keyframe),
            r.frames,
            r.span.first,
            r.span.last,
            r.span_line_delay * 1e6,
            r.visual_factors,
            r.imu_factors,
            r.prior_dim,
            r.solve.iterations,
            r.solve.accepted_steps,
            r.solve.initial_cost,
            r.solve.final_cost,
            r.solve.termination,
        );
    }
    s
}

pub fn write_trajectory(path: &Path, poses: &[StampedPose]) -> Result<(), IoError> {
    write(path, &format_trajectory(poses)?)
}

pub fn read_trajectory(path: &Path) -> Result<Vec<StampedPose>, IoError> {
    parse_trajectory(path, &read(path)?)
}

pub fn write_trace(path: &Path, trace: &[(f64, f64)]) -> Result<(), IoError> {
    write(path, &format_trace(trace))
}

pub fn read_trace(path: &Path) -> Result<Vec<(f64, f64)>, IoError> {
    parse_trace(path, &read(path)?)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    write(path, text)
}

/// File locations of a dataset directory.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPaths {
    pub meta: PathBuf,
    pub imu: PathBuf,
    pub tracks: PathBuf,
    pub ground_truth: PathBuf,
}

impl DatasetPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            meta: dir.join(META_FILE),
            imu: dir.join(IMU_FILE),
            tracks: dir.join(TRACKS_FILE),
            ground_truth: dir.join(GROUND_TRUTH_FILE),
        }
    }
}

pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<(), IoError> {
    let p = DatasetPaths::in_dir(dir);
    let meta = toml::to_string(&data.meta).map_err(|e| IoError::Config(e.to_string()))?;
    write(&p.meta, &meta)?;
    write(&p.imu, &format_imu(&data.imu))?;
    write(&p.tracks, &format_tracks(&data.frames))?;
    if let Some(gt) = &data.ground_truth {
        write_trajectory(&p.ground_truth, gt)?;
    }
    Ok(())
}

/// Loads a dataset directory; the ground-truth file is optional.
pub fn load_dataset(dir: &Path) -> Result<Dataset, IoError> {
    let p = DatasetPaths::in_dir(dir);
    let meta: DatasetMeta = toml::from_str(&read(&p.meta)?).map_err(|e| IoError::Config(format!("{}: {e}", p.meta.display())))?;
    meta.intrinsics.validate().map_err(|e| IoError::Config(e.to_string()))?;
    let imu = parse_imu(&p.imu, &read(&p.imu)?)?;
    let frames = parse_tracks(&p.tracks, &read(&p.tracks)?)?;
    let ground_truth = if p.ground_truth.exists() { Some(read_trajectory(&p.ground_truth)?) } else { None };
    Ok(Dataset { meta, imu, frames, ground_truth })
}
