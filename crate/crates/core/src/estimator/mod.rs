//! Keyframe sliding-window estimator over a continuous-time spline.
//!
//! Every solve rebuilds a [`Problem`] from the window state. Blocks are keyed
//! by [`ParamKey`] with global control-point indices and frame ids, which is
//! what lets a marginalization prior from an earlier window bind to the
//! blocks of a later one.

mod config;
mod init;
mod triangulation;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::dataset::{Dataset, Frame, StampedPose};
use crate::error::EstimatorError;
use crate::factors::{
    preintegrate_interval, BiasFactor, ImuFactor, ImuWeights, Landmark, PixelObservation, PreintFactor, PriorFactor,
    VisualFactor,
};
use crate::optimizer::{
    marginalize_schur, solve, BlockId, BlockKind, Factor, ParamKey, Problem, SolveReport, SolverOptions,
};
use crate::sensors::{BiasPair, ImuSample, PinholeIntrinsics};
use crate::spline::{ControlPointSpan, RigidTransform, Trajectory};

pub use config::{EstimatorConfig, InitMode, MargStrategy};
pub use init::{constant_spline, oracle_fit, static_prefix_init, StaticInit};
pub use triangulation::{max_parallax_deg, triangulate_dlt, triangulate_inverse_depth, TriangulationFailure};

/// The last control point is free only once an IMU sample reaches this far
/// into its first segment.
const TAIL_U_MIN: f64 = 0.1;

/// A frame held in the window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowFrame {
    pub id: u64,
    pub t: f64,
    pub observations: BTreeMap<u64, Vector2<f64>>,
    pub keyframe: bool,
    /// Biases shared by the IMU samples from this frame to the next.
    pub bias: BiasPair,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandmarkState {
    /// Id of the keyframe the landmark is anchored in.
    pub anchor_frame: u64,
    /// `None` until triangulated.
    pub inverse_depth: Option<f64>,
}

/// Bookkeeping of one window optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowReport {
    pub t: f64,
    pub keyframe: bool,
    pub frames: usize,
    /// Control points that were free in the solve.
    pub span: ControlPointSpan,
    /// Line delay the span was computed with.
    pub span_line_delay: f64,
    pub visual_factors: usize,
    pub imu_factors: usize,
    pub prior_dim: usize,
    pub solve: SolveReport,
}

/// A marginalization sub-problem: the factors touching the oldest keyframe's
/// states and the blocks to eliminate.
pub struct MargSubproblem {
    pub problem: Problem,
    pub marg: Vec<BlockId>,
    /// Control points eliminated.
    pub marg_control_points: Vec<usize>,
}

/// Keyframe test: a frame is a keyframe when its mean parallax to the last
/// keyframe is strictly above `parallax_threshold`, or when fewer than
/// `min_tracks` of its features continue from the previous frame.
pub fn keyframe_decision(
    obs: &BTreeMap<u64, Vector2<f64>>,
    previous: Option<&BTreeMap<u64, Vector2<f64>>>,
    last_keyframe: Option<&BTreeMap<u64, Vector2<f64>>>,
    parallax_threshold: f64,
    min_tracks: usize,
) -> bool {
    let (Some(prev), Some(kf)) = (previous, last_keyframe) else {
        return true;
    };
    let tracked = obs.keys().filter(|id| prev.contains_key(id)).count();
    if tracked < min_tracks {
        return true;
    }
    let shifts: Vec<f64> = obs.iter().filter_map(|(id, px)| kf.get(id).map(|q| (px - q).norm())).collect();
    if shifts.is_empty() {
        return true;
    }
    shifts.iter().sum::<f64>() / shifts.len() as f64 > parallax_threshold
}

pub struct Estimator {
    config: EstimatorConfig,
    strategy: MargStrategy,
    solver: SolverOptions,
    intr: PinholeIntrinsics,
    extrinsic: RigidTransform,
    gravity: Vector3<f64>,
    imu: Vec<ImuSample>,
    pending: VecDeque<Frame>,
    last_frame_time: Option<f64>,
    traj: Option<Trajectory>,
    frames: Vec<WindowFrame>,
    landmarks: BTreeMap<u64, LandmarkState>,
    prior: Option<Arc<PriorFactor>>,
    line_delay: f64,
    next_frame_id: u64,
    oracle: Option<Vec<StampedPose>>,
    trace: Vec<(f64, f64)>,
    poses: Vec<StampedPose>,
    reports: Vec<WindowReport>,
}

impl Estimator {
    pub fn new(
        config: EstimatorConfig,
        solver: SolverOptions,
        intr: PinholeIntrinsics,
        extrinsic: RigidTransform,
    ) -> Result<Self, EstimatorError> {
        config.validate()?;
        Ok(Self {
            strategy: config.strategy()?,
            gravity: Vector3::from(config.gravity),
            line_delay: config.line_delay_init_us * 1e-6,
            config,
            solver,
            intr,
            extrinsic,
            imu: Vec::new(),
            pending: VecDeque::new(),
            last_frame_time: None,
            traj: None,
            frames: Vec::new(),
            landmarks: BTreeMap::new(),
            prior: None,
            next_frame_id: 0,
            oracle: None,
            trace: Vec::new(),
            poses: Vec::new(),
            reports: Vec::new(),
        })
    }

    /// Ground truth for oracle initialization.
    pub fn set_oracle(&mut self, truth: Vec<StampedPose>) {
        self.oracle = Some(truth);
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    pub fn trajectory(&self) -> Option<&Trajectory> {
        self.traj.as_ref()
    }

    pub fn line_delay(&self) -> f64 {
        self.line_delay
    }

    /// `(t, line delay)` after every window optimization; empty when the
    /// line delay is not estimated.
    pub fn calibration_trace(&self) -> &[(f64, f64)] {
        &self.trace
    }

    /// Pose of every keyframe at its first-row time, as estimated in the
    /// solve where it was the newest frame.
    pub fn keyframe_poses(&self) -> &[StampedPose] {
        &self.poses
    }

    pub fn reports(&self) -> &[WindowReport] {
        &self.reports
    }

    pub fn window(&self) -> &[WindowFrame] {
        &self.frames
    }

    pub fn landmarks(&self) -> &BTreeMap<u64, LandmarkState> {
        &self.landmarks
    }

    pub fn prior(&self) -> Option<&Arc<PriorFactor>> {
        self.prior.as_ref()
    }

    pub fn pending_frames(&self) -> usize {
        self.pending.len()
    }

    /// Readout time of a full frame at the current line delay.
    fn readout(&self) -> f64 {
        self.intr.height * self.line_delay
    }

    pub fn process_imu(&mut self, sample: ImuSample) -> Result<(), EstimatorError> {
        if let Some(prev) = self.imu.last() {
            if !(sample.t > prev.t) {
                return Err(EstimatorError::OutOfOrderImu { t: sample.t, prev: prev.t });
            }
        }
        self.imu.push(sample);
        Ok(())
    }

    /// Queues a frame and processes every queued frame whose IMU coverage
    /// is complete. Returns the keyframe poses emitted.
    pub fn process_frame(&mut self, frame: Frame) -> Result<Vec<StampedPose>, EstimatorError> {
        if let Some(prev) = self.last_frame_time {
            if !(frame.t > prev) {
                return Err(EstimatorError::OutOfOrderFrame { t: frame.t, prev });
            }
        }
        self.last_frame_time = Some(frame.t);
        self.pending.push_back(frame);
        self.process_ready()
    }

    /// Processes queued frames whose IMU data has arrived since.
    pub fn process_ready(&mut self) -> Result<Vec<StampedPose>, EstimatorError> {
        let mut out = Vec::new();
        while let Some(f) = self.pending.front() {
            if !self.has_imu_for(f.t) {
                break;
            }
            let f = self.pending.pop_front().unwrap();
            if let Some(p) = self.handle_frame(f)? {
                out.push(p);
            }
        }
        Ok(out)
    }

    fn has_imu_for(&self, t: f64) -> bool {
        let Some(last) = self.imu.last() else {
            return false;
        };
        let mut need = t + self.readout();
        if self.traj.is_none() {
            need = match self.config.init_mode {
                InitMode::Oracle => need.max(t + self.config.oracle_fit_duration),
                InitMode::Coarse => need.max(self.imu[0].t + self.config.min_static_duration),
            };
        }
        self.imu[0].t <= t && last.t >= need
    }

    fn handle_frame(&mut self, frame: Frame) -> Result<Option<StampedPose>, EstimatorError> {
        let first = self.traj.is_none();
        if first {
            self.initialize(frame.t)?;
        }
        let t_end = frame.t + self.readout();
        let prev_bias = self.frames.last().map(|f| f.bias).unwrap_or(self.initial_bias());
        {
            let traj = self.traj.as_mut().unwrap();
            traj.extend_with_prediction(t_end, &self.imu, &prev_bias, &self.gravity)?;
        }

        let obs = self.select_features(&frame);
        let keyframe = keyframe_decision(
            &obs,
            self.frames.last().map(|f| &f.observations),
            self.frames.iter().rev().find(|f| f.keyframe).map(|f| &f.observations),
            self.config.keyframe_parallax,
            self.config.min_tracks,
        );
        let id = self.next_frame_id;
        self.next_frame_id += 1;
        if keyframe {
            for lid in obs.keys() {
                self.landmarks.entry(*lid).or_insert(LandmarkState { anchor_frame: id, inverse_depth: None });
            }
        }
        self.frames.push(WindowFrame { id, t: frame.t, observations: obs, keyframe, bias: prev_bias });
        if first {
            self.prior = Some(Arc::new(self.initial_prior()?));
        }

        self.triangulate_new();
        let report = self.optimize()?;
        if self.config.estimate_line_delay {
            self.trace.push((frame.t, self.line_delay));
        }
        let pose = keyframe.then(|| {
            let (rot, pos) = self.traj.as_ref().unwrap().eval_pose(frame.t).expect("frame inside the spline domain");
            StampedPose { t: frame.t, rot, pos }
        });
        if let Some(p) = pose {
            self.poses.push(p);
        }
        self.reports.push(report);
        if self.frames.len() >= self.config.window_size {
            self.slide_and_marginalize()?;
        }
        Ok(pose)
    }

    fn initial_bias(&self) -> BiasPair {
        BiasPair::new(Vector3::from(self.config.initial_gyro_bias), Vector3::from(self.config.initial_accel_bias))
    }

    fn initialize(&mut self, t0: f64) -> Result<(), EstimatorError> {
        let dt = self.config.knot_interval;
        let traj = match self.config.init_mode {
            InitMode::Oracle => {
                let truth = self
                    .oracle
                    .as_ref()
                    .ok_or_else(|| EstimatorError::Initialization("oracle mode needs ground truth".into()))?;
                let t_end = t0 + self.config.oracle_fit_duration.max(self.readout());
                oracle_fit(
                    truth,
                    &self.imu,
                    t0,
                    t_end,
                    dt,
                    self.extrinsic,
                    &self.initial_bias(),
                    &self.config.imu_noise,
                    &self.gravity,
                    (self.config.oracle_rotation_sigma, self.config.oracle_position_sigma),
                    self.config.seed,
                )?
            }
            InitMode::Coarse => {
                let s = static_prefix_init(
                    &self.imu,
                    &self.gravity,
                    self.config.static_gyro_threshold,
                    self.config.static_accel_threshold,
                    self.config.min_static_duration,
                )?;
                if t0 > s.static_end {
                    return Err(EstimatorError::Initialization(format!(
                        "first frame at {t0:.9} is after the static prefix ending at {:.9}",
                        s.static_end
                    )));
                }
                self.config.initial_gyro_bias = s.gyro_bias.into();
                constant_spline(t0, dt, t0 + self.readout(), s.rotation, Vector3::zeros(), self.extrinsic)?
            }
        };
        self.traj = Some(traj);
        Ok(())
    }

    /// Prior fixing the gauge: the first segment's control points and the
    /// first biases at their initial values.
    fn initial_prior(&self) -> Result<PriorFactor, EstimatorError> {
        let traj = self.traj.as_ref().unwrap();
        let frame = &self.frames[0];
        let (seg, _) = traj.locate(frame.t)?;
        let mut keys = Vec::new();
        let mut kinds = Vec::new();
        let mut x0 = Vec::new();
        let mut weights = Vec::new();
        for k in seg..seg + 4 {
            let cp = traj.control_point(k);
            keys.extend([ParamKey::RotCp(k), ParamKey::PosCp(k)]);
            kinds.extend([BlockKind::RotationCp, BlockKind::PositionCp]);
            x0.push(cp.rot.as_slice().to_vec());
            x0.push(cp.pos.as_slice().to_vec());
            weights.extend([1.0 / self.config.prior_rotation_sigma; 3]);
            weights.extend([1.0 / self.config.prior_position_sigma; 3]);
        }
        keys.extend([ParamKey::BiasGyro(frame.id), ParamKey::BiasAccel(frame.id)]);
        kinds.extend([BlockKind::BiasGyro, BlockKind::BiasAccel]);
        x0.push(frame.bias.gyro.as_slice().to_vec());
        x0.push(frame.bias.accel.as_slice().to_vec());
        weights.extend([1.0 / self.config.prior_gyro_bias_sigma; 3]);
        weights.extend([1.0 / self.config.prior_accel_bias_sigma; 3]);
        let n = weights.len();
        Ok(PriorFactor {
            keys,
            kinds,
            x0,
            sqrt_info: nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_vec(weights)),
            offset: nalgebra::DVector::zeros(n),
        })
    }

    /// Keeps continuing tracks first, then new features by id, up to the budget.
    fn select_features(&self, frame: &Frame) -> BTreeMap<u64, Vector2<f64>> {
        let prev = self.frames.last().map(|f| &f.observations);
        let inside: Vec<&(u64, Vector2<f64>)> = frame.observations.iter().filter(|(_, px)| self.intr.contains(px)).collect();
        let (mut cont, fresh): (Vec<_>, Vec<_>) = inside.into_iter().partition(|(id, _)| prev.is_some_and(|p| p.contains_key(id)));
        cont.extend(fresh);
        cont.into_iter().take(self.config.max_features).map(|&(id, px)| (id, px)).collect()
    }

    fn frame_index(&self, id: u64) -> Option<usize> {
        self.frames.iter().position(|f| f.id == id)
    }

    /// Observations of a landmark in window keyframes, anchor first.
    fn keyframe_observations(&self, lid: u64, lm: &LandmarkState) -> Vec<(f64, Vector2<f64>)> {
        let Some(a) = self.frame_index(lm.anchor_frame) else {
            return Vec::new();
        };
        let mut out = vec![(self.frames[a].t, self.frames[a].observations[&lid])];
        for (i, f) in self.frames.iter().enumerate() {
            if i != a && f.keyframe {
                if let Some(px) = f.observations.get(&lid) {
                    out.push((f.t, *px));
                }
            }
        }
        out
    }

    fn triangulate_new(&mut self) {
        let traj = self.traj.as_ref().unwrap();
        let mut updates = Vec::new();
        for (&lid, lm) in &self.landmarks {
            if lm.inverse_depth.is_some() {
                continue;
            }
            let obs = self.keyframe_observations(lid, lm);
            if obs.len() < 2 {
                continue;
            }
            if let Ok(lambda) = triangulate_inverse_depth(
                traj,
                &self.intr,
                self.line_delay,
                &obs,
                self.config.min_parallax_deg,
                (self.config.min_depth, self.config.max_depth),
            ) {
                updates.push((lid, lambda));
            }
        }
        for (lid, lambda) in updates {
            self.landmarks.get_mut(&lid).unwrap().inverse_depth = Some(lambda);
        }
    }

    /// Control points free in the current window: the support of
    /// `[t_oldest, t_newest + H t_r]`.
    pub fn window_span(&self) -> Result<ControlPointSpan, EstimatorError> {
        let traj = self.traj.as_ref().ok_or_else(|| EstimatorError::Contract("not initialized".into()))?;
        let (first, last) = match (self.frames.first(), self.frames.last()) {
            (Some(a), Some(b)) => (a.t, b.t + self.readout()),
            _ => return Err(EstimatorError::Contract("empty window".into())),
        };
        Ok(traj.active_span(first, last)?)
    }

    /// Registers control points, biases, line delay and the inverse depths
    /// of triangulated landmarks anchored in the window.
    fn add_state_blocks(&self, problem: &mut Problem, span: &ControlPointSpan) {
        let traj = self.traj.as_ref().unwrap();
        let mut cps: Vec<usize> = span.indices().collect();
        if let Some(prior) = &self.prior {
            for key in &prior.keys {
                if let ParamKey::RotCp(k) | ParamKey::PosCp(k) = key {
                    cps.push(*k);
                }
            }
        }
        cps.sort_unstable();
        cps.dedup();
        for k in cps {
            let cp = traj.control_point(k);
            problem.add_block(ParamKey::RotCp(k), BlockKind::RotationCp, cp.rot.as_slice().to_vec());
            problem.add_block(ParamKey::PosCp(k), BlockKind::PositionCp, cp.pos.as_slice().to_vec());
        }
        for f in &self.frames {
            problem.add_block(ParamKey::BiasGyro(f.id), BlockKind::BiasGyro, f.bias.gyro.as_slice().to_vec());
            problem.add_block(ParamKey::BiasAccel(f.id), BlockKind::BiasAccel, f.bias.accel.as_slice().to_vec());
        }
        let tr = problem.add_block(ParamKey::LineDelay, BlockKind::LineDelay, vec![self.line_delay]);
        problem.set_constant(tr, !self.config.estimate_line_delay);
        for (&lid, lm) in &self.landmarks {
            if let (Some(lambda), Some(_)) = (lm.inverse_depth, self.frame_index(lm.anchor_frame)) {
                problem.add_block(ParamKey::InvDepth(lid), BlockKind::InverseDepth, vec![lambda]);
            }
        }
    }

    /// Visual factors of triangulated landmarks; `keep(anchor_id, obs_id)`
    /// selects which pairs. Factors that cannot be evaluated at the current
    /// values (a point behind a camera) are left out.
    fn visual_factors(&self, problem: &Problem, keep: impl Fn(u64, u64) -> bool) -> Vec<Box<dyn Factor>> {
        let traj = self.traj.as_ref().unwrap();
        let huber = (self.config.huber_threshold > 0.0).then_some(self.config.huber_threshold);
        let mut out: Vec<Box<dyn Factor>> = Vec::new();
        for (&lid, lm) in &self.landmarks {
            let (Some(lambda), Some(a)) = (lm.inverse_depth, self.frame_index(lm.anchor_frame)) else {
                continue;
            };
            let anchor = PixelObservation::new(self.frames[a].t, self.frames[a].observations[&lid]);
            let landmark = Landmark { id: lid, anchor, inverse_depth: lambda };
            for f in &self.frames {
                if f.id == lm.anchor_frame || !keep(lm.anchor_frame, f.id) {
                    continue;
                }
                let Some(px) = f.observations.get(&lid) else {
                    continue;
                };
                let obs = PixelObservation::new(f.t, *px);
                let Ok(factor) = VisualFactor::new(
                    problem,
                    traj.grid(),
                    &self.intr,
                    &self.extrinsic,
                    &landmark,
                    &obs,
                    self.line_delay,
                    self.config.pixel_sigma,
                    huber,
                ) else {
                    continue;
                };
                let params: Vec<&[f64]> = factor.blocks().iter().map(|&b| problem.value(b)).collect();
                if factor.evaluate(&params, None).is_ok_and(|r| r.iter().all(|v| v.is_finite())) {
                    out.push(Box::new(factor));
                }
            }
        }
        out
    }

    /// Index of the window frame whose bias covers time `t`.
    fn bias_frame(&self, t: f64) -> usize {
        self.frames.partition_point(|f| f.t <= t).saturating_sub(1)
    }

    fn imu_factors(&self, problem: &Problem, from: f64, to: f64, include_end: bool) -> Result<Vec<Box<dyn Factor>>, EstimatorError> {
        let traj = self.traj.as_ref().unwrap();
        let weights = ImuWeights::from_noise(&self.config.imu_noise);
        let lo = self.imu.partition_point(|s| s.t < from);
        let mut out: Vec<Box<dyn Factor>> = Vec::new();
        for s in &self.imu[lo..] {
            if s.t > to || (!include_end && s.t >= to) {
                break;
            }
            let bias_id = self.frames[self.bias_frame(s.t)].id;
            out.push(Box::new(ImuFactor::new(problem, traj.grid(), s, bias_id, &self.gravity, weights)?));
        }
        Ok(out)
    }

    fn bias_factors(&self, problem: &Problem, pairs: std::ops::Range<usize>) -> Result<Vec<Box<dyn Factor>>, EstimatorError> {
        let mut out: Vec<Box<dyn Factor>> = Vec::new();
        for k in pairs {
            let (a, b) = (&self.frames[k], &self.frames[k + 1]);
            out.push(Box::new(BiasFactor::new(problem, a.id, b.id, b.t - a.t, &self.config.imu_noise)?));
        }
        Ok(out)
    }

    fn add_prior(&self, problem: &mut Problem) -> Result<usize, EstimatorError> {
        match &self.prior {
            Some(p) if !p.is_empty() => {
                let dim = p.dim();
                problem.add_factor(Box::new(p.bind(problem)?))?;
                Ok(dim)
            }
            _ => Ok(0),
        }
    }

    /// Builds the full window cost at the current state.
    fn window_problem(&self) -> Result<(Problem, ControlPointSpan, usize, usize, usize), EstimatorError> {
        let span = self.window_span()?;
        let mut problem = Problem::new();
        self.add_state_blocks(&mut problem, &span);
        let visual = self.visual_factors(&problem, |_, _| true);
        let t_s = self.frames[0].t;
        let t_end = self.frames.last().unwrap().t + self.readout();
        let imu = self.imu_factors(&problem, t_s, t_end, true)?;
        let bias = self.bias_factors(&problem, 0..self.frames.len() - 1)?;
        let (nv, ni) = (visual.len(), imu.len());
        for f in visual.into_iter().chain(imu).chain(bias) {
            problem.add_factor(f)?;
        }
        let prior_dim = self.add_prior(&mut problem)?;
        freeze_untouched_depths(&mut problem);
        self.hold_unobservable_tail(&mut problem, &span, t_end)?;
        Ok((problem, span, nv, ni, prior_dim))
    }

    /// The last control point of the span enters its first segment with
    /// weight `u^3/6` in pose, `u^2 / 2dt` in angular rate and `u / dt^2` in
    /// acceleration. Until an IMU sample lands far enough into that segment
    /// it is close to unobservable and a damped step can move it arbitrarily,
    /// so it is held at its predicted value.
    fn hold_unobservable_tail(&self, problem: &mut Problem, span: &ControlPointSpan, t_end: f64) -> Result<(), EstimatorError> {
        let traj = self.traj.as_ref().unwrap();
        let last_seg = span.last + 1 - crate::spline::ORDER;
        let observed = match self.imu[..self.imu.partition_point(|s| s.t <= t_end)].last() {
            Some(s) => matches!(traj.locate(s.t), Ok((seg, u)) if seg == last_seg && u >= TAIL_U_MIN),
            None => false,
        };
        if !observed {
            for key in [ParamKey::RotCp(span.last), ParamKey::PosCp(span.last)] {
                if let Some(b) = problem.block_id(&key) {
                    problem.set_constant(b, true);
                }
            }
        }
        Ok(())
    }

    /// Cost of the current window split by factor name, at the current state.
    pub fn window_cost(&self) -> Result<BTreeMap<&'static str, f64>, EstimatorError> {
        let (problem, ..) = self.window_problem()?;
        Ok(problem.cost_by_factor()?)
    }

    fn optimize(&mut self) -> Result<WindowReport, EstimatorError> {
        let span_line_delay = self.line_delay;
        let (mut problem, span, visual_factors, imu_factors, prior_dim) = self.window_problem()?;
        let solve = solve(&mut problem, &self.solver)?;
        self.write_back(&problem);
        // a larger line delay pushes the newest frame's last row further out
        let newest = self.frames.last().unwrap();
        let t_end = newest.t + self.readout();
        self.traj.as_mut().unwrap().extend_with_prediction(t_end, &self.imu, &newest.bias, &self.gravity)?;
        Ok(WindowReport {
            t: newest.t,
            keyframe: newest.keyframe,
            frames: self.frames.len(),
            span,
            span_line_delay,
            visual_factors,
            imu_factors,
            prior_dim,
            solve,
        })
    }

    /// Copies solved values into the trajectory and window state.
    fn write_back(&mut self, problem: &Problem) {
        let traj = self.traj.as_mut().unwrap();
        for b in problem.blocks() {
            if b.constant {
                continue;
            }
            match b.key {
                ParamKey::RotCp(k) => traj.control_point_mut(k).rot = Matrix3::from_column_slice(&b.value),
                ParamKey::PosCp(k) => traj.control_point_mut(k).pos = Vector3::from_column_slice(&b.value),
                ParamKey::LineDelay => self.line_delay = b.value[0].max(0.0),
                _ => {}
            }
        }
        for f in &mut self.frames {
            if let (Some(g), Some(a)) = (problem.value_by_key(&ParamKey::BiasGyro(f.id)), problem.value_by_key(&ParamKey::BiasAccel(f.id))) {
                f.bias = BiasPair::new(Vector3::from_column_slice(g), Vector3::from_column_slice(a));
            }
        }
        let (lo, hi) = (1.0 / self.config.max_depth, 1.0 / self.config.min_depth);
        let held = self.prior_depths();
        for (lid, lm) in self.landmarks.iter_mut() {
            if let Some(v) = problem.value_by_key(&ParamKey::InvDepth(*lid)) {
                lm.inverse_depth = if held.contains(lid) {
                    Some(if v[0].is_finite() { v[0].clamp(lo, hi) } else { lo })
                } else {
                    (v[0].is_finite() && v[0] >= lo && v[0] <= hi).then_some(v[0])
                };
            }
        }
    }

    /// Sub-problem for marginalizing the oldest frame with the given strategy.
    pub fn marginalization_subproblem(&self, strategy: MargStrategy) -> Result<MargSubproblem, EstimatorError> {
        if self.frames.len() < 2 {
            return Err(EstimatorError::Contract("marginalization needs two frames in the window".into()));
        }
        let traj = self.traj.as_ref().unwrap();
        let (s, s1) = (&self.frames[0], &self.frames[1]);
        let span = self.window_span()?;
        let mut problem = Problem::new();
        self.add_state_blocks(&mut problem, &span);

        let oldest = s.id;
        let mut factors = self.visual_factors(&problem, |a, o| a == oldest || o == oldest);
        match strategy {
            MargStrategy::Preintegrated => {
                let pi = preintegrate_interval(&self.imu, s.t, s1.t, &s.bias, &self.config.imu_noise)?;
                factors.push(Box::new(PreintFactor::new(&problem, traj.grid(), pi, s.id, &self.gravity)?));
            }
            MargStrategy::RawImu => {
                let raw = self.imu_factors(&problem, s.t, s1.t, false)?;
                if raw.is_empty() {
                    return Err(EstimatorError::Contract(format!("no IMU samples in [{:.9}, {:.9})", s.t, s1.t)));
                }
                factors.extend(raw);
            }
        }
        factors.extend(self.bias_factors(&problem, 0..1)?);
        for f in factors {
            problem.add_factor(f)?;
        }
        self.add_prior(&mut problem)?;

        let (seg_next, _) = traj.locate(s1.t)?;
        let marg_control_points: Vec<usize> = span.indices().filter(|&k| k < seg_next).collect();
        let mut keys: Vec<ParamKey> = marg_control_points.iter().flat_map(|&k| [ParamKey::RotCp(k), ParamKey::PosCp(k)]).collect();
        keys.extend([ParamKey::BiasGyro(s.id), ParamKey::BiasAccel(s.id)]);
        keys.extend(self.landmarks.iter().filter(|(_, l)| l.anchor_frame == s.id).map(|(id, _)| ParamKey::InvDepth(*id)));
        let marg = keys.iter().filter_map(|k| problem.block_id(k)).collect();
        freeze_untouched_depths(&mut problem);
        Ok(MargSubproblem { problem, marg, marg_control_points })
    }

    /// Removes the second-latest frame's visual data; its control points,
    /// IMU samples and the prior are kept. Its IMU interval joins the
    /// previous frame's bias.
    pub fn drop_nonkeyframe(&mut self) -> Result<(), EstimatorError> {
        let n = self.frames.len();
        if n < 2 {
            return Err(EstimatorError::Contract("window has no second-latest frame".into()));
        }
        if self.frames[n - 2].keyframe {
            return Err(EstimatorError::Contract("second-latest frame is a keyframe".into()));
        }
        self.frames.remove(n - 2);
        self.revert_weak_landmarks();
        Ok(())
    }

    /// Marginalizes the oldest frame with the configured strategy.
    pub fn marginalize_oldest(&mut self) -> Result<(), EstimatorError> {
        let sub = self.marginalization_subproblem(self.strategy)?;
        let prior = marginalize_schur(&sub.problem, &sub.marg)?;
        self.prior = (!prior.is_empty()).then(|| Arc::new(prior));
        let old = self.frames.remove(0);
        let mut gone = Vec::new();
        for (&lid, lm) in self.landmarks.iter_mut() {
            if lm.anchor_frame != old.id {
                continue;
            }
            // a triangulated landmark's depth went into the prior; an
            // untriangulated one moves to its next keyframe
            let next = self.frames.iter().find(|f| f.keyframe && f.observations.contains_key(&lid));
            match (lm.inverse_depth, next) {
                (None, Some(f)) => lm.anchor_frame = f.id,
                _ => gone.push(lid),
            }
        }
        for lid in gone {
            self.landmarks.remove(&lid);
        }
        self.revert_weak_landmarks();
        Ok(())
    }

    /// Landmarks left with fewer than two observations lose their depth;
    /// landmarks whose anchor is gone are removed.
    /// Depths held by the prior are kept, since the prior still constrains them.
    fn revert_weak_landmarks(&mut self) {
        let held = self.prior_depths();
        let frames = &self.frames;
        self.landmarks.retain(|_, lm| frames.iter().any(|f| f.id == lm.anchor_frame));
        for (lid, lm) in self.landmarks.iter_mut() {
            let count = frames.iter().filter(|f| f.observations.contains_key(lid)).count();
            if count < 2 && !held.contains(lid) {
                lm.inverse_depth = None;
            }
        }
    }

    /// Landmarks whose inverse depth appears in the prior.
    fn prior_depths(&self) -> BTreeSet<u64> {
        let keys = self.prior.iter().flat_map(|p| p.keys.iter());
        keys.filter_map(|k| if let ParamKey::InvDepth(l) = k { Some(*l) } else { None }).collect()
    }

    pub fn slide_and_marginalize(&mut self) -> Result<(), EstimatorError> {
        let n = self.frames.len();
        if n >= 2 && !self.frames[n - 2].keyframe {
            self.drop_nonkeyframe()
        } else {
            self.marginalize_oldest()
        }
    }
}

/// Depth blocks without any factor carry no information; hold them fixed.
fn freeze_untouched_depths(problem: &mut Problem) {
    let mut touched = vec![false; problem.blocks().len()];
    for f in problem.factors() {
        for &b in f.blocks() {
            touched[b] = true;
        }
    }
    let idle: Vec<BlockId> = problem
        .blocks()
        .iter()
        .enumerate()
        .filter(|(i, b)| b.kind == BlockKind::InverseDepth && !touched[*i])
        .map(|(i, _)| i)
        .collect();
    for b in idle {
        problem.set_constant(b, true);
    }
}

/// Everything one run of the estimator produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub poses: Vec<StampedPose>,
    pub trace: Vec<(f64, f64)>,
    pub reports: Vec<WindowReport>,
    pub final_line_delay: f64,
    /// Frames never processed for lack of IMU coverage.
    pub unprocessed: usize,
    pub trajectory: Option<Trajectory>,
}

/// Runs the estimator over a dataset, feeding IMU samples up to each frame
/// before the frame. Ground truth, when present, serves oracle initialization.
pub fn run_dataset(data: &Dataset, config: &EstimatorConfig, solver: &SolverOptions) -> Result<RunOutput, EstimatorError> {
    let mut config = config.clone();
    config.imu_noise.rate = data.meta.imu_rate;
    let mut est = Estimator::new(config, *solver, data.meta.intrinsics, data.meta.extrinsic())?;
    if let Some(gt) = &data.ground_truth {
        est.set_oracle(gt.clone());
    }
    let mut next_imu = 0;
    for (i, frame) in data.frames.iter().enumerate() {
        let horizon = data.frames.get(i + 1).map_or(f64::INFINITY, |f| f.t);
        while next_imu < data.imu.len() && data.imu[next_imu].t < horizon {
            est.process_imu(data.imu[next_imu])?;
            next_imu += 1;
        }
        est.process_frame(frame.clone())?;
    }
    for s in &data.imu[next_imu..] {
        est.process_imu(*s)?;
    }
    est.process_ready()?;
    Ok(RunOutput {
        poses: est.keyframe_poses().to_vec(),
        trace: est.calibration_trace().to_vec(),
        reports: est.reports().to_vec(),
        final_line_delay: est.line_delay(),
        unprocessed: est.pending_frames(),
        trajectory: est.trajectory().cloned(),
    })
}
