//! Epoch controller and frame pipeline.
//!
//! The controller alternates between FUSION (buffering a window of frames
//! and building a template from them) and CORRECTION (registering the
//! template onto each frame and correcting it). It returns to FUSION when a
//! frame yields fewer good feature matches than the switch threshold.
//!
//! A run is split into three stages joined by bounded FIFO channels: frame
//! decoding, registration (which owns the controller), and warp/combine/
//! median. Template construction runs on a separate thread. A template built
//! from a window ending at frame `e` becomes active at frame
//! `e + 1 + template_latency_frames` in every execution mode, so pipelined
//! and sequential runs produce identical images.

use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::bounded;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correction::{apply_correction, left_fill, CorrectionConfig, CorrectionError};
use crate::fusion::{build_template_timed, FusionConfig, FusionError, FusionTiming, InpaintMethod, Template};
use crate::geometry::{Affine2, Intrinsics, Rigid3};
use crate::image::{DepthImage, GrayImage};
use crate::io::{self, DatasetError, RgbdFrame, SequenceManifest};
use crate::metrics::{self, psnr_serde, MetricError};
use crate::odometry::{MotionSource, OdometryConfig};
use crate::registration::{prepare_image, register_prepared, MatchSet, PreparedImage, RegistrationConfig};
use crate::synth::inject_blob_holes;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Correction(#[from] CorrectionError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error("output sink failed: {0}")]
    Sink(String),
    #[error("pipeline stage failed: {0}")]
    StageFailed(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Fusion,
    Correction,
}

/// Where the fusion stage takes inter-frame motion from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionMode {
    #[default]
    Estimate,
    /// Poses recorded in the sequence; errors if there are none.
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub fusion: FusionConfig,
    pub registration: RegistrationConfig,
    pub correction: CorrectionConfig,
    pub odometry: OdometryConfig,
    /// Switch back to fusion when a frame has fewer good matches than this.
    pub good_match_switch_threshold: usize,
    pub stage_queue_capacity: usize,
    pub pipelined: bool,
    /// Frames between the end of a fusion window and template activation.
    pub template_latency_frames: usize,
    /// Re-fuse every `k` frames instead of on match loss.
    pub force_refusion_every: Option<usize>,
    pub motion: MotionMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            fusion: FusionConfig::default(),
            registration: RegistrationConfig::default(),
            correction: CorrectionConfig::default(),
            odometry: OdometryConfig::default(),
            good_match_switch_threshold: 5,
            stage_queue_capacity: 2,
            pipelined: true,
            template_latency_frames: 2,
            force_refusion_every: None,
            motion: MotionMode::Estimate,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.fusion.validate()?;
        self.correction.validate()?;
        self.registration
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        self.odometry
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.good_match_switch_threshold == 0 {
            return Err(PipelineError::Config("good_match_switch_threshold must be >= 1".into()));
        }
        if self.stage_queue_capacity == 0 {
            return Err(PipelineError::Config("stage_queue_capacity must be >= 1".into()));
        }
        if self.force_refusion_every == Some(0) {
            return Err(PipelineError::Config("force_refusion_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// Anything frames can be read from.
pub trait FrameSource: Sync {
    fn frame_count(&self) -> usize;
    fn intrinsics(&self) -> Intrinsics<f64>;
    fn read_frame(&self, index: usize) -> Result<RgbdFrame, PipelineError>;
    fn ground_truth(&self, index: usize) -> Result<Option<DepthImage>, PipelineError>;
    fn hole_mask(&self, index: usize) -> Result<Option<GrayImage>, PipelineError>;
    fn poses(&self) -> Option<&[Rigid3<f64>]>;
    fn has_ground_truth(&self) -> bool;
}

impl FrameSource for SequenceManifest {
    fn frame_count(&self) -> usize {
        SequenceManifest::frame_count(self)
    }
    fn intrinsics(&self) -> Intrinsics<f64> {
        self.intrinsics
    }
    fn read_frame(&self, index: usize) -> Result<RgbdFrame, PipelineError> {
        Ok(io::read_frame(self, index)?)
    }
    fn ground_truth(&self, index: usize) -> Result<Option<DepthImage>, PipelineError> {
        Ok(io::read_ground_truth(self, index)?)
    }
    fn hole_mask(&self, index: usize) -> Result<Option<GrayImage>, PipelineError> {
        Ok(io::read_hole_mask(self, index)?)
    }
    fn poses(&self) -> Option<&[Rigid3<f64>]> {
        self.poses.as_deref()
    }
    fn has_ground_truth(&self) -> bool {
        self.has_ground_truth
    }
}

/// A fully decoded sequence held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct MemorySequence {
    pub intrinsics: Intrinsics<f64>,
    pub frames: Vec<RgbdFrame>,
    /// Empty, or one per frame.
    pub ground_truth: Vec<DepthImage>,
    /// Empty, or one per frame.
    pub hole_masks: Vec<GrayImage>,
    pub poses: Option<Vec<Rigid3<f64>>>,
}

impl MemorySequence {
    pub fn from_synth(spec: &crate::synth::SceneSpec, frames: Vec<crate::synth::SynthFrame>) -> Self {
        let mut out = Self {
            intrinsics: spec.intrinsics,
            frames: Vec::with_capacity(frames.len()),
            ground_truth: Vec::with_capacity(frames.len()),
            hole_masks: Vec::with_capacity(frames.len()),
            poses: Some(spec.trajectory.clone()),
        };
        for (i, f) in frames.into_iter().enumerate() {
            out.frames.push(RgbdFrame {
                index: i,
                color: f.color,
                depth: f.depth,
                timestamp_ms: i as f64 * io::DEFAULT_FRAME_INTERVAL_MS,
            });
            out.ground_truth.push(f.gt);
            out.hole_masks.push(f.hole_mask);
        }
        out
    }

    fn check(&self, index: usize) -> Result<(), PipelineError> {
        if index >= self.frames.len() {
            return Err(DatasetError::IndexOutOfRange {
                index,
                count: self.frames.len(),
            }
            .into());
        }
        Ok(())
    }
}

impl FrameSource for MemorySequence {
    fn frame_count(&self) -> usize {
        self.frames.len()
    }
    fn intrinsics(&self) -> Intrinsics<f64> {
        self.intrinsics
    }
    fn read_frame(&self, index: usize) -> Result<RgbdFrame, PipelineError> {
        self.check(index)?;
        Ok(self.frames[index].clone())
    }
    fn ground_truth(&self, index: usize) -> Result<Option<DepthImage>, PipelineError> {
        self.check(index)?;
        Ok(self.ground_truth.get(index).cloned())
    }
    fn hole_mask(&self, index: usize) -> Result<Option<GrayImage>, PipelineError> {
        self.check(index)?;
        Ok(self.hole_masks.get(index).cloned())
    }
    fn poses(&self) -> Option<&[Rigid3<f64>]> {
        self.poses.as_deref()
    }
    fn has_ground_truth(&self) -> bool {
        !self.frames.is_empty() && self.ground_truth.len() == self.frames.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SwitchReason {
    LowGoodMatches { good_count: usize },
    Forced { every: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchEvent {
    pub frame: usize,
    /// Epoch started by this switch.
    pub epoch: u64,
    pub reason: SwitchReason,
}

/// A template with its registration features, shared by reference.
#[derive(Debug)]
pub struct ActiveTemplate {
    pub template: Template,
    pub features: Option<PreparedImage>,
}

enum FusionJob {
    Done(Box<Result<(ActiveTemplate, FusionTiming), PipelineError>>),
    Running(JoinHandle<Result<(ActiveTemplate, FusionTiming), PipelineError>>),
}

struct PendingTemplate {
    activate_at: usize,
    job: FusionJob,
}

/// Controller state. `mode == Correction` implies an active template.
pub struct EpochState {
    pub mode: Mode,
    pub epoch_id: u64,
    pub active_template: Option<Arc<ActiveTemplate>>,
    pub pending_window: Vec<RgbdFrame>,
    pub switch_log: Vec<SwitchEvent>,
    epoch_start: usize,
    pending: Option<PendingTemplate>,
}

impl Default for EpochState {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for EpochState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EpochState")
            .field("mode", &self.mode)
            .field("epoch_id", &self.epoch_id)
            .field("has_template", &self.active_template.is_some())
            .field("pending_window", &self.pending_window.len())
            .field("switch_log", &self.switch_log)
            .finish()
    }
}

/// Everything a controller step needs besides its state.
#[derive(Clone)]
pub struct StepContext {
    pub cfg: Arc<PipelineConfig>,
    pub intrinsics: Intrinsics<f64>,
    pub poses: Option<Arc<Vec<Rigid3<f64>>>>,
}

impl StepContext {
    pub fn new(cfg: PipelineConfig, intrinsics: Intrinsics<f64>, poses: Option<Vec<Rigid3<f64>>>) -> Self {
        Self {
            cfg: Arc::new(cfg),
            intrinsics,
            poses: poses.map(Arc::new),
        }
    }

    fn for_source(cfg: &PipelineConfig, source: &dyn FrameSource) -> Self {
        Self::new(cfg.clone(), source.intrinsics(), source.poses().map(<[_]>::to_vec))
    }
}

/// What stage 3 needs to finish one frame.
#[derive(Debug)]
pub struct FramePlan {
    pub frame: RgbdFrame,
    pub correction: Option<(Arc<ActiveTemplate>, Affine2<f64>)>,
    pub good_count: Option<usize>,
    pub mode: Mode,
    pub epoch_id: u64,
    pub transform_time: Duration,
    /// Timing of the template that became active at this frame.
    pub fusion_timing: Option<FusionTiming>,
}

impl FramePlan {
    /// No template was applied; the frame passes through unchanged.
    pub fn raw(&self) -> bool {
        self.correction.is_none()
    }
}

fn fuse(
    frames: Vec<RgbdFrame>,
    ctx: StepContext,
    epoch_id: u64,
) -> Result<(ActiveTemplate, FusionTiming), PipelineError> {
    let cfg = &ctx.cfg;
    let motion = match cfg.motion {
        MotionMode::Estimate => MotionSource::Estimate(&cfg.odometry),
        MotionMode::GroundTruth => MotionSource::GroundTruth(
            ctx.poses
                .as_deref()
                .ok_or_else(|| PipelineError::Config("motion = ground_truth but the sequence has no poses".into()))?,
        ),
    };
    let mut fusion = cfg.fusion.clone();
    fusion.window = frames.len();
    let (template, timing) = build_template_timed(&frames, &ctx.intrinsics, &fusion, &motion, epoch_id)?;
    let features = prepare_image(&template.reference, &cfg.registration).ok();
    Ok((ActiveTemplate { template, features }, timing))
}

impl EpochState {
    pub fn new() -> Self {
        Self {
            mode: Mode::Fusion,
            epoch_id: 0,
            active_template: None,
            pending_window: Vec::new(),
            switch_log: Vec::new(),
            epoch_start: 0,
            pending: None,
        }
    }

    /// Switch decision for one observed match count ("below" semantics).
    pub fn should_switch(good_count: usize, threshold: usize) -> bool {
        good_count < threshold
    }

    fn start_epoch(&mut self, frame: usize, reason: SwitchReason) {
        self.mode = Mode::Fusion;
        self.epoch_id += 1;
        self.epoch_start = frame;
        self.pending_window.clear();
        self.pending = None;
        self.switch_log.push(SwitchEvent {
            frame,
            epoch: self.epoch_id,
            reason,
        });
    }

    /// Applies the transition rules for a frame whose registration against
    /// the active template produced `good_count` good matches.
    pub fn observe(&mut self, frame: usize, good_count: usize, cfg: &PipelineConfig) {
        if self.mode != Mode::Correction {
            return;
        }
        match cfg.force_refusion_every {
            Some(every) => {
                if frame - self.epoch_start >= every {
                    self.start_epoch(frame, SwitchReason::Forced { every });
                }
            }
            None => {
                if Self::should_switch(good_count, cfg.good_match_switch_threshold) {
                    self.start_epoch(frame, SwitchReason::LowGoodMatches { good_count });
                }
            }
        }
    }

    fn activate_due(&mut self, index: usize) -> Result<Option<FusionTiming>, PipelineError> {
        if !self.pending.as_ref().is_some_and(|p| index >= p.activate_at) {
            return Ok(None);
        }
        let pending = self.pending.take().unwrap();
        let result = match pending.job {
            FusionJob::Done(r) => *r,
            FusionJob::Running(handle) => handle
                .join()
                .map_err(|_| PipelineError::StageFailed("fusion thread panicked".into()))?,
        };
        let (active, timing) = result?;
        self.active_template = Some(Arc::new(active));
        self.mode = Mode::Correction;
        Ok(Some(timing))
    }

    /// Stage-2 work for one frame: activates a due template, registers the
    /// active template, applies transitions, and buffers fusion frames.
    pub fn plan(&mut self, frame: RgbdFrame, ctx: &StepContext, background: bool) -> Result<FramePlan, PipelineError> {
        let cfg = &ctx.cfg;
        let fusion_timing = self.activate_due(frame.index)?;
        let start = Instant::now();
        let registered = self.active_template.as_ref().map(|active| {
            let result = match (&active.features, prepare_image(&frame.color, &cfg.registration)) {
                (Some(t), Ok(f)) => register_prepared(t, &f, &cfg.registration),
                _ => (Affine2::identity(), MatchSet::default()),
            };
            (Arc::clone(active), result)
        });
        let transform_time = start.elapsed();
        let good_count = registered.as_ref().map(|(_, (_, m))| m.good_count);
        let correction = registered.and_then(|(active, (m, matches))| {
            (matches.good_count >= cfg.good_match_switch_threshold).then_some((active, m))
        });
        let (mode, epoch_id) = (self.mode, self.epoch_id);
        if let Some(g) = good_count {
            self.observe(frame.index, g, cfg);
        }

        let window = cfg.fusion.window;
        if self.mode == Mode::Fusion && self.pending.is_none() && self.pending_window.len() < window {
            self.pending_window.push(frame.clone());
            if self.pending_window.len() == window {
                let frames = std::mem::take(&mut self.pending_window);
                let activate_at = frame.index + 1 + cfg.template_latency_frames;
                let (job_ctx, epoch) = (ctx.clone(), self.epoch_id);
                let job = if background {
                    FusionJob::Running(std::thread::spawn(move || fuse(frames, job_ctx, epoch)))
                } else {
                    FusionJob::Done(Box::new(fuse(frames, job_ctx, epoch)))
                };
                self.pending = Some(PendingTemplate { activate_at, job });
            }
        }
        Ok(FramePlan {
            frame,
            correction,
            good_count,
            mode,
            epoch_id,
            transform_time,
            fusion_timing,
        })
    }
}

/// Stage-3 work: warp, combine and median filter, or pass a raw frame on.
pub fn finish(plan: &FramePlan, cfg: &CorrectionConfig) -> Result<DepthImage, PipelineError> {
    match &plan.correction {
        Some((active, m)) => Ok(apply_correction(&plan.frame.depth, &active.template.image, m, cfg)?),
        None => Ok(plan.frame.depth.clone()),
    }
}

/// One synchronous controller step: returns the output frame and the
/// updated state.
pub fn step(mut state: EpochState, frame: RgbdFrame, ctx: &StepContext) -> Result<(DepthImage, EpochState), PipelineError> {
    let plan = state.plan(frame, ctx, false)?;
    let out = finish(&plan, &ctx.cfg.correction)?;
    Ok((out, state))
}

/// Per-frame row of a run report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: usize,
    /// No template was applied to this frame.
    pub raw: bool,
    pub mode: Mode,
    pub epoch: u64,
    pub good_count: Option<usize>,
    /// NaN without ground truth.
    #[serde(with = "psnr_serde")]
    pub psnr_db: f64,
    pub masked_rmse: Option<f64>,
    /// Pixels selected by the hole mask.
    pub mask_pixels: usize,
    pub hole_ratio: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub samples: usize,
    pub mean_ms: f64,
    pub p95_ms: f64,
}

impl StageStats {
    pub fn from_durations(d: &[Duration]) -> Self {
        if d.is_empty() {
            return Self::default();
        }
        let mut ms: Vec<f64> = d.iter().map(|d| d.as_secs_f64() * 1e3).collect();
        ms.sort_by(f64::total_cmp);
        let rank = ((0.95 * ms.len() as f64).ceil() as usize).clamp(1, ms.len());
        Self {
            samples: ms.len(),
            mean_ms: ms.iter().sum::<f64>() / ms.len() as f64,
            p95_ms: ms[rank - 1],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub read: StageStats,
    /// Registration: feature extraction, matching and the affine fit.
    pub transform: StageStats,
    /// Warp, combine and median filter (or the baseline's per-frame work).
    pub combine: StageStats,
    /// Window fusion and reprojection, per template.
    pub fusion: StageStats,
    /// Template inpainting, per template.
    pub inpainting: StageStats,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    Voxdepth,
    Leftfill,
    BilinearTemplate,
    None,
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "voxdepth" => Ok(Method::Voxdepth),
            "leftfill" => Ok(Method::Leftfill),
            "bilinear-template" => Ok(Method::BilinearTemplate),
            "none" => Ok(Method::None),
            other => Err(format!("unknown method `{other}`")),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Voxdepth => "voxdepth",
            Method::Leftfill => "leftfill",
            Method::BilinearTemplate => "bilinear-template",
            Method::None => "none",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub pipelined: bool,
    pub frames: usize,
    pub wall_time_ms: f64,
    pub throughput_fps: f64,
    pub timings: StageTimings,
    pub switches: usize,
    pub switch_log: Vec<SwitchEvent>,
    pub templates_built: usize,
    /// Mean over frames with ground truth; NaN without any.
    #[serde(with = "psnr_serde")]
    pub mean_psnr_db: f64,
    /// Pooled over every hole-mask pixel of the run.
    pub masked_rmse: Option<f64>,
    pub mean_hole_ratio: f64,
    pub records: Vec<FrameRecord>,
}

impl RunReport {
    /// Mean PSNR over frames with index `>= from`.
    pub fn mean_psnr_from(&self, from: usize) -> f64 {
        metrics::mean_psnr(self.records.iter().filter(|r| r.frame >= from).map(|r| r.psnr_db))
    }

    /// Masked RMSE pooled over the hole pixels of frames with index `>= from`.
    pub fn masked_rmse_from(&self, from: usize) -> Option<f64> {
        let (mut sum, mut n) = (0.0, 0usize);
        for r in self.records.iter().filter(|r| r.frame >= from) {
            if let Some(e) = r.masked_rmse {
                sum += e * e * r.mask_pixels as f64;
                n += r.mask_pixels;
            }
        }
        (n > 0).then(|| (sum / n as f64).sqrt())
    }
}

struct Loaded {
    frame: RgbdFrame,
    gt: Option<DepthImage>,
    mask: Option<GrayImage>,
    read_time: Duration,
}

fn load(source: &dyn FrameSource, index: usize) -> Result<Loaded, PipelineError> {
    let start = Instant::now();
    let frame = source.read_frame(index)?;
    let gt = source.ground_truth(index)?;
    let mask = source.hole_mask(index)?;
    Ok(Loaded {
        frame,
        gt,
        mask,
        read_time: start.elapsed(),
    })
}

/// Accumulates per-frame results in input order.
struct Collector<'s> {
    sink: &'s mut dyn FnMut(usize, &DepthImage) -> Result<(), PipelineError>,
    records: Vec<FrameRecord>,
    read: Vec<Duration>,
    transform: Vec<Duration>,
    combine: Vec<Duration>,
    fusion: Vec<Duration>,
    inpainting: Vec<Duration>,
    sq_err: f64,
    masked_px: usize,
}

impl<'s> Collector<'s> {
    fn new(sink: &'s mut dyn FnMut(usize, &DepthImage) -> Result<(), PipelineError>) -> Self {
        Self {
            sink,
            records: Vec::new(),
            read: Vec::new(),
            transform: Vec::new(),
            combine: Vec::new(),
            fusion: Vec::new(),
            inpainting: Vec::new(),
            sq_err: 0.0,
            masked_px: 0,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        out: &DepthImage,
        frame: usize,
        gt: Option<&DepthImage>,
        mask: Option<&GrayImage>,
        raw: bool,
        mode: Mode,
        epoch: u64,
        good_count: Option<usize>,
    ) -> Result<(), PipelineError> {
        if let Some(last) = self.records.last() {
            if frame <= last.frame {
                return Err(PipelineError::StageFailed(format!("frame {frame} emitted out of order")));
            }
        }
        let mut mask_pixels = 0;
        let (psnr_db, masked_rmse) = match gt {
            Some(gt) => {
                let p = metrics::psnr(out, gt)?;
                let m = match mask {
                    Some(mask) => {
                        let (sum, n) = metrics::masked_sq_error(out, gt, mask)?;
                        self.sq_err += sum;
                        self.masked_px += n;
                        mask_pixels = n;
                        (n > 0).then(|| (sum / n as f64).sqrt())
                    }
                    None => None,
                };
                (p, m)
            }
            None => (f64::NAN, None),
        };
        self.records.push(FrameRecord {
            frame,
            raw,
            mode,
            epoch,
            good_count,
            psnr_db,
            masked_rmse,
            mask_pixels,
            hole_ratio: metrics::hole_ratio(out),
        });
        (self.sink)(frame, out)
    }

    fn report(self, method: Method, pipelined: bool, wall: Duration, switch_log: Vec<SwitchEvent>) -> RunReport {
        let n = self.records.len();
        let with_gt: Vec<f64> = self
            .records
            .iter()
            .map(|r| r.psnr_db)
            .filter(|p| !p.is_nan())
            .collect();
        RunReport {
            method,
            pipelined,
            frames: n,
            wall_time_ms: wall.as_secs_f64() * 1e3,
            throughput_fps: if wall.is_zero() { 0.0 } else { n as f64 / wall.as_secs_f64() },
            timings: StageTimings {
                read: StageStats::from_durations(&self.read),
                transform: StageStats::from_durations(&self.transform),
                combine: StageStats::from_durations(&self.combine),
                fusion: StageStats::from_durations(&self.fusion),
                inpainting: StageStats::from_durations(&self.inpainting),
            },
            switches: switch_log.len(),
            templates_built: self.fusion.len(),
            switch_log,
            mean_psnr_db: if with_gt.is_empty() { f64::NAN } else { metrics::mean_psnr(with_gt) },
            masked_rmse: (self.masked_px > 0).then(|| (self.sq_err / self.masked_px as f64).sqrt()),
            mean_hole_ratio: if n == 0 {
                0.0
            } else {
                self.records.iter().map(|r| r.hole_ratio).sum::<f64>() / n as f64
            },
            records: self.records,
        }
    }
}

struct Stage2Item {
    plan: FramePlan,
    gt: Option<DepthImage>,
    mask: Option<GrayImage>,
    read_time: Duration,
}

fn finish_item(item: Stage2Item, cfg: &PipelineConfig, out: &mut Collector) -> Result<(), PipelineError> {
    let start = Instant::now();
    let img = finish(&item.plan, &cfg.correction)?;
    out.combine.push(start.elapsed());
    out.read.push(item.read_time);
    out.transform.push(item.plan.transform_time);
    if let Some(t) = item.plan.fusion_timing {
        out.fusion.push(t.fusion);
        out.inpainting.push(t.inpainting);
    }
    let p = &item.plan;
    out.push(
        &img,
        p.frame.index,
        item.gt.as_ref(),
        item.mask.as_ref(),
        p.raw(),
        p.mode,
        p.epoch_id,
        p.good_count,
    )
}

fn run_voxdepth(
    source: &dyn FrameSource,
    cfg: &PipelineConfig,
    out: &mut Collector,
) -> Result<Vec<SwitchEvent>, PipelineError> {
    let ctx = StepContext::for_source(cfg, source);
    let n = source.frame_count();
    let mut state = EpochState::new();
    if !cfg.pipelined {
        for i in 0..n {
            let l = load(source, i)?;
            let plan = state.plan(l.frame, &ctx, false)?;
            let item = Stage2Item {
                plan,
                gt: l.gt,
                mask: l.mask,
                read_time: l.read_time,
            };
            finish_item(item, cfg, out)?;
        }
        return Ok(state.switch_log);
    }

    let cap = cfg.stage_queue_capacity;
    std::thread::scope(|scope| {
        let (tx1, rx1) = bounded::<Result<Loaded, PipelineError>>(cap);
        let (tx2, rx2) = bounded::<Result<Stage2Item, PipelineError>>(cap);
        scope.spawn(move || {
            for i in 0..n {
                let r = load(source, i);
                let failed = r.is_err();
                if tx1.send(r).is_err() || failed {
                    break;
                }
            }
        });
        let stage2 = scope.spawn(move || {
            for r in rx1 {
                let item = r.and_then(|l| {
                    state.plan(l.frame, &ctx, true).map(|plan| Stage2Item {
                        plan,
                        gt: l.gt,
                        mask: l.mask,
                        read_time: l.read_time,
                    })
                });
                let failed = item.is_err();
                if tx2.send(item).is_err() || failed {
                    break;
                }
            }
            state.switch_log
        });
        let mut first_error = None;
        for r in rx2.iter() {
            if let Err(e) = r.and_then(|item| finish_item(item, cfg, out)) {
                first_error = Some(e);
                break;
            }
        }
        drop(rx2);
        let log = stage2
            .join()
            .map_err(|_| PipelineError::StageFailed("registration stage panicked".into()))?;
        match first_error {
            Some(e) => Err(e),
            None => Ok(log),
        }
    })
}

fn run_baseline(
    source: &dyn FrameSource,
    method: Method,
    out: &mut Collector,
) -> Result<(), PipelineError> {
    for i in 0..source.frame_count() {
        let l = load(source, i)?;
        let start = Instant::now();
        let img = match method {
            Method::Leftfill => left_fill(&l.frame.depth),
            _ => l.frame.depth.clone(),
        };
        out.combine.push(start.elapsed());
        out.read.push(l.read_time);
        out.push(&img, i, l.gt.as_ref(), l.mask.as_ref(), true, Mode::Fusion, 0, None)?;
    }
    Ok(())
}

/// Runs `method` over every frame of `source`, handing each output image to
/// `sink` in input order.
pub fn run_method(
    source: &dyn FrameSource,
    cfg: &PipelineConfig,
    method: Method,
    sink: &mut dyn FnMut(usize, &DepthImage) -> Result<(), PipelineError>,
) -> Result<RunReport, PipelineError> {
    cfg.validate()?;
    let start = Instant::now();
    let mut out = Collector::new(sink);
    let switch_log = match method {
        Method::Voxdepth | Method::BilinearTemplate => {
            let mut cfg = cfg.clone();
            if method == Method::BilinearTemplate {
                cfg.fusion.inpaint_method = InpaintMethod::Bilinear;
            }
            run_voxdepth(source, &cfg, &mut out)?
        }
        Method::Leftfill | Method::None => {
            run_baseline(source, method, &mut out)?;
            Vec::new()
        }
    };
    let pipelined = cfg.pipelined && matches!(method, Method::Voxdepth | Method::BilinearTemplate);
    Ok(out.report(method, pipelined, start.elapsed(), switch_log))
}

/// Runs the full method and keeps only the report.
pub fn run_sequence(source: &dyn FrameSource, cfg: &PipelineConfig) -> Result<RunReport, PipelineError> {
    run_method(source, cfg, Method::Voxdepth, &mut |_, _| Ok(()))
}

/// Runs the full method, collecting every output image.
pub fn run_collect(
    source: &dyn FrameSource,
    cfg: &PipelineConfig,
    method: Method,
) -> Result<(RunReport, Vec<DepthImage>), PipelineError> {
    let mut images = Vec::with_capacity(source.frame_count());
    let report = run_method(source, cfg, method, &mut |_, img| {
        images.push(img.clone());
        Ok(())
    })?;
    Ok((report, images))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Swept parameter; `None` stands for "never" in the frequency sweep.
    pub value: Option<usize>,
    #[serde(with = "psnr_serde")]
    pub mean_psnr_db: f64,
    pub switches: usize,
}

fn require_gt(source: &dyn FrameSource) -> Result<(), PipelineError> {
    if source.has_ground_truth() {
        Ok(())
    } else {
        Err(MetricError::RequiresGroundTruth.into())
    }
}

/// Mean corrected PSNR when fusion is forced every `k` frames (`None`:
/// once). Frames before the first template can exist are excluded.
pub fn sweep_fusion_frequency(
    source: &dyn FrameSource,
    cfg: &PipelineConfig,
    frequencies: &[Option<usize>],
) -> Result<Vec<SweepRow>, PipelineError> {
    require_gt(source)?;
    let from = cfg.fusion.window + cfg.template_latency_frames;
    frequencies
        .iter()
        .map(|&k| {
            let mut c = cfg.clone();
            c.pipelined = false;
            c.force_refusion_every = Some(k.unwrap_or(usize::MAX));
            let r = run_sequence(source, &c)?;
            Ok(SweepRow {
                value: k,
                mean_psnr_db: r.mean_psnr_from(from),
                switches: r.switches,
            })
        })
        .collect()
}

/// Mean corrected PSNR per fusion window size, over the frames after the
/// largest window's first template can exist.
pub fn sweep_init_window(
    source: &dyn FrameSource,
    cfg: &PipelineConfig,
    sizes: &[usize],
) -> Result<Vec<SweepRow>, PipelineError> {
    require_gt(source)?;
    let from = sizes.iter().copied().max().unwrap_or(0) + cfg.template_latency_frames;
    sizes
        .iter()
        .map(|&n| {
            let mut c = cfg.clone();
            c.pipelined = false;
            c.fusion.window = n;
            let r = run_sequence(source, &c)?;
            Ok(SweepRow {
                value: Some(n),
                mean_psnr_db: r.mean_psnr_from(from),
                switches: r.switches,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResizeRow {
    pub work_size: usize,
    #[serde(with = "psnr_serde")]
    pub mean_psnr_db: f64,
    pub mean_good_count: f64,
    pub transform_mean_ms: f64,
}

/// Registration working-size trade-off: quality and transform latency.
pub fn sweep_work_size(
    source: &dyn FrameSource,
    cfg: &PipelineConfig,
    sizes: &[usize],
) -> Result<Vec<ResizeRow>, PipelineError> {
    require_gt(source)?;
    sizes
        .iter()
        .map(|&s| {
            let mut c = cfg.clone();
            c.pipelined = false;
            c.registration.work_size = s;
            let r = run_sequence(source, &c)?;
            let goods: Vec<f64> = r.records.iter().filter_map(|x| x.good_count).map(|g| g as f64).collect();
            Ok(ResizeRow {
                work_size: s,
                mean_psnr_db: r.mean_psnr_db,
                mean_good_count: if goods.is_empty() {
                    0.0
                } else {
                    goods.iter().sum::<f64>() / goods.len() as f64
                },
                transform_mean_ms: r.timings.transform.mean_ms,
            })
        })
        .collect()
}

/// Raw PSNR against hole fraction: each ground-truth frame is re-holed
/// with blob holes at every fraction, then bucketed by observed ratio.
pub fn sweep_hole_fraction(
    source: &dyn FrameSource,
    fractions: &[f64],
    seed: u64,
    bucket_width: f64,
) -> Result<Vec<metrics::HoleBucket>, PipelineError> {
    require_gt(source)?;
    let mut pairs = Vec::new();
    for i in 0..source.frame_count() {
        let gt = source.ground_truth(i)?.ok_or(MetricError::RequiresGroundTruth)?;
        for (k, &f) in fractions.iter().enumerate() {
            let (raw, _) = inject_blob_holes(&gt, f, seed, (i * fractions.len() + k) as u64);
            pairs.push((raw, gt.clone()));
        }
    }
    Ok(metrics::hole_psnr_curve(
        pairs.iter().map(|(r, g)| (r, Some(g))),
        bucket_width,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synthesize, NoiseSpec, Primitive, SceneCut, SceneSpec};

    fn scene(frames: usize, step: f64) -> SceneSpec {
        SceneSpec {
            primitives: vec![
                Primitive::Box {
                    center: [-0.25, 0.05, 1.4],
                    size: [0.35, 0.4, 0.3],
                    texture: 1,
                },
                Primitive::Sphere {
                    center: [0.3, -0.05, 1.8],
                    radius: 0.22,
                    texture: 2,
                },
            ],
            background_depth: 3.0,
            trajectory: (0..frames)
                .map(|i| Rigid3::from_translation(step * i as f64, 0.0, 0.0))
                .collect(),
            width: 160,
            height: 120,
            intrinsics: Intrinsics::new(130.0, 130.0, 79.5, 59.5).with_baseline(0.05),
            seed: 21,
            cut: None,
        }
    }

    fn source(spec: &SceneSpec, noise: &NoiseSpec) -> MemorySequence {
        MemorySequence::from_synth(spec, synthesize(spec, noise).unwrap())
    }

    fn small_cfg() -> PipelineConfig {
        let mut c = PipelineConfig::default();
        c.fusion.window = 3;
        c.registration.work_size = 120;
        c.template_latency_frames = 1;
        c
    }

    #[test]
    fn threshold_is_strictly_below() {
        assert!(!EpochState::should_switch(5, 5));
        assert!(EpochState::should_switch(4, 5));
        let cfg = PipelineConfig::default();
        let mut s = EpochState::new();
        s.mode = Mode::Correction;
        s.observe(10, 5, &cfg);
        assert_eq!(s.mode, Mode::Correction);
        assert!(s.switch_log.is_empty());
        s.observe(11, 4, &cfg);
        assert_eq!(s.mode, Mode::Fusion);
        assert_eq!(
            s.switch_log,
            vec![SwitchEvent {
                frame: 11,
                epoch: 1,
                reason: SwitchReason::LowGoodMatches { good_count: 4 }
            }]
        );
    }

    #[test]
    fn static_scene_never_switches() {
        let spec = scene(20, 0.0);
        let src = source(&spec, &NoiseSpec::default());
        let r = run_sequence(&src, &PipelineConfig { pipelined: false, ..small_cfg() }).unwrap();
        assert_eq!(r.frames, 20);
        assert_eq!(r.switches, 0);
        assert_eq!(r.templates_built, 1);
        assert!(r.records[..4].iter().all(|x| x.raw));
        assert!(r.records[4..].iter().all(|x| !x.raw && x.mode == Mode::Correction));
    }

    #[test]
    fn scene_cut_triggers_switch() {
        let mut spec = scene(16, 0.0);
        spec.cut = Some(SceneCut {
            at_frame: 9,
            primitives: vec![Primitive::Box {
                center: [0.1, 0.0, 1.0],
                size: [0.5, 0.5, 0.5],
                texture: 4,
            }],
            background_depth: 2.2,
            texture_seed: 99,
        });
        let src = source(&spec, &NoiseSpec::default());
        let r = run_sequence(&src, &PipelineConfig { pipelined: false, ..small_cfg() }).unwrap();
        let first = r.switch_log.first().expect("a switch after the cut");
        assert!((9..=11).contains(&first.frame), "{:?}", r.switch_log);
    }

    #[test]
    fn pipelined_matches_sequential() {
        let spec = scene(14, 0.01);
        let src = source(&spec, &NoiseSpec::default());
        let seq = run_collect(&src, &PipelineConfig { pipelined: false, ..small_cfg() }, Method::Voxdepth).unwrap();
        for cap in [1, 3] {
            let cfg = PipelineConfig {
                pipelined: true,
                stage_queue_capacity: cap,
                ..small_cfg()
            };
            let pip = run_collect(&src, &cfg, Method::Voxdepth).unwrap();
            assert_eq!(pip.1, seq.1);
            assert_eq!(pip.0.switch_log, seq.0.switch_log);
            let order: Vec<usize> = pip.0.records.iter().map(|r| r.frame).collect();
            assert_eq!(order, (0..14).collect::<Vec<_>>());
        }
    }

    #[test]
    fn single_frame_sequence() {
        let spec = scene(1, 0.0);
        let src = source(&spec, &NoiseSpec::default());
        let r = run_sequence(&src, &small_cfg()).unwrap();
        assert_eq!(r.frames, 1);
        assert_eq!(r.switches, 0);
    }

    #[test]
    fn none_method_is_identity() {
        let spec = scene(3, 0.01);
        let src = source(&spec, &NoiseSpec::default());
        let (_, imgs) = run_collect(&src, &small_cfg(), Method::None).unwrap();
        for (i, img) in imgs.iter().enumerate() {
            assert_eq!(*img, src.frames[i].depth);
        }
    }

    #[test]
    fn step_matches_plan_and_finish() {
        let spec = scene(6, 0.0);
        let src = source(&spec, &NoiseSpec::default());
        let ctx = StepContext::new(small_cfg(), spec.intrinsics, None);
        let mut state = EpochState::new();
        let mut outs = Vec::new();
        for f in &src.frames {
            let (o, s) = step(state, f.clone(), &ctx).unwrap();
            state = s;
            outs.push(o);
        }
        let (_, imgs) = run_collect(&src, &PipelineConfig { pipelined: false, ..small_cfg() }, Method::Voxdepth).unwrap();
        assert_eq!(outs, imgs);
        assert_eq!(state.mode, Mode::Correction);
        assert!(state.active_template.is_some());
    }

    #[test]
    fn hole_fraction_sweep_decreases() {
        let spec = scene(2, 0.0);
        let src = source(&spec, &NoiseSpec::clean());
        let curve = sweep_hole_fraction(&src, &[0.05, 0.1, 0.15, 0.2], 5, 0.05).unwrap();
        assert_eq!(curve.len(), 4);
        assert!(curve.windows(2).all(|w| w[1].mean_psnr_db < w[0].mean_psnr_db));
    }

    #[test]
    fn sweeps_need_ground_truth() {
        let spec = scene(3, 0.0);
        let mut src = source(&spec, &NoiseSpec::default());
        src.ground_truth.clear();
        assert!(matches!(
            sweep_init_window(&src, &small_cfg(), &[1, 2]),
            Err(PipelineError::Metric(MetricError::RequiresGroundTruth))
        ));
    }
}
