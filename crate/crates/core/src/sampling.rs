//! Sparse head-tail frame sampling, media decoding and clip normalization.
//!
//! A video of `F` frames is cut into `n` equal contiguous segments. Each
//! segment of length `L` has a head region (its first `⌈ρ·L⌉` frames) and a
//! tail region (its last `⌈ρ·L⌉` frames). Training draws one frame per
//! segment uniformly from head ∪ tail; evaluation takes the first frame of
//! even segments and the last frame of odd ones.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{Array4, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const RAW_MAGIC: &[u8; 4] = b"MCGV";
pub const RAW_HEADER_LEN: usize = 16;

/// Frame rate for containers that do not record one.
const DEFAULT_FPS: (u32, u32) = (30, 1);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoMeta {
    pub frame_count: usize,
    /// Frames per second as `(numerator, denominator)`.
    pub frames_per_second: (u32, u32),
    pub source_id: String,
}

impl VideoMeta {
    pub fn new(source_id: impl Into<String>, frame_count: usize) -> Self {
        Self {
            frame_count,
            frames_per_second: DEFAULT_FPS,
            source_id: source_id.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameIndexPlan {
    pub indices: Vec<usize>,
    pub mode: SampleMode,
    /// Seed used for the draw; `None` for evaluation plans.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingConfig {
    /// Fraction `ρ` of each segment that forms its head (and its tail).
    pub head_tail_ratio: f64,
    pub allow_repeat: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            head_tail_ratio: 0.3,
            allow_repeat: false,
        }
    }
}

/// `[start, end)` bounds of segment `k` out of `n` over `frame_count` frames.
pub fn segment_bounds(frame_count: usize, n: usize, k: usize) -> (usize, usize) {
    (k * frame_count / n, (k + 1) * frame_count / n)
}

/// Frames of one segment that belong to its head or tail region, ascending.
pub fn head_tail_region(start: usize, end: usize, ratio: f64) -> Vec<usize> {
    let len = end - start;
    let edge = ((ratio * len as f64) - 1e-9).ceil().max(1.0) as usize;
    let edge = edge.min(len);
    let mut region: Vec<usize> = (start..start + edge).collect();
    region.extend((end - edge).max(start + edge)..end);
    region
}

pub fn head_tail_sample(
    meta: &VideoMeta,
    n: usize,
    mode: SampleMode,
    seed: u64,
    cfg: &SamplingConfig,
) -> Result<FrameIndexPlan> {
    if n < 2 {
        return Err(Error::Invalid(format!(
            "sample count must be at least 2, got {n}"
        )));
    }
    if meta.frame_count == 0 {
        return Err(Error::Invalid(format!(
            "video {} has no frames",
            meta.source_id
        )));
    }
    let seed_field = match mode {
        SampleMode::Train => Some(seed),
        SampleMode::Eval => None,
    };
    let frames = meta.frame_count;
    if frames < n {
        if !cfg.allow_repeat {
            return Err(Error::InsufficientFrames {
                source_id: meta.source_id.clone(),
                frame_count: frames,
                requested: n,
            });
        }
        let indices = (0..n).map(|k| k * frames / n).collect();
        return Ok(FrameIndexPlan {
            indices,
            mode,
            seed: seed_field,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices = (0..n)
        .map(|k| {
            let (start, end) = segment_bounds(frames, n, k);
            match mode {
                SampleMode::Eval if k % 2 == 0 => start,
                SampleMode::Eval => end - 1,
                SampleMode::Train => {
                    let region = head_tail_region(start, end, cfg.head_tail_ratio);
                    region[rng.random_range(0..region.len())]
                }
            }
        })
        .collect();
    Ok(FrameIndexPlan {
        indices,
        mode,
        seed: seed_field,
    })
}

/// Decoded frames `[n_frames × height × width × 3]` for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: Array4<u8>,
    pub plan: FrameIndexPlan,
}

impl VideoClip {
    pub fn n_frames(&self) -> usize {
        self.frames.dim().0
    }
}

/// Standardized frames `[n_frames × resolution × resolution × 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedClip {
    pub frames: Array4<f64>,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormalizedClip {
    pub fn n_frames(&self) -> usize {
        self.frames.dim().0
    }

    pub fn resolution(&self) -> usize {
        self.frames.dim().1
    }
}

/// A decodable video: a raw frame stack or a directory of still images.
#[derive(Debug, Clone)]
pub enum MediaSource {
    RawStack {
        source_id: String,
        frame_count: usize,
        height: usize,
        width: usize,
        data: Arc<Vec<u8>>,
    },
    ImageDir {
        source_id: String,
        frames: Vec<PathBuf>,
    },
}

impl MediaSource {
    /// Opens a raw `MCGV` stack file or a directory of images (lexicographic order).
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let source_id = path.display().to_string();
        if path.is_dir() {
            let mut frames: Vec<PathBuf> = fs::read_dir(path)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            frames.sort();
            if frames.is_empty() {
                return Err(Error::Decode {
                    source_id,
                    reason: "directory contains no frames".into(),
                });
            }
            return Ok(MediaSource::ImageDir { source_id, frames });
        }
        let bytes = fs::read(path).map_err(|e| Error::Decode {
            source_id: source_id.clone(),
            reason: e.to_string(),
        })?;
        Self::from_raw_bytes(source_id, bytes)
    }

    pub fn from_raw_bytes(source_id: impl Into<String>, bytes: Vec<u8>) -> Result<Self> {
        let source_id = source_id.into();
        let fail = |reason: &str| Error::Decode {
            source_id: source_id.clone(),
            reason: reason.into(),
        };
        if bytes.len() < RAW_HEADER_LEN || &bytes[..4] != RAW_MAGIC {
            return Err(fail("missing MCGV header"));
        }
        let field = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (frame_count, height, width) = (field(4), field(8), field(12));
        if frame_count == 0 || height == 0 || width == 0 {
            return Err(fail("empty frame stack"));
        }
        let expected = frame_count
            .checked_mul(height * width * 3)
            .and_then(|n| n.checked_add(RAW_HEADER_LEN));
        if expected != Some(bytes.len()) {
            return Err(fail("payload length does not match header"));
        }
        Ok(MediaSource::RawStack {
            source_id,
            frame_count,
            height,
            width,
            data: Arc::new(bytes),
        })
    }

    pub fn source_id(&self) -> &str {
        match self {
            MediaSource::RawStack { source_id, .. } | MediaSource::ImageDir { source_id, .. } => {
                source_id
            }
        }
    }

    pub fn meta(&self) -> VideoMeta {
        let frame_count = match self {
            MediaSource::RawStack { frame_count, .. } => *frame_count,
            MediaSource::ImageDir { frames, .. } => frames.len(),
        };
        VideoMeta::new(self.source_id(), frame_count)
    }
}

pub fn decode_frames(source: &MediaSource, plan: &FrameIndexPlan) -> Result<VideoClip> {
    let meta = source.meta();
    if let Some(&bad) = plan.indices.iter().find(|&&i| i >= meta.frame_count) {
        return Err(Error::PlanMismatch {
            source_id: meta.source_id,
            index: bad,
            frame_count: meta.frame_count,
        });
    }
    let n = plan.indices.len();
    let frames = match source {
        MediaSource::RawStack {
            height,
            width,
            data,
            ..
        } => {
            let frame_len = height * width * 3;
            let mut out = Vec::with_capacity(n * frame_len);
            for &i in &plan.indices {
                let start = RAW_HEADER_LEN + i * frame_len;
                out.extend_from_slice(&data[start..start + frame_len]);
            }
            Array4::from_shape_vec((n, *height, *width, 3), out).unwrap()
        }
        MediaSource::ImageDir { source_id, frames } => {
            let mut dims = None;
            let mut out = Vec::new();
            for &i in &plan.indices {
                let img = image::open(&frames[i])
                    .map_err(|e| Error::Decode {
                        source_id: source_id.clone(),
                        reason: format!("{}: {e}", frames[i].display()),
                    })?
                    .to_rgb8();
                let d = (img.height() as usize, img.width() as usize);
                if *dims.get_or_insert(d) != d {
                    return Err(Error::Decode {
                        source_id: source_id.clone(),
                        reason: "frames differ in size".into(),
                    });
                }
                out.extend_from_slice(img.as_raw());
            }
            let (h, w) = dims.unwrap();
            Array4::from_shape_vec((n, h, w, 3), out).unwrap()
        }
    };
    Ok(VideoClip {
        frames,
        plan: plan.clone(),
    })
}

/// Writes frames `[n × h × w × 3]` as a raw `MCGV` stack.
pub fn encode_raw_stack(frames: &Array4<u8>) -> Vec<u8> {
    let (n, h, w, _) = frames.dim();
    let mut bytes = Vec::with_capacity(RAW_HEADER_LEN + frames.len());
    bytes.extend_from_slice(RAW_MAGIC);
    for v in [n, h, w] {
        bytes.extend_from_slice(&(v as u32).to_le_bytes());
    }
    bytes.extend(frames.iter().copied());
    bytes
}

/// Bilinear resize of one `[h × w × 3]` frame with half-pixel centers and edge clamping.
pub fn resize_bilinear(
    frame: ArrayView3<'_, f64>,
    out_h: usize,
    out_w: usize,
) -> ndarray::Array3<f64> {
    let (in_h, in_w, ch) = frame.dim();
    let taps = |out: usize, input: usize| -> Vec<(usize, usize, f64)> {
        let scale = input as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(input - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let ys = taps(out_h, in_h);
    let xs = taps(out_w, in_w);
    ndarray::Array3::from_shape_fn((out_h, out_w, ch), |(y, x, c)| {
        let (y0, y1, wy) = ys[y];
        let (x0, x1, wx) = xs[x];
        let top = frame[[y0, x0, c]] * (1.0 - wx) + frame[[y0, x1, c]] * wx;
        let bottom = frame[[y1, x0, c]] * (1.0 - wx) + frame[[y1, x1, c]] * wx;
        top * (1.0 - wy) + bottom * wy
    })
}

/// Resizes every frame to `resolution²` and standardizes `(x/255 − mean) / std` per channel.
pub fn resize_normalize(
    clip: &VideoClip,
    resolution: usize,
    mean: [f64; 3],
    std: [f64; 3],
) -> Result<NormalizedClip> {
    if resolution == 0 {
        return Err(Error::Config("resolution must be positive".into()));
    }
    if std.iter().any(|&s| s <= 0.0) {
        return Err(Error::Config("normalization std must be positive".into()));
    }
    let n = clip.n_frames();
    let mut out = Array4::zeros((n, resolution, resolution, 3));
    for f in 0..n {
        let scaled = clip
            .frames
            .index_axis(ndarray::Axis(0), f)
            .mapv(|v| v as f64 / 255.0);
        let resized = resize_bilinear(scaled.view(), resolution, resolution);
        let mut dst = out.index_axis_mut(ndarray::Axis(0), f);
        ndarray::Zip::indexed(&mut dst)
            .and(&resized)
            .for_each(|(_, _, c), d, &v| *d = (v - mean[c]) / std[c]);
    }
    Ok(NormalizedClip {
        frames: out,
        mean,
        std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn cfg() -> SamplingConfig {
        SamplingConfig::default()
    }

    #[test]
    fn eval_plan_alternates_head_and_tail() {
        let plan =
            head_tail_sample(&VideoMeta::new("v", 160), 4, SampleMode::Eval, 0, &cfg()).unwrap();
        assert_eq!(plan.indices, vec![0, 79, 80, 159]);
    }

    #[test]
    fn one_frame_segments_take_every_frame() {
        let plan =
            head_tail_sample(&VideoMeta::new("v", 8), 8, SampleMode::Eval, 0, &cfg()).unwrap();
        assert_eq!(plan.indices, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn train_seed_7_lands_in_hand_computed_regions() {
        // 1000 frames / 8 segments = 125 frames each; ⌈0.3·125⌉ = 38, so segment k
        // covers [125k, 125k+38) ∪ [125k+87, 125k+125).
        let meta = VideoMeta::new("v", 1000);
        let a = head_tail_sample(&meta, 8, SampleMode::Train, 7, &cfg()).unwrap();
        let b = head_tail_sample(&meta, 8, SampleMode::Train, 7, &cfg()).unwrap();
        assert_eq!(a, b);
        for (k, &i) in a.indices.iter().enumerate() {
            let base = 125 * k;
            let in_head = (base..base + 38).contains(&i);
            let in_tail = (base + 87..base + 125).contains(&i);
            assert!(in_head || in_tail, "segment {k}: index {i}");
        }
        assert!(a.indices.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn short_video_errors_unless_repeat_allowed() {
        let meta = VideoMeta::new("short", 3);
        let err = head_tail_sample(&meta, 8, SampleMode::Eval, 0, &cfg()).unwrap_err();
        assert!(err.to_string().contains("insufficient frames"));
        let repeat = SamplingConfig {
            allow_repeat: true,
            ..cfg()
        };
        let plan = head_tail_sample(&meta, 8, SampleMode::Eval, 0, &repeat).unwrap();
        assert_eq!(plan.indices, vec![0, 0, 0, 1, 1, 1, 2, 2]);
    }

    #[test]
    fn region_of_short_segment_is_whole_segment() {
        assert_eq!(head_tail_region(10, 14, 0.3), vec![10, 11, 12, 13]);
        assert_eq!(head_tail_region(5, 6, 0.3), vec![5]);
        assert_eq!(
            head_tail_region(0, 40, 0.3),
            [(0..12).collect::<Vec<_>>(), (28..40).collect()].concat()
        );
    }

    fn synthetic_source(frames: usize) -> (MediaSource, Array4<u8>) {
        let stack = Array4::from_shape_fn((frames, 4, 4, 3), |(f, y, x, c)| {
            (f * 50 + y * 8 + x * 2 + c) as u8
        });
        let src = MediaSource::from_raw_bytes("synthetic", encode_raw_stack(&stack)).unwrap();
        (src, stack)
    }

    #[test]
    fn decode_returns_planned_frames() {
        let (src, stack) = synthetic_source(4);
        let plan = FrameIndexPlan {
            indices: vec![0, 3],
            mode: SampleMode::Eval,
            seed: None,
        };
        let clip = decode_frames(&src, &plan).unwrap();
        assert_eq!(
            clip.frames.index_axis(ndarray::Axis(0), 0),
            stack.index_axis(ndarray::Axis(0), 0)
        );
        assert_eq!(
            clip.frames.index_axis(ndarray::Axis(0), 1),
            stack.index_axis(ndarray::Axis(0), 3)
        );
        assert_eq!(decode_frames(&src, &plan).unwrap(), clip);
    }

    #[test]
    fn decode_rejects_out_of_range_plan() {
        let (src, _) = synthetic_source(4);
        let plan = FrameIndexPlan {
            indices: vec![5],
            mode: SampleMode::Eval,
            seed: None,
        };
        let err = decode_frames(&src, &plan).unwrap_err();
        assert!(err.to_string().contains("plan/source mismatch"));
    }

    #[test]
    fn undecodable_bytes_name_the_source() {
        let err = MediaSource::from_raw_bytes("clip-9", b"nope".to_vec()).unwrap_err();
        assert!(err.to_string().contains("decode failure for clip-9"));
    }

    #[test]
    fn constant_frame_at_mean_normalizes_to_zero() {
        let frames = Array4::from_elem((1, 3, 3, 3), 128u8);
        let clip = VideoClip {
            frames,
            plan: FrameIndexPlan {
                indices: vec![0],
                mode: SampleMode::Eval,
                seed: None,
            },
        };
        let m = 128.0 / 255.0;
        let out = resize_normalize(&clip, 6, [m; 3], [0.5; 3]).unwrap();
        assert_eq!(out.frames.dim(), (1, 6, 6, 3));
        assert!(out.frames.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn checkerboard_upscale_matches_hand_stencil() {
        // Half-pixel bilinear taps for 2 → 4 are (0,0,1), (0,1,¼), (0,1,¾), (1,1,0),
        // i.e. source coordinates 0, 0.25, 0.75, 1 after edge clamping.
        let frame = Array3::from_shape_fn(
            (2, 2, 1),
            |(y, x, _)| if (y + x) % 2 == 0 { 1.0 } else { 0.0 },
        );
        let out = resize_bilinear(frame.view(), 4, 4);
        let w = [0.0, 0.25, 0.75, 1.0];
        for y in 0..4 {
            for x in 0..4 {
                // value = (1−wy)(1−wx)·1 + (1−wy)wx·0 + wy(1−wx)·0 + wy·wx·1
                let expected = (1.0 - w[y]) * (1.0 - w[x]) + w[y] * w[x];
                assert!((out[[y, x, 0]] - expected).abs() < 1e-12, "({y},{x})");
            }
        }
        assert_eq!(out[[1, 1, 0]], 0.625);
    }
}
