//! Skeleton sequences, the NTU RGB+D skeleton text format, and the dataset manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole intrinsics of the RGB camera, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraParams {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub image_w: u32,
    pub image_h: u32,
}

impl CameraParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && (0.0..=self.image_w as f64).contains(&self.cx)
            && (0.0..=self.image_h as f64).contains(&self.cy);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid camera parameters {self:?}")))
        }
    }
}

/// A `T × N × 3` joint trajectory in camera coordinates (meters).
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence {
    frames: usize,
    joints: usize,
    data: Vec<f64>,
    /// Per-joint color-image coordinates, `T × N × 2`, when the source provides them.
    color: Option<Vec<f64>>,
    /// Number of bodies tracked in the source recording.
    pub body_count: usize,
    /// Source body identifier, echoed back when serializing.
    pub body_id: String,
}

impl SkeletonSequence {
    pub fn new(frames: usize, joints: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || joints == 0 {
            return Err(Error::shape(
                "a skeleton needs at least one frame and one joint",
            ));
        }
        if data.len() != frames * joints * 3 {
            return Err(Error::shape(format!(
                "{frames} frames x {joints} joints needs {} values, got {}",
                frames * joints * 3,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::shape("skeleton contains non-finite coordinates"));
        }
        Ok(Self {
            frames,
            joints,
            data,
            color: None,
            body_count: 1,
            body_id: "0".into(),
        })
    }

    /// Builds a sequence from per-frame joint lists.
    pub fn from_frames(frames: &[Vec<[f64; 3]>]) -> Result<Self> {
        let n = frames.first().map_or(0, |f| f.len());
        if frames.iter().any(|f| f.len() != n) {
            return Err(Error::shape("joint count differs between frames"));
        }
        let data = frames.iter().flatten().flatten().copied().collect();
        Self::new(frames.len(), n, data)
    }

    pub fn with_color(mut self, color: Vec<f64>) -> Result<Self> {
        if color.len() != self.frames * self.joints * 2 {
            return Err(Error::shape("color coordinates must be T x N x 2"));
        }
        self.color = Some(color);
        Ok(self)
    }

    pub fn frame_count(&self) -> usize {
        self.frames
    }

    pub fn joint_count(&self) -> usize {
        self.joints
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn color(&self) -> Option<&[f64]> {
        self.color.as_deref()
    }

    pub fn joint(&self, t: usize, j: usize) -> [f64; 3] {
        let i = (t * self.joints + j) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// The `N × 3` coordinates of frame `t`.
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.joints * 3..(t + 1) * self.joints * 3]
    }

    pub fn frame_joints(&self, t: usize) -> Vec<[f64; 3]> {
        (0..self.joints).map(|j| self.joint(t, j)).collect()
    }

    /// Applies `f` to every joint, keeping metadata.
    pub fn map_joints(&self, f: impl Fn([f64; 3]) -> [f64; 3]) -> Self {
        let mut out = self.clone();
        for p in out.data.chunks_mut(3) {
            let q = f([p[0], p[1], p[2]]);
            p.copy_from_slice(&q);
        }
        out
    }
}

/// Which point of frame 1 is moved to the origin by [`va_pre_normalize`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodyCenter {
    /// Mean of all joints of the first frame.
    #[default]
    Mean,
    /// A fixed root joint of the first frame.
    Root(usize),
}

/// Translates every frame so that the body center of the first frame is the origin.
pub fn va_pre_normalize(seq: &SkeletonSequence) -> SkeletonSequence {
    va_pre_normalize_with(seq, BodyCenter::Mean)
}

pub fn va_pre_normalize_with(seq: &SkeletonSequence, center: BodyCenter) -> SkeletonSequence {
    let c = match center {
        BodyCenter::Mean => {
            let mut c = [0.0; 3];
            for p in seq.frame(0).chunks(3) {
                c[0] += p[0];
                c[1] += p[1];
                c[2] += p[2];
            }
            let n = seq.joint_count() as f64;
            [c[0] / n, c[1] / n, c[2] / n]
        }
        BodyCenter::Root(j) => seq.joint(0, j.min(seq.joint_count() - 1)),
    };
    seq.map_joints(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
}

/// Index of output frame `k` when subsampling `len` frames down to `target`.
pub fn resample_index(k: usize, len: usize, target: usize) -> usize {
    if target <= 1 {
        0
    } else {
        k * (len - 1) / (target - 1)
    }
}

/// Uniform-stride subsampling to `target` frames, optionally zero-padded to `pad`.
pub fn resample(
    seq: &SkeletonSequence,
    target: usize,
    pad: Option<usize>,
) -> Result<SkeletonSequence> {
    let t = seq.frame_count();
    if target == 0 {
        return Err(Error::InvalidTarget(
            "target length must be at least 1".into(),
        ));
    }
    if target > t {
        return Err(Error::InvalidTarget(format!(
            "cannot subsample {t} frames to {target}"
        )));
    }
    if let Some(p) = pad {
        if p < target {
            return Err(Error::InvalidTarget(format!(
                "padded length {p} is shorter than target {target}"
            )));
        }
    }
    let n = seq.joint_count();
    let total = pad.unwrap_or(target);
    let mut data = Vec::with_capacity(total * n * 3);
    let mut color = seq.color().map(|_| Vec::with_capacity(total * n * 2));
    for k in 0..target {
        let src = resample_index(k, t, target);
        data.extend_from_slice(seq.frame(src));
        if let (Some(out), Some(c)) = (color.as_mut(), seq.color()) {
            out.extend_from_slice(&c[src * n * 2..(src + 1) * n * 2]);
        }
    }
    data.resize(total * n * 3, 0.0);
    let mut out = SkeletonSequence::new(total, n, data)?;
    if let Some(mut c) = color {
        c.resize(total * n * 2, 0.0);
        out = out.with_color(c)?;
    }
    out.body_count = seq.body_count;
    out.body_id = seq.body_id.clone();
    Ok(out)
}

/// Position of the RGB frame chosen for a given fraction of the clip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameRef {
    pub index: usize,
    pub fraction: f64,
}

/// `floor(fraction × (T − 1))`, with `fraction` clamped to `[0, 1]`.
pub fn select_frame_index(frame_count: usize, fraction: f64) -> FrameRef {
    let fraction = fraction.clamp(0.0, 1.0);
    let last = frame_count.saturating_sub(1);
    let index = ((fraction * last as f64).floor() as usize).min(last);
    FrameRef { index, fraction }
}

/// Paired skeleton + RGB-frame sample.
#[derive(Clone, Debug)]
pub struct ActionSample {
    pub skeleton: SkeletonSequence,
    pub frame_paths: Vec<PathBuf>,
    pub label: usize,
    pub camera: CameraParams,
}

impl ActionSample {
    pub fn new(
        skeleton: SkeletonSequence,
        frame_paths: Vec<PathBuf>,
        label: usize,
        classes: usize,
        camera: CameraParams,
    ) -> Result<Self> {
        if frame_paths.len() != skeleton.frame_count() {
            return Err(Error::shape(format!(
                "{} frames on disk for a {}-frame skeleton",
                frame_paths.len(),
                skeleton.frame_count()
            )));
        }
        if label >= classes {
            return Err(Error::Config(format!("label {label} outside 0..{classes}")));
        }
        Ok(Self {
            skeleton,
            frame_paths,
            label,
            camera,
        })
    }
}

/// Frame reference for a sample; default fraction is 0.5.
pub fn select_frame(sample: &ActionSample, fraction: f64) -> FrameRef {
    select_frame_index(sample.skeleton.frame_count(), fraction)
}

// ---------------------------------------------------------------------------
// NTU RGB+D skeleton text format

struct Lines<'a> {
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn next_tokens(&mut self) -> Result<(usize, Vec<&'a str>)> {
        for (i, l) in self.iter.by_ref() {
            self.line = i + 1;
            let toks: Vec<&str> = l.split_whitespace().collect();
            if !toks.is_empty() {
                return Ok((self.line, toks));
            }
        }
        Err(Error::MalformedFile {
            line: self.line + 1,
            reason: "unexpected end of file".into(),
        })
    }

    fn count(&mut self, what: &str) -> Result<usize> {
        let (line, toks) = self.next_tokens()?;
        if toks.len() != 1 {
            return Err(Error::MalformedFile {
                line,
                reason: format!("expected a single {what}, found {} tokens", toks.len()),
            });
        }
        toks[0].parse().map_err(|_| Error::MalformedFile {
            line,
            reason: format!("{what} {:?} is not an integer", toks[0]),
        })
    }
}

fn num(tok: &str, line: usize) -> Result<f64> {
    tok.parse().map_err(|_| Error::MalformedFile {
        line,
        reason: format!("{tok:?} is not a number"),
    })
}

const BODY_INFO_TOKENS: usize = 10;
const JOINT_TOKENS: usize = 12;

struct BodyTrack {
    id: String,
    joints: usize,
    xyz: Vec<f64>,
    color: Vec<f64>,
    frames: usize,
}

/// Parses an NTU RGB+D `.skeleton` file into one sequence per tracked body.
pub fn parse_ntu_skeleton(text: &str) -> Result<Vec<SkeletonSequence>> {
    let mut lines = Lines {
        iter: text.lines().enumerate(),
        line: 0,
    };
    let frame_count = lines.count("frame count")?;
    let mut tracks: Vec<BodyTrack> = Vec::new();
    let mut max_bodies = 0;
    for _ in 0..frame_count {
        let bodies = lines.count("body count")?;
        max_bodies = max_bodies.max(bodies);
        for _ in 0..bodies {
            let (line, info) = lines.next_tokens()?;
            if info.len() != BODY_INFO_TOKENS {
                return Err(Error::MalformedFile {
                    line,
                    reason: format!(
                        "body info line has {} tokens, expected {BODY_INFO_TOKENS}",
                        info.len()
                    ),
                });
            }
            for tok in &info[1..] {
                num(tok, line)?;
            }
            let id = info[0].to_string();
            let joint_line = lines.line + 1;
            let joints = lines.count("joint count")?;
            if joints == 0 {
                return Err(Error::MalformedFile {
                    line: joint_line,
                    reason: "joint count is zero".into(),
                });
            }
            let track = match tracks.iter().position(|t| t.id == id) {
                Some(i) => &mut tracks[i],
                None => {
                    tracks.push(BodyTrack {
                        id: id.clone(),
                        joints,
                        xyz: Vec::new(),
                        color: Vec::new(),
                        frames: 0,
                    });
                    tracks.last_mut().expect("just pushed")
                }
            };
            if track.joints != joints {
                return Err(Error::MalformedFile {
                    line: lines.line,
                    reason: format!(
                        "body {id} has {joints} joints here but {} earlier",
                        track.joints
                    ),
                });
            }
            for _ in 0..joints {
                let (line, toks) = lines.next_tokens()?;
                if toks.len() != JOINT_TOKENS {
                    return Err(Error::MalformedFile {
                        line,
                        reason: format!(
                            "joint line has {} tokens, expected {JOINT_TOKENS}",
                            toks.len()
                        ),
                    });
                }
                let vals = toks
                    .iter()
                    .map(|t| num(t, line))
                    .collect::<Result<Vec<f64>>>()?;
                if vals[..3].iter().any(|v| !v.is_finite()) {
                    return Err(Error::MalformedFile {
                        line,
                        reason: "non-finite joint coordinate".into(),
                    });
                }
                track.xyz.extend_from_slice(&vals[0..3]);
                track.color.extend_from_slice(&vals[5..7]);
            }
            track.frames += 1;
        }
    }
    if let Ok((line, _)) = lines.next_tokens() {
        return Err(Error::MalformedFile {
            line,
            reason: format!("content after the declared {frame_count} frames"),
        });
    }
    tracks
        .into_iter()
        .map(|t| {
            let mut s = SkeletonSequence::new(t.frames, t.joints, t.xyz)?.with_color(t.color)?;
            s.body_count = max_bodies;
            s.body_id = t.id;
            Ok(s)
        })
        .collect()
}

/// Serializes a single-body sequence to NTU text. Fields the sequence does not
/// carry (depth coordinates, orientation, tracking state, body flags) are written as zeros.
pub fn to_ntu_text(seq: &SkeletonSequence) -> String {
    let n = seq.joint_count();
    let mut s = String::new();
    let _ = writeln!(s, "{}", seq.frame_count());
    for t in 0..seq.frame_count() {
        s.push_str("1\n");
        let _ = writeln!(s, "{} 0 0 0 0 0 0 0 0 2", seq.body_id);
        let _ = writeln!(s, "{n}");
        for j in 0..n {
            let [x, y, z] = seq.joint(t, j);
            let (cx, cy) = match seq.color() {
                Some(c) => (c[(t * n + j) * 2], c[(t * n + j) * 2 + 1]),
                None => (0.0, 0.0),
            };
            let _ = writeln!(s, "{x} {y} {z} 0 0 {cx} {cy} 0 0 0 0 2");
        }
    }
    s
}

// ---------------------------------------------------------------------------
// Dataset manifest

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestSample {
    pub skeleton_file: String,
    pub frame_dir: String,
    pub label: usize,
    pub camera: CameraParams,
    /// Generator ground truth, present for synthetic datasets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<SampleMeta>,
}

/// Ground truth recorded by the synthetic generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub family: String,
    pub motion: Option<usize>,
    pub moving_joint: usize,
    pub object_joint: Option<usize>,
    pub object_color: Option<usize>,
    pub split: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub samples: Vec<ManifestSample>,
    pub classes: Vec<String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// A dataset directory: `manifest.json` plus the files it references.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let manifest = Manifest::load(&root.join("manifest.json"))?;
        Ok(Self { root, manifest })
    }

    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.manifest.classes.len()
    }

    /// Loads sample `i`: the first body of its skeleton file and its sorted frame list.
    pub fn load_sample(&self, i: usize) -> Result<ActionSample> {
        let entry = self
            .manifest
            .samples
            .get(i)
            .ok_or_else(|| Error::SampleNotFound(i.to_string()))?;
        let skel_path = self.root.join(&entry.skeleton_file);
        let text = std::fs::read_to_string(&skel_path).map_err(|e| Error::io(&skel_path, e))?;
        let skeleton = parse_ntu_skeleton(&text)?
            .into_iter()
            .next()
            .ok_or_else(|| Error::MalformedFile {
                line: 1,
                reason: "no bodies in file".into(),
            })?;
        let frame_dir = self.root.join(&entry.frame_dir);
        let mut frames: Vec<(u64, PathBuf)> = std::fs::read_dir(&frame_dir)
            .map_err(|e| Error::io(&frame_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter_map(|p| {
                let idx = p.file_stem()?.to_str()?.parse().ok()?;
                Some((idx, p))
            })
            .collect();
        frames.sort();
        ActionSample::new(
            skeleton,
            frames.into_iter().map(|(_, p)| p).collect(),
            entry.label,
            self.class_count(),
            entry.camera,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(frames: usize, joints: usize, f: impl Fn(usize) -> f64) -> SkeletonSequence {
        SkeletonSequence::new(frames, joints, (0..frames * joints * 3).map(f).collect()).unwrap()
    }

    fn ntu_file(frames: usize, joints: usize, joint_tokens: usize) -> String {
        let mut s = format!("{frames}\n");
        for t in 0..frames {
            s.push_str("1\n72057594037931101 0 1 1 1 1 0 0.1 0.2 2\n");
            s.push_str(&format!("{joints}\n"));
            for j in 0..joints {
                let mut toks = vec![
                    format!("{}", 0.01 * j as f64),
                    format!("{}", 0.1 * t as f64),
                    "3.5".to_string(),
                ];
                toks.extend((3..joint_tokens).map(|k| format!("{k}")));
                s.push_str(&toks.join(" "));
                s.push('\n');
            }
        }
        s
    }

    #[test]
    fn parses_declared_counts() {
        let bodies = parse_ntu_skeleton(&ntu_file(2, 25, 12)).unwrap();
        assert_eq!(bodies.len(), 1);
        assert_eq!(bodies[0].frame_count(), 2);
        assert_eq!(bodies[0].joint_count(), 25);
        assert_eq!(bodies[0].joint(1, 3), [0.03, 0.1, 3.5]);
        // color x/y are tokens 6 and 7 of the joint line
        assert_eq!(&bodies[0].color().unwrap()[..2], &[5.0, 6.0]);
    }

    #[test]
    fn short_joint_line_reports_its_line_number() {
        let err = parse_ntu_skeleton(&ntu_file(2, 25, 11)).unwrap_err();
        match err {
            // frame count, body count, body info, joint count, then the first joint
            Error::MalformedFile { line, .. } => assert_eq!(line, 5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_numeric_and_truncated_files_fail() {
        let bad = ntu_file(1, 2, 12).replace("3.5", "x");
        assert!(matches!(
            parse_ntu_skeleton(&bad),
            Err(Error::MalformedFile { .. })
        ));
        let text = ntu_file(2, 3, 12);
        let truncated: String = text.lines().take(8).collect::<Vec<_>>().join("\n");
        assert!(matches!(
            parse_ntu_skeleton(&truncated),
            Err(Error::MalformedFile { .. })
        ));
        let extra = format!("{text}1\n");
        assert!(matches!(
            parse_ntu_skeleton(&extra),
            Err(Error::MalformedFile { .. })
        ));
    }

    #[test]
    fn two_bodies_become_two_sequences() {
        let mut s = String::from("2\n");
        for _ in 0..2 {
            s.push_str("2\n");
            for id in ["11", "22"] {
                s.push_str(&format!("{id} 0 0 0 0 0 0 0 0 2\n1\n"));
                s.push_str("1 2 3 0 0 0 0 0 0 0 0 2\n");
            }
        }
        let bodies = parse_ntu_skeleton(&s).unwrap();
        assert_eq!(bodies.len(), 2);
        assert_eq!(bodies[1].body_id, "22");
        assert_eq!(bodies[1].body_count, 2);
        assert_eq!(bodies[1].frame_count(), 2);
    }

    #[test]
    fn va_pre_constant_sequence_goes_to_origin() {
        let s = seq(3, 4, |i| [1.0, 2.0, 3.0][i % 3]);
        let n = va_pre_normalize(&s);
        assert!(n.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn va_pre_root_variant_uses_that_joint() {
        let s = seq(2, 3, |i| i as f64);
        let n = va_pre_normalize_with(&s, BodyCenter::Root(1));
        assert_eq!(n.joint(0, 1), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn resample_identity_and_stride() {
        let s = seq(32, 2, |i| i as f64);
        assert_eq!(resample(&s, 32, None).unwrap(), s);

        let s = seq(5, 1, |i| (i / 3) as f64);
        let r = resample(&s, 3, None).unwrap();
        let picked: Vec<f64> = (0..3).map(|k| r.joint(k, 0)[0]).collect();
        assert_eq!(picked, vec![0.0, 2.0, 4.0]);

        let r1 = resample(&s, 1, None).unwrap();
        assert_eq!(r1.joint(0, 0), s.joint(0, 0));
    }

    #[test]
    fn resample_pads_with_zero_frames() {
        let s = seq(40, 25, |i| 1.0 + i as f64);
        let r = resample(&s, 32, Some(300)).unwrap();
        assert_eq!(r.frame_count(), 300);
        for t in 32..300 {
            assert!(r.frame(t).iter().all(|&v| v == 0.0));
        }
        assert!(r.frame(31).iter().all(|&v| v != 0.0));
    }

    #[test]
    fn resample_rejects_bad_targets() {
        let s = seq(4, 1, |i| i as f64);
        assert!(matches!(
            resample(&s, 5, None),
            Err(Error::InvalidTarget(_))
        ));
        assert!(matches!(
            resample(&s, 3, Some(2)),
            Err(Error::InvalidTarget(_))
        ));
        assert!(matches!(
            resample(&s, 0, None),
            Err(Error::InvalidTarget(_))
        ));
    }

    #[test]
    fn frame_selection_examples() {
        assert_eq!(select_frame_index(11, 0.5).index, 5);
        assert_eq!(select_frame_index(10, 0.0).index, 0);
        assert_eq!(select_frame_index(10, 1.0).index, 9);
        // floor(0.7 * 31) = floor(21.7)
        assert_eq!(select_frame_index(32, 0.7).index, 21);
    }

    #[test]
    fn camera_validation() {
        let cam = CameraParams {
            fx: 500.0,
            fy: 500.0,
            cx: 320.0,
            cy: 240.0,
            image_w: 640,
            image_h: 480,
        };
        assert!(cam.validate().is_ok());
        assert!(CameraParams { fx: 0.0, ..cam }.validate().is_err());
        assert!(CameraParams { cx: 700.0, ..cam }.validate().is_err());
    }

    #[test]
    fn sample_requires_matching_frame_count() {
        let cam = CameraParams {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
            image_w: 1,
            image_h: 1,
        };
        let s = seq(3, 1, |_| 1.0);
        assert!(ActionSample::new(s.clone(), vec![PathBuf::new(); 2], 0, 1, cam).is_err());
        assert!(ActionSample::new(s.clone(), vec![PathBuf::new(); 3], 1, 1, cam).is_err());
        assert!(ActionSample::new(s, vec![PathBuf::new(); 3], 0, 1, cam).is_ok());
    }
}
