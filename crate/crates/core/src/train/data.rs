//! Synthetic clips of one colored shape on a flat background.
//!
//! Each clip carries its exact optical flow and its content token, which is
//! the class of the shape's color. Translating clips wrap around the frame
//! edges, bouncing clips reflect off them, and hue-rotating clips stay put
//! while their color turns about the grey axis.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array3, Array4, ArrayD, Axis, Dimension};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{write_atomic, TensorBundle};
use crate::model::Condition;
use crate::optical_flow::FlowField;
use crate::rng::{stream_rng, Stream};
use crate::tensor::FrameSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionFamily {
    Translate,
    Bounce,
    RotateHue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeFamily {
    Square,
    Disc,
}

impl FromStr for MotionFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "translate" => Ok(Self::Translate),
            "bounce" => Ok(Self::Bounce),
            "rotate-hue" => Ok(Self::RotateHue),
            other => Err(Error::Usage(format!(
                "unknown motion `{other}` (translate, bounce, rotate-hue)"
            ))),
        }
    }
}

impl FromStr for ShapeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "square" => Ok(Self::Square),
            "disc" => Ok(Self::Disc),
            other => Err(Error::Usage(format!("unknown shape `{other}` (square, disc)"))),
        }
    }
}

/// Saturated colors in `[-1, 1]`, indexed by class.
pub const PALETTE: [[f32; 3]; 8] = [
    [0.9, -0.7, -0.7],
    [-0.7, 0.9, -0.7],
    [-0.7, -0.7, 0.9],
    [0.9, 0.9, -0.7],
    [0.9, -0.7, 0.9],
    [-0.7, 0.9, 0.9],
    [0.9, 0.9, 0.9],
    [0.9, 0.2, -0.7],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDatasetSpec {
    /// Motion of each clip is drawn uniformly from this list.
    pub motions: Vec<MotionFamily>,
    pub shapes: Vec<ShapeFamily>,
    /// Frames are `size x size`.
    pub size: usize,
    pub frames: usize,
    pub num_classes: usize,
    /// Half side of a square, radius of a disc.
    pub radius: usize,
    /// Largest per-axis speed in pixels per frame.
    pub max_speed: i32,
    /// Hue turn per frame for rotating clips, in radians.
    pub hue_rate: f32,
    pub background: f32,
    pub colors: Vec<[f32; 3]>,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            motions: vec![MotionFamily::Translate, MotionFamily::Bounce],
            shapes: vec![ShapeFamily::Square, ShapeFamily::Disc],
            size: 16,
            frames: 8,
            num_classes: 4,
            radius: 3,
            max_speed: 2,
            hue_rate: 0.3,
            background: 0.0,
            colors: PALETTE[..4].to_vec(),
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Err(Error::Precondition(format!("dataset spec: {reason}")));
        if self.motions.is_empty() || self.shapes.is_empty() {
            return bad("need at least one motion and one shape family");
        }
        if self.frames == 0 || self.num_classes == 0 {
            return bad("frames and classes must be positive");
        }
        if self.colors.len() < self.num_classes {
            return bad("every class needs a color");
        }
        if self.size < 2 * self.radius + 2 {
            return bad("shape does not fit the frame");
        }
        if self.max_speed < 0 || self.max_speed as usize > self.size / 2 {
            return bad("max_speed must lie in [0, size / 2]");
        }
        Ok(())
    }

    pub fn video_shape(&self) -> [usize; 4] {
        [self.frames, 3, self.size, self.size]
    }
}

/// Everything that determines one clip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipParams {
    pub motion: MotionFamily,
    pub shape: ShapeFamily,
    pub class: usize,
    pub x: i32,
    pub y: i32,
    pub vx: i32,
    pub vy: i32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub frames: FrameSequence,
    /// Ground-truth backward flow; `None` for single-frame clips.
    pub flow: Option<FlowField>,
    pub token: usize,
    pub params: ClipParams,
}

/// Rotates `rgb` by `angle` about the grey axis.
pub fn rotate_hue(rgb: [f32; 3], angle: f32) -> [f32; 3] {
    let (s, c) = (angle as f64).sin_cos();
    let k = 1.0 / 3.0f64.sqrt();
    let v = rgb.map(|x| x as f64);
    // Rodrigues with the unit axis (k, k, k)
    let cross = [k * (v[2] - v[1]), k * (v[0] - v[2]), k * (v[1] - v[0])];
    let dot = k * (v[0] + v[1] + v[2]);
    let mut out = [0.0f32; 3];
    for i in 0..3 {
        out[i] = (v[i] * c + cross[i] * s + k * dot * (1.0 - c)).clamp(-1.0, 1.0) as f32;
    }
    out
}

/// Center positions for every frame.
fn trajectory(spec: &SyntheticDatasetSpec, p: &ClipParams) -> Vec<(i32, i32)> {
    let n = spec.size as i32;
    let (lo, hi) = (spec.radius as i32, n - 1 - spec.radius as i32);
    let mut out = Vec::with_capacity(spec.frames);
    let (mut x, mut y, mut vx, mut vy) = (p.x, p.y, p.vx, p.vy);
    for _ in 0..spec.frames {
        out.push((x, y));
        match p.motion {
            MotionFamily::Translate => {
                x = (x + vx).rem_euclid(n);
                y = (y + vy).rem_euclid(n);
            }
            MotionFamily::Bounce => {
                let reflect = |pos: &mut i32, vel: &mut i32| {
                    let mut next = *pos + *vel;
                    if next < lo {
                        next = 2 * lo - next;
                        *vel = -*vel;
                    } else if next > hi {
                        next = 2 * hi - next;
                        *vel = -*vel;
                    }
                    *pos = next;
                };
                reflect(&mut x, &mut vx);
                reflect(&mut y, &mut vy);
            }
            MotionFamily::RotateHue => {}
        }
    }
    out
}

/// Signed offset from `c` to `p`, wrapped onto the torus when `wrap`.
fn offset(p: usize, c: i32, n: usize, wrap: bool) -> i32 {
    let d = p as i32 - c;
    if !wrap {
        return d;
    }
    let n = n as i32;
    let d = d.rem_euclid(n);
    if d > n / 2 {
        d - n
    } else {
        d
    }
}

fn inside(shape: ShapeFamily, dx: i32, dy: i32, r: i32) -> bool {
    match shape {
        ShapeFamily::Square => dx.abs() <= r && dy.abs() <= r,
        ShapeFamily::Disc => dx * dx + dy * dy <= r * r,
    }
}

fn mask(spec: &SyntheticDatasetSpec, p: &ClipParams, cx: i32, cy: i32) -> ndarray::Array2<bool> {
    let wrap = p.motion == MotionFamily::Translate;
    let n = spec.size;
    ndarray::Array2::from_shape_fn((n, n), |(y, x)| {
        inside(
            p.shape,
            offset(x, cx, n, wrap),
            offset(y, cy, n, wrap),
            spec.radius as i32,
        )
    })
}

/// One frame with the shape drawn in `color` at center `(cx, cy)`.
pub fn render_frame(spec: &SyntheticDatasetSpec, p: &ClipParams, cx: i32, cy: i32, color: [f32; 3]) -> Array3<f32> {
    let m = mask(spec, p, cx, cy);
    let n = spec.size;
    Array3::from_shape_fn(
        (3, n, n),
        |(k, y, x)| if m[[y, x]] { color[k] } else { spec.background },
    )
}

pub fn render_clip(spec: &SyntheticDatasetSpec, p: &ClipParams) -> Result<Clip> {
    spec.validate()?;
    if p.class >= spec.num_classes {
        return Err(Error::Precondition(format!(
            "class {} of {}",
            p.class, spec.num_classes
        )));
    }
    let n = spec.size;
    let base = spec.colors[p.class];
    let centers = trajectory(spec, p);
    let mut video = Array4::zeros((spec.frames, 3, n, n));
    for (f, &(cx, cy)) in centers.iter().enumerate() {
        let color = match p.motion {
            MotionFamily::RotateHue => rotate_hue(base, spec.hue_rate * f as f32),
            _ => base,
        };
        video
            .index_axis_mut(Axis(0), f)
            .assign(&render_frame(spec, p, cx, cy, color));
    }
    let flow = if spec.frames >= 2 {
        let mut flow = Array4::zeros((spec.frames - 1, 2, n, n));
        for f in 0..spec.frames - 1 {
            let (dx, dy) = match p.motion {
                MotionFamily::Translate => (p.vx, p.vy),
                MotionFamily::Bounce => (centers[f + 1].0 - centers[f].0, centers[f + 1].1 - centers[f].1),
                MotionFamily::RotateHue => (0, 0),
            };
            if p.motion == MotionFamily::Translate {
                flow.slice_mut(ndarray::s![f, 0, .., ..]).fill(dx as f32);
                flow.slice_mut(ndarray::s![f, 1, .., ..]).fill(dy as f32);
            } else {
                // the shape moves rigidly; the flat background does not
                let m = mask(spec, p, centers[f + 1].0, centers[f + 1].1);
                for ((y, x), &on) in m.indexed_iter() {
                    if on {
                        flow[[f, 0, y, x]] = dx as f32;
                        flow[[f, 1, y, x]] = dy as f32;
                    }
                }
            }
        }
        Some(FlowField::new(flow)?)
    } else {
        None
    };
    Ok(Clip {
        frames: FrameSequence::new(video)?,
        flow,
        token: p.class,
        params: *p,
    })
}

/// First frame of `clip` with the shape recolored to `class`.
pub fn edited_first_frame(spec: &SyntheticDatasetSpec, clip: &Clip, class: usize) -> Result<Array3<f32>> {
    if class >= spec.num_classes {
        return Err(Error::Precondition(format!("class {class} of {}", spec.num_classes)));
    }
    let p = &clip.params;
    Ok(render_frame(spec, p, p.x, p.y, spec.colors[class]))
}

pub fn random_params(spec: &SyntheticDatasetSpec, rng: &mut impl Rng) -> ClipParams {
    let motion = spec.motions[rng.random_range(0..spec.motions.len())];
    let shape = spec.shapes[rng.random_range(0..spec.shapes.len())];
    let class = rng.random_range(0..spec.num_classes);
    let (lo, hi) = (spec.radius as i32, (spec.size - 1 - spec.radius) as i32);
    let s = spec.max_speed;
    let (vx, vy) = match motion {
        MotionFamily::RotateHue => (0, 0),
        _ => (rng.random_range(-s..=s), rng.random_range(-s..=s)),
    };
    ClipParams {
        motion,
        shape,
        class,
        x: rng.random_range(lo..=hi),
        y: rng.random_range(lo..=hi),
        vx,
        vy,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub spec: SyntheticDatasetSpec,
    pub clips: Vec<Clip>,
}

impl SyntheticDataset {
    pub fn generate(spec: &SyntheticDatasetSpec, num_clips: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = stream_rng(seed, Stream::Data);
        let clips = (0..num_clips)
            .map(|_| render_clip(spec, &random_params(spec, &mut rng)))
            .collect::<Result<_>>()?;
        Ok(Self {
            spec: spec.clone(),
            clips,
        })
    }

    pub fn from_clips(spec: SyntheticDatasetSpec, clips: Vec<Clip>) -> Self {
        Self { spec, clips }
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}

/// Training condition of a clip: its first frame, empty padding and its
/// token.
pub fn training_condition(clip: &Clip) -> Result<Condition> {
    let [l, c, h, w] = clip.frames.shape();
    Condition::new(
        clip.frames.frame(0).to_owned(),
        Array4::zeros((l - 1, c, h, w)),
        clip.token,
    )
}

/// Draws a clip uniformly and returns it with its training condition.
pub fn sample_training_pair(dataset: &SyntheticDataset, rng: &mut ChaCha20Rng) -> Result<(FrameSequence, Condition)> {
    if dataset.is_empty() {
        return Err(Error::Precondition("empty dataset".into()));
    }
    let clip = &dataset.clips[rng.random_range(0..dataset.len())];
    Ok((clip.frames.clone(), training_condition(clip)?))
}

/// One editing task: recolor the shape of `clip` from its own class to
/// `target_token`.
#[derive(Debug, Clone, PartialEq)]
pub struct EditCase {
    pub clip: Clip,
    pub target_token: usize,
    pub edited_first: Array3<f32>,
    /// The ideal result: the same clip rendered in the target class.
    pub reference: FrameSequence,
}

/// `n` editing tasks, each with a target class different from the source.
pub fn edit_suite(spec: &SyntheticDatasetSpec, n: usize, seed: u64) -> Result<Vec<EditCase>> {
    spec.validate()?;
    if spec.num_classes < 2 {
        return Err(Error::Precondition("editing needs at least two classes".into()));
    }
    let mut rng = stream_rng(seed, Stream::Suite);
    (0..n)
        .map(|_| {
            let clip = render_clip(spec, &random_params(spec, &mut rng))?;
            let target_token = (clip.token + rng.random_range(1..spec.num_classes)) % spec.num_classes;
            let edited_first = edited_first_frame(spec, &clip, target_token)?;
            let reference = render_clip(
                spec,
                &ClipParams {
                    class: target_token,
                    ..clip.params
                },
            )?
            .frames;
            Ok(EditCase {
                clip,
                target_token,
                edited_first,
                reference,
            })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClipMeta {
    params: ClipParams,
    token: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target_token: Option<usize>,
}

fn tensor<D: Dimension>(b: &TensorBundle, name: &str) -> Result<ndarray::Array<f32, D>> {
    let a: &ArrayD<f32> = b
        .get(name)
        .ok_or_else(|| Error::format(0, format!("bundle has no `{name}` tensor")))?;
    a.clone()
        .into_dimensionality::<D>()
        .map_err(|_| Error::format(0, format!("`{name}` has shape {:?}", a.shape())))
}

fn parse_meta(b: &TensorBundle) -> Result<ClipMeta> {
    serde_json::from_str(&b.meta).map_err(|e| Error::format(0, format!("clip metadata: {e}")))
}

impl Clip {
    pub fn to_bundle(&self) -> TensorBundle {
        let meta = ClipMeta {
            params: self.params,
            token: self.token,
            target_token: None,
        };
        let mut tensors = vec![("frames".to_string(), self.frames.as_array().clone().into_dyn())];
        if let Some(flow) = &self.flow {
            tensors.push(("flow".into(), flow.as_array().clone().into_dyn()));
        }
        TensorBundle {
            meta: serde_json::to_string(&meta).expect("plain data serializes"),
            tensors,
        }
    }

    pub fn from_bundle(b: &TensorBundle) -> Result<Self> {
        let meta = parse_meta(b)?;
        let flow = match b.get("flow") {
            Some(_) => Some(FlowField::new(tensor(b, "flow")?)?),
            None => None,
        };
        Ok(Self {
            frames: FrameSequence::new(tensor(b, "frames")?)?,
            flow,
            token: meta.token,
            params: meta.params,
        })
    }
}

impl EditCase {
    pub fn to_bundle(&self) -> TensorBundle {
        let mut b = self.clip.to_bundle();
        let meta = ClipMeta {
            params: self.clip.params,
            token: self.clip.token,
            target_token: Some(self.target_token),
        };
        b.meta = serde_json::to_string(&meta).expect("plain data serializes");
        b.tensors
            .push(("edited_first".into(), self.edited_first.clone().into_dyn()));
        b.tensors
            .push(("reference".into(), self.reference.as_array().clone().into_dyn()));
        b
    }

    pub fn from_bundle(b: &TensorBundle) -> Result<Self> {
        let target_token = parse_meta(b)?
            .target_token
            .ok_or_else(|| Error::format(0, "not an editing case: no target token"))?;
        Ok(Self {
            clip: Clip::from_bundle(b)?,
            target_token,
            edited_first: tensor(b, "edited_first")?,
            reference: FrameSequence::new(tensor(b, "reference")?)?,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetIndex {
    spec: SyntheticDatasetSpec,
    clips: usize,
    suite: usize,
}

/// Writes `dataset.json`, `train/clip_NNNN.frct` and `suite/case_NNNN.frct`
/// under `dir` and returns the written paths.
pub fn save_dataset(dir: &Path, dataset: &SyntheticDataset, suite: &[EditCase]) -> Result<Vec<PathBuf>> {
    let index = DatasetIndex {
        spec: dataset.spec.clone(),
        clips: dataset.len(),
        suite: suite.len(),
    };
    let mut written = Vec::new();
    let path = dir.join("dataset.json");
    write_atomic(
        &path,
        serde_json::to_string_pretty(&index).expect("plain data").as_bytes(),
    )?;
    written.push(path);
    for (i, clip) in dataset.clips.iter().enumerate() {
        let path = dir.join("train").join(format!("clip_{i:04}.frct"));
        clip.to_bundle().save(&path)?;
        written.push(path);
    }
    for (i, case) in suite.iter().enumerate() {
        let path = dir.join("suite").join(format!("case_{i:04}.frct"));
        case.to_bundle().save(&path)?;
        written.push(path);
    }
    Ok(written)
}

fn read_index(dir: &Path) -> Result<DatasetIndex> {
    let path = dir.join("dataset.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(0, format!("{}: {e}", path.display())))
}

/// The training clips written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<SyntheticDataset> {
    let index = read_index(dir)?;
    let clips = (0..index.clips)
        .map(|i| {
            Clip::from_bundle(&TensorBundle::load(
                dir.join("train").join(format!("clip_{i:04}.frct")),
            )?)
        })
        .collect::<Result<_>>()?;
    Ok(SyntheticDataset::from_clips(index.spec, clips))
}

/// The editing suite written by [`save_dataset`].
pub fn load_suite(dir: &Path) -> Result<Vec<EditCase>> {
    let index = read_index(dir)?;
    (0..index.suite)
        .map(|i| {
            EditCase::from_bundle(&TensorBundle::load(
                dir.join("suite").join(format!("case_{i:04}.frct")),
            )?)
        })
        .collect()
}
