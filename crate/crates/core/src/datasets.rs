//! Frame sequences, the synthetic bouncing-shapes generator and the IVSQ file format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Ordered video frames, each `(1, c, h, w)` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    frames: Vec<Tensor>,
    pub frame_rate_hint: Option<f64>,
    pub source_id: String,
}

impl FrameSequence {
    /// Validates that all frames share one single-item shape and clamps values to `[0, 1]`.
    pub fn new(frames: Vec<Tensor>, source_id: impl Into<String>) -> Result<Self> {
        if let Some(first) = frames.first() {
            let s = first.shape();
            if s.n != 1 {
                return Err(Error::shape(format!("frames must have batch size 1, got {s}")));
            }
            if let Some((t, f)) = frames.iter().enumerate().find(|(_, f)| f.shape() != s) {
                return Err(Error::shape(format!(
                    "frame {t} has shape {} but frame 0 has {s}",
                    f.shape()
                )));
            }
        }
        let frames = frames
            .into_iter()
            .map(|f| if f.data().iter().all(|v| (0.0..=1.0).contains(v)) { f } else { f.map(|v| v.clamp(0.0, 1.0)) })
            .collect();
        Ok(FrameSequence {
            frames,
            frame_rate_hint: None,
            source_id: source_id.into(),
        })
    }

    pub fn frames(&self) -> &[Tensor] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<Tensor> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_shape(&self) -> Option<Shape> {
        self.frames.first().map(Tensor::shape)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Circle,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entity {
    pub kind: ShapeKind,
    /// Side length (square) or diameter (circle) in pixels.
    pub size: usize,
    /// RGB color; grayscale canvases use the channel mean.
    pub color: [f64; 3],
    /// Top-left corner `(y, x)` of the bounding box at frame 0.
    pub position: (i64, i64),
    /// Pixels per frame `(dy, dx)`.
    pub velocity: (i64, i64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSceneSpec {
    pub height: usize,
    pub width: usize,
    /// 3 for RGB, 1 for grayscale.
    pub channels: usize,
    pub entities: Vec<Entity>,
    pub seed: u64,
    pub frame_count: usize,
}

/// Colors whose components are exact in 32-bit floats, so IVSQ files round-trip.
const PALETTE: [[f64; 3]; 6] = [
    [1.0, 1.0, 1.0],
    [1.0, 0.25, 0.25],
    [0.25, 1.0, 0.5],
    [0.375, 0.5, 1.0],
    [1.0, 0.875, 0.25],
    [0.75, 0.25, 1.0],
];

impl SyntheticSceneSpec {
    /// `shapes` entities of side `size` with seed-drawn kind, color, position and velocity.
    ///
    /// Velocity components are drawn from `{-2, -1, 1, 2}`, limited to the free
    /// travel in each axis.
    pub fn random(
        seed: u64,
        frame_count: usize,
        (height, width): (usize, usize),
        shapes: usize,
        size: usize,
    ) -> Result<Self> {
        if size > height || size > width {
            return Err(Error::InvalidScene(format!(
                "shape size {size} does not fit in a {height}x{width} canvas"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw_velocity = |free: usize, rng: &mut ChaCha8Rng| -> Result<i64> {
            let choices: Vec<i64> = [-2, -1, 1, 2]
                .into_iter()
                .filter(|v: &i64| v.unsigned_abs() as usize <= free)
                .collect();
            choices.choose(rng).copied().ok_or_else(|| {
                Error::InvalidScene(format!(
                    "shape size {size} leaves no room to move in a {height}x{width} canvas"
                ))
            })
        };
        let mut entities = Vec::with_capacity(shapes);
        for k in 0..shapes {
            let (fy, fx) = (height - size, width - size);
            let kind = if k == 0 || rng.gen_bool(0.5) { ShapeKind::Square } else { ShapeKind::Circle };
            let color = PALETTE[rng.gen_range(0..PALETTE.len())];
            let position = (rng.gen_range(0..=fy) as i64, rng.gen_range(0..=fx) as i64);
            let velocity = (draw_velocity(fy, &mut rng)?, draw_velocity(fx, &mut rng)?);
            entities.push(Entity {
                kind,
                size,
                color,
                position,
                velocity,
            });
        }
        Ok(SyntheticSceneSpec {
            height,
            width,
            channels: 3,
            entities,
            seed,
            frame_count,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidScene("canvas must be at least 1x1".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::InvalidScene(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        for (k, e) in self.entities.iter().enumerate() {
            if e.size == 0 || e.size > self.height || e.size > self.width {
                return Err(Error::InvalidScene(format!(
                    "entity {k}: size {} must be between 1 and the canvas size {}x{}",
                    e.size, self.height, self.width
                )));
            }
            for (axis, p, v, dim) in [
                ("y", e.position.0, e.velocity.0, self.height),
                ("x", e.position.1, e.velocity.1, self.width),
            ] {
                let free = (dim - e.size) as i64;
                if p < 0 || p > free {
                    return Err(Error::InvalidScene(format!(
                        "entity {k}: {axis} position {p} outside [0, {free}]"
                    )));
                }
                if v == 0 || v.abs() > free {
                    return Err(Error::InvalidScene(format!(
                        "entity {k}: {axis} velocity {v} must be nonzero with magnitude at most {free}"
                    )));
                }
            }
            if e.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::InvalidScene(format!("entity {k}: color outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Advances one axis by `v` and reflects off the walls at 0 and `free`.
fn bounce(p: i64, v: i64, free: i64) -> (i64, i64) {
    let next = p + v;
    if next < 0 {
        (-next, -v)
    } else if next > free {
        (2 * free - next, -v)
    } else {
        (next, v)
    }
}

fn covers(kind: ShapeKind, size: usize, dy: usize, dx: usize) -> bool {
    match kind {
        ShapeKind::Square => true,
        ShapeKind::Circle => {
            let r = size as f64 / 2.0;
            let (y, x) = (dy as f64 + 0.5 - r, dx as f64 + 0.5 - r);
            y * y + x * x <= r * r
        }
    }
}

/// Per-frame top-left positions of every entity.
pub fn trajectories(spec: &SyntheticSceneSpec) -> Result<Vec<Vec<(i64, i64)>>> {
    spec.validate()?;
    Ok(spec
        .entities
        .iter()
        .map(|e| {
            let free = (
                (spec.height - e.size) as i64,
                (spec.width - e.size) as i64,
            );
            let (mut p, mut v) = (e.position, e.velocity);
            let mut out = Vec::with_capacity(spec.frame_count);
            for _ in 0..spec.frame_count {
                out.push(p);
                let (py, vy) = bounce(p.0, v.0, free.0);
                let (px, vx) = bounce(p.1, v.1, free.1);
                p = (py, px);
                v = (vy, vx);
            }
            out
        })
        .collect())
}

/// Renders the scene on a black background; later entities paint over earlier ones.
pub fn generate(spec: &SyntheticSceneSpec) -> Result<FrameSequence> {
    let paths = trajectories(spec)?;
    let shape = Shape::new(1, spec.channels, spec.height, spec.width);
    let mut frames = Vec::with_capacity(spec.frame_count);
    for t in 0..spec.frame_count {
        let mut frame = Tensor::zeros(shape);
        for (e, path) in spec.entities.iter().zip(&paths) {
            let (top, left) = (path[t].0 as usize, path[t].1 as usize);
            let color: Vec<f64> = if spec.channels == 3 {
                e.color.to_vec()
            } else {
                vec![e.color.iter().sum::<f64>() / 3.0]
            };
            for dy in 0..e.size {
                for dx in 0..e.size {
                    if covers(e.kind, e.size, dy, dx) {
                        for (c, &v) in color.iter().enumerate() {
                            frame.set(0, c, top + dy, left + dx, v);
                        }
                    }
                }
            }
        }
        frames.push(frame);
    }
    FrameSequence::new(frames, format!("synthetic-seed{}", spec.seed))
}

/// Overlapping windows of `length` frames starting every `stride` frames.
pub fn windows(seq: &FrameSequence, length: usize, stride: usize) -> Result<Vec<FrameSequence>> {
    if length < 2 {
        return Err(Error::Contract(format!("window length must be >= 2, got {length}")));
    }
    if stride == 0 {
        return Err(Error::Contract("window stride must be >= 1".into()));
    }
    if length > seq.len() {
        return Ok(Vec::new());
    }
    (0..=seq.len() - length)
        .step_by(stride)
        .map(|start| {
            let mut w = FrameSequence::new(
                seq.frames[start..start + length].to_vec(),
                format!("{}#{start}", seq.source_id),
            )?;
            w.frame_rate_hint = seq.frame_rate_hint;
            Ok(w)
        })
        .collect()
}

pub const IVSQ_MAGIC: &[u8; 4] = b"IVSQ";
pub const IVSQ_VERSION: u32 = 1;
pub const IVSQ_HEADER_LEN: u64 = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u32 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Writes `seq` as IVSQ with 32-bit samples.
pub fn save_sequence(seq: &FrameSequence, path: impl AsRef<Path>) -> Result<()> {
    save_sequence_as(seq, path, Dtype::F32)
}

pub fn save_sequence_as(seq: &FrameSequence, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_sequence(seq, &mut w, dtype).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_sequence(seq: &FrameSequence, w: &mut impl Write, dtype: Dtype) -> std::io::Result<()> {
    let s = seq.frame_shape().unwrap_or(Shape::new(1, 0, 0, 0));
    w.write_all(IVSQ_MAGIC)?;
    for field in [
        IVSQ_VERSION,
        seq.len() as u32,
        s.c as u32,
        s.h as u32,
        s.w as u32,
        dtype.code(),
        0,
    ] {
        w.write_all(&field.to_le_bytes())?;
    }
    for frame in &seq.frames {
        for &v in frame.data() {
            match dtype {
                Dtype::F32 => w.write_all(&(v as f32).to_le_bytes())?,
                Dtype::F64 => w.write_all(&v.to_le_bytes())?,
            }
        }
    }
    Ok(())
}

pub fn load_sequence(path: impl AsRef<Path>) -> Result<FrameSequence> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let mut seq = parse_sequence(&bytes)?;
    seq.source_id = path.display().to_string();
    Ok(seq)
}

/// Parses an in-memory IVSQ file. Errors carry the byte offset of the offending field.
pub fn parse_sequence(bytes: &[u8]) -> Result<FrameSequence> {
    if bytes.len() < 4 {
        return Err(Error::format(0, "truncated magic"));
    }
    if &bytes[..4] != IVSQ_MAGIC {
        return Err(Error::format(0, format!("bad magic {:?}, expected \"IVSQ\"", &bytes[..4])));
    }
    let field = |k: usize| -> Result<u32> {
        let at = 4 + 4 * k;
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| Error::format(at as u64, "truncated header"))
    };
    let version = field(0)?;
    if version != IVSQ_VERSION {
        return Err(Error::format(4, format!("unsupported IVSQ version {version}")));
    }
    let (frames, c, h, w) = (field(1)? as usize, field(2)? as usize, field(3)? as usize, field(4)? as usize);
    let dtype = match field(5)? {
        0 => Dtype::F32,
        1 => Dtype::F64,
        other => return Err(Error::format(24, format!("unknown dtype code {other}"))),
    };
    field(6)?;
    if frames > 0 {
        for (k, dim) in [(2, c), (3, h), (4, w)] {
            if dim == 0 {
                return Err(Error::format(4 + 4 * k as u64, "zero frame dimension"));
            }
        }
    }
    let plane = c
        .checked_mul(h)
        .and_then(|p| p.checked_mul(w))
        .filter(|p| p.checked_mul(dtype.width()).is_some())
        .ok_or_else(|| Error::format(12, "frame dimensions overflow"))?;
    let payload = plane
        .checked_mul(frames)
        .and_then(|n| n.checked_mul(dtype.width()))
        .ok_or_else(|| Error::format(8, "frame count overflows the payload size"))?;
    let header = IVSQ_HEADER_LEN as usize;
    let body = &bytes[header..];
    if body.len() < payload {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated payload: expected {payload} bytes, found {}", body.len()),
        ));
    }
    if body.len() > payload {
        return Err(Error::format(
            (header + payload) as u64,
            format!("{} trailing bytes after payload", body.len() - payload),
        ));
    }
    let shape = Shape::new(1, c, h, w);
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let chunk = &body[t * plane * dtype.width()..(t + 1) * plane * dtype.width()];
        let data: Vec<f64> = match dtype {
            Dtype::F32 => chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F64 => chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        };
        if let Some(k) = data.iter().position(|v| !v.is_finite()) {
            let at = header + (t * plane + k) * dtype.width();
            return Err(Error::format(at as u64, "non-finite pixel value"));
        }
        out.push(Tensor::from_vec(shape, data)?);
    }
    FrameSequence::new(out, "")
}
