//! Synthetic video generator: moving colored shapes (circle / square /
//! triangle) with slow constant velocities, gentle sinusoidal size
//! deformation, and fast opaque occluder bars. Annotations are amodal — an
//! object keeps its full box while an occluder covers it — which is exactly
//! what makes temporal context worth having.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::FrameImage;
use crate::error::{Error, Result};
use crate::matching::BoxCxcywh;

pub const NUM_CLASSES: usize = 3;

const BG: [f64; 3] = [0.05, 0.05, 0.08];
const OCCLUDER_COLOR: [f64; 3] = [0.95, 0.95, 0.92];
const CLASS_COLORS: [[f64; 3]; NUM_CLASSES] = [
    [0.9, 0.15, 0.15], // circle
    [0.15, 0.85, 0.2], // square
    [0.2, 0.3, 0.95],  // triangle
];
/// default fraction of hidden pixels above which an object is "occluded"
pub const OCCLUSION_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub frames_per_sequence: usize,
    pub objects_per_sequence: usize,
    pub occluder_count: usize,
    /// occluder horizontal speed in px/frame (fast relative to objects)
    pub occluder_speed: f64,
    /// max object speed in px/frame (slow so context frames stay informative)
    pub max_object_speed: f64,
    /// object base size range as fractions of the shorter frame side
    pub min_object_size: f64,
    pub max_object_size: f64,
    /// occluder bar width range as fractions of the frame width
    pub min_occluder_width: f64,
    pub max_occluder_width: f64,
    /// fraction of hidden pixels above which the `occluded` flag is set
    pub occlusion_threshold: f64,
    pub blur: bool,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> SceneSpec {
        SceneSpec {
            height: 64,
            width: 64,
            frames_per_sequence: 16,
            objects_per_sequence: 3,
            occluder_count: 1,
            occluder_speed: 4.0,
            max_object_speed: 1.0,
            min_object_size: 0.18,
            max_object_size: 0.30,
            min_occluder_width: 0.22,
            max_occluder_width: 0.32,
            occlusion_threshold: OCCLUSION_THRESHOLD,
            blur: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub fn class_id(self) -> usize {
        match self {
            Shape::Circle => 0,
            Shape::Square => 1,
            Shape::Triangle => 2,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Annotation {
    pub class: usize,
    /// normalized [cx, cy, w, h], amodal, clipped to the frame
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub occluded: bool,
}

impl Annotation {
    pub fn to_box(&self) -> BoxCxcywh {
        BoxCxcywh::new(self.bbox[0], self.bbox[1], self.bbox[2], self.bbox[3])
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrameAnnotations {
    pub frame: usize,
    pub objects: Vec<Annotation>,
}

pub struct Sequence {
    pub frames: Vec<FrameImage>,
    pub annotations: Vec<FrameAnnotations>,
}

#[derive(Clone, Copy)]
struct ObjectState {
    shape: Shape,
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
    base_w: f64,
    base_h: f64,
    phase: f64,
}

#[derive(Clone, Copy)]
struct Occluder {
    x: f64,
    speed: f64,
    width: f64,
}

fn shape_contains(o: &ObjectState, w: f64, h: f64, px: f64, py: f64) -> bool {
    let dx = px - o.cx;
    let dy = py - o.cy;
    match o.shape {
        Shape::Circle => {
            let rx = w / 2.0;
            let ry = h / 2.0;
            (dx / rx) * (dx / rx) + (dy / ry) * (dy / ry) <= 1.0
        }
        Shape::Square => dx.abs() <= w / 2.0 && dy.abs() <= h / 2.0,
        Shape::Triangle => {
            // upright triangle inscribed in the box
            if dy < -h / 2.0 || dy > h / 2.0 {
                return false;
            }
            // half-width grows linearly from apex (top) to base (bottom)
            let t = (dy + h / 2.0) / h;
            dx.abs() <= t * w / 2.0
        }
    }
}

fn current_size(o: &ObjectState, t: usize) -> (f64, f64) {
    // ±15% sinusoidal deformation
    let s = 1.0 + 0.15 * (2.0 * std::f64::consts::PI * t as f64 / 20.0 + o.phase).sin();
    (o.base_w * s, o.base_h * s)
}

fn clipped_box(o: &ObjectState, t: usize, spec: &SceneSpec) -> [f64; 4] {
    let (w, h) = current_size(o, t);
    let x1 = (o.cx - w / 2.0).max(0.0);
    let y1 = (o.cy - h / 2.0).max(0.0);
    let x2 = (o.cx + w / 2.0).min(spec.width as f64);
    let y2 = (o.cy + h / 2.0).min(spec.height as f64);
    [
        (x1 + x2) / 2.0 / spec.width as f64,
        (y1 + y2) / 2.0 / spec.height as f64,
        (x2 - x1) / spec.width as f64,
        (y2 - y1) / spec.height as f64,
    ]
}

fn box_blur(img: &mut Vec<f64>, h: usize, w: usize) {
    let src = img.clone();
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut sum = 0.0;
                let mut n = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let yy = y as i64 + dy;
                        let xx = x as i64 + dx;
                        if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                            sum += src[c * h * w + yy as usize * w + xx as usize];
                            n += 1.0;
                        }
                    }
                }
                img[c * h * w + y * w + x] = sum / n;
            }
        }
    }
}

/// Deterministic per-sequence generation: the RNG is derived from
/// `spec.seed` and the sequence id only.
pub fn generate_sequence(spec: &SceneSpec, sequence_id: u64) -> Result<Sequence> {
    if spec.height == 0 || spec.width == 0 || spec.frames_per_sequence == 0 {
        return Err(Error::Config("scene dimensions and frame count must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(
        spec.seed ^ sequence_id.wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );
    let (hh, ww) = (spec.height as f64, spec.width as f64);
    let mut objects = Vec::with_capacity(spec.objects_per_sequence);
    for _ in 0..spec.objects_per_sequence {
        let shape = match rng.gen_range(0..NUM_CLASSES) {
            0 => Shape::Circle,
            1 => Shape::Square,
            _ => Shape::Triangle,
        };
        let base = rng.gen_range(spec.min_object_size..spec.max_object_size) * hh.min(ww);
        objects.push(ObjectState {
            shape,
            cx: rng.gen_range(0.25 * ww..0.75 * ww),
            cy: rng.gen_range(0.25 * hh..0.75 * hh),
            vx: rng.gen_range(-spec.max_object_speed..=spec.max_object_speed),
            vy: rng.gen_range(-spec.max_object_speed..=spec.max_object_speed),
            base_w: base,
            base_h: base * rng.gen_range(0.8..1.25),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        });
    }
    let mut occluders = Vec::with_capacity(spec.occluder_count);
    for _ in 0..spec.occluder_count {
        occluders.push(Occluder {
            x: rng.gen_range(0.0..ww),
            speed: spec.occluder_speed * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
            width: rng.gen_range(spec.min_occluder_width..spec.max_occluder_width) * ww,
        });
    }

    let mut frames = Vec::with_capacity(spec.frames_per_sequence);
    let mut annotations = Vec::with_capacity(spec.frames_per_sequence);
    for t in 0..spec.frames_per_sequence {
        let mut img = vec![0.0; 3 * spec.height * spec.width];
        for c in 0..3 {
            img[c * spec.height * spec.width..(c + 1) * spec.height * spec.width].fill(BG[c]);
        }
        let mut total = vec![0usize; objects.len()];
        let mut hidden = vec![0usize; objects.len()];
        // objects first (later objects draw on top), occluders last
        let mut owner: Vec<Option<usize>> = vec![None; spec.height * spec.width];
        for (oi, o) in objects.iter().enumerate() {
            let (w, h) = current_size(o, t);
            let x_lo = ((o.cx - w / 2.0).floor().max(0.0)) as usize;
            let x_hi = ((o.cx + w / 2.0).ceil() as usize).min(spec.width);
            let y_lo = ((o.cy - h / 2.0).floor().max(0.0)) as usize;
            let y_hi = ((o.cy + h / 2.0).ceil() as usize).min(spec.height);
            for y in y_lo..y_hi {
                for x in x_lo..x_hi {
                    if shape_contains(o, w, h, x as f64 + 0.5, y as f64 + 0.5) {
                        owner[y * spec.width + x] = Some(oi);
                    }
                }
            }
        }
        for (idx, own) in owner.iter().enumerate() {
            if let Some(oi) = own {
                total[*oi] += 1;
                let color = CLASS_COLORS[objects[*oi].shape.class_id()];
                for c in 0..3 {
                    img[c * spec.height * spec.width + idx] = color[c];
                }
            }
        }
        for occ in &occluders {
            let x = occ.x.rem_euclid(ww);
            for px in 0..spec.width {
                let center = px as f64 + 0.5;
                // wrap-around bar coverage
                let d = (center - x).rem_euclid(ww);
                if d <= occ.width {
                    for y in 0..spec.height {
                        let idx = y * spec.width + px;
                        if let Some(oi) = owner[idx] {
                            hidden[oi] += 1;
                        }
                        for c in 0..3 {
                            img[c * spec.height * spec.width + idx] = OCCLUDER_COLOR[c];
                        }
                    }
                }
            }
        }
        if spec.blur {
            box_blur(&mut img, spec.height, spec.width);
        }
        frames.push(FrameImage::new(spec.height, spec.width, img)?);

        let mut objs = Vec::with_capacity(objects.len());
        for (oi, o) in objects.iter().enumerate() {
            let bbox = clipped_box(o, t, spec);
            if bbox[2] <= 0.0 || bbox[3] <= 0.0 {
                continue; // fully outside the frame
            }
            let occluded = total[oi] == 0
                || hidden[oi] as f64 / total[oi] as f64 >= spec.occlusion_threshold;
            objs.push(Annotation {
                class: o.shape.class_id(),
                bbox,
                occluded,
            });
        }
        annotations.push(FrameAnnotations { frame: t, objects: objs });

        // advance the world; objects bounce off the walls
        for o in &mut objects {
            o.cx += o.vx;
            o.cy += o.vy;
            if o.cx < 0.15 * ww || o.cx > 0.85 * ww {
                o.vx = -o.vx;
                o.cx = o.cx.clamp(0.15 * ww, 0.85 * ww);
            }
            if o.cy < 0.15 * hh || o.cy > 0.85 * hh {
                o.vy = -o.vy;
                o.cy = o.cy.clamp(0.15 * hh, 0.85 * hh);
            }
        }
        for occ in &mut occluders {
            occ.x += occ.speed;
        }
    }
    Ok(Sequence { frames, annotations })
}

// ---------------------------------------------------------------- disk I/O

pub fn write_ppm(path: &Path, img: &FrameImage) -> Result<()> {
    let mut buf = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    let plane = img.height * img.width;
    for i in 0..plane {
        for c in 0..3 {
            let v = (img.data[c * plane + i] * 255.0).round().clamp(0.0, 255.0) as u8;
            buf.push(v);
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<FrameImage> {
    let mut raw = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    // header: magic, width, height, maxval — whitespace separated, then one
    // whitespace byte before the pixel data
    let mut fields = Vec::new();
    let mut pos = 0usize;
    while fields.len() < 4 && pos < raw.len() {
        while pos < raw.len() && raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < raw.len() && raw[pos] == b'#' {
            while pos < raw.len() && raw[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&raw[start..pos]).unwrap_or("").to_string());
    }
    if fields.len() < 4 || fields[0] != "P6" {
        return Err(Error::Format(format!("{}: not a P6 ppm", path.display())));
    }
    let width: usize = fields[1].parse().map_err(|_| Error::Format("bad ppm width".into()))?;
    let height: usize = fields[2].parse().map_err(|_| Error::Format("bad ppm height".into()))?;
    if fields[3] != "255" {
        return Err(Error::Format("ppm maxval must be 255".into()));
    }
    pos += 1; // single whitespace after maxval
    let need = 3 * width * height;
    if raw.len() < pos + need {
        return Err(Error::Format(format!(
            "{}: truncated pixel data",
            path.display()
        )));
    }
    let plane = width * height;
    let mut data = vec![0.0; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = raw[pos + 3 * i + c] as f64 / 255.0;
        }
    }
    FrameImage::new(height, width, data)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SceneSpec,
    pub sequences: Vec<String>,
    pub num_classes: usize,
}

/// On-disk layout:
/// ```text
/// dir/manifest.json
/// dir/seq_000/frame_00000.ppm ...
/// dir/seq_000/ann.jsonl
/// ```
pub fn generate_dataset(dir: &Path, spec: &SceneSpec, num_sequences: usize) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::with_capacity(num_sequences);
    for s in 0..num_sequences {
        let name = format!("seq_{s:03}");
        let sdir = dir.join(&name);
        fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
        let seq = generate_sequence(spec, s as u64)?;
        for (t, frame) in seq.frames.iter().enumerate() {
            write_ppm(&sdir.join(format!("frame_{t:05}.ppm")), frame)?;
        }
        let ann_path = sdir.join("ann.jsonl");
        let mut out = fs::File::create(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
        for fa in &seq.annotations {
            let line = serde_json::to_string(fa)
                .map_err(|e| Error::Format(format!("annotation encode: {e}")))?;
            writeln!(out, "{line}").map_err(|e| Error::io(&ann_path, e))?;
        }
        names.push(name);
    }
    let manifest = Manifest {
        spec: spec.clone(),
        sequences: names,
        num_classes: NUM_CLASSES,
    };
    let mpath = dir.join("manifest.json");
    let body = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest encode: {e}")))?;
    fs::write(&mpath, body).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    /// annotations[seq][frame]
    pub annotations: Vec<Vec<FrameAnnotations>>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Dataset> {
        let mpath = dir.join("manifest.json");
        let body = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&body)
            .map_err(|e| Error::Format(format!("manifest decode: {e}")))?;
        let mut annotations = Vec::with_capacity(manifest.sequences.len());
        for name in &manifest.sequences {
            let apath = dir.join(name).join("ann.jsonl");
            let text = fs::read_to_string(&apath).map_err(|e| Error::io(&apath, e))?;
            let mut frames = Vec::new();
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let fa: FrameAnnotations = serde_json::from_str(line)
                    .map_err(|e| Error::Format(format!("{}: {e}", apath.display())))?;
                frames.push(fa);
            }
            annotations.push(frames);
        }
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest,
            annotations,
        })
    }

    pub fn frame(&self, seq: usize, t: usize) -> Result<FrameImage> {
        let name = &self.manifest.sequences[seq];
        read_ppm(&self.dir.join(name).join(format!("frame_{t:05}.ppm")))
    }

    pub fn sequence_len(&self, seq: usize) -> usize {
        self.annotations[seq].len()
    }
}

/// Candidate context frames for target `t`: the window [t-l, t+l] clamped to
/// the sequence, excluding t itself.
pub fn context_window(seq_len: usize, t: usize, l: usize) -> Vec<usize> {
    let lo = t.saturating_sub(l);
    let hi = (t + l).min(seq_len.saturating_sub(1));
    (lo..=hi).filter(|i| *i != t).collect()
}

/// Random context sample for training: `n_ctx` distinct frames drawn from the
/// window around `t`.
pub fn sample_context(
    rng: &mut ChaCha8Rng,
    seq_len: usize,
    t: usize,
    l: usize,
    n_ctx: usize,
) -> Result<Vec<usize>> {
    let mut window = context_window(seq_len, t, l);
    if window.len() < n_ctx {
        return Err(Error::Contract(format!(
            "context window around frame {t} has {} candidates, need {n_ctx}",
            window.len()
        )));
    }
    let mut picked = Vec::with_capacity(n_ctx);
    for _ in 0..n_ctx {
        let i = rng.gen_range(0..window.len());
        picked.push(window.swap_remove(i));
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Deterministic context for evaluation: the `n_ctx` nearest frames,
/// preferring earlier ones on ties.
pub fn nearest_context(seq_len: usize, t: usize, l: usize, n_ctx: usize) -> Result<Vec<usize>> {
    let mut window = context_window(seq_len, t, l);
    if window.len() < n_ctx {
        return Err(Error::Contract(format!(
            "context window around frame {t} has {} candidates, need {n_ctx}",
            window.len()
        )));
    }
    window.sort_by_key(|i| {
        let d = (*i as i64 - t as i64).abs();
        (d, *i as i64)
    });
    let mut picked: Vec<usize> = window.into_iter().take(n_ctx).collect();
    picked.sort_unstable();
    Ok(picked)
}
