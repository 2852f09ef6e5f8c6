//! Procedural low-frame-rate sticker clips with templated captions.
//!
//! A single flat or shaded shape moves over a banded gradient background.
//! Cartoon clips use a flat fill with a dark outline; real clips add a
//! static per-pixel texture and vertical shading. Every frame uses well
//! under 256 distinct colors, so indexed-color encodings are lossless.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::clip::{Clip, CHANNELS, FRAMES, SIZE};
use crate::curation::{Domain, ManifestRecord, Split};
use crate::error::{Error, Result};
use crate::random::{derive_seed, seeded, Rng};
use crate::text::format_caption;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Star,
}

pub const SHAPES: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Star];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    Translate,
    Bounce,
    Wave,
    Rotate,
    Blink,
}

pub const MOTIONS: [Motion; 5] = [Motion::Translate, Motion::Bounce, Motion::Wave, Motion::Rotate, Motion::Blink];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
    Pink,
    Cyan,
}

pub const COLORS: [Color; 8] = [
    Color::Red,
    Color::Green,
    Color::Blue,
    Color::Yellow,
    Color::Purple,
    Color::Orange,
    Color::Pink,
    Color::Cyan,
];

impl Color {
    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 180, 60],
            Color::Blue => [40, 80, 220],
            Color::Yellow => [240, 210, 40],
            Color::Purple => [140, 60, 200],
            Color::Orange => [245, 140, 30],
            Color::Pink => [240, 120, 180],
            Color::Cyan => [40, 200, 210],
        }
    }
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Star => "star",
        }
    }
}

impl Motion {
    pub fn name(self) -> &'static str {
        match self {
            Motion::Translate => "translate",
            Motion::Bounce => "bounce",
            Motion::Wave => "wave",
            Motion::Rotate => "rotate",
            Motion::Blink => "blink",
        }
    }
}

impl Color {
    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Orange => "orange",
            Color::Pink => "pink",
            Color::Cyan => "cyan",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: Shape,
    pub color: Color,
    pub motion: Motion,
    pub background: Color,
    pub domain: Domain,
    /// Radius of the circle enclosing the subject, in pixels.
    pub radius: i32,
    /// Subject center in frame 0; the orbit center is fixed for `Rotate`.
    pub start: (i32, i32),
    /// Per-frame displacement for `Translate`; `Bounce` and `Wave` use `x` only.
    pub velocity: (i32, i32),
}

const BOUNCE: [i32; 4] = [0, 3, 4, 3];
const WAVE: [i32; 4] = [0, 3, 0, -3];
const ORBIT: f64 = 5.0;

impl SceneSpec {
    /// Subject center and rotation angle in frame `t`.
    pub fn pose(&self, t: usize) -> (f64, f64, f64) {
        let (sx, sy) = (self.start.0 as f64, self.start.1 as f64);
        let ti = t as i32;
        match self.motion {
            Motion::Translate => (
                (self.start.0 + ti * self.velocity.0) as f64,
                (self.start.1 + ti * self.velocity.1) as f64,
                0.0,
            ),
            Motion::Bounce => ((self.start.0 + ti * self.velocity.0) as f64, (self.start.1 - BOUNCE[t % 4]) as f64, 0.0),
            Motion::Wave => ((self.start.0 + ti * self.velocity.0) as f64, (self.start.1 + WAVE[t % 4]) as f64, 0.0),
            Motion::Rotate => {
                let a = t as f64 * PI / 4.0;
                (sx + ORBIT * libm::cos(a), sy + ORBIT * libm::sin(a), a)
            }
            Motion::Blink => (sx, sy, 0.0),
        }
    }

    pub fn visible(&self, t: usize) -> bool {
        self.motion != Motion::Blink || t.is_multiple_of(2)
    }

    pub fn validate(&self) -> Result<()> {
        let size = SIZE as f64;
        if self.radius < 2 || 2 * self.radius > SIZE as i32 {
            return Err(Error::Invalid(format!("subject radius {} does not fit a {SIZE}px frame", self.radius)));
        }
        if self.background == self.color {
            return Err(Error::Invalid("background must differ from the subject color".into()));
        }
        let r = self.radius as f64;
        for t in 0..FRAMES {
            let (x, y, _) = self.pose(t);
            if x - r < 0.0 || y - r < 0.0 || x + r > size || y + r > size {
                return Err(Error::Invalid(format!("subject leaves the frame at t={t} (center {x}, {y})")));
            }
        }
        let moving = matches!(self.motion, Motion::Translate | Motion::Bounce | Motion::Wave);
        if moving && self.velocity.0 == 0 && self.velocity.1 == 0 {
            return Err(Error::Invalid("moving subject needs a non-zero velocity".into()));
        }
        if matches!(self.motion, Motion::Bounce | Motion::Wave) && self.velocity.0 == 0 {
            return Err(Error::Invalid("bounce and wave need a horizontal velocity".into()));
        }
        Ok(())
    }

    pub fn motion_phrase(&self) -> &'static str {
        match self.motion {
            Motion::Translate => {
                let (vx, vy) = self.velocity;
                if vx.abs() >= vy.abs() {
                    if vx > 0 {
                        "sliding to the right"
                    } else {
                        "sliding to the left"
                    }
                } else if vy > 0 {
                    "sliding down"
                } else {
                    "sliding up"
                }
            }
            Motion::Bounce => "bouncing along",
            Motion::Wave => "waving across",
            Motion::Rotate => "spinning in a circle",
            Motion::Blink => "blinking on and off",
        }
    }

    pub fn description(&self) -> String {
        format!("a {} {} {}", self.color.name(), self.shape.name(), self.motion_phrase())
    }

    pub fn caption(&self) -> String {
        format_caption(self.domain.as_str(), &self.description())
    }
}

fn inside(shape: Shape, u: f64, v: f64, r: f64) -> bool {
    match shape {
        Shape::Circle => u * u + v * v <= r * r,
        Shape::Square => {
            let h = r * 0.7;
            u.abs() <= h && v.abs() <= h
        }
        Shape::Triangle => {
            // apex up, circumradius r
            let (bottom, half) = (r * 0.5, r * 0.866);
            if v > bottom || v < -r {
                return false;
            }
            let w = half * (v + r) / (bottom + r);
            u.abs() <= w
        }
        Shape::Star => {
            let d = libm::sqrt(u * u + v * v);
            if d > r {
                return false;
            }
            let sector = 2.0 * PI / 10.0;
            let phi = libm::atan2(u, -v).rem_euclid_f(2.0 * PI);
            let frac = (phi / sector) - libm::floor(phi / sector);
            let k = libm::floor(phi / sector) as i64;
            let (outer, inner) = (r, r * 0.45);
            let edge = if k % 2 == 0 {
                outer + (inner - outer) * frac
            } else {
                inner + (outer - inner) * frac
            };
            d <= edge
        }
    }
}

trait RemEuclid {
    fn rem_euclid_f(self, m: f64) -> f64;
}

impl RemEuclid for f64 {
    fn rem_euclid_f(self, m: f64) -> f64 {
        let r = libm::fmod(self, m);
        if r < 0.0 {
            r + m
        } else {
            r
        }
    }
}

/// Subject coverage of frame `t`, row-major `SIZE x SIZE`.
pub fn render_mask(spec: &SceneSpec, t: usize) -> Vec<bool> {
    if !spec.visible(t) {
        return vec![false; SIZE * SIZE];
    }
    let (cx, cy, a) = spec.pose(t);
    let (c, s) = (libm::cos(a), libm::sin(a));
    let r = spec.radius as f64;
    (0..SIZE * SIZE)
        .map(|i| {
            let (x, y) = ((i % SIZE) as f64 + 0.5 - cx, (i / SIZE) as f64 + 0.5 - cy);
            let (u, v) = (c * x + s * y, -s * x + c * y);
            inside(spec.shape, u, v, r)
        })
        .collect()
}

fn scale(rgb: [u8; 3], f: f64, offset: i32) -> [u8; 3] {
    rgb.map(|c| (libm::round(c as f64 * f) as i32 + offset).clamp(0, 255) as u8)
}

/// Renders the clip as interleaved RGB bytes, frame after frame.
pub fn render_rgb(spec: &SceneSpec, seed: u64) -> Result<Vec<u8>> {
    spec.validate()?;
    let mut rng = seeded(seed);
    let texture: Vec<i32> = match spec.domain {
        Domain::Real => (0..SIZE * SIZE).map(|_| 4 * rng.random_range(-2..=2)).collect(),
        Domain::Cartoon => vec![0; SIZE * SIZE],
    };
    let bg = spec.background.rgb();
    let fg = spec.color.rgb();
    let mut out = Vec::with_capacity(FRAMES * SIZE * SIZE * CHANNELS);
    for t in 0..FRAMES {
        let mask = render_mask(spec, t);
        let (_, cy, _) = spec.pose(t);
        for i in 0..SIZE * SIZE {
            let (x, y) = (i % SIZE, i / SIZE);
            let band = (y / 2) as f64 / 15.0;
            let px = if !mask[i] {
                scale(bg, 0.6 + 0.4 * band, texture[i])
            } else {
                match spec.domain {
                    Domain::Cartoon => {
                        let edge = (x == 0 || !mask[i - 1])
                            || (x + 1 == SIZE || !mask[i + 1])
                            || (y == 0 || !mask[i - SIZE])
                            || (y + 1 == SIZE || !mask[i + SIZE]);
                        if edge {
                            [20, 20, 20]
                        } else {
                            fg
                        }
                    }
                    Domain::Real => {
                        let rel = ((y as f64 + 0.5 - cy) / spec.radius as f64).clamp(-1.0, 1.0);
                        let level = libm::floor((rel + 1.0) * 3.5) / 7.0;
                        scale(fg, 1.1 - 0.4 * level, texture[i])
                    }
                }
            };
            out.extend_from_slice(&px);
        }
    }
    Ok(out)
}

/// The clip of `spec` and its caption `"<domain>\t<description>"`.
pub fn gen_clip(spec: &SceneSpec, seed: u64) -> Result<(Clip, String)> {
    let rgb = render_rgb(spec, seed)?;
    let pixels = crate::tensor::Tensor::new(
        &[FRAMES, SIZE, SIZE, CHANNELS],
        rgb.iter().map(|&b| b as f64 / 255.0).collect(),
    )?;
    Ok((Clip::new(pixels)?, spec.caption()))
}

/// A spec with the given motion and domain, other attributes drawn from `rng`.
pub fn random_spec(rng: &mut Rng, motion: Motion, domain: Domain) -> SceneSpec {
    let shape = *SHAPES.choose(rng).expect("non-empty");
    let color = *COLORS.choose(rng).expect("non-empty");
    let background = loop {
        let c = *COLORS.choose(rng).expect("non-empty");
        if c != color {
            break c;
        }
    };
    let speed = rng.random_range(2..=3);
    let radius = rng.random_range(4..=if speed == 3 { 5 } else { 6 });
    let dir = if rng.random_bool(0.5) { 1 } else { -1 };
    let size = SIZE as i32;
    let travel = (FRAMES as i32 - 1) * speed;
    // leftmost start when moving right; mirrored for leftward motion
    let mut span = |lo: i32, hi: i32| rng.random_range(lo..=hi);
    let (start, velocity) = match motion {
        Motion::Translate => {
            let along = span(radius, size - radius - travel);
            let across = span(radius, size - radius);
            let along = if dir > 0 { along } else { size - along };
            if span(0, 1) == 0 {
                ((along, across), (dir * speed, 0))
            } else {
                ((across, along), (0, dir * speed))
            }
        }
        Motion::Bounce | Motion::Wave => {
            let x = span(radius, size - radius - travel);
            let x = if dir > 0 { x } else { size - x };
            let y = if motion == Motion::Bounce {
                span(radius + 4, size - radius)
            } else {
                span(radius + 3, size - radius - 3)
            };
            ((x, y), (dir * speed, 0))
        }
        Motion::Rotate => ((size / 2, size / 2), (0, 0)),
        Motion::Blink => ((span(radius, size - radius), span(radius, size - radius)), (0, 0)),
    };
    SceneSpec {
        shape,
        color,
        motion,
        background,
        domain,
        radius,
        start,
        velocity,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthItem {
    pub spec: SceneSpec,
    pub seed: u64,
    pub clip: Clip,
    pub caption: String,
    pub record: ManifestRecord,
}

pub fn item_id(i: usize) -> String {
    format!("syn{i:05}")
}

/// `n` items balanced across motions and domains: every block of ten holds
/// each (motion, domain) pair once, in seeded order.
pub fn gen_dataset(n: usize, seed: u64) -> Result<Vec<SynthItem>> {
    if n == 0 {
        return Err(Error::Invalid("dataset size must be at least 1".into()));
    }
    let mut combos = Vec::new();
    for m in MOTIONS {
        for d in [Domain::Real, Domain::Cartoon] {
            combos.push((m, d));
        }
    }
    let mut order = Vec::with_capacity(n);
    let mut block = 0u64;
    while order.len() < n {
        let mut c = combos.clone();
        c.shuffle(&mut seeded(derive_seed(seed, block << 32)));
        order.extend(c);
        block += 1;
    }
    (0..n)
        .map(|i| {
            let item_seed = derive_seed(seed, i as u64 + 1);
            let mut rng = seeded(item_seed);
            let (motion, domain) = order[i];
            let spec = random_spec(&mut rng, motion, domain);
            let (clip, caption) = gen_clip(&spec, derive_seed(item_seed, 1))?;
            let id = item_id(i);
            let record = ManifestRecord {
                path: format!("clips/{id}.gif"),
                id,
                frame_count: FRAMES,
                width: SIZE,
                height: SIZE,
                domain,
                caption: spec.description(),
                trigger_words: vec![spec.shape.name().to_string(), spec.motion.name().to_string()],
                ocr_text: Some(String::new()),
                split: Split::Unassigned,
            };
            Ok(SynthItem {
                spec,
                seed: derive_seed(item_seed, 1),
                clip,
                caption,
                record,
            })
        })
        .collect()
}

/// Parses a generated description back into its attributes.
pub fn parse_description(desc: &str) -> Option<(Color, Shape, Motion)> {
    let words: Vec<&str> = desc.split_whitespace().collect();
    if words.len() < 3 || words[0] != "a" {
        return None;
    }
    let color = *COLORS.iter().find(|c| c.name() == words[1])?;
    let shape = *SHAPES.iter().find(|s| s.name() == words[2])?;
    let motion = match words.get(3).copied()? {
        "sliding" => Motion::Translate,
        "bouncing" => Motion::Bounce,
        "waving" => Motion::Wave,
        "spinning" => Motion::Rotate,
        "blinking" => Motion::Blink,
        _ => return None,
    };
    Some((color, shape, motion))
}

#[cfg(test)]
mod tests;

