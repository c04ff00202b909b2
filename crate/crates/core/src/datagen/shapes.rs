//! Shape rasterization and exact pixel-level decoding.
//!
//! Panels are rendered by hard point-in-shape tests at pixel centers with no
//! anti-aliasing, evaluated in f64, then quantized to `u8`. That makes every
//! panel a deterministic function of its shape program on every platform,
//! and it makes the inverse direction exact: a rendered shape can be decoded
//! back to `(kind, size, shade, center)` by template matching, which is what
//! the rule oracles run on.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Grayscale panel stored as raw bytes; intensity is `byte / 255`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Panel {
    pub h: usize,
    pub w: usize,
    pub bytes: Vec<u8>,
}

impl Panel {
    pub fn blank(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            bytes: vec![0; h * w],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.bytes[y * self.w + x]
    }

    /// Intensities in `[0, 1]`, row-major.
    pub fn to_f32(&self) -> Vec<f32> {
        self.bytes.iter().map(|&b| b as f32 / 255.0).collect()
    }

    /// Horizontal mirror (x -> w-1-x).
    pub fn mirrored_x(&self) -> Panel {
        let mut out = Panel::blank(self.h, self.w);
        for y in 0..self.h {
            for x in 0..self.w {
                out.bytes[y * self.w + x] = self.get(y, self.w - 1 - x);
            }
        }
        out
    }

    pub fn is_mirror_symmetric(&self) -> bool {
        for y in 0..self.h {
            for x in 0..self.w / 2 {
                if self.get(y, x) != self.get(y, self.w - 1 - x) {
                    return false;
                }
            }
        }
        true
    }
}

/// The five shape kinds; the discrete "shape" attribute values 1..=5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Triangle,
    Square,
    Diamond,
    Cross,
    Circle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Triangle,
        ShapeKind::Square,
        ShapeKind::Diamond,
        ShapeKind::Cross,
        ShapeKind::Circle,
    ];

    pub fn value(self) -> u8 {
        match self {
            ShapeKind::Triangle => 1,
            ShapeKind::Square => 2,
            ShapeKind::Diamond => 3,
            ShapeKind::Cross => 4,
            ShapeKind::Circle => 5,
        }
    }

    pub fn from_value(v: u8) -> Option<Self> {
        Self::ALL.get(v.checked_sub(1)? as usize).copied()
    }
}

/// Shade values 1..=5 map to exact byte levels so that write/read round-trips
/// are lossless.
pub const SHADE_BYTES: [u8; 5] = [51, 102, 153, 204, 255];

pub fn shade_byte(value: u8) -> u8 {
    SHADE_BYTES[(value - 1) as usize]
}

pub fn shade_value(byte: u8) -> Option<u8> {
    SHADE_BYTES
        .iter()
        .position(|&b| b == byte)
        .map(|i| i as u8 + 1)
}

/// One shape instance placed on a panel.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// Radius in pixels (half-extent scale).
    pub r: f64,
    /// Fill byte.
    pub shade: u8,
    pub cx: f64,
    pub cy: f64,
}

impl ShapeSpec {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let r = self.r;
        match self.kind {
            // Apex-up triangle inscribed in the radius; y grows downward.
            ShapeKind::Triangle => dy <= 0.5 * r && dy >= 1.732_050_8 * dx.abs() - r,
            ShapeKind::Square => dx.abs() <= 0.75 * r && dy.abs() <= 0.75 * r,
            ShapeKind::Diamond => dx.abs() + dy.abs() <= r,
            ShapeKind::Cross => {
                (dx.abs() <= 0.35 * r && dy.abs() <= r) || (dy.abs() <= 0.35 * r && dx.abs() <= r)
            }
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
        }
    }
}

/// Rasterizes shapes onto a blank panel. Overlaps keep the maximum byte, so
/// rendering is order-independent.
pub fn render(h: usize, w: usize, shapes: &[ShapeSpec]) -> Panel {
    let mut panel = Panel::blank(h, w);
    for s in shapes {
        let x0 = ((s.cx - s.r - 1.0).floor().max(0.0)) as usize;
        let x1 = ((s.cx + s.r + 1.0).ceil().min(w as f64 - 1.0)) as usize;
        let y0 = ((s.cy - s.r - 1.0).floor().max(0.0)) as usize;
        let y1 = ((s.cy + s.r + 1.0).ceil().min(h as f64 - 1.0)) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                if s.contains(x as f64, y as f64) {
                    let p = &mut panel.bytes[y * w + x];
                    *p = (*p).max(s.shade);
                }
            }
        }
    }
    panel
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("component with non-uniform intensity")]
    MixedIntensity,
    #[error("intensity {0} is not a shade level")]
    BadShade(u8),
    #[error("component does not match any (kind, size) template")]
    NoTemplateMatch,
    #[error("component matches more than one template")]
    AmbiguousTemplate,
}

/// A shape recovered from pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedShape {
    pub kind: ShapeKind,
    /// Size attribute value 1..=5.
    pub size_value: u8,
    /// Shade attribute value 1..=5.
    pub shade_value: u8,
    pub cx: f64,
    pub cy: f64,
}

/// Radius table plus the center parities the decoder needs to try.
#[derive(Debug, Clone)]
pub struct Geometry {
    pub radii: Vec<f64>,
    /// Fractional parts of (cx, cy) that the generator can produce.
    pub parities: Vec<(f64, f64)>,
}

impl Geometry {
    /// RPM panels: 32x32, one shape centered at (15.5, 15.5).
    pub fn rpm() -> Self {
        Self {
            radii: vec![5.0, 7.0, 9.0, 11.0, 13.0],
            parities: vec![(0.5, 0.5)],
        }
    }

    /// Bongard panels: up to four shapes on a 2x2 cell grid, plus
    /// axis-centered singles for the symmetry family (x parity 0.5).
    ///
    /// Three size levels, spaced so that every (kind, size) raster is
    /// distinct; size is never rule-governed in the Bongard families.
    pub fn bongard(h: usize) -> Self {
        let scale = h as f64 / 32.0;
        let radii = vec![2.75 * scale, 4.0 * scale, 5.5 * scale];
        Self {
            radii,
            parities: vec![(0.0, 0.0), (0.5, 0.0)],
        }
    }

    pub fn size_values(&self) -> u8 {
        self.radii.len() as u8
    }

    pub fn radius(&self, size_value: u8) -> f64 {
        self.radii[(size_value - 1) as usize]
    }
}

struct Template {
    kind: ShapeKind,
    size_value: u8,
    /// Mask pixels relative to the bbox origin, sorted.
    mask: Vec<(i32, i32)>,
    /// Center position relative to the bbox origin.
    center_off: (f64, f64),
}

/// Template tables are immutable per geometry; build them once.
fn cached_templates(geom: &Geometry) -> std::sync::Arc<Vec<Template>> {
    use std::collections::HashMap;
    use std::sync::{Arc, Mutex, OnceLock};
    type Key = (Vec<u64>, Vec<(u64, u64)>);
    static CACHE: OnceLock<Mutex<HashMap<Key, Arc<Vec<Template>>>>> = OnceLock::new();
    let key: Key = (
        geom.radii.iter().map(|r| r.to_bits()).collect(),
        geom.parities
            .iter()
            .map(|(x, y)| (x.to_bits(), y.to_bits()))
            .collect(),
    );
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("template cache lock");
    guard
        .entry(key)
        .or_insert_with(|| Arc::new(build_templates(geom)))
        .clone()
}

fn build_templates(geom: &Geometry) -> Vec<Template> {
    let mut out = Vec::new();
    for kind in ShapeKind::ALL {
        for size in 1u8..=geom.size_values() {
            for &(px, py) in &geom.parities {
                let r = geom.radius(size);
                // Render far from any border on a scratch panel.
                let c = (r + 4.0).ceil() * 2.0;
                let spec = ShapeSpec {
                    kind,
                    r,
                    shade: 255,
                    cx: c + px,
                    cy: c + py,
                };
                let side = (c * 2.0 + 8.0) as usize;
                let panel = render(side, side, std::slice::from_ref(&spec));
                let mut pts = Vec::new();
                let (mut minx, mut miny) = (i32::MAX, i32::MAX);
                for y in 0..side {
                    for x in 0..side {
                        if panel.get(y, x) > 0 {
                            pts.push((x as i32, y as i32));
                            minx = minx.min(x as i32);
                            miny = miny.min(y as i32);
                        }
                    }
                }
                let mut mask: Vec<(i32, i32)> =
                    pts.iter().map(|&(x, y)| (x - minx, y - miny)).collect();
                mask.sort_unstable();
                out.push(Template {
                    kind,
                    size_value: size,
                    mask,
                    center_off: (spec.cx - minx as f64, spec.cy - miny as f64),
                });
            }
        }
    }
    out
}

/// Decodes all shapes on a panel by connected components and exact template
/// matching. Components are returned sorted by (min_y, min_x).
pub fn decode(panel: &Panel, geom: &Geometry) -> Result<Vec<DecodedShape>, DecodeError> {
    let templates = cached_templates(geom);
    let (h, w) = (panel.h, panel.w);
    let mut seen = vec![false; h * w];
    let mut components: Vec<(i32, i32, u8, Vec<(i32, i32)>)> = Vec::new();
    for start in 0..h * w {
        if seen[start] || panel.bytes[start] == 0 {
            continue;
        }
        // BFS over 8-connectivity.
        let mut queue = vec![start];
        seen[start] = true;
        let byte = panel.bytes[start];
        let mut pts = Vec::new();
        let (mut minx, mut miny) = (i32::MAX, i32::MAX);
        let mut uniform = true;
        while let Some(p) = queue.pop() {
            let (y, x) = ((p / w) as i32, (p % w) as i32);
            pts.push((x, y));
            minx = minx.min(x);
            miny = miny.min(y);
            if panel.bytes[p] != byte {
                uniform = false;
            }
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as i32 || nx >= w as i32 {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if !seen[q] && panel.bytes[q] > 0 {
                        seen[q] = true;
                        queue.push(q);
                    }
                }
            }
        }
        if !uniform {
            return Err(DecodeError::MixedIntensity);
        }
        components.push((miny, minx, byte, pts));
    }
    components.sort_by_key(|c| (c.0, c.1));

    let mut shapes = Vec::new();
    for (miny, minx, byte, pts) in components {
        let shade_value = shade_value(byte).ok_or(DecodeError::BadShade(byte))?;
        let mut mask: Vec<(i32, i32)> = pts.iter().map(|&(x, y)| (x - minx, y - miny)).collect();
        mask.sort_unstable();
        let mut matched: Option<&Template> = None;
        for t in templates.iter() {
            if t.mask == mask {
                if matched.is_some() {
                    return Err(DecodeError::AmbiguousTemplate);
                }
                matched = Some(t);
            }
        }
        let t = matched.ok_or(DecodeError::NoTemplateMatch)?;
        shapes.push(DecodedShape {
            kind: t.kind,
            size_value: t.size_value,
            shade_value,
            cx: minx as f64 + t.center_off.0,
            cy: miny as f64 + t.center_off.1,
        });
    }
    Ok(shapes)
}
