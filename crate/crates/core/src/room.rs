//! Shoebox-room ground truth: an image-source simulator producing binaural
//! impulse responses, and the per-boundary-point context features derived
//! from the same synthetic geometry.

use std::f64::consts::PI;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::dsp::Rir;
use crate::error::{invalid, NacfError, Result};

/// Half the number of taps of the fractional-delay kernel (81 taps total).
pub const SINC_HALF_TAPS: i64 = 40;
/// Default ear offset from the head centre, metres.
pub const EAR_OFFSET: f64 = 0.0875;
pub const MAX_IMAGE_ORDER: u32 = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub name: String,
    /// Per-band coefficients, all of the same length `P`.
    pub absorption: Vec<f64>,
    pub scattering: Vec<f64>,
    pub transmission: Vec<f64>,
}

impl Material {
    pub fn bands(&self) -> usize {
        self.absorption.len()
    }

    pub fn mean_absorption(&self) -> f64 {
        mean(&self.absorption)
    }

    /// Frequency-independent pressure reflection coefficient used by the
    /// simulator.
    pub fn reflection(&self) -> f64 {
        (1.0 - self.mean_absorption()).max(0.0).sqrt()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// The six room surfaces, in the order used by [`RoomSpec::surfaces`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Surface {
    /// x = 0
    West,
    /// x = width
    East,
    /// y = 0
    South,
    /// y = length
    North,
    Floor,
    Ceiling,
}

impl Surface {
    pub const ALL: [Surface; 6] = [
        Surface::West,
        Surface::East,
        Surface::South,
        Surface::North,
        Surface::Floor,
        Surface::Ceiling,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

fn default_speed() -> f64 {
    343.0
}

fn default_ear_offset() -> f64 {
    EAR_OFFSET
}

/// A rectangular room and the simulation settings for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub width: f64,
    pub length: f64,
    pub height: f64,
    /// Material index for each surface, ordered west, east, south, north,
    /// floor, ceiling.
    pub surfaces: [usize; 6],
    pub materials: Vec<Material>,
    pub max_image_order: u32,
    #[serde(default = "default_speed")]
    pub speed_of_sound: f64,
    pub sample_rate: u32,
    pub rir_length: usize,
    #[serde(default = "default_ear_offset")]
    pub ear_offset: f64,
}

impl RoomSpec {
    /// The 5 x 4 x 3 m desk-scale scene: plaster, glass and curtain walls, a
    /// wooden floor and an acoustic-tile ceiling, 16 kHz, 4096 samples.
    /// Images up to the maximum order are used so the reverberant tail fills
    /// the whole response instead of stopping where low orders run out.
    pub fn default_scene() -> Self {
        let m = |name: &str, a: [f64; 3], s: [f64; 3], t: [f64; 3]| Material {
            name: name.to_string(),
            absorption: a.to_vec(),
            scattering: s.to_vec(),
            transmission: t.to_vec(),
        };
        Self {
            width: 5.0,
            length: 4.0,
            height: 3.0,
            surfaces: [0, 1, 0, 2, 3, 4],
            materials: vec![
                m("plaster", [0.10, 0.08, 0.05], [0.10, 0.20, 0.30], [0.02, 0.01, 0.01]),
                m("glass", [0.18, 0.06, 0.04], [0.05, 0.05, 0.05], [0.05, 0.03, 0.02]),
                m("curtain", [0.30, 0.45, 0.60], [0.40, 0.50, 0.60], [0.10, 0.08, 0.05]),
                m("wood", [0.15, 0.10, 0.07], [0.20, 0.25, 0.30], [0.03, 0.02, 0.02]),
                m("tile", [0.40, 0.60, 0.70], [0.30, 0.40, 0.50], [0.02, 0.02, 0.01]),
            ],
            max_image_order: MAX_IMAGE_ORDER,
            speed_of_sound: 343.0,
            sample_rate: 16000,
            rir_length: 4096,
            ear_offset: EAR_OFFSET,
        }
    }

    pub fn bands(&self) -> usize {
        self.materials.first().map_or(0, Material::bands)
    }

    pub fn surface_material(&self, s: Surface) -> &Material {
        &self.materials[self.surfaces[s.index()]]
    }

    pub fn reflection_coefficients(&self) -> [f64; 6] {
        Surface::ALL.map(|s| self.surface_material(s).reflection())
    }

    /// Diagonal of the floor footprint, used to normalise spatial features.
    pub fn footprint_diagonal(&self) -> f64 {
        self.width.hypot(self.length)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.width, self.length, self.height];
        if dims.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(invalid(format!("room dimensions must be positive, got {dims:?}")));
        }
        if self.materials.is_empty() {
            return Err(invalid("room has no materials"));
        }
        let bands = self.bands();
        if bands == 0 {
            return Err(invalid("materials need at least one band"));
        }
        for m in &self.materials {
            if m.absorption.len() != bands || m.scattering.len() != bands || m.transmission.len() != bands {
                return Err(invalid(format!("material {} has inconsistent band count", m.name)));
            }
            let coeffs = m.absorption.iter().chain(&m.scattering).chain(&m.transmission);
            if coeffs.clone().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(invalid(format!("material {} has coefficients outside [0, 1]", m.name)));
            }
            if m.absorption.iter().zip(&m.transmission).any(|(a, t)| a + t > 1.0 + 1e-12) {
                return Err(invalid(format!(
                    "material {}: absorption + transmission exceeds 1",
                    m.name
                )));
            }
        }
        if let Some(s) = self.surfaces.iter().find(|&&s| s >= self.materials.len()) {
            return Err(invalid(format!("surface material index {s} out of range")));
        }
        if self.max_image_order > MAX_IMAGE_ORDER {
            return Err(invalid(format!(
                "max_image_order {} exceeds {MAX_IMAGE_ORDER}",
                self.max_image_order
            )));
        }
        if !(self.speed_of_sound.is_finite() && self.speed_of_sound > 0.0) {
            return Err(invalid("speed of sound must be positive"));
        }
        if self.sample_rate == 0 || self.rir_length == 0 {
            return Err(invalid("sample rate and rir length must be positive"));
        }
        if !(self.ear_offset.is_finite() && self.ear_offset >= 0.0) {
            return Err(invalid("ear offset must be non-negative"));
        }
        Ok(())
    }
}

/// Listener head orientation, restricted to the four quadrant directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Orientation {
    Deg0,
    Deg90,
    Deg180,
    Deg270,
}

impl Orientation {
    pub const ALL: [Orientation; 4] = [
        Orientation::Deg0,
        Orientation::Deg90,
        Orientation::Deg180,
        Orientation::Deg270,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn degrees(self) -> u32 {
        90 * self as u32
    }

    pub fn from_degrees(deg: u32) -> Result<Self> {
        match deg {
            0 => Ok(Self::Deg0),
            90 => Ok(Self::Deg90),
            180 => Ok(Self::Deg180),
            270 => Ok(Self::Deg270),
            other => Err(invalid(format!("orientation must be 0, 90, 180 or 270, got {other}"))),
        }
    }

    /// Unit facing direction. Exact for the four quadrants.
    pub fn facing(self) -> [f64; 2] {
        match self {
            Self::Deg0 => [1.0, 0.0],
            Self::Deg90 => [0.0, 1.0],
            Self::Deg180 => [-1.0, 0.0],
            Self::Deg270 => [0.0, -1.0],
        }
    }
}

impl TryFrom<u32> for Orientation {
    type Error = NacfError;

    fn try_from(deg: u32) -> Result<Self> {
        Self::from_degrees(deg)
    }
}

impl From<Orientation> for u32 {
    fn from(o: Orientation) -> u32 {
        o.degrees()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub emitter: [f64; 2],
    pub receiver: [f64; 2],
    pub orientation: Orientation,
    /// Shared height of emitter and receiver.
    pub z: f64,
}

impl Query {
    pub fn validate(&self, room: &RoomSpec) -> Result<()> {
        let inside = |p: [f64; 2]| p[0] > 0.0 && p[0] < room.width && p[1] > 0.0 && p[1] < room.length;
        if !inside(self.emitter) {
            return Err(invalid(format!("emitter {:?} not strictly inside the room", self.emitter)));
        }
        if !inside(self.receiver) {
            return Err(invalid(format!("receiver {:?} not strictly inside the room", self.receiver)));
        }
        if !(self.z > 0.0 && self.z < room.height) {
            return Err(invalid(format!("height {} not strictly inside the room", self.z)));
        }
        Ok(())
    }

    /// Left and right ear positions. The left ear sits 90 degrees
    /// counter-clockwise from the facing direction.
    pub fn ear_positions(&self, offset: f64) -> [[f64; 3]; 2] {
        let [fx, fy] = self.orientation.facing();
        let (lx, ly) = (-fy * offset, fx * offset);
        let [rx, ry] = self.receiver;
        [[rx + lx, ry + ly, self.z], [rx - lx, ry - ly, self.z]]
    }
}

/// Context features of one boundary sample point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryContext {
    /// Ray-cast distances over the inward half-plane, metres.
    pub depth_scan: Vec<f64>,
    /// One-hot material class followed by the mean absorption, scattering
    /// and transmission of that material.
    pub material_desc: Vec<f64>,
    /// `P x 3` row-major: absorption, scattering, transmission per band.
    pub acoustic_coeffs: Vec<f64>,
    pub position: [f64; 2],
    pub emitter_disp: [f64; 2],
    pub receiver_disp: [f64; 2],
}

/// `(cos, sin)` of `pi k / (SINC_HALF_TAPS + 1)` for every tap offset `k`.
fn tap_phases() -> &'static [(f64, f64)] {
    static TABLE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let half_width = (SINC_HALF_TAPS + 1) as f64;
        (-SINC_HALF_TAPS..=SINC_HALF_TAPS)
            .map(|k| {
                let (s, c) = (PI * k as f64 / half_width).sin_cos();
                (c, s)
            })
            .collect()
    })
}

/// Contribution of one image source with fractional sample delay `delay`
/// and amplitude `amp`, added into `out` with an 81-tap Hann-windowed sinc.
///
/// With `x = k - frac`, `sin(pi x) = -(-1)^k sin(pi frac)` and the window
/// cosine splits by the angle-sum identity, so each image needs only two
/// `sin_cos` calls instead of two per tap.
pub(crate) fn add_fractional_impulse(out: &mut [f64], delay: f64, amp: f64) {
    let base = delay.floor();
    let frac = delay - base;
    let base = base as i64;
    let half_width = (SINC_HALF_TAPS + 1) as f64;
    // sin(pi f) = sin(pi (1 - f)); the smaller argument keeps full relative
    // precision when the image sits just before a sample.
    let sin_frac = (PI * frac.min(1.0 - frac)).sin();
    let (ws, wc) = (PI * frac / half_width).sin_cos();
    for (j, &(ck, sk)) in tap_phases().iter().enumerate() {
        let k = j as i64 - SINC_HALF_TAPS;
        let n = base + k;
        if n < 0 || n >= out.len() as i64 {
            continue;
        }
        let x = k as f64 - frac;
        let sinc = if x == 0.0 {
            1.0
        } else {
            let sign = if k % 2 == 0 { -1.0 } else { 1.0 };
            sign * sin_frac / (PI * x)
        };
        let window = 0.5 * (1.0 + ck * wc + sk * ws);
        out[n as usize] += amp * sinc * window;
    }
}

/// Mono image-source response from `src` to `rcv`.
pub fn image_source_response(room: &RoomSpec, src: [f64; 3], rcv: [f64; 3]) -> Result<Vec<f64>> {
    let order = room.max_image_order as i64;
    let beta = room.reflection_coefficients();
    let dims = [room.width, room.length, room.height];
    let len = room.rir_length;
    let samples_per_metre = room.sample_rate as f64 / room.speed_of_sound;
    let horizon = (len as i64 + SINC_HALF_TAPS) as f64 / samples_per_metre;
    let mut out = vec![0.0; len];

    // Per axis: candidate (coordinate offset, reflection count, gain) triples.
    let axis_terms = |axis: usize| {
        let mut terms = Vec::new();
        for n in -order..=order {
            for q in 0..=1i64 {
                let refl_lo = (n - q).unsigned_abs() as i64;
                let refl_hi = n.unsigned_abs() as i64;
                let refl = refl_lo + refl_hi;
                if refl > order {
                    continue;
                }
                let pos = (1 - 2 * q) as f64 * src[axis] + 2.0 * n as f64 * dims[axis];
                let gain = beta[2 * axis].powi(refl_lo as i32) * beta[2 * axis + 1].powi(refl_hi as i32);
                terms.push((pos - rcv[axis], refl, gain));
            }
        }
        terms
    };
    let (xs, ys, zs) = (axis_terms(0), axis_terms(1), axis_terms(2));
    for &(dx, rx, gx) in &xs {
        for &(dy, ry, gy) in &ys {
            if rx + ry > order {
                continue;
            }
            for &(dz, rz, gz) in &zs {
                if rx + ry + rz > order {
                    continue;
                }
                let dist = (dx * dx + dy * dy + dz * dz).sqrt();
                if dist < 1e-9 {
                    return Err(NacfError::DegenerateGeometry(
                        "emitter coincides with an ear position".into(),
                    ));
                }
                if dist > horizon {
                    continue;
                }
                let amp = gx * gy * gz / (4.0 * PI * dist);
                add_fractional_impulse(&mut out, dist * samples_per_metre, amp);
            }
        }
    }
    Ok(out)
}

/// Binaural impulse response for a query: one image-source response per ear.
pub fn simulate_rir(room: &RoomSpec, query: &Query) -> Result<Rir> {
    room.validate()?;
    query.validate(room)?;
    let src = [query.emitter[0], query.emitter[1], query.z];
    let [left_ear, right_ear] = query.ear_positions(room.ear_offset);
    let left = image_source_response(room, src, left_ear)?;
    let right = image_source_response(room, src, right_ear)?;
    Rir::new(left, right, room.sample_rate)
}

/// A point on the floor-plan boundary with the wall it lies on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryPoint {
    pub position: [f64; 2],
    /// Unit normal pointing into the room.
    pub inward: [f64; 2],
    pub wall: Surface,
}

/// `n` points at equal arc length along the footprint, walking
/// counter-clockwise from the (0, 0) corner and starting half a spacing in.
pub fn boundary_points(room: &RoomSpec, n: usize) -> Vec<BoundaryPoint> {
    let (w, l) = (room.width, room.length);
    let perimeter = 2.0 * (w + l);
    (0..n)
        .map(|i| {
            let s = (i as f64 + 0.5) * perimeter / n as f64;
            if s < w {
                BoundaryPoint { position: [s, 0.0], inward: [0.0, 1.0], wall: Surface::South }
            } else if s < w + l {
                BoundaryPoint { position: [w, s - w], inward: [-1.0, 0.0], wall: Surface::East }
            } else if s < 2.0 * w + l {
                BoundaryPoint { position: [w - (s - w - l), l], inward: [0.0, -1.0], wall: Surface::North }
            } else {
                BoundaryPoint { position: [0.0, l - (s - 2.0 * w - l)], inward: [1.0, 0.0], wall: Surface::West }
            }
        })
        .collect()
}

/// Ray directions fanned over the inward half-plane: `-90..=+90` degrees
/// from the normal, endpoints included. A single ray points along the normal.
pub fn ray_fan(inward: [f64; 2], rays: usize) -> Vec<[f64; 2]> {
    let snap = |v: f64| if v.abs() < 1e-12 { 0.0 } else { v };
    (0..rays)
        .map(|k| {
            let phi = if rays == 1 {
                0.0
            } else {
                -PI / 2.0 + PI * k as f64 / (rays - 1) as f64
            };
            let (s, c) = phi.sin_cos();
            [
                snap(c * inward[0] - s * inward[1]),
                snap(s * inward[0] + c * inward[1]),
            ]
        })
        .collect()
}

/// Distance from `p` (inside or on the footprint) along `dir` to the wall.
fn exit_distance(p: [f64; 2], dir: [f64; 2], hi: [f64; 2]) -> f64 {
    let mut t = f64::INFINITY;
    for a in 0..2 {
        if dir[a] > 0.0 {
            t = t.min((hi[a] - p[a]) / dir[a]);
        } else if dir[a] < 0.0 {
            t = t.min(-p[a] / dir[a]);
        }
    }
    t.max(0.0)
}

/// The six context features for each of `n_points` boundary points.
pub fn extract_contexts(room: &RoomSpec, query: &Query, n_points: usize, n_rays: usize) -> Result<Vec<BoundaryContext>> {
    if n_points == 0 || n_rays == 0 {
        return Err(invalid("need at least one boundary point and one ray"));
    }
    room.validate()?;
    let hi = [room.width, room.length];
    let contexts = boundary_points(room, n_points)
        .into_iter()
        .map(|bp| {
            let depth_scan = ray_fan(bp.inward, n_rays)
                .into_iter()
                .map(|d| exit_distance(bp.position, d, hi))
                .collect();
            let mat_index = room.surfaces[bp.wall.index()];
            let mat = &room.materials[mat_index];
            let mut material_desc = vec![0.0; room.materials.len()];
            material_desc[mat_index] = 1.0;
            material_desc.extend([mean(&mat.absorption), mean(&mat.scattering), mean(&mat.transmission)]);
            let acoustic_coeffs = (0..mat.bands())
                .flat_map(|b| [mat.absorption[b], mat.scattering[b], mat.transmission[b]])
                .collect();
            let p = bp.position;
            BoundaryContext {
                depth_scan,
                material_desc,
                acoustic_coeffs,
                position: p,
                emitter_disp: [query.emitter[0] - p[0], query.emitter[1] - p[1]],
                receiver_disp: [query.receiver[0] - p[0], query.receiver[1] - p[1]],
            }
        })
        .collect();
    Ok(contexts)
}
