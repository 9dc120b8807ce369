//! Seeded synthetic CT phantoms: a thorax with two air-filled lungs and an
//! abdomen/ribcage with fine bony tubes, plus domain-shift perturbations.
//!
//! Coordinates are normalised per axis to `(-1, 1)` over the volume, with
//! axis 0 (depth) the anterior-posterior direction seen by the projector,
//! axis 1 the cranio-caudal direction and axis 2 left-right.

use serde::{Deserialize, Serialize};

use drrseg_tensor::RngState;

use crate::error::{Error, Result};
use crate::volume::{threshold_mask, MaskVolume, Volume, VoxelVolume, HU_MAX, HU_MIN};

pub const AIR_HU: f32 = -1000.0;
pub const LUNG_HU: f32 = -800.0;
pub const BONE_LO_HU: f32 = 1800.0;
pub const BONE_HI_HU: f32 = 1900.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhantomKind {
    Thorax,
    Ribcage,
}

impl std::str::FromStr for PhantomKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "thorax" => Ok(PhantomKind::Thorax),
            "ribcage" => Ok(PhantomKind::Ribcage),
            _ => Err(Error::config(format!("unknown phantom kind `{s}` (thorax | ribcage)"))),
        }
    }
}

impl std::fmt::Display for PhantomKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PhantomKind::Thorax => "thorax",
            PhantomKind::Ribcage => "ribcage",
        })
    }
}

/// Random perturbations applied to organ placement.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    /// Maximum centre offset, normalised units.
    pub position: f64,
    /// Maximum relative change of each semi-axis.
    pub scale: f64,
    /// Maximum in-plane rotation, radians.
    pub angle: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    pub dims: [usize; 3],
    pub spacing_mm: f32,
    pub jitter: Jitter,
    /// Soft tissue HU range.
    pub soft_tissue_hu: (f32, f32),
    /// Lung parenchyma HU range (thorax).
    pub lung_hu: (f32, f32),
    /// Bone HU range (ribcage ribs).
    pub bone_hu: (f32, f32),
    /// Accepted lung-to-body volume fraction (thorax).
    pub lung_fraction: (f64, f64),
}

impl PhantomSpec {
    pub fn new(kind: PhantomKind, dims: [usize; 3]) -> Self {
        PhantomSpec {
            kind,
            dims,
            spacing_mm: 1.0,
            jitter: Jitter {
                position: 0.05,
                scale: 0.08,
                angle: 0.15,
            },
            soft_tissue_hu: (0.0, 60.0),
            lung_hu: (-830.0, -770.0),
            bone_hu: (BONE_LO_HU, BONE_HI_HU),
            lung_fraction: (0.08, 0.20),
        }
    }

    pub fn thorax(n: usize) -> Self {
        Self::new(PhantomKind::Thorax, [n; 3])
    }

    pub fn ribcage(n: usize) -> Self {
        Self::new(PhantomKind::Ribcage, [n; 3])
    }

    fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 16) {
            return Err(Error::config(format!(
                "phantom dims must be >= 16, got {:?}",
                self.dims
            )));
        }
        if self.dims.iter().any(|&d| d > 512) {
            return Err(Error::config(format!(
                "phantom dims must be <= 512, got {:?}",
                self.dims
            )));
        }
        if !(self.spacing_mm > 0.0 && self.spacing_mm.is_finite()) {
            return Err(Error::config("spacing must be positive"));
        }
        let j = &self.jitter;
        if !(0.0..0.3).contains(&j.position) || !(0.0..0.3).contains(&j.scale) || !(0.0..1.0).contains(&j.angle) {
            return Err(Error::config(format!("jitter out of range: {j:?}")));
        }
        for (name, (lo, hi)) in [
            ("soft_tissue_hu", self.soft_tissue_hu),
            ("lung_hu", self.lung_hu),
            ("bone_hu", self.bone_hu),
        ] {
            if !(HU_MIN <= lo && lo <= hi && hi <= HU_MAX) {
                return Err(Error::config(format!("{name} range ({lo}, {hi}) invalid")));
            }
        }
        if self.lung_hu.1 >= -400.0 {
            return Err(Error::config("lung HU must stay below -400"));
        }
        Ok(())
    }

    pub fn generate(&self, seed: u64) -> Result<(VoxelVolume, MaskVolume)> {
        match self.kind {
            PhantomKind::Thorax => generate_thorax(self, seed),
            PhantomKind::Ribcage => generate_ribcage(self, seed),
        }
    }
}

/// Ellipsoid with semi-axes in normalised units, rotated by `angle` in the
/// (cranio-caudal, left-right) plane.
#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
    angle: f64,
}

impl Ellipsoid {
    fn local(&self, p: [f64; 3]) -> [f64; 3] {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let (s, c) = self.angle.sin_cos();
        [d[0], c * d[1] + s * d[2], -s * d[1] + c * d[2]]
    }

    /// Squared normalised radius; `<= 1` inside.
    fn level(&self, p: [f64; 3]) -> f64 {
        let l = self.local(p);
        (0..3).map(|a| (l[a] / self.semi[a]).powi(2)).sum()
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        self.level(p) <= 1.0
    }

    fn surface_point(&self, theta: f64, phi: f64) -> [f64; 3] {
        let l = [
            self.semi[0] * theta.cos(),
            self.semi[1] * theta.sin() * phi.cos(),
            self.semi[2] * theta.sin() * phi.sin(),
        ];
        let (s, c) = self.angle.sin_cos();
        [
            self.center[0] + l[0],
            self.center[1] + c * l[1] - s * l[2],
            self.center[2] + s * l[1] + c * l[2],
        ]
    }

    /// Conservative containment test on a dense set of surface points.
    fn inside(&self, outer: &Ellipsoid, margin: f64) -> bool {
        let n = 24;
        (0..=n).all(|i| {
            let theta = std::f64::consts::PI * i as f64 / n as f64;
            (0..2 * n).all(|j| {
                let phi = std::f64::consts::PI * j as f64 / n as f64;
                outer.level(self.surface_point(theta, phi)) <= (1.0 - margin).powi(2)
            })
        })
    }
}

fn sym(rng: &mut RngState, amp: f64) -> f64 {
    rng.uniform_in(-amp, amp)
}

/// Voxel-centre coordinates in normalised units.
fn coords(dims: [usize; 3]) -> impl Iterator<Item = (usize, [f64; 3])> {
    let [d, h, w] = dims;
    (0..d * h * w).map(move |i| {
        let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
        let n = |k: usize, e: usize| (k as f64 + 0.5) / e as f64 * 2.0 - 1.0;
        (i, [n(z, d), n(y, h), n(x, w)])
    })
}

const BODY_SEMI: [f64; 3] = [0.72, 0.92, 0.88];

/// Smooth soft-tissue background within `range`.
fn soft_tissue(p: [f64; 3], phase: [f64; 2], range: (f32, f32)) -> f32 {
    let t = 0.5 + 0.3 * (2.1 * p[2] + phase[0]).sin() * (1.7 * p[1] + phase[1]).cos() + 0.15 * p[0];
    range.0 + (range.1 - range.0) * t.clamp(0.0, 1.0) as f32
}

fn new_volume(spec: &PhantomSpec, data: Vec<f32>) -> Result<VoxelVolume> {
    Volume::new(spec.dims, [spec.spacing_mm; 3], data)
}

/// Thorax phantom and its lung mask.
pub fn generate_thorax(spec: &PhantomSpec, seed: u64) -> Result<(VoxelVolume, MaskVolume)> {
    spec.validate()?;
    if spec.kind != PhantomKind::Thorax {
        return Err(Error::config("generate_thorax needs a thorax spec"));
    }
    let mut rng = RngState::new(seed).derive("thorax");
    let j = spec.jitter;
    let body = Ellipsoid {
        center: [0.0; 3],
        semi: BODY_SEMI,
        angle: 0.0,
    };
    let phase = [sym(&mut rng, 3.0), sym(&mut rng, 3.0)];
    let lungs: Vec<Ellipsoid> = [-1.0, 1.0]
        .iter()
        .map(|&side| Ellipsoid {
            center: [
                sym(&mut rng, j.position),
                -0.05 + sym(&mut rng, j.position),
                side * 0.42 + sym(&mut rng, j.position),
            ],
            semi: [
                0.34 * (1.0 + sym(&mut rng, j.scale)),
                0.50 * (1.0 + sym(&mut rng, j.scale)),
                0.24 * (1.0 + sym(&mut rng, j.scale)),
            ],
            angle: side * sym(&mut rng, j.angle).abs(),
        })
        .collect();
    for (k, lung) in lungs.iter().enumerate() {
        if !lung.inside(&body, 0.04) {
            return Err(Error::config(format!("lung {k} is not contained in the body envelope")));
        }
    }
    let heart = Ellipsoid {
        center: [
            -0.25 + sym(&mut rng, j.position),
            0.2 + sym(&mut rng, j.position),
            -0.08,
        ],
        semi: [0.3, 0.3, 0.22],
        angle: 0.3,
    };
    let spine = |p: [f64; 3]| (p[0] - 0.52).powi(2) / 0.12f64.powi(2) + p[2].powi(2) / 0.1f64.powi(2) <= 1.0;
    let texture = [sym(&mut rng, 3.0), sym(&mut rng, 3.0), sym(&mut rng, 3.0)];
    let (lo, hi) = spec.lung_hu;

    let mut values = Vec::with_capacity(spec.dims.iter().product());
    let mut mask = Vec::with_capacity(values.capacity());
    for (_, p) in coords(spec.dims) {
        let mut v = AIR_HU;
        let mut m = 0u8;
        if body.contains(p) {
            v = soft_tissue(p, phase, spec.soft_tissue_hu);
            if heart.contains(p) {
                v = spec.soft_tissue_hu.1 - 5.0;
            }
            if spine(p) {
                v = 1100.0;
            }
            if lungs.iter().any(|l| l.contains(p)) {
                let t = 0.5
                    + 0.5
                        * (5.0 * p[0] + texture[0]).sin()
                        * (4.0 * p[1] + texture[1]).sin()
                        * (6.0 * p[2] + texture[2]).cos();
                v = lo + (hi - lo) * t as f32;
                m = 1;
            }
        }
        values.push(v);
        mask.push(m);
    }
    let volume = new_volume(spec, values)?;
    let mask = Volume::new(spec.dims, volume.spacing(), mask)?;
    let body_voxels = coords(spec.dims).filter(|&(_, p)| body.contains(p)).count();
    let fraction = mask.count() as f64 / body_voxels as f64;
    if !(spec.lung_fraction.0..=spec.lung_fraction.1).contains(&fraction) {
        return Err(Error::config(format!(
            "lung fraction {fraction:.3} outside configured range {:?}",
            spec.lung_fraction
        )));
    }
    Ok((volume, mask))
}

/// Point-to-polyline distance in voxel units.
fn polyline_distance(p: [f64; 3], pts: &[[f64; 3]]) -> f64 {
    pts.windows(2)
        .map(|s| {
            let (a, b) = (s[0], s[1]);
            let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
            let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
            let len2: f64 = ab.iter().map(|v| v * v).sum();
            let t = if len2 > 0.0 {
                (ab.iter().zip(&ap).map(|(u, v)| u * v).sum::<f64>() / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            (0..3).map(|k| (ap[k] - t * ab[k]).powi(2)).sum::<f64>().sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Abdomen/ribcage phantom with paired curved ribs; the mask is the bone
/// threshold of the volume.
pub fn generate_ribcage(spec: &PhantomSpec, seed: u64) -> Result<(VoxelVolume, MaskVolume)> {
    spec.validate()?;
    if spec.kind != PhantomKind::Ribcage {
        return Err(Error::config("generate_ribcage needs a ribcage spec"));
    }
    let mut rng = RngState::new(seed).derive("ribcage");
    let j = spec.jitter;
    let dims = spec.dims;
    let half: [f64; 3] = std::array::from_fn(|a| dims[a] as f64 / 2.0);
    let body = Ellipsoid {
        center: [0.0; 3],
        semi: BODY_SEMI,
        angle: 0.0,
    };
    let phase = [sym(&mut rng, 3.0), sym(&mut rng, 3.0)];
    let liver = Ellipsoid {
        center: [
            -0.05 + sym(&mut rng, j.position),
            0.25 + sym(&mut rng, j.position),
            -0.35 + sym(&mut rng, j.position),
        ],
        semi: [
            0.4 * (1.0 + sym(&mut rng, j.scale)),
            0.35,
            0.32 * (1.0 + sym(&mut rng, j.scale)),
        ],
        angle: sym(&mut rng, j.angle),
    };
    let stomach = Ellipsoid {
        center: [
            -0.15 + sym(&mut rng, j.position),
            0.2 + sym(&mut rng, j.position),
            0.35 + sym(&mut rng, j.position),
        ],
        semi: [0.3, 0.25 * (1.0 + sym(&mut rng, j.scale)), 0.22],
        angle: sym(&mut rng, j.angle),
    };
    let gas = Ellipsoid {
        center: [stomach.center[0] - 0.12, stomach.center[1], stomach.center[2]],
        semi: [0.1, 0.12, 0.1],
        angle: 0.0,
    };

    // ribs as polylines in voxel units, pairs mirrored left/right
    let pairs = 4 + rng.below(3);
    let shift = sym(&mut rng, j.position);
    let mut ribs: Vec<(Vec<[f64; 3]>, f64)> = Vec::new();
    for k in 0..pairs {
        let y0 = -0.75 + 1.5 * (k as f64 + 0.5) / pairs as f64 - 0.04 + shift;
        let start = 0.12 * std::f64::consts::PI;
        let reach = std::f64::consts::PI * rng.uniform_in(0.4, 0.55);
        let drop = rng.uniform_in(0.03, 0.08);
        let radius = rng.uniform_in(1.0, 1.3) * (dims[0] as f64 / 32.0).max(1.0);
        for side in [-1.0, 1.0] {
            let ring = 0.86 * (1.0 - (y0 / BODY_SEMI[1]).powi(2)).max(0.2).sqrt();
            let pts: Vec<[f64; 3]> = (0..=24)
                .map(|i| {
                    let t = i as f64 / 24.0;
                    let th = start + t * reach;
                    let p = [
                        BODY_SEMI[0] * ring * th.cos(),
                        y0 + drop * t,
                        side * BODY_SEMI[2] * ring * th.sin(),
                    ];
                    std::array::from_fn(|a| (p[a] + 1.0) * half[a] - 0.5)
                })
                .collect();
            ribs.push((pts, radius));
        }
    }

    let (blo, bhi) = spec.bone_hu;
    let mut values = Vec::with_capacity(dims.iter().product());
    for (i, p) in coords(dims) {
        let mut v = AIR_HU;
        if body.contains(p) {
            v = soft_tissue(p, phase, spec.soft_tissue_hu);
            if liver.contains(p) {
                v = spec.soft_tissue_hu.1 - 2.0;
            }
            if stomach.contains(p) {
                v = spec.soft_tissue_hu.0 + 10.0;
            }
            if gas.contains(p) {
                v = -600.0;
            }
            if (p[0] - 0.6).powi(2) / 0.1f64.powi(2) + p[2].powi(2) / 0.09f64.powi(2) <= 1.0 {
                v = 1150.0;
            }
            let zyx = [
                (i / (dims[1] * dims[2])) as f64,
                ((i / dims[2]) % dims[1]) as f64,
                (i % dims[2]) as f64,
            ];
            if ribs.iter().any(|(pts, r)| polyline_distance(zyx, pts) <= *r) {
                v = blo + (bhi - blo) * rng.uniform() as f32;
            }
        }
        values.push(v);
    }
    let volume = new_volume(spec, values)?;
    let mask = threshold_mask(&volume, blo, bhi);
    Ok((volume, mask))
}

/// Rectangular slab of added attenuation, voxel index ranges `[lo, hi)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Occluder {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
    pub added_hu: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainShiftSpec {
    pub gain: f32,
    pub offset: f32,
    pub noise_sigma: f32,
    pub occluder: Option<Occluder>,
}

impl DomainShiftSpec {
    pub fn identity() -> Self {
        DomainShiftSpec {
            gain: 1.0,
            offset: 0.0,
            noise_sigma: 0.0,
            occluder: None,
        }
    }

    /// Gain/offset change, acquisition noise and a slab artefact covering
    /// part of one lung field, scaled to `dims`.
    pub fn exp3_default(dims: [usize; 3]) -> Self {
        let f = |a: usize, t: f64| (dims[a] as f64 * t).round() as usize;
        DomainShiftSpec {
            gain: 1.15,
            offset: 40.0,
            noise_sigma: 25.0,
            occluder: Some(Occluder {
                lo: [0, f(1, 0.15), f(2, 0.55)],
                hi: [dims[0], f(1, 0.55), f(2, 0.9)],
                added_hu: 700.0,
            }),
        }
    }
}

/// `clamp(gain * v + offset + noise) + slab`, clamped to the HU range.
pub fn apply_domain_shift(v: &VoxelVolume, spec: &DomainShiftSpec, seed: u64) -> Result<VoxelVolume> {
    if !(spec.gain.is_finite() && spec.offset.is_finite() && spec.noise_sigma >= 0.0) {
        return Err(Error::config(format!("invalid domain shift {spec:?}")));
    }
    let dims = v.dims();
    if let Some(o) = &spec.occluder {
        if (0..3).any(|a| o.lo[a] >= o.hi[a] || o.hi[a] > dims[a]) {
            return Err(Error::config(format!("occluder {o:?} outside volume {dims:?}")));
        }
    }
    let mut rng = RngState::new(seed).derive("domain-shift");
    let mut out = v.clone();
    for h in out.data_mut() {
        let mut x = spec.gain * *h + spec.offset;
        if spec.noise_sigma > 0.0 {
            x += spec.noise_sigma * rng.normal() as f32;
        }
        *h = x.clamp(HU_MIN, HU_MAX);
    }
    if let Some(o) = &spec.occluder {
        for z in o.lo[0]..o.hi[0] {
            for y in o.lo[1]..o.hi[1] {
                for x in o.lo[2]..o.hi[2] {
                    let i = out.index(z, y, x);
                    let d = out.data_mut();
                    d[i] = (d[i] + o.added_hu).clamp(HU_MIN, HU_MAX);
                }
            }
        }
    }
    Ok(out)
}
