//! Procedural three-class chest phantoms and the synthetic X-ray style gap.
//!
//! Geometry is sampled in voxel units from a [`GeometryPrior`], rendered by
//! point-in-shape tests at voxel centres, and labelled Healthy, Sick or TB by
//! the lesions it carries. Unpaired sets use a wider prior and a photometric
//! [`StyleShiftParams`] so that their X-rays come from a different
//! distribution than the DRRs used for paired training.

mod manifest;

pub use manifest::{
    load_paired_dataset, load_unpaired_set, read_manifest, save_paired_dataset,
    save_unpaired_set, DatasetKind, DatasetManifest, ManifestEntry, MANIFEST_FILE,
};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::projection::drr;
use crate::volume::{PairedDataset, PairedSample, StyleTag, UnpairedXraySet, Volume, XrayImage};

/// Minimum side length for which lesion placement is supported.
pub const MIN_PHANTOM_SIDE: usize = 16;

const MAX_PLACEMENT_RETRIES: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Healthy,
    Sick,
    Tb,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [ClassLabel::Healthy, ClassLabel::Sick, ClassLabel::Tb];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Healthy => "healthy",
            ClassLabel::Sick => "sick",
            ClassLabel::Tb => "tb",
        }
    }
}

/// Axis-aligned ellipsoid in voxel coordinates `(d, h, w)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
}

impl Ellipsoid {
    #[inline]
    pub fn norm2(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| {
                let t = (p[a] - self.center[a]) / self.semi_axes[a];
                t * t
            })
            .sum()
    }

    #[inline]
    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.norm2(p) <= 1.0
    }

    fn inside_box(&self, dims: [usize; 3]) -> bool {
        (0..3).all(|a| {
            self.center[a] - self.semi_axes[a] >= 0.0
                && self.center[a] + self.semi_axes[a] <= dims[a] as f64
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LesionKind {
    Nodule,
    Cavity,
    Infiltrate,
}

/// Spherical lesion. For cavities `radius` is the void radius; a wall of
/// [`Attenuation::cavity_wall`] voxels surrounds it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub kind: LesionKind,
    pub center: [f64; 3],
    pub radius: f64,
    pub attenuation_delta: f64,
}

impl Lesion {
    /// Radius of the full footprint including a cavity wall.
    pub fn outer_radius(&self, wall: f64) -> f64 {
        match self.kind {
            LesionKind::Cavity => self.radius + wall,
            _ => self.radius,
        }
    }

    #[inline]
    fn dist2(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|a| (p[a] - self.center[a]).powi(2)).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ribs {
    pub count: usize,
    pub thickness: f64,
    pub attenuation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub body: Ellipsoid,
    pub lungs: [Ellipsoid; 2],
    pub ribs: Ribs,
    pub lesions: Vec<Lesion>,
    pub label: ClassLabel,
}

/// Tissue attenuation defaults in normalized units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attenuation {
    pub body: f64,
    pub lung: f64,
    pub rib: f64,
    pub nodule: f64,
    pub cavity: f64,
    /// Wall thickness around cavity voids, in voxels at side 32.
    pub cavity_wall: f64,
    pub infiltrate_delta: (f64, f64),
    /// Inner scale of the rib shell relative to the body cross-section.
    pub rib_shell: f64,
}

impl Default for Attenuation {
    fn default() -> Self {
        Self {
            body: 0.35,
            lung: 0.08,
            rib: 0.85,
            nodule: 0.6,
            cavity: 0.05,
            cavity_wall: 1.0,
            infiltrate_delta: (0.17, 0.25),
            rib_shell: 0.88,
        }
    }
}

/// Sampling ranges for phantom geometry, as fractions of the side length
/// unless noted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryPrior {
    pub center_jitter: f64,
    pub body_depth: (f64, f64),
    pub body_height: (f64, f64),
    pub body_width: (f64, f64),
    /// Lung centre offset from the midline, as a fraction of the body width semi-axis.
    pub lung_offset: (f64, f64),
    pub lung_jitter: f64,
    pub rib_count: (usize, usize),
    /// Rib thickness in voxels at side 32.
    pub rib_thickness: (f64, f64),
    /// Lesion radii in voxels at side 32.
    pub nodule_radius: (f64, f64),
    pub cavity_radius: (f64, f64),
    pub infiltrate_radius: (f64, f64),
}

impl GeometryPrior {
    /// Prior for the paired (CT-bearing) population.
    pub fn paired() -> Self {
        Self {
            center_jitter: 0.015,
            body_depth: (0.29, 0.33),
            body_height: (0.41, 0.45),
            body_width: (0.39, 0.43),
            lung_offset: (0.40, 0.44),
            lung_jitter: 0.01,
            rib_count: (5, 7),
            rib_thickness: (1.0, 1.5),
            nodule_radius: (1.6, 2.4),
            cavity_radius: (1.6, 2.4),
            infiltrate_radius: (2.6, 3.4),
        }
    }

    /// Wider prior for the X-ray-only population.
    pub fn shifted() -> Self {
        Self {
            center_jitter: 0.03,
            body_depth: (0.26, 0.35),
            body_height: (0.38, 0.47),
            body_width: (0.35, 0.46),
            lung_offset: (0.38, 0.45),
            lung_jitter: 0.02,
            rib_count: (4, 8),
            rib_thickness: (0.9, 1.8),
            nodule_radius: (1.5, 2.6),
            cavity_radius: (1.5, 2.6),
            infiltrate_radius: (2.4, 3.6),
        }
    }
}

/// Full phantom configuration: tissue values plus the two population priors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub attenuation: Attenuation,
    pub paired_prior: GeometryPrior,
    pub shifted_prior: GeometryPrior,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            attenuation: Attenuation::default(),
            paired_prior: GeometryPrior::paired(),
            shifted_prior: GeometryPrior::shifted(),
        }
    }
}

/// Class proportions in `Healthy, Sick, TB` order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMix(pub [f64; 3]);

impl ClassMix {
    pub fn new(p: [f64; 3]) -> Result<Self> {
        if p.iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return Err(Error::Config("class mix entries must be non-negative".into()));
        }
        if (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("class mix must sum to 1".into()));
        }
        Ok(Self(p))
    }

    pub fn uniform() -> Self {
        Self([1.0 / 3.0; 3])
    }

    /// Largest-remainder apportionment of `n` items; ties go to the lower class index.
    pub fn apportion(&self, n: usize) -> [usize; 3] {
        let quotas: Vec<f64> = self.0.iter().map(|&p| p * n as f64).collect();
        let mut counts = [0usize; 3];
        for (c, q) in counts.iter_mut().zip(&quotas) {
            *c = q.floor() as usize;
        }
        let assigned: usize = counts.iter().sum();
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| {
            let ra = quotas[a] - quotas[a].floor();
            let rb = quotas[b] - quotas[b].floor();
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        for &c in order.iter().take(n.saturating_sub(assigned)) {
            counts[c] += 1;
        }
        counts
    }
}

impl std::str::FromStr for ClassMix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("class mix: {e}")))?;
        if parts.len() != 3 {
            if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Config("class mix must sum to 1".into()));
            }
            return Err(Error::Config(format!(
                "class mix needs 3 entries (healthy,sick,tb), got {}",
                parts.len()
            )));
        }
        Self::new([parts[0], parts[1], parts[2]])
    }
}

/// Photometric perturbation separating "real" X-rays from DRRs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleShiftParams {
    pub gamma: f64,
    pub contrast: f64,
    pub noise_sigma: f64,
    pub vignette: f64,
}

impl StyleShiftParams {
    pub fn identity() -> Self {
        Self {
            gamma: 1.0,
            contrast: 1.0,
            noise_sigma: 0.0,
            vignette: 0.0,
        }
    }
}

impl Default for StyleShiftParams {
    fn default() -> Self {
        Self::identity()
    }
}

/// Independent seed streams derived from one master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeedStream {
    Paired,
    Unpaired,
}

impl SeedStream {
    fn tag(self) -> u64 {
        match self {
            SeedStream::Paired => 0x5041_4952_4544_0001,
            SeedStream::Unpaired => 0x554e_5041_4952_0002,
        }
    }
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-sample seed for `index` in `stream` under `master_seed`.
pub fn derive_seed(master_seed: u64, stream: SeedStream, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master_seed) ^ stream.tag()) ^ index)
}

fn uniform(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        rng.random_range(range.0..range.1)
    } else {
        range.0
    }
}

fn voxel_center(d: usize, h: usize, w: usize) -> [f64; 3] {
    [d as f64 + 0.5, h as f64 + 0.5, w as f64 + 0.5]
}

impl PhantomSpec {
    /// Samples body, lungs, ribs and lesions for `label` at the given dims.
    pub fn sample(
        seed: u64,
        label: ClassLabel,
        dims: [usize; 3],
        prior: &GeometryPrior,
        atten: &Attenuation,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d < MIN_PHANTOM_SIDE) {
            return Err(Error::Generation {
                seed,
                detail: format!("dims {dims:?} below minimum side {MIN_PHANTOM_SIDE}"),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = dims.map(|d| d as f64);
        let scale = s.iter().cloned().fold(f64::INFINITY, f64::min) / 32.0;
        let jitter = |rng: &mut ChaCha8Rng, a: usize, amount: f64| {
            s[a] / 2.0 + uniform(rng, (-amount, amount)) * s[a]
        };
        let body = Ellipsoid {
            center: [
                jitter(&mut rng, 0, prior.center_jitter),
                jitter(&mut rng, 1, prior.center_jitter),
                jitter(&mut rng, 2, prior.center_jitter),
            ],
            semi_axes: [
                uniform(&mut rng, prior.body_depth) * s[0],
                uniform(&mut rng, prior.body_height) * s[1],
                uniform(&mut rng, prior.body_width) * s[2],
            ],
        };
        let mut lungs = [body; 2];
        for (i, lung) in lungs.iter_mut().enumerate() {
            let side = if i == 0 { -1.0 } else { 1.0 };
            let offset = uniform(&mut rng, prior.lung_offset) * body.semi_axes[2];
            lung.center = [
                body.center[0] + uniform(&mut rng, (-prior.lung_jitter, prior.lung_jitter)) * s[0],
                body.center[1] - 0.04 * s[1]
                    + uniform(&mut rng, (-prior.lung_jitter, prior.lung_jitter)) * s[1],
                body.center[2] + side * offset,
            ];
            lung.semi_axes = [
                0.62 * body.semi_axes[0],
                0.62 * body.semi_axes[1],
                0.36 * body.semi_axes[2],
            ];
        }
        let ribs = Ribs {
            count: rng.random_range(prior.rib_count.0..=prior.rib_count.1),
            thickness: uniform(&mut rng, prior.rib_thickness) * scale,
            attenuation: atten.rib,
        };
        let mut spec = PhantomSpec {
            seed,
            body,
            lungs,
            ribs,
            lesions: Vec::new(),
            label,
        };

        let plan: Vec<LesionKind> = match label {
            ClassLabel::Healthy => vec![],
            ClassLabel::Sick => vec![LesionKind::Infiltrate; rng.random_range(1..=2)],
            ClassLabel::Tb => {
                if rng.random_bool(0.5) {
                    let mut v = vec![LesionKind::Cavity];
                    v.extend(std::iter::repeat_n(LesionKind::Nodule, rng.random_range(0..=1)));
                    v
                } else {
                    vec![LesionKind::Nodule; rng.random_range(2..=3)]
                }
            }
        };
        for kind in plan {
            let lesion = place_lesion(&mut rng, &spec, kind, prior, atten, scale, dims)?;
            spec.lesions.push(lesion);
        }
        Ok(spec)
    }

    /// Checks the label invariants and that all geometry fits in `dims`.
    pub fn validate(&self, dims: [usize; 3], wall: f64) -> Result<()> {
        let fail = |detail: String| Error::Generation {
            seed: self.seed,
            detail,
        };
        let count = |k: LesionKind| self.lesions.iter().filter(|l| l.kind == k).count();
        let ok = match self.label {
            ClassLabel::Healthy => self.lesions.is_empty(),
            ClassLabel::Sick => count(LesionKind::Infiltrate) >= 1 && count(LesionKind::Cavity) == 0,
            ClassLabel::Tb => count(LesionKind::Cavity) >= 1 || count(LesionKind::Nodule) >= 2,
        };
        if !ok {
            return Err(fail(format!(
                "lesions {:?} violate the {} label invariant",
                self.lesions.iter().map(|l| l.kind).collect::<Vec<_>>(),
                self.label.name()
            )));
        }
        if !self.body.inside_box(dims) || !self.lungs.iter().all(|l| l.inside_box(dims)) {
            return Err(fail("body or lung geometry exceeds the volume bounds".into()));
        }
        for l in &self.lesions {
            let r = l.outer_radius(wall);
            if (0..3).any(|a| l.center[a] - r < 0.0 || l.center[a] + r > dims[a] as f64) {
                return Err(fail(format!("{:?} lesion exceeds the volume bounds", l.kind)));
            }
        }
        Ok(())
    }
}

/// Voxel centres within `r` of `c`, clipped to the volume.
fn ball_voxels(c: [f64; 3], r: f64, dims: [usize; 3]) -> impl Iterator<Item = [usize; 3]> {
    let lo = |a: usize| ((c[a] - r - 0.5).floor().max(0.0)) as usize;
    let hi = |a: usize| (((c[a] + r - 0.5).ceil()) as usize).min(dims[a] - 1);
    let (d0, d1, h0, h1, w0, w1) = (lo(0), hi(0), lo(1), hi(1), lo(2), hi(2));
    (d0..=d1).flat_map(move |d| {
        (h0..=h1).flat_map(move |h| {
            (w0..=w1).filter_map(move |w| {
                let p = voxel_center(d, h, w);
                let dist2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
                (dist2 <= r * r).then_some([d, h, w])
            })
        })
    })
}

fn place_lesion(
    rng: &mut ChaCha8Rng,
    spec: &PhantomSpec,
    kind: LesionKind,
    prior: &GeometryPrior,
    atten: &Attenuation,
    scale: f64,
    dims: [usize; 3],
) -> Result<Lesion> {
    let wall = atten.cavity_wall * scale;
    for _ in 0..MAX_PLACEMENT_RETRIES {
        let (radius, delta) = match kind {
            LesionKind::Nodule => (uniform(rng, prior.nodule_radius) * scale, atten.nodule - atten.lung),
            LesionKind::Cavity => (uniform(rng, prior.cavity_radius) * scale, atten.nodule - atten.lung),
            LesionKind::Infiltrate => (
                uniform(rng, prior.infiltrate_radius) * scale,
                uniform(rng, atten.infiltrate_delta),
            ),
        };
        let lung = spec.lungs[rng.random_range(0..2)];
        let u = [
            uniform(rng, (-1.0, 1.0)),
            uniform(rng, (-1.0, 1.0)),
            uniform(rng, (-1.0, 1.0)),
        ];
        if u.iter().map(|x| x * x).sum::<f64>() > 1.0 {
            continue;
        }
        let center = [
            lung.center[0] + u[0] * lung.semi_axes[0],
            lung.center[1] + u[1] * lung.semi_axes[1],
            lung.center[2] + u[2] * lung.semi_axes[2],
        ];
        let lesion = Lesion {
            kind,
            center,
            radius,
            attenuation_delta: delta,
        };
        let outer = lesion.outer_radius(wall);
        if (0..3).any(|a| center[a] - outer < 0.0 || center[a] + outer > dims[a] as f64) {
            continue;
        }
        // whole footprint inside the chosen lung, clear of earlier lesions
        if !ball_voxels(center, outer, dims).all(|[d, h, w]| lung.contains(voxel_center(d, h, w))) {
            continue;
        }
        let clear = spec.lesions.iter().all(|o| {
            let min = o.outer_radius(wall) + outer + 1.0;
            lesion.dist2(o.center) >= min * min
        });
        if clear {
            return Ok(lesion);
        }
    }
    Err(Error::Generation {
        seed: spec.seed,
        detail: format!("could not place a {kind:?} lesion after {MAX_PLACEMENT_RETRIES} attempts"),
    })
}

fn render_anatomy(spec: &PhantomSpec, dims: [usize; 3], atten: &Attenuation) -> Vec<f32> {
    let [nd, nh, nw] = dims;
    let mut vox = vec![0f32; nd * nh * nw];
    let body = spec.body;
    let shell = Ellipsoid {
        center: body.center,
        semi_axes: [
            body.semi_axes[0] * atten.rib_shell,
            body.semi_axes[1],
            body.semi_axes[2] * atten.rib_shell,
        ],
    };
    // ribs spaced evenly over the lungs' vertical extent
    let top = spec.lungs.iter().map(|l| l.center[1] - l.semi_axes[1]).fold(f64::INFINITY, f64::min);
    let bottom = spec.lungs.iter().map(|l| l.center[1] + l.semi_axes[1]).fold(f64::NEG_INFINITY, f64::max);
    let rib_heights: Vec<f64> = (0..spec.ribs.count)
        .map(|k| top + (bottom - top) * (k as f64 + 0.5) / spec.ribs.count as f64)
        .collect();
    let half = spec.ribs.thickness / 2.0;
    for d in 0..nd {
        for h in 0..nh {
            for w in 0..nw {
                let p = voxel_center(d, h, w);
                if !body.contains(p) {
                    continue;
                }
                let mut v = atten.body;
                let in_band = rib_heights.iter().any(|&y| (p[1] - y).abs() <= half);
                if in_band {
                    let cross = ((p[0] - shell.center[0]) / shell.semi_axes[0]).powi(2)
                        + ((p[2] - shell.center[2]) / shell.semi_axes[2]).powi(2);
                    if cross > 1.0 {
                        v = spec.ribs.attenuation;
                    }
                }
                if spec.lungs.iter().any(|l| l.contains(p)) {
                    v = atten.lung;
                }
                vox[(d * nh + h) * nw + w] = v as f32;
            }
        }
    }
    vox
}

fn paint_ball(vox: &mut [f32], dims: [usize; 3], c: [f64; 3], r: f64, value: f64) {
    let v = value.clamp(0.0, 1.0) as f32;
    for [d, h, w] in ball_voxels(c, r, dims) {
        vox[(d * dims[1] + h) * dims[2] + w] = v;
    }
}

/// Renders the lesion-free anatomy of `spec`.
pub fn render_without_lesions(spec: &PhantomSpec, dims: [usize; 3], atten: &Attenuation) -> Result<Volume> {
    Volume::new(dims, render_anatomy(spec, dims, atten))
}

/// Renders `spec` into a volume; deterministic in `(spec, dims, atten)`.
pub fn generate_phantom_with(
    spec: &PhantomSpec,
    dims: [usize; 3],
    atten: &Attenuation,
) -> Result<(Volume, ClassLabel)> {
    if dims.iter().any(|&d| d < MIN_PHANTOM_SIDE) {
        return Err(Error::Generation {
            seed: spec.seed,
            detail: format!("dims {dims:?} below minimum side {MIN_PHANTOM_SIDE}"),
        });
    }
    let scale = dims.iter().min().copied().unwrap_or(32) as f64 / 32.0;
    let wall = atten.cavity_wall * scale;
    spec.validate(dims, wall)?;
    let mut vox = render_anatomy(spec, dims, atten);
    for l in &spec.lesions {
        let value = atten.lung + l.attenuation_delta;
        match l.kind {
            LesionKind::Nodule | LesionKind::Infiltrate => paint_ball(&mut vox, dims, l.center, l.radius, value),
            LesionKind::Cavity => {
                paint_ball(&mut vox, dims, l.center, l.radius + wall, value);
                paint_ball(&mut vox, dims, l.center, l.radius, atten.cavity);
            }
        }
    }
    let volume = Volume::new(dims, vox)?.with_meta(spec.clone());
    Ok((volume, spec.label))
}

/// [`generate_phantom_with`] using default attenuation values.
pub fn generate_phantom(spec: &PhantomSpec, dims: [usize; 3]) -> Result<(Volume, ClassLabel)> {
    generate_phantom_with(spec, dims, &Attenuation::default())
}

/// Labels for `n` samples in apportioned counts, shuffled by `seed`.
fn label_sequence(n: usize, mix: &ClassMix, seed: u64) -> Vec<ClassLabel> {
    let counts = mix.apportion(n);
    let mut labels: Vec<ClassLabel> = ClassLabel::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&l, c)| std::iter::repeat_n(l, c))
        .collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(splitmix64(seed)));
    labels
}

/// Paired `(DRR, CT)` samples drawn from the paired prior.
pub fn sample_paired_dataset_with(
    cfg: &PhantomConfig,
    n: usize,
    side: usize,
    mix: &ClassMix,
    master_seed: u64,
) -> Result<PairedDataset> {
    let dims = [side; 3];
    let labels = label_sequence(n, mix, derive_seed(master_seed, SeedStream::Paired, u64::MAX));
    let mut samples = Vec::with_capacity(n);
    for (i, &label) in labels.iter().enumerate() {
        let seed = derive_seed(master_seed, SeedStream::Paired, i as u64);
        let spec = PhantomSpec::sample(seed, label, dims, &cfg.paired_prior, &cfg.attenuation)?;
        let (ct, label) = generate_phantom_with(&spec, dims, &cfg.attenuation)?;
        samples.push(PairedSample {
            xray: drr(&ct),
            ct,
            label,
        });
    }
    Ok(PairedDataset {
        samples,
        master_seed,
    })
}

pub fn sample_paired_dataset(n: usize, side: usize, mix: &ClassMix, master_seed: u64) -> Result<PairedDataset> {
    sample_paired_dataset_with(&PhantomConfig::default(), n, side, mix, master_seed)
}

/// X-ray-only samples: shifted prior, DRR, then style shift. The generating
/// volumes are sealed inside the returned set.
pub fn sample_unpaired_set_with(
    cfg: &PhantomConfig,
    m: usize,
    side: usize,
    mix: &ClassMix,
    shift: &StyleShiftParams,
    master_seed: u64,
) -> Result<UnpairedXraySet> {
    contract!(shift.gamma > 0.0, "style shift gamma must be > 0");
    let dims = [side; 3];
    let labels = label_sequence(m, mix, derive_seed(master_seed, SeedStream::Unpaired, u64::MAX));
    let mut xrays = Vec::with_capacity(m);
    let mut hidden = Vec::with_capacity(m);
    for (i, &label) in labels.iter().enumerate() {
        let seed = derive_seed(master_seed, SeedStream::Unpaired, i as u64);
        let spec = PhantomSpec::sample(seed, label, dims, &cfg.shifted_prior, &cfg.attenuation)?;
        let (ct, _) = generate_phantom_with(&spec, dims, &cfg.attenuation)?;
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x5354_594c_4500_0000));
        xrays.push(style_shift(&drr(&ct), shift, &mut rng));
        hidden.push(ct);
    }
    UnpairedXraySet::new(xrays, hidden, labels, master_seed)
}

pub fn sample_unpaired_set(
    m: usize,
    side: usize,
    mix: &ClassMix,
    shift: &StyleShiftParams,
    master_seed: u64,
) -> Result<UnpairedXraySet> {
    sample_unpaired_set_with(&PhantomConfig::default(), m, side, mix, shift, master_seed)
}

/// `clamp(contrast * p^gamma - vignette * r^2 + noise, 0, 1)` per pixel, where
/// `r` is the distance from the image centre normalized to 1 at the corners.
pub fn style_shift(img: &XrayImage, p: &StyleShiftParams, rng: &mut ChaCha8Rng) -> XrayImage {
    let [rows, cols] = img.dims();
    let noise = (p.noise_sigma > 0.0).then(|| Normal::new(0.0, p.noise_sigma).expect("finite sigma"));
    let mut out = Vec::with_capacity(img.pixels().len());
    for r in 0..rows {
        for c in 0..cols {
            let x = img.get(r, c) as f64;
            let mut v = if p.gamma == 1.0 { x } else { x.powf(p.gamma) };
            v *= p.contrast;
            if p.vignette != 0.0 {
                let dy = (r as f64 + 0.5) / rows as f64 - 0.5;
                let dx = (c as f64 + 0.5) / cols as f64 - 0.5;
                v -= p.vignette * (dx * dx + dy * dy) * 2.0;
            }
            if let Some(n) = &noise {
                v += n.sample(rng);
            }
            out.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    XrayImage::new([rows, cols], out, StyleTag::Shifted).expect("clamped pixels")
}
