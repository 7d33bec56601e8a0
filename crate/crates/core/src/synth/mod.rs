//! Procedural "paper-doll" corpus: seeded stick-figure poses, parsing maps
//! consistent with the shape attributes, and images whose garments carry
//! one of four procedural textures.

mod dataset;
mod texture;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use dataset::{dataset_build, default_texture_weights, Corpus, Manifest, ManifestEntry, Sample, Split};
pub use texture::{render_texture, TextureParams};

use crate::error::{Error, Result};
use crate::grid::LabelGrid;
use crate::nn::Tensor;

pub const HEIGHT: usize = 64;
pub const WIDTH: usize = 32;

/// Body-part ids of a [`PoseMap`].
pub mod part {
    pub const BACKGROUND: u8 = 0;
    pub const HEAD: u8 = 1;
    pub const TORSO: u8 = 2;
    pub const LEFT_ARM: u8 = 3;
    pub const RIGHT_ARM: u8 = 4;
    pub const LEFT_LEG: u8 = 5;
    pub const RIGHT_LEG: u8 = 6;
    pub const COUNT: usize = 7;

    pub fn is_arm(p: u8) -> bool {
        p == LEFT_ARM || p == RIGHT_ARM
    }

    pub fn is_leg(p: u8) -> bool {
        p == LEFT_LEG || p == RIGHT_LEG
    }
}

/// Semantic classes of a [`ParsingMap`].
pub mod class {
    pub const BACKGROUND: u8 = 0;
    pub const HEAD: u8 = 1;
    pub const SKIN: u8 = 2;
    pub const UPPER: u8 = 3;
    pub const LOWER: u8 = 4;
    pub const SHOES: u8 = 5;
    pub const COUNT: usize = 6;
}

/// Class counts of (sleeve_length, lower_length, neckline).
pub const SHAPE_CLASS_COUNTS: [usize; 3] = [3, 2, 2];
/// Texture ids including the reserved non-garment id 0.
pub const TEXTURE_IDS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum TextureKind {
    Solid = 1,
    Stripe = 2,
    Plaid = 3,
    Dots = 4,
}

impl TextureKind {
    pub const ALL: [TextureKind; 4] = [TextureKind::Solid, TextureKind::Stripe, TextureKind::Plaid, TextureKind::Dots];

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            1 => Ok(TextureKind::Solid),
            2 => Ok(TextureKind::Stripe),
            3 => Ok(TextureKind::Plaid),
            4 => Ok(TextureKind::Dots),
            other => Err(Error::UnknownTextureKind(other)),
        }
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            TextureKind::Solid => "solid",
            TextureKind::Stripe => "stripe",
            TextureKind::Plaid => "plaid",
            TextureKind::Dots => "dots",
        }
    }
}

/// Shape and texture attributes of one figure. Field names match `attrs.json`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttributeSet {
    pub sleeve_length: u8,
    pub lower_length: u8,
    pub neckline: u8,
    pub upper_texture: u8,
    pub lower_texture: u8,
}

impl AttributeSet {
    pub fn validate(&self) -> Result<()> {
        for (name, v, n) in [
            ("sleeve_length", self.sleeve_length, SHAPE_CLASS_COUNTS[0]),
            ("lower_length", self.lower_length, SHAPE_CLASS_COUNTS[1]),
            ("neckline", self.neckline, SHAPE_CLASS_COUNTS[2]),
        ] {
            if v as usize >= n {
                return Err(Error::InvalidAttribute(format!("{name}={v} (expected < {n})")));
            }
        }
        TextureKind::from_id(self.upper_texture)?;
        TextureKind::from_id(self.lower_texture)?;
        Ok(())
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.sleeve_length as usize, self.lower_length as usize, self.neckline as usize]
    }

    /// Texture id carried by a parsing class: the garment's texture, 0 elsewhere.
    pub fn texture_of_class(&self, label: u8) -> u8 {
        match label {
            class::UPPER => self.upper_texture,
            class::LOWER => self.lower_texture,
            _ => 0,
        }
    }
}

/// Partially specified attributes; absent fields are drawn from the sample seed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub sleeve_length: Option<u8>,
    pub lower_length: Option<u8>,
    pub neckline: Option<u8>,
    pub upper_texture: Option<u8>,
    pub lower_texture: Option<u8>,
}

impl From<AttributeSet> for AttributeSpec {
    fn from(a: AttributeSet) -> Self {
        Self {
            sleeve_length: Some(a.sleeve_length),
            lower_length: Some(a.lower_length),
            neckline: Some(a.neckline),
            upper_texture: Some(a.upper_texture),
            lower_texture: Some(a.lower_texture),
        }
    }
}

/// Body-part label map.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoseMap(LabelGrid);

impl PoseMap {
    pub fn new(grid: LabelGrid) -> Result<Self> {
        if grid.height() % 16 != 0 || grid.width() % 16 != 0 || grid.height() == 0 || grid.width() == 0 {
            return Err(Error::InvalidLabels(format!("pose {}x{} not divisible by 16", grid.height(), grid.width())));
        }
        if grid.max_label() as usize >= part::COUNT {
            return Err(Error::InvalidLabels(format!("pose label {} >= {}", grid.max_label(), part::COUNT)));
        }
        if grid.count(part::TORSO) == 0 {
            return Err(Error::InvalidLabels("pose has no torso".into()));
        }
        Ok(Self(grid))
    }

    pub fn grid(&self) -> &LabelGrid {
        &self.0
    }

    /// One-hot encoding `[7, H, W]`.
    pub fn one_hot(&self) -> Tensor {
        one_hot(&self.0, part::COUNT)
    }
}

/// Semantic parsing map.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsingMap(LabelGrid);

impl ParsingMap {
    pub fn new(grid: LabelGrid) -> Result<Self> {
        if grid.max_label() as usize >= class::COUNT {
            return Err(Error::InvalidLabels(format!("parsing label {} >= {}", grid.max_label(), class::COUNT)));
        }
        Ok(Self(grid))
    }

    pub fn grid(&self) -> &LabelGrid {
        &self.0
    }

    pub fn one_hot(&self) -> Tensor {
        one_hot(&self.0, class::COUNT)
    }

    /// Per-pixel texture ids: garment classes replaced by their texture, 0 elsewhere.
    pub fn texture_map(&self, attrs: &AttributeSet) -> LabelGrid {
        self.0.map(|l| attrs.texture_of_class(l))
    }

    pub fn region(&self, label: u8) -> Vec<bool> {
        self.0.data().iter().map(|&l| l == label).collect()
    }
}

pub fn one_hot(grid: &LabelGrid, classes: usize) -> Tensor {
    let hw = grid.height() * grid.width();
    let mut t = Tensor::zeros(&[classes, grid.height(), grid.width()]);
    for (i, &l) in grid.data().iter().enumerate() {
        t.data_mut()[l as usize * hw + i] = 1.0;
    }
    t
}

/// RGB image with values in `[0, 1]`, stored row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct FigureImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

pub type Rgb = [u8; 3];

pub const BACKGROUND_COLOR: Rgb = [216, 224, 230];

impl FigureImage {
    pub fn filled(height: usize, width: usize, color: Rgb) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend(color.iter().map(|&c| c as f64 / 255.0));
        }
        Self { height, width, data }
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != height * width * 3 {
            return Err(Error::shape(format!("rgb buffer of {} bytes for {height}x{width}", bytes.len())));
        }
        Ok(Self { height, width, data: bytes.iter().map(|&b| b as f64 / 255.0).collect() })
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, color: Rgb) {
        let i = (row * self.width + col) * 3;
        for k in 0..3 {
            self.data[i + k] = color[k] as f64 / 255.0;
        }
    }

    /// Channel-major tensor `[3, H, W]`.
    pub fn to_tensor(&self) -> Tensor {
        let hw = self.height * self.width;
        Tensor::from_fn(&[3, self.height, self.width], |i| self.data[(i % hw) * 3 + i / hw])
    }

    /// Inverse of [`FigureImage::to_tensor`], clamping into `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::shape(format!("image tensor {s:?}")));
        }
        let (h, w) = (s[1], s[2]);
        let hw = h * w;
        let data = (0..hw * 3).map(|i| t.data()[(i % 3) * hw + i / 3].clamp(0.0, 1.0)).collect();
        Ok(Self { height: h, width: w, data })
    }

    pub fn mean_abs_diff(&self, other: &FigureImage) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / self.data.len() as f64
    }
}

/// Output of [`gen_sample`], including the texture parameters needed to re-render garments.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedSample {
    pub pose: PoseMap,
    pub parsing: ParsingMap,
    pub attrs: AttributeSet,
    pub image: FigureImage,
    pub upper_params: TextureParams,
    pub lower_params: TextureParams,
}

/// Seeded skeleton geometry; every value is in canvas pixels.
#[derive(Clone, Copy, Debug)]
struct Skeleton {
    cx: i32,
    head_ry: i32,
    head_rx: i32,
    shoulder_y: i32,
    hip_y: i32,
    torso_half: i32,
    arm_len: i32,
    arm_slant: i32,
    leg_width: i32,
    leg_gap: i32,
    leg_end: i32,
    leg_slant: i32,
}

const ARM_WIDTH: i32 = 4;
const SHOE_ROWS: i32 = 3;
const HEAD_CENTER_Y: i32 = 7;

impl Skeleton {
    fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            cx: rng.random_range(15..=17),
            head_ry: rng.random_range(5..=6),
            head_rx: rng.random_range(4..=5),
            shoulder_y: rng.random_range(15..=16),
            hip_y: rng.random_range(35..=37),
            torso_half: rng.random_range(9..=10),
            arm_len: rng.random_range(21..=24),
            arm_slant: rng.random_range(0..=2),
            leg_width: rng.random_range(11..=12),
            leg_gap: rng.random_range(0..=1),
            leg_end: rng.random_range(61..=62),
            leg_slant: rng.random_range(0..=1),
        }
    }

    /// Column span `[lo, hi)` of an arm at `row`, or `None` outside the arm.
    fn arm_span(&self, row: i32, left: bool) -> Option<(i32, i32)> {
        let t = row - self.shoulder_y;
        if t < 0 || t >= self.arm_len {
            return None;
        }
        let shift = (self.arm_slant * t + self.arm_len / 2) / self.arm_len;
        Some(if left {
            let hi = self.cx - self.torso_half - shift;
            (hi - ARM_WIDTH, hi)
        } else {
            let lo = self.cx + self.torso_half + shift;
            (lo, lo + ARM_WIDTH)
        })
    }

    fn leg_span(&self, row: i32, left: bool) -> Option<(i32, i32)> {
        let len = self.leg_end - self.hip_y;
        let t = row - self.hip_y;
        if t < 0 || t >= len {
            return None;
        }
        let shift = (self.leg_slant * t + len / 2) / len;
        Some(if left {
            let hi = self.cx - self.leg_gap - shift;
            (hi - self.leg_width, hi)
        } else {
            let lo = self.cx + self.leg_gap + shift;
            (lo, lo + self.leg_width)
        })
    }

    fn pose(&self) -> LabelGrid {
        let mut g = LabelGrid::filled(HEIGHT, WIDTH, part::BACKGROUND);
        let mut paint = |r: i32, lo: i32, hi: i32, label: u8| {
            if r < 0 || r >= HEIGHT as i32 {
                return;
            }
            for c in lo.max(0)..hi.min(WIDTH as i32) {
                g.set(r as usize, c as usize, label);
            }
        };
        for r in 0..HEIGHT as i32 {
            for (left, label) in [(true, part::LEFT_LEG), (false, part::RIGHT_LEG)] {
                if let Some((lo, hi)) = self.leg_span(r, left) {
                    paint(r, lo, hi, label);
                }
            }
            if r >= self.shoulder_y && r < self.hip_y {
                paint(r, self.cx - self.torso_half, self.cx + self.torso_half, part::TORSO);
            }
            for (left, label) in [(true, part::LEFT_ARM), (false, part::RIGHT_ARM)] {
                if let Some((lo, hi)) = self.arm_span(r, left) {
                    paint(r, lo, hi, label);
                }
            }
            // Neck joins head and shoulders.
            if r > HEAD_CENTER_Y && r < self.shoulder_y {
                paint(r, self.cx - 2, self.cx + 2, part::HEAD);
            }
        }
        for r in 0..HEIGHT as i32 {
            for c in 0..WIDTH as i32 {
                let dy = (r - HEAD_CENTER_Y) as f64 / self.head_ry as f64;
                let dx = (c as f64 + 0.5 - self.cx as f64) / self.head_rx as f64;
                if dy * dy + dx * dx <= 1.0 {
                    g.set(r as usize, c as usize, part::HEAD);
                }
            }
        }
        g
    }

    fn head_bottom(&self) -> i32 {
        HEAD_CENTER_Y + self.head_ry
    }

    fn parsing(&self, pose: &LabelGrid, attrs: &AttributeSet) -> LabelGrid {
        let mut g = LabelGrid::filled(HEIGHT, WIDTH, class::BACKGROUND);
        let sleeve_rows = match attrs.sleeve_length {
            0 => 0,
            1 => (self.arm_len * 35 + 99) / 100,
            _ => self.arm_len - 2,
        };
        let leg_len = self.leg_end - self.hip_y;
        let lower_rows = match attrs.lower_length {
            0 => (leg_len * 2 + 4) / 5,
            _ => leg_len - SHOE_ROWS,
        };
        for r in 0..HEIGHT {
            for c in 0..WIDTH {
                let p = pose.get(r, c);
                let (ri, ci) = (r as i32, c as i32);
                let label = match p {
                    part::HEAD if ri > self.head_bottom() || (ri > HEAD_CENTER_Y && !self.in_head(ri, ci)) => class::SKIN,
                    part::HEAD => class::HEAD,
                    part::TORSO => {
                        let depth = ri - self.shoulder_y;
                        let off = (ci as f64 + 0.5 - self.cx as f64).abs();
                        if ri >= self.hip_y - 2 {
                            class::LOWER
                        } else if attrs.neckline == 1 && depth < 5 && off < (5 - depth) as f64 {
                            class::SKIN
                        } else {
                            class::UPPER
                        }
                    }
                    _ if part::is_arm(p) => {
                        if ri - self.shoulder_y < sleeve_rows {
                            class::UPPER
                        } else {
                            class::SKIN
                        }
                    }
                    _ if part::is_leg(p) => {
                        let t = ri - self.hip_y;
                        if t >= leg_len - SHOE_ROWS {
                            class::SHOES
                        } else if t < lower_rows {
                            class::LOWER
                        } else {
                            class::SKIN
                        }
                    }
                    _ => class::BACKGROUND,
                };
                g.set(r, c, label);
            }
        }
        g
    }

    fn in_head(&self, r: i32, c: i32) -> bool {
        let dy = (r - HEAD_CENTER_Y) as f64 / self.head_ry as f64;
        let dx = (c as f64 + 0.5 - self.cx as f64) / self.head_rx as f64;
        dy * dy + dx * dx <= 1.0
    }
}

const SKIN_TONES: [Rgb; 4] = [[241, 194, 125], [224, 172, 105], [198, 134, 66], [141, 85, 36]];
const HAIR_COLORS: [Rgb; 3] = [[40, 28, 20], [110, 70, 30], [200, 160, 90]];
const SHOE_COLOR: Rgb = [38, 30, 26];
/// Garment palette; any two entries differ strongly in at least one channel.
const GARMENT_COLORS: [Rgb; 8] = [
    [200, 30, 40],
    [30, 60, 170],
    [20, 140, 60],
    [240, 200, 30],
    [250, 250, 250],
    [20, 20, 30],
    [140, 40, 160],
    [240, 120, 20],
];

fn draw_texture_params<R: Rng + ?Sized>(rng: &mut R) -> TextureParams {
    let a = rng.random_range(0..GARMENT_COLORS.len());
    let mut b = rng.random_range(0..GARMENT_COLORS.len() - 1);
    if b >= a {
        b += 1;
    }
    TextureParams {
        color_a: GARMENT_COLORS[a],
        color_b: GARMENT_COLORS[b],
        period: [4, 6, 8][rng.random_range(0..3)],
        phase_row: rng.random_range(0..8),
        phase_col: rng.random_range(0..8),
    }
}

/// Deterministic sample for `(seed, spec)`. The skeleton and colours depend
/// only on the seed, so changing one attribute keeps the pose fixed.
pub fn gen_sample(seed: u64, spec: &AttributeSpec) -> Result<GeneratedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let skel = Skeleton::draw(&mut rng);
    let drawn = AttributeSet {
        sleeve_length: rng.random_range(0..SHAPE_CLASS_COUNTS[0] as u8),
        lower_length: rng.random_range(0..SHAPE_CLASS_COUNTS[1] as u8),
        neckline: rng.random_range(0..SHAPE_CLASS_COUNTS[2] as u8),
        upper_texture: rng.random_range(1..=4),
        lower_texture: rng.random_range(1..=4),
    };
    let attrs = AttributeSet {
        sleeve_length: spec.sleeve_length.unwrap_or(drawn.sleeve_length),
        lower_length: spec.lower_length.unwrap_or(drawn.lower_length),
        neckline: spec.neckline.unwrap_or(drawn.neckline),
        upper_texture: spec.upper_texture.unwrap_or(drawn.upper_texture),
        lower_texture: spec.lower_texture.unwrap_or(drawn.lower_texture),
    };
    attrs.validate()?;
    let skin = SKIN_TONES[rng.random_range(0..SKIN_TONES.len())];
    let hair = HAIR_COLORS[rng.random_range(0..HAIR_COLORS.len())];
    let upper_params = draw_texture_params(&mut rng);
    let lower_params = draw_texture_params(&mut rng);

    let pose_grid = skel.pose();
    let parsing_grid = skel.parsing(&pose_grid, &attrs);
    let pose = PoseMap::new(pose_grid)?;
    let parsing = ParsingMap::new(parsing_grid)?;

    let mut image = FigureImage::filled(HEIGHT, WIDTH, BACKGROUND_COLOR);
    for r in 0..HEIGHT {
        for c in 0..WIDTH {
            let color = match parsing.grid().get(r, c) {
                class::HEAD if (r as i32) < HEAD_CENTER_Y => Some(hair),
                class::HEAD | class::SKIN => Some(skin),
                class::SHOES => Some(SHOE_COLOR),
                _ => None,
            };
            if let Some(color) = color {
                image.set_pixel(r, c, color);
            }
        }
    }
    render_texture(attrs.upper_texture, &upper_params, &parsing.region(class::UPPER), &mut image)?;
    render_texture(attrs.lower_texture, &lower_params, &parsing.region(class::LOWER), &mut image)?;
    Ok(GeneratedSample { pose, parsing, attrs, image, upper_params, lower_params })
}
