//! Procedural captioned shape images and controlled corruption.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ppm;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const IMAGE_LEN: usize = CHANNELS * IMAGE_SIZE * IMAGE_SIZE;

macro_rules! closed_enum {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }

            pub fn index(self) -> usize {
                Self::ALL.iter().position(|&v| v == self).unwrap()
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.word())
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($word => Ok($name::$variant),)+
                    other => Err(Error::UnknownWord(other.to_string())),
                }
            }
        }
    };
}

closed_enum!(ShapeKind { Circle => "circle", Square => "square", Triangle => "triangle", Cross => "cross" });
closed_enum!(Color { Red => "red", Green => "green", Blue => "blue", White => "white" });
closed_enum!(Size { Small => "small", Large => "large" });
closed_enum!(Position {
    TopLeft => "top-left",
    TopRight => "top-right",
    BottomLeft => "bottom-left",
    BottomRight => "bottom-right",
    Center => "center",
});

impl Color {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::White => [1.0, 1.0, 1.0],
        }
    }
}

impl Position {
    /// `(row, col)` of the shape center in continuous pixel coordinates.
    pub fn center(self) -> (f64, f64) {
        match self {
            Position::TopLeft => (10.0, 10.0),
            Position::TopRight => (10.0, 22.0),
            Position::BottomLeft => (22.0, 10.0),
            Position::BottomRight => (22.0, 22.0),
            Position::Center => (16.0, 16.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SceneSpec {
    pub shape_kind: ShapeKind,
    pub color: Color,
    pub size: Size,
    pub position: Position,
}

pub const SPEC_COUNT: usize = 160;

impl SceneSpec {
    pub fn from_index(i: usize) -> SceneSpec {
        assert!(i < SPEC_COUNT);
        SceneSpec {
            shape_kind: ShapeKind::ALL[i / 40],
            color: Color::ALL[(i / 10) % 4],
            size: Size::ALL[(i / 5) % 2],
            position: Position::ALL[i % 5],
        }
    }

    pub fn index(&self) -> usize {
        self.shape_kind.index() * 40 + self.color.index() * 10 + self.size.index() * 5 + self.position.index()
    }

    pub fn all() -> impl Iterator<Item = SceneSpec> {
        (0..SPEC_COUNT).map(SceneSpec::from_index)
    }

    pub fn random(rng: &mut Rng) -> SceneSpec {
        SceneSpec::from_index(rng.below(SPEC_COUNT))
    }
}

/// Half-extent of each shape in pixels.
fn extent(kind: ShapeKind, size: Size) -> f64 {
    match (kind, size) {
        (_, Size::Large) => 10.0,
        (ShapeKind::Square, Size::Small) => 3.0,
        (ShapeKind::Circle, Size::Small) => 4.0,
        (_, Size::Small) => 5.0,
    }
}

fn inside(kind: ShapeKind, s: f64, dy: f64, dx: f64) -> bool {
    match kind {
        ShapeKind::Circle => dy * dy + dx * dx <= s * s,
        ShapeKind::Square => dy.abs() < s && dx.abs() < s,
        // apex up; half-width grows linearly from 0 at the top to s at the base
        ShapeKind::Triangle => dy > -s && dy < s && dx.abs() <= (dy + s) / 2.0,
        ShapeKind::Cross => {
            let arm = 0.4 * s;
            (dy.abs() < s && dx.abs() < arm) || (dx.abs() < s && dy.abs() < arm)
        }
    }
}

/// Rasterizes a spec onto a black 3×32×32 canvas, testing each pixel
/// center against the shape (no anti-aliasing).
pub fn render(spec: &SceneSpec) -> Tensor {
    let (cy, cx) = spec.position.center();
    let s = extent(spec.shape_kind, spec.size);
    let rgb = spec.color.rgb();
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    let mut data = vec![0.0; IMAGE_LEN];
    for i in 0..IMAGE_SIZE {
        for j in 0..IMAGE_SIZE {
            let dy = i as f64 + 0.5 - cy;
            let dx = j as f64 + 0.5 - cx;
            if inside(spec.shape_kind, s, dy, dx) {
                for (c, &v) in rgb.iter().enumerate() {
                    data[c * plane + i * IMAGE_SIZE + j] = v;
                }
            }
        }
    }
    Tensor::raw(vec![CHANNELS, IMAGE_SIZE, IMAGE_SIZE], data)
}

pub fn caption_of(spec: &SceneSpec) -> String {
    format!(
        "a {} {} {} at the {}",
        spec.size, spec.color, spec.shape_kind, spec.position
    )
}

/// Inverse of [`caption_of`].
pub fn parse_caption(caption: &str) -> Result<SceneSpec> {
    let words: Vec<&str> = caption.split_whitespace().collect();
    let bad = || Error::format("caption", caption.to_string());
    if words.len() != 7 || words[0] != "a" || words[4] != "at" || words[5] != "the" {
        return Err(bad());
    }
    Ok(SceneSpec {
        size: words[1].parse()?,
        color: words[2].parse()?,
        shape_kind: words[3].parse()?,
        position: words[6].parse()?,
    })
}

/// Every word the caption grammar can produce, in a fixed order.
pub fn caption_words() -> Vec<&'static str> {
    let mut w = vec!["a", "at", "the"];
    w.extend(Size::ALL.iter().map(|v| v.word()));
    w.extend(Color::ALL.iter().map(|v| v.word()));
    w.extend(ShapeKind::ALL.iter().map(|v| v.word()));
    w.extend(Position::ALL.iter().map(|v| v.word()));
    w
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub record_id: u64,
    pub spec: SceneSpec,
    pub image: Tensor,
    pub caption: String,
    pub corrupted: bool,
}

impl DatasetRecord {
    pub fn clean(record_id: u64, spec: SceneSpec) -> Self {
        DatasetRecord {
            record_id,
            spec,
            image: render(&spec),
            caption: caption_of(&spec),
            corrupted: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub count: usize,
    pub corruption_rate: f64,
    pub noise_level: f64,
    pub records: Vec<DatasetRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptionMode {
    PixelNoise,
    CaptionSwap,
    Both,
}

fn add_pixel_noise(image: &Tensor, noise_level: f64, rng: &mut Rng) -> Tensor {
    let data = image
        .data()
        .iter()
        .map(|&v| (v + noise_level * rng.normal()).clamp(0.0, 1.0))
        .collect();
    Tensor::raw(image.shape().to_vec(), data)
}

fn swapped_caption(spec: &SceneSpec, rng: &mut Rng) -> String {
    loop {
        let other = SceneSpec::random(rng);
        if other != *spec {
            return caption_of(&other);
        }
    }
}

pub fn corrupt_with(
    record: &DatasetRecord,
    mode: CorruptionMode,
    noise_level: f64,
    rng: &mut Rng,
) -> Result<DatasetRecord> {
    if !(noise_level >= 0.0) {
        return Err(Error::OutOfRange(format!("noise_level {noise_level} < 0")));
    }
    let mut out = record.clone();
    if matches!(mode, CorruptionMode::PixelNoise | CorruptionMode::Both) {
        out.image = add_pixel_noise(&record.image, noise_level, rng);
    }
    if matches!(mode, CorruptionMode::CaptionSwap | CorruptionMode::Both) {
        out.caption = swapped_caption(&record.spec, rng);
    }
    out.corrupted = true;
    Ok(out)
}

/// Applies one of the three corruption modes, chosen uniformly.
pub fn corrupt_record(record: &DatasetRecord, noise_level: f64, rng: &mut Rng) -> Result<DatasetRecord> {
    let mode = match rng.below(3) {
        0 => CorruptionMode::PixelNoise,
        1 => CorruptionMode::CaptionSwap,
        _ => CorruptionMode::Both,
    };
    corrupt_with(record, mode, noise_level, rng)
}

pub fn generate_dataset(seed: u64, count: usize, corruption_rate: f64, noise_level: f64) -> Result<DatasetManifest> {
    if count == 0 {
        return Err(Error::OutOfRange("dataset count must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&corruption_rate) {
        return Err(Error::OutOfRange(format!("corruption_rate {corruption_rate}")));
    }
    let mut rng = Rng::new(seed);
    let mut records = Vec::with_capacity(count);
    for id in 0..count {
        let spec = SceneSpec::random(&mut rng);
        let rec = DatasetRecord::clean(id as u64, spec);
        if rng.bernoulli(corruption_rate) {
            records.push(corrupt_record(&rec, noise_level, &mut rng)?);
        } else {
            records.push(rec);
        }
    }
    Ok(DatasetManifest {
        seed,
        count,
        corruption_rate,
        noise_level,
        records,
    })
}

/// A fresh observation of the same underlying instance: re-rendered from its
/// spec and passed through a measurement channel that adds pixel noise and
/// occasionally mislabels the caption.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementChannel {
    pub noise_level: f64,
    pub caption_swap_prob: f64,
}

impl MeasurementChannel {
    pub const CLEAN: MeasurementChannel = MeasurementChannel {
        noise_level: 0.0,
        caption_swap_prob: 0.0,
    };

    pub fn measure(&self, record: &DatasetRecord, rng: &mut Rng) -> DatasetRecord {
        let mut out = DatasetRecord::clean(record.record_id, record.spec);
        if self.noise_level > 0.0 {
            out.image = add_pixel_noise(&out.image, self.noise_level, rng);
        }
        if self.caption_swap_prob > 0.0 && rng.bernoulli(self.caption_swap_prob) {
            out.caption = swapped_caption(&record.spec, rng);
        }
        out
    }
}

const MANIFEST_HEADER: &str = "record_id\tcaption\tcorrupted\tshape_kind\tcolor\tsize\tposition";

/// Writes `manifest.tsv`, `meta.txt` and one `img_{id}.ppm` per record.
pub fn export_dataset(manifest: &DatasetManifest, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tsv = String::from(MANIFEST_HEADER);
    tsv.push('\n');
    for r in &manifest.records {
        tsv.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.record_id,
            r.caption,
            r.corrupted as u8,
            r.spec.shape_kind,
            r.spec.color,
            r.spec.size,
            r.spec.position
        ));
        ppm::write(&dir.join(format!("img_{}.ppm", r.record_id)), &r.image)?;
    }
    fs::write(dir.join("manifest.tsv"), tsv)?;
    fs::write(
        dir.join("meta.txt"),
        format!(
            "seed={}\ncount={}\ncorruption_rate={}\nnoise_level={}\n",
            manifest.seed, manifest.count, manifest.corruption_rate, manifest.noise_level
        ),
    )?;
    Ok(())
}

pub fn import_dataset(dir: &Path) -> Result<DatasetManifest> {
    let tsv = fs::read_to_string(dir.join("manifest.tsv"))?;
    let mut lines = tsv.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::format("manifest.tsv", "unexpected header"));
    }
    let mut records = Vec::new();
    for (n, line) in lines.enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return Err(Error::format("manifest.tsv", format!("line {}: {} fields", n + 2, f.len())));
        }
        let record_id: u64 = f[0]
            .parse()
            .map_err(|_| Error::format("manifest.tsv", format!("bad record_id {:?}", f[0])))?;
        let spec = SceneSpec {
            shape_kind: f[3].parse()?,
            color: f[4].parse()?,
            size: f[5].parse()?,
            position: f[6].parse()?,
        };
        let image = ppm::read(&dir.join(format!("img_{record_id}.ppm")))?;
        records.push(DatasetRecord {
            record_id,
            spec,
            image,
            caption: f[1].to_string(),
            corrupted: f[2] == "1",
        });
    }
    let meta = fs::read_to_string(dir.join("meta.txt")).unwrap_or_default();
    let get = |key: &str| {
        meta.lines()
            .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
            .map(str::to_string)
    };
    Ok(DatasetManifest {
        seed: get("seed").and_then(|v| v.parse().ok()).unwrap_or(0),
        count: records.len(),
        corruption_rate: get("corruption_rate").and_then(|v| v.parse().ok()).unwrap_or(0.0),
        noise_level: get("noise_level").and_then(|v| v.parse().ok()).unwrap_or(0.0),
        records,
    })
}
