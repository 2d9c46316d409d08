//! Synthetic re-identification data and the image preprocessing pipeline.
//!
//! Each identity is a layered figure: head, torso and legs with per-part
//! colors and patterns, plus an optional small bag patch. Each image renders
//! one identity under a camera (color gain and offset), with scale and
//! translation jitter, an optional occluder and pixel noise.
//!
//! On disk:
//!
//! ```text
//! out/
//!   manifest.csv    path,identity,camera,split
//!   meta            key = value lines (generator version, seed, sizes)
//!   img/00000.bin   tensor record, shape (3, H, W), values in [0, 1]
//!   img/00000.ppm   8-bit copy for viewing
//! ```

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::tensor::{read_tensor, write_tensor, Tensor};

pub const GENERATOR_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const META_FILE: &str = "meta";

/// ImageNet channel statistics used for input normalization.
pub const MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Smallest image preprocessing accepts.
pub const MIN_IMAGE_EXTENT: usize = 8;

const IDENTITY_STREAM: u64 = 10;
const RENDER_STREAM: u64 = 11;
const SPLIT_STREAM: u64 = 12;
const CAMERA_STREAM: u64 = 13;

const TORSO_PALETTE: [[f64; 3]; 12] = [
    [0.85, 0.10, 0.10],
    [0.10, 0.55, 0.15],
    [0.12, 0.20, 0.80],
    [0.90, 0.80, 0.10],
    [0.55, 0.15, 0.65],
    [0.95, 0.50, 0.10],
    [0.10, 0.70, 0.75],
    [0.95, 0.95, 0.95],
    [0.15, 0.15, 0.15],
    [0.60, 0.40, 0.20],
    [0.95, 0.60, 0.75],
    [0.45, 0.60, 0.30],
];

const LEG_PALETTE: [[f64; 3]; 6] = [
    [0.10, 0.12, 0.35],
    [0.20, 0.20, 0.20],
    [0.70, 0.65, 0.55],
    [0.40, 0.25, 0.15],
    [0.85, 0.85, 0.85],
    [0.35, 0.45, 0.25],
];

const TORSO_PATTERNS: usize = 3;
const LEG_PATTERNS: usize = 2;
const ACCESSORIES: usize = 3;

/// Number of distinct code combinations, hence the identity limit.
pub const MAX_IDENTITIES: usize =
    TORSO_PALETTE.len() * LEG_PALETTE.len() * TORSO_PATTERNS * LEG_PATTERNS * ACCESSORIES;

/// Appearance of one synthetic person.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticIdentitySpec {
    pub id: usize,
    pub torso_color: [f64; 3],
    pub secondary_color: [f64; 3],
    pub leg_color: [f64; 3],
    pub skin_color: [f64; 3],
    pub accessory_color: [f64; 3],
    /// 0 solid, 1 horizontal stripes, 2 vertical split.
    pub torso_pattern: usize,
    /// 0 trousers, 1 shorts.
    pub leg_pattern: usize,
    /// 0 none, 1 bag on the right, 2 bag on the left.
    pub accessory: usize,
    /// Body width multiplier.
    pub aspect: f64,
    codes: (usize, usize),
}

impl SyntheticIdentitySpec {
    /// Identity `id` of the dataset seeded by `seed`. Codes are assigned from a
    /// seeded permutation of all combinations, so no two identities share
    /// every code.
    pub fn new(id: usize, seed: u64, order: &[usize]) -> Self {
        let mut code = order[id];
        let mut take = |n: usize| {
            let c = code % n;
            code /= n;
            c
        };
        let torso = take(TORSO_PALETTE.len());
        let legs = take(LEG_PALETTE.len());
        let torso_pattern = take(TORSO_PATTERNS);
        let leg_pattern = take(LEG_PATTERNS);
        let accessory = take(ACCESSORIES);
        let mut rng = stream_rng(seed, id as u64, IDENTITY_STREAM);
        let mut jitter = |c: [f64; 3], amount: f64| {
            c.map(|v| (v + rng.random_range(-amount..amount)).clamp(0.0, 1.0))
        };
        let torso_color = jitter(TORSO_PALETTE[torso], 0.05);
        let secondary_color = jitter(TORSO_PALETTE[(torso + 5) % TORSO_PALETTE.len()], 0.05);
        let leg_color = jitter(LEG_PALETTE[legs], 0.05);
        let skin_color = jitter([0.85, 0.68, 0.55], 0.08);
        let accessory_color = jitter(TORSO_PALETTE[(torso * 7 + legs + 3) % TORSO_PALETTE.len()], 0.1);
        let aspect = rng.random_range(0.85..1.15);
        SyntheticIdentitySpec {
            id,
            torso_color,
            secondary_color,
            leg_color,
            skin_color,
            accessory_color,
            torso_pattern,
            leg_pattern,
            accessory,
            aspect,
            codes: (torso, legs),
        }
    }

    /// Every discrete code of this identity.
    pub fn code_tuple(&self) -> [usize; 5] {
        [
            self.codes.0,
            self.codes.1,
            self.torso_pattern,
            self.leg_pattern,
            self.accessory,
        ]
    }
}

fn code_order(seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..MAX_IDENTITIES).collect();
    order.shuffle(&mut stream_rng(seed, 0, IDENTITY_STREAM));
    order
}

/// Per-image nuisance parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderParams {
    pub camera: usize,
    pub scale: f64,
    /// Horizontal and vertical offset as fractions of the image extent.
    pub shift: (f64, f64),
    /// `(top, left, height, width)` as fractions, with its fill color.
    pub occluder: Option<([f64; 4], [f64; 3])>,
    pub gain: [f64; 3],
    pub offset: [f64; 3],
    pub background: [f64; 3],
    pub noise: f64,
    pub seed: u64,
}

/// Camera color distortion, fixed per camera.
fn camera_shift(seed: u64, camera: usize) -> ([f64; 3], [f64; 3]) {
    let mut rng = stream_rng(seed, camera as u64, CAMERA_STREAM);
    let gain = [0; 3].map(|_| rng.random_range(0.85..1.15));
    let offset = [0; 3].map(|_| rng.random_range(-0.05..0.05));
    (gain, offset)
}

impl RenderParams {
    pub fn sample(seed: u64, index: usize, camera: usize) -> Self {
        let (gain, offset) = camera_shift(seed, camera);
        let mut rng = stream_rng(seed, index as u64, RENDER_STREAM);
        let scale = rng.random_range(0.9..1.05);
        let shift = (rng.random_range(-0.08..0.08), rng.random_range(-0.04..0.04));
        let gray: f64 = rng.random_range(0.3..0.7);
        let background = [0; 3].map(|_| (gray + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0));
        // At most half the height and half the width: the figure stays at
        // least 75% visible.
        let occluder = if rng.random_bool(0.3) {
            let h = rng.random_range(0.15..0.5);
            let w = rng.random_range(0.2..0.5);
            let top = rng.random_range(0.0..1.0 - h);
            let left = if rng.random_bool(0.5) { 0.0 } else { 1.0 - w };
            let fill = [0; 3].map(|_| rng.random_range(0.2..0.8));
            Some(([top, left, h, w], fill))
        } else {
            None
        };
        RenderParams {
            camera,
            scale,
            shift,
            occluder,
            gain,
            offset,
            background,
            noise: 0.02,
            seed: rng.random(),
        }
    }
}

fn in_rect(u: f64, v: f64, u0: f64, u1: f64, v0: f64, v1: f64) -> bool {
    u >= u0 && u < u1 && v >= v0 && v < v1
}

/// Render one image, `(3, height, width)` with values in `[0, 1]`.
pub fn render(id: &SyntheticIdentitySpec, params: &RenderParams, height: usize, width: usize) -> Tensor {
    let s = params.scale;
    let a = id.aspect;
    let cx = 0.5 + params.shift.0;
    let top = 0.06 + params.shift.1 + (1.0 - s) * 0.45;
    let mut noise_rng = stream_rng(params.seed, 0, RENDER_STREAM);
    let normal = Normal::new(0.0, params.noise).expect("valid noise level");
    let mut data = vec![0.0; 3 * height * width];
    for y in 0..height {
        for x in 0..width {
            let u = (x as f64 + 0.5) / width as f64;
            let v = (y as f64 + 0.5) / height as f64;
            let mut c = params.background;

            let leg_top = top + 0.52 * s;
            let leg_bot = top + 0.88 * s;
            let left_leg = in_rect(u, v, cx - 0.18 * a * s, cx - 0.02 * s, leg_top, leg_bot);
            let right_leg = in_rect(u, v, cx + 0.02 * s, cx + 0.18 * a * s, leg_top, leg_bot);
            if left_leg || right_leg {
                c = if id.leg_pattern == 1 && v > leg_top + 0.16 * s {
                    id.skin_color
                } else {
                    id.leg_color
                };
            }
            if (left_leg || right_leg) && v >= leg_bot - 0.04 * s {
                c = [0.08, 0.08, 0.08];
            }

            let torso_top = top + 0.16 * s;
            if in_rect(u, v, cx - 0.22 * a * s, cx + 0.22 * a * s, torso_top, leg_top) {
                c = match id.torso_pattern {
                    1 if ((v - torso_top) / (0.06 * s)) as usize % 2 == 1 => id.secondary_color,
                    2 if u > cx => id.secondary_color,
                    _ => id.torso_color,
                };
            }

            let (hu, hv) = ((u - cx) / (0.10 * a * s), (v - (top + 0.08 * s)) / (0.075 * s));
            if hu * hu + hv * hv <= 1.0 {
                c = id.skin_color;
            }

            let bag = match id.accessory {
                1 => in_rect(u, v, cx + 0.22 * a * s, cx + 0.32 * a * s, top + 0.30 * s, top + 0.48 * s),
                2 => in_rect(u, v, cx - 0.32 * a * s, cx - 0.22 * a * s, top + 0.30 * s, top + 0.48 * s),
                _ => false,
            };
            if bag {
                c = id.accessory_color;
            }

            if let Some(([ot, ol, oh, ow], fill)) = params.occluder {
                if in_rect(u, v, ol, ol + ow, ot, ot + oh) {
                    c = fill;
                }
            }

            for ch in 0..3 {
                let n: f64 = normal.sample(&mut noise_rng);
                let val = c[ch] * params.gain[ch] + params.offset[ch] + n;
                data[(ch * height + y) * width + x] = val.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![3, height, width], data).expect("consistent extents")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    /// Relative to the dataset root.
    pub path: String,
    pub identity: usize,
    pub camera: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<Record>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> Vec<&Record> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn identities(&self, split: Split) -> Vec<usize> {
        let mut ids: Vec<usize> = self.split(split).iter().map(|r| r.identity).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Problems with the split structure: train identities overlapping test
    /// identities, or a query without a gallery image of its identity under
    /// another camera.
    pub fn check(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let train = self.identities(Split::Train);
        let mut test = self.identities(Split::Query);
        test.extend(self.identities(Split::Gallery));
        test.sort();
        test.dedup();
        if let Some(id) = test.iter().find(|i| train.binary_search(i).is_ok()) {
            errs.push(format!("identity {id} is in both train and test splits"));
        }
        let gallery = self.split(Split::Gallery);
        for q in self.split(Split::Query) {
            if !gallery
                .iter()
                .any(|g| g.identity == q.identity && g.camera != q.camera)
            {
                errs.push(format!(
                    "query {} (identity {}, camera {}) has no cross-camera gallery match",
                    q.path, q.identity, q.camera
                ));
            }
        }
        errs
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        for r in &self.records {
            w.serialize(r).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let headers = r.headers().map_err(csv_err)?.clone();
        if headers != vec!["path", "identity", "camera", "split"] {
            return Err(Error::Data(format!(
                "{}: expected header path,identity,camera,split",
                path.display()
            )));
        }
        let records = r
            .deserialize()
            .collect::<std::result::Result<Vec<Record>, _>>()
            .map_err(csv_err)?;
        Ok(DatasetManifest { records })
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(e.to_string())
}

/// Generator settings.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerateSpec {
    pub num_ids: usize,
    pub images_per_id: usize,
    pub cameras: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl GenerateSpec {
    pub fn new(num_ids: usize, images_per_id: usize, cameras: usize, seed: u64) -> Self {
        GenerateSpec {
            num_ids,
            images_per_id,
            cameras,
            height: 80,
            width: 40,
            seed,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.num_ids < 4 {
            errs.push(format!("need at least 4 identities, got {}", self.num_ids));
        }
        if self.num_ids > MAX_IDENTITIES {
            errs.push(format!("at most {MAX_IDENTITIES} identities, got {}", self.num_ids));
        }
        if self.cameras < 2 {
            errs.push(format!("need at least 2 cameras, got {}", self.cameras));
        }
        // One query per camera must leave a gallery image under every camera.
        if self.images_per_id < 2 * self.cameras {
            errs.push(format!(
                "images per identity ({}) must be at least 2 x cameras ({})",
                self.images_per_id,
                2 * self.cameras
            ));
        }
        if self.height < MIN_IMAGE_EXTENT || self.width < MIN_IMAGE_EXTENT {
            errs.push(format!("image size must be at least {MIN_IMAGE_EXTENT}x{MIN_IMAGE_EXTENT}"));
        }
        errs
    }
}

/// Render the dataset into `out`. Refuses a directory that already holds a
/// manifest unless `force` is set.
pub fn generate(spec: &GenerateSpec, out: &Path, force: bool) -> Result<DatasetManifest> {
    let errs = spec.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    if out.join(MANIFEST_FILE).exists() && !force {
        return Err(Error::Data(format!(
            "{} already contains a dataset (use force to overwrite)",
            out.display()
        )));
    }
    let img_dir = out.join("img");
    if force && img_dir.exists() {
        fs::remove_dir_all(&img_dir)?;
    }
    fs::create_dir_all(&img_dir)?;

    let order = code_order(spec.seed);
    let mut ids: Vec<usize> = (0..spec.num_ids).collect();
    ids.shuffle(&mut stream_rng(spec.seed, 0, SPLIT_STREAM));
    let n_train = spec.num_ids / 2;
    let is_train: Vec<bool> = {
        let mut v = vec![false; spec.num_ids];
        for &i in &ids[..n_train] {
            v[i] = true;
        }
        v
    };

    let mut records = Vec::new();
    let mut split_rng = stream_rng(spec.seed, 1, SPLIT_STREAM);
    for id in 0..spec.num_ids {
        let who = SyntheticIdentitySpec::new(id, spec.seed, &order);
        // One query per camera, drawn among that camera's images.
        let mut queries = vec![false; spec.images_per_id];
        if !is_train[id] {
            for cam in 0..spec.cameras {
                let mine: Vec<usize> = (0..spec.images_per_id).filter(|j| j % spec.cameras == cam).collect();
                queries[mine[split_rng.random_range(0..mine.len())]] = true;
            }
        }
        for j in 0..spec.images_per_id {
            let index = id * spec.images_per_id + j;
            let camera = j % spec.cameras;
            let params = RenderParams::sample(spec.seed, index, camera);
            let img = render(&who, &params, spec.height, spec.width);
            let stem = format!("{index:05}");
            let mut w = BufWriter::new(fs::File::create(img_dir.join(format!("{stem}.bin")))?);
            write_tensor(&mut w, &img)?;
            w.flush()?;
            write_ppm(&img_dir.join(format!("{stem}.ppm")), &img)?;
            let split = if is_train[id] {
                Split::Train
            } else if queries[j] {
                Split::Query
            } else {
                Split::Gallery
            };
            records.push(Record {
                path: format!("img/{stem}.bin"),
                identity: id,
                camera,
                split,
            });
        }
    }
    let manifest = DatasetManifest { records };
    manifest.write(&out.join(MANIFEST_FILE))?;
    fs::write(
        out.join(META_FILE),
        format!(
            "generator = msfl-synth {GENERATOR_VERSION}\nseed = {}\nids = {}\nimages_per_id = {}\ncameras = {}\nheight = {}\nwidth = {}\n",
            spec.seed, spec.num_ids, spec.images_per_id, spec.cameras, spec.height, spec.width
        ),
    )?;
    Ok(manifest)
}

/// 8-bit binary pixmap of a `(3, H, W)` image in `[0, 1]`.
pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w) = (img.dims()[1], img.dims()[2]);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = img.data()[(c * h + y) * w + x];
                bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// A generated dataset opened for reading.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::Data(format!("no {MANIFEST_FILE} in {}", root.display())));
        }
        let manifest = DatasetManifest::read(&path)?;
        let errs = manifest.check();
        if !errs.is_empty() {
            return Err(Error::Data(errs.join("; ")));
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn load(&self, record: &Record) -> Result<Tensor> {
        load_image(&self.root.join(&record.path))
    }
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    let mut f = std::io::BufReader::new(
        fs::File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?,
    );
    let t = read_tensor(&mut f)?;
    if t.rank() != 3 || t.dims()[0] != 3 {
        return Err(Error::Data(format!(
            "{}: expected a (3, H, W) image, got {}",
            path.display(),
            t.shape()
        )));
    }
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreprocessMode {
    Train,
    Eval,
}

/// Augmentation choices made for one training image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Augment {
    pub top: usize,
    pub left: usize,
    pub flip: bool,
}

/// Resize-crop-flip-normalize. Train mode resizes to 9/8 of the target, crops
/// a uniformly placed target window and flips with probability 0.5; eval mode
/// resizes straight to the target. Inputs are intensities in `[0, 1]`, i.e.
/// already divided by 255.
pub fn preprocess<R: Rng>(
    image: &Tensor,
    target: (usize, usize),
    mode: PreprocessMode,
    rng: &mut R,
) -> Result<(Tensor, Option<Augment>)> {
    let dims = image.dims();
    if dims.len() != 3 || dims[0] != 3 {
        return Err(Error::Data(format!("expected a (3, H, W) image, got {}", image.shape())));
    }
    if dims[1] < MIN_IMAGE_EXTENT || dims[2] < MIN_IMAGE_EXTENT {
        return Err(Error::Data(format!(
            "image {}x{} is smaller than {MIN_IMAGE_EXTENT}x{MIN_IMAGE_EXTENT}",
            dims[1], dims[2]
        )));
    }
    let (th, tw) = target;
    let (img, aug) = match mode {
        PreprocessMode::Eval => (resize_bilinear(image, th, tw), None),
        PreprocessMode::Train => {
            let (rh, rw) = enlarged(target);
            let big = resize_bilinear(image, rh, rw);
            let top = rng.random_range(0..=rh - th);
            let left = rng.random_range(0..=rw - tw);
            let flip = rng.random_bool(0.5);
            let aug = Augment { top, left, flip };
            (crop_flip(&big, aug, th, tw), Some(aug))
        }
    };
    Ok((normalize(&img), aug))
}

/// Train-time resize extent: 9/8 of the target, rounded.
pub fn enlarged(target: (usize, usize)) -> (usize, usize) {
    ((target.0 * 9 + 4) / 8, (target.1 * 9 + 4) / 8)
}

/// Bilinear resize with half-pixel centers.
pub fn resize_bilinear(img: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (c, h, w) = (img.dims()[0], img.dims()[1], img.dims()[2]);
    if (h, w) == (oh, ow) {
        return img.clone();
    }
    let src = img.data();
    let coord = |o: usize, out: usize, inp: usize| {
        let x = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = x.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, x - i0 as f64)
    };
    let ys: Vec<_> = (0..oh).map(|y| coord(y, oh, h)).collect();
    let xs: Vec<_> = (0..ow).map(|x| coord(x, ow, w)).collect();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out).expect("consistent extents")
}

fn crop_flip(img: &Tensor, aug: Augment, th: usize, tw: usize) -> Tensor {
    let (c, h, w) = (img.dims()[0], img.dims()[1], img.dims()[2]);
    let src = img.data();
    let mut out = Vec::with_capacity(c * th * tw);
    for ch in 0..c {
        for y in 0..th {
            for x in 0..tw {
                let sx = if aug.flip { tw - 1 - x } else { x };
                out.push(src[(ch * h + aug.top + y) * w + aug.left + sx]);
            }
        }
    }
    Tensor::new(vec![c, th, tw], out).expect("consistent extents")
}

fn normalize(img: &Tensor) -> Tensor {
    let plane = img.dims()[1] * img.dims()[2];
    let data = img
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let c = i / plane;
            (v - MEAN[c]) / STD[c]
        })
        .collect();
    Tensor::new(img.dims().to_vec(), data).expect("same extents")
}

/// Stack equally sized `(C, H, W)` images into `(N, C, H, W)`.
pub fn stack(images: &[Tensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Data("cannot stack zero images".into()))?;
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for img in images {
        if img.dims() != first.dims() {
            return Err(Error::Data(format!(
                "cannot stack {} with {}",
                img.shape(),
                first.shape()
            )));
        }
        data.extend_from_slice(img.data());
    }
    let mut dims = vec![images.len()];
    dims.extend_from_slice(first.dims());
    Ok(Tensor::new(dims, data)?)
}
