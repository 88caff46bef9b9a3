//! Procedural video re-identification dataset and the sampling pipeline
//! (segment sampling, resizing, augmentation, identity-balanced batches).

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bicnet::{split_segment, SegmentSplit};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Shortest tracklet the generator emits (8 frames at stride 4).
pub const MIN_TRACKLET_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub num_ids: usize,
    pub cams_per_id: usize,
    pub tracklets_per_cam: usize,
    pub tracklet_len: usize,
    /// Stored frame size `[H, W]`.
    pub frame_size: [usize; 2],
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_ids: 20,
            cams_per_id: 2,
            tracklets_per_cam: 2,
            tracklet_len: 64,
            frame_size: [64, 32],
            seed: 7,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_ids < 2 {
            return Err(Error::config("dataset needs at least 2 identities"));
        }
        if self.cams_per_id == 0 || self.tracklets_per_cam == 0 || self.cams_per_id * self.tracklets_per_cam < 2 {
            return Err(Error::config(
                "each identity needs at least 2 tracklets (cams_per_id * tracklets_per_cam)",
            ));
        }
        if self.tracklet_len < MIN_TRACKLET_LEN {
            return Err(Error::config(format!(
                "tracklet length {} below minimum {MIN_TRACKLET_LEN}",
                self.tracklet_len
            )));
        }
        let [h, w] = self.frame_size;
        if h < 16 || w < 8 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::config(format!("frame size {h}x{w} must be even and at least 16x8")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartAppearance {
    pub color: [u8; 3],
    pub accent: [u8; 3],
    /// Stripe count across the part; 0 means plain.
    pub stripes: usize,
    pub texture_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticIdentity {
    pub id: usize,
    pub head: PartAppearance,
    pub torso: PartAppearance,
    pub legs: PartAppearance,
    pub bag: Option<PartAppearance>,
    pub gait_amplitude: f64,
    pub gait_frequency: f64,
    /// Identity whose torso this one copies.
    pub shares_torso_with: Option<usize>,
}

impl SyntheticIdentity {
    fn parts(&self) -> [Option<&PartAppearance>; 4] {
        [Some(&self.head), Some(&self.torso), Some(&self.legs), self.bag.as_ref()]
    }

    /// Number of parts whose appearance differs from `other`.
    pub fn differing_parts(&self, other: &Self) -> usize {
        self.parts()
            .iter()
            .zip(other.parts().iter())
            .filter(|(a, b)| a != b)
            .count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Upper,
    Lower,
    Left,
    Right,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OcclusionSpan {
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    pub region: Region,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackletInfo {
    pub name: String,
    pub identity: usize,
    pub camera: usize,
    pub index: usize,
    pub frames: usize,
    pub split: Split,
    pub occlusion_spans: Vec<OcclusionSpan>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub generator: GeneratorConfig,
    pub identities: Vec<SyntheticIdentity>,
    pub tracklets: Vec<TrackletInfo>,
}

fn sub_seed(seed: u64, parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut x = seed;
    for &p in parts {
        x = x.wrapping_add(p.wrapping_add(0x9E37_79B9_7F4A_7C15));
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x = z ^ (z >> 31);
    }
    x
}

fn random_color<R: Rng>(rng: &mut R) -> [u8; 3] {
    // saturated colours from a random hue
    let h: f64 = rng.gen_range(0.0..6.0);
    let s: f64 = rng.gen_range(0.45..1.0);
    let v: f64 = rng.gen_range(0.35..1.0);
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [((r + m) * 255.0) as u8, ((g + m) * 255.0) as u8, ((b + m) * 255.0) as u8]
}

fn random_part<R: Rng>(rng: &mut R, max_stripes: usize) -> PartAppearance {
    PartAppearance {
        color: random_color(rng),
        accent: random_color(rng),
        stripes: if max_stripes == 0 { 0 } else { rng.gen_range(0..=max_stripes) },
        texture_seed: rng.gen(),
    }
}

/// Identities of a dataset. Pairs `(4j, 4j+1)` share the torso.
pub fn generate_identities(cfg: &GeneratorConfig) -> Vec<SyntheticIdentity> {
    let mut out: Vec<SyntheticIdentity> = Vec::with_capacity(cfg.num_ids);
    for id in 0..cfg.num_ids {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, &[1, id as u64]));
        let mut ident = SyntheticIdentity {
            id,
            head: random_part(&mut rng, 0),
            torso: random_part(&mut rng, 4),
            legs: random_part(&mut rng, 2),
            bag: rng.gen_bool(0.4).then(|| random_part(&mut rng, 0)),
            gait_amplitude: rng.gen_range(0.5..2.0),
            gait_frequency: rng.gen_range(0.08..0.2),
            shares_torso_with: None,
        };
        if id % 4 == 1 {
            let twin = &out[id - 1];
            ident.torso = twin.torso.clone();
            ident.shares_torso_with = Some(id - 1);
        }
        while out.iter().any(|o| o.differing_parts(&ident) == 0) {
            ident.legs = random_part(&mut rng, 2);
        }
        out.push(ident);
    }
    out
}

struct Canvas {
    h: usize,
    w: usize,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn fill_rect(&mut self, y0: f64, y1: f64, x0: f64, x1: f64, mut color: impl FnMut(usize, usize) -> [f64; 3]) {
        let ys = y0.max(0.0).round() as usize;
        let ye = (y1.min(self.h as f64).round() as usize).min(self.h);
        let xs = x0.max(0.0).round() as usize;
        let xe = (x1.min(self.w as f64).round() as usize).min(self.w);
        for y in ys..ye {
            for x in xs..xe {
                self.px[y * self.w + x] = color(y, x);
            }
        }
    }
}

fn rgb(c: [u8; 3]) -> [f64; 3] {
    [c[0] as f64, c[1] as f64, c[2] as f64]
}

fn textured(part: &PartAppearance, y: usize, x: usize, y0: f64, height: f64) -> [f64; 3] {
    if part.stripes == 0 {
        return rgb(part.color);
    }
    let band = ((y as f64 - y0) / height * (2 * part.stripes) as f64).floor() as i64;
    let jitter = (part.texture_seed >> (x % 8)) & 1 == 1 && part.stripes > 3;
    if (band % 2 == 0) ^ jitter {
        rgb(part.color)
    } else {
        rgb(part.accent)
    }
}

/// Renders one tracklet; deterministic in `(seed, identity, camera, index)`.
pub fn render_tracklet(
    cfg: &GeneratorConfig,
    ident: &SyntheticIdentity,
    camera: usize,
    index: usize,
) -> (Vec<RgbImage>, Vec<OcclusionSpan>) {
    let [h, w] = cfg.frame_size;
    let mut cam_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, &[2, camera as u64]));
    let background = random_color(&mut cam_rng);
    let gain: f64 = cam_rng.gen_range(0.75..1.2);
    let cast = [
        cam_rng.gen_range(-20.0..20.0),
        cam_rng.gen_range(-20.0..20.0),
        cam_rng.gen_range(-20.0..20.0),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, &[3, ident.id as u64, camera as u64, index as u64]));
    let scale: f64 = rng.gen_range(0.85..1.0);
    let x_offset: f64 = rng.gen_range(-0.08..0.08) * w as f64;
    let drift: f64 = rng.gen_range(-0.05..0.05) * w as f64;
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut spans = Vec::new();
    if rng.gen_bool(0.35) {
        let len = rng.gen_range(6..=16).min(cfg.tracklet_len);
        let start = rng.gen_range(0..=cfg.tracklet_len - len);
        let region = [Region::Upper, Region::Lower, Region::Left, Region::Right][rng.gen_range(0..4)];
        spans.push(OcclusionSpan { start, end: start + len, region });
    }
    let occluder = random_color(&mut rng);

    let (hf, wf) = (h as f64, w as f64);
    let frames = (0..cfg.tracklet_len)
        .map(|t| {
            let tf = t as f64;
            let mut canvas = Canvas {
                h,
                w,
                px: vec![[0.0; 3]; h * w],
            };
            let bg = rgb(background);
            canvas.fill_rect(0.0, hf, 0.0, wf, |y, _| {
                let shade = 0.8 + 0.4 * y as f64 / hf;
                [bg[0] * shade, bg[1] * shade, bg[2] * shade]
            });
            let top = hf * (1.0 - scale * 0.9);
            let ph = hf * scale * 0.9;
            let cx = wf / 2.0 + x_offset + drift * (tf / cfg.tracklet_len as f64 - 0.5)
                + 0.5 * (0.5 * tf + phase).sin();
            let bob = ident.gait_amplitude * 0.3 * (std::f64::consts::TAU * ident.gait_frequency * 2.0 * tf + phase).sin();
            let y = |f: f64| top + f * ph + bob;

            // legs swing in antiphase
            let swing = ident.gait_amplitude * (std::f64::consts::TAU * ident.gait_frequency * tf + phase).sin();
            let leg_w = 0.14 * wf * scale;
            for side in [-1.0, 1.0] {
                let lx = cx + side * (0.09 * wf * scale + swing);
                let (ly0, ly1) = (y(0.56), y(1.0));
                canvas.fill_rect(ly0, ly1, lx - leg_w / 2.0, lx + leg_w / 2.0, |yy, xx| {
                    textured(&ident.legs, yy, xx, ly0, ly1 - ly0)
                });
            }
            let (ty0, ty1) = (y(0.2), y(0.58));
            let half = 0.2 * wf * scale;
            canvas.fill_rect(ty0, ty1, cx - half, cx + half, |yy, xx| textured(&ident.torso, yy, xx, ty0, ty1 - ty0));
            if let Some(bag) = &ident.bag {
                let (by0, by1) = (y(0.3), y(0.5));
                canvas.fill_rect(by0, by1, cx + half * 0.7, cx + half * 1.5, |_, _| rgb(bag.color));
            }
            let (hy0, hy1) = (y(0.03), y(0.2));
            let hr = 0.11 * wf * scale;
            canvas.fill_rect(hy0, hy1, cx - hr, cx + hr, |_, _| rgb(ident.head.color));

            for span in spans.iter().filter(|s| (s.start..s.end).contains(&t)) {
                let (y0, y1, x0, x1) = match span.region {
                    Region::Upper => (0.0, hf * 0.45, 0.0, wf),
                    Region::Lower => (hf * 0.55, hf, 0.0, wf),
                    Region::Left => (0.0, hf, 0.0, wf * 0.45),
                    Region::Right => (0.0, hf, wf * 0.55, wf),
                };
                canvas.fill_rect(y0, y1, x0, x1, |_, _| rgb(occluder));
            }

            let mut img = RgbImage::new(w as u32, h as u32);
            for (i, p) in canvas.px.iter().enumerate() {
                let mut out = [0u8; 3];
                for c in 0..3 {
                    let noise: f64 = rng.gen_range(-6.0..6.0);
                    out[c] = (p[c] * gain + cast[c] + noise).clamp(0.0, 255.0).round() as u8;
                }
                img.put_pixel((i % w) as u32, (i / w) as u32, image::Rgb(out));
            }
            img
        })
        .collect();
    (frames, spans)
}

/// Train on the first half of the identities; for the rest, the first
/// tracklet is the query and the others form the gallery.
fn split_of(cfg: &GeneratorConfig, id: usize, ordinal: usize) -> Split {
    let train_ids = cfg.num_ids / 2;
    if id < train_ids {
        Split::Train
    } else if ordinal == 0 {
        Split::Query
    } else {
        Split::Gallery
    }
}

pub fn tracklet_name(id: usize, cam: usize, k: usize) -> String {
    format!("{id:04}_{cam}_{k}")
}

/// Writes `<root>/tracklets/<id>_<cam>_<k>/frame_%04d.png` and `<root>/index.json`.
pub fn generate_dataset(cfg: &GeneratorConfig, root: &Path) -> Result<DatasetIndex> {
    cfg.validate()?;
    let identities = generate_identities(cfg);
    let mut jobs = Vec::new();
    for ident in &identities {
        let mut ordinal = 0;
        for cam in 0..cfg.cams_per_id {
            for k in 0..cfg.tracklets_per_cam {
                jobs.push((ident.id, cam, k, split_of(cfg, ident.id, ordinal)));
                ordinal += 1;
            }
        }
    }
    let base = root.join("tracklets");
    fs::create_dir_all(&base).map_err(|e| Error::io(&base, e))?;
    let tracklets = jobs
        .par_iter()
        .map(|&(id, cam, k, split)| -> Result<TrackletInfo> {
            let (frames, spans) = render_tracklet(cfg, &identities[id], cam, k);
            let name = tracklet_name(id, cam, k);
            let dir = base.join(&name);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (t, img) in frames.iter().enumerate() {
                img.save_with_format(dir.join(format!("frame_{t:04}.png")), image::ImageFormat::Png)?;
            }
            Ok(TrackletInfo {
                name,
                identity: id,
                camera: cam,
                index: k,
                frames: frames.len(),
                split,
                occlusion_spans: spans,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let index = DatasetIndex {
        generator: cfg.clone(),
        identities,
        tracklets,
    };
    let path = root.join("index.json");
    let text = serde_json::to_string_pretty(&index)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

/// A tracklet held in memory.
#[derive(Clone, Debug)]
pub struct Tracklet {
    pub info: TrackletInfo,
    pub frames: Vec<RgbImage>,
}

impl Tracklet {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// A loaded dataset with per-channel statistics of the training frames.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub index: DatasetIndex,
    pub tracklets: Vec<Tracklet>,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("index.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: DatasetIndex = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let tracklets = index
            .tracklets
            .par_iter()
            .map(|info| -> Result<Tracklet> {
                let dir = root.join("tracklets").join(&info.name);
                let frames = (0..info.frames)
                    .map(|t| {
                        let p = dir.join(format!("frame_{t:04}.png"));
                        let img = image::open(&p).map_err(|e| match e {
                            image::ImageError::IoError(io) => Error::io(&p, io),
                            other => Error::Format {
                                path: p.clone(),
                                reason: other.to_string(),
                            },
                        })?;
                        Ok(img.to_rgb8())
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Tracklet {
                    info: info.clone(),
                    frames,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (mean, std) = channel_stats(tracklets.iter().filter(|t| t.info.split == Split::Train));
        Ok(Self {
            root: root.to_path_buf(),
            index,
            tracklets,
            mean,
            std,
        })
    }

    pub fn of_split(&self, split: Split) -> Vec<usize> {
        (0..self.tracklets.len())
            .filter(|&i| self.tracklets[i].info.split == split)
            .collect()
    }

    /// Sorted identities of the training split.
    pub fn train_identities(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .tracklets
            .iter()
            .filter(|t| t.info.split == Split::Train)
            .map(|t| t.info.identity)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Normalized `[3, H, W]` tensor of one frame.
    pub fn frame_tensor(&self, tracklet: usize, frame: usize) -> Tensor<f32> {
        image_to_tensor(&self.tracklets[tracklet].frames[frame], self.mean, self.std)
    }

    /// Normalized `[N, 3, H, W]` stack of the given frames.
    pub fn frames_tensor(&self, tracklet: usize, frames: &[usize]) -> Result<Tensor<f32>> {
        let items: Vec<_> = frames.iter().map(|&f| self.frame_tensor(tracklet, f)).collect();
        Tensor::stack0(&items)
    }
}

fn channel_stats<'a>(tracklets: impl Iterator<Item = &'a Tracklet>) -> ([f32; 3], [f32; 3]) {
    let mut sum = [0f64; 3];
    let mut sq = [0f64; 3];
    let mut n = 0f64;
    for t in tracklets {
        for img in &t.frames {
            for p in img.pixels() {
                for c in 0..3 {
                    let v = p.0[c] as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
                n += 1.0;
            }
        }
    }
    if n == 0.0 {
        return ([0.5; 3], [0.25; 3]);
    }
    let mut mean = [0f32; 3];
    let mut std = [0f32; 3];
    for c in 0..3 {
        let m = sum[c] / n;
        mean[c] = m as f32;
        std[c] = (sq[c] / n - m * m).max(1e-6).sqrt() as f32;
    }
    (mean, std)
}

pub fn image_to_tensor(img: &RgbImage, mean: [f32; 3], std: [f32; 3]) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = (p.0[c] as f32 / 255.0 - mean[c]) / std[c];
        }
    }
    Tensor::from_vec(&[3, h, w], data).expect("consistent extents")
}

/// Frame indices of a random window: `n` frames, `stride` apart.
pub fn sample_segment<R: Rng>(len: usize, n: usize, stride: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n == 0 || stride == 0 {
        return Err(Error::config("segment length and stride must be positive"));
    }
    let span = (n - 1) * stride + 1;
    if len < span {
        return Err(Error::input(format!(
            "tracklet of {len} frames is shorter than a {n}-frame window at stride {stride}"
        )));
    }
    let start = rng.gen_range(0..=len - span);
    Ok((0..n).map(|i| start + i * stride).collect())
}

/// Resizes a segment to `big_res`, then splits it.
pub fn resize_and_split(
    segment: &Tensor<f32>,
    alpha: usize,
    big_res: [usize; 2],
    small_res: [usize; 2],
) -> Result<SegmentSplit<f32>> {
    if small_res[0] * 2 != big_res[0] || small_res[1] * 2 != big_res[1] {
        return Err(Error::config(format!(
            "small resolution {small_res:?} is not half of big resolution {big_res:?}"
        )));
    }
    let s = segment.shape();
    let resized = if s[s.len() - 2..] == big_res {
        segment.clone()
    } else {
        segment.resize_bilinear(big_res[0], big_res[1])?
    };
    split_segment(&resized, alpha)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip_p: f64,
    pub erase_p: f64,
    pub erase_area: [f64; 2],
    pub erase_aspect: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_p: 0.5,
            erase_p: 0.5,
            erase_area: [0.02, 0.4],
            erase_aspect: [0.3, 1.0 / 0.3],
        }
    }
}

/// Segment-wide horizontal flip and per-frame random erasing of `[N,C,H,W]`.
/// Erased pixels take `fill` (the per-channel mean in normalized space).
pub fn augment<R: Rng>(frames: &mut Tensor<f32>, cfg: &AugmentConfig, fill: [f32; 3], rng: &mut R) {
    let s = frames.shape().to_vec();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let flip = rng.gen_bool(cfg.flip_p.clamp(0.0, 1.0));
    let data = frames.data_mut();
    if flip {
        for plane in data.chunks_mut(w) {
            plane.reverse();
        }
    }
    for f in 0..n {
        if !rng.gen_bool(cfg.erase_p.clamp(0.0, 1.0)) {
            continue;
        }
        let area = (h * w) as f64;
        // a few attempts to fit the rectangle, as in the usual recipe
        for _ in 0..100 {
            let target = rng.gen_range(cfg.erase_area[0]..=cfg.erase_area[1]) * area;
            let log_r = rng.gen_range(cfg.erase_aspect[0].ln()..=cfg.erase_aspect[1].ln());
            let aspect = log_r.exp();
            let eh = (target * aspect).sqrt().round() as usize;
            let ew = (target / aspect).sqrt().round() as usize;
            if eh == 0 || ew == 0 || eh >= h || ew >= w {
                continue;
            }
            let y0 = rng.gen_range(0..=h - eh);
            let x0 = rng.gen_range(0..=w - ew);
            for ch in 0..c {
                let v = fill.get(ch).copied().unwrap_or(0.0);
                for y in y0..y0 + eh {
                    let row = ((f * c + ch) * h + y) * w;
                    data[row + x0..row + x0 + ew].fill(v);
                }
            }
            break;
        }
    }
}

/// One batch entry: class label and dataset tracklet.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchItem {
    pub label: usize,
    pub identity: usize,
    pub tracklet: usize,
}

/// Identity-balanced batches for one epoch: identities are shuffled and taken
/// `p` at a time (the last batch wraps around), each with `s` tracklet draws.
/// `groups[i]` lists the tracklets of class `i`.
pub fn batch_sampler<R: Rng>(
    groups: &[(usize, Vec<usize>)],
    p: usize,
    s: usize,
    rng: &mut R,
) -> Result<Vec<Vec<BatchItem>>> {
    if p == 0 || s == 0 {
        return Err(Error::config("batch sampler needs p >= 1 and s >= 1"));
    }
    if groups.len() < p {
        return Err(Error::input(format!(
            "{} identities available, batch needs {p}",
            groups.len()
        )));
    }
    if let Some((id, _)) = groups.iter().find(|(_, t)| t.is_empty()) {
        return Err(Error::input(format!("identity {id} has no tracklets")));
    }
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(rng);
    let batches = order.len().div_ceil(p);
    let mut out = Vec::with_capacity(batches);
    for b in 0..batches {
        let mut batch = Vec::with_capacity(p * s);
        for j in 0..p {
            let class = order[(b * p + j) % order.len()];
            let (identity, tracklets) = &groups[class];
            for _ in 0..s {
                batch.push(BatchItem {
                    label: class,
                    identity: *identity,
                    tracklet: tracklets[rng.gen_range(0..tracklets.len())],
                });
            }
        }
        out.push(batch);
    }
    Ok(out)
}
