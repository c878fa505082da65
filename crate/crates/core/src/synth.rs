//! Seeded synthetic multi-domain detection benchmark.
//!
//! Scenes are 96x96 RGB images of simple shapes (circle / square / triangle)
//! on low-frequency value-noise backgrounds. Target domains apply photometric
//! transforms (fog, colorshift, noise) that leave geometry untouched, so the
//! same annotations remain valid across domains. Everything is a pure
//! function of the domain spec.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::archive::{self, Dtype};
use crate::error::{Error, Result};
use crate::eval::{iou, BBox};
use crate::seeds;
use crate::tensor::Tensor;

pub const IMG_SIZE: usize = 96;
pub const NUM_CLASSES: usize = 3;
const MIN_SHAPE: f64 = 16.0;
const MAX_SHAPE: f64 = 48.0;
const MAX_OBJECT_IOU: f64 = 0.3;

/// An RGB image as a (3, H, W) tensor with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub pixels: Tensor,
    /// 0 = source, 1 = any target domain.
    pub domain_id: u32,
}

/// Ground-truth 5-tuple: box corner, size and class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxAnnotation {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub class: usize,
}

impl BoxAnnotation {
    pub fn bbox(&self) -> BBox {
        BBox {
            x: self.x,
            y: self.y,
            w: self.w,
            h: self.h,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DomainKind {
    Source,
    Fog,
    Colorshift,
    Noise,
}

impl DomainKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DomainKind::Source => "source",
            DomainKind::Fog => "fog",
            DomainKind::Colorshift => "colorshift",
            DomainKind::Noise => "noise",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(DomainKind::Source),
            "fog" => Ok(DomainKind::Fog),
            "colorshift" => Ok(DomainKind::Colorshift),
            "noise" => Ok(DomainKind::Noise),
            other => Err(Error::InvalidArgument(format!(
                "unknown domain kind {other:?}"
            ))),
        }
    }

    /// Parameter ranges a kind accepts, with defaults.
    pub fn default_params(&self) -> BTreeMap<String, (f64, f64)> {
        let mut m = BTreeMap::new();
        match self {
            DomainKind::Source => {}
            DomainKind::Fog => {
                m.insert("a".into(), (0.4, 0.7));
            }
            DomainKind::Colorshift => {
                m.insert("gain".into(), (0.6, 1.4));
                m.insert("gamma".into(), (0.7, 1.4));
            }
            DomainKind::Noise => {
                m.insert("sigma".into(), (0.05, 0.12));
                m.insert("streaks".into(), (5.0, 15.0));
            }
        }
        m
    }
}

impl fmt::Display for DomainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Recipe for one domain: same (kind, parameters, seed) always yields the
/// identical dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub name: String,
    pub kind: DomainKind,
    pub seed: u64,
    pub params: BTreeMap<String, (f64, f64)>,
}

impl DomainSpec {
    pub fn new(name: impl Into<String>, kind: DomainKind, seed: u64) -> Self {
        DomainSpec {
            name: name.into(),
            kind,
            seed,
            params: kind.default_params(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let allowed = self.kind.default_params();
        for (k, (lo, hi)) in &self.params {
            if !allowed.contains_key(k) {
                return Err(Error::InvalidArgument(format!(
                    "parameter {k:?} not valid for domain kind {}",
                    self.kind
                )));
            }
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::InvalidArgument(format!(
                    "bad range for parameter {k:?}: {lo}..{hi}"
                )));
            }
        }
        Ok(())
    }

    fn range(&self, key: &str) -> (f64, f64) {
        self.params
            .get(key)
            .copied()
            .unwrap_or_else(|| self.kind.default_params()[key])
    }
}

/// A generated domain: train/eval splits are disjoint; train annotations are
/// withheld from callers when the domain is unlabeled.
#[derive(Clone, Debug)]
pub struct DomainDataset {
    pub spec: DomainSpec,
    pub labeled: bool,
    train: Vec<(Image, Vec<BoxAnnotation>)>,
    eval: Vec<(Image, Vec<BoxAnnotation>)>,
}

impl DomainDataset {
    pub fn train_len(&self) -> usize {
        self.train.len()
    }

    pub fn eval_len(&self) -> usize {
        self.eval.len()
    }

    /// Train item. Annotations are only exposed for labeled domains; this is
    /// the label-hygiene gate for every training code path.
    pub fn train_item(&self, i: usize) -> (&Image, Option<&[BoxAnnotation]>) {
        let (img, anns) = &self.train[i];
        (img, self.labeled.then_some(anns.as_slice()))
    }

    /// Eval item; annotations are always available for metric computation.
    pub fn eval_item(&self, i: usize) -> (&Image, &[BoxAnnotation]) {
        let (img, anns) = &self.eval[i];
        (img, anns)
    }

    /// Copy of this dataset with the label gate overridden. Used only by the
    /// supervised upper-bound baselines, which are defined to read their
    /// target train labels.
    pub fn relabeled(&self, labeled: bool) -> DomainDataset {
        DomainDataset {
            labeled,
            ..self.clone()
        }
    }
}

/// Render a scene with up to `num_objects` shapes. Objects are resampled
/// (at most 100 attempts each) until no pair of boxes overlaps more than IoU
/// 0.3; if placement keeps failing, fewer objects are placed and the
/// returned annotations carry the actual count.
pub fn render_scene(seed: u64, num_objects: usize) -> (Image, Vec<BoxAnnotation>) {
    assert!(
        (1..=4).contains(&num_objects),
        "num_objects must be in [1, 4]"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = background(&mut rng);

    let mut anns: Vec<BoxAnnotation> = Vec::new();
    let class_base: usize = rng.gen_range(0..NUM_CLASSES);
    let bg_lum = mean_luminance(&pixels);
    for j in 0..num_objects {
        let class = (class_base + j) % NUM_CLASSES;
        let mut placed = None;
        for _ in 0..100 {
            let size = rng.gen_range(MIN_SHAPE..=MAX_SHAPE);
            let x = rng.gen_range(0.0..=(IMG_SIZE as f64 - size));
            let y = rng.gen_range(0.0..=(IMG_SIZE as f64 - size));
            let candidate = BoxAnnotation {
                x,
                y,
                w: size,
                h: size,
                class,
            };
            let ok = anns
                .iter()
                .all(|a| iou(&a.bbox(), &candidate.bbox()) <= MAX_OBJECT_IOU);
            if ok {
                placed = Some(candidate);
                break;
            }
        }
        let Some(ann) = placed else {
            break; // give up on remaining objects; count is whatever fit
        };
        let color = pick_color(&mut rng, bg_lum);
        draw_shape(&mut pixels, &ann, color);
        anns.push(ann);
    }
    quantize_f32(&mut pixels);
    (
        Image {
            pixels,
            domain_id: 0,
        },
        anns,
    )
}

fn mean_luminance(t: &Tensor) -> f64 {
    t.data().iter().sum::<f64>() / t.len() as f64
}

fn pick_color(rng: &mut ChaCha8Rng, bg_lum: f64) -> [f64; 3] {
    let mut color = [0.0; 3];
    for _ in 0..50 {
        for c in &mut color {
            *c = rng.gen_range(0.0..=1.0);
        }
        let lum = (color[0] + color[1] + color[2]) / 3.0;
        if (lum - bg_lum).abs() >= 0.2 {
            break;
        }
    }
    color
}

/// Low-frequency value noise: a 7x7 luminance lattice plus small per-channel
/// offset lattices, bilinearly upsampled.
fn background(rng: &mut ChaCha8Rng) -> Tensor {
    const LAT: usize = 7;
    const CELL: f64 = IMG_SIZE as f64 / (LAT - 1) as f64;
    let mut lum = [[0.0f64; LAT]; LAT];
    for row in &mut lum {
        for v in row.iter_mut() {
            *v = rng.gen_range(0.25..=0.65);
        }
    }
    let mut chroma = [[[0.0f64; LAT]; LAT]; 3];
    for ch in &mut chroma {
        for row in ch.iter_mut() {
            for v in row.iter_mut() {
                *v = rng.gen_range(-0.08..=0.08);
            }
        }
    }
    let sample = |lat: &[[f64; LAT]; LAT], px: f64, py: f64| -> f64 {
        let tx = (px / CELL).min((LAT - 1) as f64 - 1e-9);
        let ty = (py / CELL).min((LAT - 1) as f64 - 1e-9);
        let (ix, iy) = (tx.floor() as usize, ty.floor() as usize);
        let (fx, fy) = (tx - ix as f64, ty - iy as f64);
        lat[iy][ix] * (1.0 - fy) * (1.0 - fx)
            + lat[iy][ix + 1] * (1.0 - fy) * fx
            + lat[iy + 1][ix] * fy * (1.0 - fx)
            + lat[iy + 1][ix + 1] * fy * fx
    };
    let mut t = Tensor::zeros(&[3, IMG_SIZE, IMG_SIZE]);
    for c in 0..3 {
        for y in 0..IMG_SIZE {
            for x in 0..IMG_SIZE {
                let v = sample(&lum, x as f64, y as f64) + sample(&chroma[c], x as f64, y as f64);
                t.set3(c, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    t
}

fn draw_shape(pixels: &mut Tensor, ann: &BoxAnnotation, color: [f64; 3]) {
    let (x0, y0, s) = (ann.x, ann.y, ann.w);
    let px_lo = ann.x.floor().max(0.0) as usize;
    let px_hi = ((ann.x + ann.w).ceil() as usize).min(IMG_SIZE);
    let py_lo = ann.y.floor().max(0.0) as usize;
    let py_hi = ((ann.y + ann.h).ceil() as usize).min(IMG_SIZE);
    for py in py_lo..py_hi {
        for px in px_lo..px_hi {
            let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
            let inside = match ann.class {
                // circle: centre of the box, diameter = s
                0 => {
                    let dx = cx - (x0 + s / 2.0);
                    let dy = cy - (y0 + s / 2.0);
                    dx * dx + dy * dy <= (s / 2.0) * (s / 2.0)
                }
                // square: the box itself
                1 => cx >= x0 && cx <= x0 + s && cy >= y0 && cy <= y0 + s,
                // triangle: apex at top-centre, base at the bottom edge
                2 => {
                    let ty = (cy - y0) / s;
                    if !(0.0..=1.0).contains(&ty) {
                        false
                    } else {
                        let half_width = ty * s / 2.0;
                        (cx - (x0 + s / 2.0)).abs() <= half_width
                    }
                }
                _ => unreachable!("class index out of range"),
            };
            if inside {
                for (c, &col) in color.iter().enumerate() {
                    pixels.set3(c, py, px, col);
                }
            }
        }
    }
}

/// Quantize to f32 precision so in-memory datasets match their on-disk f32
/// round trip bit for bit.
fn quantize_f32(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
}

/// Apply the photometric transform of a target domain. Geometry is never
/// changed, so annotations remain valid untouched.
pub fn apply_domain_transform(img: &Image, spec: &DomainSpec, per_image_seed: u64) -> Result<Image> {
    if spec.kind == DomainKind::Source {
        return Err(Error::InvalidArgument(
            "apply_domain_transform requires a non-source domain kind".into(),
        ));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(per_image_seed);
    let mut pixels = img.pixels.clone();
    match spec.kind {
        DomainKind::Source => unreachable!(),
        DomainKind::Fog => {
            let (lo, hi) = spec.range("a");
            let a = uniform_in(&mut rng, lo, hi);
            for v in pixels.data_mut() {
                *v = (1.0 - a) * *v + a * 0.6;
            }
        }
        DomainKind::Colorshift => {
            let (glo, ghi) = spec.range("gain");
            let gains = [
                uniform_in(&mut rng, glo, ghi),
                uniform_in(&mut rng, glo, ghi),
                uniform_in(&mut rng, glo, ghi),
            ];
            let (mlo, mhi) = spec.range("gamma");
            let gamma = uniform_in(&mut rng, mlo, mhi);
            let plane = IMG_SIZE * IMG_SIZE;
            for (i, v) in pixels.data_mut().iter_mut().enumerate() {
                let g = gains[i / plane];
                *v = (*v * g).max(0.0).powf(gamma).clamp(0.0, 1.0);
            }
        }
        DomainKind::Noise => {
            let (slo, shi) = spec.range("sigma");
            let sigma = uniform_in(&mut rng, slo, shi);
            let noise = Tensor::randn(&[3, IMG_SIZE, IMG_SIZE], sigma, &mut rng);
            for (v, n) in pixels.data_mut().iter_mut().zip(noise.data()) {
                *v += n;
            }
            let (klo, khi) = spec.range("streaks");
            let k = rng.gen_range(klo.round() as usize..=khi.round() as usize);
            for _ in 0..k {
                draw_streak(&mut pixels, &mut rng);
            }
            for v in pixels.data_mut() {
                *v = v.clamp(0.0, 1.0);
            }
        }
    }
    quantize_f32(&mut pixels);
    Ok(Image {
        pixels,
        domain_id: img.domain_id.max(1),
    })
}

fn uniform_in(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// A bright, mostly-vertical streak (rain-like).
fn draw_streak(pixels: &mut Tensor, rng: &mut ChaCha8Rng) {
    let x0 = rng.gen_range(0.0..IMG_SIZE as f64);
    let y0 = rng.gen_range(0.0..IMG_SIZE as f64);
    let angle = rng.gen_range(-0.3..0.3f64);
    let len = rng.gen_range(10.0..30.0f64);
    let gain = rng.gen_range(0.25..0.6f64);
    let (dx, dy) = (angle.sin(), angle.cos());
    let steps = len.round() as usize;
    for s in 0..steps {
        let x = x0 + dx * s as f64;
        let y = y0 + dy * s as f64;
        if x < 0.0 || y < 0.0 {
            continue;
        }
        let (xi, yi) = (x as usize, y as usize);
        if xi >= IMG_SIZE || yi >= IMG_SIZE {
            continue;
        }
        for c in 0..3 {
            let v = pixels.at3(c, yi, xi) + gain;
            pixels.set3(c, yi, xi, v);
        }
    }
}

/// Generate a full domain dataset: `n_train` + `n_eval` disjoint scenes,
/// transformed when the kind is not source. Only the source is labeled.
pub fn build_domain_dataset(spec: &DomainSpec, n_train: usize, n_eval: usize) -> Result<DomainDataset> {
    assert!(n_train > 0 && n_eval > 0, "dataset sizes must be positive");
    spec.validate()?;
    let make = |idx: u64| -> Result<(Image, Vec<BoxAnnotation>)> {
        let scene_seed = seeds::derive_idx(spec.seed, "scene", idx);
        let num_objects = 1 + (seeds::derive_idx(spec.seed, "count", idx) % 4) as usize;
        let (mut img, anns) = render_scene(scene_seed, num_objects);
        if spec.kind != DomainKind::Source {
            let t_seed = seeds::derive_idx(spec.seed, "transform", idx);
            img = apply_domain_transform(&img, spec, t_seed)?;
        }
        Ok((img, anns))
    };
    let mut train = Vec::with_capacity(n_train);
    for i in 0..n_train {
        train.push(make(i as u64)?);
    }
    let mut eval = Vec::with_capacity(n_eval);
    for i in 0..n_eval {
        eval.push(make((n_train + i) as u64)?);
    }
    Ok(DomainDataset {
        spec: spec.clone(),
        labeled: spec.kind == DomainKind::Source,
        train,
        eval,
    })
}

fn format_params(params: &BTreeMap<String, (f64, f64)>) -> Vec<(String, String)> {
    params
        .iter()
        .map(|(k, (lo, hi))| (format!("param.{k}"), format!("{lo}..{hi}")))
        .collect()
}

/// Serialize a dataset into `dir`: manifest, per-image tensor blobs and
/// annotation text files, and a checksum list.
pub fn write_dataset(dir: &Path, ds: &DomainDataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut files: Vec<String> = Vec::new();
    let mut pairs: Vec<(&str, String)> = vec![
        ("name", ds.spec.name.clone()),
        ("kind", ds.spec.kind.to_string()),
        ("seed", ds.spec.seed.to_string()),
        ("n_train", ds.train.len().to_string()),
        ("n_eval", ds.eval.len().to_string()),
        ("labeled", ds.labeled.to_string()),
    ];
    let param_pairs = format_params(&ds.spec.params);
    for (k, v) in &param_pairs {
        pairs.push((k.as_str(), v.clone()));
    }
    archive::write_manifest(&dir.join("manifest.txt"), &pairs)?;

    let mut write_split = |prefix: &str, items: &[(Image, Vec<BoxAnnotation>)]| -> Result<()> {
        for (i, (img, anns)) in items.iter().enumerate() {
            let tname = format!("{prefix}_{i:05}.idk1");
            archive::write_tensor_file(&dir.join(&tname), &img.pixels, Dtype::F32)?;
            let aname = format!("{prefix}_{i:05}.txt");
            let mut text = String::new();
            for a in anns {
                text.push_str(&format!("{} {} {} {} {}\n", a.x, a.y, a.w, a.h, a.class));
            }
            std::fs::write(dir.join(&aname), text)
                .map_err(|e| Error::io(dir.join(&aname).display().to_string(), e))?;
            files.push(tname);
            files.push(aname);
        }
        Ok(())
    };
    write_split("train", &ds.train)?;
    write_split("eval", &ds.eval)?;
    archive::write_checksums(dir, &files)
}

/// Load a dataset directory produced by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<DomainDataset> {
    let manifest = archive::read_manifest(&dir.join("manifest.txt"))?;
    let get = |k: &str| -> Result<&String> {
        manifest.get(k).ok_or_else(|| Error::Archive {
            path: dir.display().to_string(),
            msg: format!("manifest missing key {k:?}"),
        })
    };
    let kind = DomainKind::parse(get("kind")?)?;
    let mut params = BTreeMap::new();
    for (k, v) in &manifest {
        if let Some(p) = k.strip_prefix("param.") {
            let (lo, hi) = v.split_once("..").ok_or_else(|| Error::Archive {
                path: dir.display().to_string(),
                msg: format!("bad param range {v:?}"),
            })?;
            let parse = |s: &str| -> Result<f64> {
                s.parse().map_err(|_| Error::Archive {
                    path: dir.display().to_string(),
                    msg: format!("bad number {s:?}"),
                })
            };
            params.insert(p.to_string(), (parse(lo)?, parse(hi)?));
        }
    }
    let spec = DomainSpec {
        name: get("name")?.clone(),
        kind,
        seed: get("seed")?.parse().map_err(|_| Error::Archive {
            path: dir.display().to_string(),
            msg: "bad seed".into(),
        })?,
        params,
    };
    let n_train: usize = get("n_train")?.parse().unwrap_or(0);
    let n_eval: usize = get("n_eval")?.parse().unwrap_or(0);
    let labeled: bool = get("labeled")?.parse().unwrap_or(false);
    let domain_id = if kind == DomainKind::Source { 0 } else { 1 };

    let read_split = |prefix: &str, n: usize| -> Result<Vec<(Image, Vec<BoxAnnotation>)>> {
        let mut items = Vec::with_capacity(n);
        for i in 0..n {
            let tpath = dir.join(format!("{prefix}_{i:05}.idk1"));
            let pixels = archive::read_tensor_file(&tpath)?;
            let apath = dir.join(format!("{prefix}_{i:05}.txt"));
            let text = std::fs::read_to_string(&apath)
                .map_err(|e| Error::io(apath.display().to_string(), e))?;
            let mut anns = Vec::new();
            for line in text.lines() {
                let f: Vec<&str> = line.split_whitespace().collect();
                if f.len() != 5 {
                    return Err(Error::Archive {
                        path: apath.display().to_string(),
                        msg: format!("annotation line with {} fields", f.len()),
                    });
                }
                anns.push(BoxAnnotation {
                    x: f[0].parse().unwrap_or(0.0),
                    y: f[1].parse().unwrap_or(0.0),
                    w: f[2].parse().unwrap_or(0.0),
                    h: f[3].parse().unwrap_or(0.0),
                    class: f[4].parse().unwrap_or(0),
                });
            }
            items.push((Image { pixels, domain_id }, anns));
        }
        Ok(items)
    };
    Ok(DomainDataset {
        spec,
        labeled,
        train: read_split("train", n_train)?,
        eval: read_split("eval", n_eval)?,
    })
}
