//! Image datasets: the procedural shape/texture generator, directory
//! ingestion (TLAB shards or PPM files) and the fixed validation split.
//!
//! A dataset directory in TLAB form holds
//!
//! ```text
//! manifest.txt     key = value: n, size, classes, class.<i>, mean, std, shards
//! images*.tlab     f32 tensors [n_i, 3, H, W], concatenated in filename order
//! labels.txt       one label per line
//! ```
//!
//! A PPM directory holds `*.ppm` files, `labels.txt` with either one label
//! per line (in filename order) or `name label` lines, and optionally
//! `classes.txt` with one class name per line.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use toklab::rng::splitmix64;
use toklab::{serialize, Rng, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[n, 3, size, size]`, values in `[0, 1]`.
    pub images: Vec<f32>,
    pub labels: Vec<u32>,
    pub class_names: Vec<String>,
    pub size: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Dataset {
    pub fn new(images: Vec<f32>, labels: Vec<u32>, class_names: Vec<String>, size: usize) -> Result<Self> {
        let n = labels.len();
        ensure!(size > 0, "image size must be positive");
        ensure!(
            images.len() == n * 3 * size * size,
            "{} values do not form {n} images of 3x{size}x{size}",
            images.len()
        );
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= class_names.len()) {
            bail!("label {bad} out of range for {} classes", class_names.len());
        }
        if let Some(v) = images.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            bail!("pixel value {v} outside [0, 1]");
        }
        let (mean, std) = channel_stats(&images, size);
        Ok(Self {
            images,
            labels,
            class_names,
            size,
            mean,
            std,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    fn image_len(&self) -> usize {
        3 * self.size * self.size
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * self.image_len()..][..self.image_len()]
    }

    /// Gathers images `idx`, standardized per channel with the dataset
    /// mean and std.
    pub fn batch<T: Scalar>(&self, idx: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let plane = self.size * self.size;
        let mut out = Vec::with_capacity(idx.len() * self.image_len());
        for &i in idx {
            for (c, chunk) in self.image(i).chunks(plane).enumerate() {
                out.extend(chunk.iter().map(|&v| T::lit((v as f64 - self.mean[c]) / self.std[c])));
            }
        }
        let labels = idx.iter().map(|&i| self.labels[i] as usize).collect();
        Ok((Tensor::from_vec(out, &[idx.len(), 3, self.size, self.size])?, labels))
    }

    /// Gathers images `idx` unchanged, in `[0, 1]`.
    pub fn raw<T: Scalar>(&self, idx: &[usize]) -> Result<Tensor<T>> {
        let mut out = Vec::with_capacity(idx.len() * self.image_len());
        for &i in idx {
            out.extend(self.image(i).iter().map(|&v| T::lit(v as f64)));
        }
        Ok(Tensor::from_vec(out, &[idx.len(), 3, self.size, self.size])?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let t = Tensor::<f32>::from_vec(self.images.clone(), &[self.len(), 3, self.size, self.size])?;
        serialize::save(dir.join("images.tlab"), &t)?;
        let labels: String = self.labels.iter().map(|l| format!("{l}\n")).collect();
        fs::write(dir.join("labels.txt"), labels)?;
        let mut m = format!("n = {}\nsize = {}\nclasses = {}\n", self.len(), self.size, self.classes());
        for (i, name) in self.class_names.iter().enumerate() {
            m += &format!("class.{i} = {name}\n");
        }
        m += &format!("mean = {},{},{}\n", self.mean[0], self.mean[1], self.mean[2]);
        m += &format!("std = {},{},{}\n", self.std[0], self.std[1], self.std[2]);
        fs::write(dir.join("manifest.txt"), m)?;
        Ok(())
    }
}

fn channel_stats(images: &[f32], size: usize) -> ([f64; 3], [f64; 3]) {
    let plane = size * size;
    let mut sum = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    let mut count = 0usize;
    for img in images.chunks(3 * plane) {
        for (c, ch) in img.chunks(plane).enumerate() {
            for &v in ch {
                sum[c] += v as f64;
                sq[c] += v as f64 * v as f64;
            }
        }
        count += plane;
    }
    let mut mean = [0.0; 3];
    let mut std = [1.0; 3];
    if count > 0 {
        for c in 0..3 {
            mean[c] = sum[c] / count as f64;
            let var = sq[c] / count as f64 - mean[c] * mean[c];
            std[c] = var.max(0.0).sqrt().max(1e-3);
        }
    }
    (mean, std)
}

/// Indices `(train, val)`: an image is held out when `splitmix64(i) % 10 == 0`.
/// `fraction` keeps that share of the training indices, chosen by hash order.
pub fn split(n: usize, fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let (val, mut train): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| splitmix64(i as u64) % 10 == 0);
    if fraction < 1.0 {
        let keep = ((train.len() as f64 * fraction).ceil() as usize).clamp(1, train.len().max(1));
        train.sort_by_key(|&i| splitmix64(i as u64 ^ 0x5EED));
        train.truncate(keep);
        train.sort_unstable();
    }
    (train, val)
}

pub const SHAPES: [&str; 10] = [
    "disk", "square", "triangle", "ring", "cross", "hstripes", "vstripes", "checker", "diagonal", "dots",
];

/// Class `k` base colour, spread around the hue circle.
fn class_color(k: usize, classes: usize) -> [f64; 3] {
    let h = k as f64 / classes as f64 * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [0.15 + 0.7 * r, 0.15 + 0.7 * g, 0.15 + 0.7 * b]
}

/// Foreground coverage in `[0, 1]` at offset `(x, y)` from the shape centre.
fn coverage(shape: usize, x: f64, y: f64, r: f64, freq: f64, phase: f64) -> f64 {
    let soft = |d: f64| (0.5 - d / 1.5).clamp(0.0, 1.0);
    let wave = |t: f64| if (t * freq + phase).sin() > 0.0 { 1.0 } else { 0.0 };
    match shape {
        0 => soft(x.hypot(y) - r),
        1 => soft(x.abs().max(y.abs()) - 0.8 * r),
        2 => {
            let k = 3f64.sqrt();
            soft((k * x.abs() + y).max(-2.0 * y) / 2.0 - 0.45 * r)
        }
        3 => soft((x.hypot(y) - 0.7 * r).abs() - 0.22 * r),
        4 => soft((x.abs() - 0.25 * r).max(y.abs() - r).min((y.abs() - 0.25 * r).max(x.abs() - r))),
        5 => wave(y),
        6 => wave(x),
        7 => wave(x) * wave(y) + (1.0 - wave(x)) * (1.0 - wave(y)),
        8 => wave((x + y) / 2f64.sqrt()),
        _ => {
            let cell = std::f64::consts::TAU / freq;
            let (dx, dy) = ((x / cell).round() * cell - x, (y / cell).round() * cell - y);
            soft(dx.hypot(dy) - 0.3 * cell)
        }
    }
}

/// Renders `classes · per_class` images of `size × size`, interleaved by class.
///
/// Each class pairs one geometry with a base colour; every image gets a
/// random position, scale, orientation, background colour and a global
/// gain/offset applied before clamping to `[0, 1]`.
pub fn synth(classes: usize, per_class: usize, size: usize, rng: &mut Rng) -> Result<Dataset> {
    ensure!(classes >= 1 && per_class >= 1 && size >= 4, "degenerate synthetic dataset");
    let n = classes * per_class;
    let plane = size * size;
    let mut images = vec![0f32; n * 3 * plane];
    let mut labels = Vec::with_capacity(n);
    let s = size as f64;
    for i in 0..n {
        let k = i % classes;
        labels.push(k as u32);
        let mut r = rng.fork(i as u64);
        let shape = k % SHAPES.len();
        let base = class_color(k, classes);
        let fg: Vec<f64> = base.iter().map(|c| (c + 0.12 * (r.next_f64() - 0.5)).clamp(0.0, 1.0)).collect();
        let bg: Vec<f64> = (0..3).map(|_| 0.45 * r.next_f64()).collect();
        let cx = s * (0.3 + 0.4 * r.next_f64());
        let cy = s * (0.3 + 0.4 * r.next_f64());
        let radius = s * (0.2 + 0.12 * r.next_f64());
        let theta = std::f64::consts::PI * r.next_f64();
        let freq = std::f64::consts::TAU / (s * (0.14 + 0.08 * r.next_f64()));
        let phase = std::f64::consts::TAU * r.next_f64();
        let gain = 0.6 + 0.8 * r.next_f64();
        let offset = 0.2 * (r.next_f64() - 0.5);
        let noise: Vec<f64> = r.normal(3 * plane, 0.0, 0.03);
        let (sin, cos) = theta.sin_cos();
        let img = &mut images[i * 3 * plane..][..3 * plane];
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let (u, v) = (cos * dx + sin * dy, -sin * dx + cos * dy);
                let a = coverage(shape, u, v, radius, freq, phase);
                for c in 0..3 {
                    let p = y * size + x;
                    let value = gain * (a * fg[c] + (1.0 - a) * bg[c]) + offset + noise[c * plane + p];
                    img[c * plane + p] = value.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    let names = (0..classes)
        .map(|k| {
            if k < SHAPES.len() {
                SHAPES[k].to_string()
            } else {
                format!("{}{}", SHAPES[k % SHAPES.len()], k / SHAPES.len())
            }
        })
        .collect();
    Dataset::new(images, labels, names, size)
}

/// Loads a dataset directory in TLAB or PPM form.
pub fn ingest(dir: &Path) -> Result<Dataset> {
    ensure!(dir.is_dir(), "{} is not a directory", dir.display());
    if dir.join("manifest.txt").exists() {
        ingest_tlab(dir)
    } else {
        ingest_ppm(dir)
    }
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    files.sort();
    Ok(files)
}

fn read_labels(path: &Path) -> Result<Vec<(Option<String>, u32)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (name, label) = match (parts.next(), parts.next()) {
            (Some(l), None) => (None, l),
            (Some(n), Some(l)) => (Some(n.to_string()), l),
            _ => unreachable!(),
        };
        let label = label
            .parse()
            .with_context(|| format!("{} line {}: bad label `{label}`", path.display(), i + 1))?;
        out.push((name, label));
    }
    Ok(out)
}

fn ingest_tlab(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest_path)?;
    let mut kv = HashMap::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("{}: expected key = value, got `{line}`", manifest_path.display()))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| kv.get(k).ok_or_else(|| anyhow!("{} lacks `{k}`", manifest_path.display()));
    let classes: usize = get("classes")?.parse().context("manifest `classes`")?;
    let names = (0..classes)
        .map(|i| get(&format!("class.{i}")).cloned())
        .collect::<Result<Vec<_>>>()?;

    let mut images = Vec::new();
    let mut size = None;
    for file in sorted_files(dir, "tlab")? {
        let t: Tensor<f32> = serialize::load(&file).with_context(|| format!("corrupt shard {}", file.display()))?;
        let s = t.shape();
        ensure!(
            s.len() == 4 && s[1] == 3 && s[2] == s[3],
            "shard {} has shape {s:?}, want [n, 3, s, s]",
            file.display()
        );
        ensure!(
            size.is_none_or(|z| z == s[2]),
            "shard {} has size {}, earlier shards {}",
            file.display(),
            s[2],
            size.unwrap_or(0)
        );
        size = Some(s[2]);
        images.extend(t.to_vec());
    }
    let size = size.ok_or_else(|| anyhow!("no .tlab shards in {}", dir.display()))?;
    let labels: Vec<u32> = read_labels(&dir.join("labels.txt"))?.into_iter().map(|(_, l)| l).collect();
    Dataset::new(images, labels, names, size).with_context(|| format!("in {}", dir.display()))
}

/// Parses a binary (P6) or ASCII (P3) PPM into planar RGB in `[0, 1]`.
pub fn parse_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        ensure!(start < pos, "truncated header");
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let width: usize = token()?.parse().context("width")?;
    let height: usize = token()?.parse().context("height")?;
    let maxval: u32 = token()?.parse().context("maxval")?;
    ensure!(width > 0 && height > 0, "empty image");
    ensure!((1..=255).contains(&maxval), "unsupported maxval {maxval}");
    let n = width * height;
    let samples: Vec<u32> = match magic.as_str() {
        "P6" => {
            let body = &bytes[pos + 1..];
            ensure!(body.len() >= 3 * n, "pixel data truncated");
            body[..3 * n].iter().map(|&b| b as u32).collect()
        }
        "P3" => (0..3 * n)
            .map(|_| token()?.parse::<u32>().context("sample"))
            .collect::<Result<_>>()?,
        other => bail!("not a PPM (magic `{other}`)"),
    };
    ensure!(samples.iter().all(|&v| v <= maxval), "sample above maxval");
    let mut planar = vec![0f32; 3 * n];
    for (p, rgb) in samples.chunks(3).enumerate() {
        for c in 0..3 {
            planar[c * n + p] = rgb[c] as f32 / maxval as f32;
        }
    }
    Ok((width, height, planar))
}

fn ingest_ppm(dir: &Path) -> Result<Dataset> {
    let files = sorted_files(dir, "ppm")?;
    ensure!(!files.is_empty(), "no .ppm files or manifest in {}", dir.display());
    let labels_path = dir.join("labels.txt");
    let entries = read_labels(&labels_path)?;
    let labels: Vec<u32> = if entries.iter().all(|(n, _)| n.is_some()) && !entries.is_empty() {
        let map: HashMap<&str, u32> = entries.iter().map(|(n, l)| (n.as_deref().unwrap(), *l)).collect();
        files
            .iter()
            .map(|f| {
                let name = f.file_name().unwrap().to_string_lossy();
                let stem = f.file_stem().unwrap().to_string_lossy();
                map.get(name.as_ref())
                    .or_else(|| map.get(stem.as_ref()))
                    .copied()
                    .ok_or_else(|| anyhow!("{} has no label for {name}", labels_path.display()))
            })
            .collect::<Result<_>>()?
    } else {
        ensure!(
            entries.len() == files.len(),
            "{} lists {} labels for {} images",
            labels_path.display(),
            entries.len(),
            files.len()
        );
        entries.into_iter().map(|(_, l)| l).collect()
    };
    let names: Vec<String> = match fs::read_to_string(dir.join("classes.txt")) {
        Ok(text) => text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect(),
        Err(_) => (0..=labels.iter().copied().max().unwrap_or(0)).map(|k| format!("class{k}")).collect(),
    };

    let mut images = Vec::new();
    let mut size = None;
    for f in &files {
        let bytes = fs::read(f).with_context(|| format!("reading {}", f.display()))?;
        let (w, h, px) = parse_ppm(&bytes).with_context(|| format!("corrupt image {}", f.display()))?;
        ensure!(w == h, "{} is {w}x{h}; images must be square", f.display());
        ensure!(size.is_none_or(|s| s == w), "{} is {w}px, earlier images {}px", f.display(), size.unwrap_or(0));
        size = Some(w);
        images.extend(px);
    }
    Dataset::new(images, labels, names, size.unwrap()).with_context(|| format!("in {}", dir.display()))
}
