//! Training samples, the synthetic shape corpus and dataset manifests.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::pnm;
use crate::rng::{seeded, SeededRng};
use crate::tensor::Tensor;

/// One supervised example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[H, W, 3]` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// Class index per pixel, row-major `H·W`.
    pub mask: Vec<u8>,
    /// Edge consensus per pixel in `[0, 1]`.
    pub edge: Vec<f64>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    /// Builds a sample whose edge map is derived from `mask`.
    pub fn from_mask(image: Tensor<f32>, mask: Vec<u8>) -> Result<Self> {
        let &[h, w, _] = image.shape() else {
            return Err(Error::dim("Sample", format!("image must be [H,W,C], got {:?}", image.shape())));
        };
        if mask.len() != h * w {
            return Err(Error::dim("Sample", format!("image {h}x{w} vs {} mask pixels", mask.len())));
        }
        let edge = boundary(&mask, h, w).into_iter().map(|e| if e { 1.0 } else { 0.0 }).collect();
        Ok(Sample { image, mask, edge })
    }
}

/// A pixel lies on a boundary when any 4-neighbour inside the image has a
/// different class.
pub fn boundary(mask: &[u8], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let c = mask[y * w + x];
            let right = x + 1 < w && mask[y * w + x + 1] != c;
            let down = y + 1 < h && mask[(y + 1) * w + x] != c;
            if right {
                out[y * w + x] = true;
                out[y * w + x + 1] = true;
            }
            if down {
                out[y * w + x] = true;
                out[(y + 1) * w + x] = true;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Shape {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
}

impl Shape {
    fn random(rng: &mut SeededRng, h: usize, w: usize) -> Self {
        let (hf, wf) = (h as f64, w as f64);
        let cy = rng.random_range(0.15 * hf..0.85 * hf);
        let cx = rng.random_range(0.15 * wf..0.85 * wf);
        let ry = rng.random_range(0.08 * hf..0.22 * hf);
        let rx = rng.random_range(0.08 * wf..0.22 * wf);
        if rng.random_bool(0.5) {
            Shape::Ellipse { cy, cx, ry, rx }
        } else {
            Shape::Rect {
                y0: cy - ry,
                x0: cx - rx,
                y1: cy + ry,
                x1: cx + rx,
            }
        }
    }

    /// Tests the pixel centre `(y + 0.5, x + 0.5)`.
    fn contains(&self, y: usize, x: usize) -> bool {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        match *self {
            Shape::Ellipse { cy, cx, ry, rx } => ((py - cy) / ry).powi(2) + ((px - cx) / rx).powi(2) <= 1.0,
            Shape::Rect { y0, x0, y1, x1 } => py >= y0 && py < y1 && px >= x0 && px < x1,
        }
    }

    fn jittered(&self, rng: &mut SeededRng, amount: f64) -> Self {
        let mut j = || rng.random_range(-amount..=amount);
        match *self {
            Shape::Ellipse { cy, cx, ry, rx } => Shape::Ellipse {
                cy: cy + j(),
                cx: cx + j(),
                ry: (ry + j()).max(1.0),
                rx: (rx + j()).max(1.0),
            },
            Shape::Rect { y0, x0, y1, x1 } => Shape::Rect {
                y0: y0 + j(),
                x0: x0 + j(),
                y1: y1 + j(),
                x1: x1 + j(),
            },
        }
    }
}

fn paint(shapes: &[(u8, Shape)], h: usize, w: usize) -> Vec<u8> {
    let mut mask = vec![0u8; h * w];
    for &(class, shape) in shapes {
        for y in 0..h {
            for x in 0..w {
                if shape.contains(y, x) {
                    mask[y * w + x] = class;
                }
            }
        }
    }
    mask
}

/// Mean RGB colour of class `c`.
pub fn class_colour(c: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 6] = [
        [0.15, 0.15, 0.2],
        [0.85, 0.35, 0.3],
        [0.3, 0.8, 0.35],
        [0.35, 0.4, 0.9],
        [0.9, 0.85, 0.3],
        [0.8, 0.4, 0.85],
    ];
    match PALETTE.get(c) {
        Some(p) => *p,
        None => {
            let t = c as f64 * 0.618_033_988_75;
            [t.fract(), (t * 2.0).fract(), (t * 3.0).fract()]
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub seed: u64,
    /// Standard deviation of the additive Gaussian texture.
    pub noise: f64,
    /// Per-sample brightness offset is drawn from `±jitter`.
    pub jitter: f64,
    /// Number of independently jittered boundary drawings averaged into the
    /// edge map. 1 gives binary edges.
    pub edge_drawings: usize,
}

impl SyntheticConfig {
    pub fn new(count: usize, height: usize, width: usize, classes: usize, seed: u64) -> Self {
        SyntheticConfig {
            count,
            height,
            width,
            classes,
            seed,
            noise: 0.1,
            jitter: 0.1,
            edge_drawings: 1,
        }
    }

    /// Edge maps averaged over 5 jittered drawings, so they take fractional
    /// values near boundaries.
    pub fn fractional(mut self) -> Self {
        self.edge_drawings = 5;
        self
    }
}

/// Images of 1 to 3 random ellipses or rectangles per foreground class on a
/// background of class 0.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<Sample>> {
    let (h, w, k) = (cfg.height, cfg.width, cfg.classes);
    if !(2..=256).contains(&k) {
        return Err(Error::config(format!("classes = {k} must lie in 2..=256")));
    }
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::config(format!("synthetic size {h}x{w} must be a positive multiple of 32")));
    }
    if cfg.edge_drawings == 0 {
        return Err(Error::config("edge_drawings must be at least 1"));
    }
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::config(format!("noise: {e}")))?;
    let mut rng = seeded(cfg.seed);
    let mut out = Vec::with_capacity(cfg.count);
    for _ in 0..cfg.count {
        let mut shapes = Vec::new();
        for class in 1..k {
            for _ in 0..rng.random_range(1..=3) {
                shapes.push((class as u8, Shape::random(&mut rng, h, w)));
            }
        }
        let mask = paint(&shapes, h, w);

        let edge = if cfg.edge_drawings == 1 {
            boundary(&mask, h, w).into_iter().map(|e| e as u8 as f64).collect()
        } else {
            let mut acc = vec![0.0; h * w];
            for _ in 0..cfg.edge_drawings {
                let drawn: Vec<_> = shapes.iter().map(|&(c, s)| (c, s.jittered(&mut rng, 1.0))).collect();
                for (a, e) in acc.iter_mut().zip(boundary(&paint(&drawn, h, w), h, w)) {
                    *a += e as u8 as f64;
                }
            }
            acc.into_iter().map(|a| a / cfg.edge_drawings as f64).collect()
        };

        let brightness = rng.random_range(-cfg.jitter..=cfg.jitter);
        let mut data = Vec::with_capacity(h * w * 3);
        for &c in &mask {
            for ch in class_colour(c as usize) {
                let v: f64 = ch + brightness + noise.sample(&mut rng);
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
        out.push(Sample {
            image: Tensor::new(&[h, w, 3], data)?,
            mask,
            edge,
        });
    }
    Ok(out)
}

/// List of image/mask file pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    /// Relative entries are resolved against this directory.
    pub root: PathBuf,
    pub pairs: Vec<(PathBuf, PathBuf)>,
    /// From a `# split: <tag>` comment, if any.
    pub split: Option<String>,
    /// From a `# seed: <n>` comment, if any.
    pub seed: Option<u64>,
}

impl Manifest {
    /// Parses `image,mask` lines. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut m = Manifest {
            root: root.into(),
            pairs: Vec::new(),
            split: None,
            seed: None,
        };
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if let Some(comment) = line.strip_prefix('#') {
                if let Some((key, value)) = comment.split_once(':') {
                    match key.trim() {
                        "split" => m.split = Some(value.trim().to_string()),
                        "seed" => m.seed = value.trim().parse().ok(),
                        _ => {}
                    }
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let (image, mask) = line
                .split_once(',')
                .filter(|(a, b)| !a.trim().is_empty() && !b.trim().is_empty() && !b.contains(','))
                .ok_or_else(|| Error::Parse {
                    key: format!("manifest line {}", n + 1),
                    message: format!("expected `image,mask`, got `{line}`"),
                })?;
            m.pairs.push((PathBuf::from(image.trim()), PathBuf::from(mask.trim())));
        }
        Ok(m)
    }

    /// Reads a manifest; entries resolve relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(split) = &self.split {
            s += &format!("# split: {split}\n");
        }
        if let Some(seed) = self.seed {
            s += &format!("# seed: {seed}\n");
        }
        for (i, m) in &self.pairs {
            s += &format!("{},{}\n", i.display(), m.display());
        }
        s
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Reads every pair, deriving edges from the masks.
    pub fn load_samples(&self) -> Result<Vec<Sample>> {
        self.pairs
            .iter()
            .map(|(img, msk)| {
                let image = pnm::read_image::<f32>(&self.resolve(img))?;
                let (mh, mw, mask) = pnm::read_mask(&self.resolve(msk))?;
                let s = image.shape();
                if s[2] != 3 || (s[0], s[1]) != (mh, mw) {
                    return Err(Error::dim(
                        "Manifest::load_samples",
                        format!("{} is {:?} but {} is {mh}x{mw}", img.display(), s, msk.display()),
                    ));
                }
                Sample::from_mask(image, mask)
            })
            .collect()
    }
}

/// Writes samples as `images/NNNN.ppm`, `masks/NNNN.pgm` under `dir` plus
/// a manifest named `<split>.csv`; returns the manifest path.
pub fn write_corpus(dir: &Path, split: &str, seed: Option<u64>, samples: &[Sample]) -> Result<PathBuf> {
    let (images, masks) = (dir.join("images"), dir.join("masks"));
    fs::create_dir_all(&images)?;
    fs::create_dir_all(&masks)?;
    let mut manifest = Manifest {
        root: dir.to_path_buf(),
        pairs: Vec::new(),
        split: Some(split.to_string()),
        seed,
    };
    for (i, s) in samples.iter().enumerate() {
        let img = PathBuf::from("images").join(format!("{split}_{i:04}.ppm"));
        let msk = PathBuf::from("masks").join(format!("{split}_{i:04}.pgm"));
        pnm::write_image(&dir.join(&img), &s.image)?;
        pnm::write_mask(&dir.join(&msk), s.height(), s.width(), &s.mask)?;
        manifest.pairs.push((img, msk));
    }
    let path = dir.join(format!("{split}.csv"));
    fs::write(&path, manifest.to_text())?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_of_single_pixel() {
        let mut mask = vec![0u8; 9];
        mask[4] = 1;
        let b = boundary(&mask, 3, 3);
        let expected = [false, true, false, true, true, true, false, true, false];
        assert_eq!(b, expected);
    }

    #[test]
    fn generator_is_deterministic() {
        let cfg = SyntheticConfig::new(3, 32, 32, 3, 9);
        assert_eq!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&cfg).unwrap());
        let other = SyntheticConfig { seed: 10, ..cfg.clone() };
        assert_ne!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn fractional_edges_take_intermediate_values() {
        let cfg = SyntheticConfig::new(4, 32, 32, 3, 1).fractional();
        let samples = generate_synthetic(&cfg).unwrap();
        let edges: Vec<f64> = samples.iter().flat_map(|s| s.edge.iter().copied()).collect();
        assert!(edges.iter().all(|&e| (0.0..=1.0).contains(&e) && ((e * 5.0).round() - e * 5.0).abs() < 1e-12));
        assert!(edges.iter().any(|&e| e > 0.0 && e < 1.0));
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(generate_synthetic(&SyntheticConfig::new(1, 30, 32, 3, 0)).is_err());
        assert!(generate_synthetic(&SyntheticConfig::new(1, 32, 32, 1, 0)).is_err());
    }

    #[test]
    fn manifest_parse_and_print() {
        let text = "# split: val\n# seed: 7\n\na.ppm, a.pgm\n# note\nb.ppm,b.pgm\n";
        let m = Manifest::parse(text, "/data").unwrap();
        assert_eq!(m.split.as_deref(), Some("val"));
        assert_eq!(m.seed, Some(7));
        assert_eq!(m.pairs.len(), 2);
        assert_eq!(Manifest::parse(&m.to_text(), "/data").unwrap(), m);
        assert!(Manifest::parse("only_one_field\n", ".").is_err());
        assert!(Manifest::parse("a,b,c\n", ".").is_err());
    }
}
