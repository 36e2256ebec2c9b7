//! Procedurally rendered faces with ground-truth landmarks.
//!
//! Every identity has a fixed latent geometry and palette; samples add
//! pose jitter, lighting, background, sensor noise and a random horizontal
//! flip. Landmarks are computed from the same geometry used for rendering.

use std::f64::consts::TAU;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::facegeom::{
    read_landmark_file, write_landmark_file, LandmarkRecord, LandmarkSet, Point,
};
use crate::numerics::Tensor;

/// Dense landmark count: 12 contour, 8 eye, 2 nose and 4 mouth points.
pub const DENSE_LANDMARKS: usize = 26;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthFaceSpec {
    pub image: usize,
    pub identities: usize,
    pub samples: usize,
    pub flip_prob: f64,
    /// Standard deviation of additive pixel noise on the [0, 1] scale.
    pub noise: f64,
    /// Maximum translation in pixels.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SynthFaceSpec {
    fn default() -> Self {
        Self {
            image: 32,
            identities: 20,
            samples: 50,
            flip_prob: 0.5,
            noise: 0.04,
            jitter: 1.5,
            seed: 0,
        }
    }
}

impl SynthFaceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image < 16 || self.identities == 0 || self.samples == 0 {
            return Err(Error::Config(format!(
                "synthetic faces need image >= 16 and nonzero counts (image {}, identities {}, samples {})",
                self.image, self.identities, self.samples
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) || !(self.noise >= 0.0) || !(self.jitter >= 0.0) {
            return Err(Error::Config(
                "flip probability, noise and jitter must be valid".into(),
            ));
        }
        Ok(())
    }
}

/// Per-identity latent geometry, in units of the image side.
#[derive(Debug, Clone, Copy)]
struct Identity {
    rx: f64,
    ry: f64,
    skin: [f64; 3],
    hair: [f64; 3],
    hairline: f64,
    eye_dx: f64,
    eye_y: f64,
    eye_r: f64,
    iris: [f64; 3],
    nose_len: f64,
    mouth_w: f64,
    mouth_y: f64,
    lips: [f64; 3],
}

impl Identity {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let mut u = |a: f64, b: f64| rng.random_range(a..b);
        let tone = u(0.35, 0.9);
        Self {
            rx: u(0.26, 0.34),
            ry: u(0.34, 0.42),
            skin: [tone, tone * u(0.7, 0.85), tone * u(0.55, 0.7)],
            hair: [u(0.0, 0.6), u(0.0, 0.45), u(0.0, 0.3)],
            hairline: u(0.35, 0.7),
            eye_dx: u(0.09, 0.15),
            eye_y: u(-0.14, -0.05),
            eye_r: u(0.035, 0.06),
            iris: [u(0.0, 0.35), u(0.0, 0.35), u(0.05, 0.5)],
            nose_len: u(0.06, 0.13),
            mouth_w: u(0.07, 0.13),
            mouth_y: u(0.13, 0.22),
            lips: [u(0.5, 0.9), u(0.1, 0.35), u(0.15, 0.35)],
        }
    }
}

/// Per-sample nuisance parameters.
#[derive(Debug, Clone, Copy)]
struct Pose {
    dx: f64,
    dy: f64,
    scale: f64,
    gain: f64,
    background: [f64; 3],
}

/// One rendered face in `[C, H, W]` byte layout, before any flip.
struct Rendered {
    pixels: Vec<u8>,
    landmarks: LandmarkSet,
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    /// Antialiased coverage of pixel center `(x, y)`.
    fn coverage(&self, x: f64, y: f64) -> f64 {
        let rho = (((x - self.cx) / self.rx).powi(2) + ((y - self.cy) / self.ry).powi(2)).sqrt();
        ((1.0 - rho) * self.rx.min(self.ry) + 0.5).clamp(0.0, 1.0)
    }

    fn point(&self, angle: f64) -> Point {
        [
            self.cx + self.rx * angle.cos(),
            self.cy + self.ry * angle.sin(),
        ]
    }
}

fn blend(px: &mut [f64; 3], color: [f64; 3], alpha: f64) {
    for c in 0..3 {
        px[c] = px[c] * (1.0 - alpha) + color[c] * alpha;
    }
}

fn render(id: &Identity, pose: &Pose, side: usize, noise: &mut impl FnMut() -> f64) -> Rendered {
    let n = side as f64;
    let s = n * pose.scale;
    let cx = (n - 1.0) / 2.0 + pose.dx;
    let cy = (n - 1.0) / 2.0 + pose.dy;
    let face = Ellipse {
        cx,
        cy,
        rx: id.rx * s,
        ry: id.ry * s,
    };
    let hair = Ellipse {
        cx,
        cy: cy - 0.03 * s,
        rx: face.rx * 1.12,
        ry: face.ry * 1.1,
    };
    let hair_cut = cy - id.hairline * face.ry;
    let eye_y = cy + id.eye_y * s;
    let eyes = [-1.0, 1.0].map(|sgn| Ellipse {
        cx: cx + sgn * id.eye_dx * s,
        cy: eye_y,
        rx: id.eye_r * s,
        ry: id.eye_r * s * 0.6,
    });
    let nose_top = eye_y + 0.03 * s;
    let nose_tip = eye_y + (0.03 + id.nose_len) * s;
    let nose = Ellipse {
        cx,
        cy: (nose_top + nose_tip) / 2.0,
        rx: 0.025 * s,
        ry: (nose_tip - nose_top) / 2.0,
    };
    let mouth = Ellipse {
        cx,
        cy: cy + id.mouth_y * s,
        rx: id.mouth_w * s,
        ry: 0.03 * s,
    };
    let nose_color = id.skin.map(|v| v * 0.75);

    let mut pixels = vec![0u8; 3 * side * side];
    for y in 0..side {
        for x in 0..side {
            let (xf, yf) = (x as f64, y as f64);
            let mut px = pose.background;
            let hair_a = hair.coverage(xf, yf) * ((hair_cut - yf) + 0.5).clamp(0.0, 1.0);
            blend(&mut px, id.hair, hair_a);
            blend(&mut px, id.skin, face.coverage(xf, yf) * (1.0 - hair_a));
            blend(&mut px, nose_color, nose.coverage(xf, yf));
            for e in &eyes {
                blend(&mut px, id.iris, e.coverage(xf, yf));
            }
            blend(&mut px, id.lips, mouth.coverage(xf, yf));
            for (c, v) in px.iter().enumerate() {
                let v = (v * pose.gain + noise()).clamp(0.0, 1.0);
                pixels[(c * side + y) * side + x] = (v * 255.0).round() as u8;
            }
        }
    }

    let hi = n - 1.0;
    let clamp = |p: Point| [p[0].clamp(0.0, hi), p[1].clamp(0.0, hi)];
    let mut dense: Vec<Point> = (0..12).map(|k| face.point(TAU * k as f64 / 12.0)).collect();
    for e in &eyes {
        dense.extend([
            e.point(std::f64::consts::PI),
            e.point(0.0),
            e.point(-TAU / 4.0),
            e.point(TAU / 4.0),
        ]);
    }
    dense.extend([[cx, nose_top], [cx, nose_tip]]);
    dense.extend([
        mouth.point(std::f64::consts::PI),
        mouth.point(0.0),
        mouth.point(-TAU / 4.0),
        mouth.point(TAU / 4.0),
    ]);
    let sparse = vec![
        [eyes[0].cx, eyes[0].cy],
        [eyes[1].cx, eyes[1].cy],
        [cx, nose_tip],
        mouth.point(std::f64::consts::PI),
        mouth.point(0.0),
    ];
    Rendered {
        pixels,
        landmarks: LandmarkSet::new(
            dense.into_iter().map(clamp).collect(),
            sparse.into_iter().map(clamp).collect(),
        ),
    }
}

fn flip_pixels(pixels: &[u8], side: usize) -> Vec<u8> {
    let mut out = vec![0u8; pixels.len()];
    for row in 0..3 * side {
        for x in 0..side {
            out[row * side + x] = pixels[row * side + side - 1 - x];
        }
    }
    out
}

/// One labelled face: 8-bit pixels, the normalized tensor and landmarks.
#[derive(Debug, Clone)]
pub struct FaceSample {
    pub id: String,
    pub label: usize,
    pub pixels: Vec<u8>,
    pub image: Tensor,
    pub landmarks: LandmarkSet,
    pub flipped: bool,
}

/// `(v − 127.5) / 128` per byte, `[3, side, side]`.
pub fn normalize_pixels(pixels: &[u8], side: usize) -> Result<Tensor> {
    Tensor::new(
        pixels.iter().map(|&v| (v as f64 - 127.5) / 128.0).collect(),
        &[3, side, side],
    )
}

fn sample_seed(seed: u64, identity: usize, sample: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((identity as u64) << 32 | sample as u64)
}

/// Renders one sample; `flip` overrides the random flip decision.
pub fn render_sample(
    spec: &SynthFaceSpec,
    identity: usize,
    sample: usize,
    flip: Option<bool>,
) -> Result<FaceSample> {
    let mut id_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x1D_E471_7100 ^ identity as u64);
    let id = Identity::sample(&mut id_rng);
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, identity, sample));
    let j = spec.jitter;
    let pose = Pose {
        dx: if j > 0.0 {
            rng.random_range(-j..=j)
        } else {
            0.0
        },
        dy: if j > 0.0 {
            rng.random_range(-j..=j)
        } else {
            0.0
        },
        scale: rng.random_range(0.92..1.08),
        gain: rng.random_range(0.8..1.2),
        background: [
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
        ],
    };
    let do_flip = rng.random_bool(spec.flip_prob);
    let do_flip = flip.unwrap_or(do_flip);
    let normal = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut noise = || {
        if spec.noise > 0.0 {
            normal.sample(&mut rng)
        } else {
            0.0
        }
    };
    let r = render(&id, &pose, spec.image, &mut noise);
    let (pixels, landmarks) = if do_flip {
        (
            flip_pixels(&r.pixels, spec.image),
            r.landmarks.flipped(spec.image),
        )
    } else {
        (r.pixels, r.landmarks)
    };
    Ok(FaceSample {
        id: format!("{identity:03}_{sample:03}"),
        label: identity,
        image: normalize_pixels(&pixels, spec.image)?,
        pixels,
        landmarks,
        flipped: do_flip,
    })
}

/// The whole dataset, identity-major.
pub fn generate_dataset(spec: &SynthFaceSpec) -> Result<Vec<FaceSample>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.identities * spec.samples);
    for i in 0..spec.identities {
        for s in 0..spec.samples {
            out.push(render_sample(spec, i, s, None)?);
        }
    }
    Ok(out)
}

/// Writes `images/<id>.png`, `landmarks.jsonl` and `labels.csv` under `dir`.
pub fn write_dataset(dir: &Path, samples: &[FaceSample], side: usize) -> Result<()> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir)?;
    for s in samples {
        write_png(&img_dir.join(format!("{}.png", s.id)), &s.pixels, side)?;
    }
    let records: Vec<LandmarkRecord> = samples
        .iter()
        .map(|s| LandmarkRecord::new(&s.id, &s.landmarks))
        .collect();
    write_landmark_file(
        BufWriter::new(fs::File::create(dir.join("landmarks.jsonl"))?),
        &records,
    )?;
    let mut labels = BufWriter::new(fs::File::create(dir.join("labels.csv"))?);
    writeln!(labels, "id,label,flipped,file")?;
    for s in samples {
        writeln!(
            labels,
            "{},{},{},images/{}.png",
            s.id,
            s.label,
            u8::from(s.flipped),
            s.id
        )?;
    }
    labels.flush()?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Vec<FaceSample>> {
    let lm = read_landmark_file(BufReader::new(fs::File::open(dir.join("landmarks.jsonl"))?))?;
    let labels = BufReader::new(fs::File::open(dir.join("labels.csv"))?);
    let mut out = Vec::new();
    for (n, line) in labels.lines().enumerate().skip(1) {
        let line = line?;
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Config(format!("labels.csv line {}: malformed `{line}`", n + 1));
        if f.len() != 4 {
            return Err(bad());
        }
        let label = f[1].parse().map_err(|_| bad())?;
        let rec = lm
            .iter()
            .find(|r| r.id == f[0])
            .ok_or_else(|| Error::Config(format!("no landmarks for `{}`", f[0])))?;
        let (pixels, side) = read_png(&dir.join(f[3]))?;
        out.push(FaceSample {
            id: f[0].to_string(),
            label,
            image: normalize_pixels(&pixels, side)?,
            pixels,
            landmarks: rec.landmarks(),
            flipped: f[2] == "1",
        });
    }
    Ok(out)
}

fn write_png(path: &Path, planar: &[u8], side: usize) -> Result<()> {
    let mut interleaved = vec![0u8; planar.len()];
    for c in 0..3 {
        for i in 0..side * side {
            interleaved[i * 3 + c] = planar[c * side * side + i];
        }
    }
    let file = BufWriter::new(fs::File::create(path)?);
    let mut enc = png::Encoder::new(file, side as u32, side as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc
        .write_header()
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    w.write_image_data(&interleaved)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(())
}

fn read_png(path: &Path) -> Result<(Vec<u8>, usize)> {
    let dec = png::Decoder::new(BufReader::new(fs::File::open(path)?));
    let mut reader = dec
        .read_info()
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Config(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    if info.color_type != png::ColorType::Rgb
        || info.bit_depth != png::BitDepth::Eight
        || info.width != info.height
    {
        return Err(Error::Config(format!(
            "{}: expected a square 8-bit RGB image",
            path.display()
        )));
    }
    let side = info.width as usize;
    let mut planar = vec![0u8; 3 * side * side];
    for i in 0..side * side {
        for c in 0..3 {
            planar[c * side * side + i] = buf[i * 3 + c];
        }
    }
    Ok((planar, side))
}
