//! Procedural pedestrians: each identity has fixed head/torso/leg colours and
//! a striped torso texture; each variant shifts and scales the figure, changes
//! the background and lighting, and with probability one half draws an
//! occluding block over 20–60% of the figure from the bottom or a side.

use std::f64::consts::TAU;
use std::ops::Range;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DatasetRecord, Region};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::vit::PatchConfig;

/// `synth:seed=S,ids=A..B,variants=C..D`; the camera of a variant is
/// `variant % 2`. Omitted keys default to seed 0, ids 0..8, variants 0..16.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthSpec {
    pub seed: u64,
    pub ids: Range<usize>,
    pub variants: Range<usize>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { seed: 0, ids: 0..8, variants: 0..16 }
    }
}

fn parse_range(key: &str, v: &str) -> Result<Range<usize>> {
    let bad = || Error::Config(format!("synth: {key} must look like A..B with A < B, got {v:?}"));
    let (a, b) = v.split_once("..").ok_or_else(bad)?;
    let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
    if a >= b {
        return Err(bad());
    }
    Ok(a..b)
}

impl FromStr for SynthSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let body = s
            .strip_prefix("synth:")
            .ok_or_else(|| Error::Config(format!("synthetic spec must start with synth:, got {s:?}")))?;
        let mut spec = SynthSpec::default();
        for kv in body.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("synth: expected key=value, got {kv:?}")))?;
            match k.trim() {
                "seed" => {
                    spec.seed =
                        v.trim().parse().map_err(|_| Error::Config(format!("synth: bad seed {v:?}")))?
                }
                "ids" => spec.ids = parse_range("ids", v)?,
                "variants" => spec.variants = parse_range("variants", v)?,
                other => return Err(Error::Config(format!("synth: unknown key {other:?}"))),
            }
        }
        Ok(spec)
    }
}

impl std::fmt::Display for SynthSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "synth:seed={},ids={}..{},variants={}..{}",
            self.seed, self.ids.start, self.ids.end, self.variants.start, self.variants.end
        )
    }
}

impl SynthSpec {
    /// Records in id-major, variant-minor order.
    pub fn generate(&self, cfg: &PatchConfig) -> Result<Vec<DatasetRecord>> {
        if cfg.channels != 3 {
            return Err(Error::Config(format!("synthetic images are RGB; patch.channels is {}", cfg.channels)));
        }
        let mut out = Vec::with_capacity(self.ids.len() * self.variants.len());
        for id in self.ids.clone() {
            for v in self.variants.clone() {
                out.push(generate_identity(self.seed, id, v, v % 2, cfg.height, cfg.width));
            }
        }
        Ok(out)
    }
}

fn stream(parts: &[u64]) -> ChaCha8Rng {
    // splitmix64 fold
    let h = parts.iter().fold(0x9e37_79b9_7f4a_7c15u64, |acc, &p| {
        let mut z = acc ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    });
    ChaCha8Rng::seed_from_u64(h)
}

struct Identity {
    head: [f64; 3],
    torso: [f64; 3],
    legs: [f64; 3],
    stripe_period: f64,
    stripe_amp: f64,
    stripe_phase: f64,
    waist: f64,
}

fn colour(rng: &mut ChaCha8Rng) -> [f64; 3] {
    std::array::from_fn(|_| rng.random_range(0.05..0.95))
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let f = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        v - v * s * k.min(4.0 - k).clamp(0.0, 1.0)
    };
    [f(5.0), f(3.0), f(1.0)]
}

/// Torso hues step by the golden ratio so consecutive ids stay far apart.
fn identity(seed: u64, id: usize) -> Identity {
    let mut rng = stream(&[seed, 1, id as u64]);
    let offset = stream(&[seed, 4]).random_range(0.0..1.0);
    let hue = (offset + id as f64 * 0.618_033_988_749_895) % 1.0;
    let leg_hue = (hue + rng.random_range(0.3..0.7)) % 1.0;
    Identity {
        head: colour(&mut rng),
        torso: hsv(hue, rng.random_range(0.55..0.9), rng.random_range(0.6..0.95)),
        legs: hsv(leg_hue, rng.random_range(0.4..0.8), rng.random_range(0.3..0.6)),
        stripe_period: rng.random_range(4.0..12.0),
        stripe_amp: rng.random_range(0.1..0.35),
        stripe_phase: rng.random_range(0.0..TAU),
        waist: rng.random_range(0.5..0.6),
    }
}

/// Figure box and occluder of one generated image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Layout {
    pub figure: Region,
    pub occluder: Option<Region>,
    cx: f64,
    top: f64,
    fig_h: f64,
}

fn clip(y0: f64, x0: f64, y1: f64, x1: f64, h: usize, w: usize) -> Region {
    let t = y0.round().clamp(0.0, h as f64 - 1.0) as usize;
    let l = x0.round().clamp(0.0, w as f64 - 1.0) as usize;
    let b = (y1.round().clamp(0.0, h as f64) as usize).max(t + 1);
    let r = (x1.round().clamp(0.0, w as f64) as usize).max(l + 1);
    Region { top: t, left: l, height: b - t, width: r - l }
}

pub(crate) fn layout(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Layout {
    let (hf, wf) = (h as f64, w as f64);
    let dx = rng.random_range(-0.06..0.06) * wf;
    let dy = rng.random_range(-0.03..0.03) * hf;
    let scale = rng.random_range(0.92..1.04);
    let fig_h = 0.88 * hf * scale;
    let top = 0.06 * hf + dy;
    let cx = wf / 2.0 + dx;
    let half = 0.24 * wf * scale;
    let figure = clip(top, cx - half, top + fig_h, cx + half, h, w);

    let occluder = rng.random_bool(0.5).then(|| {
        let f = rng.random_range(0.2..0.6);
        let Region { top: t, left: l, height: fh, width: fw } = figure;
        let (t, l, fh, fw) = (t as f64, l as f64, fh as f64, fw as f64);
        match rng.random_range(0..3) {
            0 => clip(t + fh * (1.0 - f), l, t + fh, l + fw, h, w),
            1 => clip(t, l, t + fh, l + fw * f, h, w),
            _ => clip(t, l + fw * (1.0 - f), t + fh, l + fw, h, w),
        }
    });
    Layout { figure, occluder, cx, top, fig_h }
}

/// One deterministic `[3, height, width]` image.
pub fn generate_identity(seed: u64, person_id: usize, variant: usize, cam: usize, height: usize, width: usize) -> DatasetRecord {
    let who = identity(seed, person_id);
    let mut rng = stream(&[seed, 2, person_id as u64, variant as u64, cam as u64]);
    let lay = layout(&mut rng, height, width);
    let tint: [f64; 3] = {
        let mut c = stream(&[seed, 3, cam as u64]);
        std::array::from_fn(|_| c.random_range(0.9..1.1))
    };
    let brightness = rng.random_range(0.85..1.15);
    let bg_level = rng.random_range(0.25..0.65);
    let bg: [f64; 3] = std::array::from_fn(|_| bg_level + rng.random_range(-0.06..0.06));
    let occ_colour = colour(&mut rng);
    let noise = Normal::new(0.0, 0.03).expect("valid sigma");

    let (hf, wf) = (height as f64, width as f64);
    let fh = lay.fig_h;
    let head_c = (lay.top + 0.07 * fh, lay.cx);
    let (head_ry, head_rx) = (0.065 * fh, 0.11 * wf);
    let torso_y = lay.top + 0.14 * fh..lay.top + who.waist * fh;
    let torso_x = lay.cx - 0.22 * wf..lay.cx + 0.22 * wf;
    let legs_y = lay.top + who.waist * fh..lay.top + fh;
    let gap = 0.03 * wf;
    let leg_w = 0.17 * wf;

    let plane = height * width;
    let mut data = vec![0.0; 3 * plane];
    for y in 0..height {
        let yc = y as f64 + 0.5;
        for x in 0..width {
            let xc = x as f64 + 0.5;
            let (dy, dx) = ((yc - head_c.0) / head_ry, (xc - head_c.1) / head_rx);
            let mut px = if lay.occluder.is_some_and(|r| r.contains(y, x)) {
                occ_colour
            } else if dy * dy + dx * dx <= 1.0 {
                who.head
            } else if torso_y.contains(&yc) && torso_x.contains(&xc) {
                let s = 1.0 + who.stripe_amp * (TAU * (yc - lay.top) / who.stripe_period + who.stripe_phase).sin();
                who.torso.map(|c| c * s)
            } else if legs_y.contains(&yc) && (xc - lay.cx).abs() >= gap && (xc - lay.cx).abs() < gap + leg_w {
                who.legs
            } else {
                let shade = 1.0 - 0.15 * (yc / hf);
                bg.map(|c| c * shade)
            };
            for (ch, p) in px.iter_mut().enumerate() {
                *p = (*p * brightness * tint[ch] + noise.sample(&mut rng)).clamp(0.0, 1.0);
                data[ch * plane + y * width + x] = *p;
            }
        }
    }
    DatasetRecord {
        image: Tensor::new(&[3, height, width], data).expect("generated image shape"),
        person_id,
        camera_id: cam,
        occluder: lay.occluder,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn l2(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }

    #[test]
    fn deterministic_and_in_range() {
        let a = generate_identity(3, 5, 7, 1, 96, 48);
        let b = generate_identity(3, 5, 7, 1, 96, 48);
        assert!(a.image.bitwise_eq(&b.image));
        assert_eq!(a.occluder, b.occluder);
        assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let c = generate_identity(4, 5, 7, 1, 96, 48);
        assert!(!a.image.bitwise_eq(&c.image));
    }

    #[test]
    fn identities_are_farther_apart_than_variants() {
        let recs = SynthSpec::default().generate(&PatchConfig::default()).unwrap();
        let (mut intra, mut ni, mut inter, mut ne) = (0.0, 0, 0.0, 0);
        for (i, a) in recs.iter().enumerate() {
            for b in &recs[i + 1..] {
                let d = l2(&a.image, &b.image);
                if a.person_id == b.person_id {
                    intra += d;
                    ni += 1;
                } else {
                    inter += d;
                    ne += 1;
                }
            }
        }
        let (intra, inter) = (intra / ni as f64, inter / ne as f64);
        assert!(inter > intra, "inter {inter} intra {intra}");
    }

    #[test]
    fn occluders_cover_a_fifth_to_three_fifths_of_the_figure() {
        let mut occluded = 0;
        let total = 2000;
        for i in 0..total {
            let mut rng = stream(&[9, i]);
            let lay = layout(&mut rng, 96, 48);
            if let Some(r) = lay.occluder {
                occluded += 1;
                let frac = r.area() as f64 / lay.figure.area() as f64;
                assert!((0.15..=0.65).contains(&frac), "{frac}");
                assert!(r.top >= lay.figure.top && r.left >= lay.figure.left);
                assert!(r.top + r.height <= lay.figure.top + lay.figure.height);
                assert!(r.left + r.width <= lay.figure.left + lay.figure.width);
            }
        }
        let rate = occluded as f64 / total as f64;
        assert!((0.45..0.55).contains(&rate), "{rate}");
    }

    #[test]
    fn spec_parsing() {
        let s: SynthSpec = "synth:seed=4,ids=2..6,variants=0..4".parse().unwrap();
        assert_eq!(s, SynthSpec { seed: 4, ids: 2..6, variants: 0..4 });
        assert_eq!(s.to_string().parse::<SynthSpec>().unwrap(), s);
        assert_eq!("synth:".parse::<SynthSpec>().unwrap(), SynthSpec::default());
        for bad in ["synth:ids=3..3", "synth:foo=1", "synth:seed=x", "ids=0..2"] {
            assert!(bad.parse::<SynthSpec>().is_err(), "{bad}");
        }
        let recs = s.generate(&PatchConfig::default()).unwrap();
        assert_eq!(recs.len(), 16);
        assert_eq!((recs[5].person_id, recs[5].camera_id), (3, 1));
    }

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        let g = hsv(1.0 / 3.0, 1.0, 1.0);
        assert!((g[0]).abs() < 1e-12 && (g[1] - 1.0).abs() < 1e-12 && g[2].abs() < 1e-12, "{g:?}");
        assert_eq!(hsv(0.5, 0.0, 0.4), [0.4, 0.4, 0.4]);
    }
}
