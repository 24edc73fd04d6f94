//! Synthetic overlapping-chromosome fixtures.
//!
//! Each sample is a 94×93 grayscale image on a white background holding two
//! thick curved strips. Label 1 marks pixels covered only by the first strip,
//! label 2 only by the second, label 3 by both, label 0 the background. The
//! first strip is lighter than the second and the overlap is darkest, with
//! mild per-pixel noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const HEIGHT: usize = 94;
pub const WIDTH: usize = 93;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub image: Vec<u8>,
    pub label: Vec<u8>,
}

#[derive(Clone, Copy, Debug)]
pub struct CorpusSpec {
    pub seed: u64,
    /// Fraction of samples whose strips are forced apart.
    pub disjoint_fraction: f64,
    pub noise: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            disjoint_fraction: 0.2,
            noise: 6.0,
        }
    }
}

struct Strip {
    p0: (f64, f64),
    p1: (f64, f64),
    p2: (f64, f64),
    half_width: f64,
}

impl Strip {
    fn random(rng: &mut ChaCha8Rng, rows: (f64, f64), cols: (f64, f64)) -> Self {
        let mut pt = |r: (f64, f64), c: (f64, f64)| (rng.random_range(r.0..r.1), rng.random_range(c.0..c.1));
        let p0 = pt(rows, cols);
        let p2 = pt(rows, cols);
        let p1 = pt(rows, cols);
        Self {
            p0,
            p1,
            p2,
            half_width: rng.random_range(3.5..6.0),
        }
    }

    fn samples(&self) -> Vec<(f64, f64)> {
        (0..=200)
            .map(|k| {
                let t = k as f64 / 200.0;
                let u = 1.0 - t;
                (
                    u * u * self.p0.0 + 2.0 * u * t * self.p1.0 + t * t * self.p2.0,
                    u * u * self.p0.1 + 2.0 * u * t * self.p1.1 + t * t * self.p2.1,
                )
            })
            .collect()
    }

    fn mask(&self) -> Vec<bool> {
        let pts = self.samples();
        let hw2 = self.half_width * self.half_width;
        let mut out = vec![false; HEIGHT * WIDTH];
        for r in 0..HEIGHT {
            for c in 0..WIDTH {
                let (y, x) = (r as f64, c as f64);
                out[r * WIDTH + c] = pts
                    .iter()
                    .any(|&(py, px)| (py - y) * (py - y) + (px - x) * (px - x) <= hw2);
            }
        }
        out
    }
}

fn length(s: &Strip) -> f64 {
    let (a, b) = (s.p0, s.p2);
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

fn strip(rng: &mut ChaCha8Rng, rows: (f64, f64), cols: (f64, f64)) -> Strip {
    loop {
        let s = Strip::random(rng, rows, cols);
        if length(&s) > 35.0 {
            return s;
        }
    }
}

pub fn sample(rng: &mut ChaCha8Rng, spec: &CorpusSpec) -> Sample {
    let (h, w) = (HEIGHT as f64, WIDTH as f64);
    let disjoint = rng.random_bool(spec.disjoint_fraction.clamp(0.0, 1.0));
    let (a, b) = if disjoint {
        (
            strip(rng, (8.0, h - 8.0), (8.0, w / 2.0 - 8.0)),
            strip(rng, (8.0, h - 8.0), (w / 2.0 + 8.0, w - 8.0)),
        )
    } else {
        loop {
            let a = strip(rng, (8.0, h - 8.0), (8.0, w - 8.0));
            let b = strip(rng, (8.0, h - 8.0), (8.0, w - 8.0));
            let (ma, mb) = (a.mask(), b.mask());
            if ma.iter().zip(&mb).filter(|(x, y)| **x && **y).count() >= 6 {
                break (a, b);
            }
        }
    };
    let (ma, mb) = (a.mask(), b.mask());
    let mut image = vec![0u8; HEIGHT * WIDTH];
    let mut label = vec![0u8; HEIGHT * WIDTH];
    for k in 0..HEIGHT * WIDTH {
        let (cls, base) = match (ma[k], mb[k]) {
            (false, false) => (0u8, 250.0),
            (true, false) => (1, 170.0),
            (false, true) => (2, 110.0),
            (true, true) => (3, 55.0),
        };
        let noise = if spec.noise > 0.0 {
            rng.random_range(-spec.noise..spec.noise)
        } else {
            0.0
        };
        label[k] = cls;
        image[k] = (base + noise).round().clamp(0.0, 255.0) as u8;
    }
    Sample { image, label }
}

/// `n` samples from a seeded stream; equal seeds give equal corpora.
pub fn corpus(n: usize, spec: &CorpusSpec) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..n).map(|_| sample(&mut rng, spec)).collect()
}

/// Random class map with values below `classes`.
pub fn random_labels(rng: &mut ChaCha8Rng, len: usize, classes: u8) -> Vec<u8> {
    (0..len).map(|_| rng.random_range(0..classes)).collect()
}
