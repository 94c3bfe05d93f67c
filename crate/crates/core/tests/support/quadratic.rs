//! Random gappy instances and a dense quadratic model of the cost for
//! linear priors, minimized by conjugate gradients.

use gapfill::field::FieldMeta;
use gapfill::GappyField;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub y: GappyField,
    pub ocean: Array2<bool>,
}

pub fn instance(seed: u64, (t, h, w): (usize, usize, usize), gap: f64, land: bool) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ocean = Array2::from_shape_fn((h, w), |(i, j)| !(land && i < 2 && j < 3));
    let values = Array3::from_shape_fn((t, h, w), |_| rng.random_range(-1.0..1.0));
    let valid = Array3::from_shape_fn((t, h, w), |(_, i, j)| ocean[[i, j]] && rng.random::<f64>() >= gap);
    Instance {
        y: GappyField::new(values, valid, FieldMeta::default()).unwrap(),
        ocean,
    }
}

/// Dense quadratic form of the cost for linear priors, built index by index.
pub struct Quadratic {
    n: usize,
    h: Vec<f64>,
    b: Vec<f64>,
    c: f64,
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        0
    } else if i < 0 {
        (-i) as usize
    } else if i as usize >= n {
        2 * (n - 1) - i as usize
    } else {
        i as usize
    }
}

impl Quadratic {
    pub fn build(inst: &Instance, nu: Option<f64>, l1: f64, l2: f64) -> Self {
        let (t, h, w) = inst.y.dims();
        let n = t * h * w;
        let idx = |k: usize, i: usize, j: usize| (k * h + i) * w + j;
        let sea = |q: usize| inst.ocean[[(q / w) % h, q % w]];
        // R = rows of (I - φ) restricted to ocean.
        let mut r = vec![0.0; n * n];
        for k in 0..t {
            for i in 0..h {
                for j in 0..w {
                    let row = idx(k, i, j);
                    if !inst.ocean[[i, j]] {
                        continue;
                    }
                    r[row * n + row] += 1.0;
                    if let Some(nu) = nu {
                        // φ = x + ν Δx, so I − φ = −ν Δ on sea.
                        r[row * n + row] -= 1.0;
                        let mut add = |q: usize, v: f64| {
                            if sea(q) {
                                r[row * n + q] -= nu * v;
                            }
                        };
                        add(row, -6.0);
                        for (dk, di, dj) in [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)] {
                            let q = idx(
                                reflect(k as isize + dk, t),
                                reflect(i as isize + di, h),
                                reflect(j as isize + dj, w),
                            );
                            add(q, 1.0);
                        }
                    }
                }
            }
        }
        let mut hm = vec![0.0; n * n];
        for a in 0..n {
            for row in 0..n {
                let ra = r[row * n + a];
                if ra == 0.0 {
                    continue;
                }
                for bcol in 0..n {
                    hm[a * n + bcol] += l2 * ra * r[row * n + bcol];
                }
            }
        }
        let mut b = vec![0.0; n];
        let mut c = 0.0;
        for ((q, &v), &ok) in inst.y.values().iter().enumerate().zip(inst.y.valid()) {
            if ok && sea(q) {
                hm[q * n + q] += l1;
                b[q] = l1 * v;
                c += l1 * v * v;
            }
        }
        Self { n, h: hm, b, c }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|a| self.h[a * self.n..][..self.n].iter().zip(x).map(|(p, q)| p * q).sum())
            .collect()
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let hx = self.apply(x);
        dot(x, &hx) - 2.0 * dot(&self.b, x) + self.c
    }

    pub fn conjugate_gradient(&self) -> Vec<f64> {
        let mut x = vec![0.0; self.n];
        let mut r = self.b.clone();
        let mut p = r.clone();
        let mut rr = dot(&r, &r);
        for _ in 0..10 * self.n {
            if rr.sqrt() < 1e-14 {
                break;
            }
            let hp = self.apply(&p);
            let a = rr / dot(&p, &hp);
            x.iter_mut().zip(&p).for_each(|(xi, pi)| *xi += a * pi);
            r.iter_mut().zip(&hp).for_each(|(ri, hi)| *ri -= a * hi);
            let rr2 = dot(&r, &r);
            p = r.iter().zip(&p).map(|(ri, pi)| ri + rr2 / rr * pi).collect();
            rr = rr2;
        }
        x
    }

    /// Largest eigenvalue of the Hessian `2H`.
    pub fn lipschitz(&self) -> f64 {
        let mut v = vec![1.0; self.n];
        let mut lam = 0.0;
        for _ in 0..500 {
            let hv = self.apply(&v);
            let norm = dot(&hv, &hv).sqrt();
            lam = norm / dot(&v, &v).sqrt();
            v = hv.iter().map(|x| x / norm).collect();
        }
        2.0 * lam * 1.01
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
