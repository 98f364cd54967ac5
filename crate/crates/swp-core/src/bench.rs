//! Single-layer microbenchmark: dense f32 convolution against the stripe
//! kernel across a sparsity grid, checking that both paths agree before
//! timing them.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fsconv::{conv_out_dim, valid_out_range};

/// Dense layer in f32 with an accompanying keep mask per (filter, ki, kj)
/// stripe; masked stripes are zeroed so both kernels compute the same
/// function.
pub struct BenchLayer {
    pub n: usize,
    pub c: usize,
    pub k: usize,
    pub weight: Vec<f32>, // (n, c, k, k)
    pub kept: Vec<(usize, usize, usize)>,
}

#[derive(Debug, Clone, Copy)]
pub struct BenchConfig {
    pub n: usize,
    pub c: usize,
    pub k: usize,
    pub h: usize,
    pub w: usize,
    pub batch: usize,
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> BenchConfig {
        BenchConfig {
            n: 64,
            c: 64,
            k: 3,
            h: 32,
            w: 32,
            batch: 1,
            reps: 3,
            seed: 0,
        }
    }
}

pub fn make_layer(cfg: &BenchConfig, keep_fraction: f64, rng: &mut ChaCha8Rng) -> BenchLayer {
    let (n, c, k) = (cfg.n, cfg.c, cfg.k);
    let mut weight = vec![0.0f32; n * c * k * k];
    let mut kept = Vec::new();
    for f in 0..n {
        for ki in 0..k {
            for kj in 0..k {
                if rng.gen::<f64>() < keep_fraction {
                    kept.push((f, ki, kj));
                    for ch in 0..c {
                        weight[((f * c + ch) * k + ki) * k + kj] = rng.gen_range(-0.5..0.5);
                    }
                }
            }
        }
    }
    BenchLayer { n, c, k, weight, kept }
}

pub fn dense_conv_f32(layer: &BenchLayer, x: &[f32], batch: usize, h: usize, w: usize) -> Vec<f32> {
    let (n, c, k) = (layer.n, layer.c, layer.k);
    let p = (k - 1) / 2;
    let (oh, ow) = (conv_out_dim(h, k, 1, p), conv_out_dim(w, k, 1, p));
    let mut out = vec![0.0f32; batch * n * oh * ow];
    // loop order (filter, ki, kj, channel) matches the stripe kernel's
    // accumulation order, so agreement checks can be exact
    for b in 0..batch {
        for f in 0..n {
            let obase = (b * n + f) * oh * ow;
            for ki in 0..k {
                for kj in 0..k {
                    let (y0, y1) = valid_out_range(h, oh, 1, ki, p);
                    let (x0, x1) = valid_out_range(w, ow, 1, kj, p);
                    for ch in 0..c {
                        let wv = layer.weight[((f * c + ch) * k + ki) * k + kj];
                        let xbase = (b * c + ch) * h * w;
                        for oy in y0..y1 {
                            let iy = oy + ki - p;
                            let xrow = &x[xbase + iy * w + x0 + kj - p..];
                            let orow = &mut out[obase + oy * ow + x0..obase + oy * ow + x1];
                            for (o, &xv) in orow.iter_mut().zip(xrow) {
                                *o += wv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn stripe_conv_f32(layer: &BenchLayer, x: &[f32], batch: usize, h: usize, w: usize) -> Vec<f32> {
    let (n, c, k) = (layer.n, layer.c, layer.k);
    let p = (k - 1) / 2;
    let (oh, ow) = (conv_out_dim(h, k, 1, p), conv_out_dim(w, k, 1, p));
    let mut out = vec![0.0f32; batch * n * oh * ow];
    for b in 0..batch {
        for &(f, ki, kj) in &layer.kept {
            let obase = (b * n + f) * oh * ow;
            let (y0, y1) = valid_out_range(h, oh, 1, ki, p);
            let (x0, x1) = valid_out_range(w, ow, 1, kj, p);
            for ch in 0..c {
                let wv = layer.weight[((f * c + ch) * k + ki) * k + kj];
                let xbase = (b * c + ch) * h * w;
                for oy in y0..y1 {
                    let iy = oy + ki - p;
                    let xrow = &x[xbase + iy * w + x0 + kj - p..];
                    let orow = &mut out[obase + oy * ow + x0..obase + oy * ow + x1];
                    for (o, &xv) in orow.iter_mut().zip(xrow) {
                        *o += wv * xv;
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    /// Fraction of stripes removed.
    pub sparsity: f64,
    pub dense_ms: f64,
    pub stripe_ms: f64,
    pub checksum_ok: bool,
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("sparsity,dense_ms,stripe_ms,checksum_ok\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{:.2},{:.3},{:.3},{}",
            r.sparsity, r.dense_ms, r.stripe_ms, r.checksum_ok
        );
    }
    out
}

fn agree(a: &[f32], b: &[f32], tol: f32) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(&x, &y)| (x - y).abs() <= tol)
}

/// Time both kernels at each sparsity level. `checksum_ok` records whether
/// the outputs agreed within 1e-6 before any timing is trusted.
pub fn run_bench(cfg: &BenchConfig, sparsities: &[f64]) -> Vec<BenchRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x: Vec<f32> = (0..cfg.batch * cfg.c * cfg.h * cfg.w)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let mut rows = Vec::new();
    for &s in sparsities {
        let layer = make_layer(cfg, 1.0 - s, &mut rng);
        let dense_out = dense_conv_f32(&layer, &x, cfg.batch, cfg.h, cfg.w);
        let stripe_out = stripe_conv_f32(&layer, &x, cfg.batch, cfg.h, cfg.w);
        let checksum_ok = agree(&dense_out, &stripe_out, 1e-6);
        let time_ms = |f: &dyn Fn() -> Vec<f32>| {
            let mut best = f64::INFINITY;
            for _ in 0..cfg.reps {
                let t = Instant::now();
                let out = f();
                let dt = t.elapsed().as_secs_f64() * 1e3;
                std::hint::black_box(out);
                best = best.min(dt);
            }
            best
        };
        let dense_ms = time_ms(&|| dense_conv_f32(&layer, &x, cfg.batch, cfg.h, cfg.w));
        let stripe_ms = time_ms(&|| stripe_conv_f32(&layer, &x, cfg.batch, cfg.h, cfg.w));
        rows.push(BenchRow { sparsity: s, dense_ms, stripe_ms, checksum_ok });
    }
    rows
}
