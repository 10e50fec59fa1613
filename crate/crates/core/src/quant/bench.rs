//! Host-side matvec timing for dense, 16-bit and packed weights.

use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{PackedBlob, QuantConfig, QuantizedTensor};
use crate::error::{Error, Result};
use crate::numkit::Matrix;

/// One CSV row of `quant-bench`. `max_abs_err` is measured against the
/// full-precision dense matvec.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub implementation: String,
    pub bytes: usize,
    pub ns_per_matvec: f64,
    pub max_abs_err: f64,
}

impl BenchRow {
    pub const CSV_HEADER: &'static str = "impl,bytes,ns_per_matvec,max_abs_err";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:.1},{:.3e}",
            self.implementation, self.bytes, self.ns_per_matvec, self.max_abs_err
        )
    }
}

fn to_bf16(v: f64) -> u16 {
    // round-to-nearest-even on the dropped half of the f32 bits
    let bits = (v as f32).to_bits();
    let rounding = 0x7FFF + ((bits >> 16) & 1);
    ((bits + rounding) >> 16) as u16
}

fn from_bf16(h: u16) -> f64 {
    f64::from(f32::from_bits(u32::from(h) << 16))
}

fn dense_matvec(w: &[f64], cols: usize, x: &[f64]) -> Vec<f64> {
    w.chunks(cols)
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn bf16_matvec(w: &[u16], cols: usize, x: &[f64]) -> Vec<f64> {
    w.chunks(cols)
        .map(|row| row.iter().zip(x).map(|(&a, b)| from_bf16(a) * b).sum())
        .collect()
}

fn time_ns(iters: usize, mut f: impl FnMut() -> Vec<f64>) -> (f64, Vec<f64>) {
    let mut out = f();
    let start = Instant::now();
    for _ in 0..iters {
        out = black_box(f());
    }
    (start.elapsed().as_nanos() as f64 / iters as f64, out)
}

fn max_abs_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Times `iters` matvecs of a seeded `rows × cols` Gaussian weight matrix
/// for each storage format.
pub fn run_quant_bench(cfg: &QuantConfig, rows: usize, cols: usize, iters: usize, seed: u64) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    if rows == 0 || cols == 0 || iters == 0 {
        return Err(Error::Config("rows, cols and iters must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.05).collect();
    let x: Vec<f64> = (0..cols).map(|_| rng.sample(StandardNormal)).collect();
    let n = rows * cols;

    let (dense_ns, reference) = time_ns(iters, || dense_matvec(&w, cols, &x));
    let mut out = vec![BenchRow {
        implementation: "dense_f64".into(),
        bytes: 8 * n,
        ns_per_matvec: dense_ns,
        max_abs_err: 0.0,
    }];

    let half: Vec<u16> = w.iter().map(|&v| to_bf16(v)).collect();
    let (ns, y) = time_ns(iters, || bf16_matvec(&half, cols, &x));
    out.push(BenchRow {
        implementation: "bf16".into(),
        bytes: 2 * n,
        ns_per_matvec: ns,
        max_abs_err: max_abs_err(&y, &reference),
    });

    let wm = Matrix::new(rows, cols, w)?;
    let qw = QuantizedTensor::from_weights(&wm, cfg)?;
    let deq = qw.dequantized(cfg);
    let (ns, y) = time_ns(iters, || dense_matvec(deq.data(), cols, &x));
    out.push(BenchRow {
        implementation: "fake_quant_f64".into(),
        bytes: 8 * n + 8 * qw.group_count(),
        ns_per_matvec: ns,
        max_abs_err: max_abs_err(&y, &reference),
    });

    let blob = PackedBlob::pack(&qw, cfg)?;
    let (ns, y) = time_ns(iters, || blob.matvec(&x).expect("length checked above"));
    out.push(BenchRow {
        implementation: format!("packed_int{}", cfg.bits),
        bytes: blob.storage_bytes(),
        ns_per_matvec: ns,
        max_abs_err: max_abs_err(&y, &reference),
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bf16_round_trip() {
        for v in [1.0, -2.5, 0.15625, 0.0] {
            assert_eq!(from_bf16(to_bf16(v)), v);
        }
        assert!((from_bf16(to_bf16(0.1)) - 0.1).abs() < 1e-3);
    }

    #[test]
    fn storage_ratio_at_group_128() {
        let cfg = QuantConfig::new(4, 128).unwrap();
        let rows = run_quant_bench(&cfg, 16, 256, 1, 0).unwrap();
        let bf16 = rows.iter().find(|r| r.implementation == "bf16").unwrap();
        let packed = rows.iter().find(|r| r.implementation == "packed_int4").unwrap();
        let ratio = bf16.bytes as f64 / packed.bytes as f64;
        assert!((ratio - 256.0 / 68.0).abs() < 1e-12, "{ratio}");
        let fake = rows.iter().find(|r| r.implementation == "fake_quant_f64").unwrap();
        assert!((packed.max_abs_err - fake.max_abs_err).abs() < 1e-6);
    }
}
