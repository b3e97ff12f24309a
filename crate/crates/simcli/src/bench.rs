//! Wall-clock latency measurements for hashing, comparison and store I/O.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use devintegrity::immustore::{Durability, Record, Store};
use devintegrity::measure::{compare, hash_bytes, Digest};

use crate::{Result, SimError};

pub const MIN_ITERATIONS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unit {
    Micros,
    Millis,
}

impl Unit {
    fn name(self) -> &'static str {
        match self {
            Unit::Micros => "us",
            Unit::Millis => "ms",
        }
    }

    fn scale(self, ns: u128) -> f64 {
        match self {
            Unit::Micros => ns as f64 / 1e3,
            Unit::Millis => ns as f64 / 1e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub operation: String,
    pub iterations: usize,
    pub unit: Unit,
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub mean: f64,
    pub stddev: f64,
}

impl BenchReport {
    pub fn from_samples(operation: &str, unit: Unit, nanos: &[u128]) -> Self {
        assert!(!nanos.is_empty(), "no samples");
        let mut v: Vec<f64> = nanos.iter().map(|&n| unit.scale(n)).collect();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 };
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        BenchReport {
            operation: operation.to_owned(),
            iterations: n,
            unit,
            min: v[0],
            median,
            max: v[n - 1],
            mean,
            stddev: var.sqrt(),
        }
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let u = self.unit.name();
        write!(
            f,
            "{:<18} n={} min={:.3}{u} median={:.3}{u} max={:.3}{u} mean={:.3}{u} stddev={:.3}{u}",
            self.operation, self.iterations, self.min, self.median, self.max, self.mean, self.stddev
        )
    }
}

fn check_iterations(iterations: usize) -> Result<()> {
    if iterations < MIN_ITERATIONS {
        return Err(SimError::ConfigInvalid(format!(
            "at least {MIN_ITERATIONS} iterations required"
        )));
    }
    Ok(())
}

fn time<R>(f: impl FnOnce() -> R) -> (R, u128) {
    let start = Instant::now();
    let r = std::hint::black_box(f());
    (r, start.elapsed().as_nanos())
}

/// Hashing of 32-byte inputs, digest comparison, and the two together.
pub fn bench_hash(iterations: usize, seed: u64) -> Result<Vec<BenchReport>> {
    check_iterations(iterations)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reference = hash_bytes(b"reference");
    let (mut h, mut c, mut hc) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..iterations {
        let input: [u8; 32] = rng.gen();
        let (d, t) = time(|| hash_bytes(std::hint::black_box(&input)));
        h.push(t);
        let (_, t) = time(|| compare(std::hint::black_box(&d), &reference));
        c.push(t);
        let (_, t) = time(|| compare(&hash_bytes(std::hint::black_box(&input)), &reference));
        hc.push(t);
    }
    Ok(vec![
        BenchReport::from_samples("hash32", Unit::Micros, &h),
        BenchReport::from_samples("compare", Unit::Micros, &c),
        BenchReport::from_samples("hash32+compare", Unit::Micros, &hc),
    ])
}

fn eq1_record(i: u64, rng: &mut ChaCha8Rng) -> Record {
    let value: [u8; 32] = rng.gen();
    Record::new(format!("fw-{:04}", i % 1000), value.to_vec(), i)
}

/// Store appends with and without per-append fsync, and latest-value reads
/// with proofs, against a file-backed store preloaded with `preload`
/// records shaped `<software_id, hash, timestamp>`.
pub fn bench_store(iterations: usize, preload: usize, dir: &Path, seed: u64) -> Result<Vec<BenchReport>> {
    check_iterations(iterations)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let path = dir.join("bench.store");
    let mut store = Store::open(&path, Durability::Batch).map_err(store_err)?;
    for i in 0..preload as u64 {
        store.append(eq1_record(i, &mut rng)).map_err(store_err)?;
    }
    store.sync().map_err(store_err)?;

    let mut next = preload as u64;
    let mut append_samples = |store: &mut Store, rng: &mut ChaCha8Rng| -> Result<Vec<u128>> {
        let mut out = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let rec = eq1_record(next, rng);
            next += 1;
            let (r, t) = time(|| store.append(rec));
            r.map_err(store_err)?;
            out.push(t);
        }
        Ok(out)
    };

    store.set_durability(Durability::Fsync);
    let write_fsync = append_samples(&mut store, &mut rng)?;
    store.set_durability(Durability::Batch);
    let write_batch = append_samples(&mut store, &mut rng)?;
    store.sync().map_err(store_err)?;

    let mut reads = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let key = format!("fw-{:04}", rng.gen_range(0..1000u64.min(next)));
        let (r, t) = time(|| store.get_latest(key.as_bytes()));
        let (rec, _proof) = r.map_err(store_err)?;
        debug_assert!(Digest::from_slice(&rec.value).is_some());
        reads.push(t);
    }

    Ok(vec![
        BenchReport::from_samples("store_write_fsync", Unit::Millis, &write_fsync),
        BenchReport::from_samples("store_write_nosync", Unit::Millis, &write_batch),
        BenchReport::from_samples("store_read", Unit::Millis, &reads),
    ])
}

fn store_err(e: devintegrity::immustore::StoreError) -> SimError {
    SimError::Verifier(devintegrity::verifier::VerifierError::StoreUnavailable(e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_statistics() {
        let r = BenchReport::from_samples("x", Unit::Micros, &[3000, 1000, 2000, 4000]);
        assert_eq!((r.min, r.median, r.max, r.mean), (1.0, 2.5, 4.0, 2.5));
        assert!((r.stddev - 1.25f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn too_few_iterations() {
        assert!(matches!(bench_hash(10, 0), Err(SimError::ConfigInvalid(_))));
    }

    #[test]
    fn hash_bench_shape() {
        for r in bench_hash(1000, 1).unwrap() {
            assert_eq!(r.iterations, 1000);
            assert!(r.min <= r.median && r.median <= r.max);
        }
    }
}
