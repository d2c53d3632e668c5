//! Equal-width-binning codec for model updates: encode/decode, the bit-
//! packed wire format, the compression-rate formula, and the condition-
//! number error-bound verifier.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{condition_number_2, lu_solve, mat_vec, spectral_norm, Matrix, Vector};

/// Binning header: matrix minimum, bin width, and partition count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BinningParams {
    pub base: f64,
    pub step: f64,
    pub density: u32,
}

/// Bin indices for one matrix, plus the header needed to reconstruct it.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedMatrix {
    pub rows: u32,
    pub cols: u32,
    pub params: BinningParams,
    pub indices: Vec<u32>,
}

impl PackedMatrix {
    pub fn value_count(&self) -> usize {
        self.rows as usize * self.cols as usize
    }
}

/// Bits per index on the wire: ⌈log₂ density⌉.
pub fn bits_per_index(density: u32) -> u32 {
    debug_assert!(density >= 2);
    u32::BITS - (density - 1).leading_zeros()
}

/// base = min, step = (max − min)/density; index = ⌊(v−base)/step⌋ clamped
/// so the maximum lands in the top bin. Constant matrices get step 0 and
/// all-zero indices.
pub fn bin_encode(m: &Matrix, density: u32) -> Result<PackedMatrix> {
    if density < 2 {
        return Err(Error::InvalidParam(format!(
            "bin density must be >= 2, got {density}"
        )));
    }
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in m.data() {
        min = min.min(v);
        max = max.max(v);
    }
    let step = (max - min) / density as f64;
    let indices = if step == 0.0 {
        vec![0; m.data().len()]
    } else {
        let top = density as i64 - 1;
        m.data()
            .iter()
            .map(|&v| {
                let raw = ((v - min) / step).floor() as i64;
                let guess = raw.clamp(0, top);
                // Rounding in the quotient can land a boundary value one bin
                // off; snap to the closest reconstruction center (ties keep
                // the upper bin, matching exact floor semantics).
                let mut best = guess;
                let mut best_err = f64::INFINITY;
                for cand in guess.saturating_sub(1)..=(guess + 1).min(top) {
                    let err = (v - (min + (cand as f64 + 0.5) * step)).abs();
                    if err <= best_err {
                        best_err = err;
                        best = cand;
                    }
                }
                best as u32
            })
            .collect()
    };
    Ok(PackedMatrix {
        rows: m.rows() as u32,
        cols: m.cols() as u32,
        params: BinningParams {
            base: min,
            step,
            density,
        },
        indices,
    })
}

/// Bin-center reconstruction: base + (index + 0.5)·step.
pub fn bin_decode(p: &PackedMatrix) -> Result<Matrix> {
    if let Some(bad) = p.indices.iter().find(|i| **i >= p.params.density) {
        return Err(Error::IndexOutOfRange {
            index: *bad,
            density: p.params.density,
        });
    }
    if p.indices.len() != p.value_count() {
        return Err(Error::DimensionMismatch(format!(
            "{} indices for a {}x{} matrix",
            p.indices.len(),
            p.rows,
            p.cols
        )));
    }
    let data = p
        .indices
        .iter()
        .map(|&i| p.params.base + (i as f64 + 0.5) * p.params.step)
        .collect();
    Matrix::new(p.rows as usize, p.cols as usize, data)
}

/// The byte-size ratio formula: ((log₂ d_x / 8)·N + 2·8) / (8·N).
pub fn compression_rate(density: u32, n: usize) -> Result<f64> {
    if density < 2 {
        return Err(Error::InvalidParam(format!(
            "bin density must be >= 2, got {density}"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidParam("N must be >= 1".into()));
    }
    let dx = density as f64;
    let n = n as f64;
    Ok(((dx.log2() / 8.0) * n + 2.0 * 8.0) / (8.0 * n))
}

// ---------------------------------------------------------------------------
// Wire format
// ---------------------------------------------------------------------------

const PAYLOAD_MAGIC: [u8; 4] = *b"MOSU";
const PAYLOAD_VERSION: u8 = 1;

struct BitWriter {
    bytes: Vec<u8>,
    acc: u8,
    used: u32,
}

impl BitWriter {
    fn new(bytes: Vec<u8>) -> Self {
        Self {
            bytes,
            acc: 0,
            used: 0,
        }
    }

    /// Appends the low `bits` bits of `value`, most significant first.
    fn push(&mut self, value: u32, bits: u32) {
        for shift in (0..bits).rev() {
            let bit = (value >> shift) & 1;
            self.acc = (self.acc << 1) | bit as u8;
            self.used += 1;
            if self.used == 8 {
                self.bytes.push(self.acc);
                self.acc = 0;
                self.used = 0;
            }
        }
    }

    /// Zero-pads to the next byte boundary.
    fn pad(&mut self) {
        if self.used > 0 {
            self.bytes.push(self.acc << (8 - self.used));
            self.acc = 0;
            self.used = 0;
        }
    }
}

/// Serializes packed matrices: magic, version, count, then per matrix the
/// header and MSB-first bit-packed indices padded to a byte boundary.
pub fn pack_payload(matrices: &[PackedMatrix]) -> Result<Vec<u8>> {
    if matrices.is_empty() {
        return Err(Error::InvalidParam("payload needs at least one matrix".into()));
    }
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&PAYLOAD_MAGIC);
    bytes.push(PAYLOAD_VERSION);
    bytes.extend_from_slice(&(matrices.len() as u32).to_le_bytes());
    for m in matrices {
        if m.indices.len() != m.value_count() {
            return Err(Error::DimensionMismatch(format!(
                "{} indices for a {}x{} matrix",
                m.indices.len(),
                m.rows,
                m.cols
            )));
        }
        if let Some(bad) = m.indices.iter().find(|i| **i >= m.params.density) {
            return Err(Error::IndexOutOfRange {
                index: *bad,
                density: m.params.density,
            });
        }
        bytes.extend_from_slice(&m.rows.to_le_bytes());
        bytes.extend_from_slice(&m.cols.to_le_bytes());
        bytes.extend_from_slice(&m.params.density.to_le_bytes());
        bytes.extend_from_slice(&m.params.base.to_le_bytes());
        bytes.extend_from_slice(&m.params.step.to_le_bytes());
        let bits = bits_per_index(m.params.density);
        let mut writer = BitWriter::new(bytes);
        for &idx in &m.indices {
            writer.push(idx, bits);
        }
        writer.pad();
        bytes = writer.bytes;
    }
    Ok(bytes)
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    bit: u32,
}

impl<'a> BitReader<'a> {
    fn read(&mut self, bits: u32) -> Result<u32> {
        let mut value = 0u32;
        for _ in 0..bits {
            if self.pos >= self.bytes.len() {
                return Err(Error::Truncated {
                    offset: self.pos,
                    needed: 1,
                });
            }
            let b = (self.bytes[self.pos] >> (7 - self.bit)) & 1;
            value = (value << 1) | b as u32;
            self.bit += 1;
            if self.bit == 8 {
                self.bit = 0;
                self.pos += 1;
            }
        }
        Ok(value)
    }

    fn align(&mut self) {
        if self.bit > 0 {
            self.bit = 0;
            self.pos += 1;
        }
    }
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    if *pos + n > bytes.len() {
        return Err(Error::Truncated {
            offset: *pos,
            needed: *pos + n - bytes.len(),
        });
    }
    let s = &bytes[*pos..*pos + n];
    *pos += n;
    Ok(s)
}

/// Exact inverse of pack_payload.
pub fn unpack_payload(bytes: &[u8]) -> Result<Vec<PackedMatrix>> {
    let mut pos = 0usize;
    let magic: [u8; 4] = take(bytes, &mut pos, 4)?.try_into().unwrap();
    if magic != PAYLOAD_MAGIC {
        return Err(Error::BadMagic {
            expected: PAYLOAD_MAGIC,
            found: magic,
        });
    }
    let version = take(bytes, &mut pos, 1)?[0];
    if version != PAYLOAD_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = u32::from_le_bytes(take(bytes, &mut pos, 4)?.try_into().unwrap());
    let mut matrices = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let rows = u32::from_le_bytes(take(bytes, &mut pos, 4)?.try_into().unwrap());
        let cols = u32::from_le_bytes(take(bytes, &mut pos, 4)?.try_into().unwrap());
        let density = u32::from_le_bytes(take(bytes, &mut pos, 4)?.try_into().unwrap());
        if density < 2 {
            return Err(Error::InvalidParam(format!(
                "payload density {density} below 2"
            )));
        }
        let base = f64::from_le_bytes(take(bytes, &mut pos, 8)?.try_into().unwrap());
        let step = f64::from_le_bytes(take(bytes, &mut pos, 8)?.try_into().unwrap());
        let n_values = rows as usize * cols as usize;
        let bits = bits_per_index(density);
        let mut reader = BitReader {
            bytes,
            pos,
            bit: 0,
        };
        let mut indices = Vec::with_capacity(n_values);
        for _ in 0..n_values {
            let idx = reader.read(bits)?;
            if idx >= density {
                return Err(Error::IndexOutOfRange {
                    index: idx,
                    density,
                });
            }
            indices.push(idx);
        }
        reader.align();
        pos = reader.pos;
        matrices.push(PackedMatrix {
            rows,
            cols,
            params: BinningParams {
                base,
                step,
                density,
            },
            indices,
        });
    }
    Ok(matrices)
}

// ---------------------------------------------------------------------------
// Error-bound verification
// ---------------------------------------------------------------------------

/// All norms feeding the perturbation inequality, the resulting left-hand
/// ratio, and the condition number it must not exceed.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ErrorBoundReport {
    pub norm_delta_a: f64,
    pub norm_x_plus_dx: f64,
    pub norm_dx: f64,
    pub norm_a: f64,
    pub lhs: f64,
    pub cond: f64,
    pub holds: bool,
}

/// Bound slack absorbing norm round-off.
pub const BOUND_TOLERANCE: f64 = 1e-9;

/// Perturbs `a` through the codec at the given density, solves
/// (A+ΔA)(x+Δx) = A·x for the induced input error, and checks
/// ‖Δx‖‖A‖ / (‖x+Δx‖‖ΔA‖) ≤ ‖A‖‖A⁻¹‖.
pub fn verify_error_bound(a: &Matrix, density: u32, x: &Vector) -> Result<ErrorBoundReport> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "verify_error_bound needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if a.rows() != x.len() {
        return Err(Error::DimensionMismatch(format!(
            "matrix {}x{} with length-{} input",
            a.rows(),
            a.cols(),
            x.len()
        )));
    }
    let approx = bin_decode(&bin_encode(a, density)?)?;
    let delta_a = Matrix::from_fn(a.rows(), a.cols(), |r, c| approx.get(r, c) - a.get(r, c));
    let norm_delta_a = spectral_norm(&delta_a);
    if norm_delta_a == 0.0 {
        return Err(Error::InvalidParam(
            "binning produced a zero perturbation; the bound ratio is undefined".into(),
        ));
    }
    let b = mat_vec(a, x)?;
    let x_plus_dx = lu_solve(&approx, &b)?;
    let dx = Vector::new(
        x_plus_dx
            .data()
            .iter()
            .zip(x.data())
            .map(|(p, q)| p - q)
            .collect(),
    )?;
    let norm_x_plus_dx = x_plus_dx.norm2();
    if norm_x_plus_dx == 0.0 {
        return Err(Error::InvalidParam(
            "perturbed solution is zero; the bound ratio is undefined".into(),
        ));
    }
    let norm_dx = dx.norm2();
    let norm_a = spectral_norm(a);
    let lhs = (norm_dx * norm_a) / (norm_x_plus_dx * norm_delta_a);
    let cond = condition_number_2(a)?;
    Ok(ErrorBoundReport {
        norm_delta_a,
        norm_x_plus_dx,
        norm_dx,
        norm_a,
        lhs,
        cond,
        holds: lhs <= cond + BOUND_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_interval_matrix() -> Matrix {
        Matrix::new(2, 2, vec![0.0, 0.6, 0.25, 1.0]).unwrap()
    }

    #[test]
    fn encode_hand_bins() {
        let p = bin_encode(&unit_interval_matrix(), 4).unwrap();
        assert_eq!(p.params.base, 0.0);
        assert_eq!(p.params.step, 0.25);
        // 0.6/0.25 = 2.4 -> bin 2; the max clamps into the top bin
        assert_eq!(p.indices, vec![0, 2, 1, 3]);
    }

    #[test]
    fn decode_bin_centers() {
        let p = bin_encode(&unit_interval_matrix(), 4).unwrap();
        let m = bin_decode(&p).unwrap();
        assert_eq!(m.get(0, 1), 0.625);
        assert!((0.6f64 - m.get(0, 1)).abs() <= p.params.step / 2.0);
        // clamped max reconstructs half a step below
        assert_eq!(m.get(1, 1), 0.875);
        assert_eq!((1.0f64 - m.get(1, 1)).abs(), p.params.step / 2.0);
    }

    #[test]
    fn constant_matrix_is_exact() {
        let m = Matrix::new(3, 2, vec![7.5; 6]).unwrap();
        let p = bin_encode(&m, 16).unwrap();
        assert_eq!(p.params.step, 0.0);
        assert!(p.indices.iter().all(|i| *i == 0));
        let back = bin_decode(&p).unwrap();
        assert_eq!(back.data(), m.data());
    }

    #[test]
    fn encode_rejects_degenerate_density() {
        assert!(bin_encode(&unit_interval_matrix(), 1).is_err());
    }

    /// Half-step bound with slack for the last-ulp rounding of the centers
    /// themselves.
    fn half_step_tol(step: f64, density: u32) -> f64 {
        step / 2.0 + 1e-12 * step * density as f64
    }

    #[test]
    fn reconstruction_error_bounded_by_half_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for density in [2u32, 16, 100, 1024] {
            for _ in 0..20 {
                let m = Matrix::from_fn(5, 4, |_, _| rng.gen_range(-3.0..3.0));
                let p = bin_encode(&m, density).unwrap();
                let back = bin_decode(&p).unwrap();
                for (a, b) in m.data().iter().zip(back.data()) {
                    assert!(
                        (a - b).abs() <= half_step_tol(p.params.step, density),
                        "density {density}: |{a} - {b}| > step/2 = {}",
                        p.params.step / 2.0
                    );
                }
            }
        }
    }

    #[test]
    fn doubling_density_halves_worst_case_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Matrix::from_fn(6, 6, |_, _| rng.gen_range(-1.0..1.0));
        let coarse = bin_encode(&m, 8).unwrap();
        let fine = bin_encode(&m, 16).unwrap();
        assert!(fine.params.step <= coarse.params.step / 2.0 + f64::EPSILON);
    }

    #[test]
    fn compression_rate_hand_values() {
        assert!((compression_rate(256, 1000).unwrap() - 0.127).abs() <= 1e-15);
        assert!((compression_rate(2, 64).unwrap() - 0.046875).abs() <= 1e-15);
    }

    #[test]
    fn compression_rate_density_100_band() {
        // approaches log2(100)/64 ≈ 0.1038 from above for large N
        let r = compression_rate(100, 10_000).unwrap();
        assert!((0.10..=0.12).contains(&r), "{r}");
    }

    #[test]
    fn compression_rate_monotonicity() {
        let mut prev = compression_rate(2, 500).unwrap();
        for density in [4u32, 8, 64, 256, 1024] {
            let r = compression_rate(density, 500).unwrap();
            assert!(r > prev);
            prev = r;
        }
        assert!(compression_rate(64, 1000).unwrap() > compression_rate(64, 100_000).unwrap());
        let limit = 64f64.log2() / 64.0;
        assert!((compression_rate(64, 100_000_000).unwrap() - limit).abs() < 1e-6);
    }

    #[test]
    fn bits_per_index_ceil_log2() {
        assert_eq!(bits_per_index(2), 1);
        assert_eq!(bits_per_index(3), 2);
        assert_eq!(bits_per_index(4), 2);
        assert_eq!(bits_per_index(100), 7);
        assert_eq!(bits_per_index(256), 8);
        assert_eq!(bits_per_index(1024), 10);
    }

    #[test]
    fn single_bit_payload_size_closed_form() {
        let m = Matrix::new(1, 1, vec![0.5]).unwrap();
        let p = bin_encode(&m, 2).unwrap();
        let bytes = pack_payload(&[p]).unwrap();
        // header 4+1+4, matrix header 4+4+4+8+8, one padded index byte
        assert_eq!(bytes.len(), 9 + 28 + 1);
    }

    #[test]
    fn payload_roundtrip_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ms: Vec<PackedMatrix> = [(3usize, 4usize, 7u32), (2, 2, 2), (5, 1, 100)]
            .iter()
            .map(|&(r, c, d)| {
                let m = Matrix::from_fn(r, c, |_, _| rng.gen_range(-2.0..2.0));
                bin_encode(&m, d).unwrap()
            })
            .collect();
        let bytes = pack_payload(&ms).unwrap();
        let back = unpack_payload(&bytes).unwrap();
        assert_eq!(ms, back);
    }

    #[test]
    fn unpack_rejects_corruption() {
        let m = Matrix::new(2, 3, vec![0.1, 0.5, 0.9, 0.2, 0.3, 0.4]).unwrap();
        let bytes = pack_payload(&[bin_encode(&m, 16).unwrap()]).unwrap();
        assert!(matches!(
            unpack_payload(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        let mut flipped = bytes.clone();
        flipped[0] = b'X';
        assert!(matches!(
            unpack_payload(&flipped),
            Err(Error::BadMagic { .. })
        ));
        let mut versioned = bytes.clone();
        versioned[4] = 9;
        assert!(matches!(
            unpack_payload(&versioned),
            Err(Error::UnsupportedVersion(9))
        ));
    }

    #[test]
    fn unpack_rejects_out_of_range_index() {
        // density 3 uses 2 bits; pattern 11 = 3 is out of range
        let m = Matrix::new(1, 4, vec![0.0, 0.4, 0.8, 1.2]).unwrap();
        let packed = bin_encode(&m, 3).unwrap();
        let mut bytes = pack_payload(&[packed]).unwrap();
        let last = bytes.len() - 1;
        bytes[last] = 0b1111_1111;
        assert!(matches!(
            unpack_payload(&bytes),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    fn well_conditioned(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
        let mut m = Matrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        for i in 0..n {
            let v = m.get(i, i) + n as f64;
            m.set(i, i, v);
        }
        m
    }

    #[test]
    fn bound_holds_for_identity_like_case() {
        // diagonal-heavy matrix with cond close to 1
        let a = Matrix::new(
            4,
            4,
            vec![
                4.0, 0.01, 0.0, 0.0, //
                0.0, 4.0, 0.01, 0.0, //
                0.0, 0.0, 4.0, 0.01, //
                0.01, 0.0, 0.0, 4.0,
            ],
        )
        .unwrap();
        let x = Vector::new(vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let report = verify_error_bound(&a, 8, &x).unwrap();
        assert!(report.holds, "{report:?}");
        assert!(report.lhs <= report.cond + BOUND_TOLERANCE);
    }

    #[test]
    fn bound_holds_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..25 {
            let a = well_conditioned(&mut rng, 6);
            let x = Vector::new((0..6).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
            let report = verify_error_bound(&a, 16, &x).unwrap();
            assert!(report.holds, "{report:?}");
        }
    }

    #[test]
    fn perturbation_entries_within_half_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let a = well_conditioned(&mut rng, 5);
        let p = bin_encode(&a, 16).unwrap();
        let approx = bin_decode(&p).unwrap();
        for (orig, rec) in a.data().iter().zip(approx.data()) {
            assert!((orig - rec).abs() <= half_step_tol(p.params.step, 16));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn roundtrip_any_matrix(seed in 0u64..1000, density in 2u32..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows = rng.gen_range(1..6);
            let cols = rng.gen_range(1..6);
            let m = Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-10.0..10.0));
            let packed = bin_encode(&m, density).unwrap();
            let bytes = pack_payload(&[packed.clone()]).unwrap();
            let back = unpack_payload(&bytes).unwrap();
            prop_assert_eq!(vec![packed], back);
        }
    }
}
