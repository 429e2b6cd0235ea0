//! Approximate homomorphic encryption of real vectors over an RLWE ring,
//! supporting exactly what weighted aggregation needs: ciphertext addition
//! and plaintext-scalar multiplication.
//!
//! Values are coefficient-encoded (scaled by `Delta` and rounded into
//! polynomial coefficients) rather than embedded through complex roots;
//! both required operations are coefficient-wise, so this simplification
//! preserves the approximate-arithmetic contract of a CKKS-style scheme.
//! There is a single modulus and no rescaling: multiplicative depth is
//! exactly one, enforced by requiring `Delta^2 * bound < q / 2`.
//!
//! # Security warning
//!
//! These are **toy parameters** (N = 1024, 59-bit modulus). They demonstrate
//! the protocol and its error behavior; they are NOT a secure configuration
//! and must never protect real data.

pub mod ring;

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use ring::NegacyclicRing;

/// Noise samples are rejected beyond this many standard deviations, which
/// gives a hard per-coefficient error bound.
const NOISE_CUTOFF_SIGMAS: f64 = 6.0;

pub const DEFAULT_RING_DEGREE: usize = 1024;
/// Prime just below 2^59 with q = 1 mod 2^13.
pub const DEFAULT_MODULUS: u64 = 576_460_752_303_415_297;
/// Encoding scale Delta = 2^25; large enough that fresh-encryption noise
/// (stddev about 118 at sigma 3.2, N 1024) stays below 1e-4 after decoding.
pub const DEFAULT_SCALE: f64 = 33_554_432.0;
pub const DEFAULT_ERROR_STDDEV: f64 = 3.2;
pub const DEFAULT_PLAINTEXT_BOUND: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchemeParams {
    /// Ring degree N (power of two).
    pub ring_degree: usize,
    /// Coefficient modulus q (prime, q = 1 mod 2N).
    pub modulus: u64,
    /// Encoding scale Delta.
    pub scale: f64,
    /// Standard deviation of the discrete Gaussian noise.
    pub error_stddev: f64,
    /// Declared plaintext range: encrypt accepts values in [-bound, bound].
    pub plaintext_bound: f64,
}

impl Default for SchemeParams {
    fn default() -> Self {
        SchemeParams {
            ring_degree: DEFAULT_RING_DEGREE,
            modulus: DEFAULT_MODULUS,
            scale: DEFAULT_SCALE,
            error_stddev: DEFAULT_ERROR_STDDEV,
            plaintext_bound: DEFAULT_PLAINTEXT_BOUND,
        }
    }
}

impl SchemeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale >= 2.0) || !self.scale.is_finite() {
            return Err(Error::Params(format!(
                "scale {} must be finite and >= 2",
                self.scale
            )));
        }
        if !(self.error_stddev > 0.0) {
            return Err(Error::Params("error stddev must be positive".into()));
        }
        if !(self.plaintext_bound > 0.0) {
            return Err(Error::Params("plaintext bound must be positive".into()));
        }
        // One plaintext multiplication: values live at Delta^2; no wrap-around.
        let headroom = self.scale * self.scale * self.plaintext_bound;
        if headroom >= self.modulus as f64 / 2.0 {
            return Err(Error::Params(format!(
                "scale^2 * bound = {headroom:.3e} exceeds q/2 = {:.3e}",
                self.modulus as f64 / 2.0
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SecretKey {
    s: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct PublicKey {
    /// b = -a*s + e
    b: Vec<u64>,
    a: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct KeyPair {
    pub public: PublicKey,
    pub secret: SecretKey,
}

#[derive(Debug, Clone)]
struct CtChunk {
    c0: Vec<u64>,
    c1: Vec<u64>,
}

/// An encrypted real vector: one RLWE pair per chunk of N coefficients,
/// plus layout metadata and the current power of the encoding scale.
#[derive(Debug, Clone)]
pub struct Ciphertext {
    chunks: Vec<CtChunk>,
    vec_len: usize,
    scale_power: u32,
}

impl Ciphertext {
    pub fn vec_len(&self) -> usize {
        self.vec_len
    }

    pub fn chunk_count(&self) -> usize {
        self.chunks.len()
    }

    pub fn scale_power(&self) -> u32 {
        self.scale_power
    }
}

/// Scheme context: validated parameters plus transform tables.
pub struct Scheme {
    params: SchemeParams,
    ring: NegacyclicRing,
}

impl Scheme {
    pub fn new(params: SchemeParams) -> Result<Self> {
        params.validate()?;
        let ring = NegacyclicRing::new(params.ring_degree, params.modulus)?;
        Ok(Scheme { params, ring })
    }

    pub fn params(&self) -> &SchemeParams {
        &self.params
    }

    fn sample_ternary(&self, rng: &mut impl Rng) -> Vec<u64> {
        (0..self.params.ring_degree)
            .map(|_| match rng.gen_range(0..3u8) {
                0 => 0,
                1 => 1,
                _ => self.params.modulus - 1,
            })
            .collect()
    }

    fn sample_noise(&self, rng: &mut impl Rng) -> Vec<u64> {
        let sigma = self.params.error_stddev;
        let normal = Normal::new(0.0, sigma).expect("valid stddev");
        let cutoff = NOISE_CUTOFF_SIGMAS * sigma;
        (0..self.params.ring_degree)
            .map(|_| {
                let v = loop {
                    let x = normal.sample(rng).round();
                    if x.abs() <= cutoff {
                        break x as i64;
                    }
                };
                self.ring.from_signed(v)
            })
            .collect()
    }

    /// Generate an RLWE key pair; deterministic for a given RNG state.
    pub fn keygen(&self, rng: &mut impl Rng) -> KeyPair {
        let s = self.sample_ternary(rng);
        let a: Vec<u64> = (0..self.params.ring_degree)
            .map(|_| rng.gen_range(0..self.params.modulus))
            .collect();
        let e = self.sample_noise(rng);
        let minus_as = self.ring.neg(&self.ring.mul(&a, &s));
        let b = self.ring.add(&minus_as, &e);
        KeyPair {
            public: PublicKey { b, a },
            secret: SecretKey { s },
        }
    }

    /// Encrypt a real vector. Values must lie within the declared range.
    pub fn encrypt(&self, pk: &PublicKey, values: &[f64], rng: &mut impl Rng) -> Result<Ciphertext> {
        if values.is_empty() {
            return Err(Error::Contract("encrypt of an empty vector".into()));
        }
        let bound = self.params.plaintext_bound;
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() || v.abs() > bound {
                return Err(Error::Range(format!(
                    "value {v} at index {i} outside [-{bound}, {bound}]"
                )));
            }
        }
        let n = self.params.ring_degree;
        let delta = self.params.scale;
        let mut chunks = Vec::with_capacity(values.len().div_ceil(n));
        for block in values.chunks(n) {
            let mut m = self.ring.zero();
            for (i, &v) in block.iter().enumerate() {
                m[i] = self.ring.from_signed((v * delta).round() as i64);
            }
            let u = self.sample_ternary(rng);
            let e1 = self.sample_noise(rng);
            let e2 = self.sample_noise(rng);
            let mut c0 = self.ring.add(&self.ring.mul(&pk.b, &u), &e1);
            c0 = self.ring.add(&c0, &m);
            let c1 = self.ring.add(&self.ring.mul(&pk.a, &u), &e2);
            chunks.push(CtChunk { c0, c1 });
        }
        Ok(Ciphertext {
            chunks,
            vec_len: values.len(),
            scale_power: 1,
        })
    }

    /// Componentwise ciphertext addition; layouts and scales must agree.
    pub fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext> {
        if a.vec_len != b.vec_len || a.chunks.len() != b.chunks.len() {
            return Err(Error::Contract(format!(
                "ciphertext layouts differ: {} vs {} values",
                a.vec_len, b.vec_len
            )));
        }
        if a.scale_power != b.scale_power {
            return Err(Error::Contract(format!(
                "ciphertext scales differ: Delta^{} vs Delta^{}",
                a.scale_power, b.scale_power
            )));
        }
        let chunks = a
            .chunks
            .iter()
            .zip(&b.chunks)
            .map(|(x, y)| CtChunk {
                c0: self.ring.add(&x.c0, &y.c0),
                c1: self.ring.add(&x.c1, &y.c1),
            })
            .collect();
        Ok(Ciphertext {
            chunks,
            vec_len: a.vec_len,
            scale_power: a.scale_power,
        })
    }

    /// Multiply by a plaintext weight in [0, 1]; the result carries one more
    /// power of the encoding scale.
    pub fn scale_by_plain(&self, ct: &Ciphertext, gamma: f64) -> Result<Ciphertext> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Contract(format!(
                "plaintext weight {gamma} outside [0, 1]"
            )));
        }
        let encoded = (gamma * self.params.scale).round() as u64;
        let chunks = ct
            .chunks
            .iter()
            .map(|c| CtChunk {
                c0: self.ring.scalar_mul(&c.c0, encoded),
                c1: self.ring.scalar_mul(&c.c1, encoded),
            })
            .collect();
        Ok(Ciphertext {
            chunks,
            vec_len: ct.vec_len,
            scale_power: ct.scale_power + 1,
        })
    }

    /// Decrypt and decode back to a real vector of the original length.
    pub fn decrypt(&self, sk: &SecretKey, ct: &Ciphertext) -> Result<Vec<f64>> {
        if ct.scale_power == 0 {
            return Err(Error::Contract("ciphertext has zero scale".into()));
        }
        let divisor = self.params.scale.powi(ct.scale_power as i32);
        let mut out = Vec::with_capacity(ct.vec_len);
        for chunk in &ct.chunks {
            let m = self.ring.add(&chunk.c0, &self.ring.mul(&chunk.c1, &sk.s));
            for &coeff in &m {
                out.push(self.ring.to_signed(coeff) as f64 / divisor);
            }
        }
        out.truncate(ct.vec_len);
        Ok(out)
    }

    /// The full encrypted weighted-sum pipeline: encrypt every vector,
    /// scale each by its weight, add, decrypt.
    pub fn weighted_aggregate(
        &self,
        keys: &KeyPair,
        vectors: &[Vec<f64>],
        weights: &[f64],
        rng: &mut impl Rng,
    ) -> Result<Vec<f64>> {
        if vectors.is_empty() || vectors.len() != weights.len() {
            return Err(Error::Contract(format!(
                "{} vectors with {} weights",
                vectors.len(),
                weights.len()
            )));
        }
        let mut acc: Option<Ciphertext> = None;
        for (v, &w) in vectors.iter().zip(weights) {
            let ct = self.encrypt(&keys.public, v, rng)?;
            let scaled = self.scale_by_plain(&ct, w)?;
            acc = Some(match acc {
                None => scaled,
                Some(a) => self.add(&a, &scaled)?,
            });
        }
        self.decrypt(&keys.secret, &acc.expect("nonempty input"))
    }
}

// ---- ciphertext serialization ----------------------------------------------
//
// Little-endian layout:
//   magic  b"FEDSIMHE"   8 bytes
//   version u16          (currently 1)
//   n      u64
//   q      u64
//   scale  f64
//   scale_power u32
//   vec_len u64
//   chunk_count u64
//   per chunk: c0 coefficients (n x u64), then c1 coefficients (n x u64)

const CIPHERTEXT_MAGIC: &[u8; 8] = b"FEDSIMHE";
const CIPHERTEXT_VERSION: u16 = 1;

impl Ciphertext {
    pub fn to_bytes(&self, params: &SchemeParams) -> Vec<u8> {
        let n = params.ring_degree;
        let mut buf =
            Vec::with_capacity(8 + 2 + 8 + 8 + 8 + 4 + 8 + 8 + self.chunks.len() * n * 16);
        buf.extend_from_slice(CIPHERTEXT_MAGIC);
        buf.extend_from_slice(&CIPHERTEXT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(n as u64).to_le_bytes());
        buf.extend_from_slice(&params.modulus.to_le_bytes());
        buf.extend_from_slice(&params.scale.to_le_bytes());
        buf.extend_from_slice(&self.scale_power.to_le_bytes());
        buf.extend_from_slice(&(self.vec_len as u64).to_le_bytes());
        buf.extend_from_slice(&(self.chunks.len() as u64).to_le_bytes());
        for chunk in &self.chunks {
            for v in chunk.c0.iter().chain(&chunk.c1) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8], params: &SchemeParams) -> Result<Self> {
        let fail = |msg: String| Error::Parse {
            path: "<ciphertext>".into(),
            row: 0,
            col: 0,
            msg,
        };
        let header = 8 + 2 + 8 + 8 + 8 + 4 + 8 + 8;
        if bytes.len() < header || &bytes[..8] != CIPHERTEXT_MAGIC {
            return Err(fail("not a serialized ciphertext".into()));
        }
        let version = u16::from_le_bytes(bytes[8..10].try_into().unwrap());
        if version != CIPHERTEXT_VERSION {
            return Err(fail(format!("unsupported ciphertext version {version}")));
        }
        let mut cursor = 10;
        let mut take_u64 = || {
            let v = u64::from_le_bytes(bytes[cursor..cursor + 8].try_into().unwrap());
            cursor += 8;
            v
        };
        let n = take_u64() as usize;
        let q = take_u64();
        let scale_bits = take_u64();
        let scale = f64::from_le_bytes(scale_bits.to_le_bytes());
        if n != params.ring_degree || q != params.modulus || scale != params.scale {
            return Err(fail(format!(
                "ciphertext parameters (N={n}, q={q}, Delta={scale}) do not match the scheme"
            )));
        }
        let scale_power = u32::from_le_bytes(bytes[cursor..cursor + 4].try_into().unwrap());
        cursor += 4;
        let vec_len = u64::from_le_bytes(bytes[cursor..cursor + 8].try_into().unwrap()) as usize;
        cursor += 8;
        let chunk_count =
            u64::from_le_bytes(bytes[cursor..cursor + 8].try_into().unwrap()) as usize;
        cursor += 8;
        if chunk_count != vec_len.div_ceil(n) {
            return Err(fail(format!(
                "{chunk_count} chunks inconsistent with vector length {vec_len}"
            )));
        }
        if bytes.len() != cursor + chunk_count * n * 16 {
            return Err(fail("truncated ciphertext".into()));
        }
        let mut chunks = Vec::with_capacity(chunk_count);
        for _ in 0..chunk_count {
            let read_poly = |cursor: &mut usize| {
                let mut p = Vec::with_capacity(n);
                for _ in 0..n {
                    p.push(u64::from_le_bytes(
                        bytes[*cursor..*cursor + 8].try_into().unwrap(),
                    ));
                    *cursor += 8;
                }
                p
            };
            let c0 = read_poly(&mut cursor);
            let c1 = read_poly(&mut cursor);
            if c0.iter().chain(&c1).any(|&v| v >= q) {
                return Err(fail("coefficient exceeds modulus".into()));
            }
            chunks.push(CtChunk { c0, c1 });
        }
        Ok(Ciphertext {
            chunks,
            vec_len,
            scale_power,
        })
    }
}
