//! Arithmetic in the negacyclic ring Z_q[X] / (X^N + 1).
//!
//! Multiplication runs through a number-theoretic transform with a
//! primitive 2N-th root of unity (psi); twisting by powers of psi turns
//! negacyclic convolution into pointwise products. A schoolbook reference
//! implementation is kept alongside for equivalence testing.

use crate::error::{Error, Result};

pub fn add_mod(a: u64, b: u64, q: u64) -> u64 {
    let s = a + b;
    if s >= q {
        s - q
    } else {
        s
    }
}

pub fn sub_mod(a: u64, b: u64, q: u64) -> u64 {
    if a >= b {
        a - b
    } else {
        a + q - b
    }
}

pub fn mul_mod(a: u64, b: u64, q: u64) -> u64 {
    ((a as u128 * b as u128) % q as u128) as u64
}

pub fn pow_mod(mut base: u64, mut exp: u64, q: u64) -> u64 {
    let mut acc = 1u64;
    base %= q;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mul_mod(acc, base, q);
        }
        base = mul_mod(base, base, q);
        exp >>= 1;
    }
    acc
}

pub fn inv_mod(a: u64, q: u64) -> u64 {
    // q is prime
    pow_mod(a, q - 2, q)
}

/// Deterministic Miller-Rabin, valid for all u64.
pub fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    for p in [2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        if n == p {
            return true;
        }
        if n % p == 0 {
            return false;
        }
    }
    let mut d = n - 1;
    let mut r = 0;
    while d % 2 == 0 {
        d /= 2;
        r += 1;
    }
    'witness: for a in [2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        let mut x = pow_mod(a, d, n);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 0..r - 1 {
            x = mul_mod(x, x, n);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Precomputed transform tables for one (N, q) pair.
#[derive(Debug, Clone)]
pub struct NegacyclicRing {
    pub n: usize,
    pub q: u64,
    /// psi^i for i in 0..n (primitive 2n-th root of unity).
    psi_pows: Vec<u64>,
    psi_inv_pows: Vec<u64>,
    omega: u64,
    omega_inv: u64,
    n_inv: u64,
}

impl NegacyclicRing {
    pub fn new(n: usize, q: u64) -> Result<Self> {
        if !n.is_power_of_two() || n < 2 {
            return Err(Error::Params(format!(
                "ring degree {n} must be a power of two >= 2"
            )));
        }
        if !is_prime(q) {
            return Err(Error::Params(format!("modulus {q} is not prime")));
        }
        if (q - 1) % (2 * n as u64) != 0 {
            return Err(Error::Params(format!(
                "modulus {q} does not support degree {n} (q - 1 not divisible by 2N)"
            )));
        }
        // Smallest base whose ((q-1)/2N)-th power has order exactly 2N.
        let exponent = (q - 1) / (2 * n as u64);
        let mut psi = 0;
        for base in 2..u64::MAX {
            let candidate = pow_mod(base, exponent, q);
            if pow_mod(candidate, n as u64, q) == q - 1 {
                psi = candidate;
                break;
            }
        }
        debug_assert_ne!(psi, 0);
        let psi_inv = inv_mod(psi, q);
        let mut psi_pows = Vec::with_capacity(n);
        let mut psi_inv_pows = Vec::with_capacity(n);
        let (mut p, mut pi) = (1u64, 1u64);
        for _ in 0..n {
            psi_pows.push(p);
            psi_inv_pows.push(pi);
            p = mul_mod(p, psi, q);
            pi = mul_mod(pi, psi_inv, q);
        }
        let omega = mul_mod(psi, psi, q);
        Ok(NegacyclicRing {
            n,
            q,
            psi_pows,
            psi_inv_pows,
            omega,
            omega_inv: inv_mod(omega, q),
            n_inv: inv_mod(n as u64, q),
        })
    }

    pub fn zero(&self) -> Vec<u64> {
        vec![0; self.n]
    }

    pub fn add(&self, a: &[u64], b: &[u64]) -> Vec<u64> {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| add_mod(x, y, self.q))
            .collect()
    }

    pub fn neg(&self, a: &[u64]) -> Vec<u64> {
        a.iter()
            .map(|&x| if x == 0 { 0 } else { self.q - x })
            .collect()
    }

    pub fn scalar_mul(&self, a: &[u64], s: u64) -> Vec<u64> {
        a.iter().map(|&x| mul_mod(x, s, self.q)).collect()
    }

    fn ntt(&self, v: &mut [u64], root: u64) {
        let n = self.n;
        // bit-reversal permutation
        let mut j = 0usize;
        for i in 1..n {
            let mut bit = n >> 1;
            while j & bit != 0 {
                j ^= bit;
                bit >>= 1;
            }
            j |= bit;
            if i < j {
                v.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let step = pow_mod(root, (n / len) as u64, self.q);
            for start in (0..n).step_by(len) {
                let mut w = 1u64;
                for k in 0..len / 2 {
                    let u = v[start + k];
                    let t = mul_mod(w, v[start + k + len / 2], self.q);
                    v[start + k] = add_mod(u, t, self.q);
                    v[start + k + len / 2] = sub_mod(u, t, self.q);
                    w = mul_mod(w, step, self.q);
                }
            }
            len <<= 1;
        }
    }

    /// Negacyclic product of two ring elements.
    pub fn mul(&self, a: &[u64], b: &[u64]) -> Vec<u64> {
        debug_assert_eq!(a.len(), self.n);
        debug_assert_eq!(b.len(), self.n);
        let mut fa: Vec<u64> = a
            .iter()
            .zip(&self.psi_pows)
            .map(|(&x, &p)| mul_mod(x, p, self.q))
            .collect();
        let mut fb: Vec<u64> = b
            .iter()
            .zip(&self.psi_pows)
            .map(|(&x, &p)| mul_mod(x, p, self.q))
            .collect();
        self.ntt(&mut fa, self.omega);
        self.ntt(&mut fb, self.omega);
        for (x, y) in fa.iter_mut().zip(&fb) {
            *x = mul_mod(*x, *y, self.q);
        }
        self.ntt(&mut fa, self.omega_inv);
        for (i, x) in fa.iter_mut().enumerate() {
            *x = mul_mod(*x, self.n_inv, self.q);
            *x = mul_mod(*x, self.psi_inv_pows[i], self.q);
        }
        fa
    }

    /// Map a signed integer into [0, q).
    pub fn from_signed(&self, v: i64) -> u64 {
        if v >= 0 {
            (v as u64) % self.q
        } else {
            self.q - ((-v) as u64) % self.q
        }
    }

    /// Centered lift into (-q/2, q/2].
    pub fn to_signed(&self, v: u64) -> i64 {
        if v > self.q / 2 {
            -((self.q - v) as i64)
        } else {
            v as i64
        }
    }
}

/// Reference negacyclic convolution, O(N^2), for equivalence tests.
pub fn schoolbook_negacyclic(a: &[u64], b: &[u64], q: u64) -> Vec<u64> {
    let n = a.len();
    let mut out = vec![0u64; n];
    for i in 0..n {
        if a[i] == 0 {
            continue;
        }
        for j in 0..n {
            let prod = mul_mod(a[i], b[j], q);
            let k = i + j;
            if k < n {
                out[k] = add_mod(out[k], prod, q);
            } else {
                out[k - n] = sub_mod(out[k - n], prod, q);
            }
        }
    }
    out
}
