//! Paillier key pairs with `g = n + 1`.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::RngCore;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::hex_string;
use crate::rng::rng;

pub const SUPPORTED_KEY_BITS: [u32; 3] = [512, 1024, 2048];

const MILLER_RABIN_ROUNDS: usize = 32;

/// Identifies a public key: the first 8 bytes of SHA-256 over the big-endian
/// modulus.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeyId(pub [u8; 8]);

impl fmt::Debug for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyId({})", hex_string(&self.0))
    }
}

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex_string(&self.0))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublicKey {
    n: BigUint,
    n_squared: BigUint,
    bits: u32,
    key_id: KeyId,
}

impl PublicKey {
    fn new(n: BigUint, bits: u32) -> Self {
        let digest = Sha256::digest(n.to_bytes_be());
        let mut id = [0u8; 8];
        id.copy_from_slice(&digest[..8]);
        Self {
            n_squared: &n * &n,
            n,
            bits,
            key_id: KeyId(id),
        }
    }

    pub fn modulus(&self) -> &BigUint {
        &self.n
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn key_id(&self) -> KeyId {
        self.key_id
    }

    /// Encrypts a message in `[0, n)`.
    pub fn encrypt_raw<R: RngCore + ?Sized>(&self, m: &BigUint, rng: &mut R) -> Result<BigUint> {
        if m >= &self.n {
            return Err(Error::Crypto("plaintext is not below the modulus".into()));
        }
        let r = random_unit(&self.n, rng);
        // (1 + n)^m = 1 + m·n (mod n²)
        let gm = (BigUint::one() + m * &self.n) % &self.n_squared;
        Ok(gm * r.modpow(&self.n, &self.n_squared) % &self.n_squared)
    }

    /// Ciphertext whose plaintext is the sum of both plaintexts mod n.
    pub fn add_raw(&self, a: &BigUint, b: &BigUint) -> Result<BigUint> {
        self.check_ciphertext(a)?;
        self.check_ciphertext(b)?;
        Ok(a * b % &self.n_squared)
    }

    pub(crate) fn check_ciphertext(&self, c: &BigUint) -> Result<()> {
        if c.is_zero() || c >= &self.n_squared {
            return Err(Error::Integrity("ciphertext outside [1, n^2)".into()));
        }
        Ok(())
    }
}

/// Decryption key. Counts its own uses so callers can audit how often
/// plaintexts were recovered.
#[derive(Debug)]
pub struct PrivateKey {
    public: PublicKey,
    lambda: BigUint,
    mu: BigUint,
    decryptions: AtomicU64,
}

impl PrivateKey {
    pub fn public(&self) -> &PublicKey {
        &self.public
    }

    pub fn key_id(&self) -> KeyId {
        self.public.key_id
    }

    /// Number of vector decryptions performed with this key.
    pub fn decryptions(&self) -> u64 {
        self.decryptions.load(Ordering::Relaxed)
    }

    pub(crate) fn record_decryption(&self) {
        self.decryptions.fetch_add(1, Ordering::Relaxed);
    }

    pub fn decrypt_raw(&self, c: &BigUint) -> Result<BigUint> {
        let pk = &self.public;
        pk.check_ciphertext(c)?;
        let x = c.modpow(&self.lambda, &pk.n_squared);
        let l = (x - BigUint::one()) / &pk.n;
        Ok(l * &self.mu % &pk.n)
    }
}

#[derive(Debug)]
pub struct KeyPair {
    pub public: PublicKey,
    pub private: PrivateKey,
}

/// Deterministic key generation from `seed`. The two primes have `bits / 2`
/// bits each with the top two bits set, so `n` has exactly `bits` bits.
pub fn keygen(bits: u32, seed: u64) -> Result<KeyPair> {
    if !SUPPORTED_KEY_BITS.contains(&bits) {
        return Err(Error::contract(format!(
            "key size {bits} not in {SUPPORTED_KEY_BITS:?}"
        )));
    }
    let mut r = rng(seed);
    let p = random_prime(bits / 2, &mut r);
    let q = loop {
        let q = random_prime(bits / 2, &mut r);
        if q != p {
            break q;
        }
    };
    let n = &p * &q;
    let one = BigUint::one();
    let lambda = (&p - &one).lcm(&(&q - &one));
    // With g = n + 1, L(g^λ mod n²) = λ mod n.
    let mu = (&lambda % &n)
        .modinv(&n)
        .ok_or_else(|| Error::Crypto("lambda is not invertible mod n".into()))?;
    let public = PublicKey::new(n, bits);
    let private = PrivateKey {
        public: public.clone(),
        lambda,
        mu,
        decryptions: AtomicU64::new(0),
    };
    Ok(KeyPair { public, private })
}

fn random_unit<R: RngCore + ?Sized>(n: &BigUint, rng: &mut R) -> BigUint {
    let len = n.to_bytes_be().len();
    let mut buf = vec![0u8; len + 8];
    loop {
        rng.fill_bytes(&mut buf);
        let r = BigUint::from_bytes_be(&buf) % n;
        if !r.is_zero() && r.gcd(n).is_one() {
            return r;
        }
    }
}

fn small_primes() -> &'static [u32] {
    static PRIMES: std::sync::OnceLock<Vec<u32>> = std::sync::OnceLock::new();
    PRIMES.get_or_init(|| {
        (3u32..2000)
            .filter(|&k| (2..).take_while(|d| d * d <= k).all(|d| k % d != 0))
            .collect()
    })
}

fn random_prime<R: RngCore + ?Sized>(bits: u32, rng: &mut R) -> BigUint {
    let bytes = bits.div_ceil(8) as usize;
    let excess = bytes as u32 * 8 - bits;
    let mut buf = vec![0u8; bytes];
    loop {
        rng.fill_bytes(&mut buf);
        buf[0] &= 0xff >> excess;
        buf[0] |= 0xc0 >> excess;
        buf[bytes - 1] |= 1;
        let candidate = BigUint::from_bytes_be(&buf);
        if is_probable_prime(&candidate, rng) {
            return candidate;
        }
    }
}

/// Trial division by small primes, then Miller-Rabin with random bases.
pub(crate) fn is_probable_prime<R: RngCore + ?Sized>(n: &BigUint, rng: &mut R) -> bool {
    let two = BigUint::from(2u32);
    if n < &two {
        return false;
    }
    if n.is_even() {
        return n == &two;
    }
    for &p in small_primes() {
        let p = BigUint::from(p);
        if n == &p {
            return true;
        }
        if (n % &p).is_zero() {
            return false;
        }
    }
    let one = BigUint::one();
    let n_minus_1 = n - &one;
    let s = n_minus_1.trailing_zeros().unwrap_or(0);
    let d = &n_minus_1 >> s;
    let len = n.to_bytes_be().len();
    let mut buf = vec![0u8; len + 8];
    'witness: for _ in 0..MILLER_RABIN_ROUNDS {
        rng.fill_bytes(&mut buf);
        // base in [2, n - 2]
        let a = BigUint::from_bytes_be(&buf) % (n - 3u32) + &two;
        let mut x = a.modpow(&d, n);
        if x == one || x == n_minus_1 {
            continue;
        }
        for _ in 1..s {
            x = &x * &x % n;
            if x == n_minus_1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}
