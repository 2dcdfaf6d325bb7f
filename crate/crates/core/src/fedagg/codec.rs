//! Fixed-point vectors packed several values per Paillier plaintext.
//!
//! A value `v` becomes the integer `round(v * 2^q)`. Each plaintext holds
//! `slots` such integers in fields of `slot_bits` bits, least significant
//! slot first. Negative slots borrow from the next field, so the packed
//! integer is an ordinary signed sum and negative totals wrap modulo `n`.
//! Decoding reads the plaintext as a centred residue and peels slots off with
//! centred remainders. Every field keeps `HEADROOM_BITS` spare bits, enough
//! for `2^HEADROOM_BITS` ciphertexts to be summed without carries crossing
//! slots.

use num_bigint::{BigInt, BigUint, Sign};
use num_integer::Integer;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rand::RngCore;

use super::paillier::{KeyId, PrivateKey, PublicKey};
use crate::error::{Error, Result};

/// Default number of fractional bits.
pub const DEFAULT_FRAC_BITS: u32 = 40;
/// Encodable values satisfy `|v| < 2^VALUE_INT_BITS`.
pub const VALUE_INT_BITS: u32 = 24;
/// Spare bits per slot for summation carries.
pub const HEADROOM_BITS: u32 = 10;
/// Most ciphertext vectors that can be summed into one.
pub const MAX_TERMS: u32 = 1 << HEADROOM_BITS;

const MAX_FRAC_BITS: u32 = 64;

/// Slot geometry for a key size and scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Packing {
    pub frac_bits: u32,
    pub slot_bits: u32,
    pub slots: u32,
}

impl Packing {
    pub fn new(key_bits: u32, frac_bits: u32) -> Result<Self> {
        if frac_bits == 0 || frac_bits > MAX_FRAC_BITS {
            return Err(Error::contract(format!(
                "fractional bits must be in 1..={MAX_FRAC_BITS}, got {frac_bits}"
            )));
        }
        let slot_bits = frac_bits + VALUE_INT_BITS + HEADROOM_BITS + 1;
        // Keep the packed magnitude below n / 4.
        let slots = key_bits.saturating_sub(3) / slot_bits;
        if slots == 0 {
            return Err(Error::contract(format!(
                "a {key_bits}-bit key cannot hold a {slot_bits}-bit slot"
            )));
        }
        Ok(Self {
            frac_bits,
            slot_bits,
            slots,
        })
    }

    fn ciphertexts_for(&self, len: usize) -> usize {
        len.div_ceil(self.slots as usize)
    }
}

/// A vector of reals encrypted under one public key at scale `2^frac_bits`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedVector {
    key_id: KeyId,
    packing: Packing,
    len: usize,
    /// How many encrypted vectors were summed into this one.
    terms: u32,
    ciphertexts: Vec<BigUint>,
}

impl EncryptedVector {
    pub fn key_id(&self) -> KeyId {
        self.key_id
    }

    pub fn frac_bits(&self) -> u32 {
        self.packing.frac_bits
    }

    pub fn packing(&self) -> Packing {
        self.packing
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn terms(&self) -> u32 {
        self.terms
    }

    pub fn ciphertexts(&self) -> &[BigUint] {
        &self.ciphertexts
    }

    fn check_shape(&self) -> Result<()> {
        if self.ciphertexts.len() != self.packing.ciphertexts_for(self.len) {
            return Err(Error::Integrity(format!(
                "{} ciphertexts cannot carry {} values at {} per ciphertext",
                self.ciphertexts.len(),
                self.len,
                self.packing.slots
            )));
        }
        if self.terms == 0 || self.terms > MAX_TERMS {
            return Err(Error::Integrity(format!(
                "term count {} out of range",
                self.terms
            )));
        }
        Ok(())
    }
}

/// Scales `v` to a fixed-point integer; fails if `|v| >= 2^VALUE_INT_BITS`.
pub fn to_fixed(v: f64, frac_bits: u32) -> Result<i128> {
    if !v.is_finite() {
        return Err(Error::Crypto(format!("cannot encode non-finite value {v}")));
    }
    let bound = 2f64.powi(VALUE_INT_BITS as i32);
    if v.abs() >= bound {
        return Err(Error::Crypto(format!(
            "value {v} exceeds the fixed-point bound 2^{VALUE_INT_BITS}"
        )));
    }
    Ok((v * 2f64.powi(frac_bits as i32)).round() as i128)
}

pub fn from_fixed(x: i128, frac_bits: u32) -> f64 {
    x as f64 / 2f64.powi(frac_bits as i32)
}

fn pack(slots: &[i128], slot_bits: u32, n: &BigUint) -> BigUint {
    let mut acc = BigInt::zero();
    for &s in slots.iter().rev() {
        acc = (acc << slot_bits) + BigInt::from(s);
    }
    let n = BigInt::from(n.clone());
    acc.mod_floor(&n)
        .to_biguint()
        .expect("mod_floor of a positive modulus is non-negative")
}

fn unpack(m: &BigUint, n: &BigUint, packing: &Packing, count: usize) -> Result<Vec<i128>> {
    let n = BigInt::from(n.clone());
    let mut acc = BigInt::from_biguint(Sign::Plus, m.clone());
    if acc > (&n >> 1) {
        acc -= &n;
    }
    let field = BigInt::one() << packing.slot_bits;
    let half = BigInt::one() << (packing.slot_bits - 1);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut r = acc.mod_floor(&field);
        if r >= half {
            r -= &field;
        }
        acc = (acc - &r) >> packing.slot_bits;
        out.push(r.to_i128().expect("slot fits in i128"));
    }
    if !acc.is_zero() {
        return Err(Error::Integrity(format!(
            "plaintext has {} bits beyond the packed slots",
            acc.abs().bits()
        )));
    }
    Ok(out)
}

/// Encrypts `values` at scale `2^frac_bits`.
pub fn encrypt<R: RngCore + ?Sized>(
    pk: &PublicKey,
    values: &[f64],
    frac_bits: u32,
    rng: &mut R,
) -> Result<EncryptedVector> {
    let packing = Packing::new(pk.bits(), frac_bits)?;
    let fixed = values
        .iter()
        .map(|&v| to_fixed(v, frac_bits))
        .collect::<Result<Vec<_>>>()?;
    let mut ciphertexts = Vec::with_capacity(packing.ciphertexts_for(values.len()));
    for chunk in fixed.chunks(packing.slots as usize) {
        let m = pack(chunk, packing.slot_bits, pk.modulus());
        ciphertexts.push(pk.encrypt_raw(&m, rng)?);
    }
    Ok(EncryptedVector {
        key_id: pk.key_id(),
        packing,
        len: values.len(),
        terms: 1,
        ciphertexts,
    })
}

/// Homomorphic sum: decrypts to the element-wise sum of both plaintexts.
pub fn add_encrypted(
    pk: &PublicKey,
    a: &EncryptedVector,
    b: &EncryptedVector,
) -> Result<EncryptedVector> {
    for v in [a, b] {
        if v.key_id != pk.key_id() {
            return Err(Error::contract(format!(
                "ciphertext under key {} added with key {}",
                v.key_id,
                pk.key_id()
            )));
        }
        v.check_shape()?;
    }
    if a.packing != b.packing {
        return Err(Error::contract(
            "ciphertexts use different fixed-point scales",
        ));
    }
    if a.len != b.len {
        return Err(Error::contract(format!(
            "lengths differ: {} vs {}",
            a.len, b.len
        )));
    }
    let terms = a.terms + b.terms;
    if terms > MAX_TERMS {
        return Err(Error::Crypto(format!(
            "summing {terms} vectors would exceed the {MAX_TERMS}-term headroom"
        )));
    }
    let ciphertexts = a
        .ciphertexts
        .iter()
        .zip(&b.ciphertexts)
        .map(|(x, y)| pk.add_raw(x, y))
        .collect::<Result<Vec<_>>>()?;
    Ok(EncryptedVector {
        key_id: a.key_id,
        packing: a.packing,
        len: a.len,
        terms,
        ciphertexts,
    })
}

/// Decrypts a vector. Counts as one use of the private key.
pub fn decrypt(sk: &PrivateKey, v: &EncryptedVector) -> Result<Vec<f64>> {
    if v.key_id != sk.key_id() {
        return Err(Error::Integrity(format!(
            "ciphertext under key {} cannot be opened with key {}",
            v.key_id,
            sk.key_id()
        )));
    }
    v.check_shape()?;
    sk.record_decryption();
    let n = sk.public().modulus();
    let mut out = Vec::with_capacity(v.len);
    let mut remaining = v.len;
    for c in &v.ciphertexts {
        let count = remaining.min(v.packing.slots as usize);
        let m = sk.decrypt_raw(c)?;
        for x in unpack(&m, n, &v.packing, count)? {
            out.push(from_fixed(x, v.packing.frac_bits));
        }
        remaining -= count;
    }
    Ok(out)
}

const MAGIC: &[u8; 4] = b"PHEV";
const WIRE_VERSION: u8 = 1;

/// Serializes to the `PHEV` wire format (see `docs/wire-format.md`).
pub fn to_wire(v: &EncryptedVector) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(WIRE_VERSION);
    out.extend_from_slice(&v.key_id.0);
    out.extend_from_slice(&(v.packing.frac_bits as u16).to_be_bytes());
    out.extend_from_slice(&(v.packing.slot_bits as u16).to_be_bytes());
    out.extend_from_slice(&(v.packing.slots as u16).to_be_bytes());
    out.extend_from_slice(&v.terms.to_be_bytes());
    out.extend_from_slice(&(v.len as u32).to_be_bytes());
    out.extend_from_slice(&(v.ciphertexts.len() as u32).to_be_bytes());
    for c in &v.ciphertexts {
        let bytes = c.to_bytes_be();
        out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
        out.extend_from_slice(&bytes);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Wire(format!(
                "truncated: needed {n} bytes, {} left",
                self.buf.len()
            )));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_be_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

/// Parses the `PHEV` wire format, rejecting trailing bytes and inconsistent
/// headers.
pub fn from_wire(bytes: &[u8]) -> Result<EncryptedVector> {
    let mut r = Reader { buf: bytes };
    if r.take(4)? != MAGIC {
        return Err(Error::Wire("bad magic".into()));
    }
    let version = r.take(1)?[0];
    if version != WIRE_VERSION {
        return Err(Error::Wire(format!("unsupported version {version}")));
    }
    let key_id = KeyId(r.take(8)?.try_into().expect("8 bytes"));
    let frac_bits = r.u16()? as u32;
    let slot_bits = r.u16()? as u32;
    let slots = r.u16()? as u32;
    let terms = r.u32()?;
    let len = r.u32()? as usize;
    let count = r.u32()? as usize;
    if frac_bits == 0
        || frac_bits > MAX_FRAC_BITS
        || slot_bits != frac_bits + VALUE_INT_BITS + HEADROOM_BITS + 1
        || slots == 0
    {
        return Err(Error::Wire(format!(
            "inconsistent packing: frac {frac_bits}, slot {slot_bits}, slots {slots}"
        )));
    }
    let packing = Packing {
        frac_bits,
        slot_bits,
        slots,
    };
    if count != packing.ciphertexts_for(len) {
        return Err(Error::Wire(format!("{count} ciphertexts for {len} values")));
    }
    let mut ciphertexts = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        ciphertexts.push(BigUint::from_bytes_be(r.take(n)?));
    }
    if !r.buf.is_empty() {
        return Err(Error::Wire(format!("{} trailing bytes", r.buf.len())));
    }
    let v = EncryptedVector {
        key_id,
        packing,
        len,
        terms,
        ciphertexts,
    };
    v.check_shape().map_err(|e| Error::Wire(e.to_string()))?;
    Ok(v)
}
