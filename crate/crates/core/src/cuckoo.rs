//! Cuckoo filter with partial-key cuckoo hashing.
//!
//! Used to compress published tag collections and the pigeonhole's bulk
//! address notifications. Inserted elements are always reported present;
//! absent elements are reported present with probability about
//! `2 · bucket_size / 2^fingerprint_bits`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crypto::{hash_bytes, Domain};
use crate::error::CuckooError;
use crate::mspsi::{Tag, TagMembership};

pub const CUCKOO_MAGIC: &[u8; 3] = b"CF1";
/// Maximum fraction of slots filled at construction.
pub const LOAD_LIMIT: f64 = 0.95;
const HEADER_LEN: usize = 3 + 1 + 1 + 2 + 4 + 8 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CuckooParams {
    pub bucket_size: u8,
    pub fingerprint_bits: u8,
    /// Always a power of two.
    pub bucket_count: u32,
    pub max_evictions: u16,
    pub seed: u64,
}

impl CuckooParams {
    pub const DEFAULT_BUCKET_SIZE: u8 = 4;
    pub const DEFAULT_FINGERPRINT_BITS: u8 = 24;
    pub const DEFAULT_MAX_EVICTIONS: u16 = 500;

    /// Smallest power-of-two table holding `elements` at [`LOAD_LIMIT`] with
    /// the record-filter defaults (4-slot buckets, 24-bit fingerprints).
    pub fn for_elements(elements: usize) -> Self {
        Self::sized(elements, Self::DEFAULT_FINGERPRINT_BITS)
    }

    /// Like [`for_elements`](Self::for_elements) but with the shortest
    /// fingerprint whose nominal false-positive rate is at most `fpr`.
    pub fn with_target_fpr(elements: usize, fpr: f64) -> Self {
        let b = f64::from(Self::DEFAULT_BUCKET_SIZE);
        let bits = (1u8..=32)
            .find(|&f| 2.0 * b / 2f64.powi(i32::from(f)) <= fpr)
            .unwrap_or(32);
        Self::sized(elements, bits)
    }

    fn sized(elements: usize, fingerprint_bits: u8) -> Self {
        let per_bucket = f64::from(Self::DEFAULT_BUCKET_SIZE) * LOAD_LIMIT;
        let needed = ((elements as f64) / per_bucket).ceil().max(1.0) as u32;
        CuckooParams {
            bucket_size: Self::DEFAULT_BUCKET_SIZE,
            fingerprint_bits,
            bucket_count: needed.next_power_of_two(),
            max_evictions: Self::DEFAULT_MAX_EVICTIONS,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Total slots.
    pub fn capacity(&self) -> usize {
        self.bucket_count as usize * self.bucket_size as usize
    }

    /// Nominal false-positive probability at full occupancy.
    pub fn nominal_fpr(&self) -> f64 {
        2.0 * f64::from(self.bucket_size) / 2f64.powi(i32::from(self.fingerprint_bits))
    }

    fn fingerprint_bytes(&self) -> usize {
        (usize::from(self.fingerprint_bits) + 7) / 8
    }

    fn validate(&self) -> Result<(), CuckooError> {
        if self.bucket_size == 0 {
            return Err(CuckooError::InvalidParams("bucket_size must be positive"));
        }
        if !(1..=32).contains(&self.fingerprint_bits) {
            return Err(CuckooError::InvalidParams("fingerprint_bits must be in 1..=32"));
        }
        if self.bucket_count == 0 || !self.bucket_count.is_power_of_two() {
            return Err(CuckooError::InvalidParams("bucket_count must be a power of two"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CuckooFilter {
    params: CuckooParams,
    /// `bucket_count * bucket_size` slots; 0 marks an empty slot.
    slots: Vec<u32>,
    count: u64,
}

impl CuckooFilter {
    /// Builds a filter containing every element of `set`.
    pub fn compress<I, T>(set: I, params: CuckooParams) -> Result<Self, CuckooError>
    where
        I: IntoIterator<Item = T>,
        T: AsRef<[u8]>,
    {
        params.validate()?;
        let mut filter = CuckooFilter {
            params,
            slots: vec![0; params.capacity()],
            count: 0,
        };
        let limit = (params.capacity() as f64 * LOAD_LIMIT).floor() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        for item in set {
            if filter.count as usize >= limit {
                return Err(CuckooError::TooManyElements(filter.count as usize + 1));
            }
            filter.insert(item.as_ref(), &mut rng)?;
        }
        Ok(filter)
    }

    pub fn params(&self) -> &CuckooParams {
        &self.params
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    fn mask(&self) -> u64 {
        u64::from(self.params.bucket_count) - 1
    }

    fn locate(&self, x: &[u8]) -> (usize, u32) {
        let h = hash_bytes(Domain::Cuckoo, &[x]);
        let index = u64::from_le_bytes(h[..8].try_into().unwrap()) & self.mask();
        let fp_mask = if self.params.fingerprint_bits == 32 {
            u32::MAX
        } else {
            (1u32 << self.params.fingerprint_bits) - 1
        };
        let mut fp = u32::from_le_bytes(h[8..12].try_into().unwrap()) & fp_mask;
        if fp == 0 {
            fp = 1;
        }
        (index as usize, fp)
    }

    fn alt_index(&self, index: usize, fp: u32) -> usize {
        let mixed = u64::from(fp).wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_right(29);
        ((index as u64) ^ (mixed & self.mask())) as usize
    }

    fn bucket(&self, index: usize) -> &[u32] {
        let b = usize::from(self.params.bucket_size);
        &self.slots[index * b..(index + 1) * b]
    }

    fn try_place(&mut self, index: usize, fp: u32) -> bool {
        let b = usize::from(self.params.bucket_size);
        match self.slots[index * b..(index + 1) * b].iter_mut().find(|s| **s == 0) {
            Some(slot) => {
                *slot = fp;
                true
            }
            None => false,
        }
    }

    fn insert(&mut self, x: &[u8], rng: &mut ChaCha8Rng) -> Result<(), CuckooError> {
        let (i1, mut fp) = self.locate(x);
        let i2 = self.alt_index(i1, fp);
        if self.try_place(i1, fp) || self.try_place(i2, fp) {
            self.count += 1;
            return Ok(());
        }
        let b = usize::from(self.params.bucket_size);
        let mut index = if rng.gen::<bool>() { i1 } else { i2 };
        for _ in 0..self.params.max_evictions {
            let victim = index * b + rng.gen_range(0..b);
            std::mem::swap(&mut fp, &mut self.slots[victim]);
            index = self.alt_index(index, fp);
            if self.try_place(index, fp) {
                self.count += 1;
                return Ok(());
            }
        }
        Err(CuckooError::Capacity {
            count: self.count as usize,
            evictions: usize::from(self.params.max_evictions),
        })
    }

    pub fn membership(&self, x: &[u8]) -> bool {
        let (i1, fp) = self.locate(x);
        self.bucket(i1).contains(&fp) || self.bucket(self.alt_index(i1, fp)).contains(&fp)
    }

    /// The membership-positive probes, in probe order.
    pub fn intersection<'a, T: AsRef<[u8]>>(&self, probes: &'a [T]) -> Vec<&'a T> {
        probes.iter().filter(|p| self.membership(p.as_ref())).collect()
    }

    pub fn serialized_len(&self) -> usize {
        HEADER_LEN + self.slots.len() * self.params.fingerprint_bytes()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.params;
        let mut out = Vec::with_capacity(self.serialized_len());
        out.extend_from_slice(CUCKOO_MAGIC);
        out.push(p.bucket_size);
        out.push(p.fingerprint_bits);
        out.extend_from_slice(&p.max_evictions.to_le_bytes());
        out.extend_from_slice(&p.bucket_count.to_le_bytes());
        out.extend_from_slice(&self.count.to_le_bytes());
        out.extend_from_slice(&p.seed.to_le_bytes());
        let width = p.fingerprint_bytes();
        for slot in &self.slots {
            out.extend_from_slice(&slot.to_le_bytes()[..width]);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CuckooError> {
        if bytes.len() < HEADER_LEN || &bytes[..3] != CUCKOO_MAGIC {
            return Err(CuckooError::Malformed("bad header"));
        }
        let params = CuckooParams {
            bucket_size: bytes[3],
            fingerprint_bits: bytes[4],
            max_evictions: u16::from_le_bytes([bytes[5], bytes[6]]),
            bucket_count: u32::from_le_bytes(bytes[7..11].try_into().unwrap()),
            seed: u64::from_le_bytes(bytes[19..27].try_into().unwrap()),
        };
        params.validate().map_err(|_| CuckooError::Malformed("invalid parameters"))?;
        let count = u64::from_le_bytes(bytes[11..19].try_into().unwrap());
        let width = params.fingerprint_bytes();
        let body = &bytes[HEADER_LEN..];
        if body.len() != params.capacity() * width {
            return Err(CuckooError::Malformed("bucket array length"));
        }
        let limit = if params.fingerprint_bits == 32 {
            u32::MAX
        } else {
            (1u32 << params.fingerprint_bits) - 1
        };
        let slots: Vec<u32> = body
            .chunks_exact(width)
            .map(|c| {
                let mut word = [0u8; 4];
                word[..width].copy_from_slice(c);
                u32::from_le_bytes(word)
            })
            .collect();
        if slots.iter().any(|&s| s > limit) {
            return Err(CuckooError::Malformed("fingerprint wider than declared"));
        }
        if slots.iter().filter(|&&s| s != 0).count() as u64 != count {
            return Err(CuckooError::Malformed("count does not match occupied slots"));
        }
        Ok(CuckooFilter { params, slots, count })
    }
}

impl TagMembership for CuckooFilter {
    fn contains_tag(&self, tag: &Tag) -> bool {
        self.membership(&tag.0)
    }
}
