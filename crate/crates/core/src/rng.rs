//! Counter-based random streams.
//!
//! Each consumer asks for a stream by `(seed, purpose, index)`. Streams are
//! ChaCha8 keystreams, so draws depend only on the key and the position in
//! the stream, never on the order in which workers request them.

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. The tag keeps streams for different purposes
/// disjoint under the same user seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    ScenarioTheta,
    ScenarioBills,
    Votes,
    Utilities,
    LouisDraws,
    BootstrapBills,
    BootstrapVotes,
    Mask,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::ScenarioTheta => 0x51_7cc1_b727_220a,
            Purpose::ScenarioBills => 0x2f2b_9d1a_c3e4_0b17,
            Purpose::Votes => 0x94d0_49bb_1331_11eb,
            Purpose::Utilities => 0x6a09_e667_f3bc_c908,
            Purpose::LouisDraws => 0xbb67_ae85_84ca_a73b,
            Purpose::BootstrapBills => 0x3c6e_f372_fe94_f82b,
            Purpose::BootstrapVotes => 0xa54f_f53a_5f1d_36f1,
            Purpose::Mask => 0x510e_527f_ade6_82d1,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream for `(seed, purpose, index)`, positioned at its start.
pub fn stream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ purpose.tag()));
    rng.set_stream(index);
    rng
}

/// Derives a child seed, e.g. one per bootstrap replicate.
pub fn derive_seed(seed: u64, purpose: Purpose, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ purpose.tag()) ^ splitmix64(index.wrapping_add(1)))
}

/// Stable 64-bit FNV-1a hash, used to key streams by identifier.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Uniform in (0, 1], consuming exactly one `u64`.
#[inline]
pub fn open_uniform<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64)
}

/// Two independent standard normals by Box–Muller, consuming exactly two
/// `u64` (four 32-bit stream words).
#[inline]
pub fn normal_pair<R: RngCore + ?Sized>(rng: &mut R) -> (f64, f64) {
    let u1 = open_uniform(rng);
    let u2 = open_uniform(rng);
    let r = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
    (r * c, r * s)
}

/// Stream words consumed by one [`normal_pair`].
pub const WORDS_PER_NORMAL_PAIR: u128 = 4;
