//! Deterministic, platform-independent random number generation.
//!
//! Every random decision in the crate flows through [`SeededRng`], a
//! xoshiro256++ generator (256-bit state) seeded by a fixed SplitMix64
//! mixing of `(master_seed, stream_index)`. The full pipeline is pinned here
//! so that any reimplementation — in this crate or another language — can
//! reproduce streams bit-for-bit:
//!
//! 1. `h = SplitMix64(master_seed).next()`
//! 2. `state = four successive outputs of SplitMix64(h XOR stream_index·0x9E3779B97F4A7C15)`
//! 3. draws are xoshiro256++ outputs; `next_f64 = (next_u64 >> 11)·2⁻⁵³`
//!
//! Normal draws use the Box–Muller transform only ([`box_muller`]); bounded
//! integers use a fixed-consumption multiply-shift ([`SeededRng::next_below`]).
//! Rejection sampling is deliberately absent: every draw consumes a fixed
//! number of generator steps, so streams stay aligned across configurations.

/// Identifier for the pinned generator pipeline above. Recorded in run
/// manifests so artifacts are self-describing.
pub const RNG_ALGORITHM_ID: &str = "xoshiro256++/splitmix64-v1";

const GOLDEN_GAMMA: u64 = 0x9E3779B97F4A7C15;

/// One SplitMix64 step: advance `state` and return the mixed output.
#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN_GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Deterministic xoshiro256++ stream keyed by `(master_seed, stream_index)`.
///
/// Streams with distinct indices are statistically independent for our
/// purposes; see [`streams`] for how indices are allocated across the crate.
#[derive(Debug, Clone)]
pub struct SeededRng {
    state: [u64; 4],
}

impl SeededRng {
    /// Seed a stream. See the module docs for the exact mixing pipeline.
    pub fn from_stream(master_seed: u64, stream_index: u64) -> Self {
        let mut s = master_seed;
        let h = splitmix64(&mut s);
        let mut t = h ^ stream_index.wrapping_mul(GOLDEN_GAMMA);
        let mut state = [
            splitmix64(&mut t),
            splitmix64(&mut t),
            splitmix64(&mut t),
            splitmix64(&mut t),
        ];
        // xoshiro256++ must not start from the all-zero state.
        if state == [0, 0, 0, 0] {
            state[0] = 1;
        }
        SeededRng { state }
    }

    /// Raw xoshiro256++ output.
    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let [s0, s1, s2, s3] = self.state;
        let result = (s0.wrapping_add(s3)).rotate_left(23).wrapping_add(s0);
        let t = s1 << 17;
        let s2 = s2 ^ s0;
        let s3 = s3 ^ s1;
        let s1 = s1 ^ s2;
        let s0 = s0 ^ s3;
        let s2 = s2 ^ t;
        let s3 = s3.rotate_left(45);
        self.state = [s0, s1, s2, s3];
        result
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`.
    #[inline]
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)` by multiply-shift: `(next_u64 · n) >> 64`.
    ///
    /// Always consumes exactly one generator step. The residual bias of at
    /// most `n/2⁶⁴` is irrelevant at our scales and far preferable to a
    /// rejection loop with data-dependent consumption.
    #[inline]
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "next_below requires n > 0");
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Two independent standard normal draws (Box–Muller over two uniforms).
    #[inline]
    pub fn gaussian_pair(&mut self) -> (f64, f64) {
        let u1 = self.next_f64();
        let u2 = self.next_f64();
        box_muller(u1, u2)
    }

    /// Fisher–Yates shuffle driven by [`SeededRng::next_below`].
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }

    /// Sample `k` distinct indices from `[0, n)`, returned sorted.
    ///
    /// Implemented as a Fisher–Yates pass over the full index vector followed
    /// by truncation, so consumption depends only on `n`.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {} indices from {}", k, n);
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx.truncate(k);
        idx.sort_unstable();
        idx
    }
}

/// Box–Muller transform: map uniforms `(u₁, u₂) ∈ [0,1)²` to two independent
/// standard normals `(√(−2 ln u₁)·cos 2πu₂, √(−2 ln u₁)·sin 2πu₂)`.
///
/// `u₁ = 0` is substituted with `2⁻⁵³` (the smallest nonzero value of our
/// uniform draw) so the log stays finite.
#[inline]
pub fn box_muller(u1: f64, u2: f64) -> (f64, f64) {
    let u1 = if u1 == 0.0 {
        1.0 / (1u64 << 53) as f64
    } else {
        u1
    };
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = 2.0 * std::f64::consts::PI * u2;
    (r * theta.cos(), r * theta.sin())
}

/// Stream-index allocation.
///
/// A stream index packs a 16-bit purpose tag above a 48-bit payload:
/// `index = (purpose << 48) | payload`. Purposes are assigned once, here, so
/// no two uses of randomness in the crate can collide — dataset content,
/// label flips, parameter init, mask sampling, dropout, theory Monte Carlo,
/// and epoch shuffling each own a disjoint index range.
pub mod streams {
    const SHIFT: u32 = 48;
    const PAYLOAD_MASK: u64 = (1 << SHIFT) - 1;

    pub const PURPOSE_SEQUENCE: u64 = 0;
    pub const PURPOSE_LABEL_FLIPS: u64 = 1;
    pub const PURPOSE_PARAM_INIT: u64 = 2;
    pub const PURPOSE_MASK_SAMPLING: u64 = 3;
    pub const PURPOSE_DROPOUT: u64 = 4;
    pub const PURPOSE_THEORY_MC: u64 = 5;
    pub const PURPOSE_EPOCH_SHUFFLE: u64 = 6;

    #[inline]
    fn pack(purpose: u64, payload: u64) -> u64 {
        debug_assert!(payload <= PAYLOAD_MASK, "stream payload overflow");
        (purpose << SHIFT) | (payload & PAYLOAD_MASK)
    }

    /// Content of one dataset sequence: keyed by split and position so the
    /// sequence is identical regardless of generation order or parallelism.
    pub fn sequence(split_id: u64, seq_index: u64) -> u64 {
        pack(PURPOSE_SEQUENCE, (split_id << 32) | (seq_index & 0xFFFF_FFFF))
    }

    /// Choice of which train labels to flip.
    pub fn label_flips() -> u64 {
        pack(PURPOSE_LABEL_FLIPS, 0)
    }

    /// Initialization of one parameter block, keyed by its rank in the
    /// canonical (sorted-name) block order.
    pub fn param_init(block_rank: u64) -> u64 {
        pack(PURPOSE_PARAM_INIT, block_rank)
    }

    /// Mask positions for one sequence in one pretraining epoch.
    pub fn mask_sampling(epoch: u64, seq_index: u64) -> u64 {
        pack(
            PURPOSE_MASK_SAMPLING,
            (epoch << 24) | (seq_index & 0xFF_FFFF),
        )
    }

    /// Dropout noise for one sequence in one epoch.
    pub fn dropout(epoch: u64, seq_index: u64) -> u64 {
        pack(PURPOSE_DROPOUT, (epoch << 24) | (seq_index & 0xFF_FFFF))
    }

    /// One Monte Carlo batch in the theory verifier.
    pub fn theory_mc(batch: u64) -> u64 {
        pack(PURPOSE_THEORY_MC, batch)
    }

    /// Minibatch order within one training epoch.
    pub fn epoch_shuffle(epoch: u64) -> u64 {
        pack(PURPOSE_EPOCH_SHUFFLE, epoch)
    }
}
