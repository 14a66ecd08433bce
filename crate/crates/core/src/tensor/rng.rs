//! Counter-based randomness for dropout masks.
//!
//! A mask element is a pure function of `(seed, layer, step, index)`, so masks
//! are identical however the work is scheduled.

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit id for a named layer (FNV-1a).
pub fn layer_id(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Clone, Copy, Debug)]
pub struct CounterRng {
    key: u64,
}

impl CounterRng {
    pub fn new(seed: u64, layer: u64, step: u64) -> Self {
        let key = splitmix64(splitmix64(seed ^ splitmix64(layer)) ^ splitmix64(step.wrapping_add(1)));
        Self { key }
    }

    /// Uniform in [0, 1) for element `index`.
    pub fn uniform(&self, index: u64) -> f64 {
        let bits = splitmix64(self.key ^ splitmix64(index));
        (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// Whether element `index` survives dropout with drop probability `p`.
pub fn dropout_keep(rng: &CounterRng, index: u64, p: f64) -> bool {
    rng.uniform(index) >= p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a = CounterRng::new(7, layer_id("enc.drop"), 3);
        let b = CounterRng::new(7, layer_id("enc.drop"), 3);
        let c = CounterRng::new(7, layer_id("enc.drop"), 4);
        let xs: Vec<f64> = (0..16).map(|i| a.uniform(i)).collect();
        let ys: Vec<f64> = (0..16).map(|i| b.uniform(i)).collect();
        let zs: Vec<f64> = (0..16).map(|i| c.uniform(i)).collect();
        assert_eq!(xs, ys);
        assert_ne!(xs, zs);
        assert!(xs.iter().all(|&u| (0.0..1.0).contains(&u)));
    }

    #[test]
    fn keep_rate_tracks_probability() {
        let rng = CounterRng::new(1, 2, 3);
        let kept = (0..20_000).filter(|&i| dropout_keep(&rng, i, 0.3)).count();
        let rate = kept as f64 / 20_000.0;
        assert!((rate - 0.7).abs() < 0.02, "keep rate {rate}");
    }
}
