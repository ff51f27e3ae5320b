use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the stage name; stable across platforms and toolchains.
fn stage_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seed for a named pipeline stage, derived from the single master seed.
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    master ^ stage_hash(stage).rotate_left(17)
}

/// RNG for a named stage.
pub fn stage_rng(master: u64, stage: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stage_seed(master, stage))
}

/// Independent stream `index` under `seed`. Used to give each chromosome or
/// sweep point its own generator so schedules cannot change results.
pub fn split_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
