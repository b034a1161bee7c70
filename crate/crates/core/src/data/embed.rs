//! Fixed embeddings used as retrieval keys and values.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Bag-of-words counts projected through per-token seeded Gaussian vectors,
/// then L2-normalized. An empty report maps to the zero vector.
pub fn report_embedding<S: AsRef<str>>(tokens: &[S], d: usize, seed: u64) -> Vec<f64> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in tokens {
        *counts.entry(t.as_ref()).or_default() += 1;
    }
    let mut out = vec![0.0; d];
    for (tok, c) in counts {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(tok) ^ seed);
        for o in out.iter_mut() {
            let g: f64 = StandardNormal.sample(&mut rng);
            *o += c as f64 * g;
        }
    }
    let n = out.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        out.iter_mut().for_each(|x| *x /= n);
    }
    out
}

/// Mean over patches of a row-major `n_patches × width` feature block.
pub fn image_embedding(features: &[f32], n_patches: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; width];
    for patch in features.chunks_exact(width).take(n_patches) {
        for (o, &v) in out.iter_mut().zip(patch) {
            *o += f64::from(v);
        }
    }
    out.iter_mut().for_each(|x| *x /= n_patches as f64);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(""), 0xcbf29ce484222325);
        assert_eq!(fnv1a("a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn report_embedding_is_unit_order_free_and_deterministic() {
        let a = report_embedding(&["heart", "is", "big"], 16, 7);
        let b = report_embedding(&["big", "heart", "is"], 16, 7);
        assert_eq!(a, b);
        assert!((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_ne!(a, report_embedding(&["heart", "is", "big"], 16, 8));
        assert!(report_embedding::<&str>(&[], 4, 0).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn image_embedding_is_patch_mean() {
        assert_eq!(image_embedding(&[1.0, 2.0, 3.0, 6.0], 2, 2), vec![2.0, 4.0]);
    }
}
