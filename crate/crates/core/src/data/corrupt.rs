use rand::Rng;

use super::Document;
use crate::seed;

/// Replace each token independently, with probability `noise`, by a token
/// drawn uniformly from `[0, vocab_size)`.
pub fn corrupt(doc: &Document, noise: f64, vocab_size: usize, seed: u64) -> Document {
    corrupt_with_mask(doc, noise, vocab_size, seed).0
}

/// Like [`corrupt`], also returning which positions were redrawn (a redraw
/// may land on the original token).
pub fn corrupt_with_mask(
    doc: &Document,
    noise: f64,
    vocab_size: usize,
    seed: u64,
) -> (Document, Vec<bool>) {
    let noise = noise.clamp(0.0, 1.0);
    let mut rng = seed::rng(seed, &[doc.id, seed::tag("corrupt")]);
    let mut out = doc.clone();
    let mut mask = vec![false; doc.tokens.len()];
    if noise > 0.0 {
        for (t, m) in out.tokens.iter_mut().zip(mask.iter_mut()) {
            if rng.random::<f64>() < noise {
                *t = rng.random_range(0..vocab_size as u32);
                *m = true;
            }
        }
    }
    out.noise = 1.0 - (1.0 - doc.noise) * (1.0 - noise);
    (out, mask)
}
