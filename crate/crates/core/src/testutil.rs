use crate::lm::{LmConfig, MaskedLm};

/// A randomly initialized 2-layer LM over 40 tokens with weights large enough
/// that attention and the FFN are far from linear.
pub(crate) fn tiny_lm(seed: u64) -> MaskedLm {
    let cfg = LmConfig {
        d: 8,
        layers: 2,
        heads: 2,
        ffn_dim: 12,
        vocab_size: 40,
        max_len: 16,
        seed,
        tie_output: true,
        init_std: 0.5,
    };
    let mut lm = MaskedLm::new(cfg).unwrap();
    // non-trivial norm parameters and biases
    for (k, t) in lm.weights.tensors_mut().into_iter().enumerate() {
        for (i, x) in t.iter_mut().enumerate() {
            if *x == 0.0 {
                *x = 0.1 * (((k * 31 + i * 17) % 13) as f64 / 13.0 - 0.5);
            } else if *x == 1.0 {
                *x = 1.0 + 0.2 * (((k * 7 + i * 5) % 11) as f64 / 11.0 - 0.5);
            }
        }
    }
    lm
}
