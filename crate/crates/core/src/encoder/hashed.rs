use crate::data::{EncodedSentence, Provenance};
use crate::numerics::Tensor;
use crate::preprocess::MaskedSentence;
use crate::scalar::Scalar;
use crate::seed::{combine, fnv1a, unit_interval};

/// Provider name recorded in [`Provenance`].
pub const HASHED_PROVIDER: &str = "hashed";

const WORD_TAG: u64 = 0x574f_5244;

/// Deterministic stand-in encoder. Row `i` depends only on
/// `(tokens[i], i, seed)`; the sentence vector is the mean of the rows.
pub fn hashed_encode<T: Scalar>(masked: &MaskedSentence, d_enc: usize, seed: u64) -> EncodedSentence<T> {
    let n = masked.tokens.len();
    let mut data = Vec::with_capacity(n * d_enc);
    for (pos, tok) in masked.tokens.iter().enumerate() {
        let key = combine(&[WORD_TAG, fnv1a(tok.as_bytes()), pos as u64, seed]);
        data.extend((0..d_enc).map(|k| T::of(unit_interval(combine(&[key, k as u64])))));
    }
    let inv = T::of(1.0 / n.max(1) as f64);
    let cls = (0..d_enc)
        .map(|k| (0..n).map(|r| data[r * d_enc + k]).sum::<T>() * inv)
        .collect();
    EncodedSentence {
        cls,
        word_states: Tensor::from_vec(vec![n, d_enc], data).expect("n * d_enc values"),
        provenance: Provenance {
            provider: HASHED_PROVIDER.to_string(),
            seed,
        },
    }
}
