//! Split-level glue: mask, encode with the chosen provider, build graphs.

use rayon::prelude::*;

use crate::corpus::CorpusSplit;
use crate::data::{EncodedSentence, ModelConfig};
use crate::encoder::{hashed_encode, CacheReader, EmbedTransport, EncoderError, RemoteEncoder};
use crate::preprocess::{alignment_seed, mask_entities, MaskRegistry};
use crate::scalar::Scalar;
use crate::trainer::{prepare_example, PreparedExample, TrainError};

/// Source of encoder states for a whole split.
pub enum Provider<'a, Tr> {
    Hashed { seed: u64 },
    Cache(&'a CacheReader),
    Remote {
        encoder: &'a RemoteEncoder<Tr>,
        /// Global seed for the per-example alignment streams.
        seed: u64,
        /// Keep subword states so training can redraw the alignment.
        keep_subwords: bool,
    },
}

/// Encodes every example of `split` (masked first) into word-level states.
pub fn encode_split<T: Scalar, Tr: EmbedTransport>(
    split: &CorpusSplit,
    masks: &MaskRegistry,
    d_enc: usize,
    provider: &Provider<'_, Tr>,
) -> Result<Vec<(String, EncodedSentence<T>)>, TrainError> {
    split
        .examples
        .iter()
        .map(|ex| {
            let masked = mask_entities(ex, masks)?;
            let enc = match provider {
                Provider::Hashed { seed } => hashed_encode(&masked, d_enc, *seed),
                Provider::Cache(reader) => reader.read(&ex.id)?,
                Provider::Remote { encoder, seed, .. } => {
                    encoder
                        .remote_encode(&masked, alignment_seed(*seed, &ex.id, None))?
                        .0
                }
            };
            Ok((ex.id.clone(), enc))
        })
        .collect()
}

/// Masks, encodes and graphs a split for the head.
pub fn prepare_split<T: Scalar, Tr: EmbedTransport>(
    split: &CorpusSplit,
    masks: &MaskRegistry,
    config: &ModelConfig,
    provider: &Provider<'_, Tr>,
) -> Result<Vec<PreparedExample<T>>, TrainError> {
    if let Provider::Cache(reader) = provider {
        if reader.d_enc() != config.d_enc {
            return Err(TrainError::Encoder(EncoderError::Contract(format!(
                "cache holds d_enc={} but the model expects {}",
                reader.d_enc(),
                config.d_enc
            ))));
        }
    }
    if let Provider::Remote {
        encoder,
        seed,
        keep_subwords: true,
    } = provider
    {
        return split
            .examples
            .iter()
            .map(|ex| {
                let masked = mask_entities(ex, masks)?;
                let sw = encoder.fetch::<T>(&masked)?;
                let seed = alignment_seed(*seed, &ex.id, None);
                let enc = sw.project(&masked.tokens, seed, encoder.strategy())?.0;
                prepare_example(ex, masked.tokens, enc, Some(sw), config)
            })
            .collect();
    }
    let encoded = encode_split::<T, Tr>(split, masks, config.d_enc, provider)?;
    split
        .examples
        .par_iter()
        .zip(encoded)
        .map(|(ex, (_, enc))| {
            let words = mask_entities(ex, masks)?.tokens;
            prepare_example(ex, words, enc, None, config)
        })
        .collect()
}

/// Placeholder transport type for providers that never call out.
pub struct NoTransport;

impl EmbedTransport for NoTransport {
    fn embed(
        &self,
        _request: &crate::encoder::EmbedRequest,
    ) -> Result<crate::encoder::EmbedResponse, EncoderError> {
        Err(EncoderError::Transport("no transport configured".into()))
    }
}
