//! Latin text processing and contextual language modelling at desk scale.
//!
//! The crate covers the full pipeline from raw Latin text to contextual
//! token embeddings:
//!
//! - [`textproc`]: sentence segmentation and word tokenization with enclitic
//!   splitting (`virumque` becomes `virum` + `-que`).
//! - [`subword`]: WordPiece vocabulary learning and greedy longest-match
//!   encoding with per-word alignment.
//! - [`corpus`]: OCR quality filtering, source-mixture upsampling and
//!   whole-word-masked training examples.
//! - [`encoder`]: a bidirectional transformer encoder with a masked-LM head,
//!   hand-written backpropagation, Adam training and gradient checking.
//! - [`datasets`]: treebank ingestion, emendation mining and dictionary sense
//!   mining.
//! - [`heads`]: part-of-speech and word-sense fine-tuning heads.
//! - [`infill`]: candidate ranking for bracketed emendation slots.
//! - [`neighbors`]: an exact cosine index over contextual word vectors.
//! - [`cli`]: the `verba` command line.
//!
//! Runnable walkthroughs for each stage live under `examples/`.

pub mod cli;
pub mod corpus;
pub mod datasets;
pub mod encoder;
mod error;
pub mod heads;
pub mod infill;
pub mod jsonl;
pub mod neighbors;
pub mod seed;
pub mod subword;
pub mod synth;
pub mod textproc;

pub use error::{Error, Result};
