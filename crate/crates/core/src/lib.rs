//! Hide bitstreams in machine-generated monophonic melodies.
//!
//! A conditional model over melody events proposes the next event; the
//! encoder keeps the `cps` most likely candidates, Huffman-codes them by
//! weight and lets the secret bits pick the path through the tree. The
//! receiver replays the same model to read the bits back.

pub mod bundle;
pub mod codec;
pub mod eval;
pub mod midi;
pub mod model;
pub mod neural;

pub use codec::{embed, extract, CodecError, StegoBundle, StegoParams};
pub use midi::{MelodyEvent, MelodySequence, MidiError, QuantizationConfig};
pub use model::{ConditionalModel, Distribution, ModelError, ModelSession, NGramModel};
pub use neural::{NeuralConfig, NeuralModel};
