#![allow(dead_code)]

use melstego::midi::{MelodyEvent, MelodySequence};
use melstego::model::{train_ngram, Alpha, NGramModel};
use melstego::neural::{LstmWeights, NeuralConfig, NeuralModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random-walk melodies around middle C with rests and releases.
pub fn synthetic_corpus(count: usize, len: usize, seed: u64) -> Vec<MelodySequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut pitch: i32 = rng.gen_range(60..=72);
            let mut events = vec![MelodyEvent::note_on(pitch as u8).unwrap()];
            while events.len() < len {
                let roll: f64 = rng.gen();
                let event = if roll < 0.5 {
                    pitch = (pitch + rng.gen_range(-4..=4)).clamp(48, 84);
                    MelodyEvent::note_on(pitch as u8).unwrap()
                } else if roll < 0.85 {
                    MelodyEvent::NO_EVENT
                } else {
                    MelodyEvent::NOTE_OFF
                };
                events.push(event);
            }
            MelodySequence::new(events, 4).unwrap()
        })
        .collect()
}

pub fn trained_ngram(seed: u64) -> NGramModel {
    train_ngram(&synthetic_corpus(40, 64, seed), 4, Alpha::default()).unwrap()
}

pub fn random_neural(hidden: usize, seed: u64) -> NeuralModel {
    let config = NeuralConfig { hidden, ..NeuralConfig::default() };
    NeuralModel::new(LstmWeights::random(config, seed)).unwrap()
}

pub fn random_symbols(rng: &mut impl Rng, len: usize) -> Vec<u8> {
    let mut symbols = vec![rng.gen_range(2..130u8)];
    symbols.extend((1..len).map(|_| rng.gen_range(0..130u8)));
    symbols
}
