mod common;

use melstego::midi::{parse_and_extract, render_midi, MelodySequence, QuantizationConfig};
use proptest::prelude::*;

fn melody() -> impl Strategy<Value = MelodySequence> {
    (2u8..130, proptest::collection::vec(0u8..130, 0..200), 1u32..=8).prop_map(|(key, rest, spq)| {
        let mut symbols = vec![key];
        symbols.extend(rest);
        MelodySequence::from_symbols(&symbols, spq).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn render_then_parse_is_identity(m in melody(), tempo in 30.0f64..240.0, program in 0u8..128) {
        let bytes = render_midi(&m, tempo, program);
        let cfg = QuantizationConfig { steps_per_quarter: m.steps_per_quarter(), ..QuantizationConfig::default() };
        let parsed = parse_and_extract(&bytes, &cfg).unwrap();
        prop_assert_eq!(parsed, vec![m]);
    }
}

#[test]
fn corpus_melodies_round_trip() {
    let cfg = QuantizationConfig::default();
    for m in common::synthetic_corpus(50, 100, 9) {
        let parsed = parse_and_extract(&render_midi(&m, 120.0, 0), &cfg).unwrap();
        assert_eq!(parsed, vec![m]);
    }
}
