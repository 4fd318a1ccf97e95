//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use melstego::codec::{self, build_candidate_pool, build_huffman, CodecError, StegoParams};
use melstego::eval::{self, table_embedding_rate};
use melstego::midi::{self, MelodyEvent, MelodySequence, QuantizationConfig, VOCAB_SIZE};
use melstego::model::{
    self, train_ngram, Alpha, ConditionalModel, Distribution, GenerationMode, GenerationParams, ModelError,
    ModelSession, NGramModel,
};
use melstego::neural::{LstmWeights, NeuralConfig, NeuralModel};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

const CPS_VALUES: [usize; 6] = [2, 4, 8, 16, 32, 64];
const ROUND_TRIP_PAYLOADS: usize = 1000;
const ROUND_TRIP_MAX_BITS: usize = 10_000;
/// Payloads also run through the default-size network.
const DEFAULT_NET_PAYLOADS: usize = 8;
const TABLE_TOLERANCE_PP: f64 = 0.3;
const CAPACITY_SLACK_BITS: f64 = 0.05;
const CAPACITY_MIN_NOTES: usize = 10_000;
const HUFFMAN_TRIALS_PER_M: usize = 500;
const SCORE_MELODIES: usize = 50;
const SCORE_CPS: [usize; 3] = [2, 8, 64];
const LN2_TOLERANCE: f64 = 1e-9;
const MIDI_SEQUENCES: usize = 200;
const NEGATIVE_TRIALS: usize = 1000;
const NEGATIVE_MIN_DETECTED: f64 = 0.99;
const DETERMINISM_RUNS: usize = 20;

struct Outcome {
    pass: bool,
    detail: String,
}

type Criterion = (&'static str, fn() -> Outcome);

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

// ---------------------------------------------------------------------------
// Fixtures
// ---------------------------------------------------------------------------

/// Random-walk melodies around middle C with rests and releases.
fn synthetic_corpus(count: usize, len: usize, seed: u64) -> Vec<MelodySequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut pitch: i32 = rng.gen_range(55..=76);
            let mut events = vec![MelodyEvent::note_on(pitch as u8).unwrap()];
            while events.len() < len {
                let roll: f64 = rng.gen();
                let event = if roll < 0.45 {
                    pitch = (pitch + rng.gen_range(-5..=5)).clamp(40, 90);
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

fn ngram(seed: u64) -> NGramModel {
    train_ngram(&synthetic_corpus(200, 128, seed), 4, Alpha::default()).unwrap()
}

/// Small network for the full-scale sweeps; the math is the default model's.
fn compact_neural(seed: u64) -> NeuralModel {
    let config = NeuralConfig { hidden: 8, layers: 2, att_hidden: 8, att_window: 8, ..NeuralConfig::default() };
    NeuralModel::new(LstmWeights::random(config, seed)).unwrap()
}

fn default_neural(seed: u64) -> NeuralModel {
    NeuralModel::new(LstmWeights::random(NeuralConfig::default(), seed)).unwrap()
}

fn random_payload(rng: &mut ChaCha8Rng, max_bits: usize) -> Vec<u8> {
    let bytes = rng.gen_range(0..=max_bits / 8);
    eval::random_payload(rng, bytes)
}

// ---------------------------------------------------------------------------
// 1. Round trip
// ---------------------------------------------------------------------------

/// Round trips every payload at each cps in `cps_of(payload index)`.
fn round_trips(
    model: &dyn ConditionalModel,
    payloads: usize,
    seed: u64,
    cps_of: impl Fn(usize) -> Vec<usize>,
) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut ok, mut total) = (0, 0);
    for i in 0..payloads {
        let secret = random_payload(&mut rng, ROUND_TRIP_MAX_BITS);
        for cps in cps_of(i) {
            let params = StegoParams::new(cps, rng.next_u64());
            total += 1;
            let recovered = codec::embed(model, &params, &secret)
                .and_then(|bundle| codec::extract(model, &params, &bundle.melodies));
            match recovered {
                Ok(r) if r == secret => ok += 1,
                other => println!("  round trip mismatch: cps {cps}, {} bytes: {other:?}", secret.len()),
            }
        }
    }
    (ok, total)
}

fn criterion_round_trip() -> Outcome {
    let every = |_| CPS_VALUES.to_vec();
    let ng = round_trips(&ngram(1), ROUND_TRIP_PAYLOADS, 101, every);
    // The neural replay costs about ten times the n-gram one, so on a
    // single core each payload visits one pool size in rotation.
    let nn = round_trips(&compact_neural(2), ROUND_TRIP_PAYLOADS, 102, |i| vec![CPS_VALUES[i % CPS_VALUES.len()]]);
    let big = round_trips(&default_neural(3), DEFAULT_NET_PAYLOADS, 103, every);
    let pass = [ng, nn, big].iter().all(|&(ok, total)| ok == total);
    outcome(
        pass,
        format!(
            "n-gram {}/{}, compact neural {}/{} (one cps per payload), default neural {}/{} exact",
            ng.0, ng.1, nn.0, nn.1, big.0, big.1
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. Reference rate table
// ---------------------------------------------------------------------------

fn criterion_table() -> Outcome {
    // Reference rows: (cps, k, L, B bytes, ER %).
    const ROWS: [(usize, f64, f64, f64, f64); 6] = [
        (2, 1.0, 147.9, 505.8, 3.7),
        (4, 1.95, 146.3, 518.2, 6.9),
        (8, 2.78, 146.9, 524.9, 9.7),
        (16, 3.59, 160.5, 504.5, 14.3),
        (32, 4.37, 139.5, 530.8, 14.4),
        (64, 5.22, 141.8, 495.4, 18.7),
    ];
    let mut worst: f64 = 0.0;
    let mut cells = Vec::new();
    for (cps, k, l, b, expected) in ROWS {
        let er = table_embedding_rate(k, l, b) * 100.0;
        worst = worst.max((er - expected).abs());
        cells.push(format!("{cps}:{er:.2}%"));
    }
    outcome(worst <= TABLE_TOLERANCE_PP, format!("{} (max deviation {worst:.2} pp)", cells.join(" ")))
}

// ---------------------------------------------------------------------------
// 3. One bit per note at cps 2
// ---------------------------------------------------------------------------

fn criterion_cps2() -> Outcome {
    let models: [Box<dyn ConditionalModel>; 2] = [Box::new(ngram(1)), Box::new(compact_neural(2))];
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut bits, mut notes, mut violations) = (0usize, 0usize, 0usize);
    for model in &models {
        for _ in 0..20 {
            let secret = random_payload(&mut rng, 4000);
            let params = StegoParams::new(2, rng.next_u64());
            let bundle = codec::embed(model.as_ref(), &params, &secret).unwrap();
            let detail = codec::extract_detailed(model.as_ref(), &params, &bundle.melodies).unwrap();
            for (s, (&b, &n)) in bundle.stats.iter().zip(detail.frame_bits_per_melody.iter().zip(&detail.data_notes_per_melody)) {
                violations += usize::from(s.embedded_bits != s.data_notes || b != n);
                bits += s.embedded_bits;
                notes += s.data_notes;
            }
        }
    }
    let k = bits as f64 / notes as f64;
    outcome(violations == 0 && bits == notes, format!("k = {k} over {notes} data notes, {violations} melodies off"))
}

// ---------------------------------------------------------------------------
// 4. Capacity bound
// ---------------------------------------------------------------------------

fn criterion_capacity() -> Outcome {
    let models: [(&str, Box<dyn ConditionalModel>); 2] =
        [("n-gram", Box::new(ngram(1))), ("neural", Box::new(compact_neural(2)))];
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut pass = true;
    let mut cells = Vec::new();
    for (name, model) in &models {
        for m in CPS_VALUES {
            let (mut bits, mut notes) = (0usize, 0usize);
            while notes < CAPACITY_MIN_NOTES {
                let secret = eval::random_payload(&mut rng, 1250);
                let bundle = codec::embed(model.as_ref(), &StegoParams::new(m, rng.next_u64()), &secret).unwrap();
                bits += bundle.stats.iter().map(|s| s.embedded_bits).sum::<usize>();
                notes += bundle.stats.iter().map(|s| s.data_notes).sum::<usize>();
            }
            let k = bits as f64 / notes as f64;
            let bound = (m as f64).log2() + CAPACITY_SLACK_BITS;
            pass &= k <= bound;
            cells.push(format!("{name} m={m}:{k:.3}"));
        }
    }
    outcome(pass, format!("bits/note {} (bound log2 m + {CAPACITY_SLACK_BITS})", cells.join(" ")))
}

// ---------------------------------------------------------------------------
// 5. Huffman optimality against exhaustive search
// ---------------------------------------------------------------------------

/// Sorted leaf-depth profiles of every full binary tree with `m` leaves.
fn tree_profiles(m: usize) -> Vec<Vec<usize>> {
    fn shapes(m: usize) -> Vec<Vec<usize>> {
        if m == 1 {
            return vec![vec![0]];
        }
        let mut out = Vec::new();
        for left in 1..m {
            for a in shapes(left) {
                for b in shapes(m - left) {
                    out.push(a.iter().chain(&b).map(|d| d + 1).collect());
                }
            }
        }
        out
    }
    let mut profiles: Vec<Vec<usize>> = shapes(m)
        .into_iter()
        .map(|mut p| {
            p.sort_unstable();
            p
        })
        .collect();
    profiles.sort();
    profiles.dedup();
    profiles
}

/// Minimum of `Σ w_i d_i` over all trees; heaviest weight on shallowest leaf.
fn brute_force_cost(weights: &[u64], profiles: &[Vec<usize>]) -> u128 {
    let mut sorted = weights.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    profiles
        .iter()
        .map(|p| p.iter().zip(&sorted).map(|(&d, &w)| d as u128 * u128::from(w)).sum())
        .min()
        .unwrap()
}

fn criterion_huffman() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let (mut trials, mut failures) = (0, 0);
    for m in 2..=6 {
        let profiles = tree_profiles(m);
        for trial in 0..HUFFMAN_TRIALS_PER_M {
            // Alternate small ranges (many ties) with wide ones.
            let hi = if trial % 2 == 0 { 6 } else { 1u64 << 32 };
            let weights: Vec<u64> = (0..m).map(|_| rng.gen_range(1..=hi)).collect();
            let entries =
                weights.iter().enumerate().map(|(i, &w)| (MelodyEvent::new(10 + i as u8).unwrap(), w)).collect();
            let pool = build_candidate_pool(&Distribution::new(entries).unwrap(), m).unwrap();
            let codes = build_huffman(&pool).codes();
            let cost: u128 = pool.entries().iter().zip(&codes).map(|(&(_, w), c)| u128::from(w) * c.len() as u128).sum();
            let max_len = codes.iter().map(Vec::len).max().unwrap();
            let kraft: u64 = codes.iter().map(|c| 1u64 << (max_len - c.len())).sum();
            let prefix_free = codes
                .iter()
                .enumerate()
                .all(|(i, a)| codes.iter().enumerate().all(|(j, b)| i == j || !b.starts_with(a)));
            trials += 1;
            if cost != brute_force_cost(&weights, &profiles) || kraft != 1 << max_len || !prefix_free {
                failures += 1;
                println!("  huffman mismatch: weights {weights:?}, codes {codes:?}");
            }
        }
    }
    outcome(failures == 0, format!("{}/{trials} pools optimal, prefix-free, Kraft sum 1", trials - failures))
}

// ---------------------------------------------------------------------------
// 6. Score sanity
// ---------------------------------------------------------------------------

/// p = 1/2 for two fixed symbols at every step.
struct HalfModel {
    starts: Vec<MelodyEvent>,
}

struct HalfSession;

impl ModelSession for HalfSession {
    fn observe(&mut self, _: MelodyEvent) -> Result<(), ModelError> {
        Ok(())
    }
    fn distribution(&mut self) -> Result<Distribution, ModelError> {
        Distribution::new(vec![(MelodyEvent::note_on(60).unwrap(), 1), (MelodyEvent::note_on(62).unwrap(), 1)])
    }
}

impl ConditionalModel for HalfModel {
    fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }
    fn start_notes(&self) -> &[MelodyEvent] {
        &self.starts
    }
    fn session(&self) -> Box<dyn ModelSession + '_> {
        Box::new(HalfSession)
    }
}

fn stego_melodies(model: &dyn ConditionalModel, cps: usize, rng: &mut ChaCha8Rng) -> Vec<MelodySequence> {
    (0..SCORE_MELODIES)
        .map(|_| {
            // Long enough that the first melody carries data throughout.
            let secret = eval::random_payload(rng, 160);
            let bundle = codec::embed(model, &StegoParams::new(cps, rng.next_u64()), &secret).unwrap();
            bundle.melodies.into_iter().next().unwrap()
        })
        .collect()
}

fn greedy_melodies(model: &dyn ConditionalModel, rng: &mut ChaCha8Rng) -> Vec<MelodySequence> {
    (0..SCORE_MELODIES)
        .map(|_| {
            let params = GenerationParams::new(model.start_notes().to_vec(), rng.next_u64());
            model::generate(model, &params, GenerationMode::Greedy).unwrap()
        })
        .collect()
}

fn criterion_score() -> Outcome {
    let models: [(&str, Box<dyn ConditionalModel>); 2] =
        [("n-gram", Box::new(ngram(1))), ("neural", Box::new(compact_neural(2)))];
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut pass = true;
    let mut cells = Vec::new();
    for (name, model) in &models {
        let greedy = eval::likelihood_score(model.as_ref(), &greedy_melodies(model.as_ref(), &mut rng)).unwrap().mean;
        cells.push(format!("{name} greedy {greedy:.3}"));
        for cps in SCORE_CPS {
            let stego =
                eval::likelihood_score(model.as_ref(), &stego_melodies(model.as_ref(), cps, &mut rng)).unwrap().mean;
            pass &= stego >= greedy;
            cells.push(format!("m={cps} {stego:.3}"));
        }
    }
    let half = HalfModel { starts: vec![MelodyEvent::note_on(60).unwrap()] };
    let seqs: Vec<MelodySequence> =
        (0..5).map(|i| MelodySequence::from_symbols(&[62, 62, 64, 62, 64, 64][..2 + i], 4).unwrap()).collect();
    let ln2 = eval::likelihood_score(&half, &seqs).unwrap().mean;
    let analytic = (ln2 - std::f64::consts::LN_2).abs() <= LN2_TOLERANCE;
    outcome(pass && analytic, format!("{}; score(p=1/2) = {ln2:.12}", cells.join(", ")))
}

// ---------------------------------------------------------------------------
// 7. MIDI round trip
// ---------------------------------------------------------------------------

fn criterion_midi() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut ok = 0;
    for _ in 0..MIDI_SEQUENCES {
        let spq = [1, 2, 3, 4, 8, 12, 24][rng.gen_range(0..7)];
        let len = rng.gen_range(1..=320);
        let mut symbols = vec![rng.gen_range(2..130u8)];
        symbols.extend((1..len).map(|_| rng.gen_range(0..130u8)));
        let melody = MelodySequence::from_symbols(&symbols, spq).unwrap();
        let bytes = midi::render_midi(&melody, rng.gen_range(40.0..200.0), rng.gen_range(0..128));
        let cfg = QuantizationConfig { steps_per_quarter: spq, ..QuantizationConfig::default() };
        match midi::parse_and_extract(&bytes, &cfg) {
            Ok(parsed) if parsed == [melody.clone()] => ok += 1,
            other => println!("  midi mismatch for {symbols:?}: {other:?}"),
        }
    }
    outcome(ok == MIDI_SEQUENCES, format!("{ok}/{MIDI_SEQUENCES} sequences identical after render and parse"))
}

// ---------------------------------------------------------------------------
// 8. Wrong key
// ---------------------------------------------------------------------------

fn criterion_negative_key() -> Outcome {
    let sender = ngram(1);
    let other = ngram(2);
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut tally: BTreeMap<&str, usize> = BTreeMap::new();
    for trial in 0..NEGATIVE_TRIALS {
        let len = rng.gen_range(1..=200);
        let secret = eval::random_payload(&mut rng, len);
        let cps = CPS_VALUES[rng.gen_range(0..CPS_VALUES.len())];
        let params = StegoParams::new(cps, rng.next_u64());
        let bundle = codec::embed(&sender, &params, &secret).unwrap();
        let (receiver, rparams): (&dyn ConditionalModel, StegoParams) = if trial % 2 == 0 {
            let wrong = loop {
                let c = CPS_VALUES[rng.gen_range(0..CPS_VALUES.len())];
                if c != cps {
                    break c;
                }
            };
            (&sender, StegoParams { cps: wrong, ..params.clone() })
        } else {
            (&other, params.clone())
        };
        let key = match codec::extract(receiver, &rparams, &bundle.melodies) {
            Err(CodecError::DesyncDetected { .. }) => "desync",
            Err(CodecError::TruncatedFrame { .. }) => "truncated",
            Err(_) => "other error",
            Ok(p) if 32 + p.len() * 8 != bundle.total_bits() => "header inconsistent",
            Ok(p) if p == secret => "correct",
            Ok(p) => {
                println!("  trial {trial}: wrong payload of {} bytes passed every check", p.len());
                "silent wrong"
            }
        };
        *tally.entry(key).or_default() += 1;
    }
    let detected: usize = ["desync", "truncated", "header inconsistent", "other error"]
        .iter()
        .map(|k| tally.get(k).copied().unwrap_or(0))
        .sum();
    let rate = detected as f64 / NEGATIVE_TRIALS as f64;
    let breakdown: Vec<String> = tally.iter().map(|(k, v)| format!("{k} {v}")).collect();
    outcome(rate >= NEGATIVE_MIN_DETECTED, format!("{:.1}% detected ({})", rate * 100.0, breakdown.join(", ")))
}

// ---------------------------------------------------------------------------
// 9. CLI determinism
// ---------------------------------------------------------------------------

fn cli(dir: &Path, args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_melstego"))
        .args(args)
        .current_dir(dir)
        .stdout(std::process::Stdio::null())
        .stderr(std::process::Stdio::null())
        .status()
        .expect("binary runs");
    assert!(status.success(), "melstego {args:?} failed");
}

fn tree_digest(dir: &Path) -> String {
    let mut hasher = Sha256::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.unwrap();
        let rel = entry.path().strip_prefix(dir).unwrap();
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update([0]);
        if entry.file_type().is_file() {
            hasher.update(std::fs::read(entry.path()).unwrap());
        }
        hasher.update([0xff]);
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn criterion_determinism() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let mut digests = Vec::new();
    for run in 0..DETERMINISM_RUNS {
        let dir = root.path().join(format!("run{run}"));
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("secret.bin"), (0..=255u8).cycle().take(700).collect::<Vec<u8>>()).unwrap();
        cli(&dir, &["init-neural", "--hidden", "8", "--att-hidden", "8", "--att-window", "8", "--seed", "5", "--out", "nn.bin"]);
        cli(&dir, &["gen", "--model", "nn.bin", "--count", "12", "--out", "corpus"]);
        cli(&dir, &["train", "--corpus", "corpus", "--out", "ng.bin"]);
        cli(&dir, &["embed", "--model", "ng.bin", "--cps", "8", "--seed", "9", "--in", "secret.bin", "--out", "bundle"]);
        cli(&dir, &["extract", "--model", "ng.bin", "--cps", "8", "--in", "bundle", "--out", "recovered.bin"]);
        cli(&dir, &["embed", "--model", "nn.bin", "--cps", "4", "--in", "secret.bin", "--out", "nbundle"]);
        cli(&dir, &["abx", "--model", "ng.bin", "--n-stego", "10", "--n-clean", "3", "--out", "abx"]);
        let recovered = std::fs::read(dir.join("recovered.bin")).unwrap();
        assert_eq!(recovered, std::fs::read(dir.join("secret.bin")).unwrap());
        digests.push(tree_digest(&dir));
    }
    let identical = digests.iter().filter(|d| **d == digests[0]).count();
    outcome(
        identical == DETERMINISM_RUNS,
        format!("{identical}/{DETERMINISM_RUNS} runs hash to {}", &digests[0][..16]),
    )
}

fn main() {
    // Quiet under `cargo test -- --list` and similar harness probes.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    // Optional criterion numbers select a subset.
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [Criterion; 9] = [
        ("round trip across models and pool sizes", criterion_round_trip),
        ("reference rate table arithmetic", criterion_table),
        ("one bit per data note at cps 2", criterion_cps2),
        ("mean bits per note within log2 m", criterion_capacity),
        ("huffman code optimal against exhaustive search", criterion_huffman),
        ("stego scores at least greedy scores", criterion_score),
        ("midi render and parse round trip", criterion_midi),
        ("wrong key is detected", criterion_negative_key),
        ("cli output trees are deterministic", criterion_determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        let start = Instant::now();
        let result = check();
        failed += usize::from(!result.pass);
        println!(
            "criterion {} {}: {name}: {} [{:.1}s]",
            i + 1,
            if result.pass { "PASS" } else { "FAIL" },
            result.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
