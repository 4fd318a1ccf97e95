//! Payload framing, candidate pools, Huffman coding and the embed/extract
//! pair.
//!
//! At every data-bearing step the sender takes the `cps` most likely next
//! events, builds a Huffman tree over their weights and walks it with payload
//! bits (0 = left, 1 = right). The receiver replays the model over the
//! received melody, rebuilds the same tree and reads each emitted event's
//! code word back. The first event of every melody is a key note and carries
//! no payload.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::midi::{MelodyEvent, MelodySequence};
use crate::model::{ConditionalModel, Distribution, ModelError};

pub type Bits = Vec<bool>;

const HEADER_BITS: usize = 32;
/// Largest payload whose bit count fits the 32-bit header.
pub const MAX_PAYLOAD_BYTES: usize = (1 << 29) - 1;
/// The greedy tail after the payload pads melodies to a multiple of this.
pub const BAR_EVENTS: usize = 16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("payload of {0} bytes is too large to frame")]
    PayloadTooLarge(usize),
    #[error("truncated frame: need {needed} bits, have {available}")]
    TruncatedFrame { needed: usize, available: usize },
    #[error("frame length {0} is not a whole number of bytes")]
    NonByteAlignedLength(usize),
    #[error("candidate pool of {requested} requested from {available} entries")]
    PoolTooSmall { requested: usize, available: usize },
    #[error("invalid codec parameters: {0}")]
    InvalidParams(String),
    #[error("desync detected: melody {melody}, event {position}: {symbol:?} is not in the candidate pool")]
    DesyncDetected { melody: usize, position: usize, symbol: MelodyEvent },
    #[error("melody {0} does not start with a key note")]
    MissingKey(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

// ---------------------------------------------------------------------------
// Framing
// ---------------------------------------------------------------------------

/// 32-bit big-endian bit count followed by the payload, MSB first.
pub fn frame_payload(secret: &[u8]) -> Result<Bits, CodecError> {
    check_payload_len(secret.len())?;
    let bit_len = (secret.len() * 8) as u32;
    let mut bits = Vec::with_capacity(HEADER_BITS + secret.len() * 8);
    push_bits_msb(&mut bits, &bit_len.to_be_bytes());
    push_bits_msb(&mut bits, secret);
    Ok(bits)
}

fn check_payload_len(len: usize) -> Result<(), CodecError> {
    if len > MAX_PAYLOAD_BYTES {
        return Err(CodecError::PayloadTooLarge(len));
    }
    Ok(())
}

fn push_bits_msb(bits: &mut Bits, bytes: &[u8]) {
    for &byte in bytes {
        bits.extend((0..8).rev().map(|i| byte >> i & 1 == 1));
    }
}

/// Bits beyond the header's length are ignored.
pub fn unframe_payload(bits: &[bool]) -> Result<Vec<u8>, CodecError> {
    if bits.len() < HEADER_BITS {
        return Err(CodecError::TruncatedFrame { needed: HEADER_BITS, available: bits.len() });
    }
    let len = frame_length(bits).expect("header present");
    let body = &bits[HEADER_BITS..];
    if len > body.len() {
        return Err(CodecError::TruncatedFrame { needed: HEADER_BITS + len, available: bits.len() });
    }
    if !len.is_multiple_of(8) {
        return Err(CodecError::NonByteAlignedLength(len));
    }
    Ok(body[..len]
        .chunks(8)
        .map(|byte| byte.iter().fold(0u8, |acc, &b| acc << 1 | u8::from(b)))
        .collect())
}

/// Body length announced by the header, if the header is complete.
pub fn frame_length(bits: &[bool]) -> Option<usize> {
    (bits.len() >= HEADER_BITS)
        .then(|| bits[..HEADER_BITS].iter().fold(0u32, |acc, &b| acc << 1 | u32::from(b)) as usize)
}

// ---------------------------------------------------------------------------
// Candidate pool and Huffman code
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidatePool {
    entries: Vec<(MelodyEvent, u64)>,
}

impl CandidatePool {
    pub fn entries(&self) -> &[(MelodyEvent, u64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn rank_of(&self, symbol: MelodyEvent) -> Option<usize> {
        self.entries.iter().position(|e| e.0 == symbol)
    }

    pub fn symbol(&self, rank: usize) -> MelodyEvent {
        self.entries[rank].0
    }
}

/// The `m` heaviest entries, in distribution order.
pub fn build_candidate_pool(dist: &Distribution, m: usize) -> Result<CandidatePool, CodecError> {
    if m < 2 || m > dist.len() {
        return Err(CodecError::PoolTooSmall { requested: m, available: dist.len() });
    }
    Ok(CandidatePool { entries: dist.entries()[..m].to_vec() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Node {
    Leaf(usize),
    Internal { left: usize, right: usize },
}

/// Prefix code over pool ranks. Leaves occupy node indices `0..m`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HuffmanCode {
    nodes: Vec<Node>,
    /// Parent index and edge bit of every non-root node.
    parents: Vec<(usize, bool)>,
    root: usize,
}

impl HuffmanCode {
    pub fn len(&self) -> usize {
        self.nodes.len().div_ceil(2)
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Code word of pool rank `rank`.
    pub fn code(&self, rank: usize) -> Bits {
        let mut bits = Bits::new();
        let mut node = rank;
        while node != self.root {
            let (parent, bit) = self.parents[node];
            bits.push(bit);
            node = parent;
        }
        bits.reverse();
        bits
    }

    pub fn code_len(&self, rank: usize) -> usize {
        let (mut node, mut len) = (rank, 0);
        while node != self.root {
            node = self.parents[node].0;
            len += 1;
        }
        len
    }

    pub fn codes(&self) -> Vec<Bits> {
        (0..self.len()).map(|r| self.code(r)).collect()
    }

    /// Walks from the root, pulling one bit per edge until a leaf.
    pub fn decode_with(&self, mut next_bit: impl FnMut() -> bool) -> usize {
        let mut node = self.root;
        loop {
            match self.nodes[node] {
                Node::Leaf(rank) => return rank,
                Node::Internal { left, right } => node = if next_bit() { right } else { left },
            }
        }
    }
}

/// Huffman merge with a total order: nodes keyed by (weight, rank) ascending,
/// a merged node takes the smaller child rank, and the first of the two popped
/// nodes becomes the left (0) child.
pub fn build_huffman(pool: &CandidatePool) -> HuffmanCode {
    let m = pool.len();
    assert!((2..=256).contains(&m), "pool must hold between 2 and 256 candidates");
    let mut nodes: Vec<Node> = Vec::with_capacity(2 * m - 1);
    nodes.extend((0..m).map(Node::Leaf));
    let mut parents = vec![(0, false); 2 * m - 1];
    // Key layout: weight | rank (8 bits) | node (9 bits). Weights are u64,
    // so even a sum over 256 of them stays below 2^72.
    let key = |w: u128, rank: usize, node: usize| w << 17 | (rank as u128) << 9 | node as u128;
    let mut heap: BinaryHeap<Reverse<u128>> = pool
        .entries()
        .iter()
        .enumerate()
        .map(|(rank, &(_, w))| Reverse(key(u128::from(w), rank, rank)))
        .collect();
    while heap.len() > 1 {
        let Reverse(a) = heap.pop().unwrap();
        let Reverse(b) = heap.pop().unwrap();
        let (left, right) = ((a & 0x1ff) as usize, (b & 0x1ff) as usize);
        let rank = ((a >> 9) & 0xff).min((b >> 9) & 0xff) as usize;
        let id = nodes.len();
        nodes.push(Node::Internal { left, right });
        parents[left] = (id, false);
        parents[right] = (id, true);
        heap.push(Reverse(key((a >> 17) + (b >> 17), rank, id)));
    }
    let root = (heap.pop().unwrap().0 & 0x1ff) as usize;
    HuffmanCode { nodes, parents, root }
}

// ---------------------------------------------------------------------------
// Embedding and extraction
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StegoParams {
    pub cps: usize,
    pub seed: u64,
    pub max_events_per_melody: usize,
    pub steps_per_quarter: u32,
}

impl StegoParams {
    pub fn new(cps: usize, seed: u64) -> Self {
        Self { cps, seed, max_events_per_melody: 160, steps_per_quarter: 4 }
    }

    pub fn validate(&self, model: &dyn ConditionalModel) -> Result<(), CodecError> {
        if self.cps < 2 || self.cps > model.vocab_size() {
            return Err(CodecError::InvalidParams(format!(
                "cps {} outside [2, {}]",
                self.cps,
                model.vocab_size()
            )));
        }
        if self.max_events_per_melody < 2 {
            return Err(CodecError::InvalidParams("melodies need room for at least one data note".into()));
        }
        if self.steps_per_quarter == 0 {
            return Err(CodecError::InvalidParams("steps_per_quarter must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MelodyStats {
    /// Frame bits carried by this melody, excluding zero padding.
    pub embedded_bits: usize,
    /// Notes that consumed at least one frame bit.
    pub data_notes: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StegoBundle {
    pub melodies: Vec<MelodySequence>,
    pub cps: usize,
    pub max_events_per_melody: usize,
    pub stats: Vec<MelodyStats>,
}

impl StegoBundle {
    pub fn total_bits(&self) -> usize {
        self.stats.iter().map(|s| s.embedded_bits).sum()
    }
}

/// Hides `secret` in one or more generated melodies.
pub fn embed(
    model: &dyn ConditionalModel,
    params: &StegoParams,
    secret: &[u8],
) -> Result<StegoBundle, CodecError> {
    params.validate(model)?;
    let starts = model.start_notes();
    if starts.is_empty() {
        return Err(CodecError::InvalidParams("model has no start notes".into()));
    }
    let frame = frame_payload(secret)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut pos = 0;
    let mut melodies = Vec::new();
    let mut stats = Vec::new();

    while pos < frame.len() {
        let key = starts[rng.gen_range(0..starts.len())];
        let mut session = model.session();
        session.observe(key)?;
        let mut events = vec![key];
        let mut stat = MelodyStats::default();
        while events.len() < params.max_events_per_melody && pos < frame.len() {
            let pool = build_candidate_pool(&session.distribution()?, params.cps)?;
            let code = build_huffman(&pool);
            let before = pos;
            let rank = code.decode_with(|| {
                let bit = frame.get(pos).copied().unwrap_or(false);
                pos += 1;
                bit
            });
            pos = pos.min(frame.len());
            stat.embedded_bits += pos - before;
            stat.data_notes += 1;
            let symbol = pool.symbol(rank);
            session.observe(symbol)?;
            events.push(symbol);
        }
        if pos >= frame.len() {
            while events.len() % BAR_EVENTS != 0 && events.len() < params.max_events_per_melody {
                let next = session.distribution()?.argmax();
                session.observe(next)?;
                events.push(next);
            }
        }
        let melody = MelodySequence::new(events, params.steps_per_quarter)
            .map_err(|e| CodecError::InvalidParams(e.to_string()))?;
        melodies.push(melody);
        stats.push(stat);
    }
    Ok(StegoBundle {
        melodies,
        cps: params.cps,
        max_events_per_melody: params.max_events_per_melody,
        stats,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Extraction {
    pub payload: Vec<u8>,
    /// Frame bits attributed to each melody, padding excluded.
    pub frame_bits_per_melody: Vec<usize>,
    pub data_notes_per_melody: Vec<usize>,
}

/// Reads every melody's code words back into the raw bit stream.
pub fn decode_bits(
    model: &dyn ConditionalModel,
    params: &StegoParams,
    melodies: &[MelodySequence],
) -> Result<Vec<Bits>, CodecError> {
    params.validate(model)?;
    let mut out = Vec::with_capacity(melodies.len());
    for (index, melody) in melodies.iter().enumerate() {
        let events = melody.events();
        if !events[0].is_note_on() {
            return Err(CodecError::MissingKey(index));
        }
        let mut session = model.session();
        session.observe(events[0])?;
        let mut bits = Bits::new();
        for (position, &symbol) in events.iter().enumerate().skip(1) {
            let pool = build_candidate_pool(&session.distribution()?, params.cps)?;
            let rank = pool.rank_of(symbol).ok_or(CodecError::DesyncDetected {
                melody: index,
                position,
                symbol,
            })?;
            bits.extend(build_huffman(&pool).code(rank));
            session.observe(symbol)?;
        }
        out.push(bits);
    }
    Ok(out)
}

pub fn extract_detailed(
    model: &dyn ConditionalModel,
    params: &StegoParams,
    melodies: &[MelodySequence],
) -> Result<Extraction, CodecError> {
    let per_melody = decode_bits(model, params, melodies)?;
    let stream: Bits = per_melody.iter().flatten().copied().collect();
    let payload = unframe_payload(&stream)?;
    let frame_len = HEADER_BITS + payload.len() * 8;
    let mut consumed = 0;
    let mut frame_bits_per_melody = Vec::with_capacity(per_melody.len());
    for bits in &per_melody {
        let take = bits.len().min(frame_len - consumed);
        frame_bits_per_melody.push(take);
        consumed += take;
    }
    // Data notes are recomputed by replaying code lengths against the frame.
    let data_notes_per_melody = count_data_notes(model, params, melodies, &frame_bits_per_melody)?;
    Ok(Extraction { payload, frame_bits_per_melody, data_notes_per_melody })
}

fn count_data_notes(
    model: &dyn ConditionalModel,
    params: &StegoParams,
    melodies: &[MelodySequence],
    frame_bits: &[usize],
) -> Result<Vec<usize>, CodecError> {
    let mut out = Vec::with_capacity(melodies.len());
    for (melody, &budget) in melodies.iter().zip(frame_bits) {
        let events = melody.events();
        let mut session = model.session();
        session.observe(events[0])?;
        let (mut used, mut notes) = (0, 0);
        for &symbol in &events[1..] {
            if used >= budget {
                break;
            }
            let pool = build_candidate_pool(&session.distribution()?, params.cps)?;
            let rank = pool.rank_of(symbol).expect("decode_bits already validated the melody");
            used += build_huffman(&pool).code_len(rank);
            notes += 1;
            session.observe(symbol)?;
        }
        out.push(notes);
    }
    Ok(out)
}

/// Recovers the secret hidden by [`embed`] with the same model and `cps`.
pub fn extract(
    model: &dyn ConditionalModel,
    params: &StegoParams,
    melodies: &[MelodySequence],
) -> Result<Vec<u8>, CodecError> {
    let stream: Bits = decode_bits(model, params, melodies)?.into_iter().flatten().collect();
    unframe_payload(&stream)
}
