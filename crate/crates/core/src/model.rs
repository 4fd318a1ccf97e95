//! Conditional next-event distributions and the integer n-gram model.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::midi::{MelodyEvent, MelodySequence, VOCAB_SIZE};

/// Context filler for positions before the start of a melody.
pub const PAD: u8 = VOCAB_SIZE as u8;

pub const MODEL_MAGIC: &[u8; 4] = b"AAGM";
pub const MODEL_VERSION: u16 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("invalid model parameters: {0}")]
    InvalidParams(String),
    #[error("bad magic: not a model file")]
    BadMagic,
    #[error("unsupported model file version {0}")]
    VersionMismatch(u16),
    #[error("model file truncated")]
    TruncatedFile,
    #[error("corrupt model file: {0}")]
    Corrupt(String),
    #[error("context must contain at least the key note")]
    EmptyContext,
    #[error("symbol {0} outside the model vocabulary")]
    SymbolOutOfRange(u8),
    #[error("{0}")]
    Neural(String),
}

/// Unnormalized integer weights over symbols, sorted by descending weight and
/// then ascending symbol.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Distribution {
    entries: Vec<(MelodyEvent, u64)>,
}

impl Distribution {
    /// Sorts the entries into canonical order. Rejects zero weights,
    /// duplicate symbols and empty input.
    pub fn new(mut entries: Vec<(MelodyEvent, u64)>) -> Result<Self, ModelError> {
        if entries.is_empty() {
            return Err(ModelError::InvalidParams("distribution has no entries".into()));
        }
        if entries.iter().any(|&(_, w)| w == 0) {
            return Err(ModelError::InvalidParams("zero weight in distribution".into()));
        }
        let mut seen = [false; 256];
        for &(symbol, _) in &entries {
            if std::mem::replace(&mut seen[symbol.index()], true) {
                return Err(ModelError::InvalidParams("duplicate symbol in distribution".into()));
            }
        }
        // Symbols are unique, so an unstable sort is still canonical.
        entries.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(Self { entries })
    }

    /// Builds a distribution from one weight per vocabulary symbol.
    pub fn from_dense(weights: &[u64]) -> Result<Self, ModelError> {
        let entries = weights
            .iter()
            .enumerate()
            .map(|(s, &w)| {
                MelodyEvent::new(s as u8)
                    .map(|e| (e, w))
                    .ok_or(ModelError::SymbolOutOfRange(s as u8))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(entries)
    }

    /// Entries already in canonical order with positive, unique symbols.
    pub(crate) fn from_canonical(entries: Vec<(MelodyEvent, u64)>) -> Self {
        debug_assert!(entries.windows(2).all(|w| (w[0].1, w[1].0) > (w[1].1, w[0].0)));
        debug_assert!(entries.iter().all(|e| e.1 > 0));
        Self { entries }
    }

    pub fn entries(&self) -> &[(MelodyEvent, u64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_weight(&self) -> u128 {
        self.entries.iter().map(|&(_, w)| u128::from(w)).sum()
    }

    pub fn weight_of(&self, symbol: MelodyEvent) -> u64 {
        self.entries.iter().find(|e| e.0 == symbol).map_or(0, |e| e.1)
    }

    pub fn probability(&self, symbol: MelodyEvent) -> f64 {
        self.weight_of(symbol) as f64 / self.total_weight() as f64
    }

    pub fn argmax(&self) -> MelodyEvent {
        self.entries[0].0
    }
}

/// One incremental pass of a conditional model over a growing prefix.
pub trait ModelSession {
    fn observe(&mut self, event: MelodyEvent) -> Result<(), ModelError>;
    /// Distribution of the next event given everything observed so far.
    fn distribution(&mut self) -> Result<Distribution, ModelError>;
}

/// An autoregressive source of p(x_n | x_1 .. x_{n-1}).
pub trait ConditionalModel: Sync {
    fn vocab_size(&self) -> usize;
    /// Onsets eligible as the first note of a generated melody.
    fn start_notes(&self) -> &[MelodyEvent];
    fn session(&self) -> Box<dyn ModelSession + '_>;
}

/// Distribution after observing `prefix` from a fresh session.
pub fn predict_prefix(
    model: &dyn ConditionalModel,
    prefix: &[MelodyEvent],
) -> Result<Distribution, ModelError> {
    if prefix.is_empty() {
        return Err(ModelError::EmptyContext);
    }
    let mut session = model.session();
    for &e in prefix {
        session.observe(e)?;
    }
    session.distribution()
}

// ---------------------------------------------------------------------------
// N-gram model
// ---------------------------------------------------------------------------

/// Additive smoothing constant alpha = num / den.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Alpha {
    pub num: u32,
    pub den: u32,
}

impl Alpha {
    pub fn new(num: u32, den: u32) -> Result<Self, ModelError> {
        if num == 0 || den == 0 {
            return Err(ModelError::InvalidParams(format!("alpha {num}/{den} must be positive")));
        }
        Ok(Self { num, den })
    }

    /// Parses `N/D` or a plain decimal such as `0.1`.
    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let bad = || ModelError::InvalidParams(format!("cannot parse alpha '{text}'"));
        let text = text.trim();
        if let Some((n, d)) = text.split_once('/') {
            let n = n.trim().parse().map_err(|_| bad())?;
            let d = d.trim().parse().map_err(|_| bad())?;
            return Self::new(n, d);
        }
        let (int, frac) = text.split_once('.').unwrap_or((text, ""));
        if frac.len() > 9 || (int.is_empty() && frac.is_empty()) {
            return Err(bad());
        }
        let digits = format!("{int}{frac}");
        if !digits.chars().all(|c| c.is_ascii_digit()) {
            return Err(bad());
        }
        let num: u64 = digits.parse().map_err(|_| bad())?;
        let mut den = 10u64.pow(frac.len() as u32);
        let g = gcd(num, den);
        let num = num / g.max(1);
        den /= g.max(1);
        let num = u32::try_from(num).map_err(|_| bad())?;
        let den = u32::try_from(den).map_err(|_| bad())?;
        Self::new(num, den)
    }
}

impl Default for Alpha {
    fn default() -> Self {
        Self { num: 1, den: 10 }
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

pub const DEFAULT_ORDER: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NGramModel {
    order: usize,
    alpha: Alpha,
    /// Context (exactly `order - 1` symbols, PAD-filled) to per-symbol counts.
    counts: BTreeMap<Vec<u8>, BTreeMap<u8, u64>>,
    start_notes: Vec<MelodyEvent>,
}

impl NGramModel {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> Alpha {
        self.alpha
    }

    pub fn count(&self, context: &[u8], symbol: u8) -> u64 {
        self.counts.get(context).and_then(|c| c.get(&symbol)).copied().unwrap_or(0)
    }

    pub fn context_total(&self, context: &[u8]) -> u64 {
        self.counts.get(context).map_or(0, |c| c.values().sum())
    }

    pub fn contexts(&self) -> impl Iterator<Item = &[u8]> {
        self.counts.keys().map(Vec::as_slice)
    }

    /// Left-pads or truncates `history` to the model's context key.
    fn context_key(&self, history: &[MelodyEvent]) -> Vec<u8> {
        let width = self.order - 1;
        let take = history.len().min(width);
        let mut key = vec![PAD; width - take];
        key.extend(history[history.len() - take..].iter().map(|e| e.symbol()));
        key
    }

    fn weights_for_key(&self, key: &[u8]) -> Distribution {
        let floor = u64::from(self.alpha.num);
        let den = u64::from(self.alpha.den);
        let Some(row) = self.counts.get(key) else {
            let entries = (0..VOCAB_SIZE as u8).map(|s| (MelodyEvent(s), floor)).collect();
            return Distribution::from_canonical(entries);
        };
        // Every observed symbol outweighs every unobserved one, and the
        // unobserved ones tie, so only the observed part needs sorting.
        let mut entries: Vec<(MelodyEvent, u64)> = Vec::with_capacity(VOCAB_SIZE);
        let mut observed = [false; VOCAB_SIZE];
        for (&s, &c) in row {
            observed[s as usize] = true;
            entries.push((MelodyEvent(s), c.saturating_mul(den).saturating_add(floor)));
        }
        entries.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        entries.extend((0..VOCAB_SIZE as u8).filter(|&s| !observed[s as usize]).map(|s| (MelodyEvent(s), floor)));
        Distribution::from_canonical(entries)
    }

    /// Smoothed distribution given the events so far.
    pub fn predict(&self, context: &[MelodyEvent]) -> Result<Distribution, ModelError> {
        if context.is_empty() {
            return Err(ModelError::EmptyContext);
        }
        Ok(self.weights_for_key(&self.context_key(context)))
    }
}

/// Counts every window of `order` events, left-padded, over every melody.
pub fn train_ngram(
    corpus: &[MelodySequence],
    order: usize,
    alpha: Alpha,
) -> Result<NGramModel, ModelError> {
    if corpus.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    if order == 0 {
        return Err(ModelError::InvalidParams("order must be at least 1".into()));
    }
    let alpha = Alpha::new(alpha.num, alpha.den)?;
    let width = order - 1;
    let mut counts: BTreeMap<Vec<u8>, BTreeMap<u8, u64>> = BTreeMap::new();
    let mut starts = BTreeSet::new();
    for melody in corpus {
        starts.insert(melody.key());
        let mut padded = vec![PAD; width];
        padded.extend(melody.events().iter().map(|e| e.symbol()));
        for window in padded.windows(order) {
            let (context, target) = window.split_at(width);
            *counts.entry(context.to_vec()).or_default().entry(target[0]).or_insert(0) += 1;
        }
    }
    Ok(NGramModel { order, alpha, counts, start_notes: starts.into_iter().collect() })
}

struct NGramSession<'a> {
    model: &'a NGramModel,
    history: Vec<MelodyEvent>,
}

impl ModelSession for NGramSession<'_> {
    fn observe(&mut self, event: MelodyEvent) -> Result<(), ModelError> {
        self.history.push(event);
        let keep = (self.model.order - 1).max(1);
        if self.history.len() > keep + 64 {
            let cut = self.history.len() - keep;
            self.history.drain(..cut);
        }
        Ok(())
    }

    fn distribution(&mut self) -> Result<Distribution, ModelError> {
        self.model.predict(&self.history)
    }
}

impl ConditionalModel for NGramModel {
    fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    fn start_notes(&self) -> &[MelodyEvent] {
        &self.start_notes
    }

    fn session(&self) -> Box<dyn ModelSession + '_> {
        Box::new(NGramSession { model: self, history: Vec::new() })
    }
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GenerationMode {
    Greedy,
    Sampled,
}

#[derive(Clone, Debug)]
pub struct GenerationParams {
    pub max_events: usize,
    pub seed: u64,
    pub start_notes: Vec<MelodyEvent>,
    pub steps_per_quarter: u32,
}

impl GenerationParams {
    pub fn new(start_notes: Vec<MelodyEvent>, seed: u64) -> Self {
        Self { max_events: 160, seed, start_notes, steps_per_quarter: 4 }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.max_events == 0 {
            return Err(ModelError::InvalidParams("max_events must be positive".into()));
        }
        if self.start_notes.is_empty() {
            return Err(ModelError::InvalidParams("no start notes".into()));
        }
        if let Some(bad) = self.start_notes.iter().find(|e| !e.is_note_on()) {
            return Err(ModelError::InvalidParams(format!("start note {bad:?} is not an onset")));
        }
        Ok(())
    }
}

/// Draws a symbol with probability proportional to its weight.
pub fn sample_distribution(dist: &Distribution, rng: &mut impl Rng) -> MelodyEvent {
    let total = dist.total_weight();
    let mut target = rng.gen_range(0..total);
    for &(symbol, weight) in dist.entries() {
        let w = u128::from(weight);
        if target < w {
            return symbol;
        }
        target -= w;
    }
    unreachable!("target below total weight")
}

pub fn generate(
    model: &dyn ConditionalModel,
    params: &GenerationParams,
    mode: GenerationMode,
) -> Result<MelodySequence, ModelError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let key = params.start_notes[rng.gen_range(0..params.start_notes.len())];
    let mut session = model.session();
    session.observe(key)?;
    let mut events = vec![key];
    while events.len() < params.max_events {
        let dist = session.distribution()?;
        let next = match mode {
            GenerationMode::Greedy => dist.argmax(),
            GenerationMode::Sampled => sample_distribution(&dist, &mut rng),
        };
        session.observe(next)?;
        events.push(next);
    }
    MelodySequence::new(events, params.steps_per_quarter)
        .map_err(|e| ModelError::InvalidParams(e.to_string()))
}

// ---------------------------------------------------------------------------
// Model file
// ---------------------------------------------------------------------------

pub(crate) struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.data.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    pub(crate) fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    pub(crate) fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    pub(crate) fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.pos == self.data.len()
    }
}

impl NGramModel {
    /// Canonical little-endian encoding.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.order as u32).to_le_bytes());
        out.extend_from_slice(&(VOCAB_SIZE as u32).to_le_bytes());
        out.extend_from_slice(&self.alpha.num.to_le_bytes());
        out.extend_from_slice(&self.alpha.den.to_le_bytes());
        out.extend_from_slice(&(self.start_notes.len() as u32).to_le_bytes());
        out.extend(self.start_notes.iter().map(|e| e.symbol()));
        out.extend_from_slice(&(self.counts.len() as u64).to_le_bytes());
        for (context, row) in &self.counts {
            out.extend_from_slice(context);
            out.extend_from_slice(&(row.len() as u32).to_le_bytes());
            for (&symbol, &count) in row {
                out.push(symbol);
                out.extend_from_slice(&count.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        use ModelError::{Corrupt, TruncatedFile};
        let mut r = ByteReader::new(bytes);
        if r.take(4).ok_or(TruncatedFile)? != MODEL_MAGIC {
            return Err(ModelError::BadMagic);
        }
        let version = r.u16().ok_or(TruncatedFile)?;
        if version != MODEL_VERSION {
            return Err(ModelError::VersionMismatch(version));
        }
        let order = r.u32().ok_or(TruncatedFile)? as usize;
        let vocab = r.u32().ok_or(TruncatedFile)? as usize;
        let alpha_num = r.u32().ok_or(TruncatedFile)?;
        let alpha_den = r.u32().ok_or(TruncatedFile)?;
        if order == 0 || order > 64 {
            return Err(Corrupt(format!("order {order}")));
        }
        if vocab != VOCAB_SIZE {
            return Err(Corrupt(format!("vocabulary size {vocab}")));
        }
        let alpha = Alpha::new(alpha_num, alpha_den).map_err(|e| Corrupt(e.to_string()))?;
        let n_starts = r.u32().ok_or(TruncatedFile)? as usize;
        let mut start_notes = Vec::with_capacity(n_starts.min(VOCAB_SIZE));
        for _ in 0..n_starts {
            let s = r.u8().ok_or(TruncatedFile)?;
            let e = MelodyEvent::new(s)
                .filter(|e| e.is_note_on())
                .ok_or_else(|| Corrupt(format!("start note {s}")))?;
            start_notes.push(e);
        }
        if start_notes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Corrupt("start notes not strictly ascending".into()));
        }
        let n_contexts = r.u64().ok_or(TruncatedFile)?;
        let mut counts = BTreeMap::new();
        let mut previous: Option<Vec<u8>> = None;
        for _ in 0..n_contexts {
            let context = r.take(order - 1).ok_or(TruncatedFile)?.to_vec();
            if context.iter().any(|&s| s as usize > VOCAB_SIZE) {
                return Err(Corrupt("context symbol out of range".into()));
            }
            if previous.as_ref().is_some_and(|p| p >= &context) {
                return Err(Corrupt("contexts not in canonical order".into()));
            }
            let n = r.u32().ok_or(TruncatedFile)? as usize;
            if n == 0 || n > VOCAB_SIZE {
                return Err(Corrupt(format!("row with {n} entries")));
            }
            let mut row = BTreeMap::new();
            let mut last: Option<u8> = None;
            for _ in 0..n {
                let s = r.u8().ok_or(TruncatedFile)?;
                let c = r.u64().ok_or(TruncatedFile)?;
                if s as usize >= VOCAB_SIZE || c == 0 || last.is_some_and(|l| l >= s) {
                    return Err(Corrupt("bad count entry".into()));
                }
                last = Some(s);
                row.insert(s, c);
            }
            previous = Some(context.clone());
            counts.insert(context, row);
        }
        if !r.is_empty() {
            return Err(Corrupt("trailing bytes".into()));
        }
        Ok(Self { order, alpha, counts, start_notes })
    }
}
