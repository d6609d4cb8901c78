//! Multi-dimensional Markov chain baseline: context-conditioned tile counts
//! with a fallback chain, used to fill only the masked cells.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{TileAlphabet, TileGrid};
use crate::dataset::{decode, Fragment, MaskRect};
use crate::models::{InpaintItem, Inpainter, ModelError};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum MarkovError {
    #[error("cannot fit a Markov model to an empty corpus")]
    EmptyCorpus,
    #[error("markov table does not match the alphabet: {0}")]
    AlphabetMismatch(String),
    #[error("unsupported markov table: {0}")]
    VersionMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed markov table: {0}")]
    Json(#[from] serde_json::Error),
}

/// Context value: a tile channel, or `None` for positions outside the grid.
pub type ContextCell = Option<u8>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenerationMode {
    Sample,
    Argmax,
}

/// Tile counts observed under one context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Distribution {
    pub counts: Vec<u64>,
    pub total: u64,
}

impl Distribution {
    fn new(depth: usize) -> Self {
        Self {
            counts: vec![0; depth],
            total: 0,
        }
    }

    fn add(&mut self, channel: usize) {
        self.counts[channel] += 1;
        self.total += 1;
    }

    pub fn probability(&self, channel: usize) -> f64 {
        self.counts[channel] as f64 / self.total as f64
    }

    /// Most frequent channel; ties go to the lowest channel.
    pub fn mode(&self) -> usize {
        let mut best = 0;
        for (i, &c) in self.counts.iter().enumerate() {
            if c > self.counts[best] {
                best = i;
            }
        }
        best
    }

    pub fn draw(&self, rng: &mut impl Rng) -> usize {
        let mut ticket = rng.gen_range(0..self.total);
        for (i, &c) in self.counts.iter().enumerate() {
            if ticket < c {
                return i;
            }
            ticket -= c;
        }
        unreachable!("ticket below total")
    }
}

/// Which table answered a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fallback {
    Full,
    Single(usize),
    Unigram,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkovModel {
    /// `(row delta, col delta)` of each context position; default left then below.
    offsets: Vec<(isize, isize)>,
    symbols: Vec<char>,
    alphabet_hash: String,
    full: BTreeMap<Vec<ContextCell>, Distribution>,
    single: Vec<BTreeMap<ContextCell, Distribution>>,
    unigram: Distribution,
}

/// Left neighbour, then the neighbour below.
pub const DEFAULT_OFFSETS: [(isize, isize); 2] = [(0, -1), (1, 0)];

fn context_at(grid: &TileGrid, alphabet: &TileAlphabet, row: usize, col: usize, offsets: &[(isize, isize)]) -> Vec<ContextCell> {
    offsets
        .iter()
        .map(|&(dr, dc)| {
            let r = row as isize + dr;
            let c = col as isize + dc;
            if r < 0 || c < 0 || r as usize >= grid.height() || c as usize >= grid.width() {
                None
            } else {
                alphabet.channel(grid.get(r as usize, c as usize)).map(|ch| ch as u8)
            }
        })
        .collect()
}

impl MarkovModel {
    /// Counts every cell of every grid under each context.
    pub fn fit(grids: &[&TileGrid], alphabet: &TileAlphabet, offsets: &[(isize, isize)]) -> Result<Self, MarkovError> {
        if grids.iter().all(|g| g.height() * g.width() == 0) {
            return Err(MarkovError::EmptyCorpus);
        }
        let depth = alphabet.depth();
        let mut model = Self {
            offsets: offsets.to_vec(),
            symbols: (0..depth).map(|c| alphabet.symbol(c).expect("channel")).collect(),
            alphabet_hash: alphabet.hash(),
            full: BTreeMap::new(),
            single: vec![BTreeMap::new(); offsets.len()],
            unigram: Distribution::new(depth),
        };
        for g in grids {
            for r in 0..g.height() {
                for c in 0..g.width() {
                    let Some(tile) = alphabet.channel(g.get(r, c)) else {
                        continue;
                    };
                    let ctx = context_at(g, alphabet, r, c, offsets);
                    for (k, &cell) in ctx.iter().enumerate() {
                        model.single[k].entry(cell).or_insert_with(|| Distribution::new(depth)).add(tile);
                    }
                    model.full.entry(ctx).or_insert_with(|| Distribution::new(depth)).add(tile);
                    model.unigram.add(tile);
                }
            }
        }
        if model.unigram.total == 0 {
            return Err(MarkovError::EmptyCorpus);
        }
        Ok(model)
    }

    pub fn offsets(&self) -> &[(isize, isize)] {
        &self.offsets
    }

    pub fn unigram(&self) -> &Distribution {
        &self.unigram
    }

    pub fn full_table(&self) -> &BTreeMap<Vec<ContextCell>, Distribution> {
        &self.full
    }

    pub fn single_table(&self, k: usize) -> &BTreeMap<ContextCell, Distribution> {
        &self.single[k]
    }

    /// Walks full context, then each single position in order, then the unigram.
    pub fn lookup(&self, ctx: &[ContextCell]) -> (&Distribution, Fallback) {
        if let Some(d) = self.full.get(ctx) {
            return (d, Fallback::Full);
        }
        for (k, &cell) in ctx.iter().enumerate() {
            if let Some(d) = self.single[k].get(&cell) {
                return (d, Fallback::Single(k));
            }
        }
        (&self.unigram, Fallback::Unigram)
    }

    pub fn symbol(&self, channel: usize) -> char {
        self.symbols[channel]
    }

    /// Generates the mask cells bottom row first, left to right within a row,
    /// so that left and below context is always resolved. Context positions
    /// inside the mask that are not generated yet read as out-of-grid.
    pub fn fill_mask(
        &self,
        grid: &TileGrid,
        alphabet: &TileAlphabet,
        mask: &MaskRect,
        seed: u64,
        mode: GenerationMode,
    ) -> Result<Fragment, ModelError> {
        if !mask.fits(grid.height(), grid.width()) {
            return Err(ModelError::MaskOutOfBounds(*mask));
        }
        let mut work = grid.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pending: HashSet<(usize, usize)> = mask.cells().collect();
        for r in (mask.row..mask.row + mask.height).rev() {
            for c in mask.col..mask.col + mask.width {
                let mut ctx = context_at(&work, alphabet, r, c, &self.offsets);
                for (k, &(dr, dc)) in self.offsets.iter().enumerate() {
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if nr >= 0 && nc >= 0 && pending.contains(&(nr as usize, nc as usize)) {
                        ctx[k] = None;
                    }
                }
                let (dist, _) = self.lookup(&ctx);
                let ch = match mode {
                    GenerationMode::Argmax => dist.mode(),
                    GenerationMode::Sample => dist.draw(&mut rng),
                };
                work.set(r, c, self.symbols[ch]);
                pending.remove(&(r, c));
            }
        }
        Ok(Fragment::from_grid(&work, mask))
    }

    pub fn to_file(&self) -> MarkovFile {
        let sym = |c: ContextCell| c.map(|ch| self.symbols[ch as usize]);
        let counts = |d: &Distribution| -> BTreeMap<char, u64> {
            d.counts
                .iter()
                .enumerate()
                .filter(|(_, &n)| n > 0)
                .map(|(i, &n)| (self.symbols[i], n))
                .collect()
        };
        MarkovFile {
            format: MarkovFile::FORMAT.into(),
            version: MarkovFile::VERSION,
            alphabet_hash: self.alphabet_hash.clone(),
            symbols: self.symbols.iter().collect(),
            offsets: self.offsets.clone(),
            full: self
                .full
                .iter()
                .map(|(ctx, d)| TableEntry {
                    context: ctx.iter().map(|&c| sym(c)).collect(),
                    counts: counts(d),
                })
                .collect(),
            single: self
                .single
                .iter()
                .map(|t| {
                    t.iter()
                        .map(|(&c, d)| TableEntry {
                            context: vec![sym(c)],
                            counts: counts(d),
                        })
                        .collect()
                })
                .collect(),
            unigram: counts(&self.unigram),
        }
    }

    pub fn from_file(file: &MarkovFile, alphabet: &TileAlphabet) -> Result<Self, MarkovError> {
        if file.format != MarkovFile::FORMAT || file.version != MarkovFile::VERSION {
            return Err(MarkovError::VersionMismatch(format!("{} v{}", file.format, file.version)));
        }
        if file.alphabet_hash != alphabet.hash() {
            return Err(MarkovError::AlphabetMismatch("alphabet hash differs".into()));
        }
        let depth = alphabet.depth();
        let channel = |s: char| {
            alphabet
                .channel(s)
                .ok_or_else(|| MarkovError::AlphabetMismatch(format!("symbol {s:?} not in alphabet")))
        };
        let ctx_cell = |s: &Option<char>| -> Result<ContextCell, MarkovError> {
            s.map(|s| channel(s).map(|c| c as u8)).transpose()
        };
        let dist = |m: &BTreeMap<char, u64>| -> Result<Distribution, MarkovError> {
            let mut d = Distribution::new(depth);
            for (&s, &n) in m {
                d.counts[channel(s)?] += n;
                d.total += n;
            }
            Ok(d)
        };
        let mut full = BTreeMap::new();
        for e in &file.full {
            let ctx = e.context.iter().map(&ctx_cell).collect::<Result<Vec<_>, _>>()?;
            full.insert(ctx, dist(&e.counts)?);
        }
        let mut single = Vec::new();
        for t in &file.single {
            let mut m = BTreeMap::new();
            for e in t {
                let c = e.context.first().map(&ctx_cell).transpose()?.flatten();
                m.insert(c, dist(&e.counts)?);
            }
            single.push(m);
        }
        if single.len() != file.offsets.len() {
            return Err(MarkovError::VersionMismatch("one single-context table per offset expected".into()));
        }
        let unigram = dist(&file.unigram)?;
        if unigram.total == 0 {
            return Err(MarkovError::EmptyCorpus);
        }
        Ok(Self {
            offsets: file.offsets.clone(),
            symbols: (0..depth).map(|c| alphabet.symbol(c).expect("channel")).collect(),
            alphabet_hash: file.alphabet_hash.clone(),
            full,
            single,
            unigram,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), MarkovError> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_file())?)?;
        Ok(())
    }

    pub fn load(path: &Path, alphabet: &TileAlphabet) -> Result<Self, MarkovError> {
        let file: MarkovFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_file(&file, alphabet)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableEntry {
    /// Context symbols; `null` marks out-of-grid positions.
    pub context: Vec<Option<char>>,
    pub counts: BTreeMap<char, u64>,
}

/// Serialized count tables.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkovFile {
    pub format: String,
    pub version: u32,
    pub alphabet_hash: String,
    pub symbols: String,
    pub offsets: Vec<(isize, isize)>,
    pub full: Vec<TableEntry>,
    pub single: Vec<Vec<TableEntry>>,
    pub unigram: BTreeMap<char, u64>,
}

impl MarkovFile {
    pub const FORMAT: &'static str = "level-inpaint-markov";
    pub const VERSION: u32 = 1;
}

/// The Markov chain as an [`Inpainter`], sampling or taking the mode.
#[derive(Debug, Clone)]
pub struct MarkovInpainter {
    pub id: String,
    pub model: MarkovModel,
    pub alphabet: TileAlphabet,
    pub mode: GenerationMode,
}

impl<T: Scalar> Inpainter<T> for MarkovInpainter {
    fn id(&self) -> &str {
        &self.id
    }

    fn inpaint_items(&self, items: &[InpaintItem<'_, T>]) -> Result<Vec<Fragment>, ModelError> {
        items
            .iter()
            .map(|it| {
                let grid = decode(it.input, &self.alphabet).map_err(|e| {
                    ModelError::BadConfig(format!("cannot decode masked input: {e}"))
                })?;
                self.model.fill_mask(&grid, &self.alphabet, &it.mask, it.seed, self.mode)
            })
            .collect()
    }
}
