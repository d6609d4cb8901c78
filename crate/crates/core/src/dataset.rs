//! One-hot encoding, 16-wide windows and bottom-anchored masked samples.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, CorpusSplit, Level, SplitRole, TileAlphabet, TileGrid, LEVEL_HEIGHT};
use crate::netcore::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("volume depth {found} does not match alphabet size {expected}")]
    DepthMismatch { expected: usize, found: usize },
    #[error("level {id} is {width} tiles wide, narrower than a {window}-wide window")]
    LevelTooNarrow { id: String, width: usize, window: usize },
    #[error("level {id} is {height} rows tall, windows need {expected}")]
    WrongHeight { id: String, height: usize, expected: usize },
    #[error("window cell ({row},{col}) is not one-hot")]
    NotOneHot { row: usize, col: usize },
    #[error("invalid dataset config: {0}")]
    BadConfig(String),
    #[error("split has no levels")]
    EmptySplit,
    #[error("dataset cache is stale: {0}")]
    StaleCache(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset cache: {0}")]
    Json(#[from] serde_json::Error),
}

/// `height x width x depth` one-hot volume, row-major with depth fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedVolume<T> {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> EncodedVolume<T> {
    pub fn zeros(height: usize, width: usize, depth: usize) -> Self {
        Self {
            height,
            width,
            depth,
            values: vec![T::zero(); height * width * depth],
        }
    }

    pub fn cell(&self, row: usize, col: usize) -> &[T] {
        let start = (row * self.width + col) * self.depth;
        &self.values[start..start + self.depth]
    }

    pub fn cell_mut(&mut self, row: usize, col: usize) -> &mut [T] {
        let start = (row * self.width + col) * self.depth;
        &mut self.values[start..start + self.depth]
    }

    /// Columns `col..col + width`.
    pub fn columns(&self, col: usize, width: usize) -> Self {
        let mut out = Self::zeros(self.height, width, self.depth);
        let stride = self.depth;
        for r in 0..self.height {
            let src = (r * self.width + col) * stride;
            let dst = r * width * stride;
            out.values[dst..dst + width * stride].copy_from_slice(&self.values[src..src + width * stride]);
        }
        out
    }

    /// Zeroes every channel of the cells under `mask`.
    pub fn erase(&mut self, mask: &MaskRect) {
        for r in mask.row..mask.row + mask.height {
            for c in mask.col..mask.col + mask.width {
                self.cell_mut(r, c).fill(T::zero());
            }
        }
    }

    /// `[H, W, D]` tensor view of the values.
    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(vec![self.height, self.width, self.depth], self.values.clone()).expect("consistent volume")
    }

    pub fn from_tensor(t: &Tensor<T>) -> Option<Self> {
        match *t.shape() {
            [h, w, d] | [1, h, w, d] => Some(Self {
                height: h,
                width: w,
                depth: d,
                values: t.data().to_vec(),
            }),
            _ => None,
        }
    }

    pub fn is_one_hot_cell(&self, row: usize, col: usize) -> bool {
        let cell = self.cell(row, col);
        let ones = cell.iter().filter(|&&v| v == T::one()).count();
        ones == 1 && cell.iter().all(|&v| v == T::one() || v == T::zero())
    }

    pub fn is_zero_cell(&self, row: usize, col: usize) -> bool {
        self.cell(row, col).iter().all(|&v| v == T::zero())
    }
}

/// Rectangle of cells to erase and predict; `(row, col)` is the top-left cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskRect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl MaskRect {
    pub fn new(row: usize, col: usize, height: usize, width: usize) -> Self {
        Self { row, col, height, width }
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row..self.row + self.height).contains(&row) && (self.col..self.col + self.width).contains(&col)
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.height > 0 && self.width > 0 && self.row + self.height <= height && self.col + self.width <= width
    }

    pub fn overlaps(&self, other: &MaskRect) -> bool {
        self.row < other.row + other.height
            && other.row < self.row + self.height
            && self.col < other.col + other.width
            && other.col < self.col + self.width
    }

    /// Cells in generation-independent row-major order.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.row..self.row + self.height).flat_map(move |r| (self.col..self.col + self.width).map(move |c| (r, c)))
    }
}

/// Tiles predicted for (or read from) the cells of a mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fragment {
    pub mask: MaskRect,
    pub cells: Vec<char>,
}

impl Fragment {
    pub fn from_grid(grid: &TileGrid, mask: &MaskRect) -> Self {
        Self {
            mask: *mask,
            cells: mask.cells().map(|(r, c)| grid.get(r, c)).collect(),
        }
    }

    /// Symbol at absolute cell `(row, col)`, which must lie inside the mask.
    pub fn get(&self, row: usize, col: usize) -> char {
        assert!(self.mask.contains(row, col), "({row},{col}) outside fragment");
        self.cells[(row - self.mask.row) * self.mask.width + (col - self.mask.col)]
    }

    /// `(row, col, symbol)` triples in absolute coordinates.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, char)> + '_ {
        self.mask.cells().zip(&self.cells).map(|((r, c), &s)| (r, c, s))
    }

    /// Writes the fragment into `grid`, shifted by `(row_off, col_off)`.
    pub fn write_into(&self, grid: &mut TileGrid, row_off: usize, col_off: usize) {
        for (r, c, s) in self.iter() {
            grid.set(r + row_off, c + col_off, s);
        }
    }
}

/// Window and mask geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub window_width: usize,
    pub stride: usize,
    pub mask_height: usize,
    pub mask_width: usize,
    /// Masks are placed at columns `0..mask_positions` along the window bottom.
    pub mask_positions: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            window_width: 16,
            stride: 16,
            mask_height: 4,
            mask_width: 5,
            mask_positions: 11,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::BadConfig(m));
        if self.stride == 0 || self.window_width == 0 {
            return bad("stride and window width must be positive".into());
        }
        if self.mask_height == 0 || self.mask_height > LEVEL_HEIGHT || self.mask_width == 0 {
            return bad(format!("mask {}x{} does not fit", self.mask_height, self.mask_width));
        }
        if self.mask_width > self.window_width || self.mask_positions + self.mask_width > self.window_width + 1 {
            return bad(format!(
                "{} positions of a {}-wide mask exceed a {}-wide window",
                self.mask_positions, self.mask_width, self.window_width
            ));
        }
        Ok(())
    }

    /// The masks applied to every window, left to right.
    pub fn masks(&self) -> Vec<MaskRect> {
        (0..self.mask_positions)
            .map(|k| MaskRect::new(LEVEL_HEIGHT - self.mask_height, k, self.mask_height, self.mask_width))
            .collect()
    }
}

/// Where a sample came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub level_id: String,
    pub window_col: usize,
    pub mask_col: usize,
}

#[derive(Debug, Clone)]
pub struct Sample<T> {
    pub input: EncodedVolume<T>,
    pub target: Arc<EncodedVolume<T>>,
    pub mask: MaskRect,
    pub provenance: Provenance,
}

/// One-hot encodes a grid.
pub fn encode<T: Scalar>(grid: &TileGrid, alphabet: &TileAlphabet) -> Result<EncodedVolume<T>, DatasetError> {
    let mut v = EncodedVolume::zeros(grid.height(), grid.width(), alphabet.depth());
    for r in 0..grid.height() {
        for c in 0..grid.width() {
            let sym = grid.get(r, c);
            let ch = alphabet
                .channel(sym)
                .ok_or(CorpusError::UnknownSymbol { symbol: sym, row: r, col: c })?;
            v.cell_mut(r, c)[ch] = T::one();
        }
    }
    Ok(v)
}

/// Index of the largest channel; ties go to the lowest index.
pub fn argmax<T: Scalar>(cell: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in cell.iter().enumerate().skip(1) {
        if v > cell[best] {
            best = i;
        }
    }
    best
}

/// Per-cell argmax back to symbols.
pub fn decode<T: Scalar>(volume: &EncodedVolume<T>, alphabet: &TileAlphabet) -> Result<TileGrid, DatasetError> {
    if volume.depth != alphabet.depth() {
        return Err(DatasetError::DepthMismatch {
            expected: alphabet.depth(),
            found: volume.depth,
        });
    }
    let mut grid = TileGrid::filled(volume.height, volume.width, alphabet.sky_symbol());
    for r in 0..volume.height {
        for c in 0..volume.width {
            let ch = argmax(volume.cell(r, c));
            grid.set(r, c, alphabet.symbol(ch).expect("channel below depth"));
        }
    }
    Ok(grid)
}

/// Column offsets of the windows cut from a level `level_width` wide: every
/// `stride` columns, plus a final window flush with the right edge when the
/// strided ones stop short of it.
pub fn window_offsets(level_width: usize, window: usize, stride: usize) -> Vec<usize> {
    if level_width < window || stride == 0 {
        return Vec::new();
    }
    let mut offsets: Vec<usize> = (0..).map(|k| k * stride).take_while(|o| o + window <= level_width).collect();
    let last = *offsets.last().expect("level at least one window wide");
    if last + window < level_width {
        offsets.push(level_width - window);
    }
    offsets
}

/// Cuts a 16-row volume into `window`-wide slices. Returns `(offset, window)` pairs.
pub fn windows<T: Scalar>(
    volume: &EncodedVolume<T>,
    window: usize,
    stride: usize,
) -> Result<Vec<(usize, EncodedVolume<T>)>, DatasetError> {
    if volume.height != LEVEL_HEIGHT {
        return Err(DatasetError::WrongHeight {
            id: String::new(),
            height: volume.height,
            expected: LEVEL_HEIGHT,
        });
    }
    if volume.width < window {
        return Err(DatasetError::LevelTooNarrow {
            id: String::new(),
            width: volume.width,
            window,
        });
    }
    if stride == 0 {
        return Err(DatasetError::BadConfig("stride must be positive".into()));
    }
    Ok(window_offsets(volume.width, window, stride)
        .into_iter()
        .map(|o| (o, volume.columns(o, window)))
        .collect())
}

/// The masked samples of one fully one-hot window.
pub fn make_masked_samples<T: Scalar>(
    window: &EncodedVolume<T>,
    level_id: &str,
    window_col: usize,
    cfg: &DatasetConfig,
) -> Result<Vec<Sample<T>>, DatasetError> {
    cfg.validate()?;
    if window.height != LEVEL_HEIGHT || window.width != cfg.window_width {
        return Err(DatasetError::BadConfig(format!(
            "window is {}x{}, expected {LEVEL_HEIGHT}x{}",
            window.height, window.width, cfg.window_width
        )));
    }
    for r in 0..window.height {
        for c in 0..window.width {
            if !window.is_one_hot_cell(r, c) {
                return Err(DatasetError::NotOneHot { row: r, col: c });
            }
        }
    }
    let target = Arc::new(window.clone());
    Ok(cfg
        .masks()
        .into_iter()
        .map(|mask| {
            let mut input = window.clone();
            input.erase(&mask);
            Sample {
                input,
                target: Arc::clone(&target),
                mask,
                provenance: Provenance {
                    level_id: level_id.to_owned(),
                    window_col,
                    mask_col: mask.col,
                },
            }
        })
        .collect())
}

/// All samples of one 16-row level.
pub fn level_samples<T: Scalar>(
    level: &Level,
    alphabet: &TileAlphabet,
    cfg: &DatasetConfig,
) -> Result<Vec<Sample<T>>, DatasetError> {
    if level.grid.height() != LEVEL_HEIGHT {
        return Err(DatasetError::WrongHeight {
            id: level.id.clone(),
            height: level.grid.height(),
            expected: LEVEL_HEIGHT,
        });
    }
    if level.grid.width() < cfg.window_width {
        return Err(DatasetError::LevelTooNarrow {
            id: level.id.clone(),
            width: level.grid.width(),
            window: cfg.window_width,
        });
    }
    let vol = encode::<T>(&level.grid, alphabet)?;
    let mut out = Vec::new();
    for (off, win) in windows(&vol, cfg.window_width, cfg.stride)? {
        out.extend(make_masked_samples(&win, &level.id, off, cfg)?);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub train: Vec<Sample<T>>,
    pub test: Vec<Sample<T>>,
}

/// Samples for every level of a split whose grids are already padded to 16 rows.
pub fn build_dataset<T: Scalar>(
    split: &CorpusSplit,
    alphabet: &TileAlphabet,
    cfg: &DatasetConfig,
) -> Result<Dataset<T>, DatasetError> {
    cfg.validate()?;
    if split.train.is_empty() && split.test.is_empty() {
        return Err(DatasetError::EmptySplit);
    }
    let collect = |levels: &[Level]| -> Result<Vec<Sample<T>>, DatasetError> {
        let mut v = Vec::new();
        for l in levels {
            v.extend(level_samples(l, alphabet, cfg)?);
        }
        Ok(v)
    };
    Ok(Dataset {
        train: collect(&split.train)?,
        test: collect(&split.test)?,
    })
}

/// Stacks sample inputs (and targets) into `[N,16,16,D]` tensors.
pub fn batch_tensors<T: Scalar>(samples: &[&Sample<T>]) -> (Tensor<T>, Tensor<T>) {
    let first = samples.first().expect("non-empty batch");
    let (h, w, d) = (first.input.height, first.input.width, first.input.depth);
    let mut x = Vec::with_capacity(samples.len() * h * w * d);
    let mut y = Vec::with_capacity(samples.len() * h * w * d);
    for s in samples {
        x.extend_from_slice(&s.input.values);
        y.extend_from_slice(&s.target.values);
    }
    let shape = vec![samples.len(), h, w, d];
    (
        Tensor::new(shape.clone(), x).expect("consistent batch"),
        Tensor::new(shape, y).expect("consistent batch"),
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CachedLevel {
    pub id: String,
    pub game: String,
    pub level: String,
    pub role: SplitRole,
    pub rows: Vec<String>,
}

/// On-disk dataset: padded levels plus the sample index, tied to an alphabet
/// and a geometry. Samples are rebuilt from the levels on load.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetCache {
    pub format: String,
    pub version: u32,
    pub alphabet_hash: String,
    pub corpus_hash: String,
    pub config: DatasetConfig,
    pub levels: Vec<CachedLevel>,
    pub samples: Vec<CachedSample>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CachedSample {
    pub role: SplitRole,
    pub provenance: Provenance,
    pub mask: MaskRect,
}

impl DatasetCache {
    pub const FORMAT: &'static str = "level-inpaint-dataset";
    pub const VERSION: u32 = 1;

    /// `split` must already be padded to 16 rows.
    pub fn build(split: &CorpusSplit, alphabet: &TileAlphabet, cfg: &DatasetConfig) -> Result<Self, DatasetError> {
        let ds = build_dataset::<f32>(split, alphabet, cfg)?;
        let samples = ds
            .train
            .iter()
            .map(|s| (SplitRole::Train, s))
            .chain(ds.test.iter().map(|s| (SplitRole::Test, s)))
            .map(|(role, s)| CachedSample {
                role,
                provenance: s.provenance.clone(),
                mask: s.mask,
            })
            .collect();
        Ok(Self {
            format: Self::FORMAT.into(),
            version: Self::VERSION,
            alphabet_hash: alphabet.hash(),
            corpus_hash: split.hash(),
            config: *cfg,
            levels: split
                .levels()
                .map(|(l, role)| CachedLevel {
                    id: l.id.clone(),
                    game: l.game.clone(),
                    level: l.level.clone(),
                    role,
                    rows: l.grid.to_rows(),
                })
                .collect(),
            samples,
        })
    }

    pub fn train_count(&self) -> usize {
        self.samples.iter().filter(|s| s.role == SplitRole::Train).count()
    }

    pub fn test_count(&self) -> usize {
        self.samples.iter().filter(|s| s.role == SplitRole::Test).count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("cache serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    /// Loads and checks format, version and alphabet.
    pub fn load(path: &Path, alphabet: &TileAlphabet) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path)?;
        let cache: DatasetCache = serde_json::from_str(&text)?;
        if cache.format != Self::FORMAT || cache.version != Self::VERSION {
            return Err(DatasetError::StaleCache(format!(
                "{} v{} (expected {} v{})",
                cache.format,
                cache.version,
                Self::FORMAT,
                Self::VERSION
            )));
        }
        if cache.alphabet_hash != alphabet.hash() {
            return Err(DatasetError::StaleCache("alphabet hash differs".into()));
        }
        Ok(cache)
    }

    pub fn split(&self, alphabet: &TileAlphabet) -> Result<CorpusSplit, DatasetError> {
        let mut split = CorpusSplit::default();
        for l in &self.levels {
            let level = Level {
                id: l.id.clone(),
                game: l.game.clone(),
                level: l.level.clone(),
                grid: TileGrid::from_rows(&l.rows, alphabet)?,
            };
            match l.role {
                SplitRole::Train => split.train.push(level),
                SplitRole::Test => split.test.push(level),
            }
        }
        Ok(split)
    }

    /// Rebuilds samples; they must agree with the stored index.
    pub fn dataset<T: Scalar>(&self, alphabet: &TileAlphabet) -> Result<Dataset<T>, DatasetError> {
        let split = self.split(alphabet)?;
        let ds = build_dataset::<T>(&split, alphabet, &self.config)?;
        let rebuilt: Vec<(&Provenance, &MaskRect)> = ds
            .train
            .iter()
            .chain(&ds.test)
            .map(|s| (&s.provenance, &s.mask))
            .collect();
        let stored: Vec<(&Provenance, &MaskRect)> = self.samples.iter().map(|s| (&s.provenance, &s.mask)).collect();
        if rebuilt != stored {
            return Err(DatasetError::StaleCache("sample index does not match levels".into()));
        }
        Ok(ds)
    }
}
