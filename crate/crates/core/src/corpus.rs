//! Level text parsing, the tile alphabet and the train/test split.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Height every level is padded to before windowing.
pub const LEVEL_HEIGHT: usize = 16;

const DEFAULT_ALPHABET_JSON: &str = include_str!("../data/alphabet_smb.json");

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("level text is empty")]
    Empty,
    #[error("line {line} has {found} tiles, expected {expected}")]
    RaggedLines {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("unknown tile symbol {symbol:?} at row {row}, col {col}")]
    UnknownSymbol { symbol: char, row: usize, col: usize },
    #[error("level is {height} rows tall, cannot pad to {target}")]
    TooTall { height: usize, target: usize },
    #[error("level {id} not found at {}", path.display())]
    MissingLevel { id: String, path: PathBuf },
    #[error("level {id} is assigned more than once in the split manifest")]
    DuplicateAssignment { id: String },
    #[error("invalid alphabet: {0}")]
    BadAlphabet(String),
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct TileEntry {
    pub symbol: char,
    pub name: String,
    pub channel: usize,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub is_sky: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub is_structure: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub is_ground: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct AlphabetFile {
    depth: usize,
    tiles: Vec<TileEntry>,
}

/// Ordered set of tile symbols, each owning one one-hot channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileAlphabet {
    entries: Vec<TileEntry>,
    by_symbol: [Option<u8>; 128],
    sky: char,
    ground: Option<char>,
}

impl TileAlphabet {
    /// The 13-symbol Super Mario Bros. tile set used by the level corpus.
    pub fn smb() -> Self {
        Self::from_json(DEFAULT_ALPHABET_JSON).expect("bundled alphabet is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, CorpusError> {
        let file: AlphabetFile = serde_json::from_str(text)?;
        Self::new(file.depth, file.tiles)
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        Self::from_json(&read_text(path)?)
    }

    pub fn new(depth: usize, mut tiles: Vec<TileEntry>) -> Result<Self, CorpusError> {
        if tiles.len() != depth {
            return Err(CorpusError::BadAlphabet(format!(
                "{} tiles listed for depth {depth}",
                tiles.len()
            )));
        }
        if depth > u8::MAX as usize {
            return Err(CorpusError::BadAlphabet(format!("depth {depth} too large")));
        }
        tiles.sort_by_key(|t| t.channel);
        let mut by_symbol = [None; 128];
        for (i, t) in tiles.iter().enumerate() {
            if t.channel != i {
                return Err(CorpusError::BadAlphabet(format!(
                    "channels must cover 0..{depth} exactly once (saw {} at position {i})",
                    t.channel
                )));
            }
            if !t.symbol.is_ascii() || t.symbol.is_ascii_control() {
                return Err(CorpusError::BadAlphabet(format!(
                    "symbol {:?} is not printable ascii",
                    t.symbol
                )));
            }
            let slot = &mut by_symbol[t.symbol as usize];
            if slot.is_some() {
                return Err(CorpusError::BadAlphabet(format!(
                    "duplicate symbol {:?}",
                    t.symbol
                )));
            }
            *slot = Some(i as u8);
        }
        let mut skies = tiles.iter().filter(|t| t.is_sky);
        let sky = match (skies.next(), skies.next()) {
            (Some(t), None) => t.symbol,
            _ => {
                return Err(CorpusError::BadAlphabet(
                    "exactly one tile must be flagged is_sky".into(),
                ))
            }
        };
        if tiles.iter().any(|t| t.is_sky && t.is_structure) {
            return Err(CorpusError::BadAlphabet("sky cannot be a structure".into()));
        }
        let ground = tiles.iter().find(|t| t.is_ground).map(|t| t.symbol);
        Ok(Self {
            entries: tiles,
            by_symbol,
            sky,
            ground,
        })
    }

    pub fn depth(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[TileEntry] {
        &self.entries
    }

    pub fn sky_symbol(&self) -> char {
        self.sky
    }

    pub fn ground_symbol(&self) -> Option<char> {
        self.ground
    }

    pub fn structure_symbols(&self) -> BTreeSet<char> {
        self.entries
            .iter()
            .filter(|t| t.is_structure)
            .map(|t| t.symbol)
            .collect()
    }

    pub fn channel(&self, symbol: char) -> Option<usize> {
        if symbol.is_ascii() {
            self.by_symbol[symbol as usize].map(usize::from)
        } else {
            None
        }
    }

    pub fn symbol(&self, channel: usize) -> Option<char> {
        self.entries.get(channel).map(|t| t.symbol)
    }

    pub fn contains(&self, symbol: char) -> bool {
        self.channel(symbol).is_some()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&AlphabetFile {
            depth: self.depth(),
            tiles: self.entries.clone(),
        })
        .expect("alphabet serializes")
    }

    /// Hex SHA-256 over the (channel, symbol, name) listing; flags do not
    /// participate since they do not change the encoding.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.entries {
            h.update(format!("{}\t{}\t{}\n", t.channel, t.symbol, t.name).as_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Rectangular grid of tile symbols, row 0 at the top.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TileGrid {
    height: usize,
    width: usize,
    cells: Vec<u8>,
}

impl TileGrid {
    /// Grid filled with one symbol. `symbol` must be ascii.
    pub fn filled(height: usize, width: usize, symbol: char) -> Self {
        assert!(symbol.is_ascii());
        Self {
            height,
            width,
            cells: vec![symbol as u8; height * width],
        }
    }

    /// Builds a grid from equal-length rows, validating against `alphabet`.
    pub fn from_rows<S: AsRef<str>>(rows: &[S], alphabet: &TileAlphabet) -> Result<Self, CorpusError> {
        let first = rows.first().ok_or(CorpusError::Empty)?;
        let width = first.as_ref().chars().count();
        if width == 0 {
            return Err(CorpusError::Empty);
        }
        let mut cells = Vec::with_capacity(width * rows.len());
        for (r, line) in rows.iter().enumerate() {
            let line = line.as_ref();
            let found = line.chars().count();
            if found != width {
                return Err(CorpusError::RaggedLines {
                    line: r,
                    expected: width,
                    found,
                });
            }
            for (c, ch) in line.chars().enumerate() {
                if !alphabet.contains(ch) {
                    return Err(CorpusError::UnknownSymbol {
                        symbol: ch,
                        row: r,
                        col: c,
                    });
                }
                cells.push(ch as u8);
            }
        }
        Ok(Self {
            height: rows.len(),
            width,
            cells,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> char {
        assert!(row < self.height && col < self.width, "cell ({row},{col}) out of bounds");
        self.cells[row * self.width + col] as char
    }

    /// Sets a cell. The caller guarantees `symbol` belongs to the grid's alphabet.
    pub fn set(&mut self, row: usize, col: usize, symbol: char) {
        assert!(row < self.height && col < self.width, "cell ({row},{col}) out of bounds");
        assert!(symbol.is_ascii());
        self.cells[row * self.width + col] = symbol as u8;
    }

    pub fn row(&self, row: usize) -> &str {
        let bytes = &self.cells[row * self.width..(row + 1) * self.width];
        std::str::from_utf8(bytes).expect("cells are ascii")
    }

    pub fn rows(&self) -> impl Iterator<Item = &str> + '_ {
        (0..self.height).map(|r| self.row(r))
    }

    pub fn to_rows(&self) -> Vec<String> {
        self.rows().map(str::to_owned).collect()
    }

    /// Copy of columns `col..col + width` over all rows.
    pub fn columns(&self, col: usize, width: usize) -> TileGrid {
        assert!(col + width <= self.width, "column slice out of bounds");
        let mut cells = Vec::with_capacity(self.height * width);
        for r in 0..self.height {
            let start = r * self.width + col;
            cells.extend_from_slice(&self.cells[start..start + width]);
        }
        TileGrid {
            height: self.height,
            width,
            cells,
        }
    }

    /// VGLC text: one line per row, each terminated by `\n`.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.height * (self.width + 1));
        for row in self.rows() {
            out.push_str(row);
            out.push('\n');
        }
        out
    }

    pub fn count(&self, symbol: char) -> usize {
        self.cells.iter().filter(|&&b| b as char == symbol).count()
    }
}

impl fmt::Display for TileGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// Parses VGLC level text. Trailing blank lines are ignored; `\r\n` endings are accepted.
pub fn parse_level(text: &str, alphabet: &TileAlphabet) -> Result<TileGrid, CorpusError> {
    let mut lines: Vec<&str> = text.lines().collect();
    while lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    TileGrid::from_rows(&lines, alphabet)
}

/// Prepends sky rows until the grid is `target` rows tall.
pub fn pad_to_height(grid: &TileGrid, target: usize, sky: char) -> Result<TileGrid, CorpusError> {
    if grid.height > target {
        return Err(CorpusError::TooTall {
            height: grid.height,
            target,
        });
    }
    let extra = target - grid.height;
    let mut cells = vec![sky as u8; extra * grid.width];
    cells.extend_from_slice(&grid.cells);
    Ok(TileGrid {
        height: target,
        width: grid.width,
        cells,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Train,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Stable identifier, e.g. `SM1-3-1`.
    pub id: String,
    /// Game tag, e.g. `SM1`.
    pub game: String,
    /// Level name within the game, e.g. `3-1`.
    pub level: String,
    /// Path of the level text relative to the corpus directory.
    pub path: String,
    pub split: SplitRole,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct SplitManifest {
    pub version: u32,
    pub levels: Vec<ManifestEntry>,
}

impl SplitManifest {
    pub const VERSION: u32 = 1;

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        Ok(serde_json::from_str(&read_text(path)?)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// Checks that every id is assigned exactly once.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let mut seen = BTreeSet::new();
        for e in &self.levels {
            if !seen.insert(e.id.as_str()) {
                return Err(CorpusError::DuplicateAssignment { id: e.id.clone() });
            }
        }
        Ok(())
    }
}

/// One parsed corpus level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Level {
    pub id: String,
    pub game: String,
    pub level: String,
    pub grid: TileGrid,
}

impl Level {
    /// Column header used in reports, e.g. `SM1-Level 3-1`.
    pub fn label(&self) -> String {
        format!("{}-Level {}", self.game, self.level)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorpusSplit {
    pub train: Vec<Level>,
    pub test: Vec<Level>,
}

impl CorpusSplit {
    pub fn find(&self, id: &str) -> Option<(&Level, SplitRole)> {
        self.train
            .iter()
            .find(|l| l.id == id)
            .map(|l| (l, SplitRole::Train))
            .or_else(|| self.test.iter().find(|l| l.id == id).map(|l| (l, SplitRole::Test)))
    }

    pub fn levels(&self) -> impl Iterator<Item = (&Level, SplitRole)> {
        self.train
            .iter()
            .map(|l| (l, SplitRole::Train))
            .chain(self.test.iter().map(|l| (l, SplitRole::Test)))
    }

    /// Pads every grid to `height` rows.
    pub fn padded(&self, height: usize, sky: char) -> Result<CorpusSplit, CorpusError> {
        let pad = |levels: &[Level]| -> Result<Vec<Level>, CorpusError> {
            levels
                .iter()
                .map(|l| {
                    Ok(Level {
                        grid: pad_to_height(&l.grid, height, sky)?,
                        ..l.clone()
                    })
                })
                .collect()
        };
        Ok(CorpusSplit {
            train: pad(&self.train)?,
            test: pad(&self.test)?,
        })
    }

    /// Hex SHA-256 over ids, roles and level text, in manifest order.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (l, role) in self.levels() {
            h.update(format!("{}:{role:?}\n", l.id).as_bytes());
            h.update(l.grid.to_text().as_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Reads every level named in the manifest, in manifest order.
pub fn load_split(
    corpus_dir: &Path,
    manifest: &SplitManifest,
    alphabet: &TileAlphabet,
) -> Result<CorpusSplit, CorpusError> {
    manifest.validate()?;
    let mut split = CorpusSplit::default();
    for e in &manifest.levels {
        let path = corpus_dir.join(&e.path);
        if !path.is_file() {
            return Err(CorpusError::MissingLevel {
                id: e.id.clone(),
                path,
            });
        }
        let grid = parse_level(&read_text(&path)?, alphabet)?;
        let level = Level {
            id: e.id.clone(),
            game: e.game.clone(),
            level: e.level.clone(),
            grid,
        };
        match e.split {
            SplitRole::Train => split.train.push(level),
            SplitRole::Test => split.test.push(level),
        }
    }
    if split.test.is_empty() {
        log::warn!("split manifest assigns no test levels");
    }
    Ok(split)
}

/// Ids of the six held-out levels reported in the results table.
pub const TABLE_TEST_LEVELS: [&str; 6] = ["SM1-3-1", "SM1-4-2", "SM1-6-2", "SM1-8-1", "SM2-1-1", "SM2-5-2"];

/// Manifest for a checkout of the VGLC `Super Mario Bros` and
/// `Super Mario Bros 2 (Japan)` processed level folders.
pub fn vglc_manifest() -> SplitManifest {
    const SM1: [&str; 15] = [
        "1-1", "1-2", "1-3", "2-1", "3-1", "3-3", "4-1", "4-2", "5-1", "5-3", "6-1", "6-2", "6-3", "7-1", "8-1",
    ];
    const SM2: [&str; 17] = [
        "1-1", "1-2", "1-3", "2-1", "2-2", "2-3", "3-1", "3-3", "4-1", "4-2", "5-1", "5-2", "5-3", "6-1", "6-3", "7-1",
        "8-1",
    ];
    let mut levels = Vec::new();
    for (game, dir, names) in [
        ("SM1", "Super Mario Bros/Processed", &SM1[..]),
        ("SM2", "Super Mario Bros 2 (Japan)/Processed", &SM2[..]),
    ] {
        for name in names {
            let id = format!("{game}-{name}");
            let split = if TABLE_TEST_LEVELS.contains(&id.as_str()) {
                SplitRole::Test
            } else {
                SplitRole::Train
            };
            levels.push(ManifestEntry {
                id,
                game: game.into(),
                level: (*name).into(),
                path: format!("{dir}/mario-{name}.txt"),
                split,
            });
        }
    }
    SplitManifest {
        version: SplitManifest::VERSION,
        levels,
    }
}

/// Level ids grouped by role, for listings.
pub fn split_index(split: &CorpusSplit) -> BTreeMap<String, SplitRole> {
    split.levels().map(|(l, r)| (l.id.clone(), r)).collect()
}

pub(crate) fn read_text(path: &Path) -> Result<String, CorpusError> {
    std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn abc() -> TileAlphabet {
        TileAlphabet::smb()
    }

    #[test]
    fn default_alphabet_is_a_bijection() {
        let a = abc();
        assert_eq!(a.depth(), 13);
        assert_eq!(a.sky_symbol(), '-');
        assert_eq!(a.ground_symbol(), Some('X'));
        for ch in 0..a.depth() {
            let s = a.symbol(ch).unwrap();
            assert_eq!(a.channel(s), Some(ch));
        }
        assert_eq!(
            a.structure_symbols().into_iter().collect::<String>(),
            "<>[]"
        );
    }

    #[test]
    fn alphabet_rejects_wrong_depth_and_duplicates() {
        let mut tiles = abc().entries().to_vec();
        assert!(matches!(
            TileAlphabet::new(12, tiles.clone()),
            Err(CorpusError::BadAlphabet(_))
        ));
        tiles[2].symbol = 'X';
        assert!(TileAlphabet::new(13, tiles).is_err());
    }

    #[test]
    fn alphabet_json_round_trip() {
        let a = abc();
        let b = TileAlphabet::from_json(&a.to_json()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn parses_two_by_two() {
        let g = parse_level("XX\n--\n", &abc()).unwrap();
        assert_eq!((g.height(), g.width()), (2, 2));
        assert_eq!(g.get(0, 0), 'X');
        assert_eq!(g.get(0, 1), 'X');
        assert_eq!(g.get(1, 0), '-');
        assert_eq!(g.get(1, 1), '-');
    }

    #[test]
    fn ragged_lines_rejected() {
        let err = parse_level("XXXXXXXXXX\nXXXXXXXXX\n", &abc()).unwrap_err();
        assert!(matches!(
            err,
            CorpusError::RaggedLines {
                line: 1,
                expected: 10,
                found: 9
            }
        ));
    }

    #[test]
    fn unknown_symbol_reports_position() {
        let err = parse_level("---\n-Z-\n", &abc()).unwrap_err();
        assert!(matches!(
            err,
            CorpusError::UnknownSymbol {
                symbol: 'Z',
                row: 1,
                col: 1
            }
        ));
    }

    #[test]
    fn empty_text_rejected() {
        assert!(matches!(parse_level("", &abc()), Err(CorpusError::Empty)));
        assert!(matches!(parse_level("\n\n", &abc()), Err(CorpusError::Empty)));
    }

    #[test]
    fn crlf_and_missing_final_newline() {
        let g = parse_level("X-\r\n-X", &abc()).unwrap();
        assert_eq!(g.to_text(), "X-\n-X\n");
    }

    #[test]
    fn pad_prepends_sky() {
        let rows: Vec<String> = (0..14).map(|_| "XS".to_string()).collect();
        let g = TileGrid::from_rows(&rows, &abc()).unwrap();
        let p = pad_to_height(&g, 16, '-').unwrap();
        assert_eq!(p.height(), 16);
        assert_eq!(p.row(0), "--");
        assert_eq!(p.row(1), "--");
        for r in 2..16 {
            assert_eq!(p.row(r), "XS");
        }
    }

    #[test]
    fn pad_identity_and_too_tall() {
        let g = TileGrid::filled(16, 3, 'X');
        assert_eq!(pad_to_height(&g, 16, '-').unwrap(), g);
        let t = TileGrid::filled(17, 3, 'X');
        assert!(matches!(
            pad_to_height(&t, 16, '-'),
            Err(CorpusError::TooTall { height: 17, target: 16 })
        ));
    }

    #[test]
    fn manifest_duplicate_detected() {
        let mut m = vglc_manifest();
        let mut dup = m.levels[0].clone();
        dup.split = SplitRole::Test;
        m.levels.push(dup);
        assert!(matches!(
            m.validate(),
            Err(CorpusError::DuplicateAssignment { .. })
        ));
    }

    #[test]
    fn vglc_manifest_matches_table_split() {
        let m = vglc_manifest();
        m.validate().unwrap();
        let test: Vec<&str> = m
            .levels
            .iter()
            .filter(|e| e.split == SplitRole::Test)
            .map(|e| e.id.as_str())
            .collect();
        assert_eq!(test, TABLE_TEST_LEVELS);
        assert_eq!(m.levels.len() - test.len(), 26);
    }

    #[test]
    fn missing_level_reported() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_split(dir.path(), &vglc_manifest(), &abc()).unwrap_err();
        assert!(matches!(err, CorpusError::MissingLevel { .. }));
    }

    #[test]
    fn empty_test_list_is_allowed() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.txt"), "--\nXX\n").unwrap();
        let m = SplitManifest {
            version: 1,
            levels: vec![ManifestEntry {
                id: "A-1".into(),
                game: "A".into(),
                level: "1".into(),
                path: "a.txt".into(),
                split: SplitRole::Train,
            }],
        };
        let s = load_split(dir.path(), &m, &abc()).unwrap();
        assert_eq!(s.train.len(), 1);
        assert!(s.test.is_empty());
    }
}
