//! Seeded generator for side-scrolling levels in the 14-row plain-text tile
//! format. Stands in for the public corpus when it is not on disk: the output
//! has the same dimensions, alphabet and manifest ids, so every downstream
//! stage runs unchanged.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::corpus::{vglc_manifest, CorpusError, ManifestEntry, SplitManifest, SplitRole, TileGrid};

/// Raw level height before padding.
pub const RAW_HEIGHT: usize = 14;
const GROUND: usize = 12;
const BLOCK_ROW: usize = 8;
const HIGH_BLOCK_ROW: usize = 4;

/// Feature densities for one game.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Style {
    pub gap: f64,
    pub pipe: f64,
    pub stairs: f64,
    pub blocks: f64,
    pub cannon: f64,
    pub enemy: f64,
    pub max_gap: usize,
}

impl Style {
    pub fn for_game(game: &str) -> Self {
        match game {
            "SM2" => Style {
                gap: 0.20,
                pipe: 0.16,
                stairs: 0.14,
                blocks: 0.22,
                cannon: 0.06,
                enemy: 0.45,
                max_gap: 5,
            },
            _ => Style {
                gap: 0.14,
                pipe: 0.18,
                stairs: 0.12,
                blocks: 0.28,
                cannon: 0.04,
                enemy: 0.35,
                max_gap: 4,
            },
        }
    }
}

struct Builder {
    grid: TileGrid,
}

impl Builder {
    fn new(width: usize) -> Self {
        let mut grid = TileGrid::filled(RAW_HEIGHT, width, '-');
        for r in GROUND..RAW_HEIGHT {
            for c in 0..width {
                grid.set(r, c, 'X');
            }
        }
        Self { grid }
    }

    fn width(&self) -> usize {
        self.grid.width()
    }

    fn put(&mut self, r: usize, c: usize, s: char) {
        if c < self.width() {
            self.grid.set(r, c, s);
        }
    }

    fn gap(&mut self, col: usize, len: usize) {
        for c in col..col + len {
            for r in GROUND..RAW_HEIGHT {
                self.put(r, c, '-');
            }
        }
    }

    fn pipe(&mut self, col: usize, height: usize) {
        let top = GROUND - height;
        self.put(top, col, '<');
        self.put(top, col + 1, '>');
        for r in top + 1..GROUND {
            self.put(r, col, '[');
            self.put(r, col + 1, ']');
        }
    }

    fn column(&mut self, col: usize, height: usize) {
        for r in GROUND - height..GROUND {
            self.put(r, col, 'X');
        }
    }

    fn cannon(&mut self, col: usize, height: usize) {
        let top = GROUND - height;
        self.put(top, col, 'B');
        for r in top + 1..GROUND {
            self.put(r, col, 'b');
        }
    }

    fn block_run(&mut self, rng: &mut ChaCha8Rng, row: usize, col: usize, len: usize) {
        for c in col..col + len {
            let s = match rng.gen_range(0..10) {
                0..=5 => 'S',
                6..=8 => '?',
                _ => 'Q',
            };
            self.put(row, c, s);
        }
    }
}

enum Feature {
    Gap,
    Pipe,
    Stairs,
    Blocks,
    Cannon,
    Flat,
}

fn pick_feature(style: &Style, roll: f64) -> Feature {
    let table = [
        (style.gap, Feature::Gap),
        (style.pipe, Feature::Pipe),
        (style.stairs, Feature::Stairs),
        (style.blocks, Feature::Blocks),
        (style.cannon, Feature::Cannon),
    ];
    let mut acc = 0.0;
    for (p, f) in table {
        acc += p;
        if roll < acc {
            return f;
        }
    }
    Feature::Flat
}

/// Generates one level `width` columns wide.
pub fn generate_level(seed: u64, width: usize, style: Style) -> TileGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder::new(width);
    let end_stairs = 9;
    let finish = width.saturating_sub(end_stairs + 8);
    let mut col = rng.gen_range(8..14);
    while col + 12 < finish {
        match pick_feature(&style, rng.gen()) {
            Feature::Gap => {
                let len = rng.gen_range(2..=style.max_gap);
                b.gap(col, len);
                col += len;
            }
            Feature::Pipe => {
                b.pipe(col, rng.gen_range(2..=4));
                col += 2;
            }
            Feature::Stairs => {
                let h = rng.gen_range(3..=5);
                for i in 0..h {
                    b.column(col + i, i + 1);
                }
                col += h;
                let descend = rng.gen_range(0..3);
                if descend == 0 {
                    let len = rng.gen_range(2..=3);
                    b.gap(col, len);
                    col += len;
                }
                if descend < 2 {
                    for i in 0..h {
                        b.column(col + i, h - i);
                    }
                    col += h;
                }
            }
            Feature::Blocks => {
                let len = rng.gen_range(1..=6);
                b.block_run(&mut rng, BLOCK_ROW, col, len);
                if rng.gen_bool(0.35) {
                    let off = rng.gen_range(0..len);
                    let hl = rng.gen_range(2..=6);
                    b.block_run(&mut rng, HIGH_BLOCK_ROW, col + off, hl);
                }
                if rng.gen_bool(0.25) {
                    for c in col..col + len {
                        b.put(BLOCK_ROW - 1, c, 'o');
                    }
                } else if rng.gen_bool(0.3) {
                    b.put(BLOCK_ROW - 1, col + rng.gen_range(0..len), 'E');
                }
                col += len;
            }
            Feature::Cannon => {
                b.cannon(col, rng.gen_range(1..=3));
                col += 1;
            }
            Feature::Flat => {
                if rng.gen_bool(0.2) {
                    let len = rng.gen_range(3..=6);
                    let row = rng.gen_range(6..=9);
                    for c in col..col + len {
                        b.put(row, c, 'o');
                    }
                }
            }
        }
        if rng.gen_bool(style.enemy) {
            let c = col + rng.gen_range(1..4);
            if c < finish && b.grid.get(GROUND, c) == 'X' && b.grid.get(GROUND - 1, c) == '-' {
                b.put(GROUND - 1, c, 'E');
                if rng.gen_bool(0.3) && b.grid.get(GROUND - 1, c + 1) == '-' {
                    b.put(GROUND - 1, c + 1, 'E');
                }
            }
        }
        col += rng.gen_range(2..7);
    }
    let stair_col = width.saturating_sub(end_stairs + 6);
    for i in 0..end_stairs.min(8) {
        b.column(stair_col + i, i + 1);
    }
    b.column(stair_col + 8, 8);
    b.grid
}

fn level_seed(seed: u64, id: &str) -> u64 {
    let digest = Sha256::digest(format!("{seed}:{id}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Width for a level: held-out levels run longer, as in the original games.
fn level_width(seed: u64, entry: &ManifestEntry) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(level_seed(seed, &entry.id) ^ 0x5a5a);
    match entry.split {
        SplitRole::Train => rng.gen_range(150..=215),
        SplitRole::Test => rng.gen_range(190..=230),
    }
}

/// Generates every level named in the default manifest.
pub fn generate_corpus(seed: u64) -> Vec<(ManifestEntry, TileGrid)> {
    vglc_manifest()
        .levels
        .into_iter()
        .map(|e| {
            let grid = generate_level(level_seed(seed, &e.id), level_width(seed, &e), Style::for_game(&e.game));
            (e, grid)
        })
        .collect()
}

/// Writes the generated corpus under `dir` at the manifest paths, plus
/// `manifest.json`. Returns the manifest.
pub fn write_corpus(dir: &Path, seed: u64) -> Result<SplitManifest, CorpusError> {
    let io = |path: &Path, source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let levels = generate_corpus(seed);
    for (e, grid) in &levels {
        let path = dir.join(&e.path);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|s| io(parent, s))?;
        }
        std::fs::write(&path, grid.to_text()).map_err(|s| io(&path, s))?;
    }
    let manifest = SplitManifest {
        version: SplitManifest::VERSION,
        levels: levels.into_iter().map(|(e, _)| e).collect(),
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, manifest.to_json()).map_err(|s| io(&path, s))?;
    Ok(manifest)
}
