use inpaint_core::augment::{window_start, WINDOW_WIDTH};
use inpaint_core::corpus::{pad_to_height, parse_level, TileAlphabet, TileGrid};
use inpaint_core::dataset::{decode, encode, window_offsets, EncodedVolume, Fragment, MaskRect};
use inpaint_core::eval::Summary;
use proptest::prelude::*;

const SYMBOLS: &[char] = &['-', 'X', 'S', '?', 'Q', 'E', '<', '>', '[', ']', 'o', 'B', 'b'];

fn grid_strategy(max_h: usize, max_w: usize) -> impl Strategy<Value = TileGrid> {
    (1..=max_h, 1..=max_w).prop_flat_map(|(h, w)| {
        proptest::collection::vec(proptest::sample::select(SYMBOLS), h * w).prop_map(move |cells| {
            let rows: Vec<String> = cells.chunks(w).map(|r| r.iter().collect()).collect();
            TileGrid::from_rows(&rows, &TileAlphabet::smb()).unwrap()
        })
    })
}

fn mask_in(h: usize, w: usize) -> impl Strategy<Value = MaskRect> {
    (1..=h, 1..=w).prop_flat_map(move |(mh, mw)| (0..=h - mh, 0..=w - mw).prop_map(move |(r, c)| MaskRect::new(r, c, mh, mw)))
}

proptest! {
    #[test]
    fn text_round_trip(g in grid_strategy(16, 40)) {
        let a = TileAlphabet::smb();
        let text = g.to_text();
        prop_assert_eq!(parse_level(&text, &a).unwrap().to_text(), text);
    }

    #[test]
    fn padding_prepends_sky(g in grid_strategy(16, 20)) {
        let p = pad_to_height(&g, 16, '-').unwrap();
        prop_assert_eq!(p.height(), 16);
        let extra = 16 - g.height();
        for r in 0..extra {
            prop_assert!(p.row(r).chars().all(|c| c == '-'));
        }
        for r in 0..g.height() {
            prop_assert_eq!(p.row(r + extra), g.row(r));
        }
    }

    #[test]
    fn encode_then_decode_is_identity(g in grid_strategy(16, 24)) {
        let a = TileAlphabet::smb();
        let v = encode::<f64>(&g, &a).unwrap();
        prop_assert_eq!(decode(&v, &a).unwrap(), g);
    }

    #[test]
    fn windows_cover_every_column(w in 16usize..600, stride in 1usize..32) {
        let offs = window_offsets(w, 16, stride);
        prop_assert_eq!(offs[0], 0);
        prop_assert_eq!(offs.last().unwrap() + 16, w);
        for pair in offs.windows(2) {
            prop_assert!(pair[1] > pair[0] && pair[1] - pair[0] <= stride);
        }
    }

    #[test]
    fn erase_zeroes_exactly_the_mask(m in mask_in(16, 16)) {
        let mut v = EncodedVolume::<f32>::zeros(16, 16, 13);
        for r in 0..16 {
            for c in 0..16 {
                v.cell_mut(r, c)[(r + c) % 13] = 1.0;
            }
        }
        v.erase(&m);
        for r in 0..16 {
            for c in 0..16 {
                prop_assert_eq!(v.is_zero_cell(r, c), m.contains(r, c));
            }
        }
    }

    #[test]
    fn fragments_write_back_what_they_read(g in grid_strategy(16, 16), seed in any::<u64>()) {
        let m = MaskRect::new(0, 0, g.height(), g.width().min((seed % 16) as usize + 1));
        let f = Fragment::from_grid(&g, &m);
        let mut blank = TileGrid::filled(g.height(), g.width(), '-');
        f.write_into(&mut blank, 0, 0);
        prop_assert_eq!(Fragment::from_grid(&blank, &m), f);
    }

    #[test]
    fn windows_contain_their_mask(width in 16usize..300, mh in 1usize..=16, mw in 1usize..=16, seed in any::<u64>()) {
        prop_assume!(mw <= width);
        let row = (seed as usize) % (16 - mh + 1);
        let col = (seed as usize >> 8) % (width - mw + 1);
        let m = MaskRect::new(row, col, mh, mw);
        let start = window_start(16, width, &m).unwrap();
        prop_assert!(start + WINDOW_WIDTH <= width);
        prop_assert!(start <= m.col && m.col + m.width <= start + WINDOW_WIDTH);
    }

    #[test]
    fn summaries_are_bounded(values in proptest::collection::vec(0.0f64..=100.0, 1..8)) {
        let s = Summary::of(&values);
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = s.mean.unwrap();
        prop_assert!(mean >= lo - 1e-9 && mean <= hi + 1e-9);
        prop_assert!(s.std.unwrap() >= 0.0);
        prop_assert_eq!(s.runs, values.len());
    }
}
