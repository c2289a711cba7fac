mod common;

use common::rng;
use rand::Rng;
use srmt::gridenv::{Cell, GridMap};
use srmt::maps::{
    gen_bottleneck, gen_maze, gen_random, parse_movingai, serialize_movingai, BottleneckSpec, MapDoc, MapError,
    MapMeta, MovingAIMap,
};

fn synthetic_movingai(seed: u64) -> MovingAIMap {
    let mut r = rng(seed);
    let (h, w) = (r.random_range(1..25), r.random_range(1..25));
    let rows: Vec<String> = (0..h)
        .map(|_| {
            (0..w)
                .map(|_| {
                    let x: f64 = r.random();
                    match x {
                        x if x < 0.55 => '.',
                        x if x < 0.65 => 'G',
                        x if x < 0.8 => '@',
                        x if x < 0.9 => 'O',
                        _ => 'T',
                    }
                })
                .collect()
        })
        .collect();
    MovingAIMap { map_type: "octile".into(), height: h, width: w, rows }
}

#[test]
fn movingai_round_trip_on_synthetic_maps() {
    for seed in 0..20 {
        let m = synthetic_movingai(seed);
        let text = serialize_movingai(&m);
        let parsed = parse_movingai(&text).unwrap();
        assert_eq!(parsed, m);
        assert_eq!(serialize_movingai(&parsed), text, "seed {seed}");
        assert_eq!(parsed.body(), m.body());
        if let Ok(g) = parsed.to_grid() {
            for (r, row) in m.rows.iter().enumerate() {
                for (c, ch) in row.chars().enumerate() {
                    assert_eq!(g.is_free(Cell::new(r, c)), matches!(ch, '.' | 'G'));
                }
            }
        }
    }
}

#[test]
fn malformed_movingai_fixtures_name_line_and_column() {
    let fixtures: [(&str, usize, usize); 5] = [
        // height promises 3 rows, body has 2
        ("type octile\nheight 3\nwidth 2\nmap\n..\n..\n", 7, 1),
        // unknown character in the second row
        ("type octile\nheight 2\nwidth 3\nmap\n...\n.x.\n", 6, 2),
        // short row
        ("type octile\nheight 2\nwidth 4\nmap\n....\n..\n", 6, 3),
        // width is not a number
        ("type octile\nheight 2\nwidth two\nmap\n..\n..\n", 3, 7),
        // `map` line missing
        ("type octile\nheight 1\nwidth 2\n..\n", 4, 1),
    ];
    for (text, line, column) in fixtures {
        match parse_movingai(text) {
            Err(MapError::Parse { line: l, column: c, message }) => {
                assert_eq!((l, c), (line, column), "{message}");
                let shown = parse_movingai(text).unwrap_err().to_string();
                assert!(shown.contains(&format!("line {line}, column {column}")), "{shown}");
            }
            other => panic!("expected a parse error, got {other:?}"),
        }
    }
}

#[test]
fn movingai_smallest_case() {
    let g = parse_movingai("type octile\nheight 2\nwidth 2\nmap\n.@\n..\n").unwrap().to_grid().unwrap();
    assert!(!g.is_free(Cell::new(0, 1)));
    assert_eq!(g.free_count(), 3);
}

#[test]
fn bottleneck_geometry() {
    for len in [1, 3, 10, 30, 1000] {
        let spec = BottleneckSpec::new(len);
        let (map, starts, goals) = gen_bottleneck(&spec, len as u64).unwrap();
        assert_eq!(map.width(), 10 + len);
        assert_eq!(map.free_count(), 50 + len);
        assert!(map.is_connected());
        let in_left = |c: Cell| c.col < 5;
        let in_right = |c: Cell| c.col >= 5 + len;
        assert!(in_left(starts[0]) && in_right(goals[0]));
        assert!(in_right(starts[1]) && in_left(goals[1]));
    }
    assert_eq!(gen_bottleneck(&BottleneckSpec::new(3), 4).unwrap(), gen_bottleneck(&BottleneckSpec::new(3), 4).unwrap());
}

#[test]
fn random_maps_are_connected_with_the_expected_density() {
    let mut fractions = Vec::new();
    for seed in 0..100 {
        let map = gen_random(20, 20, 0.3, seed).unwrap();
        assert!(map.is_connected(), "seed {seed}");
        assert_eq!(map, gen_random(20, 20, 0.3, seed).unwrap());
        fractions.push(map.free_count() as f64 / 400.0);
    }
    let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
    assert!((mean - 0.70).abs() <= 0.05, "mean free fraction {mean}");
    assert_eq!(gen_random(8, 8, 0.0, 1).unwrap(), GridMap::open(8, 8));
}

#[test]
fn mazes_are_connected() {
    for seed in 0..100 {
        let m = gen_maze(21, 21, seed).unwrap();
        assert!(m.is_connected(), "seed {seed}");
    }
    assert!(gen_maze(5, 5, 3).unwrap().is_connected());
    assert_eq!(gen_maze(21, 21, 8).unwrap(), gen_maze(21, 21, 8).unwrap());
    assert!(gen_maze(20, 21, 0).is_err());
}

#[test]
fn map_documents_round_trip() {
    let maps = [
        (gen_random(17, 9, 0.3, 2).unwrap(), MapMeta::Random { density: 0.3, seed: 2 }),
        (gen_maze(11, 7, 1).unwrap(), MapMeta::Maze { seed: 1 }),
        (BottleneckSpec::new(4).build_map().unwrap(), MapMeta::Bottleneck { corridor_len: 4, room_size: 5 }),
    ];
    for (map, meta) in maps {
        let doc = MapDoc::from_grid(&map, Some("m".into()), Some(meta.clone()));
        let back = MapDoc::from_json(&doc.to_json()).unwrap();
        assert_eq!(back, doc);
        assert_eq!(back.to_grid().unwrap(), map);
    }
}

mod props {
    use proptest::prelude::*;
    use srmt::gridenv::GridMap;
    use srmt::maps::{decode_rle_row, encode_rle_row, parse_movingai, serialize_movingai, MovingAIMap};

    proptest! {
        #[test]
        fn rle_rows_round_trip(cells in proptest::collection::vec(any::<bool>(), 1..80)) {
            prop_assert_eq!(decode_rle_row(&encode_rle_row(&cells)).unwrap(), cells);
        }

        #[test]
        fn movingai_grids_round_trip(w in 1usize..30, h in 1usize..30, bits in proptest::collection::vec(any::<bool>(), 900)) {
            let mut obstacles: Vec<bool> = bits[..w * h].to_vec();
            obstacles[0] = false;
            let grid = GridMap::new(w, h, obstacles).unwrap();
            let m = MovingAIMap::from_grid(&grid);
            let parsed = parse_movingai(&serialize_movingai(&m)).unwrap();
            prop_assert_eq!(parsed.to_grid().unwrap(), grid);
        }
    }
}
