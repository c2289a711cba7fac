use serde::{Deserialize, Serialize};

use super::{BottleneckSpec, MapError};
use crate::gridenv::GridMap;

/// How a map was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MapMeta {
    Bottleneck { corridor_len: usize, room_size: usize },
    Random { density: f64, seed: u64 },
    Maze { seed: u64 },
    Movingai { source: String },
}

impl MapMeta {
    pub fn bottleneck(&self) -> Option<BottleneckSpec> {
        match *self {
            MapMeta::Bottleneck { corridor_len, room_size } => Some(BottleneckSpec { corridor_len, room_size }),
            _ => None,
        }
    }
}

/// JSON map document. Each row of `obstacles` is run-length encoded as
/// `<count><symbol>` pairs, `.` free and `@` blocked, e.g. `"3.2@5."`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub width: usize,
    pub height: usize,
    pub obstacles: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<MapMeta>,
}

pub fn encode_rle_row(cells: &[bool]) -> String {
    let mut out = String::new();
    let mut i = 0;
    while i < cells.len() {
        let v = cells[i];
        let mut j = i;
        while j < cells.len() && cells[j] == v {
            j += 1;
        }
        out.push_str(&(j - i).to_string());
        out.push(if v { '@' } else { '.' });
        i = j;
    }
    out
}

pub fn decode_rle_row(row: &str) -> Result<Vec<bool>, MapError> {
    let mut out = Vec::new();
    let mut count = String::new();
    for ch in row.chars() {
        match ch {
            '0'..='9' => count.push(ch),
            '.' | '@' => {
                let n: usize = count.parse().map_err(|_| MapError::Document(format!("run without count in {row:?}")))?;
                out.extend(std::iter::repeat_n(ch == '@', n));
                count.clear();
            }
            other => return Err(MapError::Document(format!("bad run symbol {other:?} in {row:?}"))),
        }
    }
    if !count.is_empty() {
        return Err(MapError::Document(format!("dangling count in {row:?}")));
    }
    Ok(out)
}

impl MapDoc {
    pub fn from_grid(map: &GridMap, name: Option<String>, meta: Option<MapMeta>) -> Self {
        let obstacles = map.obstacles().chunks(map.width()).map(encode_rle_row).collect();
        Self { name, width: map.width(), height: map.height(), obstacles, meta }
    }

    pub fn to_grid(&self) -> Result<GridMap, MapError> {
        if self.obstacles.len() != self.height {
            return Err(MapError::Document(format!("{} rows for height {}", self.obstacles.len(), self.height)));
        }
        let mut cells = Vec::with_capacity(self.width * self.height);
        for (i, row) in self.obstacles.iter().enumerate() {
            let decoded = decode_rle_row(row)?;
            if decoded.len() != self.width {
                return Err(MapError::Document(format!("row {} has {} cells, width is {}", i, decoded.len(), self.width)));
            }
            cells.extend(decoded);
        }
        GridMap::new(self.width, self.height, cells).map_err(|e| MapError::Document(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("map document serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, MapError> {
        let doc: MapDoc = serde_json::from_str(text).map_err(|e| MapError::Document(e.to_string()))?;
        doc.to_grid()?;
        Ok(doc)
    }
}
