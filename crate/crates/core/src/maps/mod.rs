//! Map construction: bottleneck, random and maze generators, MovingAI
//! import/export and the JSON map document.

mod bottleneck;
mod document;
mod maze;
mod movingai;
mod random;

pub use bottleneck::{gen_bottleneck, sample_bottleneck_agents, BottleneckSpec};
pub use document::{decode_rle_row, encode_rle_row, MapDoc, MapMeta};
pub use maze::{gen_maze, MAZE_PERFORATION};
pub use movingai::{parse_movingai, serialize_movingai, MovingAIMap};
pub use random::gen_random;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MapError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("map document: {0}")]
    Document(String),
}
