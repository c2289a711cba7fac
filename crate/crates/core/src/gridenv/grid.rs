use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::EnvError;

/// Grid coordinate, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    pub fn manhattan(self, other: Cell) -> usize {
        self.row.abs_diff(other.row) + self.col.abs_diff(other.col)
    }

    /// Neighbor in direction `(dr, dc)` if it stays non-negative.
    pub fn offset(self, dr: isize, dc: isize) -> Option<Cell> {
        let r = self.row.checked_add_signed(dr)?;
        let c = self.col.checked_add_signed(dc)?;
        Some(Cell::new(r, c))
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.row, self.col)
    }
}

/// Agent action. Discriminants are the policy's output indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Stay = 0,
    Up = 1,
    Down = 2,
    Left = 3,
    Right = 4,
}

impl Action {
    pub const ALL: [Action; 5] = [Action::Stay, Action::Up, Action::Down, Action::Left, Action::Right];
    pub const MOVES: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn delta(self) -> (isize, isize) {
        match self {
            Action::Stay => (0, 0),
            Action::Up => (-1, 0),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
            Action::Right => (0, 1),
        }
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Action that moves `from` onto the adjacent cell `to`.
    pub fn between(from: Cell, to: Cell) -> Option<Action> {
        Self::ALL.into_iter().find(|a| {
            let (dr, dc) = a.delta();
            from.offset(dr, dc) == Some(to)
        })
    }
}

/// Static obstacle grid. Out-of-bounds cells count as obstacles.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GridMap {
    width: usize,
    height: usize,
    obstacles: Vec<bool>,
}

impl GridMap {
    pub fn new(width: usize, height: usize, obstacles: Vec<bool>) -> Result<Self, EnvError> {
        if width == 0 || height == 0 || obstacles.len() != width * height {
            return Err(EnvError::Config(format!(
                "map {}x{} needs {} cells, got {}",
                width,
                height,
                width * height,
                obstacles.len()
            )));
        }
        if obstacles.iter().all(|&b| b) {
            return Err(EnvError::Config("map has no free cell".into()));
        }
        Ok(Self { width, height, obstacles })
    }

    pub fn open(width: usize, height: usize) -> Self {
        Self::new(width, height, vec![false; width * height]).expect("open map")
    }

    /// Builds a map from rows of `.` (free) and `@` (blocked).
    pub fn from_ascii(rows: &[&str]) -> Result<Self, EnvError> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        let mut obstacles = Vec::with_capacity(width * height);
        for r in rows {
            if r.len() != width {
                return Err(EnvError::Config("ragged ascii map".into()));
            }
            for ch in r.chars() {
                match ch {
                    '.' => obstacles.push(false),
                    '@' | '#' => obstacles.push(true),
                    other => return Err(EnvError::Config(format!("bad map char {other:?}"))),
                }
            }
        }
        Self::new(width, height, obstacles)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn obstacles(&self) -> &[bool] {
        &self.obstacles
    }

    pub fn index(&self, c: Cell) -> usize {
        c.row * self.width + c.col
    }

    pub fn cell_at(&self, idx: usize) -> Cell {
        Cell::new(idx / self.width, idx % self.width)
    }

    pub fn in_bounds(&self, c: Cell) -> bool {
        c.row < self.height && c.col < self.width
    }

    pub fn is_free(&self, c: Cell) -> bool {
        self.in_bounds(c) && !self.obstacles[self.index(c)]
    }

    /// Obstacle test on signed coordinates; out of bounds is blocked.
    pub fn blocked_at(&self, row: isize, col: isize) -> bool {
        if row < 0 || col < 0 || row as usize >= self.height || col as usize >= self.width {
            return true;
        }
        self.obstacles[row as usize * self.width + col as usize]
    }

    pub fn set_blocked(&mut self, c: Cell, blocked: bool) {
        let i = self.index(c);
        self.obstacles[i] = blocked;
    }

    pub fn free_count(&self) -> usize {
        self.obstacles.iter().filter(|&&b| !b).count()
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        (0..self.obstacles.len()).filter(|&i| !self.obstacles[i]).map(|i| self.cell_at(i)).collect()
    }

    /// The cell reached by `action`, if free.
    pub fn step(&self, c: Cell, action: Action) -> Option<Cell> {
        let (dr, dc) = action.delta();
        c.offset(dr, dc).filter(|&n| self.is_free(n))
    }

    /// Free 4-neighbors in the fixed order Up, Down, Left, Right.
    pub fn neighbors(&self, c: Cell) -> impl Iterator<Item = Cell> + '_ {
        Action::MOVES.into_iter().filter_map(move |a| self.step(c, a))
    }

    /// Connected-component label for every free cell (`usize::MAX` for obstacles).
    pub fn components(&self) -> (Vec<usize>, usize) {
        let mut label = vec![usize::MAX; self.obstacles.len()];
        let mut count = 0;
        let mut queue = VecDeque::new();
        for start in 0..self.obstacles.len() {
            if self.obstacles[start] || label[start] != usize::MAX {
                continue;
            }
            label[start] = count;
            queue.push_back(self.cell_at(start));
            while let Some(c) = queue.pop_front() {
                for n in self.neighbors(c) {
                    let ni = self.index(n);
                    if label[ni] == usize::MAX {
                        label[ni] = count;
                        queue.push_back(n);
                    }
                }
            }
            count += 1;
        }
        (label, count)
    }

    pub fn is_connected(&self) -> bool {
        self.components().1 == 1
    }

    pub fn to_ascii(&self) -> String {
        let mut s = String::with_capacity((self.width + 1) * self.height);
        for r in 0..self.height {
            for c in 0..self.width {
                s.push(if self.obstacles[r * self.width + c] { '@' } else { '.' });
            }
            s.push('\n');
        }
        s
    }
}
