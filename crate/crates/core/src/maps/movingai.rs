use super::MapError;
use crate::gridenv::GridMap;

/// A MovingAI `.map` file: header fields plus the raw character grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MovingAIMap {
    pub map_type: String,
    pub height: usize,
    pub width: usize,
    pub rows: Vec<String>,
}

fn passable(ch: char) -> Option<bool> {
    match ch {
        '.' | 'G' => Some(true),
        '@' | 'O' | 'T' => Some(false),
        _ => None,
    }
}

fn perr(line: usize, column: usize, message: impl Into<String>) -> MapError {
    MapError::Parse { line, column, message: message.into() }
}

fn header_value<'a>(lines: &[&'a str], idx: usize, key: &str) -> Result<&'a str, MapError> {
    let line = lines.get(idx).ok_or_else(|| perr(idx + 1, 1, format!("missing `{key}` header")))?;
    let mut parts = line.split_whitespace();
    match parts.next() {
        Some(k) if k.eq_ignore_ascii_case(key) => {}
        _ => return Err(perr(idx + 1, 1, format!("expected `{key}` header"))),
    }
    let value = parts.next().ok_or_else(|| perr(idx + 1, key.len() + 1, format!("`{key}` needs a value")))?;
    if parts.next().is_some() {
        return Err(perr(idx + 1, 1, format!("unexpected text after `{key}` value")));
    }
    Ok(value)
}

fn header_number(lines: &[&str], idx: usize, key: &str) -> Result<usize, MapError> {
    let v = header_value(lines, idx, key)?;
    match v.parse::<usize>() {
        Ok(n) if n > 0 => Ok(n),
        _ => Err(perr(idx + 1, key.len() + 2, format!("`{key}` must be a positive integer, got {v:?}"))),
    }
}

/// Parses a MovingAI map. Line and column numbers in errors are 1-based.
pub fn parse_movingai(text: &str) -> Result<MovingAIMap, MapError> {
    let lines: Vec<&str> = text.split('\n').map(|l| l.strip_suffix('\r').unwrap_or(l)).collect();
    let map_type = header_value(&lines, 0, "type")?.to_string();
    let height = header_number(&lines, 1, "height")?;
    let width = header_number(&lines, 2, "width")?;
    match lines.get(3) {
        Some(l) if l.trim().eq_ignore_ascii_case("map") => {}
        _ => return Err(perr(4, 1, "expected `map` line")),
    }
    let mut rows = Vec::with_capacity(height);
    for r in 0..height {
        let line_no = 5 + r;
        let row = match lines.get(4 + r) {
            Some(row) if !(row.is_empty() && 4 + r + 1 >= lines.len()) => *row,
            _ => return Err(perr(line_no, 1, format!("missing row {} of {}", r + 1, height))),
        };
        let mut count = 0;
        for (c, ch) in row.chars().enumerate() {
            if c >= width {
                return Err(perr(line_no, c + 1, format!("row longer than width {width}")));
            }
            if passable(ch).is_none() {
                return Err(perr(line_no, c + 1, format!("unknown cell character {ch:?}")));
            }
            count += 1;
        }
        if count < width {
            return Err(perr(line_no, count + 1, format!("row has {count} cells, expected {width}")));
        }
        rows.push(row.to_string());
    }
    for (i, extra) in lines.iter().enumerate().skip(4 + height) {
        if !extra.trim().is_empty() {
            return Err(perr(i + 1, 1, format!("more rows than height {height}")));
        }
    }
    Ok(MovingAIMap { map_type, height, width, rows })
}

pub fn serialize_movingai(map: &MovingAIMap) -> String {
    let mut s = format!("type {}\nheight {}\nwidth {}\nmap\n", map.map_type, map.height, map.width);
    for row in &map.rows {
        s.push_str(row);
        s.push('\n');
    }
    s
}

impl MovingAIMap {
    pub fn to_grid(&self) -> Result<GridMap, MapError> {
        let obstacles = self.rows.iter().flat_map(|r| r.chars().map(|ch| !passable(ch).unwrap_or(false))).collect();
        GridMap::new(self.width, self.height, obstacles).map_err(|e| MapError::Config(e.to_string()))
    }

    pub fn from_grid(map: &GridMap) -> Self {
        let rows = map.to_ascii().lines().map(str::to_string).collect();
        Self { map_type: "octile".into(), height: map.height(), width: map.width(), rows }
    }

    /// Everything after the `map` line.
    pub fn body(&self) -> String {
        let mut s = String::new();
        for row in &self.rows {
            s.push_str(row);
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridenv::Cell;

    #[test]
    fn smallest_map() {
        let m = parse_movingai("type octile\nheight 2\nwidth 2\nmap\n.@\n..\n").unwrap();
        let g = m.to_grid().unwrap();
        assert!(!g.is_free(Cell::new(0, 1)));
        assert_eq!(g.free_count(), 3);
    }

    #[test]
    fn header_is_case_insensitive() {
        assert!(parse_movingai("TYPE octile\nHeight 1\nWIDTH 2\nMAP\n.T").is_ok());
    }

    #[test]
    fn missing_row_points_at_it() {
        let err = parse_movingai("type octile\nheight 3\nwidth 2\nmap\n..\n..\n").unwrap_err();
        assert_eq!(err, MapError::Parse { line: 7, column: 1, message: "missing row 3 of 3".into() });
    }

    #[test]
    fn unknown_char_column() {
        let err = parse_movingai("type octile\nheight 1\nwidth 3\nmap\n.X.\n").unwrap_err();
        assert!(matches!(err, MapError::Parse { line: 5, column: 2, .. }));
    }

    #[test]
    fn body_round_trip_keeps_characters() {
        let text = "type octile\nheight 2\nwidth 3\nmap\n.GT\nO@.\n";
        let m = parse_movingai(text).unwrap();
        assert_eq!(serialize_movingai(&m), text);
    }
}
