//! graph6 text encoding, short form (n ≤ 62).
//!
//! A line is one size byte `n + 63` followed by the upper triangle of the
//! adjacency matrix in column order (x(0,1), x(0,2), x(1,2), x(0,3), ...),
//! packed six bits per byte, most significant bit first, each byte offset
//! by 63 and the last one zero-padded.

use super::Graph;
use crate::error::{Error, Result};

const OFFSET: u8 = 63;
const MAX_SHORT_N: usize = 62;
const HEADER: &str = ">>graph6<<";

fn err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Graph6 {
        offset,
        reason: reason.into(),
    }
}

pub fn parse_graph6(line: &str) -> Result<Graph> {
    let line = line.trim_end_matches(['\n', '\r']);
    let (skip, body) = match line.strip_prefix(HEADER) {
        Some(rest) => (HEADER.len(), rest.as_bytes()),
        None => (0, line.as_bytes()),
    };
    let Some(&first) = body.first() else {
        return Err(err(skip, "empty line"));
    };
    if !(OFFSET..=OFFSET + MAX_SHORT_N as u8).contains(&first) {
        return Err(err(skip, format!("size byte {first} outside the short form (n ≤ {MAX_SHORT_N})")));
    }
    let n = usize::from(first - OFFSET);
    let bits = n * n.saturating_sub(1) / 2;
    let expected = bits.div_ceil(6);
    let data = &body[1..];
    if data.len() < expected {
        return Err(err(skip + body.len(), format!("truncated: {expected} data bytes needed, {} found", data.len())));
    }
    if data.len() > expected {
        return Err(err(skip + 1 + expected, "trailing bytes after adjacency data"));
    }
    for (i, &b) in data.iter().enumerate() {
        if !(OFFSET..=126).contains(&b) {
            return Err(err(skip + 1 + i, format!("byte {b} outside the printable range 63..=126")));
        }
    }
    let bit = |k: usize| (data[k / 6] - OFFSET) >> (5 - k % 6) & 1 == 1;
    let mut edges = Vec::new();
    let mut k = 0;
    for j in 1..n {
        for i in 0..j {
            if bit(k) {
                edges.push((i, j));
            }
            k += 1;
        }
    }
    Graph::from_edges(n, &edges)
}

pub fn encode_graph6(g: &Graph) -> Result<String> {
    let n = g.n();
    if n > MAX_SHORT_N {
        return Err(Error::Graph(format!("graph6 short form supports n ≤ {MAX_SHORT_N}, got {n}")));
    }
    let mut out = vec![OFFSET + n as u8];
    let mut acc = 0u8;
    let mut filled = 0;
    for j in 1..n {
        for i in 0..j {
            acc = (acc << 1) | u8::from(g.has_edge(i, j));
            filled += 1;
            if filled == 6 {
                out.push(acc + OFFSET);
                acc = 0;
                filled = 0;
            }
        }
    }
    if filled > 0 {
        out.push((acc << (6 - filled)) + OFFSET);
    }
    Ok(String::from_utf8(out).expect("graph6 bytes are ASCII"))
}

/// Parses every non-empty line of a graph6 file.
pub fn parse_graph6_lines(text: &str) -> Result<Vec<Graph>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| parse_graph6(l.trim()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn triangle() {
        let g = parse_graph6("Bw").unwrap();
        assert_eq!(g.n(), 3);
        assert_eq!(g.edges(), vec![(0, 1), (0, 2), (1, 2)]);
    }

    #[test]
    fn two_isolated_nodes() {
        let g = parse_graph6("A?").unwrap();
        assert_eq!(g.n(), 2);
        assert_eq!(g.edge_count(), 0);
    }

    #[test]
    fn header_and_empty_graph() {
        assert_eq!(parse_graph6(">>graph6<<Bw").unwrap().edge_count(), 3);
        assert_eq!(parse_graph6("?").unwrap().n(), 0);
    }

    #[test]
    fn errors_carry_offsets() {
        match parse_graph6("G???") {
            Err(Error::Graph6 { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("{other:?}"),
        }
        match parse_graph6("Bw!") {
            Err(Error::Graph6 { offset, .. }) => assert_eq!(offset, 2),
            other => panic!("{other:?}"),
        }
        match parse_graph6("C\x7f") {
            Err(Error::Graph6 { offset, .. }) => assert_eq!(offset, 1),
            other => panic!("{other:?}"),
        }
        assert!(parse_graph6("").is_err());
        assert!(parse_graph6("~").is_err());
    }

    #[test]
    fn bundled_files_round_trip() {
        for text in [
            include_str!("../../data/regular/RegN8D3.g6"),
            include_str!("../../data/regular/RegN10D4.g6"),
        ] {
            for line in text.lines() {
                let g = parse_graph6(line).unwrap();
                assert_eq!(encode_graph6(&g).unwrap(), line);
            }
        }
    }

    proptest! {
        #[test]
        fn encode_parse_round_trip(n in 0usize..20, seed in any::<u64>()) {
            let mut edges = Vec::new();
            let mut state = seed;
            for j in 1..n {
                for i in 0..j {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    if state >> 63 == 1 {
                        edges.push((i, j));
                    }
                }
            }
            let g = Graph::from_edges(n, &edges).unwrap();
            let line = encode_graph6(&g).unwrap();
            let back = parse_graph6(&line).unwrap();
            prop_assert_eq!(&back, &g);
            prop_assert_eq!(encode_graph6(&back).unwrap(), line);
        }
    }
}
