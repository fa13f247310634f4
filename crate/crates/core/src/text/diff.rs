use std::collections::HashMap;
use std::ops::Range;

use super::{DiffScript, Op, OpKind, TextError};

/// Default document size limit (1 MiB of UTF-8).
pub const DEFAULT_MAX_BYTES: usize = 1 << 20;
/// Above this many chars (on either side) the diff runs on lines first.
pub const DEFAULT_COARSEN_ABOVE: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiffConfig {
    pub max_bytes: usize,
    pub coarsen_above: usize,
}

impl Default for DiffConfig {
    fn default() -> Self {
        DiffConfig {
            max_bytes: DEFAULT_MAX_BYTES,
            coarsen_above: DEFAULT_COARSEN_ABOVE,
        }
    }
}

impl DiffConfig {
    pub fn diff(&self, old: &str, new: &str) -> Result<DiffScript, TextError> {
        for text in [old, new] {
            if text.len() > self.max_bytes {
                return Err(TextError::SizeLimitExceeded {
                    size: text.len(),
                    limit: self.max_bytes,
                });
            }
        }
        let a: Vec<char> = old.chars().collect();
        let b: Vec<char> = new.chars().collect();
        let mut builder = ScriptBuilder::default();
        if a.len().max(b.len()) > self.coarsen_above {
            diff_by_lines(&a, &b, self.coarsen_above, &mut builder);
        } else {
            diff_chars(&a, &b, &mut builder);
        }
        Ok(builder.script)
    }
}

/// Diffs two texts into a canonical script.
///
/// Up to [`DEFAULT_COARSEN_ABOVE`] chars the script is minimal in total
/// inserted plus deleted chars. Larger inputs are diffed line by line first,
/// with a char-level pass inside each changed block that fits the limit.
pub fn compute_diff(old: &str, new: &str) -> Result<DiffScript, TextError> {
    DiffConfig::default().diff(old, new)
}

#[derive(Default)]
struct ScriptBuilder {
    script: DiffScript,
}

impl ScriptBuilder {
    fn emit(&mut self, kind: OpKind, chars: &[char]) {
        if !chars.is_empty() {
            self.script.push(Op::new(kind, chars.iter().collect::<String>()));
        }
    }
}

/// Change events over token index ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Hunk {
    Equal(Range<usize>),
    Delete(Range<usize>),
    Insert(Range<usize>),
}

fn diff_chars(a: &[char], b: &[char], out: &mut ScriptBuilder) {
    for hunk in myers(a, b) {
        match hunk {
            Hunk::Equal(r) => out.emit(OpKind::Equal, &a[r]),
            Hunk::Delete(r) => out.emit(OpKind::Delete, &a[r]),
            Hunk::Insert(r) => out.emit(OpKind::Insert, &b[r]),
        }
    }
}

fn split_lines(chars: &[char]) -> Vec<Range<usize>> {
    let mut lines = Vec::new();
    let mut start = 0;
    for (i, &c) in chars.iter().enumerate() {
        if c == '\n' {
            lines.push(start..i + 1);
            start = i + 1;
        }
    }
    if start < chars.len() {
        lines.push(start..chars.len());
    }
    lines
}

fn diff_by_lines<'t>(a: &'t [char], b: &'t [char], fine_limit: usize, out: &mut ScriptBuilder) {
    let a_lines = split_lines(a);
    let b_lines = split_lines(b);
    let mut interner: HashMap<&'t [char], u32> = HashMap::new();
    let mut intern = |s: &'t [char]| -> u32 {
        let next = interner.len() as u32;
        *interner.entry(s).or_insert(next)
    };
    let a_ids: Vec<u32> = a_lines.iter().map(|r| intern(&a[r.clone()])).collect();
    let b_ids: Vec<u32> = b_lines.iter().map(|r| intern(&b[r.clone()])).collect();

    let span = |lines: &[Range<usize>], r: &Range<usize>| -> Range<usize> {
        if r.is_empty() {
            0..0
        } else {
            lines[r.start].start..lines[r.end - 1].end
        }
    };

    // Pending change block: a deleted line range followed by an inserted one.
    let mut pending_del: Range<usize> = 0..0;
    let mut pending_ins: Range<usize> = 0..0;
    let flush = |del: &mut Range<usize>, ins: &mut Range<usize>, out: &mut ScriptBuilder| {
        let da = span(&a_lines, del);
        let ib = span(&b_lines, ins);
        if da.len().max(ib.len()) <= fine_limit {
            diff_chars(&a[da], &b[ib], out);
        } else {
            out.emit(OpKind::Delete, &a[da]);
            out.emit(OpKind::Insert, &b[ib]);
        }
        *del = 0..0;
        *ins = 0..0;
    };

    for hunk in myers(&a_ids, &b_ids) {
        match hunk {
            Hunk::Equal(r) => {
                flush(&mut pending_del, &mut pending_ins, out);
                out.emit(OpKind::Equal, &a[span(&a_lines, &r)]);
            }
            Hunk::Delete(r) => {
                pending_del = if pending_del.is_empty() { r } else { pending_del.start..r.end };
            }
            Hunk::Insert(r) => {
                pending_ins = if pending_ins.is_empty() { r } else { pending_ins.start..r.end };
            }
        }
    }
    flush(&mut pending_del, &mut pending_ins, out);
}

/// Linear-space Myers diff (divide and conquer on the middle snake).
/// Produces a minimal insert/delete script over tokens.
fn myers<T: Eq>(a: &[T], b: &[T]) -> Vec<Hunk> {
    let max_d = (a.len() + b.len()).div_ceil(2) + 1;
    let mut vf = VArray::new(max_d);
    let mut vb = VArray::new(max_d);
    let mut hunks = Vec::new();
    conquer(a, 0..a.len(), b, 0..b.len(), &mut vf, &mut vb, &mut hunks);
    merge_hunks(hunks)
}

fn merge_hunks(hunks: Vec<Hunk>) -> Vec<Hunk> {
    let mut out: Vec<Hunk> = Vec::with_capacity(hunks.len());
    for h in hunks {
        match (out.last_mut(), &h) {
            (Some(Hunk::Equal(prev)), Hunk::Equal(r)) if prev.end == r.start => prev.end = r.end,
            (Some(Hunk::Delete(prev)), Hunk::Delete(r)) if prev.end == r.start => prev.end = r.end,
            (Some(Hunk::Insert(prev)), Hunk::Insert(r)) if prev.end == r.start => prev.end = r.end,
            _ => {
                let empty = match &h {
                    Hunk::Equal(r) | Hunk::Delete(r) | Hunk::Insert(r) => r.is_empty(),
                };
                if !empty {
                    out.push(h);
                }
            }
        }
    }
    out
}

struct VArray {
    offset: isize,
    data: Vec<usize>,
}

impl VArray {
    fn new(max_d: usize) -> Self {
        let offset = max_d as isize + 1;
        VArray {
            offset,
            data: vec![0; 2 * max_d + 3],
        }
    }

    fn get(&self, k: isize) -> usize {
        self.data[(k + self.offset) as usize]
    }

    fn set(&mut self, k: isize, v: usize) {
        self.data[(k + self.offset) as usize] = v;
    }
}

fn common_prefix<T: Eq>(a: &[T], b: &[T]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

fn common_suffix<T: Eq>(a: &[T], b: &[T]) -> usize {
    a.iter()
        .rev()
        .zip(b.iter().rev())
        .take_while(|(x, y)| x == y)
        .count()
}

fn find_middle_snake<T: Eq>(
    a: &[T],
    ar: Range<usize>,
    b: &[T],
    br: Range<usize>,
    vf: &mut VArray,
    vb: &mut VArray,
) -> Option<(usize, usize)> {
    let n = ar.len();
    let m = br.len();
    let delta = n as isize - m as isize;
    let odd = delta & 1 == 1;
    vf.set(1, 0);
    vb.set(1, 0);
    let d_max = (n + m).div_ceil(2) + 1;

    for d in 0..d_max as isize {
        let mut k = d;
        while k >= -d {
            let mut x = if k == -d || (k != d && vf.get(k - 1) < vf.get(k + 1)) {
                vf.get(k + 1)
            } else {
                vf.get(k - 1) + 1
            };
            let y = (x as isize - k) as usize;
            let (x0, y0) = (x, y);
            if x < n && y < m {
                x += common_prefix(&a[ar.start + x..ar.end], &b[br.start + y..br.end]);
            }
            vf.set(k, x);
            if odd && (k - delta).abs() <= d - 1 && vf.get(k) + vb.get(-(k - delta)) >= n {
                return Some((ar.start + x0, br.start + y0));
            }
            k -= 2;
        }

        let mut k = d;
        while k >= -d {
            let mut x = if k == -d || (k != d && vb.get(k - 1) < vb.get(k + 1)) {
                vb.get(k + 1)
            } else {
                vb.get(k - 1) + 1
            };
            let mut y = (x as isize - k) as usize;
            if x < n && y < m {
                let adv = common_suffix(&a[ar.start..ar.start + n - x], &b[br.start..br.start + m - y]);
                x += adv;
                y += adv;
            }
            vb.set(k, x);
            if !odd && (k - delta).abs() <= d && vb.get(k) + vf.get(-(k - delta)) >= n {
                return Some((ar.start + n - x, br.start + m - y));
            }
            k -= 2;
        }
    }
    None
}

fn conquer<T: Eq>(
    a: &[T],
    mut ar: Range<usize>,
    b: &[T],
    mut br: Range<usize>,
    vf: &mut VArray,
    vb: &mut VArray,
    out: &mut Vec<Hunk>,
) {
    let prefix = common_prefix(&a[ar.clone()], &b[br.clone()]);
    if prefix > 0 {
        out.push(Hunk::Equal(ar.start..ar.start + prefix));
    }
    ar.start += prefix;
    br.start += prefix;

    let suffix = common_suffix(&a[ar.clone()], &b[br.clone()]);
    let suffix_hunk = Hunk::Equal(ar.end - suffix..ar.end);
    ar.end -= suffix;
    br.end -= suffix;

    if ar.is_empty() && br.is_empty() {
        // nothing
    } else if br.is_empty() {
        out.push(Hunk::Delete(ar.clone()));
    } else if ar.is_empty() {
        out.push(Hunk::Insert(br.clone()));
    } else if let Some((x, y)) = find_middle_snake(a, ar.clone(), b, br.clone(), vf, vb) {
        conquer(a, ar.start..x, b, br.start..y, vf, vb, out);
        conquer(a, x..ar.end, b, y..br.end, vf, vb, out);
    } else {
        out.push(Hunk::Delete(ar.clone()));
        out.push(Hunk::Insert(br.clone()));
    }

    if suffix > 0 {
        out.push(suffix_hunk);
    }
}

#[cfg(test)]
mod tests {
    use super::super::apply_strict;
    use super::*;

    #[test]
    fn identity_and_empty_source() {
        assert_eq!(compute_diff("abc", "abc").unwrap().ops(), &[Op::equal("abc")]);
        assert_eq!(compute_diff("", "abc").unwrap().ops(), &[Op::insert("abc")]);
        assert!(compute_diff("", "").unwrap().is_empty());
        assert_eq!(compute_diff("abc", "").unwrap().ops(), &[Op::delete("abc")]);
    }

    #[test]
    fn single_substitution_costs_two() {
        let script = compute_diff("The cat sat", "The hat sat").unwrap();
        assert_eq!(script.edit_cost(), 2);
        assert_eq!(apply_strict("The cat sat", &script).unwrap(), "The hat sat");
        assert!(script.is_canonical());
    }

    #[test]
    fn multibyte_chars_are_single_units() {
        let script = compute_diff("naïve café", "naive cafés").unwrap();
        assert_eq!(apply_strict("naïve café", &script).unwrap(), "naive cafés");
        assert_eq!(script.edit_cost(), 3);
    }

    #[test]
    fn size_limit_is_enforced() {
        let cfg = DiffConfig {
            max_bytes: 4,
            ..DiffConfig::default()
        };
        assert_eq!(
            cfg.diff("abcde", ""),
            Err(TextError::SizeLimitExceeded { size: 5, limit: 4 })
        );
    }

    #[test]
    fn line_coarsening_round_trips() {
        let cfg = DiffConfig {
            coarsen_above: 20,
            ..DiffConfig::default()
        };
        let old = "alpha\nbravo\ncharlie\ndelta\necho\nfoxtrot";
        let new = "alpha\nbravo!\ncharlie\necho\nfoxtrot\ngolf\n";
        let script = cfg.diff(old, new).unwrap();
        assert!(script.is_canonical());
        assert_eq!(apply_strict(old, &script).unwrap(), new);

        let tiny = DiffConfig {
            coarsen_above: 3,
            ..DiffConfig::default()
        };
        let script = tiny.diff(old, new).unwrap();
        assert_eq!(apply_strict(old, &script).unwrap(), new);
    }

    #[test]
    fn myers_hunks_cover_both_sides() {
        let a: Vec<char> = "abcabba".chars().collect();
        let b: Vec<char> = "cbabac".chars().collect();
        let hunks = myers(&a, &b);
        let (mut ai, mut bi, mut cost) = (0, 0, 0);
        for h in hunks {
            match h {
                Hunk::Equal(r) => {
                    assert_eq!(r.start, ai);
                    ai = r.end;
                    bi += r.len();
                }
                Hunk::Delete(r) => {
                    assert_eq!(r.start, ai);
                    ai = r.end;
                    cost += r.len();
                }
                Hunk::Insert(r) => {
                    assert_eq!(r.start, bi);
                    bi = r.end;
                    cost += r.len();
                }
            }
        }
        assert_eq!((ai, bi), (7, 6));
        // Classic Myers example: D = 5.
        assert_eq!(cost, 5);
    }
}
