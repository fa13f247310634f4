use super::{DiffScript, OpKind, TextError};

/// Which side of an insertion made exactly at a position the mapped position
/// lands on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bias {
    /// Stay before text inserted at this position.
    Left,
    /// Move past text inserted at this position.
    Right,
}

/// Maps a source offset through `script` to the matching target offset.
///
/// Offsets inside an EQUAL span map through exactly, offsets strictly inside
/// a DELETE snap to where the deletion starts on the target side, and text
/// inserted exactly at the offset pushes it right.
pub fn map_position(script: &DiffScript, pos: usize) -> Result<usize, TextError> {
    map_position_with(script, pos, Bias::Right)
}

pub fn map_position_with(script: &DiffScript, pos: usize, bias: Bias) -> Result<usize, TextError> {
    let len = script.source_len();
    if pos > len {
        return Err(TextError::PositionOutOfRange { pos, len });
    }
    let mut src = 0usize;
    let mut dst = 0usize;
    for op in script.ops() {
        match op.kind() {
            OpKind::Insert => {
                if src == pos && bias == Bias::Left {
                    return Ok(dst);
                }
                dst += op.len();
            }
            OpKind::Equal => {
                if pos < src + op.len() {
                    return Ok(dst + (pos - src));
                }
                src += op.len();
                dst += op.len();
            }
            OpKind::Delete => {
                if pos < src + op.len() {
                    return Ok(dst);
                }
                src += op.len();
            }
        }
    }
    Ok(dst)
}

#[cfg(test)]
mod tests {
    use super::super::Op;
    use super::*;

    fn filler(n: usize) -> String {
        "·".repeat(n)
    }

    #[test]
    fn insertion_shifts_right() {
        let script = DiffScript::canonical([Op::insert("12345"), Op::equal(filler(20))]);
        assert_eq!(map_position(&script, 10).unwrap(), 15);
        assert_eq!(map_position(&script, 0).unwrap(), 5);
        assert_eq!(map_position_with(&script, 0, Bias::Left).unwrap(), 0);
    }

    #[test]
    fn deletion_shifts_left() {
        let script = DiffScript::canonical([Op::delete("abc"), Op::equal(filler(20))]);
        assert_eq!(map_position(&script, 10).unwrap(), 7);
    }

    #[test]
    fn inside_delete_snaps_to_start() {
        let script = DiffScript::canonical([Op::equal("ab"), Op::delete("cd"), Op::equal("ef")]);
        assert_eq!(map_position(&script, 3).unwrap(), 2);
        assert_eq!(map_position(&script, 4).unwrap(), 2);
        assert_eq!(map_position(&script, 6).unwrap(), 4);
    }

    #[test]
    fn replacement_boundaries() {
        let script = DiffScript::canonical([Op::delete("cd"), Op::insert("XYZ")]);
        assert_eq!(map_position(&script, 0).unwrap(), 0);
        assert_eq!(map_position(&script, 2).unwrap(), 3);
        assert_eq!(map_position_with(&script, 2, Bias::Left).unwrap(), 0);
    }

    #[test]
    fn out_of_range() {
        let script = DiffScript::canonical([Op::equal("ab")]);
        assert_eq!(
            map_position(&script, 3),
            Err(TextError::PositionOutOfRange { pos: 3, len: 2 })
        );
    }
}
