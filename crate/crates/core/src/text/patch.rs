use serde::{Deserialize, Serialize};

use super::{DiffScript, OpKind};

/// Context chars carried in front of each patch.
pub const DEFAULT_CONTEXT_LEN: usize = 4;
/// How far (in chars, either direction) fuzzy application searches.
pub const DEFAULT_FUZZY_WINDOW: usize = 32;

/// A self-contained change region: `deleted` is replaced by `inserted` at
/// `source_position`, and the text right before it is expected to end with
/// `context`.
///
/// The context is taken from the target side of the script, i.e. the text as
/// it reads once every earlier patch of the same script has been applied.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patch {
    pub context: String,
    pub deleted: String,
    pub inserted: String,
    pub source_position: usize,
}

impl Patch {
    fn net_len(&self) -> isize {
        self.inserted.chars().count() as isize - self.deleted.chars().count() as isize
    }
}

/// Splits a script into one patch per change region, in source order.
pub fn to_patches(script: &DiffScript, context_len: usize) -> Vec<Patch> {
    let mut patches = Vec::new();
    let mut target: Vec<char> = Vec::new();
    let mut src = 0usize;
    let mut open: Option<Patch> = None;

    for op in script.ops() {
        match op.kind() {
            OpKind::Equal => {
                if let Some(p) = open.take() {
                    patches.push(p);
                }
                target.extend(op.text().chars());
                src += op.len();
            }
            OpKind::Delete | OpKind::Insert => {
                let patch = open.get_or_insert_with(|| {
                    let from = target.len().saturating_sub(context_len);
                    Patch {
                        context: target[from..].iter().collect(),
                        deleted: String::new(),
                        inserted: String::new(),
                        source_position: src,
                    }
                });
                if op.kind() == OpKind::Delete {
                    patch.deleted.push_str(op.text());
                    src += op.len();
                } else {
                    patch.inserted.push_str(op.text());
                    target.extend(op.text().chars());
                }
            }
        }
    }
    if let Some(p) = open {
        patches.push(p);
    }
    patches.retain(|p| !(p.deleted.is_empty() && p.inserted.is_empty()));
    patches
}

/// Applies patches in ascending `source_position`, each at the nearest offset
/// within `window` chars of its expected position where `context + deleted`
/// matches exactly. Patches that find no match are skipped.
///
/// The expected position of each patch is corrected by the net length change
/// and the placement drift of the patches applied before it. A `window` of 0
/// makes this a strict, position-exact application.
pub fn apply_fuzzy(text: &str, patches: &[Patch], window: usize) -> (String, Vec<bool>) {
    let mut chars: Vec<char> = text.chars().collect();
    let mut applied = vec![false; patches.len()];
    let mut order: Vec<usize> = (0..patches.len()).collect();
    order.sort_by_key(|&i| patches[i].source_position);

    let mut shift: isize = 0;
    for i in order {
        let patch = &patches[i];
        let context: Vec<char> = patch.context.chars().collect();
        let deleted: Vec<char> = patch.deleted.chars().collect();
        let expected = patch.source_position as isize + shift;

        if let Some(pos) = find_nearest(&chars, &context, &deleted, expected, window) {
            let inserted: Vec<char> = patch.inserted.chars().collect();
            chars.splice(pos..pos + deleted.len(), inserted);
            shift += pos as isize - expected + patch.net_len();
            applied[i] = true;
        }
    }
    (chars.into_iter().collect(), applied)
}

fn find_nearest(
    text: &[char],
    context: &[char],
    deleted: &[char],
    expected: isize,
    window: usize,
) -> Option<usize> {
    let matches_at = |pos: isize| -> bool {
        if pos < context.len() as isize {
            return false;
        }
        let pos = pos as usize;
        if pos + deleted.len() > text.len() {
            return false;
        }
        text[pos - context.len()..pos] == *context && text[pos..pos + deleted.len()] == *deleted
    };
    for distance in 0..=window as isize {
        if matches_at(expected - distance) {
            return Some((expected - distance) as usize);
        }
        if distance > 0 && matches_at(expected + distance) {
            return Some((expected + distance) as usize);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::super::{apply_strict, compute_diff, Op};
    use super::*;

    #[test]
    fn single_region_patch() {
        let script = DiffScript::canonical([
            Op::equal("abcd"),
            Op::delete("X"),
            Op::insert("Y"),
            Op::equal("ef"),
        ]);
        assert_eq!(
            to_patches(&script, 4),
            vec![Patch {
                context: "abcd".into(),
                deleted: "X".into(),
                inserted: "Y".into(),
                source_position: 4,
            }]
        );
    }

    #[test]
    fn no_change_no_patch() {
        let script = DiffScript::canonical([Op::equal("ab")]);
        assert!(to_patches(&script, 4).is_empty());
    }

    #[test]
    fn two_regions_reapply_strictly() {
        let script = DiffScript::canonical([Op::insert("Q"), Op::equal("zz"), Op::delete("z")]);
        let patches = to_patches(&script, 1);
        let positions: Vec<usize> = patches.iter().map(|p| p.source_position).collect();
        assert_eq!(positions, vec![0, 2]);

        let expected = apply_strict("zzz", &script).unwrap();
        let (out, applied) = apply_fuzzy("zzz", &patches, 0);
        assert_eq!(applied, vec![true, true]);
        assert_eq!(out, expected);
    }

    #[test]
    fn exact_context_applies_in_place() {
        let script = compute_diff("Roads: TBD", "Roads: open").unwrap();
        let patches = to_patches(&script, DEFAULT_CONTEXT_LEN);
        let (out, applied) = apply_fuzzy("Roads: TBD", &patches, DEFAULT_FUZZY_WINDOW);
        assert_eq!(out, "Roads: open");
        assert!(applied.iter().all(|&a| a));
    }

    #[test]
    fn shifted_text_applies_later() {
        let base = "status: roads TBD, power ok";
        let script = compute_diff(base, "status: roads closed, power ok").unwrap();
        let patches = to_patches(&script, DEFAULT_CONTEXT_LEN);
        assert_eq!(patches.len(), 1);

        let shifted = format!("12345{base}");
        let (out, applied) = apply_fuzzy(&shifted, &patches, DEFAULT_FUZZY_WINDOW);
        assert_eq!(applied, vec![true]);

        // Oracle: the same patch moved by hand 5 chars to the right.
        let mut moved = patches.clone();
        moved[0].source_position += 5;
        let (oracle, _) = apply_fuzzy(&shifted, &moved, 0);
        assert_eq!(out, oracle);
        assert_eq!(out, "12345status: roads closed, power ok");
    }

    #[test]
    fn missing_context_skips_patch() {
        let patches = vec![Patch {
            context: "qqqq".into(),
            deleted: "zz".into(),
            inserted: "y".into(),
            source_position: 3,
        }];
        let (out, applied) = apply_fuzzy("abcdefgh", &patches, DEFAULT_FUZZY_WINDOW);
        assert_eq!(applied, vec![false]);
        assert_eq!(out, "abcdefgh");
    }

    #[test]
    fn window_bounds_the_search() {
        let patches = vec![Patch {
            context: "ab".into(),
            deleted: "c".into(),
            inserted: "C".into(),
            source_position: 2,
        }];
        let far = format!("{}abc", "x".repeat(40));
        let (out, applied) = apply_fuzzy(&far, &patches, DEFAULT_FUZZY_WINDOW);
        assert_eq!((out.as_str(), applied[0]), (far.as_str(), false));
        let near = format!("{}abc", "x".repeat(30));
        let (out, applied) = apply_fuzzy(&near, &patches, DEFAULT_FUZZY_WINDOW);
        assert!(applied[0]);
        assert!(out.ends_with("abC"));
    }
}
