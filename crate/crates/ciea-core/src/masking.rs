//! Masked-query construction: query token segments that occur verbatim in
//! the positive document's text are replaced by `<mask>`, leaving exactly
//! the query content the document text does not cover.

use crate::error::{Error, Result};
use crate::vocab::{TokenSequence, MASK_ID};

/// A query with matched segments masked out. The token count equals the
/// original query's, so positional alignment is preserved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedQuery {
    pub tokens: TokenSequence,
    pub masked_spans: Vec<(usize, usize)>,
}

/// All maximal contiguous query sub-sequences of length ≥ `min_len` that
/// occur verbatim in `doc_text`, chosen greedily left-to-right with the
/// longest match first; returned spans are non-overlapping `(start, len)`.
pub fn find_overlap_segments(
    query: &[usize],
    doc_text: &[usize],
    min_len: usize,
) -> Result<Vec<(usize, usize)>> {
    if min_len == 0 {
        return Err(Error::contract("min_len must be at least 1"));
    }
    let mut spans = Vec::new();
    let mut i = 0;
    while i < query.len() {
        let mut best = 0;
        let max_len = query.len() - i;
        for len in (min_len..=max_len).rev() {
            if contains_subsequence(doc_text, &query[i..i + len]) {
                best = len;
                break;
            }
        }
        if best >= min_len {
            spans.push((i, best));
            i += best;
        } else {
            i += 1;
        }
    }
    Ok(spans)
}

fn contains_subsequence(haystack: &[usize], needle: &[usize]) -> bool {
    if needle.len() > haystack.len() {
        return false;
    }
    haystack.windows(needle.len()).any(|w| w == needle)
}

/// Replaces the span positions with `<mask>`; spans must be in-bounds and
/// pairwise disjoint.
pub fn mask_query(query: &TokenSequence, spans: &[(usize, usize)]) -> Result<MaskedQuery> {
    let mut ids = query.ids().to_vec();
    let mut covered = vec![false; ids.len()];
    for &(start, len) in spans {
        if len == 0 || start + len > ids.len() {
            return Err(Error::contract(format!(
                "span ({start},{len}) outside query of length {}",
                ids.len()
            )));
        }
        for j in start..start + len {
            if covered[j] {
                return Err(Error::contract(format!(
                    "span ({start},{len}) overlaps an earlier span"
                )));
            }
            covered[j] = true;
            ids[j] = MASK_ID;
        }
    }
    Ok(MaskedQuery {
        tokens: TokenSequence::new(ids, usize::MAX)?,
        masked_spans: spans.to_vec(),
    })
}

/// Convenience: find segments and mask them in one step.
pub fn build_masked_query(
    query: &TokenSequence,
    doc_text: &TokenSequence,
    min_len: usize,
) -> Result<MaskedQuery> {
    let spans = find_overlap_segments(query.ids(), doc_text.ids(), min_len)?;
    mask_query(query, &spans)
}
