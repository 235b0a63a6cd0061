//! Splits long content into bounded, overlapping chunks.

pub const CHUNK_CHARS: usize = 2000;
pub const CHUNK_OVERLAP: usize = 200;

/// Content of at most `limit` characters is returned whole. Longer content is
/// cut at the last whitespace inside each `limit`-character window (or hard at
/// the limit when there is none); the next chunk starts `overlap` characters
/// before the cut.
pub fn chunk(content: &str, limit: usize, overlap: usize) -> Vec<String> {
    assert!(overlap < limit, "overlap must be smaller than the chunk limit");
    let chars: Vec<char> = content.chars().collect();
    if chars.len() <= limit {
        return vec![content.to_string()];
    }
    let mut out = Vec::new();
    let mut start = 0usize;
    loop {
        if chars.len() - start <= limit {
            out.push(chars[start..].iter().collect());
            break;
        }
        let window = &chars[start..start + limit];
        let cut = window
            .iter()
            .rposition(|c| c.is_whitespace())
            .filter(|&p| p > overlap)
            .unwrap_or(limit);
        out.push(window[..cut].iter().collect());
        start += cut - overlap;
    }
    out
}
