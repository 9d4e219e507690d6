//! The 37-class character set: CTC blank at index 0, then `a`..`z` and
//! `0`..`9`. Text is case-folded before lookup.

pub const BLANK: usize = 0;
pub const NUM_CLASSES: usize = 37;

const SYMBOLS: &[u8; 36] = b"abcdefghijklmnopqrstuvwxyz0123456789";

/// Class index of `c` after case folding, or `None` outside the alphabet.
pub fn class_of(c: char) -> Option<usize> {
    let c = c.to_ascii_lowercase();
    match c {
        'a'..='z' => Some(c as usize - 'a' as usize + 1),
        '0'..='9' => Some(c as usize - '0' as usize + 27),
        _ => None,
    }
}

pub fn symbol_of(class: usize) -> Option<char> {
    (1..NUM_CLASSES)
        .contains(&class)
        .then(|| SYMBOLS[class - 1] as char)
}

/// Encoded label sequence plus the characters that were dropped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub labels: Vec<usize>,
    pub dropped: Vec<char>,
}

pub fn encode(text: &str) -> Encoded {
    let mut labels = Vec::with_capacity(text.len());
    let mut dropped = Vec::new();
    for c in text.chars() {
        match class_of(c) {
            Some(k) => labels.push(k),
            None => dropped.push(c),
        }
    }
    Encoded { labels, dropped }
}

pub fn decode(labels: &[usize]) -> String {
    labels.iter().filter_map(|&k| symbol_of(k)).collect()
}

/// Case-folds `text` and strips everything outside the alphabet.
pub fn normalize(text: &str) -> String {
    decode(&encode(text).labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_table() {
        assert_eq!(encode("ab1").labels, vec![1, 2, 28]);
        assert_eq!(encode("HELLO").labels, vec![8, 5, 12, 12, 15]);
        assert_eq!(class_of('z'), Some(26));
        assert_eq!(class_of('0'), Some(27));
        assert_eq!(class_of('9'), Some(36));
    }

    #[test]
    fn out_of_alphabet_symbols_are_dropped() {
        let e = encode("héllo");
        assert_eq!(decode(&e.labels), "hllo");
        assert_eq!(e.dropped, vec!['é']);
        assert_eq!(normalize("Don't-Stop!"), "dontstop");
    }

    #[test]
    fn decode_skips_blank() {
        assert_eq!(decode(&[BLANK, 1, BLANK, 36]), "a9");
        assert_eq!(symbol_of(37), None);
    }
}
