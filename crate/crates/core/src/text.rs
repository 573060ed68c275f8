//! Tokenization shared by the feature hasher and the relevance oracle.

/// Lowercases and splits on whitespace and punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| c.is_whitespace() || (c.is_ascii_punctuation() || is_wide_punct(c)))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn is_wide_punct(c: char) -> bool {
    matches!(c, '、' | '。' | '，' | '！' | '？' | '「' | '」' | '・' | '（' | '）')
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_and_lowercases() {
        assert_eq!(tokenize("Taco-Bar, 24h!"), vec!["taco", "bar", "24h"]);
        assert_eq!(tokenize("牛肉麵 珍珠奶茶、雞排"), vec!["牛肉麵", "珍珠奶茶", "雞排"]);
        assert!(tokenize("  ,, ").is_empty());
    }
}
