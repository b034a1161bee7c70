//! Report tokenizer: lowercase, isolate punctuation, keep alphabetic words
//! and the sentence period.

const ISOLATED: &[char] = &[',', ';', ':', '!', '?', '(', ')', '[', ']', '"'];

/// Splits `text` into lowercase alphabetic tokens plus `"."`.
///
/// A period is split off only when followed by whitespace or the end of the
/// text, so `"e.g"`-style fragments stay glued and are then dropped as
/// non-alphabetic. The other punctuation in [`ISOLATED`] is always split off
/// (and then dropped).
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let mut spaced = String::with_capacity(lower.len() + 8);
    for (i, &c) in chars.iter().enumerate() {
        let period_end = c == '.' && chars.get(i + 1).is_none_or(|n| n.is_whitespace());
        if period_end || ISOLATED.contains(&c) {
            spaced.push(' ');
            spaced.push(c);
            spaced.push(' ');
        } else {
            spaced.push(c);
        }
    }
    spaced
        .split_whitespace()
        .filter(|t| *t == "." || t.chars().all(char::is_alphabetic))
        .map(str::to_owned)
        .collect()
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(tokenize("There is NO effusion."), ["there", "is", "no", "effusion", "."]);
        assert_eq!(tokenize("x-ray 123 ok"), ["ok"]);
        assert!(tokenize("").is_empty());
    }

    #[test]
    fn punctuation_rules() {
        assert_eq!(tokenize("Heart (normal), lungs: clear.Stable"), ["heart", "normal", "lungs"]);
        assert_eq!(tokenize("a. b .\nc"), ["a", ".", "b", ".", "c"]);
        assert_eq!(tokenize("i.e. fine"), [".", "fine"]);
    }
}
