use super::Lang;
use crate::error::{Error, Result};

/// Splits lyric text into tokens: one token per character for Chinese,
/// lowercase words for English. Whitespace and punctuation separate tokens
/// and are dropped.
pub fn tokenize(text: &str, lang: Lang) -> Result<Vec<String>> {
    let tokens: Vec<String> = match lang {
        Lang::Zh => text
            .chars()
            .filter(|&c| !c.is_whitespace() && !is_punctuation(c))
            .map(String::from)
            .collect(),
        Lang::En => text
            .split(|c: char| !(c.is_alphanumeric() || c == '\'' || c == '\u{2019}'))
            .map(|w| w.trim_matches(|c| c == '\'' || c == '\u{2019}'))
            .filter(|w| !w.is_empty())
            .map(|w| w.replace('\u{2019}', "'").to_lowercase())
            .collect(),
    };
    if tokens.is_empty() {
        return Err(Error::EmptyInput(format!("no {lang} tokens in {text:?}")));
    }
    Ok(tokens)
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(c as u32,
            0x2010..=0x2027
            | 0x2030..=0x205E
            | 0x3000..=0x303F
            | 0xFE30..=0xFE4F
            | 0xFF01..=0xFF0F
            | 0xFF1A..=0xFF20
            | 0xFF3B..=0xFF40
            | 0xFF5B..=0xFF65)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(tokenize("但你", Lang::Zh).unwrap(), ["但", "你"]);
        assert_eq!(tokenize("But you", Lang::En).unwrap(), ["but", "you"]);
        assert!(matches!(tokenize("", Lang::En), Err(Error::EmptyInput(_))));
        assert!(tokenize("  \t", Lang::Zh).is_err());
        assert!(tokenize("?!", Lang::En).is_err());
    }

    #[test]
    fn punctuation_splits_and_drops() {
        assert_eq!(
            tokenize("Play it, to the BEAT!", Lang::En).unwrap(),
            ["play", "it", "to", "the", "beat"]
        );
        assert_eq!(tokenize("Don\u{2019}t 'cause", Lang::En).unwrap(), ["don't", "cause"]);
        assert_eq!(tokenize("但你，听", Lang::Zh).unwrap(), ["但", "你", "听"]);
    }

    proptest! {
        #[test]
        fn en_idempotent_on_joined_output(text in "[a-zA-Z ,.!'?]{1,40}") {
            if let Ok(tokens) = tokenize(&text, Lang::En) {
                prop_assert_eq!(tokenize(&tokens.join(" "), Lang::En).unwrap(), tokens);
            }
        }

        #[test]
        fn zh_preserves_character_count(text in "[\u{4e00}-\u{9fa5}]{1,30}") {
            let tokens = tokenize(&text, Lang::Zh).unwrap();
            prop_assert_eq!(tokens.len(), text.chars().count());
            prop_assert_eq!(tokens.concat(), text);
        }
    }
}
