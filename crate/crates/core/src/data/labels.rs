//! Text-derived topic labels for tag pretraining.

use crate::poke::TopicBag;

/// A topic is set when any word of its name occurs in the report. "normal"
/// is set exactly when nothing else is; "other" is never set.
pub fn derive_topic_labels<S: AsRef<str>>(tokens: &[S], bag: &TopicBag) -> Vec<bool> {
    let normal = bag.normal();
    let other = bag.index_of("other");
    let mut labels: Vec<bool> = (0..bag.len())
        .map(|k| {
            Some(k) != normal
                && Some(k) != other
                && bag.words(k).any(|w| tokens.iter().any(|t| t.as_ref() == w))
        })
        .collect();
    if let Some(n) = normal {
        labels[n] = !labels.iter().any(|&b| b);
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tokenize;

    #[test]
    fn rule_examples() {
        let bag = TopicBag::default();
        let eff = bag.index_of("effusion").unwrap();
        let normal = bag.normal().unwrap();
        let l = derive_topic_labels(&tokenize("small left effusion ."), &bag);
        assert!(l[eff] && !l[normal]);
        let l = derive_topic_labels(&tokenize("the heart is normal . other things ."), &bag);
        assert!(l[normal]);
        assert_eq!(l.iter().filter(|&&b| b).count(), 1);
    }
}
