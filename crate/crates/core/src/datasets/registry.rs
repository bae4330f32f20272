use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Ordered foreground class names. Background is the implicit index 0, the
/// i-th name has index `i + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassRegistry {
    names: Vec<String>,
}

impl ClassRegistry {
    pub fn new<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::validation("class registry is empty"));
        }
        if names.len() > u8::MAX as usize {
            return Err(Error::validation("class registry exceeds 255 classes"));
        }
        for (i, n) in names.iter().enumerate() {
            if n.trim().is_empty() {
                return Err(Error::validation(format!("class name {} is empty", i + 1)));
            }
            if n.trim() != n || n.contains(',') {
                return Err(Error::validation(format!("class name {n:?} has surrounding space or a comma")));
            }
            if names[..i].contains(n) {
                return Err(Error::validation(format!("class name {n:?} is duplicated")));
            }
        }
        Ok(ClassRegistry { names })
    }

    /// Number of foreground classes `K`.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// `K + 1`, the width of the network's softmax.
    pub fn num_outputs(&self) -> usize {
        self.names.len() + 1
    }

    pub fn index_of(&self, name: &str) -> Option<u8> {
        self.names.iter().position(|n| n == name).map(|i| i as u8 + 1)
    }

    pub fn name_of(&self, index: u8) -> Option<&str> {
        match index {
            0 => None,
            i => self.names.get(i as usize - 1).map(String::as_str),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_owned),
        )
    }

    pub fn to_text(&self) -> String {
        let mut s = self.names.join("\n");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indices_start_at_one() {
        let r = ClassRegistry::new(["liver", "kidney"]).unwrap();
        assert_eq!(r.index_of("liver"), Some(1));
        assert_eq!(r.index_of("kidney"), Some(2));
        assert_eq!(r.name_of(0), None);
        assert_eq!(r.num_outputs(), 3);
    }

    #[test]
    fn rejects_duplicates_and_empty() {
        assert!(ClassRegistry::new(Vec::<String>::new()).is_err());
        assert!(ClassRegistry::new(["a", "a"]).is_err());
        assert!(ClassRegistry::new(["a", ""]).is_err());
    }

    #[test]
    fn text_roundtrip_skips_blank_lines() {
        let r = ClassRegistry::parse("liver\n\nkidney\n# comment\nspleen\n").unwrap();
        assert_eq!(r.names(), &["liver", "kidney", "spleen"]);
        assert_eq!(ClassRegistry::parse(&r.to_text()).unwrap(), r);
    }
}
