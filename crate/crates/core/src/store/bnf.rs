use std::fmt;
use std::str::FromStr;

use super::StoreError;

/// A British National Formulary code or code prefix: one to four two-digit
/// groups, written hyphen-separated (`05-01-01-03`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BnfCode {
    groups: [u8; 4],
    len: u8,
}

impl BnfCode {
    pub fn new(groups: &[u8]) -> Result<Self, StoreError> {
        if groups.is_empty() || groups.len() > 4 {
            return Err(StoreError::InvalidBnf(format!(
                "{groups:?}: expected 1-4 groups"
            )));
        }
        if let Some(g) = groups.iter().find(|&&g| g > 99) {
            return Err(StoreError::InvalidBnf(format!(
                "group {g} is not two digits"
            )));
        }
        let mut out = [0u8; 4];
        out[..groups.len()].copy_from_slice(groups);
        Ok(Self {
            groups: out,
            len: groups.len() as u8,
        })
    }

    pub fn groups(&self) -> &[u8] {
        &self.groups[..self.len as usize]
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Component-wise prefix test: `05-01-01` is a prefix of `05-01-01-03`,
    /// `05-01-01-01` is not.
    pub fn has_prefix(&self, prefix: &BnfCode) -> bool {
        prefix.len <= self.len && self.groups()[..prefix.len()] == *prefix.groups()
    }
}

impl FromStr for BnfCode {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut groups = Vec::with_capacity(4);
        for part in s.trim().split('-') {
            if part.len() != 2 || !part.bytes().all(|b| b.is_ascii_digit()) {
                return Err(StoreError::InvalidBnf(format!(
                    "'{s}': each group must be exactly two digits"
                )));
            }
            groups.push(part.parse::<u8>().expect("two ascii digits"));
        }
        Self::new(&groups)
            .map_err(|_| StoreError::InvalidBnf(format!("'{s}': expected 1-4 groups")))
    }
}

impl fmt::Display for BnfCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, g) in self.groups().iter().enumerate() {
            if i > 0 {
                f.write_str("-")?;
            }
            write!(f, "{g:02}")?;
        }
        Ok(())
    }
}

/// A drug family: every drug whose BNF code starts with `prefix`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DrugFamily {
    pub prefix: BnfCode,
}

impl DrugFamily {
    pub fn new(prefix: BnfCode) -> Self {
        Self { prefix }
    }

    pub fn contains(&self, code: &BnfCode) -> bool {
        code.has_prefix(&self.prefix)
    }
}

impl FromStr for DrugFamily {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(Self { prefix: s.parse()? })
    }
}

impl fmt::Display for DrugFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.prefix.fmt(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(s: &str) -> BnfCode {
        s.parse().unwrap()
    }

    #[test]
    fn parse_and_display() {
        assert_eq!(code("05-01-01-03").to_string(), "05-01-01-03");
        assert_eq!(code("05").groups(), &[5]);
        assert!("5-01".parse::<BnfCode>().is_err());
        assert!("05-01-01-03-02".parse::<BnfCode>().is_err());
        assert!("".parse::<BnfCode>().is_err());
        assert!("05-ab".parse::<BnfCode>().is_err());
    }

    #[test]
    fn prefix_rule() {
        assert!(code("05-01-01-03").has_prefix(&code("05-01-01")));
        assert!(!code("05-01-01-03").has_prefix(&code("05-01-01-01")));
        assert!(code("05-01-01-01").has_prefix(&code("05")));
        assert!(!code("05-01").has_prefix(&code("05-01-01")));
        // 05-1 vs 05-10 style confusion cannot happen component-wise.
        assert!(!code("05-10").has_prefix(&code("05-01")));
    }
}
