use std::collections::HashMap;
use std::fmt;

use super::StoreError;

pub const MAX_DEPTH: u8 = 5;

/// Interned medical event code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CodeId(pub u32);

impl CodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for CodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// One row of the event tree file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeRow {
    pub code: String,
    pub parent: Option<String>,
    pub depth: u8,
    pub description: String,
}

/// The medical event hierarchy. Depth 1 nodes are the most general terms,
/// depth 5 the most specific. Codes are interned in lexicographic order so
/// the same rows always produce the same ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventCodeTree {
    codes: Vec<String>,
    descriptions: Vec<String>,
    parents: Vec<Option<CodeId>>,
    depths: Vec<u8>,
    /// `lineage[c][d - 1]` is the ancestor of `c` at depth `d`, or `c` itself
    /// when `depth(c) <= d`.
    lineage: Vec<[CodeId; MAX_DEPTH as usize]>,
    by_code: HashMap<String, CodeId>,
}

impl EventCodeTree {
    /// Builds and validates a tree. `line_of(i)` reports the source line of
    /// row `i` for error messages.
    pub fn from_rows(
        rows: Vec<TreeRow>,
        source: &str,
        line_of: impl Fn(usize) -> usize,
    ) -> Result<Self, StoreError> {
        let integrity = |i: usize, detail: String| StoreError::Integrity {
            file: source.to_string(),
            line: line_of(i),
            detail,
        };

        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.sort_by(|&a, &b| rows[a].code.cmp(&rows[b].code));

        let mut by_code = HashMap::with_capacity(rows.len());
        for (id, &i) in order.iter().enumerate() {
            if by_code
                .insert(rows[i].code.clone(), CodeId(id as u32))
                .is_some()
            {
                return Err(integrity(
                    i,
                    format!("duplicate event code '{}'", rows[i].code),
                ));
            }
        }

        let n = rows.len();
        let mut codes = Vec::with_capacity(n);
        let mut descriptions = Vec::with_capacity(n);
        let mut parents = Vec::with_capacity(n);
        let mut depths = Vec::with_capacity(n);
        for &i in &order {
            let row = &rows[i];
            if !(1..=MAX_DEPTH).contains(&row.depth) {
                return Err(integrity(i, format!("depth {} outside 1..=5", row.depth)));
            }
            codes.push(row.code.clone());
            descriptions.push(row.description.clone());
            depths.push(row.depth);
        }
        for (id, &i) in order.iter().enumerate() {
            let row = &rows[i];
            let parent = match (&row.parent, row.depth) {
                (None, 1) => None,
                (Some(p), 1) => {
                    return Err(integrity(
                        i,
                        format!("depth-1 code '{}' has parent '{p}'", row.code),
                    ))
                }
                (None, d) => {
                    return Err(integrity(
                        i,
                        format!("depth-{d} code '{}' has no parent", row.code),
                    ))
                }
                (Some(p), d) => {
                    let pid = *by_code
                        .get(p)
                        .ok_or_else(|| integrity(i, format!("unknown parent code '{p}'")))?;
                    let pd = depths[pid.index()];
                    if pd + 1 != d {
                        return Err(integrity(
                            i,
                            format!(
                                "code '{}' has depth {d} but parent '{p}' has depth {pd}",
                                row.code
                            ),
                        ));
                    }
                    Some(pid)
                }
            };
            debug_assert_eq!(codes[id], row.code);
            parents.push(parent);
        }

        // Depth strictly increases along parent links, so the chain is acyclic
        // and at most five long.
        let lineage = (0..n)
            .map(|c| {
                let mut chain = [CodeId(c as u32); MAX_DEPTH as usize];
                let mut cur = CodeId(c as u32);
                loop {
                    chain[depths[cur.index()] as usize - 1] = cur;
                    match parents[cur.index()] {
                        Some(p) => cur = p,
                        None => break,
                    }
                }
                // Depths below the code's own depth keep the code itself.
                let own = depths[c] as usize;
                for slot in chain.iter_mut().skip(own) {
                    *slot = CodeId(c as u32);
                }
                chain
            })
            .collect();

        Ok(Self {
            codes,
            descriptions,
            parents,
            depths,
            lineage,
            by_code,
        })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn id(&self, code: &str) -> Option<CodeId> {
        self.by_code.get(code).copied()
    }

    pub fn lookup(&self, code: &str) -> Result<CodeId, StoreError> {
        self.id(code)
            .ok_or_else(|| StoreError::UnknownCode(code.to_string()))
    }

    pub fn code(&self, id: CodeId) -> &str {
        &self.codes[id.index()]
    }

    pub fn description(&self, id: CodeId) -> &str {
        &self.descriptions[id.index()]
    }

    pub fn depth(&self, id: CodeId) -> u8 {
        self.depths[id.index()]
    }

    pub fn parent(&self, id: CodeId) -> Option<CodeId> {
        self.parents[id.index()]
    }

    pub fn ids(&self) -> impl Iterator<Item = CodeId> + '_ {
        (0..self.codes.len() as u32).map(CodeId)
    }

    /// Maps `id` to its ancestor at `target_depth` when it is deeper than
    /// that; shallower or equal codes map to themselves.
    pub fn ancestor_id(&self, id: CodeId, target_depth: u8) -> CodeId {
        debug_assert!((1..=MAX_DEPTH).contains(&target_depth));
        self.lineage[id.index()][target_depth as usize - 1]
    }

    /// Optional mapping used by every windowed query.
    pub fn map_code(&self, id: CodeId, depth_map: Option<u8>) -> CodeId {
        match depth_map {
            Some(d) => self.ancestor_id(id, d),
            None => id,
        }
    }

    /// String-level ancestor lookup.
    pub fn ancestor_at_depth(&self, code: &str, target_depth: u8) -> Result<&str, StoreError> {
        if !(1..=MAX_DEPTH).contains(&target_depth) {
            return Err(StoreError::InvalidDepth(target_depth));
        }
        let id = self.lookup(code)?;
        Ok(self.code(self.ancestor_id(id, target_depth)))
    }

    pub fn rows(&self) -> Vec<TreeRow> {
        self.ids()
            .map(|id| TreeRow {
                code: self.code(id).to_string(),
                parent: self.parent(id).map(|p| self.code(p).to_string()),
                depth: self.depth(id),
                description: self.description(id).to_string(),
            })
            .collect()
    }
}
