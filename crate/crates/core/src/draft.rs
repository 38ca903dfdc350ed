//! Draft construction: prefix-length backoff over the retrieval pool, then
//! depth-first linearization of the retrieved tree into a pseudo-sequence with
//! an ancestor-only attention mask and depth-based position ids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::TokenId;
use crate::trie::{retrieve_subtree, DraftTree, SessionOverlay, TrieNode, TriePool};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DraftParams {
    /// Maximum number of draft tokens `K`.
    pub max_draft_tokens: usize,
    /// Longest context suffix used as the retrieval prefix.
    pub prefix_max: usize,
    /// Shortest context suffix tried before giving up.
    pub prefix_min: usize,
    /// A retrieval qualifies once it yields at least this fraction of `K` tokens.
    pub backoff_retry_fraction: f64,
}

impl Default for DraftParams {
    fn default() -> Self {
        Self {
            max_draft_tokens: 32,
            prefix_max: 4,
            prefix_min: 1,
            backoff_retry_fraction: 0.5,
        }
    }
}

impl DraftParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_draft_tokens == 0 {
            return Err(Error::config("max_draft_tokens", "must be at least 1"));
        }
        if self.prefix_min == 0 || self.prefix_min > self.prefix_max {
            return Err(Error::config(
                "prefix_min",
                format!(
                    "need 1 <= prefix_min <= prefix_max, got {} and {}",
                    self.prefix_min, self.prefix_max
                ),
            ));
        }
        if !(self.backoff_retry_fraction > 0.0 && self.backoff_retry_fraction <= 1.0) {
            return Err(Error::config(
                "backoff_retry_fraction",
                format!("must lie in (0, 1], got {}", self.backoff_retry_fraction),
            ));
        }
        Ok(())
    }
}

/// Retrieves a draft tree for `context`, shortening the prefix while results
/// stay small.
pub fn retrieve_draft(
    pool: &TriePool,
    overlay: &SessionOverlay,
    context: &[TokenId],
    params: &DraftParams,
) -> Option<DraftTree> {
    let k = params.max_draft_tokens;
    backoff_search(context, params, |prefix| retrieve_subtree(pool, overlay, prefix, k))
}

/// Prefix-length descent shared by [`retrieve_draft`]; `retrieve` is called
/// with progressively shorter context suffixes.
pub fn backoff_search<F>(context: &[TokenId], params: &DraftParams, mut retrieve: F) -> Option<DraftTree>
where
    F: FnMut(&[TokenId]) -> Option<DraftTree>,
{
    let wanted = params.backoff_retry_fraction * params.max_draft_tokens as f64;
    let top = params.prefix_max.min(context.len());
    let mut best: Option<DraftTree> = None;
    for n in (params.prefix_min..=top).rev() {
        let Some(tree) = retrieve(&context[context.len() - n..]) else {
            continue;
        };
        if tree.len() as f64 >= wanted {
            return Some(tree);
        }
        // strict comparison keeps the longer prefix on ties
        if best.as_ref().is_none_or(|b| tree.len() > b.len()) {
            best = Some(tree);
        }
    }
    best
}

/// DFS linearization of a draft tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearDraft {
    /// Tokens in DFS preorder, children visited in ascending token id.
    pub pseudo_sequence: Vec<TokenId>,
    /// `mask[i][j]` is true iff node `j` is node `i` or one of its ancestors.
    pub mask: Vec<Vec<bool>>,
    /// Depth of each node, 0 for the first draft level.
    pub positions: Vec<usize>,
    /// Root-to-leaf node index paths, in DFS order.
    pub branch_index: Vec<Vec<usize>>,
}

pub fn linearize(tree: &DraftTree) -> LinearDraft {
    fn visit(
        node: &TrieNode,
        ancestors: &mut Vec<usize>,
        out: &mut LinearDraft,
        parents: &mut Vec<Option<usize>>,
    ) {
        for (token, child) in node.children() {
            let idx = out.pseudo_sequence.len();
            out.pseudo_sequence.push(token);
            out.positions.push(ancestors.len());
            parents.push(ancestors.last().copied());
            ancestors.push(idx);
            if child.is_leaf() {
                out.branch_index.push(ancestors.clone());
            } else {
                visit(child, ancestors, out, parents);
            }
            ancestors.pop();
        }
    }

    let mut out = LinearDraft {
        pseudo_sequence: Vec::new(),
        mask: Vec::new(),
        positions: Vec::new(),
        branch_index: Vec::new(),
    };
    let mut parents = Vec::new();
    visit(tree.root(), &mut Vec::new(), &mut out, &mut parents);

    let n = out.pseudo_sequence.len();
    out.mask = Vec::with_capacity(n);
    for (i, parent) in parents.iter().enumerate() {
        let mut row = match parent {
            Some(p) => out.mask[*p].clone(),
            None => vec![false; n],
        };
        row[i] = true;
        out.mask.push(row);
    }
    out
}

impl LinearDraft {
    pub fn len(&self) -> usize {
        self.pseudo_sequence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pseudo_sequence.is_empty()
    }

    /// Recovers each node's parent from the mask, checking that every row
    /// marks exactly the node's ancestor chain.
    pub fn parents(&self) -> Result<Vec<Option<usize>>> {
        let n = self.len();
        if self.mask.len() != n || self.positions.len() != n {
            return Err(Error::structural(format!(
                "draft of {n} nodes has {} mask rows and {} positions",
                self.mask.len(),
                self.positions.len()
            )));
        }
        let mut parents: Vec<Option<usize>> = Vec::with_capacity(n);
        for (i, row) in self.mask.iter().enumerate() {
            if row.len() != n {
                return Err(Error::structural(format!("mask row {i} has length {}", row.len())));
            }
            if !row[i] {
                return Err(Error::structural(format!("node {i} does not attend to itself")));
            }
            if let Some(j) = (i + 1..n).find(|&j| row[j]) {
                return Err(Error::structural(format!(
                    "node {i} attends to later node {j}"
                )));
            }
            let parent = (0..i).rev().find(|&j| row[j]);
            if let Some(p) = parent {
                // row i must equal row p plus i itself
                if let Some(j) = (0..i).find(|&j| j != p && row[j] != self.mask[p][j]) {
                    return Err(Error::structural(format!(
                        "node {i} attends to non-ancestor {j}"
                    )));
                }
            }
            let depth = row.iter().filter(|&&b| b).count() - 1;
            if self.positions[i] != depth {
                return Err(Error::structural(format!(
                    "node {i} has position {} but depth {depth}",
                    self.positions[i]
                )));
            }
            parents.push(parent);
        }
        Ok(parents)
    }

    /// Full validation: mask, positions and branch paths.
    pub fn validate(&self) -> Result<()> {
        let parents = self.parents()?;
        let mut is_leaf = vec![true; self.len()];
        for p in parents.iter().flatten() {
            is_leaf[*p] = false;
        }
        let mut leaves_seen = 0;
        for (b, path) in self.branch_index.iter().enumerate() {
            let Some(&last) = path.last() else {
                return Err(Error::structural(format!("branch {b} is empty")));
            };
            if last >= self.len() || !is_leaf[last] {
                return Err(Error::structural(format!("branch {b} does not end at a leaf")));
            }
            let mut expected = Some(last);
            for &idx in path.iter().rev() {
                if Some(idx) != expected {
                    return Err(Error::structural(format!(
                        "branch {b} is not a root-to-leaf ancestor chain"
                    )));
                }
                expected = parents[idx];
            }
            if expected.is_some() {
                return Err(Error::structural(format!("branch {b} does not start at the root level")));
            }
            leaves_seen += 1;
        }
        let leaves = is_leaf.iter().filter(|&&l| l).count();
        if leaves_seen != leaves {
            return Err(Error::structural(format!(
                "{leaves} leaves but {leaves_seen} branches"
            )));
        }
        Ok(())
    }

    /// Each node's ancestor path (inclusive), rebuilt from the mask.
    pub fn ancestor_paths(&self) -> Result<Vec<Vec<TokenId>>> {
        self.parents()?;
        Ok(self
            .mask
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&self.pseudo_sequence)
                    .filter_map(|(&m, &t)| m.then_some(t))
                    .collect()
            })
            .collect())
    }

    /// Rebuilds the token tree described by the mask.
    pub fn to_tree(&self) -> Result<DraftTree> {
        let paths = self.ancestor_paths()?;
        let parents = self.parents()?;
        let mut is_leaf = vec![true; self.len()];
        for p in parents.iter().flatten() {
            is_leaf[*p] = false;
        }
        Ok(DraftTree::from_paths(
            paths.iter().zip(&is_leaf).filter(|(_, &l)| l).map(|(p, _)| p),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trie::DEFAULT_MAX_BRANCH_DEPTH;

    const T: bool = true;
    const F: bool = false;

    #[test]
    fn linearize_two_branches() {
        let (a, b, c, d) = (1, 2, 3, 4);
        let lin = linearize(&DraftTree::from_paths([vec![a, b], vec![a, c, d]]));
        assert_eq!(lin.pseudo_sequence, vec![a, b, c, d]);
        assert_eq!(
            lin.mask,
            vec![
                vec![T, F, F, F],
                vec![T, T, F, F],
                vec![T, F, T, F],
                vec![T, F, T, T],
            ]
        );
        assert_eq!(lin.positions, vec![0, 1, 1, 2]);
        assert_eq!(lin.branch_index, vec![vec![0, 1], vec![0, 2, 3]]);
        lin.validate().unwrap();
    }

    #[test]
    fn linearize_chain() {
        let lin = linearize(&DraftTree::from_paths([vec![7, 8, 9]]));
        assert_eq!(lin.pseudo_sequence, vec![7, 8, 9]);
        assert_eq!(lin.mask, vec![vec![T, F, F], vec![T, T, F], vec![T, T, T]]);
        assert_eq!(lin.positions, vec![0, 1, 2]);
    }

    #[test]
    fn linearize_fan() {
        let lin = linearize(&DraftTree::from_paths([vec![9], vec![3], vec![5]]));
        assert_eq!(lin.pseudo_sequence, vec![3, 5, 9]);
        assert_eq!(lin.mask, vec![vec![T, F, F], vec![F, T, F], vec![F, F, T]]);
        assert_eq!(lin.positions, vec![0, 0, 0]);
        assert_eq!(lin.branch_index, vec![vec![0], vec![1], vec![2]]);
    }

    #[test]
    fn mask_round_trips_to_tree() {
        let tree = DraftTree::from_paths([vec![1, 2, 3], vec![1, 4], vec![5, 6], vec![5, 7, 8]]);
        let lin = linearize(&tree);
        assert_eq!(lin.to_tree().unwrap().branches(), tree.branches());
    }

    #[test]
    fn rejects_non_ancestor_attention() {
        let mut lin = linearize(&DraftTree::from_paths([vec![1, 2], vec![1, 3]]));
        // node 2 (token 3) attends to its sibling but not to the shared root
        lin.mask[2] = vec![F, T, T];
        assert!(matches!(lin.parents(), Err(Error::Structural(_))));

        // a consistent chain mask that contradicts the branch paths
        let mut lin = linearize(&DraftTree::from_paths([vec![1, 2], vec![1, 3]]));
        lin.mask[2][1] = true;
        lin.positions[2] = 2;
        assert!(lin.parents().is_ok());
        assert!(matches!(lin.validate(), Err(Error::Structural(_))));
    }

    #[test]
    fn rejects_bad_positions() {
        let mut lin = linearize(&DraftTree::from_paths([vec![1, 2]]));
        lin.positions[1] = 0;
        assert!(lin.parents().is_err());
    }

    #[test]
    fn retrieve_draft_backs_off_to_matching_prefix() {
        let mut pool = TriePool::new("g", 20, DEFAULT_MAX_BRANCH_DEPTH);
        pool.insert_text(&[5, 6, 7, 8]).unwrap();
        let ov = SessionOverlay::new(0, DEFAULT_MAX_BRANCH_DEPTH);
        let params = DraftParams {
            max_draft_tokens: 8,
            prefix_max: 4,
            prefix_min: 1,
            backoff_retry_fraction: 0.5,
        };
        let t = retrieve_draft(&pool, &ov, &[1, 2, 5, 6], &params).unwrap();
        assert_eq!(t.branches(), vec![vec![7, 8]]);
        assert!(retrieve_draft(&pool, &ov, &[1, 2, 3], &params).is_none());
    }

    #[test]
    fn backoff_takes_first_qualifying_result() {
        let params = DraftParams {
            max_draft_tokens: 8,
            prefix_max: 4,
            prefix_min: 1,
            backoff_retry_fraction: 0.5,
        };
        let small = DraftTree::from_paths([vec![1, 2]]);
        let big = DraftTree::from_paths([vec![3, 4, 5], vec![6, 7, 8]]);
        let mut calls = Vec::new();
        let got = backoff_search(&[0, 0, 0, 0, 0], &params, |prefix| {
            calls.push(prefix.len());
            match prefix.len() {
                3 => Some(small.clone()),
                2 => Some(big.clone()),
                _ => None,
            }
        });
        assert_eq!(got, Some(big));
        assert_eq!(calls, vec![4, 3, 2]);
    }

    #[test]
    fn backoff_keeps_largest_non_qualifying_preferring_longer_prefix() {
        let params = DraftParams {
            max_draft_tokens: 32,
            ..DraftParams::default()
        };
        let a = DraftTree::from_paths([vec![1, 2]]);
        let b = DraftTree::from_paths([vec![3, 4]]);
        let got = backoff_search(&[0; 6], &params, |prefix| match prefix.len() {
            4 => Some(a.clone()),
            1 => Some(b.clone()),
            _ => None,
        });
        assert_eq!(got, Some(a));
    }

    #[test]
    fn draft_params_validation() {
        assert!(DraftParams::default().validate().is_ok());
        let bad = DraftParams {
            prefix_min: 5,
            ..DraftParams::default()
        };
        assert!(bad.validate().is_err());
        let bad = DraftParams {
            backoff_retry_fraction: 0.0,
            ..DraftParams::default()
        };
        assert!(bad.validate().is_err());
    }
}
