//! Frequency-annotated prefix trees used as retrieval pools.
//!
//! A [`TriePool`] holds permanent content built from previously generated
//! knowledge and is read-only during decoding. Each decode session owns a
//! [`SessionOverlay`] holding the prompt and freshly generated tokens; the two
//! are merged at query time by [`retrieve_subtree`].

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fs;
use std::path::Path;

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::lm::TokenId;

/// Default cap on the depth of branches inserted by [`Trie::insert_text`].
pub const DEFAULT_MAX_BRANCH_DEPTH: usize = 64;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrieNode {
    frequency: u64,
    // sorted by token id
    children: Vec<(TokenId, TrieNode)>,
}

impl TrieNode {
    /// Number of stored sequence occurrences passing through this node.
    pub fn frequency(&self) -> u64 {
        self.frequency
    }

    /// Children in ascending token order.
    pub fn children(&self) -> impl ExactSizeIterator<Item = (TokenId, &TrieNode)> {
        self.children.iter().map(|(t, n)| (*t, n))
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn child(&self, token: TokenId) -> Option<&TrieNode> {
        self.children
            .binary_search_by_key(&token, |(t, _)| *t)
            .ok()
            .map(|i| &self.children[i].1)
    }

    fn child_mut(&mut self, token: TokenId) -> Option<&mut TrieNode> {
        match self.children.binary_search_by_key(&token, |(t, _)| *t) {
            Ok(i) => Some(&mut self.children[i].1),
            Err(_) => None,
        }
    }

    fn child_or_insert(&mut self, token: TokenId) -> &mut TrieNode {
        let i = match self.children.binary_search_by_key(&token, |(t, _)| *t) {
            Ok(i) => i,
            Err(i) => {
                self.children.insert(i, (token, TrieNode::default()));
                i
            }
        };
        &mut self.children[i].1
    }

    /// Number of nodes strictly below this one.
    pub fn descendant_count(&self) -> usize {
        let mut n = 0;
        let mut stack: Vec<&TrieNode> = vec![self];
        while let Some(node) = stack.pop() {
            n += node.children.len();
            stack.extend(node.children.iter().map(|(_, c)| c));
        }
        n
    }

    pub fn walk(&self, path: &[TokenId]) -> Option<&TrieNode> {
        path.iter().try_fold(self, |node, &t| node.child(t))
    }

    fn insert_path(&mut self, path: &[TokenId]) {
        let mut node = self;
        for &t in path {
            node = node.child_or_insert(t);
            node.frequency += 1;
        }
    }

    fn merge_from(&mut self, other: &TrieNode) {
        self.frequency += other.frequency;
        for (t, child) in &other.children {
            self.child_or_insert(*t).merge_from(child);
        }
    }

    /// Root-to-leaf token paths in ascending token order.
    fn branches(&self) -> Vec<Vec<TokenId>> {
        fn go(node: &TrieNode, path: &mut Vec<TokenId>, out: &mut Vec<Vec<TokenId>>) {
            for (t, child) in &node.children {
                path.push(*t);
                if child.children.is_empty() {
                    out.push(path.clone());
                } else {
                    go(child, path, out);
                }
                path.pop();
            }
        }
        let mut out = Vec::new();
        go(self, &mut Vec::new(), &mut out);
        out
    }

    fn write_preorder(&self, token: TokenId, w: &mut Writer) {
        w.u32(token);
        w.u64(self.frequency);
        w.u32(self.children.len() as u32);
        for (t, child) in &self.children {
            child.write_preorder(*t, w);
        }
    }

    fn read_preorder(r: &mut Reader<'_>, vocab_size: usize, is_root: bool) -> Result<(TokenId, TrieNode)> {
        let token = r.u32()?;
        if !is_root && token as usize >= vocab_size {
            return Err(Error::Format(format!("token {token} out of range")));
        }
        let frequency = r.u64()?;
        let n = r.u32()? as usize;
        let mut children: Vec<(TokenId, TrieNode)> = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let (t, child) = Self::read_preorder(r, vocab_size, false)?;
            if children.last().is_some_and(|(prev, _)| *prev >= t) {
                return Err(Error::Format(format!("child token {t} out of order")));
            }
            children.push((t, child));
        }
        Ok((token, TrieNode { frequency, children }))
    }
}

/// A prefix tree plus the insertion rules shared by pools and overlays.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trie {
    root: TrieNode,
    max_depth: usize,
}

impl Trie {
    pub fn new(max_depth: usize) -> Self {
        Self {
            root: TrieNode::default(),
            max_depth: max_depth.max(1),
        }
    }

    pub fn root(&self) -> &TrieNode {
        &self.root
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    pub fn is_empty(&self) -> bool {
        self.root.children.is_empty()
    }

    /// Inserts one root-anchored sequence, incrementing every node on its path.
    pub fn insert(&mut self, sequence: &[TokenId]) -> Result<()> {
        if sequence.is_empty() {
            return Err(Error::input("cannot insert an empty sequence"));
        }
        self.root.insert_path(sequence);
        Ok(())
    }

    /// Inserts every suffix of `text`, each truncated to `max_depth` tokens, so
    /// that prefix queries match content starting anywhere in the text.
    pub fn insert_text(&mut self, text: &[TokenId]) -> Result<()> {
        if text.is_empty() {
            return Err(Error::input("cannot insert an empty text"));
        }
        for start in 0..text.len() {
            let end = (start + self.max_depth).min(text.len());
            self.root.insert_path(&text[start..end]);
        }
        Ok(())
    }

    /// Brings the trie from holding the suffixes of `text[..indexed]` to
    /// holding those of all of `text`, as if `insert_text(text)` had been
    /// called once on the full text.
    pub fn extend_text(&mut self, text: &[TokenId], indexed: usize) {
        let indexed = indexed.min(text.len());
        let first = indexed.saturating_sub(self.max_depth - 1);
        for start in first..text.len() {
            let end = (start + self.max_depth).min(text.len());
            // Suffixes starting before `indexed` already counted their old
            // tokens; only the newly reachable tail is incremented.
            let mut node = &mut self.root;
            for (pos, &t) in text.iter().enumerate().take(end).skip(start) {
                node = node.child_or_insert(t);
                if pos >= indexed {
                    node.frequency += 1;
                }
            }
        }
    }

    pub fn find(&self, prefix: &[TokenId]) -> Option<&TrieNode> {
        self.root.walk(prefix)
    }
}

/// Permanent retrieval pool for one group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TriePool {
    trie: Trie,
    group_id: String,
    vocab_size: usize,
    size_entries: u64,
}

const POOL_MAGIC: &[u8; 4] = b"RSTP";
const POOL_VERSION: u32 = 1;

impl TriePool {
    pub fn new(group_id: impl Into<String>, vocab_size: usize, max_depth: usize) -> Self {
        Self {
            trie: Trie::new(max_depth),
            group_id: group_id.into(),
            vocab_size,
            size_entries: 0,
        }
    }

    pub fn group_id(&self) -> &str {
        &self.group_id
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Number of permanent sequences or knowledge texts inserted.
    pub fn size_entries(&self) -> u64 {
        self.size_entries
    }

    pub fn trie(&self) -> &Trie {
        &self.trie
    }

    fn check_range(&self, seq: &[TokenId]) -> Result<()> {
        match seq.iter().find(|&&t| t as usize >= self.vocab_size) {
            Some(t) => Err(Error::input(format!(
                "token {t} outside vocabulary of size {}",
                self.vocab_size
            ))),
            None => Ok(()),
        }
    }

    /// Inserts a single root-anchored sequence.
    pub fn insert(&mut self, sequence: &[TokenId]) -> Result<()> {
        self.check_range(sequence)?;
        self.trie.insert(sequence)?;
        self.size_entries += 1;
        Ok(())
    }

    /// Inserts a knowledge text as suffix branches.
    pub fn insert_text(&mut self, text: &[TokenId]) -> Result<()> {
        self.check_range(text)?;
        self.trie.insert_text(text)?;
        self.size_entries += 1;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(POOL_MAGIC);
        w.u32(POOL_VERSION);
        w.str(&self.group_id);
        w.u32(self.vocab_size as u32);
        w.u64(self.size_entries);
        w.u32(self.trie.max_depth as u32);
        self.trie.root.write_preorder(TokenId::MAX, &mut w);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(POOL_MAGIC)?;
        let version = r.u32()?;
        if version != POOL_VERSION {
            return Err(Error::Format(format!("unsupported pool version {version}")));
        }
        let group_id = r.str()?;
        let vocab_size = r.u32()? as usize;
        let size_entries = r.u64()?;
        let max_depth = r.u32()? as usize;
        let (_, root) = TrieNode::read_preorder(&mut r, vocab_size, true)?;
        r.finish()?;
        Ok(Self {
            trie: Trie {
                root,
                max_depth: max_depth.max(1),
            },
            group_id,
            vocab_size,
            size_entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::data(path, e.to_string()))
    }
}

/// Session-local temporary branches: the prompt and generated tokens of one
/// knowledge generation.
#[derive(Debug, Clone)]
pub struct SessionOverlay {
    trie: Trie,
    owner: u64,
    indexed_len: usize,
}

impl SessionOverlay {
    pub fn new(owner: u64, max_depth: usize) -> Self {
        Self {
            trie: Trie::new(max_depth),
            owner,
            indexed_len: 0,
        }
    }

    pub fn owner(&self) -> u64 {
        self.owner
    }

    pub fn trie(&self) -> &Trie {
        &self.trie
    }

    pub fn insert(&mut self, sequence: &[TokenId]) -> Result<()> {
        self.trie.insert(sequence)
    }

    /// Indexes the suffix content of the session text. `text` must extend the
    /// text passed on the previous call.
    pub fn index_session_text(&mut self, text: &[TokenId]) {
        self.trie.extend_text(text, self.indexed_len);
        self.indexed_len = text.len();
    }

    /// Discards all temporary branches.
    pub fn clear(&mut self) {
        self.trie = Trie::new(self.trie.max_depth);
        self.indexed_len = 0;
    }
}

/// Releases an overlay at the end of a generation. The permanent pool is untouched.
pub fn drop_overlay(overlay: SessionOverlay) {
    drop(overlay);
}

/// A retrieved token tree: the children of the root are the candidate first
/// draft tokens. Each branch is one candidate continuation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DraftTree {
    root: TrieNode,
}

impl DraftTree {
    pub fn from_root(root: TrieNode) -> Self {
        Self { root }
    }

    /// Builds a tree from root-anchored token paths, each counted once.
    pub fn from_paths<P: AsRef<[TokenId]>>(paths: impl IntoIterator<Item = P>) -> Self {
        let mut root = TrieNode::default();
        for p in paths {
            root.insert_path(p.as_ref());
        }
        Self { root }
    }

    pub fn root(&self) -> &TrieNode {
        &self.root
    }

    /// Token count (number of nodes below the root).
    pub fn len(&self) -> usize {
        self.root.descendant_count()
    }

    pub fn is_empty(&self) -> bool {
        self.root.children.is_empty()
    }

    pub fn branches(&self) -> Vec<Vec<TokenId>> {
        self.root.branches()
    }

    /// Every node as (root-to-node path, frequency), in preorder.
    pub fn nodes(&self) -> Vec<(Vec<TokenId>, u64)> {
        fn go(node: &TrieNode, path: &mut Vec<TokenId>, out: &mut Vec<(Vec<TokenId>, u64)>) {
            for (t, child) in &node.children {
                path.push(*t);
                out.push((path.clone(), child.frequency));
                go(child, path, out);
                path.pop();
            }
        }
        let mut out = Vec::new();
        go(&self.root, &mut Vec::new(), &mut out);
        out
    }
}

/// Merged, unpruned subtree below `prefix` in the pool and the overlay, with
/// frequencies summed on shared paths. `None` when neither tree has a
/// continuation of the prefix.
pub fn merged_subtree(pool: &TriePool, overlay: &SessionOverlay, prefix: &[TokenId]) -> Option<DraftTree> {
    if prefix.is_empty() {
        return None;
    }
    let mut root = TrieNode::default();
    let mut found = false;
    for node in [pool.trie.find(prefix), overlay.trie.find(prefix)].into_iter().flatten() {
        found = true;
        root.merge_from(node);
    }
    if !found || root.children.is_empty() {
        return None;
    }
    Some(DraftTree { root })
}

/// Retrieves the subtree following `prefix`, pruned to at most `max_tokens` nodes.
pub fn retrieve_subtree(
    pool: &TriePool,
    overlay: &SessionOverlay,
    prefix: &[TokenId],
    max_tokens: usize,
) -> Option<DraftTree> {
    let tree = merged_subtree(pool, overlay, prefix)?;
    if tree.len() > max_tokens {
        let pruned = prune_top_frequency(&tree, max_tokens);
        (!pruned.is_empty()).then_some(pruned)
    } else {
        Some(tree)
    }
}

struct Candidate<'a> {
    frequency: u64,
    token: TokenId,
    depth: usize,
    seq: usize,
    node: &'a TrieNode,
    path: Vec<TokenId>,
}

impl Candidate<'_> {
    // Higher frequency first, then lower token id, shallower depth, discovery order.
    fn key(&self) -> (u64, std::cmp::Reverse<(TokenId, usize, usize)>) {
        (self.frequency, std::cmp::Reverse((self.token, self.depth, self.seq)))
    }
}

impl PartialEq for Candidate<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl Eq for Candidate<'_> {}

impl PartialOrd for Candidate<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}

/// Keeps at most `max_tokens` nodes, taken in descending frequency order among
/// nodes whose parent is already kept. Ties go to the lower token id, then the
/// shallower node.
pub fn prune_top_frequency(tree: &DraftTree, max_tokens: usize) -> DraftTree {
    if tree.len() <= max_tokens {
        return tree.clone();
    }
    let mut heap = BinaryHeap::new();
    let mut seq = 0usize;
    push_children(&mut heap, &mut seq, &tree.root, &[]);
    let mut out = TrieNode::default();
    let mut kept = 0;
    while kept < max_tokens {
        let Some(c) = heap.pop() else { break };
        let (last, parent_path) = c.path.split_last().expect("non-empty path");
        let parent = out
            .walk_mut(parent_path)
            .expect("parent retained before child");
        parent.child_or_insert(*last).frequency = c.frequency;
        kept += 1;
        push_children(&mut heap, &mut seq, c.node, &c.path);
    }
    DraftTree { root: out }
}

fn push_children<'a>(
    heap: &mut BinaryHeap<Candidate<'a>>,
    seq: &mut usize,
    node: &'a TrieNode,
    path: &[TokenId],
) {
    for (t, child) in &node.children {
        let mut p = path.to_vec();
        p.push(*t);
        heap.push(Candidate {
            frequency: child.frequency,
            token: *t,
            depth: path.len(),
            seq: *seq,
            node: child,
            path: p,
        });
        *seq += 1;
    }
}

impl TrieNode {
    fn walk_mut(&mut self, path: &[TokenId]) -> Option<&mut TrieNode> {
        let mut node = self;
        for &t in path {
            node = node.child_mut(t)?;
        }
        Some(node)
    }
}
