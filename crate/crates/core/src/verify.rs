//! Token acceptance policies and branch selection over a verified draft tree.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::draft::LinearDraft;
use crate::error::{Error, Result};
use crate::lm::{Distribution, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyMode {
    /// Accept only the argmax token.
    Greedy,
    /// Accept any of the `k` most probable tokens.
    TopK,
    /// Accept the argmax, or any token with probability above `p`.
    TopP,
    /// Accept a token in the top `k` whose probability also exceeds `p`.
    Relaxed,
}

impl fmt::Display for PolicyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyMode::Greedy => "greedy",
            PolicyMode::TopK => "topk",
            PolicyMode::TopP => "topp",
            PolicyMode::Relaxed => "relaxed",
        })
    }
}

impl FromStr for PolicyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(PolicyMode::Greedy),
            "topk" => Ok(PolicyMode::TopK),
            "topp" => Ok(PolicyMode::TopP),
            "relaxed" => Ok(PolicyMode::Relaxed),
            other => Err(Error::config(
                "policy",
                format!("unknown policy `{other}` (expected greedy|topk|topp|relaxed)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerificationPolicy {
    pub mode: PolicyMode,
    pub k: usize,
    pub p: f64,
}

impl VerificationPolicy {
    pub const DEFAULT_K: usize = 2;
    pub const DEFAULT_P: f64 = 0.1;

    pub fn greedy() -> Self {
        Self {
            mode: PolicyMode::Greedy,
            k: 1,
            p: 0.0,
        }
    }

    pub fn top_k(k: usize) -> Self {
        Self {
            mode: PolicyMode::TopK,
            k,
            p: 0.0,
        }
    }

    pub fn top_p(p: f64) -> Self {
        Self {
            mode: PolicyMode::TopP,
            k: 1,
            p,
        }
    }

    pub fn relaxed(k: usize, p: f64) -> Self {
        Self {
            mode: PolicyMode::Relaxed,
            k,
            p,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.p) {
            return Err(Error::config("p", format!("must lie in [0, 1), got {}", self.p)));
        }
        Ok(())
    }

    /// Short label used in reports, e.g. `relaxed(k=2,p=0.1)`.
    pub fn label(&self) -> String {
        match self.mode {
            PolicyMode::Greedy => "greedy".to_string(),
            PolicyMode::TopK => format!("topk(k={})", self.k),
            PolicyMode::TopP => format!("topp(p={})", self.p),
            PolicyMode::Relaxed => format!("relaxed(k={},p={})", self.k, self.p),
        }
    }
}

pub fn accept_token(token: TokenId, dist: &Distribution, policy: &VerificationPolicy) -> bool {
    match policy.mode {
        PolicyMode::Greedy => token == dist.argmax(),
        PolicyMode::TopK => dist.rank(token) < policy.k,
        PolicyMode::TopP => token == dist.argmax() || dist.prob(token) > policy.p,
        PolicyMode::Relaxed => dist.rank(token) < policy.k && dist.prob(token) > policy.p,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationOutcome {
    pub accepted_tokens: Vec<TokenId>,
    /// Argmax at the first rejected position, or after the fully accepted branch.
    pub correction_token: TokenId,
    /// Index into `branch_index` of the winning branch; `None` when nothing was accepted.
    pub accepted_branch: Option<usize>,
    pub accepted_count: usize,
}

impl VerificationOutcome {
    /// Tokens emitted by this step: accepted drafts followed by the correction.
    pub fn emitted(&self) -> Vec<TokenId> {
        let mut out = self.accepted_tokens.clone();
        out.push(self.correction_token);
        out
    }
}

/// Walks every branch of the draft, keeps the one with the longest accepted
/// prefix (earliest branch on ties) and derives the correction token.
///
/// `dists[0]` is the distribution after the raw context and `dists[i + 1]` the
/// one conditioned on node `i`'s ancestor path, as produced by
/// [`crate::lm::LanguageModel::evaluate_tree`].
pub fn verify_branches(
    draft: &LinearDraft,
    dists: &[Distribution],
    policy: &VerificationPolicy,
) -> Result<VerificationOutcome> {
    if dists.len() != draft.len() + 1 {
        return Err(Error::structural(format!(
            "{} distributions for a draft of {} nodes",
            dists.len(),
            draft.len()
        )));
    }
    let parents = draft.parents()?;
    // distribution each node is checked against
    let dist_for = |node: usize| parents[node].map_or(0, |p| p + 1);

    let mut best: Option<(usize, usize)> = None; // (branch, accepted len)
    for (b, path) in draft.branch_index.iter().enumerate() {
        let accepted = path
            .iter()
            .take_while(|&&node| accept_token(draft.pseudo_sequence[node], &dists[dist_for(node)], policy))
            .count();
        if best.is_none_or(|(_, len)| accepted > len) {
            best = Some((b, accepted));
        }
    }

    let Some((branch, accepted)) = best.filter(|&(_, len)| len > 0) else {
        return Ok(VerificationOutcome {
            accepted_tokens: Vec::new(),
            correction_token: dists[0].argmax(),
            accepted_branch: None,
            accepted_count: 0,
        });
    };
    let path = &draft.branch_index[branch];
    let accepted_tokens: Vec<TokenId> = path[..accepted]
        .iter()
        .map(|&n| draft.pseudo_sequence[n])
        .collect();
    let correction_dist = match path.get(accepted) {
        Some(&rejected) => &dists[dist_for(rejected)],
        None => &dists[path[accepted - 1] + 1],
    };
    Ok(VerificationOutcome {
        accepted_tokens,
        correction_token: correction_dist.argmax(),
        accepted_branch: Some(branch),
        accepted_count: accepted,
    })
}
