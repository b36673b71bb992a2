//! Toy vocabulary and the action grammar used by the rollout engine.
//!
//! Layout: ids below [`FIRST_KEY`] are control tokens, ids from
//! [`FIRST_KEY`] up to [`VOCAB_SIZE`] are opaque keys of the key-chain task.
//! Decoding is constrained: at every position only the tokens returned by
//! [`Grammar::allowed_next`] may be sampled, and log-probabilities are taken
//! over that allowed set. A position with a single allowed token is forced
//! and carries log-probability zero.

pub const VOCAB_SIZE: usize = 64;

pub const BOS: u32 = 0;
pub const THINK: u32 = 1;
pub const LOOKUP: u32 = 2;
pub const SUBMIT: u32 = 3;
pub const TODO: u32 = 4;
pub const EOS: u32 = 5;
pub const NIL: u32 = 6;
pub const SUMMARIZE: u32 = 7;
pub const RESUME: u32 = 8;
pub const FIRST_KEY: u32 = 16;

pub fn is_key(token: u32) -> bool {
    token >= FIRST_KEY && (token as usize) < VOCAB_SIZE
}

pub fn is_tool(token: u32) -> bool {
    matches!(token, LOOKUP | SUBMIT | TODO)
}

pub fn key_count() -> usize {
    VOCAB_SIZE - FIRST_KEY as usize
}

/// Phase of the grammar at the end of a segment context.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Choosing the next action.
    Free,
    /// A tool (or the summary marker) was emitted; its key argument is next.
    Argument,
    /// The answer has been submitted; only closing tokens remain.
    Final,
    /// End of rollout.
    Done,
    /// The segment's context budget is spent; a summary closes it.
    Summarize,
}

/// Decoding constraints that depend on the per-segment context budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grammar {
    /// Maximum number of tokens (prompt plus records) in one segment.
    pub context_budget: usize,
}

impl Default for Grammar {
    fn default() -> Self {
        Grammar { context_budget: 20 }
    }
}

impl Grammar {
    pub fn phase(&self, context: &[u32]) -> Phase {
        let Some(&last) = context.last() else {
            return Phase::Free;
        };
        if last == EOS {
            return Phase::Done;
        }
        let submitted = context.windows(2).any(|w| w[0] == SUBMIT && is_key(w[1]));
        if submitted {
            return if context.len() + 1 >= self.context_budget {
                Phase::Done
            } else {
                Phase::Final
            };
        }
        if is_tool(last) || last == SUMMARIZE {
            return Phase::Argument;
        }
        // room for a tool call, its argument, the tool output and one more
        // action; otherwise the segment must be summarized now
        if context.len() + 4 > self.context_budget {
            return Phase::Summarize;
        }
        Phase::Free
    }

    /// Tokens the policy may emit after `context`. Empty once the rollout
    /// is finished.
    pub fn allowed_next(&self, context: &[u32]) -> Vec<u32> {
        match self.phase(context) {
            Phase::Free => vec![THINK, LOOKUP, SUBMIT, TODO],
            Phase::Argument => keys_seen(context),
            Phase::Final => vec![THINK, EOS],
            Phase::Summarize => vec![SUMMARIZE],
            Phase::Done => Vec::new(),
        }
    }
}

/// Distinct keys present in `context`, ascending.
pub fn keys_seen(context: &[u32]) -> Vec<u32> {
    let mut seen = [false; VOCAB_SIZE];
    for &t in context {
        if is_key(t) {
            seen[t as usize] = true;
        }
    }
    (FIRST_KEY..VOCAB_SIZE as u32).filter(|&t| seen[t as usize]).collect()
}

/// Most recent key at or before each position; `None` before the first key.
pub fn last_key_prefix(tokens: &[u32]) -> Vec<Option<u32>> {
    let mut cur = None;
    tokens
        .iter()
        .map(|&t| {
            if is_key(t) {
                cur = Some(t);
            }
            cur
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phases_follow_action_grammar() {
        let g = Grammar { context_budget: 20 };
        assert_eq!(g.allowed_next(&[BOS, 20]), vec![THINK, LOOKUP, SUBMIT, TODO]);
        assert_eq!(g.allowed_next(&[BOS, 20, 40, LOOKUP]), vec![20, 40]);
        assert_eq!(g.allowed_next(&[BOS, 20, SUBMIT, 20]), vec![THINK, EOS]);
        assert!(g.allowed_next(&[BOS, 20, SUBMIT, 20, EOS]).is_empty());
        let long = vec![THINK; 17];
        assert_eq!(g.allowed_next(&long), vec![SUMMARIZE]);
    }

    #[test]
    fn last_key_tracks_most_recent() {
        let p = last_key_prefix(&[BOS, 20, LOOKUP, 20, 33, THINK]);
        assert_eq!(p, vec![None, Some(20), Some(20), Some(20), Some(33), Some(33)]);
    }
}
