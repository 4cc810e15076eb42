//! Alignment-scope accounting over the generation tree.
//!
//! Conceptualize decoding as a tree: nodes at depth k are length-k
//! prefixes, and every non-leaf node has |V| children. Next-token
//! distribution matching under ground-truth prefixes aligns the children
//! of the single ground-truth path: L * |V| nodes. Full transition-matrix
//! alignment additionally aligns, at each step past the first, the
//! children of every one-token deviation from the ground-truth prefix:
//! |V| + (L - 1) * |V|^2 nodes.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignmentScope {
    /// Ground-truth-prefix next-token alignment only.
    VanillaKd,
    /// Full transition-matrix alignment.
    FullTpa,
}

/// Closed-form count of aligned generation-tree nodes for a response of
/// length `response_len` over a vocabulary of `vocab_size` tokens.
pub fn aligned_node_count(scope: AlignmentScope, vocab_size: u64, response_len: u64) -> u64 {
    match scope {
        AlignmentScope::VanillaKd => response_len * vocab_size,
        AlignmentScope::FullTpa => {
            if response_len == 0 {
                0
            } else {
                vocab_size + (response_len - 1) * vocab_size * vocab_size
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_small_cases() {
        assert_eq!(aligned_node_count(AlignmentScope::VanillaKd, 2, 1), 2);
        assert_eq!(aligned_node_count(AlignmentScope::FullTpa, 2, 1), 2);
        assert_eq!(aligned_node_count(AlignmentScope::VanillaKd, 3, 2), 6);
        assert_eq!(aligned_node_count(AlignmentScope::FullTpa, 3, 2), 3 + 9);
        assert_eq!(aligned_node_count(AlignmentScope::VanillaKd, 4, 3), 12);
        assert_eq!(aligned_node_count(AlignmentScope::FullTpa, 4, 3), 4 + 2 * 16);
    }
}
