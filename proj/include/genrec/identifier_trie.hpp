#pragma once

#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "genrec/rq_tokenizer.hpp"
#include "genrec/seq_recommender.hpp"
#include "genrec/tensor.hpp"

namespace genrec {

// Prefix tree over the catalog's identifiers. Immutable after build; beam
// search consults it so only real items can be decoded.
class IdentifierTrie {
public:
    // catalog_ids indexed by item; all identifiers must share one length
    static IdentifierTrie build(const std::vector<ItemIdentifier>& catalog_ids);

    int levels() const { return levels_; }
    size_t identifier_count() const { return terminal_count_; }

    // codes that extend the prefix toward some catalog identifier, ascending;
    // empty for prefixes that are not in the trie
    std::vector<int> allowed_next(const std::vector<int>& prefix) const;

    // items sharing a complete identifier (ascending item index), or null
    const std::vector<int>* items_for(const std::vector<int>& identifier) const;

    // one line per (identifier, item): "c1 c2 ... cL<TAB>item"
    void export_text(std::ostream& os, const std::vector<std::string>& item_names) const;

private:
    struct Node {
        std::map<int, int> children; // code -> node index
        std::vector<int> items;      // terminal only
    };
    std::vector<Node> nodes_{Node{}};
    int levels_ = 0;
    size_t terminal_count_ = 0;

    int walk(const std::vector<int>& codes) const; // -1 when absent
};

struct BeamHypothesis {
    std::vector<int> codes;
    double logp = 0.0;
};

// Scores a batch of same-length prefixes: returns (n, V) next-token log-probs.
using StepScorer = std::function<Tensor(const std::vector<std::vector<int>>&)>;

// Level-synchronous beam search constrained by the trie. Continuations outside
// the trie are treated as -inf and never enter the top-k. Results are sorted
// by log-probability descending, ties broken lexicographically by identifier.
std::vector<BeamHypothesis> constrained_beam_search(const IdentifierTrie& trie, const Vocabulary& vocab, int beam_width,
                                                    const StepScorer& scorer);

// Spec-shaped convenience: scores one user's history with the model.
std::vector<BeamHypothesis> constrained_beam_search(const std::vector<int>& history, const IdentifierTrie& trie,
                                                    int beam_width, const SeqRecommender& model,
                                                    const std::vector<ItemIdentifier>& catalog_ids);

} // namespace genrec
