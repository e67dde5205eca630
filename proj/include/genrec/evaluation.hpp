#pragma once

#include <vector>

#include "genrec/identifier_trie.hpp"
#include "genrec/rq_tokenizer.hpp"
#include "genrec/seq_recommender.hpp"

namespace genrec {

// Per-user ranked item lists after collision expansion, plus the held-out
// targets they are judged against.
struct RankingResult {
    std::vector<std::vector<int>> ranked; // catalog item indices, best first, no duplicates
    std::vector<int> targets;
};

struct CodebookStats {
    std::vector<double> density; // per level, used codes / K
    std::vector<double> entropy; // per level, bits
};

// Beam identifiers expanded to items; identifiers sharing several items expand
// to all of them in ascending item order at the identifier's rank.
std::vector<int> expand_to_items(const std::vector<BeamHypothesis>& beams, const IdentifierTrie& trie);

// Decode one user through the model (beam width per config).
std::vector<int> rank_items(const std::vector<int>& history, const SeqRecommender& model,
                            const std::vector<ItemIdentifier>& catalog_ids, const IdentifierTrie& trie, int beam_width);

// Batched full-ranking evaluation: encodes all histories once and runs all
// users' beams level-synchronously.
RankingResult rank_all(const SeqRecommender& model, const std::vector<ItemIdentifier>& catalog_ids,
                       const IdentifierTrie& trie, const std::vector<std::vector<int>>& histories,
                       const std::vector<int>& targets, int beam_width);

double recall_at_k(const RankingResult& results, int k);
double ndcg_at_k(const RankingResult& results, int k);

CodebookStats codebook_stats(const std::vector<ItemIdentifier>& catalog_ids, int levels, int codebook_size);

} // namespace genrec
