#include "genrec/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "genrec/errors.hpp"

namespace genrec {

std::vector<int> expand_to_items(const std::vector<BeamHypothesis>& beams, const IdentifierTrie& trie) {
    std::vector<int> out;
    for (const BeamHypothesis& b : beams) {
        const std::vector<int>* items = trie.items_for(b.codes);
        if (items == nullptr) continue;
        for (int item : *items) out.push_back(item);
    }
    return out;
}

std::vector<int> rank_items(const std::vector<int>& history, const SeqRecommender& model,
                            const std::vector<ItemIdentifier>& catalog_ids, const IdentifierTrie& trie,
                            int beam_width) {
    return expand_to_items(constrained_beam_search(history, trie, beam_width, model, catalog_ids), trie);
}

RankingResult rank_all(const SeqRecommender& model, const std::vector<ItemIdentifier>& catalog_ids,
                       const IdentifierTrie& trie, const std::vector<std::vector<int>>& histories,
                       const std::vector<int>& targets, int beam_width) {
    if (histories.size() != targets.size()) throw DataError("rank_all: history/target count mismatch");
    RankingResult result;
    result.targets = targets;
    result.ranked.resize(histories.size());
    if (histories.empty()) return result;
    if (beam_width < 1) throw ConfigError("beam width must be >= 1");

    ScoringSession session(model, catalog_ids, histories);
    const Vocabulary& vocab = model.vocab();
    const int64_t n_users = static_cast<int64_t>(histories.size());

    std::vector<std::vector<BeamHypothesis>> beams(static_cast<size_t>(n_users), {BeamHypothesis{}});
    for (int level = 0; level < trie.levels(); ++level) {
        std::vector<ScoringSession::PrefixQuery> queries;
        std::vector<std::pair<int64_t, size_t>> owner; // (user, beam index)
        for (int64_t u = 0; u < n_users; ++u) {
            for (size_t i = 0; i < beams[static_cast<size_t>(u)].size(); ++i) {
                queries.push_back({static_cast<int>(u), beams[static_cast<size_t>(u)][i].codes});
                owner.emplace_back(u, i);
            }
        }
        Tensor logprobs = session.next_token_logprobs(queries);

        std::vector<std::vector<BeamHypothesis>> next(static_cast<size_t>(n_users));
        for (size_t q = 0; q < queries.size(); ++q) {
            const auto [u, i] = owner[q];
            const BeamHypothesis& base = beams[static_cast<size_t>(u)][i];
            for (int code : trie.allowed_next(base.codes)) {
                BeamHypothesis cand;
                cand.codes = base.codes;
                cand.codes.push_back(code);
                cand.logp =
                    base.logp + logprobs[static_cast<int64_t>(q) * vocab.size() + vocab.token_index(level, code)];
                next[static_cast<size_t>(u)].push_back(std::move(cand));
            }
        }
        for (int64_t u = 0; u < n_users; ++u) {
            auto& cands = next[static_cast<size_t>(u)];
            std::sort(cands.begin(), cands.end(), [](const BeamHypothesis& a, const BeamHypothesis& b) {
                if (a.logp != b.logp) return a.logp > b.logp;
                return a.codes < b.codes;
            });
            if (static_cast<int>(cands.size()) > beam_width) cands.resize(static_cast<size_t>(beam_width));
            beams[static_cast<size_t>(u)] = std::move(cands);
        }
    }

    for (int64_t u = 0; u < n_users; ++u) {
        result.ranked[static_cast<size_t>(u)] = expand_to_items(beams[static_cast<size_t>(u)], trie);
    }
    return result;
}

namespace {

int rank_of_target(const std::vector<int>& ranked, int target) {
    for (size_t i = 0; i < ranked.size(); ++i) {
        if (ranked[i] == target) return static_cast<int>(i) + 1;
    }
    return -1;
}

} // namespace

double recall_at_k(const RankingResult& results, int k) {
    if (k < 1) throw ConfigError("recall_at_k: K must be >= 1");
    if (results.targets.empty()) return 0.0;
    int64_t hits = 0;
    for (size_t u = 0; u < results.targets.size(); ++u) {
        const int r = rank_of_target(results.ranked[u], results.targets[u]);
        if (r > 0 && r <= k) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(results.targets.size());
}

double ndcg_at_k(const RankingResult& results, int k) {
    if (k < 1) throw ConfigError("ndcg_at_k: K must be >= 1");
    if (results.targets.empty()) return 0.0;
    double total = 0.0;
    for (size_t u = 0; u < results.targets.size(); ++u) {
        const int r = rank_of_target(results.ranked[u], results.targets[u]);
        if (r > 0 && r <= k) total += 1.0 / std::log2(static_cast<double>(r) + 1.0);
    }
    return total / static_cast<double>(results.targets.size());
}

CodebookStats codebook_stats(const std::vector<ItemIdentifier>& catalog_ids, int levels, int codebook_size) {
    CodebookStats stats;
    stats.density.resize(static_cast<size_t>(levels), 0.0);
    stats.entropy.resize(static_cast<size_t>(levels), 0.0);
    if (catalog_ids.empty()) return stats;
    for (int l = 0; l < levels; ++l) {
        std::vector<int64_t> counts(static_cast<size_t>(codebook_size), 0);
        for (const ItemIdentifier& id : catalog_ids) {
            const int c = id.tokens[static_cast<size_t>(l)];
            if (c < 0 || c >= codebook_size) throw DataError("codebook_stats: code out of range");
            ++counts[static_cast<size_t>(c)];
        }
        int64_t used = 0;
        double entropy = 0.0;
        const double n = static_cast<double>(catalog_ids.size());
        for (int64_t c = 0; c < codebook_size; ++c) {
            if (counts[static_cast<size_t>(c)] == 0) continue;
            ++used;
            const double p = static_cast<double>(counts[static_cast<size_t>(c)]) / n;
            entropy -= p * std::log2(p);
        }
        stats.density[static_cast<size_t>(l)] = static_cast<double>(used) / static_cast<double>(codebook_size);
        stats.entropy[static_cast<size_t>(l)] = entropy;
    }
    return stats;
}

} // namespace genrec
