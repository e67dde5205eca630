#include "genrec/identifier_trie.hpp"

#include <algorithm>

#include "genrec/errors.hpp"

namespace genrec {

IdentifierTrie IdentifierTrie::build(const std::vector<ItemIdentifier>& catalog_ids) {
    if (catalog_ids.empty()) throw DataError("trie: empty catalog");
    IdentifierTrie trie;
    trie.levels_ = static_cast<int>(catalog_ids[0].tokens.size());
    for (size_t item = 0; item < catalog_ids.size(); ++item) {
        const ItemIdentifier& id = catalog_ids[item];
        if (static_cast<int>(id.tokens.size()) != trie.levels_) {
            throw DataError("trie: identifier length mismatch at item " + std::to_string(item));
        }
        int node = 0;
        for (int code : id.tokens) {
            auto it = trie.nodes_[static_cast<size_t>(node)].children.find(code);
            if (it == trie.nodes_[static_cast<size_t>(node)].children.end()) {
                trie.nodes_.push_back(Node{});
                it = trie.nodes_[static_cast<size_t>(node)]
                         .children.emplace(code, static_cast<int>(trie.nodes_.size()) - 1)
                         .first;
            }
            node = it->second;
        }
        if (trie.nodes_[static_cast<size_t>(node)].items.empty()) ++trie.terminal_count_;
        trie.nodes_[static_cast<size_t>(node)].items.push_back(static_cast<int>(item));
    }
    for (Node& n : trie.nodes_) std::sort(n.items.begin(), n.items.end());
    return trie;
}

int IdentifierTrie::walk(const std::vector<int>& codes) const {
    int node = 0;
    for (int code : codes) {
        const auto& children = nodes_[static_cast<size_t>(node)].children;
        auto it = children.find(code);
        if (it == children.end()) return -1;
        node = it->second;
    }
    return node;
}

std::vector<int> IdentifierTrie::allowed_next(const std::vector<int>& prefix) const {
    std::vector<int> out;
    const int node = walk(prefix);
    if (node < 0) return out;
    for (const auto& [code, child] : nodes_[static_cast<size_t>(node)].children) out.push_back(code);
    return out; // std::map keeps codes ascending
}

const std::vector<int>* IdentifierTrie::items_for(const std::vector<int>& identifier) const {
    const int node = walk(identifier);
    if (node < 0 || nodes_[static_cast<size_t>(node)].items.empty()) return nullptr;
    return &nodes_[static_cast<size_t>(node)].items;
}

void IdentifierTrie::export_text(std::ostream& os, const std::vector<std::string>& item_names) const {
    // depth-first in code order yields identifiers in lexicographic order
    std::vector<int> codes;
    std::function<void(int)> walk_out = [&](int node) {
        const Node& n = nodes_[static_cast<size_t>(node)];
        if (!n.items.empty()) {
            for (int item : n.items) {
                for (size_t i = 0; i < codes.size(); ++i) {
                    if (i) os << ' ';
                    os << codes[i];
                }
                os << '\t' << item_names[static_cast<size_t>(item)] << '\n';
            }
        }
        for (const auto& [code, child] : n.children) {
            codes.push_back(code);
            walk_out(child);
            codes.pop_back();
        }
    };
    walk_out(0);
}

std::vector<BeamHypothesis> constrained_beam_search(const IdentifierTrie& trie, const Vocabulary& vocab, int beam_width,
                                                    const StepScorer& scorer) {
    if (beam_width < 1) throw ConfigError("beam width must be >= 1");
    std::vector<BeamHypothesis> beams{BeamHypothesis{}};
    for (int level = 0; level < trie.levels(); ++level) {
        std::vector<std::vector<int>> prefixes;
        prefixes.reserve(beams.size());
        for (const BeamHypothesis& b : beams) prefixes.push_back(b.codes);
        Tensor logprobs = scorer(prefixes);

        std::vector<BeamHypothesis> candidates;
        for (size_t i = 0; i < beams.size(); ++i) {
            for (int code : trie.allowed_next(beams[i].codes)) {
                BeamHypothesis cand;
                cand.codes = beams[i].codes;
                cand.codes.push_back(code);
                cand.logp = beams[i].logp +
                            logprobs[static_cast<int64_t>(i) * vocab.size() + vocab.token_index(level, code)];
                candidates.push_back(std::move(cand));
            }
        }
        std::sort(candidates.begin(), candidates.end(), [](const BeamHypothesis& a, const BeamHypothesis& b) {
            if (a.logp != b.logp) return a.logp > b.logp;
            return a.codes < b.codes;
        });
        if (static_cast<int>(candidates.size()) > beam_width) candidates.resize(static_cast<size_t>(beam_width));
        beams = std::move(candidates);
    }
    return beams;
}

std::vector<BeamHypothesis> constrained_beam_search(const std::vector<int>& history, const IdentifierTrie& trie,
                                                    int beam_width, const SeqRecommender& model,
                                                    const std::vector<ItemIdentifier>& catalog_ids) {
    ScoringSession session(model, catalog_ids, {history});
    StepScorer scorer = [&](const std::vector<std::vector<int>>& prefixes) {
        std::vector<ScoringSession::PrefixQuery> queries;
        queries.reserve(prefixes.size());
        for (const auto& p : prefixes) queries.push_back({0, p});
        return session.next_token_logprobs(queries);
    };
    return constrained_beam_search(trie, model.vocab(), beam_width, scorer);
}

} // namespace genrec
