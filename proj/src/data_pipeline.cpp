#include "genrec/data_pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "genrec/errors.hpp"
#include "genrec/rng.hpp"

namespace genrec {

RawInteractions load_interactions(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open interactions file: " + path);
    RawInteractions raw;
    std::set<std::string> seen;
    std::string line;
    int64_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const size_t tab = line.find('\t');
        if (tab == std::string::npos || tab == 0 || tab + 1 >= line.size()) {
            throw DataError(path + ":" + std::to_string(line_no) + ": expected 'user<TAB>item,item,...'");
        }
        std::string user = line.substr(0, tab);
        if (!seen.insert(user).second) {
            throw DataError(path + ":" + std::to_string(line_no) + ": duplicate user '" + user + "'");
        }
        std::vector<std::string> items;
        std::stringstream ss(line.substr(tab + 1));
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            if (tok.empty()) {
                throw DataError(path + ":" + std::to_string(line_no) + ": empty item id");
            }
            items.push_back(tok);
        }
        if (items.empty()) throw DataError(path + ":" + std::to_string(line_no) + ": user has no items");
        raw.users.emplace_back(std::move(user), std::move(items));
    }
    if (raw.users.empty()) throw DataError(path + ": no interactions found");
    return raw;
}

void write_interactions(const std::string& path, const RawInteractions& raw) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("cannot open interactions file for writing: " + path);
    for (const auto& [user, items] : raw.users) {
        os << user << '\t';
        for (size_t i = 0; i < items.size(); ++i) {
            if (i) os << ',';
            os << items[i];
        }
        os << '\n';
    }
    if (!os) throw DataError("failed while writing interactions: " + path);
}

RawInteractions five_core_filter(const RawInteractions& raw, int min_count) {
    RawInteractions cur = raw;
    for (;;) {
        std::map<std::string, int64_t> item_count;
        for (const auto& [user, items] : cur.users) {
            for (const std::string& it : items) ++item_count[it];
        }
        bool changed = false;
        RawInteractions next;
        for (const auto& [user, items] : cur.users) {
            std::vector<std::string> kept;
            for (const std::string& it : items) {
                if (item_count[it] >= min_count) {
                    kept.push_back(it);
                } else {
                    changed = true;
                }
            }
            if (static_cast<int>(kept.size()) >= min_count) {
                next.users.emplace_back(user, std::move(kept));
            } else {
                changed = true;
            }
        }
        cur = std::move(next);
        if (!changed) break;
    }
    if (cur.users.empty()) throw DataError("5-core filtering removed every user");
    return cur;
}

InteractionDataset leave_one_out_split(const RawInteractions& filtered, int max_len) {
    if (max_len < 1) throw ConfigError("max_len must be >= 1");
    InteractionDataset ds;
    ds.max_len = max_len;
    auto intern = [&ds](const std::string& id) {
        auto it = ds.item_index.find(id);
        if (it != ds.item_index.end()) return it->second;
        const int idx = static_cast<int>(ds.item_ids.size());
        ds.item_ids.push_back(id);
        ds.item_index.emplace(id, idx);
        return idx;
    };
    for (const auto& [user, items] : filtered.users) {
        if (items.size() < 3) {
            throw DataError("user '" + user + "' has fewer than 3 interactions; cannot split");
        }
        UserSplit split;
        split.user_id = user;
        split.test = intern(items.back());
        split.validation = intern(items[items.size() - 2]);
        const size_t train_len = items.size() - 2;
        const size_t start = train_len > static_cast<size_t>(max_len) ? train_len - static_cast<size_t>(max_len) : 0;
        for (size_t i = start; i < train_len; ++i) split.train.push_back(intern(items[i]));
        ds.users.push_back(std::move(split));
    }
    return ds;
}

EmbeddingFile load_embeddings(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open embeddings file: " + path);
    EmbeddingFile table;
    std::string line;
    int64_t line_no = 0;
    int64_t declared = -1;
    while (std::getline(is, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::istringstream ss(line);
        if (declared < 0) {
            if (!(ss >> declared >> table.dim) || declared < 0 || table.dim < 1) {
                throw DataError(path + ":" + std::to_string(line_no) + ": expected header 'num_items dim'");
            }
            continue;
        }
        std::string id;
        if (!(ss >> id)) throw DataError(path + ":" + std::to_string(line_no) + ": missing item id");
        std::vector<double> vec(static_cast<size_t>(table.dim));
        for (int j = 0; j < table.dim; ++j) {
            if (!(ss >> vec[static_cast<size_t>(j)])) {
                throw DataError(path + ":" + std::to_string(line_no) + ": row width != " + std::to_string(table.dim));
            }
        }
        double extra;
        if (ss >> extra) throw DataError(path + ":" + std::to_string(line_no) + ": row wider than declared dim");
        if (!table.rows.emplace(id, std::move(vec)).second) {
            throw DataError(path + ":" + std::to_string(line_no) + ": duplicate item '" + id + "'");
        }
    }
    if (declared < 0) throw DataError(path + ": missing header line");
    if (static_cast<int64_t>(table.rows.size()) != declared) {
        throw DataError(path + ": header declares " + std::to_string(declared) + " items, found " +
                        std::to_string(table.rows.size()));
    }
    return table;
}

void write_embeddings(const std::string& path, const EmbeddingFile& table) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("cannot open embeddings file for writing: " + path);
    os << table.rows.size() << ' ' << table.dim << '\n';
    char buf[64];
    for (const auto& [id, vec] : table.rows) {
        os << id;
        for (double v : vec) {
            std::snprintf(buf, sizeof(buf), " %.17g", v);
            os << buf;
        }
        os << '\n';
    }
    if (!os) throw DataError("failed while writing embeddings: " + path);
}

Tensor assemble_embedding_matrix(const InteractionDataset& dataset, const EmbeddingFile& table) {
    const int64_t n = static_cast<int64_t>(dataset.item_ids.size());
    Tensor out({n, static_cast<int64_t>(table.dim)});
    for (int64_t i = 0; i < n; ++i) {
        const std::string& id = dataset.item_ids[static_cast<size_t>(i)];
        auto it = table.rows.find(id);
        if (it == table.rows.end()) throw DataError("embeddings missing catalog item '" + id + "'");
        std::copy(it->second.begin(), it->second.end(), out.data() + i * table.dim);
    }
    return out;
}

void SynthConfig::validate() const {
    if (items < 1 || users < 1) throw ConfigError("synth.items and synth.users must be >= 1");
    if (clusters < 1 || clusters > items) throw ConfigError("synth.clusters must be in [1, items]");
    if (seq_len < 3) throw ConfigError("synth.seq_len must be >= 3");
    if (noise < 0.0) throw ConfigError("synth.noise must be >= 0");
    if (embed_dim < 1) throw ConfigError("synth.embed_dim must be >= 1");
}

int synth_next_item(const SynthConfig& cfg, int item) { return (item + 1) % cfg.items; }

namespace {

std::string synth_item_id(int item) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "i%04d", item);
    return buf;
}

std::string synth_user_id(int user) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "u%04d", user);
    return buf;
}

} // namespace

SynthData synthesize(const SynthConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    SynthData data;

    // cluster centers spread wide; items round-robin over clusters
    Tensor centers({cfg.clusters, cfg.embed_dim});
    for (int64_t i = 0; i < centers.size(); ++i) centers[i] = 5.0 * rng.next_normal();
    data.embeddings.dim = cfg.embed_dim;
    for (int item = 0; item < cfg.items; ++item) {
        const int c = item % cfg.clusters;
        std::vector<double> vec(static_cast<size_t>(cfg.embed_dim));
        for (int j = 0; j < cfg.embed_dim; ++j) {
            vec[static_cast<size_t>(j)] = centers[c * cfg.embed_dim + j] + cfg.noise * rng.next_normal();
        }
        data.embeddings.rows.emplace(synth_item_id(item), std::move(vec));
    }

    // each user walks the successor cycle from a random start
    for (int user = 0; user < cfg.users; ++user) {
        int item = static_cast<int>(rng.next_below(static_cast<uint64_t>(cfg.items)));
        std::vector<std::string> seq;
        seq.reserve(static_cast<size_t>(cfg.seq_len));
        for (int t = 0; t < cfg.seq_len; ++t) {
            seq.push_back(synth_item_id(item));
            item = synth_next_item(cfg, item);
        }
        data.interactions.users.emplace_back(synth_user_id(user), std::move(seq));
    }
    return data;
}

} // namespace genrec
