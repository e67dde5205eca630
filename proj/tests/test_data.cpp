#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <map>
#include <set>

#include "genrec/data_pipeline.hpp"
#include "genrec/errors.hpp"

using namespace genrec;

namespace {

void write_file(const std::string& path, const std::string& content) {
    std::ofstream os(path, std::ios::trunc);
    os << content;
}

RawInteractions make_raw(const std::vector<std::pair<std::string, std::vector<std::string>>>& users) {
    RawInteractions raw;
    raw.users = users;
    return raw;
}

} // namespace

TEST_CASE("load_interactions parses the tab/comma format and preserves order") {
    write_file("interactions_ok.txt", "u1\ti1,i2,i3\nu2\ti9\n");
    RawInteractions raw = load_interactions("interactions_ok.txt");
    REQUIRE(raw.users.size() == 2);
    CHECK(raw.users[0].first == "u1");
    CHECK(raw.users[0].second == std::vector<std::string>{"i1", "i2", "i3"});
    CHECK(raw.users[1].second == std::vector<std::string>{"i9"});
}

TEST_CASE("load_interactions rejects malformed input with line numbers") {
    write_file("interactions_bad.txt", "u1\ti1,i2\nbadline\n");
    CHECK_THROWS_WITH_AS(load_interactions("interactions_bad.txt"), doctest::Contains(":2:"), DataError);

    write_file("interactions_dup.txt", "u1\ti1\nu1\ti2\n");
    CHECK_THROWS_WITH_AS(load_interactions("interactions_dup.txt"), doctest::Contains("duplicate user"), DataError);

    write_file("interactions_empty.txt", "");
    CHECK_THROWS_AS(load_interactions("interactions_empty.txt"), DataError);
}

TEST_CASE("interactions write/read round trip is the identity") {
    RawInteractions raw = make_raw({{"alice", {"x", "y", "z"}}, {"bob", {"z", "x"}}});
    write_interactions("interactions_rt.txt", raw);
    RawInteractions back = load_interactions("interactions_rt.txt");
    REQUIRE(back.users.size() == raw.users.size());
    for (size_t i = 0; i < raw.users.size(); ++i) {
        CHECK(back.users[i].first == raw.users[i].first);
        CHECK(back.users[i].second == raw.users[i].second);
    }
}

TEST_CASE("five-core filter: already-dense data passes through unchanged") {
    std::vector<std::pair<std::string, std::vector<std::string>>> users;
    for (int u = 0; u < 6; ++u) {
        users.push_back({"u" + std::to_string(u), {"a", "b", "c", "d", "e"}});
    }
    RawInteractions filtered = five_core_filter(make_raw(users));
    CHECK(filtered.users.size() == 6);
    for (const auto& [user, items] : filtered.users) CHECK(items.size() == 5);
}

TEST_CASE("five-core filter: sparse user removed, popular items retained") {
    std::vector<std::pair<std::string, std::vector<std::string>>> users;
    for (int u = 0; u < 6; ++u) {
        users.push_back({"u" + std::to_string(u), {"a", "b", "c", "d", "e"}});
    }
    users.push_back({"thin", {"a", "b", "c", "d"}}); // only 4 interactions
    RawInteractions filtered = five_core_filter(make_raw(users));
    CHECK(filtered.users.size() == 6);
    for (const auto& [user, items] : filtered.users) CHECK(user != "thin");
}

TEST_CASE("five-core filter: cascading removal matches a brute-force fixpoint") {
    // item "rare" appears 5 times but only via users that get removed, forcing a cascade
    std::vector<std::pair<std::string, std::vector<std::string>>> users;
    for (int u = 0; u < 8; ++u) {
        users.push_back({"core" + std::to_string(u), {"a", "b", "c", "d", "e"}});
    }
    for (int u = 0; u < 5; ++u) {
        users.push_back({"frail" + std::to_string(u), {"rare", "a", "b", "zz" + std::to_string(u)}});
    }
    RawInteractions filtered = five_core_filter(make_raw(users));

    // brute-force oracle
    auto survives = [&](const RawInteractions& raw) {
        RawInteractions cur = raw;
        bool changed = true;
        while (changed) {
            changed = false;
            std::map<std::string, int> count;
            for (auto& [u, items] : cur.users) {
                for (auto& it : items) ++count[it];
            }
            RawInteractions next;
            for (auto& [u, items] : cur.users) {
                std::vector<std::string> kept;
                for (auto& it : items) {
                    if (count[it] >= 5) {
                        kept.push_back(it);
                    } else {
                        changed = true;
                    }
                }
                if (kept.size() >= 5) {
                    next.users.push_back({u, kept});
                } else {
                    changed = changed || !kept.empty() || !items.empty();
                }
            }
            cur = next;
        }
        return cur;
    };
    RawInteractions oracle = survives(make_raw(users));
    REQUIRE(filtered.users.size() == oracle.users.size());
    for (size_t i = 0; i < oracle.users.size(); ++i) {
        CHECK(filtered.users[i].first == oracle.users[i].first);
        CHECK(filtered.users[i].second == oracle.users[i].second);
    }

    // post-hoc invariant: every remaining user and item has >= 5 interactions
    std::map<std::string, int> count;
    for (auto& [u, items] : filtered.users) {
        CHECK(items.size() >= 5);
        for (auto& it : items) ++count[it];
    }
    for (auto& [it, c] : count) CHECK(c >= 5);
}

TEST_CASE("leave-one-out split: last two interactions become validation and test") {
    RawInteractions raw = make_raw({{"u", {"a", "b", "c", "d", "e"}}});
    InteractionDataset ds = leave_one_out_split(raw);
    REQUIRE(ds.users.size() == 1);
    const UserSplit& s = ds.users[0];
    CHECK(ds.item_ids[static_cast<size_t>(s.test)] == "e");
    CHECK(ds.item_ids[static_cast<size_t>(s.validation)] == "d");
    REQUIRE(s.train.size() == 3);
    CHECK(ds.item_ids[static_cast<size_t>(s.train[0])] == "a");
    CHECK(ds.item_ids[static_cast<size_t>(s.train[2])] == "c");

    // partition completeness: train + val + test covers the sequence
    CHECK(s.train.size() + 2 == raw.users[0].second.size());
}

TEST_CASE("leave-one-out split: long histories keep the most recent max_len items") {
    std::vector<std::string> items;
    for (int i = 0; i < 25; ++i) items.push_back("i" + std::to_string(i));
    InteractionDataset ds = leave_one_out_split(make_raw({{"u", items}}), 20);
    const UserSplit& s = ds.users[0];
    REQUIRE(s.train.size() == 20);
    CHECK(ds.item_ids[static_cast<size_t>(s.train.front())] == "i3"); // 23 train items, keep last 20
    CHECK(ds.item_ids[static_cast<size_t>(s.train.back())] == "i22");
    CHECK(ds.item_ids[static_cast<size_t>(s.validation)] == "i23");
    CHECK(ds.item_ids[static_cast<size_t>(s.test)] == "i24");
}

TEST_CASE("leave-one-out split: too-short users are rejected") {
    CHECK_THROWS_AS(leave_one_out_split(make_raw({{"u", {"a", "b"}}})), DataError);
}

TEST_CASE("embeddings: header parse, exact decimal values, duplicate and width errors") {
    write_file("emb_ok.txt", "2 3\nfoo 0.5 -1.25 3\nbar 1e-3 2.5 -0.125\n");
    EmbeddingFile table = load_embeddings("emb_ok.txt");
    CHECK(table.dim == 3);
    REQUIRE(table.rows.size() == 2);
    CHECK(table.rows.at("foo") == std::vector<double>{0.5, -1.25, 3.0});
    CHECK(table.rows.at("bar") == std::vector<double>{1e-3, 2.5, -0.125});

    write_file("emb_dup.txt", "2 2\nx 1 2\nx 3 4\n");
    CHECK_THROWS_WITH_AS(load_embeddings("emb_dup.txt"), doctest::Contains("duplicate item"), DataError);

    write_file("emb_wide.txt", "1 2\nx 1 2 3\n");
    CHECK_THROWS_AS(load_embeddings("emb_wide.txt"), DataError);

    write_file("emb_narrow.txt", "1 3\nx 1 2\n");
    CHECK_THROWS_AS(load_embeddings("emb_narrow.txt"), DataError);
}

TEST_CASE("embedding matrix assembly fails loudly on missing items") {
    RawInteractions raw = make_raw({{"u", {"a", "b", "c"}}});
    InteractionDataset ds = leave_one_out_split(raw);
    EmbeddingFile table;
    table.dim = 2;
    table.rows["a"] = {1.0, 2.0};
    table.rows["b"] = {3.0, 4.0};
    CHECK_THROWS_WITH_AS(assemble_embedding_matrix(ds, table), doctest::Contains("'c'"), DataError);

    table.rows["c"] = {5.0, 6.0};
    Tensor m = assemble_embedding_matrix(ds, table);
    CHECK(m.dim(0) == 3);
    CHECK(m[ds.item_index.at("b") * 2 + 1] == 4.0);
}

TEST_CASE("embeddings write/read round trip preserves values bitwise") {
    EmbeddingFile table;
    table.dim = 2;
    table.rows["p"] = {0.1234567890123456789, -7.25};
    table.rows["q"] = {1.0 / 3.0, 2.0 / 7.0};
    write_embeddings("emb_rt.txt", table);
    EmbeddingFile back = load_embeddings("emb_rt.txt");
    for (const auto& [id, vec] : table.rows) {
        REQUIRE(back.rows.count(id) == 1);
        for (size_t j = 0; j < vec.size(); ++j) CHECK(back.rows.at(id)[j] == vec[j]);
    }
}

TEST_CASE("synthesize: zero noise with clusters == items puts embeddings exactly on centers") {
    SynthConfig cfg;
    cfg.items = 10;
    cfg.users = 12;
    cfg.clusters = 10;
    cfg.seq_len = 6;
    cfg.noise = 0.0;
    cfg.embed_dim = 4;
    cfg.seed = 3;
    SynthData a = synthesize(cfg);
    SynthData b = synthesize(cfg);

    // determinism, bitwise
    for (const auto& [id, vec] : a.embeddings.rows) {
        const auto& other = b.embeddings.rows.at(id);
        for (size_t j = 0; j < vec.size(); ++j) CHECK(vec[j] == other[j]);
    }
    REQUIRE(a.interactions.users.size() == b.interactions.users.size());
    for (size_t i = 0; i < a.interactions.users.size(); ++i) {
        CHECK(a.interactions.users[i].second == b.interactions.users[i].second);
    }

    // with zero noise, all items in the same cluster share an embedding; with
    // clusters == items every embedding is distinct
    std::set<std::vector<double>> uniq;
    for (const auto& [id, vec] : a.embeddings.rows) uniq.insert(vec);
    CHECK(uniq.size() == 10);
}

TEST_CASE("synthesize: the generator's successor rule is a perfect oracle for every transition") {
    SynthConfig cfg;
    cfg.items = 14;
    cfg.users = 30;
    cfg.clusters = 7;
    cfg.seq_len = 9;
    cfg.noise = 0.1;
    cfg.seed = 8;
    SynthData data = synthesize(cfg);

    auto item_number = [](const std::string& id) { return std::stoi(id.substr(1)); };
    for (const auto& [user, seq] : data.interactions.users) {
        for (size_t t = 0; t + 1 < seq.size(); ++t) {
            CHECK(item_number(seq[t + 1]) == synth_next_item(cfg, item_number(seq[t])));
        }
    }

    // round trip through the file formats
    write_interactions("synth_rt_inter.txt", data.interactions);
    write_embeddings("synth_rt_emb.txt", data.embeddings);
    RawInteractions inter = load_interactions("synth_rt_inter.txt");
    EmbeddingFile emb = load_embeddings("synth_rt_emb.txt");
    CHECK(inter.users.size() == data.interactions.users.size());
    CHECK(emb.rows.size() == data.embeddings.rows.size());

    CHECK_THROWS_AS(
        [] {
            SynthConfig bad;
            bad.items = 3;
            bad.clusters = 5;
            bad.validate();
        }(),
        ConfigError);
}
