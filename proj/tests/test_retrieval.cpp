#include <catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "mmrag/retrieval.hpp"
#include "support.hpp"

using namespace mmrag;

namespace {

CorpusEntry entry(const std::string& id, Embedding v, std::string snippet = "s") {
    CorpusEntry e;
    e.id = id;
    e.embedding = std::move(v);
    e.snippet = std::move(snippet);
    return e;
}

/// Maps known query strings to fixed vectors.
class TableEmbedder final : public Embedder {
public:
    explicit TableEmbedder(std::map<std::string, Embedding> table) : table_(std::move(table)) {}
    std::size_t dimension() const override { return table_.begin()->second.size(); }
    std::string id() const override { return "table"; }
    Embedding embed_text(const std::string& text) const override { return table_.at(text); }
    Embedding embed_image(const std::string& ref) const override { return table_.at(ref); }

private:
    std::map<std::string, Embedding> table_;
};

/// Scores every entry, then a full stable sort by (score desc, id asc).
std::vector<std::string> brute_force(const VectorIndex& index, const Embedding& q, std::size_t k) {
    const double qn = std::sqrt(std::inner_product(q.begin(), q.end(), q.begin(), 0.0));
    std::vector<std::pair<double, std::string>> all;
    for (const auto& e : index.entries()) {
        double s = 0;
        for (std::size_t i = 0; i < q.size(); ++i) s += e.embedding[i] * (q[i] / qn);
        all.emplace_back(s, e.id);
    }
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
        return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < std::min(k, all.size()); ++i) ids.push_back(all[i].second);
    return ids;
}

std::vector<std::string> ids_of(const RetrievalGroup& g) {
    std::vector<std::string> out;
    for (const auto& it : g.items) out.push_back(it.entry_id);
    return out;
}

}  // namespace

TEST_CASE("build_index contracts") {
    const auto idx = build_index({entry("a", {1, 0, 0, 0}), entry("b", {0, 2, 0, 0}), entry("c", {1, 1, 1, 1})});
    CHECK(idx.dimension() == 4);
    CHECK(idx.size() == 3);
    CHECK(l2_norm(idx.find("b")->embedding) == Catch::Approx(1.0).epsilon(1e-12));
    CHECK(idx.find("zzz") == nullptr);
    CHECK_THROWS_AS(build_index({entry("a", {1, 0, 0, 0}), entry("b", {1, 0, 0, 0, 0})}), DimensionMismatch);
    CHECK_THROWS_AS(build_index({entry("e1", {1, 0}), entry("e1", {0, 1})}), DuplicateId);
    CHECK_THROWS_AS(build_index({}), Error);
    CHECK_THROWS_AS(build_index({entry("z", {0, 0})}), Error);
}

TEST_CASE("hashing embedder") {
    HashingEmbedder emb(256);
    CHECK(emb.embed_text("Eiffel Tower") == emb.embed_text("Eiffel Tower"));
    CHECK(l2_norm(emb.embed_text("anything at all")) == Catch::Approx(1.0).epsilon(1e-12));
    const auto t = emb.embed_text("eiffel tower");
    CHECK(dot(t, emb.embed_text("eiffel towers")) > dot(t, emb.embed_text("zebra migration")));
    CHECK(emb.embed_text("EIFFEL   tower!") == t);
    CHECK(emb.embed_image("images/eiffel_tower.jpg") == emb.embed_text("images eiffel tower jpg"));
    CHECK_THROWS_AS(emb.embed_text("  ..  "), Error);
    CHECK_THROWS_AS(HashingEmbedder(0), ConfigError);
}

TEST_CASE("search_topk basics") {
    std::vector<CorpusEntry> es;
    std::mt19937_64 rng(1);
    std::normal_distribution<double> nd;
    for (int i = 0; i < 12; ++i) {
        Embedding v(6);
        for (auto& x : v) x = nd(rng);
        es.push_back(entry("e" + std::to_string(i), v));
    }
    const auto idx = build_index(es);
    const auto& e7 = idx.find("e7")->embedding;
    const auto top = search_topk(idx, e7, 3);
    REQUIRE(top.items.size() == 3);
    CHECK(top.items[0].entry_id == "e7");
    CHECK(top.items[0].score == Catch::Approx(1.0).margin(1e-9));
    CHECK(search_topk(idx, e7, 100).items.size() == 12);
    CHECK_THROWS_AS(search_topk(idx, Embedding(5, 1.0), 3), DimensionMismatch);
    CHECK_THROWS_AS(search_topk(idx, e7, 0), Error);
    CHECK(search_topk(VectorIndex(6), e7, 3).items.empty());
}

TEST_CASE("search_topk matches brute force, ties included") {
    std::mt19937_64 rng(99);
    for (int round = 0; round < 50; ++round) {
        const std::size_t dim = 8 + rng() % 57;
        const std::size_t n = 1 + rng() % 50;
        std::vector<CorpusEntry> es;
        for (std::size_t i = 0; i < n; ++i) {
            Embedding v(dim);
            // small integer grid so duplicate directions and exact ties occur
            for (auto& x : v) x = static_cast<double>(static_cast<int>(rng() % 3) - 1);
            v[rng() % dim] = 1.0;
            es.push_back(entry("id" + std::to_string(rng() % 1000) + "_" + std::to_string(i), v));
        }
        const auto idx = build_index(es);
        Embedding q = idx.entry(rng() % n).embedding;
        const std::size_t k = 1 + rng() % (n + 3);
        CHECK(ids_of(search_topk(idx, q, k)) == brute_force(idx, q, k));
    }
}

TEST_CASE("tie order is by entry id") {
    const auto idx = build_index({entry("b", {1, 0}), entry("a", {1, 0}), entry("c", {0, 1})});
    CHECK(ids_of(search_topk(idx, Embedding{1, 0}, 3)) == std::vector<std::string>{"a", "b", "c"});
}

TEST_CASE("extract_text") {
    CorpusEntry e;
    e.attributes = {{"name", "Eiffel Tower"}, {"height", "330m"}};
    CHECK(extract_text(e) == "height: 330m\nname: Eiffel Tower");
    CHECK(extract_text(e) == extract_text(e));
    CorpusEntry s;
    s.snippet = "s";
    CHECK(extract_text(s) == "s");
}

TEST_CASE("multi-query retrieval picks the largest group") {
    std::vector<CorpusEntry> es;
    for (int i = 0; i < 3; ++i) es.push_back(entry("x" + std::to_string(i), {1, 0, 0}));
    for (int i = 0; i < 7; ++i) es.push_back(entry("y" + std::to_string(i), {0, 1, 0}));
    for (int i = 0; i < 7; ++i) es.push_back(entry("z" + std::to_string(i), {0, 0, 1}));
    const auto idx = build_index(es);
    TableEmbedder emb({{"a", {1, 0, 0}}, {"b", {0, 1, 0}}, {"c", {0, 0, 1}}});
    const std::vector<std::string> qs{"a", "b", "c"};
    const auto g = multi_query_retrieve(qs, idx, emb, 30, 0.5);
    CHECK(g.query == "b");
    CHECK(g.size() == 7);
    const std::vector<std::string> one{"c"};
    CHECK(multi_query_retrieve(one, idx, emb, 30, 0.5).query == "c");
    CHECK_THROWS_AS(multi_query_retrieve(std::span<const std::string>{}, idx, emb, 30, 0.5), Error);
}

TEST_CASE("winning group is capped to the highest-similarity items") {
    std::vector<CorpusEntry> es;
    std::mt19937_64 rng(5);
    for (int i = 0; i < 45; ++i) es.push_back(entry("w" + std::to_string(i), {1.0, 0.05 * (rng() % 40), 0.0}));
    const auto idx = build_index(es);
    TableEmbedder emb({{"q", {1, 0, 0}}});
    const std::vector<std::string> qs{"q"};
    const auto g = multi_query_retrieve(qs, idx, emb, 30, 0.0);
    CHECK(g.size() == 30);
    CHECK(ids_of(g) == brute_force(idx, {1, 0, 0}, 30));
}

TEST_CASE("query generation") {
    QueryGenSettings settings;
    settings.prompt_template = "Previous:\n{history}\nQuestion: {question}\nQuery:";

    auto dup = testing::mock({{"rules", {{{"contains", "Query:"}, {"responses", {"q1", "q2", " q2 "}}}}}});
    CHECK(generate_queries({"Who?", {}, ""}, 3, *dup, settings) == std::vector<std::string>{"q1", "q2"});

    auto five = testing::mock({{"rules", {{{"contains", "Query:"}, {"responses", {"a", "b", "c", "d", "e"}}}}}});
    CHECK(generate_queries({"Who?", {}, ""}, 5, *five, settings) == std::vector<std::string>{"a", "b", "c", "d", "e"});

    auto down = testing::mock({{"rules", {{{"contains", "Query:"}, {"error", "transport"}}}}});
    CHECK(generate_queries({"Who?", {}, ""}, 3, *down, settings) == std::vector<std::string>{"Who?"});

    auto slow = testing::mock({{"rules", {{{"contains", "Query:"}, {"delay_seconds", 40}, {"response", "x"}}}}});
    VirtualClock clock;
    CHECK_THROWS_AS(generate_queries({"Who?", {}, ""}, 3, *slow, settings, Deadline::after(clock, Millis(1000))),
                    ChatError);

    const auto req = build_query_request({"Who built it?", {"What is this?"}, "img.jpg"}, settings, 4);
    CHECK(req.user_parts[0].value == "Previous:\n- What is this?\nQuestion: Who built it?\nQuery:");
    CHECK(req.user_parts[1] == ChatPart::image("img.jpg"));
    CHECK(req.temperature == 0.8);
    CHECK(req.seed == 4u);
}

TEST_CASE("corpus parsing and index persistence") {
    HashingEmbedder emb(32);
    std::istringstream good(
        R"({"id":"a","kind":"image_kg","attributes":{"name":"A"}})"
        "\n"
        R"({"id":"b","snippet":"bee"})"
        "\n"
        R"({"id":"c","snippet":"sea"})"
        "\n");
    auto entries = parse_corpus(good, emb);
    CHECK(entries.size() == 3);
    CHECK(entries[0].kind == EntryKind::ImageKG);

    std::istringstream bad("{\"id\":\"a\",\"snippet\":\"x\"}\n{\"id\": 5}\n");
    try {
        parse_corpus(bad, emb);
        FAIL("expected SchemaError");
    } catch (const SchemaError& e) {
        CHECK(e.line() == 2);
        CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
    std::istringstream empty_entry("{\"id\":\"a\"}\n");
    CHECK_THROWS_AS(parse_corpus(empty_entry, emb), SchemaError);

    testing::TempDir dir("idx");
    const auto idx = build_index(std::move(entries));
    save_index(idx, dir.file("i1.json"), emb.id());
    const auto back = load_index(dir.file("i1.json"));
    save_index(back, dir.file("i2.json"), emb.id());
    CHECK(testing::read_text(dir.file("i1.json")) == testing::read_text(dir.file("i2.json")));
    CHECK(back.find("b")->embedding == idx.find("b")->embedding);
}
