#include <catch_amalgamated.hpp>

#include "mmrag/rerank.hpp"
#include "support.hpp"

using namespace mmrag;
using Indices = std::vector<std::size_t>;

namespace {

RetrievalGroup group_of(std::size_t n) {
    RetrievalGroup g{"q", {}};
    for (std::size_t i = 0; i < n; ++i) g.items.push_back({"id" + std::to_string(i + 1), 1.0 - 0.01 * i, i});
    return g;
}

RerankSettings settings() {
    RerankSettings s;
    s.prompt_template = "Question: {question}\n{items}\nList:";
    return s;
}

}  // namespace

TEST_CASE("rerank input numbering") {
    const std::vector<std::string> texts{"alpha", "beta", "gamma"};
    const auto req = build_rerank_input("Who?", "img.jpg", texts, settings());
    CHECK(req.user_parts[0].value == "Question: Who?\n1. alpha\n2. beta\n3. gamma\nList:");
    CHECK(req.user_parts[1] == ChatPart::image("img.jpg"));
    CHECK(req.temperature == 0.0);
    CHECK_THROWS_AS(build_rerank_input("Who?", "", std::span<const std::string>{}, settings()), Error);
    auto no_items = settings();
    no_items.prompt_template = "Question: {question}";
    CHECK_THROWS_AS(build_rerank_input("Who?", "", texts, no_items), TemplateError);
    const std::vector<std::string> many(31, "x");
    CHECK_THROWS_AS(build_rerank_input("Who?", "", many, settings()), Error);
}

TEST_CASE("parse_rerank_output examples") {
    CHECK(parse_rerank_output("[2, 1, 2, 9]", 3) == Indices{2, 1});
    CHECK(parse_rerank_output("[]", 3) == Indices{});
    CHECK(parse_rerank_output("[ ]", 3) == Indices{});
    CHECK(parse_rerank_output("the answer is [3,1] thanks", 3) == Indices{3, 1});
    CHECK_FALSE(parse_rerank_output("no list here", 3).has_value());
    CHECK(parse_rerank_output("[0, -1, 4, 2]", 3) == Indices{2});
    CHECK(parse_rerank_output("[1, 2,]", 3) == Indices{1, 2});
    CHECK(parse_rerank_output("[99999999999999999999999, 1]", 3) == Indices{1});
    CHECK(parse_rerank_output("see [x] then [2]", 3) == Indices{2});
    CHECK(parse_rerank_output("[1]\n[2]", 3) == Indices{1});
}

TEST_CASE("format_index_list round-trips") {
    const Indices v{1, 3};
    CHECK(format_index_list(v) == "[1, 3]");
    CHECK(format_index_list(Indices{}) == "[]");
    CHECK(parse_rerank_output(format_index_list(v), 3) == v);
}

TEST_CASE("apply_rerank rules") {
    Indices fourteen{5, 2, 7, 1, 30, 12, 3, 9, 4, 22, 18, 6, 11, 8};
    const auto d = apply_rerank(group_of(30), fourteen, 10);
    REQUIRE(d.kept.size() == 10);
    for (std::size_t i = 0; i < 10; ++i) CHECK(d.kept[i] == "id" + std::to_string(fourteen[i]));
    CHECK_FALSE(d.fallback_used);

    const auto none = apply_rerank(group_of(5), Indices{}, 10);
    CHECK(none.kept.empty());
    CHECK_FALSE(none.fallback_used);

    const auto fb = apply_rerank(group_of(4), std::nullopt, 10);
    CHECK(fb.kept == std::vector<std::string>{"id1", "id2", "id3", "id4"});
    CHECK(fb.fallback_used);

    const auto fb12 = apply_rerank(group_of(12), std::nullopt, 10);
    CHECK(fb12.kept.size() == 10);
    CHECK(fb12.kept.back() == "id10");
}

TEST_CASE("apply_rerank invariants over random inputs") {
    std::mt19937_64 rng(17);
    for (int round = 0; round < 500; ++round) {
        const std::size_t n = 1 + rng() % 30;
        const auto g = group_of(n);
        Indices idx;
        for (std::size_t k = rng() % 40; k > 0; --k) idx.push_back(rng() % (n + 5));
        const auto d = apply_rerank(g, idx, 10);
        CHECK(d.kept.size() <= 10);
        std::set<std::string> uniq(d.kept.begin(), d.kept.end());
        CHECK(uniq.size() == d.kept.size());
        for (const auto& id : d.kept) {
            CHECK(std::any_of(g.items.begin(), g.items.end(), [&](const ScoredItem& s) { return s.entry_id == id; }));
        }
    }
}

TEST_CASE("rerank_group uses the backend and falls back on failures") {
    std::vector<CorpusEntry> es;
    for (int i = 1; i <= 4; ++i) {
        CorpusEntry e;
        e.id = "id" + std::to_string(i);
        e.embedding = {1.0, static_cast<double>(i)};
        e.snippet = "text " + std::to_string(i);
        es.push_back(e);
    }
    const auto idx = build_index(es);
    RetrievalGroup g{"q", {}};
    for (std::size_t i = 0; i < 4; ++i) g.items.push_back({idx.entry(i).id, 0.5, i});

    auto good = testing::mock({{"rules", {{{"contains", "4. text 4"}, {"response", "[4, 2]"}}}}});
    const auto d = rerank_group("Who?", "", g, idx, *good, settings(), 10);
    CHECK(d.kept == std::vector<std::string>{"id4", "id2"});
    CHECK(d.raw_output == "[4, 2]");

    auto junk = testing::mock({{"default", {"I cannot rank these"}}});
    CHECK(rerank_group("Who?", "", g, idx, *junk, settings(), 10).fallback_used);

    auto broken = testing::mock({{"rules", {{{"contains", "List:"}, {"error", "backend"}}}}});
    CHECK(rerank_group("Who?", "", g, idx, *broken, settings(), 10).kept.size() == 4);

    auto slow = testing::mock({{"rules", {{{"contains", "List:"}, {"error", "timeout"}}}}});
    CHECK_THROWS_AS(rerank_group("Who?", "", g, idx, *slow, settings(), 10), ChatError);
}
