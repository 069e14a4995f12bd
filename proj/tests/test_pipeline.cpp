#include <catch_amalgamated.hpp>

#include <thread>

#include "mmrag/pipeline.hpp"
#include "support.hpp"

using namespace mmrag;

namespace {

std::shared_ptr<const VectorIndex> small_index(std::size_t n, const Embedder& emb) {
    std::vector<CorpusEntry> es;
    for (std::size_t i = 0; i < n; ++i) {
        CorpusEntry e;
        e.id = "doc" + std::to_string(100 + i);
        e.snippet = "paris landmark fact number " + std::to_string(i);
        e.embedding = emb.embed_text(e.snippet);
        es.push_back(e);
    }
    return std::make_shared<VectorIndex>(build_index(std::move(es)));
}

Pipeline make_pipeline(std::shared_ptr<ChatBackend> backend, std::size_t corpus = 12, PipelineConfig cfg = {}) {
    auto emb = std::make_shared<HashingEmbedder>(64);
    cfg.min_similarity = -1.0;  // every entry in every group
    auto index = corpus ? small_index(corpus, *emb) : std::make_shared<VectorIndex>(64);
    return Pipeline(cfg, {index, emb, std::move(backend), {}, {}});
}

const json kThreeStep = {{"rules",
                          {{{"contains", "Query:"}, {"response", "q"}},
                           {{"contains", "info number list"}, {"response", "[1]"}},
                           {{"contains", "Answer:"}, {"response", "a"}}}}};

/// Real-time backend that sleeps before replying.
class SleepyBackend final : public ChatBackend {
public:
    explicit SleepyBackend(std::chrono::milliseconds d) : delay_(d) {}
    std::string id() const override { return "sleepy"; }
    ChatResponse complete(const ChatRequest&, const CallContext&) override {
        std::this_thread::sleep_for(delay_);
        return {"late answer", id(), {}};
    }

private:
    std::chrono::milliseconds delay_;
};

}  // namespace

TEST_CASE("enforce_budget") {
    CHECK(enforce_budget([] { return 7; }, Millis(30000)) == 7);
    CHECK_THROWS_AS(enforce_budget([] { std::this_thread::sleep_for(std::chrono::milliseconds(400)); return 1; },
                                   Millis(50)),
                    ChatError);
    CHECK_THROWS_AS(enforce_budget([]() -> int { throw ConfigError("boom"); }, Millis(1000)), ConfigError);
    CHECK_THROWS_AS(enforce_budget([] { return 1; }, Millis(0)), ConfigError);
}

TEST_CASE("task1: scripted answer from the image retrieval prompt") {
    auto backend = testing::mock({{"rules", {{{"contains", "Question: Where?\n"}, {"response", "paris"}}}}});
    const auto p = make_pipeline(backend, 15);
    const auto trace = p.run_turn_traced(TaskKind::Task1, {"Where?", "images/paris_landmark.jpg", {}, {}}, "s1", 0);
    CHECK(trace.record.answer_text == "paris");
    CHECK_FALSE(trace.record.is_refusal);
    CHECK(trace.record.kept_item_ids.size() == 10);
    CHECK(trace.retrieved_texts.size() == 10);
    CHECK(trace.record.queries_used.empty());
    CHECK(trace.qa_request.user_parts.back() == ChatPart::image("images/paris_landmark.jpg"));
    CHECK(trace.qa_request.temperature == 0.0);
    CHECK(trace.qa_request.max_output_tokens == 75);
}

TEST_CASE("task1: timeout and failures become refusals") {
    auto slow = testing::mock({{"rules", {{{"contains", "Answer:"}, {"delay_seconds", 31}, {"response", "x"}}}}});
    const auto rec = make_pipeline(slow).run_task1_turn({"s", "img.jpg", {{"Where?", "Paris"}}});
    CHECK(rec.answer_text == "I don't know");
    CHECK(rec.is_refusal);
    CHECK(rec.failure == "timeout");
    CHECK(rec.latency == Millis(30000));

    auto broken = testing::mock({{"rules", {{{"contains", "Answer:"}, {"error", "transport"}}}}});
    CHECK(make_pipeline(broken).run_task1_turn({"s", "img.jpg", {{"Where?", "Paris"}}}).failure == "transport");

    auto blank = testing::mock({{"default", {"   "}}});
    const auto b = make_pipeline(blank).run_task1_turn({"s", "img.jpg", {{"Where?", "Paris"}}});
    CHECK(b.answer_text == "I don't know");
    CHECK(b.failure == "empty");
}

TEST_CASE("task1: empty corpus answers without context") {
    auto backend = testing::mock({{"default", {"no idea really"}}});
    const auto p = make_pipeline(backend, 0);
    const auto trace = p.run_turn_traced(TaskKind::Task1, {"Where?", "img.jpg", {}, {}}, "s", 0);
    CHECK(trace.retrieved_texts.empty());
    CHECK(trace.record.answer_text == "no idea really");
}

TEST_CASE("task2: scripted three-step turn") {
    const auto p = make_pipeline(testing::mock(kThreeStep));
    const auto rec = p.run_task23_turn(TaskKind::Task2, {"Which?", "img.jpg", {}, {}}, "s", 0);
    CHECK(rec.answer_text == "a");
    CHECK(rec.kept_item_ids.size() == 1);
    CHECK(rec.queries_used == std::vector<std::string>{"q"});
    CHECK(rec.retrieved_count == 12);
    CHECK_FALSE(rec.fallback_used);
}

TEST_CASE("task2: empty retrieval skips rerank") {
    const auto p = make_pipeline(testing::mock(kThreeStep), 0);
    const auto trace = p.run_turn_traced(TaskKind::Task2, {"Which?", "", {}, {}}, "s", 0);
    CHECK(trace.record.answer_text == "a");
    CHECK(trace.record.kept_item_ids.empty());
    CHECK(trace.record.retrieved_count == 0);
}

TEST_CASE("task2: rerank parse failure on 12 items keeps the first 10") {
    json script = kThreeStep;
    script["rules"][1]["response"] = "these all look relevant";
    const auto p = make_pipeline(testing::mock(script), 12);
    const auto rec = p.run_task23_turn(TaskKind::Task2, {"Which?", "", {}, {}}, "s", 0);
    REQUIRE(rec.kept_item_ids.size() == 10);
    CHECK(rec.fallback_used);
    const auto step = p.retrieve({"Which?", "", {}, {}});
    for (std::size_t i = 0; i < 10; ++i) CHECK(rec.kept_item_ids[i] == step.group.items[i].entry_id);
}

TEST_CASE("task2: rerank disabled keeps the first retrieved items") {
    PipelineConfig cfg;
    cfg.rerank_enabled = false;
    const auto p = make_pipeline(testing::mock(kThreeStep), 12, cfg);
    const auto rec = p.run_task23_turn(TaskKind::Task2, {"Which?", "", {}, {}}, "s", 0);
    CHECK(rec.kept_item_ids.size() == 10);
    CHECK_FALSE(rec.fallback_used);
}

TEST_CASE("task3: history grows one question per turn") {
    const auto p = make_pipeline(testing::mock(kThreeStep));
    const ConversationSample conv{"c", "img.jpg", {{"q one?", "a"}, {"q two?", "a"}, {"q three?", "a"}}};
    const auto traces = p.run_conversation_traced(conv, TaskKind::Task3);
    REQUIRE(traces.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) CHECK(traces[i].record.history_size == i);
    CHECK(traces[2].context.history_questions == std::vector<std::string>{"q one?", "q two?"});
    CHECK(traces[2].qa_request.user_parts[0].value.find("- q one?\n- q two?") != std::string::npos);

    const ConversationSample single{"s", "img.jpg", {{"only?", "a"}}};
    CHECK(p.run_conversation(single, TaskKind::Task3)[0].history_size == 0);
    const auto t2 = p.run_conversation(conv, TaskKind::Task2);
    CHECK(t2[2].history_size == 0);
}

TEST_CASE("task3: history answers only when configured") {
    PipelineConfig cfg;
    cfg.include_history_answers = true;
    const auto p = make_pipeline(testing::mock(kThreeStep), 12, cfg);
    const ConversationSample conv{"c", "", {{"q one?", "a"}, {"q two?", "a"}}};
    const auto traces = p.run_conversation_traced(conv, TaskKind::Task3);
    CHECK(traces[1].qa_request.user_parts[0].value.find("- q one? (answer: a)") != std::string::npos);
}

TEST_CASE("task3: a timed-out turn does not stop the conversation") {
    json script = kThreeStep;
    script["rules"] = json::array({{{"contains", {"Question: q two?\n", "Answer:"}}, {"delay_seconds", 31}, {"response", "x"}}});
    for (const auto& r : kThreeStep["rules"]) script["rules"].push_back(r);
    const auto p = make_pipeline(testing::mock(script));
    const ConversationSample conv{"c", "", {{"q one?", "a"}, {"q two?", "a"}, {"q three?", "a"}}};
    const auto recs = p.run_conversation(conv, TaskKind::Task3);
    CHECK(recs[0].answer_text == "a");
    CHECK(recs[1].answer_text == "I don't know");
    CHECK(recs[1].failure == "timeout");
    CHECK(recs[2].answer_text == "a");
}

TEST_CASE("real-time budget cuts off a slow backend") {
    PipelineConfig cfg;
    cfg.answer_budget = Millis(100);
    const auto p = make_pipeline(std::make_shared<SleepyBackend>(std::chrono::milliseconds(500)), 4, cfg);
    const auto start = std::chrono::steady_clock::now();
    const auto rec = p.run_task1_turn({"s", "img.jpg", {{"Where?", "Paris"}}});
    CHECK(std::chrono::steady_clock::now() - start < std::chrono::milliseconds(450));
    CHECK(rec.is_refusal);
    CHECK(rec.failure == "timeout");

    cfg.answer_budget = Millis(5000);
    const auto ok = make_pipeline(std::make_shared<SleepyBackend>(std::chrono::milliseconds(20)), 4, cfg)
                        .run_task1_turn({"s", "img.jpg", {{"Where?", "Paris"}}});
    CHECK(ok.answer_text == "late answer");
    CHECK(ok.latency >= Millis(20));
}

TEST_CASE("answer prompt drops low-ranked context to fit the input budget") {
    PipelineConfig cfg;
    cfg.max_input_tokens = 60;
    const auto p = make_pipeline(testing::mock(kThreeStep), 12, cfg);
    std::vector<std::string> texts(10, "word word word word word word word word word word");
    const auto req = p.build_qa_request(TaskKind::Task2, {"Which?", "", {}, {}}, texts);
    CHECK(texts.size() < 10);
    CHECK(approx_tokens(req.flattened_text(), cfg.token_factor) <= 60);
}

TEST_CASE("answers are clipped to the output budget") {
    std::string longer;
    for (int i = 0; i < 120; ++i) longer += "tok ";
    const auto p = make_pipeline(testing::mock({{"default", {longer}}}));
    const auto rec = p.run_task1_turn({"s", "img.jpg", {{"Where?", "Paris"}}});
    CHECK(approx_tokens(rec.answer_text, 1.3) <= 75);
}

TEST_CASE("prompt templates load from a directory") {
    testing::TempDir dir("tpl");
    testing::write_text(dir.file("qa.txt"), "Q={question}\n{context}\nAnswer:");
    const auto t = load_prompt_templates(dir.path.string());
    CHECK(t.qa == "Q={question}\n{context}\nAnswer:");
    CHECK(t.rerank == PromptTemplates{}.rerank);
    testing::write_text(dir.file("rerank.txt"), "no slots");
    CHECK_THROWS_AS(load_prompt_templates(dir.path.string()).validate(), TemplateError);
}

TEST_CASE("run_dataset keeps dataset order across workers") {
    PipelineConfig cfg;
    cfg.workers = 3;
    const auto p = make_pipeline(testing::mock(kThreeStep), 12, cfg);
    Dataset data;
    for (int i = 0; i < 7; ++i) data.push_back({"c" + std::to_string(i), "", {{"q?", "a"}}});
    const auto out = p.run_dataset(data, TaskKind::Task2);
    REQUIRE(out.size() == 7);
    for (int i = 0; i < 7; ++i) CHECK(out[i][0].sample_id == "c" + std::to_string(i));
}
