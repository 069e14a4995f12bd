#pragma once

// Per-turn orchestration for both task families: retrieval, rerank, context
// assembly, answer generation, budget enforcement and refusal fallback.

#include <atomic>
#include <exception>
#include <filesystem>
#include <fstream>
#include <future>
#include <memory>
#include <mutex>
#include <thread>
#include <type_traits>
#include <vector>

#include "mmrag/core.hpp"
#include "mmrag/model_client.hpp"
#include "mmrag/rerank.hpp"
#include "mmrag/retrieval.hpp"

namespace mmrag {

// ---------------------------------------------------------------------------
// Budget
// ---------------------------------------------------------------------------

/// Runs `work` on its own thread and waits at most `budget`. On timeout the
/// thread is detached and left to finish; `work` must own everything it
/// touches (capture shared_ptrs by value), so the abandoned run cannot reach
/// the caller's state.
template <typename Work>
std::invoke_result_t<Work> enforce_budget(Work work, Millis budget) {
    using Result = std::invoke_result_t<Work>;
    if (budget.count() <= 0) throw ConfigError("budget must be positive");
    auto promise = std::make_shared<std::promise<Result>>();
    auto future = promise->get_future();
    std::thread worker([promise, work = std::move(work)]() mutable {
        try {
            if constexpr (std::is_void_v<Result>) {
                work();
                promise->set_value();
            } else {
                promise->set_value(work());
            }
        } catch (...) {
            promise->set_exception(std::current_exception());
        }
    });
    if (future.wait_for(budget) != std::future_status::ready) {
        worker.detach();
        throw ChatError(ChatErrorKind::Timeout, "work exceeded budget of " + std::to_string(budget.count()) + " ms");
    }
    worker.join();
    return future.get();
}

// ---------------------------------------------------------------------------
// Prompts
// ---------------------------------------------------------------------------

struct PromptTemplates {
    std::string task1_qa =
        "Answer the question about the image. Use the information retrieved for similar images if it helps.\n"
        "If you are not sure, answer \"I don't know\".\n"
        "Question: {question}\n{context}\nAnswer:";
    std::string querygen =
        "Write one web search query that would help answer the question about the image.\n"
        "Previous questions:\n{history}\nQuestion: {question}\nQuery:";
    std::string rerank =
        "Question: {question}\nRetrieved information:\n{items}\n"
        "Output the most relevant info number list in the format [x, xx, xxx, ...], most relevant first. "
        "If there are no relevant items, output [].";
    std::string qa =
        "Answer the question about the image using the information below.\n"
        "If you are not sure, answer \"I don't know\".\n"
        "Previous questions:\n{history}\nQuestion: {question}\n{context}\nAnswer:";

    void validate() const {
        render_template(task1_qa, {}, {"question"});
        render_template(querygen, {}, {"question"});
        render_template(rerank, {}, {"question", "items"});
        render_template(qa, {}, {"question"});
    }
};

/// Overrides defaults with task1_qa.txt, querygen.txt, rerank.txt, qa.txt
/// found in `dir`.
inline PromptTemplates load_prompt_templates(const std::string& dir, PromptTemplates base = {}) {
    auto read = [&](const char* name, std::string& slot) {
        const auto path = std::filesystem::path(dir) / name;
        if (!std::filesystem::exists(path)) return;
        std::ifstream in(path);
        slot.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    };
    read("task1_qa.txt", base.task1_qa);
    read("querygen.txt", base.querygen);
    read("rerank.txt", base.rerank);
    read("qa.txt", base.qa);
    base.validate();
    return base;
}

// ---------------------------------------------------------------------------
// Turn execution
// ---------------------------------------------------------------------------

struct TurnContext {
    std::string question;
    std::string image_ref;
    std::vector<std::string> history_questions;  // Task3 only, oldest first
    std::vector<std::string> history_answers;    // parallel; used only when configured
};

/// Everything a turn produced, including the final answer prompt.
struct TurnTrace {
    AnswerRecord record;
    TurnContext context;
    std::vector<std::string> retrieved_texts;  // as they entered the answer prompt
    ChatRequest qa_request;
};

/// "Info <i>: <text>" lines.
inline std::string render_context(std::span<const std::string> texts) {
    std::string out;
    for (std::size_t i = 0; i < texts.size(); ++i) {
        if (i) out += '\n';
        out += "Info " + std::to_string(i + 1) + ": " + texts[i];
    }
    return out;
}

struct PipelineResources {
    std::shared_ptr<const VectorIndex> index;
    std::shared_ptr<const Embedder> embedder;
    std::shared_ptr<ChatBackend> backend;
    PromptTemplates templates;
    /// Defaults to a VirtualClock per turn for mock backends, else SteadyClock.
    ClockFactory clock_factory;
};

struct RetrievalStep {
    std::vector<std::string> queries;
    RetrievalGroup group;
};

class Pipeline {
public:
    Pipeline(PipelineConfig config, PipelineResources resources) {
        auto s = std::make_shared<State>(State{std::move(config), std::move(resources)});
        auto& r = s->resources;
        s->config.validate();
        r.templates.validate();
        if (!r.backend) throw ConfigError("pipeline needs a chat backend");
        if (!r.embedder) {
            r.embedder = std::make_shared<HashingEmbedder>(r.index ? r.index->dimension() : s->config.embedding_dim);
        }
        if (!r.index) r.index = std::make_shared<VectorIndex>(r.embedder->dimension());
        if (r.index->dimension() != r.embedder->dimension()) {
            throw DimensionMismatch("index dimension " + std::to_string(r.index->dimension()) +
                                    " != embedder dimension " + std::to_string(r.embedder->dimension()));
        }
        if (!r.clock_factory) {
            r.clock_factory = r.backend->prefers_virtual_time() ? ClockFactory(make_virtual_clock)
                                                                : ClockFactory(make_steady_clock);
        }
        state_ = std::move(s);
    }

    const PipelineConfig& config() const { return state_->config; }
    const VectorIndex& index() const { return *state_->resources.index; }
    const Embedder& embedder() const { return *state_->resources.embedder; }
    ChatBackend& backend() const { return *state_->resources.backend; }
    const PromptTemplates& templates() const { return state_->resources.templates; }

    QueryGenSettings querygen_settings() const {
        const auto& c = state_->config;
        return {templates().querygen, c.system_prompt, c.query_sample_temperature, c.max_output_tokens, c.seed};
    }

    RerankSettings rerank_settings() const {
        const auto& c = state_->config;
        return {templates().rerank, c.system_prompt, c.answer_temperature, c.max_output_tokens, c.retrieval_cap};
    }

    /// Prior turns rendered for prompts: questions, optionally with answers.
    std::vector<std::string> rendered_history(const TurnContext& ctx) const {
        std::vector<std::string> out;
        for (std::size_t i = 0; i < ctx.history_questions.size(); ++i) {
            std::string h = ctx.history_questions[i];
            if (state_->config.include_history_answers && i < ctx.history_answers.size()) {
                h += " (answer: " + ctx.history_answers[i] + ")";
            }
            out.push_back(std::move(h));
        }
        return out;
    }

    QueryContext query_context(const TurnContext& ctx) const {
        return {ctx.question, rendered_history(ctx), ctx.image_ref};
    }

    /// Step 1: sampled queries, then the largest retrieval group.
    RetrievalStep retrieve(const TurnContext& ctx, const Deadline& deadline = {}) const {
        RetrievalStep step;
        step.queries = generate_queries(query_context(ctx), state_->config.query_samples, backend(),
                                        querygen_settings(), deadline);
        step.group = multi_query_retrieve(step.queries, index(), embedder(), state_->config.retrieval_cap,
                                          state_->config.min_similarity);
        return step;
    }

    /// Answer prompt; lowest-ranked texts are dropped until it fits max_input_tokens.
    ChatRequest build_qa_request(TaskKind task, const TurnContext& ctx, std::vector<std::string>& texts) const {
        const auto& c = state_->config;
        const std::string& tpl = task == TaskKind::Task1 ? templates().task1_qa : templates().qa;
        auto make = [&](std::size_t n) {
            ChatRequest req;
            req.system_prompt = c.system_prompt;
            req.user_parts.push_back(ChatPart::text(render_template(
                tpl,
                {{"question", ctx.question},
                 {"history", render_history(rendered_history(ctx))},
                 {"context", render_context(std::span<const std::string>(texts.data(), n))}},
                {"question"})));
            if (!ctx.image_ref.empty()) req.user_parts.push_back(ChatPart::image(ctx.image_ref));
            req.temperature = c.answer_temperature;
            req.max_output_tokens = c.max_output_tokens;
            req.seed = c.seed;
            return req;
        };
        std::size_t n = texts.size();
        ChatRequest req = make(n);
        while (n > 0 && approx_tokens(req.flattened_text(), c.token_factor) > c.max_input_tokens) {
            req = make(--n);
        }
        texts.resize(n);
        return req;
    }

    TurnTrace run_turn_traced(TaskKind task, const TurnContext& ctx, const std::string& sample_id,
                              std::size_t turn_index) const {
        auto clock = state_->resources.clock_factory();
        if (clock->is_virtual()) return execute_turn(state_, task, ctx, sample_id, turn_index, *clock);
        const Millis budget = state_->config.answer_budget;
        const Millis start = clock->now();
        try {
            return enforce_budget(
                [state = state_, task, ctx, sample_id, turn_index, factory = state_->resources.clock_factory] {
                    auto worker_clock = factory();
                    return execute_turn(state, task, ctx, sample_id, turn_index, *worker_clock);
                },
                budget);
        } catch (const ChatError&) {
            TurnTrace trace = degraded_trace(state_, task, ctx, sample_id, turn_index, "timeout");
            trace.record.latency = clock->now() - start;
            return trace;
        }
    }

    AnswerRecord run_task1_turn(const ConversationSample& sample) const {
        if (sample.turns.size() != 1) throw Error("task1 sample '" + sample.id + "' must have exactly one turn");
        return run_turn_traced(TaskKind::Task1, {sample.turns[0].question, sample.image_ref, {}, {}}, sample.id, 0)
            .record;
    }

    AnswerRecord run_task23_turn(TaskKind task, const TurnContext& ctx, const std::string& sample_id,
                                 std::size_t turn_index) const {
        return run_turn_traced(task, ctx, sample_id, turn_index).record;
    }

    /// Turns strictly in order; Task3 threads prior questions as history.
    std::vector<TurnTrace> run_conversation_traced(const ConversationSample& sample, TaskKind task) const {
        std::vector<TurnTrace> out;
        TurnContext ctx;
        ctx.image_ref = sample.image_ref;
        for (std::size_t i = 0; i < sample.turns.size(); ++i) {
            ctx.question = sample.turns[i].question;
            out.push_back(run_turn_traced(task, ctx, sample.id, i));
            if (carries_history(task)) {
                ctx.history_questions.push_back(sample.turns[i].question);
                ctx.history_answers.push_back(out.back().record.answer_text);
            }
        }
        return out;
    }

    std::vector<AnswerRecord> run_conversation(const ConversationSample& sample, TaskKind task) const {
        std::vector<AnswerRecord> out;
        for (auto& t : run_conversation_traced(sample, task)) out.push_back(std::move(t.record));
        return out;
    }

    /// Conversations on a pool of config.workers threads; results in dataset order.
    std::vector<std::vector<AnswerRecord>> run_dataset(const Dataset& data, TaskKind task) const {
        std::vector<std::vector<AnswerRecord>> results(data.size());
        parallel_for(data.size(), state_->config.workers,
                     [&](std::size_t i) { results[i] = run_conversation(data[i], task); });
        return results;
    }

    /// Runs fn(0..n-1) on up to `workers` threads; rethrows the first failure.
    template <typename Fn>
    static void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
        if (workers <= 1 || n <= 1) {
            for (std::size_t i = 0; i < n; ++i) fn(i);
            return;
        }
        std::atomic<std::size_t> next{0};
        std::exception_ptr failure;
        std::mutex failure_mu;
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < std::min(workers, n); ++w) {
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < n; i = next++) {
                    try {
                        fn(i);
                    } catch (...) {
                        std::lock_guard lock(failure_mu);
                        if (!failure) failure = std::current_exception();
                    }
                }
            });
        }
        for (auto& t : pool) t.join();
        if (failure) std::rethrow_exception(failure);
    }

private:
    struct State {
        PipelineConfig config;
        PipelineResources resources;
    };

    static TurnTrace degraded_trace(const std::shared_ptr<const State>& state, TaskKind task, const TurnContext& ctx,
                                    const std::string& sample_id, std::size_t turn_index, std::string failure) {
        Pipeline self(state);
        TurnTrace trace;
        trace.context = ctx;
        trace.record.sample_id = sample_id;
        trace.record.turn_index = turn_index;
        trace.record.history_size = ctx.history_questions.size();
        trace.record.answer_text = state->config.refusal_text;
        trace.record.is_refusal = true;
        trace.record.failure = std::move(failure);
        trace.qa_request = self.build_qa_request(task, ctx, trace.retrieved_texts);
        return trace;
    }

    explicit Pipeline(std::shared_ptr<const State> state) : state_(std::move(state)) {}

    static TurnTrace execute_turn(const std::shared_ptr<const State>& state, TaskKind task, const TurnContext& ctx,
                                  const std::string& sample_id, std::size_t turn_index, Clock& clock) {
        Pipeline self(state);
        const auto& c = state->config;
        const Millis start = clock.now();
        const Deadline deadline = Deadline::after(clock, c.answer_budget);

        TurnTrace trace;
        trace.context = ctx;
        AnswerRecord& rec = trace.record;
        rec.sample_id = sample_id;
        rec.turn_index = turn_index;
        rec.history_size = ctx.history_questions.size();
        std::vector<std::string> texts;
        try {
            if (task == TaskKind::Task1) {
                if (!ctx.image_ref.empty() && !self.index().empty()) {
                    const auto group = search_topk(self.index(), self.embedder().embed_image(ctx.image_ref),
                                                   c.image_topk);
                    rec.retrieved_count = group.size();
                    for (const auto& item : group.items) rec.kept_item_ids.push_back(item.entry_id);
                }
            } else {
                const auto step = self.retrieve(ctx, deadline);
                rec.queries_used = step.queries;
                rec.retrieved_count = step.group.size();
                if (!step.group.empty()) {
                    if (c.rerank_enabled) {
                        auto decision = rerank_group(ctx.question, ctx.image_ref, step.group, self.index(),
                                                     self.backend(), self.rerank_settings(), c.rerank_keep, deadline);
                        rec.kept_item_ids = std::move(decision.kept);
                        rec.fallback_used = decision.fallback_used;
                    } else {
                        const auto n = std::min(c.rerank_keep, step.group.size());
                        for (std::size_t i = 0; i < n; ++i) rec.kept_item_ids.push_back(step.group.items[i].entry_id);
                    }
                }
            }
            for (const auto& id : rec.kept_item_ids) texts.push_back(extract_text(*self.index().find(id)));
            trace.qa_request = self.build_qa_request(task, ctx, texts);
            rec.kept_item_ids.resize(texts.size());
            trace.retrieved_texts = texts;

            if (deadline.expired()) throw ChatError(ChatErrorKind::Timeout, "budget exhausted before answering");
            auto reply = chat(trace.qa_request, self.backend(), deadline.context());
            rec.answer_text = clip_to_token_budget(trim(reply.text), c.max_output_tokens, c.token_factor);
            if (normalize_text(rec.answer_text).empty()) {
                rec.answer_text = c.refusal_text;
                rec.failure = "empty";
            }
        } catch (const ChatError& e) {
            rec.answer_text = c.refusal_text;
            rec.failure = to_string(e.kind());
        } catch (const Error&) {
            rec.answer_text = c.refusal_text;
            rec.failure = "error";
        }
        if (trace.qa_request.user_parts.empty()) {
            texts.clear();
            trace.qa_request = self.build_qa_request(task, ctx, texts);
        }
        rec.is_refusal = is_refusal(rec.answer_text, c.effective_refusal_phrases());
        rec.latency = clock.now() - start;
        return trace;
    }

    std::shared_ptr<const State> state_;
};

}  // namespace mmrag
