#pragma once

// Fine-tuning data construction: image-grouped train/val split, Task1
// refusal conversion plus paraphrase augmentation, and the query-generation /
// rerank / QA training sets for Task2 and Task3.

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "mmrag/core.hpp"
#include "mmrag/model_client.hpp"
#include "mmrag/pipeline.hpp"
#include "mmrag/random.hpp"
#include "mmrag/rerank.hpp"

namespace mmrag {

enum class TaskTag { QueryGen, Rerank, QA };
enum class Origin { Original, Paraphrase, RefusalConverted };

inline std::string to_string(TaskTag t) {
    switch (t) {
        case TaskTag::QueryGen: return "querygen";
        case TaskTag::Rerank: return "rerank";
        case TaskTag::QA: return "qa";
    }
    return "qa";
}

inline std::string to_string(Origin o) {
    switch (o) {
        case Origin::Original: return "original";
        case Origin::Paraphrase: return "paraphrase";
        case Origin::RefusalConverted: return "refusal_converted";
    }
    return "original";
}

struct FinetuneSample {
    TaskTag task_tag = TaskTag::QA;
    std::string system_prompt;
    std::vector<ChatPart> input_parts;
    std::string label;
    Origin origin = Origin::Original;
    std::string sample_id;
    std::size_t turn_index = 0;
};

inline FinetuneSample make_finetune_sample(TaskTag tag, const ChatRequest& input, std::string label, Origin origin,
                                           const std::string& sample_id, std::size_t turn_index) {
    return {tag, input.system_prompt, input.user_parts, std::move(label), origin, sample_id, turn_index};
}

/// {"task_tag", "messages": [system?, user parts], "label", "origin", ...}
inline json to_json(const FinetuneSample& s) {
    json messages = json::array();
    if (!s.system_prompt.empty()) messages.push_back({{"role", "system"}, {"content", s.system_prompt}});
    json content = json::array();
    for (const auto& p : s.input_parts) {
        content.push_back(p.kind == ChatPart::Kind::Text ? json{{"type", "text"}, {"text", p.value}}
                                                         : json{{"type", "image"}, {"image_ref", p.value}});
    }
    messages.push_back({{"role", "user"}, {"content", content}});
    return {{"task_tag", to_string(s.task_tag)},
            {"messages", messages},
            {"label", s.label},
            {"origin", to_string(s.origin)},
            {"sample_id", s.sample_id},
            {"turn_index", s.turn_index}};
}

inline void write_finetune_file(const std::string& path, const std::vector<FinetuneSample>& samples) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write '" + path + "'");
    for (const auto& s : samples) out << to_json(s).dump() << '\n';
}

// ---------------------------------------------------------------------------
// Split
// ---------------------------------------------------------------------------

struct SplitSpec {
    double train_fraction = 0.8;
    std::uint64_t seed = 0;
};

/// Samples sharing an image land on the same side. Distinct images are sorted,
/// shuffled with `seed`, and the first round(fraction * n) go to train.
inline std::pair<Dataset, Dataset> split_by_image(const Dataset& data, const SplitSpec& spec) {
    if (data.empty()) throw EmptyDataset();
    if (!(spec.train_fraction > 0.0 && spec.train_fraction < 1.0)) {
        throw ConfigError("train_fraction must be in (0, 1)");
    }
    auto key = [](const ConversationSample& s) { return s.image_ref.empty() ? "sample:" + s.id : s.image_ref; };
    std::set<std::string> distinct;
    for (const auto& s : data) distinct.insert(key(s));
    std::vector<std::string> images(distinct.begin(), distinct.end());
    seeded_shuffle(images, spec.seed);
    const auto n_train = static_cast<std::size_t>(std::llround(spec.train_fraction * static_cast<double>(images.size())));
    const std::set<std::string> train_images(images.begin(), images.begin() + static_cast<std::ptrdiff_t>(n_train));
    std::pair<Dataset, Dataset> out;
    for (const auto& s : data) (train_images.count(key(s)) ? out.first : out.second).push_back(s);
    return out;
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

struct BuildResult {
    std::vector<FinetuneSample> samples;
    std::size_t skipped = 0;
    std::vector<std::string> skip_log;

    void skip(const std::string& sample_id, std::size_t turn, const std::string& why) {
        ++skipped;
        skip_log.push_back(sample_id + "#" + std::to_string(turn) + ": " + why);
    }
    void append(BuildResult other) {
        samples.insert(samples.end(), std::make_move_iterator(other.samples.begin()),
                       std::make_move_iterator(other.samples.end()));
        skipped += other.skipped;
        skip_log.insert(skip_log.end(), other.skip_log.begin(), other.skip_log.end());
    }
};

namespace detail {

inline std::unique_ptr<Clock> clock_for(const ChatBackend& backend) {
    return backend.prefers_virtual_time() ? make_virtual_clock() : make_steady_clock();
}

inline std::unique_ptr<Clock> clock_for(const Judge& judge) {
    return judge.prefers_virtual_time() ? make_virtual_clock() : make_steady_clock();
}

inline TurnContext turn_context(const ConversationSample& s, std::size_t turn, bool with_history) {
    TurnContext ctx{s.turns[turn].question, s.image_ref, {}, {}};
    if (with_history) {
        for (std::size_t k = 0; k < turn; ++k) ctx.history_questions.push_back(s.turns[k].question);
    }
    return ctx;
}

}  // namespace detail

/// Task1 augmentation. The baseline RAG answer is judged against the ground
/// truth: a hallucination (or any failure) yields one refusal sample;
/// otherwise the original sample plus every paraphrase of the ground truth
/// that survives re-verification (m + 1 samples, m <= n).
inline std::vector<FinetuneSample> augment_task1(const ConversationSample& sample, const Pipeline& pipeline,
                                                 Judge& judge, std::size_t n = 10) {
    if (sample.turns.size() != 1) throw Error("task1 sample '" + sample.id + "' must have exactly one turn");
    const Turn& turn = sample.turns[0];
    if (detail::is_blank(turn.ground_truth)) throw Error("sample '" + sample.id + "' has no ground truth");
    const auto& refusal = pipeline.config().refusal_text;

    const TurnTrace trace = pipeline.run_turn_traced(TaskKind::Task1, {turn.question, sample.image_ref, {}, {}},
                                                     sample.id, 0);
    auto clock = detail::clock_for(judge);
    const CallContext ctx{clock.get(), std::nullopt};
    const bool hallucinated =
        !trace.record.failure.empty() ||
        judge_consistency_or_inconsistent(turn.question, turn.ground_truth, trace.record.answer_text, judge, ctx) ==
            JudgeVerdict::Inconsistent;
    if (hallucinated) {
        return {make_finetune_sample(TaskTag::QA, trace.qa_request, refusal, Origin::RefusalConverted, sample.id, 0)};
    }

    std::vector<FinetuneSample> out{
        make_finetune_sample(TaskTag::QA, trace.qa_request, turn.ground_truth, Origin::Original, sample.id, 0)};
    std::vector<std::string> paraphrases;
    try {
        if (n > 0) paraphrases = judge.paraphrase(turn.question, turn.ground_truth, n, ctx);
    } catch (const Error&) {
        paraphrases.clear();
    }
    if (paraphrases.size() > n) paraphrases.resize(n);
    for (const auto& p : paraphrases) {
        if (judge_consistency_or_inconsistent(turn.question, turn.ground_truth, p, judge, ctx) ==
            JudgeVerdict::Consistent) {
            out.push_back(make_finetune_sample(TaskTag::QA, trace.qa_request, p, Origin::Paraphrase, sample.id, 0));
        }
    }
    return out;
}

/// Query-generation labels distilled from the base model, one per turn.
inline BuildResult build_querygen_data(const Dataset& samples, const Pipeline& pipeline, bool with_history = true) {
    BuildResult result;
    auto settings = pipeline.querygen_settings();
    settings.temperature = pipeline.config().answer_temperature;
    for (const auto& s : samples) {
        for (std::size_t t = 0; t < s.turns.size(); ++t) {
            const auto ctx = detail::turn_context(s, t, with_history);
            const ChatRequest req = build_query_request(pipeline.query_context(ctx), settings, pipeline.config().seed);
            auto clock = detail::clock_for(pipeline.backend());
            std::string label;
            try {
                label = trim(chat(req, pipeline.backend(), {clock.get(), std::nullopt}).text);
            } catch (const ChatError& e) {
                result.skip(s.id, t, e.what());
                continue;
            }
            if (label.empty()) {
                result.skip(s.id, t, "empty query");
                continue;
            }
            result.samples.push_back(make_finetune_sample(TaskTag::QueryGen, req, label, Origin::Original, s.id, t));
        }
    }
    return result;
}

/// Rerank labels: each retrieved item judged helpful or not; the label is the
/// bracketed 1-based list of helpful items in group order.
inline BuildResult build_rerank_data(const Dataset& samples, const Pipeline& pipeline, Judge& judge,
                                     bool with_history = true) {
    BuildResult result;
    const auto settings = pipeline.rerank_settings();
    for (const auto& s : samples) {
        for (std::size_t t = 0; t < s.turns.size(); ++t) {
            const auto ctx = detail::turn_context(s, t, with_history);
            auto clock = detail::clock_for(pipeline.backend());
            RetrievalStep step;
            try {
                step = pipeline.retrieve(ctx, Deadline{clock.get(), std::nullopt});
            } catch (const Error& e) {
                result.skip(s.id, t, e.what());
                continue;
            }
            if (step.group.empty()) {
                result.skip(s.id, t, "empty retrieval group");
                continue;
            }
            std::vector<std::string> texts;
            for (const auto& item : step.group.items) texts.push_back(extract_text(pipeline.index().entry(item.position)));
            auto judge_clock = detail::clock_for(judge);
            std::vector<std::size_t> helpful;
            for (std::size_t i = 0; i < texts.size(); ++i) {
                JudgeVerdict v = JudgeVerdict::Inconsistent;
                try {
                    v = judge.helpfulness(s.turns[t].question, s.turns[t].ground_truth, texts[i],
                                          {judge_clock.get(), std::nullopt});
                } catch (const Error&) {
                    v = JudgeVerdict::Inconsistent;
                }
                if (v == JudgeVerdict::Consistent) helpful.push_back(i + 1);
            }
            const ChatRequest req = build_rerank_input(ctx.question, ctx.image_ref, texts, settings);
            result.samples.push_back(
                make_finetune_sample(TaskTag::Rerank, req, format_index_list(helpful), Origin::Original, s.id, t));
        }
    }
    return result;
}

/// QA labels: the model's own answer when it agrees with the ground truth,
/// otherwise the refusal text.
inline BuildResult build_qa_data(const Dataset& samples, const Pipeline& pipeline, Judge& judge, TaskKind task) {
    BuildResult result;
    const auto& refusal = pipeline.config().refusal_text;
    for (const auto& s : samples) {
        const auto traces = pipeline.run_conversation_traced(s, task);
        auto clock = detail::clock_for(judge);
        for (std::size_t t = 0; t < traces.size(); ++t) {
            const auto& trace = traces[t];
            const bool consistent =
                trace.record.failure.empty() &&
                judge_consistency_or_inconsistent(s.turns[t].question, s.turns[t].ground_truth,
                                                  trace.record.answer_text, judge, {clock.get(), std::nullopt}) ==
                    JudgeVerdict::Consistent;
            result.samples.push_back(make_finetune_sample(TaskTag::QA, trace.qa_request,
                                                          consistent ? trace.record.answer_text : refusal,
                                                          consistent ? Origin::Original : Origin::RefusalConverted,
                                                          s.id, t));
        }
    }
    return result;
}

/// Keeps every non-refusal sample and exactly round(keep_fraction * R) of the
/// R RefusalConverted ones (seeded, without replacement). Order is preserved.
inline std::vector<FinetuneSample> downsample_refusals(const std::vector<FinetuneSample>& samples,
                                                       double keep_fraction, std::uint64_t seed) {
    if (!(keep_fraction >= 0.0 && keep_fraction <= 1.0)) throw ConfigError("keep_fraction must be in [0, 1]");
    std::vector<std::size_t> refusals;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (samples[i].origin == Origin::RefusalConverted) refusals.push_back(i);
    }
    const auto keep = static_cast<std::size_t>(std::llround(keep_fraction * static_cast<double>(refusals.size())));
    std::vector<bool> drop(samples.size(), false);
    for (std::size_t i : refusals) drop[i] = true;
    for (std::size_t pick : sample_without_replacement(refusals.size(), keep, seed)) drop[refusals[pick]] = false;
    std::vector<FinetuneSample> out;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (!drop[i]) out.push_back(samples[i]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Manifest helpers
// ---------------------------------------------------------------------------

struct OriginCounts {
    std::size_t original = 0;
    std::size_t paraphrase = 0;
    std::size_t refusal_converted = 0;

    std::size_t total() const { return original + paraphrase + refusal_converted; }
    double refusal_fraction() const {
        return total() ? static_cast<double>(refusal_converted) / static_cast<double>(total()) : 0.0;
    }
};

inline OriginCounts count_origins(const std::vector<FinetuneSample>& samples) {
    OriginCounts c;
    for (const auto& s : samples) {
        switch (s.origin) {
            case Origin::Original: ++c.original; break;
            case Origin::Paraphrase: ++c.paraphrase; break;
            case Origin::RefusalConverted: ++c.refusal_converted; break;
        }
    }
    return c;
}

inline json to_json(const OriginCounts& c) {
    return {{"original", c.original},
            {"paraphrase", c.paraphrase},
            {"refusal_converted", c.refusal_converted},
            {"total", c.total()},
            {"refusal_fraction", c.refusal_fraction()}};
}

/// Reference LoRA settings for downstream trainers; recorded, never used here.
inline json training_metadata(TaskKind task) {
    const bool task1 = task == TaskKind::Task1;
    return {{"method", "lora"},
            {"epochs", task1 ? 2 : 10},
            {"learning_rate", task1 ? 5e-5 : 5e-6},
            {"lora_rank", 64},
            {"lora_alpha", 128},
            {"lora_dropout", 0.05},
            {"warmup_ratio", 0.03}};
}

}  // namespace mmrag
