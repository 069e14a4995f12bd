#pragma once

// Truthfulness scoring: per-turn categories, the two-consecutive-incorrect
// termination rule for conversations, and the Score/M/H/A decomposition.

#include <cstdio>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "mmrag/core.hpp"
#include "mmrag/model_client.hpp"
#include "mmrag/pipeline.hpp"

namespace mmrag {

enum class Category { Perfect, Acceptable, Missing, Incorrect };

inline double score_of(Category c) {
    switch (c) {
        case Category::Perfect: return 1.0;
        case Category::Acceptable: return 0.5;
        case Category::Missing: return 0.0;
        case Category::Incorrect: return -1.0;
    }
    return 0.0;
}

inline std::string to_string(Category c) {
    switch (c) {
        case Category::Perfect: return "perfect";
        case Category::Acceptable: return "acceptable";
        case Category::Missing: return "missing";
        case Category::Incorrect: return "incorrect";
    }
    return "missing";
}

inline Category parse_category(const std::string& s) {
    if (s == "perfect") return Category::Perfect;
    if (s == "acceptable") return Category::Acceptable;
    if (s == "missing") return Category::Missing;
    if (s == "incorrect") return Category::Incorrect;
    throw Error("unknown category '" + s + "'");
}

struct TurnVerdict {
    Category category = Category::Missing;
    double score = 0.0;
    bool judge_error = false;

    static TurnVerdict of(Category c, bool judge_error = false) { return {c, score_of(c), judge_error}; }
};

/// Refusal -> Missing. Otherwise the judge decides Perfect / Incorrect, or
/// Acceptable when it grades three ways. Judge failures count as Incorrect.
inline TurnVerdict categorize(const AnswerRecord& answer, const std::string& question, const std::string& ground_truth,
                              Judge& judge, const std::vector<std::string>& refusal_phrases,
                              const CallContext& ctx = {}) {
    if (answer.is_refusal || is_refusal(answer.answer_text, refusal_phrases)) return TurnVerdict::of(Category::Missing);
    try {
        if (detail::is_blank(answer.answer_text) || detail::is_blank(ground_truth)) {
            throw Error("nothing to judge");
        }
        if (judge.three_way()) {
            switch (judge.grade(question, ground_truth, answer.answer_text, ctx)) {
                case Grade::Perfect: return TurnVerdict::of(Category::Perfect);
                case Grade::Acceptable: return TurnVerdict::of(Category::Acceptable);
                case Grade::Incorrect: return TurnVerdict::of(Category::Incorrect);
            }
        }
        return judge_consistency(question, ground_truth, answer.answer_text, judge, ctx) == JudgeVerdict::Consistent
                   ? TurnVerdict::of(Category::Perfect)
                   : TurnVerdict::of(Category::Incorrect);
    } catch (const Error&) {
        return TurnVerdict::of(Category::Incorrect, true);
    }
}

/// Per-turn contributions after the termination rule: once two consecutive
/// turns are Incorrect, every later turn contributes 0.
inline std::vector<double> terminated_scores(std::span<const Category> categories) {
    std::vector<double> out;
    out.reserve(categories.size());
    bool terminated = false;
    bool previous_incorrect = false;
    for (Category c : categories) {
        if (terminated) {
            out.push_back(0.0);
            continue;
        }
        out.push_back(score_of(c));
        const bool incorrect = c == Category::Incorrect;
        if (incorrect && previous_incorrect) terminated = true;
        previous_incorrect = incorrect;
    }
    return out;
}

/// Mean of the terminated per-turn scores.
inline double score_conversation(std::span<const Category> categories) {
    if (categories.empty()) throw Error("score_conversation needs at least one verdict");
    double sum = 0.0;
    for (double s : terminated_scores(categories)) sum += s;
    return sum / static_cast<double>(categories.size());
}

inline double score_conversation(std::span<const TurnVerdict> verdicts) {
    std::vector<Category> cats;
    cats.reserve(verdicts.size());
    for (const auto& v : verdicts) cats.push_back(v.category);
    return score_conversation(cats);
}

struct ConversationResult {
    std::string id;
    std::vector<Category> categories;
    std::size_t judge_errors = 0;
};

struct CategoryCounts {
    std::size_t perfect = 0;
    std::size_t acceptable = 0;
    std::size_t missing = 0;
    std::size_t incorrect = 0;

    void add(Category c) {
        switch (c) {
            case Category::Perfect: ++perfect; break;
            case Category::Acceptable: ++acceptable; break;
            case Category::Missing: ++missing; break;
            case Category::Incorrect: ++incorrect; break;
        }
    }
    std::size_t total() const { return perfect + acceptable + missing + incorrect; }
};

struct ConversationScore {
    std::string id;
    std::vector<Category> categories;
    double score = 0.0;
};

struct MetricsReport {
    TaskKind task = TaskKind::Task1;
    double truthfulness = 0.0;
    double missing_rate = 0.0;        // M
    double hallucination_rate = 0.0;  // H
    double accuracy_rate = 0.0;       // A: Perfect or Acceptable
    std::size_t n_samples = 0;
    std::size_t n_turns = 0;
    CategoryCounts counts;
    std::size_t judge_errors = 0;
    std::vector<double> per_conversation;
    std::vector<ConversationScore> conversations;
};

/// Single-turn tasks average per-sample scores; Task3 averages conversation
/// scores. M/H/A are raw category fractions over all turns.
inline MetricsReport aggregate(std::span<const ConversationResult> results, TaskKind task) {
    if (results.empty()) throw EmptyDataset();
    MetricsReport r;
    r.task = task;
    r.n_samples = results.size();
    double score_sum = 0.0;
    for (const auto& conv : results) {
        if (conv.categories.empty()) throw Error("conversation '" + conv.id + "' has no verdicts");
        for (Category c : conv.categories) r.counts.add(c);
        r.judge_errors += conv.judge_errors;
        const double s = score_conversation(conv.categories);
        r.per_conversation.push_back(s);
        r.conversations.push_back({conv.id, conv.categories, s});
        if (is_multi_turn(task)) {
            score_sum += s;
        } else {
            for (double t : terminated_scores(conv.categories)) score_sum += t;
        }
    }
    r.n_turns = r.counts.total();
    const double turns = static_cast<double>(r.n_turns);
    r.truthfulness = score_sum / (is_multi_turn(task) ? static_cast<double>(r.n_samples) : turns);
    r.missing_rate = static_cast<double>(r.counts.missing) / turns;
    r.hallucination_rate = static_cast<double>(r.counts.incorrect) / turns;
    r.accuracy_rate = static_cast<double>(r.counts.perfect + r.counts.acceptable) / turns;
    return r;
}

/// Matches answers to dataset turns (every turn needs exactly one answer) and
/// judges them in parallel.
inline MetricsReport evaluate(const std::vector<AnswerRecord>& answers, const Dataset& data, TaskKind task,
                              Judge& judge, const PipelineConfig& config) {
    if (data.empty()) throw EmptyDataset();
    std::map<std::pair<std::string, std::size_t>, const AnswerRecord*> by_turn;
    for (const auto& a : answers) {
        if (!by_turn.emplace(std::make_pair(a.sample_id, a.turn_index), &a).second) {
            throw IdMismatch("duplicate answer for '" + a.sample_id + "' turn " + std::to_string(a.turn_index));
        }
    }
    std::size_t expected = 0;
    for (const auto& s : data) {
        for (std::size_t t = 0; t < s.turns.size(); ++t) {
            if (!by_turn.count({s.id, t})) {
                throw IdMismatch("no answer for sample '" + s.id + "' turn " + std::to_string(t));
            }
            ++expected;
        }
    }
    if (expected != by_turn.size()) throw IdMismatch("answers reference samples or turns missing from the dataset");

    const auto phrases = config.effective_refusal_phrases();
    std::vector<ConversationResult> results(data.size());
    Pipeline::parallel_for(data.size(), config.workers, [&](std::size_t i) {
        const auto& s = data[i];
        ConversationResult conv{s.id, {}, 0};
        auto clock = judge.prefers_virtual_time() ? make_virtual_clock() : make_steady_clock();
        for (std::size_t t = 0; t < s.turns.size(); ++t) {
            const auto v = categorize(*by_turn.at({s.id, t}), s.turns[t].question, s.turns[t].ground_truth, judge,
                                      phrases, {clock.get(), std::nullopt});
            conv.categories.push_back(v.category);
            conv.judge_errors += v.judge_error ? 1 : 0;
        }
        results[i] = std::move(conv);
    });
    return aggregate(results, task);
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

inline json to_json(const MetricsReport& r) {
    json convs = json::array();
    for (const auto& c : r.conversations) {
        json cats = json::array();
        for (Category cat : c.categories) cats.push_back(to_string(cat));
        convs.push_back({{"id", c.id}, {"categories", cats}, {"score", c.score}});
    }
    return {
        {"task", to_string(r.task)},
        {"truthfulness", r.truthfulness},
        {"missing_rate", r.missing_rate},
        {"hallucination_rate", r.hallucination_rate},
        {"accuracy_rate", r.accuracy_rate},
        {"n_samples", r.n_samples},
        {"n_turns", r.n_turns},
        {"counts",
         {{"perfect", r.counts.perfect},
          {"acceptable", r.counts.acceptable},
          {"missing", r.counts.missing},
          {"incorrect", r.counts.incorrect}}},
        {"judge_errors", r.judge_errors},
        {"per_conversation", r.per_conversation},
        {"conversations", convs},
        {"human_evaluation", "not performed; automatic judge only"},
    };
}

inline MetricsReport report_from_json(const json& obj) {
    try {
        std::vector<ConversationResult> results;
        for (const auto& c : obj.at("conversations")) {
            ConversationResult conv{c.at("id").get<std::string>(), {}, 0};
            for (const auto& cat : c.at("categories")) conv.categories.push_back(parse_category(cat.get<std::string>()));
            results.push_back(std::move(conv));
        }
        MetricsReport r = aggregate(results, parse_task_kind(obj.at("task").get<std::string>()));
        r.judge_errors = obj.value("judge_errors", std::size_t{0});
        return r;
    } catch (const json::exception& e) {
        throw Error(std::string("malformed report: ") + e.what());
    }
}

inline MetricsReport load_report(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open report '" + path + "'");
    try {
        return report_from_json(json::parse(in));
    } catch (const json::parse_error& e) {
        throw Error("report '" + path + "' is not valid JSON: " + e.what());
    }
}

/// Leaderboard-style table: Score, M, H, A to three decimals.
inline std::string format_report_table(const MetricsReport& r) {
    char buf[256];
    std::string out;
    std::snprintf(buf, sizeof buf, "%-8s %7s %7s %7s %7s %8s %8s\n", "Task", "Score", "M", "H", "A", "Samples",
                  "Turns");
    out += buf;
    std::snprintf(buf, sizeof buf, "%-8s %7.3f %7.3f %7.3f %7.3f %8zu %8zu\n", to_string(r.task).c_str(),
                  r.truthfulness, r.missing_rate, r.hallucination_rate, r.accuracy_rate, r.n_samples, r.n_turns);
    out += buf;
    if (r.judge_errors) out += "judge errors (scored incorrect): " + std::to_string(r.judge_errors) + "\n";
    out += "human evaluation: not performed (automatic judge only)\n";
    return out;
}

// ---------------------------------------------------------------------------
// Run comparison
// ---------------------------------------------------------------------------

struct RunComparison {
    double truthfulness_delta = 0.0;
    double missing_delta = 0.0;
    double hallucination_delta = 0.0;
    double accuracy_delta = 0.0;
    /// Turn-level category changes from run A to run B (unchanged turns omitted).
    std::map<std::pair<Category, Category>, std::size_t> transitions;
};

/// Deltas are B − A. Both reports must cover the same sample ids and turn counts.
inline RunComparison compare_runs(const MetricsReport& a, const MetricsReport& b) {
    std::map<std::string, const ConversationScore*> b_by_id;
    for (const auto& c : b.conversations) b_by_id[c.id] = &c;
    if (a.conversations.size() != b.conversations.size()) throw IdMismatch("runs cover different sample sets");
    RunComparison cmp;
    for (const auto& ca : a.conversations) {
        auto it = b_by_id.find(ca.id);
        if (it == b_by_id.end()) throw IdMismatch("sample '" + ca.id + "' missing from the second run");
        const auto& cb = *it->second;
        if (ca.categories.size() != cb.categories.size()) {
            throw IdMismatch("sample '" + ca.id + "' has different turn counts");
        }
        for (std::size_t t = 0; t < ca.categories.size(); ++t) {
            if (ca.categories[t] != cb.categories[t]) ++cmp.transitions[{ca.categories[t], cb.categories[t]}];
        }
    }
    cmp.truthfulness_delta = b.truthfulness - a.truthfulness;
    cmp.missing_delta = b.missing_rate - a.missing_rate;
    cmp.hallucination_delta = b.hallucination_rate - a.hallucination_rate;
    cmp.accuracy_delta = b.accuracy_rate - a.accuracy_rate;
    return cmp;
}

inline json to_json(const RunComparison& c) {
    json transitions = json::object();
    for (const auto& [key, n] : c.transitions) transitions[to_string(key.first) + "->" + to_string(key.second)] = n;
    return {{"truthfulness_delta", c.truthfulness_delta},
            {"missing_delta", c.missing_delta},
            {"hallucination_delta", c.hallucination_delta},
            {"accuracy_delta", c.accuracy_delta},
            {"transitions", transitions}};
}

}  // namespace mmrag
