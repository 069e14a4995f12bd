#pragma once

// Shared domain types, configuration and small text utilities.

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace mmrag {

using json = nlohmann::json;
using Millis = std::chrono::milliseconds;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class TemplateError : public Error {
public:
    using Error::Error;
};

class IdMismatch : public Error {
public:
    using Error::Error;
};

class EmptyDataset : public Error {
public:
    EmptyDataset() : Error("empty dataset") {}
};

/// Malformed line in a line-oriented JSON input. `line()` is 1-based.
class SchemaError : public Error {
public:
    SchemaError(std::size_t line, const std::string& what)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

// ---------------------------------------------------------------------------
// Task kinds
// ---------------------------------------------------------------------------

enum class TaskKind { Task1, Task2, Task3 };

inline std::string to_string(TaskKind t) {
    switch (t) {
        case TaskKind::Task1: return "task1";
        case TaskKind::Task2: return "task2";
        case TaskKind::Task3: return "task3";
    }
    return "task1";
}

inline TaskKind parse_task_kind(std::string_view s) {
    std::string lower(s);
    std::transform(lower.begin(), lower.end(), lower.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (lower == "task1" || lower == "1") return TaskKind::Task1;
    if (lower == "task2" || lower == "2") return TaskKind::Task2;
    if (lower == "task3" || lower == "3") return TaskKind::Task3;
    throw ConfigError("unknown task kind '" + std::string(s) + "'");
}

/// Task1 answers from image retrieval alone; Task2/Task3 use query-based
/// retrieval plus rerank; only Task3 threads history between turns.
inline bool uses_query_retrieval(TaskKind t) { return t != TaskKind::Task1; }
inline bool carries_history(TaskKind t) { return t == TaskKind::Task3; }
inline bool is_multi_turn(TaskKind t) { return t == TaskKind::Task3; }

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

struct Turn {
    std::string question;
    std::string ground_truth;
};

struct ConversationSample {
    std::string id;
    std::string image_ref;
    std::vector<Turn> turns;
};

using Dataset = std::vector<ConversationSample>;

inline json to_json(const ConversationSample& s) {
    json turns = json::array();
    for (const auto& t : s.turns) {
        turns.push_back({{"question", t.question}, {"ground_truth", t.ground_truth}});
    }
    return {{"id", s.id}, {"image_ref", s.image_ref}, {"turns", turns}};
}

namespace detail {

inline std::string require_string(const json& obj, const char* key, std::size_t line) {
    auto it = obj.find(key);
    if (it == obj.end() || !it->is_string()) {
        throw SchemaError(line, std::string("missing or non-string field '") + key + "'");
    }
    return it->get<std::string>();
}

inline std::string optional_string(const json& obj, const char* key, std::size_t line) {
    auto it = obj.find(key);
    if (it == obj.end() || it->is_null()) return {};
    if (!it->is_string()) {
        throw SchemaError(line, std::string("field '") + key + "' must be a string");
    }
    return it->get<std::string>();
}

inline json parse_json_line(const std::string& text, std::size_t line) {
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw SchemaError(line, std::string("invalid JSON: ") + e.what());
    }
}

inline bool is_blank(std::string_view s) {
    return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

}  // namespace detail

inline ConversationSample sample_from_json(const json& obj, std::size_t line = 0) {
    if (!obj.is_object()) throw SchemaError(line, "expected a JSON object");
    ConversationSample s;
    s.id = detail::require_string(obj, "id", line);
    s.image_ref = detail::optional_string(obj, "image_ref", line);
    auto turns = obj.find("turns");
    if (turns != obj.end()) {
        if (!turns->is_array()) throw SchemaError(line, "'turns' must be an array");
        for (const auto& t : *turns) {
            if (!t.is_object()) throw SchemaError(line, "turn must be an object");
            s.turns.push_back({detail::require_string(t, "question", line),
                               detail::optional_string(t, "ground_truth", line)});
        }
    } else if (obj.contains("question")) {
        // Single-turn shorthand.
        s.turns.push_back({detail::require_string(obj, "question", line),
                           detail::optional_string(obj, "ground_truth", line)});
    }
    if (s.turns.empty()) throw SchemaError(line, "sample '" + s.id + "' has no turns");
    for (const auto& t : s.turns) {
        if (detail::is_blank(t.question)) throw SchemaError(line, "empty question in '" + s.id + "'");
    }
    return s;
}

/// Checks id uniqueness, per-task turn counts and (optionally) ground truth.
inline void validate_dataset(const Dataset& data, std::optional<TaskKind> task,
                             bool require_ground_truth) {
    std::vector<std::string> ids;
    ids.reserve(data.size());
    for (const auto& s : data) {
        if (task && !is_multi_turn(*task) && s.turns.size() != 1) {
            throw ConfigError("sample '" + s.id + "' has " + std::to_string(s.turns.size()) +
                              " turns; " + to_string(*task) + " samples are single-turn");
        }
        if (require_ground_truth) {
            for (const auto& t : s.turns) {
                if (detail::is_blank(t.ground_truth)) {
                    throw ConfigError("sample '" + s.id + "' is missing a ground truth answer");
                }
            }
        }
        ids.push_back(s.id);
    }
    std::sort(ids.begin(), ids.end());
    auto dup = std::adjacent_find(ids.begin(), ids.end());
    if (dup != ids.end()) throw ConfigError("duplicate sample id '" + *dup + "'");
}

inline Dataset parse_dataset(std::istream& in) {
    Dataset out;
    std::string text;
    std::size_t line = 0;
    while (std::getline(in, text)) {
        ++line;
        if (detail::is_blank(text)) continue;
        out.push_back(sample_from_json(detail::parse_json_line(text, line), line));
    }
    return out;
}

inline Dataset load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open dataset '" + path + "'");
    return parse_dataset(in);
}

// ---------------------------------------------------------------------------
// Text utilities
// ---------------------------------------------------------------------------

namespace detail {

// Typographic punctuation folded to ASCII before normalization.
inline std::string fold_typography(std::string_view raw) {
    static const std::pair<std::string_view, std::string_view> kFolds[] = {
        {"\xE2\x80\x98", "'"}, {"\xE2\x80\x99", "'"}, {"\xE2\x80\x9C", "\""},
        {"\xE2\x80\x9D", "\""}, {"\xE2\x80\xA6", "..."}, {"\xC2\xA0", " "},
    };
    std::string out;
    out.reserve(raw.size());
    for (std::size_t i = 0; i < raw.size();) {
        bool folded = false;
        for (const auto& [from, to] : kFolds) {
            if (raw.substr(i, from.size()) == from) {
                out += to;
                i += from.size();
                folded = true;
                break;
            }
        }
        if (!folded) out += raw[i++];
    }
    return out;
}

inline bool is_ascii_space(unsigned char c) { return c < 0x80 && std::isspace(c); }
inline bool is_ascii_punct(unsigned char c) { return c < 0x80 && std::ispunct(c); }

}  // namespace detail

/// Lowercases, collapses whitespace runs to one space and strips leading and
/// trailing punctuation. Idempotent.
inline std::string normalize_text(std::string_view raw) {
    std::string folded = detail::fold_typography(raw);
    std::string collapsed;
    collapsed.reserve(folded.size());
    bool pending_space = false;
    for (unsigned char c : folded) {
        if (detail::is_ascii_space(c)) {
            pending_space = !collapsed.empty();
            continue;
        }
        if (pending_space) collapsed += ' ';
        pending_space = false;
        collapsed += c < 0x80 ? static_cast<char>(std::tolower(c)) : static_cast<char>(c);
    }
    auto strip = [](unsigned char c) { return detail::is_ascii_space(c) || detail::is_ascii_punct(c); };
    std::size_t b = 0;
    std::size_t e = collapsed.size();
    while (b < e && strip(static_cast<unsigned char>(collapsed[b]))) ++b;
    while (e > b && strip(static_cast<unsigned char>(collapsed[e - 1]))) --e;
    return collapsed.substr(b, e - b);
}

/// True iff the normalized answer equals a normalized refusal phrase or
/// begins with one at a word boundary.
inline bool is_refusal(std::string_view answer, const std::vector<std::string>& refusal_phrases) {
    const std::string norm = normalize_text(answer);
    for (const auto& phrase : refusal_phrases) {
        const std::string p = normalize_text(phrase);
        if (p.empty() || norm.size() < p.size()) continue;
        if (norm.compare(0, p.size(), p) != 0) continue;
        if (norm.size() == p.size()) return true;
        const auto next = static_cast<unsigned char>(norm[p.size()]);
        if (!std::isalnum(next)) return true;
    }
    return false;
}

inline std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> words;
    std::string cur;
    for (unsigned char c : text) {
        if (detail::is_ascii_space(c)) {
            if (!cur.empty()) words.push_back(std::move(cur));
            cur.clear();
        } else {
            cur += static_cast<char>(c);
        }
    }
    if (!cur.empty()) words.push_back(std::move(cur));
    return words;
}

/// Whitespace-word count scaled by `factor`, rounded up.
inline std::size_t approx_tokens(std::string_view text, double factor) {
    return static_cast<std::size_t>(std::ceil(static_cast<double>(split_words(text).size()) * factor));
}

/// Keeps the first floor(max_tokens / factor) words when the text is over budget.
inline std::string clip_to_token_budget(const std::string& text, std::size_t max_tokens, double factor) {
    if (approx_tokens(text, factor) <= max_tokens) return text;
    const auto limit = static_cast<std::size_t>(std::floor(static_cast<double>(max_tokens) / factor));
    auto words = split_words(text);
    std::string out;
    for (std::size_t i = 0; i < std::min(limit, words.size()); ++i) {
        if (i) out += ' ';
        out += words[i];
    }
    return out;
}

inline std::string trim(std::string_view s) {
    std::size_t b = 0;
    std::size_t e = s.size();
    while (b < e && detail::is_ascii_space(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && detail::is_ascii_space(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

/// Substitutes `{name}` placeholders. Every name in `required` must occur in
/// the template. Unknown placeholders are left as-is.
inline std::string render_template(std::string_view tpl, const std::map<std::string, std::string>& values,
                                   const std::vector<std::string>& required = {}) {
    for (const auto& name : required) {
        if (tpl.find("{" + name + "}") == std::string_view::npos) {
            throw TemplateError("template is missing placeholder {" + name + "}");
        }
    }
    std::string out;
    out.reserve(tpl.size());
    for (std::size_t i = 0; i < tpl.size();) {
        if (tpl[i] == '{') {
            auto close = tpl.find('}', i + 1);
            if (close != std::string_view::npos) {
                auto it = values.find(std::string(tpl.substr(i + 1, close - i - 1)));
                if (it != values.end()) {
                    out += it->second;
                    i = close + 1;
                    continue;
                }
            }
        }
        out += tpl[i++];
    }
    return out;
}

// FNV-1a, used for feature hashing and seed derivation.
inline std::uint64_t fnv1a64(std::string_view data, std::uint64_t h = 1469598103934665603ULL) {
    for (unsigned char c : data) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct PipelineConfig {
    std::size_t max_input_tokens = 8192;
    std::size_t max_output_tokens = 75;
    double answer_temperature = 0.0;
    double query_sample_temperature = 0.8;
    std::size_t query_samples = 3;
    std::size_t retrieval_cap = 30;
    std::size_t rerank_keep = 10;
    std::size_t image_topk = 10;
    Millis answer_budget{30000};
    std::string refusal_text = "I don't know";
    std::vector<std::string> refusal_phrases = {
        "I don't know", "I do not know", "I'm sorry I can't find", "I'm sorry, I can't find",
        "I'm sorry, but I can't find", "I cannot find", "I can't find",
    };
    double min_similarity = 0.1;       // per-query corpus filter
    double token_factor = 1.3;         // tokens per whitespace word
    std::size_t embedding_dim = 256;
    bool rerank_enabled = true;
    bool include_history_answers = false;
    std::string system_prompt;
    std::uint64_t seed = 0;
    std::size_t workers = 1;

    /// Refusal phrases with `refusal_text` always included.
    std::vector<std::string> effective_refusal_phrases() const {
        auto phrases = refusal_phrases;
        if (std::find(phrases.begin(), phrases.end(), refusal_text) == phrases.end()) {
            phrases.insert(phrases.begin(), refusal_text);
        }
        return phrases;
    }

    void validate() const {
        if (rerank_keep == 0 || rerank_keep > retrieval_cap) {
            throw ConfigError("require 0 < rerank_keep <= retrieval_cap");
        }
        if (image_topk == 0) throw ConfigError("image_topk must be positive");
        if (!(answer_temperature >= 0.0) || !(query_sample_temperature >= 0.0)) {
            throw ConfigError("temperatures must be >= 0");
        }
        if (answer_budget.count() <= 0) throw ConfigError("answer_budget must be positive");
        if (query_samples == 0) throw ConfigError("query_samples must be >= 1");
        if (max_input_tokens == 0 || max_output_tokens == 0) throw ConfigError("token limits must be positive");
        if (!(token_factor > 0.0)) throw ConfigError("token_factor must be positive");
        if (embedding_dim == 0) throw ConfigError("embedding_dim must be positive");
        if (workers == 0) throw ConfigError("workers must be >= 1");
        if (detail::is_blank(refusal_text)) throw ConfigError("refusal_text must be non-empty");
    }
};

inline json to_json(const PipelineConfig& c) {
    return {
        {"max_input_tokens", c.max_input_tokens},
        {"max_output_tokens", c.max_output_tokens},
        {"answer_temperature", c.answer_temperature},
        {"query_sample_temperature", c.query_sample_temperature},
        {"query_samples", c.query_samples},
        {"retrieval_cap", c.retrieval_cap},
        {"rerank_keep", c.rerank_keep},
        {"image_topk", c.image_topk},
        {"answer_budget", static_cast<double>(c.answer_budget.count()) / 1000.0},
        {"refusal_text", c.refusal_text},
        {"refusal_phrases", c.refusal_phrases},
        {"min_similarity", c.min_similarity},
        {"token_factor", c.token_factor},
        {"embedding_dim", c.embedding_dim},
        {"rerank_enabled", c.rerank_enabled},
        {"include_history_answers", c.include_history_answers},
        {"system_prompt", c.system_prompt},
        {"seed", c.seed},
        {"workers", c.workers},
    };
}

/// Overlays keys from `obj` onto `base`. Unknown keys are rejected.
/// `answer_budget` is in seconds.
inline PipelineConfig config_from_json(const json& obj, PipelineConfig base = {}) {
    if (!obj.is_object()) throw ConfigError("config must be a JSON object");
    try {
        for (const auto& [key, value] : obj.items()) {
            if (key == "max_input_tokens") base.max_input_tokens = value.get<std::size_t>();
            else if (key == "max_output_tokens") base.max_output_tokens = value.get<std::size_t>();
            else if (key == "answer_temperature") base.answer_temperature = value.get<double>();
            else if (key == "query_sample_temperature") base.query_sample_temperature = value.get<double>();
            else if (key == "query_samples") base.query_samples = value.get<std::size_t>();
            else if (key == "retrieval_cap") base.retrieval_cap = value.get<std::size_t>();
            else if (key == "rerank_keep") base.rerank_keep = value.get<std::size_t>();
            else if (key == "image_topk") base.image_topk = value.get<std::size_t>();
            else if (key == "answer_budget")
                base.answer_budget = Millis(static_cast<long long>(std::llround(value.get<double>() * 1000.0)));
            else if (key == "refusal_text") base.refusal_text = value.get<std::string>();
            else if (key == "refusal_phrases") base.refusal_phrases = value.get<std::vector<std::string>>();
            else if (key == "min_similarity") base.min_similarity = value.get<double>();
            else if (key == "token_factor") base.token_factor = value.get<double>();
            else if (key == "embedding_dim") base.embedding_dim = value.get<std::size_t>();
            else if (key == "rerank_enabled") base.rerank_enabled = value.get<bool>();
            else if (key == "include_history_answers") base.include_history_answers = value.get<bool>();
            else if (key == "system_prompt") base.system_prompt = value.get<std::string>();
            else if (key == "seed") base.seed = value.get<std::uint64_t>();
            else if (key == "workers") base.workers = value.get<std::size_t>();
            else throw ConfigError("unknown config key '" + key + "'");
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad config value: ") + e.what());
    }
    base.validate();
    return base;
}

inline PipelineConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config '" + path + "'");
    json obj;
    try {
        obj = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
    }
    return config_from_json(obj);
}

// ---------------------------------------------------------------------------
// Answer records
// ---------------------------------------------------------------------------

struct AnswerRecord {
    std::string sample_id;
    std::size_t turn_index = 0;
    std::string answer_text;
    bool is_refusal = false;
    std::vector<std::string> queries_used;
    std::vector<std::string> kept_item_ids;
    Millis latency{0};
    bool fallback_used = false;      // rerank output unparseable, retrieval order kept
    std::size_t history_size = 0;    // prior-turn entries threaded into the prompts
    std::size_t retrieved_count = 0; // size of the retrieval group before rerank
    std::string failure;             // "", "timeout", "transport", "backend"
    std::string run_id;
};

inline json to_json(const AnswerRecord& r) {
    json out = {
        {"sample_id", r.sample_id},
        {"turn_index", r.turn_index},
        {"answer_text", r.answer_text},
        {"is_refusal", r.is_refusal},
        {"queries_used", r.queries_used},
        {"kept_item_ids", r.kept_item_ids},
        {"latency_ms", r.latency.count()},
        {"fallback_used", r.fallback_used},
        {"history_size", r.history_size},
        {"retrieved_count", r.retrieved_count},
        {"failure", r.failure.empty() ? json(nullptr) : json(r.failure)},
    };
    if (!r.run_id.empty()) out["run_id"] = r.run_id;
    return out;
}

inline AnswerRecord answer_from_json(const json& obj, std::size_t line = 0) {
    if (!obj.is_object()) throw SchemaError(line, "expected a JSON object");
    AnswerRecord r;
    try {
        r.sample_id = detail::require_string(obj, "sample_id", line);
        r.turn_index = obj.at("turn_index").get<std::size_t>();
        r.answer_text = detail::require_string(obj, "answer_text", line);
        r.is_refusal = obj.value("is_refusal", false);
        r.queries_used = obj.value("queries_used", std::vector<std::string>{});
        r.kept_item_ids = obj.value("kept_item_ids", std::vector<std::string>{});
        r.latency = Millis(obj.value("latency_ms", 0LL));
        r.fallback_used = obj.value("fallback_used", false);
        r.history_size = obj.value("history_size", std::size_t{0});
        r.retrieved_count = obj.value("retrieved_count", std::size_t{0});
        r.failure = detail::optional_string(obj, "failure", line);
        r.run_id = detail::optional_string(obj, "run_id", line);
    } catch (const json::exception& e) {
        throw SchemaError(line, e.what());
    }
    return r;
}

inline std::vector<AnswerRecord> parse_answers(std::istream& in) {
    std::vector<AnswerRecord> out;
    std::string text;
    std::size_t line = 0;
    while (std::getline(in, text)) {
        ++line;
        if (detail::is_blank(text)) continue;
        out.push_back(answer_from_json(detail::parse_json_line(text, line), line));
    }
    return out;
}

inline std::vector<AnswerRecord> load_answers(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open answers file '" + path + "'");
    return parse_answers(in);
}

}  // namespace mmrag
