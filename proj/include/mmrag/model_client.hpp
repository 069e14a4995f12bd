#pragma once

// Chat-completion clients: a scripted deterministic mock, an OpenAI-compatible
// HTTP backend, and the judge role layered on top of either.

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <regex>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <openssl/evp.h>

#include "mmrag/core.hpp"

namespace mmrag {

// ---------------------------------------------------------------------------
// Clocks
// ---------------------------------------------------------------------------

class Clock {
public:
    virtual ~Clock() = default;
    virtual Millis now() const = 0;
    virtual void sleep_for(Millis d) = 0;
    /// True when sleeping only advances a counter.
    virtual bool is_virtual() const { return false; }
};

class SteadyClock final : public Clock {
public:
    Millis now() const override {
        return std::chrono::duration_cast<Millis>(std::chrono::steady_clock::now().time_since_epoch());
    }
    void sleep_for(Millis d) override { std::this_thread::sleep_for(d); }
};

/// Simulated time for reproducible runs; one instance per turn.
class VirtualClock final : public Clock {
public:
    Millis now() const override { return Millis(now_.load()); }
    void sleep_for(Millis d) override { now_ += d.count(); }
    bool is_virtual() const override { return true; }

private:
    std::atomic<long long> now_{0};
};

using ClockFactory = std::function<std::unique_ptr<Clock>()>;

inline std::unique_ptr<Clock> make_steady_clock() { return std::make_unique<SteadyClock>(); }
inline std::unique_ptr<Clock> make_virtual_clock() { return std::make_unique<VirtualClock>(); }

// ---------------------------------------------------------------------------
// Requests and responses
// ---------------------------------------------------------------------------

struct ChatPart {
    enum class Kind { Text, Image };
    Kind kind = Kind::Text;
    std::string value;  // text content, or an opaque image reference

    static ChatPart text(std::string t) { return {Kind::Text, std::move(t)}; }
    static ChatPart image(std::string ref) { return {Kind::Image, std::move(ref)}; }
    bool operator==(const ChatPart&) const = default;
};

struct ChatRequest {
    std::string system_prompt;
    std::vector<ChatPart> user_parts;
    double temperature = 0.0;
    std::size_t max_output_tokens = 75;
    std::optional<std::uint64_t> seed;

    void validate() const {
        if (!(temperature >= 0.0)) throw ConfigError("chat temperature must be >= 0");
        if (user_parts.empty()) throw ConfigError("chat request needs at least one user part");
    }

    /// System prompt and text parts joined by newlines; images as "[image:ref]".
    std::string flattened_text() const {
        std::string out = system_prompt;
        for (const auto& p : user_parts) {
            if (!out.empty()) out += '\n';
            out += p.kind == ChatPart::Kind::Text ? p.value : "[image:" + p.value + "]";
        }
        return out;
    }
};

struct ChatResponse {
    std::string text;
    std::string backend_id;
    Millis latency{0};
};

enum class ChatErrorKind { Timeout, Transport, Backend };

inline std::string to_string(ChatErrorKind k) {
    switch (k) {
        case ChatErrorKind::Timeout: return "timeout";
        case ChatErrorKind::Transport: return "transport";
        case ChatErrorKind::Backend: return "backend";
    }
    return "backend";
}

class ChatError : public Error {
public:
    ChatError(ChatErrorKind kind, const std::string& what)
        : Error(to_string(kind) + ": " + what), kind_(kind) {}
    ChatErrorKind kind() const noexcept { return kind_; }

private:
    ChatErrorKind kind_;
};

/// Per-call environment: the clock latency is measured on and the time left
/// before the caller's deadline.
struct CallContext {
    Clock* clock = nullptr;
    std::optional<Millis> timeout;
};

class ChatBackend {
public:
    virtual ~ChatBackend() = default;
    virtual std::string id() const = 0;
    /// Backends reporting true are meant to run on a VirtualClock.
    virtual bool prefers_virtual_time() const { return false; }
    virtual ChatResponse complete(const ChatRequest& request, const CallContext& ctx) = 0;
};

/// Absolute deadline on a clock; `at == nullopt` means unbounded.
struct Deadline {
    Clock* clock = nullptr;
    std::optional<Millis> at;

    static Deadline after(Clock& clock, Millis budget) { return {&clock, clock.now() + budget}; }

    std::optional<Millis> remaining() const {
        if (!at || !clock) return std::nullopt;
        return *at - clock->now();
    }
    bool expired() const {
        auto r = remaining();
        return r && r->count() <= 0;
    }
    CallContext context() const { return {clock, remaining()}; }
};

/// Validates the request, runs it on `backend` and stamps the latency.
inline ChatResponse chat(const ChatRequest& request, ChatBackend& backend, const CallContext& ctx = {}) {
    request.validate();
    SteadyClock fallback;
    Clock& clock = ctx.clock ? *ctx.clock : fallback;
    CallContext inner{&clock, ctx.timeout};
    if (inner.timeout && inner.timeout->count() <= 0) {
        throw ChatError(ChatErrorKind::Timeout, "no time left before deadline");
    }
    const Millis start = clock.now();
    ChatResponse resp = backend.complete(request, inner);
    resp.latency = clock.now() - start;
    if (resp.backend_id.empty()) resp.backend_id = backend.id();
    return resp;
}

// ---------------------------------------------------------------------------
// Scripted mock backend
// ---------------------------------------------------------------------------

/// Table-driven mock. The first rule whose patterns all match the flattened
/// prompt answers it; a rule with k responses returns responses[seed % k].
/// Unmatched prompts get a pseudo-random sentence derived from (prompt, seed).
///
/// Script file:
///   {"rules": [{"contains": ["Question: who"], "regex": "...",
///               "responses": ["a", "b"], "delay_seconds": 0,
///               "error": "timeout" | "transport" | "backend"}],
///    "default": ["fallback text"]}
class MockBackend final : public ChatBackend {
public:
    struct Rule {
        std::vector<std::string> contains;
        std::optional<std::string> pattern;
        std::vector<std::string> responses;
        Millis delay{0};
        std::optional<ChatErrorKind> error;
    };

    MockBackend() = default;
    explicit MockBackend(std::vector<Rule> rules, std::vector<std::string> defaults = {},
                         std::string name = "mock")
        : rules_(std::move(rules)), defaults_(std::move(defaults)), name_(std::move(name)) {
        compile();
    }

    static MockBackend from_json(const json& script, std::string name = "mock") {
        if (!script.is_object()) throw ConfigError("mock script must be a JSON object");
        std::vector<Rule> rules;
        try {
            for (const auto& r : script.value("rules", json::array())) {
                Rule rule;
                if (r.contains("contains")) {
                    const auto& c = r.at("contains");
                    rule.contains = c.is_string() ? std::vector<std::string>{c.get<std::string>()}
                                                  : c.get<std::vector<std::string>>();
                }
                if (r.contains("regex")) rule.pattern = r.at("regex").get<std::string>();
                if (r.contains("response")) rule.responses.push_back(r.at("response").get<std::string>());
                if (r.contains("responses")) {
                    auto more = r.at("responses").get<std::vector<std::string>>();
                    rule.responses.insert(rule.responses.end(), more.begin(), more.end());
                }
                rule.delay = Millis(static_cast<long long>(std::llround(r.value("delay_seconds", 0.0) * 1000.0)));
                if (r.contains("error")) {
                    const auto e = r.at("error").get<std::string>();
                    if (e == "timeout") rule.error = ChatErrorKind::Timeout;
                    else if (e == "transport") rule.error = ChatErrorKind::Transport;
                    else if (e == "backend") rule.error = ChatErrorKind::Backend;
                    else throw ConfigError("unknown mock error kind '" + e + "'");
                }
                if (rule.responses.empty() && !rule.error) {
                    throw ConfigError("mock rule needs responses or an error");
                }
                rules.push_back(std::move(rule));
            }
            std::vector<std::string> defaults;
            if (script.contains("default")) {
                const auto& d = script.at("default");
                defaults = d.is_string() ? std::vector<std::string>{d.get<std::string>()}
                                         : d.get<std::vector<std::string>>();
            }
            return MockBackend(std::move(rules), std::move(defaults), std::move(name));
        } catch (const json::exception& e) {
            throw ConfigError(std::string("bad mock script: ") + e.what());
        }
    }

    static MockBackend from_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open mock script '" + path + "'");
        try {
            return from_json(json::parse(in), "mock:" + path);
        } catch (const json::parse_error& e) {
            throw ConfigError("mock script '" + path + "' is not valid JSON: " + e.what());
        }
    }

    std::string id() const override { return name_; }
    bool prefers_virtual_time() const override { return true; }

    ChatResponse complete(const ChatRequest& request, const CallContext& ctx) override {
        const std::string prompt = request.flattened_text();
        const std::uint64_t seed = request.seed.value_or(0);
        for (std::size_t i = 0; i < rules_.size(); ++i) {
            if (!matches(i, prompt)) continue;
            const Rule& rule = rules_[i];
            if (rule.delay.count() > 0) wait(rule.delay, ctx);
            if (rule.error) throw ChatError(*rule.error, "scripted failure");
            return {rule.responses[seed % rule.responses.size()], name_, {}};
        }
        if (!defaults_.empty()) return {defaults_[seed % defaults_.size()], name_, {}};
        return {random_sentence(prompt, seed), name_, {}};
    }

    /// Deterministic filler for unmatched prompts.
    static std::string random_sentence(std::string_view prompt, std::uint64_t seed) {
        static constexpr std::string_view kWords[] = {
            "the", "a", "river", "tower", "built", "north", "museum", "city", "old", "bridge",
            "famous", "located", "near", "century", "stone", "park", "red", "large", "known", "for",
            "its", "view", "market", "station", "green", "street", "small", "island", "garden", "hall",
        };
        std::mt19937_64 rng(fnv1a64(prompt) ^ (seed * 0x9E3779B97F4A7C15ULL));
        const std::size_t n = 5 + rng() % 8;
        std::string out;
        for (std::size_t i = 0; i < n; ++i) {
            if (i) out += ' ';
            out += kWords[rng() % std::size(kWords)];
        }
        return out;
    }

private:
    void compile() {
        regexes_.clear();
        for (const auto& r : rules_) {
            if (r.pattern) {
                try {
                    regexes_.emplace_back(std::regex(*r.pattern));
                } catch (const std::regex_error& e) {
                    throw ConfigError("bad mock regex '" + *r.pattern + "': " + e.what());
                }
            } else {
                regexes_.emplace_back(std::nullopt);
            }
        }
    }

    bool matches(std::size_t i, const std::string& prompt) const {
        for (const auto& needle : rules_[i].contains) {
            if (prompt.find(needle) == std::string::npos) return false;
        }
        if (regexes_[i] && !std::regex_search(prompt, *regexes_[i])) return false;
        return true;
    }

    static void wait(Millis delay, const CallContext& ctx) {
        SteadyClock fallback;
        Clock& clock = ctx.clock ? *ctx.clock : fallback;
        if (ctx.timeout && delay > *ctx.timeout) {
            clock.sleep_for(*ctx.timeout);
            throw ChatError(ChatErrorKind::Timeout, "response not ready within " +
                                                        std::to_string(ctx.timeout->count()) + " ms");
        }
        clock.sleep_for(delay);
    }

    std::vector<Rule> rules_;
    std::vector<std::optional<std::regex>> regexes_;
    std::vector<std::string> defaults_;
    std::string name_ = "mock";
};

// ---------------------------------------------------------------------------
// OpenAI-compatible HTTP backend
// ---------------------------------------------------------------------------

namespace detail {

inline std::string base64_encode(std::string_view data) {
    if (data.empty()) return {};
    std::string out(4 * ((data.size() + 2) / 3), '\0');
    const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                  reinterpret_cast<const unsigned char*>(data.data()),
                                  static_cast<int>(data.size()));
    out.resize(static_cast<std::size_t>(n));
    return out;
}

inline std::string image_mime(const std::filesystem::path& p) {
    auto ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png") return "image/png";
    if (ext == ".gif") return "image/gif";
    if (ext == ".webp") return "image/webp";
    return "image/jpeg";
}

struct ParsedUrl {
    std::string scheme_host_port;
    std::string path;
};

inline ParsedUrl parse_url(const std::string& url) {
    static const std::regex re(R"(^(https?://[^/]+)(/.*)?$)");
    std::smatch m;
    if (!std::regex_match(url, m, re)) throw ConfigError("invalid backend URL '" + url + "'");
    return {m[1].str(), m[2].matched ? m[2].str() : std::string("/v1/chat/completions")};
}

}  // namespace detail

/// Image parts: http(s) and data: URLs pass through; readable local files are
/// inlined as base64 data URLs; other opaque refs become a text marker.
inline json image_part_json(const std::string& ref) {
    if (ref.rfind("http://", 0) == 0 || ref.rfind("https://", 0) == 0 || ref.rfind("data:", 0) == 0) {
        return {{"type", "image_url"}, {"image_url", {{"url", ref}}}};
    }
    std::error_code ec;
    if (std::filesystem::is_regular_file(ref, ec)) {
        std::ifstream in(ref, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        return {{"type", "image_url"},
                {"image_url", {{"url", "data:" + detail::image_mime(ref) + ";base64," + detail::base64_encode(bytes)}}}};
    }
    return {{"type", "text"}, {"text", "[image:" + ref + "]"}};
}

inline json build_chat_body(const ChatRequest& request, const std::string& model) {
    json messages = json::array();
    if (!request.system_prompt.empty()) {
        messages.push_back({{"role", "system"}, {"content", request.system_prompt}});
    }
    json content = json::array();
    for (const auto& part : request.user_parts) {
        content.push_back(part.kind == ChatPart::Kind::Text ? json{{"type", "text"}, {"text", part.value}}
                                                            : image_part_json(part.value));
    }
    messages.push_back({{"role", "user"}, {"content", content}});
    json body = {
        {"model", model},
        {"messages", messages},
        {"temperature", request.temperature},
        {"max_tokens", request.max_output_tokens},
    };
    if (request.seed) body["seed"] = *request.seed;
    return body;
}

/// Text of the first choice. Throws ChatError(Backend) on unexpected shapes.
inline std::string parse_chat_completion(const std::string& body) {
    try {
        const auto obj = json::parse(body);
        const auto& content = obj.at("choices").at(0).at("message").at("content");
        if (content.is_string()) return content.get<std::string>();
        std::string text;
        for (const auto& part : content) {
            if (part.value("type", "") == "text") text += part.value("text", "");
        }
        return text;
    } catch (const json::exception& e) {
        throw ChatError(ChatErrorKind::Backend, std::string("malformed completion: ") + e.what());
    }
}

class HttpBackend final : public ChatBackend {
public:
    struct Options {
        std::string url;                             // full chat-completions URL
        std::string model = "default";
        std::string api_key_env = "OPENAI_API_KEY";  // bearer token source
        Millis connect_timeout{5000};
    };

    explicit HttpBackend(Options opts) : opts_(std::move(opts)), url_(detail::parse_url(opts_.url)) {}

    std::string id() const override { return "http:" + opts_.url; }

    ChatResponse complete(const ChatRequest& request, const CallContext& ctx) override {
        httplib::Client client(url_.scheme_host_port);
        const Millis io_timeout = ctx.timeout.value_or(Millis(600000));
        const Millis connect = std::min(opts_.connect_timeout, io_timeout);
        client.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(connect));
        client.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(io_timeout));
        client.set_write_timeout(std::chrono::duration_cast<std::chrono::microseconds>(io_timeout));
        httplib::Headers headers;
        if (const char* key = std::getenv(opts_.api_key_env.c_str()); key && *key) {
            headers.emplace("Authorization", std::string("Bearer ") + key);
        }
        const std::string body = build_chat_body(request, opts_.model).dump();
        auto res = client.Post(url_.path, headers, body, "application/json");
        if (!res) {
            const auto err = res.error();
            if (err == httplib::Error::ConnectionTimeout || err == httplib::Error::Read) {
                throw ChatError(ChatErrorKind::Timeout, httplib::to_string(err));
            }
            throw ChatError(ChatErrorKind::Transport, httplib::to_string(err));
        }
        if (res->status < 200 || res->status >= 300) {
            throw ChatError(ChatErrorKind::Backend, "HTTP status " + std::to_string(res->status));
        }
        return {parse_chat_completion(res->body), id(), {}};
    }

private:
    Options opts_;
    detail::ParsedUrl url_;
};

/// "mock:<script>" or an http(s) URL.
inline std::shared_ptr<ChatBackend> make_backend(const std::string& descriptor, const std::string& model = "default",
                                                 const std::string& api_key_env = "OPENAI_API_KEY") {
    if (descriptor.rfind("mock:", 0) == 0) {
        return std::make_shared<MockBackend>(MockBackend::from_file(descriptor.substr(5)));
    }
    if (descriptor.rfind("http://", 0) == 0 || descriptor.rfind("https://", 0) == 0) {
        return std::make_shared<HttpBackend>(HttpBackend::Options{descriptor, model, api_key_env});
    }
    throw ConfigError("unknown backend '" + descriptor + "' (expected mock:<path> or an http(s) URL)");
}

// ---------------------------------------------------------------------------
// Judges
// ---------------------------------------------------------------------------

enum class JudgeVerdict { Consistent, Inconsistent };

/// Three-way grade, for judges able to tell "acceptable" answers apart.
enum class Grade { Perfect, Acceptable, Incorrect };

struct JudgeTemplates {
    std::string consistency =
        "Decide whether the candidate answer is consistent with the ground truth answer.\n"
        "Question: {question}\nGround truth: {ground_truth}\nCandidate: {candidate}\n"
        "Reply with True or False.";
    std::string grading =
        "Grade the candidate answer against the ground truth.\n"
        "Question: {question}\nGround truth: {ground_truth}\nCandidate: {candidate}\n"
        "Reply with one word: Perfect, Acceptable or Incorrect.";
    std::string relevance =
        "Decide whether the retrieved information helps answer the question.\n"
        "Question: {question}\nInformation: {item}\nReply with True or False.";
    std::string paraphrase =
        "Rewrite the answer in {n} different ways, some simple and some more elaborate, keeping its meaning.\n"
        "Question: {question}\nAnswer: {answer}\nReturn one rewrite per line.";
};

class Judge {
public:
    virtual ~Judge() = default;
    virtual std::string id() const = 0;
    virtual bool three_way() const { return false; }
    /// Mirrors ChatBackend::prefers_virtual_time for the backend behind the judge.
    virtual bool prefers_virtual_time() const { return true; }
    virtual JudgeVerdict consistency(const std::string& question, const std::string& ground_truth,
                                     const std::string& candidate, const CallContext& ctx) = 0;
    /// Default grading collapses the binary verdict to Perfect/Incorrect.
    virtual Grade grade(const std::string& question, const std::string& ground_truth,
                        const std::string& candidate, const CallContext& ctx) {
        return consistency(question, ground_truth, candidate, ctx) == JudgeVerdict::Consistent ? Grade::Perfect
                                                                                               : Grade::Incorrect;
    }
    /// Whether a retrieved item helps answer the question.
    virtual JudgeVerdict helpfulness(const std::string& question, const std::string& ground_truth,
                                     const std::string& item_text, const CallContext& ctx) = 0;
    virtual std::vector<std::string> paraphrase(const std::string& question, const std::string& answer,
                                                std::size_t n, const CallContext& ctx) = 0;
};

/// Offline judge: consistent iff either normalized text contains the other.
class OracleJudge final : public Judge {
public:
    std::string id() const override { return "oracle"; }

    JudgeVerdict consistency(const std::string&, const std::string& ground_truth, const std::string& candidate,
                             const CallContext&) override {
        return contains_either(normalize_text(candidate), normalize_text(ground_truth));
    }

    JudgeVerdict helpfulness(const std::string&, const std::string& ground_truth, const std::string& item_text,
                             const CallContext&) override {
        const auto gt = normalize_text(ground_truth);
        if (gt.empty()) return JudgeVerdict::Inconsistent;
        return normalize_text(item_text).find(gt) != std::string::npos ? JudgeVerdict::Consistent
                                                                        : JudgeVerdict::Inconsistent;
    }

    std::vector<std::string> paraphrase(const std::string&, const std::string&, std::size_t,
                                        const CallContext&) override {
        return {};
    }

private:
    static JudgeVerdict contains_either(const std::string& a, const std::string& b) {
        if (a.empty() || b.empty()) return JudgeVerdict::Inconsistent;
        return a.find(b) != std::string::npos || b.find(a) != std::string::npos ? JudgeVerdict::Consistent
                                                                                  : JudgeVerdict::Inconsistent;
    }
};

/// Judge prompts sent to a chat backend; replies are read from their first word.
class ChatJudge final : public Judge {
public:
    ChatJudge(std::shared_ptr<ChatBackend> backend, JudgeTemplates templates = {}, bool three_way = false)
        : backend_(std::move(backend)), templates_(std::move(templates)), three_way_(three_way) {}

    std::string id() const override { return "chat:" + backend_->id(); }
    bool three_way() const override { return three_way_; }
    bool prefers_virtual_time() const override { return backend_->prefers_virtual_time(); }

    JudgeVerdict consistency(const std::string& question, const std::string& ground_truth,
                             const std::string& candidate, const CallContext& ctx) override {
        auto reply = ask(render_template(templates_.consistency,
                                         {{"question", question}, {"ground_truth", ground_truth}, {"candidate", candidate}},
                                         {"ground_truth", "candidate"}),
                         ctx);
        return parse_binary(reply);
    }

    Grade grade(const std::string& question, const std::string& ground_truth, const std::string& candidate,
                const CallContext& ctx) override {
        if (!three_way_) return Judge::grade(question, ground_truth, candidate, ctx);
        auto reply = ask(render_template(templates_.grading,
                                         {{"question", question}, {"ground_truth", ground_truth}, {"candidate", candidate}},
                                         {"ground_truth", "candidate"}),
                         ctx);
        const auto word = first_word(reply);
        if (word == "perfect" || word == "true" || word == "correct") return Grade::Perfect;
        if (word == "acceptable") return Grade::Acceptable;
        if (word == "incorrect" || word == "false" || word == "wrong") return Grade::Incorrect;
        throw ChatError(ChatErrorKind::Backend, "unreadable grade '" + reply + "'");
    }

    JudgeVerdict helpfulness(const std::string& question, const std::string& ground_truth,
                             const std::string& item_text, const CallContext& ctx) override {
        auto reply = ask(render_template(templates_.relevance,
                                         {{"question", question}, {"ground_truth", ground_truth}, {"item", item_text}},
                                         {"item"}),
                         ctx);
        return parse_binary(reply);
    }

    std::vector<std::string> paraphrase(const std::string& question, const std::string& answer, std::size_t n,
                                        const CallContext& ctx) override {
        auto reply = ask(render_template(templates_.paraphrase,
                                         {{"question", question}, {"answer", answer}, {"n", std::to_string(n)}},
                                         {"answer"}),
                         ctx, 0.0, std::max<std::size_t>(75, 40 * n));
        return parse_paraphrases(reply, n);
    }

    /// Accepts a JSON array of strings or one rewrite per line (list markers
    /// such as "1." or "-" are stripped). Returns at most n distinct entries.
    static std::vector<std::string> parse_paraphrases(const std::string& reply, std::size_t n) {
        std::vector<std::string> lines;
        const auto trimmed = trim(reply);
        if (!trimmed.empty() && trimmed.front() == '[') {
            try {
                lines = json::parse(trimmed).get<std::vector<std::string>>();
            } catch (const json::exception&) {
                lines.clear();
            }
        }
        if (lines.empty()) {
            std::istringstream in(reply);
            std::string line;
            static const std::regex marker(R"(^\s*(?:\d+[.)]|[-*•])\s*)");
            while (std::getline(in, line)) lines.push_back(std::regex_replace(line, marker, ""));
        }
        std::vector<std::string> out;
        for (auto& l : lines) {
            auto t = trim(l);
            if (t.empty()) continue;
            if (std::find(out.begin(), out.end(), t) != out.end()) continue;
            out.push_back(std::move(t));
            if (out.size() == n) break;
        }
        return out;
    }

private:
    std::string ask(const std::string& prompt, const CallContext& ctx, double temperature = 0.0,
                    std::size_t max_tokens = 8) {
        ChatRequest req;
        req.user_parts.push_back(ChatPart::text(prompt));
        req.temperature = temperature;
        req.max_output_tokens = max_tokens;
        return chat(req, *backend_, ctx).text;
    }

    static std::string first_word(const std::string& reply) {
        auto words = split_words(normalize_text(reply));
        if (words.empty()) return {};
        return normalize_text(words.front());
    }

    static JudgeVerdict parse_binary(const std::string& reply) {
        const auto word = first_word(reply);
        if (word == "true" || word == "yes" || word == "consistent") return JudgeVerdict::Consistent;
        if (word == "false" || word == "no" || word == "inconsistent") return JudgeVerdict::Inconsistent;
        throw ChatError(ChatErrorKind::Backend, "unreadable verdict '" + reply + "'");
    }

    std::shared_ptr<ChatBackend> backend_;
    JudgeTemplates templates_;
    bool three_way_;
};

/// "oracle", "mock:<script>" or an http(s) URL. `three_way` enables Acceptable grades.
inline std::shared_ptr<Judge> make_judge(const std::string& descriptor, bool three_way = false,
                                         JudgeTemplates templates = {}, const std::string& model = "default") {
    if (descriptor == "oracle") return std::make_shared<OracleJudge>();
    return std::make_shared<ChatJudge>(make_backend(descriptor, model), std::move(templates), three_way);
}

/// Binary consistency check between a candidate answer and the ground truth.
inline JudgeVerdict judge_consistency(const std::string& question, const std::string& ground_truth,
                                      const std::string& candidate, Judge& judge, const CallContext& ctx = {}) {
    if (detail::is_blank(question) || detail::is_blank(ground_truth) || detail::is_blank(candidate)) {
        throw Error("judge_consistency needs non-empty question, ground truth and candidate");
    }
    return judge.consistency(question, ground_truth, candidate, ctx);
}

/// As judge_consistency, but any failure counts as Inconsistent.
inline JudgeVerdict judge_consistency_or_inconsistent(const std::string& question, const std::string& ground_truth,
                                                      const std::string& candidate, Judge& judge,
                                                      const CallContext& ctx = {}) {
    try {
        return judge_consistency(question, ground_truth, candidate, judge, ctx);
    } catch (const Error&) {
        return JudgeVerdict::Inconsistent;
    }
}

}  // namespace mmrag
