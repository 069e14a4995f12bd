#pragma once

// Mock image-KG / web-search retrieval: corpus ingestion, hashed embeddings,
// exact cosine top-k, text extraction and multi-query group selection.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "mmrag/core.hpp"
#include "mmrag/model_client.hpp"

namespace mmrag {

class DimensionMismatch : public Error {
public:
    using Error::Error;
};

class DuplicateId : public Error {
public:
    using Error::Error;
};

enum class EntryKind { ImageKG, WebPage };

inline std::string to_string(EntryKind k) { return k == EntryKind::ImageKG ? "image_kg" : "web_page"; }

inline EntryKind parse_entry_kind(const std::string& s) {
    if (s == "image_kg" || s == "ImageKG" || s == "image") return EntryKind::ImageKG;
    if (s == "web_page" || s == "WebPage" || s == "web") return EntryKind::WebPage;
    throw ConfigError("unknown entry kind '" + s + "'");
}

using Embedding = std::vector<double>;

struct CorpusEntry {
    std::string id;
    EntryKind kind = EntryKind::WebPage;
    Embedding embedding;
    std::map<std::string, std::string> attributes;
    std::string snippet;
};

/// "key: value" lines in sorted key order, then the snippet.
inline std::string extract_text(const CorpusEntry& entry) {
    std::string out;
    for (const auto& [key, value] : entry.attributes) {
        if (!out.empty()) out += '\n';
        out += key + ": " + value;
    }
    if (!entry.snippet.empty()) {
        if (!out.empty()) out += '\n';
        out += entry.snippet;
    }
    return out;
}

inline double l2_norm(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

inline Embedding l2_normalized(std::span<const double> v) {
    const double n = l2_norm(v);
    if (!(n > 0.0) || !std::isfinite(n)) throw Error("cannot normalize a zero or non-finite vector");
    Embedding out(v.begin(), v.end());
    for (double& x : out) x /= n;
    return out;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

// ---------------------------------------------------------------------------
// Embedders
// ---------------------------------------------------------------------------

class Embedder {
public:
    virtual ~Embedder() = default;
    virtual std::size_t dimension() const = 0;
    virtual std::string id() const = 0;
    virtual Embedding embed_text(const std::string& text) const = 0;
    virtual Embedding embed_image(const std::string& image_ref) const = 0;
};

/// Signed feature hashing of character trigrams of the normalized text.
/// Image refs are hashed as text after path separators become spaces.
class HashingEmbedder final : public Embedder {
public:
    explicit HashingEmbedder(std::size_t dimension = 256) : dim_(dimension) {
        if (dim_ == 0) throw ConfigError("embedding dimension must be positive");
    }

    std::size_t dimension() const override { return dim_; }
    std::string id() const override { return "hash-trigram-" + std::to_string(dim_); }

    Embedding embed_text(const std::string& text) const override {
        const std::string norm = normalize_text(text);
        if (norm.empty()) throw Error("cannot embed empty text");
        const std::string padded = " " + norm + " ";
        Embedding v(dim_, 0.0);
        for (std::size_t i = 0; i + 3 <= padded.size(); ++i) {
            const std::uint64_t h = fnv1a64(std::string_view(padded).substr(i, 3));
            v[h % dim_] += (h >> 63) ? -1.0 : 1.0;
        }
        if (l2_norm(v) == 0.0) v[fnv1a64(norm) % dim_] = 1.0;  // every trigram cancelled
        return l2_normalized(v);
    }

    Embedding embed_image(const std::string& image_ref) const override {
        std::string text = image_ref;
        std::replace_if(text.begin(), text.end(), [](char c) { return c == '_' || c == '-' || c == '/' || c == '.'; }, ' ');
        return embed_text(text);
    }

private:
    std::size_t dim_;
};

/// OpenAI-compatible embeddings endpoint; image refs are embedded as text.
class HttpEmbedder final : public Embedder {
public:
    HttpEmbedder(std::string url, std::size_t dimension, std::string model = "default",
                 std::string api_key_env = "OPENAI_API_KEY")
        : url_(std::move(url)), target_(detail::parse_url(url_)), dim_(dimension), model_(std::move(model)),
          api_key_env_(std::move(api_key_env)) {}

    std::size_t dimension() const override { return dim_; }
    std::string id() const override { return "http:" + url_; }

    Embedding embed_text(const std::string& text) const override {
        if (detail::is_blank(text)) throw Error("cannot embed empty text");
        httplib::Client client(target_.scheme_host_port);
        httplib::Headers headers;
        if (const char* key = std::getenv(api_key_env_.c_str()); key && *key) {
            headers.emplace("Authorization", std::string("Bearer ") + key);
        }
        auto res = client.Post(target_.path, headers, json{{"model", model_}, {"input", text}}.dump(),
                               "application/json");
        if (!res) throw ChatError(ChatErrorKind::Transport, httplib::to_string(res.error()));
        if (res->status < 200 || res->status >= 300) {
            throw ChatError(ChatErrorKind::Backend, "HTTP status " + std::to_string(res->status));
        }
        Embedding v;
        try {
            v = json::parse(res->body).at("data").at(0).at("embedding").get<Embedding>();
        } catch (const json::exception& e) {
            throw ChatError(ChatErrorKind::Backend, std::string("malformed embedding reply: ") + e.what());
        }
        if (v.size() != dim_) {
            throw DimensionMismatch("embedding service returned dimension " + std::to_string(v.size()) +
                                    ", expected " + std::to_string(dim_));
        }
        return l2_normalized(v);
    }

    Embedding embed_image(const std::string& image_ref) const override { return embed_text(image_ref); }

private:
    std::string url_;
    detail::ParsedUrl target_;
    std::size_t dim_;
    std::string model_;
    std::string api_key_env_;
};

// ---------------------------------------------------------------------------
// Vector index
// ---------------------------------------------------------------------------

struct ScoredItem {
    std::string entry_id;
    double score = 0.0;
    std::size_t position = 0;  // into VectorIndex::entries()
};

struct RetrievalGroup {
    std::string query;
    std::vector<ScoredItem> items;

    std::size_t size() const { return items.size(); }
    bool empty() const { return items.empty(); }
};

class VectorIndex;
inline VectorIndex build_index(std::vector<CorpusEntry> entries);

/// Immutable exact-search index over L2-normalized embeddings.
class VectorIndex {
public:
    explicit VectorIndex(std::size_t dimension) : dim_(dimension) {}

    /// Adopts entries whose embeddings are already unit length (within 1e-6);
    /// used when reloading a persisted index so stored values stay bit-exact.
    static VectorIndex from_normalized(std::vector<CorpusEntry> entries, std::size_t dimension) {
        VectorIndex index(dimension);
        index.adopt(std::move(entries), false);
        return index;
    }

    std::size_t dimension() const { return dim_; }
    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    const std::vector<CorpusEntry>& entries() const { return entries_; }
    const CorpusEntry& entry(std::size_t position) const { return entries_.at(position); }

    const CorpusEntry* find(const std::string& id) const {
        auto it = by_id_.find(id);
        return it == by_id_.end() ? nullptr : &entries_[it->second];
    }

private:
    friend VectorIndex build_index(std::vector<CorpusEntry> entries);

    void adopt(std::vector<CorpusEntry> entries, bool normalize) {
        for (auto& e : entries) {
            if (e.embedding.size() != dim_) {
                throw DimensionMismatch("entry '" + e.id + "' has dimension " + std::to_string(e.embedding.size()) +
                                        ", index dimension is " + std::to_string(dim_));
            }
            if (!by_id_.emplace(e.id, entries_.size()).second) throw DuplicateId("duplicate entry id '" + e.id + "'");
            if (normalize) {
                e.embedding = l2_normalized(e.embedding);
            } else if (std::abs(l2_norm(e.embedding) - 1.0) > 1e-6) {
                throw Error("entry '" + e.id + "' embedding is not unit length");
            }
            entries_.push_back(std::move(e));
        }
    }

    std::size_t dim_;
    std::vector<CorpusEntry> entries_;
    std::map<std::string, std::size_t> by_id_;
};

/// Normalizes copies of the embeddings. Requires a non-empty, uniform-dimension,
/// unique-id entry list.
inline VectorIndex build_index(std::vector<CorpusEntry> entries) {
    if (entries.empty()) throw Error("cannot build an index from an empty corpus");
    VectorIndex index(entries.front().embedding.size());
    if (index.dimension() == 0) throw DimensionMismatch("entry '" + entries.front().id + "' has no embedding");
    index.adopt(std::move(entries), true);
    return index;
}

/// Ranking order: similarity descending, then entry id ascending.
inline bool ranks_before(const ScoredItem& a, const ScoredItem& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.entry_id < b.entry_id;
}

/// Exact top-k by cosine similarity. Items scoring below `min_similarity` are
/// dropped, so fewer than k come back when the corpus is small or the filter bites.
inline RetrievalGroup search_topk(const VectorIndex& index, std::span<const double> query, std::size_t k,
                                  double min_similarity = -std::numeric_limits<double>::infinity(),
                                  std::string query_text = {}) {
    if (query.size() != index.dimension()) {
        throw DimensionMismatch("query dimension " + std::to_string(query.size()) + " != index dimension " +
                                std::to_string(index.dimension()));
    }
    if (k == 0) throw Error("search_topk needs k >= 1");
    RetrievalGroup group{std::move(query_text), {}};
    if (index.empty()) return group;
    const Embedding q = l2_normalized(query);
    std::vector<ScoredItem> scored;
    scored.reserve(index.size());
    for (std::size_t i = 0; i < index.size(); ++i) {
        const double s = dot(index.entry(i).embedding, q);
        if (s >= min_similarity) scored.push_back({index.entry(i).id, s, i});
    }
    const std::size_t take = std::min(k, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(take), scored.end(), ranks_before);
    scored.resize(take);
    group.items = std::move(scored);
    return group;
}

/// Searches every query (non-empty texts) and keeps the group with the most
/// items; ties go to the earliest query. The winner is truncated to `cap`.
inline RetrievalGroup multi_query_retrieve(std::span<const std::string> queries, const VectorIndex& index,
                                           const Embedder& embedder, std::size_t cap, double min_similarity) {
    if (queries.empty()) throw Error("multi_query_retrieve needs at least one query");
    std::optional<RetrievalGroup> best;
    for (const auto& q : queries) {
        RetrievalGroup g = index.empty() ? RetrievalGroup{q, {}}
                                         : search_topk(index, embedder.embed_text(q), index.size(), min_similarity, q);
        if (!best || g.size() > best->size()) best = std::move(g);
    }
    if (best->items.size() > cap) best->items.resize(cap);
    return std::move(*best);
}

// ---------------------------------------------------------------------------
// Query generation
// ---------------------------------------------------------------------------

struct QueryContext {
    std::string question;
    std::vector<std::string> history;  // rendered prior turns, oldest first
    std::string image_ref;
};

inline std::string render_history(const std::vector<std::string>& history) {
    if (history.empty()) return "(none)";
    std::string out;
    for (const auto& h : history) {
        if (!out.empty()) out += '\n';
        out += "- " + h;
    }
    return out;
}

struct QueryGenSettings {
    std::string prompt_template;  // needs {question}; {history} optional
    std::string system_prompt;
    double temperature = 0.8;
    std::size_t max_output_tokens = 75;
    std::uint64_t base_seed = 0;
};

inline ChatRequest build_query_request(const QueryContext& ctx, const QueryGenSettings& settings,
                                       std::optional<std::uint64_t> seed) {
    ChatRequest req;
    req.system_prompt = settings.system_prompt;
    req.user_parts.push_back(ChatPart::text(render_template(
        settings.prompt_template, {{"question", ctx.question}, {"history", render_history(ctx.history)}}, {"question"})));
    if (!ctx.image_ref.empty()) req.user_parts.push_back(ChatPart::image(ctx.image_ref));
    req.temperature = settings.temperature;
    req.max_output_tokens = settings.max_output_tokens;
    req.seed = seed;
    return req;
}

/// Samples `n` queries (seed = base_seed + i), trims and de-duplicates them in
/// sample order. Transport/backend failures skip a sample; timeouts propagate.
/// Falls back to [question] when nothing usable comes back.
inline std::vector<std::string> generate_queries(const QueryContext& ctx, std::size_t n, ChatBackend& backend,
                                                 const QueryGenSettings& settings, const Deadline& deadline = {}) {
    if (n == 0) throw Error("generate_queries needs n >= 1");
    std::vector<std::string> out;
    for (std::size_t i = 0; i < n; ++i) {
        std::string text;
        try {
            text = trim(chat(build_query_request(ctx, settings, settings.base_seed + i), backend, deadline.context()).text);
        } catch (const ChatError& e) {
            if (e.kind() == ChatErrorKind::Timeout) throw;
            continue;
        }
        if (text.empty() || normalize_text(text).empty()) continue;
        if (std::find(out.begin(), out.end(), text) == out.end()) out.push_back(std::move(text));
    }
    if (out.empty()) out.push_back(ctx.question);
    return out;
}

// ---------------------------------------------------------------------------
// Corpus and index files
// ---------------------------------------------------------------------------

namespace detail {

inline std::map<std::string, std::string> parse_attributes(const json& obj, std::size_t line) {
    std::map<std::string, std::string> out;
    if (obj.is_null()) return out;
    if (!obj.is_object()) throw SchemaError(line, "'attributes' must be an object");
    for (const auto& [key, value] : obj.items()) {
        if (value.is_string()) out[key] = value.get<std::string>();
        else if (value.is_number() || value.is_boolean()) out[key] = value.dump();
        else throw SchemaError(line, "attribute '" + key + "' must be a scalar");
    }
    return out;
}

inline CorpusEntry entry_from_json(const json& obj, std::size_t line) {
    if (!obj.is_object()) throw SchemaError(line, "expected a JSON object");
    CorpusEntry e;
    e.id = require_string(obj, "id", line);
    try {
        e.kind = parse_entry_kind(obj.value("kind", std::string("web_page")));
    } catch (const ConfigError& err) {
        throw SchemaError(line, err.what());
    }
    e.attributes = parse_attributes(obj.value("attributes", json(nullptr)), line);
    e.snippet = optional_string(obj, "snippet", line);
    if (auto it = obj.find("embedding"); it != obj.end() && !it->is_null()) {
        try {
            e.embedding = it->get<Embedding>();
        } catch (const json::exception&) {
            throw SchemaError(line, "'embedding' must be an array of numbers");
        }
        if (e.embedding.empty()) throw SchemaError(line, "'embedding' is empty");
    }
    if (e.attributes.empty() && is_blank(e.snippet)) {
        throw SchemaError(line, "entry '" + e.id + "' has neither attributes nor snippet");
    }
    return e;
}

}  // namespace detail

/// One JSON object per line: id, kind, attributes, snippet, optional embedding.
/// Entries without embeddings are embedded from their extracted text.
inline std::vector<CorpusEntry> parse_corpus(std::istream& in, const Embedder& embedder) {
    std::vector<CorpusEntry> out;
    std::unordered_set<std::string> seen;
    std::string text;
    std::size_t line = 0;
    while (std::getline(in, text)) {
        ++line;
        if (detail::is_blank(text)) continue;
        CorpusEntry e = detail::entry_from_json(detail::parse_json_line(text, line), line);
        if (e.embedding.empty()) e.embedding = embedder.embed_text(extract_text(e));
        if (e.embedding.size() != embedder.dimension()) {
            throw SchemaError(line, "embedding dimension " + std::to_string(e.embedding.size()) +
                                        " != index dimension " + std::to_string(embedder.dimension()));
        }
        if (!seen.insert(e.id).second) throw SchemaError(line, "duplicate entry id '" + e.id + "'");
        out.push_back(std::move(e));
    }
    return out;
}

inline std::vector<CorpusEntry> load_corpus(const std::string& path, const Embedder& embedder) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open corpus '" + path + "'");
    return parse_corpus(in, embedder);
}

inline constexpr const char* kIndexFormat = "mmrag-index/1";

/// Serialized index. Keys are sorted and doubles round-trip, so dumping a
/// reloaded index reproduces the original bytes.
inline json index_to_json(const VectorIndex& index, const std::string& embedder_id = {}) {
    json entries = json::array();
    for (const auto& e : index.entries()) {
        entries.push_back({{"id", e.id},
                           {"kind", to_string(e.kind)},
                           {"attributes", e.attributes},
                           {"snippet", e.snippet},
                           {"embedding", e.embedding}});
    }
    return {{"format", kIndexFormat}, {"dimension", index.dimension()}, {"embedder", embedder_id}, {"entries", entries}};
}

inline VectorIndex index_from_json(const json& obj) {
    try {
        if (obj.at("format").get<std::string>() != kIndexFormat) throw Error("unsupported index format");
        const auto dim = obj.at("dimension").get<std::size_t>();
        std::vector<CorpusEntry> entries;
        std::size_t n = 0;
        for (const auto& item : obj.at("entries")) entries.push_back(detail::entry_from_json(item, ++n));
        return VectorIndex::from_normalized(std::move(entries), dim);
    } catch (const json::exception& e) {
        throw Error(std::string("malformed index artifact: ") + e.what());
    }
}

inline void save_index(const VectorIndex& index, const std::string& path, const std::string& embedder_id = {}) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write index '" + path + "'");
    out << index_to_json(index, embedder_id).dump() << '\n';
}

inline VectorIndex load_index(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open index '" + path + "'");
    try {
        return index_from_json(json::parse(in));
    } catch (const json::parse_error& e) {
        throw Error("index '" + path + "' is not valid JSON: " + e.what());
    }
}

}  // namespace mmrag
