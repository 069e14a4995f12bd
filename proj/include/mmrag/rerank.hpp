#pragma once

// Listwise rerank: numbered prompt, index-list reply parsing, top-k selection.

#include <charconv>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmrag/core.hpp"
#include "mmrag/model_client.hpp"
#include "mmrag/retrieval.hpp"

namespace mmrag {

struct RerankDecision {
    std::string raw_output;
    std::vector<std::size_t> parsed_indices;  // 1-based
    std::vector<std::string> kept;            // entry ids, in kept order
    bool fallback_used = false;
};

struct RerankSettings {
    std::string prompt_template;  // needs {question} and {items}
    std::string system_prompt;
    double temperature = 0.0;
    std::size_t max_output_tokens = 75;
    std::size_t max_items = 30;   // retrieval cap
};

/// Items rendered as "<i>. <text>" with 1-based indices in group order.
inline std::string render_numbered_items(std::span<const std::string> item_texts) {
    std::string out;
    for (std::size_t i = 0; i < item_texts.size(); ++i) {
        if (i) out += '\n';
        out += std::to_string(i + 1) + ". " + item_texts[i];
    }
    return out;
}

inline ChatRequest build_rerank_input(const std::string& question, const std::string& image_ref,
                                      std::span<const std::string> item_texts, const RerankSettings& settings) {
    if (item_texts.empty()) throw Error("rerank needs at least one item");
    if (item_texts.size() > settings.max_items) {
        throw Error("rerank input has " + std::to_string(item_texts.size()) + " items, cap is " +
                    std::to_string(settings.max_items));
    }
    ChatRequest req;
    req.system_prompt = settings.system_prompt;
    req.user_parts.push_back(ChatPart::text(render_template(
        settings.prompt_template, {{"question", question}, {"items", render_numbered_items(item_texts)}},
        {"question", "items"})));
    if (!image_ref.empty()) req.user_parts.push_back(ChatPart::image(image_ref));
    req.temperature = settings.temperature;
    req.max_output_tokens = settings.max_output_tokens;
    return req;
}

namespace detail {

// Parses a bracketed integer list starting at raw[pos] == '['. Integers that
// overflow become nullopt entries (later dropped as out of range).
inline std::optional<std::vector<std::optional<long long>>> parse_bracket_list(std::string_view raw, std::size_t pos,
                                                                               std::size_t& end) {
    std::size_t i = pos + 1;
    auto skip_ws = [&] {
        while (i < raw.size() && is_ascii_space(static_cast<unsigned char>(raw[i]))) ++i;
    };
    std::vector<std::optional<long long>> values;
    skip_ws();
    if (i < raw.size() && raw[i] == ']') {
        end = i + 1;
        return values;
    }
    while (i < raw.size()) {
        skip_ws();
        std::size_t start = i;
        if (i < raw.size() && (raw[i] == '+' || raw[i] == '-')) ++i;
        const std::size_t digits = i;
        while (i < raw.size() && std::isdigit(static_cast<unsigned char>(raw[i]))) ++i;
        if (i == digits) return std::nullopt;
        long long v = 0;
        const char* first = raw.data() + start + (raw[start] == '+' ? 1 : 0);
        auto [ptr, ec] = std::from_chars(first, raw.data() + i, v);
        values.push_back(ec == std::errc() ? std::optional<long long>(v) : std::nullopt);
        skip_ws();
        if (i >= raw.size()) return std::nullopt;
        if (raw[i] == ']') {
            end = i + 1;
            return values;
        }
        if (raw[i] != ',') return std::nullopt;
        ++i;
        skip_ws();
        if (i < raw.size() && raw[i] == ']') {  // trailing comma
            end = i + 1;
            return values;
        }
    }
    return std::nullopt;
}

}  // namespace detail

/// First bracketed integer list in `raw`, keeping in-range (1..n_items) values
/// in first-occurrence order. nullopt when no such list exists.
inline std::optional<std::vector<std::size_t>> parse_rerank_output(std::string_view raw, std::size_t n_items) {
    for (std::size_t pos = raw.find('['); pos != std::string_view::npos; pos = raw.find('[', pos + 1)) {
        std::size_t end = 0;
        auto values = detail::parse_bracket_list(raw, pos, end);
        if (!values) continue;
        std::vector<std::size_t> out;
        std::vector<bool> seen(n_items + 1, false);
        for (const auto& v : *values) {
            if (!v || *v < 1 || static_cast<unsigned long long>(*v) > n_items) continue;
            const auto idx = static_cast<std::size_t>(*v);
            if (seen[idx]) continue;
            seen[idx] = true;
            out.push_back(idx);
        }
        return out;
    }
    return std::nullopt;
}

/// "[1, 3]" / "[]".
inline std::string format_index_list(std::span<const std::size_t> indices) {
    std::string out = "[";
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(indices[i]);
    }
    return out + "]";
}

/// Keeps the entries at the given 1-based positions in the stated order,
/// truncated to `keep`. `nullopt` (unparseable reply) keeps the first `keep`
/// items of the group and sets fallback_used.
inline RerankDecision apply_rerank(const RetrievalGroup& group, const std::optional<std::vector<std::size_t>>& indices,
                                   std::size_t keep, std::string raw_output = {}) {
    RerankDecision d;
    d.raw_output = std::move(raw_output);
    if (!indices) {
        d.fallback_used = true;
        for (std::size_t i = 0; i < std::min(keep, group.size()); ++i) d.kept.push_back(group.items[i].entry_id);
        return d;
    }
    d.parsed_indices = *indices;
    std::vector<bool> used(group.size() + 1, false);
    for (std::size_t idx : *indices) {
        if (d.kept.size() == keep) break;
        if (idx < 1 || idx > group.size() || used[idx]) continue;
        used[idx] = true;
        d.kept.push_back(group.items[idx - 1].entry_id);
    }
    return d;
}

/// Full rerank step for one group. Transport/backend failures fall back to the
/// retrieval order; timeouts propagate.
inline RerankDecision rerank_group(const std::string& question, const std::string& image_ref,
                                   const RetrievalGroup& group, const VectorIndex& index, ChatBackend& backend,
                                   const RerankSettings& settings, std::size_t keep, const Deadline& deadline = {}) {
    std::vector<std::string> texts;
    texts.reserve(group.size());
    for (const auto& item : group.items) texts.push_back(extract_text(index.entry(item.position)));
    const ChatRequest req = build_rerank_input(question, image_ref, texts, settings);
    std::string raw;
    try {
        raw = chat(req, backend, deadline.context()).text;
    } catch (const ChatError& e) {
        if (e.kind() == ChatErrorKind::Timeout) throw;
        return apply_rerank(group, std::nullopt, keep);
    }
    return apply_rerank(group, parse_rerank_output(raw, group.size()), keep, raw);
}

}  // namespace mmrag
