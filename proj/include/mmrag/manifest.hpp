#pragma once

// Content hashes and run manifests.

#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>

#include <openssl/evp.h>

#include "mmrag/core.hpp"

namespace mmrag {

inline std::string sha1_hex(std::string_view data) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) != 1 ||
        EVP_DigestUpdate(ctx, data.data(), data.size()) != 1 || EVP_DigestFinal_ex(ctx, digest, &len) != 1) {
        EVP_MD_CTX_free(ctx);
        throw Error("sha1 failed");
    }
    EVP_MD_CTX_free(ctx);
    std::ostringstream out;
    for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
    return out.str();
}

/// Same digest `git hash-object` reports for a file with these bytes.
inline std::string git_blob_hash(std::string_view content) {
    std::string framed = "blob " + std::to_string(content.size());
    framed.push_back('\0');
    framed.append(content);
    return sha1_hex(framed);
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open '" + path + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::string file_hash(const std::string& path) { return git_blob_hash(read_file(path)); }

inline std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream out;
    out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return out.str();
}

/// Provenance for one command invocation. `run_id` hashes everything except
/// the timestamps, so identical inputs give identical ids.
struct RunManifest {
    std::string command;
    json config;
    json inputs = json::object();    // name -> {"path", "hash"}
    json backends = json::object();  // role -> descriptor
    json flags = json::object();
    std::uint64_t seed = 0;
    std::string started_at;
    std::string finished_at;

    void add_input(const std::string& name, const std::string& path) {
        inputs[name] = {{"path", path}, {"hash", file_hash(path)}};
    }

    json identity() const {
        return {{"command", command}, {"config", config},   {"inputs", inputs},
                {"backends", backends}, {"flags", flags}, {"seed", seed}};
    }

    std::string content_hash() const {
        json hashes = json::object();
        for (const auto& [name, entry] : inputs.items()) hashes[name] = entry.at("hash");
        return git_blob_hash(hashes.dump());
    }

    std::string run_id() const { return git_blob_hash(identity().dump()).substr(0, 16); }

    json to_json() const {
        json out = identity();
        out["content_hash"] = content_hash();
        out["run_id"] = run_id();
        out["started_at"] = started_at;
        out["finished_at"] = finished_at;
        return out;
    }
};

}  // namespace mmrag
