#pragma once

// Shared helpers for the test binaries.

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mmrag/core.hpp"
#include "mmrag/model_client.hpp"

namespace testing {

inline std::string fixture(const std::string& name) { return std::string(MMRAG_FIXTURES) + "/" + name; }

/// Fresh directory under the system temp dir, removed on destruction.
struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path = std::filesystem::temp_directory_path() /
               ("mmrag-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
}

inline std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline std::shared_ptr<mmrag::MockBackend> mock(const mmrag::json& script) {
    return std::make_shared<mmrag::MockBackend>(mmrag::MockBackend::from_json(script));
}

/// Quiet shell invocation; returns the exit status.
inline int run_shell(const std::string& cmd) {
    const int rc = std::system((cmd + " >/dev/null 2>&1").c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

inline std::string random_ascii(std::mt19937_64& rng, std::size_t max_len) {
    static const std::string alphabet = "aBc dE.,!?'\"-_ \t\nXyZ019  ;:()";
    std::string s;
    const std::size_t n = rng() % (max_len + 1);
    for (std::size_t i = 0; i < n; ++i) s += alphabet[rng() % alphabet.size()];
    return s;
}

}  // namespace testing
