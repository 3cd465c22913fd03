#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <string>
#include <unistd.h>

#include "nucssl/image.hpp"
#include "nucssl/random.hpp"

namespace testing_support {

class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("nucssl-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

private:
    std::filesystem::path path_;
};

// Each pixel independently takes an id in [0, max_id].
inline nucssl::InstanceLabelMap random_label_map(nucssl::Rng& rng, int h, int w, int max_id) {
    nucssl::InstanceLabelMap m(h, w);
    for (auto& v : m.values) {
        v = static_cast<std::uint32_t>(rng.uniform_int(0, max_id));
    }
    return m;
}

// Axis-aligned rectangles of ids 1..n painted in order (later ones overwrite).
inline nucssl::InstanceLabelMap random_rect_map(nucssl::Rng& rng, int h, int w, int n) {
    nucssl::InstanceLabelMap m(h, w);
    for (int id = 1; id <= n; ++id) {
        const int y0 = static_cast<int>(rng.uniform_int(0, h - 1));
        const int x0 = static_cast<int>(rng.uniform_int(0, w - 1));
        const int y1 = static_cast<int>(rng.uniform_int(y0, h - 1));
        const int x1 = static_cast<int>(rng.uniform_int(x0, w - 1));
        for (int y = y0; y <= y1; ++y) {
            for (int x = x0; x <= x1; ++x) {
                m(y, x) = static_cast<std::uint32_t>(id);
            }
        }
    }
    return m;
}

} // namespace testing_support
