#pragma once

#include "geoformer/mobility.hpp"
#include "geoformer/rng.hpp"

#include <filesystem>
#include <functional>
#include <iterator>
#include <unistd.h>
#include <fstream>
#include <string>

namespace geoformer::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
  public:
    explicit TempDir(const std::string& tag) {
        Rng rng(std::hash<std::string>{}(tag) ^ static_cast<std::uint64_t>(::getpid()));
        path_ = std::filesystem::temp_directory_path() / ("geoformer_" + tag + "_" + std::to_string(rng.next_u64() % 1000000));
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
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

  private:
    std::filesystem::path path_;
};

inline void write_text(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    out << text;
}

inline std::string read_text(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Each slot observed with probability `p_obs` at a uniform random cell.
inline DayTrajectory random_day(Rng& rng, double p_obs = 0.5) {
    DayTrajectory d(static_cast<int>(rng.below(kDaysPerWeek)));
    for (auto& s : d.slots)
        if (rng.bernoulli(p_obs)) s = GridCell(static_cast<int>(rng.below(kGridSize)), static_cast<int>(rng.below(kGridSize)));
    return d;
}

} // namespace geoformer::testing
