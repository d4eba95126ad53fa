#pragma once

#include <span>
#include <string>

namespace geoformer::plots {

struct Series {
    std::string label;
    std::span<const double> values;
};

/// Horizontal-bar ASCII chart, one row per value.
std::string ascii_bars(const std::string& title, std::span<const double> values, int first_index = 0,
                       int width = 50);

/// Standalone SVG line chart; x runs over indices starting at first_index.
std::string svg_lines(const std::string& title, const std::string& x_label, std::span<const Series> series,
                      int first_index = 0);

/// Standalone SVG bar chart over equal-width bins of [0, 1].
std::string svg_histogram(const std::string& title, std::span<const Series> series);

} // namespace geoformer::plots
