#include "plots.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace geoformer::plots {

namespace {

constexpr double kW = 720, kH = 360, kLeft = 60, kRight = 20, kTop = 40, kBottom = 50;
const char* const kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd"};

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == '<')
            out += "&lt;";
        else if (c == '>')
            out += "&gt;";
        else if (c == '&')
            out += "&amp;";
        else
            out += c;
    }
    return out;
}

double max_of(std::span<const Series> series) {
    double m = 0;
    for (const auto& s : series)
        for (double v : s.values)
            if (std::isfinite(v)) m = std::max(m, v);
    return m > 0 ? m : 1.0;
}

void frame(std::ostringstream& o, const std::string& title, double ymax) {
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << kW / 2 << "\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">"
      << escape(title) << "</text>\n";
    const double y0 = kH - kBottom;
    o << "<line x1=\"" << kLeft << "\" y1=\"" << y0 << "\" x2=\"" << kW - kRight << "\" y2=\"" << y0
      << "\" stroke=\"black\"/>\n"
      << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << y0
      << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double v = ymax * i / 4.0;
        const double y = y0 - (y0 - kTop) * i / 4.0;
        o << "<text x=\"" << kLeft - 6 << "\" y=\"" << y + 4
          << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << num(v) << "</text>\n";
    }
}

void legend(std::ostringstream& o, std::span<const Series> series) {
    for (std::size_t i = 0; i < series.size(); ++i) {
        const double x = kLeft + 10 + 150.0 * static_cast<double>(i);
        o << "<rect x=\"" << x << "\" y=\"" << kH - 18 << "\" width=\"12\" height=\"4\" fill=\"" << kColors[i % 4]
          << "\"/>\n<text x=\"" << x + 16 << "\" y=\"" << kH - 12
          << "\" font-family=\"sans-serif\" font-size=\"11\">" << escape(series[i].label) << "</text>\n";
    }
}

} // namespace

std::string ascii_bars(const std::string& title, std::span<const double> values, int first_index, int width) {
    std::ostringstream o;
    o << title << '\n';
    double m = 0;
    for (double v : values) m = std::max(m, v);
    for (std::size_t i = 0; i < values.size(); ++i) {
        const int n = m > 0 ? static_cast<int>(std::lround(values[i] / m * width)) : 0;
        char label[16];
        std::snprintf(label, sizeof label, "%4d |", first_index + static_cast<int>(i));
        o << label << std::string(static_cast<std::size_t>(n), '#') << ' ' << num(values[i]) << '\n';
    }
    return o.str();
}

std::string svg_lines(const std::string& title, const std::string& x_label, std::span<const Series> series,
                      int first_index) {
    std::ostringstream o;
    const double ymax = max_of(series);
    frame(o, title, ymax);
    std::size_t n = 0;
    for (const auto& s : series) n = std::max(n, s.values.size());
    const double y0 = kH - kBottom;
    const double span = n > 1 ? static_cast<double>(n - 1) : 1.0;
    auto px = [&](std::size_t i) { return kLeft + (kW - kLeft - kRight) * static_cast<double>(i) / span; };
    for (std::size_t i = 0; i < n; i += std::max<std::size_t>(1, n / 10))
        o << "<text x=\"" << px(i) << "\" y=\"" << y0 + 16
          << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">"
          << first_index + static_cast<int>(i) << "</text>\n";
    o << "<text x=\"" << kW / 2 << "\" y=\"" << y0 + 32
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" << escape(x_label) << "</text>\n";
    for (std::size_t k = 0; k < series.size(); ++k) {
        o << "<polyline fill=\"none\" stroke=\"" << kColors[k % 4] << "\" stroke-width=\"1.5\" points=\"";
        for (std::size_t i = 0; i < series[k].values.size(); ++i) {
            const double v = std::isfinite(series[k].values[i]) ? series[k].values[i] : 0.0;
            o << num(px(i)) << ',' << num(y0 - (y0 - kTop) * v / ymax) << ' ';
        }
        o << "\"/>\n";
    }
    legend(o, series);
    o << "</svg>\n";
    return o.str();
}

std::string svg_histogram(const std::string& title, std::span<const Series> series) {
    std::ostringstream o;
    const double ymax = max_of(series);
    frame(o, title, ymax);
    std::size_t bins = 0;
    for (const auto& s : series) bins = std::max(bins, s.values.size());
    const double y0 = kH - kBottom;
    const double bin_w = (kW - kLeft - kRight) / static_cast<double>(std::max<std::size_t>(bins, 1));
    const double bar_w = bin_w / static_cast<double>(std::max<std::size_t>(series.size(), 1));
    for (std::size_t k = 0; k < series.size(); ++k)
        for (std::size_t b = 0; b < series[k].values.size(); ++b) {
            const double h = (y0 - kTop) * series[k].values[b] / ymax;
            o << "<rect x=\"" << num(kLeft + bin_w * static_cast<double>(b) + bar_w * static_cast<double>(k))
              << "\" y=\"" << num(y0 - h) << "\" width=\"" << num(bar_w) << "\" height=\"" << num(h) << "\" fill=\""
              << kColors[k % 4] << "\"/>\n";
        }
    for (int i = 0; i <= 10; i += 2)
        o << "<text x=\"" << kLeft + (kW - kLeft - kRight) * i / 10.0 << "\" y=\"" << y0 + 16
          << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << num(i / 10.0) << "</text>\n";
    legend(o, series);
    o << "</svg>\n";
    return o.str();
}

} // namespace geoformer::plots
