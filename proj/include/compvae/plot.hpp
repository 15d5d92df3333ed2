#pragma once

// Minimal SVG line charts and binary PPM images for CLI artifacts.
// Output is a pure function of the inputs (fixed number formatting, no
// timestamps) so composed figures are byte-reproducible.

#include "compvae/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace compvae::plot {

struct Series {
    std::string name;
    std::vector<double> x, y;
    double opacity = 1.0;
};

enum class Scale { linear, log, symlog };

struct Panel {
    std::string title;
    std::vector<Series> series;
    Scale y_scale = Scale::linear;
    std::string x_label, y_label;
};

inline constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                           "#ff7f0e", "#8c564b", "#e377c2", "#17becf"};

/// sign(v) * log10(1 + |v|): a log axis that also carries zero and negative values.
inline double symlog(double v) { return std::copysign(std::log10(1.0 + std::abs(v)), v); }
inline double symlog_inv(double u) { return std::copysign(std::pow(10.0, std::abs(u)) - 1.0, u); }

namespace detail {

inline std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

inline std::string tick_label(double v) {
    char buf[32];
    if (v != 0.0 && (std::abs(v) >= 1e4 || std::abs(v) < 1e-2))
        std::snprintf(buf, sizeof buf, "%.0e", v);
    else
        std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

inline std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == '<') out += "&lt;";
        else if (c == '>') out += "&gt;";
        else if (c == '&') out += "&amp;";
        else out += c;
    }
    return out;
}

/// Roughly five round ticks covering [lo, hi].
inline std::vector<double> linear_ticks(double lo, double hi) {
    const double span = hi - lo;
    if (!(span > 0)) return {lo};
    const double raw = span / 5.0;
    const double mag = std::pow(10.0, std::floor(std::log10(raw)));
    double step = mag;
    for (double m : {1.0, 2.0, 5.0, 10.0})
        if (m * mag >= raw) {
            step = m * mag;
            break;
        }
    std::vector<double> t;
    for (double v = std::ceil(lo / step) * step; v <= hi + 1e-9 * span; v += step) t.push_back(std::abs(v) < 1e-12 * step ? 0.0 : v);
    return t;
}

/// Powers of ten (both signs) and zero inside a symlog range, given in transformed units.
inline std::vector<double> symlog_ticks(double lo, double hi) {
    std::vector<double> t;
    if (lo <= 0 && hi >= 0) t.push_back(0.0);
    for (int e = 0; e < 12; ++e) {
        const double v = std::pow(10.0, e);
        const double u = symlog(v);
        if (u >= lo && u <= hi) t.push_back(v);
        if (-u >= lo && -u <= hi) t.push_back(-v);
    }
    std::sort(t.begin(), t.end());
    return t;
}

inline void draw_panel(std::ostringstream& os, const Panel& p, double ox, double oy, double w, double h) {
    const double ml = 62, mr = 12, mt = 24, mb = 38;
    const double pw = w - ml - mr, ph = h - mt - mb;
    auto ty = [&](double v) {
        if (p.y_scale == Scale::symlog) return symlog(v);
        if (p.y_scale == Scale::log) return v > 0 ? std::log10(v) : std::numeric_limits<double>::quiet_NaN();
        return v;
    };
    double xlo = std::numeric_limits<double>::infinity(), xhi = -xlo, ylo = xlo, yhi = -xlo;
    for (const auto& s : p.series)
        for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
            if (!std::isfinite(s.x[i]) || !std::isfinite(ty(s.y[i]))) continue;
            xlo = std::min(xlo, s.x[i]);
            xhi = std::max(xhi, s.x[i]);
            ylo = std::min(ylo, ty(s.y[i]));
            yhi = std::max(yhi, ty(s.y[i]));
        }
    if (!(xlo <= xhi)) xlo = 0, xhi = 1, ylo = 0, yhi = 1;
    if (xhi == xlo) xhi = xlo + 1;
    if (yhi == ylo) yhi = ylo + 1, ylo -= 1;
    const double pad = 0.05 * (yhi - ylo);
    ylo -= pad;
    yhi += pad;
    auto px = [&](double v) { return ox + ml + (v - xlo) / (xhi - xlo) * pw; };
    auto py = [&](double u) { return oy + mt + (yhi - u) / (yhi - ylo) * ph; };

    os << "<rect x=\"" << num(ox + ml) << "\" y=\"" << num(oy + mt) << "\" width=\"" << num(pw) << "\" height=\""
       << num(ph) << "\" fill=\"none\" stroke=\"#444\"/>\n";
    os << "<text x=\"" << num(ox + ml + pw / 2) << "\" y=\"" << num(oy + 16)
       << "\" text-anchor=\"middle\" font-size=\"13\">" << escape(p.title) << "</text>\n";
    std::vector<double> yt;
    if (p.y_scale == Scale::symlog) {
        yt = symlog_ticks(ylo, yhi);
    } else if (p.y_scale == Scale::log) {
        for (double e : linear_ticks(ylo, yhi))
            if (std::abs(e - std::round(e)) < 1e-9) yt.push_back(std::pow(10.0, std::round(e)));
    } else {
        yt = linear_ticks(ylo, yhi);
    }
    for (double v : yt) {
        const double y = py(ty(v));
        os << "<line x1=\"" << num(ox + ml) << "\" x2=\"" << num(ox + ml + pw) << "\" y1=\"" << num(y) << "\" y2=\""
           << num(y) << "\" stroke=\"#ddd\"/>\n";
        os << "<text x=\"" << num(ox + ml - 4) << "\" y=\"" << num(y + 4)
           << "\" text-anchor=\"end\" font-size=\"10\">" << tick_label(v) << "</text>\n";
    }
    for (double v : linear_ticks(xlo, xhi)) {
        const double x = px(v);
        os << "<text x=\"" << num(x) << "\" y=\"" << num(oy + mt + ph + 14)
           << "\" text-anchor=\"middle\" font-size=\"10\">" << tick_label(v) << "</text>\n";
    }
    if (!p.x_label.empty())
        os << "<text x=\"" << num(ox + ml + pw / 2) << "\" y=\"" << num(oy + h - 6)
           << "\" text-anchor=\"middle\" font-size=\"11\">" << escape(p.x_label) << "</text>\n";
    if (!p.y_label.empty())
        os << "<text transform=\"translate(" << num(ox + 12) << "," << num(oy + mt + ph / 2)
           << ") rotate(-90)\" text-anchor=\"middle\" font-size=\"11\">" << escape(p.y_label) << "</text>\n";

    for (std::size_t k = 0; k < p.series.size(); ++k) {
        const auto& s = p.series[k];
        const char* color = kPalette[k % std::size(kPalette)];
        os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.3\" stroke-opacity=\""
           << num(s.opacity) << "\" points=\"";
        for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i)
            if (std::isfinite(s.x[i]) && std::isfinite(ty(s.y[i]))) os << num(px(s.x[i])) << "," << num(py(ty(s.y[i]))) << " ";
        os << "\"/>\n";
        if (!s.name.empty()) {
            const double ly = oy + mt + 12 + 13 * static_cast<double>(k);
            os << "<text x=\"" << num(ox + ml + pw - 6) << "\" y=\"" << num(ly) << "\" text-anchor=\"end\" font-size=\"10\" fill=\""
               << color << "\">" << escape(s.name) << "</text>\n";
        }
    }
}

}  // namespace detail

/// Grid of panels, `cols` per row, each panel `w` x `h` pixels.
inline std::string svg_panels(const std::vector<Panel>& panels, int cols, double w = 420, double h = 260) {
    if (cols < 1) throw std::invalid_argument("svg_panels: cols must be >= 1");
    const int rows = static_cast<int>((panels.size() + static_cast<std::size_t>(cols) - 1) / static_cast<std::size_t>(cols));
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << detail::num(w * cols) << "\" height=\""
       << detail::num(h * std::max(rows, 1)) << "\" font-family=\"sans-serif\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    for (std::size_t i = 0; i < panels.size(); ++i)
        detail::draw_panel(os, panels[i], w * static_cast<double>(i % static_cast<std::size_t>(cols)),
                           h * static_cast<double>(i / static_cast<std::size_t>(cols)), w, h);
    os << "</svg>\n";
    return os.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    os << text;
    if (!os) throw std::runtime_error("write failed for " + path.string());
}

inline void write_svg(const std::filesystem::path& path, const std::vector<Panel>& panels, int cols) {
    write_text(path, svg_panels(panels, cols));
}

// ------------------------------------------------------------ images

/// Binary PPM (P6) of channel-major (3, n, n) images laid out in a grid,
/// `cols` per row, `scale` pixels per image pixel, 2-pixel gray gutters.
inline void write_ppm_grid(const std::filesystem::path& path, const std::vector<RowVector<double>>& images, int n,
                           int cols, int scale = 4) {
    if (images.empty()) throw std::invalid_argument("write_ppm_grid: no images");
    if (cols < 1 || scale < 1 || n < 1) throw std::invalid_argument("write_ppm_grid: bad layout");
    const Eigen::Index plane = static_cast<Eigen::Index>(n) * n;
    for (const auto& im : images)
        if (im.size() != 3 * plane) throw std::invalid_argument("write_ppm_grid: image is not (3, n, n)");
    const int gutter = 2;
    const int rows = static_cast<int>((images.size() + static_cast<std::size_t>(cols) - 1) / static_cast<std::size_t>(cols));
    const int cell = n * scale + gutter;
    const int width = cols * cell + gutter, height = rows * cell + gutter;
    std::vector<unsigned char> buf(static_cast<std::size_t>(width) * height * 3, 128);
    auto to_byte = [](double v) {
        if (!std::isfinite(v)) return static_cast<unsigned char>(0);
        return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    };
    for (std::size_t k = 0; k < images.size(); ++k) {
        const int cx = gutter + static_cast<int>(k % static_cast<std::size_t>(cols)) * cell;
        const int cy = gutter + static_cast<int>(k / static_cast<std::size_t>(cols)) * cell;
        for (int y = 0; y < n * scale; ++y)
            for (int x = 0; x < n * scale; ++x) {
                const Eigen::Index p = static_cast<Eigen::Index>(y / scale) * n + x / scale;
                const std::size_t o = (static_cast<std::size_t>(cy + y) * width + static_cast<std::size_t>(cx + x)) * 3;
                for (int c = 0; c < 3; ++c) buf[o + static_cast<std::size_t>(c)] = to_byte(images[k](c * plane + p));
            }
    }
    std::ostringstream header;
    header << "P6\n" << width << " " << height << "\n255\n";
    write_text(path, header.str() + std::string(buf.begin(), buf.end()));
}

}  // namespace compvae::plot
