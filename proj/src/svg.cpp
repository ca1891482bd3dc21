#include "xlab/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

namespace xlab::svg {

namespace {

constexpr double kWidth = 640, kHeight = 420;
constexpr double kLeft = 70, kRight = 150, kTop = 40, kBottom = 60;
constexpr const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '&': out += "&amp;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

struct Range {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    void add(double v) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    void pad() {
        if (!std::isfinite(lo)) lo = 0, hi = 1;
        if (hi - lo < 1e-12) {
            const double d = std::max(std::abs(lo) * 0.05, 0.5);
            lo -= d;
            hi += d;
        } else {
            const double d = (hi - lo) * 0.05;
            lo -= d;
            hi += d;
        }
    }
};

}  // namespace

std::string line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                       std::span<const Series> series) {
    Range xr, yr;
    for (const auto& s : series) {
        for (auto [x, y] : s.points) {
            if (std::isfinite(x) && std::isfinite(y)) xr.add(x), yr.add(y);
        }
    }
    xr.pad();
    yr.pad();
    const double pw = kWidth - kLeft - kRight, ph = kHeight - kTop - kBottom;
    const auto px = [&](double x) { return kLeft + (x - xr.lo) / (xr.hi - xr.lo) * pw; };
    const auto py = [&](double y) { return kTop + ph - (y - yr.lo) / (yr.hi - yr.lo) * ph; };

    std::string out = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt("%g", kWidth) + "\" height=\"" +
                      fmt("%g", kHeight) + "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out += "<text x=\"" + fmt("%g", kWidth / 2) + "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" +
           escape(title) + "</text>\n";
    out += "<rect x=\"" + fmt("%g", kLeft) + "\" y=\"" + fmt("%g", kTop) + "\" width=\"" + fmt("%g", pw) +
           "\" height=\"" + fmt("%g", ph) + "\" fill=\"none\" stroke=\"#444\"/>\n";
    for (int i = 0; i <= 5; ++i) {
        const double xv = xr.lo + (xr.hi - xr.lo) * i / 5, yv = yr.lo + (yr.hi - yr.lo) * i / 5;
        out += "<text x=\"" + fmt("%.1f", px(xv)) + "\" y=\"" + fmt("%.1f", kTop + ph + 18) +
               "\" text-anchor=\"middle\" fill=\"#444\">" + fmt("%.3g", xv) + "</text>\n";
        out += "<text x=\"" + fmt("%.1f", kLeft - 6) + "\" y=\"" + fmt("%.1f", py(yv) + 4) +
               "\" text-anchor=\"end\" fill=\"#444\">" + fmt("%.3g", yv) + "</text>\n";
        out += "<line x1=\"" + fmt("%.1f", kLeft) + "\" x2=\"" + fmt("%.1f", kLeft + pw) + "\" y1=\"" +
               fmt("%.1f", py(yv)) + "\" y2=\"" + fmt("%.1f", py(yv)) + "\" stroke=\"#ddd\"/>\n";
    }
    out += "<text x=\"" + fmt("%.1f", kLeft + pw / 2) + "\" y=\"" + fmt("%.1f", kHeight - 15) +
           "\" text-anchor=\"middle\">" + escape(x_label) + "</text>\n";
    out += "<text transform=\"translate(18," + fmt("%.1f", kTop + ph / 2) +
           ") rotate(-90)\" text-anchor=\"middle\">" + escape(y_label) + "</text>\n";

    for (std::size_t k = 0; k < series.size(); ++k) {
        const auto& s = series[k];
        const std::string color = kColors[k % std::size(kColors)];
        auto pts = s.points;
        std::stable_sort(pts.begin(), pts.end(), [](auto a, auto b) { return a.first < b.first; });
        out += "<g class=\"series\" data-name=\"" + escape(s.name) + "\">\n";
        std::string path;
        for (auto [x, y] : pts) {
            if (!std::isfinite(x) || !std::isfinite(y)) continue;
            path += (path.empty() ? "M" : " L") + fmt("%.2f", px(x)) + "," + fmt("%.2f", py(y));
        }
        if (!path.empty()) out += "<path d=\"" + path + "\" fill=\"none\" stroke=\"" + color + "\" stroke-width=\"2\"/>\n";
        for (auto [x, y] : pts) {
            if (!std::isfinite(x) || !std::isfinite(y)) continue;
            out += "<circle cx=\"" + fmt("%.2f", px(x)) + "\" cy=\"" + fmt("%.2f", py(y)) + "\" r=\"3.5\" fill=\"" +
                   color + "\"><title>" + fmt("%.10g", x) + "," + fmt("%.10g", y) + "</title></circle>\n";
        }
        out += "</g>\n";
        const double ly = kTop + 10 + 18 * static_cast<double>(k);
        out += "<line x1=\"" + fmt("%g", kWidth - kRight + 12) + "\" x2=\"" + fmt("%g", kWidth - kRight + 32) +
               "\" y1=\"" + fmt("%g", ly) + "\" y2=\"" + fmt("%g", ly) + "\" stroke=\"" + color +
               "\" stroke-width=\"2\"/>\n";
        out += "<text x=\"" + fmt("%g", kWidth - kRight + 38) + "\" y=\"" + fmt("%g", ly + 4) + "\">" +
               escape(s.name) + "</text>\n";
    }
    out += "</svg>\n";
    return out;
}

}  // namespace xlab::svg
