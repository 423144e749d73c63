// Copyright 2026 The miub-scaling Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Minimal deterministic SVG line plots: categorical x axis, one or two series
// (the second on its own right-hand axis). Numbers are printed with fixed
// precision so identical input gives identical bytes.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "miub/error.hpp"
#include "miub/io.hpp"

namespace miub::svg {

struct Series {
    std::string name;
    std::vector<double> y; // one value per x tick
    std::string color;
};

struct LinePlot {
    std::string title;
    std::string x_label;
    std::vector<std::string> x_ticks;
    Series left;                 // drawn against the left axis
    std::optional<Series> right; // drawn against the right axis
};

namespace detail {

inline std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
        case '&': out += "&amp;"; break;
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '"': out += "&quot;"; break;
        default: out += c;
        }
    }
    return out;
}

inline std::string num(double v) { return io::format_fixed(v, 2); }

inline std::string tick_label(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

struct Scale {
    double lo, hi;
    double map(double v, double top, double bottom) const {
        return bottom - (v - lo) / (hi - lo) * (bottom - top);
    }
};

inline Scale scale_for(const std::vector<double>& ys) {
    double lo = *std::min_element(ys.begin(), ys.end());
    double hi = *std::max_element(ys.begin(), ys.end());
    if (hi - lo < 1e-300) {
        const double pad = lo == 0.0 ? 1.0 : std::abs(lo) * 0.1;
        lo -= pad;
        hi += pad;
    } else {
        const double pad = 0.08 * (hi - lo);
        lo -= pad;
        hi += pad;
    }
    return {lo, hi};
}

} // namespace detail

inline std::string render(const LinePlot& p) {
    const std::size_t n = p.x_ticks.size();
    if (n == 0) throw InvalidArgument("svg::render: no x ticks");
    if (p.left.y.size() != n || (p.right && p.right->y.size() != n)) {
        throw InvalidArgument("svg::render: series length differs from tick count");
    }
    constexpr double W = 640, H = 400, L = 80, R = 80, T = 50, B = 60;
    const double x0 = L, x1 = W - R, y0 = T, y1 = H - B;
    auto xpos = [&](std::size_t i) { return n == 1 ? 0.5 * (x0 + x1) : x0 + (x1 - x0) * static_cast<double>(i) / static_cast<double>(n - 1); };
    using detail::num;

    std::string s;
    s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"400\" viewBox=\"0 0 640 400\" "
         "font-family=\"sans-serif\" font-size=\"12\">\n";
    s += "<rect x=\"0\" y=\"0\" width=\"640\" height=\"400\" fill=\"white\"/>\n";
    s += "<text x=\"320\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">" + detail::escape(p.title) + "</text>\n";
    s += "<line x1=\"" + num(x0) + "\" y1=\"" + num(y1) + "\" x2=\"" + num(x1) + "\" y2=\"" + num(y1) + "\" stroke=\"black\"/>\n";
    s += "<line x1=\"" + num(x0) + "\" y1=\"" + num(y0) + "\" x2=\"" + num(x0) + "\" y2=\"" + num(y1) + "\" stroke=\"black\"/>\n";
    for (std::size_t i = 0; i < n; ++i) {
        s += "<g class=\"xtick\"><line x1=\"" + num(xpos(i)) + "\" y1=\"" + num(y1) + "\" x2=\"" + num(xpos(i)) + "\" y2=\"" +
             num(y1 + 5) + "\" stroke=\"black\"/><text x=\"" + num(xpos(i)) + "\" y=\"" + num(y1 + 20) +
             "\" text-anchor=\"middle\">" + detail::escape(p.x_ticks[i]) + "</text></g>\n";
    }
    s += "<text x=\"" + num(0.5 * (x0 + x1)) + "\" y=\"" + num(H - 15) + "\" text-anchor=\"middle\">" +
         detail::escape(p.x_label) + "</text>\n";

    auto draw = [&](const Series& series, bool right_axis) {
        const auto sc = detail::scale_for(series.y);
        const double ax = right_axis ? x1 : x0;
        if (right_axis) {
            s += "<line x1=\"" + num(x1) + "\" y1=\"" + num(y0) + "\" x2=\"" + num(x1) + "\" y2=\"" + num(y1) +
                 "\" stroke=\"black\"/>\n";
        }
        for (int k = 0; k <= 4; ++k) {
            const double v = sc.lo + (sc.hi - sc.lo) * k / 4.0;
            const double y = sc.map(v, y0, y1);
            const double tx = right_axis ? ax + 8 : ax - 8;
            s += "<line x1=\"" + num(right_axis ? ax : ax - 5) + "\" y1=\"" + num(y) + "\" x2=\"" +
                 num(right_axis ? ax + 5 : ax) + "\" y2=\"" + num(y) + "\" stroke=\"black\"/>";
            s += "<text x=\"" + num(tx) + "\" y=\"" + num(y + 4) + "\" text-anchor=\"" + (right_axis ? "start" : "end") +
                 "\" fill=\"" + series.color + "\">" + detail::tick_label(v) + "</text>\n";
        }
        s += "<polyline class=\"series\" fill=\"none\" stroke=\"" + series.color + "\" stroke-width=\"2\" points=\"";
        for (std::size_t i = 0; i < n; ++i) {
            if (i) s += " ";
            s += num(xpos(i)) + "," + num(sc.map(series.y[i], y0, y1));
        }
        s += "\"/>\n";
        for (std::size_t i = 0; i < n; ++i) {
            s += "<circle cx=\"" + num(xpos(i)) + "\" cy=\"" + num(sc.map(series.y[i], y0, y1)) + "\" r=\"3\" fill=\"" +
                 series.color + "\"/>\n";
        }
    };
    draw(p.left, false);
    s += "<text x=\"" + num(x0) + "\" y=\"" + num(y0 - 10) + "\" fill=\"" + p.left.color + "\">" +
         detail::escape(p.left.name) + "</text>\n";
    if (p.right) {
        draw(*p.right, true);
        s += "<text x=\"" + num(x1) + "\" y=\"" + num(y0 - 10) + "\" text-anchor=\"end\" fill=\"" + p.right->color +
             "\">" + detail::escape(p.right->name) + "</text>\n";
    }
    s += "</svg>\n";
    return s;
}

} // namespace miub::svg
