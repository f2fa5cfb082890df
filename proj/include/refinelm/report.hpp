#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "refinelm/metrics.hpp"

namespace refinelm {

struct ChartPanel {
    std::string title;
    std::vector<GroupGamma> groups;
};

namespace detail {

inline std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

inline std::string xml_escape(std::string_view s) {
    std::string out;
    for (char c : s) {
        switch (c) {
        case '&': out += "&amp;"; break;
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '"': out += "&quot;"; break;
        default: out.push_back(c);
        }
    }
    return out;
}

} // namespace detail

/// Horizontal signed bar chart of per-group gamma, one panel per report,
/// panels laid out left to right on a shared scale.
inline std::string render_group_chart(const std::vector<ChartPanel>& panels) {
    if (panels.empty()) throw DataError("chart: no panels");
    double extent = 0.0;
    std::size_t rows = 0;
    for (const auto& p : panels) {
        if (p.groups.empty()) throw DataError("chart: empty group map for '" + p.title + "'");
        rows = std::max(rows, p.groups.size());
        for (const auto& g : p.groups) extent = std::max(extent, std::abs(g.gamma));
    }
    if (extent == 0.0) extent = 1.0;

    constexpr double kPanelW = 420, kLabelW = 140, kBarH = 18, kGap = 6, kTop = 40, kPad = 20;
    const double plot_w = kPanelW - kLabelW - kPad;
    const double height = kTop + rows * (kBarH + kGap) + 40;
    const double width = panels.size() * kPanelW;

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << detail::fmt(width) << "\" height=\"" << detail::fmt(height)
        << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    for (std::size_t pi = 0; pi < panels.size(); ++pi) {
        const auto& p = panels[pi];
        const double x0 = pi * kPanelW;
        const double axis = x0 + kLabelW + plot_w / 2;
        svg << "<g class=\"panel\">\n";
        svg << "<text x=\"" << detail::fmt(x0 + kPanelW / 2) << "\" y=\"20\" text-anchor=\"middle\" font-weight=\"bold\">"
            << detail::xml_escape(p.title) << "</text>\n";
        svg << "<line x1=\"" << detail::fmt(axis) << "\" y1=\"" << detail::fmt(kTop - 4) << "\" x2=\"" << detail::fmt(axis)
            << "\" y2=\"" << detail::fmt(kTop + rows * (kBarH + kGap)) << "\" stroke=\"#333\"/>\n";
        for (std::size_t i = 0; i < p.groups.size(); ++i) {
            const auto& g = p.groups[i];
            const double y = kTop + i * (kBarH + kGap);
            const double len = std::abs(g.gamma) / extent * (plot_w / 2);
            const double x = g.gamma >= 0 ? axis : axis - len;
            svg << "<text x=\"" << detail::fmt(x0 + kLabelW - 6) << "\" y=\"" << detail::fmt(y + kBarH - 5)
                << "\" text-anchor=\"end\">" << detail::xml_escape(g.group) << "</text>\n";
            svg << "<rect class=\"bar\" data-group=\"" << detail::xml_escape(g.group) << "\" data-gamma=\""
                << nlohmann::json(g.gamma).dump() << "\" x=\"" << detail::fmt(x) << "\" y=\"" << detail::fmt(y) << "\" width=\""
                << detail::fmt(len) << "\" height=\"" << detail::fmt(kBarH) << "\" fill=\""
                << (g.gamma >= 0 ? "#c0504d" : "#4f81bd") << "\"/>\n";
        }
        const double ylab = kTop + rows * (kBarH + kGap) + 16;
        svg << "<text x=\"" << detail::fmt(axis - plot_w / 2) << "\" y=\"" << detail::fmt(ylab) << "\" text-anchor=\"middle\">"
            << detail::fmt(-extent) << "</text>\n";
        svg << "<text x=\"" << detail::fmt(axis) << "\" y=\"" << detail::fmt(ylab) << "\" text-anchor=\"middle\">0</text>\n";
        svg << "<text x=\"" << detail::fmt(axis + plot_w / 2) << "\" y=\"" << detail::fmt(ylab) << "\" text-anchor=\"middle\">"
            << detail::fmt(extent) << "</text>\n";
        svg << "</g>\n";
    }
    svg << "</svg>\n";
    return svg.str();
}

/// group,<title 1>,<title 2>,... with one row per group of the first panel.
inline std::string group_chart_csv(const std::vector<ChartPanel>& panels) {
    if (panels.empty() || panels.front().groups.empty()) throw DataError("chart: empty group map");
    std::ostringstream out;
    out << "group";
    for (const auto& p : panels) out << ',' << csv_field(p.title);
    out << '\n';
    for (const auto& g : panels.front().groups) {
        out << csv_field(g.group);
        for (const auto& p : panels) {
            out << ',';
            const auto it = std::find_if(p.groups.begin(), p.groups.end(), [&](const GroupGamma& x) { return x.group == g.group; });
            if (it != p.groups.end()) out << nlohmann::json(it->gamma).dump();
        }
        out << '\n';
    }
    return out.str();
}

} // namespace refinelm
