#include "ctxbias/report/report.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "ctxbias/core/png.hpp"

namespace ctxbias::report {

namespace {

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(4);
    os << v;
    return os.str();
}

struct BoxStats {
    double lo, q1, med, q3, hi;
};

BoxStats box_stats(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    auto quantile = [&](double q) {
        if (v.empty()) return 0.0;
        const double pos = q * (static_cast<double>(v.size()) - 1.0);
        const size_t i = static_cast<size_t>(pos);
        const double frac = pos - static_cast<double>(i);
        if (i + 1 >= v.size()) return v.back();
        return v[i] * (1.0 - frac) + v[i + 1] * frac;
    };
    return {v.front(), quantile(0.25), quantile(0.5), quantile(0.75), v.back()};
}

void draw_box(std::ostringstream& os, const BoxStats& s, double x, double box_w,
              const std::string& fill, double y_of_lo, double scale) {
    auto ymap = [&](double v) { return y_of_lo - v * scale; };
    os << "<line x1='" << x + box_w / 2 << "' y1='" << ymap(s.lo) << "' x2='" << x + box_w / 2
       << "' y2='" << ymap(s.hi) << "' stroke='black'/>\n";
    os << "<rect x='" << x << "' y='" << ymap(s.q3) << "' width='" << box_w << "' height='"
       << std::max(1.0, ymap(s.q1) - ymap(s.q3)) << "' fill='" << fill
       << "' stroke='black'/>\n";
    os << "<line x1='" << x << "' y1='" << ymap(s.med) << "' x2='" << x + box_w << "' y2='"
       << ymap(s.med) << "' stroke='black' stroke-width='2'/>\n";
}

}  // namespace

std::string stars_for_p(double p) {
    if (p < 0.001) return "***";
    if (p < 0.01) return "**";
    if (p < 0.05) return "*";
    return "";
}

std::string svg_paired_boxplot(const std::string& title, const std::string& a_name,
                               const std::string& b_name, const std::vector<BoxGroup>& groups) {
    const int width = std::max<int>(320, 60 + static_cast<int>(groups.size()) * 110);
    const int height = 300;
    const double plot_top = 48, plot_bottom = 260;

    double vmin = 0.0, vmax = 1e-9;
    for (const auto& g : groups) {
        for (double v : g.a_samples) {
            vmin = std::min(vmin, v);
            vmax = std::max(vmax, v);
        }
        for (double v : g.b_samples) {
            vmin = std::min(vmin, v);
            vmax = std::max(vmax, v);
        }
    }
    const double span = std::max(1e-9, vmax - vmin);
    const double scale = (plot_bottom - plot_top) / span;
    const double y_of_lo = plot_bottom + vmin * scale;

    std::ostringstream os;
    os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width << "' height='" << height
       << "'>\n";
    os << "<text x='12' y='20' font-size='14' font-family='sans-serif'>" << title
       << "</text>\n";
    os << "<text x='12' y='36' font-size='11' font-family='sans-serif'>" << a_name
       << " (light) vs " << b_name << " (dark); stars mark significance</text>\n";
    os << "<line x1='40' y1='" << plot_bottom << "' x2='" << width - 12 << "' y2='" << plot_bottom
       << "' stroke='black'/>\n";

    double x = 56;
    for (const auto& g : groups) {
        if (!g.a_samples.empty())
            draw_box(os, box_stats(g.a_samples), x, 32, "#c6dbef", y_of_lo, scale);
        if (!g.b_samples.empty())
            draw_box(os, box_stats(g.b_samples), x + 40, 32, "#6baed6", y_of_lo, scale);
        os << "<text x='" << x + 36 << "' y='" << plot_bottom + 16
           << "' font-size='10' text-anchor='middle' font-family='sans-serif'>" << g.label
           << "</text>\n";
        if (!g.stars.empty())
            os << "<text x='" << x + 36 << "' y='" << plot_top - 4
               << "' font-size='13' text-anchor='middle' font-family='sans-serif'>" << g.stars
               << "</text>\n";
        x += 110;
    }
    os << "<text x='12' y='" << plot_bottom << "' font-size='9' font-family='sans-serif'>"
       << fmt(vmin) << "</text>\n";
    os << "<text x='12' y='" << plot_top + 8 << "' font-size='9' font-family='sans-serif'>"
       << fmt(vmax) << "</text>\n";
    os << "</svg>\n";
    return os.str();
}

std::string svg_pair_graph(const std::string& title, const std::vector<std::string>& fg_names,
                           const std::vector<std::string>& bg_names,
                           const std::vector<PairEdge>& edges) {
    const int height = 80 + 34 * static_cast<int>(std::max(fg_names.size(), bg_names.size()));
    const int width = 420;
    auto fg_y = [&](size_t i) { return 70.0 + 34.0 * static_cast<double>(i); };
    auto bg_y = [&](size_t i) { return 70.0 + 34.0 * static_cast<double>(i); };

    std::ostringstream os;
    os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width << "' height='" << height
       << "'>\n";
    os << "<text x='12' y='20' font-size='14' font-family='sans-serif'>" << title
       << "</text>\n";
    os << "<text x='12' y='38' font-size='10' font-family='sans-serif'>bold = statistically "
          "significant; width scales with drop rate</text>\n";

    for (const auto& e : edges) {
        size_t fi = 0, bi = 0;
        for (size_t i = 0; i < fg_names.size(); ++i)
            if (fg_names[i] == e.fg) fi = i;
        for (size_t i = 0; i < bg_names.size(); ++i)
            if (bg_names[i] == e.bg) bi = i;
        const double w = e.significant ? 1.5 + 6.0 * e.weight : 0.6 + 2.0 * e.weight;
        os << "<line x1='120' y1='" << fg_y(fi) - 4 << "' x2='300' y2='" << bg_y(bi) - 4
           << "' stroke='" << (e.significant ? "#08306b" : "#9ecae1") << "' stroke-width='"
           << fmt(w) << "'/>\n";
    }
    for (size_t i = 0; i < fg_names.size(); ++i)
        os << "<text x='110' y='" << fg_y(i) << "' font-size='12' text-anchor='end' "
              "font-family='sans-serif'>"
           << fg_names[i] << "</text>\n";
    for (size_t i = 0; i < bg_names.size(); ++i)
        os << "<text x='310' y='" << bg_y(i) << "' font-size='12' font-family='sans-serif'>"
           << bg_names[i] << "</text>\n";
    os << "</svg>\n";
    return os.str();
}

void write_cam_png(const std::string& path, const std::vector<float>& heat, int width,
                   int height) {
    float mx = 0.0f;
    for (float v : heat) mx = std::max(mx, v);
    std::vector<std::uint8_t> px(heat.size());
    for (size_t i = 0; i < heat.size(); ++i)
        px[i] = mx > 0.0f ? static_cast<std::uint8_t>(255.0f * heat[i] / mx) : 0;
    png::write_gray8(path, width, height, px.data());
}

std::string to_csv(const std::vector<std::vector<std::string>>& rows) {
    std::ostringstream os;
    for (const auto& row : rows) {
        for (size_t i = 0; i < row.size(); ++i) {
            if (i) os << ",";
            const bool quote = row[i].find_first_of(",\"\n") != std::string::npos;
            if (!quote) {
                os << row[i];
            } else {
                os << '"';
                for (char c : row[i]) {
                    if (c == '"') os << "\"\"";
                    else os << c;
                }
                os << '"';
            }
        }
        os << "\n";
    }
    return os.str();
}

}  // namespace ctxbias::report
