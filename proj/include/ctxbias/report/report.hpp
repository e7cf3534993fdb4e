#pragma once

#include <string>
#include <vector>

namespace ctxbias::report {

struct BoxGroup {
    std::string label;
    std::vector<double> a_samples;  // first box of the pair
    std::vector<double> b_samples;  // second box
    std::string stars;              // "", "*", "**", "***"
};

// Paired box plot (e.g. source vs target gradients per pair) with
// significance stars above each pair. Deterministic output.
std::string svg_paired_boxplot(const std::string& title, const std::string& a_name,
                               const std::string& b_name, const std::vector<BoxGroup>& groups);

struct PairEdge {
    std::string fg, bg;
    double weight = 0.0;  // drop rate
    bool significant = false;
};

// Bipartite fg-bg graph; edge width scales with drop rate and significant
// edges are drawn bold.
std::string svg_pair_graph(const std::string& title, const std::vector<std::string>& fg_names,
                           const std::vector<std::string>& bg_names,
                           const std::vector<PairEdge>& edges);

// Heat map of one CAM rendered as an 8-bit grayscale PNG.
void write_cam_png(const std::string& path, const std::vector<float>& heat, int width,
                   int height);

std::string stars_for_p(double p);

// Minimal CSV writer: quotes only when needed, "\n" line ends.
std::string to_csv(const std::vector<std::vector<std::string>>& rows);

}  // namespace ctxbias::report
