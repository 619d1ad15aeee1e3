#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ditforge/config.hpp"

namespace ditforge {

// One measured design: architecture, size, wall latency and sample quality.
// fid is a lower-is-better distance; inception (higher-is-better) may be
// absent.
struct DesignPoint {
    std::string name;
    DitConfig cfg;
    int64_t params = 0;
    double latency_s = 0.0;
    double fid = 0.0;
    std::optional<double> inception;
};

// Forward cost in multiply-add-counted flops (2 per MAC), N tokens:
//   stem    2 N (p^2 C) w + 2 (256 w + w^2)
//   block   2 N (18 w^2 + 15 w) + 4 N^2 w + 2 N^2 h   [x depth]
//   head    4 w^2 + 2 N w (p^2 C)
// The N^2 h term counts softmax normalization work per attention row.
int64_t count_flops(const DitConfig& cfg);

// Latency surrogate: L = c0 + c1 d + c2 d N w^2 + c3 d N^2 w (+ c4 d h N^2
// when with_heads). Fitted by least squares on column-normalized terms.
struct LatencyModel {
    bool with_heads = false;
    std::array<double, 5> coeff{}; // c0..c4; c4 = 0 unless with_heads
    std::vector<double> residuals;
    double spearman = 0.0;

    double predict(const DitConfig& cfg) const;
};

// Throws FitError naming the deficient terms when the design matrix loses
// rank, and when any fitted point gets a non-positive prediction.
LatencyModel fit_latency(const std::vector<DesignPoint>& points, bool with_heads = false);

// Spearman rank correlation with average ranks for ties.
double spearman_rank(const std::vector<double>& a, const std::vector<double>& b);

// Pareto frontier on (params min, latency min, fid min). Non-strict
// dominance with at least one strict improvement removes a point; exact
// ties survive. Output keeps input order.
std::vector<DesignPoint> pareto_frontier(const std::vector<DesignPoint>& points);

// results CSV: header name,d,w,h,params,latency_s,fid with an optional
// trailing 'is' column for inception.
std::vector<DesignPoint> parse_results_csv(const std::string& text, const std::string& origin);
std::vector<DesignPoint> load_results_csv(const std::string& path);
std::string results_to_csv(const std::vector<DesignPoint>& points);

// Frontier as a gnuplot-ready whitespace table: params latency_s fid name.
std::string frontier_gnuplot_table(const std::vector<DesignPoint>& points);

// Measured design table bundled with the tool (also shipped as
// data/design_points.csv). Latencies are per-image seconds on the reference
// host; fid from 50k samples; inception present for the larger classes.
const std::vector<DesignPoint>& bundled_design_points();
extern const char* const kBundledDesignCsv;

} // namespace ditforge
