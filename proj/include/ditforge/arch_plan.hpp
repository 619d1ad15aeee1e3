#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ditforge/config.hpp"

namespace ditforge {

// Per-component parameter counts for a DitConfig. per_block counts one block;
// total folds in depth. Counting conventions:
//   patch_embed    (p^2 C) w + w
//   pos_embed      N w                      (learned, one vector per token)
//   timestep_embed 256 w + w + w^2 + w      (two-layer MLP on 256 frequencies)
//   label_embed    (K + 1) w                (one extra null row for no class)
//   per_block      18 w^2 + 15 w            (qkv 3w^2+3w, out w^2+w,
//                                            mlp 8w^2+5w, adaln 6w^2+6w;
//                                            layer norms carry no affine)
//   final_head     2 w^2 + 2 w + w p^2 C + p^2 C
struct ParamBreakdown {
    int64_t patch_embed = 0;
    int64_t pos_embed = 0;
    int64_t timestep_embed = 0;
    int64_t label_embed = 0;
    int64_t per_block = 0;
    int64_t final_head = 0;
    int depth = 0;
    int64_t total = 0;

    int64_t components_sum() const {
        return patch_embed + pos_embed + timestep_embed + label_embed +
               static_cast<int64_t>(depth) * per_block + final_head;
    }
};

ParamBreakdown count_params(const DitConfig& cfg);

// Heads for a width: sort the divisors of w ascending, take the median set
// (both middle elements when the count is even), return its minimum.
int heads_for_width(int width);

// Depth for a width: floor(log2 w).
int depth_for_width(int width);

// All widths of the form 2^n or 3*2^n inside [lo, hi], ascending.
std::vector<int> width_candidates(int lo, int hi);

struct PlanCandidate {
    std::string name;
    DitConfig cfg;
    int64_t params = 0;
    double utilization = 0.0; // params / budget
    int deficit = 0;          // depth_for_width(w) - chosen depth, >= 0
    std::string note;
};

struct PlanRequest {
    int64_t budget = 0;
    int width_min = 16;
    int width_max = 512;
    int patch = 2;
    int image = 32;
    int in_channels = 3;
    int num_classes = 10;
    int mlp_ratio = 4;
};

// One candidate per feasible width: heads from heads_for_width, depth the
// smaller of depth_for_width and the largest depth fitting the budget.
// Ranking: utilization descending; candidates within 5 percentage points of
// the best form a tier ordered by (deficit asc, depth asc); remaining ties
// fall back to utilization desc then width asc. Throws PlanError carrying the
// smallest achievable parameter count when nothing fits.
struct PlanResult {
    std::vector<PlanCandidate> ranked;
    const PlanCandidate& recommendation() const { return ranked.front(); }
};

PlanResult plan_architecture(const PlanRequest& req);

// CSV with header name,d,w,h,params,utilization,deficit.
std::string plan_to_csv(const PlanResult& plan);

} // namespace ditforge
