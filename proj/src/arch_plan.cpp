#include "ditforge/arch_plan.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace ditforge {

ParamBreakdown count_params(const DitConfig& cfg) {
    cfg.validate();
    const int64_t w = cfg.width;
    const int64_t n = cfg.tokens();
    const int64_t pd = cfg.patch_dim();
    const int64_t k = cfg.num_classes;
    const int64_t m = cfg.mlp_ratio;

    ParamBreakdown b;
    b.depth = cfg.depth;
    b.patch_embed = pd * w + w;
    b.pos_embed = n * w;
    b.timestep_embed = 256 * w + w + w * w + w;
    b.label_embed = (k + 1) * w;
    // qkv: w -> 3w with bias; out: w -> w with bias; mlp: w -> mw -> w with
    // biases; adaln: w -> 6w with bias. Norms are affine-free.
    b.per_block = (3 * w * w + 3 * w) + (w * w + w) + (2 * m * w * w + (m + 1) * w) + (6 * w * w + 6 * w);
    b.final_head = (2 * w * w + 2 * w) + (w * pd + pd);
    b.total = b.components_sum();
    return b;
}

int heads_for_width(int width) {
    if (width < 1) throw DomainError("heads_for_width: width must be >= 1");
    std::vector<int> divs;
    for (int d = 1; d <= width; ++d)
        if (width % d == 0) divs.push_back(d);
    size_t n = divs.size();
    if (n % 2 == 1) return divs[n / 2];
    return std::min(divs[n / 2 - 1], divs[n / 2]);
}

int depth_for_width(int width) {
    if (width < 1) throw DomainError("depth_for_width: width must be >= 1");
    return std::bit_width(static_cast<unsigned>(width)) - 1;
}

std::vector<int> width_candidates(int lo, int hi) {
    if (lo < 1 || hi < lo) throw DomainError("width_candidates: need 1 <= lo <= hi");
    std::vector<int> out;
    for (int64_t base = 1; base <= hi; base <<= 1) {
        if (base >= lo && base <= hi) out.push_back(static_cast<int>(base));
        int64_t tri = 3 * base;
        if (tri >= lo && tri <= hi) out.push_back(static_cast<int>(tri));
    }
    std::sort(out.begin(), out.end());
    return out;
}

PlanResult plan_architecture(const PlanRequest& req) {
    if (req.budget < 1) throw DomainError("plan: budget must be >= 1");
    if (req.width_min < 1 || req.width_max < req.width_min)
        throw DomainError("plan: need 1 <= width_min <= width_max");

    auto config_for = [&](int w, int d) {
        DitConfig cfg;
        cfg.depth = d;
        cfg.width = w;
        cfg.heads = heads_for_width(w);
        cfg.patch = req.patch;
        cfg.image = req.image;
        cfg.in_channels = req.in_channels;
        cfg.num_classes = req.num_classes;
        cfg.mlp_ratio = req.mlp_ratio;
        return cfg;
    };

    std::vector<PlanCandidate> cands;
    int64_t min_achievable = -1;
    for (int w : width_candidates(req.width_min, req.width_max)) {
        ParamBreakdown bd = count_params(config_for(w, 1));
        int64_t per_block = bd.per_block;
        int64_t fixed = bd.total - bd.per_block; // depth-independent part
        if (fixed + per_block > req.budget) {
            int64_t floor_params = fixed + per_block;
            if (min_achievable < 0 || floor_params < min_achievable) min_achievable = floor_params;
            continue;
        }
        int d_budget = static_cast<int>((req.budget - fixed) / per_block);
        int d_rule = depth_for_width(w);
        int d = std::min(d_rule, d_budget);
        if (d < 1) continue;
        PlanCandidate c;
        c.cfg = config_for(w, d);
        c.params = count_params(c.cfg).total;
        c.utilization = static_cast<double>(c.params) / static_cast<double>(req.budget);
        c.deficit = d_rule - d;
        std::ostringstream name;
        name << "w" << w << "d" << d << "h" << c.cfg.heads;
        c.name = name.str();
        std::ostringstream note;
        note << "h=median-divisor(" << w << ")";
        if (d < d_rule)
            note << "; d capped by budget (rule " << d_rule << ")";
        else
            note << "; d=floor(log2 " << w << ")";
        c.note = note.str();
        cands.push_back(std::move(c));
        int64_t floor_params = fixed + per_block;
        if (min_achievable < 0 || floor_params < min_achievable) min_achievable = floor_params;
    }

    if (cands.empty()) {
        std::ostringstream msg;
        msg << "no architecture fits budget " << req.budget << "; smallest achievable in width range ["
            << req.width_min << "," << req.width_max << "] is " << min_achievable << " parameters";
        throw PlanError(msg.str(), min_achievable);
    }

    std::stable_sort(cands.begin(), cands.end(), [](const PlanCandidate& a, const PlanCandidate& b) {
        if (a.utilization != b.utilization) return a.utilization > b.utilization;
        return a.cfg.width < b.cfg.width;
    });
    double best = cands.front().utilization;
    auto in_tier = [&](const PlanCandidate& c) { return best - c.utilization <= 0.05; };
    std::stable_sort(cands.begin(), cands.end(), [&](const PlanCandidate& a, const PlanCandidate& b) {
        bool ta = in_tier(a), tb = in_tier(b);
        if (ta != tb) return ta;
        if (ta && tb) {
            if (a.deficit != b.deficit) return a.deficit < b.deficit;
            if (a.cfg.depth != b.cfg.depth) return a.cfg.depth < b.cfg.depth;
        }
        if (a.utilization != b.utilization) return a.utilization > b.utilization;
        return a.cfg.width < b.cfg.width;
    });

    return PlanResult{std::move(cands)};
}

std::string plan_to_csv(const PlanResult& plan) {
    std::ostringstream os;
    os << "name,d,w,h,params,utilization,deficit\n";
    for (const auto& c : plan.ranked) {
        os << c.name << ',' << c.cfg.depth << ',' << c.cfg.width << ',' << c.cfg.heads << ','
           << c.params << ',';
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.6f", c.utilization);
        os << buf << ',' << c.deficit << '\n';
    }
    return os.str();
}

} // namespace ditforge
