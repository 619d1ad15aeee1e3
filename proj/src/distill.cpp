#include "ditforge/distill.hpp"

#include <cstdio>
#include <sstream>

namespace ditforge {

std::string curve_to_csv(const std::vector<CurvePoint>& curve) {
    std::ostringstream os;
    os << "step,loss,ema_loss\n";
    char buf[64];
    for (const auto& p : curve) {
        os << p.step << ',';
        std::snprintf(buf, sizeof buf, "%.9g", p.loss);
        os << buf << ',';
        std::snprintf(buf, sizeof buf, "%.9g", p.ema_loss);
        os << buf << '\n';
    }
    return os.str();
}

} // namespace ditforge
