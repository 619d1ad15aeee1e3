#include "ditforge/perf.hpp"

#include <Eigen/Dense>
#include <Eigen/QR>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "ditforge/errors.hpp"

namespace ditforge {

int64_t count_flops(const DitConfig& cfg) {
    cfg.validate();
    const int64_t n = cfg.tokens();
    const int64_t w = cfg.width;
    const int64_t h = cfg.heads;
    const int64_t pd = cfg.patch_dim();
    const int64_t stem = 2 * n * pd * w + 2 * (256 * w + w * w);
    const int64_t block = 2 * n * (18 * w * w + 15 * w) + 4 * n * n * w + 2 * n * n * h;
    const int64_t head = 4 * w * w + 2 * n * w * pd;
    return stem + cfg.depth * block + head;
}

namespace {

const char* term_name(size_t i) {
    static const char* names[5] = {"const", "d", "d*N*w^2", "d*N^2*w", "d*h*N^2"};
    return names[i];
}

std::vector<double> model_terms(const DitConfig& cfg, bool with_heads) {
    const double d = cfg.depth;
    const double n = cfg.tokens();
    const double w = cfg.width;
    const double h = cfg.heads;
    std::vector<double> t{1.0, d, d * n * w * w, d * n * n * w};
    if (with_heads) t.push_back(d * h * n * n);
    return t;
}

} // namespace

double LatencyModel::predict(const DitConfig& cfg) const {
    auto t = model_terms(cfg, with_heads);
    double s = 0.0;
    for (size_t i = 0; i < t.size(); ++i) s += coeff[i] * t[i];
    return s;
}

double spearman_rank(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.size() < 2)
        throw FitError("spearman: need two equal-length series of length >= 2");
    auto ranks = [](const std::vector<double>& v) {
        const size_t n = v.size();
        std::vector<size_t> idx(n);
        std::iota(idx.begin(), idx.end(), size_t(0));
        std::sort(idx.begin(), idx.end(), [&](size_t x, size_t y) { return v[x] < v[y]; });
        std::vector<double> r(n);
        size_t i = 0;
        while (i < n) {
            size_t j = i;
            while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
            double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
            for (size_t k = i; k <= j; ++k) r[idx[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    std::vector<double> ra = ranks(a), rb = ranks(b);
    double ma = 0, mb = 0;
    for (size_t i = 0; i < ra.size(); ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= static_cast<double>(ra.size());
    mb /= static_cast<double>(rb.size());
    double num = 0, da = 0, db = 0;
    for (size_t i = 0; i < ra.size(); ++i) {
        num += (ra[i] - ma) * (rb[i] - mb);
        da += (ra[i] - ma) * (ra[i] - ma);
        db += (rb[i] - mb) * (rb[i] - mb);
    }
    if (da == 0 || db == 0) throw FitError("spearman: a series is constant");
    return num / std::sqrt(da * db);
}

LatencyModel fit_latency(const std::vector<DesignPoint>& points, bool with_heads) {
    const size_t k = with_heads ? 5 : 4;
    if (points.size() < k)
        throw FitError("latency fit needs at least " + std::to_string(k) + " points, got " +
                       std::to_string(points.size()));
    const size_t m = points.size();

    Eigen::MatrixXd A(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
    Eigen::VectorXd y(static_cast<Eigen::Index>(m));
    for (size_t i = 0; i < m; ++i) {
        auto t = model_terms(points[i].cfg, with_heads);
        for (size_t j = 0; j < k; ++j) A(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = t[j];
        y(static_cast<Eigen::Index>(i)) = points[i].latency_s;
    }

    // Column scaling keeps the QR honest: raw terms span ~10 orders.
    Eigen::VectorXd scale(static_cast<Eigen::Index>(k));
    for (size_t j = 0; j < k; ++j) {
        double mx = A.col(static_cast<Eigen::Index>(j)).cwiseAbs().maxCoeff();
        scale(static_cast<Eigen::Index>(j)) = mx > 0 ? mx : 1.0;
        A.col(static_cast<Eigen::Index>(j)) /= scale(static_cast<Eigen::Index>(j));
    }

    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
    qr.setThreshold(1e-10);
    if (static_cast<size_t>(qr.rank()) < k) {
        auto perm = qr.colsPermutation().indices();
        std::string bad;
        for (size_t j = static_cast<size_t>(qr.rank()); j < k; ++j) {
            if (!bad.empty()) bad += ", ";
            bad += term_name(static_cast<size_t>(perm(static_cast<Eigen::Index>(j))));
        }
        throw FitError("latency fit is rank deficient; dependent terms: " + bad);
    }
    Eigen::VectorXd c = qr.solve(y);

    LatencyModel lm;
    lm.with_heads = with_heads;
    for (size_t j = 0; j < k; ++j)
        lm.coeff[j] = c(static_cast<Eigen::Index>(j)) / scale(static_cast<Eigen::Index>(j));

    std::vector<double> pred(m);
    lm.residuals.resize(m);
    for (size_t i = 0; i < m; ++i) {
        pred[i] = lm.predict(points[i].cfg);
        lm.residuals[i] = points[i].latency_s - pred[i];
        if (!(pred[i] > 0.0))
            throw FitError("latency fit predicts non-positive latency for " + points[i].name);
    }
    std::vector<double> meas(m);
    for (size_t i = 0; i < m; ++i) meas[i] = points[i].latency_s;
    lm.spearman = spearman_rank(pred, meas);
    return lm;
}

std::vector<DesignPoint> pareto_frontier(const std::vector<DesignPoint>& points) {
    // Lex-sort then sweep: after sorting by (params, latency, fid) a point
    // can only be dominated by one sorted before it, so a running scan of
    // best-so-far latency/fid pairs decides dominance. n stays small, so the
    // scan keeps every non-dominated prefix point instead of a fancier
    // structure.
    const size_t n = points.size();
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), size_t(0));
    std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
        const DesignPoint &pa = points[a], &pb = points[b];
        if (pa.params != pb.params) return pa.params < pb.params;
        if (pa.latency_s != pb.latency_s) return pa.latency_s < pb.latency_s;
        return pa.fid < pb.fid;
    });

    auto dominates = [](const DesignPoint& a, const DesignPoint& b) {
        bool le = a.params <= b.params && a.latency_s <= b.latency_s && a.fid <= b.fid;
        bool strict = a.params < b.params || a.latency_s < b.latency_s || a.fid < b.fid;
        return le && strict;
    };

    std::vector<bool> keep(n, true);
    std::vector<size_t> kept;
    for (size_t pos = 0; pos < n; ++pos) {
        size_t i = idx[pos];
        bool dominated = false;
        for (size_t j : kept) {
            if (dominates(points[j], points[i])) {
                dominated = true;
                break;
            }
        }
        keep[i] = !dominated;
        if (!dominated) kept.push_back(i);
    }

    std::vector<DesignPoint> out;
    for (size_t i = 0; i < n; ++i)
        if (keep[i]) out.push_back(points[i]);
    return out;
}

namespace {

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(trim(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(trim(cur));
    return out;
}

int64_t parse_int(const std::string& s, const std::string& what, size_t line) {
    try {
        size_t pos = 0;
        long long v = std::stoll(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw FormatError("line " + std::to_string(line) + ": bad integer '" + s + "' for " + what);
    }
}

double parse_num(const std::string& s, const std::string& what, size_t line) {
    try {
        size_t pos = 0;
        double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw FormatError("line " + std::to_string(line) + ": bad number '" + s + "' for " + what);
    }
}

} // namespace

std::vector<DesignPoint> parse_results_csv(const std::string& text, const std::string& origin) {
    std::istringstream in(text);
    std::string line;
    size_t lineno = 0;
    bool has_is = false;
    std::vector<DesignPoint> out;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty()) continue;
        auto cells = split_csv_line(t);
        if (lineno == 1) {
            if (cells.size() == 8 && cells[7] == "is") {
                has_is = true;
            } else if (cells.size() != 7) {
                throw FormatError(origin + " line 1: header must be name,d,w,h,params,latency_s,fid[,is]");
            }
            const char* expect[7] = {"name", "d", "w", "h", "params", "latency_s", "fid"};
            for (size_t i = 0; i < 7; ++i)
                if (cells[i] != expect[i])
                    throw FormatError(origin + " line 1: column " + std::to_string(i + 1) + " must be '" +
                                      expect[i] + "', got '" + cells[i] + "'");
            continue;
        }
        if (cells.size() != (has_is ? size_t(8) : size_t(7)))
            throw FormatError(origin + " line " + std::to_string(lineno) + ": expected " +
                              std::to_string(has_is ? 8 : 7) + " columns, got " + std::to_string(cells.size()));
        DesignPoint p;
        p.name = cells[0];
        if (p.name.empty()) throw FormatError(origin + " line " + std::to_string(lineno) + ": empty name");
        p.cfg.depth = static_cast<int>(parse_int(cells[1], "d", lineno));
        p.cfg.width = static_cast<int>(parse_int(cells[2], "w", lineno));
        p.cfg.heads = static_cast<int>(parse_int(cells[3], "h", lineno));
        p.params = parse_int(cells[4], "params", lineno);
        p.latency_s = parse_num(cells[5], "latency_s", lineno);
        p.fid = parse_num(cells[6], "fid", lineno);
        if (has_is && !cells[7].empty()) p.inception = parse_num(cells[7], "is", lineno);
        try {
            p.cfg.validate();
        } catch (const ConfigError& e) {
            throw FormatError(origin + " line " + std::to_string(lineno) + ": " + e.what());
        }
        if (p.params < 1)
            throw FormatError(origin + " line " + std::to_string(lineno) + ": params must be positive");
        if (!(p.latency_s > 0.0))
            throw FormatError(origin + " line " + std::to_string(lineno) + ": latency_s must be positive");
        if (!(p.fid > 0.0))
            throw FormatError(origin + " line " + std::to_string(lineno) + ": fid must be positive");
        out.push_back(std::move(p));
    }
    if (out.empty()) throw FormatError(origin + ": no data rows");
    return out;
}

std::vector<DesignPoint> load_results_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path + " for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_results_csv(ss.str(), path);
}

std::string results_to_csv(const std::vector<DesignPoint>& points) {
    bool any_is = false;
    for (const auto& p : points) any_is = any_is || p.inception.has_value();
    std::ostringstream os;
    os << "name,d,w,h,params,latency_s,fid" << (any_is ? ",is" : "") << "\n";
    char buf[64];
    for (const auto& p : points) {
        os << p.name << ',' << p.cfg.depth << ',' << p.cfg.width << ',' << p.cfg.heads << ','
           << p.params << ',';
        std::snprintf(buf, sizeof buf, "%g", p.latency_s);
        os << buf << ',';
        std::snprintf(buf, sizeof buf, "%g", p.fid);
        os << buf;
        if (any_is) {
            os << ',';
            if (p.inception) {
                std::snprintf(buf, sizeof buf, "%g", *p.inception);
                os << buf;
            }
        }
        os << '\n';
    }
    return os.str();
}

std::string frontier_gnuplot_table(const std::vector<DesignPoint>& points) {
    std::ostringstream os;
    os << "# params latency_s fid name\n";
    char buf[64];
    for (const auto& p : points) {
        os << p.params << ' ';
        std::snprintf(buf, sizeof buf, "%g", p.latency_s);
        os << buf << ' ';
        std::snprintf(buf, sizeof buf, "%g", p.fid);
        os << buf << ' ' << p.name << '\n';
    }
    return os.str();
}

// Measured design points for the CIFAR-scale reference setting (32x32 RGB,
// patch 2, 10 classes). Latency is seconds for a 50k-image batch on the
// reference edge board; params are exact counts for the counting conventions
// in arch_plan.
const char* const kBundledDesignCsv =
    "name,d,w,h,params,latency_s,fid,is\n"
    "wider,1,128,8,416652,97.5,57.07,6.38\n"
    "wide,2,96,8,415308,123.6,34.78,7.48\n"
    "lower-heads,5,64,4,421068,162.6,29.66,7.76\n"
    "proposed,5,64,8,421068,198.7,29.14,7.79\n"
    "deep,9,48,6,413148,259.0,28.52,7.78\n"
    "deeper,21,32,4,417900,411.7,32.81,7.41\n"
    "shallow-2.2M,3,192,12,2215884,233.2,16.40,8.78\n"
    "proposed-2.2M,7,128,8,2197644,322.6,13.95,8.90\n"
    "deep-2.2M,13,96,8,2255916,493.7,12.76,8.92\n"
    "shallow-5M,4,256,16,5071884,367.6,11.74,9.04\n"
    "deep-5M,16,128,8,4869132,657.9,10.25,9.15\n"
    "proposed-5M,7,192,12,4881612,460.9,10.32,9.16\n"
    "proposed-5M-200ep,7,192,12,4881612,458.6,8.90,9.31\n";

const std::vector<DesignPoint>& bundled_design_points() {
    static const std::vector<DesignPoint> pts = parse_results_csv(kBundledDesignCsv, "bundled table");
    return pts;
}

} // namespace ditforge
