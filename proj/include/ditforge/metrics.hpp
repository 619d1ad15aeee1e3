#pragma once

#include <memory>
#include <string>
#include <vector>

#include "ditforge/tape.hpp"
#include "ditforge/tensor.hpp"

namespace ditforge {

enum class MetricKind { L1, L2, Pyramid, External };

struct MetricSpec {
    MetricKind kind = MetricKind::Pyramid;
    int scales = 3;              // pyramid only
    std::string weights_path;    // external only

    static MetricSpec parse(const std::string& name, int scales = 3, std::string weights = {});
};

// Fixed-weight convolutional feature extractor backing the external metric.
// Layers are stride-s zero-padded convolutions followed by relu; the distance
// is the sum of per-layer mean-square feature differences. Weights are data,
// not parameters: gradients flow to the compared images only.
struct ConvLayer {
    uint32_t out_ch = 0, in_ch = 0, ksize = 0, stride = 1;
    Tensor<float> weight; // [out, in, k, k]
    Tensor<float> bias;   // [out]
};

struct FeatureExtractor {
    std::vector<ConvLayer> layers;
    void validate(int image_channels) const;
};

FeatureExtractor load_feature_extractor(const std::string& path);
void save_feature_extractor(const std::string& path, const FeatureExtractor& fx);

// A distance metric builds a scalar node d(a, b) on a tape. All metrics
// satisfy d(x, x) = 0, d(a, b) = d(b, a) >= 0 by construction.
template <typename T>
class DistanceMetric {
public:
    virtual ~DistanceMetric() = default;
    virtual Var<T> build(Tape<T>& t, Var<T> a, Var<T> b) const = 0;

    T eval(const Tensor<T>& a, const Tensor<T>& b) const {
        Tape<T> t;
        return t.val(build(t, t.constant(a), t.constant(b)))[0];
    }
};

template <typename T>
class L1Metric final : public DistanceMetric<T> {
public:
    Var<T> build(Tape<T>& t, Var<T> a, Var<T> b) const override {
        return mean_all(t, abs_val(t, sub(t, a, b)));
    }
};

template <typename T>
class L2Metric final : public DistanceMetric<T> {
public:
    Var<T> build(Tape<T>& t, Var<T> a, Var<T> b) const override {
        return mean_all(t, square(t, sub(t, a, b)));
    }
};

namespace metric_detail {

// 5x5 binomial blur as a depthwise fixed conv, zero padded.
template <typename T>
Var<T> binomial_blur(Tape<T>& t, Var<T> img) {
    const int64_t C = t.val(img).dim(0);
    static const double k1[5] = {1, 4, 6, 4, 1};
    Tensor<T> kernel({C, C, 5, 5});
    for (int64_t c = 0; c < C; ++c)
        for (int64_t y = 0; y < 5; ++y)
            for (int64_t x = 0; x < 5; ++x)
                kernel[((c * C + c) * 5 + y) * 5 + x] = static_cast<T>(k1[y] * k1[x] / 256.0);
    return conv2d_fixed(t, img, std::move(kernel), Tensor<T>({C}), 1, 2);
}

} // namespace metric_detail

// Sum over pyramid levels of mean-square difference. Level 0 compares the
// raw images; each next level blurs then halves both. Levels stop early if
// the spatial extent cannot be halved again.
template <typename T>
class PyramidMetric final : public DistanceMetric<T> {
public:
    explicit PyramidMetric(int scales) : scales_(scales) {
        if (scales < 1) throw ConfigError("pyramid metric: scales must be >= 1");
    }

    Var<T> build(Tape<T>& t, Var<T> a, Var<T> b) const override {
        Var<T> total = mean_all(t, square(t, sub(t, a, b)));
        for (int s = 1; s < scales_; ++s) {
            const auto& shape = t.val(a).shape();
            if (shape[1] < 2 || shape[2] < 2 || shape[1] % 2 || shape[2] % 2) break;
            a = avgpool2(t, metric_detail::binomial_blur(t, a));
            b = avgpool2(t, metric_detail::binomial_blur(t, b));
            total = add(t, total, mean_all(t, square(t, sub(t, a, b))));
        }
        return total;
    }

private:
    int scales_;
};

template <typename T>
class ExternalMetric final : public DistanceMetric<T> {
public:
    explicit ExternalMetric(FeatureExtractor fx) : fx_(std::move(fx)) {}

    Var<T> build(Tape<T>& t, Var<T> a, Var<T> b) const override {
        fx_.validate(static_cast<int>(t.val(a).dim(0)));
        Var<T> total{};
        for (const auto& layer : fx_.layers) {
            int pad = static_cast<int>(layer.ksize) / 2;
            a = relu(t, conv2d_fixed(t, a, layer.weight.template cast<T>(), layer.bias.template cast<T>(),
                                     static_cast<int>(layer.stride), pad));
            b = relu(t, conv2d_fixed(t, b, layer.weight.template cast<T>(), layer.bias.template cast<T>(),
                                     static_cast<int>(layer.stride), pad));
            Var<T> term = mean_all(t, square(t, sub(t, a, b)));
            total = total.valid() ? add(t, total, term) : term;
        }
        return total;
    }

private:
    FeatureExtractor fx_;
};

template <typename T>
std::unique_ptr<DistanceMetric<T>> make_metric(const MetricSpec& spec) {
    switch (spec.kind) {
        case MetricKind::L1: return std::make_unique<L1Metric<T>>();
        case MetricKind::L2: return std::make_unique<L2Metric<T>>();
        case MetricKind::Pyramid: return std::make_unique<PyramidMetric<T>>(spec.scales);
        case MetricKind::External:
            return std::make_unique<ExternalMetric<T>>(load_feature_extractor(spec.weights_path));
    }
    throw ConfigError("unknown metric kind");
}

} // namespace ditforge
