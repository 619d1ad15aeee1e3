#include "ditforge/metrics.hpp"

#include "ditforge/binio.hpp"

namespace ditforge {

MetricSpec MetricSpec::parse(const std::string& name, int scales, std::string weights) {
    MetricSpec spec;
    spec.scales = scales;
    spec.weights_path = std::move(weights);
    if (name == "l1") {
        spec.kind = MetricKind::L1;
    } else if (name == "l2") {
        spec.kind = MetricKind::L2;
    } else if (name == "pyramid") {
        spec.kind = MetricKind::Pyramid;
    } else if (name == "external") {
        spec.kind = MetricKind::External;
        if (spec.weights_path.empty())
            throw UsageError("metric 'external' needs a weights file");
    } else {
        throw UsageError("unknown metric '" + name + "' (expected l1, l2, pyramid or external)");
    }
    return spec;
}

void FeatureExtractor::validate(int image_channels) const {
    if (layers.empty()) throw FormatError("feature extractor has no layers");
    uint32_t prev = static_cast<uint32_t>(image_channels);
    for (size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        if (l.in_ch != prev)
            throw FormatError("feature extractor layer " + std::to_string(i) + " expects " +
                              std::to_string(l.in_ch) + " input channels, previous stage provides " +
                              std::to_string(prev));
        if (l.ksize < 1 || l.stride < 1)
            throw FormatError("feature extractor layer " + std::to_string(i) + " has degenerate geometry");
        prev = l.out_ch;
    }
}

// DTFX layout: magic, version u32, layer count u32, then per layer
// out u32, in u32, k u32, stride u32, weight f32[out*in*k*k], bias f32[out].
FeatureExtractor load_feature_extractor(const std::string& path) {
    binio::Reader r(path);
    r.magic("DTFX");
    uint32_t version = r.u32("version");
    if (version != 1)
        throw FormatError(path + ": unsupported version " + std::to_string(version), 4);
    uint32_t count = r.u32("layer count");
    if (count == 0 || count > 64)
        throw FormatError(path + ": implausible layer count " + std::to_string(count), 8);
    FeatureExtractor fx;
    for (uint32_t i = 0; i < count; ++i) {
        ConvLayer l;
        l.out_ch = r.u32("out channels");
        l.in_ch = r.u32("in channels");
        l.ksize = r.u32("kernel size");
        l.stride = r.u32("stride");
        binio::check_dims(r, {l.out_ch, l.in_ch, l.ksize, l.ksize});
        if (l.out_ch == 0 || l.in_ch == 0 || l.ksize == 0 || l.stride == 0)
            throw FormatError(path + ": zero dimension in layer " + std::to_string(i),
                              static_cast<long long>(r.offset()));
        l.weight = Tensor<float>({l.out_ch, l.in_ch, l.ksize, l.ksize});
        r.f32(l.weight.data(), static_cast<size_t>(l.weight.numel()), "layer weights");
        l.bias = Tensor<float>({l.out_ch});
        r.f32(l.bias.data(), static_cast<size_t>(l.bias.numel()), "layer bias");
        fx.layers.push_back(std::move(l));
    }
    if (!r.eof())
        throw FormatError(path + ": " + std::to_string(r.remaining()) + " trailing bytes",
                          static_cast<long long>(r.offset()));
    return fx;
}

void save_feature_extractor(const std::string& path, const FeatureExtractor& fx) {
    binio::Writer w;
    w.magic("DTFX");
    w.u32(1);
    w.u32(static_cast<uint32_t>(fx.layers.size()));
    for (const auto& l : fx.layers) {
        w.u32(l.out_ch);
        w.u32(l.in_ch);
        w.u32(l.ksize);
        w.u32(l.stride);
        w.f32(l.weight.data(), static_cast<size_t>(l.weight.numel()));
        w.f32(l.bias.data(), static_cast<size_t>(l.bias.numel()));
    }
    w.commit(path);
}

} // namespace ditforge
