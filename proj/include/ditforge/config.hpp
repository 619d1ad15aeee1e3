#pragma once

#include <cstdint>
#include <string>

#include "ditforge/errors.hpp"

namespace ditforge {

// Architecture of one patch-token transformer denoiser. Width must be a
// multiple of heads, the patch size must tile the image exactly.
struct DitConfig {
    int depth = 5;
    int width = 64;
    int heads = 8;
    int patch = 2;
    int image = 32;
    int in_channels = 3;
    int num_classes = 10;
    int mlp_ratio = 4;

    int tokens() const { return (image / patch) * (image / patch); }
    int patch_dim() const { return patch * patch * in_channels; }

    void validate() const {
        if (depth < 1) throw ConfigError("depth must be >= 1, got " + std::to_string(depth));
        if (width < 1) throw ConfigError("width must be >= 1, got " + std::to_string(width));
        if (heads < 1) throw ConfigError("heads must be >= 1, got " + std::to_string(heads));
        if (width % heads != 0)
            throw ConfigError("heads (" + std::to_string(heads) + ") must divide width (" +
                              std::to_string(width) + ")");
        if (patch < 1) throw ConfigError("patch must be >= 1, got " + std::to_string(patch));
        if (image < patch)
            throw ConfigError("image (" + std::to_string(image) + ") must be >= patch (" +
                              std::to_string(patch) + ")");
        if (image % patch != 0)
            throw ConfigError("patch (" + std::to_string(patch) + ") must divide image (" +
                              std::to_string(image) + ")");
        if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
        if (num_classes < 0) throw ConfigError("num_classes must be >= 0");
        if (mlp_ratio < 1) throw ConfigError("mlp_ratio must be >= 1");
    }

    std::string describe() const {
        return "d=" + std::to_string(depth) + " w=" + std::to_string(width) + " h=" +
               std::to_string(heads) + " p=" + std::to_string(patch) + " img=" +
               std::to_string(image) + " c=" + std::to_string(in_channels) + " k=" +
               std::to_string(num_classes) + " mlp=" + std::to_string(mlp_ratio);
    }

    bool operator==(const DitConfig&) const = default;
};

} // namespace ditforge
