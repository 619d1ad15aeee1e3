#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ditforge/model.hpp"
#include "ditforge/tensor.hpp"

namespace ditforge {

// ---- checkpoints (DTCK) ----
// magic 'DTCK', version u32, config record of 8 u32
// (d, w, h, patch, image, in_channels, num_classes, mlp_ratio), then tensor
// records until EOF: name_len u32, name bytes, rank u32, dims u32[rank],
// payload f32 little-endian. Live weights use canonical names; the EMA
// shadow lives under the reserved prefix 'ema/', auxiliary tensors (the
// expansion projection, the EMA decay scalar) under 'aux/'. Writes go to a
// temp file renamed into place; loads re-validate every record against the
// schema before accepting.

struct Checkpoint {
    ModelState<float> model;
    std::optional<EmaState<float>> ema;
    std::map<std::string, Tensor<float>> aux;
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

// ---- single tensors (TNSR) ----
// magic 'TNSR', rank u32, dims u32[rank], payload f32 little-endian.

void save_tensor(const std::string& path, const Tensor<float>& t);
Tensor<float> load_tensor(const std::string& path);

// ---- teacher pairs (DTP1) ----
// magic 'DTP1', version u32, count u64, height u32, width u32, channels u32,
// then count records: class u16 (0xffff = unconditioned), z f32[C*H*W],
// x f32[C*H*W]. Record size is fixed, so the declared count is checked
// against the actual byte length before any record is decoded.

struct TeacherPair {
    int class_id = -1; // -1 = unconditioned
    Tensor<float> z;   // [C,H,W] noise-end latent
    Tensor<float> x;   // [C,H,W] clean target
};

class PairSource {
public:
    virtual ~PairSource() = default;
    virtual int64_t size() const = 0;
    virtual TeacherPair at(int64_t i) const = 0;
    virtual int64_t height() const = 0;
    virtual int64_t width() const = 0;
    virtual int64_t channels() const = 0;
};

void write_teacher_pairs(const std::string& path, const std::vector<TeacherPair>& pairs);

class FilePairSource final : public PairSource {
public:
    explicit FilePairSource(const std::string& path);
    int64_t size() const override { return count_; }
    TeacherPair at(int64_t i) const override;
    int64_t height() const override { return h_; }
    int64_t width() const override { return w_; }
    int64_t channels() const override { return c_; }

private:
    std::vector<unsigned char> payload_; // records only, header stripped
    int64_t count_ = 0, h_ = 0, w_ = 0, c_ = 0;
    std::string path_;
};

std::vector<TeacherPair> load_teacher_pairs(const std::string& path);

} // namespace ditforge
