#include "ditforge/io.hpp"

#include <algorithm>
#include <cstring>

#include "ditforge/binio.hpp"

namespace ditforge {

namespace {

void write_tensor_record(binio::Writer& w, const std::string& name, const Tensor<float>& t) {
    w.u32(static_cast<uint32_t>(name.size()));
    w.str(name);
    w.u32(static_cast<uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) w.u32(static_cast<uint32_t>(t.dim(i)));
    w.f32(t.data(), static_cast<size_t>(t.numel()));
}

Tensor<float> read_tensor_payload(binio::Reader& r) {
    uint32_t rank = r.u32("tensor rank");
    if (rank > binio::kMaxRank)
        throw FormatError(r.path() + ": rank " + std::to_string(rank) + " exceeds limit " +
                              std::to_string(binio::kMaxRank),
                          static_cast<long long>(r.offset()) - 4);
    std::vector<uint32_t> dims(rank);
    for (uint32_t i = 0; i < rank; ++i) dims[i] = r.u32("tensor dim");
    binio::check_dims(r, dims);
    std::vector<int64_t> shape(dims.begin(), dims.end());
    Tensor<float> t(shape);
    r.f32(t.data(), static_cast<size_t>(t.numel()), "tensor payload");
    return t;
}

std::pair<std::string, Tensor<float>> read_tensor_record(binio::Reader& r) {
    uint32_t name_len = r.u32("name length");
    if (name_len == 0 || name_len > binio::kMaxNameLen)
        throw FormatError(r.path() + ": implausible name length " + std::to_string(name_len),
                          static_cast<long long>(r.offset()) - 4);
    std::string name = r.str(name_len, "tensor name");
    return {std::move(name), read_tensor_payload(r)};
}

} // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    ck.model.cfg.validate();
    binio::Writer w;
    w.magic("DTCK");
    w.u32(1);
    const DitConfig& c = ck.model.cfg;
    for (int v : {c.depth, c.width, c.heads, c.patch, c.image, c.in_channels, c.num_classes, c.mlp_ratio})
        w.u32(static_cast<uint32_t>(v));

    auto schema = weight_schema(c);
    for (const auto& [name, shape] : schema) {
        auto it = ck.model.weights.find(name);
        if (it == ck.model.weights.end()) throw StateError("checkpoint save: missing weight " + name);
        if (it->second.shape() != shape)
            throw StateError("checkpoint save: " + name + " has shape " + it->second.shape_str());
        write_tensor_record(w, name, it->second);
    }
    if (ck.ema) {
        for (const auto& [name, shape] : schema) {
            auto it = ck.ema->shadow.find(name);
            if (it == ck.ema->shadow.end()) throw StateError("checkpoint save: EMA missing " + name);
            write_tensor_record(w, "ema/" + name, it->second);
        }
    }
    std::map<std::string, Tensor<float>> aux = ck.aux;
    if (ck.ema && !aux.count("ema_decay")) {
        Tensor<float> d({1});
        d[0] = static_cast<float>(ck.ema->decay);
        aux["ema_decay"] = d;
    }
    for (const auto& [name, t] : aux) write_tensor_record(w, "aux/" + name, t);
    w.commit(path);
}

Checkpoint load_checkpoint(const std::string& path) {
    binio::Reader r(path);
    r.magic("DTCK");
    uint32_t version = r.u32("version");
    if (version != 1) throw FormatError(path + ": unsupported version " + std::to_string(version), 4);

    DitConfig c;
    c.depth = static_cast<int>(r.u32("depth"));
    c.width = static_cast<int>(r.u32("width"));
    c.heads = static_cast<int>(r.u32("heads"));
    c.patch = static_cast<int>(r.u32("patch"));
    c.image = static_cast<int>(r.u32("image"));
    c.in_channels = static_cast<int>(r.u32("in_channels"));
    c.num_classes = static_cast<int>(r.u32("num_classes"));
    c.mlp_ratio = static_cast<int>(r.u32("mlp_ratio"));
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw FormatError(path + ": invalid config record: " + e.what(), 8);
    }

    std::map<std::string, Tensor<float>> live, ema, aux;
    while (!r.eof()) {
        auto [name, t] = read_tensor_record(r);
        if (name.starts_with("ema/")) {
            if (!ema.emplace(name.substr(4), std::move(t)).second)
                throw FormatError(path + ": duplicate tensor " + name);
        } else if (name.starts_with("aux/")) {
            if (!aux.emplace(name.substr(4), std::move(t)).second)
                throw FormatError(path + ": duplicate tensor " + name);
        } else {
            if (!live.emplace(std::move(name), std::move(t)).second)
                throw FormatError(path + ": duplicate live tensor");
        }
    }

    auto check_against_schema = [&](const std::map<std::string, Tensor<float>>& got, const char* what) {
        auto schema = weight_schema(c);
        if (got.size() != schema.size())
            throw FormatError(path + ": " + what + " holds " + std::to_string(got.size()) +
                              " tensors, schema needs " + std::to_string(schema.size()));
        for (const auto& [name, shape] : schema) {
            auto it = got.find(name);
            if (it == got.end()) throw FormatError(path + ": " + what + " lacks tensor " + name);
            if (it->second.shape() != shape)
                throw FormatError(path + ": " + what + " tensor " + name + " has shape " +
                                  it->second.shape_str());
        }
    };
    check_against_schema(live, "weight set");

    Checkpoint ck;
    ck.model.cfg = c;
    ck.model.weights = std::move(live);
    if (!ema.empty()) {
        check_against_schema(ema, "EMA shadow");
        EmaState<float> e;
        e.shadow = std::move(ema);
        auto it = aux.find("ema_decay");
        if (it != aux.end() && it->second.numel() == 1) e.decay = static_cast<double>(it->second[0]);
        ck.ema = std::move(e);
    }
    ck.aux = std::move(aux);
    return ck;
}

void save_tensor(const std::string& path, const Tensor<float>& t) {
    binio::Writer w;
    w.magic("TNSR");
    w.u32(static_cast<uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) w.u32(static_cast<uint32_t>(t.dim(i)));
    w.f32(t.data(), static_cast<size_t>(t.numel()));
    w.commit(path);
}

Tensor<float> load_tensor(const std::string& path) {
    binio::Reader r(path);
    r.magic("TNSR");
    Tensor<float> t = read_tensor_payload(r);
    if (!r.eof())
        throw FormatError(path + ": " + std::to_string(r.remaining()) + " trailing bytes",
                          static_cast<long long>(r.offset()));
    return t;
}

void write_teacher_pairs(const std::string& path, const std::vector<TeacherPair>& pairs) {
    if (pairs.empty()) throw StateError("write_teacher_pairs: empty pair list");
    const auto& shape = pairs.front().z.shape();
    if (shape.size() != 3) throw ShapeError("teacher pairs must hold [C,H,W] tensors");
    binio::Writer w;
    w.magic("DTP1");
    w.u32(1);
    w.u64(static_cast<uint64_t>(pairs.size()));
    w.u32(static_cast<uint32_t>(shape[1]));
    w.u32(static_cast<uint32_t>(shape[2]));
    w.u32(static_cast<uint32_t>(shape[0]));
    for (const auto& p : pairs) {
        if (p.z.shape() != shape || p.x.shape() != shape)
            throw ShapeError("teacher pair geometry drift inside one file");
        w.u16(p.class_id < 0 ? uint16_t(0xffff) : static_cast<uint16_t>(p.class_id));
        w.f32(p.z.data(), static_cast<size_t>(p.z.numel()));
        w.f32(p.x.data(), static_cast<size_t>(p.x.numel()));
    }
    w.commit(path);
}

FilePairSource::FilePairSource(const std::string& path) : path_(path) {
    binio::Reader r(path);
    r.magic("DTP1");
    uint32_t version = r.u32("version");
    if (version != 1) throw FormatError(path + ": unsupported version " + std::to_string(version), 4);
    uint64_t count = r.u64("pair count");
    uint32_t h = r.u32("height");
    uint32_t w = r.u32("width");
    uint32_t c = r.u32("channels");
    binio::check_dims(r, {c, h, w});
    if (h == 0 || w == 0 || c == 0) throw FormatError(path + ": zero image dimension", 16);
    uint64_t elems = static_cast<uint64_t>(c) * h * w;
    uint64_t record = 2 + 2 * elems * 4;
    uint64_t actual = r.remaining() / record;
    if (r.remaining() % record != 0 || actual != count)
        throw FormatError(path + ": header declares " + std::to_string(count) +
                              " pairs but payload holds " + std::to_string(actual) +
                              (r.remaining() % record ? " plus a partial record" : ""),
                          static_cast<long long>(r.offset()));
    if (count == 0) throw FormatError(path + ": empty pair file", 8);
    h_ = h;
    w_ = w;
    c_ = c;
    count_ = static_cast<int64_t>(count);
    payload_.assign(r.remaining(), 0);
    std::string body = r.str(r.remaining(), "pair records");
    std::memcpy(payload_.data(), body.data(), body.size());
}

TeacherPair FilePairSource::at(int64_t i) const {
    if (i < 0 || i >= count_) throw StateError("pair index out of range");
    const uint64_t elems = static_cast<uint64_t>(c_) * h_ * w_;
    const uint64_t record = 2 + 2 * elems * 4;
    const unsigned char* p = payload_.data() + static_cast<size_t>(i) * record;
    TeacherPair out;
    uint16_t cls;
    std::memcpy(&cls, p, 2);
    out.class_id = cls == 0xffff ? -1 : static_cast<int>(cls);
    out.z = Tensor<float>({c_, h_, w_});
    out.x = Tensor<float>({c_, h_, w_});
    std::memcpy(out.z.data(), p + 2, elems * 4);
    std::memcpy(out.x.data(), p + 2 + elems * 4, elems * 4);
    return out;
}

std::vector<TeacherPair> load_teacher_pairs(const std::string& path) {
    FilePairSource src(path);
    std::vector<TeacherPair> out;
    out.reserve(static_cast<size_t>(src.size()));
    for (int64_t i = 0; i < src.size(); ++i) out.push_back(src.at(i));
    return out;
}

} // namespace ditforge
