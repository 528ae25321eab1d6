#include <sstream>

#include "exitrf/common.hpp"
#include "exitrf/cvnn.hpp"

namespace exitrf::cvnn {

namespace {

constexpr std::string_view kMagic = "EXCV";
constexpr std::uint16_t kVersion = 1;

std::string dims_str(const std::vector<int>& d) {
    std::string s = "[";
    for (std::size_t i = 0; i < d.size(); ++i) s += (i ? "x" : "") + std::to_string(d[i]);
    return s + "]";
}

void write_config(ByteWriter& w, const ModelConfig& c) {
    w.u32(static_cast<std::uint32_t>(c.num_classes));
    w.u32(static_cast<std::uint32_t>(c.input_h));
    w.u32(static_cast<std::uint32_t>(c.input_w));
    w.u32(static_cast<std::uint32_t>(c.width_scale));
    w.u32(static_cast<std::uint32_t>(c.base_channels));
    w.u32(static_cast<std::uint32_t>(c.stem_kernel));
    w.u32(static_cast<std::uint32_t>(c.stem_stride));
    w.u64(c.seed);
}

ModelConfig read_config(ByteReader& r) {
    ModelConfig c;
    c.num_classes = static_cast<int>(r.u32());
    c.input_h = static_cast<int>(r.u32());
    c.input_w = static_cast<int>(r.u32());
    c.width_scale = static_cast<int>(r.u32());
    c.base_channels = static_cast<int>(r.u32());
    c.stem_kernel = static_cast<int>(r.u32());
    c.stem_stride = static_cast<int>(r.u32());
    c.seed = r.u64();
    return c;
}

CvnnModel decode_into(ByteReader& r, const ModelConfig& target) {
    CvnnModel model = [&] {
        try {
            return CvnnModel(target);
        } catch (const std::invalid_argument& e) {
            throw FormatError(FormatErrorKind::Parse, std::string("model config: ") + e.what());
        }
    }();
    auto params = model.params();
    const std::uint32_t np = r.u32();
    if (np != params.size()) {
        throw FormatError(FormatErrorKind::Shape, "model has " + std::to_string(params.size()) +
                                                      " parameter tensors, file has " + std::to_string(np));
    }
    for (Param* p : params) {
        const std::string name = r.str();
        const std::uint32_t nd = r.u32();
        if (nd > 8) throw FormatError(FormatErrorKind::Parse, "layer " + name + ": implausible rank");
        std::vector<int> dims(nd);
        for (auto& d : dims) d = static_cast<int>(r.u32());
        if (name != p->name || dims != p->dims) {
            throw FormatError(FormatErrorKind::Shape, "layer " + p->name + ": model expects " + dims_str(p->dims) +
                                                          ", file has " + name + " " + dims_str(dims));
        }
        r.f64s(p->value);
    }
    auto buffers = model.buffers();
    const std::uint32_t nb = r.u32();
    if (nb != buffers.size()) throw FormatError(FormatErrorKind::Shape, "running-statistics count mismatch");
    for (auto& [bname, buf] : buffers) {
        const std::string name = r.str();
        const std::uint32_t len = r.u32();
        if (name != bname || len != buf->size()) {
            throw FormatError(FormatErrorKind::Shape, "buffer " + bname + ": expected " + std::to_string(buf->size()) +
                                                          " values, file has " + name + " with " + std::to_string(len));
        }
        r.f64s(*buf);
    }
    // FLOPs metadata is informational; it is recomputed from the config.
    const std::uint32_t nl = r.u32();
    for (std::uint32_t i = 0; i < nl; ++i) {
        (void)r.str();
        (void)r.u32();
        (void)r.u64();
    }
    if (r.remaining() != 0) throw FormatError(FormatErrorKind::Parse, "model: trailing bytes");
    return model;
}

}  // namespace

std::vector<std::uint8_t> model_encode(CvnnModel& model) {
    ByteWriter w;
    for (char ch : kMagic) w.u8(static_cast<std::uint8_t>(ch));
    w.u16(kVersion);
    write_config(w, model.config());
    auto params = model.params();
    w.u32(static_cast<std::uint32_t>(params.size()));
    for (const Param* p : params) {
        w.str(p->name);
        w.u32(static_cast<std::uint32_t>(p->dims.size()));
        for (int d : p->dims) w.u32(static_cast<std::uint32_t>(d));
        w.f64s(p->value);
    }
    auto buffers = model.buffers();
    w.u32(static_cast<std::uint32_t>(buffers.size()));
    for (const auto& [name, buf] : buffers) {
        w.str(name);
        w.u32(static_cast<std::uint32_t>(buf->size()));
        w.f64s(*buf);
    }
    const auto costs = model.layer_flops();
    w.u32(static_cast<std::uint32_t>(costs.size()));
    for (const auto& c : costs) {
        w.str(c.name);
        w.u32(static_cast<std::uint32_t>(c.stage));
        w.u64(c.flops);
    }
    append_crc(w);
    return std::move(w.data());
}

CvnnModel model_decode(std::span<const std::uint8_t> bytes) {
    ByteReader r = open_checked(bytes, kMagic, kVersion, "model");
    const ModelConfig cfg = read_config(r);
    return decode_into(r, cfg);
}

CvnnModel model_decode(std::span<const std::uint8_t> bytes, const ModelConfig& expected) {
    ByteReader r = open_checked(bytes, kMagic, kVersion, "model");
    (void)read_config(r);
    return decode_into(r, expected);
}

void save_model(CvnnModel& model, const std::filesystem::path& path) {
    write_file_atomic(path, model_encode(model));
}

CvnnModel load_model(const std::filesystem::path& path) { return model_decode(read_file(path)); }

CvnnModel load_model(const std::filesystem::path& path, const ModelConfig& expected) {
    return model_decode(read_file(path), expected);
}

}  // namespace exitrf::cvnn
