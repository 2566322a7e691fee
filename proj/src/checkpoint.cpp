#include "mmlora/checkpoint.hpp"

#include <cstdio>
#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace mmlora::ckpt {

using nn::ModalityModel;
using nn::Param;
using train::Stage;
using train::TrainedBundle;

namespace {

constexpr char kMagic[4] = {'M', 'M', 'L', 'F'};

// ---- little-endian writer ---------------------------------------------------

struct Writer {
    std::string buf;

    void bytes(const void* p, std::size_t n) { buf.append(static_cast<const char*>(p), n); }
    void u8(std::uint8_t v) { buf.push_back(static_cast<char>(v)); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
    void f64(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        u64(bits);
    }
    void f32(float v) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        u32(bits);
    }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    void payload(const Matrix& m, Dtype dt) {
        if (dt == Dtype::f64) {
            for (double v : m.values()) f64(v);
        } else {
            for (double v : m.values()) f32(static_cast<float>(v));
        }
    }
};

// ---- bounds-checked little-endian reader -------------------------------------

struct Reader {
    const unsigned char* p;
    std::size_t n;
    std::size_t pos = 0;
    std::string path;

    void need(std::size_t k) const {
        if (pos + k > n) {
            throw CheckpointError("checkpoint '" + path + "': truncated or corrupt (need " +
                                  std::to_string(k) + " bytes at offset " + std::to_string(pos) + ")");
        }
    }
    std::uint8_t u8() {
        need(1);
        return p[pos++];
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[pos + i]) << (8 * i);
        pos += 8;
        return v;
    }
    std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
    double f64() {
        const std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    float f32() {
        const std::uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    std::string str() {
        const std::uint32_t len = u32();
        need(len);
        std::string s(reinterpret_cast<const char*>(p + pos), len);
        pos += len;
        return s;
    }
    Matrix payload(std::int64_t rows, std::int64_t cols, Dtype dt) {
        if (rows < 0 || cols < 0 || rows * cols > (1ll << 32)) {
            throw CheckpointError("checkpoint '" + path + "': implausible tensor shape " +
                                  std::to_string(rows) + "x" + std::to_string(cols));
        }
        Matrix m(static_cast<int>(rows), static_cast<int>(cols));
        for (auto& v : m.values()) v = dt == Dtype::f64 ? f64() : static_cast<double>(f32());
        return m;
    }
};

std::string tensor_name(const ModalityModel& m, const Param& p) {
    return "m" + std::to_string(m.modality_id()) + "/" + p.name;
}

void serialize(const TrainedBundle& b, Dtype dtype, Writer& w) {
    w.bytes(kMagic, 4);
    w.u32(kFormatVersion);
    w.u8(static_cast<std::uint8_t>(b.stage));
    w.u64(b.provenance.config_hash);
    w.u32(static_cast<std::uint32_t>(b.provenance.seeds.size()));
    for (std::uint64_t s : b.provenance.seeds) w.u64(s);
    w.str(b.provenance.note);

    w.u32(static_cast<std::uint32_t>(b.models.size()));
    for (const auto& m : b.models) {
        const nn::ModelConfig& c = m->config();
        w.i32(m->modality_id());
        w.u8(static_cast<std::uint8_t>(c.kind));
        w.i32(c.input_dim);
        w.i32(c.classes);
        w.i32(c.hidden);
        w.i32(c.tokens);
        w.i32(c.token_width);
        w.i32(c.ff_dim);
    }
    w.u8(b.fusion ? 1 : 0);

    std::uint32_t tensor_count = b.fusion ? 2 : 0;
    for (const auto& m : b.models) {
        tensor_count += static_cast<std::uint32_t>(
            static_cast<const ModalityModel&>(*m).params().size());
    }
    w.u32(tensor_count);
    auto put_tensor = [&](const std::string& name, const Param& p) {
        w.str(name);
        w.u64(static_cast<std::uint64_t>(p.value.rows()));
        w.u64(static_cast<std::uint64_t>(p.value.cols()));
        w.u8(static_cast<std::uint8_t>(dtype));
        w.u8(p.frozen ? 1 : 0);
        w.payload(p.value, dtype);
    };
    for (const auto& m : b.models) {
        for (const Param* p : static_cast<const ModalityModel&>(*m).params()) {
            put_tensor(tensor_name(*m, *p), *p);
        }
    }
    if (b.fusion) {
        put_tensor("fusion/w", b.fusion->w);
        put_tensor("fusion/b", b.fusion->b);
    }

    std::uint32_t adapter_count = 0;
    for (const auto& m : b.models) adapter_count += static_cast<std::uint32_t>(m->adapters().size());
    w.u32(adapter_count);
    for (std::size_t mi = 0; mi < b.models.size(); ++mi) {
        for (const nn::LoRAAdapter& a : b.models[mi]->adapters()) {
            w.u32(static_cast<std::uint32_t>(mi));
            w.str(a.base_name);
            w.u32(static_cast<std::uint32_t>(a.rank));
            w.f64(a.delta_scale);
            w.u64(static_cast<std::uint64_t>(a.A.value.rows()));
            w.u64(static_cast<std::uint64_t>(a.A.value.cols()));
            w.payload(a.A.value, Dtype::f64);
            w.u64(static_cast<std::uint64_t>(a.B.value.rows()));
            w.u64(static_cast<std::uint64_t>(a.B.value.cols()));
            w.payload(a.B.value, Dtype::f64);
        }
    }
}

void atomic_write(const std::string& path, const std::string& bytes) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    const fs::path tmp = target.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw CheckpointError("checkpoint: cannot open '" + tmp.string() + "' for writing");
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw CheckpointError("checkpoint: short write to '" + tmp.string() + "'");
    }
    fs::rename(tmp, target);
}

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("checkpoint: cannot open '" + path + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void check_header(Reader& r) {
    r.need(4);
    if (std::memcmp(r.p, kMagic, 4) != 0) {
        throw CheckpointError("checkpoint '" + r.path + "': bad magic bytes");
    }
    r.pos += 4;
    const std::uint32_t version = r.u32();
    if (version != kFormatVersion) {
        throw CheckpointError("checkpoint '" + r.path + "': unsupported format version " +
                              std::to_string(version));
    }
}

}  // namespace

void save(const TrainedBundle& bundle, const std::string& path, Dtype dtype) {
    Writer w;
    serialize(bundle, dtype, w);
    atomic_write(path, w.buf);
}

TrainedBundle load(const std::string& path) {
    const std::string bytes = read_file(path);
    Reader r{reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size(), 0, path};
    check_header(r);

    TrainedBundle b;
    const std::uint8_t stage = r.u8();
    if (stage > static_cast<std::uint8_t>(Stage::joint_full_ft)) {
        throw CheckpointError("checkpoint '" + path + "': unknown stage tag " + std::to_string(stage));
    }
    b.stage = static_cast<Stage>(stage);
    b.provenance.config_hash = r.u64();
    const std::uint32_t n_seeds = r.u32();
    for (std::uint32_t i = 0; i < n_seeds; ++i) b.provenance.seeds.push_back(r.u64());
    b.provenance.note = r.str();

    const std::uint32_t n_models = r.u32();
    for (std::uint32_t i = 0; i < n_models; ++i) {
        const int id = r.i32();
        nn::ModelConfig c;
        const std::uint8_t kind = r.u8();
        if (kind > 1) throw CheckpointError("checkpoint '" + path + "': unknown encoder kind");
        c.kind = static_cast<nn::EncoderKind>(kind);
        c.input_dim = r.i32();
        c.classes = r.i32();
        c.hidden = r.i32();
        c.tokens = r.i32();
        c.token_width = r.i32();
        c.ff_dim = r.i32();
        b.models.push_back(std::make_unique<ModalityModel>(id, c, 0));
    }
    const bool has_fusion = r.u8() != 0;

    const std::uint32_t n_tensors = r.u32();
    std::uint32_t expected = has_fusion ? 2 : 0;
    for (const auto& m : b.models) {
        expected +=
            static_cast<std::uint32_t>(static_cast<const ModalityModel&>(*m).params().size());
    }
    if (n_tensors != expected) {
        throw CheckpointError("checkpoint '" + path + "': tensor count " + std::to_string(n_tensors) +
                              " does not cover the declared models (expected " +
                              std::to_string(expected) + ")");
    }
    if (has_fusion) {
        b.fusion = std::make_unique<train::FusionHead>();
        b.fusion->w = Param{"fusion/w", Matrix(), false};
        b.fusion->b = Param{"fusion/b", Matrix(), false};
    }
    std::vector<std::string> seen;
    for (std::uint32_t i = 0; i < n_tensors; ++i) {
        const std::string name = r.str();
        if (std::find(seen.begin(), seen.end(), name) != seen.end()) {
            throw CheckpointError("checkpoint '" + path + "': duplicate tensor '" + name + "'");
        }
        seen.push_back(name);
        const auto rows = static_cast<std::int64_t>(r.u64());
        const auto cols = static_cast<std::int64_t>(r.u64());
        const std::uint8_t dt = r.u8();
        if (dt > 1) throw CheckpointError("checkpoint '" + path + "': unknown dtype tag");
        const bool frozen = r.u8() != 0;
        Matrix value = r.payload(rows, cols, static_cast<Dtype>(dt));

        Param* target = nullptr;
        if (name == "fusion/w" && b.fusion) {
            target = &b.fusion->w;
        } else if (name == "fusion/b" && b.fusion) {
            target = &b.fusion->b;
        } else {
            const auto slash = name.find('/');
            if (slash == std::string::npos || name[0] != 'm') {
                throw CheckpointError("checkpoint '" + path + "': unrecognized tensor '" + name + "'");
            }
            const int id = std::atoi(name.substr(1, slash - 1).c_str());
            try {
                for (const auto& m : b.models) {
                    if (m->modality_id() == id) target = &m->param(name.substr(slash + 1));
                }
            } catch (const ConfigError& e) {
                throw CheckpointError("checkpoint '" + path + "': " + e.what());
            }
        }
        if (target == nullptr) {
            throw CheckpointError("checkpoint '" + path + "': tensor '" + name +
                                  "' matches no declared model");
        }
        if (!target->value.empty() &&
            (target->value.rows() != value.rows() || target->value.cols() != value.cols())) {
            throw CheckpointError("checkpoint '" + path + "': tensor '" + name + "' has shape " +
                                  value.shape_str() + ", model expects " + target->value.shape_str());
        }
        target->value = std::move(value);
        target->frozen = frozen;
    }

    const std::uint32_t n_adapters = r.u32();
    for (std::uint32_t i = 0; i < n_adapters; ++i) {
        const std::uint32_t mi = r.u32();
        if (mi >= b.models.size()) {
            throw CheckpointError("checkpoint '" + path + "': adapter references model index " +
                                  std::to_string(mi));
        }
        nn::LoRAAdapter a;
        a.base_name = r.str();
        a.rank = static_cast<int>(r.u32());
        a.delta_scale = r.f64();
        const auto ar = static_cast<std::int64_t>(r.u64());
        const auto ac = static_cast<std::int64_t>(r.u64());
        a.A = Param{a.base_name + "/lora_A", r.payload(ar, ac, Dtype::f64), false};
        const auto br = static_cast<std::int64_t>(r.u64());
        const auto bc = static_cast<std::int64_t>(r.u64());
        a.B = Param{a.base_name + "/lora_B", r.payload(br, bc, Dtype::f64), false};
        const Param& base = b.models[mi]->param(a.base_name);
        if (a.A.value.cols() != base.value.cols() || a.B.value.rows() != base.value.rows() ||
            a.A.value.rows() != a.rank || a.B.value.cols() != a.rank) {
            throw CheckpointError("checkpoint '" + path + "': adapter on '" + a.base_name +
                                  "' has inconsistent shapes");
        }
        b.models[mi]->adapters().push_back(std::move(a));
    }

    if (r.pos != r.n) {
        throw CheckpointError("checkpoint '" + path + "': " + std::to_string(r.n - r.pos) +
                              " trailing bytes");
    }
    b.refresh_stage_hashes();
    return b;
}

void export_merged(const TrainedBundle& bundle, const std::string& path, Dtype dtype) {
    if (bundle.stage != Stage::mmlora) {
        throw ConfigError("export_merged: expected an mmlora bundle, got stage " +
                          std::string(stage_name(bundle.stage)));
    }
    bool any = false;
    for (const auto& m : bundle.models) any |= !m->adapters().empty();
    if (!any) throw ConfigError("export_merged: bundle has no adapters");

    TrainedBundle merged = bundle.clone();
    for (auto& m : merged.models) {
        for (const nn::LoRAAdapter& a : m->adapters()) {
            m->param(a.base_name).value = nn::merge_lora(m->param(a.base_name), a);
        }
        m->adapters().clear();
        m->unfreeze_all();
    }
    save(merged, path, dtype);
}

InspectInfo inspect(const std::string& path) {
    const std::string bytes = read_file(path);
    Reader r{reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size(), 0, path};
    check_header(r);

    InspectInfo info;
    info.version = kFormatVersion;
    info.stage = train::stage_name(static_cast<Stage>(r.u8()));
    info.config_hash = r.u64();
    const std::uint32_t n_seeds = r.u32();
    for (std::uint32_t i = 0; i < n_seeds; ++i) info.seeds.push_back(r.u64());
    info.provenance = r.str();
    info.model_count = static_cast<int>(r.u32());
    for (int i = 0; i < info.model_count; ++i) {
        r.i32();
        r.u8();
        for (int k = 0; k < 6; ++k) r.i32();
    }
    info.has_fusion = r.u8() != 0;
    const std::uint32_t n_tensors = r.u32();
    for (std::uint32_t i = 0; i < n_tensors; ++i) {
        TensorInfo t;
        t.name = r.str();
        t.rows = static_cast<std::int64_t>(r.u64());
        t.cols = static_cast<std::int64_t>(r.u64());
        t.dtype = static_cast<Dtype>(r.u8());
        t.frozen = r.u8() != 0;
        const std::size_t bytes_len =
            static_cast<std::size_t>(t.rows * t.cols) * (t.dtype == Dtype::f64 ? 8 : 4);
        r.need(bytes_len);
        t.checksum = fnv1a(r.p + r.pos, bytes_len);
        r.pos += bytes_len;
        info.tensors.push_back(std::move(t));
    }
    info.adapter_count = static_cast<int>(r.u32());
    return info;
}

std::string format_inspect(const InspectInfo& info) {
    std::ostringstream out;
    out << "format version " << info.version << ", stage " << info.stage << "\n";
    char hex[32];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(info.config_hash));
    out << "config hash " << hex << ", seeds [";
    for (std::size_t i = 0; i < info.seeds.size(); ++i) out << (i ? " " : "") << info.seeds[i];
    out << "]\n";
    if (!info.provenance.empty()) out << "provenance: " << info.provenance << "\n";
    out << info.model_count << " model(s), fusion head " << (info.has_fusion ? "yes" : "no") << ", "
        << info.adapter_count << " adapter(s)\n";
    for (const TensorInfo& t : info.tensors) {
        std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(t.checksum));
        out << "  " << t.name << "  " << t.rows << "x" << t.cols << "  " << dtype_name(t.dtype)
            << (t.frozen ? "  frozen" : "  trainable") << "  " << hex << "\n";
    }
    return out.str();
}

}  // namespace mmlora::ckpt
