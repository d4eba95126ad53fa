#include "geoformer/checkpoint.hpp"

#include "geoformer/error.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace geoformer {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

class Writer {
  public:
    void bytes(const void* p, std::size_t n) {
        const auto* c = static_cast<const unsigned char*>(p);
        buf_.insert(buf_.end(), c, c + n);
    }
    void u32(std::uint32_t v) { bytes(&v, 4); }
    void u64(std::uint64_t v) { bytes(&v, 8); }
    void str(const std::string& s) { bytes(s.data(), s.size()); }
    std::vector<unsigned char>& buffer() { return buf_; }

  private:
    std::vector<unsigned char> buf_;
};

class Reader {
  public:
    explicit Reader(std::span<const unsigned char> data) : data_(data) {}

    void bytes(void* p, std::size_t n) {
        if (n > data_.size() - pos_) throw CheckpointError("truncated checkpoint");
        std::memcpy(p, data_.data() + pos_, n);
        pos_ += n;
    }
    std::uint32_t u32() {
        std::uint32_t v;
        bytes(&v, 4);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v;
        bytes(&v, 8);
        return v;
    }
    std::string str(std::size_t n) {
        if (n > data_.size() - pos_) throw CheckpointError("truncated checkpoint");
        std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    std::size_t remaining() const { return data_.size() - pos_; }

  private:
    std::span<const unsigned char> data_;
    std::size_t pos_ = 0;
};

std::uint32_t crc32_of(std::span<const unsigned char> data) {
    uLong crc = crc32(0L, Z_NULL, 0);
    std::size_t off = 0;
    while (off < data.size()) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(data.size() - off, 1u << 30));
        crc = crc32(crc, data.data() + off, chunk);
        off += chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

TensorRecord record_of(const std::string& name, const ag::Shape& shape, std::span<const float> values) {
    TensorRecord r;
    r.name = name;
    r.dims.assign(shape.begin(), shape.end());
    r.values.assign(values.begin(), values.end());
    return r;
}

} // namespace

Checkpoint Checkpoint::capture(const GptModel<float>& model, const AdamW<float>* optimizer, std::int64_t step,
                               const Rng* rng, nlohmann::json extra) {
    Checkpoint c;
    c.model = model.config();
    c.step = step;
    c.extra = std::move(extra);
    if (rng) c.rng_state = rng->state();
    const auto& params = model.params();
    for (const auto& p : params) c.tensors.push_back(record_of(p.name, p.tensor.shape(), p.tensor.data()));
    if (optimizer) {
        c.optimizer_steps = optimizer->steps_taken();
        for (std::size_t i = 0; i < params.size(); ++i) {
            c.tensors.push_back(record_of("adam.m." + params[i].name, params[i].tensor.shape(),
                                          optimizer->first_moments()[i]));
            c.tensors.push_back(record_of("adam.v." + params[i].name, params[i].tensor.shape(),
                                          optimizer->second_moments()[i]));
        }
    }
    return c;
}

const TensorRecord* Checkpoint::find(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return &t;
    return nullptr;
}

void Checkpoint::restore_weights(GptModel<float>& model) const {
    if (!(model.config() == this->model)) throw CheckpointError("model configuration differs from checkpoint");
    for (auto& p : model.params()) {
        const auto* rec = find(p.name);
        if (!rec) throw CheckpointError("checkpoint lacks tensor '" + p.name + "'");
        if (rec->values.size() != p.tensor.numel())
            throw CheckpointError("tensor '" + p.name + "' has the wrong size");
        std::copy(rec->values.begin(), rec->values.end(), p.tensor.data().begin());
    }
}

GptModel<float> Checkpoint::make_model() const {
    GptModel<float> m(model);
    restore_weights(m);
    return m;
}

bool Checkpoint::restore_optimizer(const GptModel<float>& model, AdamW<float>& optimizer) const {
    const auto& params = model.params();
    if (!find("adam.m." + params.front().name)) return false;
    optimizer.reset(params);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto* m = find("adam.m." + params[i].name);
        const auto* v = find("adam.v." + params[i].name);
        if (!m || !v) throw CheckpointError("incomplete optimizer state for '" + params[i].name + "'");
        optimizer.first_moments()[i] = m->values;
        optimizer.second_moments()[i] = v->values;
    }
    optimizer.set_steps_taken(optimizer_steps);
    return true;
}

std::optional<Rng> Checkpoint::restore_rng() const {
    if (rng_state.empty()) return std::nullopt;
    Rng r;
    r.set_state(rng_state);
    return r;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    nlohmann::json header;
    header["model"] = ckpt.model;
    header["step"] = ckpt.step;
    header["optimizer_steps"] = ckpt.optimizer_steps;
    header["rng_state"] = ckpt.rng_state;
    header["extra"] = ckpt.extra;
    const std::string header_text = header.dump();

    Writer w;
    w.str("GEOF");
    w.u32(kCheckpointVersion);
    w.u64(header_text.size());
    w.str(header_text);
    w.u64(ckpt.tensors.size());
    for (const auto& t : ckpt.tensors) {
        w.u32(static_cast<std::uint32_t>(t.name.size()));
        w.str(t.name);
        w.u32(static_cast<std::uint32_t>(t.dims.size()));
        for (auto d : t.dims) w.u64(d);
        w.bytes(t.values.data(), t.values.size() * sizeof(float));
    }
    w.u32(crc32_of(w.buffer()));

    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw CheckpointError("cannot write " + tmp);
        out.write(reinterpret_cast<const char*>(w.buffer().data()), static_cast<std::streamsize>(w.buffer().size()));
        if (!out) throw CheckpointError("write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open " + path.string());
    const std::vector<unsigned char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (data.size() < 4 + 4 + 4) throw CheckpointError("truncated checkpoint");
    if (std::memcmp(data.data(), "GEOF", 4) != 0) throw CheckpointError("not a checkpoint (bad magic)");

    std::uint32_t version;
    std::memcpy(&version, data.data() + 4, 4);
    if (version != kCheckpointVersion)
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                              std::to_string(kCheckpointVersion) + ")");

    const std::span<const unsigned char> body(data.data(), data.size() - 4);
    std::uint32_t stored_crc;
    std::memcpy(&stored_crc, data.data() + data.size() - 4, 4);
    if (crc32_of(body) != stored_crc) throw CheckpointError("checksum mismatch: file is corrupted or truncated");

    Reader r(body);
    r.str(4);
    r.u32();
    const auto header_len = r.u64();
    Checkpoint c;
    try {
        const auto header = nlohmann::json::parse(r.str(header_len));
        c.model = header.at("model").get<ModelConfig>();
        c.step = header.at("step").get<std::int64_t>();
        c.optimizer_steps = header.at("optimizer_steps").get<std::int64_t>();
        c.rng_state = header.at("rng_state").get<std::string>();
        c.extra = header.at("extra");
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("bad checkpoint header: ") + e.what());
    }
    const auto count = r.u64();
    for (std::uint64_t i = 0; i < count; ++i) {
        TensorRecord t;
        t.name = r.str(r.u32());
        const auto rank = r.u32();
        std::uint64_t n = 1;
        for (std::uint32_t k = 0; k < rank; ++k) {
            t.dims.push_back(r.u64());
            n *= t.dims.back();
        }
        if (n > r.remaining() / sizeof(float)) throw CheckpointError("truncated checkpoint");
        t.values.resize(n);
        r.bytes(t.values.data(), n * sizeof(float));
        c.tensors.push_back(std::move(t));
    }
    if (r.remaining() != 0) throw CheckpointError("trailing bytes in checkpoint");
    return c;
}

} // namespace geoformer
