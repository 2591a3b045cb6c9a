#include "umigrat/persist.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

namespace umigrat {

namespace {

static_assert(std::endian::native == std::endian::little,
              "artifact format assumes a little-endian host");

constexpr char kMagic[4] = {'U', 'M', 'G', 'R'};

// ---- byte buffer encoding -------------------------------------------------

struct Writer {
    std::string bytes;

    void raw(const void* p, std::size_t n) {
        bytes.append(static_cast<const char*>(p), n);
    }
    void u32(std::uint32_t v) { raw(&v, 4); }
    void u64(std::uint64_t v) { raw(&v, 8); }
    void i32(std::int32_t v) { raw(&v, 4); }
    void f32(float v) { raw(&v, 4); }
    void f64(double v) { raw(&v, 8); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        raw(s.data(), s.size());
    }
    void tensor(const Tensor& t) {
        require(t.rank() <= 8, "serialize: tensor rank too large");
        u32(static_cast<std::uint32_t>(t.rank()));
        for (std::size_t e : t.shape()) {
            require(e <= 0xffffffffull, "serialize: extent exceeds 32 bits");
            u32(static_cast<std::uint32_t>(e));
        }
        for (std::size_t i = 0; i < t.numel(); ++i)
            f32(static_cast<float>(t[i])); // round-to-nearest-even
    }
};

struct Reader {
    const unsigned char* p;
    std::size_t remaining;

    void raw(void* out, std::size_t n) {
        require(remaining >= n, "load: truncated payload");
        std::memcpy(out, p, n);
        p += n;
        remaining -= n;
    }
    std::uint32_t u32() {
        std::uint32_t v;
        raw(&v, 4);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v;
        raw(&v, 8);
        return v;
    }
    std::int32_t i32() {
        std::int32_t v;
        raw(&v, 4);
        return v;
    }
    float f32() {
        float v;
        raw(&v, 4);
        return v;
    }
    double f64() {
        double v;
        raw(&v, 8);
        return v;
    }
    std::string str() {
        const std::uint32_t n = u32();
        require(remaining >= n, "load: truncated string");
        std::string s(reinterpret_cast<const char*>(p), n);
        p += n;
        remaining -= n;
        return s;
    }
    Tensor tensor() {
        const std::uint32_t rank = u32();
        require(rank <= 8, "load: corrupt tensor rank");
        std::vector<std::size_t> shape(rank);
        std::size_t n = 1;
        for (auto& e : shape) {
            e = u32();
            require(e > 0, "load: zero tensor extent");
            n *= e;
        }
        require(remaining >= n * 4, "load: truncated tensor data");
        std::vector<double> data(n);
        for (std::size_t i = 0; i < n; ++i) data[i] = static_cast<double>(f32());
        return Tensor(std::move(shape), std::move(data));
    }
};

// ---- file level -----------------------------------------------------------

void write_artifact(const std::filesystem::path& path, ArtifactKind kind,
                    std::uint64_t seed, const std::string& payload) {
    Writer head;
    head.raw(kMagic, 4);
    head.u32(kFormatVersion);
    head.u32(static_cast<std::uint32_t>(kind));
    head.u64(seed);
    head.u64(fnv1a(payload.data(), payload.size()));
    head.str(kToolVersion);
    head.u64(payload.size());

    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        require(out.good(), "save: cannot open " + tmp.string());
        out.write(head.bytes.data(), static_cast<std::streamsize>(head.bytes.size()));
        out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
        require(out.good(), "save: write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

std::string read_payload(const std::filesystem::path& path, ArtifactKind expected,
                         ArtifactInfo* info_out = nullptr) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "load: cannot open " + path.string());
    std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    require(all.size() >= 4 && std::memcmp(all.data(), kMagic, 4) == 0,
            "load: bad magic in " + path.string());
    Reader r{reinterpret_cast<const unsigned char*>(all.data()) + 4, all.size() - 4};
    ArtifactInfo info;
    info.version = r.u32();
    require(info.version == kFormatVersion,
            "load: unsupported format version " + std::to_string(info.version));
    info.kind = static_cast<ArtifactKind>(r.u32());
    info.seed = r.u64();
    info.payload_fingerprint = r.u64();
    info.creator = r.str();
    const std::uint64_t payload_size = r.u64();
    require(r.remaining == payload_size,
            "load: payload size mismatch (truncated or trailing bytes) in " + path.string());
    require(info.kind == expected, "load: artifact kind mismatch in " + path.string());

    std::string payload(reinterpret_cast<const char*>(r.p), r.remaining);
    require(fnv1a(payload.data(), payload.size()) == info.payload_fingerprint,
            "load: fingerprint mismatch in " + path.string());
    if (info_out) *info_out = info;
    return payload;
}

void write_budget(Writer& w, const AttackBudget& b) {
    w.f64(b.epsilon);
    w.f64(b.alpha);
    w.u64(b.iterations);
    w.i32(b.loss_norm);
    w.f64(b.momentum_decay);
}

AttackBudget read_budget(Reader& r) {
    AttackBudget b;
    b.epsilon = r.f64();
    b.alpha = r.f64();
    b.iterations = r.u64();
    b.loss_norm = r.i32();
    b.momentum_decay = r.f64();
    return b;
}

/// 32-bit encoding of a delta that must stay inside the l-inf ball: values
/// whose nearest float lands outside are nudged one ulp toward zero.
void write_ball_tensor(Writer& w, const Tensor& t, double epsilon) {
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) w.u32(static_cast<std::uint32_t>(e));
    for (std::size_t i = 0; i < t.numel(); ++i) {
        float v = static_cast<float>(std::min(epsilon, std::max(-epsilon, t[i])));
        if (static_cast<double>(v) > epsilon) v = std::nextafterf(v, 0.0f);
        if (static_cast<double>(v) < -epsilon) v = std::nextafterf(v, 0.0f);
        w.f32(v);
    }
}

} // namespace

// ---------------------------------------------------------------------------
// Model

void save_model(const std::filesystem::path& path, const SequentialModel& model,
                std::uint64_t seed) {
    Writer w;
    w.u32(static_cast<std::uint32_t>(model.input_shape().size()));
    for (std::size_t e : model.input_shape()) w.u32(static_cast<std::uint32_t>(e));
    w.u32(static_cast<std::uint32_t>(model.module_count()));
    w.u32(model.training_converged ? 1 : 0);
    for (const Module& m : model.modules()) {
        w.u32(static_cast<std::uint32_t>(m.in_dim));
        w.u32(static_cast<std::uint32_t>(m.out_dim));
        w.u32(static_cast<std::uint32_t>(m.activation));
        w.u32(m.layer_norm ? 1 : 0);
        w.tensor(m.weight);
        w.tensor(m.bias);
        if (m.layer_norm) {
            w.f64(m.ln_eps);
            w.tensor(m.ln_gain);
            w.tensor(m.ln_bias);
        }
    }
    write_artifact(path, ArtifactKind::Model, seed, w.bytes);
}

SequentialModel load_model(const std::filesystem::path& path) {
    const std::string payload = read_payload(path, ArtifactKind::Model);
    Reader r{reinterpret_cast<const unsigned char*>(payload.data()), payload.size()};
    const std::uint32_t rank = r.u32();
    std::vector<std::size_t> input_shape(rank);
    for (auto& e : input_shape) e = r.u32();
    const std::uint32_t count = r.u32();
    const bool converged = r.u32() != 0;
    std::vector<Module> modules;
    for (std::uint32_t i = 0; i < count; ++i) {
        Module m;
        m.in_dim = r.u32();
        m.out_dim = r.u32();
        m.activation = static_cast<Activation>(r.u32());
        m.layer_norm = r.u32() != 0;
        m.weight = r.tensor();
        m.bias = r.tensor();
        if (m.layer_norm) {
            m.ln_eps = r.f64();
            m.ln_gain = r.tensor();
            m.ln_bias = r.tensor();
        }
        modules.push_back(std::move(m));
    }
    require(r.remaining == 0, "load: trailing bytes in model payload");
    SequentialModel model(std::move(modules), std::move(input_shape));
    model.training_converged = converged;
    return model;
}

// ---------------------------------------------------------------------------
// Dataset

void save_dataset(const std::filesystem::path& path, const Dataset& dataset,
                  std::uint64_t seed) {
    Writer w;
    w.u32(static_cast<std::uint32_t>(dataset.spec.kind));
    w.u64(dataset.spec.count);
    w.u32(static_cast<std::uint32_t>(dataset.spec.height));
    w.u32(static_cast<std::uint32_t>(dataset.spec.width));
    w.i32(dataset.spec.octaves);
    w.f64(dataset.spec.shift.gamma);
    w.f64(dataset.spec.shift.channel_mix);
    w.i32(dataset.spec.shift.band_low);
    w.i32(dataset.spec.shift.band_high);
    w.u64(dataset.spec.seed);
    w.u32(dataset.degenerate_shift ? 1 : 0);
    w.u32(static_cast<std::uint32_t>(dataset.items.size()));
    for (const Tensor& t : dataset.items) w.tensor(t);
    write_artifact(path, ArtifactKind::Dataset, seed, w.bytes);
}

Dataset load_dataset(const std::filesystem::path& path) {
    const std::string payload = read_payload(path, ArtifactKind::Dataset);
    Reader r{reinterpret_cast<const unsigned char*>(payload.data()), payload.size()};
    Dataset d;
    d.spec.kind = static_cast<DatasetKind>(r.u32());
    d.spec.count = r.u64();
    d.spec.height = r.u32();
    d.spec.width = r.u32();
    d.spec.octaves = r.i32();
    d.spec.shift.gamma = r.f64();
    d.spec.shift.channel_mix = r.f64();
    d.spec.shift.band_low = r.i32();
    d.spec.shift.band_high = r.i32();
    d.spec.seed = r.u64();
    d.degenerate_shift = r.u32() != 0;
    const std::uint32_t n = r.u32();
    d.items.reserve(n);
    for (std::uint32_t i = 0; i < n; ++i) d.items.push_back(r.tensor());
    require(r.remaining == 0, "load: trailing bytes in dataset payload");
    return d;
}

// ---------------------------------------------------------------------------
// Perturbation

void save_perturbation(const std::filesystem::path& path, const Perturbation& p,
                       std::uint64_t seed) {
    Writer w;
    write_budget(w, p.budget);
    w.u64(p.anchor_fingerprint);
    write_ball_tensor(w, p.delta, p.budget.epsilon);
    write_artifact(path, ArtifactKind::Perturbation, seed, w.bytes);
}

Perturbation load_perturbation(const std::filesystem::path& path) {
    const std::string payload = read_payload(path, ArtifactKind::Perturbation);
    Reader r{reinterpret_cast<const unsigned char*>(payload.data()), payload.size()};
    Perturbation p;
    p.budget = read_budget(r);
    p.anchor_fingerprint = r.u64();
    p.delta = r.tensor();
    require(r.remaining == 0, "load: trailing bytes in perturbation payload");
    require(p.delta.linf_norm() <= p.budget.epsilon,
            "load: perturbation exceeds its stored budget");
    return p;
}

// ---------------------------------------------------------------------------
// UMI artifact

void save_umi(const std::filesystem::path& path, const UmiArtifact& umi, std::uint64_t seed) {
    Writer w;
    write_budget(w, umi.budget);
    w.f64(umi.eta);
    w.u64(umi.meta_rounds);
    w.u64(umi.inner_steps);
    w.f64(umi.lambda);
    w.u32(static_cast<std::uint32_t>(umi.epsilon_schedule.size()));
    for (double v : umi.epsilon_schedule) w.f64(v);
    w.u64(umi.dataset_fingerprint);
    w.u64(umi.model_fingerprint);
    w.f64(umi.fooling_rate_at_train);
    w.u32(static_cast<std::uint32_t>(umi.rolled_back_rounds.size()));
    for (std::size_t v : umi.rolled_back_rounds) w.u64(v);
    write_ball_tensor(w, umi.delta, umi.budget.epsilon);
    write_artifact(path, ArtifactKind::UmiArtifact, seed, w.bytes);
}

UmiArtifact load_umi(const std::filesystem::path& path) {
    const std::string payload = read_payload(path, ArtifactKind::UmiArtifact);
    Reader r{reinterpret_cast<const unsigned char*>(payload.data()), payload.size()};
    UmiArtifact u;
    u.budget = read_budget(r);
    u.eta = r.f64();
    u.meta_rounds = r.u64();
    u.inner_steps = r.u64();
    u.lambda = r.f64();
    const std::uint32_t sn = r.u32();
    u.epsilon_schedule.resize(sn);
    for (auto& v : u.epsilon_schedule) v = r.f64();
    u.dataset_fingerprint = r.u64();
    u.model_fingerprint = r.u64();
    u.fooling_rate_at_train = r.f64();
    const std::uint32_t rn = r.u32();
    u.rolled_back_rounds.resize(rn);
    for (auto& v : u.rolled_back_rounds) v = r.u64();
    u.delta = r.tensor();
    require(r.remaining == 0, "load: trailing bytes in umi payload");
    require(u.delta.linf_norm() <= u.budget.epsilon,
            "load: universal delta exceeds its stored budget");
    require(u.fooling_rate_at_train >= 0.0 && u.fooling_rate_at_train <= 1.0,
            "load: fooling rate outside [0, 1]");
    return u;
}

ArtifactInfo peek_artifact(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "peek: cannot open " + path.string());
    std::string head(4 + 4 + 4 + 8 + 8, '\0');
    in.read(head.data(), static_cast<std::streamsize>(head.size()));
    require(in.gcount() == static_cast<std::streamsize>(head.size()),
            "peek: truncated header in " + path.string());
    require(std::memcmp(head.data(), kMagic, 4) == 0, "peek: bad magic in " + path.string());
    Reader r{reinterpret_cast<const unsigned char*>(head.data()) + 4, head.size() - 4};
    ArtifactInfo info;
    info.version = r.u32();
    require(info.version == kFormatVersion, "peek: unsupported version");
    info.kind = static_cast<ArtifactKind>(r.u32());
    info.seed = r.u64();
    info.payload_fingerprint = r.u64();
    // creator string and payload follow; not needed for a peek
    return info;
}

// ---------------------------------------------------------------------------
// CSV

CsvWriter::CsvWriter(const std::filesystem::path& path)
    : final_path_(path), tmp_path_(path.string() + ".tmp") {}

namespace {

std::string csv_escape(const std::string& field) {
    const bool needs_quote = field.find_first_of(",\"\n\r") != std::string::npos;
    if (!needs_quote) return field;
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

} // namespace

void CsvWriter::header(std::span<const std::string> names) {
    require(!header_written_, "CsvWriter: header already written");
    require(!names.empty(), "CsvWriter: empty header");
    column_count_ = names.size();
    header_written_ = true;
    for (std::size_t i = 0; i < names.size(); ++i) {
        if (i) buffer_ += ',';
        buffer_ += csv_escape(names[i]);
    }
    buffer_ += '\n';
}

void CsvWriter::row(std::span<const std::string> fields) {
    require(header_written_, "CsvWriter: header row is mandatory");
    require(fields.size() == column_count_, "CsvWriter: column count mismatch");
    for (std::size_t i = 0; i < fields.size(); ++i) {
        if (i) buffer_ += ',';
        buffer_ += csv_escape(fields[i]);
    }
    buffer_ += '\n';
}

void CsvWriter::close() {
    if (closed_) return;
    require(header_written_, "CsvWriter: closing a file without a header");
    {
        std::ofstream out(tmp_path_, std::ios::binary | std::ios::trunc);
        require(out.good(), "CsvWriter: cannot open " + tmp_path_.string());
        out.write(buffer_.data(), static_cast<std::streamsize>(buffer_.size()));
        require(out.good(), "CsvWriter: write failed");
    }
    std::filesystem::rename(tmp_path_, final_path_);
    closed_ = true;
}

CsvWriter::~CsvWriter() {
    try {
        close();
    } catch (...) {
        // destructor must not throw; an incomplete .tmp file is left behind
    }
}

std::string CsvWriter::field(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

} // namespace umigrat
