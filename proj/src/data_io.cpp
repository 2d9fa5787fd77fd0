#include "bnnoise/data_io.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <limits>

namespace bnnoise {

Dataset Dataset::slice(std::size_t first, std::size_t count) const
{
    if (first + count > size() || count == 0) {
        throw DomainError("dataset slice [" + std::to_string(first) + ", " + std::to_string(first + count) +
                          ") outside " + std::to_string(size()) + " samples");
    }
    std::vector<std::size_t> idx(count);
    for (std::size_t i = 0; i < count; ++i) idx[i] = first + i;
    return gather(idx);
}

Dataset Dataset::gather(std::span<const std::size_t> indices) const
{
    if (indices.empty()) throw DomainError("cannot gather an empty dataset");
    const std::size_t stride = images.size() / size();
    Shape shape = images.shape();
    shape[0] = indices.size();
    Dataset out;
    out.images = Tensor(shape);
    out.labels.reserve(indices.size());
    out.classes = classes;
    out.split = split;
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const std::size_t src = indices[i];
        if (src >= size()) throw DomainError("dataset index out of range");
        std::copy_n(images.data().begin() + static_cast<std::ptrdiff_t>(src * stride), stride,
                    out.images.data().begin() + static_cast<std::ptrdiff_t>(i * stride));
        out.labels.push_back(labels[src]);
    }
    return out;
}

Sha256 sha256(std::span<const std::uint8_t> bytes)
{
    Sha256 out{};
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), out.data(), &len, EVP_sha256(), nullptr) != 1 || len != out.size()) {
        throw std::runtime_error("SHA-256 computation failed");
    }
    return out;
}

std::string to_hex(std::span<const std::uint8_t> bytes)
{
    static constexpr char digits[] = "0123456789abcdef";
    std::string s;
    s.reserve(bytes.size() * 2);
    for (auto b : bytes) {
        s.push_back(digits[b >> 4]);
        s.push_back(digits[b & 0xf]);
    }
    return s;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// CIFAR

namespace {

Dataset parse_cifar(std::span<const std::uint8_t> bytes, Split split, std::size_t label_bytes, std::size_t classes)
{
    const std::size_t record = label_bytes + kCifarPixels;
    if (bytes.empty() || bytes.size() % record != 0) {
        throw FormatError("CIFAR file length " + std::to_string(bytes.size()) + " is not a positive multiple of " +
                              std::to_string(record),
                          bytes.size() - bytes.size() % record);
    }
    const std::size_t n = bytes.size() / record;
    Dataset d;
    d.images = Tensor({n, 3, kCifarSide, kCifarSide});
    d.labels.resize(n);
    d.classes = classes;
    d.split = split;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t off = i * record;
        const std::uint8_t label = bytes[off + label_bytes - 1];
        if (label >= classes) {
            throw FormatError("label " + std::to_string(label) + " outside [0, " + std::to_string(classes) + ")",
                              off + label_bytes - 1);
        }
        d.labels[i] = label;
        const std::uint8_t* px = bytes.data() + off + label_bytes;
        double* dst = d.images.data().data() + i * kCifarPixels;
        for (std::size_t p = 0; p < kCifarPixels; ++p) dst[p] = static_cast<double>(px[p]) / 255.0;
    }
    return d;
}

}  // namespace

Dataset parse_cifar10(std::span<const std::uint8_t> bytes, Split split) { return parse_cifar(bytes, split, 1, 10); }

Dataset parse_cifar100(std::span<const std::uint8_t> bytes, Split split) { return parse_cifar(bytes, split, 2, 100); }

std::vector<std::uint8_t> serialize_cifar10(const Dataset& data)
{
    if (data.sample_shape() != Shape{3, kCifarSide, kCifarSide}) throw ShapeError("not a CIFAR-shaped dataset");
    std::vector<std::uint8_t> out;
    out.reserve(data.size() * kCifar10Record);
    for (std::size_t i = 0; i < data.size(); ++i) {
        out.push_back(static_cast<std::uint8_t>(data.labels[i]));
        const double* px = data.images.data().data() + i * kCifarPixels;
        for (std::size_t p = 0; p < kCifarPixels; ++p)
            out.push_back(static_cast<std::uint8_t>(std::lround(px[p] * 255.0)));
    }
    return out;
}

Dataset load_cifar10_file(const std::filesystem::path& path, Split split)
{
    return parse_cifar10(read_file(path), split);
}

namespace {

Dataset concat(std::vector<Dataset> parts)
{
    std::size_t n = 0;
    for (const auto& p : parts) n += p.size();
    Dataset out;
    Shape shape = parts.front().images.shape();
    shape[0] = n;
    std::vector<double> pixels;
    pixels.reserve(shape_numel(shape));
    for (auto& p : parts) {
        pixels.insert(pixels.end(), p.images.data().begin(), p.images.data().end());
        out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
    }
    out.images = Tensor(shape, std::move(pixels));
    out.classes = parts.front().classes;
    out.split = parts.front().split;
    return out;
}

}  // namespace

TrainTest load_cifar10(const std::filesystem::path& dir)
{
    std::vector<Dataset> train;
    for (int b = 1; b <= 5; ++b)
        train.push_back(load_cifar10_file(dir / ("data_batch_" + std::to_string(b) + ".bin"), Split::Train));
    return {concat(std::move(train)), load_cifar10_file(dir / "test_batch.bin", Split::Test)};
}

TrainTest load_cifar100(const std::filesystem::path& dir)
{
    return {parse_cifar100(read_file(dir / "train.bin"), Split::Train),
            parse_cifar100(read_file(dir / "test.bin"), Split::Test)};
}

void standardize_channels(Dataset& data, const Dataset& reference)
{
    const Shape s = reference.images.shape();
    if (s.size() != 4 || data.images.rank() != 4 || data.images.dim(1) != s[1]) {
        throw ShapeError("standardize_channels expects matching [N,C,H,W] datasets");
    }
    const std::size_t C = s[1];
    const std::size_t spatial = s[2] * s[3];
    for (std::size_t c = 0; c < C; ++c) {
        double sum = 0.0, sq = 0.0;
        for (std::size_t n = 0; n < s[0]; ++n) {
            const double* p = reference.images.data().data() + (n * C + c) * spatial;
            for (std::size_t k = 0; k < spatial; ++k) {
                sum += p[k];
                sq += p[k] * p[k];
            }
        }
        const double cnt = static_cast<double>(s[0] * spatial);
        const double mu = sum / cnt;
        const double sd = std::sqrt(std::max(sq / cnt - mu * mu, 1e-12));
        for (std::size_t n = 0; n < data.images.dim(0); ++n) {
            double* p = data.images.data().data() + (n * C + c) * spatial;
            for (std::size_t k = 0; k < spatial; ++k) p[k] = (p[k] - mu) / sd;
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic

Tensor synthetic_class_means(const SyntheticOptions& o)
{
    if (o.n_per_class == 0 || o.classes == 0 || o.image_side == 0 || o.channels == 0) {
        throw DomainError("synthetic dataset arguments must be positive");
    }
    RngStream rng(o.seed, 0);
    return uniform_sample({o.classes, o.channels, o.image_side, o.image_side}, 0.0, 1.0, rng);
}

Dataset synthetic_dataset(const SyntheticOptions& o)
{
    const Tensor means = synthetic_class_means(o);
    const std::size_t dim = o.channels * o.image_side * o.image_side;

    double min_dist = std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < o.classes; ++a)
        for (std::size_t b = a + 1; b < o.classes; ++b) {
            double d2 = 0.0;
            for (std::size_t p = 0; p < dim; ++p) {
                const double d = means[a * dim + p] - means[b * dim + p];
                d2 += d * d;
            }
            min_dist = std::min(min_dist, std::sqrt(d2));
        }
    const double noise = o.classes > 1 ? o.relative_noise * min_dist : o.relative_noise;

    const std::size_t n = o.n_per_class * o.classes;
    Dataset d;
    d.images = Tensor({n, o.channels, o.image_side, o.image_side});
    d.labels.resize(n);
    d.classes = o.classes;
    d.split = o.split;
    RngStream rng(o.seed, o.split == Split::Train ? 1 : 2);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t cls = i % o.classes;
        d.labels[i] = static_cast<int>(cls);
        double* dst = d.images.data().data() + i * dim;
        const double* mu = means.data().data() + cls * dim;
        for (std::size_t p = 0; p < dim; ++p) dst[p] = noise > 0.0 ? mu[p] + noise * rng.normal() : mu[p];
    }
    return d;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

class Writer {
public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u32(std::uint32_t v)
    {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v)
    {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void str(const std::string& s)
    {
        u32(static_cast<std::uint32_t>(s.size()));
        buf_.insert(buf_.end(), s.begin(), s.end());
    }
    void tensor(std::uint8_t role, const Tensor& t)
    {
        u8(role);
        u32(static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) u64(d);
        for (double v : t.data()) f64(v);
    }
    std::vector<std::uint8_t>& bytes() { return buf_; }

private:
    std::vector<std::uint8_t> buf_;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    std::size_t offset() const { return pos_; }
    std::size_t remaining() const { return bytes_.size() - pos_; }

    void need(std::size_t n, const char* what) const
    {
        if (remaining() < n) throw FormatError(std::string("truncated checkpoint while reading ") + what, pos_);
    }
    std::uint8_t u8(const char* what)
    {
        need(1, what);
        return bytes_[pos_++];
    }
    std::uint32_t u32(const char* what)
    {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
        return v;
    }
    std::uint64_t u64(const char* what)
    {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
        return v;
    }
    double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
    std::string str(const char* what)
    {
        const std::uint32_t n = u32(what);
        need(n, what);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    Tensor tensor(std::uint8_t expected_role, const char* what)
    {
        const std::size_t start = pos_;
        const std::uint8_t role = u8(what);
        if (role != expected_role) throw FormatError(std::string("unexpected tensor role for ") + what, start);
        const std::uint32_t rank = u32(what);
        if (rank == 0 || rank > 8) throw FormatError(std::string("bad tensor rank for ") + what, start + 1);
        Shape shape(rank);
        std::size_t count = 1;
        for (auto& d : shape) {
            d = u64(what);
            if (d == 0 || d > remaining() / 8 + 1) throw FormatError(std::string("bad tensor extent for ") + what, pos_ - 8);
            count *= d;
        }
        if (count > remaining() / 8) throw FormatError(std::string("truncated tensor data for ") + what, pos_);
        std::vector<double> data(count);
        for (auto& v : data) v = f64(what);
        return Tensor(std::move(shape), std::move(data));
    }

private:
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

void encode_model(Writer& w, const Model& model)
{
    w.str(model.name);
    w.u32(static_cast<std::uint32_t>(model.input_shape.size()));
    for (auto d : model.input_shape) w.u64(d);
    w.u64(model.classes);
    w.u32(static_cast<std::uint32_t>(model.bn_mask.size()));
    for (bool b : model.bn_mask) w.u8(b ? 1 : 0);
    w.u32(static_cast<std::uint32_t>(model.layers.size()));
    for (const auto& layer : model.layers) {
        const auto& s = layer.spec;
        w.u8(static_cast<std::uint8_t>(s.kind));
        w.u64(s.in);
        w.u64(s.out);
        w.u64(s.kernel);
        w.u64(s.stride);
        w.u64(s.padding);
        w.f64(s.eps);
        w.f64(s.momentum);
        w.u32(static_cast<std::uint32_t>(layer.params.size()));
        for (std::size_t i = 0; i < layer.params.size(); ++i)
            w.tensor(static_cast<std::uint8_t>(layer.role(i)), layer.params[i]);
        w.u32(static_cast<std::uint32_t>(layer.buffers.size()));
        for (std::size_t i = 0; i < layer.buffers.size(); ++i) w.tensor(static_cast<std::uint8_t>(i), layer.buffers[i]);
    }
}

std::size_t expected_params(LayerKind kind)
{
    return (has_weights(kind) || kind == LayerKind::BatchNorm) ? 2 : 0;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Model& model, const CheckpointMeta& meta)
{
    Writer w;
    for (char c : kCheckpointMagic) w.u8(static_cast<std::uint8_t>(c));
    w.u32(kCheckpointVersion);
    encode_model(w, model);
    w.u64(meta.seed);
    w.u8(meta.converged ? 1 : 0);
    w.str(meta.config_digest);
    const Sha256 digest = sha256(w.bytes());
    w.bytes().insert(w.bytes().end(), digest.begin(), digest.end());
    return std::move(w.bytes());
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes)
{
    Reader r(bytes);
    for (std::size_t i = 0; i < kCheckpointMagic.size(); ++i) {
        if (r.u8("magic") != static_cast<std::uint8_t>(kCheckpointMagic[i])) throw FormatError("bad checkpoint magic", i);
    }
    const std::uint32_t version = r.u32("version");
    if (version != kCheckpointVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version), 8);
    }
    Checkpoint ck;
    Model& m = ck.model;
    m.name = r.str("model name");
    const std::uint32_t rank = r.u32("input rank");
    if (rank > 8) throw FormatError("bad input rank", r.offset() - 4);
    m.input_shape.resize(rank);
    for (auto& d : m.input_shape) d = r.u64("input shape");
    m.classes = r.u64("classes");
    const std::uint32_t mask_len = r.u32("bn mask length");
    r.need(mask_len, "bn mask");
    for (std::uint32_t i = 0; i < mask_len; ++i) {
        const std::uint8_t b = r.u8("bn mask");
        if (b > 1) throw FormatError("bn mask entries must be 0 or 1", r.offset() - 1);
        m.bn_mask.push_back(b == 1);
    }
    const std::uint32_t layer_count = r.u32("layer count");
    for (std::uint32_t li = 0; li < layer_count; ++li) {
        const std::size_t start = r.offset();
        Layer layer;
        const std::uint8_t kind = r.u8("layer kind");
        if (kind > static_cast<std::uint8_t>(LayerKind::ResidualExit)) throw FormatError("unknown layer kind", start);
        layer.spec.kind = static_cast<LayerKind>(kind);
        layer.spec.in = r.u64("layer spec");
        layer.spec.out = r.u64("layer spec");
        layer.spec.kernel = r.u64("layer spec");
        layer.spec.stride = r.u64("layer spec");
        layer.spec.padding = r.u64("layer spec");
        layer.spec.eps = r.f64("layer spec");
        layer.spec.momentum = r.f64("layer spec");
        const std::uint32_t np = r.u32("parameter count");
        if (np != expected_params(layer.spec.kind)) throw FormatError("wrong parameter count for layer", r.offset() - 4);
        for (std::uint32_t i = 0; i < np; ++i)
            layer.params.push_back(r.tensor(static_cast<std::uint8_t>(layer.role(i)), "parameter"));
        const std::uint32_t nb = r.u32("buffer count");
        if (nb != (layer.spec.kind == LayerKind::BatchNorm ? 2u : 0u))
            throw FormatError("wrong buffer count for layer", r.offset() - 4);
        for (std::uint32_t i = 0; i < nb; ++i) layer.buffers.push_back(r.tensor(static_cast<std::uint8_t>(i), "buffer"));
        m.layers.push_back(std::move(layer));
    }
    ck.meta.seed = r.u64("seed");
    ck.meta.converged = r.u8("converged flag") == 1;
    ck.meta.config_digest = r.str("config digest");

    const std::size_t body = r.offset();
    r.need(32, "digest");
    const Sha256 actual = sha256(bytes.first(body));
    if (!std::equal(actual.begin(), actual.end(), bytes.begin() + static_cast<std::ptrdiff_t>(body))) {
        throw FormatError("checkpoint digest mismatch", body);
    }
    if (bytes.size() != body + 32) throw FormatError("trailing bytes after checkpoint digest", body + 32);
    return ck;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path, const CheckpointMeta& meta)
{
    write_file(path, encode_checkpoint(model, meta));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

std::string model_digest(const Model& model)
{
    const auto bytes = encode_checkpoint(model);
    return to_hex(sha256(bytes));
}

}  // namespace bnnoise
