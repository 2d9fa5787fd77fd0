#pragma once

#include "bnnoise/nn.hpp"
#include "bnnoise/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace bnnoise {

class FormatError : public std::runtime_error {
public:
    FormatError(const std::string& what, std::uint64_t offset = 0)
        : std::runtime_error(what + " (byte offset " + std::to_string(offset) + ")"), offset_(offset)
    {
    }
    std::uint64_t offset() const { return offset_; }

private:
    std::uint64_t offset_;
};

enum class Split { Train, Test };

struct Dataset {
    Tensor images;  // N x C x H x W, pixels in [0, 1] for CIFAR
    std::vector<int> labels;
    std::size_t classes = 0;
    Split split = Split::Train;

    std::size_t size() const { return labels.size(); }
    Shape sample_shape() const { return Shape(images.shape().begin() + 1, images.shape().end()); }
    /// Rows [first, first+count) in order.
    Dataset slice(std::size_t first, std::size_t count) const;
    /// Rows at the given indices, in the given order.
    Dataset gather(std::span<const std::size_t> indices) const;
};

using Sha256 = std::array<std::uint8_t, 32>;
Sha256 sha256(std::span<const std::uint8_t> bytes);
std::string to_hex(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

// ---------------------------------------------------------------------------
// CIFAR binary batches

inline constexpr std::size_t kCifarSide = 32;
inline constexpr std::size_t kCifarPixels = 3 * kCifarSide * kCifarSide;
inline constexpr std::size_t kCifar10Record = 1 + kCifarPixels;
inline constexpr std::size_t kCifar100Record = 2 + kCifarPixels;

/// Parses CIFAR-10 records (1 label byte + 3072 pixel bytes: R, G, B planes).
Dataset parse_cifar10(std::span<const std::uint8_t> bytes, Split split);
/// Parses CIFAR-100 records (coarse byte, fine byte, 3072 pixels); keeps the fine label.
Dataset parse_cifar100(std::span<const std::uint8_t> bytes, Split split);
/// Inverse of parse_cifar10 for datasets whose pixels are multiples of 1/255.
std::vector<std::uint8_t> serialize_cifar10(const Dataset& data);

Dataset load_cifar10_file(const std::filesystem::path& path, Split split);

struct TrainTest {
    Dataset train;
    Dataset test;
};

/// Loads data_batch_1..5.bin and test_batch.bin from a directory.
TrainTest load_cifar10(const std::filesystem::path& dir);
/// Loads train.bin and test.bin from a directory.
TrainTest load_cifar100(const std::filesystem::path& dir);

/// Per-channel standardization using statistics of `reference`.
void standardize_channels(Dataset& data, const Dataset& reference);

// ---------------------------------------------------------------------------
// Synthetic data

struct SyntheticOptions {
    std::size_t n_per_class = 100;
    std::size_t classes = 10;
    std::size_t image_side = 32;
    std::size_t channels = 3;
    /// Noise std relative to the minimum distance between class patterns.
    double relative_noise = 0.1;
    std::uint64_t seed = 0;
    Split split = Split::Train;
};

/// Gaussian class blobs: each class has a fixed random mean image in [0, 1]
/// and samples add i.i.d. Gaussian pixel noise. Samples are interleaved by
/// class (0, 1, ..., k-1, 0, 1, ...). Train and test splits of the same seed
/// share the class patterns but draw different noise.
Dataset synthetic_dataset(const SyntheticOptions& options);
/// Class mean images used by synthetic_dataset for the given options.
Tensor synthetic_class_means(const SyntheticOptions& options);

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::array<char, 8> kCheckpointMagic = {'B', 'N', 'N', 'Z', 'C', 'K', 'P', 'T'};

struct CheckpointMeta {
    std::uint64_t seed = 0;
    std::string config_digest;
    bool converged = false;
};

struct Checkpoint {
    Model model;
    CheckpointMeta meta;
};

std::vector<std::uint8_t> encode_checkpoint(const Model& model, const CheckpointMeta& meta = {});
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const Model& model, const std::filesystem::path& path, const CheckpointMeta& meta = {});
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// SHA-256 over the model's encoded parameters and buffers.
std::string model_digest(const Model& model);

}  // namespace bnnoise
