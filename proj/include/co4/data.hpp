#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "co4/tensor.hpp"

namespace co4 {

enum class DataSource { kCifar10Bin, kSyntheticBlobs, kSyntheticTextures };

DataSource data_source_from_string(const std::string& s);
std::string to_string(DataSource s);

struct DatasetSpec {
  DataSource source = DataSource::kSyntheticTextures;
  std::string root;  // directory holding data_batch_*.bin / test_batch.bin
  size_t train_limit = 5000;
  size_t val_limit = 1000;
  size_t patch_size = 4;
  size_t image_size = 32;
  size_t num_classes = 10;
  uint64_t seed = 0;  // synthetic generation stream

  size_t tokens() const {
    size_t s = image_size / patch_size;
    return s * s;
  }
  size_t patch_dim() const { return 3 * patch_size * patch_size; }
  void validate() const;
};

// Per-channel normalization constants applied after scaling bytes to [0,1];
// fixed (not recomputed per subset) and recorded in the run manifest.
struct Normalization {
  std::array<double, 3> mean{0.4914, 0.4822, 0.4465};
  std::array<double, 3> stddev{0.2470, 0.2435, 0.2616};
};

struct Dataset {
  Tensor images;  // (count, 3, H, W), normalized
  std::vector<int> labels;
  size_t count() const { return labels.size(); }
};

struct DataBundle {
  DatasetSpec spec;
  Normalization norm;
  Dataset train;
  Dataset val;
};

// Raw byte-level image set in the CIFAR-10 binary layout (channel-major
// 3072-byte pixels per record).
struct RawImages {
  std::vector<uint8_t> pixels;  // count * 3072
  std::vector<int> labels;
  size_t count() const { return labels.size(); }
};

// Readers/writers for the exact 3073-byte-record binary format.
RawImages read_cifar_file(const std::string& path);
void write_cifar_file(const std::string& path, const RawImages& images, size_t begin,
                      size_t end);

// Loads train/val splits from a cifar-10-batches-bin style directory
// (data_batch_1..5.bin + test_batch.bin). Throws FormatError on malformed
// files, ConfigError when the directory lacks the expected files.
DataBundle load_cifar10(const DatasetSpec& spec);

// Deterministic synthetic generators (byte-quantized, then normalized through
// the same path as file data).
RawImages make_blobs(const DatasetSpec& spec, size_t count, uint64_t stream);
RawImages make_textures(const DatasetSpec& spec, size_t count, uint64_t stream);

// Dispatch over spec.source.
DataBundle load_dataset(const DatasetSpec& spec);

// Normalizes raw bytes into a Dataset.
Dataset normalize(const RawImages& raw, const DatasetSpec& spec, const Normalization& norm);

// (B,C,H,W) -> (B, N, C*patch^2), row-major patch order; unpatchify is the
// exact inverse.
Tensor patchify(const Tensor& images, size_t patch);
Tensor unpatchify(const Tensor& tokens, size_t channels, size_t height, size_t width,
                  size_t patch);

// Gathers a batch (by dataset indices) as patch tokens plus labels.
Tensor gather_patches(const Dataset& data, const std::vector<size_t>& idx, size_t patch);

}  // namespace co4
