#include "co4/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "co4/errors.hpp"
#include "co4/rng.hpp"

namespace co4 {

namespace fs = std::filesystem;

namespace {
constexpr size_t kImageBytes = 3072;  // 3 * 32 * 32
constexpr size_t kRecordBytes = kImageBytes + 1;
}  // namespace

DataSource data_source_from_string(const std::string& s) {
  if (s == "cifar10" || s == "cifar10_bin") return DataSource::kCifar10Bin;
  if (s == "blobs" || s == "synthetic_blobs") return DataSource::kSyntheticBlobs;
  if (s == "textures" || s == "synthetic_textures") return DataSource::kSyntheticTextures;
  throw ConfigError("unknown dataset source: " + s);
}

std::string to_string(DataSource s) {
  switch (s) {
    case DataSource::kCifar10Bin: return "cifar10_bin";
    case DataSource::kSyntheticBlobs: return "synthetic_blobs";
    case DataSource::kSyntheticTextures: return "synthetic_textures";
  }
  return "?";
}

void DatasetSpec::validate() const {
  if (image_size == 0 || patch_size == 0 || image_size % patch_size != 0) {
    throw ConfigError("dataset: image_size must be divisible by patch_size");
  }
  if (num_classes < 2) throw ConfigError("dataset: need at least two classes");
  if (source == DataSource::kCifar10Bin && image_size != 32) {
    throw ConfigError("dataset: cifar10 images are 32x32");
  }
}

RawImages read_cifar_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw FormatError("cannot open " + path);
  std::streamsize size = f.tellg();
  f.seekg(0);
  if (size <= 0 || static_cast<size_t>(size) % kRecordBytes != 0) {
    size_t offset = static_cast<size_t>(size) - (static_cast<size_t>(size) % kRecordBytes);
    throw FormatError(path + ": size " + std::to_string(size) +
                      " is not a multiple of 3073-byte records (short record at byte " +
                      std::to_string(offset) + ")");
  }
  size_t count = static_cast<size_t>(size) / kRecordBytes;
  RawImages out;
  out.labels.resize(count);
  out.pixels.resize(count * kImageBytes);
  std::vector<uint8_t> record(kRecordBytes);
  for (size_t i = 0; i < count; ++i) {
    f.read(reinterpret_cast<char*>(record.data()), kRecordBytes);
    if (static_cast<size_t>(f.gcount()) != kRecordBytes) {
      throw FormatError(path + ": short read at byte " + std::to_string(i * kRecordBytes));
    }
    if (record[0] > 9) {
      throw FormatError(path + ": label " + std::to_string(record[0]) +
                        " out of range at byte " + std::to_string(i * kRecordBytes));
    }
    out.labels[i] = record[0];
    std::copy(record.begin() + 1, record.end(), out.pixels.begin() + i * kImageBytes);
  }
  return out;
}

void write_cifar_file(const std::string& path, const RawImages& images, size_t begin,
                      size_t end) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open for write: " + path);
  for (size_t i = begin; i < end && i < images.count(); ++i) {
    uint8_t label = static_cast<uint8_t>(images.labels[i]);
    f.write(reinterpret_cast<const char*>(&label), 1);
    f.write(reinterpret_cast<const char*>(images.pixels.data() + i * kImageBytes),
            kImageBytes);
  }
  if (!f) throw FormatError("write failed: " + path);
}

Dataset normalize(const RawImages& raw, const DatasetSpec& spec, const Normalization& norm) {
  size_t count = raw.count();
  size_t hw = spec.image_size * spec.image_size;
  std::vector<double> data(count * 3 * hw);
  for (size_t i = 0; i < count; ++i) {
    for (size_t c = 0; c < 3; ++c) {
      const uint8_t* src = raw.pixels.data() + i * kImageBytes + c * hw;
      double* dst = data.data() + (i * 3 + c) * hw;
      double m = norm.mean[c], inv = 1.0 / norm.stddev[c];
      for (size_t px = 0; px < hw; ++px) {
        dst[px] = (static_cast<double>(src[px]) / 255.0 - m) * inv;
      }
    }
  }
  Dataset out;
  out.images =
      Tensor::unchecked({count, 3, spec.image_size, spec.image_size}, std::move(data));
  out.labels = raw.labels;
  return out;
}

DataBundle load_cifar10(const DatasetSpec& spec) {
  spec.validate();
  fs::path root(spec.root);
  if (!fs::exists(root / "data_batch_1.bin") || !fs::exists(root / "test_batch.bin")) {
    throw ConfigError("cifar10: expected data_batch_*.bin and test_batch.bin under " +
                      spec.root);
  }
  RawImages train;
  for (int b = 1; b <= 5 && train.count() < spec.train_limit; ++b) {
    fs::path p = root / ("data_batch_" + std::to_string(b) + ".bin");
    if (!fs::exists(p)) break;
    RawImages part = read_cifar_file(p.string());
    size_t want = spec.train_limit - train.count();
    size_t take = std::min(want, part.count());
    train.labels.insert(train.labels.end(), part.labels.begin(), part.labels.begin() + take);
    train.pixels.insert(train.pixels.end(), part.pixels.begin(),
                        part.pixels.begin() + take * kImageBytes);
  }
  RawImages val_all = read_cifar_file((root / "test_batch.bin").string());
  RawImages val;
  size_t take = std::min(spec.val_limit, val_all.count());
  val.labels.assign(val_all.labels.begin(), val_all.labels.begin() + take);
  val.pixels.assign(val_all.pixels.begin(), val_all.pixels.begin() + take * kImageBytes);

  DataBundle bundle;
  bundle.spec = spec;
  bundle.train = normalize(train, spec, bundle.norm);
  bundle.val = normalize(val, spec, bundle.norm);
  return bundle;
}

namespace {

uint8_t quantize(double v) {
  double c = std::clamp(v, 0.0, 1.0);
  return static_cast<uint8_t>(std::lround(c * 255.0));
}

}  // namespace

RawImages make_blobs(const DatasetSpec& spec, size_t count, uint64_t stream) {
  size_t hw = spec.image_size * spec.image_size;
  Rng master(spec.seed);
  Rng class_rng = master.split(0xb10b);
  // Per-class mean patterns in {-1,+1} per pixel.
  std::vector<double> means(spec.num_classes * 3 * hw);
  for (double& m : means) m = class_rng.uniform() < 0.5 ? -1.0 : 1.0;

  Rng rng = master.split(stream);
  RawImages out;
  out.labels.resize(count);
  out.pixels.resize(count * kImageBytes);
  for (size_t i = 0; i < count; ++i) {
    int cls = static_cast<int>(rng.below(spec.num_classes));
    out.labels[i] = cls;
    for (size_t c = 0; c < 3; ++c) {
      for (size_t px = 0; px < hw; ++px) {
        double mean = 0.5 + 0.22 * means[(static_cast<size_t>(cls) * 3 + c) * hw + px];
        out.pixels[i * kImageBytes + c * hw + px] = quantize(mean + rng.normal(0.0, 0.08));
      }
    }
  }
  return out;
}

RawImages make_textures(const DatasetSpec& spec, size_t count, uint64_t stream) {
  size_t side = spec.image_size;
  size_t hw = side * side;
  Rng rng = Rng(spec.seed).split(stream ^ 0x7e57);
  RawImages out;
  out.labels.resize(count);
  out.pixels.resize(count * kImageBytes);
  // Channel weights are identical across classes: color carries no label
  // information, class identity lives in the local orientation/frequency of
  // a Gabor-like patch with random phase and position.
  const double chan_w[3] = {0.9, 0.7, 0.5};
  for (size_t i = 0; i < count; ++i) {
    int cls = static_cast<int>(rng.below(spec.num_classes));
    out.labels[i] = cls;
    double theta = (cls % 5) * (std::numbers::pi / 5.0);
    double freq = cls < static_cast<int>(spec.num_classes / 2) ? 3.0 : 6.0;
    double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    double amp = rng.uniform(0.30, 0.45);
    double cx = rng.uniform(8.0, side - 8.0);
    double cy = rng.uniform(8.0, side - 8.0);
    double ct = std::cos(theta), st = std::sin(theta);
    for (size_t y = 0; y < side; ++y) {
      for (size_t x = 0; x < side; ++x) {
        double bg = rng.uniform(0.35, 0.65);
        double dx = static_cast<double>(x) - cx;
        double dy = static_cast<double>(y) - cy;
        double envelope = std::exp(-(dx * dx + dy * dy) / (2.0 * 4.0 * 4.0));
        double carrier =
            std::sin(2.0 * std::numbers::pi * freq * (dx * ct + dy * st) / 16.0 + phase);
        double tex = amp * envelope * carrier;
        for (size_t c = 0; c < 3; ++c) {
          out.pixels[i * kImageBytes + c * hw + y * side + x] =
              quantize(bg + chan_w[c] * tex);
        }
      }
    }
  }
  return out;
}

DataBundle load_dataset(const DatasetSpec& spec) {
  spec.validate();
  if (spec.source == DataSource::kCifar10Bin) return load_cifar10(spec);
  DataBundle bundle;
  bundle.spec = spec;
  RawImages train = spec.source == DataSource::kSyntheticBlobs
                        ? make_blobs(spec, spec.train_limit, 1)
                        : make_textures(spec, spec.train_limit, 1);
  RawImages val = spec.source == DataSource::kSyntheticBlobs
                      ? make_blobs(spec, spec.val_limit, 2)
                      : make_textures(spec, spec.val_limit, 2);
  bundle.train = normalize(train, spec, bundle.norm);
  bundle.val = normalize(val, spec, bundle.norm);
  return bundle;
}

Tensor patchify(const Tensor& images, size_t patch) {
  if (images.rank() != 4) throw ShapeError("patchify: expected (B, C, H, W)");
  size_t b = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  if (patch == 0 || h % patch != 0 || w % patch != 0) {
    throw ShapeError("patchify: H and W must be divisible by the patch size");
  }
  size_t gh = h / patch, gw = w / patch, n = gh * gw, pd = c * patch * patch;
  std::vector<double> out(b * n * pd);
  const double* src = images.data();
  for (size_t bi = 0; bi < b; ++bi) {
    for (size_t gy = 0; gy < gh; ++gy) {
      for (size_t gx = 0; gx < gw; ++gx) {
        size_t token = gy * gw + gx;
        double* dst = out.data() + (bi * n + token) * pd;
        size_t o = 0;
        for (size_t ci = 0; ci < c; ++ci) {
          for (size_t py = 0; py < patch; ++py) {
            const double* row =
                src + ((bi * c + ci) * h + gy * patch + py) * w + gx * patch;
            for (size_t px = 0; px < patch; ++px) dst[o++] = row[px];
          }
        }
      }
    }
  }
  return Tensor::unchecked({b, n, pd}, std::move(out));
}

Tensor unpatchify(const Tensor& tokens, size_t channels, size_t height, size_t width,
                  size_t patch) {
  if (tokens.rank() != 3) throw ShapeError("unpatchify: expected (B, N, P)");
  size_t b = tokens.dim(0), n = tokens.dim(1), pd = tokens.dim(2);
  size_t gh = height / patch, gw = width / patch;
  if (n != gh * gw || pd != channels * patch * patch) {
    throw ShapeError("unpatchify: token geometry mismatch");
  }
  std::vector<double> out(b * channels * height * width);
  const double* src = tokens.data();
  for (size_t bi = 0; bi < b; ++bi) {
    for (size_t gy = 0; gy < gh; ++gy) {
      for (size_t gx = 0; gx < gw; ++gx) {
        size_t token = gy * gw + gx;
        const double* tk = src + (bi * n + token) * pd;
        size_t o = 0;
        for (size_t ci = 0; ci < channels; ++ci) {
          for (size_t py = 0; py < patch; ++py) {
            double* row =
                out.data() + ((bi * channels + ci) * height + gy * patch + py) * width +
                gx * patch;
            for (size_t px = 0; px < patch; ++px) row[px] = tk[o++];
          }
        }
      }
    }
  }
  return Tensor::unchecked({b, channels, height, width}, std::move(out));
}

Tensor gather_patches(const Dataset& data, const std::vector<size_t>& idx, size_t patch) {
  size_t c = data.images.dim(1), h = data.images.dim(2), w = data.images.dim(3);
  size_t img = c * h * w;
  std::vector<double> batch(idx.size() * img);
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= data.count()) throw ShapeError("gather_patches: index out of range");
    std::copy(data.images.data() + idx[i] * img, data.images.data() + (idx[i] + 1) * img,
              batch.begin() + i * img);
  }
  Tensor imgs = Tensor::unchecked({idx.size(), c, h, w}, std::move(batch));
  return patchify(imgs, patch);
}

}  // namespace co4
