#include "co4/tensor.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "co4/errors.hpp"

namespace co4 {

size_t shape_product(const std::vector<size_t>& shape) {
  size_t n = 1;
  for (size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const std::vector<size_t>& shape) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ")";
  return os.str();
}

Tensor::Tensor(std::vector<size_t> shape, std::vector<double> data) {
  if (shape_product(shape) != data.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape) + " does not match data length " +
                     std::to_string(data.size()));
  }
  for (size_t d : shape) {
    if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + shape_str(shape));
  }
  for (double v : data) {
    if (!std::isfinite(v)) throw NumericError("tensor: non-finite value at construction");
  }
  shape_ = std::move(shape);
  data_ = std::make_shared<const std::vector<double>>(std::move(data));
}

Tensor Tensor::unchecked(std::vector<size_t> shape, std::vector<double> data) {
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::make_shared<const std::vector<double>>(std::move(data));
  return t;
}

Tensor Tensor::zeros(std::vector<size_t> shape) { return full(std::move(shape), 0.0); }
Tensor Tensor::ones(std::vector<size_t> shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(std::vector<size_t> shape, double value) {
  size_t n = shape_product(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item(): tensor has " + std::to_string(size()) + " elements");
  return (*data_)[0];
}

Tensor Tensor::reshaped(std::vector<size_t> new_shape) const {
  if (shape_product(new_shape) != size()) {
    throw ShapeError("reshape: " + shape_str(shape_) + " -> " + shape_str(new_shape));
  }
  Tensor t = *this;
  t.shape_ = std::move(new_shape);
  return t;
}

Tensor Tensor::with_node(int node) const {
  Tensor t = *this;
  t.node_ = node;
  return t;
}

bool Tensor::all_finite() const {
  for (double v : *data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

namespace {
constexpr char kMagic[4] = {'C', 'O', '4', 'T'};
}

void Tensor::save(std::ostream& os) const {
  os.write(kMagic, 4);
  uint32_t rank = static_cast<uint32_t>(shape_.size());
  os.write(reinterpret_cast<const char*>(&rank), 4);
  for (size_t d : shape_) {
    uint32_t d32 = static_cast<uint32_t>(d);
    os.write(reinterpret_cast<const char*>(&d32), 4);
  }
  os.write(reinterpret_cast<const char*>(data_->data()),
           static_cast<std::streamsize>(data_->size() * sizeof(double)));
}

void Tensor::save_file(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open for write: " + path);
  save(f);
  if (!f) throw FormatError("write failed: " + path);
}

Tensor Tensor::load(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (is.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError("tensor load: bad magic at byte 0");
  }
  uint32_t rank = 0;
  is.read(reinterpret_cast<char*>(&rank), 4);
  if (is.gcount() != 4) throw FormatError("tensor load: short read at byte 4");
  if (rank > 8) throw FormatError("tensor load: implausible rank " + std::to_string(rank));
  std::vector<size_t> shape(rank);
  for (uint32_t i = 0; i < rank; ++i) {
    uint32_t d = 0;
    is.read(reinterpret_cast<char*>(&d), 4);
    if (is.gcount() != 4) {
      throw FormatError("tensor load: short read at byte " + std::to_string(8 + 4 * i));
    }
    shape[i] = d;
  }
  size_t n = shape_product(shape);
  std::vector<double> data(n);
  is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (static_cast<size_t>(is.gcount()) != n * sizeof(double)) {
    throw FormatError("tensor load: short payload, got " + std::to_string(is.gcount()) +
                      " of " + std::to_string(n * sizeof(double)) + " bytes");
  }
  return Tensor(std::move(shape), std::move(data));
}

Tensor Tensor::load_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open: " + path);
  return load(f);
}

}  // namespace co4
