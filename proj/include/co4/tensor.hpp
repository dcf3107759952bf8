#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

namespace co4 {

// Dense row-major f64 tensor. Values are immutable after construction; ops
// produce fresh tensors. Copies share the underlying buffer. `node` is the
// handle into the tape that produced the tensor (-1 = not tracked).
class Tensor {
 public:
  Tensor() = default;

  // Validating constructor: rejects non-finite values and shape/data mismatch.
  Tensor(std::vector<size_t> shape, std::vector<double> data);

  static Tensor zeros(std::vector<size_t> shape);
  static Tensor ones(std::vector<size_t> shape);
  static Tensor full(std::vector<size_t> shape, double value);
  static Tensor scalar(double value);

  // Internal fast path for op outputs; skips the finite check (the debug
  // NaN sentinel in ops.cpp covers op outputs when enabled).
  static Tensor unchecked(std::vector<size_t> shape, std::vector<double> data);

  const std::vector<size_t>& shape() const { return shape_; }
  size_t rank() const { return shape_.size(); }
  size_t dim(size_t i) const { return shape_[i]; }
  size_t size() const { return data_ ? data_->size() : 0; }
  bool empty() const { return size() == 0; }

  const double* data() const { return data_->data(); }
  const std::vector<double>& vec() const { return *data_; }
  double operator[](size_t i) const { return (*data_)[i]; }
  double at2(size_t i, size_t j) const { return (*data_)[i * shape_[1] + j]; }

  // Value of a single-element tensor.
  double item() const;

  // Same buffer and tape node, new shape (element count must match).
  Tensor reshaped(std::vector<size_t> new_shape) const;

  int node() const { return node_; }
  bool tracked() const { return node_ >= 0; }
  Tensor with_node(int node) const;
  Tensor detached() const { return with_node(-1); }

  bool all_finite() const;

  // Binary format: magic "CO4T", u32 rank, u32 dims..., f64 payload,
  // little-endian throughout. Used by checkpointing.
  void save(std::ostream& os) const;
  void save_file(const std::string& path) const;
  static Tensor load(std::istream& is);
  static Tensor load_file(const std::string& path);

 private:
  std::vector<size_t> shape_;
  std::shared_ptr<const std::vector<double>> data_;
  int node_ = -1;
};

size_t shape_product(const std::vector<size_t>& shape);
std::string shape_str(const std::vector<size_t>& shape);

}  // namespace co4
