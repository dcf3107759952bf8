#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "co4/tensor.hpp"

namespace co4 {

// Reverse-mode tape. Nodes are appended in execution order, so node ids are
// already a topological order of the DAG (inputs of node i all have id < i).
// A tape is confined to one logical thread; run independent jobs on
// independent tapes.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers a leaf. Returns the same tensor carrying a node id.
  Tensor watch(const Tensor& t);

  // Registers an op output. `backward` receives this tape and the output
  // gradient and must accumulate into the inputs via accum().
  using BackwardFn = std::function<void(Tape&, const std::vector<double>&)>;
  int add_node(size_t out_size, std::vector<int> inputs, BackwardFn backward);

  // Reverse accumulation from a scalar tracked loss. Grad buffers are reset
  // on each call.
  void backward(const Tensor& loss);

  // Gradient of the loss w.r.t. a tracked tensor; absent when the tensor did
  // not influence the loss (or was never tracked).
  std::optional<Tensor> try_grad(const Tensor& t) const;
  Tensor grad(const Tensor& t) const;

  // Accumulate `g` (length = node size) into node's grad buffer.
  void accum(int node, const std::vector<double>& g);
  void accum(int node, const double* g, size_t n);
  std::vector<double>& grad_buffer(int node);

  size_t num_nodes() const { return nodes_.size(); }
  void clear();

 private:
  struct Node {
    std::vector<int> inputs;
    size_t size = 0;
    BackwardFn backward;  // empty for leaves
  };
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
};

// RAII scope that makes `tape` the active tape for ops on this thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

Tape* active_tape();

}  // namespace co4
