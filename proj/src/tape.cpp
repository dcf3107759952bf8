#include "co4/tape.hpp"

#include "co4/errors.hpp"

namespace co4 {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

TapeScope::TapeScope(Tape& tape) : prev_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = prev_; }
Tape* active_tape() { return g_active_tape; }

Tensor Tape::watch(const Tensor& t) {
  Node n;
  n.size = t.size();
  nodes_.push_back(std::move(n));
  return t.with_node(static_cast<int>(nodes_.size()) - 1);
}

int Tape::add_node(size_t out_size, std::vector<int> inputs, BackwardFn backward) {
  Node n;
  n.inputs = std::move(inputs);
  n.size = out_size;
  n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  if (!loss.tracked()) {
    throw ShapeError("backward: loss is not tracked on this tape");
  }
  grads_.assign(nodes_.size(), {});
  int root = loss.node();
  grads_[root] = {1.0};
  for (int i = root; i >= 0; --i) {
    if (grads_[i].empty()) continue;
    if (nodes_[i].backward) nodes_[i].backward(*this, grads_[i]);
  }
}

std::optional<Tensor> Tape::try_grad(const Tensor& t) const {
  if (!t.tracked()) return std::nullopt;
  size_t id = static_cast<size_t>(t.node());
  if (id >= grads_.size() || grads_[id].empty()) return std::nullopt;
  return Tensor::unchecked(t.shape(), grads_[id]);
}

Tensor Tape::grad(const Tensor& t) const {
  auto g = try_grad(t);
  if (!g) throw NumericError("grad: no gradient recorded for this tensor");
  return *g;
}

void Tape::accum(int node, const std::vector<double>& g) { accum(node, g.data(), g.size()); }

void Tape::accum(int node, const double* g, size_t n) {
  auto& buf = grad_buffer(node);
  for (size_t i = 0; i < n; ++i) buf[i] += g[i];
}

std::vector<double>& Tape::grad_buffer(int node) {
  auto& buf = grads_[static_cast<size_t>(node)];
  if (buf.empty()) buf.assign(nodes_[static_cast<size_t>(node)].size, 0.0);
  return buf;
}

void Tape::clear() {
  nodes_.clear();
  grads_.clear();
}

}  // namespace co4
