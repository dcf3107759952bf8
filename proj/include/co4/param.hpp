#pragma once

#include <string>
#include <utility>
#include <vector>

#include "co4/tape.hpp"
#include "co4/tensor.hpp"

namespace co4 {

// A learnable tensor plus its optimizer state. `live` is the tape-tracked
// alias used inside a training step; untracked evaluation uses `value`.
struct Param {
  std::string name;
  Tensor value;
  Tensor live;
  Tensor adam_m, adam_v;

  Param() = default;
  Param(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {}

  void prepare(Tape* tape) { live = tape ? tape->watch(value) : value; }
};

using ParamRefs = std::vector<Param*>;

}  // namespace co4
