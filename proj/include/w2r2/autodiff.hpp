#pragma once

// Minimal tape-based reverse-mode automatic differentiation over dense
// row-major float64 tensors.
//
// A Graph is an append-only tape. Every operation validates shapes (there is
// no implicit broadcasting), computes its forward value eagerly and records
// what backward needs. Parameters enter the tape by reference: the graph reads
// the caller's storage and never copies it, so two forward passes that bind
// the same parameter node read bit-identical values.
//
// Graphs are single-owner objects. Build one per sample (or per step), use it,
// drop it.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "w2r2/error.hpp"

namespace w2r2::ad {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

class Tensor {
 public:
  Tensor() = default;
  // Throws ShapeError on a length mismatch or zero-sized dimension and
  // NumericError on non-finite data.
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape);
  static Tensor filled(Shape shape, double value);
  static Tensor scalar(double value);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Product of all but the last dimension, and the last dimension.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return data_; }
  std::span<double> mutable_data() { return data_; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double at(std::size_t row, std::size_t col) const { return data_[row * cols() + col]; }

  // Value of a single-element tensor.
  double item() const;

  bool all_finite() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Handle into a Graph. Only meaningful for the graph that produced it.
struct Var {
  std::uint32_t id = 0;
};

enum class OpKind : std::uint8_t {
  constant,
  parameter,
  add,
  sub,
  mul,
  matmul,
  relu,
  softmax,
  log_softmax,
  concat,
  mean,
  sum,
  stop_gradient,
  exp,
  scale,
  reshape,
  slice,
  custom,
};

const char* op_name(OpKind kind);

// Backward rule for a custom operation: receives the gradient of the
// operation's output and returns one gradient per input, shaped like the
// inputs (an empty Tensor means "no contribution").
using CustomBackward = std::function<std::vector<Tensor>(const Tensor& grad_out)>;

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  Var constant(Tensor value);
  // Trainable leaf reading `storage` in place. `storage` must outlive the
  // graph and must not be resized while the graph is alive.
  Var parameter(const Tensor& storage);

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var matmul(Var a, Var b);
  Var relu(Var x);
  Var softmax(Var x);
  Var log_softmax(Var x);
  Var concat(Var a, Var b);
  Var mean(Var x);
  Var sum(Var x);
  Var stop_gradient(Var x);
  Var exp(Var x);
  Var scale(Var x, double factor);
  Var reshape(Var x, Shape shape);
  // Columns [begin, end) of the last axis.
  Var slice(Var x, std::size_t begin, std::size_t end);
  // `branch_bits` feeds the branch signature (see below); pass the branch
  // decisions of any kinked function so gradient checks can detect crossings.
  Var custom(std::vector<Var> inputs, Tensor value, CustomBackward backward,
             std::uint64_t branch_bits = 0);

  const Tensor& value(Var v) const;
  OpKind kind(Var v) const;
  std::span<const std::uint32_t> inputs(Var v) const;
  // Storage a parameter node reads from; nullptr for every other node.
  const Tensor* parameter_storage(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  // Reverse-mode sweep from a scalar (single-element) loss. Gradients of a
  // previous sweep are discarded. Throws ShapeError for a non-scalar loss.
  void backward(Var loss);

  // Gradient of the last backward sweep; nullptr when no gradient reached v.
  const Tensor* grad(Var v) const;
  // Same, but zeros shaped like v when nothing reached it.
  Tensor grad_or_zeros(Var v) const;

  // Hash of every branch decision taken by kinked primitives (relu masks,
  // custom-op bits). Two forward evaluations with equal signatures lie on the
  // same smooth piece of the function.
  std::uint64_t branch_signature() const { return branch_signature_; }

 private:
  struct Node {
    OpKind kind = OpKind::constant;
    std::uint32_t in0 = 0;
    std::uint32_t in1 = 0;
    std::uint8_t arity = 0;
    std::vector<std::uint32_t> extra_inputs;  // custom ops only
    Tensor value;                             // empty for parameters
    const Tensor* storage = nullptr;          // parameters only
    double factor = 0.0;                      // scale
    std::size_t begin = 0;                    // slice
    std::size_t end = 0;                      // slice
    CustomBackward custom_backward;
  };

  Var push(Node node);
  const Node& node(Var v) const;
  void mix_branch(std::uint64_t bits);
  void accumulate(std::uint32_t id, const Tensor& g);
  void accumulate(std::uint32_t id, std::vector<double>&& g);

  std::vector<Node> nodes_;
  std::vector<std::optional<Tensor>> grads_;
  std::uint64_t branch_signature_ = 0x9e3779b97f4a7c15ULL;
};

// Builds a scalar loss in `graph` from parameter nodes bound in the order of
// the `params` span handed to check_gradients.
using LossBuilder = std::function<Var(Graph& graph, std::span<const Var> params)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  // Coordinates whose +-eps evaluations crossed a kink and were not compared.
  std::size_t skipped = 0;
};

// Central-difference gradient check of every coordinate of every parameter.
// Relative error is |analytic - numeric| / max(|analytic|, |numeric|), with the
// plain absolute difference when both magnitudes are below 1e-6. Parameters
// are perturbed in place and restored. Throws ConfigError for eps outside
// (0, 1e-2] and Error when two evaluations at the same point disagree.
GradCheckReport check_gradients(const LossBuilder& build_loss, std::span<Tensor> params,
                                double eps);

}  // namespace w2r2::ad
