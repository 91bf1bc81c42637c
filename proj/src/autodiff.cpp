#include "w2r2/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <utility>

namespace w2r2::ad {

namespace {

std::size_t product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void require(bool ok, const char* op, const std::string& what) {
  if (!ok) throw ShapeError(std::string(op) + ": " + what);
}

Tensor make(Shape shape, std::vector<double> data) { return Tensor(std::move(shape), std::move(data)); }

// Row-wise view helpers for last-axis operations.
struct Rows {
  std::size_t rows;
  std::size_t cols;
};

Rows rows_of(const Tensor& t) { return {t.rows(), t.cols()}; }

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
  out << ']';
  return out.str();
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_.empty()) shape_ = {1};
  for (std::size_t d : shape_)
    if (d == 0) throw ShapeError("tensor: zero-sized dimension in shape " + shape_string(shape_));
  if (product(shape_) != data_.size())
    throw ShapeError("tensor: shape " + shape_string(shape_) + " needs " + std::to_string(product(shape_)) +
                     " values, got " + std::to_string(data_.size()));
  if (!all_finite()) throw NumericError("tensor: non-finite value in data of shape " + shape_string(shape_));
}

Tensor Tensor::zeros(Shape shape) { return filled(std::move(shape), 0.0); }

Tensor Tensor::filled(Shape shape, double value) {
  if (shape.empty()) shape = {1};
  const std::size_t n = product(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

std::size_t Tensor::rows() const { return shape_.empty() ? 0 : size() / shape_.back(); }
std::size_t Tensor::cols() const { return shape_.empty() ? 0 : shape_.back(); }

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item: tensor of shape " + shape_string(shape_) + " is not a scalar");
  return data_[0];
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::constant: return "constant";
    case OpKind::parameter: return "parameter";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::matmul: return "matmul";
    case OpKind::relu: return "relu";
    case OpKind::softmax: return "softmax";
    case OpKind::log_softmax: return "log_softmax";
    case OpKind::concat: return "concat";
    case OpKind::mean: return "mean";
    case OpKind::sum: return "sum";
    case OpKind::stop_gradient: return "stop_gradient";
    case OpKind::exp: return "exp";
    case OpKind::scale: return "scale";
    case OpKind::reshape: return "reshape";
    case OpKind::slice: return "slice";
    case OpKind::custom: return "custom";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Graph construction

Var Graph::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

const Graph::Node& Graph::node(Var v) const {
  if (v.id >= nodes_.size()) throw ShapeError("graph: variable " + std::to_string(v.id) + " is not in this graph");
  return nodes_[v.id];
}

void Graph::mix_branch(std::uint64_t bits) {
  branch_signature_ ^= bits + 0x9e3779b97f4a7c15ULL + (branch_signature_ << 6) + (branch_signature_ >> 2);
}

const Tensor& Graph::value(Var v) const {
  const Node& n = node(v);
  return n.storage ? *n.storage : n.value;
}

OpKind Graph::kind(Var v) const { return node(v).kind; }

std::span<const std::uint32_t> Graph::inputs(Var v) const {
  const Node& n = node(v);
  if (n.kind == OpKind::custom) return n.extra_inputs;
  return std::span<const std::uint32_t>(&n.in0, n.arity);
}

const Tensor* Graph::parameter_storage(Var v) const { return node(v).storage; }

Var Graph::constant(Tensor value) {
  Node n;
  n.kind = OpKind::constant;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Graph::parameter(const Tensor& storage) {
  if (storage.empty()) throw ShapeError("parameter: empty tensor");
  if (!storage.all_finite()) throw NumericError("parameter: non-finite value");
  Node n;
  n.kind = OpKind::parameter;
  n.storage = &storage;
  return push(std::move(n));
}

namespace {

template <class F>
std::vector<double> zip(const Tensor& a, const Tensor& b, F f) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

}  // namespace

Var Graph::add(Var a, Var b) {
  const Tensor& x = value(a);
  const Tensor& y = value(b);
  require(x.shape() == y.shape(), "add", shape_string(x.shape()) + " vs " + shape_string(y.shape()));
  Node n{OpKind::add, a.id, b.id, 2};
  n.value = make(x.shape(), zip(x, y, std::plus<>()));
  return push(std::move(n));
}

Var Graph::sub(Var a, Var b) {
  const Tensor& x = value(a);
  const Tensor& y = value(b);
  require(x.shape() == y.shape(), "sub", shape_string(x.shape()) + " vs " + shape_string(y.shape()));
  Node n{OpKind::sub, a.id, b.id, 2};
  n.value = make(x.shape(), zip(x, y, std::minus<>()));
  return push(std::move(n));
}

Var Graph::mul(Var a, Var b) {
  const Tensor& x = value(a);
  const Tensor& y = value(b);
  require(x.shape() == y.shape(), "mul", shape_string(x.shape()) + " vs " + shape_string(y.shape()));
  Node n{OpKind::mul, a.id, b.id, 2};
  n.value = make(x.shape(), zip(x, y, std::multiplies<>()));
  return push(std::move(n));
}

namespace {

// out[m,n] = a[m,k] * b[k,n]
void gemm(const double* a, const double* b, double* out, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = a[i * k + p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += s * brow[j];
    }
  }
}

}  // namespace

Var Graph::matmul(Var a, Var b) {
  const Tensor& x = value(a);
  const Tensor& y = value(b);
  require(x.rank() == 2 && y.rank() == 2, "matmul",
          "rank-2 operands required, got " + shape_string(x.shape()) + " and " + shape_string(y.shape()));
  require(x.dim(1) == y.dim(0), "matmul",
          "inner dimensions differ: " + shape_string(x.shape()) + " x " + shape_string(y.shape()));
  const std::size_t m = x.dim(0), k = x.dim(1), p = y.dim(1);
  std::vector<double> out(m * p, 0.0);
  gemm(x.data().data(), y.data().data(), out.data(), m, k, p);
  Node n{OpKind::matmul, a.id, b.id, 2};
  n.value = make({m, p}, std::move(out));
  return push(std::move(n));
}

Var Graph::relu(Var x) {
  const Tensor& v = value(x);
  std::vector<double> out(v.size());
  std::uint64_t bits = 0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const bool on = v[i] > 0.0;
    out[i] = on ? v[i] : 0.0;
    bits = bits * 31 + (on ? 1 : 0);
    if ((i & 63) == 63) {
      mix_branch(bits);
      bits = 0;
    }
  }
  mix_branch(bits);
  Node n{OpKind::relu, x.id, 0, 1};
  n.value = make(v.shape(), std::move(out));
  return push(std::move(n));
}

Var Graph::softmax(Var x) {
  const Tensor& v = value(x);
  const auto [rows, cols] = rows_of(v);
  std::vector<double> out(v.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = v.data().data() + r * cols;
    double* o = out.data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += (o[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) o[c] /= z;
  }
  Node n{OpKind::softmax, x.id, 0, 1};
  n.value = make(v.shape(), std::move(out));
  return push(std::move(n));
}

Var Graph::log_softmax(Var x) {
  const Tensor& v = value(x);
  const auto [rows, cols] = rows_of(v);
  std::vector<double> out(v.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = v.data().data() + r * cols;
    double* o = out.data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(in[c] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < cols; ++c) o[c] = in[c] - lse;
  }
  Node n{OpKind::log_softmax, x.id, 0, 1};
  n.value = make(v.shape(), std::move(out));
  return push(std::move(n));
}

Var Graph::concat(Var a, Var b) {
  const Tensor& x = value(a);
  const Tensor& y = value(b);
  require(x.rank() == y.rank(), "concat", "rank mismatch " + shape_string(x.shape()) + " vs " + shape_string(y.shape()));
  for (std::size_t d = 0; d + 1 < x.rank(); ++d)
    require(x.dim(d) == y.dim(d), "concat",
            "leading dimensions differ: " + shape_string(x.shape()) + " vs " + shape_string(y.shape()));
  const std::size_t rows = x.rows(), cx = x.cols(), cy = y.cols();
  std::vector<double> out;
  out.reserve(x.size() + y.size());
  for (std::size_t r = 0; r < rows; ++r) {
    out.insert(out.end(), x.data().begin() + r * cx, x.data().begin() + (r + 1) * cx);
    out.insert(out.end(), y.data().begin() + r * cy, y.data().begin() + (r + 1) * cy);
  }
  Shape shape = x.shape();
  shape.back() = cx + cy;
  Node n{OpKind::concat, a.id, b.id, 2};
  n.value = make(std::move(shape), std::move(out));
  return push(std::move(n));
}

Var Graph::sum(Var x) {
  const Tensor& v = value(x);
  double s = 0.0;
  for (double e : v.data()) s += e;
  Node n{OpKind::sum, x.id, 0, 1};
  n.value = Tensor::scalar(s);
  return push(std::move(n));
}

Var Graph::mean(Var x) {
  const Tensor& v = value(x);
  double s = 0.0;
  for (double e : v.data()) s += e;
  Node n{OpKind::mean, x.id, 0, 1};
  n.value = Tensor::scalar(s / static_cast<double>(v.size()));
  return push(std::move(n));
}

Var Graph::stop_gradient(Var x) {
  Node n{OpKind::stop_gradient, x.id, 0, 1};
  n.value = value(x);
  return push(std::move(n));
}

Var Graph::exp(Var x) {
  const Tensor& v = value(x);
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(v[i]);
  Node n{OpKind::exp, x.id, 0, 1};
  n.value = make(v.shape(), std::move(out));
  return push(std::move(n));
}

Var Graph::scale(Var x, double factor) {
  if (!std::isfinite(factor)) throw NumericError("scale: non-finite factor");
  const Tensor& v = value(x);
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] * factor;
  Node n{OpKind::scale, x.id, 0, 1};
  n.value = make(v.shape(), std::move(out));
  n.factor = factor;
  return push(std::move(n));
}

Var Graph::reshape(Var x, Shape shape) {
  const Tensor& v = value(x);
  require(product(shape) == v.size(), "reshape", shape_string(v.shape()) + " -> " + shape_string(shape));
  Node n{OpKind::reshape, x.id, 0, 1};
  n.value = make(std::move(shape), std::vector<double>(v.data().begin(), v.data().end()));
  return push(std::move(n));
}

Var Graph::slice(Var x, std::size_t begin, std::size_t end) {
  const Tensor& v = value(x);
  require(begin < end && end <= v.cols(), "slice",
          "columns [" + std::to_string(begin) + "," + std::to_string(end) + ") out of " + shape_string(v.shape()));
  const std::size_t rows = v.rows(), cols = v.cols(), w = end - begin;
  std::vector<double> out;
  out.reserve(rows * w);
  for (std::size_t r = 0; r < rows; ++r)
    out.insert(out.end(), v.data().begin() + r * cols + begin, v.data().begin() + r * cols + end);
  Shape shape = v.shape();
  shape.back() = w;
  Node n{OpKind::slice, x.id, 0, 1};
  n.value = make(std::move(shape), std::move(out));
  n.begin = begin;
  n.end = end;
  return push(std::move(n));
}

Var Graph::custom(std::vector<Var> inputs, Tensor value, CustomBackward backward, std::uint64_t branch_bits) {
  if (value.empty()) throw ShapeError("custom: empty value");
  if (!value.all_finite()) throw NumericError("custom: non-finite value");
  Node n;
  n.kind = OpKind::custom;
  for (Var v : inputs) {
    node(v);
    n.extra_inputs.push_back(v.id);
  }
  n.value = std::move(value);
  n.custom_backward = std::move(backward);
  mix_branch(branch_bits);
  return push(std::move(n));
}

// ---------------------------------------------------------------------------
// Backward

void Graph::accumulate(std::uint32_t id, const Tensor& g) {
  auto& slot = grads_[id];
  if (!slot) {
    slot = g;
    return;
  }
  auto dst = slot->mutable_data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
}

void Graph::accumulate(std::uint32_t id, std::vector<double>&& g) {
  auto& slot = grads_[id];
  if (!slot) {
    slot = make(value(Var{id}).shape(), std::move(g));
    return;
  }
  auto dst = slot->mutable_data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
}

void Graph::backward(Var loss) {
  const Tensor& lv = value(loss);
  if (lv.size() != 1) throw ShapeError("backward: loss must be a scalar, got shape " + shape_string(lv.shape()));
  grads_.assign(nodes_.size(), std::nullopt);
  grads_[loss.id] = Tensor::filled(lv.shape(), 1.0);

  for (std::size_t idx = loss.id + 1; idx-- > 0;) {
    if (!grads_[idx]) continue;
    const Node& n = nodes_[idx];
    const Tensor& g = *grads_[idx];
    const Tensor& y = n.storage ? *n.storage : n.value;
    switch (n.kind) {
      case OpKind::constant:
      case OpKind::parameter:
      case OpKind::stop_gradient:
        break;
      case OpKind::add:
        accumulate(n.in0, g);
        accumulate(n.in1, g);
        break;
      case OpKind::sub: {
        accumulate(n.in0, g);
        std::vector<double> neg(g.size());
        for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = -g[i];
        accumulate(n.in1, std::move(neg));
        break;
      }
      case OpKind::mul: {
        const Tensor& a = value(Var{n.in0});
        const Tensor& b = value(Var{n.in1});
        accumulate(n.in0, zip(g, b, std::multiplies<>()));
        accumulate(n.in1, zip(g, a, std::multiplies<>()));
        break;
      }
      case OpKind::matmul: {
        const Tensor& a = value(Var{n.in0});
        const Tensor& b = value(Var{n.in1});
        const std::size_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
        std::vector<double> ga(m * k, 0.0), gb(k * p, 0.0);
        // ga = g * b^T
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t q = 0; q < k; ++q) {
            double s = 0.0;
            for (std::size_t j = 0; j < p; ++j) s += g[i * p + j] * b[q * p + j];
            ga[i * k + q] = s;
          }
        // gb = a^T * g
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t q = 0; q < k; ++q) {
            const double s = a[i * k + q];
            for (std::size_t j = 0; j < p; ++j) gb[q * p + j] += s * g[i * p + j];
          }
        accumulate(n.in0, std::move(ga));
        accumulate(n.in1, std::move(gb));
        break;
      }
      case OpKind::relu: {
        const Tensor& x = value(Var{n.in0});
        std::vector<double> gx(g.size());
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = x[i] > 0.0 ? g[i] : 0.0;
        accumulate(n.in0, std::move(gx));
        break;
      }
      case OpKind::softmax: {
        const auto [rows, cols] = rows_of(y);
        std::vector<double> gx(g.size());
        for (std::size_t r = 0; r < rows; ++r) {
          double dot = 0.0;
          for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * y[r * cols + c];
          for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] = y[r * cols + c] * (g[r * cols + c] - dot);
        }
        accumulate(n.in0, std::move(gx));
        break;
      }
      case OpKind::log_softmax: {
        const auto [rows, cols] = rows_of(y);
        std::vector<double> gx(g.size());
        for (std::size_t r = 0; r < rows; ++r) {
          double total = 0.0;
          for (std::size_t c = 0; c < cols; ++c) total += g[r * cols + c];
          for (std::size_t c = 0; c < cols; ++c)
            gx[r * cols + c] = g[r * cols + c] - std::exp(y[r * cols + c]) * total;
        }
        accumulate(n.in0, std::move(gx));
        break;
      }
      case OpKind::concat: {
        const Tensor& a = value(Var{n.in0});
        const Tensor& b = value(Var{n.in1});
        const std::size_t rows = a.rows(), ca = a.cols(), cb = b.cols();
        std::vector<double> ga(a.size()), gb(b.size());
        for (std::size_t r = 0; r < rows; ++r) {
          std::copy_n(g.data().begin() + r * (ca + cb), ca, ga.begin() + r * ca);
          std::copy_n(g.data().begin() + r * (ca + cb) + ca, cb, gb.begin() + r * cb);
        }
        accumulate(n.in0, std::move(ga));
        accumulate(n.in1, std::move(gb));
        break;
      }
      case OpKind::sum:
      case OpKind::mean: {
        const Tensor& x = value(Var{n.in0});
        const double s = n.kind == OpKind::mean ? g[0] / static_cast<double>(x.size()) : g[0];
        accumulate(n.in0, std::vector<double>(x.size(), s));
        break;
      }
      case OpKind::exp:
        accumulate(n.in0, zip(g, y, std::multiplies<>()));
        break;
      case OpKind::scale: {
        std::vector<double> gx(g.size());
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = g[i] * n.factor;
        accumulate(n.in0, std::move(gx));
        break;
      }
      case OpKind::reshape:
        accumulate(n.in0, std::vector<double>(g.data().begin(), g.data().end()));
        break;
      case OpKind::slice: {
        const Tensor& x = value(Var{n.in0});
        const std::size_t rows = x.rows(), cols = x.cols(), w = n.end - n.begin;
        std::vector<double> gx(x.size(), 0.0);
        for (std::size_t r = 0; r < rows; ++r)
          std::copy_n(g.data().begin() + r * w, w, gx.begin() + r * cols + n.begin);
        accumulate(n.in0, std::move(gx));
        break;
      }
      case OpKind::custom: {
        std::vector<Tensor> gin = n.custom_backward(g);
        if (gin.size() != n.extra_inputs.size())
          throw ShapeError("custom: backward returned " + std::to_string(gin.size()) + " gradients for " +
                           std::to_string(n.extra_inputs.size()) + " inputs");
        for (std::size_t i = 0; i < gin.size(); ++i) {
          if (gin[i].empty()) continue;
          require(gin[i].shape() == value(Var{n.extra_inputs[i]}).shape(), "custom",
                  "gradient shape mismatch for input " + std::to_string(i));
          accumulate(n.extra_inputs[i], gin[i]);
        }
        break;
      }
    }
  }
}

const Tensor* Graph::grad(Var v) const {
  node(v);
  if (v.id >= grads_.size() || !grads_[v.id]) return nullptr;
  return &*grads_[v.id];
}

Tensor Graph::grad_or_zeros(Var v) const {
  if (const Tensor* g = grad(v)) return *g;
  return Tensor::zeros(value(v).shape());
}

// ---------------------------------------------------------------------------
// Gradient checking

GradCheckReport check_gradients(const LossBuilder& build_loss, std::span<Tensor> params, double eps) {
  if (!(eps > 0.0 && eps <= 1e-2)) throw ConfigError("check_gradients: eps must lie in (0, 1e-2]");

  struct Eval {
    double loss;
    std::uint64_t signature;
  };
  auto evaluate = [&](bool with_backward, std::vector<Tensor>* grads) {
    Graph g;
    std::vector<Var> vars;
    vars.reserve(params.size());
    for (const Tensor& p : params) vars.push_back(g.parameter(p));
    const Var loss = build_loss(g, vars);
    if (with_backward) {
      g.backward(loss);
      for (Var v : vars) grads->push_back(g.grad_or_zeros(v));
    }
    return Eval{g.value(loss).item(), g.branch_signature()};
  };

  std::vector<Tensor> analytic;
  const Eval base = evaluate(true, &analytic);
  const Eval again = evaluate(false, nullptr);
  if (base.loss != again.loss || base.signature != again.signature)
    throw Error("check_gradients: loss builder is not deterministic");

  GradCheckReport report;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto data = params[p].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + eps;
      const Eval plus = evaluate(false, nullptr);
      data[i] = orig - eps;
      const Eval minus = evaluate(false, nullptr);
      data[i] = orig;
      if (plus.signature != base.signature || minus.signature != base.signature) {
        ++report.skipped;
        continue;
      }
      const double numeric = (plus.loss - minus.loss) / (2.0 * eps);
      const double exact = analytic[p][i];
      const double scale = std::max(std::abs(numeric), std::abs(exact));
      const double diff = std::abs(numeric - exact);
      const double err = scale < 1e-6 ? diff : diff / scale;
      report.max_rel_error = std::max(report.max_rel_error, err);
      ++report.checked;
    }
  }
  return report;
}

}  // namespace w2r2::ad
