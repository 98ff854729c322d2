#include "mmml/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "mmml/errors.hpp"

namespace mmml {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ')';
  return out.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace {

std::atomic<std::uint64_t> g_next_id{1};

thread_local bool g_no_grad = false;

std::string g_corrupted_op;
std::atomic<bool> g_fault_active{false};

double fault_factor(const char* op) {
  if (!g_fault_active.load(std::memory_order_relaxed)) return 1.0;
  return g_corrupted_op == op ? 1.5 : 1.0;
}

void check_shape(const Shape& shape) {
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape));
  }
}

NodePtr make_leaf(Shape shape, std::vector<double> data, bool requires_grad) {
  check_shape(shape);
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("data length " + std::to_string(data.size()) + " does not match shape " +
                         shape_string(shape));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  node->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  return node;
}

// Result node for an operation; records parents only when some input needs grad.
NodePtr make_result(Shape shape, std::vector<double> data, std::initializer_list<const NodePtr*> inputs) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  if (g_no_grad) return node;
  for (const NodePtr* in : inputs) {
    if ((*in)->requires_grad) node->requires_grad = true;
  }
  if (node->requires_grad) {
    for (const NodePtr* in : inputs) node->parents.push_back(*in);
  }
  return node;
}

NodePtr make_result_many(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  if (g_no_grad) return node;
  for (const auto& in : inputs) {
    if (in.node()->requires_grad) node->requires_grad = true;
  }
  if (node->requires_grad) {
    for (const auto& in : inputs) node->parents.push_back(in.node());
  }
  return node;
}

const NodePtr& checked(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
  return t.node();
}

// Grad buffer of a parent, or nullptr if that parent does not take gradients.
double* grad_of(Node* p) {
  if (!p->requires_grad) return nullptr;
  p->ensure_grad();
  return p->grad.data();
}

Shape with_last_two(Shape prefix, std::size_t m, std::size_t n) {
  prefix.push_back(m);
  prefix.push_back(n);
  return prefix;
}

}  // namespace

namespace testing {

void set_corrupted_backward(const std::string& op_name) {
  g_corrupted_op = op_name;
  g_fault_active.store(!op_name.empty());
}

const std::string& corrupted_backward() { return g_corrupted_op; }

}  // namespace testing

NoGradGuard::NoGradGuard() : previous_(g_no_grad) { g_no_grad = true; }
NoGradGuard::~NoGradGuard() { g_no_grad = previous_; }

// ---- Tensor -----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::size_t n = shape_numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::size_t n = shape_numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  return Tensor(make_leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(make_leaf({1}, {value}, requires_grad));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows, bool requires_grad) {
  std::vector<double> data;
  std::size_t cols = rows.size() ? rows.begin()->size() : 0;
  for (const auto& row : rows) {
    if (row.size() != cols) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return from_data({rows.size(), cols}, std::move(data), requires_grad);
}

Tensor Tensor::vector(std::initializer_list<double> values, bool requires_grad) {
  return from_data({values.size()}, std::vector<double>(values), requires_grad);
}

Tensor Tensor::identity(std::size_t n, bool requires_grad) {
  std::vector<double> data(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) data[i * n + i] = 1.0;
  return from_data({n, n}, std::move(data), requires_grad);
}

const Shape& Tensor::shape() const { return checked(*this, "shape")->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_string(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return checked(*this, "numel")->data.size(); }

std::span<const double> Tensor::data() const { return checked(*this, "data")->data; }

std::span<double> Tensor::mutable_data() { return checked(*this, "mutable_data")->data; }

double Tensor::item() const {
  const auto& d = checked(*this, "item")->data;
  if (d.size() != 1) throw ContractError("item() on non-scalar tensor of shape " + shape_string(shape()));
  return d[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw DimensionError("index rank does not match " + shape_string(s));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= s[axis]) throw DimensionError("index out of range for " + shape_string(s));
    flat = flat * s[axis] + i;
    ++axis;
  }
  return node_->data[flat];
}

bool Tensor::requires_grad() const { return checked(*this, "requires_grad")->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  auto& n = checked(*this, "set_requires_grad");
  if (!n->parents.empty() || n->backward) throw ContractError("requires_grad can only be set on leaves");
  n->requires_grad = flag;
}

bool Tensor::has_grad() const {
  const auto& n = checked(*this, "has_grad");
  return n->grad.size() == n->data.size();
}

std::vector<double> Tensor::grad() const {
  const auto& n = checked(*this, "grad");
  if (n->grad.size() != n->data.size()) return std::vector<double>(n->data.size(), 0.0);
  return n->grad;
}

std::span<double> Tensor::mutable_grad() {
  auto& n = checked(*this, "mutable_grad");
  n->ensure_grad();
  return n->grad;
}

void Tensor::zero_grad() {
  auto& n = checked(*this, "zero_grad");
  if (!n->grad.empty()) std::fill(n->grad.begin(), n->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  const auto& n = checked(*this, "clone");
  return Tensor(make_leaf(n->shape, n->data, false));
}

bool Tensor::is_leaf() const { return !checked(*this, "is_leaf")->backward; }

std::uint64_t Tensor::creation_id() const { return checked(*this, "creation_id")->id; }

// ---- matmul -----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& an = checked(a, "matmul");
  const auto& bn = checked(b, "matmul");
  const Shape& as = an->shape;
  const Shape& bs = bn->shape;
  auto mismatch = [&] {
    return DimensionError("matmul: incompatible shapes " + shape_string(as) + " and " + shape_string(bs));
  };
  if (as.size() < 2 || bs.size() < 2) throw mismatch();
  const std::size_t m = as[as.size() - 2], k = as.back();
  const std::size_t k2 = bs[bs.size() - 2], n = bs.back();
  if (k != k2) throw mismatch();
  Shape a_batch(as.begin(), as.end() - 2), b_batch(bs.begin(), bs.end() - 2);
  const std::size_t na = shape_numel(a_batch), nb = shape_numel(b_batch);
  Shape out_batch;
  if (na == nb) {
    if (na > 1 && a_batch != b_batch) throw mismatch();
    out_batch = a_batch.size() >= b_batch.size() ? a_batch : b_batch;
  } else if (na == 1) {
    out_batch = b_batch;
  } else if (nb == 1) {
    out_batch = a_batch;
  } else {
    throw mismatch();
  }
  const std::size_t batches = std::max(na, nb);

  std::vector<double> out(batches * m * n, 0.0);
  for (std::size_t bi = 0; bi < batches; ++bi) {
    const double* A = an->data.data() + (na == 1 ? 0 : bi) * m * k;
    const double* B = bn->data.data() + (nb == 1 ? 0 : bi) * k * n;
    double* C = out.data() + bi * m * n;
    for (std::size_t i = 0; i < m; ++i) {
      double* crow = C + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = A[i * k + p];
        const double* brow = B + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
      }
    }
  }

  auto node = make_result(with_last_two(out_batch, m, n), std::move(out), {&an, &bn});
  if (node->requires_grad) {
    Node* pa = an.get();
    Node* pb = bn.get();
    const double f = fault_factor("matmul");
    node->backward = [pa, pb, m, k, n, na, nb, batches, f](Node& self) {
      double* ga = grad_of(pa);
      double* gb = grad_of(pb);
      for (std::size_t bi = 0; bi < batches; ++bi) {
        const double* A = pa->data.data() + (na == 1 ? 0 : bi) * m * k;
        const double* B = pb->data.data() + (nb == 1 ? 0 : bi) * k * n;
        const double* G = self.grad.data() + bi * m * n;
        if (ga) {
          double* GA = ga + (na == 1 ? 0 : bi) * m * k;
          for (std::size_t i = 0; i < m; ++i) {
            const double* grow = G + i * n;
            for (std::size_t p = 0; p < k; ++p) {
              const double* brow = B + p * n;
              double acc = 0.0;
              for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
              GA[i * k + p] += f * acc;
            }
          }
        }
        if (gb) {
          double* GB = gb + (nb == 1 ? 0 : bi) * k * n;
          for (std::size_t i = 0; i < m; ++i) {
            const double* grow = G + i * n;
            for (std::size_t p = 0; p < k; ++p) {
              const double aip = f * A[i * k + p];
              double* gbrow = GB + p * n;
              for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
            }
          }
        }
      }
    };
  }
  return Tensor(node);
}

Tensor transpose(const Tensor& a) {
  const auto& an = checked(a, "transpose");
  const Shape& s = an->shape;
  if (s.size() < 2) throw DimensionError("transpose needs rank >= 2, got " + shape_string(s));
  const std::size_t m = s[s.size() - 2], n = s.back();
  const std::size_t batches = an->data.size() / (m * n);
  std::vector<double> out(an->data.size());
  for (std::size_t b = 0; b < batches; ++b) {
    const double* src = an->data.data() + b * m * n;
    double* dst = out.data() + b * m * n;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
  }
  Shape os = s;
  std::swap(os[os.size() - 1], os[os.size() - 2]);
  auto node = make_result(std::move(os), std::move(out), {&an});
  if (node->requires_grad) {
    Node* pa = an.get();
    const double f = fault_factor("transpose");
    node->backward = [pa, m, n, batches, f](Node& self) {
      double* ga = grad_of(pa);
      for (std::size_t b = 0; b < batches; ++b) {
        const double* g = self.grad.data() + b * m * n;
        double* dst = ga + b * m * n;
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) dst[i * n + j] += f * g[j * m + i];
      }
    };
  }
  return Tensor(node);
}

// ---- elementwise ------------------------------------------------------------

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  const auto& an = checked(a, "add");
  const auto& bn = checked(b, "add");
  require_same_shape(a, b, "add");
  std::vector<double> out(an->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = an->data[i] + bn->data[i];
  auto node = make_result(an->shape, std::move(out), {&an, &bn});
  if (node->requires_grad) {
    Node* pa = an.get();
    Node* pb = bn.get();
    const double f = fault_factor("add");
    node->backward = [pa, pb, f](Node& self) {
      for (Node* p : {pa, pb}) {
        if (double* g = grad_of(p)) {
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += f * self.grad[i];
        }
      }
    };
  }
  return Tensor(node);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const auto& an = checked(a, "sub");
  const auto& bn = checked(b, "sub");
  require_same_shape(a, b, "sub");
  std::vector<double> out(an->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = an->data[i] - bn->data[i];
  auto node = make_result(an->shape, std::move(out), {&an, &bn});
  if (node->requires_grad) {
    Node* pa = an.get();
    Node* pb = bn.get();
    const double f = fault_factor("sub");
    node->backward = [pa, pb, f](Node& self) {
      if (double* g = grad_of(pa))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += f * self.grad[i];
      if (double* g = grad_of(pb))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= f * self.grad[i];
    };
  }
  return Tensor(node);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const auto& an = checked(a, "mul");
  const auto& bn = checked(b, "mul");
  require_same_shape(a, b, "mul");
  std::vector<double> out(an->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = an->data[i] * bn->data[i];
  auto node = make_result(an->shape, std::move(out), {&an, &bn});
  if (node->requires_grad) {
    Node* pa = an.get();
    Node* pb = bn.get();
    const double f = fault_factor("mul");
    node->backward = [pa, pb, f](Node& self) {
      if (double* g = grad_of(pa))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += f * self.grad[i] * pb->data[i];
      if (double* g = grad_of(pb))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += f * self.grad[i] * pa->data[i];
    };
  }
  return Tensor(node);
}

Tensor scale(const Tensor& a, double factor) {
  const auto& an = checked(a, "scale");
  std::vector<double> out(an->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = an->data[i] * factor;
  auto node = make_result(an->shape, std::move(out), {&an});
  if (node->requires_grad) {
    Node* pa = an.get();
    const double f = fault_factor("scale");
    node->backward = [pa, factor, f](Node& self) {
      double* g = grad_of(pa);
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += f * factor * self.grad[i];
    };
  }
  return Tensor(node);
}

Tensor add_rowvec(const Tensor& a, const Tensor& row) {
  const auto& an = checked(a, "add_rowvec");
  const auto& rn = checked(row, "add_rowvec");
  const std::size_t n = an->shape.back();
  if (rn->data.size() != n || rn->shape.back() != n) {
    throw DimensionError("add_rowvec: row of shape " + shape_string(rn->shape) +
                         " cannot broadcast over " + shape_string(an->shape));
  }
  const std::size_t rows = an->data.size() / n;
  std::vector<double> out(an->data.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = an->data[r * n + j] + rn->data[j];
  auto node = make_result(an->shape, std::move(out), {&an, &rn});
  if (node->requires_grad) {
    Node* pa = an.get();
    Node* pr = rn.get();
    const double f = fault_factor("add_rowvec");
    node->backward = [pa, pr, rows, n, f](Node& self) {
      if (double* g = grad_of(pa))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += f * self.grad[i];
      if (double* g = grad_of(pr))
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < n; ++j) g[j] += f * self.grad[r * n + j];
    };
  }
  return Tensor(node);
}

Tensor square(const Tensor& a) {
  const auto& an = checked(a, "square");
  std::vector<double> out(an->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = an->data[i] * an->data[i];
  auto node = make_result(an->shape, std::move(out), {&an});
  if (node->requires_grad) {
    Node* pa = an.get();
    const double f = fault_factor("square");
    node->backward = [pa, f](Node& self) {
      double* g = grad_of(pa);
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += f * 2.0 * pa->data[i] * self.grad[i];
    };
  }
  return Tensor(node);
}

Tensor sum(const Tensor& a) {
  const auto& an = checked(a, "sum");
  double total = 0.0;
  for (double v : an->data) total += v;
  auto node = make_result({1}, {total}, {&an});
  if (node->requires_grad) {
    Node* pa = an.get();
    const double f = fault_factor("sum");
    node->backward = [pa, f](Node& self) {
      double* g = grad_of(pa);
      const double up = f * self.grad[0];
      for (std::size_t i = 0; i < pa->data.size(); ++i) g[i] += up;
    };
  }
  return Tensor(node);
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor reshape(const Tensor& a, Shape shape) {
  const auto& an = checked(a, "reshape");
  check_shape(shape);
  if (shape_numel(shape) != an->data.size()) {
    throw DimensionError("reshape: cannot view " + shape_string(an->shape) + " as " + shape_string(shape));
  }
  auto node = make_result(std::move(shape), an->data, {&an});
  if (node->requires_grad) {
    Node* pa = an.get();
    const double f = fault_factor("reshape");
    node->backward = [pa, f](Node& self) {
      double* g = grad_of(pa);
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += f * self.grad[i];
    };
  }
  return Tensor(node);
}

// ---- nonlinearities ---------------------------------------------------------

Tensor relu(const Tensor& x) {
  const auto& xn = checked(x, "relu");
  std::vector<double> out(xn->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xn->data[i] > 0.0 ? xn->data[i] : 0.0;
  auto node = make_result(xn->shape, std::move(out), {&xn});
  if (node->requires_grad) {
    Node* px = xn.get();
    const double f = fault_factor("relu");
    node->backward = [px, f](Node& self) {
      double* g = grad_of(px);
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        if (px->data[i] > 0.0) g[i] += f * self.grad[i];
      }
    };
  }
  return Tensor(node);
}

Tensor softmax_lastdim(const Tensor& x) {
  const auto& xn = checked(x, "softmax_lastdim");
  const std::size_t n = xn->shape.back();
  const std::size_t rows = xn->data.size() / n;
  std::vector<double> out(xn->data.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xn->data.data() + r * n;
    double* o = out.data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= total;
  }
  auto node = make_result(xn->shape, std::move(out), {&xn});
  if (node->requires_grad) {
    Node* px = xn.get();
    const double f = fault_factor("softmax_lastdim");
    node->backward = [px, rows, n, f](Node& self) {
      double* g = grad_of(px);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = self.data.data() + r * n;
        const double* dy = self.grad.data() + r * n;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
        for (std::size_t j = 0; j < n; ++j) g[r * n + j] += f * y[j] * (dy[j] - dot);
      }
    };
  }
  return Tensor(node);
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const auto& xn = checked(x, "layer_norm");
  const auto& gn = checked(gain, "layer_norm");
  const auto& bn = checked(bias, "layer_norm");
  if (!(eps > 0.0)) throw ContractError("layer_norm: eps must be positive");
  const std::size_t d = xn->shape.back();
  if (gn->data.size() != d || bn->data.size() != d) {
    throw DimensionError("layer_norm: gain/bias of shape " + shape_string(gn->shape) + "/" +
                         shape_string(bn->shape) + " do not match " + shape_string(xn->shape));
  }
  const std::size_t rows = xn->data.size() / d;
  std::vector<double> xhat(xn->data.size());
  std::vector<double> inv_std(rows);
  std::vector<double> out(xn->data.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xn->data.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += in[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (in[j] - mu) * inv;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gn->data[j] + bn->data[j];
    }
  }
  auto node = make_result(xn->shape, std::move(out), {&xn, &gn, &bn});
  if (node->requires_grad) {
    Node* px = xn.get();
    Node* pg = gn.get();
    Node* pb = bn.get();
    const double f = fault_factor("layer_norm");
    node->backward = [px, pg, pb, rows, d, f, xhat = std::move(xhat),
                      inv_std = std::move(inv_std)](Node& self) {
      double* gx = grad_of(px);
      double* gg = grad_of(pg);
      double* gb = grad_of(pb);
      std::vector<double> dxhat(d);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* dy = self.grad.data() + r * d;
        const double* h = xhat.data() + r * d;
        if (gg)
          for (std::size_t j = 0; j < d; ++j) gg[j] += f * dy[j] * h[j];
        if (gb)
          for (std::size_t j = 0; j < d; ++j) gb[j] += f * dy[j];
        if (gx) {
          double mean_d = 0.0, mean_dh = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            dxhat[j] = dy[j] * pg->data[j];
            mean_d += dxhat[j];
            mean_dh += dxhat[j] * h[j];
          }
          mean_d /= static_cast<double>(d);
          mean_dh /= static_cast<double>(d);
          for (std::size_t j = 0; j < d; ++j) {
            gx[r * d + j] += f * inv_std[r] * (dxhat[j] - mean_d - h[j] * mean_dh);
          }
        }
      }
    };
  }
  return Tensor(node);
}

// ---- structural -------------------------------------------------------------

Tensor concat(const std::vector<Tensor>& tensors, std::size_t axis) {
  if (tensors.empty()) throw ContractError("concat: no inputs");
  const Shape& first = checked(tensors.front(), "concat")->shape;
  if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + shape_string(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& t : tensors) {
    const Shape& s = checked(t, "concat")->shape;
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) {
      if (i != axis && s[i] != first[i]) ok = false;
    }
    if (!ok) {
      throw DimensionError("concat: shapes " + shape_string(first) + " and " + shape_string(s) +
                           " differ off axis " + std::to_string(axis));
    }
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  const std::size_t out_block = out_shape[axis] * inner;

  std::vector<double> out(outer * out_block);
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& t : tensors) {
    const auto& n = t.node();
    const std::size_t block = n->shape[axis] * inner;
    offsets.push_back(offset);
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(n->data.data() + o * block, block, out.data() + o * out_block + offset);
    }
    offset += block;
  }
  auto node = make_result_many(std::move(out_shape), std::move(out), tensors);
  if (node->requires_grad) {
    std::vector<Node*> parents;
    for (const auto& t : tensors) parents.push_back(t.node().get());
    const double f = fault_factor("concat");
    node->backward = [parents, offsets, outer, inner, out_block, axis, f](Node& self) {
      for (std::size_t p = 0; p < parents.size(); ++p) {
        double* g = grad_of(parents[p]);
        if (!g) continue;
        const std::size_t block = parents[p]->shape[axis] * inner;
        for (std::size_t o = 0; o < outer; ++o) {
          const double* src = self.grad.data() + o * out_block + offsets[p];
          for (std::size_t i = 0; i < block; ++i) g[o * block + i] += f * src[i];
        }
      }
    };
  }
  return Tensor(node);
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  const auto& xn = checked(x, "slice");
  const Shape& s = xn->shape;
  if (axis >= s.size() || length == 0 || start + length > s[axis]) {
    throw DimensionError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") on axis " + std::to_string(axis) + " out of range for " + shape_string(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t in_block = s[axis] * inner;
  const std::size_t block = length * inner;
  const std::size_t offset = start * inner;
  std::vector<double> out(outer * block);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(xn->data.data() + o * in_block + offset, block, out.data() + o * block);
  }
  Shape os = s;
  os[axis] = length;
  auto node = make_result(std::move(os), std::move(out), {&xn});
  if (node->requires_grad) {
    Node* px = xn.get();
    const double f = fault_factor("slice");
    node->backward = [px, outer, in_block, block, offset, f](Node& self) {
      double* g = grad_of(px);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < block; ++i) g[o * in_block + offset + i] += f * self.grad[o * block + i];
    };
  }
  return Tensor(node);
}

std::vector<Tensor> split(const Tensor& x, std::size_t axis, const std::vector<std::size_t>& lengths) {
  const std::size_t total = std::accumulate(lengths.begin(), lengths.end(), std::size_t{0});
  if (total != x.dim(axis)) {
    throw DimensionError("split: lengths sum to " + std::to_string(total) + " but axis extent is " +
                         std::to_string(x.dim(axis)));
  }
  std::vector<Tensor> parts;
  std::size_t start = 0;
  for (auto len : lengths) {
    parts.push_back(slice(x, axis, start, len));
    start += len;
  }
  return parts;
}

Tensor masked_mean_pool(const Tensor& x, const Mask& mask) {
  const auto& xn = checked(x, "masked_mean_pool");
  if (xn->shape.size() != 2) throw DimensionError("masked_mean_pool expects (L,d), got " + shape_string(xn->shape));
  const std::size_t L = xn->shape[0], d = xn->shape[1];
  if (mask.size() != L) {
    throw DimensionError("masked_mean_pool: mask length " + std::to_string(mask.size()) +
                         " does not match sequence length " + std::to_string(L));
  }
  std::size_t count = 0;
  for (auto m : mask) count += m ? 1 : 0;
  if (count == 0) throw ContractError("masked_mean_pool: empty pool (mask has no valid step)");
  const double inv = 1.0 / static_cast<double>(count);
  std::vector<double> out(d, 0.0);
  for (std::size_t t = 0; t < L; ++t) {
    if (!mask[t]) continue;
    for (std::size_t j = 0; j < d; ++j) out[j] += xn->data[t * d + j];
  }
  for (auto& v : out) v *= inv;
  auto node = make_result({d}, std::move(out), {&xn});
  if (node->requires_grad) {
    Node* px = xn.get();
    const double f = fault_factor("masked_mean_pool");
    node->backward = [px, mask, L, d, inv, f](Node& self) {
      double* g = grad_of(px);
      for (std::size_t t = 0; t < L; ++t) {
        if (!mask[t]) continue;
        for (std::size_t j = 0; j < d; ++j) g[t * d + j] += f * inv * self.grad[j];
      }
    };
  }
  return Tensor(node);
}

// ---- backward ---------------------------------------------------------------

void backward(const Tensor& root) {
  const auto& rn = checked(root, "backward");
  if (rn->data.size() != 1) {
    throw ContractError("backward: root must be scalar, got shape " + shape_string(rn->shape));
  }
  if (!rn->requires_grad) throw ContractError("backward: root is not on a differentiation graph");

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{rn.get()};
  seen.insert(rn.get());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(), [](const Node* a, const Node* b) { return a->id > b->id; });

  for (Node* n : order) {
    if (n->backward) {
      n->grad.assign(n->data.size(), 0.0);
    }
  }
  rn->ensure_grad();
  rn->grad[0] += 1.0;
  for (Node* n : order) {
    if (n->backward) n->backward(*n);
  }
}

}  // namespace mmml
