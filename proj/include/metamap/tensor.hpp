#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace metamap {

using Shape = std::vector<int64_t>;

struct DimensionError : std::runtime_error {
  explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};
struct IndexError : std::runtime_error {
  explicit IndexError(const std::string& msg) : std::runtime_error(msg) {}
};
struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};
struct CapacityError : std::runtime_error {
  explicit CapacityError(const std::string& msg) : std::runtime_error(msg) {}
};

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace detail {
inline thread_local int no_grad_depth = 0;
inline thread_local bool check_finite_mode = false;
}  // namespace detail

inline bool grad_recording_enabled() { return detail::no_grad_depth == 0; }

// RAII guard: ops executed inside build no graph nodes.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// When enabled, every op output is checked for NaN/Inf and a ContractError
// names the offending op. Off by default; tests and the divergence guard use it.
inline void set_check_finite_mode(bool on) { detail::check_finite_mode = on; }
inline bool check_finite_mode() { return detail::check_finite_mode; }

template <class Real>
class TensorT;

template <class Real>
struct TensorImplT;

// One recorded differentiable operation. `backward` receives the upstream
// gradient and the op's own output (alive for the whole walk, since every
// interior output is some consumer's input), and returns gradients for each
// entry of `inputs`, built out of Tensor ops so they are themselves
// differentiable when the engine runs with create_graph = true.
template <class Real>
struct NodeT {
  const char* op;
  std::vector<TensorT<Real>> inputs;
  TensorImplT<Real>* output = nullptr;  // non-owning; owner impl holds this node
  std::function<std::vector<TensorT<Real>>(const TensorT<Real>& upstream,
                                           const TensorT<Real>& out)>
      backward;
};

template <class Real>
struct TensorImplT : std::enable_shared_from_this<TensorImplT<Real>> {
  Shape shape;
  std::vector<Real> data;
  bool requires_grad = false;
  std::shared_ptr<NodeT<Real>> node;  // producing op; null for leaves
};

template <class Real>
class TensorT {
 public:
  using value_type = Real;

  TensorT() = default;

  static TensorT zeros(Shape shape, bool requires_grad = false) {
    return from_data(std::move(shape), {}, requires_grad, Real(0));
  }
  static TensorT full(Shape shape, Real v, bool requires_grad = false) {
    return from_data(std::move(shape), {}, requires_grad, v);
  }
  static TensorT ones(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), Real(1), requires_grad);
  }
  static TensorT scalar(Real v, bool requires_grad = false) {
    return from_data(Shape{}, std::vector<Real>{v}, requires_grad);
  }
  static TensorT from_data(Shape shape, std::vector<Real> data, bool requires_grad = false,
                           Real fill = Real(0)) {
    auto impl = std::make_shared<TensorImplT<Real>>();
    const int64_t n = numel(shape);
    for (int64_t d : shape) {
      if (d < 0) throw DimensionError("negative dimension in shape " + shape_str(shape));
    }
    impl->shape = std::move(shape);
    if (data.empty() && n > 0) {
      impl->data.assign(static_cast<size_t>(n), fill);
    } else {
      if (static_cast<int64_t>(data.size()) != n)
        throw DimensionError("data size " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(impl->shape));
      impl->data = std::move(data);
    }
    impl->requires_grad = requires_grad;
    return TensorT(std::move(impl));
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int64_t rank() const { return static_cast<int64_t>(impl_->shape.size()); }
  int64_t dim(int64_t i) const { return impl_->shape[static_cast<size_t>(i)]; }
  int64_t size() const { return static_cast<int64_t>(impl_->data.size()); }

  const std::vector<Real>& values() const { return impl_->data; }
  // Mutable access is for leaf tensors (optimizer updates, initialization).
  std::vector<Real>& mutable_values() { return impl_->data; }

  Real item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }
  Real at2(int64_t r, int64_t c) const {
    return impl_->data[static_cast<size_t>(r * impl_->shape[1] + c)];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool rg) {
    if (impl_->node) throw ContractError("set_requires_grad on non-leaf tensor");
    impl_->requires_grad = rg;
  }

  // Value copy detached from any graph.
  TensorT detach(bool requires_grad = false) const {
    return from_data(impl_->shape, impl_->data, requires_grad);
  }

  const std::shared_ptr<NodeT<Real>>& node() const { return impl_->node; }
  TensorImplT<Real>* impl() const { return impl_.get(); }

  // Re-wraps a live impl (engine internals; impl lifetime is the caller's
  // problem).
  static TensorT adopt(TensorImplT<Real>* impl) { return TensorT(impl->shared_from_this()); }

 private:
  explicit TensorT(std::shared_ptr<TensorImplT<Real>> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImplT<Real>> impl_;
};

template <class Real>
inline bool all_finite(const std::vector<Real>& v) {
  for (Real x : v)
    if (!std::isfinite(static_cast<double>(x))) return false;
  return true;
}

// Central factory for op outputs: attaches the backward node when recording
// is enabled and any input participates in a gradient computation.
template <class Real>
TensorT<Real> make_from_op(
    const char* name, Shape shape, std::vector<Real> data, std::vector<TensorT<Real>> inputs,
    std::function<std::vector<TensorT<Real>>(const TensorT<Real>&, const TensorT<Real>&)> fn) {
  if (check_finite_mode() && !all_finite(data))
    throw ContractError(std::string("non-finite values produced by op '") + name + "'");
  auto out = TensorT<Real>::from_data(std::move(shape), std::move(data), false);
  bool needs = false;
  if (grad_recording_enabled()) {
    for (const auto& in : inputs)
      if (in.requires_grad()) {
        needs = true;
        break;
      }
  }
  if (needs) {
    auto node = std::make_shared<NodeT<Real>>();
    node->op = name;
    node->inputs = std::move(inputs);
    node->output = out.impl();
    node->backward = std::move(fn);
    out.impl()->node = node;
    out.impl()->requires_grad = true;
  }
  return out;
}

namespace detail {

// Iterative post-order over the op graph rooted at `root`.
template <class Real>
std::vector<NodeT<Real>*> topo_order(TensorImplT<Real>* root) {
  std::vector<NodeT<Real>*> order;
  if (!root->node) return order;
  std::unordered_set<const NodeT<Real>*> visited;
  struct Frame {
    NodeT<Real>* node;
    size_t next_child;
  };
  std::vector<Frame> stack;
  stack.push_back({root->node.get(), 0});
  visited.insert(root->node.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_child < f.node->inputs.size()) {
      const auto& in = f.node->inputs[f.next_child++];
      NodeT<Real>* child = in.node().get();
      if (child && in.requires_grad() && !visited.count(child)) {
        visited.insert(child);
        stack.push_back({child, 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }
  return order;  // children before parents; reverse for backprop
}

}  // namespace detail

template <class Real>
TensorT<Real> add(const TensorT<Real>& a, const TensorT<Real>& b);

// Reverse-mode gradient of a scalar `output` w.r.t. `inputs`.
//
// With create_graph = true the backward pass is itself recorded, so the
// returned gradients are differentiable nodes (gradients of gradients work).
// Inputs not reachable from the output receive a zero gradient. Gradients are
// accumulated in a fixed reverse-topological order, so results are
// bit-reproducible run to run.
template <class Real>
std::vector<TensorT<Real>> grad(const TensorT<Real>& output,
                                const std::vector<TensorT<Real>>& inputs,
                                bool create_graph = false) {
  if (!output.defined()) throw ContractError("grad: undefined output tensor");
  if (output.size() != 1)
    throw ContractError("grad: loss must be scalar, got shape " + shape_str(output.shape()));
  for (const auto& in : inputs) {
    if (!in.defined()) throw ContractError("grad: undefined input tensor");
    if (!in.requires_grad())
      throw ContractError("grad: input does not require grad (frozen parameter?)");
  }

  std::unordered_map<const TensorImplT<Real>*, TensorT<Real>> gmap;
  gmap.emplace(output.impl(), TensorT<Real>::full(output.shape(), Real(1)));

  auto order = detail::topo_order(output.impl());

  // Restrict the backward walk to nodes that can reach a requested input:
  // gradients elsewhere would be computed and thrown away. In particular a
  // multi-step inner loop asks for gradients at the *current* parameters, and
  // the recorded history of earlier steps must not be re-walked.
  std::unordered_set<const TensorImplT<Real>*> requested;
  for (const auto& in : inputs) requested.insert(in.impl());
  std::unordered_set<const NodeT<Real>*> needed;
  for (NodeT<Real>* node : order) {  // children precede parents
    for (const auto& in : node->inputs) {
      if (!in.requires_grad()) continue;
      if (requested.count(in.impl()) || (in.node() && needed.count(in.node().get()))) {
        needed.insert(node);
        break;
      }
    }
  }

  std::unique_ptr<NoGradGuard> guard;
  if (!create_graph) guard = std::make_unique<NoGradGuard>();

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT<Real>* node = *it;
    if (!needed.count(node)) continue;
    auto found = gmap.find(node->output);
    if (found == gmap.end()) continue;  // branch not reached from the output
    const TensorT<Real> upstream = found->second;
    std::vector<TensorT<Real>> gs = node->backward(upstream, TensorT<Real>::adopt(node->output));
    if (gs.size() != node->inputs.size())
      throw ContractError(std::string("op '") + node->op + "' backward arity mismatch");
    for (size_t i = 0; i < gs.size(); ++i) {
      const auto& in = node->inputs[i];
      if (!in.requires_grad()) continue;  // gradient never flows into frozen tensors
      if (!gs[i].defined()) continue;
      const bool wanted =
          requested.count(in.impl()) || (in.node() && needed.count(in.node().get()));
      if (!wanted) continue;
      if (gs[i].shape() != in.shape())
        throw DimensionError(std::string("op '") + node->op + "' grad shape " +
                             shape_str(gs[i].shape()) + " vs input " + shape_str(in.shape()));
      auto slot = gmap.find(in.impl());
      if (slot == gmap.end())
        gmap.emplace(in.impl(), gs[i]);
      else
        slot->second = add(slot->second, gs[i]);
    }
  }

  std::vector<TensorT<Real>> result;
  result.reserve(inputs.size());
  for (const auto& in : inputs) {
    auto found = gmap.find(in.impl());
    if (found != gmap.end())
      result.push_back(found->second);
    else
      result.push_back(TensorT<Real>::zeros(in.shape()));
  }
  return result;
}

// Text dump of the op graph below `t`, one operation per line in execution
// order. Debug aid only.
template <class Real>
std::string dump_graph(const TensorT<Real>& t) {
  std::ostringstream os;
  auto order = detail::topo_order(t.impl());
  std::unordered_map<const TensorImplT<Real>*, int> ids;
  int next_id = 0;
  auto id_of = [&](const TensorImplT<Real>* impl) {
    auto it = ids.find(impl);
    if (it != ids.end()) return it->second;
    ids[impl] = next_id;
    return next_id++;
  };
  for (NodeT<Real>* node : order) {
    os << "%" << id_of(node->output) << " = " << node->op << shape_str(node->output->shape)
       << "(";
    for (size_t i = 0; i < node->inputs.size(); ++i) {
      if (i) os << ", ";
      os << "%" << id_of(node->inputs[i].impl());
      if (!node->inputs[i].node()) os << (node->inputs[i].requires_grad() ? ":leaf" : ":const");
    }
    os << ")\n";
  }
  return os.str();
}

using Tensor = TensorT<double>;

}  // namespace metamap
