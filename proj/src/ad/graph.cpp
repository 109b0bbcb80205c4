#include "priorecon/ad/graph.hpp"

#include <numeric>

namespace priorecon::ad {

std::size_t numel(const Shape &s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_string(const Shape &s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? ", " : "") + std::to_string(s[i]);
  return out + "]";
}

Parameter &ParameterSet::add(std::string name, Shape shape, std::vector<double> init) {
  require(!contains(name), ErrorKind::Configuration, "duplicate parameter name " + name);
  require(numel(shape) == init.size(), ErrorKind::InvalidInput, "parameter " + name + " init size mismatch");
  params_.push_back({std::move(name), std::move(shape), std::move(init)});
  return params_.back();
}

Parameter &ParameterSet::at(std::string_view name) {
  for (auto &p : params_)
    if (p.name == name) return p;
  fail(ErrorKind::InvalidInput, "unknown parameter " + std::string(name));
}

const Parameter &ParameterSet::at(std::string_view name) const {
  for (const auto &p : params_)
    if (p.name == name) return p;
  fail(ErrorKind::InvalidInput, "unknown parameter " + std::string(name));
}

bool ParameterSet::contains(std::string_view name) const {
  for (const auto &p : params_)
    if (p.name == name) return true;
  return false;
}

std::size_t ParameterSet::total_size() const {
  std::size_t n = 0;
  for (const auto &p : params_) n += p.value.size();
  return n;
}

std::vector<double> ParameterSet::flatten() const {
  std::vector<double> out;
  out.reserve(total_size());
  for (const auto &p : params_) out.insert(out.end(), p.value.begin(), p.value.end());
  return out;
}

void ParameterSet::assign(std::span<const double> flat) {
  require(flat.size() == total_size(), ErrorKind::InvalidInput, "flat parameter vector size mismatch");
  std::size_t off = 0;
  for (auto &p : params_) {
    std::copy(flat.begin() + off, flat.begin() + off + p.value.size(), p.value.begin());
    off += p.value.size();
  }
}

const Shape &Var::shape() const { return graph_->shape(id_); }
std::span<const double> Var::value() const { return graph_->value(id_); }
double Var::item() const {
  require(size() == 1, ErrorKind::InvalidInput, "item() on non-scalar " + shape_string(shape()));
  return value()[0];
}

Var Graph::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Graph::constant(Shape shape, std::vector<double> value) {
  require(numel(shape) == value.size(), ErrorKind::InvalidInput, "constant size mismatch " + shape_string(shape));
  return push({std::move(shape), std::move(value), {}, false, {}});
}

Var Graph::variable(Shape shape, std::vector<double> value) {
  require(numel(shape) == value.size(), ErrorKind::InvalidInput, "variable size mismatch " + shape_string(shape));
  return push({std::move(shape), std::move(value), {}, true, {}});
}

Var Graph::param(const Parameter &p) {
  if (auto it = bound_.find(&p); it != bound_.end()) return Var(this, it->second);
  Var v = variable(p.shape, p.value);
  bound_.emplace(&p, v.id());
  return v;
}

Var Graph::make(Shape shape, std::vector<double> value, std::initializer_list<Var> inputs, Backward backward) {
  require(numel(shape) == value.size(), ErrorKind::InvalidInput, "op output size mismatch " + shape_string(shape));
  bool rg = false;
  for (const Var &in : inputs) {
    require(in.graph() == this, ErrorKind::InvalidInput, "op input belongs to a different graph");
    rg = rg || nodes_[in.id()].requires_grad;
  }
  return push({std::move(shape), std::move(value), {}, rg, rg ? std::move(backward) : Backward{}});
}

std::span<double> Graph::grad_buffer(int id) {
  Node &n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

void Graph::backward(Var root) {
  require(root.graph() == this, ErrorKind::InvalidInput, "backward root belongs to a different graph");
  require(root.size() == 1, ErrorKind::InvalidInput, "backward root must be a scalar");
  for (auto &n : nodes_) n.grad.clear();
  grad_buffer(root.id())[0] = 1.0;
  for (int id = root.id(); id >= 0; --id) {
    Node &n = nodes_[id];
    if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
    n.backward(*this, id);
  }
}

std::span<const double> Graph::param_grad(const Parameter &p) const {
  auto it = bound_.find(&p);
  if (it == bound_.end()) return {};
  return nodes_[it->second].grad;
}

} // namespace priorecon::ad
