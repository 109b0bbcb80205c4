#pragma once

#include <deque>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "priorecon/error.hpp"

namespace priorecon::ad {

using Shape = std::vector<int>;

std::size_t numel(const Shape &s);
std::string shape_string(const Shape &s);

// A named trainable tensor.
struct Parameter {
  std::string name;
  Shape shape;
  std::vector<double> value;
};

// Insertion-ordered parameter collection with stable references.
class ParameterSet {
public:
  Parameter &add(std::string name, Shape shape, std::vector<double> init);
  Parameter &at(std::string_view name);
  const Parameter &at(std::string_view name) const;
  bool contains(std::string_view name) const;

  std::deque<Parameter> &items() { return params_; }
  const std::deque<Parameter> &items() const { return params_; }
  std::size_t total_size() const;

  std::vector<double> flatten() const;
  void assign(std::span<const double> flat);

private:
  std::deque<Parameter> params_;
};

class Graph;

// Handle to a node of a Graph.
class Var {
public:
  Var() = default;

  const Shape &shape() const;
  std::span<const double> value() const;
  double item() const;
  std::size_t size() const { return value().size(); }
  int id() const { return id_; }
  Graph *graph() const { return graph_; }
  bool valid() const { return graph_ != nullptr; }

private:
  friend class Graph;
  Var(Graph *g, int id) : graph_(g), id_(id) {}
  Graph *graph_ = nullptr;
  int id_ = -1;
};

// Reverse-mode tape. Nodes are recorded in creation order, which is a
// topological order, so backward is a single reverse sweep.
class Graph {
public:
  using Backward = std::function<void(Graph &, int self)>;

  Graph() = default;
  Graph(const Graph &) = delete;
  Graph &operator=(const Graph &) = delete;

  Var constant(Shape shape, std::vector<double> value);
  // Leaf that receives a gradient.
  Var variable(Shape shape, std::vector<double> value);
  // Leaf bound to a parameter; repeated calls return the same node.
  Var param(const Parameter &p);

  // Records an op node. `backward` runs only if some input needs a gradient.
  Var make(Shape shape, std::vector<double> value, std::initializer_list<Var> inputs, Backward backward);

  void backward(Var root);

  const Shape &shape(int id) const { return nodes_[id].shape; }
  std::span<const double> value(int id) const { return nodes_[id].value; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  // Incoming gradient of a node during backward (empty if none reached it).
  std::span<const double> grad(int id) const { return nodes_[id].grad; }
  std::span<const double> grad(Var v) const { return grad(v.id()); }
  // Mutable gradient buffer, zero-allocated on first access.
  std::span<double> grad_buffer(int id);
  // Gradient of a bound parameter (empty if it was not used).
  std::span<const double> param_grad(const Parameter &p) const;

  std::size_t node_count() const { return nodes_.size(); }

private:
  struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    Backward backward;
  };
  Var push(Node node);

  std::deque<Node> nodes_;
  std::unordered_map<const Parameter *, int> bound_;
};

} // namespace priorecon::ad
