#pragma once

#include <algorithm>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace priorcast {

// Directed graph over nodes 0..node_count-1 with in-degree bookkeeping.
// Generators only ever hand out acyclic instances.
struct Dag {
  int node_count = 0;
  std::vector<std::pair<int, int>> edges;  // (source, target)
  std::vector<int> in_degree;

  static Dag with_nodes(int v) {
    Dag g;
    g.node_count = v;
    g.in_degree.assign(static_cast<std::size_t>(v), 0);
    return g;
  }

  void add_edge(int source, int target) {
    edges.emplace_back(source, target);
    ++in_degree[static_cast<std::size_t>(target)];
  }

  // out-neighbors per node, in edge insertion order
  std::vector<std::vector<int>> adjacency() const {
    std::vector<std::vector<int>> adj(static_cast<std::size_t>(node_count));
    for (const auto& [s, t] : edges) adj[static_cast<std::size_t>(s)].push_back(t);
    return adj;
  }
};

inline std::vector<int> root_nodes(const Dag& g) {
  std::vector<int> roots;
  for (int i = 0; i < g.node_count; ++i)
    if (g.in_degree[static_cast<std::size_t>(i)] == 0) roots.push_back(i);
  return roots;
}

// Kahn's algorithm; throws if the graph contains a cycle, which signals a
// generator bug rather than a recoverable condition.
inline std::vector<int> topological_order(const Dag& g) {
  auto adj = g.adjacency();
  std::vector<int> degree = g.in_degree;
  std::vector<int> order;
  order.reserve(static_cast<std::size_t>(g.node_count));
  std::vector<int> stack;
  for (int i = 0; i < g.node_count; ++i)
    if (degree[static_cast<std::size_t>(i)] == 0) stack.push_back(i);
  while (!stack.empty()) {
    const int n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (int next : adj[static_cast<std::size_t>(n)]) {
      if (--degree[static_cast<std::size_t>(next)] == 0) stack.push_back(next);
    }
  }
  if (static_cast<int>(order.size()) != g.node_count)
    throw std::runtime_error("topological_order: cycle detected (" +
                             std::to_string(g.node_count - order.size()) +
                             " nodes unplaceable)");
  return order;
}

inline bool is_acyclic(const Dag& g) {
  auto adj = g.adjacency();
  std::vector<int> degree = g.in_degree;
  std::vector<int> stack;
  for (int i = 0; i < g.node_count; ++i)
    if (degree[static_cast<std::size_t>(i)] == 0) stack.push_back(i);
  std::size_t seen = 0;
  while (!stack.empty()) {
    const int n = stack.back();
    stack.pop_back();
    ++seen;
    for (int next : adj[static_cast<std::size_t>(n)])
      if (--degree[static_cast<std::size_t>(next)] == 0) stack.push_back(next);
  }
  return seen == static_cast<std::size_t>(g.node_count);
}

// Drops every back-edge met on a depth-first walk, leaving acyclic input
// untouched. Edge order of the survivors is preserved.
inline Dag eliminate_cycles(const Dag& g) {
  const std::size_t v = static_cast<std::size_t>(g.node_count);
  // adjacency carrying original edge indices
  std::vector<std::vector<std::pair<int, std::size_t>>> adj(v);
  for (std::size_t e = 0; e < g.edges.size(); ++e)
    adj[static_cast<std::size_t>(g.edges[e].first)].emplace_back(g.edges[e].second, e);

  enum class Color : unsigned char { white, gray, black };
  std::vector<Color> color(v, Color::white);
  std::vector<bool> drop(g.edges.size(), false);

  struct Frame {
    int node;
    std::size_t next_child;
  };
  std::vector<Frame> stack;
  for (int start = 0; start < g.node_count; ++start) {
    if (color[static_cast<std::size_t>(start)] != Color::white) continue;
    color[static_cast<std::size_t>(start)] = Color::gray;
    stack.push_back({start, 0});
    while (!stack.empty()) {
      Frame& f = stack.back();
      const auto& out = adj[static_cast<std::size_t>(f.node)];
      if (f.next_child == out.size()) {
        color[static_cast<std::size_t>(f.node)] = Color::black;
        stack.pop_back();
        continue;
      }
      const auto [child, edge_idx] = out[f.next_child++];
      if (color[static_cast<std::size_t>(child)] == Color::gray) {
        drop[edge_idx] = true;  // back edge
      } else if (color[static_cast<std::size_t>(child)] == Color::white) {
        color[static_cast<std::size_t>(child)] = Color::gray;
        stack.push_back({child, 0});
      }
    }
  }

  Dag out = Dag::with_nodes(g.node_count);
  for (std::size_t e = 0; e < g.edges.size(); ++e)
    if (!drop[e]) out.add_edge(g.edges[e].first, g.edges[e].second);
  return out;
}

// Nodes reachable from `start` by directed paths, including `start`.
inline std::vector<bool> reachable_from(const Dag& g, int start) {
  auto adj = g.adjacency();
  std::vector<bool> seen(static_cast<std::size_t>(g.node_count), false);
  std::vector<int> stack{start};
  seen[static_cast<std::size_t>(start)] = true;
  while (!stack.empty()) {
    const int n = stack.back();
    stack.pop_back();
    for (int next : adj[static_cast<std::size_t>(n)]) {
      if (!seen[static_cast<std::size_t>(next)]) {
        seen[static_cast<std::size_t>(next)] = true;
        stack.push_back(next);
      }
    }
  }
  return seen;
}

inline void to_json(nlohmann::json& j, const Dag& g) {
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& [s, t] : g.edges) edges.push_back({s, t});
  j = nlohmann::json{{"v", g.node_count}, {"edges", std::move(edges)}};
}

inline void from_json(const nlohmann::json& j, Dag& g) {
  g = Dag::with_nodes(j.at("v").get<int>());
  for (const auto& e : j.at("edges")) g.add_edge(e.at(0).get<int>(), e.at(1).get<int>());
}

}  // namespace priorcast
