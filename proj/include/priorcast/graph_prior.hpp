#pragma once

#include <cassert>
#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>

#include "priorcast/dag.hpp"
#include "priorcast/rng.hpp"

namespace priorcast {

// Hyperparameters of the graph-size and extra-edge-density distributions:
// log V ~ U[log_v_min, log_v_max] and rho ~ Gamma(shape, scale) truncated
// to [0, rho_max].
struct GraphPriorConfig {
  double log_v_min = std::log(20.0);
  double log_v_max = std::log(150.0);
  double rho_gamma_shape = 2.0;
  double rho_gamma_scale = 0.2;
  double rho_max = 1.0;

  void validate() const {
    if (!(log_v_min <= log_v_max))
      throw std::invalid_argument("GraphPriorConfig: log_v_min > log_v_max");
    if (std::exp(log_v_min) < 3.0)
      throw std::invalid_argument(
          "GraphPriorConfig: exp(log_v_min) must be >= 3");
    if (!(rho_gamma_shape > 0.0) || !(rho_gamma_scale > 0.0))
      throw std::invalid_argument("GraphPriorConfig: gamma parameters must be positive");
    if (!(rho_max >= 0.0 && rho_max <= 1.0))
      throw std::invalid_argument("GraphPriorConfig: rho_max must lie in [0, 1]");
  }
};

namespace detail {

// Draws node i < n with probability (k_i + 1) / sum_j (k_j + 1).
inline int pick_preferential(const std::vector<int>& in_degree, int n,
                             RandomStream& rng) {
  double total = 0.0;
  for (int i = 0; i < n; ++i) total += in_degree[static_cast<std::size_t>(i)] + 1;
  double r = rng.uniform() * total;
  for (int i = 0; i < n; ++i) {
    r -= in_degree[static_cast<std::size_t>(i)] + 1;
    if (r < 0.0) return i;
  }
  return n - 1;
}

inline void check_graph_args(const char* name, int v, double rho) {
  if (v < 2)
    throw std::invalid_argument(std::string(name) + ": v must be >= 2, got " +
                                std::to_string(v));
  if (!(rho >= 0.0 && rho <= 1.0))
    throw std::invalid_argument(std::string(name) + ": rho must lie in [0, 1]");
}

}  // namespace detail

// Single Root Node Random Growing Network. Every grown node receives an
// edge from a uniformly chosen prior node, plus an edge from a
// preferentially chosen target with probability rho. Node 1 is the only
// root by construction.
inline Dag generate_srngn(int v, double rho, RandomStream& rng) {
  detail::check_graph_args("generate_srngn", v, rho);
  Dag g = Dag::with_nodes(v);
  g.add_edge(1, 0);
  for (int n = 2; n < v; ++n) {
    const int target = detail::pick_preferential(g.in_degree, n, rng);
    // uniform source from {0,...,n-1} \ {target}
    int source = static_cast<int>(rng.uniform_int(0, n - 2));
    if (source >= target) ++source;
    g.add_edge(source, n);
    if (rng.uniform() < rho) {
      assert(target != n);
      g.add_edge(target, n);
    }
  }
  // All growth edges point old->new, so this never fires; kept as the
  // algorithm's final pass.
  return eliminate_cycles(g);
}

// Random Growing Network with redirection and preferential attachment.
// The new node connects to the preferential target with probability rho
// and to the target's only descendant otherwise. A target without a
// descendant (node 0) absorbs the redirect.
inline Dag generate_rgn(int v, double rho, RandomStream& rng) {
  detail::check_graph_args("generate_rgn", v, rho);
  Dag g = Dag::with_nodes(v);
  g.add_edge(1, 0);
  std::vector<int> descendant(static_cast<std::size_t>(v), -1);
  descendant[1] = 0;
  for (int n = 2; n < v; ++n) {
    const int target = detail::pick_preferential(g.in_degree, n, rng);
    int dest = target;
    if (!(rng.uniform() < rho)) {
      const int d = descendant[static_cast<std::size_t>(target)];
      if (d >= 0) dest = d;
    }
    g.add_edge(n, dest);
    descendant[static_cast<std::size_t>(n)] = dest;
  }
  return g;
}

// Samples (v, rho) for one graph: v = round(exp(u)), u uniform on the log
// interval; rho by gamma rejection under rho_max with a clamped fallback.
inline std::pair<int, double> sample_graph_config(const GraphPriorConfig& cfg,
                                                  RandomStream& rng) {
  cfg.validate();
  const double u = rng.uniform(cfg.log_v_min, cfg.log_v_max);
  const int v = static_cast<int>(std::llround(std::exp(u)));
  double rho = 0.0;
  for (int attempt = 0; attempt < 1000; ++attempt) {
    rho = rng.gamma(cfg.rho_gamma_shape, cfg.rho_gamma_scale);
    if (rho <= cfg.rho_max) return {v, rho};
  }
  return {v, std::min(rho, cfg.rho_max)};
}

}  // namespace priorcast
