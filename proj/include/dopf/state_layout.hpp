#pragma once

#include <cstddef>

namespace dopf {

/// Index map of an OPF state vector x = (θ, v, p_g, q_g).
struct StateLayout {
  std::size_t num_buses = 0;
  std::size_t num_generators = 0;

  std::size_t theta(std::size_t bus) const { return bus; }
  std::size_t v(std::size_t bus) const { return num_buses + bus; }
  std::size_t p(std::size_t gen) const { return 2 * num_buses + gen; }
  std::size_t q(std::size_t gen) const { return 2 * num_buses + num_generators + gen; }
  std::size_t dim() const { return 2 * (num_buses + num_generators); }
};

}  // namespace dopf
