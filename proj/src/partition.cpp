#include "dopf/partition.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <tuple>

#include <fmt/format.h>

namespace dopf {

int RegionAssignment::num_regions() const {
  int n = 0;
  for (const auto& [bus, region] : region_of) {
    n = std::max(n, region + 1);
  }
  return n;
}

RegionAssignment parse_region_map(const std::string& text) {
  RegionAssignment assignment;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) {
      line.resize(hash);
    }
    std::istringstream fields(line);
    int bus = 0;
    int region = 0;
    if (!(fields >> bus)) {
      if (line.find_first_not_of(" \t\r") != std::string::npos) {
        throw PartitionError(fmt::format("region map line {}: expected 'bus_id region_id'",
                                         line_no));
      }
      continue;
    }
    std::string extra;
    if (!(fields >> region) || (fields >> extra)) {
      throw PartitionError(
          fmt::format("region map line {}: expected 'bus_id region_id'", line_no));
    }
    if (region < 0) {
      throw PartitionError(fmt::format("region map line {}: negative region id", line_no));
    }
    if (!assignment.region_of.emplace(bus, region).second) {
      throw PartitionError(fmt::format("region map line {}: bus {} assigned twice", line_no, bus));
    }
  }
  return assignment;
}

RegionAssignment load_region_map(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw PartitionError(fmt::format("cannot open region map '{}'", path));
  }
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_region_map(buffer.str());
}

RegionAssignment single_region(const NetworkCase& grid) {
  RegionAssignment assignment;
  for (const auto& bus : grid.buses) {
    assignment.region_of[bus.id] = 0;
  }
  return assignment;
}

namespace {

// Union-find over bus indices.
struct Components {
  std::vector<std::size_t> parent;

  explicit Components(std::size_t n) : parent(n) {
    std::iota(parent.begin(), parent.end(), std::size_t{0});
  }
  std::size_t find(std::size_t i) {
    while (parent[i] != i) {
      parent[i] = parent[parent[i]];
      i = parent[i];
    }
    return i;
  }
  void join(std::size_t a, std::size_t b) { parent[find(a)] = find(b); }
};

}  // namespace

std::vector<RegionModel> decompose(const NetworkCase& grid, const RegionAssignment& assignment) {
  if (!grid.per_unit) {
    throw PartitionError("decompose requires a normalized case");
  }
  const std::size_t n = grid.buses.size();
  std::vector<int> region(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto it = assignment.region_of.find(grid.buses[i].id);
    if (it == assignment.region_of.end()) {
      throw PartitionError(fmt::format("bus {} has no region", grid.buses[i].id));
    }
    region[i] = it->second;
  }
  for (const auto& [bus, r] : assignment.region_of) {
    bool found = std::any_of(grid.buses.begin(), grid.buses.end(),
                             [&](const Bus& b) { return b.id == bus; });
    if (!found) {
      throw PartitionError(fmt::format("region map names unknown bus {}", bus));
    }
  }
  const int num_regions = assignment.num_regions();
  std::vector<std::size_t> sizes(static_cast<std::size_t>(num_regions), 0);
  for (int r : region) {
    ++sizes[static_cast<std::size_t>(r)];
  }
  for (int r = 0; r < num_regions; ++r) {
    if (sizes[static_cast<std::size_t>(r)] == 0) {
      throw PartitionError(fmt::format("region {} is empty", r));
    }
  }

  Components whole(n);
  Components inner(n);
  for (const auto& br : grid.branches) {
    whole.join(br.from, br.to);
    if (region[br.from] == region[br.to]) {
      inner.join(br.from, br.to);
    }
  }
  for (std::size_t i = 1; i < n; ++i) {
    if (whole.find(i) != whole.find(0)) {
      throw PartitionError(fmt::format("grid is disconnected at bus {}", grid.buses[i].id));
    }
  }
  {
    std::vector<std::size_t> root(static_cast<std::size_t>(num_regions), n);
    for (std::size_t i = 0; i < n; ++i) {
      auto& r = root[static_cast<std::size_t>(region[i])];
      if (r == n) {
        r = inner.find(i);
      } else if (inner.find(i) != r) {
        throw PartitionError(fmt::format("region {} is disconnected", region[i]));
      }
    }
  }

  std::vector<RegionModel> regions;
  for (int r = 0; r < num_regions; ++r) {
    RegionModel model;
    model.region_id = r;
    model.grid.base_power = grid.base_power;
    model.grid.per_unit = true;

    std::set<std::size_t> copies;
    for (std::size_t k = 0; k < grid.branches.size(); ++k) {
      const auto& br = grid.branches[k];
      const bool from_core = region[br.from] == r;
      const bool to_core = region[br.to] == r;
      if (!from_core && !to_core) {
        continue;
      }
      model.global_branch.push_back(k);
      if (!from_core) {
        copies.insert(br.from);
      }
      if (!to_core) {
        copies.insert(br.to);
      }
    }

    std::vector<std::size_t> local(n, n);
    for (std::size_t i = 0; i < n; ++i) {
      if (region[i] == r) {
        local[i] = model.global_bus.size();
        model.global_bus.push_back(i);
        model.grid.buses.push_back(grid.buses[i]);
      }
    }
    model.num_core = model.global_bus.size();
    for (std::size_t i : copies) {
      local[i] = model.global_bus.size();
      model.global_bus.push_back(i);
      Bus copy = grid.buses[i];
      copy.p_load = copy.q_load = copy.shunt_g = copy.shunt_b = 0.0;
      copy.is_reference = false;
      model.grid.buses.push_back(copy);
      model.copy_owner.push_back(region[i]);
    }
    for (std::size_t k : model.global_branch) {
      Branch br = grid.branches[k];
      br.from = local[br.from];
      br.to = local[br.to];
      model.grid.branches.push_back(br);
    }
    for (std::size_t g = 0; g < grid.generators.size(); ++g) {
      const auto& gen = grid.generators[g];
      if (region[gen.bus_index] != r) {
        continue;
      }
      Generator copy = gen;
      copy.bus_index = local[gen.bus_index];
      model.global_generator.push_back(g);
      model.grid.generators.push_back(copy);
      model.grid.costs.push_back(grid.costs[g]);
    }
    validate_region(model);
    regions.push_back(std::move(model));
  }
  return regions;
}

void validate_region(const RegionModel& region) {
  const std::size_t n = region.num_buses();
  if (region.num_core == 0 || region.num_core > n) {
    throw PartitionError(fmt::format("region {} has no core buses", region.region_id));
  }
  if (region.global_bus.size() != n || region.copy_owner.size() != n - region.num_core ||
      region.global_branch.size() != region.grid.branches.size() ||
      region.global_generator.size() != region.grid.generators.size() ||
      region.grid.costs.size() != region.grid.generators.size()) {
    throw PartitionError(fmt::format("region {} index maps are inconsistent", region.region_id));
  }
  std::vector<bool> reached(n, false);
  for (const auto& br : region.grid.branches) {
    if (br.from >= n || br.to >= n) {
      throw PartitionError(fmt::format("region {} branch index out of range", region.region_id));
    }
    if (!region.is_core(br.from) && !region.is_core(br.to)) {
      throw PartitionError(fmt::format(
          "region {}: branch {}-{} joins two copy buses (second-hop copy)", region.region_id,
          br.from_bus, br.to_bus));
    }
    reached[br.from] = reached[br.to] = true;
  }
  for (std::size_t i = region.num_core; i < n; ++i) {
    if (!reached[i]) {
      throw PartitionError(fmt::format("region {}: copy bus {} has no tie-line",
                                       region.region_id, region.grid.buses[i].id));
    }
    if (region.copy_owner[i - region.num_core] == region.region_id) {
      throw PartitionError(fmt::format("region {}: copy bus {} is owned by its own region",
                                       region.region_id, region.grid.buses[i].id));
    }
  }
  for (const auto& gen : region.grid.generators) {
    if (gen.bus_index >= region.num_core) {
      throw PartitionError(
          fmt::format("region {}: generator at non-core bus {}", region.region_id, gen.bus));
    }
  }
}

Eigen::VectorXd CouplingSystem::residual(const std::vector<Eigen::VectorXd>& xs) const {
  if (xs.size() != A.size()) {
    throw std::invalid_argument("coupling residual: region count mismatch");
  }
  Eigen::VectorXd r = -b;
  for (std::size_t l = 0; l < A.size(); ++l) {
    if (static_cast<std::size_t>(xs[l].size()) != dims[l]) {
      throw std::invalid_argument(fmt::format("coupling residual: region {} has dimension {}, "
                                              "expected {}",
                                              l, xs[l].size(), dims[l]));
    }
    r += A[l] * xs[l];
  }
  return r;
}

CouplingSystem build_consensus(const std::vector<RegionModel>& regions) {
  struct Pair {
    int bus_id;
    int owner;
    int copier;
    std::size_t core_local;
    std::size_t copy_local;
  };
  std::map<std::size_t, std::pair<int, std::size_t>> owner_of;  // global bus -> (region, local)
  for (const auto& region : regions) {
    for (std::size_t i = 0; i < region.num_core; ++i) {
      owner_of[region.global_bus[i]] = {region.region_id, i};
    }
  }
  std::vector<Pair> pairs;
  for (const auto& region : regions) {
    for (std::size_t i = region.num_core; i < region.num_buses(); ++i) {
      auto it = owner_of.find(region.global_bus[i]);
      if (it == owner_of.end() || it->second.first != region.copy_owner[i - region.num_core]) {
        throw PartitionError(fmt::format("region {}: copy bus {} has no matching core owner",
                                         region.region_id, region.grid.buses[i].id));
      }
      pairs.push_back({region.grid.buses[i].id, it->second.first, region.region_id,
                       it->second.second, i});
    }
  }
  std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
    return std::tie(a.bus_id, a.copier) < std::tie(b.bus_id, b.copier);
  });

  CouplingSystem coupling;
  std::vector<std::vector<Eigen::Triplet<double>>> entries(regions.size());
  std::vector<std::size_t> position(regions.size());
  for (std::size_t l = 0; l < regions.size(); ++l) {
    if (regions[l].region_id != static_cast<int>(l)) {
      throw PartitionError("regions must be ordered by region id");
    }
    coupling.dims.push_back(regions[l].dim());
  }
  // Rows grouped per bus: all angle rows, then all magnitude rows.
  for (std::size_t start = 0; start < pairs.size();) {
    std::size_t end = start;
    while (end < pairs.size() && pairs[end].bus_id == pairs[start].bus_id) {
      ++end;
    }
    for (Quantity q : {Quantity::angle, Quantity::magnitude}) {
      for (std::size_t k = start; k < end; ++k) {
        const Pair& p = pairs[k];
        const int row = static_cast<int>(coupling.rows_info.size());
        const auto owner = static_cast<std::size_t>(p.owner);
        const auto copier = static_cast<std::size_t>(p.copier);
        const StateLayout lo = regions[owner].layout();
        const StateLayout lc = regions[copier].layout();
        const bool angle = q == Quantity::angle;
        entries[owner].emplace_back(
            row, static_cast<int>(angle ? lo.theta(p.core_local) : lo.v(p.core_local)), 1.0);
        entries[copier].emplace_back(
            row, static_cast<int>(angle ? lc.theta(p.copy_local) : lc.v(p.copy_local)), -1.0);
        coupling.rows_info.push_back({p.bus_id, q, p.owner, p.copier});
      }
    }
    start = end;
  }
  const auto m = static_cast<Eigen::Index>(coupling.rows_info.size());
  for (std::size_t l = 0; l < regions.size(); ++l) {
    SparseMatrix a(m, static_cast<Eigen::Index>(coupling.dims[l]));
    a.setFromTriplets(entries[l].begin(), entries[l].end());
    coupling.A.push_back(std::move(a));
  }
  coupling.b = Eigen::VectorXd::Zero(m);
  return coupling;
}

std::string export_triplets(const CouplingSystem& coupling) {
  std::string out = fmt::format("# consensus rows={} regions={}\n", coupling.rows(),
                                coupling.num_regions());
  for (std::size_t l = 0; l < coupling.A.size(); ++l) {
    for (int k = 0; k < coupling.A[l].outerSize(); ++k) {
      for (SparseMatrix::InnerIterator it(coupling.A[l], k); it; ++it) {
        out += fmt::format("{} {} {} {}\n", l, it.row(), it.col(), it.value());
      }
    }
  }
  return out;
}

std::vector<Eigen::VectorXd> scatter(const std::vector<RegionModel>& regions,
                                     const Eigen::VectorXd& global_x) {
  std::size_t global_buses = 0;
  std::size_t global_generators = 0;
  for (const auto& region : regions) {
    global_buses += region.num_core;
    global_generators += region.grid.generators.size();
  }
  const StateLayout global{global_buses, global_generators};
  if (static_cast<std::size_t>(global_x.size()) != global.dim()) {
    throw std::invalid_argument(fmt::format("scatter: state has dimension {}, expected {}",
                                            global_x.size(), global.dim()));
  }
  std::vector<Eigen::VectorXd> xs;
  for (const auto& region : regions) {
    const StateLayout lo = region.layout();
    Eigen::VectorXd x(static_cast<Eigen::Index>(lo.dim()));
    for (std::size_t i = 0; i < region.num_buses(); ++i) {
      x[lo.theta(i)] = global_x[global.theta(region.global_bus[i])];
      x[lo.v(i)] = global_x[global.v(region.global_bus[i])];
    }
    for (std::size_t g = 0; g < region.grid.generators.size(); ++g) {
      x[lo.p(g)] = global_x[global.p(region.global_generator[g])];
      x[lo.q(g)] = global_x[global.q(region.global_generator[g])];
    }
    xs.push_back(std::move(x));
  }
  return xs;
}

GatherResult gather(const std::vector<RegionModel>& regions, const CouplingSystem& coupling,
                    const std::vector<Eigen::VectorXd>& xs, std::size_t global_buses,
                    std::size_t global_generators) {
  if (xs.size() != regions.size()) {
    throw std::invalid_argument("gather: region count mismatch");
  }
  const StateLayout global{global_buses, global_generators};
  GatherResult result;
  result.x = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(global.dim()));
  for (std::size_t l = 0; l < regions.size(); ++l) {
    const auto& region = regions[l];
    const StateLayout lo = region.layout();
    if (static_cast<std::size_t>(xs[l].size()) != lo.dim()) {
      throw std::invalid_argument(fmt::format("gather: region {} has dimension {}, expected {}",
                                              l, xs[l].size(), lo.dim()));
    }
    for (std::size_t i = 0; i < region.num_core; ++i) {
      result.x[global.theta(region.global_bus[i])] = xs[l][lo.theta(i)];
      result.x[global.v(region.global_bus[i])] = xs[l][lo.v(i)];
    }
    for (std::size_t g = 0; g < region.grid.generators.size(); ++g) {
      result.x[global.p(region.global_generator[g])] = xs[l][lo.p(g)];
      result.x[global.q(region.global_generator[g])] = xs[l][lo.q(g)];
    }
  }
  if (coupling.rows() > 0) {
    result.consensus_violation = coupling.residual(xs).lpNorm<Eigen::Infinity>();
  }
  return result;
}

}  // namespace dopf
