#pragma once

#include <cstddef>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "dopf/case_model.hpp"
#include "dopf/state_layout.hpp"

namespace dopf {

class PartitionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bus id -> region id, regions numbered 0..num_regions()-1.
struct RegionAssignment {
  std::map<int, int> region_of;

  int num_regions() const;
};

/// Reads `bus_id region_id` lines; `#` starts a comment.
RegionAssignment parse_region_map(const std::string& text);
RegionAssignment load_region_map(const std::string& path);

/// Every bus in its own region 0.
RegionAssignment single_region(const NetworkCase& grid);

/// One region of a sharing-components decomposition.
///
/// `grid` is the local network: core buses first (in global order), then copy
/// buses (in global order). Copy buses keep the owner's voltage limits but
/// carry no load, shunt, or generator. The branch list holds every branch with
/// at least one core endpoint, so each tie-line is present in both regions.
struct RegionModel {
  int region_id = 0;
  NetworkCase grid;  // normalized
  std::size_t num_core = 0;

  std::vector<std::size_t> global_bus;        // local bus -> global bus index
  std::vector<std::size_t> global_generator;  // local generator -> global index
  std::vector<std::size_t> global_branch;     // local branch -> global index
  std::vector<int> copy_owner;                // region owning each copy bus

  std::size_t num_buses() const { return grid.buses.size(); }
  std::size_t num_copies() const { return num_buses() - num_core; }
  bool is_core(std::size_t local_bus) const { return local_bus < num_core; }
  StateLayout layout() const { return {grid.buses.size(), grid.generators.size()}; }
  std::size_t dim() const { return layout().dim(); }
};

/// Splits a normalized case. Throws PartitionError when the assignment is not
/// total, a region is empty, a region's core buses are not connected among
/// themselves, or the grid is disconnected.
std::vector<RegionModel> decompose(const NetworkCase& grid, const RegionAssignment& assignment);

/// Structural checks on a (possibly deserialized) region: every local branch
/// touches a core bus and every copy bus is reached by a tie-line.
void validate_region(const RegionModel& region);

enum class Quantity { angle, magnitude };

struct ConsensusRow {
  int bus_id = 0;
  Quantity quantity = Quantity::angle;
  int owner = 0;
  int copier = 0;
};

/// Affine coupling sum_l A_l x_l = b between regional state vectors.
struct CouplingSystem {
  std::vector<SparseMatrix> A;  // one per region, rows() x dims[l]
  Eigen::VectorXd b;
  std::vector<ConsensusRow> rows_info;
  std::vector<std::size_t> dims;

  std::size_t rows() const { return rows_info.size(); }
  std::size_t num_regions() const { return A.size(); }

  /// sum_l A_l x_l - b.
  Eigen::VectorXd residual(const std::vector<Eigen::VectorXd>& xs) const;
};

/// One angle and one magnitude row per (core bus, copy) pair, ordered by bus
/// id, then angle before magnitude, then copier region.
CouplingSystem build_consensus(const std::vector<RegionModel>& regions);

/// Debug dump: header line, then `region row col value` per nonzero.
std::string export_triplets(const CouplingSystem& coupling);

/// Copies a global state (layout of the undivided case) into every region.
std::vector<Eigen::VectorXd> scatter(const std::vector<RegionModel>& regions,
                                     const Eigen::VectorXd& global_x);

struct GatherResult {
  Eigen::VectorXd x;
  double consensus_violation = 0.0;  // ||sum A x - b||_inf
};

/// Assembles a global state from the core variables of each region.
GatherResult gather(const std::vector<RegionModel>& regions, const CouplingSystem& coupling,
                    const std::vector<Eigen::VectorXd>& xs, std::size_t global_buses,
                    std::size_t global_generators);

}  // namespace dopf
