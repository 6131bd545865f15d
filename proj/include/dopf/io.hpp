#pragma once

#include <cstddef>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Core>
#include <json.hpp>

#include "dopf/case_model.hpp"
#include "dopf/partition.hpp"

namespace dopf {

using Json = nlohmann::json;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Doubles are written at round-trip precision; non-finite entries become the
// strings "inf", "-inf" and "nan".
Json json_number(double v);
double number_from_json(const Json& j);

/// Every object key anywhere in `j`.
std::set<std::string> json_keys(const Json& j);

Json vector_to_json(const Eigen::VectorXd& v);
Eigen::VectorXd vector_from_json(const Json& j);

/// {"rows", "cols", "i", "j", "v"} over the stored entries in column order.
Json sparse_to_json(const SparseMatrix& m);
SparseMatrix sparse_from_json(const Json& j);

Json case_to_json(const NetworkCase& grid);
NetworkCase case_from_json(const Json& j);

/// Everything a client holds: its region and its block of the coupling.
struct RegionFile {
  RegionModel region;
  SparseMatrix coupling_block;
  std::size_t num_consensus = 0;
};

std::string region_file_json(const RegionFile& file);
RegionFile parse_region_file(std::string_view text);

/// Coupling only: the coordinator's view of the problem.
std::string coupling_json(const CouplingSystem& coupling);
CouplingSystem parse_coupling(std::string_view text);

std::string read_text_file(const std::string& path);
/// Writes through a temporary file and rename.
void write_text_file(const std::string& path, std::string_view text);

}  // namespace dopf
