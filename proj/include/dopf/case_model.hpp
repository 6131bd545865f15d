#pragma once

#include <cstddef>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/SparseCore>

namespace dopf {

using SparseMatrix = Eigen::SparseMatrix<double>;

/// Malformed or inconsistent case data. line() is the 1-based input line the
/// problem was found on, or 0 when it is not tied to one.
class CaseError : public std::runtime_error {
 public:
  explicit CaseError(const std::string& what, int line = 0);

  int line() const noexcept { return line_; }

 private:
  int line_;
};

struct Bus {
  int id = 0;
  double v_min = 0.9;
  double v_max = 1.1;
  double p_load = 0.0;
  double q_load = 0.0;
  double shunt_g = 0.0;
  double shunt_b = 0.0;
  bool is_reference = false;
};

struct Branch {
  int from_bus = 0;
  int to_bus = 0;
  // Internal bus indices, valid after normalize().
  std::size_t from = 0;
  std::size_t to = 0;
  double series_r = 0.0;
  double series_x = 0.0;
  double charging_b = 0.0;
  double tap_ratio = 1.0;
  double phase_shift = 0.0;
  /// Apparent power limit; 0 means unlimited.
  double s_max = 0.0;
};

struct Generator {
  int bus = 0;
  std::size_t bus_index = 0;  // valid after normalize()
  double p_min = 0.0;
  double p_max = 0.0;
  double q_min = 0.0;
  double q_max = 0.0;
  double p_init = 0.0;
  double q_init = 0.0;
};

/// Generation cost a2 P^2 + a1 P + a0 with P in MW, result in cost/h.
struct CostPolynomial {
  double a2 = 0.0;
  double a1 = 0.0;
  double a0 = 0.0;
};

/// Power system case. Raw cases (per_unit == false) hold MW/MVAr/MVA and
/// degrees as read from the file; normalized cases hold per-unit quantities on
/// base_power and radians, with Branch::from/to and Generator::bus_index set.
struct NetworkCase {
  double base_power = 100.0;
  std::vector<Bus> buses;
  std::vector<Branch> branches;
  std::vector<Generator> generators;
  std::vector<CostPolynomial> costs;  // one per generator
  bool per_unit = false;

  /// Internal index of the bus with external id `id`; throws CaseError if absent.
  std::size_t index_of(int id) const;
  std::size_t reference_index() const;
};

/// Real and imaginary parts of the nodal admittance matrix.
struct AdmittanceMatrix {
  SparseMatrix G;
  SparseMatrix B;
};

/// Parses a MATPOWER-style M-file (bus, gen, branch, gencost tables and
/// baseMVA). Out-of-service branches and generators are dropped. Recoverable
/// oddities (extra columns, unrecognised statements) are reported through
/// `warnings` when given.
NetworkCase parse_case(std::string_view text,
                       std::vector<std::string>* warnings = nullptr);

/// Reads and parses a case file from disk.
NetworkCase load_case(const std::string& path,
                      std::vector<std::string>* warnings = nullptr);

/// Converts to per-unit with 0-based contiguous indices. Idempotent.
NetworkCase normalize(const NetworkCase& raw);

/// Standard pi-model assembly. Requires a normalized case.
AdmittanceMatrix build_admittance(const NetworkCase& grid);

/// Canonical case file: the M-file subset understood by parse_case, always in
/// physical units (MW, MVAr, degrees), with every value printed at round-trip
/// precision. Column order is documented in data/README.md.
std::string serialize_case(const NetworkCase& grid);

/// Cost of `p_mw` megawatts for one generator.
inline double evaluate_cost(const CostPolynomial& c, double p_mw) {
  return (c.a2 * p_mw + c.a1) * p_mw + c.a0;
}

}  // namespace dopf
