#include "dopf/io.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <vector>

#include <fmt/format.h>

namespace dopf {
namespace {

Json number(double v) { return json_number(v); }
double number_from(const Json& j) { return number_from_json(j); }

template <typename T>
T field(const Json& j, const char* key) {
  if (!j.is_object() || !j.contains(key)) {
    throw FormatError(fmt::format("missing field '{}'", key));
  }
  try {
    return j.at(key).get<T>();
  } catch (const Json::exception& e) {
    throw FormatError(fmt::format("field '{}': {}", key, e.what()));
  }
}

double real_field(const Json& j, const char* key) {
  if (!j.is_object() || !j.contains(key)) {
    throw FormatError(fmt::format("missing field '{}'", key));
  }
  return number_from(j.at(key));
}

Json parse_json(std::string_view text) {
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw FormatError(std::string("invalid JSON: ") + e.what());
  }
}

void expect_format(const Json& j, const char* name) {
  if (field<std::string>(j, "format") != name || field<int>(j, "version") != 1) {
    throw FormatError(fmt::format("not a version 1 '{}' document", name));
  }
}

}  // namespace

Json json_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

double number_from_json(const Json& j) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    const auto& s = j.get_ref<const std::string&>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  }
  throw FormatError("expected a number, got " + j.dump());
}

std::set<std::string> json_keys(const Json& j) {
  std::set<std::string> keys;
  if (j.is_object()) {
    for (const auto& [k, v] : j.items()) {
      keys.insert(k);
      keys.merge(json_keys(v));
    }
  } else if (j.is_array()) {
    for (const auto& v : j) keys.merge(json_keys(v));
  }
  return keys;
}

Json vector_to_json(const Eigen::VectorXd& v) {
  Json out = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(number(v[i]));
  return out;
}

Eigen::VectorXd vector_from_json(const Json& j) {
  if (!j.is_array()) throw FormatError("expected an array");
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Eigen::Index>(i)] = number_from(j[i]);
  return v;
}

Json sparse_to_json(const SparseMatrix& m) {
  Json rows = Json::array(), cols = Json::array(), vals = Json::array();
  for (Eigen::Index k = 0; k < m.outerSize(); ++k) {
    for (SparseMatrix::InnerIterator it(m, k); it; ++it) {
      rows.push_back(it.row());
      cols.push_back(it.col());
      vals.push_back(number(it.value()));
    }
  }
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"i", rows}, {"j", cols}, {"v", vals}};
}

SparseMatrix sparse_from_json(const Json& j) {
  const auto rows = field<Eigen::Index>(j, "rows");
  const auto cols = field<Eigen::Index>(j, "cols");
  const auto is = field<std::vector<Eigen::Index>>(j, "i");
  const auto js = field<std::vector<Eigen::Index>>(j, "j");
  const Json& vs = j.at("v");
  if (rows < 0 || cols < 0 || is.size() != js.size() || is.size() != vs.size()) {
    throw FormatError("inconsistent sparse matrix");
  }
  std::vector<Eigen::Triplet<double>> t;
  t.reserve(is.size());
  for (std::size_t k = 0; k < is.size(); ++k) {
    if (is[k] < 0 || is[k] >= rows || js[k] < 0 || js[k] >= cols) {
      throw FormatError("sparse entry out of range");
    }
    t.emplace_back(is[k], js[k], number_from(vs[k]));
  }
  SparseMatrix m(rows, cols);
  m.setFromTriplets(t.begin(), t.end());
  return m;
}

Json case_to_json(const NetworkCase& grid) {
  Json buses = Json::array();
  for (const auto& b : grid.buses) {
    buses.push_back({{"id", b.id},
                     {"v_min", number(b.v_min)},
                     {"v_max", number(b.v_max)},
                     {"p_load", number(b.p_load)},
                     {"q_load", number(b.q_load)},
                     {"shunt_g", number(b.shunt_g)},
                     {"shunt_b", number(b.shunt_b)},
                     {"is_reference", b.is_reference}});
  }
  Json branches = Json::array();
  for (const auto& br : grid.branches) {
    branches.push_back({{"from_bus", br.from_bus},
                        {"to_bus", br.to_bus},
                        {"from", br.from},
                        {"to", br.to},
                        {"series_r", number(br.series_r)},
                        {"series_x", number(br.series_x)},
                        {"charging_b", number(br.charging_b)},
                        {"tap_ratio", number(br.tap_ratio)},
                        {"phase_shift", number(br.phase_shift)},
                        {"s_max", number(br.s_max)}});
  }
  Json gens = Json::array();
  for (const auto& g : grid.generators) {
    gens.push_back({{"bus", g.bus},
                    {"bus_index", g.bus_index},
                    {"p_min", number(g.p_min)},
                    {"p_max", number(g.p_max)},
                    {"q_min", number(g.q_min)},
                    {"q_max", number(g.q_max)},
                    {"p_init", number(g.p_init)},
                    {"q_init", number(g.q_init)}});
  }
  Json costs = Json::array();
  for (const auto& c : grid.costs) {
    costs.push_back({{"a2", number(c.a2)}, {"a1", number(c.a1)}, {"a0", number(c.a0)}});
  }
  return {{"base_power", number(grid.base_power)},
          {"per_unit", grid.per_unit},
          {"buses", buses},
          {"branches", branches},
          {"generators", gens},
          {"costs", costs}};
}

NetworkCase case_from_json(const Json& j) {
  NetworkCase grid;
  grid.base_power = real_field(j, "base_power");
  grid.per_unit = field<bool>(j, "per_unit");
  for (const auto& b : field<Json>(j, "buses")) {
    Bus bus;
    bus.id = field<int>(b, "id");
    bus.v_min = real_field(b, "v_min");
    bus.v_max = real_field(b, "v_max");
    bus.p_load = real_field(b, "p_load");
    bus.q_load = real_field(b, "q_load");
    bus.shunt_g = real_field(b, "shunt_g");
    bus.shunt_b = real_field(b, "shunt_b");
    bus.is_reference = field<bool>(b, "is_reference");
    grid.buses.push_back(bus);
  }
  for (const auto& b : field<Json>(j, "branches")) {
    Branch br;
    br.from_bus = field<int>(b, "from_bus");
    br.to_bus = field<int>(b, "to_bus");
    br.from = field<std::size_t>(b, "from");
    br.to = field<std::size_t>(b, "to");
    br.series_r = real_field(b, "series_r");
    br.series_x = real_field(b, "series_x");
    br.charging_b = real_field(b, "charging_b");
    br.tap_ratio = real_field(b, "tap_ratio");
    br.phase_shift = real_field(b, "phase_shift");
    br.s_max = real_field(b, "s_max");
    grid.branches.push_back(br);
  }
  for (const auto& g : field<Json>(j, "generators")) {
    Generator gen;
    gen.bus = field<int>(g, "bus");
    gen.bus_index = field<std::size_t>(g, "bus_index");
    gen.p_min = real_field(g, "p_min");
    gen.p_max = real_field(g, "p_max");
    gen.q_min = real_field(g, "q_min");
    gen.q_max = real_field(g, "q_max");
    gen.p_init = real_field(g, "p_init");
    gen.q_init = real_field(g, "q_init");
    grid.generators.push_back(gen);
  }
  for (const auto& c : field<Json>(j, "costs")) {
    grid.costs.push_back({real_field(c, "a2"), real_field(c, "a1"), real_field(c, "a0")});
  }
  if (grid.costs.size() != grid.generators.size()) {
    throw FormatError("one cost per generator required");
  }
  const std::size_t n = grid.buses.size();
  for (const auto& br : grid.branches) {
    if (grid.per_unit && (br.from >= n || br.to >= n)) throw FormatError("branch index out of range");
  }
  for (const auto& g : grid.generators) {
    if (grid.per_unit && g.bus_index >= n) throw FormatError("generator bus index out of range");
  }
  return grid;
}

std::string region_file_json(const RegionFile& file) {
  const RegionModel& r = file.region;
  Json region = {{"region_id", r.region_id},
                 {"grid", case_to_json(r.grid)},
                 {"num_core", r.num_core},
                 {"global_bus", r.global_bus},
                 {"global_generator", r.global_generator},
                 {"global_branch", r.global_branch},
                 {"copy_owner", r.copy_owner}};
  Json doc = {{"format", "dopf-region"},
              {"version", 1},
              {"region", region},
              {"coupling_block", sparse_to_json(file.coupling_block)},
              {"num_consensus", file.num_consensus}};
  return doc.dump(1);
}

RegionFile parse_region_file(std::string_view text) {
  const Json doc = parse_json(text);
  expect_format(doc, "dopf-region");
  const Json& r = doc.at("region");
  RegionFile file;
  file.region.region_id = field<int>(r, "region_id");
  file.region.grid = case_from_json(field<Json>(r, "grid"));
  file.region.num_core = field<std::size_t>(r, "num_core");
  file.region.global_bus = field<std::vector<std::size_t>>(r, "global_bus");
  file.region.global_generator = field<std::vector<std::size_t>>(r, "global_generator");
  file.region.global_branch = field<std::vector<std::size_t>>(r, "global_branch");
  file.region.copy_owner = field<std::vector<int>>(r, "copy_owner");
  file.coupling_block = sparse_from_json(field<Json>(doc, "coupling_block"));
  file.num_consensus = field<std::size_t>(doc, "num_consensus");
  if (!file.region.grid.per_unit) throw FormatError("region grid must be normalized");
  if (file.region.num_core == 0 || file.region.num_core > file.region.num_buses() ||
      file.region.copy_owner.size() != file.region.num_copies()) {
    throw FormatError("inconsistent region bus counts");
  }
  if (static_cast<std::size_t>(file.coupling_block.rows()) != file.num_consensus ||
      static_cast<std::size_t>(file.coupling_block.cols()) != file.region.dim()) {
    throw FormatError("coupling block has the wrong shape");
  }
  try {
    validate_region(file.region);
  } catch (const PartitionError& e) {
    throw FormatError(e.what());
  }
  return file;
}

std::string coupling_json(const CouplingSystem& coupling) {
  Json blocks = Json::array();
  for (const auto& a : coupling.A) blocks.push_back(sparse_to_json(a));
  Json rows = Json::array();
  for (const auto& r : coupling.rows_info) {
    rows.push_back({{"bus_id", r.bus_id},
                    {"quantity", r.quantity == Quantity::angle ? "angle" : "magnitude"},
                    {"owner", r.owner},
                    {"copier", r.copier}});
  }
  Json doc = {{"format", "dopf-coupling"}, {"version", 1},         {"A", blocks},
              {"b", vector_to_json(coupling.b)}, {"rows_info", rows}, {"dims", coupling.dims}};
  return doc.dump(1);
}

CouplingSystem parse_coupling(std::string_view text) {
  const Json doc = parse_json(text);
  expect_format(doc, "dopf-coupling");
  CouplingSystem c;
  for (const auto& a : field<Json>(doc, "A")) c.A.push_back(sparse_from_json(a));
  c.b = vector_from_json(field<Json>(doc, "b"));
  for (const auto& r : field<Json>(doc, "rows_info")) {
    ConsensusRow row;
    row.bus_id = field<int>(r, "bus_id");
    const auto q = field<std::string>(r, "quantity");
    if (q != "angle" && q != "magnitude") throw FormatError("unknown quantity '" + q + "'");
    row.quantity = q == "angle" ? Quantity::angle : Quantity::magnitude;
    row.owner = field<int>(r, "owner");
    row.copier = field<int>(r, "copier");
    c.rows_info.push_back(row);
  }
  c.dims = field<std::vector<std::size_t>>(doc, "dims");
  if (c.dims.size() != c.A.size() || static_cast<std::size_t>(c.b.size()) != c.rows()) {
    throw FormatError("inconsistent coupling dimensions");
  }
  for (std::size_t l = 0; l < c.A.size(); ++l) {
    if (static_cast<std::size_t>(c.A[l].rows()) != c.rows() ||
        static_cast<std::size_t>(c.A[l].cols()) != c.dims[l]) {
      throw FormatError(fmt::format("coupling block {} has the wrong shape", l));
    }
  }
  return c;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, std::string_view text) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write '" + tmp + "'");
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw FormatError("write failed for '" + tmp + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw FormatError("cannot rename '" + tmp + "': " + ec.message());
}

}  // namespace dopf
