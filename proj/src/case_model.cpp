#include "dopf/case_model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <complex>
#include <fstream>
#include <limits>
#include <numbers>
#include <set>
#include <sstream>

#include <fmt/format.h>

namespace dopf {

CaseError::CaseError(const std::string& what, int line)
    : std::runtime_error(line > 0 ? fmt::format("line {}: {}", line, what) : what),
      line_(line) {}

std::size_t NetworkCase::index_of(int id) const {
  for (std::size_t i = 0; i < buses.size(); ++i) {
    if (buses[i].id == id) {
      return i;
    }
  }
  throw CaseError(fmt::format("unknown bus id {}", id));
}

std::size_t NetworkCase::reference_index() const {
  for (std::size_t i = 0; i < buses.size(); ++i) {
    if (buses[i].is_reference) {
      return i;
    }
  }
  throw CaseError("case has no reference bus");
}

namespace {

struct Row {
  std::vector<double> values;
  int line = 0;
};

struct Table {
  std::vector<Row> rows;
  int line = 0;
  bool present = false;
};

struct RawTables {
  Table bus, gen, branch, gencost;
  double base_mva = 0.0;
  bool has_base = false;
};

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) {
    s.remove_prefix(1);
  }
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) {
    s.remove_suffix(1);
  }
  return s;
}

std::string_view strip_comment(std::string_view line) {
  auto pos = line.find('%');
  return pos == std::string_view::npos ? line : line.substr(0, pos);
}

double parse_number(std::string_view token, int line) {
  if (token == "Inf" || token == "inf") {
    return std::numeric_limits<double>::infinity();
  }
  if (token == "-Inf" || token == "-inf") {
    return -std::numeric_limits<double>::infinity();
  }
  if (!token.empty() && token.front() == '+') {
    token.remove_prefix(1);
  }
  double value = 0.0;
  auto [end, ec] = std::from_chars(token.data(), token.data() + token.size(), value);
  if (ec != std::errc() || end != token.data() + token.size()) {
    throw CaseError(fmt::format("invalid number '{}'", token), line);
  }
  return value;
}

// Splits matrix body text into rows; rows end at ';' or end of line.
void append_matrix_text(std::string_view body, int line, Table& table, Row& pending) {
  std::size_t i = 0;
  while (i <= body.size()) {
    std::size_t j = i;
    while (j < body.size() && body[j] != ';') {
      ++j;
    }
    std::string_view chunk = body.substr(i, j - i);
    std::size_t k = 0;
    while (k < chunk.size()) {
      while (k < chunk.size() &&
             (std::isspace(static_cast<unsigned char>(chunk[k])) || chunk[k] == ',')) {
        ++k;
      }
      std::size_t start = k;
      while (k < chunk.size() && !std::isspace(static_cast<unsigned char>(chunk[k])) &&
             chunk[k] != ',') {
        ++k;
      }
      if (k > start) {
        if (pending.values.empty()) {
          pending.line = line;
        }
        pending.values.push_back(parse_number(chunk.substr(start, k - start), line));
      }
    }
    // A ';' or the end of the physical line terminates the row.
    if (!pending.values.empty()) {
      table.rows.push_back(std::move(pending));
      pending = Row{};
    }
    if (j >= body.size()) {
      break;
    }
    i = j + 1;
  }
}

RawTables read_tables(std::string_view text, std::vector<std::string>* warnings) {
  RawTables raw;
  auto warn = [&](std::string msg) {
    if (warnings != nullptr) {
      warnings->push_back(std::move(msg));
    }
  };

  std::vector<std::string_view> lines;
  {
    std::size_t pos = 0;
    while (pos <= text.size()) {
      auto nl = text.find('\n', pos);
      if (nl == std::string_view::npos) {
        lines.push_back(text.substr(pos));
        break;
      }
      lines.push_back(text.substr(pos, nl - pos));
      pos = nl + 1;
    }
  }

  Table* open = nullptr;  // matrix being read, nullptr when skipping one
  bool in_matrix = false;
  char closer = ']';
  int open_line = 0;
  Row pending;

  for (std::size_t n = 0; n < lines.size(); ++n) {
    const int line_no = static_cast<int>(n) + 1;
    std::string_view line = trim(strip_comment(lines[n]));
    if (!lines[n].empty() && lines[n].back() == '\r') {
      line = trim(strip_comment(lines[n].substr(0, lines[n].size() - 1)));
    }

    if (in_matrix) {
      auto end = line.find(closer);
      std::string_view body = end == std::string_view::npos ? line : line.substr(0, end);
      if (open != nullptr) {
        append_matrix_text(body, line_no, *open, pending);
      }
      if (end != std::string_view::npos) {
        in_matrix = false;
        open = nullptr;
        std::string_view rest = trim(line.substr(end + 1));
        if (!rest.empty() && rest != ";") {
          throw CaseError(fmt::format("unexpected text '{}' after matrix", rest), line_no);
        }
      }
      continue;
    }

    if (line.empty()) {
      continue;
    }
    if (line.starts_with("function")) {
      continue;
    }
    if (!line.starts_with("mpc.")) {
      warn(fmt::format("line {}: ignoring statement '{}'", line_no, line));
      continue;
    }
    auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw CaseError(fmt::format("expected assignment in '{}'", line), line_no);
    }
    std::string name(trim(line.substr(4, eq - 4)));
    std::string_view rhs = trim(line.substr(eq + 1));

    if (!rhs.empty() && (rhs.front() == '[' || rhs.front() == '{')) {
      closer = rhs.front() == '[' ? ']' : '}';
      Table* target = nullptr;
      if (rhs.front() == '[') {
        if (name == "bus") {
          target = &raw.bus;
        } else if (name == "gen") {
          target = &raw.gen;
        } else if (name == "branch") {
          target = &raw.branch;
        } else if (name == "gencost") {
          target = &raw.gencost;
        }
      }
      if (target == nullptr) {
        warn(fmt::format("line {}: ignoring field mpc.{}", line_no, name));
      } else {
        if (target->present) {
          throw CaseError(fmt::format("table mpc.{} defined twice", name), line_no);
        }
        target->present = true;
        target->line = line_no;
      }
      open = target;
      open_line = line_no;
      in_matrix = true;
      pending = Row{};
      std::string_view body = rhs.substr(1);
      auto end = body.find(closer);
      if (end != std::string_view::npos) {
        if (open != nullptr) {
          append_matrix_text(body.substr(0, end), line_no, *open, pending);
        }
        in_matrix = false;
        open = nullptr;
        std::string_view rest = trim(body.substr(end + 1));
        if (!rest.empty() && rest != ";") {
          throw CaseError(fmt::format("unexpected text '{}' after matrix", rest), line_no);
        }
      } else if (open != nullptr) {
        append_matrix_text(body, line_no, *open, pending);
      }
      continue;
    }

    if (name == "baseMVA") {
      std::string_view value = rhs;
      if (!value.empty() && value.back() == ';') {
        value.remove_suffix(1);
      }
      raw.base_mva = parse_number(trim(value), line_no);
      raw.has_base = true;
    } else if (name != "version") {
      warn(fmt::format("line {}: ignoring field mpc.{}", line_no, name));
    }
  }
  if (in_matrix) {
    throw CaseError("unterminated matrix", open_line);
  }
  return raw;
}

void require_columns(const Table& table, std::string_view name, std::size_t required,
                     std::size_t known, std::vector<std::string>* warnings) {
  bool warned = false;
  for (const auto& row : table.rows) {
    if (row.values.size() < required) {
      throw CaseError(fmt::format("{} row has {} columns, expected at least {}", name,
                                  row.values.size(), required),
                      row.line);
    }
    if (row.values.size() > known && !warned && warnings != nullptr) {
      warnings->push_back(fmt::format("{} table: ignoring {} trailing column(s)", name,
                                      row.values.size() - known));
      warned = true;
    }
  }
}

}  // namespace

NetworkCase parse_case(std::string_view text, std::vector<std::string>* warnings) {
  RawTables raw = read_tables(text, warnings);

  if (!raw.has_base) {
    throw CaseError("missing baseMVA declaration");
  }
  for (auto [table, name] : {std::pair{&raw.bus, "bus"}, std::pair{&raw.gen, "gen"},
                             std::pair{&raw.branch, "branch"},
                             std::pair{&raw.gencost, "gencost"}}) {
    if (!table->present) {
      throw CaseError(fmt::format("missing table mpc.{}", name));
    }
  }
  require_columns(raw.bus, "bus", 13, 13, warnings);
  require_columns(raw.gen, "gen", 10, 10, warnings);
  require_columns(raw.branch, "branch", 11, 13, warnings);

  NetworkCase grid;
  grid.base_power = raw.base_mva;

  std::set<int> ids;
  for (const auto& row : raw.bus.rows) {
    const auto& v = row.values;
    Bus bus;
    bus.id = static_cast<int>(v[0]);
    if (bus.id != v[0]) {
      throw CaseError(fmt::format("bus id {} is not an integer", v[0]), row.line);
    }
    if (!ids.insert(bus.id).second) {
      throw CaseError(fmt::format("duplicate bus id {}", bus.id), row.line);
    }
    bus.is_reference = static_cast<int>(v[1]) == 3;
    bus.p_load = v[2];
    bus.q_load = v[3];
    bus.shunt_g = v[4];
    bus.shunt_b = v[5];
    bus.v_max = v[11];
    bus.v_min = v[12];
    if (!(bus.v_min > 0.0) || bus.v_min > bus.v_max) {
      throw CaseError(fmt::format("bus {} has invalid voltage limits [{}, {}]", bus.id,
                                  bus.v_min, bus.v_max),
                      row.line);
    }
    grid.buses.push_back(bus);
  }
  const auto refs = std::count_if(grid.buses.begin(), grid.buses.end(),
                                  [](const Bus& b) { return b.is_reference; });
  if (refs != 1) {
    throw CaseError(fmt::format("case must have exactly one reference bus, found {}", refs),
                    raw.bus.line);
  }

  auto check_bus = [&](double id, const Row& row, std::string_view what) {
    if (!ids.contains(static_cast<int>(id))) {
      throw CaseError(fmt::format("{} references missing bus {}", what, id), row.line);
    }
  };

  std::vector<bool> gen_active;
  for (const auto& row : raw.gen.rows) {
    const auto& v = row.values;
    check_bus(v[0], row, "generator");
    gen_active.push_back(v[7] > 0.0);
    if (v[7] <= 0.0) {
      continue;
    }
    Generator g;
    g.bus = static_cast<int>(v[0]);
    g.p_init = v[1];
    g.q_init = v[2];
    g.q_max = v[3];
    g.q_min = v[4];
    g.p_max = v[8];
    g.p_min = v[9];
    if (g.p_min > g.p_max || g.q_min > g.q_max) {
      throw CaseError(fmt::format("generator at bus {} has inverted limits", g.bus), row.line);
    }
    grid.generators.push_back(g);
  }

  const std::size_t n_gen_rows = raw.gen.rows.size();
  if (raw.gencost.rows.size() != n_gen_rows && raw.gencost.rows.size() != 2 * n_gen_rows) {
    throw CaseError(fmt::format("gencost has {} rows for {} generators",
                                raw.gencost.rows.size(), n_gen_rows),
                    raw.gencost.line);
  }
  if (raw.gencost.rows.size() == 2 * n_gen_rows && n_gen_rows > 0 && warnings != nullptr) {
    warnings->push_back("gencost: ignoring reactive power cost rows");
  }
  for (std::size_t k = 0; k < n_gen_rows; ++k) {
    const Row& row = raw.gencost.rows[k];
    const auto& v = row.values;
    if (v.size() < 4) {
      throw CaseError("gencost row has fewer than 4 columns", row.line);
    }
    const int model = static_cast<int>(v[0]);
    if (model == 1) {
      throw CaseError("piecewise-linear cost model is not supported", row.line);
    }
    if (model != 2) {
      throw CaseError(fmt::format("unknown cost model type {}", v[0]), row.line);
    }
    const auto ncoef = static_cast<std::size_t>(v[3]);
    if (ncoef > 3) {
      throw CaseError(fmt::format("cost polynomial of degree {} exceeds 2", ncoef - 1),
                      row.line);
    }
    if (v.size() < 4 + ncoef) {
      throw CaseError("gencost row is shorter than its coefficient count", row.line);
    }
    if (v.size() > 4 + ncoef && warnings != nullptr) {
      warnings->push_back(fmt::format("line {}: gencost: ignoring trailing column(s)", row.line));
    }
    if (!gen_active[k]) {
      continue;
    }
    CostPolynomial c;
    double coef[3] = {0.0, 0.0, 0.0};  // a0, a1, a2
    for (std::size_t i = 0; i < ncoef; ++i) {
      coef[ncoef - 1 - i] = v[4 + i];
    }
    c.a0 = coef[0];
    c.a1 = coef[1];
    c.a2 = coef[2];
    if (c.a2 < 0.0) {
      throw CaseError("negative quadratic cost coefficient", row.line);
    }
    grid.costs.push_back(c);
  }

  for (const auto& row : raw.branch.rows) {
    const auto& v = row.values;
    check_bus(v[0], row, "branch");
    check_bus(v[1], row, "branch");
    if (v[10] <= 0.0) {
      continue;
    }
    Branch br;
    br.from_bus = static_cast<int>(v[0]);
    br.to_bus = static_cast<int>(v[1]);
    br.series_r = v[2];
    br.series_x = v[3];
    br.charging_b = v[4];
    br.s_max = v[5];
    br.tap_ratio = v[8] == 0.0 ? 1.0 : v[8];
    br.phase_shift = v[9];
    if (br.tap_ratio < 0.0) {
      throw CaseError("negative tap ratio", row.line);
    }
    grid.branches.push_back(br);
  }
  return grid;
}

NetworkCase load_case(const std::string& path, std::vector<std::string>* warnings) {
  std::ifstream in(path);
  if (!in) {
    throw CaseError(fmt::format("cannot open case file '{}'", path));
  }
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_case(buffer.str(), warnings);
}

NetworkCase normalize(const NetworkCase& raw) {
  if (!(raw.base_power > 0.0)) {
    throw CaseError(fmt::format("base power must be positive, got {}", raw.base_power));
  }
  NetworkCase out = raw;
  std::map<int, std::size_t> lookup;
  for (std::size_t i = 0; i < out.buses.size(); ++i) {
    lookup[out.buses[i].id] = i;
  }
  auto index = [&](int id) {
    auto it = lookup.find(id);
    if (it == lookup.end()) {
      throw CaseError(fmt::format("unknown bus id {}", id));
    }
    return it->second;
  };
  for (auto& br : out.branches) {
    br.from = index(br.from_bus);
    br.to = index(br.to_bus);
  }
  for (auto& g : out.generators) {
    g.bus_index = index(g.bus);
  }
  if (raw.per_unit) {
    return out;
  }

  const double base = raw.base_power;
  for (auto& b : out.buses) {
    b.p_load /= base;
    b.q_load /= base;
    b.shunt_g /= base;
    b.shunt_b /= base;
  }
  for (auto& br : out.branches) {
    br.s_max /= base;
    br.phase_shift *= std::numbers::pi / 180.0;
  }
  for (auto& g : out.generators) {
    g.p_min /= base;
    g.p_max /= base;
    g.q_min /= base;
    g.q_max /= base;
    g.p_init /= base;
    g.q_init /= base;
  }
  out.per_unit = true;
  return out;
}

AdmittanceMatrix build_admittance(const NetworkCase& grid) {
  if (!grid.per_unit) {
    throw std::invalid_argument("build_admittance requires a normalized case");
  }
  using Complex = std::complex<double>;
  const auto n = static_cast<Eigen::Index>(grid.buses.size());
  std::vector<Eigen::Triplet<double>> g_entries;
  std::vector<Eigen::Triplet<double>> b_entries;
  auto add = [&](std::size_t i, std::size_t k, Complex y) {
    g_entries.emplace_back(static_cast<int>(i), static_cast<int>(k), y.real());
    b_entries.emplace_back(static_cast<int>(i), static_cast<int>(k), y.imag());
  };
  for (std::size_t i = 0; i < grid.buses.size(); ++i) {
    add(i, i, Complex(grid.buses[i].shunt_g, grid.buses[i].shunt_b));
  }
  for (const auto& br : grid.branches) {
    const Complex z(br.series_r, br.series_x);
    if (std::norm(z) == 0.0) {
      throw CaseError(fmt::format("branch {}-{} has zero impedance", br.from_bus, br.to_bus));
    }
    const Complex ys = 1.0 / z;
    const Complex tap = std::polar(br.tap_ratio, br.phase_shift);
    const Complex ytt = ys + Complex(0.0, br.charging_b / 2.0);
    const Complex yff = ytt / std::norm(tap);
    add(br.from, br.from, yff);
    add(br.from, br.to, -ys / std::conj(tap));
    add(br.to, br.from, -ys / tap);
    add(br.to, br.to, ytt);
  }
  AdmittanceMatrix y;
  y.G.resize(n, n);
  y.B.resize(n, n);
  y.G.setFromTriplets(g_entries.begin(), g_entries.end());
  y.B.setFromTriplets(b_entries.begin(), b_entries.end());
  return y;
}

std::string serialize_case(const NetworkCase& grid) {
  const double base = grid.base_power;
  const double power = grid.per_unit ? base : 1.0;
  const double angle = grid.per_unit ? 180.0 / std::numbers::pi : 1.0;
  auto num = [](double v) { return fmt::format("{}", v); };

  std::string out;
  out += "function mpc = canonical_case\n";
  out += "%% dopf canonical case, format 1\n\n";
  out += "mpc.version = '2';\n";
  out += fmt::format("mpc.baseMVA = {};\n\n", num(base));

  out += "%% bus_i type Pd Qd Gs Bs area Vm Va baseKV zone Vmax Vmin\n";
  out += "mpc.bus = [\n";
  for (const auto& b : grid.buses) {
    out += fmt::format("\t{}\t{}\t{}\t{}\t{}\t{}\t1\t1\t0\t0\t1\t{}\t{};\n", b.id,
                       b.is_reference ? 3 : 1, num(b.p_load * power), num(b.q_load * power),
                       num(b.shunt_g * power), num(b.shunt_b * power), num(b.v_max),
                       num(b.v_min));
  }
  out += "];\n\n";

  out += "%% bus Pg Qg Qmax Qmin Vg mBase status Pmax Pmin\n";
  out += "mpc.gen = [\n";
  for (const auto& g : grid.generators) {
    out += fmt::format("\t{}\t{}\t{}\t{}\t{}\t1\t{}\t1\t{}\t{};\n", g.bus,
                       num(g.p_init * power), num(g.q_init * power), num(g.q_max * power),
                       num(g.q_min * power), num(base), num(g.p_max * power),
                       num(g.p_min * power));
  }
  out += "];\n\n";

  out += "%% fbus tbus r x b rateA rateB rateC ratio angle status angmin angmax\n";
  out += "mpc.branch = [\n";
  for (const auto& br : grid.branches) {
    const std::string rate = num(br.s_max * power);
    out += fmt::format("\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t1\t-360\t360;\n", br.from_bus,
                       br.to_bus, num(br.series_r), num(br.series_x), num(br.charging_b), rate,
                       rate, rate, num(br.tap_ratio), num(br.phase_shift * angle));
  }
  out += "];\n\n";

  out += "%% 2 startup shutdown n a2 a1 a0\n";
  out += "mpc.gencost = [\n";
  for (const auto& c : grid.costs) {
    out += fmt::format("\t2\t0\t0\t3\t{}\t{}\t{};\n", num(c.a2), num(c.a1), num(c.a0));
  }
  out += "];\n";
  return out;
}

}  // namespace dopf
