#include "bse/grid.hpp"

#include <algorithm>
#include <fstream>
#include <numbers>
#include <queue>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "bse/error.hpp"

namespace bse {
namespace {

bool same_block(const ComplexBlock& a, const ComplexBlock& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && (a.array() == b.array()).all();
}

bool same_optional(const std::optional<ComplexBlock>& a, const std::optional<ComplexBlock>& b) {
  if (a.has_value() != b.has_value()) return false;
  return !a || same_block(*a, *b);
}

}  // namespace

bool Branch::operator==(const Branch& other) const {
  return from == other.from && to == other.to && same_block(series, other.series) &&
         same_optional(shunt_from, other.shunt_from) && same_optional(shunt_to, other.shunt_to);
}

Network::Network(std::vector<Bus> buses, std::vector<Branch> branches, double base_power_mva,
                 int phase_count)
    : buses_(std::move(buses)),
      branches_(std::move(branches)),
      base_power_mva_(base_power_mva),
      phase_count_(phase_count) {
  using Code = GridError::Code;
  if (phase_count_ != 1 && phase_count_ != 3)
    throw GridError(Code::Schema, "phase_count must be 1 or 3");
  if (buses_.empty()) throw GridError(Code::Schema, "network has no buses");

  std::set<int> ids;
  std::size_t slack_count = 0;
  for (std::size_t b = 0; b < buses_.size(); ++b) {
    const Bus& bus = buses_[b];
    if (!ids.insert(bus.id).second)
      throw GridError(Code::DuplicateBus, "duplicate bus id " + std::to_string(bus.id));
    if (bus.phases.empty())
      throw GridError(Code::Schema, "bus " + std::to_string(bus.id) + " has no phases");
    for (std::size_t k = 0; k < bus.phases.size(); ++k) {
      const int ph = bus.phases[k];
      if (ph < 1 || ph > phase_count_ || (k > 0 && ph <= bus.phases[k - 1]))
        throw GridError(Code::Schema, "bus " + std::to_string(bus.id) +
                                          ": phases must be ascending within 1..phase_count");
    }
    if (bus.kind == BusKind::Slack) {
      ++slack_count;
      slack_ = b;
      if (!(bus.voltage_set > 0.0))
        throw GridError(Code::Schema, "slack voltage set point must be positive");
    }
  }
  if (slack_count == 0) throw GridError(Code::MissingSlack, "network has no slack bus");
  if (slack_count > 1) throw GridError(Code::MultipleSlack, "multiple slack buses");

  for (std::size_t b = 0; b < buses_.size(); ++b) {
    first_node_.push_back(nodes_.size());
    for (int ph : buses_[b].phases) {
      if (b != slack_) free_nodes_.push_back(nodes_.size());
      nodes_.push_back(Node{b, ph});
    }
  }

  std::vector<std::vector<std::size_t>> adjacency(buses_.size());
  for (const Branch& br : branches_) {
    const auto from = bus_position(br.from);
    const auto to = bus_position(br.to);
    if (!from || !to)
      throw GridError(Code::UnknownBus, "branch " + std::to_string(br.from) + "-" +
                                            std::to_string(br.to) + " references an unknown bus");
    if (*from == *to)
      throw GridError(Code::SelfLoop, "branch connects bus " + std::to_string(br.from) +
                                          " to itself");
    const auto& pf = buses_[*from].phases;
    const auto& pt = buses_[*to].phases;
    const auto p = static_cast<Eigen::Index>(pf.size());
    auto square = [p](const ComplexBlock& m) { return m.rows() == p && m.cols() == p; };
    if (pf != pt || !square(br.series) || (br.shunt_from && !square(*br.shunt_from)) ||
        (br.shunt_to && !square(*br.shunt_to)))
      throw GridError(Code::PhaseMismatch, "branch " + std::to_string(br.from) + "-" +
                                               std::to_string(br.to) +
                                               ": block size does not match endpoint phases");
    adjacency[*from].push_back(*to);
    adjacency[*to].push_back(*from);
  }

  std::vector<bool> seen(buses_.size(), false);
  std::queue<std::size_t> frontier;
  frontier.push(slack_);
  seen[slack_] = true;
  std::size_t reached = 1;
  while (!frontier.empty()) {
    const std::size_t b = frontier.front();
    frontier.pop();
    for (std::size_t n : adjacency[b]) {
      if (!seen[n]) {
        seen[n] = true;
        ++reached;
        frontier.push(n);
      }
    }
  }
  if (reached != buses_.size())
    throw GridError(Code::Disconnected, "network is not connected to the slack bus");
}

std::optional<std::size_t> Network::bus_position(int id) const {
  for (std::size_t b = 0; b < buses_.size(); ++b)
    if (buses_[b].id == id) return b;
  return std::nullopt;
}

std::size_t Network::node_index(int bus_id, int phase) const {
  const auto b = bus_position(bus_id);
  if (!b) throw GridError(GridError::Code::UnknownBus, "unknown bus " + std::to_string(bus_id));
  const auto& phases = buses_[*b].phases;
  const auto it = std::find(phases.begin(), phases.end(), phase);
  if (it == phases.end())
    throw GridError(GridError::Code::PhaseMismatch,
                    "bus " + std::to_string(bus_id) + " has no phase " + std::to_string(phase));
  return first_node_[*b] + static_cast<std::size_t>(it - phases.begin());
}

std::vector<std::size_t> Network::bus_nodes(std::size_t bus_pos) const {
  std::vector<std::size_t> out(buses_[bus_pos].phases.size());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = first_node_[bus_pos] + k;
  return out;
}

double reference_angle(int phase) {
  switch (phase) {
    case 2: return -2.0 * std::numbers::pi / 3.0;
    case 3: return 2.0 * std::numbers::pi / 3.0;
    default: return 0.0;
  }
}

AdmittanceMatrix build_ybus(const Network& network) {
  const auto n = static_cast<Eigen::Index>(network.node_count());
  AdmittanceMatrix y = AdmittanceMatrix::Zero(n, n);
  for (const Branch& br : network.branches()) {
    const auto f = network.bus_nodes(*network.bus_position(br.from));
    const auto t = network.bus_nodes(*network.bus_position(br.to));
    for (std::size_t k = 0; k < f.size(); ++k) {
      for (std::size_t l = 0; l < f.size(); ++l) {
        const Complex ys = br.series(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(l));
        const auto fk = static_cast<Eigen::Index>(f[k]), fl = static_cast<Eigen::Index>(f[l]);
        const auto tk = static_cast<Eigen::Index>(t[k]), tl = static_cast<Eigen::Index>(t[l]);
        y(fk, fl) += ys;
        y(tk, tl) += ys;
        y(fk, tl) -= ys;
        y(tk, fl) -= ys;
        if (br.shunt_from)
          y(fk, fl) += (*br.shunt_from)(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(l));
        if (br.shunt_to)
          y(tk, tl) += (*br.shunt_to)(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(l));
      }
    }
  }
  return y;
}

// ---------------------------------------------------------------------------
// JSON grid files

namespace {

using nlohmann::ordered_json;
using Code = GridError::Code;

ordered_json complex_to_json(Complex c) { return ordered_json{{"re", c.real()}, {"im", c.imag()}}; }

ordered_json block_to_json(const ComplexBlock& m) {
  ordered_json rows = ordered_json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    ordered_json row = ordered_json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(complex_to_json(m(r, c)));
    rows.push_back(std::move(row));
  }
  return rows;
}

const ordered_json& require(const ordered_json& obj, const char* key) {
  if (!obj.is_object() || !obj.contains(key))
    throw GridError(Code::Schema, std::string("missing key '") + key + "'");
  return obj.at(key);
}

double number(const ordered_json& v, const char* what) {
  if (!v.is_number()) throw GridError(Code::Schema, std::string(what) + " must be a number");
  return v.get<double>();
}

int integer(const ordered_json& v, const char* what) {
  if (!v.is_number_integer()) throw GridError(Code::Schema, std::string(what) + " must be an integer");
  return v.get<int>();
}

ComplexBlock block_from_json(const ordered_json& v) {
  if (!v.is_array() || v.empty()) throw GridError(Code::Schema, "admittance block must be a non-empty array");
  const auto n = static_cast<Eigen::Index>(v.size());
  ComplexBlock m(n, n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto& row = v[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != n)
      throw GridError(Code::Schema, "admittance block must be square");
    for (Eigen::Index c = 0; c < n; ++c) {
      const auto& e = row[static_cast<std::size_t>(c)];
      m(r, c) = Complex(number(require(e, "re"), "re"), number(require(e, "im"), "im"));
    }
  }
  return m;
}

}  // namespace

Network load_network(std::string_view text) {
  ordered_json doc;
  try {
    doc = ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw GridError(Code::Schema, std::string("grid file is not valid JSON: ") + e.what());
  }
  const int phase_count = integer(require(doc, "phase_count"), "phase_count");
  const double base = number(require(doc, "base_power_mva"), "base_power_mva");

  const auto& jbuses = require(doc, "buses");
  if (!jbuses.is_array()) throw GridError(Code::Schema, "'buses' must be an array");
  std::vector<Bus> buses;
  for (const auto& jb : jbuses) {
    Bus bus;
    bus.id = integer(require(jb, "id"), "bus id");
    const auto& kind = require(jb, "kind");
    if (kind == "Slack")
      bus.kind = BusKind::Slack;
    else if (kind == "PQ")
      bus.kind = BusKind::PQ;
    else
      throw GridError(Code::Schema, "bus kind must be \"Slack\" or \"PQ\"");
    const auto& phases = require(jb, "phases");
    if (!phases.is_array()) throw GridError(Code::Schema, "'phases' must be an array");
    for (const auto& p : phases) bus.phases.push_back(integer(p, "phase"));
    if (jb.contains("voltage_set")) bus.voltage_set = number(jb.at("voltage_set"), "voltage_set");
    buses.push_back(std::move(bus));
  }

  const auto& jbranches = require(doc, "branches");
  if (!jbranches.is_array()) throw GridError(Code::Schema, "'branches' must be an array");
  std::vector<Branch> branches;
  for (const auto& jr : jbranches) {
    Branch br;
    br.from = integer(require(jr, "from"), "from");
    br.to = integer(require(jr, "to"), "to");
    br.series = block_from_json(require(jr, "series"));
    if (jr.contains("shunt_from")) br.shunt_from = block_from_json(jr.at("shunt_from"));
    if (jr.contains("shunt_to")) br.shunt_to = block_from_json(jr.at("shunt_to"));
    branches.push_back(std::move(br));
  }
  return Network(std::move(buses), std::move(branches), base, phase_count);
}

Network load_network_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw GridError(Code::Schema, "cannot open grid file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return load_network(buf.str());
}

std::string serialize_network(const Network& network) {
  ordered_json doc;
  doc["phase_count"] = network.phase_count();
  doc["base_power_mva"] = network.base_power_mva();
  ordered_json buses = ordered_json::array();
  for (const Bus& bus : network.buses()) {
    ordered_json jb{{"id", bus.id},
                    {"kind", bus.kind == BusKind::Slack ? "Slack" : "PQ"},
                    {"phases", bus.phases}};
    if (bus.voltage_set != 1.0) jb["voltage_set"] = bus.voltage_set;
    buses.push_back(std::move(jb));
  }
  doc["buses"] = std::move(buses);
  ordered_json branches = ordered_json::array();
  for (const Branch& br : network.branches()) {
    ordered_json jr{{"from", br.from}, {"to", br.to}, {"series", block_to_json(br.series)}};
    if (br.shunt_from) jr["shunt_from"] = block_to_json(*br.shunt_from);
    if (br.shunt_to) jr["shunt_to"] = block_to_json(*br.shunt_to);
    branches.push_back(std::move(jr));
  }
  doc["branches"] = std::move(branches);
  return doc.dump(2);
}

}  // namespace bse
