#include "bse/io.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "bse/error.hpp"

namespace bse {

using nlohmann::json;

void to_json(json& j, const GaussianMixture& g) {
  j = json{{"weights", g.weights}, {"means", g.means}, {"variances", g.variances}};
}

void from_json(const json& j, GaussianMixture& g) {
  j.at("weights").get_to(g.weights);
  j.at("means").get_to(g.means);
  j.at("variances").get_to(g.variances);
  g.validate();
}

void to_json(json& j, const Channel& c) {
  j = json{{"kind", to_string(c.kind)}, {"element", c.element}, {"phase", c.phase}};
}

void from_json(const json& j, Channel& c) {
  c.kind = channel_kind_from_string(j.at("kind").get<std::string>());
  c.element = j.at("element").get<int>();
  c.phase = j.value("phase", 1);
}

void to_json(json& j, const MeasurementSpec& s) { j = s.channels; }
void from_json(const json& j, MeasurementSpec& s) { j.get_to(s.channels); }

void to_json(json& j, const ARModel& ar) {
  j = json{{"coefficients", ar.coefficients},
           {"innovation_variance", ar.innovation_variance},
           {"innovation_mean", ar.innovation_mean}};
}

void from_json(const json& j, ARModel& ar) {
  j.at("coefficients").get_to(ar.coefficients);
  ar.innovation_variance = j.value("innovation_variance", 1.0);
  ar.innovation_mean = j.value("innovation_mean", 0.0);
}

json distributions_to_json(const ScenarioDistributions& d, const Network& network) {
  json out = json::array();
  const auto& free = network.free_nodes();
  for (std::size_t k = 0; k < d.nodes.size(); ++k) {
    const Node& node = network.nodes()[free[k]];
    json e{{"bus", network.buses()[node.bus].id},
           {"phase", node.phase},
           {"load", d.nodes[k].load},
           {"power_factor", d.nodes[k].power_factor}};
    if (d.nodes[k].generation) e["generation"] = *d.nodes[k].generation;
    out.push_back(std::move(e));
  }
  return out;
}

ScenarioDistributions distributions_from_json(const json& j, const Network& network) {
  const auto& free = network.free_nodes();
  std::vector<std::optional<NodeDistribution>> slots(free.size());
  for (const auto& e : j) {
    const std::size_t node = network.node_index(e.at("bus").get<int>(), e.value("phase", 1));
    const auto it = std::find(free.begin(), free.end(), node);
    if (it == free.end()) throw InvalidArgument("distribution given for the slack bus");
    NodeDistribution nd;
    nd.load = e.at("load").get<GaussianMixture>();
    if (e.contains("generation") && !e.at("generation").is_null())
      nd.generation = e.at("generation").get<GaussianMixture>();
    nd.power_factor = e.value("power_factor", 0.95);
    slots[static_cast<std::size_t>(it - free.begin())] = std::move(nd);
  }
  ScenarioDistributions d;
  for (std::size_t k = 0; k < slots.size(); ++k) {
    if (!slots[k]) {
      const Node& node = network.nodes()[free[k]];
      throw InvalidArgument("no injection distribution for bus " +
                            std::to_string(network.buses()[node.bus].id) + " phase " +
                            std::to_string(node.phase));
    }
    d.nodes.push_back(std::move(*slots[k]));
  }
  return d;
}

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& path, std::string_view text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

namespace {

std::vector<std::string> split(const std::string& line, char sep = ',') {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, sep)) {
    if (!cell.empty() && cell.back() == '\r') cell.pop_back();
    out.push_back(cell);
  }
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

double parse_double(const std::string& s) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw Error("malformed number '" + s + "' in CSV");
  return v;
}

}  // namespace

std::map<std::string, std::vector<double>> read_meter_csv(const std::filesystem::path& path) {
  std::istringstream in(read_text(path));
  std::string line;
  if (!std::getline(in, line) || split(line) != std::vector<std::string>{"meter_id", "interval_index", "energy"})
    throw Error("meter CSV must start with header meter_id,interval_index,energy");
  std::map<std::string, std::map<long long, double>> rows;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    const auto cells = split(line);
    if (cells.size() != 3) throw Error("meter CSV row must have three fields: " + line);
    rows[cells[0]][std::stoll(cells[1])] = parse_double(cells[2]);
  }
  std::map<std::string, std::vector<double>> out;
  for (auto& [id, series] : rows)
    for (auto& [idx, v] : series) out[id].push_back(v);
  return out;
}

void write_meter_csv(const std::filesystem::path& path,
                     const std::map<std::string, std::vector<double>>& series) {
  std::string text = "meter_id,interval_index,energy\n";
  for (const auto& [id, values] : series)
    for (std::size_t t = 0; t < values.size(); ++t)
      text += id + "," + std::to_string(t) + "," + format_double(values[t]) + "\n";
  write_text(path, text);
}

void write_matrix_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
                      const std::vector<Eigen::VectorXd>& rows) {
  std::string text;
  for (std::size_t c = 0; c < header.size(); ++c) text += (c ? "," : "") + header[c];
  text += "\n";
  for (const auto& row : rows) {
    for (Eigen::Index c = 0; c < row.size(); ++c) text += (c ? "," : "") + format_double(row[c]);
    text += "\n";
  }
  write_text(path, text);
}

std::vector<Eigen::VectorXd> read_matrix_csv(const std::filesystem::path& path,
                                             std::vector<std::string>* header) {
  std::istringstream in(read_text(path));
  std::string line;
  if (!std::getline(in, line)) throw Error("empty CSV " + path.string());
  const auto head = split(line);
  if (header) *header = head;
  std::vector<Eigen::VectorXd> rows;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    const auto cells = split(line);
    if (cells.size() != head.size()) throw Error("ragged CSV row in " + path.string());
    Eigen::VectorXd row(static_cast<Eigen::Index>(cells.size()));
    for (std::size_t c = 0; c < cells.size(); ++c) row[static_cast<Eigen::Index>(c)] = parse_double(cells[c]);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace bse
