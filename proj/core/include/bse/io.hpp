#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "bse/grid.hpp"
#include "bse/injection.hpp"
#include "bse/powerflow.hpp"
#include "bse/sampling.hpp"

namespace bse {

void to_json(nlohmann::json& j, const GaussianMixture& g);
void from_json(const nlohmann::json& j, GaussianMixture& g);
void to_json(nlohmann::json& j, const Channel& c);
void from_json(const nlohmann::json& j, Channel& c);
void to_json(nlohmann::json& j, const MeasurementSpec& s);
void from_json(const nlohmann::json& j, MeasurementSpec& s);
void to_json(nlohmann::json& j, const ARModel& ar);
void from_json(const nlohmann::json& j, ARModel& ar);

/// Array of {bus, phase, load, generation?, power_factor}; must cover every non-slack node.
nlohmann::json distributions_to_json(const ScenarioDistributions& d, const Network& network);
ScenarioDistributions distributions_from_json(const nlohmann::json& j, const Network& network);

/// 64-bit FNV-1a, lower-case hex.
std::string fnv1a_hex(std::string_view bytes);

/// Shortest text that parses back to the same double.
std::string format_double(double v);

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, std::string_view text);

/// Parses `meter_id,interval_index,energy`; readings are ordered by interval_index per meter.
std::map<std::string, std::vector<double>> read_meter_csv(const std::filesystem::path& path);
void write_meter_csv(const std::filesystem::path& path,
                     const std::map<std::string, std::vector<double>>& series);

/// Plain numeric CSV with a header row; rows are samples.
void write_matrix_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
                      const std::vector<Eigen::VectorXd>& rows);
std::vector<Eigen::VectorXd> read_matrix_csv(const std::filesystem::path& path,
                                             std::vector<std::string>* header = nullptr);

}  // namespace bse
