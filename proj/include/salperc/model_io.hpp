#pragma once

// Self-describing JSON form of a fitted perception model. Doubles are written
// with shortest round-trip formatting, so load(save(m)) reproduces m exactly.

#include <fstream>
#include <sstream>
#include <string>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "salperc/diagnostics.hpp"
#include "salperc/ordinal_gam.hpp"

namespace salperc {

inline constexpr const char* kModelFormat = "salperc-model";
inline constexpr int kModelFormatVersion = 1;

namespace io {

inline nlohmann::json matrix(const Eigen::MatrixXd& m) {
  std::vector<double> data(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) data[static_cast<std::size_t>(i * m.cols() + j)] = m(i, j);
  }
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
}

inline Eigen::MatrixXd matrix_from(const nlohmann::json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (static_cast<Eigen::Index>(data.size()) != rows * cols) {
    throw Error(ErrorCode::input, "matrix has " + std::to_string(data.size()) + " entries, expected " +
                                      std::to_string(rows * cols));
  }
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j2 = 0; j2 < cols; ++j2) m(i, j2) = data[static_cast<std::size_t>(i * cols + j2)];
  }
  return m;
}

inline nlohmann::json vector(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline Eigen::VectorXd vector_from(const nlohmann::json& j) {
  const auto data = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(data.data(), static_cast<Eigen::Index>(data.size()));
}

inline nlohmann::json basis(const BSplineBasis& b) {
  const BasisSpec& s = b.spec();
  return {{"covariate", s.covariate},
          {"degree", s.degree},
          {"num_basis", s.num_basis},
          {"placement", s.knots == KnotPlacement::quantile ? "quantile" : "uniform"},
          {"range", {s.range.lower, s.range.upper}},
          {"knots", b.knots()}};
}

inline BSplineBasis basis_from(const nlohmann::json& j) {
  BasisSpec s;
  s.covariate = j.at("covariate").get<std::string>();
  s.degree = j.at("degree").get<int>();
  s.num_basis = j.at("num_basis").get<int>();
  s.knots = j.at("placement").get<std::string>() == "quantile" ? KnotPlacement::quantile : KnotPlacement::uniform;
  s.range = {j.at("range")[0].get<double>(), j.at("range")[1].get<double>()};
  return BSplineBasis(s, j.at("knots").get<std::vector<double>>());
}

inline nlohmann::json block(const ModelBlock& b) {
  nlohmann::json j = {{"label", b.label}, {"term", b.term}, {"offset", b.offset}, {"size", b.size}};
  std::visit(
      [&](const auto& d) {
        using T = std::decay_t<decltype(d)>;
        if constexpr (std::is_same_v<T, SmoothBlock>) {
          j["kind"] = "smooth";
          j["covariate"] = to_string(d.covariate);
          j["by"] = d.by ? nlohmann::json(to_string(*d.by)) : nlohmann::json(nullptr);
          j["basis"] = basis(d.basis);
          j["constraint"] = matrix(d.constraint);
        } else if constexpr (std::is_same_v<T, FactorBlock>) {
          j["kind"] = "factor";
          j["covariate"] = to_string(d.covariate);
          j["reference"] = d.reference;
          j["levels"] = d.levels;
        } else if constexpr (std::is_same_v<T, TensorEvalBlock>) {
          j["kind"] = "tensor";
          j["a"] = to_string(d.a);
          j["b"] = to_string(d.b);
          j["basis_a"] = basis(d.basis_a);
          j["basis_b"] = basis(d.basis_b);
          j["main_effect_projection"] = matrix(d.main_effect_projection);
          j["reparameterization"] = matrix(d.reparameterization);
        } else {
          j["kind"] = "random";
          j["group"] = to_string(d.group);
          j["slope"] = d.slope ? nlohmann::json(to_string(*d.slope)) : nlohmann::json(nullptr);
          j["levels"] = d.levels;
        }
      },
      b.data);
  return j;
}

inline ModelBlock block_from(const nlohmann::json& j) {
  ModelBlock b;
  b.label = j.at("label").get<std::string>();
  b.term = j.at("term").get<std::size_t>();
  b.offset = j.at("offset").get<Eigen::Index>();
  b.size = j.at("size").get<Eigen::Index>();
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "smooth") {
    SmoothBlock d;
    d.covariate = covariate_from_string(j.at("covariate").get<std::string>());
    if (!j.at("by").is_null()) d.by = condition_from_string(j["by"].get<std::string>());
    d.basis = basis_from(j.at("basis"));
    d.constraint = matrix_from(j.at("constraint"));
    b.data = std::move(d);
  } else if (kind == "factor") {
    FactorBlock d;
    d.covariate = covariate_from_string(j.at("covariate").get<std::string>());
    d.reference = j.at("reference").get<std::string>();
    d.levels = j.at("levels").get<std::vector<std::string>>();
    b.data = std::move(d);
  } else if (kind == "tensor") {
    TensorEvalBlock d;
    d.a = covariate_from_string(j.at("a").get<std::string>());
    d.b = covariate_from_string(j.at("b").get<std::string>());
    d.basis_a = basis_from(j.at("basis_a"));
    d.basis_b = basis_from(j.at("basis_b"));
    d.main_effect_projection = matrix_from(j.at("main_effect_projection"));
    d.reparameterization = matrix_from(j.at("reparameterization"));
    b.data = std::move(d);
  } else if (kind == "random") {
    RandomBlock d;
    d.group = grouping_from_string(j.at("group").get<std::string>());
    if (!j.at("slope").is_null()) d.slope = covariate_from_string(j["slope"].get<std::string>());
    d.levels = j.at("levels").get<std::vector<std::string>>();
    b.data = std::move(d);
  } else {
    throw Error(ErrorCode::input, "unknown block kind '" + kind + "'");
  }
  return b;
}

}  // namespace io

inline nlohmann::json to_json(const FittedPerceptionModel& m) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : m.blocks) blocks.push_back(io::block(b));
  nlohmann::json penalties = nlohmann::json::array();
  for (const auto& p : m.penalties) {
    penalties.push_back({{"block", p.block}, {"name", p.name}, {"lambda", p.lambda}, {"matrix", io::matrix(p.matrix)}});
  }
  nlohmann::json ranges = nlohmann::json::object();
  for (const auto& [c, r] : m.training_ranges) ranges[std::string(to_string(c))] = {r.lower, r.upper};
  nlohmann::json levels = nlohmann::json::object();
  for (const auto& [c, l] : m.levels) levels[std::string(to_string(c))] = l;
  return {{"format", kModelFormat},
          {"version", kModelFormatVersion},
          {"spec", to_json(m.spec)},
          {"num_coefficients", m.num_coefficients},
          {"coefficients", io::vector(m.coefficients)},
          {"cut_points", m.cut_points},
          {"blocks", blocks},
          {"penalties", penalties},
          {"penalized_hessian", io::matrix(m.penalized_hessian)},
          {"training_ranges", ranges},
          {"levels", levels},
          {"workers", m.workers},
          {"sentences", m.sentences},
          {"report",
           {{"iterations", m.report.iterations},
            {"converged", m.report.converged},
            {"damped", m.report.damped},
            {"objective", m.report.objective},
            {"gradient_max", m.report.gradient_max},
            {"objective_trace", m.report.objective_trace},
            {"dropped", m.report.dropped},
            {"notes", m.report.notes}}}};
}

inline FittedPerceptionModel fitted_model_from_json(const nlohmann::json& j) {
  try {
    if (j.value("format", std::string()) != kModelFormat) {
      throw Error(ErrorCode::input, "not a model document (missing format tag)");
    }
    if (j.at("version").get<int>() != kModelFormatVersion) {
      throw Error(ErrorCode::input, "unsupported model format version " + j["version"].dump());
    }
    FittedPerceptionModel m;
    m.spec = model_spec_from_json(j.at("spec"));
    m.num_coefficients = j.at("num_coefficients").get<Eigen::Index>();
    m.coefficients = io::vector_from(j.at("coefficients"));
    m.cut_points = j.at("cut_points").get<std::vector<double>>();
    for (const auto& b : j.at("blocks")) m.blocks.push_back(io::block_from(b));
    for (const auto& p : j.at("penalties")) {
      m.penalties.push_back({p.at("block").get<std::size_t>(), p.at("name").get<std::string>(),
                             io::matrix_from(p.at("matrix")), p.at("lambda").get<double>()});
    }
    m.penalized_hessian = io::matrix_from(j.at("penalized_hessian"));
    for (const auto& [name, r] : j.at("training_ranges").items()) {
      m.training_ranges[covariate_from_string(name)] = {r[0].get<double>(), r[1].get<double>()};
    }
    for (const auto& [name, l] : j.at("levels").items()) {
      m.levels[covariate_from_string(name)] = l.get<std::vector<std::string>>();
    }
    m.workers = j.at("workers").get<std::vector<std::string>>();
    m.sentences = j.at("sentences").get<std::vector<std::string>>();
    const auto& r = j.at("report");
    m.report.iterations = r.at("iterations").get<int>();
    m.report.converged = r.at("converged").get<bool>();
    m.report.damped = r.at("damped").get<bool>();
    m.report.objective = r.at("objective").get<double>();
    m.report.gradient_max = r.at("gradient_max").get<double>();
    m.report.objective_trace = r.at("objective_trace").get<std::vector<double>>();
    m.report.dropped = r.at("dropped").get<std::vector<std::string>>();
    m.report.notes = r.at("notes").get<std::vector<std::string>>();

    if (m.coefficients.size() != m.num_coefficients) {
      throw Error(ErrorCode::input, "coefficient vector length does not match num_coefficients");
    }
    if (m.cut_points.size() + 1 != static_cast<std::size_t>(m.spec.categories) || m.cut_points.empty() ||
        m.cut_points[0] != ordinal::kFirstCut) {
      throw Error(ErrorCode::input, "cut points do not match the model's category count");
    }
    for (const auto& b : m.blocks) {
      if (b.offset < 0 || b.offset + b.size > m.num_coefficients) {
        throw Error(ErrorCode::input, "block '" + b.label + "' lies outside the coefficient vector");
      }
    }
    for (const auto& p : m.penalties) {
      if (p.block >= m.blocks.size()) throw Error(ErrorCode::input, "penalty refers to an unknown block");
    }
    return m;
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw Error(ErrorCode::input, std::string("malformed model document: ") + e.what());
  }
}

inline void save_model(const FittedPerceptionModel& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::io, "cannot write model file '" + path + "'");
  out << to_json(m).dump(1) << '\n';
  if (!out) throw Error(ErrorCode::io, "failed writing model file '" + path + "'");
}

inline FittedPerceptionModel load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot read model file '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw Error(ErrorCode::input, "model file '" + path + "' is not valid JSON: " + e.what());
  }
  return fitted_model_from_json(j);
}

}  // namespace salperc
