#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "fbsde/errors.hpp"
#include "fbsde/model.hpp"

namespace fbsde {

// ---------------------------------------------------------------------------
// INI-style document
// ---------------------------------------------------------------------------

struct ConfigEntry {
  std::string value;
  std::size_t line = 0;
};

class ConfigDocument {
 public:
  using Section = std::map<std::string, ConfigEntry>;

  static ConfigDocument parse(std::string_view text, std::string_view origin = "config") {
    ConfigDocument doc;
    std::string current;
    std::size_t line_no = 0;
    std::istringstream in{std::string(text)};
    std::string raw;
    while (std::getline(in, raw)) {
      ++line_no;
      if (const auto hash = raw.find('#'); hash != std::string::npos) raw.erase(hash);
      const std::string line = trim(raw);
      if (line.empty() || line.front() == ';') continue;
      auto where = [&] { return std::string(origin) + ":" + std::to_string(line_no) + ": "; };
      if (line.front() == '[') {
        require(line.back() == ']' && line.size() > 2, ErrorCode::ConfigParse, where() + "malformed section header");
        current = trim(line.substr(1, line.size() - 2));
        require(is_known_section(current), ErrorCode::ConfigParse, where() + "unknown section [" + current + "]");
        require(!doc.sections_.contains(current), ErrorCode::ConfigParse, where() + "duplicate section [" + current + "]");
        doc.sections_[current];
        continue;
      }
      const auto eq = line.find('=');
      require(eq != std::string::npos, ErrorCode::ConfigParse, where() + "expected 'key = value'");
      require(!current.empty(), ErrorCode::ConfigParse, where() + "key outside of any section");
      const std::string key = trim(line.substr(0, eq));
      const std::string value = trim(line.substr(eq + 1));
      require(!key.empty(), ErrorCode::ConfigParse, where() + "empty key");
      require(is_known_key(current, key), ErrorCode::ConfigParse,
              where() + "unknown key '" + key + "' in [" + current + "]");
      auto& section = doc.sections_[current];
      require(!section.contains(key), ErrorCode::ConfigParse, where() + "duplicate key '" + key + "'");
      section[key] = ConfigEntry{value, line_no};
    }
    return doc;
  }

  static ConfigDocument load(const std::string& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorCode::Io, "cannot open config '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return parse(buf.str(), path);
  }

  [[nodiscard]] bool has_section(const std::string& s) const { return sections_.contains(s); }
  [[nodiscard]] bool has(const std::string& s, const std::string& key) const {
    auto it = sections_.find(s);
    return it != sections_.end() && it->second.contains(key);
  }
  [[nodiscard]] const Section& section(const std::string& s) const {
    auto it = sections_.find(s);
    require(it != sections_.end(), ErrorCode::ConfigParse, "missing [" + s + "] section");
    return it->second;
  }
  [[nodiscard]] const ConfigEntry& entry(const std::string& s, const std::string& key) const {
    const Section& sec = section(s);
    auto it = sec.find(key);
    require(it != sec.end(), ErrorCode::ConfigParse, "missing key '" + key + "' in [" + s + "]");
    return it->second;
  }
  [[nodiscard]] std::optional<std::string> get(const std::string& s, const std::string& key) const {
    if (!has(s, key)) return std::nullopt;
    return sections_.at(s).at(key).value;
  }

  void set(const std::string& s, const std::string& key, const std::string& value) {
    sections_[s][key] = ConfigEntry{value, 0};
  }

  // Canonical text: sections and keys sorted, so it is independent of the original ordering.
  [[nodiscard]] std::string canonical() const {
    std::string out;
    for (const auto& [name, sec] : sections_) {
      out += "[" + name + "]\n";
      for (const auto& [key, e] : sec) out += key + "=" + e.value + "\n";
    }
    return out;
  }

  [[nodiscard]] const std::map<std::string, Section>& sections() const noexcept { return sections_; }

  static std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
  }

 private:
  static bool is_known_section(const std::string& s) {
    return s == "model" || s == "grid" || s == "estimator" || s == "control" || s == "output";
  }

  static bool is_known_key(const std::string& section, const std::string& key) {
    static const std::map<std::string, std::set<std::string>> keys = {
        {"model",
         {"kind", "drift", "sigma", "h", "f", "prior_mean", "prior_var", "prior_mixture", "A", "H", "G", "f_bar"}},
        {"grid", {"t_end", "n_steps", "x_min", "x_max", "n_points"}},
        {"estimator", {"id", "particles", "pi_h_source", "obs_file", "obs_error", "sweep_particles", "ess_floor"}},
        {"control", {"mode", "cost", "terminal_hessian", "terminal_center", "runs"}},
        {"output", {"dir", "dump_ensembles"}},
    };
    const auto& allowed = keys.at(section);
    if (allowed.contains(key)) return true;
    // Dotted function parameters, e.g. drift.a = -1.
    if (section == "model") {
      const auto dot = key.find('.');
      if (dot != std::string::npos) {
        const std::string base = key.substr(0, dot);
        return base == "drift" || base == "h" || base == "f";
      }
    }
    return false;
  }

  std::map<std::string, Section> sections_;
};

// 64-bit FNV-1a over the canonical form.
inline std::uint64_t config_hash(const ConfigDocument& doc) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : doc.canonical()) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Value parsing
// ---------------------------------------------------------------------------

namespace detail {

inline std::string context(const std::string& section, const std::string& key, const ConfigEntry& e) {
  return "[" + section + "] " + key + (e.line ? " (line " + std::to_string(e.line) + ")" : "") + ": ";
}

inline double parse_number(std::string_view text, const std::string& ctx) {
  const std::string s = ConfigDocument::trim(text);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  require(ec == std::errc() && ptr == s.data() + s.size() && !s.empty(), ErrorCode::ConfigParse,
          ctx + "expected a number, got '" + s + "'");
  return v;
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= s.size(); ++i) {
    if (i == s.size() || s[i] == sep) {
      out.push_back(ConfigDocument::trim(s.substr(start, i - start)));
      start = i + 1;
    }
  }
  return out;
}

// Rows split by ';', entries by ',' or whitespace.
inline Matrix parse_matrix(std::string_view text, const std::string& ctx) {
  std::vector<std::vector<double>> rows;
  for (const std::string& row : split(text, ';')) {
    if (row.empty()) continue;
    std::string normalized = row;
    std::replace(normalized.begin(), normalized.end(), ',', ' ');
    std::istringstream in(normalized);
    std::vector<double> values;
    std::string tok;
    while (in >> tok) values.push_back(parse_number(tok, ctx));
    rows.push_back(std::move(values));
  }
  require(!rows.empty(), ErrorCode::ConfigParse, ctx + "empty matrix");
  const std::size_t cols = rows.front().size();
  for (const auto& r : rows)
    require(r.size() == cols && cols > 0, ErrorCode::DimensionMismatch, ctx + "ragged matrix rows");
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < cols; ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return m;
}

// A matrix given as one row or one column becomes a vector.
inline Vector parse_vector(std::string_view text, const std::string& ctx) {
  const Matrix m = parse_matrix(text, ctx);
  require(m.rows() == 1 || m.cols() == 1, ErrorCode::DimensionMismatch, ctx + "expected a vector");
  return Eigen::Map<const Vector>(m.data(), m.size());
}

// "name" or "name(p=1, q=2)", merged with dotted keys such as drift.p.
inline NamedFunction parse_function(const ConfigDocument& doc, const std::string& key) {
  const ConfigEntry& e = doc.entry("model", key);
  const std::string ctx = context("model", key, e);
  std::string name = e.value;
  std::map<std::string, double> params;
  if (const auto open = name.find('('); open != std::string::npos) {
    require(name.back() == ')', ErrorCode::ConfigParse, ctx + "unbalanced parentheses");
    const std::string inner = name.substr(open + 1, name.size() - open - 2);
    name = ConfigDocument::trim(name.substr(0, open));
    for (const std::string& item : split(inner, ',')) {
      if (item.empty()) continue;
      const auto eq = item.find('=');
      require(eq != std::string::npos, ErrorCode::ConfigParse, ctx + "parameter '" + item + "' needs name=value");
      params[ConfigDocument::trim(item.substr(0, eq))] = parse_number(item.substr(eq + 1), ctx);
    }
  }
  for (const auto& [k, entry] : doc.section("model")) {
    if (k.rfind(key + ".", 0) == 0) {
      const std::string p = k.substr(key.size() + 1);
      require(!params.contains(p), ErrorCode::ConfigParse, ctx + "parameter '" + p + "' given twice");
      params[p] = parse_number(entry.value, context("model", k, entry));
    }
  }
  return NamedFunction(name, params);
}

inline std::string format_number(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline std::string format_matrix(const Matrix& m) {
  std::string out;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    if (i) out += "; ";
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      if (j) out += ", ";
      out += format_number(m(i, j));
    }
  }
  return out;
}

inline std::string format_function(const NamedFunction& f) {
  std::string out = f.name();
  if (f.params().empty()) return out;
  out += "(";
  bool first = true;
  for (const auto& [k, v] : f.params()) {
    if (!first) out += ", ";
    first = false;
    out += k + "=" + format_number(v);
  }
  return out + ")";
}

}  // namespace detail

inline double get_number(const ConfigDocument& doc, const std::string& section, const std::string& key) {
  const ConfigEntry& e = doc.entry(section, key);
  return detail::parse_number(e.value, detail::context(section, key, e));
}

inline std::size_t get_count(const ConfigDocument& doc, const std::string& section, const std::string& key) {
  const double v = get_number(doc, section, key);
  require(v >= 0 && v == std::floor(v) && v < 1e15, ErrorCode::ConfigParse,
          detail::context(section, key, doc.entry(section, key)) + "expected a non-negative integer");
  return static_cast<std::size_t>(v);
}

inline Matrix get_matrix(const ConfigDocument& doc, const std::string& section, const std::string& key) {
  const ConfigEntry& e = doc.entry(section, key);
  return detail::parse_matrix(e.value, detail::context(section, key, e));
}

inline Vector get_vector(const ConfigDocument& doc, const std::string& section, const std::string& key) {
  const ConfigEntry& e = doc.entry(section, key);
  return detail::parse_vector(e.value, detail::context(section, key, e));
}

// ---------------------------------------------------------------------------
// Model construction
// ---------------------------------------------------------------------------

namespace detail {

inline GaussianMixture parse_prior(const ConfigDocument& doc) {
  if (doc.has("model", "prior_mixture")) {
    const Matrix rows = get_matrix(doc, "model", "prior_mixture");
    require(rows.cols() == 3, ErrorCode::DimensionMismatch, "prior_mixture rows are 'weight, mean, variance'");
    std::vector<GaussianComponent> comps;
    for (Eigen::Index i = 0; i < rows.rows(); ++i) comps.push_back({rows(i, 0), rows(i, 1), rows(i, 2)});
    return GaussianMixture(std::move(comps));
  }
  const double mean = doc.has("model", "prior_mean") ? get_number(doc, "model", "prior_mean") : 0.0;
  const double var = doc.has("model", "prior_var") ? get_number(doc, "model", "prior_var") : 1.0;
  return GaussianMixture(mean, var);
}

inline LinearGaussianModelSpec build_lg(const ConfigDocument& doc) {
  LinearGaussianModelSpec lg;
  lg.sigma = get_number(doc, "model", "sigma");
  lg.A = get_matrix(doc, "model", "A");
  const Eigen::Index n = lg.A.rows();
  lg.H = doc.has("model", "H") ? get_matrix(doc, "model", "H") : Matrix::Identity(n, 1);
  lg.G = doc.has("model", "G") ? get_matrix(doc, "model", "G") : Matrix(n, 0);
  lg.m0 = doc.has("model", "prior_mean") ? get_vector(doc, "model", "prior_mean") : Vector::Zero(n);
  lg.Sigma0 = doc.has("model", "prior_var") ? get_matrix(doc, "model", "prior_var") : Matrix::Identity(n, n);
  lg.f_bar = doc.has("model", "f_bar") ? get_vector(doc, "model", "f_bar") : Vector::Ones(n);
  return lg;
}

}  // namespace detail

// Builds and validates a model. With kind omitted, an all-linear scalar model with a single
// Gaussian prior is promoted to the linear-Gaussian variant.
inline ModelSpec build_model(const ConfigDocument& doc) {
  const auto& model = doc.section("model");
  const std::string kind = doc.get("model", "kind").value_or("");
  require(kind.empty() || kind == "scalar" || kind == "lg", ErrorCode::ConfigParse,
          "[model] kind must be 'scalar' or 'lg'");
  require(model.contains("sigma"), ErrorCode::ConfigParse, "missing key 'sigma' in [model]");

  if (kind == "lg" || (kind.empty() && doc.has("model", "A"))) {
    for (const char* k : {"drift", "h", "f"})
      require(!doc.has("model", k), ErrorCode::ConfigParse, std::string("[model] ") + k + " is not used by lg models");
    LinearGaussianModelSpec lg = detail::build_lg(doc);
    lg.validate();
    return lg;
  }

  ScalarModelSpec s;
  s.drift = detail::parse_function(doc, "drift");
  s.sigma = get_number(doc, "model", "sigma");
  s.obs = detail::parse_function(doc, "h");
  s.terminal = detail::parse_function(doc, "f");
  s.prior = detail::parse_prior(doc);
  if (doc.has("model", "G")) {
    const Matrix G = get_matrix(doc, "model", "G");
    require(G.size() == 1, ErrorCode::DimensionMismatch, "scalar models take a scalar G");
    s.control_gain = G(0, 0);
  }
  s.validate();
  const bool promote = kind.empty() && s.drift.is_pure_linear() && s.obs.is_pure_linear() &&
                       s.terminal.is_pure_linear() && s.prior.is_single_gaussian();
  if (!promote) return s;
  LinearGaussianModelSpec lg;
  lg.A = Matrix::Constant(1, 1, s.drift.param(0));
  lg.H = Matrix::Constant(1, 1, s.obs.param(0));
  lg.G = doc.has("model", "G") ? Matrix::Constant(1, 1, s.control_gain) : Matrix(1, 0);
  lg.sigma = s.sigma;
  lg.m0 = Vector::Constant(1, s.prior.mean());
  lg.Sigma0 = Matrix::Constant(1, 1, s.prior.variance());
  lg.f_bar = Vector::Constant(1, s.terminal.param(0));
  lg.validate();
  return lg;
}

// Writes the [model] section that build_model maps back to the same spec.
inline std::string serialize(const ModelSpec& spec) {
  using detail::format_matrix;
  using detail::format_number;
  std::string out = "[model]\n";
  if (const auto* s = std::get_if<ScalarModelSpec>(&spec)) {
    out += "kind = scalar\n";
    out += "drift = " + detail::format_function(s->drift) + "\n";
    out += "sigma = " + format_number(s->sigma) + "\n";
    out += "h = " + detail::format_function(s->obs) + "\n";
    out += "f = " + detail::format_function(s->terminal) + "\n";
    if (s->prior.is_single_gaussian()) {
      out += "prior_mean = " + format_number(s->prior.mean()) + "\n";
      out += "prior_var = " + format_number(s->prior.variance()) + "\n";
    } else {
      Matrix rows(static_cast<Eigen::Index>(s->prior.components().size()), 3);
      for (std::size_t i = 0; i < s->prior.components().size(); ++i) {
        const auto& c = s->prior.components()[i];
        rows.row(static_cast<Eigen::Index>(i)) << c.weight, c.mean, c.variance;
      }
      out += "prior_mixture = " + format_matrix(rows) + "\n";
    }
    if (s->control_gain != 0.0) out += "G = " + format_number(s->control_gain) + "\n";
    return out;
  }
  const auto& lg = std::get<LinearGaussianModelSpec>(spec);
  out += "kind = lg\n";
  out += "A = " + format_matrix(lg.A) + "\n";
  out += "H = " + format_matrix(lg.H) + "\n";
  if (lg.G.size() > 0) out += "G = " + format_matrix(lg.G) + "\n";
  out += "sigma = " + format_number(lg.sigma) + "\n";
  out += "prior_mean = " + format_matrix(lg.m0.transpose()) + "\n";
  out += "prior_var = " + format_matrix(lg.Sigma0) + "\n";
  out += "f_bar = " + format_matrix(lg.f_bar.transpose()) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Whole run configuration
// ---------------------------------------------------------------------------

struct GridConfig {
  TimeGrid time;
  std::optional<SpaceGrid> space;
};

inline GridConfig build_grid(const ConfigDocument& doc) {
  GridConfig g;
  g.time = TimeGrid(get_number(doc, "grid", "t_end"), get_count(doc, "grid", "n_steps"));
  const bool any_space = doc.has("grid", "x_min") || doc.has("grid", "x_max") || doc.has("grid", "n_points");
  if (any_space) {
    g.space = SpaceGrid(get_number(doc, "grid", "x_min"), get_number(doc, "grid", "x_max"),
                        get_count(doc, "grid", "n_points"));
  }
  return g;
}

struct EstimatorConfig {
  std::string id = "pi_innovation";
  std::size_t particles = 1000;
  std::string pi_h_source = "self";  // self | kalman
  std::string obs_file;
  std::string obs_error = "simulated";  // simulated | recorded
  std::vector<std::size_t> sweep_particles;
  double ess_floor = 0.0;
};

inline EstimatorConfig build_estimator_config(const ConfigDocument& doc) {
  EstimatorConfig c;
  if (!doc.has_section("estimator")) return c;
  if (auto v = doc.get("estimator", "id")) c.id = *v;
  if (doc.has("estimator", "particles")) c.particles = get_count(doc, "estimator", "particles");
  if (auto v = doc.get("estimator", "pi_h_source")) c.pi_h_source = *v;
  if (auto v = doc.get("estimator", "obs_file")) c.obs_file = *v;
  if (auto v = doc.get("estimator", "obs_error")) c.obs_error = *v;
  if (doc.has("estimator", "ess_floor")) c.ess_floor = get_number(doc, "estimator", "ess_floor");
  if (doc.has("estimator", "sweep_particles")) {
    const Vector v = get_vector(doc, "estimator", "sweep_particles");
    for (double x : v) {
      require(x >= 1 && x == std::floor(x), ErrorCode::ConfigParse, "sweep_particles must be positive integers");
      c.sweep_particles.push_back(static_cast<std::size_t>(x));
    }
  }
  require(c.pi_h_source == "self" || c.pi_h_source == "kalman", ErrorCode::ConfigParse,
          "[estimator] pi_h_source must be 'self' or 'kalman'");
  require(c.obs_error == "simulated" || c.obs_error == "recorded", ErrorCode::ConfigParse,
          "[estimator] obs_error must be 'simulated' or 'recorded'");
  require(c.particles > 0, ErrorCode::ConfigParse, "[estimator] particles must be positive");
  return c;
}

struct ControlConfig {
  std::string mode = "hjb";  // hjb | certainty_equivalence | lqg_iteration | separated_cost
  std::string cost = "quadratic";
  std::optional<Matrix> terminal_hessian;
  double terminal_center = 0.0;
  std::size_t runs = 100;
};

inline ControlConfig build_control_config(const ConfigDocument& doc) {
  ControlConfig c;
  if (!doc.has_section("control")) return c;
  if (auto v = doc.get("control", "mode")) c.mode = *v;
  if (auto v = doc.get("control", "cost")) c.cost = *v;
  if (doc.has("control", "terminal_hessian")) c.terminal_hessian = get_matrix(doc, "control", "terminal_hessian");
  if (doc.has("control", "terminal_center")) c.terminal_center = get_number(doc, "control", "terminal_center");
  if (doc.has("control", "runs")) c.runs = get_count(doc, "control", "runs");
  require(c.cost == "quadratic", ErrorCode::ConfigParse, "[control] only the quadratic cost is supported");
  return c;
}

struct OutputConfig {
  std::string dir = "out";
  bool dump_ensembles = false;
};

inline OutputConfig build_output_config(const ConfigDocument& doc) {
  OutputConfig c;
  if (!doc.has_section("output")) return c;
  if (auto v = doc.get("output", "dir")) c.dir = *v;
  if (auto v = doc.get("output", "dump_ensembles")) {
    require(*v == "true" || *v == "false", ErrorCode::ConfigParse, "[output] dump_ensembles must be true or false");
    c.dump_ensembles = *v == "true";
  }
  return c;
}

}  // namespace fbsde
