#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>
#include <ostream>
#include <string>
#include <vector>

#include "fbsde/errors.hpp"
#include "fbsde/pde_backward.hpp"
#include "fbsde/sde_sim.hpp"

namespace fbsde {

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

// Observation record: t, Z, then X (truth) and W (cumulative measurement noise) when present.
inline void write_csv(std::ostream& os, const ObservationRecord& obs) {
  os << "t,Z";
  if (obs.truth) os << ",X";
  if (obs.noise) os << ",W";
  os << '\n';
  const auto old = os.precision(17);
  for (std::size_t k = 0; k < obs.Z.size(); ++k) {
    os << obs.grid.time(k) << ',' << obs.Z[k];
    if (obs.truth) os << ',' << (*obs.truth)[k];
    if (obs.noise) os << ',' << (*obs.noise)[k];
    os << '\n';
  }
  os.precision(old);
}

// Ensemble: t, x_0..x_{N-1}, then logw_0..logw_{N-1} for whichever weight family is present
// (Girsanov weights take precedence).
inline void write_csv(std::ostream& os, const PathEnsemble& ens) {
  const std::size_t N = ens.n_paths;
  const std::vector<double>* lw = ens.log_weights_Dtilde   ? &*ens.log_weights_Dtilde
                                  : ens.log_weights_D      ? &*ens.log_weights_D
                                                           : nullptr;
  os << 't';
  for (std::size_t i = 0; i < N; ++i) os << ",x_" << i;
  if (lw)
    for (std::size_t i = 0; i < N; ++i) os << ",logw_" << i;
  os << '\n';
  const auto old = os.precision(17);
  for (std::size_t k = 0; k < ens.grid.size(); ++k) {
    os << ens.grid.time(k);
    for (std::size_t i = 0; i < N; ++i) os << ',' << ens.states[k * N + i];
    if (lw)
      for (std::size_t i = 0; i < N; ++i) os << ',' << (*lw)[k * N + i];
    os << '\n';
  }
  os.precision(old);
}

// Grid field: header "t" plus the x-coordinates, then one row per time step.
inline void write_grid_csv(std::ostream& os, const SpaceGrid& space, const TimeGrid& time,
                           const std::vector<double>& field) {
  const std::size_t J = space.size();
  const auto old = os.precision(17);
  os << 't';
  for (std::size_t j = 0; j < J; ++j) os << ',' << space.x(j);
  os << '\n';
  for (std::size_t k = 0; k < time.size(); ++k) {
    os << time.time(k);
    for (std::size_t j = 0; j < J; ++j) os << ',' << field[k * J + j];
    os << '\n';
  }
  os.precision(old);
}

inline void write_csv(std::ostream& os, const GridFunction& y) { write_grid_csv(os, y.space, y.time, y.values); }

// Reads an observation CSV with columns t, Z and optionally X and W (as written above).
inline ObservationRecord read_observation_csv(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::Io, "cannot open '" + path + "'");
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), ErrorCode::Io, "empty observation file '" + path + "'");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  require(header.size() >= 2 && header[0] == "t" && header[1] == "Z", ErrorCode::Io,
          "observation file must start with columns t,Z");
  const auto col = [&](const char* name) -> int {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    return -1;
  };
  const int cx = col("X"), cw = col("W");
  std::vector<double> t, Z, X, W;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        row.push_back(std::stod(cell));
      } catch (const std::exception&) {
        fail(ErrorCode::Io, path + ":" + std::to_string(line_no) + ": bad number '" + cell + "'");
      }
    }
    require(row.size() == header.size(), ErrorCode::Io, path + ":" + std::to_string(line_no) + ": wrong column count");
    t.push_back(row[0]);
    Z.push_back(row[1]);
    if (cx >= 0) X.push_back(row[static_cast<std::size_t>(cx)]);
    if (cw >= 0) W.push_back(row[static_cast<std::size_t>(cw)]);
  }
  require(t.size() >= 2 && t.front() == 0.0, ErrorCode::GridMismatch, "observation file needs a grid starting at t = 0");
  ObservationRecord obs;
  obs.grid = TimeGrid(t.back(), t.size() - 1);
  for (std::size_t k = 0; k < t.size(); ++k)
    require(std::abs(t[k] - obs.grid.time(k)) <= 1e-9 * (1.0 + t.back()), ErrorCode::GridMismatch,
            "observation times are not uniform");
  obs.Z = Z;
  obs.dZ.resize(t.size() - 1);
  for (std::size_t k = 0; k + 1 < t.size(); ++k) obs.dZ[k] = Z[k + 1] - Z[k];
  if (cx >= 0) obs.truth = X;
  if (cw >= 0) obs.noise = W;
  return obs;
}

// ---------------------------------------------------------------------------
// Binary dumps (native endianness, versioned)
// ---------------------------------------------------------------------------

namespace detail {

constexpr std::uint32_t kDumpVersion = 1;

class BinaryWriter {
 public:
  explicit BinaryWriter(const std::string& path) : out_(path, std::ios::binary) {
    require(static_cast<bool>(out_), ErrorCode::Io, "cannot write '" + path + "'");
  }
  template <typename T>
  void pod(const T& v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void doubles(const std::vector<double>& v) {
    pod<std::uint64_t>(v.size());
    out_.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
  }
  void optional_doubles(const std::optional<std::vector<double>>& v) {
    pod<std::uint8_t>(v ? 1 : 0);
    if (v) doubles(*v);
  }
  void magic(const char (&tag)[9]) {
    out_.write(tag, 8);
    pod(kDumpVersion);
  }
  void finish() { require(static_cast<bool>(out_.flush()), ErrorCode::Io, "write failed"); }

 private:
  std::ofstream out_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
    require(static_cast<bool>(in_), ErrorCode::Io, "cannot read '" + path + "'");
  }
  template <typename T>
  T pod() {
    T v{};
    in_.read(reinterpret_cast<char*>(&v), sizeof(T));
    require(static_cast<bool>(in_), ErrorCode::Io, "truncated dump '" + path_ + "'");
    return v;
  }
  std::vector<double> doubles() {
    const auto n = pod<std::uint64_t>();
    require(n < (std::uint64_t{1} << 40), ErrorCode::Io, "corrupt dump '" + path_ + "'");
    std::vector<double> v(n);
    in_.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
    require(static_cast<bool>(in_), ErrorCode::Io, "truncated dump '" + path_ + "'");
    return v;
  }
  std::optional<std::vector<double>> optional_doubles() {
    if (pod<std::uint8_t>() == 0) return std::nullopt;
    return doubles();
  }
  void magic(const char (&tag)[9]) {
    char buf[8];
    in_.read(buf, 8);
    require(static_cast<bool>(in_) && std::memcmp(buf, tag, 8) == 0, ErrorCode::Io,
            "'" + path_ + "' is not a " + std::string(tag, 8) + " dump");
    require(pod<std::uint32_t>() == kDumpVersion, ErrorCode::Io, "unsupported dump version in '" + path_ + "'");
  }

 private:
  std::ifstream in_;
  std::string path_;
};

inline void write_grid(BinaryWriter& w, const TimeGrid& g) {
  w.pod(g.t_end());
  w.pod<std::uint64_t>(g.n_steps());
}

inline TimeGrid read_grid(BinaryReader& r) {
  const auto t = r.pod<double>();
  const auto n = r.pod<std::uint64_t>();
  return TimeGrid(t, n);
}

}  // namespace detail

inline void dump_binary(const std::string& path, const ObservationRecord& obs) {
  detail::BinaryWriter w(path);
  w.magic("FBSDEOBS");
  detail::write_grid(w, obs.grid);
  w.pod(obs.seed);
  w.doubles(obs.Z);
  w.doubles(obs.dZ);
  w.optional_doubles(obs.truth);
  w.optional_doubles(obs.noise);
  w.finish();
}

inline ObservationRecord load_observation_record(const std::string& path) {
  detail::BinaryReader r(path);
  r.magic("FBSDEOBS");
  ObservationRecord obs;
  obs.grid = detail::read_grid(r);
  obs.seed = r.pod<std::uint64_t>();
  obs.Z = r.doubles();
  obs.dZ = r.doubles();
  obs.truth = r.optional_doubles();
  obs.noise = r.optional_doubles();
  require(obs.Z.size() == obs.grid.size() && obs.dZ.size() == obs.grid.n_steps(), ErrorCode::GridMismatch,
          "observation dump does not match its grid");
  return obs;
}

inline void dump_binary(const std::string& path, const PathEnsemble& ens) {
  detail::BinaryWriter w(path);
  w.magic("FBSDEENS");
  detail::write_grid(w, ens.grid);
  w.pod<std::uint64_t>(ens.n_paths);
  w.pod(ens.seed);
  w.pod<std::uint8_t>(ens.use == EnsembleUse::Filter ? 1 : 0);
  w.doubles(ens.states);
  w.optional_doubles(ens.log_weights_D);
  w.optional_doubles(ens.log_weights_Dtilde);
  w.doubles(ens.pi_h);
  w.doubles(ens.innovation_increments);
  w.doubles(ens.ess);
  std::vector<double> steps(ens.resample_steps.begin(), ens.resample_steps.end());
  w.doubles(steps);
  w.pod<std::int64_t>(ens.weight_collapse_step ? static_cast<std::int64_t>(*ens.weight_collapse_step) : -1);
  w.finish();
}

inline PathEnsemble load_path_ensemble(const std::string& path) {
  detail::BinaryReader r(path);
  r.magic("FBSDEENS");
  PathEnsemble ens;
  ens.grid = detail::read_grid(r);
  ens.n_paths = r.pod<std::uint64_t>();
  ens.seed = r.pod<std::uint64_t>();
  ens.use = r.pod<std::uint8_t>() ? EnsembleUse::Filter : EnsembleUse::Estimator;
  ens.states = r.doubles();
  ens.log_weights_D = r.optional_doubles();
  ens.log_weights_Dtilde = r.optional_doubles();
  ens.pi_h = r.doubles();
  ens.innovation_increments = r.doubles();
  ens.ess = r.doubles();
  for (double s : r.doubles()) ens.resample_steps.push_back(static_cast<std::size_t>(s));
  const auto collapse = r.pod<std::int64_t>();
  if (collapse >= 0) ens.weight_collapse_step = static_cast<std::size_t>(collapse);
  require(ens.states.size() == ens.grid.size() * ens.n_paths, ErrorCode::GridMismatch,
          "ensemble dump does not match its grid");
  return ens;
}

}  // namespace fbsde
