#ifndef PGPR_HARNESS_DATASET_IO_HPP_
#define PGPR_HARNESS_DATASET_IO_HPP_

#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "pgpr/kernel.hpp"

namespace pgpr {

// Dataset CSV: header `f1,...,fd[,y]`, one point per row. Row order gives
// the point ids 0..n-1.

inline std::vector<std::string> split_csv(const std::string &line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline void write_dataset_csv(std::ostream &out, const Dataset &d) {
  const std::size_t dim = d.inputs.dim();
  for (std::size_t k = 0; k < dim; ++k) out << (k ? "," : "") << "f" << (k + 1);
  if (d.outputs) out << ",y";
  out << "\n" << std::setprecision(17);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    for (std::size_t k = 0; k < dim; ++k) {
      out << (k ? "," : "") << d.inputs.features(r, static_cast<Eigen::Index>(k));
    }
    if (d.outputs) out << "," << (*d.outputs)(r);
    out << "\n";
  }
}

inline Dataset read_dataset_csv(std::istream &in, DomainId domain) {
  std::string line;
  if (!std::getline(in, line)) {
    throw InvalidArgument("dataset csv: missing header");
  }
  const auto header = split_csv(line);
  std::size_t dim = 0;
  bool has_y = false;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (header[c] == "y" && c + 1 == header.size()) {
      has_y = true;
    } else if (header[c] == "f" + std::to_string(c + 1)) {
      ++dim;
    } else {
      throw InvalidArgument("dataset csv: unexpected column '" + header[c] + "'");
    }
  }
  if (dim == 0) {
    throw InvalidArgument("dataset csv: no feature columns");
  }
  std::vector<double> values;
  std::size_t rows = 0;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != header.size()) {
      throw DimensionError("dataset csv: line " + std::to_string(lineno) +
                           " has " + std::to_string(cells.size()) + " cells");
    }
    for (const auto &c : cells) {
      try {
        values.push_back(std::stod(c));
      } catch (const std::exception &) {
        throw InvalidArgument("dataset csv: bad number '" + c + "' on line " +
                              std::to_string(lineno));
      }
    }
    ++rows;
  }
  const std::size_t w = header.size();
  MatrixXd feats(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(dim));
  VectorXd y(static_cast<Eigen::Index>(rows));
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t k = 0; k < dim; ++k) {
      feats(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = values[i * w + k];
    }
    if (has_y) y(static_cast<Eigen::Index>(i)) = values[i * w + dim];
  }
  Dataset d;
  d.inputs = PointSet::sequential(std::move(feats), domain);
  if (has_y) d.outputs = std::move(y);
  return d;
}

inline Dataset load_dataset_csv(const std::string &path, DomainId domain) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open " + path);
  return read_dataset_csv(in, domain);
}

inline void save_dataset_csv(const std::string &path, const Dataset &d) {
  std::ofstream out(path);
  if (!out) throw InvalidArgument("cannot write " + path);
  write_dataset_csv(out, d);
}

} // namespace pgpr

#endif
