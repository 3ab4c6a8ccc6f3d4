#include "egc/io.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace egc {

namespace {

void write_raw(const std::string& path, const char* data, std::size_t size) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write '" + path + "'");
    f.write(data, static_cast<std::streamsize>(size));
    if (!f) throw std::runtime_error("cannot write '" + path + "'");
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace

void atomic_write_text(const std::string& path, const std::string& content) {
  write_raw(path, content.data(), content.size());
}

void atomic_write_bytes(const std::string& path,
                        const std::vector<unsigned char>& bytes) {
  write_raw(path, reinterpret_cast<const char*>(bytes.data()), bytes.size());
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string csv_text(const std::vector<std::string>& header,
                     const std::vector<std::vector<std::string>>& rows) {
  std::string out;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (i) out += ',';
    out += header[i];
  }
  out += '\n';
  for (const auto& row : rows) {
    if (row.size() != header.size()) {
      throw std::invalid_argument("csv: row width does not match header");
    }
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) out += ',';
      out += row[i];
    }
    out += '\n';
  }
  return out;
}

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
  atomic_write_text(path, csv_text(header, rows));
}

unsigned char quantize_unit(double v) {
  const double q = std::lround((v + 1.0) * 0.5 * 255.0);
  return static_cast<unsigned char>(std::clamp(q, 0.0, 255.0));
}

void write_pgm(const std::string& path, std::size_t width, std::size_t height,
               const std::vector<double>& values) {
  if (values.size() != width * height) {
    throw std::invalid_argument("pgm: value count does not match dimensions");
  }
  std::string header = "P5\n" + std::to_string(width) + " " +
                       std::to_string(height) + "\n255\n";
  std::vector<unsigned char> bytes(header.begin(), header.end());
  bytes.reserve(bytes.size() + values.size());
  for (double v : values) bytes.push_back(quantize_unit(v));
  atomic_write_bytes(path, bytes);
}

void write_scatter_pgm(const std::string& path, const Tensor& points,
                       std::size_t res) {
  if (points.shape().size() != 2 || points.shape()[1] != 2) {
    throw std::invalid_argument("scatter: expected [n, 2] points");
  }
  if (res == 0) throw std::invalid_argument("scatter: zero resolution");
  std::vector<double> grid(res * res, -1.0);
  const auto& pv = points.data();
  const auto n = points.shape()[0];
  const auto r = static_cast<double>(res);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = pv[2 * i], y = pv[2 * i + 1];
    auto col = static_cast<long>(std::floor((x + 1.0) * 0.5 * r));
    auto row = static_cast<long>(std::floor((1.0 - (y + 1.0) * 0.5) * r));
    col = std::clamp<long>(col, 0, static_cast<long>(res) - 1);
    row = std::clamp<long>(row, 0, static_cast<long>(res) - 1);
    grid[static_cast<std::size_t>(row) * res + static_cast<std::size_t>(col)] = 1.0;
  }
  write_pgm(path, res, res, grid);
}

}  // namespace egc
