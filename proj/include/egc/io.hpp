#pragma once

#include <string>
#include <vector>

#include "egc/tensor.hpp"

namespace egc {

/// Write-then-rename, so readers never observe a partial file.
void atomic_write_text(const std::string& path, const std::string& content);
void atomic_write_bytes(const std::string& path,
                        const std::vector<unsigned char>& bytes);

/// Shortest representation that round-trips an f64 exactly.
std::string format_double(double v);

/// CSV: header row, '.' decimal separator, '\n' line endings.
std::string csv_text(const std::vector<std::string>& header,
                     const std::vector<std::vector<std::string>>& rows);
void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);

/// Binary 8-bit PGM (P5); values in [-1, 1] quantize to [0, 255].
void write_pgm(const std::string& path, std::size_t width, std::size_t height,
               const std::vector<double>& values);

/// Rasterize 2-D points in [-1, 1]^2 onto a res x res bitmap PGM.
void write_scatter_pgm(const std::string& path, const Tensor& points,
                       std::size_t res);

unsigned char quantize_unit(double v);  // [-1, 1] -> [0, 255]

}  // namespace egc
