#pragma once

#include "fbtc/errors.hpp"
#include "fbtc/grid.hpp"
#include "fbtc/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace fbtc {

// Plain text: first line "K d1 ... dK", then one value per line, %.17g.
void write_tensor_text(const std::string& path, const DenseTensor& t);
DenseTensor read_tensor_text(const std::string& path);

// Same layout with 0/1 entries.
void write_mask_text(const std::string& path, const MaskTensor& m);
MaskTensor read_mask_text(const std::string& path);

// Binary PGM (P5, HxW) / PPM (P6, HxWx3), maxval 255. Values are clamped to
// [0,255] and rounded on write.
void write_image(const std::string& path, const DenseTensor& img);
DenseTensor read_image(const std::string& path);

// Query CSV: header i1,...,iK, one real K-vector per row.
std::vector<std::vector<double>> read_query_csv(const std::string& path);

// FNV-1a 64-bit over the file bytes, as 16 hex digits.
std::string file_digest(const std::string& path);

// Per-mode coordinate CSV: header mode,position,coordinate.
void write_coords_csv(const std::string& path, const std::vector<std::vector<double>>& coords);
std::vector<std::vector<double>> read_coords_csv(const std::string& path);

}  // namespace fbtc
