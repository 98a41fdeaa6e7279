#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "crnet/tensor.hpp"

namespace crnet {

// CRT1 container: "CRT1", then little-endian u32 version (1), u32 dtype code
// (0 = f32, 1 = f64), u32 ndim, u32 dims[ndim], then the row-major payload.
void write_tensor(std::ostream& out, const Tensor& tensor);
std::string encode_tensor(const Tensor& tensor);
// `source` names the input in error messages; `base_offset` is added to the
// reported byte offsets so errors point into the enclosing file.
Tensor decode_tensor(std::string_view bytes, const std::string& source, std::size_t base_offset = 0);

void save_tensor(const std::filesystem::path& path, const Tensor& tensor);
Tensor load_tensor(const std::filesystem::path& path);

// Ordered (path, tensor) list. Archive layout:
//   "CRTA", u32 version (1), u64 manifest byte length,
//   manifest: one `path\toffset\t[d0,d1,...]\n` line per entry, UTF-8,
//   payload: the CRT1 containers back to back; offsets count from the start
//   of the payload section.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

std::string encode_archive(const NamedTensors& entries);
NamedTensors decode_archive(std::string_view bytes, const std::string& source);

// Writes to a sibling temporary and renames, so readers never see a torn file.
void save_archive(const std::filesystem::path& path, const NamedTensors& entries);
NamedTensors load_archive(const std::filesystem::path& path);

// Grayscale PFM of a [H, W] plane: "Pf\n<W> <H>\n-1.0\n", then little-endian
// f32 rows from bottom to top.
std::string encode_pfm(const Tensor& plane);
void write_pfm(const std::filesystem::path& path, const Tensor& plane);

std::string read_file(const std::filesystem::path& path);
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

}  // namespace crnet
