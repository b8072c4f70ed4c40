#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mlt/tensor.hpp"

namespace mlt {

// Tensor snapshot file: 8-byte magic "MLTENSOR", then little-endian u64
// version, u64 rank, u64 dims[rank], then size() raw little-endian f64.
void save_tensor(const std::filesystem::path& file, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& file);

// Plain-text checkpoint manifest. `key = value` lines for metadata and
// `tensor <name> <file>` lines mapping tensor names to snapshot files in the
// same directory. '#' starts a comment.
struct Manifest {
    std::map<std::string, std::string> values;
    std::vector<std::pair<std::string, std::string>> tensors;  // name -> file

    bool has(const std::string& key) const { return values.count(key) != 0; }
    const std::string& get(const std::string& key) const;
    int64_t get_int(const std::string& key) const;
    double get_double(const std::string& key) const;
};

void save_manifest(const std::filesystem::path& file, const Manifest& m);
Manifest load_manifest(const std::filesystem::path& file);

// Round-trip-exact formatting for doubles (shortest form is not needed;
// 17 significant digits always reproduce the bit pattern).
std::string format_double(double v);

}  // namespace mlt
