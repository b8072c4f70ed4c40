#include "mlt/serialize.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "mlt/error.hpp"

namespace mlt {

namespace {

constexpr char kMagic[8] = {'M', 'L', 'T', 'E', 'N', 'S', 'O', 'R'};
constexpr uint64_t kVersion = 1;

void write_u64(std::ostream& os, uint64_t v) {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(buf), 8);
}

uint64_t read_u64(std::istream& is) {
    unsigned char buf[8];
    is.read(reinterpret_cast<char*>(buf), 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(buf[i]) << (8 * i);
    return v;
}

void write_f64(std::ostream& os, double d) {
    uint64_t bits;
    std::memcpy(&bits, &d, 8);
    write_u64(os, bits);
}

double read_f64(std::istream& is) {
    uint64_t bits = read_u64(is);
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
}

}  // namespace

void save_tensor(const std::filesystem::path& file, const Tensor& t) {
    std::ofstream os(file, std::ios::binary);
    if (!os) throw DataError("cannot open for writing: " + file.string());
    os.write(kMagic, 8);
    write_u64(os, kVersion);
    write_u64(os, static_cast<uint64_t>(t.rank()));
    for (int d : t.shape()) write_u64(os, static_cast<uint64_t>(d));
    for (double v : t.data()) write_f64(os, v);
    if (!os) throw DataError("write failed: " + file.string());
}

Tensor load_tensor(const std::filesystem::path& file) {
    std::ifstream is(file, std::ios::binary);
    if (!is) throw DataError("cannot open: " + file.string());
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kMagic, 8) != 0)
        throw DataError("not a tensor snapshot: " + file.string());
    uint64_t version = read_u64(is);
    if (version != kVersion)
        throw DataError("unsupported tensor snapshot version in " + file.string());
    uint64_t rank = read_u64(is);
    if (rank > 8) throw DataError("implausible tensor rank in " + file.string());
    std::vector<int> shape(rank);
    for (auto& d : shape) {
        uint64_t v = read_u64(is);
        if (v == 0 || v > (1ull << 31)) throw DataError("bad dimension in " + file.string());
        d = static_cast<int>(v);
    }
    int64_t n = Tensor::shape_size(shape);
    std::vector<double> data(static_cast<size_t>(n));
    for (auto& v : data) v = read_f64(is);
    if (!is) throw DataError("truncated tensor snapshot: " + file.string());
    return Tensor::from_data(std::move(shape), std::move(data));
}

const std::string& Manifest::get(const std::string& key) const {
    auto it = values.find(key);
    if (it == values.end()) throw DataError("manifest missing key: " + key);
    return it->second;
}

int64_t Manifest::get_int(const std::string& key) const { return std::stoll(get(key)); }
double Manifest::get_double(const std::string& key) const { return std::stod(get(key)); }

void save_manifest(const std::filesystem::path& file, const Manifest& m) {
    std::ofstream os(file);
    if (!os) throw DataError("cannot open for writing: " + file.string());
    for (const auto& [k, v] : m.values) os << k << " = " << v << "\n";
    for (const auto& [name, f] : m.tensors) os << "tensor " << name << " " << f << "\n";
    if (!os) throw DataError("write failed: " + file.string());
}

Manifest load_manifest(const std::filesystem::path& file) {
    std::ifstream is(file);
    if (!is) throw DataError("cannot open: " + file.string());
    Manifest m;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        std::istringstream ls(line);
        std::string first;
        if (!(ls >> first)) continue;
        if (first == "tensor") {
            std::string name, f;
            if (!(ls >> name >> f))
                throw DataError(file.string() + ":" + std::to_string(lineno) +
                                ": malformed tensor line");
            m.tensors.emplace_back(name, f);
        } else {
            std::string eq, value;
            if (!(ls >> eq) || eq != "=" || !(ls >> value))
                throw DataError(file.string() + ":" + std::to_string(lineno) +
                                ": expected 'key = value'");
            m.values[first] = value;
        }
    }
    return m;
}

std::string format_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

}  // namespace mlt
