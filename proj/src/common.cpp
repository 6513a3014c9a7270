#include "tapter/common.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace tapter {

uint32_t fnv1a32(std::string_view bytes) {
    uint32_t h = 2166136261u;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 16777619u;
    }
    return h;
}

uint64_t fnv1a64(std::string_view bytes) {
    uint64_t h = 14695981039346656037ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

namespace {
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}
} // namespace

uint64_t Rng::next_u64() { return splitmix64(state_); }

double Rng::next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

uint32_t Rng::next_below(uint32_t n) {
    return static_cast<uint32_t>(next_u64() % n);
}

double Rng::uniform(double lo, double hi) {
    return lo + (hi - lo) * next_double();
}

double Rng::gauss() {
    double u1 = 0.0;
    do {
        u1 = next_double();
    } while (u1 <= 0.0);
    double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

uint64_t mix_seed(uint64_t seed, std::string_view purpose) {
    uint64_t s = seed ^ fnv1a64(purpose);
    return splitmix64(s);
}

uint64_t mix_seed(uint64_t seed, std::string_view purpose, uint64_t a) {
    uint64_t s = mix_seed(seed, purpose) + a;
    return splitmix64(s);
}

uint64_t mix_seed(uint64_t seed, std::string_view purpose, uint64_t a, uint64_t b) {
    uint64_t s = mix_seed(seed, purpose, a) + b;
    return splitmix64(s);
}

double dot(const double* x, const double* y, int n) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += x[i] * y[i];
    return s;
}

void matvec(const Mat& w, const double* x, double* y) {
    for (int r = 0; r < w.rows; ++r) y[r] = dot(w.row(r), x, w.cols);
}

void matvec_t(const Mat& w, const double* x, double* y) {
    std::fill(y, y + w.cols, 0.0);
    for (int r = 0; r < w.rows; ++r) {
        const double* wr = w.row(r);
        const double xr = x[r];
        if (xr == 0.0) continue;
        for (int c = 0; c < w.cols; ++c) y[c] += wr[c] * xr;
    }
}

bool all_finite(const Mat& m) {
    for (double v : m.a)
        if (!std::isfinite(v)) return false;
    return true;
}

std::vector<std::string> utf8_chars(std::string_view s) {
    std::vector<std::string> out;
    size_t i = 0;
    while (i < s.size()) {
        unsigned char b = static_cast<unsigned char>(s[i]);
        size_t len = 1;
        if ((b & 0x80u) == 0x00u) len = 1;
        else if ((b & 0xe0u) == 0xc0u) len = 2;
        else if ((b & 0xf0u) == 0xe0u) len = 3;
        else if ((b & 0xf8u) == 0xf0u) len = 4;
        if (i + len > s.size()) len = 1;
        out.emplace_back(s.substr(i, len));
        i += len;
    }
    return out;
}

size_t utf8_len(std::string_view s) {
    size_t n = 0;
    for (size_t i = 0; i < s.size();) {
        unsigned char b = static_cast<unsigned char>(s[i]);
        size_t len = 1;
        if ((b & 0xe0u) == 0xc0u) len = 2;
        else if ((b & 0xf0u) == 0xe0u) len = 3;
        else if ((b & 0xf8u) == 0xf0u) len = 4;
        if (i + len > s.size()) len = 1;
        i += len;
        ++n;
    }
    return n;
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text_file(const std::string& path, std::string_view content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write file: " + path);
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw std::runtime_error("write failed: " + path);
}

bool file_exists(const std::string& path) {
    std::error_code ec;
    return std::filesystem::exists(path, ec);
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

uint64_t bytes_checksum(const void* p, size_t n) {
    return fnv1a64(std::string_view(static_cast<const char*>(p), n));
}

uint64_t mat_checksum(const Mat& m) {
    uint64_t h = fnv1a64("mat");
    h ^= bytes_checksum(&m.rows, sizeof m.rows);
    h ^= 0x9e3779b97f4a7c15ull * bytes_checksum(&m.cols, sizeof m.cols);
    if (!m.a.empty()) h ^= bytes_checksum(m.a.data(), m.a.size() * sizeof(double));
    return h;
}

// ---------------------------------------------------------------------------
// tensor file
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'T', 'P', 'T', 'F'};
constexpr uint32_t kVersion = 1;

void put_u32(std::ostream& out, uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

uint32_t get_u32(std::istream& in) {
    uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) throw std::runtime_error("tensor file: truncated");
    return v;
}

void put_str(std::ostream& out, std::string_view s) {
    put_u32(out, static_cast<uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_str(std::istream& in) {
    uint32_t n = get_u32(in);
    std::string s(n, '\0');
    in.read(s.data(), n);
    if (!in) throw std::runtime_error("tensor file: truncated");
    return s;
}

} // namespace

const std::string* TensorFile::find_meta(std::string_view key) const {
    for (const auto& [k, v] : meta)
        if (k == key) return &v;
    return nullptr;
}

const Mat* TensorFile::find_tensor(std::string_view name) const {
    for (const auto& [k, m] : tensors)
        if (k == name) return &m;
    return nullptr;
}

void save_tensor_file(const TensorFile& tf, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write file: " + path);
    out.write(kMagic, 4);
    put_u32(out, kVersion);
    put_u32(out, static_cast<uint32_t>(tf.meta.size()));
    for (const auto& [k, v] : tf.meta) {
        put_str(out, k);
        put_str(out, v);
    }
    put_u32(out, static_cast<uint32_t>(tf.tensors.size()));
    for (const auto& [name, m] : tf.tensors) {
        put_str(out, name);
        put_u32(out, static_cast<uint32_t>(m.rows));
        put_u32(out, static_cast<uint32_t>(m.cols));
        out.write(reinterpret_cast<const char*>(m.a.data()),
                  static_cast<std::streamsize>(m.a.size() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

TensorFile load_tensor_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open file: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("tensor file: bad magic in " + path);
    uint32_t version = get_u32(in);
    if (version != kVersion)
        throw std::runtime_error("tensor file: unsupported version in " + path);
    TensorFile tf;
    uint32_t n_meta = get_u32(in);
    for (uint32_t i = 0; i < n_meta; ++i) {
        std::string k = get_str(in);
        std::string v = get_str(in);
        tf.meta.emplace_back(std::move(k), std::move(v));
    }
    uint32_t n_tensors = get_u32(in);
    for (uint32_t i = 0; i < n_tensors; ++i) {
        std::string name = get_str(in);
        uint32_t rows = get_u32(in);
        uint32_t cols = get_u32(in);
        Mat m(static_cast<int>(rows), static_cast<int>(cols));
        in.read(reinterpret_cast<char*>(m.a.data()),
                static_cast<std::streamsize>(m.a.size() * sizeof(double)));
        if (!in) throw std::runtime_error("tensor file: truncated tensor in " + path);
        tf.tensors.emplace_back(std::move(name), std::move(m));
    }
    return tf;
}

} // namespace tapter
