// Shared numerics and utilities: deterministic RNG, dense f64 matrices,
// FNV hashing, UTF-8 code point handling, small file helpers.
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace tapter {

// ---------------------------------------------------------------------------
// hashing
// ---------------------------------------------------------------------------

uint32_t fnv1a32(std::string_view bytes);
uint64_t fnv1a64(std::string_view bytes);

// ---------------------------------------------------------------------------
// deterministic rng (splitmix64 stream; identical everywhere)
// ---------------------------------------------------------------------------

class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64();
    double next_double();                 // [0, 1), 53-bit resolution
    uint32_t next_below(uint32_t n);      // [0, n), n > 0
    double uniform(double lo, double hi);
    double gauss();                       // standard normal (Box-Muller)

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = next_below(static_cast<uint32_t>(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    uint64_t state_;
};

// Derives independent stream seeds from a base seed and a purpose label.
uint64_t mix_seed(uint64_t seed, std::string_view purpose);
uint64_t mix_seed(uint64_t seed, std::string_view purpose, uint64_t a);
uint64_t mix_seed(uint64_t seed, std::string_view purpose, uint64_t a, uint64_t b);

// ---------------------------------------------------------------------------
// dense row-major f64 matrix
// ---------------------------------------------------------------------------

struct Mat {
    int rows{0};
    int cols{0};
    std::vector<double> a;

    Mat() = default;
    Mat(int r, int c, double fill = 0.0)
        : rows(r), cols(c), a(static_cast<size_t>(r) * static_cast<size_t>(c), fill) {}

    double& at(int i, int j) { return a[static_cast<size_t>(i) * cols + j]; }
    double at(int i, int j) const { return a[static_cast<size_t>(i) * cols + j]; }
    double* row(int i) { return a.data() + static_cast<size_t>(i) * cols; }
    const double* row(int i) const { return a.data() + static_cast<size_t>(i) * cols; }

    size_t size() const { return a.size(); }
    bool empty() const { return a.empty(); }
    void zero() { std::fill(a.begin(), a.end(), 0.0); }
    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }

    void fill_uniform(Rng& rng, double lo, double hi) {
        for (double& x : a) x = rng.uniform(lo, hi);
    }
    void fill_gauss(Rng& rng, double stddev) {
        for (double& x : a) x = rng.gauss() * stddev;
    }
};

using Vec = std::vector<double>;

inline Mat zeros_like(const Mat& m) { return Mat(m.rows, m.cols); }

double dot(const double* x, const double* y, int n);

// y = W x, W is (out x in)
void matvec(const Mat& w, const double* x, double* y);
// y = W^T x, x has w.rows entries, y has w.cols
void matvec_t(const Mat& w, const double* x, double* y);

bool all_finite(const Mat& m);

// ---------------------------------------------------------------------------
// utf-8
// ---------------------------------------------------------------------------

// Splits a UTF-8 string into per-code-point substrings. Invalid lead bytes
// are passed through as single-byte units.
std::vector<std::string> utf8_chars(std::string_view s);
size_t utf8_len(std::string_view s);

// ---------------------------------------------------------------------------
// small file helpers
// ---------------------------------------------------------------------------

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, std::string_view content);
bool file_exists(const std::string& path);

// Formats a double so that parsing the result reproduces the value exactly.
std::string format_double(double v);

uint64_t bytes_checksum(const void* p, size_t n);
uint64_t mat_checksum(const Mat& m);

// ---------------------------------------------------------------------------
// tensor container file (binary, versioned, bit-exact round trip)
// ---------------------------------------------------------------------------

struct TensorFile {
    std::vector<std::pair<std::string, std::string>> meta;
    std::vector<std::pair<std::string, Mat>> tensors;

    const std::string* find_meta(std::string_view key) const;
    const Mat* find_tensor(std::string_view name) const;
};

void save_tensor_file(const TensorFile& tf, const std::string& path);
TensorFile load_tensor_file(const std::string& path);

} // namespace tapter
