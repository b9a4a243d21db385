#include "kvnn/tensor_io.hpp"

#include "kvnn/error.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace kvnn {

namespace {

constexpr std::array<char, 4> kMagic{'K', 'V', 'T', '1'};
constexpr std::uint32_t kMaxRank = 16;

void put_u32(std::ostream& out, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
    out.write(b, 4);
}

void put_f64(std::ostream& out, double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xFFu);
    out.write(b, 8);
}

std::uint32_t get_u32(std::istream& in) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) throw Error("io", "KVT1: truncated header");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
    if (t.rank() == 0) throw invalid_argument("KVT1: cannot write an empty tensor");
    if (!t.all_finite()) throw Error("non_finite", "KVT1: refusing to write non-finite values");
    out.write(kMagic.data(), kMagic.size());
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) put_u32(out, static_cast<std::uint32_t>(e));
    for (double v : t.data()) put_f64(out, v);
    if (!out) throw Error("io", "KVT1: write failed");
}

Tensor read_tensor(std::istream& in) {
    std::array<char, 4> magic{};
    if (!in.read(magic.data(), magic.size()) || magic != kMagic)
        throw Error("io", "KVT1: bad magic");
    const auto rank = get_u32(in);
    if (rank == 0 || rank > kMaxRank) throw Error("io", "KVT1: unsupported rank");
    Shape shape(rank);
    for (auto& e : shape) e = get_u32(in);
    const std::size_t n = shape_size(shape);
    std::vector<unsigned char> raw(n * 8);
    if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
        throw Error("io", "KVT1: truncated payload");
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::uint64_t bits = 0;
        for (int k = 0; k < 8; ++k) bits |= static_cast<std::uint64_t>(raw[i * 8 + k]) << (8 * k);
        data[i] = std::bit_cast<double>(bits);
    }
    Tensor t(std::move(shape), std::move(data));
    if (!t.all_finite()) throw Error("non_finite", "KVT1: payload contains non-finite values");
    return t;
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("io", "cannot open " + path.string() + " for writing");
    write_tensor(out, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("io", "cannot open " + path.string());
    return read_tensor(in);
}

}  // namespace kvnn
