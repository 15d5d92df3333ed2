#pragma once

// Binary tensor archive used for checkpoints and data dumps.
//
// Layout (little-endian):
//   "CVAEARCH"               8-byte magic
//   u32 format_version       currently 1
//   u64 meta_size, bytes     UTF-8 JSON object (schema, kind, config, counters ...)
//   u32 tensor_count
//   per tensor:
//     u32 name_size, bytes
//     u8  dtype              0 = f32, 1 = f64, 2 = i32, 3 = u8
//     u32 rank, u64 dims[rank]
//     raw row-major data
//   u64 FNV-1a hash of every preceding byte
//
// Writes go to a temporary file that is renamed into place.

#include "compvae/autodiff.hpp"

#include <json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace compvae::io {

static_assert(std::endian::native == std::endian::little, "archive format assumes a little-endian host");

inline constexpr char kMagic[8] = {'C', 'V', 'A', 'E', 'A', 'R', 'C', 'H'};
inline constexpr std::uint32_t kFormatVersion = 1;

class ArchiveError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class DType : std::uint8_t { f32 = 0, f64 = 1, i32 = 2, u8 = 3 };

inline std::size_t dtype_size(DType d) {
    switch (d) {
        case DType::f32: return 4;
        case DType::f64: return 8;
        case DType::i32: return 4;
        case DType::u8: return 1;
    }
    throw ArchiveError("unknown dtype");
}

inline std::string to_string(DType d) {
    switch (d) {
        case DType::f32: return "f32";
        case DType::f64: return "f64";
        case DType::i32: return "i32";
        case DType::u8: return "u8";
    }
    return "?";
}

template <class T>
constexpr DType dtype_of() {
    if constexpr (std::is_same_v<T, float>) return DType::f32;
    else if constexpr (std::is_same_v<T, double>) return DType::f64;
    else if constexpr (std::is_same_v<T, std::int32_t>) return DType::i32;
    else if constexpr (std::is_same_v<T, std::uint8_t>) return DType::u8;
    else static_assert(sizeof(T) == 0, "unsupported tensor element type");
}

struct Tensor {
    DType dtype = DType::f64;
    std::vector<std::uint64_t> shape;
    std::vector<unsigned char> bytes;

    std::uint64_t count() const {
        std::uint64_t n = 1;
        for (auto d : shape) n *= d;
        return n;
    }

    template <class T>
    static Tensor from(const T* data, std::vector<std::uint64_t> shape) {
        Tensor t;
        t.dtype = dtype_of<T>();
        t.shape = std::move(shape);
        t.bytes.resize(t.count() * sizeof(T));
        if (!t.bytes.empty()) std::memcpy(t.bytes.data(), data, t.bytes.size());
        return t;
    }

    template <class T>
    static Tensor from(const std::vector<T>& v) {
        return from(v.data(), {v.size()});
    }

    template <class S>
    static Tensor from_matrix(const Matrix<S>& m) {
        return from(m.data(), {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())});
    }

    /// Elements converted to T.
    template <class T>
    std::vector<T> values() const {
        const std::uint64_t n = count();
        std::vector<T> out(n);
        auto convert = [&](auto tag) {
            using Src = decltype(tag);
            std::vector<Src> src(n);
            if (n) std::memcpy(src.data(), bytes.data(), n * sizeof(Src));
            for (std::uint64_t i = 0; i < n; ++i) out[i] = static_cast<T>(src[i]);
        };
        switch (dtype) {
            case DType::f32: convert(float{}); break;
            case DType::f64: convert(double{}); break;
            case DType::i32: convert(std::int32_t{}); break;
            case DType::u8: convert(std::uint8_t{}); break;
        }
        return out;
    }

    /// Rank-2 (or rank-1, as one row) tensor as a matrix; exact when the dtype matches S.
    template <class S>
    Matrix<S> to_matrix() const {
        if (shape.size() > 2) throw ArchiveError("tensor of rank " + std::to_string(shape.size()) + " is not a matrix");
        const auto rows = shape.size() == 2 ? static_cast<Eigen::Index>(shape[0]) : 1;
        const auto cols = shape.empty() ? 1 : static_cast<Eigen::Index>(shape.back());
        const auto v = values<S>();
        Matrix<S> m(rows, cols);
        if (!v.empty()) std::memcpy(m.data(), v.data(), v.size() * sizeof(S));
        return m;
    }
};

struct Archive {
    nlohmann::json meta = nlohmann::json::object();
    std::map<std::string, Tensor> tensors;

    bool has(const std::string& name) const { return tensors.count(name) != 0; }

    const Tensor& get(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw ArchiveError("archive has no tensor named " + name);
        return it->second;
    }

    void put(const std::string& name, Tensor t) { tensors[name] = std::move(t); }
};

namespace detail {

class Fnv1a {
public:
    void update(const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            h_ ^= p[i];
            h_ *= 0x100000001b3ULL;
        }
    }
    std::uint64_t value() const { return h_; }

private:
    std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

class Writer {
public:
    explicit Writer(std::ofstream& os) : os_(os) {}
    void raw(const void* p, std::size_t n) {
        os_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
        hash_.update(p, n);
    }
    template <class T>
    void pod(T v) { raw(&v, sizeof v); }
    std::uint64_t hash() const { return hash_.value(); }

private:
    std::ofstream& os_;
    Fnv1a hash_;
};

class Reader {
public:
    Reader(std::ifstream& is, std::string path) : is_(is), path_(std::move(path)) {}
    void raw(void* p, std::size_t n) {
        is_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(is_.gcount()) != n) throw ArchiveError(path_ + ": truncated archive");
        hash_.update(p, n);
    }
    template <class T>
    T pod() {
        T v;
        raw(&v, sizeof v);
        return v;
    }
    std::uint64_t hash() const { return hash_.value(); }
    std::ifstream& stream() { return is_; }

private:
    std::ifstream& is_;
    std::string path_;
    Fnv1a hash_;
};

}  // namespace detail

inline void write_archive(const std::filesystem::path& path, const Archive& a) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw ArchiveError("cannot open " + tmp.string() + " for writing");
        detail::Writer w(os);
        w.raw(kMagic, sizeof kMagic);
        w.pod<std::uint32_t>(kFormatVersion);
        const std::string meta = a.meta.dump();
        w.pod<std::uint64_t>(meta.size());
        w.raw(meta.data(), meta.size());
        w.pod<std::uint32_t>(static_cast<std::uint32_t>(a.tensors.size()));
        for (const auto& [name, t] : a.tensors) {
            if (t.bytes.size() != t.count() * dtype_size(t.dtype))
                throw ArchiveError("tensor " + name + ": byte size does not match its shape");
            w.pod<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
            w.raw(name.data(), name.size());
            w.pod<std::uint8_t>(static_cast<std::uint8_t>(t.dtype));
            w.pod<std::uint32_t>(static_cast<std::uint32_t>(t.shape.size()));
            for (auto d : t.shape) w.pod<std::uint64_t>(d);
            w.raw(t.bytes.data(), t.bytes.size());
        }
        const std::uint64_t h = w.hash();
        os.write(reinterpret_cast<const char*>(&h), sizeof h);
        if (!os) throw ArchiveError("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline Archive read_archive(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ArchiveError("cannot open " + path.string());
    detail::Reader r(is, path.string());
    char magic[8];
    r.raw(magic, sizeof magic);
    if (std::memcmp(magic, kMagic, sizeof magic) != 0) throw ArchiveError(path.string() + ": not a compvae archive");
    const auto version = r.pod<std::uint32_t>();
    if (version != kFormatVersion)
        throw ArchiveError(path.string() + ": archive format version " + std::to_string(version) + ", expected " +
                           std::to_string(kFormatVersion));
    Archive a;
    const auto meta_size = r.pod<std::uint64_t>();
    if (meta_size > (1ULL << 30)) throw ArchiveError(path.string() + ": corrupted archive (meta size)");
    std::string meta(meta_size, '\0');
    r.raw(meta.data(), meta.size());
    const auto count = r.pod<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_size = r.pod<std::uint32_t>();
        if (name_size > 4096) throw ArchiveError(path.string() + ": corrupted archive (name size)");
        std::string name(name_size, '\0');
        r.raw(name.data(), name.size());
        Tensor t;
        const auto dt = r.pod<std::uint8_t>();
        if (dt > 3) throw ArchiveError(path.string() + ": corrupted archive (dtype)");
        t.dtype = static_cast<DType>(dt);
        const auto rank = r.pod<std::uint32_t>();
        if (rank > 8) throw ArchiveError(path.string() + ": corrupted archive (rank)");
        for (std::uint32_t k = 0; k < rank; ++k) t.shape.push_back(r.pod<std::uint64_t>());
        const std::uint64_t n = t.count() * dtype_size(t.dtype);
        if (n > (1ULL << 36)) throw ArchiveError(path.string() + ": corrupted archive (tensor size)");
        t.bytes.resize(n);
        r.raw(t.bytes.data(), t.bytes.size());
        a.tensors.emplace(std::move(name), std::move(t));
    }
    const std::uint64_t expected = r.hash();
    std::uint64_t stored = 0;
    is.read(reinterpret_cast<char*>(&stored), sizeof stored);
    if (is.gcount() != sizeof stored) throw ArchiveError(path.string() + ": truncated archive");
    if (stored != expected) throw ArchiveError(path.string() + ": corrupted archive (checksum mismatch)");
    try {
        a.meta = nlohmann::json::parse(meta);
    } catch (const nlohmann::json::exception& e) {
        throw ArchiveError(path.string() + ": corrupted archive (meta): " + e.what());
    }
    return a;
}

}  // namespace compvae::io
