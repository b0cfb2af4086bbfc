#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>

#include "melora/adapters.hpp"
#include "melora/errors.hpp"
#include "melora/io.hpp"

namespace melora {

// Binary adapter checkpoint, little-endian throughout:
//   magic "MELR"
//   u16 format version (currently 1)
//   u32 mode (0 = lora, 1 = melora), u32 n, u32 r_mini, u32 d_in, u32 d_out
//   f64 alpha, f64 dropout_p, u64 seed
//   for i in 0..n: A_i entries row-major as f64, then B_i entries row-major.

inline constexpr char kCheckpointMagic[4] = {'M', 'E', 'L', 'R'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
    AdapterKind kind = AdapterKind::lora;
    std::uint64_t seed = 0;
    std::variant<LoraAdapter, MeloraAdapter> adapter;
};

namespace detail {

inline void put_bytes(std::string& out, std::uint64_t v, std::size_t n_bytes) {
    for (std::size_t i = 0; i < n_bytes; ++i)
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u16(std::string& out, std::uint16_t v) { put_bytes(out, v, 2); }
inline void put_u32(std::string& out, std::uint32_t v) { put_bytes(out, v, 4); }
inline void put_u64(std::string& out, std::uint64_t v) { put_bytes(out, v, 8); }
inline void put_f64(std::string& out, double v) {
    put_bytes(out, std::bit_cast<std::uint64_t>(v), 8);
}

class ByteReader {
public:
    ByteReader(const std::string& bytes, std::string origin)
        : bytes_(bytes), origin_(std::move(origin)) {}

    std::uint64_t take(std::size_t n_bytes) {
        if (off_ + n_bytes > bytes_.size()) {
            throw FormatError(origin_ + ": unexpected end of file at offset " +
                              std::to_string(off_));
        }
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < n_bytes; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[off_ + i]))
                 << (8 * i);
        off_ += n_bytes;
        return v;
    }

    std::uint16_t take_u16() { return static_cast<std::uint16_t>(take(2)); }
    std::uint32_t take_u32() { return static_cast<std::uint32_t>(take(4)); }
    std::uint64_t take_u64() { return take(8); }
    double take_f64() { return std::bit_cast<double>(take(8)); }

    bool exhausted() const { return off_ == bytes_.size(); }
    std::size_t offset() const { return off_; }

private:
    const std::string& bytes_;
    std::string origin_;
    std::size_t off_ = 0;
};

inline std::string encode_checkpoint(AdapterKind kind, std::uint32_t n,
                                     std::uint32_t r_mini, std::uint32_t d_in,
                                     std::uint32_t d_out, double alpha,
                                     double dropout_p, std::uint64_t seed,
                                     const std::vector<LoraAdapter>& minis) {
    std::string out;
    out.append(kCheckpointMagic, 4);
    put_u16(out, kCheckpointVersion);
    put_u32(out, kind == AdapterKind::lora ? 0u : 1u);
    put_u32(out, n);
    put_u32(out, r_mini);
    put_u32(out, d_in);
    put_u32(out, d_out);
    put_f64(out, alpha);
    put_f64(out, dropout_p);
    put_u64(out, seed);
    for (const LoraAdapter& mini : minis) {
        for (double v : mini.a.values()) put_f64(out, v);
        for (double v : mini.b.values()) put_f64(out, v);
    }
    return out;
}

} // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const LoraAdapter& ad,
                            std::uint64_t seed) {
    write_file_atomic(path, detail::encode_checkpoint(
                                AdapterKind::lora, 1,
                                static_cast<std::uint32_t>(ad.rank),
                                static_cast<std::uint32_t>(ad.d_in()),
                                static_cast<std::uint32_t>(ad.d_out()), ad.alpha,
                                ad.dropout_p, seed, {ad}));
}

inline void save_checkpoint(const std::filesystem::path& path, const MeloraAdapter& ad,
                            std::uint64_t seed) {
    write_file_atomic(path, detail::encode_checkpoint(
                                AdapterKind::melora, static_cast<std::uint32_t>(ad.n),
                                static_cast<std::uint32_t>(ad.r_mini),
                                static_cast<std::uint32_t>(ad.d_in),
                                static_cast<std::uint32_t>(ad.d_out), ad.alpha,
                                ad.dropout_p, seed, ad.minis));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    const std::string bytes = read_file_bytes(path);
    const std::string origin = path.filename().string();
    detail::ByteReader r(bytes, origin);

    char magic[4];
    for (char& c : magic) c = static_cast<char>(r.take(1));
    if (std::string_view(magic, 4) != std::string_view(kCheckpointMagic, 4)) {
        throw FormatError(origin + ": bad magic, not an adapter checkpoint");
    }
    const std::uint16_t version = r.take_u16();
    if (version != kCheckpointVersion) {
        throw FormatError(origin + ": unsupported format version " +
                          std::to_string(version));
    }
    const std::uint32_t mode = r.take_u32();
    if (mode > 1) throw FormatError(origin + ": unknown mode " + std::to_string(mode));
    const std::uint32_t n = r.take_u32();
    const std::uint32_t r_mini = r.take_u32();
    const std::uint32_t d_in = r.take_u32();
    const std::uint32_t d_out = r.take_u32();
    const double alpha = r.take_f64();
    const double dropout_p = r.take_f64();
    const std::uint64_t seed = r.take_u64();

    if (n == 0 || r_mini == 0 || d_in % n != 0 || d_out % n != 0 ||
        r_mini > std::min(d_in / n, d_out / n)) {
        throw FormatError(origin + ": inconsistent header (n=" + std::to_string(n) +
                          ", r=" + std::to_string(r_mini) + ", d_in=" +
                          std::to_string(d_in) + ", d_out=" + std::to_string(d_out) + ")");
    }
    if (mode == 0 && n != 1) {
        throw FormatError(origin + ": lora checkpoint must have n=1, got n=" +
                          std::to_string(n));
    }

    const std::size_t bin = d_in / n;
    const std::size_t bout = d_out / n;
    std::vector<LoraAdapter> minis;
    minis.reserve(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        LoraAdapter mini;
        mini.a = Matrix(r_mini, bin);
        mini.b = Matrix(bout, r_mini);
        mini.rank = r_mini;
        mini.alpha = alpha;
        mini.dropout_p = dropout_p;
        for (double& v : mini.a.values()) v = r.take_f64();
        for (double& v : mini.b.values()) v = r.take_f64();
        minis.push_back(std::move(mini));
    }
    if (!r.exhausted()) {
        throw FormatError(origin + ": trailing bytes after entry data (offset " +
                          std::to_string(r.offset()) + " of " +
                          std::to_string(bytes.size()) + ")");
    }

    Checkpoint ck;
    ck.seed = seed;
    if (mode == 0) {
        ck.kind = AdapterKind::lora;
        ck.adapter = std::move(minis.front());
    } else {
        ck.kind = AdapterKind::melora;
        MeloraAdapter ad;
        ad.minis = std::move(minis);
        ad.n = n;
        ad.r_mini = r_mini;
        ad.d_in = d_in;
        ad.d_out = d_out;
        ad.alpha = alpha;
        ad.dropout_p = dropout_p;
        ck.adapter = std::move(ad);
    }
    return ck;
}

} // namespace melora
