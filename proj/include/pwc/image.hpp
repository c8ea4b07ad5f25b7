#pragma once

// Image container plus the two on-disk formats: binary PPM (P6) for
// eyeballing and PWIM, a flat float32 little-endian tensor with a 16-byte
// header. PWIM layout:
//   bytes 0..3   magic "PWIM"
//   byte  4      version (1)
//   byte  5      flags (bit 0: 8-byte grid-metadata extension follows)
//   bytes 6..7   u16 channel count
//   bytes 8..11  u32 height
//   bytes 12..15 u32 width
//   [flags&1]    u16 tgt_h, tgt_w, src_h, src_w
//   payload      c*h*w float32, [channel][row][col]

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>

#include "pwc/common.hpp"
#include "pwc/tensor.hpp"

namespace pwc {

// [c, h, w], values nominally in [0, 1]
using Image = Tensor<float>;

inline int img_channels(const Image& im) { return im.shape[0]; }
inline int img_height(const Image& im) { return im.shape[1]; }
inline int img_width(const Image& im) { return im.shape[2]; }

// Bilinear sample of one channel at real coordinates; contributions outside
// the image are dropped (zero fill).
template <typename T>
double bilinear_at(const Tensor<T>& im, int ch, double x, double y) {
    int h = im.shape[1], w = im.shape[2];
    int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
    double fx = x - x0, fy = y - y0;
    double acc = 0.0;
    for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
            double wgt = (dx ? fx : 1.0 - fx) * (dy ? fy : 1.0 - fy);
            if (wgt == 0.0) continue;
            int xi = x0 + dx, yi = y0 + dy;
            if (xi < 0 || xi >= w || yi < 0 || yi >= h) continue;
            acc += wgt * static_cast<double>(im.at(ch, yi, xi));
        }
    return acc;
}

// ---- PPM (P6, 8-bit) -------------------------------------------------------

inline void write_ppm(const std::string& path, const Image& im) {
    if (im.shape[0] != 3) throw std::invalid_argument("write_ppm: need 3 channels");
    int h = im.shape[1], w = im.shape[2];
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path);
    os << "P6\n" << w << " " << h << "\n255\n";
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                float v = std::clamp(im.at(c, y, x), 0.0f, 1.0f);
                os.put(static_cast<char>(static_cast<int>(v * 255.0f + 0.5f)));
            }
    if (!os) throw std::runtime_error("write failed for " + path);
}

inline Image read_ppm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    std::string magic;
    is >> magic;
    if (magic != "P6") throw std::runtime_error(path + ": not a P6 ppm");
    auto next_int = [&] {
        // skip whitespace and '#' comments
        int c = is.get();
        while (c == '#' || std::isspace(c)) {
            if (c == '#')
                while (c != '\n' && c != EOF) c = is.get();
            c = is.get();
        }
        is.unget();
        long v;
        is >> v;
        return v;
    };
    long w = next_int(), h = next_int(), maxv = next_int();
    if (w <= 0 || h <= 0 || maxv != 255) throw std::runtime_error(path + ": unsupported ppm");
    is.get();  // single whitespace after maxval
    Image im({3, static_cast<int>(h), static_cast<int>(w)});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                int b = is.get();
                if (b < 0) throw std::runtime_error(path + ": truncated ppm");
                im.at(c, y, x) = static_cast<float>(b) / 255.0f;
            }
    return im;
}

// ---- PWIM ------------------------------------------------------------------

struct GridMeta {
    std::uint16_t tgt_h = 0, tgt_w = 0, src_h = 0, src_w = 0;
    bool operator==(const GridMeta&) const = default;
};

inline void write_pwim(const std::string& path, const Tensor<float>& t,
                       const std::optional<GridMeta>& meta = std::nullopt) {
    if (t.rank() != 3) throw std::invalid_argument("write_pwim: rank must be 3");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path);
    os.write("PWIM", 4);
    put_u8(os, 1);
    put_u8(os, meta ? 1 : 0);
    put_u16(os, static_cast<std::uint16_t>(t.shape[0]));
    put_u32(os, static_cast<std::uint32_t>(t.shape[1]));
    put_u32(os, static_cast<std::uint32_t>(t.shape[2]));
    if (meta) {
        put_u16(os, meta->tgt_h);
        put_u16(os, meta->tgt_w);
        put_u16(os, meta->src_h);
        put_u16(os, meta->src_w);
    }
    for (float v : t.data) put_f32(os, v);
    if (!os) throw std::runtime_error("write failed for " + path);
}

inline Tensor<float> read_pwim(const std::string& path, GridMeta* meta_out = nullptr) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (is.gcount() != 4 || std::string(magic, 4) != "PWIM")
        throw std::runtime_error(path + ": bad magic");
    if (get_u8(is) != 1) throw std::runtime_error(path + ": unsupported version");
    std::uint8_t flags = get_u8(is);
    int c = get_u16(is);
    int h = static_cast<int>(get_u32(is));
    int w = static_cast<int>(get_u32(is));
    if (c <= 0 || h <= 0 || w <= 0) throw std::runtime_error(path + ": bad dims");
    if (flags & 1) {
        GridMeta m;
        m.tgt_h = get_u16(is);
        m.tgt_w = get_u16(is);
        m.src_h = get_u16(is);
        m.src_w = get_u16(is);
        if (meta_out) *meta_out = m;
    } else if (meta_out) {
        *meta_out = GridMeta{};
    }
    Tensor<float> t({c, h, w});
    for (auto& v : t.data) v = get_f32(is);
    if (!is) throw std::runtime_error(path + ": truncated payload");
    return t;
}

// ---- appearance jitter -----------------------------------------------------

// Brightness gain in [0.8, 1.2], contrast gain in [0.8, 1.2], additive
// gaussian noise sigma 0.02, clamped back to [0, 1].
inline void apply_jitter(Image& im, Rng& rng) {
    double brightness = rng.uniform(0.8, 1.2);
    double contrast = rng.uniform(0.8, 1.2);
    for (auto& v : im.data) {
        double x = (static_cast<double>(v) - 0.5) * contrast + 0.5;
        x = x * brightness + rng.normal(0.0, 0.02);
        v = static_cast<float>(std::clamp(x, 0.0, 1.0));
    }
}
}  // namespace pwc
