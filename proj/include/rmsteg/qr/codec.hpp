#pragma once

// QR Code model 2 encoder/decoder restricted to versions 5-8 at ECC level H.
// Encoding always uses mask pattern 0 ((row + col) % 2 == 0) so output is a pure
// function of (message, version). The decoder accepts any of the eight masks.

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rmsteg/error.hpp"
#include "rmsteg/qr/module_matrix.hpp"
#include "rmsteg/qr/reed_solomon.hpp"

namespace rmsteg::qr {

inline constexpr std::string_view kAlphanumericCharset = "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ $%*+-./:";
inline constexpr int kFixedMask = 0;

enum class Mode { Numeric, Alphanumeric, Byte };

namespace detail {

struct BlockLayout {
    int ecc_per_block;
    int num_blocks;
};

// ECC level H rows of the standard's error-correction table.
inline BlockLayout layout_h(int version) {
    static constexpr std::array<BlockLayout, 4> kTable{{{22, 4}, {28, 4}, {26, 5}, {26, 6}}};
    check_version(version);
    return kTable[static_cast<std::size_t>(version - kMinVersion)];
}

inline std::vector<int> alignment_positions(int version) {
    switch (version) {
        case 5: return {6, 30};
        case 6: return {6, 34};
        case 7: return {6, 22, 38};
        case 8: return {6, 24, 42};
        default: throw UnsupportedVersion(std::to_string(version));
    }
}

inline int raw_data_modules(int version) {
    int result = (16 * version + 128) * version + 64;
    const int num_align = version / 7 + 2;
    result -= (25 * num_align - 10) * num_align - 55;
    if (version >= 7) result -= 36;
    return result;
}

inline int data_codewords(int version) {
    const auto [ecc, blocks] = layout_h(version);
    return raw_data_modules(version) / 8 - ecc * blocks;
}

// Format bits for ECC level H (indicator 0b10) and the given mask, BCH-protected and masked.
inline int format_bits(int ecc_indicator, int mask) {
    const int data = ecc_indicator << 3 | mask;
    int rem = data;
    for (int i = 0; i < 10; ++i) rem = (rem << 1) ^ ((rem >> 9) * 0x537);
    return (data << 10 | rem) ^ 0x5412;
}

inline constexpr int kEccIndicatorH = 2;

inline int version_bits(int version) {
    int rem = version;
    for (int i = 0; i < 12; ++i) rem = (rem << 1) ^ ((rem >> 11) * 0x1F25);
    return version << 12 | rem;
}

inline bool mask_applies(int mask, int row, int col) {
    switch (mask) {
        case 0: return (row + col) % 2 == 0;
        case 1: return row % 2 == 0;
        case 2: return col % 3 == 0;
        case 3: return (row + col) % 3 == 0;
        case 4: return (row / 2 + col / 3) % 2 == 0;
        case 5: return row * col % 2 + row * col % 3 == 0;
        case 6: return (row * col % 2 + row * col % 3) % 2 == 0;
        case 7: return ((row + col) % 2 + row * col % 3) % 2 == 0;
        default: return false;
    }
}

// Dark/light grid plus the function-pattern mask, shared by encoder and decoder.
struct Canvas {
    int version;
    int n;
    std::vector<std::uint8_t> dark;
    std::vector<std::uint8_t> function;

    explicit Canvas(int v)
        : version(v), n(side_for_version(v)),
          dark(static_cast<std::size_t>(n * n), 0), function(static_cast<std::size_t>(n * n), 0) {}

    std::size_t idx(int row, int col) const { return static_cast<std::size_t>(row * n + col); }

    void set_function(int row, int col, bool is_dark) {
        dark[idx(row, col)] = is_dark ? 1 : 0;
        function[idx(row, col)] = 1;
    }

    void draw_finder(int cr, int cc) {
        for (int dr = -4; dr <= 4; ++dr) {
            for (int dc = -4; dc <= 4; ++dc) {
                const int r = cr + dr;
                const int c = cc + dc;
                if (r < 0 || r >= n || c < 0 || c >= n) continue;
                const int dist = std::max(std::abs(dr), std::abs(dc));
                set_function(r, c, dist != 2 && dist != 4);
            }
        }
    }

    void draw_alignment(int cr, int cc) {
        for (int dr = -2; dr <= 2; ++dr) {
            for (int dc = -2; dc <= 2; ++dc) {
                set_function(cr + dr, cc + dc, std::max(std::abs(dr), std::abs(dc)) != 1);
            }
        }
    }

    void draw_format(int bits) {
        auto bit = [bits](int i) { return ((bits >> i) & 1) != 0; };
        for (int i = 0; i <= 5; ++i) set_function(i, 8, bit(i));
        set_function(7, 8, bit(6));
        set_function(8, 8, bit(7));
        set_function(8, 7, bit(8));
        for (int i = 9; i < 15; ++i) set_function(8, 14 - i, bit(i));
        for (int i = 0; i < 8; ++i) set_function(8, n - 1 - i, bit(i));
        for (int i = 8; i < 15; ++i) set_function(n - 15 + i, 8, bit(i));
        set_function(n - 8, 8, true);
    }

    void draw_version() {
        if (version < 7) return;
        const int bits = version_bits(version);
        for (int i = 0; i < 18; ++i) {
            const bool b = ((bits >> i) & 1) != 0;
            const int a = n - 11 + i % 3;
            const int c = i / 3;
            set_function(c, a, b);
            set_function(a, c, b);
        }
    }

    void draw_function_patterns() {
        for (int i = 0; i < n; ++i) {
            set_function(6, i, i % 2 == 0);
            set_function(i, 6, i % 2 == 0);
        }
        draw_finder(3, 3);
        draw_finder(3, n - 4);
        draw_finder(n - 4, 3);
        const auto pos = alignment_positions(version);
        const std::size_t last = pos.size() - 1;
        for (std::size_t i = 0; i < pos.size(); ++i) {
            for (std::size_t j = 0; j < pos.size(); ++j) {
                if ((i == 0 && j == 0) || (i == 0 && j == last) || (i == last && j == 0)) continue;
                draw_alignment(pos[i], pos[j]);
            }
        }
        draw_format(0);
        draw_version();
    }

    // Visits data module positions in the standard zigzag order.
    template <typename Fn>
    void for_each_data_module(Fn&& fn) const {
        for (int right = n - 1; right >= 1; right -= 2) {
            if (right == 6) right = 5;
            const bool upward = ((right + 1) & 2) == 0;
            for (int vert = 0; vert < n; ++vert) {
                const int row = upward ? n - 1 - vert : vert;
                for (int j = 0; j < 2; ++j) {
                    const int col = right - j;
                    if (!function[idx(row, col)]) fn(row, col);
                }
            }
        }
    }
};

class BitWriter {
public:
    void put(std::uint32_t value, int count) {
        for (int i = count - 1; i >= 0; --i) bits_.push_back(static_cast<std::uint8_t>((value >> i) & 1U));
    }
    std::size_t size() const { return bits_.size(); }
    const std::vector<std::uint8_t>& bits() const { return bits_; }

private:
    std::vector<std::uint8_t> bits_;
};

class BitReader {
public:
    explicit BitReader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

    std::size_t remaining() const { return bytes_.size() * 8 - pos_; }

    std::optional<std::uint32_t> get(int count) {
        if (remaining() < static_cast<std::size_t>(count)) return std::nullopt;
        std::uint32_t v = 0;
        for (int i = 0; i < count; ++i, ++pos_) {
            v = v << 1 | ((bytes_[pos_ >> 3] >> (7 - (pos_ & 7))) & 1U);
        }
        return v;
    }

private:
    const std::vector<std::uint8_t>& bytes_;
    std::size_t pos_ = 0;
};

inline int alnum_value(char ch) {
    const auto p = kAlphanumericCharset.find(ch);
    return p == std::string_view::npos ? -1 : static_cast<int>(p);
}

// Character-count field widths for versions 1-9.
inline int count_bits(Mode mode) {
    switch (mode) {
        case Mode::Numeric: return 10;
        case Mode::Alphanumeric: return 9;
        case Mode::Byte: return 8;
    }
    return 8;
}

inline int segment_bits(Mode mode, std::size_t length) {
    const int len = static_cast<int>(length);
    switch (mode) {
        case Mode::Numeric: return 4 + 10 + len / 3 * 10 + (len % 3 == 2 ? 7 : len % 3 == 1 ? 4 : 0);
        case Mode::Alphanumeric: return 4 + 9 + len / 2 * 11 + (len % 2) * 6;
        case Mode::Byte: return 4 + 8 + len * 8;
    }
    return 0;
}

inline std::vector<std::uint8_t> interleave(const std::vector<std::uint8_t>& data, int version) {
    const auto [ecc_len, num_blocks] = layout_h(version);
    const int raw = raw_data_modules(version) / 8;
    const int num_short = num_blocks - raw % num_blocks;
    const int short_len = raw / num_blocks;
    std::vector<std::vector<std::uint8_t>> blocks;
    std::size_t k = 0;
    for (int i = 0; i < num_blocks; ++i) {
        const std::size_t dlen = static_cast<std::size_t>(short_len - ecc_len + (i < num_short ? 0 : 1));
        std::vector<std::uint8_t> block(data.begin() + static_cast<std::ptrdiff_t>(k),
                                        data.begin() + static_cast<std::ptrdiff_t>(k + dlen));
        k += dlen;
        const auto ecc = rs_encode(block, ecc_len);
        if (i < num_short) block.push_back(0);
        block.insert(block.end(), ecc.begin(), ecc.end());
        blocks.push_back(std::move(block));
    }
    std::vector<std::uint8_t> out;
    for (std::size_t i = 0; i < blocks[0].size(); ++i) {
        for (std::size_t j = 0; j < blocks.size(); ++j) {
            if (i == static_cast<std::size_t>(short_len - ecc_len) && static_cast<int>(j) < num_short) continue;
            out.push_back(blocks[j][i]);
        }
    }
    return out;
}

}  // namespace detail

// Most compact single mode able to carry the message.
inline Mode select_mode(std::string_view message) {
    if (std::all_of(message.begin(), message.end(), [](char c) { return c >= '0' && c <= '9'; })) {
        return Mode::Numeric;
    }
    if (std::all_of(message.begin(), message.end(), [](char c) { return detail::alnum_value(c) >= 0; })) {
        return Mode::Alphanumeric;
    }
    return Mode::Byte;
}

// Payload capacity in data-codeword bits (368 for version 5).
inline int capacity_bits(int version) { return detail::data_codewords(version) * 8; }

// Largest message of the given mode that fits the version.
inline int max_chars(int version, Mode mode) {
    int len = 0;
    while (detail::segment_bits(mode, static_cast<std::size_t>(len + 1)) <= capacity_bits(version)) ++len;
    return len;
}

inline ModuleMatrix encode_message(std::string_view message, int version) {
    check_version(version);
    const Mode mode = select_mode(message);
    const int capacity = capacity_bits(version);
    if (!message.empty() && detail::segment_bits(mode, message.size()) > capacity) {
        throw CapacityExceeded(std::to_string(message.size()) + "-character message exceeds version " +
                               std::to_string(version) + "-H capacity (" + std::to_string(max_chars(version, mode)) +
                               " characters in this mode)");
    }

    detail::BitWriter bw;
    if (!message.empty()) {
        switch (mode) {
            case Mode::Numeric: {
                bw.put(0x1, 4);
                bw.put(static_cast<std::uint32_t>(message.size()), detail::count_bits(mode));
                for (std::size_t i = 0; i < message.size(); i += 3) {
                    const std::size_t take = std::min<std::size_t>(3, message.size() - i);
                    const auto chunk = std::stoul(std::string(message.substr(i, take)));
                    bw.put(static_cast<std::uint32_t>(chunk), static_cast<int>(take * 3 + 1));
                }
                break;
            }
            case Mode::Alphanumeric: {
                bw.put(0x2, 4);
                bw.put(static_cast<std::uint32_t>(message.size()), detail::count_bits(mode));
                std::size_t i = 0;
                for (; i + 1 < message.size(); i += 2) {
                    const int v = detail::alnum_value(message[i]) * 45 + detail::alnum_value(message[i + 1]);
                    bw.put(static_cast<std::uint32_t>(v), 11);
                }
                if (i < message.size()) bw.put(static_cast<std::uint32_t>(detail::alnum_value(message[i])), 6);
                break;
            }
            case Mode::Byte: {
                bw.put(0x4, 4);
                bw.put(static_cast<std::uint32_t>(message.size()), detail::count_bits(mode));
                for (char c : message) bw.put(static_cast<std::uint8_t>(c), 8);
                break;
            }
        }
    }
    bw.put(0, std::min<int>(4, capacity - static_cast<int>(bw.size())));
    bw.put(0, static_cast<int>((8 - bw.size() % 8) % 8));
    for (std::uint32_t pad = 0xEC; static_cast<int>(bw.size()) < capacity; pad ^= 0xEC ^ 0x11) bw.put(pad, 8);

    std::vector<std::uint8_t> data(static_cast<std::size_t>(capacity / 8), 0);
    for (std::size_t i = 0; i < bw.size(); ++i) data[i >> 3] |= static_cast<std::uint8_t>(bw.bits()[i] << (7 - (i & 7)));
    const auto codewords = detail::interleave(data, version);

    detail::Canvas canvas(version);
    canvas.draw_function_patterns();
    std::size_t bit = 0;
    canvas.for_each_data_module([&](int row, int col) {
        bool dark = false;
        if (bit < codewords.size() * 8) dark = ((codewords[bit >> 3] >> (7 - (bit & 7))) & 1) != 0;
        ++bit;
        if (detail::mask_applies(kFixedMask, row, col)) dark = !dark;
        canvas.dark[canvas.idx(row, col)] = dark ? 1 : 0;
    });
    canvas.draw_format(detail::format_bits(detail::kEccIndicatorH, kFixedMask));

    ModuleMatrix mm(version);
    for (std::size_t i = 0; i < mm.modules.size(); ++i) mm.modules[i] = canvas.dark[i] ? 0 : 1;
    return mm;
}

namespace detail {

// A finder pattern counts as located when at most a quarter of its 7x7 modules disagree
// with the template.
inline bool finder_intact(const ModuleMatrix& mm, int top, int left) {
    int mismatches = 0;
    for (int dr = 0; dr < 7; ++dr) {
        for (int dc = 0; dc < 7; ++dc) {
            const int dist = std::max(std::abs(dr - 3), std::abs(dc - 3));
            const bool expect_dark = dist != 2;
            if (mm.dark(top + dr, left + dc) != expect_dark) ++mismatches;
        }
    }
    return mismatches * 4 <= 49;
}

inline std::optional<int> read_format(const ModuleMatrix& mm) {
    const int n = mm.n;
    int copy1 = 0;
    int copy2 = 0;
    auto bit = [&](int row, int col) { return mm.dark(row, col) ? 1 : 0; };
    for (int i = 0; i <= 5; ++i) copy1 |= bit(i, 8) << i;
    copy1 |= bit(7, 8) << 6;
    copy1 |= bit(8, 8) << 7;
    copy1 |= bit(8, 7) << 8;
    for (int i = 9; i < 15; ++i) copy1 |= bit(8, 14 - i) << i;
    for (int i = 0; i < 8; ++i) copy2 |= bit(8, n - 1 - i) << i;
    for (int i = 8; i < 15; ++i) copy2 |= bit(n - 15 + i, 8) << i;

    int best = -1;
    int best_dist = 99;
    for (int ecc = 0; ecc < 4; ++ecc) {
        for (int mask = 0; mask < 8; ++mask) {
            const int code = format_bits(ecc, mask);
            const int dist = std::min(__builtin_popcount(static_cast<unsigned>(code ^ copy1)),
                                      __builtin_popcount(static_cast<unsigned>(code ^ copy2)));
            if (dist < best_dist) {
                best_dist = dist;
                best = ecc << 3 | mask;
            }
        }
    }
    if (best_dist > 3) return std::nullopt;
    return best;
}

inline std::optional<std::string> parse_segments(const std::vector<std::uint8_t>& data) {
    BitReader br(data);
    std::string out;
    while (br.remaining() >= 4) {
        const auto mode = br.get(4);
        if (*mode == 0) break;
        if (*mode == 0x1) {
            auto count = br.get(10);
            if (!count) return std::nullopt;
            std::uint32_t left = *count;
            while (left > 0) {
                const std::uint32_t take = std::min<std::uint32_t>(3, left);
                const auto v = br.get(static_cast<int>(take * 3 + 1));
                if (!v || *v >= (take == 3 ? 1000U : take == 2 ? 100U : 10U)) return std::nullopt;
                std::string digits = std::to_string(*v);
                out += std::string(take - digits.size(), '0') + digits;
                left -= take;
            }
        } else if (*mode == 0x2) {
            auto count = br.get(9);
            if (!count) return std::nullopt;
            std::uint32_t left = *count;
            while (left >= 2) {
                const auto v = br.get(11);
                if (!v || *v >= 45 * 45) return std::nullopt;
                out.push_back(kAlphanumericCharset[*v / 45]);
                out.push_back(kAlphanumericCharset[*v % 45]);
                left -= 2;
            }
            if (left == 1) {
                const auto v = br.get(6);
                if (!v || *v >= 45) return std::nullopt;
                out.push_back(kAlphanumericCharset[*v]);
            }
        } else if (*mode == 0x4) {
            auto count = br.get(8);
            if (!count) return std::nullopt;
            for (std::uint32_t i = 0; i < *count; ++i) {
                const auto v = br.get(8);
                if (!v) return std::nullopt;
                out.push_back(static_cast<char>(*v));
            }
        } else {
            return std::nullopt;
        }
    }
    return out;
}

}  // namespace detail

// Recovers the message carried by a module matrix. Returns nullopt when the symbol
// cannot be located, the format information is unreadable, or Reed-Solomon correction
// fails. Never throws.
inline std::optional<std::string> decode_matrix(const ModuleMatrix& mm) noexcept {
    try {
        int version = -1;
        for (int v = kMinVersion; v <= kMaxVersion; ++v) {
            if (side_for_version(v) == mm.n) version = v;
        }
        if (version < 0 || mm.modules.size() != static_cast<std::size_t>(mm.n * mm.n)) return std::nullopt;
        const int n = mm.n;
        if (!detail::finder_intact(mm, 0, 0) || !detail::finder_intact(mm, 0, n - 7) ||
            !detail::finder_intact(mm, n - 7, 0)) {
            return std::nullopt;
        }
        const auto format = detail::read_format(mm);
        if (!format || (*format >> 3) != detail::kEccIndicatorH) return std::nullopt;
        const int mask = *format & 7;

        detail::Canvas canvas(version);
        canvas.draw_function_patterns();
        const int raw = detail::raw_data_modules(version) / 8;
        std::vector<std::uint8_t> codewords(static_cast<std::size_t>(raw), 0);
        std::size_t bit = 0;
        canvas.for_each_data_module([&](int row, int col) {
            if (bit < codewords.size() * 8) {
                bool dark = mm.dark(row, col);
                if (detail::mask_applies(mask, row, col)) dark = !dark;
                if (dark) codewords[bit >> 3] |= static_cast<std::uint8_t>(1U << (7 - (bit & 7)));
            }
            ++bit;
        });

        const auto [ecc_len, num_blocks] = detail::layout_h(version);
        const int num_short = num_blocks - raw % num_blocks;
        const int short_len = raw / num_blocks;
        std::vector<std::vector<std::uint8_t>> blocks(static_cast<std::size_t>(num_blocks));
        std::size_t k = 0;
        for (int i = 0; i <= short_len; ++i) {
            for (int j = 0; j < num_blocks; ++j) {
                if (i == short_len - ecc_len && j < num_short) continue;
                blocks[static_cast<std::size_t>(j)].push_back(codewords[k++]);
            }
        }
        std::vector<std::uint8_t> data;
        for (auto& block : blocks) {
            if (!rs_correct(block, ecc_len)) return std::nullopt;
            data.insert(data.end(), block.begin(), block.end() - ecc_len);
        }
        return detail::parse_segments(data);
    } catch (...) {
        return std::nullopt;
    }
}

}  // namespace rmsteg::qr
