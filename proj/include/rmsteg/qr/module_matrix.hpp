#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "rmsteg/error.hpp"

namespace rmsteg::qr {

inline constexpr int kMinVersion = 5;
inline constexpr int kMaxVersion = 8;

constexpr int side_for_version(int version) { return 17 + 4 * version; }

inline void check_version(int version) {
    if (version < kMinVersion || version > kMaxVersion) {
        throw UnsupportedVersion("version " + std::to_string(version) + " outside [5, 8]");
    }
}

// n x n grid of QR modules, 0 = black (dark), 1 = white (light). ECC level is always H.
struct ModuleMatrix {
    int version = kMinVersion;
    int n = side_for_version(kMinVersion);
    std::vector<std::uint8_t> modules;

    ModuleMatrix() : modules(static_cast<std::size_t>(n * n), 1) {}

    explicit ModuleMatrix(int v, std::uint8_t fill = 1) : version(v), n(side_for_version(v)) {
        check_version(v);
        modules.assign(static_cast<std::size_t>(n * n), fill);
    }

    std::uint8_t at(int row, int col) const { return modules[static_cast<std::size_t>(row * n + col)]; }
    std::uint8_t& at(int row, int col) { return modules[static_cast<std::size_t>(row * n + col)]; }

    bool dark(int row, int col) const { return at(row, col) == 0; }

    bool operator==(const ModuleMatrix&) const = default;
};

// Text grid: header "QRv<version> ECC-H n=<n>" then n rows of '0'/'1'.
inline std::string to_text(const ModuleMatrix& mm) {
    std::string out = "QRv" + std::to_string(mm.version) + " ECC-H n=" + std::to_string(mm.n) + "\n";
    out.reserve(out.size() + static_cast<std::size_t>(mm.n * (mm.n + 1)));
    for (int r = 0; r < mm.n; ++r) {
        for (int c = 0; c < mm.n; ++c) out.push_back(mm.at(r, c) ? '1' : '0');
        out.push_back('\n');
    }
    return out;
}

inline ModuleMatrix from_text(const std::string& text) {
    std::istringstream in(text);
    std::string header;
    if (!std::getline(in, header)) throw FormatError("empty module grid");
    int version = 0;
    int n = 0;
    char ecc = 0;
    if (std::sscanf(header.c_str(), "QRv%d ECC-%c n=%d", &version, &ecc, &n) != 3 || ecc != 'H') {
        throw FormatError("bad module grid header: " + header);
    }
    if (version < kMinVersion || version > kMaxVersion || n != side_for_version(version)) {
        throw FormatError("inconsistent version/size in header: " + header);
    }
    ModuleMatrix mm(version);
    std::string row;
    for (int r = 0; r < n; ++r) {
        if (!std::getline(in, row)) throw FormatError("module grid truncated at row " + std::to_string(r));
        if (!row.empty() && row.back() == '\r') row.pop_back();
        if (static_cast<int>(row.size()) != n) throw FormatError("row " + std::to_string(r) + " has wrong length");
        for (int c = 0; c < n; ++c) {
            if (row[static_cast<std::size_t>(c)] != '0' && row[static_cast<std::size_t>(c)] != '1') {
                throw FormatError("non-binary character in row " + std::to_string(r));
            }
            mm.at(r, c) = row[static_cast<std::size_t>(c)] == '1' ? 1 : 0;
        }
    }
    return mm;
}

inline void save_text(const ModuleMatrix& mm, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open " + path + " for writing");
    out << to_text(mm);
}

inline ModuleMatrix load_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return from_text(buf.str());
}

}  // namespace rmsteg::qr
