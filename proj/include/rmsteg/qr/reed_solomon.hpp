#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace rmsteg::qr {

// Arithmetic in GF(2^8) with the QR reducing polynomial x^8 + x^4 + x^3 + x^2 + 1.
class GF256 {
public:
    static const GF256& instance() {
        static const GF256 field;
        return field;
    }

    std::uint8_t exp(int power) const { return exp_[static_cast<std::size_t>(((power % 255) + 255) % 255)]; }
    int log(std::uint8_t value) const { return log_[value]; }

    std::uint8_t mul(std::uint8_t a, std::uint8_t b) const {
        if (a == 0 || b == 0) return 0;
        return exp_[static_cast<std::size_t>((log_[a] + log_[b]) % 255)];
    }

    std::uint8_t div(std::uint8_t a, std::uint8_t b) const {
        if (a == 0) return 0;
        return exp_[static_cast<std::size_t>((log_[a] - log_[b] + 255) % 255)];
    }

    std::uint8_t inv(std::uint8_t a) const { return exp_[static_cast<std::size_t>((255 - log_[a]) % 255)]; }

private:
    GF256() {
        int x = 1;
        for (int i = 0; i < 255; ++i) {
            exp_[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(x);
            log_[static_cast<std::size_t>(x)] = i;
            x <<= 1;
            if (x & 0x100) x ^= 0x11D;
        }
        log_[0] = -1;
    }

    std::array<std::uint8_t, 255> exp_{};
    std::array<int, 256> log_{};
};

// Generator with roots alpha^0 .. alpha^(degree-1); coefficients highest degree first,
// leading 1 omitted.
inline std::vector<std::uint8_t> rs_generator(int degree) {
    const auto& gf = GF256::instance();
    std::vector<std::uint8_t> poly(static_cast<std::size_t>(degree), 0);
    poly.back() = 1;
    std::uint8_t root = 1;
    for (int i = 0; i < degree; ++i) {
        for (std::size_t j = 0; j < poly.size(); ++j) {
            poly[j] = gf.mul(poly[j], root);
            if (j + 1 < poly.size()) poly[j] ^= poly[j + 1];
        }
        root = gf.mul(root, 2);
    }
    return poly;
}

inline std::vector<std::uint8_t> rs_encode(std::span<const std::uint8_t> data, int ecc_len) {
    const auto& gf = GF256::instance();
    const auto gen = rs_generator(ecc_len);
    std::vector<std::uint8_t> rem(static_cast<std::size_t>(ecc_len), 0);
    for (std::uint8_t b : data) {
        const std::uint8_t factor = b ^ rem.front();
        rem.erase(rem.begin());
        rem.push_back(0);
        for (std::size_t i = 0; i < rem.size(); ++i) rem[i] ^= gf.mul(gen[i], factor);
    }
    return rem;
}

// Corrects a full codeword (data followed by ecc) in place. Returns the number of
// corrected symbols, or nullopt when the error pattern exceeds the correction radius.
inline std::optional<int> rs_correct(std::span<std::uint8_t> codeword, int ecc_len) {
    const auto& gf = GF256::instance();
    const int total = static_cast<int>(codeword.size());

    auto syndromes = [&] {
        std::vector<std::uint8_t> s(static_cast<std::size_t>(ecc_len), 0);
        bool all_zero = true;
        for (int j = 0; j < ecc_len; ++j) {
            const std::uint8_t x = gf.exp(j);
            std::uint8_t acc = 0;
            for (std::uint8_t c : codeword) acc = gf.mul(acc, x) ^ c;
            s[static_cast<std::size_t>(j)] = acc;
            all_zero = all_zero && acc == 0;
        }
        return std::make_pair(s, all_zero);
    };

    auto [synd, clean] = syndromes();
    if (clean) return 0;

    // Berlekamp-Massey; polynomials stored lowest degree first.
    std::vector<std::uint8_t> lambda{1};
    std::vector<std::uint8_t> prev{1};
    int errors = 0;
    int shift = 1;
    std::uint8_t prev_disc = 1;
    for (int r = 0; r < ecc_len; ++r) {
        std::uint8_t disc = synd[static_cast<std::size_t>(r)];
        for (int i = 1; i <= errors && i < static_cast<int>(lambda.size()); ++i) {
            disc ^= gf.mul(lambda[static_cast<std::size_t>(i)], synd[static_cast<std::size_t>(r - i)]);
        }
        if (disc == 0) {
            ++shift;
            continue;
        }
        const std::uint8_t coef = gf.div(disc, prev_disc);
        std::vector<std::uint8_t> next = lambda;
        if (next.size() < prev.size() + static_cast<std::size_t>(shift)) {
            next.resize(prev.size() + static_cast<std::size_t>(shift), 0);
        }
        for (std::size_t i = 0; i < prev.size(); ++i) {
            next[i + static_cast<std::size_t>(shift)] ^= gf.mul(coef, prev[i]);
        }
        if (2 * errors <= r) {
            prev = lambda;
            errors = r + 1 - errors;
            prev_disc = disc;
            shift = 1;
        } else {
            ++shift;
        }
        lambda = std::move(next);
    }
    while (lambda.size() > 1 && lambda.back() == 0) lambda.pop_back();
    if (static_cast<int>(lambda.size()) - 1 != errors || 2 * errors > ecc_len) return std::nullopt;

    auto eval = [&](const std::vector<std::uint8_t>& p, std::uint8_t x) {
        std::uint8_t acc = 0;
        for (auto it = p.rbegin(); it != p.rend(); ++it) acc = gf.mul(acc, x) ^ *it;
        return acc;
    };

    // omega = synd * lambda mod x^ecc_len
    std::vector<std::uint8_t> omega(static_cast<std::size_t>(ecc_len), 0);
    for (std::size_t i = 0; i < synd.size(); ++i) {
        for (std::size_t j = 0; j < lambda.size() && i + j < omega.size(); ++j) {
            omega[i + j] ^= gf.mul(synd[i], lambda[j]);
        }
    }
    std::vector<std::uint8_t> lambda_deriv;
    for (std::size_t i = 1; i < lambda.size(); ++i) lambda_deriv.push_back(i % 2 == 1 ? lambda[i] : 0);

    int found = 0;
    for (int idx = 0; idx < total; ++idx) {
        const int degree = total - 1 - idx;
        const std::uint8_t x_inv = gf.exp(-degree);
        if (eval(lambda, x_inv) != 0) continue;
        const std::uint8_t denom = eval(lambda_deriv, x_inv);
        if (denom == 0) return std::nullopt;
        const std::uint8_t magnitude = gf.mul(gf.exp(degree), gf.div(eval(omega, x_inv), denom));
        codeword[static_cast<std::size_t>(idx)] ^= magnitude;
        ++found;
    }
    if (found != errors) return std::nullopt;
    if (!syndromes().second) return std::nullopt;
    return found;
}

}  // namespace rmsteg::qr
