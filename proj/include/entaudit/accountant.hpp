#pragma once

// Renyi-DP accountant for the subsampled Gaussian mechanism. Each optimizer
// step adds the per-step Renyi divergence at a fixed grid of orders; the
// (epsilon, delta) guarantee is the classic conversion minimized over the
// grid. Integer orders use the exact binomial sum; fractional orders use the
// two-part series with signed fractional binomial coefficients.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace entaudit {

namespace rdp {

inline double log_add(double a, double b) {
    if (a == -std::numeric_limits<double>::infinity()) return b;
    if (b == -std::numeric_limits<double>::infinity()) return a;
    double hi = a > b ? a : b, lo = a > b ? b : a;
    return hi + std::log1p(std::exp(lo - hi));
}

// log(exp(a) - exp(b)) for a >= b
inline double log_sub(double a, double b) {
    if (b == -std::numeric_limits<double>::infinity()) return a;
    if (b > a) throw std::runtime_error("accountant: negative running sum in series");
    if (a == b) return -std::numeric_limits<double>::infinity();
    return a + std::log1p(-std::exp(b - a));
}

inline double log_erfc(double x) {
    double r = std::erfc(x);
    if (r > 0.0) return std::log(r);
    // erfc underflowed; Laurent tail expansion at +infinity
    double x2 = x * x;
    return -0.5 * std::log(M_PI) - std::log(x) - x2 - 0.5 / x2 + 0.625 / (x2 * x2) -
           (37.0 / 24.0) / (x2 * x2 * x2) + (353.0 / 64.0) / (x2 * x2 * x2 * x2);
}

inline double log_comb(int n, int k) {
    return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

// one-step RDP at integer order alpha >= 2
inline double step_rdp_int(double q, double sigma, int alpha) {
    double log_a = -std::numeric_limits<double>::infinity();
    const double log_q = std::log(q), log_1mq = std::log1p(-q);
    for (int k = 0; k <= alpha; ++k) {
        double term = log_comb(alpha, k) + (alpha - k) * log_1mq + k * log_q +
                      (static_cast<double>(k) * k - k) / (2.0 * sigma * sigma);
        log_a = log_add(log_a, term);
    }
    return log_a / (alpha - 1.0);
}

// one-step RDP at fractional order alpha > 1
inline double step_rdp_frac(double q, double sigma, double alpha) {
    const double neg_inf = -std::numeric_limits<double>::infinity();
    double log_a0 = neg_inf, log_a1 = neg_inf;
    const double z0 = sigma * sigma * std::log(1.0 / q - 1.0) + 0.5;
    const double log_q = std::log(q), log_1mq = std::log1p(-q);
    const double sqrt2_sigma = std::sqrt(2.0) * sigma;

    double log_coef = 0.0;  // log|binom(alpha, i)|, built by recurrence
    int coef_sign = 1;
    for (int i = 0;; ++i) {
        if (i > 0) {
            double f = (alpha - i + 1.0) / i;
            if (f == 0.0) break;  // exact integer alpha handled elsewhere
            log_coef += std::log(std::fabs(f));
            if (f < 0.0) coef_sign = -coef_sign;
        }
        double j = alpha - i;
        double log_t0 = log_coef + i * log_q + j * log_1mq;
        double log_t1 = log_coef + j * log_q + i * log_1mq;
        double log_e0 = std::log(0.5) + log_erfc((i - z0) / sqrt2_sigma);
        double log_e1 = std::log(0.5) + log_erfc((z0 - j) / sqrt2_sigma);
        double log_s0 = log_t0 + (static_cast<double>(i) * i - i) / (2.0 * sigma * sigma) + log_e0;
        double log_s1 = log_t1 + (j * j - j) / (2.0 * sigma * sigma) + log_e1;
        if (coef_sign > 0) {
            log_a0 = log_add(log_a0, log_s0);
            log_a1 = log_add(log_a1, log_s1);
        } else {
            log_a0 = log_sub(log_a0, log_s0);
            log_a1 = log_sub(log_a1, log_s1);
        }
        if (std::max(log_s0, log_s1) < -30.0 && i > static_cast<int>(alpha)) break;
        if (i > 10000) throw std::runtime_error("accountant: fractional series did not converge");
    }
    return log_add(log_a0, log_a1) / (alpha - 1.0);
}

inline double step_rdp(double q, double sigma, double alpha) {
    if (q < 0.0 || q > 1.0) throw std::runtime_error("accountant: q must be in [0,1]");
    if (!(sigma > 0.0)) throw std::runtime_error("accountant: sigma must be positive");
    if (!(alpha > 1.0)) throw std::runtime_error("accountant: order must exceed 1");
    if (q == 0.0) return 0.0;
    if (q == 1.0) return alpha / (2.0 * sigma * sigma);  // plain Gaussian mechanism
    double int_part;
    if (std::modf(alpha, &int_part) == 0.0)
        return step_rdp_int(q, sigma, static_cast<int>(int_part));
    return step_rdp_frac(q, sigma, alpha);
}

}  // namespace rdp

inline std::vector<double> default_rdp_orders() {
    std::vector<double> orders = {1.25, 1.5};
    for (int a = 2; a <= 64; ++a) orders.push_back(static_cast<double>(a));
    return orders;
}

struct AccountantState {
    double q = 0.0;
    double sigma = 0.0;
    long steps = 0;
    std::vector<double> orders;
    std::vector<double> step_values;  // per-step RDP at each order
    std::vector<double> rdp;          // accumulated
};

inline AccountantState make_accountant(double q, double sigma,
                                       std::vector<double> orders = default_rdp_orders()) {
    if (orders.empty()) throw std::runtime_error("accountant: empty order grid");
    AccountantState st;
    st.q = q;
    st.sigma = sigma;
    st.orders = std::move(orders);
    st.step_values.reserve(st.orders.size());
    for (double a : st.orders) st.step_values.push_back(rdp::step_rdp(q, sigma, a));
    st.rdp.assign(st.orders.size(), 0.0);
    return st;
}

inline void account_step(AccountantState& st) {
    if (!(st.sigma > 0.0))
        throw std::runtime_error("account_step: sigma must be positive for a DP guarantee");
    for (std::size_t i = 0; i < st.rdp.size(); ++i) st.rdp[i] += st.step_values[i];
    ++st.steps;
}

inline double epsilon(const AccountantState& st, double delta) {
    if (st.orders.empty()) throw std::runtime_error("epsilon: empty order grid");
    if (!(delta > 0.0 && delta < 1.0)) throw std::runtime_error("epsilon: delta must be in (0,1)");
    if (st.steps == 0) return 0.0;  // no data access yet
    double best = std::numeric_limits<double>::infinity();
    const double log_inv_delta = std::log(1.0 / delta);
    for (std::size_t i = 0; i < st.orders.size(); ++i) {
        double eps = st.rdp[i] + log_inv_delta / (st.orders[i] - 1.0);
        if (eps < best) best = eps;
    }
    return best < 0.0 ? 0.0 : best;
}

// audit log rows: step,q,sigma,rdp@order...,epsilon
inline std::string accountant_csv_header(const AccountantState& st) {
    std::string h = "step,q,sigma";
    char buf[64];
    for (double a : st.orders) {
        std::snprintf(buf, sizeof(buf), ",rdp_a%.2f", a);
        h += buf;
    }
    h += ",epsilon";
    return h;
}

inline std::string accountant_csv_row(const AccountantState& st, double delta) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%ld,%.17g,%.17g", st.steps, st.q, st.sigma);
    std::string row = buf;
    for (double v : st.rdp) {
        std::snprintf(buf, sizeof(buf), ",%.17g", v);
        row += buf;
    }
    std::snprintf(buf, sizeof(buf), ",%.17g", epsilon(st, delta));
    row += buf;
    return row;
}

}  // namespace entaudit
