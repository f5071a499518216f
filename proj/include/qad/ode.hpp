#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>

// Dormand-Prince 8(5,3) with 6th order dense output, over any Eigen dense
// type (real or complex, vector or matrix).

namespace qad {

struct Dop853Options {
    double rtol = 1e-10;
    double atol = 1e-16;
    double initial_step = 0;  // 0: automatic
    double max_step = 0;      // 0: unbounded
    bool fixed_step = false;  // take exactly `initial_step` (last step clipped)
    bool dense_output = true;
    long max_steps = 500000000L;
};

class IntegrationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

template <class State>
class Dop853 {
public:
    using Scalar = typename State::Scalar;

    template <class Rhs>
    Dop853(Rhs&& rhs_fn, double t0, const State& y0, Dop853Options opt = {})
        : rhs_(std::forward<Rhs>(rhs_fn)), opt_(opt), t_(t0), t_prev_(t0), y_(y0), y_prev_(y0) {
        k1_ = rhs_(t_, y_);
        evals_ = 1;
        h_ = opt_.initial_step;
    }

    double time() const { return t_; }
    double previous_time() const { return t_prev_; }
    const State& state() const { return y_; }
    const State& previous_state() const { return y_prev_; }
    long accepted() const { return accepted_; }
    long rejected() const { return rejected_; }
    long evaluations() const { return evals_; }
    double step_size() const { return h_; }

    /// Advance one accepted step, never beyond `t_stop` (in the integration direction).
    void step(double t_stop) {
        double dir = t_stop >= t_ ? 1.0 : -1.0;
        if (h_ == 0) h_ = initial_step(dir);
        h_ = dir * std::abs(h_);
        if (opt_.max_step > 0 && std::abs(h_) > opt_.max_step) h_ = dir * opt_.max_step;
        for (;;) {
            bool last = false;
            double h = h_;
            if ((t_ + h - t_stop) * dir >= 0) {
                h = t_stop - t_;
                last = true;
            }
            // a clipped final step may be a rounding sliver; that one is taken as is
            if ((!last && !(std::abs(h) > 1e-15 * std::max(1.0, std::abs(t_)))) || !std::isfinite(h))
                throw IntegrationError("dop853: step size underflow at t=" + std::to_string(t_));
            if (accepted_ + rejected_ >= opt_.max_steps)
                throw IntegrationError("dop853: too many steps at t=" + std::to_string(t_));
            double err = attempt(h);
            if (opt_.fixed_step || err <= 1.0) {
                accept(h);
                if (!opt_.fixed_step) {
                    double fac = std::pow(err, 1.0 / 8.0);
                    fac = std::max(1.0 / k_fac2, std::min(1.0 / k_fac1, fac / k_safe));
                    double hn = h / fac;
                    // a clipped final step says nothing about the natural step size
                    if (!last || std::abs(hn) < std::abs(h_)) h_ = hn;
                }
                return;
            }
            ++rejected_;
            double fac = std::pow(err, 1.0 / 8.0);
            h_ = h / std::min(1.0 / k_fac1, fac / k_safe);
        }
    }

    /// Integrate to exactly `t_end`.
    template <class Observer>
    void advance(double t_end, Observer&& on_step) {
        while (t_ != t_end) {
            step(t_end);
            on_step(*this);
        }
    }
    void advance(double t_end) {
        advance(t_end, [](const Dop853&) {});
    }

    /// Dense output inside the last accepted step.
    State dense(double t) const {
        double span = t_ - t_prev_;
        if (span == 0) return y_;
        double s = (t - t_prev_) / span;
        double s1 = 1.0 - s;
        return rc1_ + s * (rc2_ + s1 * (rc3_ + s * (rc4_ + s1 * (rc5_ + s * (rc6_ + s1 * (rc7_ + s * rc8_))))));
    }

private:
    static constexpr double k_safe = 0.9, k_fac1 = 0.333, k_fac2 = 6.0;

    double initial_step(double dir) {
        auto sk = (opt_.atol + opt_.rtol * y_.cwiseAbs().array()).eval();
        double dnf = (k1_.cwiseAbs().array() / sk).square().sum();
        double dny = (y_.cwiseAbs().array() / sk).square().sum();
        double h = std::sqrt(dny / dnf) * 0.01;
        if (!std::isfinite(dnf + dny) || dnf <= 1e-15 || dny <= 1e-15) h = 1e-6;
        State k2 = rhs_(t_ + dir * h, (y_ + (dir * h) * k1_).eval());
        ++evals_;
        double der2 = std::sqrt(((k2 - k1_).cwiseAbs().array() / sk).square().sum()) / h;
        double der12 = std::max(der2, std::sqrt(dnf));
        double h1 = der12 > 1e-15 ? std::pow(0.01 / der12, 1.0 / 8.0) : std::max(1e-6, h * 1e-3);
        return std::min(100.0 * h, h1);
    }

    // returns the scaled error norm; fills the stages and the candidate state
    double attempt(double h) {
        const State& y = y_;
        const State& k1 = k1_;
        k2_ = rhs_(t_ + c2 * h, (y + h * (a21 * k1)).eval());
        k3_ = rhs_(t_ + c3 * h, (y + h * (a31 * k1 + a32 * k2_)).eval());
        k4_ = rhs_(t_ + c4 * h, (y + h * (a41 * k1 + a43 * k3_)).eval());
        k5_ = rhs_(t_ + c5 * h, (y + h * (a51 * k1 + a53 * k3_ + a54 * k4_)).eval());
        k6_ = rhs_(t_ + c6 * h, (y + h * (a61 * k1 + a64 * k4_ + a65 * k5_)).eval());
        k7_ = rhs_(t_ + c7 * h, (y + h * (a71 * k1 + a74 * k4_ + a75 * k5_ + a76 * k6_)).eval());
        k8_ = rhs_(t_ + c8 * h, (y + h * (a81 * k1 + a84 * k4_ + a85 * k5_ + a86 * k6_ + a87 * k7_)).eval());
        k9_ = rhs_(t_ + c9 * h,
                   (y + h * (a91 * k1 + a94 * k4_ + a95 * k5_ + a96 * k6_ + a97 * k7_ + a98 * k8_)).eval());
        k10_ = rhs_(t_ + c10 * h, (y + h * (a101 * k1 + a104 * k4_ + a105 * k5_ + a106 * k6_ + a107 * k7_ +
                                            a108 * k8_ + a109 * k9_)).eval());
        k11_ = rhs_(t_ + c11 * h, (y + h * (a111 * k1 + a114 * k4_ + a115 * k5_ + a116 * k6_ + a117 * k7_ +
                                            a118 * k8_ + a119 * k9_ + a1110 * k10_)).eval());
        k12_ = rhs_(t_ + h, (y + h * (a121 * k1 + a124 * k4_ + a125 * k5_ + a126 * k6_ + a127 * k7_ +
                                      a128 * k8_ + a129 * k9_ + a1210 * k10_ + a1211 * k11_)).eval());
        evals_ += 11;
        incr_ = b1 * k1 + b6 * k6_ + b7 * k7_ + b8 * k8_ + b9 * k9_ + b10 * k10_ + b11 * k11_ + b12 * k12_;
        y_new_ = y + h * incr_;
        if (opt_.fixed_step) return 0.0;

        auto sk = (opt_.atol + opt_.rtol * y.cwiseAbs().array().max(y_new_.cwiseAbs().array())).eval();
        auto e3 = (incr_ - bhh1 * k1 - bhh2 * k9_ - bhh3 * k12_).cwiseAbs().array() / sk;
        auto e5 = (er1 * k1 + er6 * k6_ + er7 * k7_ + er8 * k8_ + er9 * k9_ + er10 * k10_ + er11 * k11_ +
                   er12 * k12_).cwiseAbs().array() / sk;
        double err2 = e3.square().sum();
        double err = e5.square().sum();
        double deno = err + 0.01 * err2;
        if (deno <= 0.0) deno = 1.0;
        double n = static_cast<double>(y.size());
        double out = std::abs(h) * err / std::sqrt(deno * n);
        if (!std::isfinite(out)) return std::numeric_limits<double>::infinity();
        return out;
    }

    void accept(double h) {
        State k_end = rhs_(t_ + h, y_new_);
        ++evals_;
        if (!opt_.dense_output) {
            y_prev_ = y_;
            t_prev_ = t_;
            y_ = y_new_;
            t_ = t_ + h;
            k1_ = k_end;
            ++accepted_;
            return;
        }
        rc1_ = y_;
        State ydiff = y_new_ - y_;
        rc2_ = ydiff;
        State bspl = h * k1_ - ydiff;
        rc3_ = bspl;
        rc4_ = ydiff - h * k_end - bspl;
        rc5_ = h * (d41 * k1_ + d46 * k6_ + d47 * k7_ + d48 * k8_ + d49 * k9_ + d410 * k10_ + d411 * k11_ +
                    d412 * k12_ + d413 * k_end);
        rc6_ = h * (d51 * k1_ + d56 * k6_ + d57 * k7_ + d58 * k8_ + d59 * k9_ + d510 * k10_ + d511 * k11_ +
                    d512 * k12_ + d513 * k_end);
        rc7_ = h * (d61 * k1_ + d66 * k6_ + d67 * k7_ + d68 * k8_ + d69 * k9_ + d610 * k10_ + d611 * k11_ +
                    d612 * k12_ + d613 * k_end);
        rc8_ = h * (d71 * k1_ + d76 * k6_ + d77 * k7_ + d78 * k8_ + d79 * k9_ + d710 * k10_ + d711 * k11_);
        y_prev_ = y_;
        t_prev_ = t_;
        y_ = y_new_;
        t_ = t_ + h;
        k1_ = k_end;
        ++accepted_;
    }

    static constexpr double c2 = 0.05260015195876773187856, c3 = 0.07890022793815159781784,
                            c4 = 0.11835034190722739672676, c5 = 0.28164965809277260327324,
                            c6 = 0.33333333333333333333333, c7 = 0.25000000000000000000000,
                            c8 = 0.30769230769230769230769, c9 = 0.65128205128205128205128,
                            c10 = 0.60000000000000000000000, c11 = 0.85714285714285714285714;
    static constexpr double b1 = 0.05429373411656876223805, b6 = 4.45031289275240888144114,
                            b7 = 1.89151789931450038304282, b8 = -5.80120396001058478146721,
                            b9 = 0.31116436695781989440892, b10 = -0.15216094966251607855618,
                            b11 = 0.20136540080403034837478, b12 = 0.04471061572777259051769;
    static constexpr double bhh1 = 0.24409448818897637795276, bhh2 = 0.73384668828161185734136,
                            bhh3 = 0.02205882352941176470588;
    static constexpr double er1 = 0.01312004499419488073250, er6 = -1.22515644637620444072057,
                            er7 = -0.49575894965725019152141, er8 = 1.66437718245498653696153,
                            er9 = -0.35032884874997368168865, er10 = 0.33417911871301747902973,
                            er11 = 0.08192320648511571246571, er12 = -0.02235530786388629525884;
    static constexpr double a21 = 0.05260015195876773187856, a31 = 0.01972505698453789945446,
                            a32 = 0.05917517095361369836338, a41 = 0.02958758547680684918169,
                            a43 = 0.08876275643042054754507, a51 = 0.24136513415926668550237,
                            a53 = -0.88454947932828608534486, a54 = 0.92483400326179200311574,
                            a61 = 0.03703703703703703703704, a64 = 0.17082860872947387127960,
                            a65 = 0.12546768756682242501669, a71 = 0.03710937500000000000000,
                            a74 = 0.17025221101954403931498, a75 = 0.06021653898045596068502,
                            a76 = -0.01757812500000000000000, a81 = 0.03709200011850479271088,
                            a84 = 0.17038392571223999381021, a85 = 0.10726203044637328465181,
                            a86 = -0.01531943774862440175279, a87 = 0.00827378916381402288758,
                            a91 = 0.62411095871607571711443, a94 = -3.36089262944694129406857,
                            a95 = -0.86821934684172600681819, a96 = 27.5920996994467083049416,
                            a97 = 20.1540675504778934086187, a98 = -43.4898841810699588477366,
                            a101 = 0.47766253643826436589043, a104 = -2.48811461997166764192642,
                            a105 = -0.59029082683684299637145, a106 = 21.2300514481811942347289,
                            a107 = 15.2792336328824235832597, a108 = -33.2882109689848629194453,
                            a109 = -0.02033120170850862613582, a111 = -0.93714243008598732571704,
                            a114 = 5.18637242884406370830024, a115 = 1.09143734899672957818500,
                            a116 = -8.14978701074692612513997, a117 = -18.5200656599969598641566,
                            a118 = 22.7394870993505042818970, a119 = 2.49360555267965238987089,
                            a1110 = -3.04676447189821950038237, a121 = 2.27331014751653820792360,
                            a124 = -10.5344954667372501984067, a125 = -2.00087205822486249909676,
                            a126 = -17.9589318631187989172766, a127 = 27.9488845294199600508500,
                            a128 = -2.85899827713502369474066, a129 = -8.87285693353062954433549,
                            a1210 = 12.3605671757943030647266, a1211 = 0.64339274601576353035597;
    static constexpr double d41 = -5.40685903845352664250302, d46 = 367.268892700041893590281,
                            d47 = 154.609958204083905482676, d48 = -505.920283865412564024766,
                            d49 = 15.5975154819608130688200, d410 = -26.1936204184402805956691,
                            d411 = -0.74003512364122230844721, d412 = 1.11776539319431476294221,
                            d413 = -0.33333333333333333333333, d51 = 6.51987095363079615048119,
                            d56 = -1066.34956011730205278592, d57 = -351.864047514639508625601,
                            d58 = 1363.51955696662884408368, d59 = -112.727669432657582669864,
                            d510 = 159.796191868560289612921, d511 = -2.13865100308788816220259,
                            d512 = -3.75569172113289760348584, d513 = 7.00000000000000000000000,
                            d61 = 10.4698004763293477204238, d66 = -1380.01473607038123167155,
                            d67 = -531.219827862514074379012, d68 = 1866.98964341870892451324,
                            d69 = -53.3302605020547902574560, d610 = 82.4147560258671369782481,
                            d611 = 7.38443654502992069572676, d612 = 0.41729908012587751149843,
                            d613 = -3.11111111111111111111111, d71 = -16.6338582677165354330709,
                            d76 = 4516.16568914956011730205, d77 = 1393.85185384057776465219,
                            d78 = -5687.52042419481539670071, d79 = 473.965563750151263163661,
                            d710 = -661.810776942355889724311, d711 = -18.0180473354013232598119;

    std::function<State(double, const State&)> rhs_;
    Dop853Options opt_;
    double t_, t_prev_;
    double h_ = 0;
    State y_, y_prev_, y_new_, incr_;
    State k1_, k2_, k3_, k4_, k5_, k6_, k7_, k8_, k9_, k10_, k11_, k12_;
    State rc1_, rc2_, rc3_, rc4_, rc5_, rc6_, rc7_, rc8_;
    long accepted_ = 0, rejected_ = 0, evals_ = 0;
};

}  // namespace qad
