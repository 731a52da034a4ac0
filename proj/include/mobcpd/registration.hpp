#pragma once

#include <mobcpd/core.hpp>
#include <mobcpd/digamma.hpp>
#include <mobcpd/kernel.hpp>
#include <mobcpd/organ_model.hpp>

#include <Eigen/SVD>

#include <limits>
#include <optional>
#include <vector>

namespace mobcpd {

struct RegistrationConfig {
    OrganModel organs;
    Matrix label_transition;  // L x L, columns sum to 1; empty means identity
    double gamma = 1.0;       // initial-variance multiplier
    double epsilon = 0.1;     // convergence tolerance (mm)
    double omega = 0.0;       // outlier weight in [0, 1)
    double kappa = 1e6;       // Dirichlet concentration of the mixture weights
    int max_iters = 200;
    int rank = 0;             // 0 = dense posterior, r > 0 = low-rank
    double outlier_pad_mm = 0.0;
    double scale_mm = 1.0;    // length scale relating the sigma2 and v criteria
    bool similarity_only = false;  // rigid+scale baseline, no displacement field

    void validate() const {
        organs.validate();
        const int L = organs.num_organs;
        if (label_transition.size() > 0) {
            if (label_transition.rows() != L || label_transition.cols() != L)
                throw std::invalid_argument("config: label_transition shape != LxL");
            if ((label_transition.array() < 0.0).any())
                throw std::invalid_argument("config: label_transition negative entry");
            for (int c = 0; c < L; ++c)
                if (std::abs(label_transition.col(c).sum() - 1.0) > 1e-9)
                    throw std::invalid_argument("config: label_transition column " +
                                                std::to_string(c) +
                                                " does not sum to 1");
        }
        if (!(gamma > 0.0)) throw std::invalid_argument("config: gamma must be > 0");
        if (!(epsilon > 0.0))
            throw std::invalid_argument("config: epsilon must be > 0");
        if (omega < 0.0 || omega >= 1.0)
            throw std::invalid_argument("config: omega outside [0, 1)");
        if (!(kappa > 0.0)) throw std::invalid_argument("config: kappa must be > 0");
        if (max_iters < 1) throw std::invalid_argument("config: max_iters < 1");
        if (rank < 0) throw std::invalid_argument("config: negative rank");
        if (outlier_pad_mm < 0.0)
            throw std::invalid_argument("config: negative outlier_pad_mm");
        if (!(scale_mm > 0.0))
            throw std::invalid_argument("config: scale_mm must be > 0");
    }

    Matrix transition_or_identity() const {
        return label_transition.size() > 0 ? label_transition
                                           : identity_transition(organs.num_organs);
    }
};

struct RegistrationState {
    Points v;           // M x 3 displacement field
    Vector sigma_diag;  // diag of the displacement posterior covariance
    Vector alpha;       // mixture weights, sum 1
    SimilarityTransform transform;
    double sigma2 = 0.0;
    int iteration = 0;
};

// Soft-assignment quantities produced by one E-step.
struct Responsibilities {
    Vector nu;        // row sums of P, length M
    Vector nu_prime;  // column sums of P, length N
    double n_hat = 0.0;
    Points p_x;       // P * x, M x 3
    Points x_hat;     // per-source posterior mean target (starved rows: rho(y+v))
    Eigen::VectorXi argmax;  // best-responsibility target per source point
    Matrix P;         // full M x N responsibility matrix
};

struct RegistrationResult {
    RegistrationState state;
    Points deformed;  // rho(y + v)
    bool converged = false;
    int iterations = 0;
    double final_measure = std::numeric_limits<double>::infinity();
    std::vector<double> sigma2_trace;
    std::vector<double> measure_trace;
    Eigen::VectorXi correspondence;  // from the final E-step
    int similarity_fallbacks = 0;    // rank-deficient similarity updates
    bool gram_repaired = false;
    double max_rotation_det_error = 0.0;  // max |det(R) - 1| over iterations
};

class divergence_error : public std::runtime_error {
  public:
    divergence_error(RegistrationState st)
        : std::runtime_error("registration diverged: sigma2 = " +
                             std::to_string(st.sigma2) + " at iteration " +
                             std::to_string(st.iteration)),
          last_state(std::move(st)) {}
    RegistrationState last_state;
};

inline double initial_sigma2(const LabeledCloud& y, const LabeledCloud& x,
                             double gamma) {
    const int M = y.size(), N = x.size();
    // sum of all pairwise squared distances via the expansion trick
    const double sum_y2 = y.points.rowwise().squaredNorm().sum();
    const double sum_x2 = x.points.rowwise().squaredNorm().sum();
    const Vector3 sy = y.points.colwise().sum().transpose();
    const Vector3 sx = x.points.colwise().sum().transpose();
    const double total = N * sum_y2 + M * sum_x2 - 2.0 * sy.dot(sx);
    return gamma * total / (3.0 * M * N);
}

inline RegistrationState init_state(const LabeledCloud& y, const LabeledCloud& x,
                                    const RegistrationConfig& cfg) {
    RegistrationState st;
    const int M = y.size();
    st.v = Points::Zero(M, 3);
    st.sigma_diag = cfg.similarity_only ? Vector::Zero(M) : Vector::Ones(M);
    st.alpha = Vector::Constant(M, 1.0 / M);
    st.transform = SimilarityTransform{};
    st.sigma2 = initial_sigma2(y, x, cfg.gamma);
    return st;
}

// Responsibilities P_mn ∝ (1-omega) alpha_m U(lx_n, ly_m) N(x_n; rho(y_m+v_m),
// sigma2 I) exp(-3 s^2 Sigma_mm / (2 sigma2)), normalized per target against
// the uniform outlier density.  Computed in the log domain.
inline Responsibilities e_step(const LabeledCloud& y, const LabeledCloud& x,
                               const RegistrationState& st,
                               const RegistrationConfig& cfg, const Matrix& U,
                               double p_out) {
    const int M = y.size(), N = x.size();
    const double s2 = st.sigma2;
    const Points yp = similarity_apply(st.transform, Points(y.points + st.v));

    Matrix logU = U.array().max(0.0).log().matrix();  // log 0 = -inf is fine
    const double log_norm = -1.5 * std::log(2.0 * M_PI * s2);
    const double ssq = st.transform.s * st.transform.s;
    Vector row_base(M);
    for (int m = 0; m < M; ++m)
        row_base[m] = std::log(st.alpha[m]) + log_norm -
                      3.0 * ssq * st.sigma_diag[m] / (2.0 * s2);

    Responsibilities r;
    r.P.resize(M, N);
    const double log_omega_term =
        cfg.omega > 0.0 ? std::log(cfg.omega * p_out)
                        : -std::numeric_limits<double>::infinity();
    const double log1m_omega =
        cfg.omega > 0.0 ? std::log1p(-cfg.omega) : 0.0;

    for (int n = 0; n < N; ++n) {
        const int lx = x.labels[n] - 1;
        double cmax = -std::numeric_limits<double>::infinity();
        for (int m = 0; m < M; ++m) {
            const double d2 = (x.points.row(n) - yp.row(m)).squaredNorm();
            const double la =
                row_base[m] + logU(lx, y.labels[m] - 1) - d2 / (2.0 * s2);
            r.P(m, n) = la;
            if (la > cmax) cmax = la;
        }
        if (!std::isfinite(cmax)) {
            r.P.col(n).setZero();
            continue;
        }
        double ssum = 0.0;
        for (int m = 0; m < M; ++m) ssum += std::exp(r.P(m, n) - cmax);
        // log denominator = log((1-omega) e^cmax ssum + omega p_out), stably
        const double a = log1m_omega + cmax + std::log(ssum);
        const double denom =
            cfg.omega > 0.0
                ? std::max(a, log_omega_term) +
                      std::log(std::exp(a - std::max(a, log_omega_term)) +
                               std::exp(log_omega_term - std::max(a, log_omega_term)))
                : a;
        for (int m = 0; m < M; ++m)
            r.P(m, n) = std::exp(log1m_omega + r.P(m, n) - denom);
    }

    r.nu = r.P.rowwise().sum();
    r.nu_prime = r.P.colwise().sum().transpose();
    r.n_hat = r.nu.sum();
    r.p_x = r.P * x.points;
    r.argmax.resize(M);
    for (int m = 0; m < M; ++m) {
        int best = 0;
        r.P.row(m).maxCoeff(&best);
        r.argmax[m] = best;
    }
    r.x_hat.resize(M, 3);
    for (int m = 0; m < M; ++m)
        r.x_hat.row(m) =
            r.nu[m] >= 1e-12 ? (r.p_x.row(m) / r.nu[m]).eval() : yp.row(m);
    return r;
}

// <alpha_m> = exp(psi(kappa + nu_m) - psi(kappa M + N_hat)), renormalized.
inline void update_alpha(RegistrationState& st, const Responsibilities& r,
                         double kappa) {
    const int M = static_cast<int>(st.alpha.size());
    const double ref = digamma(kappa * M + r.n_hat);
    for (int m = 0; m < M; ++m)
        st.alpha[m] = std::exp(digamma(kappa + r.nu[m]) - ref);
    st.alpha /= st.alpha.sum();
}

// Solves the displacement posterior: v^d = Sigma d ⊙ (rho^-1(x_hat) - y)^d
// with d = (s^2/sigma2) nu, and refreshes diag(Sigma) and alpha.
inline void update_displacement(RegistrationState& st, const LabeledCloud& y,
                                const Responsibilities& r,
                                const PosteriorOperator& post, double kappa) {
    const double ssq = st.transform.s * st.transform.s;
    const Vector d = (ssq / st.sigma2) * r.nu;
    const SimilarityTransform inv = similarity_inverse(st.transform);
    const Points resid = similarity_apply(inv, r.x_hat) - y.points;
    PosteriorFactor f = post.factorize(d);
    st.v = f.apply(d.asDiagonal() * resid);
    st.sigma_diag = f.diag();
    update_alpha(st, r, kappa);
}

// Re-estimates rho from u = y + v and the posterior targets x_hat, weighted by
// nu.  On a degenerate fit the previous transform is kept and counted.
inline void update_similarity(RegistrationState& st, const LabeledCloud& y,
                              const Responsibilities& r, int* fallbacks) {
    const Points u = y.points + st.v;
    const auto fit = similarity_fit(u, r.x_hat, r.nu);
    if (fit) {
        st.transform = *fit;
    } else if (fallbacks) {
        ++(*fallbacks);
    }
}

// sigma2 = [sum_n nu'_n |x_n|^2 - 2 sum_mn P_mn x_n . y'_m + sum_m nu_m
// |y'_m|^2] / (3 N_hat) + s^2 sigma_bar^2, with y' = rho(y + v) under the
// refreshed state; floored at 1e-6.
inline void update_sigma2(RegistrationState& st, const LabeledCloud& y,
                          const LabeledCloud& x, const Responsibilities& r) {
    const Points yp = similarity_apply(st.transform, Points(y.points + st.v));
    const double t1 =
        (r.nu_prime.array() * x.points.rowwise().squaredNorm().array()).sum();
    const double t2 = (r.p_x.array() * yp.array()).sum();
    const double t3 = (r.nu.array() * yp.rowwise().squaredNorm().array()).sum();
    const double ssq = st.transform.s * st.transform.s;
    const double sbar2 = (r.nu.array() * st.sigma_diag.array()).sum() / r.n_hat;
    st.sigma2 = (t1 - 2.0 * t2 + t3) / (3.0 * r.n_hat) + ssq * sbar2;
    st.sigma2 = std::max(st.sigma2, 1e-6);
}

// max of the displacement step (infinity norm) and the relative sigma2 step
// expressed in mm via scale_mm.
inline double convergence_measure(const Points& v, const Points& v_prev,
                                 double sigma2, double sigma2_prev,
                                 double scale_mm) {
    const double dv = (v - v_prev).cwiseAbs().maxCoeff();
    const double ds = std::abs(sigma2 - sigma2_prev) /
                      std::max(sigma2_prev, 1e-6) * scale_mm;
    return std::max(dv, ds);
}

// After convergence the similarity content of v is folded into rho: fit
// (s', R', t') mapping y -> y + v, compose rho <- rho ∘ rho', and remap
// v <- rho'^-1(y + v) - y.  rho(y + v) is unchanged to rounding.
inline void absorb_similarity_gauge(RegistrationState& st, const LabeledCloud& y) {
    const auto fit =
        similarity_fit(y.points, Points(y.points + st.v), Vector::Ones(y.size()));
    if (!fit) return;
    const SimilarityTransform inner = *fit;
    SimilarityTransform composed;
    composed.s = st.transform.s * inner.s;
    composed.R = st.transform.R * inner.R;
    composed.t = st.transform.s * (st.transform.R * inner.t) + st.transform.t;
    const SimilarityTransform inv = similarity_inverse(inner);
    st.v = similarity_apply(inv, Points(y.points + st.v)) - y.points;
    st.transform = composed;
}

// The four comparison variants: sim fits the similarity only; bcpd ignores
// labels entirely (full coupling, uniform transition); gmc couples all organs
// but keeps the label transition; omc decouples the organ fields.
enum class Mode { sim, bcpd, gmc, omc, custom };

inline Mode parse_mode(const std::string& name) {
    if (name == "sim") return Mode::sim;
    if (name == "bcpd") return Mode::bcpd;
    if (name == "gmc") return Mode::gmc;
    if (name == "omc") return Mode::omc;
    if (name == "custom") return Mode::custom;
    throw std::invalid_argument("unknown mode: " + name);
}

inline void apply_mode(RegistrationConfig& cfg, Mode mode) {
    const int L = cfg.organs.num_organs;
    switch (mode) {
        case Mode::sim:
            cfg.similarity_only = true;
            break;
        case Mode::bcpd:
            cfg.organs.coupling = Matrix::Ones(L, L);
            cfg.label_transition = Matrix::Constant(L, L, 1.0 / L);
            break;
        case Mode::gmc:
            cfg.organs.coupling = Matrix::Ones(L, L);
            break;
        case Mode::omc:
            cfg.organs.coupling = Matrix::Identity(L, L);
            break;
        case Mode::custom:
            break;
    }
}

inline RegistrationResult register_clouds(const LabeledCloud& y,
                                          const LabeledCloud& x,
                                          const RegistrationConfig& cfg) {
    y.validate();
    x.validate();
    cfg.validate();
    const int L = cfg.organs.num_organs;
    if (y.num_organs > L || x.num_organs > L)
        throw std::invalid_argument("register: cloud organ count exceeds config");
    const Matrix U = cfg.transition_or_identity();
    for (int n = 0; n < x.size(); ++n)
        if (x.labels[n] > L)
            throw std::invalid_argument("register: target label out of range");
    const double p_out = outlier_density(x, cfg.outlier_pad_mm);

    RegistrationResult res;
    std::optional<PosteriorOperator> post;
    if (!cfg.similarity_only) {
        GramMatrix gm = validate_spd(build_gram(y, cfg.organs));
        res.gram_repaired = gm.repaired;
        if (cfg.rank > 0 && cfg.rank < gm.size())
            post.emplace(low_rank_factor(gm, cfg.rank));
        else
            post.emplace(gm);
    }

    RegistrationState st = init_state(y, x, cfg);
    const double sigma2_init = st.sigma2;
    res.sigma2_trace.push_back(st.sigma2);

    for (int it = 0; it < cfg.max_iters; ++it) {
        const Points v_prev = st.v;
        const double sigma2_prev = st.sigma2;

        Responsibilities r = e_step(y, x, st, cfg, U, p_out);
        if (cfg.similarity_only)
            update_alpha(st, r, cfg.kappa);
        else
            update_displacement(st, y, r, *post, cfg.kappa);
        update_similarity(st, y, r, &res.similarity_fallbacks);
        update_sigma2(st, y, x, r);
        st.iteration = it + 1;
        res.max_rotation_det_error =
            std::max(res.max_rotation_det_error,
                     std::abs(st.transform.R.determinant() - 1.0));

        res.sigma2_trace.push_back(st.sigma2);
        if (st.sigma2 > 1e3 * sigma2_init) throw divergence_error(st);

        res.final_measure = convergence_measure(st.v, v_prev, st.sigma2,
                                                sigma2_prev, cfg.scale_mm);
        res.measure_trace.push_back(res.final_measure);
        res.correspondence = r.argmax;
        res.iterations = st.iteration;
        if (res.final_measure < cfg.epsilon) {
            res.converged = true;
            break;
        }
    }

    if (!cfg.similarity_only) absorb_similarity_gauge(st, y);
    res.state = std::move(st);
    res.deformed =
        similarity_apply(res.state.transform, Points(y.points + res.state.v));
    return res;
}

}  // namespace mobcpd
