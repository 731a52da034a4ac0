#pragma once

#include <mobcpd/core.hpp>

namespace mobcpd {

// Per-organ prior parameters plus the inter-organ coupling matrix.
// lambda[l] scales the motion magnitude of organ l+1, bandwidth[l] its
// smoothness; coupling(l,l') in [0,1] attenuates cross-organ correlation.
struct OrganModel {
    int num_organs = 0;
    Vector lambda;     // length L, entries > 0
    Vector bandwidth;  // length L, entries > 0 (mm)
    Matrix coupling;   // L x L symmetric, entries in [0,1], unit diagonal

    void validate() const {
        const int L = num_organs;
        if (L < 1)
            throw std::invalid_argument("organ model: num_organs < 1");
        if (lambda.size() != L || bandwidth.size() != L)
            throw std::invalid_argument("organ model: parameter length != L");
        if ((lambda.array() <= 0.0).any())
            throw std::invalid_argument("organ model: lambda must be positive");
        if ((bandwidth.array() <= 0.0).any())
            throw std::invalid_argument("organ model: bandwidth must be positive");
        if (coupling.rows() != L || coupling.cols() != L)
            throw std::invalid_argument("organ model: coupling shape != LxL");
        if ((coupling - coupling.transpose()).cwiseAbs().maxCoeff() > 1e-12)
            throw std::invalid_argument("organ model: coupling not symmetric");
        if ((coupling.array() < 0.0).any() || (coupling.array() > 1.0).any())
            throw std::invalid_argument("organ model: coupling entries outside [0,1]");
        for (int l = 0; l < L; ++l)
            if (std::abs(coupling(l, l) - 1.0) > 1e-12)
                throw std::invalid_argument("organ model: coupling diagonal must be 1");
    }

    static OrganModel uniform(int L, double lam, double bw) {
        OrganModel m;
        m.num_organs = L;
        m.lambda = Vector::Constant(L, lam);
        m.bandwidth = Vector::Constant(L, bw);
        m.coupling = Matrix::Ones(L, L);
        return m;
    }
};

// Two-stage label noise model.  source_posterior(k,l') = P(organ k | source
// label l'), target_likelihood(l,k) = P(target label l | organ k); both are
// column-stochastic.
struct ConfusionModel {
    Matrix source_posterior;
    Matrix target_likelihood;

    void validate(double tol = 1e-9) const {
        const auto check = [tol](const Matrix& P, const char* name) {
            if (P.rows() < 1 || P.rows() != P.cols())
                throw std::invalid_argument(std::string("confusion model: ") + name +
                                            " must be square");
            if ((P.array() < 0.0).any())
                throw std::invalid_argument(std::string("confusion model: ") + name +
                                            " has negative entries");
            for (int c = 0; c < P.cols(); ++c)
                if (std::abs(P.col(c).sum() - 1.0) > tol)
                    throw std::invalid_argument(std::string("confusion model: ") + name +
                                                " column " + std::to_string(c) +
                                                " does not sum to 1");
        };
        check(source_posterior, "source_posterior");
        check(target_likelihood, "target_likelihood");
        if (source_posterior.rows() != target_likelihood.rows())
            throw std::invalid_argument("confusion model: stage dimensions differ");
    }
};

// U(l,l') = P(target label l | source label l') = sum_k tl(l,k) sp(k,l').
// Columns of U sum to 1 because both stages are column-stochastic.
inline Matrix build_label_transition(const ConfusionModel& cm) {
    cm.validate();
    return cm.target_likelihood * cm.source_posterior;
}

inline Matrix identity_transition(int L) { return Matrix::Identity(L, L); }

// Uniform outlier density over the padded bounding box of the target cloud.
inline double outlier_density(const LabeledCloud& target, double pad_mm = 0.0) {
    return 1.0 / bounding_box(target, pad_mm).volume();
}

}  // namespace mobcpd
