#pragma once

#include <mobcpd/core.hpp>
#include <mobcpd/organ_model.hpp>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <numeric>
#include <vector>

namespace mobcpd {

// Dense motion-prior Gram matrix over the source cloud.
// G_ij = lam_i lam_j S_{l_i l_j} exp(-|y_i - y_j|^2 / (2 B_i B_j)).
struct GramMatrix {
    Matrix G;
    Eigen::VectorXi labels;           // 1-based source labels
    Eigen::VectorXi organ_component;  // length L: connected component of each
                                      // organ under nonzero coupling
    int num_components = 1;
    bool repaired = false;            // jitter was needed to make G factorable
    double jitter_used = 0.0;

    int size() const { return static_cast<int>(G.rows()); }
};

inline GramMatrix build_gram(const LabeledCloud& y, const OrganModel& model) {
    y.validate();
    model.validate();
    if (y.num_organs > model.num_organs)
        throw std::invalid_argument("build_gram: cloud labels exceed model organs");
    const int M = y.size();
    const int L = model.num_organs;

    GramMatrix gm;
    gm.labels = y.labels;
    gm.G.resize(M, M);
    for (int j = 0; j < M; ++j) {
        const int lj = y.labels[j] - 1;
        for (int i = j; i < M; ++i) {
            const int li = y.labels[i] - 1;
            const double s = model.coupling(li, lj);
            double g = 0.0;
            if (s > 0.0) {
                const double d2 = (y.points.row(i) - y.points.row(j)).squaredNorm();
                g = model.lambda[li] * model.lambda[lj] * s *
                    std::exp(-d2 / (2.0 * model.bandwidth[li] * model.bandwidth[lj]));
            }
            gm.G(i, j) = g;
            gm.G(j, i) = g;
        }
    }

    // union organs connected by nonzero coupling; the posterior solve later
    // factors each component independently
    std::vector<int> parent(L);
    std::iota(parent.begin(), parent.end(), 0);
    const auto find = [&parent](int a) {
        while (parent[a] != a) a = parent[a] = parent[parent[a]];
        return a;
    };
    for (int a = 0; a < L; ++a)
        for (int b = a + 1; b < L; ++b)
            if (model.coupling(a, b) > 0.0) parent[find(a)] = find(b);
    gm.organ_component.resize(L);
    std::vector<int> remap(L, -1);
    int nc = 0;
    for (int l = 0; l < L; ++l) {
        const int r = find(l);
        if (remap[r] < 0) remap[r] = nc++;
        gm.organ_component[l] = remap[r];
    }
    gm.num_components = nc;
    return gm;
}

// Ensures G admits a Cholesky factorization, adding jitter*mean(diag)*I and
// escalating the jitter x10 up to 3 times if it does not.
inline GramMatrix validate_spd(GramMatrix gm, double jitter = 1e-10) {
    const double mean_diag = gm.G.diagonal().mean();
    double j = jitter;
    for (int attempt = 0; attempt <= 3; ++attempt) {
        Eigen::LLT<Matrix> llt(gm.G);
        if (llt.info() == Eigen::Success) return gm;
        if (attempt == 3) break;
        gm.G.diagonal().array() += j * mean_diag;
        gm.repaired = true;
        gm.jitter_used += j * mean_diag;
        j *= 10.0;
    }
    throw std::invalid_argument(
        "validate_spd: Gram matrix not positive definite after jitter repair; "
        "the organ coupling matrix S is invalid");
}

// Truncated eigenfactorization F F^T ~ G with F = E diag(sqrt(lam)).
struct LowRankGram {
    Matrix F;  // M x r
    int rank = 0;
    double retained_fraction = 1.0;  // share of positive spectrum kept
    double rel_frobenius_error = 0.0;

    int size() const { return static_cast<int>(F.rows()); }
};

inline LowRankGram low_rank_factor(const GramMatrix& gm, int r) {
    const int M = gm.size();
    if (r < 1 || r > M)
        throw std::invalid_argument("low_rank_factor: rank outside [1, M]");
    Eigen::SelfAdjointEigenSolver<Matrix> eig(gm.G);
    if (eig.info() != Eigen::Success)
        throw std::runtime_error("low_rank_factor: eigendecomposition failed");
    // eigenvalues come back ascending; keep the top r
    const Vector w = eig.eigenvalues().reverse();
    const Vector wpos = w.cwiseMax(0.0);

    LowRankGram lr;
    lr.rank = r;
    lr.F.resize(M, r);
    for (int k = 0; k < r; ++k)
        lr.F.col(k) = eig.eigenvectors().col(M - 1 - k) * std::sqrt(wpos[k]);
    const double total = wpos.sum();
    lr.retained_fraction = total > 0.0 ? wpos.head(r).sum() / total : 1.0;
    const double fro2 = w.squaredNorm();
    lr.rel_frobenius_error =
        fro2 > 0.0 ? std::sqrt(w.tail(M - r).squaredNorm() / fro2) : 0.0;
    return lr;
}

// One E-M iteration's posterior factor: exposes Sigma*rhs and diag(Sigma) for
// Sigma = (G^-1 + diag(d))^-1 without ever forming G^-1.
//
// With G = L L^T (per coupling component, or a low-rank factor F), push-through
// gives Sigma = L (I + L^T diag(d) L)^-1 L^T.  Factoring the inner matrix as
// C C^T with K = diag(sqrt(d)) L and A = I + K^T K yields Bt = C^-1 L^T, so
// Sigma*rhs = Bt^T (Bt rhs) and diag(Sigma)_m = |Bt col m|^2.
struct PosteriorFactor {
    std::vector<Eigen::VectorXi> idx;  // rows of each block
    std::vector<Matrix> Bt;            // r_b x m_b per block
    int M = 0;
    int clamped = 0;  // negatives clamped in diag (always 0 for this form)

    Matrix apply(const Matrix& rhs) const {
        if (rhs.rows() != M)
            throw std::invalid_argument("posterior apply: rhs length mismatch");
        Matrix out(M, rhs.cols());
        for (size_t b = 0; b < Bt.size(); ++b) {
            Matrix sub(idx[b].size(), rhs.cols());
            for (int i = 0; i < idx[b].size(); ++i) sub.row(i) = rhs.row(idx[b][i]);
            const Matrix res = Bt[b].transpose() * (Bt[b] * sub);
            for (int i = 0; i < idx[b].size(); ++i) out.row(idx[b][i]) = res.row(i);
        }
        return out;
    }

    Vector diag() {
        Vector out(M);
        for (size_t b = 0; b < Bt.size(); ++b)
            for (int i = 0; i < idx[b].size(); ++i) {
                double v = Bt[b].col(i).squaredNorm();
                if (v < 0.0) {
                    v = 0.0;
                    ++clamped;
                }
                out[idx[b][i]] = v;
            }
        return out;
    }
};

class PosteriorOperator {
  public:
    // Dense path: Cholesky of each coupling-component block of G, once.
    explicit PosteriorOperator(const GramMatrix& gm) {
        M_ = gm.size();
        idx_.resize(gm.num_components);
        std::vector<std::vector<int>> rows(gm.num_components);
        for (int i = 0; i < M_; ++i)
            rows[gm.organ_component[gm.labels[i] - 1]].push_back(i);
        for (int c = 0; c < gm.num_components; ++c) {
            idx_[c] = Eigen::Map<const Eigen::VectorXi>(rows[c].data(),
                                                        rows[c].size());
            Matrix block(idx_[c].size(), idx_[c].size());
            for (int i = 0; i < idx_[c].size(); ++i)
                for (int j = 0; j < idx_[c].size(); ++j)
                    block(i, j) = gm.G(idx_[c][i], idx_[c][j]);
            Eigen::LLT<Matrix> llt(block);
            if (llt.info() != Eigen::Success)
                throw std::runtime_error(
                    "posterior operator: component block not positive definite "
                    "(run validate_spd first)");
            L_.push_back(llt.matrixL());
        }
    }

    // Low-rank path: single factor, no component split.
    explicit PosteriorOperator(const LowRankGram& lr) {
        M_ = lr.size();
        Eigen::VectorXi all(M_);
        std::iota(all.data(), all.data() + M_, 0);
        idx_.push_back(all);
        L_.push_back(lr.F);
    }

    PosteriorFactor factorize(const Vector& d) const {
        if (d.size() != M_)
            throw std::invalid_argument("posterior factorize: d length mismatch");
        if ((d.array() < 0.0).any())
            throw std::invalid_argument("posterior factorize: negative d entry");
        PosteriorFactor f;
        f.M = M_;
        f.idx = idx_;
        for (size_t b = 0; b < L_.size(); ++b) {
            const auto& Lb = L_[b];
            Vector sd(idx_[b].size());
            for (int i = 0; i < idx_[b].size(); ++i)
                sd[i] = std::sqrt(d[idx_[b][i]]);
            const Matrix K = sd.asDiagonal() * Lb;
            Matrix A = Matrix::Identity(Lb.cols(), Lb.cols());
            A.selfadjointView<Eigen::Lower>().rankUpdate(K.transpose());
            Eigen::LLT<Matrix> llt(A);
            if (llt.info() != Eigen::Success)
                throw std::runtime_error("posterior factorize: inner system singular");
            Matrix Bt = Lb.transpose();
            llt.matrixL().solveInPlace(Bt);
            f.Bt.push_back(std::move(Bt));
        }
        return f;
    }

    int size() const { return M_; }

  private:
    int M_ = 0;
    std::vector<Eigen::VectorXi> idx_;
    std::vector<Matrix> L_;  // chol factor per block, or the low-rank F
};

inline Vector posterior_apply(const GramMatrix& gm, const Vector& d,
                              const Vector& rhs) {
    return PosteriorOperator(gm).factorize(d).apply(rhs);
}

inline Vector posterior_apply(const LowRankGram& lr, const Vector& d,
                              const Vector& rhs) {
    return PosteriorOperator(lr).factorize(d).apply(rhs);
}

inline Vector posterior_diag(const GramMatrix& gm, const Vector& d) {
    return PosteriorOperator(gm).factorize(d).diag();
}

inline Vector posterior_diag(const LowRankGram& lr, const Vector& d) {
    return PosteriorOperator(lr).factorize(d).diag();
}

}  // namespace mobcpd
