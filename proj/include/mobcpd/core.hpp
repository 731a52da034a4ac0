#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mobcpd {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Matrix3 = Eigen::Matrix3d;
using Vector3 = Eigen::Vector3d;
// point sets are stored row-wise: one point per row, 3 columns
using Points = Eigen::Matrix<double, Eigen::Dynamic, 3>;

// Labeled point cloud. Labels are 1-based organ indices in {1..L}.
struct LabeledCloud {
    Points points;
    Eigen::VectorXi labels;
    int num_organs = 0;

    int size() const { return static_cast<int>(points.rows()); }

    void validate() const {
        if (points.rows() < 1)
            throw std::invalid_argument("cloud: empty point set");
        if (points.rows() != labels.size())
            throw std::invalid_argument("cloud: points/labels length mismatch");
        if (num_organs < 1)
            throw std::invalid_argument("cloud: num_organs < 1");
        for (int i = 0; i < labels.size(); ++i)
            if (labels[i] < 1 || labels[i] > num_organs)
                throw std::invalid_argument("cloud: label out of range at row " +
                                            std::to_string(i));
        if (!points.allFinite())
            throw std::invalid_argument("cloud: non-finite coordinate");
    }
};

// rho: p -> s R p + t.  s > 0, R a proper rotation.
struct SimilarityTransform {
    double s = 1.0;
    Matrix3 R = Matrix3::Identity();
    Vector3 t = Vector3::Zero();

    void validate(double tol = 1e-9) const {
        if (!(s > 0.0))
            throw std::invalid_argument("similarity: scale must be positive");
        if (((R.transpose() * R) - Matrix3::Identity()).cwiseAbs().maxCoeff() > tol)
            throw std::invalid_argument("similarity: R not orthonormal");
        if (std::abs(R.determinant() - 1.0) > tol)
            throw std::invalid_argument("similarity: det(R) != +1");
    }
};

inline Vector3 similarity_apply(const SimilarityTransform& T, const Vector3& p) {
    return T.s * (T.R * p) + T.t;
}

// row-wise batch version of rho
inline Points similarity_apply(const SimilarityTransform& T, const Points& pts) {
    Points out = T.s * (pts * T.R.transpose());
    out.rowwise() += T.t.transpose();
    return out;
}

inline SimilarityTransform similarity_inverse(const SimilarityTransform& T) {
    if (!(T.s > 0.0))
        throw std::invalid_argument("similarity_inverse: scale must be positive");
    SimilarityTransform inv;
    inv.s = 1.0 / T.s;
    inv.R = T.R.transpose();
    inv.t = -(1.0 / T.s) * (T.R.transpose() * T.t);
    return inv;
}

struct BoundingBox {
    Vector3 lo = Vector3::Zero();
    Vector3 hi = Vector3::Zero();

    double volume() const { return (hi - lo).prod(); }
};

// Axis-aligned box around the cloud, expanded by `pad` per side.  Dimensions
// whose padded extent falls below 1mm are widened to exactly 1mm so the box
// volume (and thus the outlier density) never degenerates.
inline BoundingBox bounding_box(const LabeledCloud& c, double pad = 0.0) {
    if (c.size() < 1)
        throw std::invalid_argument("bounding_box: empty cloud");
    if (pad < 0.0)
        throw std::invalid_argument("bounding_box: negative pad");
    BoundingBox box;
    box.lo = c.points.colwise().minCoeff().transpose() - Vector3::Constant(pad);
    box.hi = c.points.colwise().maxCoeff().transpose() + Vector3::Constant(pad);
    for (int d = 0; d < 3; ++d) {
        const double extent = box.hi[d] - box.lo[d];
        if (extent < 1.0) {
            const double mid = 0.5 * (box.lo[d] + box.hi[d]);
            box.lo[d] = mid - 0.5;
            box.hi[d] = mid + 0.5;
        }
    }
    return box;
}

// Named evaluation points (paired across source/target by name).
using Landmarks = std::map<std::string, Vector3>;

// Weighted similarity fit u -> x (Umeyama with reflection correction).
// Returns nullopt when the weighted cross-covariance is rank deficient or the
// fitted scale degenerates.
inline std::optional<SimilarityTransform> similarity_fit(const Points& u,
                                                         const Points& x,
                                                         const Vector& w) {
    const double wsum = w.sum();
    if (!(wsum > 0.0)) return std::nullopt;
    const Vector3 ubar = (u.transpose() * w) / wsum;
    const Vector3 xbar = (x.transpose() * w) / wsum;
    const Points uc = u.rowwise() - ubar.transpose();
    const Points xc = x.rowwise() - xbar.transpose();
    const Matrix3 Sxu = (xc.transpose() * (w.asDiagonal() * uc)) / wsum;
    const double tr_uu =
        (w.array() * uc.rowwise().squaredNorm().array()).sum() / wsum;
    if (!(tr_uu > 0.0)) return std::nullopt;

    Eigen::JacobiSVD<Matrix3> svd(Sxu, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Vector3 D = svd.singularValues();
    if (D[0] <= 0.0 || D[1] <= 1e-12 * D[0]) return std::nullopt;
    const double c = (svd.matrixU() * svd.matrixV().transpose()).determinant();
    SimilarityTransform T;
    T.R = svd.matrixU() * Vector3(1.0, 1.0, c).asDiagonal() *
          svd.matrixV().transpose();
    T.s = (D[0] + D[1] + c * D[2]) / tr_uu;
    if (!(T.s > 1e-6)) return std::nullopt;
    T.t = xbar - T.s * (T.R * ubar);
    return T;
}

}  // namespace mobcpd
