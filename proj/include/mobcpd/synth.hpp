#pragma once

#include <mobcpd/core.hpp>
#include <mobcpd/kernel.hpp>
#include <mobcpd/organ_model.hpp>

#include <Eigen/Cholesky>
#include <Eigen/Geometry>

#include <algorithm>
#include <cstdint>
#include <iterator>
#include <map>
#include <numeric>
#include <random>
#include <vector>

namespace mobcpd {

using Rng = std::mt19937_64;

inline Vector3 random_unit(Rng& rng) {
    std::normal_distribution<double> n;
    Vector3 d;
    do {
        d << n(rng), n(rng), n(rng);
    } while (d.norm() < 1e-12);
    return d.normalized();
}

inline Matrix3 random_rotation(Rng& rng) {
    std::normal_distribution<double> n;
    Eigen::Vector4d q;
    do {
        q << n(rng), n(rng), n(rng), n(rng);
    } while (q.norm() < 1e-12);
    q.normalize();
    return Eigen::Quaterniond(q[0], q[1], q[2], q[3]).toRotationMatrix();
}

inline Matrix3 axis_angle_rotation(const Vector3& axis, double angle) {
    return Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix();
}

struct SyntheticCase {
    LabeledCloud source;  // labels as observed (possibly corrupted)
    LabeledCloud target;
    Eigen::VectorXi source_true_labels;
    Eigen::VectorXi target_true_labels;
    Points true_displacement;  // noiseless target of source i = y_i + row i
    SimilarityTransform true_transform;
    bool has_transform = false;
    Landmarks source_landmarks, target_landmarks;
    std::map<std::string, int> landmark_labels;
    std::uint64_t seed = 0;
};

namespace detail {

// per-organ landmark set: center-nearest point, six axis extremes, and a
// random pick, all on cloud points so GP interpolation reproduces them exactly
inline std::map<std::string, int> landmark_indices(Rng& rng, const Points& y,
                                                   const Eigen::VectorXi& ly,
                                                   int L, int n_rand = 15) {
    std::map<std::string, int> idx;
    char name[32];
    for (int l = 1; l <= L; ++l) {
        std::vector<int> w;
        for (int i = 0; i < ly.size(); ++i)
            if (ly[i] == l) w.push_back(i);
        if (w.empty()) continue;
        Vector3 c = Vector3::Zero();
        for (int i : w) c += y.row(i).transpose();
        c /= static_cast<double>(w.size());
        int best = w[0];
        double bd = std::numeric_limits<double>::infinity();
        for (int i : w) {
            const double d = (y.row(i).transpose() - c).squaredNorm();
            if (d < bd) {
                bd = d;
                best = i;
            }
        }
        std::snprintf(name, sizeof(name), "o%d_cen", l);
        idx[name] = best;
        const char* ax = "xyz";
        for (int a = 0; a < 3; ++a) {
            int imin = w[0], imax = w[0];
            for (int i : w) {
                if (y(i, a) < y(imin, a)) imin = i;
                if (y(i, a) > y(imax, a)) imax = i;
            }
            std::snprintf(name, sizeof(name), "o%d_%cmin", l, ax[a]);
            idx[name] = imin;
            std::snprintf(name, sizeof(name), "o%d_%cmax", l, ax[a]);
            idx[name] = imax;
        }
        std::vector<int> pick;
        std::sample(w.begin(), w.end(), std::back_inserter(pick),
                    std::min<size_t>(n_rand, w.size()), rng);
        for (size_t i = 0; i < pick.size(); ++i) {
            std::snprintf(name, sizeof(name), "o%d_p%02d", l, static_cast<int>(i));
            idx[name] = pick[i];
        }
    }
    return idx;
}

inline std::vector<int> organ_sizes(int M, int L,
                                    const std::vector<double>& fractions) {
    std::vector<int> Ms(L, 0);
    if (static_cast<int>(fractions.size()) == L) {
        int rest = 0;
        for (int l = 1; l < L; ++l) {
            Ms[l] = static_cast<int>(std::lround(M * fractions[l]));
            rest += Ms[l];
        }
        Ms[0] = M - rest;
    } else {
        for (int l = 0; l < L; ++l) Ms[l] = M / L + (l < M % L ? 1 : 0);
    }
    return Ms;
}

// organ centers equally spaced on a circle of radius sep / (2 sin(pi/L)) in a
// random plane, so adjacent centers are sep apart
inline std::vector<Vector3> organ_centers(Rng& rng, int L, double sep,
                                          const Matrix3& Rs) {
    std::uniform_real_distribution<double> u(-15.0, 15.0);
    Vector3 c0(u(rng), u(rng), u(rng));
    std::vector<Vector3> centers;
    if (L == 1) {
        centers.push_back(c0);
        return centers;
    }
    const double r = sep / (2.0 * std::sin(M_PI / L));
    for (int l = 0; l < L; ++l) {
        const double th = 2.0 * M_PI * l / L;
        centers.push_back(c0 + r * std::cos(th) * Rs.col(0) +
                          r * std::sin(th) * Rs.col(1));
    }
    return centers;
}

inline Points ellipsoid_shell(Rng& rng, int n, const Matrix3& A,
                              const Vector3& center) {
    Points p(n, 3);
    for (int i = 0; i < n; ++i)
        p.row(i) = (center + A * random_unit(rng)).transpose();
    return p;
}

// v drawn coordinatewise from N(0, G) via the jittered Cholesky factor
inline Points sample_gp_field(Rng& rng, const LabeledCloud& y,
                              const OrganModel& truth) {
    GramMatrix gm = build_gram(y, truth);
    gm.G.diagonal().array() += 1e-10 * gm.G.diagonal().mean();
    Eigen::LLT<Matrix> llt(gm.G);
    if (llt.info() != Eigen::Success)
        throw std::runtime_error("gp sample: kernel factorization failed");
    std::normal_distribution<double> n;
    Points z(y.size(), 3);
    for (int i = 0; i < z.rows(); ++i)
        for (int d = 0; d < 3; ++d) z(i, d) = n(rng);
    return Matrix(llt.matrixL()) * z;
}

inline void finish_case(SyntheticCase& c, Rng& rng, const Points& y,
                        const Eigen::VectorXi& ly, int L, const Points& disp,
                        double noise_mm) {
    const int M = static_cast<int>(y.rows());
    Points x = y + disp;
    if (noise_mm > 0.0) {
        std::normal_distribution<double> n(0.0, noise_mm);
        for (int i = 0; i < M; ++i)
            for (int d = 0; d < 3; ++d) x(i, d) += n(rng);
    }
    std::vector<int> perm(M);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);

    c.source.points = y;
    c.source.labels = ly;
    c.source.num_organs = L;
    c.target.points.resize(M, 3);
    c.target.labels.resize(M);
    for (int i = 0; i < M; ++i) {
        c.target.points.row(i) = x.row(perm[i]);
        c.target.labels[i] = ly[perm[i]];
    }
    c.target.num_organs = L;
    c.source_true_labels = ly;
    c.target_true_labels = c.target.labels;
    c.true_displacement = disp;

    const auto lmi = landmark_indices(rng, y, ly, L);
    for (const auto& [name, i] : lmi) {
        c.source_landmarks[name] = y.row(i).transpose();
        c.target_landmarks[name] = (y.row(i) + disp.row(i)).transpose();
        c.landmark_labels[name] = ly[i];
    }
}

}  // namespace detail

// L ellipsoid shells moved by one global similarity plus isotropic jitter.
// Rotation angle is bounded at 30 degrees to stay in the regime a
// similarity-only fit can recover from an identity start.
inline SyntheticCase gen_similarity_case(std::uint64_t seed, int M, int L,
                                         double noise_mm) {
    if (M < 10 || L < 1)
        throw std::invalid_argument("gen_similarity_case: need M >= 10, L >= 1");
    Rng rng(seed);
    SyntheticCase c;
    c.seed = seed;
    const Matrix3 Rs = random_rotation(rng);
    const auto centers = detail::organ_centers(rng, L, 48.0, Rs);
    const Matrix3 A = Rs * Vector3(20.0, 16.0, 14.0).asDiagonal() * Rs.transpose();
    const auto Ms = detail::organ_sizes(M, L, {});

    Points y(M, 3);
    Eigen::VectorXi ly(M);
    int at = 0;
    for (int l = 0; l < L; ++l) {
        y.middleRows(at, Ms[l]) = detail::ellipsoid_shell(rng, Ms[l], A, centers[l]);
        ly.segment(at, Ms[l]).setConstant(l + 1);
        at += Ms[l];
    }

    std::uniform_real_distribution<double> uang(0.0, 30.0 * M_PI / 180.0);
    std::uniform_real_distribution<double> usc(0.7, 1.3);
    std::uniform_real_distribution<double> utr(0.0, 50.0);
    const Vector3 axis = random_unit(rng);
    c.true_transform.R = axis_angle_rotation(axis, uang(rng));
    c.true_transform.s = usc(rng);
    const Vector3 tdir = random_unit(rng);
    c.true_transform.t = utr(rng) * tdir;
    c.has_transform = true;

    const Points moved = similarity_apply(c.true_transform, y);
    detail::finish_case(c, rng, y, ly, L, Points(moved - y), noise_mm);
    return c;
}

// Tuning knobs for gen_gp_case geometry and the independent-motion offsets.
// Defaults reproduce the three-organ benchmark family.
struct GpCaseParams {
    double sep = 48.0;                 // adjacent organ center spacing (mm)
    Vector3 base_axes{20.0, 16.0, 14.0};
    double axes_jitter = 0.05;         // relative per-organ axis perturbation
    double noise_mm = 1.0;
    std::vector<double> fractions{0.45, 0.30, 0.25};  // organ size split
    double offset_lo = 14.0, offset_hi = 22.0;        // per-organ rigid offsets
    double min_offset_diff = 24.0;     // pairwise offset separation (mm)
    double min_gap = 4.0;              // post-move inter-organ clearance (mm)
    double resid_lo = 4.0, resid_hi = 12.0;  // center-fit residual window (mm)
    int max_attempts = 400;
};

// Draws v from the organ-model prior; with independent_motion, adds per-organ
// rigid offsets rejected until no single similarity of the organ centers
// explains them (residual window), offsets differ pairwise by at least
// min_offset_diff, and the moved organs keep a minimum clearance.
inline SyntheticCase gen_gp_case(std::uint64_t seed, int M, int L,
                                 const OrganModel& truth, bool independent_motion,
                                 const GpCaseParams& p = GpCaseParams{}) {
    truth.validate();
    if (L != truth.num_organs)
        throw std::invalid_argument("gen_gp_case: L != truth model organs");
    if (M < L) throw std::invalid_argument("gen_gp_case: M < L");
    Rng rng(seed);
    SyntheticCase c;
    c.seed = seed;
    const Matrix3 Rs = random_rotation(rng);
    const auto centers = detail::organ_centers(rng, L, p.sep, Rs);
    const auto Ms = detail::organ_sizes(M, L, p.fractions);
    std::uniform_real_distribution<double> ujit(1.0 - p.axes_jitter,
                                                1.0 + p.axes_jitter);
    std::vector<Matrix3> As;
    for (int l = 0; l < L; ++l) {
        Vector3 ax = p.base_axes;
        if (p.axes_jitter > 0.0)
            ax = ax.cwiseProduct(Vector3(ujit(rng), ujit(rng), ujit(rng)));
        As.push_back(Rs * ax.asDiagonal() * Rs.transpose());
    }

    Points y(M, 3), v(M, 3), disp(M, 3);
    Eigen::VectorXi ly(M);
    for (int attempt = 0; attempt < p.max_attempts; ++attempt) {
        int at = 0;
        for (int l = 0; l < L; ++l) {
            y.middleRows(at, Ms[l]) =
                detail::ellipsoid_shell(rng, Ms[l], As[l], centers[l]);
            ly.segment(at, Ms[l]).setConstant(l + 1);
            at += Ms[l];
        }
        LabeledCloud yc;
        yc.points = y;
        yc.labels = ly;
        yc.num_organs = L;
        v = detail::sample_gp_field(rng, yc, truth);

        if (!independent_motion) {
            disp = v;
            break;
        }

        std::uniform_real_distribution<double> umag(p.offset_lo, p.offset_hi);
        std::vector<Vector3> off;
        for (int l = 0; l < L; ++l) {
            const Vector3 dir = random_unit(rng);
            off.push_back(umag(rng) * dir);
        }
        bool bad = false;
        for (int a = 0; a < L && !bad; ++a)
            for (int b = a + 1; b < L; ++b)
                if ((off[a] - off[b]).norm() < p.min_offset_diff) bad = true;
        if (bad) continue;

        // reject offset sets explainable by one similarity of the centers
        Points src_c(L, 3), dst_c(L, 3);
        for (int l = 0; l < L; ++l) {
            src_c.row(l) = centers[l].transpose();
            dst_c.row(l) = (centers[l] + off[l]).transpose();
        }
        if (L >= 3) {
            const auto fit =
                similarity_fit(src_c, dst_c, Vector::Ones(L));
            if (fit) {
                const double resid =
                    (similarity_apply(*fit, src_c) - dst_c).rowwise().norm().mean();
                if (resid < p.resid_lo || resid > p.resid_hi) continue;
            }
        }

        for (int i = 0; i < M; ++i)
            disp.row(i) = v.row(i) + off[ly[i] - 1].transpose();
        const Points moved = y + disp;
        bool ok = true;
        for (int a = 1; a <= L && ok; ++a)
            for (int b = a + 1; b <= L && ok; ++b) {
                double dmin = std::numeric_limits<double>::infinity();
                for (int i = 0; i < M; ++i) {
                    if (ly[i] != a) continue;
                    for (int j = 0; j < M; ++j) {
                        if (ly[j] != b) continue;
                        dmin = std::min(
                            dmin, (moved.row(i) - moved.row(j)).squaredNorm());
                    }
                }
                if (std::sqrt(dmin) < p.min_gap) ok = false;
            }
        if (ok) break;
    }

    detail::finish_case(c, rng, y, ly, L, disp, p.noise_mm);
    return c;
}

// Flips the labels of the floor(rate*M) points closest to another organ to
// that organ's label.  The flip set is the deterministic boundary-distance
// ranking; the seed argument only breaks exact distance ties.
inline LabeledCloud corrupt_labels(const LabeledCloud& cloud, double rate,
                                   std::uint64_t seed) {
    cloud.validate();
    if (rate < 0.0 || rate >= 1.0)
        throw std::invalid_argument("corrupt_labels: rate outside [0, 1)");
    if (cloud.num_organs < 2)
        throw std::invalid_argument("corrupt_labels: need at least 2 organs");
    const int M = cloud.size();
    const int nflip = static_cast<int>(std::floor(rate * M));
    std::vector<double> bdist(M);
    std::vector<int> nearest_other(M, -1);
    for (int i = 0; i < M; ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (int j = 0; j < M; ++j) {
            if (cloud.labels[j] == cloud.labels[i]) continue;
            const double d = (cloud.points.row(i) - cloud.points.row(j)).squaredNorm();
            if (d < best) {
                best = d;
                nearest_other[i] = j;
            }
        }
        bdist[i] = best;
    }
    std::vector<int> order(M);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1e-12);
    std::vector<double> tie(M);
    for (int i = 0; i < M; ++i) tie[i] = u(rng);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        return bdist[a] + tie[a] < bdist[b] + tie[b];
    });
    LabeledCloud out = cloud;
    for (int k = 0; k < nflip; ++k) {
        const int i = order[k];
        if (nearest_other[i] >= 0) out.labels[i] = cloud.labels[nearest_other[i]];
    }
    return out;
}

// Two close ellipsoids under a mild prior field, with boundary-biased label
// corruption on the source side.  The target keeps clean labels.
inline SyntheticCase gen_labelnoise_case(std::uint64_t seed, int points_per_organ,
                                         double rate) {
    Rng rng(seed);
    const int L = 2;
    const int M = 2 * points_per_organ;
    SyntheticCase c;
    c.seed = seed;
    const Matrix3 Rs = random_rotation(rng);
    std::uniform_real_distribution<double> u(-15.0, 15.0);
    const Vector3 c0(u(rng), u(rng), u(rng));
    const Vector3 axis = Rs.col(0);
    const std::vector<Vector3> centers{c0, c0 + 42.0 * axis};
    const std::vector<Matrix3> As{
        Rs * Vector3(22.0, 16.0, 13.0).asDiagonal() * Rs.transpose(),
        Rs * Vector3(18.0, 15.0, 12.0).asDiagonal() * Rs.transpose()};

    Points y(M, 3);
    Eigen::VectorXi ly(M);
    for (int l = 0; l < L; ++l) {
        y.middleRows(l * points_per_organ, points_per_organ) =
            detail::ellipsoid_shell(rng, points_per_organ, As[l], centers[l]);
        ly.segment(l * points_per_organ, points_per_organ).setConstant(l + 1);
    }
    LabeledCloud yc;
    yc.points = y;
    yc.labels = ly;
    yc.num_organs = L;
    const OrganModel truth = [] {
        OrganModel m = OrganModel::uniform(2, 3.5, 30.0);
        m.coupling = Matrix::Identity(2, 2);
        return m;
    }();
    const Points v = detail::sample_gp_field(rng, yc, truth);

    std::uniform_real_distribution<double> umag(1.5, 3.0);
    Points disp(M, 3);
    std::vector<Vector3> off;
    for (int l = 0; l < L; ++l) {
        const Vector3 dir = random_unit(rng);
        off.push_back(umag(rng) * dir);
    }
    for (int i = 0; i < M; ++i)
        disp.row(i) = v.row(i) + off[ly[i] - 1].transpose();

    detail::finish_case(c, rng, y, ly, L, disp, 0.3);
    const LabeledCloud corrupted = corrupt_labels(c.source, rate, seed);
    c.source.labels = corrupted.labels;  // observed labels; truth kept aside
    return c;
}

// Target registration error over paired named landmarks.
struct TreReport {
    std::map<std::string, double> per_landmark;
    double mean = 0.0;
    double stddev = 0.0;  // population std
};

inline TreReport tre(const Landmarks& moved, const Landmarks& target) {
    if (moved.size() != target.size())
        throw std::invalid_argument("tre: landmark name sets differ");
    TreReport rep;
    double sum = 0.0, sum2 = 0.0;
    for (const auto& [name, p] : moved) {
        const auto it = target.find(name);
        if (it == target.end())
            throw std::invalid_argument("tre: landmark '" + name +
                                        "' missing on target side");
        const double d = (p - it->second).norm();
        rep.per_landmark[name] = d;
        sum += d;
        sum2 += d * d;
    }
    const double n = static_cast<double>(moved.size());
    if (n > 0) {
        rep.mean = sum / n;
        rep.stddev = std::sqrt(std::max(0.0, sum2 / n - rep.mean * rep.mean));
    }
    return rep;
}

// Fraction of source points whose best-responsibility target point carries the
// source point's true organ.
inline double correspondence_accuracy(const Eigen::VectorXi& argmax,
                                      const Eigen::VectorXi& source_true,
                                      const Eigen::VectorXi& target_true) {
    if (argmax.size() < 1)
        throw std::invalid_argument("correspondence_accuracy: empty assignment");
    if (argmax.size() != source_true.size())
        throw std::invalid_argument("correspondence_accuracy: size mismatch");
    int hits = 0;
    for (int m = 0; m < argmax.size(); ++m) {
        if (argmax[m] < 0 || argmax[m] >= target_true.size())
            throw std::invalid_argument("correspondence_accuracy: index range");
        hits += target_true[argmax[m]] == source_true[m] ? 1 : 0;
    }
    return static_cast<double>(hits) / argmax.size();
}

inline double correspondence_accuracy(const Matrix& P,
                                      const Eigen::VectorXi& source_true,
                                      const Eigen::VectorXi& target_true) {
    if (P.rows() < 1 || P.cols() < 1)
        throw std::invalid_argument("correspondence_accuracy: empty P");
    Eigen::VectorXi am(P.rows());
    for (int m = 0; m < P.rows(); ++m) {
        int best = 0;
        P.row(m).maxCoeff(&best);
        am[m] = best;
    }
    return correspondence_accuracy(am, source_true, target_true);
}

}  // namespace mobcpd
