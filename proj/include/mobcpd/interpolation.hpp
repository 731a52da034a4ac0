#pragma once

#include <mobcpd/core.hpp>
#include <mobcpd/kernel.hpp>
#include <mobcpd/organ_model.hpp>

#include <Eigen/Cholesky>

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

namespace mobcpd {

// Fitted registration packaged for displacement-field queries.  The kernel
// factorization and w = G^-1 v are computed once and reused across batches.
struct RegistrationModel {
    LabeledCloud source;
    Points v;
    SimilarityTransform transform;
    OrganModel organs;
    GramMatrix gram;       // validated (possibly jittered) G
    Eigen::LLT<Matrix> chol;
    Matrix w;              // M x 3, solve(G, v)

    int size() const { return source.size(); }
};

inline RegistrationModel make_model(const LabeledCloud& y, const Points& v,
                                    const SimilarityTransform& transform,
                                    const OrganModel& organs) {
    if (v.rows() != y.size())
        throw std::invalid_argument("model: v length != source size");
    RegistrationModel m;
    m.source = y;
    m.v = v;
    m.transform = transform;
    m.organs = organs;
    m.gram = validate_spd(build_gram(y, organs));
    m.chol.compute(m.gram.G);
    if (m.chol.info() != Eigen::Success)
        throw std::runtime_error("model: kernel factorization failed");
    m.w = m.chol.solve(Matrix(v));
    return m;
}

// Cross-covariance between labeled query points and the source cloud:
// Gint_ij = lam_qi lam_yj S(l_qi, l_yj) exp(-|q_i - y_j|^2 / (2 B_qi B_yj)).
inline Matrix build_interp_kernel(const RegistrationModel& m,
                                  const LabeledCloud& q) {
    q.validate();
    if (q.num_organs > m.organs.num_organs)
        throw std::invalid_argument("interp kernel: query label out of range");
    const int Q = q.size(), M = m.size();
    Matrix K(Q, M);
    for (int i = 0; i < Q; ++i) {
        const int li = q.labels[i] - 1;
        for (int j = 0; j < M; ++j) {
            const int lj = m.source.labels[j] - 1;
            const double s = m.organs.coupling(li, lj);
            K(i, j) =
                s > 0.0
                    ? m.organs.lambda[li] * m.organs.lambda[lj] * s *
                          std::exp(-(q.points.row(i) - m.source.points.row(j))
                                        .squaredNorm() /
                                   (2.0 * m.organs.bandwidth[li] *
                                    m.organs.bandwidth[lj]))
                    : 0.0;
        }
    }
    return K;
}

struct Interpolated {
    Points displacement;  // v^q = Gint w
    Points deformed;      // rho(q + v^q)
};

inline Interpolated interpolate(const RegistrationModel& m, const LabeledCloud& q) {
    Interpolated out;
    out.displacement = build_interp_kernel(m, q) * m.w;
    out.deformed =
        similarity_apply(m.transform, Points(q.points + out.displacement));
    return out;
}

// Streams `x,y,z,label` rows through the model in chunks, writing
// `x,y,z,label,dx,dy,dz,x',y',z'`.  Each row is evaluated independently
// (one kernel row, one small matrix-vector product), so output bytes do not
// depend on the chunk size.
inline long warp_points_file(const RegistrationModel& m,
                             const std::string& in_path,
                             const std::string& out_path, int chunk = 4096) {
    if (chunk < 1) throw std::invalid_argument("warp: chunk must be >= 1");
    std::ifstream in(in_path);
    if (!in) throw std::invalid_argument("warp: cannot open " + in_path);
    std::ofstream out(out_path);
    if (!out) throw std::invalid_argument("warp: cannot open " + out_path);
    out << "x,y,z,label,dx,dy,dz,x',y',z'\n";

    const int L = m.organs.num_organs;
    std::string line;
    long line_no = 0, written = 0;
    bool header_checked = false;
    std::vector<Vector3> pts;
    std::vector<int> labs;
    pts.reserve(chunk);
    labs.reserve(chunk);
    char buf[256];

    const auto flush = [&]() {
        for (size_t i = 0; i < pts.size(); ++i) {
            LabeledCloud q;
            q.points.resize(1, 3);
            q.points.row(0) = pts[i].transpose();
            q.labels.resize(1);
            q.labels[0] = labs[i];
            q.num_organs = L;
            const Matrix k = build_interp_kernel(m, q);
            const Vector3 d = (k * m.w).row(0).transpose();
            const Vector3 p = similarity_apply(m.transform, Vector3(pts[i] + d));
            std::snprintf(buf, sizeof(buf),
                          "%.10g,%.10g,%.10g,%d,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g\n",
                          pts[i][0], pts[i][1], pts[i][2], labs[i], d[0], d[1],
                          d[2], p[0], p[1], p[2]);
            out << buf;
            ++written;
        }
        pts.clear();
        labs.clear();
    };

    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        std::istringstream ss(line);
        Vector3 p;
        int lab;
        char c1, c2, c3;
        if (!(ss >> p[0] >> c1 >> p[1] >> c2 >> p[2] >> c3 >> lab) || c1 != ',' ||
            c2 != ',' || c3 != ',') {
            if (!header_checked) {
                header_checked = true;
                continue;  // header row
            }
            throw std::invalid_argument("warp: malformed row at line " +
                                        std::to_string(line_no) + " of " + in_path);
        }
        header_checked = true;
        if (lab < 1 || lab > L)
            throw std::invalid_argument("warp: label out of range at line " +
                                        std::to_string(line_no) + " of " + in_path);
        pts.push_back(p);
        labs.push_back(lab);
        if (static_cast<int>(pts.size()) >= chunk) flush();
    }
    flush();
    return written;
}

}  // namespace mobcpd
