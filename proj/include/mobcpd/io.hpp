#pragma once

#include <mobcpd/core.hpp>
#include <mobcpd/interpolation.hpp>
#include <mobcpd/organ_model.hpp>
#include <mobcpd/registration.hpp>

#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace mobcpd {

using nlohmann::json;

namespace detail {

inline std::string fmt10(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

inline bool parse_cloud_row(const std::string& line, Vector3& p, int& lab) {
    std::istringstream ss(line);
    char c1, c2, c3;
    return static_cast<bool>(ss >> p[0] >> c1 >> p[1] >> c2 >> p[2] >> c3 >> lab) &&
           c1 == ',' && c2 == ',' && c3 == ',';
}

}  // namespace detail

// ---- point cloud CSV: x,y,z,label ----

inline void write_cloud_csv(const std::string& path, const LabeledCloud& c) {
    std::ofstream out(path);
    if (!out) throw std::invalid_argument("cannot open for write: " + path);
    out << "x,y,z,label\n";
    for (int i = 0; i < c.size(); ++i)
        out << detail::fmt10(c.points(i, 0)) << ',' << detail::fmt10(c.points(i, 1))
            << ',' << detail::fmt10(c.points(i, 2)) << ',' << c.labels[i] << '\n';
}

inline LabeledCloud read_cloud_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open: " + path);
    std::vector<Vector3> pts;
    std::vector<int> labs;
    std::string line;
    long line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        Vector3 p;
        int lab;
        if (!detail::parse_cloud_row(line, p, lab)) {
            if (line_no == 1) continue;  // header row
            throw std::invalid_argument(path + ": malformed row at line " +
                                        std::to_string(line_no));
        }
        pts.push_back(p);
        labs.push_back(lab);
    }
    if (pts.empty()) throw std::invalid_argument(path + ": no data rows");
    LabeledCloud c;
    c.points.resize(pts.size(), 3);
    c.labels.resize(labs.size());
    int lmax = 0;
    for (size_t i = 0; i < pts.size(); ++i) {
        c.points.row(i) = pts[i].transpose();
        c.labels[i] = labs[i];
        lmax = std::max(lmax, labs[i]);
    }
    c.num_organs = lmax;
    c.validate();
    return c;
}

// ---- landmarks CSV: name,x,y,z ----

inline void write_landmarks_csv(const std::string& path, const Landmarks& lm) {
    std::ofstream out(path);
    if (!out) throw std::invalid_argument("cannot open for write: " + path);
    out << "name,x,y,z\n";
    for (const auto& [name, p] : lm)
        out << name << ',' << detail::fmt10(p[0]) << ',' << detail::fmt10(p[1])
            << ',' << detail::fmt10(p[2]) << '\n';
}

inline Landmarks read_landmarks_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open: " + path);
    Landmarks lm;
    std::string line;
    long line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        if (line_no == 1 && line.rfind("name,", 0) == 0) continue;
        const auto p1 = line.find(',');
        if (p1 == std::string::npos)
            throw std::invalid_argument(path + ": malformed row at line " +
                                        std::to_string(line_no));
        const std::string name = line.substr(0, p1);
        std::istringstream ss(line.substr(p1 + 1));
        Vector3 p;
        char c1, c2;
        if (name.empty() || !(ss >> p[0] >> c1 >> p[1] >> c2 >> p[2]) ||
            c1 != ',' || c2 != ',')
            throw std::invalid_argument(path + ": malformed row at line " +
                                        std::to_string(line_no));
        if (lm.count(name))
            throw std::invalid_argument(path + ": duplicate landmark '" + name +
                                        "'");
        lm[name] = p;
    }
    return lm;
}

// ---- similarity transform JSON ----

inline json transform_to_json(const SimilarityTransform& T) {
    json j;
    j["scale"] = T.s;
    std::vector<double> r;
    for (int i = 0; i < 3; ++i)
        for (int k = 0; k < 3; ++k) r.push_back(T.R(i, k));
    j["rotation"] = r;  // row-major
    j["translation"] = std::vector<double>{T.t[0], T.t[1], T.t[2]};
    return j;
}

inline SimilarityTransform transform_from_json(const json& j) {
    SimilarityTransform T;
    T.s = j.at("scale").get<double>();
    const auto r = j.at("rotation").get<std::vector<double>>();
    if (r.size() != 9)
        throw std::invalid_argument("transform: rotation must have 9 entries");
    for (int i = 0; i < 3; ++i)
        for (int k = 0; k < 3; ++k) T.R(i, k) = r[3 * i + k];
    const auto t = j.at("translation").get<std::vector<double>>();
    if (t.size() != 3)
        throw std::invalid_argument("transform: translation must have 3 entries");
    T.t = Vector3(t[0], t[1], t[2]);
    T.validate(1e-6);
    return T;
}

// ---- registration model JSON bundle ----

inline json matrix_to_json(const Matrix& m) {
    json rows = json::array();
    for (int i = 0; i < m.rows(); ++i) {
        json row = json::array();
        for (int k = 0; k < m.cols(); ++k) row.push_back(m(i, k));
        rows.push_back(row);
    }
    return rows;
}

inline Matrix matrix_from_json(const json& j, const std::string& what) {
    if (!j.is_array() || j.empty() || !j[0].is_array())
        throw std::invalid_argument(what + ": expected an array of rows");
    const size_t cols = j[0].size();
    Matrix m(j.size(), cols);
    for (size_t i = 0; i < j.size(); ++i) {
        if (j[i].size() != cols)
            throw std::invalid_argument(what + ": ragged rows");
        for (size_t k = 0; k < cols; ++k) m(i, k) = j[i][k].get<double>();
    }
    return m;
}

inline void save_model_json(const std::string& path, const RegistrationModel& m) {
    json j;
    j["source"]["points"] = matrix_to_json(m.source.points);
    j["source"]["labels"] =
        std::vector<int>(m.source.labels.data(),
                         m.source.labels.data() + m.source.labels.size());
    j["v"] = matrix_to_json(m.v);
    j["transform"] = transform_to_json(m.transform);
    j["lambda"] = std::vector<double>(m.organs.lambda.data(),
                                      m.organs.lambda.data() + m.organs.lambda.size());
    j["bandwidth"] =
        std::vector<double>(m.organs.bandwidth.data(),
                            m.organs.bandwidth.data() + m.organs.bandwidth.size());
    j["coupling"] = matrix_to_json(m.organs.coupling);
    std::ofstream out(path);
    if (!out) throw std::invalid_argument("cannot open for write: " + path);
    out << j.dump(1) << '\n';
}

inline RegistrationModel load_model_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw std::invalid_argument(path + ": not valid JSON: " + e.what());
    }
    LabeledCloud y;
    y.points = matrix_from_json(j.at("source").at("points"), "model source points");
    const auto labs = j.at("source").at("labels").get<std::vector<int>>();
    y.labels = Eigen::Map<const Eigen::VectorXi>(labs.data(), labs.size());
    y.num_organs = y.labels.size() ? y.labels.maxCoeff() : 0;
    const Matrix v = matrix_from_json(j.at("v"), "model v");
    OrganModel om;
    const auto lam = j.at("lambda").get<std::vector<double>>();
    const auto bw = j.at("bandwidth").get<std::vector<double>>();
    om.num_organs = static_cast<int>(lam.size());
    om.lambda = Eigen::Map<const Vector>(lam.data(), lam.size());
    om.bandwidth = Eigen::Map<const Vector>(bw.data(), bw.size());
    om.coupling = matrix_from_json(j.at("coupling"), "model coupling");
    if (y.num_organs > om.num_organs)
        throw std::invalid_argument(path + ": labels exceed organ parameters");
    y.num_organs = om.num_organs;
    return make_model(y, Points(v), transform_from_json(j.at("transform")), om);
}

// ---- registration config JSON (schema-checked, unknown keys rejected) ----

inline Vector per_organ_values(const json& j, int L, const std::string& key) {
    if (j.is_number()) return Vector::Constant(L, j.get<double>());
    if (j.is_array()) {
        const auto v = j.get<std::vector<double>>();
        if (static_cast<int>(v.size()) != L)
            throw std::invalid_argument("config: " + key + " has " +
                                        std::to_string(v.size()) +
                                        " entries, expected " + std::to_string(L));
        return Eigen::Map<const Vector>(v.data(), v.size());
    }
    throw std::invalid_argument("config: " + key + " must be a number or array");
}

// Builds a full registration config from a JSON document; L comes from the
// clouds unless the document pins num_organs.
inline RegistrationConfig config_from_json(const json& j, int cloud_organs) {
    static const std::vector<std::string> known = {
        "num_organs", "lambda",    "bandwidth", "coupling",
        "label_transition", "confusion", "gamma", "epsilon",
        "omega",      "kappa",     "max_iters", "outlier_pad_mm",
        "scale_mm"};
    for (const auto& [key, val] : j.items()) {
        (void)val;
        if (std::find(known.begin(), known.end(), key) == known.end())
            throw std::invalid_argument("config: unknown key '" + key + "'");
    }
    int L = cloud_organs;
    if (j.count("num_organs")) {
        L = j.at("num_organs").get<int>();
        if (L < cloud_organs)
            throw std::invalid_argument("config: num_organs below cloud labels");
    }

    RegistrationConfig cfg;
    cfg.organs.num_organs = L;
    cfg.organs.lambda = j.count("lambda") ? per_organ_values(j.at("lambda"), L, "lambda")
                                          : Vector::Constant(L, 10.0);
    cfg.organs.bandwidth = j.count("bandwidth")
                               ? per_organ_values(j.at("bandwidth"), L, "bandwidth")
                               : Vector::Constant(L, 30.0);
    cfg.organs.coupling = j.count("coupling")
                              ? matrix_from_json(j.at("coupling"), "coupling")
                              : Matrix::Ones(L, L);
    if (j.count("label_transition") && j.count("confusion"))
        throw std::invalid_argument(
            "config: give label_transition or confusion, not both");
    if (j.count("label_transition"))
        cfg.label_transition =
            matrix_from_json(j.at("label_transition"), "label_transition");
    if (j.count("confusion")) {
        ConfusionModel cm;
        cm.source_posterior = matrix_from_json(
            j.at("confusion").at("source_posterior"), "confusion.source_posterior");
        cm.target_likelihood = matrix_from_json(
            j.at("confusion").at("target_likelihood"), "confusion.target_likelihood");
        cfg.label_transition = build_label_transition(cm);
    }
    if (j.count("gamma")) cfg.gamma = j.at("gamma").get<double>();
    if (j.count("epsilon")) cfg.epsilon = j.at("epsilon").get<double>();
    if (j.count("omega")) cfg.omega = j.at("omega").get<double>();
    if (j.count("kappa")) cfg.kappa = j.at("kappa").get<double>();
    if (j.count("max_iters")) cfg.max_iters = j.at("max_iters").get<int>();
    if (j.count("outlier_pad_mm"))
        cfg.outlier_pad_mm = j.at("outlier_pad_mm").get<double>();
    if (j.count("scale_mm")) cfg.scale_mm = j.at("scale_mm").get<double>();
    cfg.validate();
    return cfg;
}

inline json diagnostics_to_json(const RegistrationResult& res,
                                const RegistrationConfig& cfg,
                                const std::string& mode) {
    json j;
    j["mode"] = mode;
    j["iterations"] = res.iterations;
    j["converged"] = res.converged;
    j["final_convergence_measure"] = res.final_measure;
    j["sigma2_trace"] = res.sigma2_trace;
    j["similarity_fallbacks"] = res.similarity_fallbacks;
    j["gram_repaired"] = res.gram_repaired;
    j["lambda"] = std::vector<double>(
        cfg.organs.lambda.data(),
        cfg.organs.lambda.data() + cfg.organs.lambda.size());
    j["bandwidth"] = std::vector<double>(
        cfg.organs.bandwidth.data(),
        cfg.organs.bandwidth.data() + cfg.organs.bandwidth.size());
    j["coupling"] = matrix_to_json(cfg.organs.coupling);
    j["label_transition"] = matrix_to_json(cfg.transition_or_identity());
    j["gamma"] = cfg.gamma;
    j["epsilon"] = cfg.epsilon;
    j["omega"] = cfg.omega;
    j["kappa"] = cfg.kappa;
    j["max_iters"] = cfg.max_iters;
    j["rank"] = cfg.rank;
    j["outlier_pad_mm"] = cfg.outlier_pad_mm;
    j["scale_mm"] = cfg.scale_mm;
    return j;
}

}  // namespace mobcpd
