#include <mobcpd/interpolation.hpp>
#include <mobcpd/synth.hpp>

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

using namespace mobcpd;
namespace fs = std::filesystem;

namespace {

LabeledCloud random_cloud(int M, int L, unsigned seed, double span = 30.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-span, span);
    LabeledCloud c;
    c.points.resize(M, 3);
    c.labels.resize(M);
    for (int i = 0; i < M; ++i) {
        for (int d = 0; d < 3; ++d) c.points(i, d) = u(rng);
        c.labels[i] = 1 + i % L;
    }
    c.num_organs = L;
    return c;
}

SimilarityTransform test_transform() {
    SimilarityTransform T;
    T.s = 1.2;
    T.R = Eigen::AngleAxisd(0.5, Vector3(1, -1, 2).normalized())
              .toRotationMatrix();
    T.t = Vector3(4.0, 0.0, -7.0);
    return T;
}

fs::path scratch_dir() {
    const fs::path p = fs::temp_directory_path() / "interp_test_scratch";
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST(InterpKernel, TrainingPointsReproduceGramExactly) {
    const LabeledCloud y = random_cloud(30, 2, 60);
    const OrganModel organs = OrganModel::uniform(2, 10.0, 30.0);
    const RegistrationModel m =
        make_model(y, Points::Random(30, 3), test_transform(), organs);
    ASSERT_FALSE(m.gram.repaired);
    const Matrix K = build_interp_kernel(m, y);
    EXPECT_LT((K - m.gram.G).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(InterpKernel, SinglePairMatchesClosedForm) {
    LabeledCloud y;
    y.points = Points::Zero(1, 3);
    y.labels = Eigen::VectorXi::Ones(1);
    y.num_organs = 1;
    const OrganModel organs = OrganModel::uniform(1, 10.0, 30.0);
    Points v(1, 3);
    v << 5.0, -2.0, 1.0;
    const RegistrationModel m = make_model(y, v, SimilarityTransform{}, organs);

    LabeledCloud q = y;
    q.points(0, 0) = 30.0 * std::sqrt(2.0);  // distance B * sqrt(2)
    const Matrix K = build_interp_kernel(m, q);
    EXPECT_NEAR(K(0, 0), 36.787944117144233, 1e-10);  // 100 / e
    // G is the 1x1 matrix [100], so the query weight is exp(-1)
    const Interpolated out = interpolate(m, q);
    EXPECT_LT(
        (out.displacement - std::exp(-1.0) * v).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Interpolate, ReproducesTrainingDisplacement) {
    const LabeledCloud y = random_cloud(40, 2, 61);
    std::mt19937_64 rng(62);
    const OrganModel organs = OrganModel::uniform(2, 10.0, 30.0);
    const Points v = detail::sample_gp_field(rng, y, organs);
    const RegistrationModel m = make_model(y, v, test_transform(), organs);
    ASSERT_FALSE(m.gram.repaired);
    const Interpolated out = interpolate(m, y);
    EXPECT_LT((out.displacement - v).cwiseAbs().maxCoeff(), 1e-8);
    const Points expect_def = similarity_apply(m.transform, Points(y.points + v));
    EXPECT_LT((out.deformed - expect_def).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Interpolate, MatchesDenseInverseOracle) {
    const LabeledCloud y = random_cloud(18, 2, 63);
    const OrganModel organs = OrganModel::uniform(2, 10.0, 30.0);
    const Points v = Points::Random(18, 3) * 3.0;
    const RegistrationModel m = make_model(y, v, SimilarityTransform{}, organs);
    const LabeledCloud q = random_cloud(7, 2, 64);
    const Matrix ref =
        build_interp_kernel(m, q) * m.gram.G.inverse() * Matrix(v);
    const Interpolated out = interpolate(m, q);
    EXPECT_LT((out.displacement - ref).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Interpolate, IsLinearInTheFittedField) {
    const LabeledCloud y = random_cloud(25, 1, 65);
    const OrganModel organs = OrganModel::uniform(1, 10.0, 30.0);
    const Points v1 = Points::Random(25, 3);
    const Points v2 = Points::Random(25, 3);
    const LabeledCloud q = random_cloud(9, 1, 66);
    const SimilarityTransform T = test_transform();
    const Points d1 = interpolate(make_model(y, v1, T, organs), q).displacement;
    const Points d2 = interpolate(make_model(y, v2, T, organs), q).displacement;
    const Points d12 =
        interpolate(make_model(y, Points(v1 + 2.0 * v2), T, organs), q)
            .displacement;
    EXPECT_LT((d12 - (d1 + 2.0 * d2)).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Interpolate, FarQueriesAndDecoupledOrgansGetZeroDisplacement) {
    const LabeledCloud y = random_cloud(20, 1, 67);
    const OrganModel organs = OrganModel::uniform(1, 10.0, 30.0);
    const RegistrationModel m =
        make_model(y, Points::Random(20, 3), test_transform(), organs);
    LabeledCloud far;
    far.points = Points::Constant(1, 3, 2000.0);
    far.labels = Eigen::VectorXi::Ones(1);
    far.num_organs = 1;
    const Interpolated out = interpolate(m, far);
    EXPECT_LT(out.displacement.cwiseAbs().maxCoeff(), 1e-12);
    // still moves rigidly with the similarity part
    EXPECT_LT((out.deformed.row(0).transpose() -
               similarity_apply(m.transform, Vector3(2000.0, 2000.0, 2000.0)))
                  .norm(),
              1e-9);

    OrganModel split = OrganModel::uniform(2, 10.0, 30.0);
    split.coupling = Matrix::Identity(2, 2);
    LabeledCloud y1 = y;
    y1.num_organs = 2;  // all training points stay organ 1
    const RegistrationModel ms =
        make_model(y1, Points::Random(20, 3), SimilarityTransform{}, split);
    LabeledCloud q2;
    q2.points = Points::Zero(1, 3);
    q2.labels = Eigen::VectorXi::Constant(1, 2);
    q2.num_organs = 2;
    EXPECT_EQ(interpolate(ms, q2).displacement.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Interpolate, HeldOutPointsOfSmoothFieldRecoverWithinTenPercent) {
    const LabeledCloud all = random_cloud(120, 1, 68);
    std::mt19937_64 rng(69);
    const OrganModel organs = OrganModel::uniform(1, 10.0, 30.0);
    const Points v = detail::sample_gp_field(rng, all, organs);

    LabeledCloud train;  // drop every tenth point
    Points vtrain(108, 3);
    train.points.resize(108, 3);
    train.labels.resize(108);
    train.num_organs = 1;
    LabeledCloud held;
    Points vheld(12, 3);
    held.points.resize(12, 3);
    held.labels.resize(12);
    held.num_organs = 1;
    int a = 0, b = 0;
    for (int i = 0; i < 120; ++i) {
        if (i % 10 == 0) {
            held.points.row(b) = all.points.row(i);
            held.labels[b] = 1;
            vheld.row(b++) = v.row(i);
        } else {
            train.points.row(a) = all.points.row(i);
            train.labels[a] = 1;
            vtrain.row(a++) = v.row(i);
        }
    }
    const RegistrationModel m =
        make_model(train, vtrain, SimilarityTransform{}, organs);
    const Interpolated out = interpolate(m, held);
    const double err = (out.displacement - vheld).rowwise().norm().mean();
    const double mag = v.rowwise().norm().mean();
    EXPECT_LT(err, 0.10 * mag);
}

TEST(Interpolate, RejectsQueryLabelsBeyondModel) {
    const LabeledCloud y = random_cloud(10, 2, 70);
    const RegistrationModel m =
        make_model(y, Points::Random(10, 3), SimilarityTransform{},
                   OrganModel::uniform(2, 10.0, 30.0));
    LabeledCloud q = random_cloud(3, 2, 71);
    q.labels[1] = 3;
    q.num_organs = 3;
    EXPECT_THROW(interpolate(m, q), std::invalid_argument);
}

TEST(WarpFile, WritesSchemaAndMatchesDirectInterpolation) {
    const fs::path dir = scratch_dir();
    const LabeledCloud y = random_cloud(25, 2, 72);
    std::mt19937_64 rng(73);
    const OrganModel organs = OrganModel::uniform(2, 10.0, 30.0);
    const Points v = detail::sample_gp_field(rng, y, organs);
    const RegistrationModel m = make_model(y, v, test_transform(), organs);

    const LabeledCloud q = random_cloud(50, 2, 74);
    const fs::path in = dir / "query.csv";
    {
        std::ofstream f(in);
        f << "x,y,z,label\n";
        for (int i = 0; i < q.size(); ++i) {
            char buf[160];
            std::snprintf(buf, sizeof(buf), "%.10g,%.10g,%.10g,%d\n",
                          q.points(i, 0), q.points(i, 1), q.points(i, 2),
                          q.labels[i]);
            f << buf;
        }
    }
    const fs::path out = dir / "warped.csv";
    EXPECT_EQ(warp_points_file(m, in.string(), out.string()), 50);

    std::ifstream f(out);
    std::string header;
    std::getline(f, header);
    EXPECT_EQ(header, "x,y,z,label,dx,dy,dz,x',y',z'");
    const Interpolated ref = interpolate(m, q);
    std::string line;
    int rows = 0;
    while (std::getline(f, line)) {
        double px, py, pz, dx, dy, dz, wx, wy, wz;
        int lab;
        ASSERT_EQ(std::sscanf(line.c_str(),
                              "%lf,%lf,%lf,%d,%lf,%lf,%lf,%lf,%lf,%lf", &px,
                              &py, &pz, &lab, &dx, &dy, &dz, &wx, &wy, &wz),
                  10);
        EXPECT_EQ(lab, q.labels[rows]);
        EXPECT_NEAR(dx, ref.displacement(rows, 0), 1e-6);
        EXPECT_NEAR(wx, ref.deformed(rows, 0), 1e-6);
        EXPECT_NEAR(wz, ref.deformed(rows, 2), 1e-6);
        ++rows;
    }
    EXPECT_EQ(rows, 50);
}

TEST(WarpFile, ChunkSizeDoesNotChangeBytes) {
    const fs::path dir = scratch_dir();
    const LabeledCloud y = random_cloud(20, 2, 75);
    const RegistrationModel m =
        make_model(y, Points::Random(20, 3), test_transform(),
                   OrganModel::uniform(2, 10.0, 30.0));
    const LabeledCloud q = random_cloud(33, 2, 76);
    const fs::path in = dir / "chunk_query.csv";
    {
        std::ofstream f(in);
        f << "x,y,z,label\n";
        for (int i = 0; i < q.size(); ++i)
            f << q.points(i, 0) << ',' << q.points(i, 1) << ',' << q.points(i, 2)
              << ',' << q.labels[i] << '\n';
    }
    const fs::path o1 = dir / "w1.csv", o2 = dir / "w2.csv", o3 = dir / "w3.csv";
    warp_points_file(m, in.string(), o1.string(), 1);
    warp_points_file(m, in.string(), o2.string(), 7);
    warp_points_file(m, in.string(), o3.string(), 4096);
    EXPECT_EQ(slurp(o1), slurp(o2));
    EXPECT_EQ(slurp(o1), slurp(o3));
    EXPECT_THROW(warp_points_file(m, in.string(), o1.string(), 0),
                 std::invalid_argument);
}

TEST(WarpFile, HeaderOnlyInputGivesEmptyOutput) {
    const fs::path dir = scratch_dir();
    const LabeledCloud y = random_cloud(10, 1, 77);
    const RegistrationModel m =
        make_model(y, Points::Random(10, 3), SimilarityTransform{},
                   OrganModel::uniform(1, 10.0, 30.0));
    const fs::path in = dir / "empty.csv";
    std::ofstream(in) << "x,y,z,label\n";
    const fs::path out = dir / "empty_out.csv";
    EXPECT_EQ(warp_points_file(m, in.string(), out.string()), 0);
    EXPECT_EQ(slurp(out), "x,y,z,label,dx,dy,dz,x',y',z'\n");
}

TEST(WarpFile, ReportsMalformedRowsWithLineNumbers) {
    const fs::path dir = scratch_dir();
    const LabeledCloud y = random_cloud(10, 1, 78);
    const RegistrationModel m =
        make_model(y, Points::Random(10, 3), SimilarityTransform{},
                   OrganModel::uniform(1, 10.0, 30.0));
    const fs::path in = dir / "bad.csv";
    std::ofstream(in) << "x,y,z,label\n1,2,3,1\nnot,a,row\n";
    try {
        warp_points_file(m, in.string(), (dir / "bad_out.csv").string());
        FAIL() << "expected malformed-row error";
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
    }
    const fs::path in2 = dir / "badlabel.csv";
    std::ofstream(in2) << "x,y,z,label\n1,2,3,9\n";
    try {
        warp_points_file(m, in2.string(), (dir / "bad_out2.csv").string());
        FAIL() << "expected label-range error";
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
    }
}

TEST(WarpFile, StreamsLargeInputs) {
    const fs::path dir = scratch_dir();
    const LabeledCloud y = random_cloud(30, 1, 79);
    const RegistrationModel m =
        make_model(y, Points::Random(30, 3), SimilarityTransform{},
                   OrganModel::uniform(1, 10.0, 30.0));
    const fs::path in = dir / "large.csv";
    {
        std::ofstream f(in);
        f << "x,y,z,label\n";
        for (int i = 0; i < 100000; ++i)
            f << (i % 97) * 0.5 << ',' << (i % 89) * 0.25 << ','
              << (i % 83) * 0.125 << ",1\n";
    }
    EXPECT_EQ(warp_points_file(m, in.string(), (dir / "large_out.csv").string()),
              100000);
}
