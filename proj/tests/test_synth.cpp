#include <mobcpd/synth.hpp>

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

using namespace mobcpd;

namespace {

bool clouds_identical(const LabeledCloud& a, const LabeledCloud& b) {
    return a.num_organs == b.num_organs && a.labels == b.labels &&
           a.points == b.points;
}

bool landmarks_identical(const Landmarks& a, const Landmarks& b) {
    if (a.size() != b.size()) return false;
    for (const auto& [n, p] : a) {
        const auto it = b.find(n);
        if (it == b.end() || it->second != p) return false;
    }
    return true;
}

}  // namespace

TEST(Generators, AreDeterministicInTheSeed) {
    const SyntheticCase a1 = gen_similarity_case(7, 60, 2, 0.5);
    const SyntheticCase a2 = gen_similarity_case(7, 60, 2, 0.5);
    EXPECT_TRUE(clouds_identical(a1.source, a2.source));
    EXPECT_TRUE(clouds_identical(a1.target, a2.target));
    EXPECT_TRUE(landmarks_identical(a1.source_landmarks, a2.source_landmarks));
    EXPECT_EQ(a1.true_transform.s, a2.true_transform.s);

    const SyntheticCase b1 =
        gen_gp_case(11, 90, 3, OrganModel::uniform(3, 6.0, 30.0), true);
    const SyntheticCase b2 =
        gen_gp_case(11, 90, 3, OrganModel::uniform(3, 6.0, 30.0), true);
    EXPECT_TRUE(clouds_identical(b1.source, b2.source));
    EXPECT_TRUE(clouds_identical(b1.target, b2.target));
    EXPECT_TRUE(b1.true_displacement == b2.true_displacement);

    const SyntheticCase c1 = gen_labelnoise_case(13, 60, 0.1);
    const SyntheticCase c2 = gen_labelnoise_case(13, 60, 0.1);
    EXPECT_TRUE(clouds_identical(c1.source, c2.source));
    EXPECT_TRUE(clouds_identical(c1.target, c2.target));

    const SyntheticCase a3 = gen_similarity_case(8, 60, 2, 0.5);
    EXPECT_FALSE(clouds_identical(a1.source, a3.source));
}

TEST(SimilarityCase, TransformStaysInsideDocumentedRanges) {
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
        const SyntheticCase c = gen_similarity_case(seed, 30, 1, 0.0);
        ASSERT_TRUE(c.has_transform);
        EXPECT_GE(c.true_transform.s, 0.7);
        EXPECT_LE(c.true_transform.s, 1.3);
        EXPECT_LE(c.true_transform.t.norm(), 50.0);
        EXPECT_NEAR(c.true_transform.R.determinant(), 1.0, 1e-12);
    }
}

TEST(SimilarityCase, NoiselessTargetIsExactlyTheTransformedSource) {
    const SyntheticCase c = gen_similarity_case(5, 60, 2, 0.0);
    const Points moved = similarity_apply(c.true_transform, c.source.points);
    // the target is a permutation of the transformed source
    for (int n = 0; n < c.target.size(); ++n) {
        double best = std::numeric_limits<double>::infinity();
        for (int m = 0; m < moved.rows(); ++m)
            best = std::min(best,
                            (c.target.points.row(n) - moved.row(m)).norm());
        EXPECT_LT(best, 1e-9);
    }
    // landmarks live on source points and map by the same transform
    Landmarks lm;
    for (const auto& [name, p] : c.source_landmarks)
        lm[name] = similarity_apply(c.true_transform, p);
    EXPECT_LT(tre(lm, c.target_landmarks).mean, 1e-9);
}

TEST(SimilarityCase, LandmarksFollowNamingSchemeAndCarryLabels) {
    const SyntheticCase c = gen_similarity_case(9, 80, 2, 0.5);
    EXPECT_TRUE(c.source_landmarks.count("o1_cen"));
    EXPECT_TRUE(c.source_landmarks.count("o2_cen"));
    EXPECT_TRUE(c.source_landmarks.count("o1_xmin"));
    EXPECT_TRUE(c.source_landmarks.count("o2_zmax"));
    EXPECT_EQ(c.source_landmarks.size(), c.target_landmarks.size());
    for (const auto& [name, p] : c.source_landmarks) {
        (void)p;
        ASSERT_TRUE(c.landmark_labels.count(name));
        const int l = c.landmark_labels.at(name);
        EXPECT_GE(l, 1);
        EXPECT_LE(l, 2);
        EXPECT_EQ(name.rfind("o" + std::to_string(l), 0), 0u);
    }
}

TEST(GpCase, SampledFieldMatchesKernelCovariance) {
    // pooled over 3 coordinates and 1000 draws the sample covariance of the
    // field at fixed points must reproduce G within 5%
    LabeledCloud y;
    y.points.resize(6, 3);
    y.points << 0, 0, 0, 12, 0, 0, 0, 18, 0, 25, 10, 5, -14, 3, 9, 4, -22, 17;
    y.labels = Eigen::VectorXi::Ones(6);
    y.num_organs = 1;
    const OrganModel truth = OrganModel::uniform(1, 6.0, 30.0);
    const GramMatrix gm = build_gram(y, truth);

    Rng rng(123);
    const int draws = 1000;
    Matrix acc = Matrix::Zero(6, 6);
    for (int k = 0; k < draws; ++k) {
        const Points v = detail::sample_gp_field(rng, y, truth);
        acc += v * v.transpose();  // sums the three per-coordinate outer products
    }
    const Matrix cov = acc / (3.0 * draws);
    for (const auto [i, j] : {std::pair{0, 0}, {1, 1}, {0, 1}, {2, 4}, {3, 5}})
        EXPECT_NEAR(cov(i, j), gm.G(i, j), 0.05 * gm.G.diagonal().maxCoeff())
            << "entry " << i << "," << j;
}

TEST(GpCase, VanishingPriorScaleFreezesTheField) {
    const SyntheticCase c =
        gen_gp_case(3, 60, 2, OrganModel::uniform(2, 1e-6, 30.0), false);
    EXPECT_LT(c.true_displacement.cwiseAbs().maxCoeff(), 1e-3);
}

TEST(GpCase, IndependentMotionSeparatesOrganDisplacements) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const SyntheticCase c =
            gen_gp_case(seed, 120, 3, OrganModel::uniform(3, 6.0, 30.0), true);
        std::vector<Vector3> mean(3, Vector3::Zero());
        std::vector<int> cnt(3, 0);
        for (int i = 0; i < c.source.size(); ++i) {
            mean[c.source.labels[i] - 1] +=
                c.true_displacement.row(i).transpose();
            ++cnt[c.source.labels[i] - 1];
        }
        for (int l = 0; l < 3; ++l) mean[l] /= cnt[l];
        for (int a = 0; a < 3; ++a)
            for (int b = a + 1; b < 3; ++b)
                EXPECT_GT((mean[a] - mean[b]).norm(), 10.0)
                    << "seed " << seed << " organs " << a << "," << b;
    }
}

TEST(GpCase, RespectsRequestedSizesAndLabels) {
    const SyntheticCase c =
        gen_gp_case(1, 290, 3, OrganModel::uniform(3, 6.0, 30.0), true);
    EXPECT_EQ(c.source.size(), 290);
    EXPECT_EQ(c.target.size(), 290);
    EXPECT_EQ(c.source.num_organs, 3);
    std::vector<int> per(3, 0);
    for (int i = 0; i < 290; ++i) ++per[c.source.labels[i] - 1];
    EXPECT_EQ(per[0] + per[1] + per[2], 290);
    // default organ fractions 0.45 / 0.30 / 0.25
    EXPECT_NEAR(per[0], 0.45 * 290, 1.0);
    EXPECT_NEAR(per[1], 0.30 * 290, 1.0);
    EXPECT_NEAR(per[2], 0.25 * 290, 1.0);
    EXPECT_THROW(
        gen_gp_case(1, 290, 2, OrganModel::uniform(3, 6.0, 30.0), true),
        std::invalid_argument);
}

TEST(CorruptLabels, ZeroRateIsIdentity) {
    const SyntheticCase c = gen_labelnoise_case(4, 40, 0.0);
    LabeledCloud base = c.source;
    base.labels = c.source_true_labels;
    const LabeledCloud out = corrupt_labels(base, 0.0, 99);
    EXPECT_TRUE(out.labels == base.labels);
}

TEST(CorruptLabels, FlipsExactlyTheBoundaryClosestFraction) {
    const SyntheticCase c = gen_labelnoise_case(6, 80, 0.0);
    LabeledCloud base = c.source;
    base.labels = c.source_true_labels;
    const int M = base.size();
    const LabeledCloud out = corrupt_labels(base, 0.10, 7);

    std::set<int> flipped;
    for (int i = 0; i < M; ++i)
        if (out.labels[i] != base.labels[i]) flipped.insert(i);
    EXPECT_EQ(static_cast<int>(flipped.size()),
              static_cast<int>(std::floor(0.10 * M)));

    // the flipped set is exactly the boundary-nearest decile
    std::vector<double> bdist(M);
    for (int i = 0; i < M; ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (int j = 0; j < M; ++j)
            if (base.labels[j] != base.labels[i])
                best = std::min(
                    best, (base.points.row(i) - base.points.row(j)).squaredNorm());
        bdist[i] = best;
    }
    std::vector<int> order(M);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](int a, int b) { return bdist[a] < bdist[b]; });
    std::set<int> expected(order.begin(),
                           order.begin() + static_cast<int>(flipped.size()));
    EXPECT_EQ(flipped, expected);

    LabeledCloud single = base;
    single.labels.setOnes();
    single.num_organs = 1;
    EXPECT_THROW(corrupt_labels(single, 0.1, 0), std::invalid_argument);
    EXPECT_THROW(corrupt_labels(base, 1.0, 0), std::invalid_argument);
}

TEST(LabelNoiseCase, CorruptsOnlySourceAndKeepsTruth) {
    const SyntheticCase c = gen_labelnoise_case(5, 130, 0.10);
    const int M = c.source.size();
    EXPECT_EQ(M, 260);
    int changed = 0;
    for (int i = 0; i < M; ++i)
        changed += c.source.labels[i] != c.source_true_labels[i] ? 1 : 0;
    EXPECT_EQ(changed, 26);  // floor(0.1 * 260)
    // target labels stay clean
    EXPECT_TRUE(c.target.labels == c.target_true_labels);
}

TEST(Tre, MatchesHandValuesAndRejectsMismatchedNames) {
    Landmarks moved{{"a", Vector3(3.0, 4.0, 0.0)}, {"b", Vector3(0.0, 0.0, 3.0)}};
    Landmarks target{{"a", Vector3::Zero()}, {"b", Vector3(0.0, 0.0, 8.0)}};
    const TreReport rep = tre(moved, target);
    EXPECT_NEAR(rep.per_landmark.at("a"), 5.0, 1e-12);
    EXPECT_NEAR(rep.per_landmark.at("b"), 5.0, 1e-12);
    EXPECT_NEAR(rep.mean, 5.0, 1e-12);
    EXPECT_NEAR(rep.stddev, 0.0, 1e-12);

    target["b"] = Vector3(0.0, 0.0, 6.0);  // distances 5 and 3
    const TreReport rep2 = tre(moved, target);
    EXPECT_NEAR(rep2.mean, 4.0, 1e-12);
    EXPECT_NEAR(rep2.stddev, 1.0, 1e-12);

    const TreReport zero = tre(target, target);
    EXPECT_EQ(zero.mean, 0.0);

    Landmarks other{{"c", Vector3::Zero()}};
    EXPECT_THROW(tre(moved, other), std::invalid_argument);
    other["d"] = Vector3::Zero();
    EXPECT_THROW(tre(moved, other), std::invalid_argument);
}

TEST(CorrespondenceAccuracy, CountsLabelAgreements) {
    Eigen::VectorXi am(4), st(4), tt(4);
    am << 0, 1, 2, 3;
    st << 1, 1, 2, 2;
    tt << 1, 1, 2, 2;
    EXPECT_DOUBLE_EQ(correspondence_accuracy(am, st, tt), 1.0);
    tt << 2, 2, 1, 1;
    EXPECT_DOUBLE_EQ(correspondence_accuracy(am, st, tt), 0.0);
    tt << 1, 2, 2, 1;
    EXPECT_DOUBLE_EQ(correspondence_accuracy(am, st, tt), 0.5);

    Matrix P = Matrix::Zero(4, 4);
    P(0, 3) = P(1, 2) = P(2, 1) = P(3, 0) = 1.0;  // reversing permutation
    tt << 2, 2, 1, 1;
    EXPECT_DOUBLE_EQ(correspondence_accuracy(P, st, tt), 1.0);

    Eigen::VectorXi bad(4);
    bad << 0, 1, 2, 9;
    EXPECT_THROW(correspondence_accuracy(bad, st, tt), std::invalid_argument);
    EXPECT_THROW(correspondence_accuracy(Matrix(0, 0), st, tt),
                 std::invalid_argument);
}
