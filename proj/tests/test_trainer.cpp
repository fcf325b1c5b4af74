#include <gtest/gtest.h>

#include <chrono>
#include <cstdlib>
#include <numeric>

#include "gradcheck.hpp"
#include "moeforge/trainer.hpp"

using namespace moeforge;

namespace {

std::vector<Vector> gaussian_inputs(std::size_t count, std::size_t d, Rng& rng)
{
    std::vector<Vector> xs;
    for (std::size_t i = 0; i < count; ++i)
        xs.push_back(random_normal_vector(d, rng));
    return xs;
}

TrainConfig smoke_config()
{
    TrainConfig cfg;
    cfg.lr_max = 0.1;
    cfg.lr_final = 0.01;
    cfg.warmup_steps = 10;
    cfg.total_steps = 200;
    cfg.batch_size = 16;
    cfg.balance_coeff = 0.01;
    cfg.seed = 3;
    return cfg;
}

class ScopedThreads {
public:
    explicit ScopedThreads(const char* value)
    {
        if (const char* old = std::getenv("MOEFORGE_THREADS"))
            saved_ = old;
        ::setenv("MOEFORGE_THREADS", value, 1);
    }
    ~ScopedThreads()
    {
        if (saved_.empty())
            ::unsetenv("MOEFORGE_THREADS");
        else
            ::setenv("MOEFORGE_THREADS", saved_.c_str(), 1);
    }

private:
    std::string saved_;
};

} // namespace

TEST(LrSchedule, Endpoints)
{
    TrainConfig cfg;
    cfg.lr_max = 0.2;
    cfg.lr_final = 0.02;
    cfg.warmup_steps = 10;
    cfg.total_steps = 100;
    EXPECT_EQ(lr_at(0, cfg), 0.0);
    EXPECT_EQ(lr_at(10, cfg), 0.2);
    EXPECT_NEAR(lr_at(100, cfg), 0.02, 1e-15);
    EXPECT_NEAR(lr_at(5, cfg), 0.1, 1e-15);
    EXPECT_NEAR(lr_at(55, cfg), 0.11, 1e-15);
    EXPECT_THROW(lr_at(101, cfg), InvalidArgument);
}

TEST(LrSchedule, MonotoneWithinEachPhase)
{
    TrainConfig cfg;
    for (std::size_t s = 1; s <= cfg.warmup_steps; ++s)
        EXPECT_GE(lr_at(s, cfg), lr_at(s - 1, cfg));
    for (std::size_t s = cfg.warmup_steps + 1; s <= cfg.total_steps; ++s)
        EXPECT_LE(lr_at(s, cfg), lr_at(s - 1, cfg));
}

TEST(TrainConfig, RejectsInconsistentSettings)
{
    TrainConfig cfg;
    cfg.lr_final = 1.0;
    EXPECT_THROW(cfg.validate(), InvalidArgument);
    cfg = {};
    cfg.warmup_steps = cfg.total_steps + 1;
    EXPECT_THROW(cfg.validate(), InvalidArgument);
    cfg = {};
    cfg.batch_size = 0;
    EXPECT_THROW(cfg.validate(), InvalidArgument);
}

TEST(CvSquaredGrad, MatchesFiniteDifferences)
{
    Rng rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        Vector v(2 + rng.uniform_index(6));
        for (auto& e : v)
            e = rng.uniform(0.1, 3.0);
        const Vector g = detail::cv_squared_grad(v);
        for (std::size_t i = 0; i < v.size(); ++i) {
            Vector p = v, m = v;
            p[i] += 1e-6;
            m[i] -= 1e-6;
            const double fd = (cv_squared(p) - cv_squared(m)) / 2e-6;
            EXPECT_NEAR(g[i], fd, 1e-7 * std::max(1.0, std::abs(fd)));
        }
    }
}

TEST(Gradients, MatchCentralDifferencesWithoutNoise)
{
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
        const auto inst = gradcheck::small_instance(seed, false);
        const auto res = gradcheck::check(inst, 1e-5, 1e-8);
        EXPECT_LE(res.worst_ratio, 1.0) << "seed " << seed;
        EXPECT_GT(res.checked, 40u);
    }
}

TEST(Gradients, MatchCentralDifferencesWithNoiseReplay)
{
    for (std::uint64_t seed = 10; seed < 16; ++seed) {
        const auto inst = gradcheck::small_instance(seed, true);
        const auto res = gradcheck::check(inst, 1e-5, 1e-8);
        EXPECT_LE(res.worst_ratio, 1.0) << "seed " << seed;
        EXPECT_GT(res.checked, 40u);
    }
}

TEST(Gradients, ResidualExpertIsTrained)
{
    Rng rng(20);
    const DenseFfn teacher = DenseFfn::random(3, 8, rng);
    const Vector v{9, 8, 5, 4, 1, 0, 3, 2};
    gradcheck::Instance inst{assemble_moe(teacher, split_sharing_inter({v, v}, 2, 1.0), 1, GateInit::random(2)),
                             {}, {}, {}, 0.05};
    for (int b = 0; b < 4; ++b) {
        inst.inputs.push_back(random_normal_vector(3, rng));
        inst.targets.push_back(random_normal_vector(3, rng));
    }
    const auto res = gradcheck::check(inst, 1e-5, 1e-8);
    EXPECT_LE(res.worst_ratio, 1.0);
}

TEST(EvaluateBatch, GradientIndependentOfWorkerCount)
{
    const auto inst = gradcheck::small_instance(7, true, 9);
    MoeLayer g1 = zeros_like(inst.layer), g3 = zeros_like(inst.layer);
    BatchResult r1, r3;
    {
        ScopedThreads one("1");
        r1 = evaluate_batch(inst.layer, inst.inputs, inst.targets, inst.noise, inst.balance_coeff, &g1);
    }
    {
        ScopedThreads three("3");
        r3 = evaluate_batch(inst.layer, inst.inputs, inst.targets, inst.noise, inst.balance_coeff, &g3);
    }
    EXPECT_EQ(r1.loss, r3.loss);
    EXPECT_EQ(g1, g3);
}

TEST(TrainDistill, ZeroLearningRateLeavesLayerBitwiseUnchanged)
{
    Rng rng(2);
    const DenseFfn teacher = DenseFfn::random(8, 16, rng);
    MoeLayer layer = assemble_moe(teacher, split_independent_random(16, 4, rng), 2, GateInit::random(5));
    const MoeLayer before = layer;
    const auto data = gaussian_inputs(32, 8, rng);
    TrainConfig cfg = smoke_config();
    cfg.lr_max = 0.0;
    cfg.lr_final = 0.0;
    cfg.batch_size = 32;
    cfg.total_steps = 20;
    const TrainReport r = train_distill(layer, teacher, data, cfg);
    EXPECT_EQ(layer, before);
    for (double l : r.loss)
        EXPECT_EQ(l, r.loss.front());
    EXPECT_EQ(r.initial_mse, r.final_mse);
}

TEST(TrainDistill, SmokeRunReducesErrorQuickly)
{
    Rng rng(3);
    const DenseFfn teacher = DenseFfn::random(8, 16, rng);
    MoeLayer layer = assemble_moe(teacher, split_independent_random(16, 4, rng), 2);
    const auto data = gaussian_inputs(64, 8, rng);
    const auto start = std::chrono::steady_clock::now();
    const TrainReport r = train_distill(layer, teacher, data, smoke_config());
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    EXPECT_LT(secs, 10.0);
    EXPECT_LT(r.final_mse, r.initial_mse);
    EXPECT_EQ(r.loss.size(), 200u);
    EXPECT_EQ(r.lr.back(), smoke_config().lr_final);
}

TEST(TrainDistill, SmoothedLossIsNonincreasing)
{
    // With k = N the selected set never changes, so the objective is smooth in the
    // parameters. For k < N a routing flip is a jump in the loss and the windowed means
    // may rise.
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(40 + seed);
        const DenseFfn teacher = DenseFfn::random(8, 16, rng);
        MoeLayer layer = assemble_moe(teacher, split_independent_random(16, 4, rng), 4, GateInit::random(seed));
        const auto data = gaussian_inputs(64, 8, rng);
        TrainConfig cfg = smoke_config();
        cfg.batch_size = 64;
        cfg.total_steps = 500;
        const TrainReport r = train_distill(layer, teacher, data, cfg);
        constexpr std::size_t kWindow = 50;
        double prev = std::numeric_limits<double>::infinity();
        for (std::size_t s = 0; s + kWindow <= r.loss.size(); s += kWindow) {
            const double mean = std::accumulate(r.loss.begin() + s, r.loss.begin() + s + kWindow, 0.0) / kWindow;
            EXPECT_LE(mean, prev) << "seed " << seed << ", window starting at " << s;
            prev = mean;
        }
    }
}

TEST(TrainDistill, UniformGateSplitImprovesSubstantially)
{
    // The k = N, zero-router layer starts at y = FFN / N; SGD must learn the N-fold rescale.
    Rng rng(5);
    const DenseFfn teacher = DenseFfn::random(8, 16, rng);
    MoeLayer layer = assemble_moe(teacher, split_independent_random(16, 4, rng), 4);
    const auto data = gaussian_inputs(64, 8, rng);
    TrainConfig cfg;
    cfg.lr_max = 0.3;
    cfg.lr_final = 0.03;
    cfg.batch_size = 64;
    cfg.total_steps = 500;
    const TrainReport r = train_distill(layer, teacher, data, cfg);
    EXPECT_LT(r.final_mse, 0.05 * r.initial_mse);
}

TEST(TrainDistill, SameSeedSameResult)
{
    Rng rng(6);
    const DenseFfn teacher = DenseFfn::random(4, 8, rng);
    MoeLayer a = assemble_moe(teacher, split_independent_random(8, 4, rng), 2, GateInit::random(1), true);
    MoeLayer b = a;
    const auto data = gaussian_inputs(20, 4, rng);
    TrainConfig cfg = smoke_config();
    cfg.total_steps = 50;
    const TrainReport ra = train_distill(a, teacher, data, cfg);
    const TrainReport rb = train_distill(b, teacher, data, cfg);
    EXPECT_EQ(a, b);
    EXPECT_EQ(ra.loss, rb.loss);
}

TEST(TrainDistill, DivergenceCarriesPartialReport)
{
    Rng rng(7);
    const DenseFfn teacher = DenseFfn::random(4, 8, rng);
    MoeLayer layer = assemble_moe(teacher, split_independent_random(8, 2, rng), 1);
    const auto data = gaussian_inputs(16, 4, rng);
    TrainConfig cfg;
    cfg.lr_max = 1e6;
    cfg.lr_final = 1e6;
    cfg.warmup_steps = 0;
    cfg.total_steps = 200;
    try {
        train_distill(layer, teacher, data, cfg);
        FAIL() << "expected divergence";
    } catch (const TrainingDiverged& e) {
        EXPECT_LT(e.partial_report().loss.size(), 200u);
        for (double l : e.partial_report().loss)
            EXPECT_TRUE(std::isfinite(l));
    }
}

TEST(TrainDistill, RejectsShapeMismatchAndEmptyData)
{
    Rng rng(8);
    const DenseFfn teacher = DenseFfn::random(4, 8, rng);
    const DenseFfn other = DenseFfn::random(5, 8, rng);
    MoeLayer layer = assemble_moe(teacher, split_independent_random(8, 2, rng), 1);
    const auto data = gaussian_inputs(4, 4, rng);
    EXPECT_THROW(train_distill(layer, other, data, TrainConfig{}), ShapeError);
    EXPECT_THROW(train_distill(layer, teacher, std::vector<Vector>{}, TrainConfig{}), InvalidArgument);
}

TEST(CompareFromScratch, SplitStartsBelowScratch)
{
    Rng rng(9);
    const DenseFfn teacher = DenseFfn::random(8, 16, rng);
    const auto data = gaussian_inputs(32, 8, rng);
    TrainConfig cfg;
    cfg.total_steps = 20;
    cfg.warmup_steps = 5;
    cfg.batch_size = 32;
    const auto cmp = compare_from_scratch(teacher, split_independent_random(16, 4, rng), 4, data, cfg, rng);
    EXPECT_LT(cmp.split_report.loss.front(), cmp.scratch_report.loss.front());
    EXPECT_LT(cmp.split_report.initial_mse, cmp.scratch_report.initial_mse);
}

TEST(ScratchLike, SameSeedSameInitAndRouterKept)
{
    Rng rng(10);
    const DenseFfn teacher = DenseFfn::random(4, 8, rng);
    const MoeLayer layer = assemble_moe(teacher, split_independent_random(8, 2, rng), 1, GateInit::random(4));
    Rng a(77), b(77);
    const MoeLayer sa = scratch_like(layer, a);
    EXPECT_EQ(sa, scratch_like(layer, b));
    EXPECT_EQ(sa.gate, layer.gate);
    EXPECT_NE(sa.experts[0].weights, layer.experts[0].weights);
}
