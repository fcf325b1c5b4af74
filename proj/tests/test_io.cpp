#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <limits>

#include "moeforge/io.hpp"

using namespace moeforge;

namespace {

double random_finite_double(Rng& rng)
{
    for (;;) {
        const double v = std::bit_cast<double>(rng.next());
        if (std::isfinite(v))
            return v;
    }
}

TensorList random_tensors(Rng& rng)
{
    TensorList out;
    const std::size_t count = rng.uniform_index(6);
    for (std::size_t i = 0; i < count; ++i) {
        NamedTensor t;
        t.name = "t" + std::to_string(i) + (rng.uniform_index(2) ? ".\xc3\xa9" : "");
        const std::size_t rank = rng.uniform_index(4);
        std::size_t elems = 1;
        for (std::size_t r = 0; r < rank; ++r) {
            t.dims.push_back(rng.uniform_index(5));
            elems *= t.dims.back();
        }
        for (std::size_t e = 0; e < elems; ++e)
            t.data.push_back(random_finite_double(rng));
        out.push_back(std::move(t));
    }
    return out;
}

bool bitwise_equal(const TensorList& a, const TensorList& b)
{
    if (a.size() != b.size())
        return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].name != b[i].name || a[i].dims != b[i].dims || a[i].data.size() != b[i].data.size())
            return false;
        if (std::memcmp(a[i].data.data(), b[i].data.data(), a[i].data.size() * sizeof(double)) != 0)
            return false;
    }
    return true;
}

} // namespace

TEST(Mft, RoundTripIsBitwiseLosslessForFinitePayloads)
{
    Rng rng(1);
    for (int trial = 0; trial < 500; ++trial) {
        const TensorList tensors = random_tensors(rng);
        const std::string bytes = encode_mft(tensors);
        ASSERT_TRUE(bitwise_equal(decode_mft(bytes), tensors)) << "trial " << trial;
        ASSERT_EQ(encode_mft(decode_mft(bytes)), bytes);
    }
}

TEST(Mft, EdgeValuesSurvive)
{
    const TensorList t{{"edge",
                        {6},
                        {-0.0, std::numeric_limits<double>::denorm_min(), std::numeric_limits<double>::max(),
                         std::numeric_limits<double>::lowest(), 1.0 / 3.0, -1e-300}}};
    EXPECT_TRUE(bitwise_equal(decode_mft(encode_mft(t)), t));
    EXPECT_TRUE(std::signbit(decode_mft(encode_mft(t))[0].data[0]));
}

TEST(Mft, LayoutIsLittleEndianWithDocumentedHeader)
{
    const std::string bytes = encode_mft({{"a", {1}, {1.0}}});
    const std::string expected = std::string("MFT1") + std::string("\x01\x00\x00\x00", 4) +
                                 std::string("\x01\x00\x00\x00", 4) + "a" + std::string("\x01\x00\x00\x00", 4) +
                                 std::string("\x01\x00\x00\x00\x00\x00\x00\x00", 8) +
                                 std::string("\x00\x00\x00\x00\x00\x00\xf0\x3f", 8);
    EXPECT_EQ(bytes, expected);
}

TEST(Mft, MalformedInputsAreFormatErrors)
{
    const std::string good = encode_mft({{"a", {2}, {1.0, 2.0}}});
    EXPECT_THROW(decode_mft("MFT2" + good.substr(4)), FormatError);
    for (std::size_t cut = 0; cut < good.size(); ++cut)
        EXPECT_THROW(decode_mft(good.substr(0, cut)), FormatError) << "cut " << cut;
    EXPECT_THROW(decode_mft(good + "x"), FormatError);
    EXPECT_THROW(encode_mft({{"a", {1}, {1.0}}, {"a", {1}, {2.0}}}), FormatError);
    EXPECT_THROW(encode_mft({{"a", {3}, {1.0}}}), FormatError);
}

TEST(Mft, MissingTensorNamesTheTensor)
{
    try {
        find_tensor({{"present", {1}, {0.0}}}, "w_gate");
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("'w_gate'"), std::string::npos);
    }
}

TEST(Mft, FileRoundTrip)
{
    Rng rng(2);
    const DenseFfn f = DenseFfn::random(3, 6, rng);
    const std::string path = ::testing::TempDir() + "moeforge_io_ffn.mft";
    write_mft(path, ffn_to_tensors(f));
    EXPECT_EQ(ffn_from_tensors(read_mft(path)), f);
    EXPECT_THROW(read_mft(path + ".absent"), FormatError);
}

TEST(LayerTensors, RoundTripIncludingResidualAndNoise)
{
    Rng rng(3);
    const DenseFfn f = DenseFfn::random(4, 8, rng);
    const Vector v{9, 8, 5, 4, 1, 0, 3, 2};
    const MoeLayer layer = assemble_moe(f, split_sharing_inter({v, v}, 2, 1.0), 1, GateInit::random(4), true);
    const MoeLayer back = layer_from_tensors(decode_mft(encode_mft(layer_to_tensors(layer))));
    EXPECT_EQ(back, layer);
    const MoeLayer plain = assemble_moe(f, split_independent_random(8, 4, rng), 2);
    EXPECT_EQ(layer_from_tensors(layer_to_tensors(plain)), plain);
}

TEST(LayerTensors, InconsistentConfigIsFormatError)
{
    Rng rng(4);
    const DenseFfn f = DenseFfn::random(4, 8, rng);
    TensorList t = layer_to_tensors(assemble_moe(f, split_independent_random(8, 2, rng), 1));
    t[0].data[1] = 3.0; // k > N
    EXPECT_THROW(layer_from_tensors(t), FormatError);
}

TEST(PartitionJson, RoundTripsEveryMethod)
{
    Rng rng(5);
    const DenseFfn f = DenseFfn::random(4, 8, rng);
    const Vector v{9, 8, 5, 4, 1, 0, 3, 2};
    for (const auto& p :
         {split_independent_random(8, 4, rng), split_independent_clustering(f, 2, 20, rng),
          split_sharing_inner({v, {0, 1, 2, 3, 4, 5, 6, 7}}, 3), split_sharing_inter({v, v}, 2, 1.0)}) {
        EXPECT_EQ(partition_from_json(nlohmann::json::parse(partition_to_text(p))), p);
    }
}

TEST(PartitionJson, InvalidDocumentsAreFormatErrors)
{
    EXPECT_THROW(partition_from_json(nlohmann::json::parse(R"({"method":"independent_random"})")), FormatError);
    EXPECT_THROW(partition_from_json(nlohmann::json::parse(
                     R"({"method":"independent_random","n":2,"m":2,"hidden_dim":4,"sets":[[0,1],[1,2]]})")),
                 FormatError);
}

TEST(DomainWeightsJson, RenormalizesAndRejectsBadInput)
{
    const auto w = domain_weights_from_json(nlohmann::json::parse(R"({"domains":["a","b"],"weights":[3,1]})"));
    EXPECT_EQ(w.weights, (Vector{0.75, 0.25}));
    EXPECT_THROW(domain_weights_from_json(nlohmann::json::parse(R"({"domains":["a"],"weights":[1,2]})")),
                 FormatError);
    EXPECT_THROW(domain_weights_from_json(nlohmann::json::parse(R"({"domains":["a"],"weights":[0]})")), FormatError);
}

TEST(NumberText, ShortestRoundTrip)
{
    Rng rng(6);
    for (int i = 0; i < 2000; ++i) {
        const double v = random_finite_double(rng);
        ASSERT_EQ(std::bit_cast<std::uint64_t>(parse_double(format_double(v))), std::bit_cast<std::uint64_t>(v));
    }
    EXPECT_EQ(format_double(0.5), "0.5");
    EXPECT_THROW(parse_double("1.5x"), FormatError);
    EXPECT_THROW(parse_uint("-1"), FormatError);
}

TEST(Csv, QuotingRoundTrip)
{
    for (std::string s : {"plain", "with,comma", "with \"quote\"", "", "a\"\",b"}) {
        const auto fields = split_csv_line(csv_field(s) + "," + csv_field("x"));
        ASSERT_EQ(fields.size(), 2u);
        EXPECT_EQ(fields[0], s);
    }
    EXPECT_THROW(split_csv_line("\"open"), FormatError);
}

TEST(RoutingCsv, RoundTripAndLineNumbersInErrors)
{
    const std::vector<RoutingRow> rows{{0, "Wiki, en", 0, 3, 0.25}, {1, "C4", 1, 0, 1.0}};
    EXPECT_EQ(parse_routing_csv(routing_rows_csv(rows)), rows);
    EXPECT_TRUE(parse_routing_csv("").empty());
    EXPECT_TRUE(parse_routing_csv(std::string(kRoutingHeader) + "\n").empty());

    const std::string bad = std::string(kRoutingHeader) + "\n0,C4,0,1,0.5\n1,C4,zero,1,0.5\n";
    try {
        parse_routing_csv(bad);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
    }
    EXPECT_THROW(parse_routing_csv("token,domain\n"), FormatError);
    EXPECT_THROW(parse_routing_csv(std::string(kRoutingHeader) + "\n0,C4,0\n"), FormatError);
}

TEST(TrainReportCsv, HeaderAndRows)
{
    TrainReport r;
    r.loss = {1.5, 0.25};
    r.importance_loss = {0, 0};
    r.load_loss = {3, 0};
    r.lr = {0.1, 0.05};
    EXPECT_EQ(train_report_csv(r), "step,loss,importance_loss,load_loss,lr\n0,1.5,0,3,0.1\n1,0.25,0,0,0.05\n");
}

TEST(HeatmapAndDistanceCsv, Layout)
{
    const auto stats = collect_routing(std::vector<RoutingRow>{{0, "A", 0, 0, 1}, {1, "B", 0, 1, 1}}, 1, 2, {"A", "B"});
    EXPECT_EQ(heatmap_csv(stats, 0), "expert,A,B\n0,1,0\n1,0,1\n");
    const Matrix d{{0, 0.5}, {0.5, 0}};
    EXPECT_EQ(distance_csv(d, {"A", "B"}), "domain,A,B\nA,0,0.5\nB,0.5,0\n");
}
