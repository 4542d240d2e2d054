// Cost model against frozen closed-form constants and a brute-force MAC
// counter, summary/CSV formatting, feature-map export round-trips, and the
// netpbm codec.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cmlp/analysis.hpp"
#include "cmlp/error.hpp"
#include "cmlp/image_io.hpp"
#include "cmlp/model.hpp"
#include "cmlp/persist.hpp"

using namespace cmlp;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.variant = "tiny";
    c.tokenizer_channels = {4, 4, 8};
    c.conv_stage_blocks = 1;
    c.conv_stage_hidden = 16;
    c.stage_depths = {1, 1, 1};
    c.channels = {8, 16, 32, 64};
    c.mlp_ratio = 2;
    c.num_classes = 2;
    return c;
}

bool message_contains(const std::exception& e, const std::string& needle) {
    return std::string(e.what()).find(needle) != std::string::npos;
}

double rel_gap(double value, double target) {
    return std::abs(value - target) / target;
}

const analysis::CostRow& row_named(const analysis::CostReport& rep, const std::string& name) {
    for (const analysis::CostRow& r : rep.rows) {
        if (r.name == name) return r;
    }
    FAIL("missing row ", name);
    static analysis::CostRow none;
    return none;
}

// Counts MACs by literally iterating every (output element, tap) pair; the
// analytic counter must match this loop exactly.
std::size_t brute_conv(std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride,
                       std::size_t pad, std::size_t groups, std::size_t& h, std::size_t& w) {
    const std::size_t ho = (h + 2 * pad - k) / stride + 1;
    const std::size_t wo = (w + 2 * pad - k) / stride + 1;
    std::size_t n = 0;
    for (std::size_t co = 0; co < cout; ++co)
        for (std::size_t y = 0; y < ho; ++y)
            for (std::size_t x = 0; x < wo; ++x)
                for (std::size_t ci = 0; ci < cin / groups; ++ci)
                    for (std::size_t ky = 0; ky < k; ++ky)
                        for (std::size_t kx = 0; kx < k; ++kx) ++n;
    h = ho;
    w = wo;
    return n;
}

std::size_t brute_linear(std::size_t cin, std::size_t cout, std::size_t positions) {
    std::size_t n = 0;
    for (std::size_t p = 0; p < positions; ++p)
        for (std::size_t co = 0; co < cout; ++co)
            for (std::size_t ci = 0; ci < cin; ++ci) ++n;
    return n;
}

std::size_t brute_mlp_block(std::size_t c, std::size_t ratio, std::size_t h, std::size_t w) {
    std::size_t n = 0;
    n += brute_linear(c, ratio * c, h * w);
    n += brute_linear(ratio * c, c, h * w);
    std::size_t dh = h, dw = w;
    n += brute_conv(c, c, 3, 1, 1, c, dh, dw);
    n += brute_linear(c, ratio * c, h * w);
    n += brute_linear(ratio * c, c, h * w);
    return n;
}

Tensor<float> random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
    Tensor<float> x({1, 3, h, w});
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = float(dist(rng));
    return x;
}

struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const char* tag)
        : path(std::filesystem::temp_directory_path() / tag) {
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    std::string str() const { return path.string(); }
};

} // namespace

TEST_CASE("cost totals match the frozen per-preset constants exactly") {
    struct Expected {
        const char* name;
        std::size_t params;
        std::size_t macs;
    };
    const Expected table[] = {
        {"S", 9019592, 2384815104},
        {"M", 17406024, 3928253952},
        {"L", 42720760, 9869029632},
        {"A0", 7848616, 1114308608},
        {"A1", 7898312, 1539399680},
        {"A2", 8758472, 1635737600},
        {"A3", 7921352, 1543463936},
        {"A4", 8781512, 1639801856},
        {"A5", 9019592, 2384815104},
    };
    for (const Expected& e : table) {
        CAPTURE(e.name);
        const analysis::CostReport rep = analysis::count_macs(preset(e.name), 224, 224);
        CHECK(rep.total_params() == e.params);
        CHECK(rep.total_macs() == e.macs);
    }
}

TEST_CASE("published calibration targets hold at the stated tolerances") {
    // Parameter totals within 3% of the published millions.
    CHECK(rel_gap(double(analysis::count_macs(preset("S"), 224, 224).total_params()) / 1e6, 9.02) <= 0.03);
    CHECK(rel_gap(double(analysis::count_macs(preset("M"), 224, 224).total_params()) / 1e6, 17.4) <= 0.03);
    CHECK(rel_gap(double(analysis::count_macs(preset("L"), 224, 224).total_params()) / 1e6, 42.7) <= 0.03);
    // MAC totals within 5% of the published GMACs at 224x224.
    CHECK(rel_gap(double(analysis::count_macs(preset("S"), 224, 224).total_macs()) / 1e9, 2.40) <= 0.05);
    CHECK(rel_gap(double(analysis::count_macs(preset("M"), 224, 224).total_macs()) / 1e9, 3.9) <= 0.05);
    CHECK(rel_gap(double(analysis::count_macs(preset("L"), 224, 224).total_macs()) / 1e9, 9.9) <= 0.05);
}

TEST_CASE("ablation ladder: parameter ordering and pinned deltas") {
    auto params_of = [](const char* name) {
        return analysis::count_macs(preset(name), 224, 224).total_params();
    };
    const std::size_t a0 = params_of("A0"), a1 = params_of("A1"), a2 = params_of("A2");
    const std::size_t a3 = params_of("A3"), a4 = params_of("A4"), a5 = params_of("A5");

    // Published ordering: A0 < A1 < A3 < A2 < A4 < A5.
    CHECK(a0 < a1);
    CHECK(a1 < a3);
    CHECK(a3 < a2);
    CHECK(a2 < a4);
    CHECK(a4 < a5);

    // Depthwise conv adds ~0.02M, conv downsampling ~0.82M; both within 20%.
    CHECK(a3 - a1 == 23040);
    CHECK(a2 - a1 == 860160);
    CHECK(rel_gap(double(a3 - a1) / 1e6, 0.02) <= 0.20);
    CHECK(rel_gap(double(a2 - a1) / 1e6, 0.82) <= 0.20);
    // The depthwise increment is the same whichever downsampler is in place.
    CHECK(a4 - a2 == a3 - a1);
}

TEST_CASE("closed-form row examples") {
    // A4 runs its conv stage at 64 channels: a single 3x3 conv, 64 -> 64,
    // over a 56x56 output costs 64*64*9*56*56 MACs.
    const analysis::CostReport a4 = analysis::count_macs(preset("A4"), 224, 224);
    const analysis::CostRow& conv = row_named(a4, "conv_stage.block0.conv2");
    CHECK(conv.macs == 115605504);
    CHECK(conv.kind == "conv");
    CHECK(conv.out_shape == "64x56x56");

    std::size_t h = 56, w = 56;
    CHECK(brute_conv(64, 64, 3, 1, 1, 1, h, w) == 115605504);

    // First channel MLP of stage 1 in preset S: 128 -> 256 with bias.
    const analysis::CostReport s = analysis::count_macs(preset("S"), 224, 224);
    const analysis::CostRow& fc = row_named(s, "stage1.block0.mlp1.fc1");
    CHECK(fc.params == 33024);
    CHECK(fc.kind == "linear");

    // Head carries params but no MACs.
    const analysis::CostRow& head = row_named(s, "head");
    CHECK(head.params == 512 * 1000 + 1000);
    CHECK(head.macs == 0);
}

TEST_CASE("params are resolution-invariant; MACs scale exactly x4 when H,W double") {
    for (const char* name : {"S", "A0", "A3"}) {
        CAPTURE(name);
        const ModelConfig cfg = preset(name);
        const analysis::CostReport at224 = analysis::count_macs(cfg, 224, 224);
        const analysis::CostReport at256 = analysis::count_macs(cfg, 256, 256);
        const analysis::CostReport at448 = analysis::count_macs(cfg, 448, 448);
        CHECK(at224.total_params() == at256.total_params());
        CHECK(at224.total_params() == at448.total_params());
        CHECK(at448.total_macs() == 4 * at224.total_macs());
    }
}

TEST_CASE("indivisible extents are rejected") {
    CHECK_THROWS_AS((void)analysis::count_macs(preset("S"), 224, 220), GeometryError);
    CHECK_THROWS_AS((void)analysis::count_macs(preset("S"), 100, 224), GeometryError);
    CHECK_THROWS_WITH_AS((void)analysis::count_macs(tiny_config(), 33, 32),
                         "cost model: spatial extents 33x32 must be divisible by 32",
                         GeometryError);
}

TEST_CASE("analytic MAC count equals a brute-force per-output-element loop") {
    const ModelConfig cfg = tiny_config();
    std::size_t n = 0;
    std::size_t h = 32, w = 32;

    // Tokenizer: 3x3 convs at strides 2,1,1 then a 3x3 stride-2 max pool.
    n += brute_conv(3, 4, 3, 2, 1, 1, h, w);
    n += brute_conv(4, 4, 3, 1, 1, 1, h, w);
    n += brute_conv(4, 8, 3, 1, 1, 1, h, w);
    h = (h + 2 - 3) / 2 + 1;
    w = (w + 2 - 3) / 2 + 1;

    // Conv stage: one 1x1 -> 3x3 -> 1x1 bottleneck at hidden width 16.
    n += brute_conv(8, 16, 1, 1, 0, 1, h, w);
    n += brute_conv(16, 16, 3, 1, 1, 1, h, w);
    n += brute_conv(16, 8, 1, 1, 0, 1, h, w);

    // Three stages: conv downsample then one MLP block each.
    std::size_t cprev = 8;
    for (std::size_t cs : {std::size_t(16), std::size_t(32), std::size_t(64)}) {
        n += brute_conv(cprev, cs, 3, 2, 1, 1, h, w);
        n += brute_mlp_block(cs, 2, h, w);
        cprev = cs;
    }
    // Head is excluded from MACs by convention.

    const analysis::CostReport rep = analysis::count_macs(cfg, 32, 32);
    CHECK(rep.total_macs() == n);
    CHECK(rep.total_macs() == 459712);
    CHECK(rep.total_params() == 72894);
}

TEST_CASE("count_params cross-checks the registry with zero tolerance") {
    Model<float> tiny(tiny_config(), 3);
    const analysis::CostReport rep = analysis::count_params(tiny);
    CHECK(rep.total_params() == 72894);
    CHECK(rep.total_params() == tiny.registry().param_element_count());

    Model<float> s(preset("S"), 3);
    CHECK(analysis::count_params(s).total_params() == 9019592);
}

TEST_CASE("summarize lists per-stage depths and exact totals") {
    Model<float> s(preset("S"), 1);
    const std::string table = analysis::summarize(s, 224, 224);
    CAPTURE(table);

    // Per-stage blocks column carries the depths 2/4/2; totals are exact.
    std::istringstream lines(table);
    std::string line;
    std::size_t stage_rows = 0;
    bool saw_total = false;
    while (std::getline(lines, line)) {
        std::istringstream fields(line);
        std::string name, second, third;
        fields >> name >> second >> third;
        if (name == "stage1") CHECK(second == "2");
        if (name == "stage2") CHECK(second == "4");
        if (name == "stage3") CHECK(second == "2");
        if (name.size() == 6 && name.compare(0, 5, "stage") == 0) ++stage_rows;
        if (name == "total") {
            saw_total = true;
            CHECK(second == "9019592");
            CHECK(third == "2384815104");
        }
    }
    CHECK(stage_rows == 3);
    CHECK(saw_total);
    CHECK(table.find("tokenizer") != std::string::npos);
    CHECK(table.find("conv_stage") != std::string::npos);
    CHECK(table.find("head") != std::string::npos);

    // The tiny config has exactly three Conv-MLP stage rows as well.
    Model<float> tiny(tiny_config(), 1);
    const std::string tiny_table = analysis::summarize(tiny, 32, 32);
    std::istringstream tiny_lines(tiny_table);
    std::size_t tiny_stage_rows = 0;
    while (std::getline(tiny_lines, line)) {
        std::istringstream fields(line);
        std::string name;
        fields >> name;
        if (name.size() == 6 && name.compare(0, 5, "stage") == 0) ++tiny_stage_rows;
    }
    CHECK(tiny_stage_rows == 3);
}

TEST_CASE("CSV export carries the fixed header and one line per row") {
    const analysis::CostReport rep = analysis::count_macs(preset("S"), 224, 224);
    const std::string csv = analysis::to_csv(rep);

    std::istringstream lines(csv);
    std::string line;
    std::vector<std::string> all;
    while (std::getline(lines, line)) all.push_back(line);

    REQUIRE(all.size() == rep.rows.size() + 1);
    CHECK(all[0] == "name,kind,out_shape,params,macs");
    CHECK(all[1] == "tokenizer.conv1,conv,32x112x112,864,10838016");
    CHECK(all.back() == "head,linear,1000,513000,0");
}

TEST_CASE("feature-map export: shapes, normalization, and bit-exact round-trip") {
    TempDir dir("cmlp_analysis_export");
    Model<float> model(tiny_config(), 7);
    const Tensor<float> image = random_image(224, 224, 11);

    SUBCASE("stage-3 channel mean of a 224x224 input is a 14x14 map") {
        const std::vector<Tensor<float>> maps =
            analysis::export_feature_maps(model, image, 3, analysis::Reduce::mean, dir.str());
        REQUIRE(maps.size() == 1);
        REQUIRE(maps[0].rank() == 2);
        CHECK(maps[0].extent(0) == 14);
        CHECK(maps[0].extent(1) == 14);

        // Min-max normalization pins the endpoints.
        float lo = maps[0][0], hi = maps[0][0];
        for (std::size_t i = 0; i < maps[0].size(); ++i) {
            lo = std::min(lo, maps[0][i]);
            hi = std::max(hi, maps[0][i]);
        }
        CHECK(lo == 0.0f);
        CHECK(hi == 1.0f);

        // The tensor-format copy restores the map bit-exactly.
        auto [name, restored] = persist::load_tensor<float>(dir.str() + "/stage3_mean.cmlt");
        CHECK(name == "stage3_mean");
        REQUIRE(restored.same_shape(maps[0]));
        for (std::size_t i = 0; i < restored.size(); ++i) CHECK(restored[i] == maps[0][i]);

        // The PGM copy is 8-bit quantized: equal to within half a level.
        const Tensor<float> pgm = image::read_image<float>(dir.str() + "/stage3_mean.pgm");
        REQUIRE(pgm.rank() == 4);
        CHECK(pgm.extent(2) == 14);
        CHECK(pgm.extent(3) == 14);
        for (std::size_t y = 0; y < 14; ++y) {
            for (std::size_t x = 0; x < 14; ++x) {
                CHECK(std::abs(pgm(0, 0, y, x) - maps[0](y, x)) <= 0.5f / 255.0f + 1e-6f);
            }
        }
    }

    SUBCASE("per-channel export honors k and clamps to the channel count") {
        const std::vector<Tensor<float>> two = analysis::export_feature_maps(
            model, image, 1, analysis::Reduce::per_channel, dir.str(), 2);
        CHECK(two.size() == 2);
        CHECK(std::filesystem::exists(dir.path / "stage1_ch0.pgm"));
        CHECK(std::filesystem::exists(dir.path / "stage1_ch1.cmlt"));

        // Stage 1 of the tiny config has 8 channels; k beyond that clamps.
        const std::vector<Tensor<float>> all = analysis::export_feature_maps(
            model, image, 1, analysis::Reduce::per_channel, dir.str(), 99);
        CHECK(all.size() == 8);
        CHECK(all[0].extent(0) == 56);
    }

    SUBCASE("constant input propagates to a zero-range stage-1 map, which exports as zeros") {
        const Tensor<float> grey({1, 3, 64, 64});
        const std::vector<Tensor<float>> maps =
            analysis::export_feature_maps(model, grey, 1, analysis::Reduce::mean, dir.str());
        REQUIRE(maps.size() == 1);
        for (std::size_t i = 0; i < maps[0].size(); ++i) CHECK(maps[0][i] == 0.0f);
    }

    SUBCASE("argument validation") {
        CHECK_THROWS_AS((void)analysis::export_feature_maps(model, image, 0,
                                                            analysis::Reduce::mean, dir.str()),
                        ConfigError);
        CHECK_THROWS_AS((void)analysis::export_feature_maps(model, image, 5,
                                                            analysis::Reduce::mean, dir.str()),
                        ConfigError);
        const Tensor<float> batch({2, 3, 64, 64});
        CHECK_THROWS_AS((void)analysis::export_feature_maps(model, batch, 1,
                                                            analysis::Reduce::mean, dir.str()),
                        ShapeError);
        const Tensor<float> ragged({1, 3, 60, 60});
        CHECK_THROWS_AS((void)analysis::export_feature_maps(model, ragged, 1,
                                                            analysis::Reduce::mean, dir.str()),
                        GeometryError);
    }
}

TEST_CASE("netpbm codec") {
    TempDir dir("cmlp_netpbm");

    SUBCASE("pgm write -> read round-trips within one quantization level") {
        Tensor<float> map({7, 5});
        std::mt19937_64 rng(5);
        std::uniform_real_distribution<double> dist(0.0, 1.0);
        for (std::size_t i = 0; i < map.size(); ++i) map[i] = float(dist(rng));

        const std::string path = dir.str() + "/roundtrip.pgm";
        image::write_pgm(path, map);
        const Tensor<float> back = image::read_image<float>(path);
        REQUIRE(back.rank() == 4);
        CHECK(back.extent(0) == 1);
        CHECK(back.extent(1) == 3);
        CHECK(back.extent(2) == 7);
        CHECK(back.extent(3) == 5);
        for (std::size_t y = 0; y < 7; ++y) {
            for (std::size_t x = 0; x < 5; ++x) {
                CHECK(std::abs(back(0, 0, y, x) - map(y, x)) <= 0.5f / 255.0f + 1e-6f);
                // Grey values replicate across all three channels.
                CHECK(back(0, 1, y, x) == back(0, 0, y, x));
                CHECK(back(0, 2, y, x) == back(0, 0, y, x));
            }
        }
    }

    SUBCASE("color ppm parses interleaved rgb") {
        const std::string path = dir.str() + "/color.ppm";
        {
            std::ofstream f(path, std::ios::binary);
            f << "P6\n2 2\n255\n";
            const unsigned char px[12] = {0, 51, 102, 153, 204, 255, 10, 20, 30, 40, 50, 60};
            f.write(reinterpret_cast<const char*>(px), 12);
        }
        const Tensor<float> img = image::read_image<float>(path);
        CHECK(img.extent(1) == 3);
        CHECK(img(0, 0, 0, 0) == doctest::Approx(0.0f));
        CHECK(img(0, 1, 0, 0) == doctest::Approx(51.0f / 255.0f));
        CHECK(img(0, 2, 0, 1) == doctest::Approx(1.0f));
        CHECK(img(0, 0, 1, 1) == doctest::Approx(40.0f / 255.0f));
    }

    SUBCASE("header comments are skipped") {
        const std::string path = dir.str() + "/comments.pgm";
        {
            std::ofstream f(path, std::ios::binary);
            f << "P5\n# a comment\n2 1\n# another\n255\n";
            const unsigned char px[2] = {0, 255};
            f.write(reinterpret_cast<const char*>(px), 2);
        }
        const Tensor<float> img = image::read_image<float>(path);
        CHECK(img(0, 0, 0, 0) == 0.0f);
        CHECK(img(0, 0, 0, 1) == 1.0f);
    }

    SUBCASE("writer clamps out-of-range values to the 8-bit span") {
        const Tensor<float> map = Tensor<float>::from_data({1, 3}, {-0.5f, 0.25f, 1.5f});
        const std::string path = dir.str() + "/clamp.pgm";
        image::write_pgm(path, map);
        std::ifstream f(path, std::ios::binary);
        std::string header;
        std::getline(f, header); // P5
        std::getline(f, header); // extents
        std::getline(f, header); // maxval
        unsigned char px[3];
        f.read(reinterpret_cast<char*>(px), 3);
        CHECK(px[0] == 0);
        CHECK(px[1] == 64);
        CHECK(px[2] == 255);
    }

    SUBCASE("malformed inputs are rejected with located diagnostics") {
        auto write_bytes = [&](const std::string& name, const std::string& bytes) {
            const std::string path = dir.str() + "/" + name;
            std::ofstream f(path, std::ios::binary);
            f.write(bytes.data(), std::streamsize(bytes.size()));
            return path;
        };

        CHECK_THROWS_AS((void)image::read_image<float>(dir.str() + "/missing.pgm"), DataError);

        const std::string ascii = write_bytes("ascii.pgm", "P2\n2 2\n255\n0 0 0 0\n");
        try {
            (void)image::read_image<float>(ascii);
            FAIL("expected a DataError");
        } catch (const DataError& e) {
            CHECK(message_contains(e, "not a binary"));
        }

        const std::string deep = write_bytes("deep.pgm", std::string("P5\n2 2\n1023\n") + "xxxx");
        try {
            (void)image::read_image<float>(deep);
            FAIL("expected a DataError");
        } catch (const DataError& e) {
            CHECK(message_contains(e, "maxval"));
            CHECK(message_contains(e, "byte offset"));
        }

        const std::string truncated = write_bytes("short.pgm", std::string("P5\n4 4\n255\n") + "abc");
        try {
            (void)image::read_image<float>(truncated);
            FAIL("expected a DataError");
        } catch (const DataError& e) {
            CHECK(message_contains(e, "raster needs 16 bytes"));
        }

        const Tensor<float> not_a_map({2, 2, 2});
        CHECK_THROWS_AS(image::write_pgm(dir.str() + "/bad.pgm", not_a_map), ShapeError);
    }
}
