#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "checks.hpp"
#include "ddlab/config.hpp"
#include "ddlab/dataset.hpp"
#include "ddlab/errors.hpp"
#include "ddlab/formats.hpp"
#include "ddlab/models.hpp"

using namespace ddlab;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::path(DDLAB_SCRATCH) / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::array<std::size_t, 3> sizes(const std::vector<Split>& tags) {
    std::array<std::size_t, 3> s{};
    for (Split t : tags) ++s[static_cast<std::size_t>(t)];
    return s;
}

}  // namespace

// split_dataset ----------------------------------------------------------------

TEST(SplitDataset, TenSamplesDefaultRatios) {
    EXPECT_EQ(sizes(split_dataset(10, {0.8, 0.1, 0.1}, Prng(1))), (std::array<std::size_t, 3>{8, 1, 1}));
}

TEST(SplitDataset, ThreeSamplesEqualThirds) {
    EXPECT_EQ(sizes(split_dataset(3, {1.0 / 3, 1.0 / 3, 1.0 / 3}, Prng(1))), (std::array<std::size_t, 3>{1, 1, 1}));
}

TEST(SplitDataset, TwoSeedsDifferentPermutationsSameSizes) {
    const auto a = split_dataset(1000, {0.8, 0.1, 0.1}, Prng(1));
    const auto b = split_dataset(1000, {0.8, 0.1, 0.1}, Prng(2));
    EXPECT_EQ(sizes(a), sizes(b));
    EXPECT_EQ(sizes(a), (std::array<std::size_t, 3>{800, 100, 100}));
    EXPECT_NE(a, b);
}

TEST(SplitDataset, PureFunctionOfInputs) {
    EXPECT_EQ(split_dataset(517, {0.7, 0.2, 0.1}, Prng(9)), split_dataset(517, {0.7, 0.2, 0.1}, Prng(9)));
}

TEST(SplitDataset, EverySplitNonEmpty) {
    for (std::size_t n : {3u, 4u, 5u, 7u}) {
        const auto s = sizes(split_dataset(n, {0.8, 0.1, 0.1}, Prng(n)));
        EXPECT_EQ(s[0] + s[1] + s[2], n);
        for (auto k : s) EXPECT_GE(k, 1u) << "n = " << n;
    }
}

TEST(SplitDataset, ProportionsWithinOneSample) {
    // Large enough that the non-empty clamp never engages.
    for (std::size_t n : {20u, 99u, 250u, 1001u}) {
        const std::array<double, 3> r{0.8, 0.1, 0.1};
        const auto s = sizes(split_dataset(n, r, Prng(n)));
        EXPECT_EQ(s[0] + s[1] + s[2], n);
        for (int i = 0; i < 3; ++i) EXPECT_LE(std::abs(double(s[std::size_t(i)]) - r[std::size_t(i)] * double(n)), 1.0);
    }
}

TEST(SplitDataset, Errors) {
    EXPECT_THROW(split_dataset(2, {0.8, 0.1, 0.1}, Prng(1)), ValidationError);
    EXPECT_THROW(split_dataset(10, {0.8, 0.1, 0.2}, Prng(1)), ParameterError);
    EXPECT_THROW(split_dataset(10, {1.2, -0.1, -0.1}, Prng(1)), ParameterError);
}

// generate_synthetic -----------------------------------------------------------

TEST(Synthetic, TwoSamplesOnePerClass) {
    const Dataset ds = generate_synthetic(2, 16, Prng(1));
    EXPECT_EQ(std::set<int>(ds.labels.begin(), ds.labels.end()), (std::set<int>{0, 1}));
}

TEST(Synthetic, PixelRangeBalanceAndShape) {
    const Dataset ds = generate_synthetic(101, 32, Prng(2));
    EXPECT_EQ(ds.images.shape(), (Shape{101, 1, 32, 32}));
    for (float v : ds.images.data()) {
        ASSERT_GE(v, 0.0f);
        ASSERT_LE(v, 1.0f);
    }
    const auto ones = std::count(ds.labels.begin(), ds.labels.end(), 1);
    EXPECT_LE(std::abs(double(ones) - (101 - ones)), 1.0);
}

TEST(Synthetic, RegenerationIsBitwiseIdentical) {
    const Dataset a = generate_synthetic(64, 32, Prng(3)), b = generate_synthetic(64, 32, Prng(3));
    EXPECT_TRUE(bitwise_equal(a.images, b.images));
    EXPECT_EQ(a.labels, b.labels);
    EXPECT_FALSE(bitwise_equal(a.images, generate_synthetic(64, 32, Prng(4)).images));
}

TEST(Synthetic, ClassStructure) {
    // Blobs concentrate energy at the centre; stripes vary along rows, not columns.
    SyntheticSpec clean;
    clean.noise_std = 0.0;
    const Dataset ds = generate_synthetic(40, 32, Prng(5), clean);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const float* img = ds.images.data().data() + i * 32 * 32;
        if (ds.labels[i] == 0) {
            EXPECT_GT(img[16 * 32 + 16], img[0] + 0.1f);
        } else {
            double col_var = 0.0;
            for (int y = 0; y < 32; ++y) col_var += std::abs(img[y * 32 + 3] - img[y * 32 + 20]);
            EXPECT_LT(col_var, 1e-4);
        }
    }
}

TEST(Synthetic, SmallSizeRejected) { EXPECT_THROW(generate_synthetic(4, 7, Prng(1)), ParameterError); }

// resize_bilinear --------------------------------------------------------------

TEST(Resize, ConstantStaysConstant) {
    for (auto [in, out] : {std::pair{4, 9}, {32, 8}, {5, 5}, {7, 3}}) {
        const Tensor resized = resize_bilinear(Tensor::full({1, in, in}, 0.5f), out);
        EXPECT_EQ(resized.shape(), (Shape{1, out, out}));
        for (float v : resized.data()) EXPECT_NEAR(v, 0.5f, 1e-7);
    }
}

TEST(Resize, IdentityAtEqualSize) {
    Prng p(1);
    const Tensor img = Tensor::uniform({2, 6, 6}, p, 0.0f, 1.0f);
    EXPECT_TRUE(bitwise_equal(resize_bilinear(img, 6), img));
}

TEST(Resize, CheckerboardHalvesToBlockMeans) {
    std::vector<float> v(16);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) v[std::size_t(y * 4 + x)] = float((x + y) % 2) * 0.8f + 0.1f * float(x);
    const Tensor img({1, 4, 4}, v);
    const Tensor out = resize_bilinear(img, 2);
    for (int by = 0; by < 2; ++by)
        for (int bx = 0; bx < 2; ++bx) {
            double m = 0.0;
            for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx) m += v[std::size_t((2 * by + dy) * 4 + 2 * bx + dx)];
            EXPECT_NEAR(out[std::size_t(by * 2 + bx)], m / 4.0, 1e-6);
        }
}

TEST(Resize, Errors) {
    EXPECT_THROW(resize_bilinear(Tensor::zeros({1, 4, 4}), 0), ParameterError);
    EXPECT_THROW(resize_bilinear(Tensor::zeros({1, 1, 4}), 2), DimensionError);
}

// TSR1 -------------------------------------------------------------------------

TEST(Tsr, RoundTripBitwise) {
    Prng p(1);
    const Tensor t = Tensor::randn({2, 3}, p);
    const auto bytes = encode_tensor(t);
    std::size_t off = 0;
    const Tensor back = decode_tensor(bytes, off);
    EXPECT_EQ(off, bytes.size());
    EXPECT_TRUE(bitwise_equal(t, back));
    EXPECT_EQ(encode_tensor(back), bytes);
}

TEST(Tsr, LayoutMatchesFormat) {
    const auto bytes = encode_tensor(Tensor({2, 1}, {1.0f, -2.0f}));
    ASSERT_EQ(bytes.size(), 4u + 1 + 1 + 6 + 2 * 4 + 2 * 4);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "TSR1");
    EXPECT_EQ(bytes[4], 0);
    EXPECT_EQ(bytes[5], 2);
    for (int i = 6; i < 12; ++i) EXPECT_EQ(bytes[std::size_t(i)], 0);
    EXPECT_EQ(bytes[12], 2);  // little-endian u32 dim
    EXPECT_EQ(bytes[16], 1);
    float f;
    std::memcpy(&f, bytes.data() + 24, 4);
    EXPECT_EQ(f, -2.0f);
}

TEST(Tsr, ScalarRoundTrips) {
    const auto dir = scratch("tsr_scalar");
    save_tensor(dir / "s.tsr", Tensor::scalar(3.25f));
    const Tensor back = load_tensor(dir / "s.tsr");
    EXPECT_TRUE(back.shape().empty());
    EXPECT_EQ(back.item(), 3.25f);
}

TEST(Tsr, SpecialValuesRoundTrip) {
    const Tensor t({4}, {-0.0f, INFINITY, std::nanf(""), 1e-42f});
    std::size_t off = 0;
    const auto bytes = encode_tensor(t);
    EXPECT_TRUE(bitwise_equal(decode_tensor(bytes, off), t));
}

TEST(Tsr, CorruptedMagic) {
    auto bytes = encode_tensor(Tensor::zeros({2, 2}));
    bytes[0] ^= 0xff;
    std::size_t off = 0;
    try {
        decode_tensor(bytes, off);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_EQ(e.offset(), 0u);
    }
}

TEST(Tsr, RankAboveEight) {
    auto bytes = encode_tensor(Tensor::zeros({1}));
    bytes[5] = 9;
    std::size_t off = 0;
    EXPECT_THROW(decode_tensor(bytes, off), FormatError);
    EXPECT_THROW(encode_tensor(Tensor::zeros(Shape(9, 1))), ParameterError);
}

TEST(Tsr, EveryTruncationIsFormatError) {
    const auto bytes = encode_tensor(Tensor::full({2, 3}, 1.0f));
    for (std::size_t len = 0; len < bytes.size(); ++len) {
        std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + std::ptrdiff_t(len));
        std::size_t off = 0;
        EXPECT_THROW(decode_tensor(cut, off), FormatError) << "length " << len;
    }
}

TEST(Tsr, EverySingleByteCorruptionIsTypedOrHarmless) {
    const auto good = encode_tensor(Tensor::full({2, 3}, 1.0f));
    for (std::size_t i = 0; i < good.size(); ++i) {
        for (std::uint8_t flip : {0x01, 0x80, 0xff}) {
            auto bytes = good;
            bytes[i] ^= flip;
            std::size_t off = 0;
            try {
                decode_tensor(bytes, off);
            } catch (const FormatError&) {
            }
        }
    }
}

TEST(Tsr, TrailingBytesInFile) {
    const auto dir = scratch("tsr_trailing");
    auto bytes = encode_tensor(Tensor::zeros({2}));
    bytes.push_back(0);
    write_file_atomic(dir / "t.tsr", bytes);
    EXPECT_THROW(load_tensor(dir / "t.tsr"), FormatError);
}

TEST(Formats, RoundTripAndCorruptionSuite) {
    for (const auto& o : checks::format_suite(5, 200)) EXPECT_TRUE(o.passed) << o.name << ": " << o.detail;
}

// CKP1 -------------------------------------------------------------------------

TEST(Ckp, EmptyParamsRoundTrip) {
    const ModelParams empty;
    const auto bytes = encode_checkpoint(empty);
    EXPECT_TRUE(decode_checkpoint(bytes).empty());
}

TEST(Ckp, PreservesNamesOrderAndBits) {
    Prng p(2);
    ModelParams m;
    m.add("zeta", Tensor::randn({3}, p));
    m.add("alpha", Tensor::randn({2, 2}, p));
    const ModelParams back = decode_checkpoint(encode_checkpoint(m));
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back.begin()->first, "zeta");
    EXPECT_TRUE(bitwise_equal(back, m));
}

TEST(Ckp, VitRoundTripGivesIdenticalForward) {
    const auto dir = scratch("ckp_vit");
    VitConfig cfg;
    cfg.image_size = 16;
    VitModel a(cfg, Prng(3)), b(cfg, Prng(4));
    save_checkpoint(dir / "vit.ckp", a.params());
    load_checkpoint_into(dir / "vit.ckp", b.params());
    Prng p(5);
    const Tensor x = Tensor::uniform({3, 1, 16, 16}, p, 0.0f, 1.0f);
    EXPECT_TRUE(bitwise_equal(a.logits(x), b.logits(x)));
}

TEST(Ckp, CnnIntoVitIsNamedMismatch) {
    const auto dir = scratch("ckp_mismatch");
    StudentCnn cnn(CnnConfig{}, Prng(1));
    save_checkpoint(dir / "cnn.ckp", cnn.params());
    VitModel vit(VitConfig{}, Prng(1));
    try {
        load_checkpoint_into(dir / "cnn.ckp", vit.params());
        FAIL();
    } catch (const CheckpointMismatchError& e) {
        EXPECT_NE(std::string(e.what()).find("cnn.ckp"), std::string::npos);
    }
}

TEST(Ckp, DuplicateNamesAndUnknownVersion) {
    ModelParams m;
    m.add("w", Tensor::zeros({1}));
    auto one = encode_checkpoint(m);
    // Hand-build a two-entry archive repeating the same entry.
    std::vector<std::uint8_t> dup(one.begin(), one.begin() + 8);
    dup[4] = 2;
    dup.insert(dup.end(), one.begin() + 8, one.end());
    dup.insert(dup.end(), one.begin() + 8, one.end());
    EXPECT_THROW(decode_checkpoint(dup), FormatError);
    auto v2 = one;
    v2[3] = '2';
    EXPECT_THROW(decode_checkpoint(v2), FormatError);
}

TEST(Ckp, EveryTruncationIsFormatError) {
    ModelParams m;
    m.add("layer.weight", Tensor::full({2, 2}, 1.0f));
    m.add("layer.bias", Tensor::full({2}, 0.5f));
    const auto bytes = encode_checkpoint(m);
    for (std::size_t len = 0; len < bytes.size(); ++len) {
        std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + std::ptrdiff_t(len));
        EXPECT_THROW(decode_checkpoint(cut), FormatError) << "length " << len;
    }
}

TEST(Ckp, MissingFileIsTypedError) {
    EXPECT_THROW(load_checkpoint(fs::path(DDLAB_SCRATCH) / "does_not_exist.ckp"), Error);
}

// PGM and manifests -------------------------------------------------------------

TEST(Pgm, RoundTripQuantized) {
    const auto dir = scratch("pgm");
    std::vector<float> v(12);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = float(i * 20) / 255.0f;
    const Tensor img({1, 3, 4}, v);
    write_pgm(dir / "a.pgm", img);
    const Tensor back = read_pgm(dir / "a.pgm");
    EXPECT_EQ(back.shape(), (Shape{1, 3, 4}));
    EXPECT_LT(max_abs_diff(back, img), 1e-6f);
}

TEST(Pgm, HeaderWithCommentAndMaxval) {
    const auto dir = scratch("pgm_header");
    {
        std::ofstream f(dir / "c.pgm", std::ios::binary);
        f << "P5\n# comment\n2 1\n100\n";
        f.put(char(50));
        f.put(char(100));
    }
    const Tensor t = read_pgm(dir / "c.pgm");
    EXPECT_FLOAT_EQ(t[0], 0.5f);
    EXPECT_FLOAT_EQ(t[1], 1.0f);
}

TEST(Pgm, RejectsNonP5) {
    const auto dir = scratch("pgm_bad");
    {
        std::ofstream f(dir / "bad.pgm");
        f << "P2\n1 1\n255\n0\n";
    }
    EXPECT_THROW(read_pgm(dir / "bad.pgm"), FormatError);
}

TEST(Manifest, RoundTripAndValidation) {
    const auto dir = scratch("manifest");
    const std::vector<ManifestRow> rows{{"a.tsr", 0, Split::train}, {"b.pgm", 1, Split::test}};
    write_manifest(dir / "m.csv", rows);
    const auto back = read_manifest(dir / "m.csv");
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[1].path, "b.pgm");
    EXPECT_EQ(back[1].label, 1);
    EXPECT_EQ(back[1].split, Split::test);

    const std::vector<ManifestRow> dup{{"a.tsr", 0, Split::train}, {"a.tsr", 1, Split::val}};
    EXPECT_THROW(write_manifest(dir / "d.csv", dup), ValidationError);
    {
        std::ofstream f(dir / "bad.csv");
        f << "path,label,split\nx.tsr,2,train\n";
    }
    EXPECT_THROW(read_manifest(dir / "bad.csv"), ValidationError);
    {
        std::ofstream f(dir / "badsplit.csv");
        f << "path,label,split\nx.tsr,1,holdout\n";
    }
    EXPECT_THROW(read_manifest(dir / "badsplit.csv"), ValidationError);
}

TEST(DatasetDir, SaveLoadRoundTripAndResize) {
    const auto dir = scratch("dsdir");
    Dataset ds = generate_synthetic(12, 16, Prng(7));
    ds.splits = split_dataset(12, {0.5, 0.25, 0.25}, Prng(8));
    save_dataset_dir(dir, ds);
    const Dataset back = load_dataset_dir(dir, 16);
    EXPECT_TRUE(bitwise_equal(back.images, ds.images));
    EXPECT_EQ(back.labels, ds.labels);
    EXPECT_EQ(back.splits, ds.splits);
    EXPECT_EQ(load_dataset_dir(dir, 8).images.shape(), (Shape{12, 1, 8, 8}));
}

TEST(DatasetDir, PgmSamples) {
    const auto dir = scratch("dspgm");
    fs::create_directories(dir / "img");
    write_pgm(dir / "img" / "a.pgm", Tensor::full({1, 20, 20}, 0.2f));
    write_pgm(dir / "img" / "b.pgm", Tensor::full({1, 10, 10}, 0.6f));
    write_pgm(dir / "img" / "c.pgm", Tensor::full({1, 10, 10}, 0.4f));
    write_manifest(dir / "manifest.csv",
                   std::vector<ManifestRow>{{"img/a.pgm", 0, Split::train}, {"img/b.pgm", 1, Split::val},
                                            {"img/c.pgm", 1, Split::test}});
    const Dataset ds = load_dataset_dir(dir, 8);
    EXPECT_EQ(ds.images.shape(), (Shape{3, 1, 8, 8}));
    EXPECT_NEAR(ds.images[0], 51.0f / 255.0f, 1e-6);
}

TEST(Dataset, SubsetsAreDisjointAndCover) {
    Dataset ds = generate_synthetic(50, 8, Prng(9));
    ds.splits = split_dataset(50, {0.8, 0.1, 0.1}, Prng(10));
    std::set<std::size_t> seen;
    for (Split s : {Split::train, Split::val, Split::test})
        for (auto i : ds.indices_of(s)) EXPECT_TRUE(seen.insert(i).second);
    EXPECT_EQ(seen.size(), 50u);
    EXPECT_EQ(ds.subset(Split::val).size(), 5u);
}

// RunConfig --------------------------------------------------------------------

TEST(RunConfig, JsonRoundTripAndCanonicalForm) {
    RunConfig c;
    c.seed = 17;
    c.attack.epsilon = 0.05f;
    c.diffusion.sigma_last = 1.7;
    c.student.widths = {8, 16, 32};
    const std::string text = c.to_json();
    const RunConfig back = RunConfig::from_json(text);
    EXPECT_EQ(back.to_json(), text);
    EXPECT_EQ(back.seed, 17u);
    EXPECT_EQ(back.attack.epsilon, 0.05f);
    EXPECT_EQ(back.student.widths, (std::vector<std::int64_t>{8, 16, 32}));
}

TEST(RunConfig, EveryFieldIsExplicit) {
    const std::string text = RunConfig{}.to_json();
    for (const char* key : {"\"seed\"", "\"epsilon\"", "\"T\"", "\"temperature\"", "\"m\"", "\"t_star\"",
                            "\"split_ratios\"", "\"weight_decay\"", "\"blur_augment\"", "\"noise_std\""}) {
        EXPECT_NE(text.find(key), std::string::npos) << key;
    }
}

TEST(RunConfig, MissingKeysKeepDefaults) {
    const RunConfig c = RunConfig::from_json(R"({"seed": 5, "vit": {"train": {"epochs": 3}}})");
    EXPECT_EQ(c.seed, 5u);
    EXPECT_EQ(c.vit.train.epochs, 3);
    EXPECT_EQ(c.vit.train.lr, RunConfig{}.vit.train.lr);
    EXPECT_EQ(c.diffusion.T, 10);
}

TEST(RunConfig, UnknownKeyNamesPath) {
    try {
        RunConfig::from_json(R"({"vit": {"trian": {}}})");
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("vit.trian"), std::string::npos) << e.what();
    }
}

TEST(RunConfig, InvariantViolations) {
    EXPECT_THROW(RunConfig::from_json(R"({"attack": {"epsilon": 0}})"), ValidationError);
    EXPECT_THROW(RunConfig::from_json(R"({"attack": {"epsilon": 1.0}})"), ValidationError);
    EXPECT_THROW(RunConfig::from_json(R"({"diffusion": {"T": 0}})"), ValidationError);
    EXPECT_THROW(RunConfig::from_json(R"({"sevit": {"m": 0}})"), ValidationError);
    EXPECT_THROW(RunConfig::from_json(R"({"data": {"image_size": 4}})"), ValidationError);
    EXPECT_THROW(RunConfig::from_json(R"({"data": {"image_size": 30}})"), ValidationError);
    EXPECT_THROW(RunConfig::from_json(R"({"seed": "zero"})"), ValidationError);
    EXPECT_THROW(RunConfig::from_json("{not json"), ValidationError);
}
