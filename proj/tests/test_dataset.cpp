#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <zlib.h>

#include <filesystem>
#include <fstream>

#include "cfu/dataset.hpp"

using namespace cfu;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) : path(fs::temp_directory_path() / ("cfu_test_dataset_" + tag)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    fs::path operator/(const std::string& name) const { return path / name; }
};

void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& b) {
    std::ofstream os(p, std::ios::binary);
    os.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; }

std::vector<std::uint8_t> image_file(std::uint32_t magic, std::uint32_t n, std::uint32_t rows, std::uint32_t cols,
                                     const std::vector<std::uint8_t>& pixels) {
    std::vector<std::uint8_t> b;
    put_u32(b, magic);
    put_u32(b, n);
    put_u32(b, rows);
    put_u32(b, cols);
    b.insert(b.end(), pixels.begin(), pixels.end());
    return b;
}

std::vector<std::uint8_t> label_file(std::uint32_t magic, const std::vector<std::uint8_t>& labels) {
    std::vector<std::uint8_t> b;
    put_u32(b, magic);
    put_u32(b, static_cast<std::uint32_t>(labels.size()));
    b.insert(b.end(), labels.begin(), labels.end());
    return b;
}

IdxError::Kind idx_kind(const fs::path& img, const fs::path& lab) {
    try {
        load_idx(img, lab);
    } catch (const IdxError& e) {
        return e.kind();
    }
    FAIL("load_idx accepted a malformed pair");
    return IdxError::Kind::Io;
}

const std::vector<std::uint8_t> kPixels{0, 255, 128, 64, 10, 20, 30, 40};

}  // namespace

TEST_CASE("idx: two 2x2 images built byte by byte") {
    TempDir dir("two");
    write_bytes(dir / "img", image_file(kIdxImageMagic, 2, 2, 2, kPixels));
    write_bytes(dir / "lab", label_file(kIdxLabelMagic, {7, 3}));
    const auto ds = load_idx(dir / "img", dir / "lab");
    CHECK(ds.size() == 2);
    CHECK(ds.dims == 4);
    CHECK(ds.feature_shape == Shape{1, 2, 2});
    CHECK(ds.labels == std::vector<int>{7, 3});
    CHECK(ds.num_classes == 8);
    for (std::size_t i = 0; i < kPixels.size(); ++i) CHECK(ds.features[i] == kPixels[i] / 255.0);
    REQUIRE(ds.range);
    CHECK(*ds.range == FeatureRange{0.0, 1.0});
    CHECK_NOTHROW(ds.validate());
}

TEST_CASE("idx: malformed files are rejected with a specific kind") {
    TempDir dir("bad");
    const auto good_lab = label_file(kIdxLabelMagic, {1, 2});
    write_bytes(dir / "lab", good_lab);

    write_bytes(dir / "img", image_file(0x00000801, 2, 2, 2, kPixels));
    CHECK(idx_kind(dir / "img", dir / "lab") == IdxError::Kind::BadMagic);

    write_bytes(dir / "img", image_file(kIdxImageMagic, 2, 2, 2, kPixels));
    write_bytes(dir / "badlab", label_file(kIdxImageMagic, {1, 2}));
    CHECK(idx_kind(dir / "img", dir / "badlab") == IdxError::Kind::BadMagic);

    write_bytes(dir / "img", image_file(kIdxImageMagic, 2, 2, 2, {1, 2, 3, 4, 5}));
    CHECK(idx_kind(dir / "img", dir / "lab") == IdxError::Kind::Truncated);

    write_bytes(dir / "img", {0, 0, 8});
    CHECK(idx_kind(dir / "img", dir / "lab") == IdxError::Kind::Truncated);

    write_bytes(dir / "img", image_file(kIdxImageMagic, 2, 2, 2, kPixels));
    write_bytes(dir / "lab3", label_file(kIdxLabelMagic, {1, 2, 3}));
    CHECK(idx_kind(dir / "img", dir / "lab3") == IdxError::Kind::CountMismatch);

    write_bytes(dir / "img0", image_file(kIdxImageMagic, 0, 2, 2, {}));
    write_bytes(dir / "lab0", label_file(kIdxLabelMagic, {}));
    CHECK(idx_kind(dir / "img0", dir / "lab0") == IdxError::Kind::Empty);

    CHECK(idx_kind(dir / "missing", dir / "lab") == IdxError::Kind::Io);
}

TEST_CASE("idx: gzip input decodes to the same data") {
    TempDir dir("gz");
    const auto img = image_file(kIdxImageMagic, 2, 2, 2, kPixels);
    const auto lab = label_file(kIdxLabelMagic, {0, 1});
    for (auto [name, bytes] : {std::pair{"img.gz", &img}, std::pair{"lab.gz", &lab}}) {
        gzFile f = gzopen((dir / name).c_str(), "wb");
        REQUIRE(f);
        gzwrite(f, bytes->data(), static_cast<unsigned>(bytes->size()));
        gzclose(f);
    }
    write_bytes(dir / "img", img);
    write_bytes(dir / "lab", lab);
    const auto a = load_idx(dir / "img.gz", dir / "lab.gz");
    const auto b = load_idx(dir / "img", dir / "lab");
    CHECK(a.features == b.features);
    CHECK(a.labels == b.labels);
}

TEST_CASE("idx: writer output reloads unchanged") {
    TempDir dir("rt");
    std::vector<std::uint8_t> pix(5 * 3 * 4), labels{0, 1, 2, 1, 0};
    for (std::size_t i = 0; i < pix.size(); ++i) pix[i] = static_cast<std::uint8_t>(i * 37 % 256);
    write_idx_images(dir / "img", 3, 4, pix);
    write_idx_labels(dir / "lab", labels);
    const auto ds = load_idx(dir / "img", dir / "lab");
    CHECK(ds.size() == 5);
    CHECK(ds.feature_shape == Shape{1, 3, 4});
    for (std::size_t i = 0; i < pix.size(); ++i) CHECK(ds.features[i] * 255.0 == doctest::Approx(pix[i]));
    CHECK(ds.labels == std::vector<int>{0, 1, 2, 1, 0});
}

TEST_CASE("normalize: pixel endpoints and midpoint") {
    TempDir dir("norm");
    write_idx_images(dir / "img", 1, 3, std::vector<std::uint8_t>{0, 255, 128});
    write_idx_labels(dir / "lab", std::vector<std::uint8_t>{0});
    const auto n = normalize(load_idx(dir / "img", dir / "lab"));
    CHECK(n.features[0] == doctest::Approx(-0.5).epsilon(1e-15));
    CHECK(n.features[1] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(std::abs(n.features[2] - (128.0 / 255.0 - 0.5)) < 1e-15);
    REQUIRE(n.range);
    CHECK(*n.range == FeatureRange{});
    const auto again = normalize(n);
    CHECK(again.features == n.features);
}

TEST_CASE("normalize: min-max per feature keeps order and flags constant columns") {
    Dataset ds;
    ds.dims = 3;
    ds.features = {5, 1, 2, -3, 1, 8, 10, 1, 5, 0, 1, -1};
    ds.labels = {0, 1, 0, 1};
    ds.num_classes = 2;
    const auto n = normalize(ds);
    for (std::size_t j = 0; j < 3; ++j) {
        double mn = 1, mx = -1;
        for (std::size_t i = 0; i < 4; ++i) {
            mn = std::min(mn, n.features[i * 3 + j]);
            mx = std::max(mx, n.features[i * 3 + j]);
            for (std::size_t k = 0; k < 4; ++k)
                if (ds.features[i * 3 + j] < ds.features[k * 3 + j]) CHECK(n.features[i * 3 + j] < n.features[k * 3 + j]);
        }
        if (j != 1) {
            CHECK(mn == doctest::Approx(-0.5));
            CHECK(mx == doctest::Approx(0.5));
        }
    }
    for (std::size_t i = 0; i < 4; ++i) CHECK(n.features[i * 3 + 1] == 0.0);
    REQUIRE(n.warnings.size() == 1);
    CHECK(n.warnings[0].find("feature 1") != std::string::npos);
    REQUIRE(n.normalization);
    const auto back = n.normalization->inverse(n.row(1));
    CHECK(back[0] == doctest::Approx(-3.0));
    CHECK(back[2] == doctest::Approx(8.0));
    CHECK(normalize(n).features == n.features);
}

TEST_CASE("csv: quoting rules") {
    const auto rows = parse_csv("a,\"b,c\",\"d\"\"e\"\n\"multi\nline\",2,3\r\n");
    REQUIRE(rows.size() == 2);
    CHECK(rows[0] == std::vector<std::string>{"a", "b,c", "d\"e"});
    CHECK(rows[1] == std::vector<std::string>{"multi\nline", "2", "3"});
    CHECK_THROWS(parse_csv("a,\"open\n"));
    CHECK_THROWS(parse_csv("a,b\"c\n"));
}

TEST_CASE("csv: tabular load and errors") {
    TempDir dir("csv");
    write_text(dir / "ok.csv", "x,label,y\n1.5,1,2\n-1,0,3e2\n");
    const auto ds = load_csv(dir / "ok.csv", {.label_column = "label"});
    CHECK(ds.dims == 2);
    CHECK(ds.features == std::vector<double>{1.5, 2, -1, 300});
    CHECK(ds.labels == std::vector<int>{1, 0});
    CHECK(ds.num_classes == 2);
    CHECK_FALSE(ds.range);

    const auto last = load_csv(dir / "ok.csv");
    CHECK(last.labels == std::vector<int>{2, 300});

    const auto unlabeled = load_csv(dir / "ok.csv", {.has_labels = false});
    CHECK(unlabeled.dims == 3);

    write_text(dir / "ragged.csv", "a,b\n1,2\n3\n");
    CHECK_THROWS_WITH_AS(load_csv(dir / "ragged.csv"), doctest::Contains("line 3"), std::invalid_argument);
    write_text(dir / "nan.csv", "a,b\n1,0\nfoo,1\n");
    CHECK_THROWS_AS(load_csv(dir / "nan.csv"), std::invalid_argument);
    write_text(dir / "frac.csv", "a,b\n1,0.5\n");
    CHECK_THROWS_AS(load_csv(dir / "frac.csv"), std::invalid_argument);
    write_text(dir / "neg.csv", "a,b\n1,-1\n");
    CHECK_THROWS_AS(load_csv(dir / "neg.csv"), std::invalid_argument);
    write_text(dir / "header.csv", "a,b\n");
    CHECK_THROWS_AS(load_csv(dir / "header.csv"), std::invalid_argument);
    CHECK_THROWS_AS(load_csv(dir / "ok.csv", {.label_column = "nope"}), std::invalid_argument);
    CHECK_THROWS(load_csv(dir / "absent.csv"));
}

TEST_CASE("synth: deterministic per seed, distinct across seeds") {
    SynthConfig cfg;
    cfg.seed = 11;
    cfg.n_train = 300;
    cfg.n_test = 100;
    const auto a = synth_shift_pair(cfg), b = synth_shift_pair(cfg);
    CHECK(a.train.features == b.train.features);
    CHECK(a.ood.features == b.ood.features);
    CHECK(a.test.labels == b.test.labels);
    cfg.seed = 12;
    CHECK(synth_shift_pair(cfg).train.features != a.train.features);
    for (const Dataset* ds : {&a.train, &a.test, &a.ood}) {
        CHECK_NOTHROW(ds->validate());
        CHECK(ds->dims == 16);
        CHECK(ds->num_classes == 3);
        for (double v : ds->features) {
            CHECK(v >= -0.5);
            CHECK(v <= 0.5);
        }
    }
    CHECK(a.train.size() == 300);
    CHECK(a.ood.size() == 100);
}

TEST_CASE("synth: class proportions follow the weights") {
    SynthConfig cfg;
    cfg.seed = 5;
    cfg.n_train = 20000;
    cfg.n_test = 10;
    cfg.dims = 4;
    cfg.class_weights = {1.0, 2.0, 1.0};
    const auto p = synth_shift_pair(cfg);
    std::vector<double> count(3, 0);
    for (int y : p.train.labels) count[static_cast<std::size_t>(y)] += 1;
    CHECK(std::abs(count[0] / 20000 - 0.25) < 0.01);
    CHECK(std::abs(count[1] / 20000 - 0.50) < 0.01);
    CHECK(std::abs(count[2] / 20000 - 0.25) < 0.01);
}

TEST_CASE("synth: shift moves the ood centroid away, zero shift does not") {
    auto centroid_gap = [](double shift) {
        SynthConfig cfg;
        cfg.seed = 3;
        cfg.n_train = 1000;
        cfg.n_test = 1000;
        cfg.shift = shift;
        const auto p = synth_shift_pair(cfg);
        auto centroid = [](const Dataset& d) {
            std::vector<double> c(d.dims, 0.0);
            for (std::size_t i = 0; i < d.size(); ++i)
                for (std::size_t j = 0; j < d.dims; ++j) c[j] += d.features[i * d.dims + j] / static_cast<double>(d.size());
            return c;
        };
        const auto a = centroid(p.test), b = centroid(p.ood);
        double s = 0;
        for (std::size_t j = 0; j < a.size(); ++j) s += (a[j] - b[j]) * (a[j] - b[j]);
        return std::sqrt(s);
    };
    CHECK(centroid_gap(0.0) < 0.05);
    CHECK(centroid_gap(5.0) > 0.3);
    SynthConfig bad;
    bad.shift = -1;
    CHECK_THROWS(synth_shift_pair(bad));
}

TEST_CASE("manifest lists every split") {
    TempDir dir("manifest");
    SynthConfig cfg;
    cfg.n_train = 50;
    cfg.n_test = 20;
    const auto p = synth_shift_pair(cfg);
    write_manifest(dir / "m.json", {{"train", &p.train}, {"ood", &p.ood}});
    std::ifstream is(dir / "m.json");
    const auto j = nlohmann::json::parse(is);
    CHECK(j["splits"]["train"]["rows"] == 50);
    CHECK(j["splits"]["ood"]["rows"] == 20);
    CHECK(j["splits"]["train"]["range"] == nlohmann::json::array({-0.5, 0.5}));
    CHECK(j["splits"]["ood"]["provenance"].get<std::string>().find("ood") != std::string::npos);
}
