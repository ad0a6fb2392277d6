#include <functional>
#include <cstring>
#include <fstream>

#include "doctest.h"
#include "support/tmpdir.hpp"
#include "voxrep/ingest.hpp"
#include "voxrep/nifti.hpp"

using namespace voxrep;
using namespace voxrep::ingest;
using testsupport::TmpDir;

namespace {

VolumeSeries make_series(Shape shape, std::function<float(int64_t)> fill, float tr = 0.735f) {
    VolumeSeries v;
    v.subject_id = "sub-test";
    v.data = TensorF(shape);
    for (int64_t i = 0; i < v.data.numel(); ++i) v.data.v[i] = fill(i);
    v.tr_seconds = tr;
    return v;
}

}  // namespace

TEST_CASE("nifti round trip is bit exact for float32") {
    TmpDir tmp("nifti");
    Rng rng(5);
    auto v = make_series({3, 2, 2, 2}, [&](int64_t) { return static_cast<float>(rng.normal()); });

    for (const char* name : {"roundtrip.nii", "roundtrip.nii.gz"}) {
        const std::string path = tmp.file(name);
        save_nifti(path, v);
        auto loaded = load_nifti(path, "sub-test");
        REQUIRE(loaded.data.shape == v.data.shape);
        CHECK(loaded.data.v == v.data.v);  // bitwise
        CHECK(loaded.tr_seconds == doctest::Approx(v.tr_seconds));
        CHECK_FALSE(loaded.normalized);
    }
}

TEST_CASE("nifti honors 4-d header dims (53x63x52, T=33)") {
    TmpDir tmp("nifti_dims");
    VolumeSeries v;
    v.subject_id = "s";
    v.data = TensorF({33, 53, 63, 52});
    v.data.v[12345] = 1.5f;
    v.tr_seconds = 11.025f;
    const std::string path = tmp.file("big.nii");
    save_nifti(path, v);
    auto loaded = load_nifti(path);
    CHECK(loaded.data.shape == Shape{33, 53, 63, 52});
    CHECK(loaded.data.v[12345] == 1.5f);
}

TEST_CASE("nifti rejects bad magic, too many dims, NaN voxels") {
    TmpDir tmp("nifti_bad");
    auto v = make_series({1, 2, 2, 2}, [](int64_t i) { return static_cast<float>(i); });
    const std::string path = tmp.file("bad_magic.nii");
    save_nifti(path, v);
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(344);
        f.write("XXX", 4);
    }
    CHECK_THROWS_AS(load_nifti(path), FormatError);

    const std::string path5d = tmp.file("fivedim.nii");
    save_nifti(path5d, v);
    {
        std::fstream f(path5d, std::ios::in | std::ios::out | std::ios::binary);
        int16_t five = 5;
        f.seekp(40);
        f.write(reinterpret_cast<const char*>(&five), 2);
    }
    CHECK_THROWS_AS(load_nifti(path5d), FormatError);

    auto bad = make_series({1, 2, 2, 2}, [](int64_t i) { return static_cast<float>(i); });
    bad.data.v[3] = std::nanf("");
    const std::string nan_path = tmp.file("nan.nii");
    save_nifti(nan_path, bad);
    try {
        load_nifti(nan_path);
        FAIL("expected DataError");
    } catch (const DataError& e) {
        // names the voxel index (t=0, x=0, y=1, z=1)
        CHECK(std::string(e.what()).find("x=0") != std::string::npos);
        CHECK(std::string(e.what()).find("y=1") != std::string::npos);
        CHECK(std::string(e.what()).find("z=1") != std::string::npos);
    }
}

TEST_CASE("nifti big-endian payloads are byte-swapped") {
    TmpDir tmp("nifti_be");
    // Hand-build a big-endian 2x1x1 float32 file.
    std::vector<unsigned char> hdr(352, 0);
    auto put_be32 = [&](size_t off, uint32_t x) {
        hdr[off] = (x >> 24) & 0xff;
        hdr[off + 1] = (x >> 16) & 0xff;
        hdr[off + 2] = (x >> 8) & 0xff;
        hdr[off + 3] = x & 0xff;
    };
    auto put_be16 = [&](size_t off, uint16_t x) {
        hdr[off] = (x >> 8) & 0xff;
        hdr[off + 1] = x & 0xff;
    };
    put_be32(0, 348);
    put_be16(40, 3);  // dim[0]
    put_be16(42, 2);  // nx
    put_be16(44, 1);
    put_be16(46, 1);
    for (size_t i = 48; i <= 54; i += 2) put_be16(i, 1);
    put_be16(70, 16);  // float32
    put_be16(72, 32);
    uint32_t offs_bits;
    float offs = 352.0f;
    std::memcpy(&offs_bits, &offs, 4);
    put_be32(108, offs_bits);
    hdr[344] = 'n';
    hdr[345] = '+';
    hdr[346] = '1';

    const float vals[2] = {1.5f, -2.25f};
    const std::string path = tmp.file("be.nii");
    std::ofstream os(path, std::ios::binary);
    os.write(reinterpret_cast<const char*>(hdr.data()), 352);
    for (float f : vals) {
        uint32_t bits;
        std::memcpy(&bits, &f, 4);
        unsigned char be[4] = {static_cast<unsigned char>((bits >> 24) & 0xff),
                               static_cast<unsigned char>((bits >> 16) & 0xff),
                               static_cast<unsigned char>((bits >> 8) & 0xff),
                               static_cast<unsigned char>(bits & 0xff)};
        os.write(reinterpret_cast<const char*>(be), 4);
    }
    os.close();

    auto v = load_nifti(path);
    CHECK(v.data.shape == Shape{1, 2, 1, 1});
    CHECK(v.data.v[0] == 1.5f);
    CHECK(v.data.v[1] == -2.25f);
}

TEST_CASE("nifti applies scl_slope and scl_inter to integer data") {
    TmpDir tmp("nifti_scl");
    std::vector<unsigned char> hdr(352, 0);
    auto put16 = [&](size_t off, uint16_t x) {
        hdr[off] = x & 0xff;
        hdr[off + 1] = (x >> 8) & 0xff;
    };
    auto putf = [&](size_t off, float f) { std::memcpy(hdr.data() + off, &f, 4); };
    int32_t sz = 348;
    std::memcpy(hdr.data(), &sz, 4);
    put16(40, 3);
    put16(42, 3);
    put16(44, 1);
    put16(46, 1);
    put16(70, 4);  // int16
    put16(72, 16);
    putf(108, 352.0f);
    putf(112, 2.0f);  // scl_slope
    putf(116, 1.0f);  // scl_inter
    hdr[344] = 'n';
    hdr[345] = '+';
    hdr[346] = '1';
    const std::string path = tmp.file("scaled.nii");
    std::ofstream os(path, std::ios::binary);
    os.write(reinterpret_cast<const char*>(hdr.data()), 352);
    const int16_t raw[3] = {0, 5, -3};
    os.write(reinterpret_cast<const char*>(raw), 6);
    os.close();

    auto v = load_nifti(path);
    CHECK(v.data.v[0] == 1.0f);
    CHECK(v.data.v[1] == 11.0f);
    CHECK(v.data.v[2] == -5.0f);
}

TEST_CASE("rescale_and_threshold maps endpoints and thresholds at 0.05") {
    auto v = make_series({1, 3, 1, 1}, [](int64_t i) { return std::vector<float>{0, 5, 10}[i]; });
    auto out = rescale_and_threshold(v);
    CHECK(out.data.v[0] == 0.0f);
    CHECK(out.data.v[1] == 0.5f);
    CHECK(out.data.v[2] == 1.0f);
    CHECK(out.normalized);

    // 0.04 is cut, 0.05 survives.
    auto w = make_series({1, 4, 1, 1},
                         [](int64_t i) { return std::vector<float>{0.0f, 0.04f, 0.05f, 1.0f}[i]; });
    auto wo = rescale_and_threshold(w);
    CHECK(wo.data.v[0] == 0.0f);
    CHECK(wo.data.v[1] == 0.0f);
    CHECK(wo.data.v[2] == 0.05f);
    CHECK(wo.data.v[3] == 1.0f);
}

TEST_CASE("rescale_and_threshold: constant timepoint yields zeros plus warning") {
    auto v = make_series({2, 2, 1, 1}, [](int64_t i) { return i < 2 ? 7.0f : float(i); });
    std::vector<std::string> warnings;
    auto out = rescale_and_threshold(v, &warnings);
    CHECK(out.data.v[0] == 0.0f);
    CHECK(out.data.v[1] == 0.0f);
    REQUIRE(warnings.size() == 1);
    CHECK(warnings[0].find("timepoint 0") != std::string::npos);
    // second timepoint is known non-constant
    CHECK(out.data.v[3] == 1.0f);
}

TEST_CASE("rescale_and_threshold is idempotent on its own output") {
    Rng rng(99);
    auto v = make_series({4, 5, 4, 3}, [&](int64_t) { return static_cast<float>(rng.uniform() * 90); });
    auto once = rescale_and_threshold(v);
    auto twice = rescale_and_threshold(once);
    CHECK(once.data.v == twice.data.v);

    // invariant: all values either 0 or in [0.05, 1]
    for (float x : once.data.v) {
        CHECK(x >= 0.0f);
        CHECK(x <= 1.0f);
        if (x != 0.0f) CHECK(x >= 0.05f);
    }
}

TEST_CASE("paa: window arithmetic, trailing partial window, tr scaling") {
    // T=490, window 15 -> 33 points (32 full + one 10-point window).
    auto v = make_series({490, 1, 1, 1}, [](int64_t i) { return static_cast<float>(i); });
    auto out = paa(v, 15);
    CHECK(out.timepoints() == 33);
    CHECK(out.tr_seconds == doctest::Approx(0.735f * 15));
    // last window averages timepoints 480..489
    CHECK(out.data.v[32] == doctest::Approx((480 + 489) / 2.0));

    // single-voxel series 1..10, window 5 -> [3, 8]
    auto w = make_series({10, 1, 1, 1}, [](int64_t i) { return static_cast<float>(i + 1); });
    auto wo = paa(w, 5);
    REQUIRE(wo.timepoints() == 2);
    CHECK(wo.data.v[0] == 3.0f);
    CHECK(wo.data.v[1] == 8.0f);

    // constant series is untouched by any window
    auto c = make_series({12, 2, 2, 1}, [](int64_t) { return 0.25f; });
    for (int64_t window : {1, 3, 5, 12}) {
        auto co = paa(c, window);
        for (float x : co.data.v) CHECK(x == 0.25f);
    }

    CHECK_THROWS_AS(paa(w, 11), ArgumentError);
    CHECK_THROWS_AS(paa(w, 0), ArgumentError);
}

TEST_CASE("paa matches a direct-summation oracle bit for bit") {
    Rng rng(123);
    auto v = make_series({23, 3, 2, 2}, [&](int64_t) { return static_cast<float>(rng.normal()); });
    const int64_t window = 4;
    auto out = paa(v, window);
    const int64_t voxels = v.voxels();
    for (int64_t k = 0; k < out.timepoints(); ++k) {
        const int64_t t0 = k * window, t1 = std::min<int64_t>(23, t0 + window);
        for (int64_t j = 0; j < voxels; ++j) {
            double acc = 0;
            for (int64_t t = t0; t < t1; ++t) acc += v.data.v[t * voxels + j];
            const float want = static_cast<float>(acc / (t1 - t0));
            CHECK(out.data.v[k * voxels + j] == want);  // bit match
        }
    }
}

TEST_CASE("paa properties: linearity, window=T mean, window=1 identity") {
    Rng rng(321);
    auto v1 = make_series({9, 2, 3, 2}, [&](int64_t) { return static_cast<float>(rng.normal()); });
    auto v2 = make_series({9, 2, 3, 2}, [&](int64_t) { return static_cast<float>(rng.normal()); });

    const float a = 1.7f, b = -0.4f;
    auto combo = v1;
    for (int64_t i = 0; i < combo.data.numel(); ++i)
        combo.data.v[i] = a * v1.data.v[i] + b * v2.data.v[i];
    for (int64_t window : {2, 3, 9}) {
        auto lhs = paa(combo, window);
        auto r1 = paa(v1, window), r2 = paa(v2, window);
        for (int64_t i = 0; i < lhs.data.numel(); ++i)
            CHECK(lhs.data.v[i] ==
                  doctest::Approx(a * r1.data.v[i] + b * r2.data.v[i]).epsilon(1e-6));
    }

    // window = T: temporal mean volume
    auto m = paa(v1, 9);
    REQUIRE(m.timepoints() == 1);
    for (int64_t j = 0; j < v1.voxels(); ++j) {
        double acc = 0;
        for (int64_t t = 0; t < 9; ++t) acc += v1.data.v[t * v1.voxels() + j];
        CHECK(m.data.v[j] == doctest::Approx(acc / 9.0).epsilon(1e-6));
    }

    // window = 1: identity
    auto id = paa(v1, 1);
    CHECK(id.data.v == v1.data.v);
}

TEST_CASE("manifest: round trip, missing labels, validation errors") {
    TmpDir tmp("manifest");
    const std::string path = tmp.file("manifest.csv");
    {
        std::ofstream os(path);
        os << "subject_id,path,age,sex,diagnosis,fold\n";
        os << "sub-1,vol1.nii,62.5,0,1,0\n";
        os << "sub-2,vol2.nii,,1,,3\n";
        os << "sub-3,/abs/vol3.nii,45,,0,train\n";
    }
    auto m = DatasetManifest::load(path);
    REQUIRE(m.records.size() == 3);
    CHECK(m.records[0].age == doctest::Approx(62.5f));
    CHECK(m.records[0].sex == 0);
    CHECK(m.records[0].diagnosis == 1);
    CHECK(m.records[0].fold == 0);
    CHECK_FALSE(m.records[1].age.has_value());
    CHECK_FALSE(m.records[1].diagnosis.has_value());
    CHECK(m.records[1].fold == 3);
    REQUIRE(m.records[2].split.has_value());
    CHECK(*m.records[2].split == Split::kTrain);
    CHECK(m.resolve_path(m.records[2]) == "/abs/vol3.nii");
    CHECK(m.resolve_path(m.records[0]).find("vol1.nii") != std::string::npos);

    const std::string out = tmp.file("copy.csv");
    m.save(out);
    auto m2 = DatasetManifest::load(out);
    REQUIRE(m2.records.size() == 3);
    CHECK(m2.records[1].sex == 1);
    CHECK_FALSE(m2.records[1].diagnosis.has_value());
    CHECK(*m2.records[2].split == Split::kTrain);

    {
        std::ofstream os(tmp.file("dup.csv"));
        os << "subject_id,path,age,sex,diagnosis,fold\n";
        os << "sub-1,a.nii,,,,\n";
        os << "sub-1,b.nii,,,,\n";
    }
    CHECK_THROWS_AS(DatasetManifest::load(tmp.file("dup.csv")), FormatError);

    {
        std::ofstream os(tmp.file("foldrange.csv"));
        os << "subject_id,path,age,sex,diagnosis,fold\n";
        os << "sub-1,a.nii,,,,7\n";
    }
    CHECK_THROWS_AS(DatasetManifest::load(tmp.file("foldrange.csv")), FormatError);
}
