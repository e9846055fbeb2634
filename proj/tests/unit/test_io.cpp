#include <bit>
#include <cstring>
#include <fstream>
#include <random>

#include "gcut3r/io.hpp"
#include "gcut3r/rng.hpp"
#include "support.hpp"

using namespace gcut3r;
using namespace testing;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        std::random_device rd;
        path = fs::temp_directory_path() / ("gcut3r_io_" + std::to_string(rd()) + std::to_string(rd()));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
};

// Bitwise reflected CRC-32 (polynomial 0xEDB88320).
std::uint32_t crc32_oracle(const std::vector<std::uint8_t>& bytes, std::size_t n) {
    std::uint32_t c = 0xFFFFFFFFu;
    for (std::size_t i = 0; i < n; ++i) {
        c ^= bytes[i];
        for (int k = 0; k < 8; ++k) c = (c >> 1) ^ (0xEDB88320u & (0u - (c & 1u)));
    }
    return ~c;
}

template <class T>
void put(std::vector<std::uint8_t>& out, T v) {
    std::uint8_t b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    out.insert(out.end(), b, b + sizeof(T));
}

std::string text_of(const fs::path& p) {
    std::ifstream in(p);
    return {std::istreambuf_iterator<char>(in), {}};
}

std::string error_text(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.what();
    }
    return {};
}

}  // namespace

static_assert(std::endian::native == std::endian::little, "byte-layout oracles assume a little-endian host");

TEST_SUITE("rasters") {
    TEST_CASE("byte layout of a written raster") {
        TempDir t;
        Array a({2, 1, 3});
        a.data = {0.5, -1, 2, 3, 4.25, 1e-3};
        io::write_raster(t.path / "r.bin", a, 2.0);
        std::vector<std::uint8_t> expect;
        put<std::uint32_t>(expect, 1);
        put<std::uint32_t>(expect, 3);
        put<float>(expect, 2.0f);
        put<std::uint32_t>(expect, 0);
        for (double v : a.data) put<float>(expect, static_cast<float>(v));
        CHECK(io::read_bytes(t.path / "r.bin") == expect);
        const io::Raster r = io::read_raster(t.path / "r.bin");
        CHECK(r.data.shape == Shape{2, 1, 3});
        CHECK(r.scale == 2.0);
        for (std::size_t i = 0; i < 6; ++i) CHECK(r.data[i] == static_cast<double>(static_cast<float>(a.data[i])));
    }

    TEST_CASE("depth rasters keep the mask through zeros") {
        TempDir t;
        DepthRaster d(2, 2);
        d.values = {1.5, 0.0, 0.25, 2.0};
        d.mask = {1, 0, 1, 1};
        d.scale = 2.0;
        io::write_depth(t.path / "d.bin", d);
        const DepthRaster r = io::read_depth(t.path / "d.bin");
        CHECK(r.values == d.values);
        CHECK(r.mask == d.mask);
        CHECK(r.scale == 2.0);
    }

    TEST_CASE("malformed rasters") {
        TempDir t;
        io::write_bytes(t.path / "short.bin", {1, 2, 3});
        check_throws_code([&] { io::read_raster(t.path / "short.bin"); }, Errc::malformed_file);
        std::vector<std::uint8_t> bad;
        put<std::uint32_t>(bad, 2);
        put<std::uint32_t>(bad, 2);
        put<float>(bad, 1.0f);
        put<std::uint32_t>(bad, 0);
        for (int i = 0; i < 5; ++i) put<float>(bad, 1.0f);  // not a multiple of H*W
        io::write_bytes(t.path / "bad.bin", bad);
        check_throws_code([&] { io::read_raster(t.path / "bad.bin"); }, Errc::malformed_file);
        io::write_raster(t.path / "rgb.bin", Array({3, 2, 2}, 1.0));
        check_throws_code([&] { io::read_depth(t.path / "rgb.bin"); }, Errc::malformed_file);
        check_throws_code([&] { io::read_raster(t.path / "missing.bin"); }, Errc::io);
    }
}

TEST_SUITE("cameras") {
    TEST_CASE("round trip is exact") {
        TempDir t;
        std::mt19937_64 rng(1);
        std::vector<io::Camera> cams;
        for (int i = 0; i < 5; ++i) cams.push_back({random_intrinsics(rng), random_pose(rng)});
        io::write_cameras(t.path / "c.txt", cams);
        const auto back = io::read_cameras(t.path / "c.txt");
        REQUIRE(back.size() == 5);
        for (std::size_t i = 0; i < 5; ++i) {
            CHECK(back[i].k == cams[i].k);
            CHECK(back[i].pose.t == cams[i].pose.t);
            CHECK(std::abs(back[i].pose.q.dot(cams[i].pose.q)) > 1.0 - 1e-15);
        }
    }

    TEST_CASE("hand-written file") {
        TempDir t;
        io::write_text(t.path / "c.txt", "# fx fy cx cy qw qx qy qz tx ty tz\n10 11 4 5 1 0 0 0 0.5 0 -1\n");
        const auto c = io::read_cameras(t.path / "c.txt");
        REQUIRE(c.size() == 1);
        CHECK(c[0].k == Intrinsics{10, 11, 4, 5});
        CHECK(c[0].pose.t == Vec3(0.5, 0, -1));
    }

    TEST_CASE("errors carry line numbers") {
        TempDir t;
        io::write_text(t.path / "c.txt", "1 1 0 0 1 0 0 0 0 0 0\n1 1 0 0 1 0 0\n");
        check_throws_code([&] { io::read_cameras(t.path / "c.txt"); }, Errc::malformed_file);
        CHECK(error_text([&] { io::read_cameras(t.path / "c.txt"); }).find(":2:") != std::string::npos);
        io::write_text(t.path / "z.txt", "1 1 0 0 0 0 0 0 0 0 0\n");
        check_throws_code([&] { io::read_cameras(t.path / "z.txt"); }, Errc::invalid_quaternion);
    }
}

TEST_SUITE("container") {
    std::vector<io::Record> sample_records() {
        Array a({2, 3});
        a.data = {1, 2, 3, 4, 5, 6};
        return {{"w", a}, {"scalar", Array({1}, -0.5)}};
    }

    TEST_CASE("byte layout matches a hand-built stream with a bitwise CRC") {
        const auto bytes = io::encode_container(sample_records());
        std::vector<std::uint8_t> expect(io::kMagic, io::kMagic + 8);
        put<std::uint64_t>(expect, 1);
        expect.push_back('w');
        put<std::uint64_t>(expect, 2);
        put<std::uint64_t>(expect, 2);
        put<std::uint64_t>(expect, 3);
        for (double v : {1, 2, 3, 4, 5, 6}) put<double>(expect, v);
        put<std::uint64_t>(expect, 6);
        for (char ch : std::string("scalar")) expect.push_back(static_cast<std::uint8_t>(ch));
        put<std::uint64_t>(expect, 1);
        put<std::uint64_t>(expect, 1);
        put<double>(expect, -0.5);
        put<std::uint32_t>(expect, crc32_oracle(expect, expect.size()));
        CHECK(bytes == expect);
    }

    TEST_CASE("round trip preserves names, shapes and bits") {
        TempDir t;
        std::mt19937_64 rng(2);
        std::vector<io::Record> recs;
        for (int i = 0; i < 6; ++i) {
            Array a({static_cast<std::size_t>(i + 1), 3});
            for (double& x : a.data) x = std::normal_distribution<double>()(rng);
            recs.push_back({"p" + std::to_string(i), a});
        }
        io::write_container(t.path / "x.ckpt", recs);
        const auto back = io::read_container(t.path / "x.ckpt");
        REQUIRE(back.size() == recs.size());
        for (std::size_t i = 0; i < recs.size(); ++i) {
            CHECK(back[i].name == recs[i].name);
            CHECK(back[i].value.shape == recs[i].value.shape);
            CHECK(back[i].value.data == recs[i].value.data);
        }
    }

    TEST_CASE("every single-byte corruption and every truncation is detected") {
        const auto good = io::encode_container(sample_records());
        for (std::size_t i = 0; i < good.size(); ++i) {
            auto bad = good;
            bad[i] ^= 0x5A;
            check_throws_code([&] { io::decode_container(bad); }, Errc::corrupt_checkpoint);
        }
        for (std::size_t n = 0; n < good.size(); ++n) {
            const std::vector<std::uint8_t> cut(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(n));
            check_throws_code([&] { io::decode_container(cut); }, Errc::corrupt_checkpoint);
        }
    }

    TEST_CASE("corrupt files name the path") {
        TempDir t;
        io::write_bytes(t.path / "junk.ckpt", {'n', 'o', 'p', 'e'});
        check_throws_code([&] { io::read_container(t.path / "junk.ckpt"); }, Errc::corrupt_checkpoint);
        CHECK(error_text([&] { io::read_container(t.path / "junk.ckpt"); }).find("junk.ckpt") != std::string::npos);
    }
}

TEST_SUITE("config text") {
    TEST_CASE("comments, blanks and whitespace") {
        const auto c = io::parse_config("# header\n\n  lr = 0.001  # peak\nname=tiny\n\tsteps\t=\t10\n");
        REQUIRE(c.size() == 3);
        CHECK(c.at("lr").value == "0.001");
        CHECK(c.at("lr").line == 3);
        CHECK(c.at("name").value == "tiny");
        CHECK(c.at("steps").value == "10");
        CHECK(c.at("steps").line == 5);
    }

    TEST_CASE("errors name the origin and line") {
        struct Bad {
            const char* text;
            const char* where;
        };
        for (const Bad& b : {Bad{"a = 1\nb\n", "cfg:2"}, Bad{"= 3\n", "cfg:1"}, Bad{"\n\nk =\n", "cfg:3"},
                             Bad{"k = 1\nk = 2\n", "cfg:2"}}) {
            check_throws_code([&] { io::parse_config(b.text, "cfg"); }, Errc::config);
            CHECK(error_text([&] { io::parse_config(b.text, "cfg"); }).find(b.where) != std::string::npos);
        }
    }
}

TEST_SUITE("corpus") {
    TEST_CASE("generation, manifest and reload") {
        TempDir t;
        const io::Corpus c = io::generate_corpus(t.path / "c", 20, 99, "noisy", 0.1);
        REQUIRE(c.entries.size() == 20);
        CHECK(c.split("train").size() == 18);
        CHECK(c.split("holdout").size() == 2);
        for (std::size_t i = 0; i < 20; ++i) {
            CHECK(c.entries[i].seed == derive_seed(99, "sample", i));
            CHECK(c.entries[i].split == (i >= 18 ? "holdout" : "train"));
        }
        const std::string manifest = text_of(t.path / "c" / "manifest");
        CHECK(manifest.rfind("# gcut3r corpus image_size=32\n", 0) == 0);
        CHECK(manifest.find(std::to_string(c.entries[0].seed) + " noisy train\n") != std::string::npos);

        const io::Corpus back = io::load_corpus(t.path / "c");
        REQUIRE(back.entries.size() == 20);
        for (std::size_t i = 0; i < 20; ++i) {
            CHECK(back.entries[i].seed == c.entries[i].seed);
            CHECK(back.entries[i].profile == "noisy");
            CHECK(back.entries[i].split == c.entries[i].split);
        }
    }

    TEST_CASE("stored rasters agree with the regenerated sample") {
        TempDir t;
        const io::Corpus c = io::generate_corpus(t.path / "c", 3, 5, "sparse", 0.0);
        for (const auto& e : c.entries) {
            const fs::path dir = t.path / "c" / e.id();
            const SceneSample s = c.sample(e);
            const auto cams = io::read_cameras(dir / "cameras.txt");
            const auto guide = io::read_cameras(dir / "guidance_cameras.txt");
            REQUIRE(cams.size() == 4);
            REQUIRE(guide.size() == 4);
            for (std::size_t k = 0; k < 4; ++k) {
                const std::string ks = std::to_string(k);
                const io::Raster img = io::read_raster(dir / ("image_" + ks + ".bin"));
                for (std::size_t i = 0; i < img.data.size(); ++i) {
                    CHECK(img.data[i] == static_cast<double>(static_cast<float>(s.frames[k].image[i])));
                }
                const DepthRaster gd = io::read_depth(dir / ("guidance_depth_" + ks + ".bin"));
                CHECK(gd.mask == s.guidance[k].depth->mask);
                const io::Raster pm = io::read_raster(dir / ("pointmap_" + ks + ".bin"));
                CHECK(pm.data.shape == Shape{3, 32, 32});
                CHECK(cams[k].k == s.frames[k].intrinsics);
                CHECK((cams[k].pose.t - s.frames[k].relative_pose.t).norm() < 1e-15);
            }
        }
    }

    TEST_CASE("malformed manifests") {
        TempDir t;
        check_throws_code([&] { io::load_corpus(t.path); }, Errc::io);
        io::write_text(t.path / "manifest", "# gcut3r corpus image_size=32\n12 noisy valid\n");
        check_throws_code([&] { io::load_corpus(t.path); }, Errc::malformed_file);
        io::write_text(t.path / "manifest", "# gcut3r corpus image_size=32\n12 foggy train\n");
        check_throws_code([&] { io::load_corpus(t.path); }, Errc::malformed_file);
        io::write_text(t.path / "manifest", "12 noisy train\n");
        check_throws_code([&] { io::load_corpus(t.path); }, Errc::malformed_file);
        check_throws_code([&] { io::generate_corpus(t.path / "x", 2, 1, "fog", 0.5); }, Errc::usage);
        check_throws_code([&] { io::generate_corpus(t.path / "x", 2, 1, "clean", 1.5); }, Errc::usage);
    }
}

TEST_SUITE("hashing") {
    TEST_CASE("git blob ids of known contents") {
        CHECK(io::git_blob_hash({}) == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
        const std::string hello = "hello\n";
        CHECK(io::git_blob_hash({hello.begin(), hello.end()}) == "ce013625030ba8dba906f756967f9e9ca394464a");
    }
}
