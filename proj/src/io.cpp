#include "gcut3r/io.hpp"

#include <openssl/evp.h>
#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "gcut3r/errors.hpp"
#include "gcut3r/rng.hpp"

namespace gcut3r::io {

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

namespace {

template <class T>
void put(std::vector<std::uint8_t>& out, T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(T));
}

class Reader {
public:
    Reader(const std::vector<std::uint8_t>& bytes, std::size_t end, Errc err, std::string what)
        : bytes_(bytes), end_(end), err_(err), what_(std::move(what)) {}

    template <class T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    std::size_t remaining() const { return end_ - pos_; }

private:
    void need(std::size_t n) const {
        if (n > end_ - pos_) fail(err_, what_ + ": truncated");
    }

    const std::vector<std::uint8_t>& bytes_;
    std::size_t end_;
    Errc err_;
    std::string what_;
    std::size_t pos_ = 0;
};

std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

}  // namespace

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(Errc::io, "cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(Errc::io, "cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(Errc::io, "short write to " + path.string());
}

void write_text(const fs::path& path, const std::string& text) {
    write_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

// ---- rasters ----

void write_raster(const fs::path& path, const Array& data, double scale) {
    if (data.rank() != 2 && data.rank() != 3) {
        fail(Errc::shape, "raster must be H x W or c x H x W, got " + shape_str(data.shape));
    }
    const std::size_t h = data.dim(data.rank() - 2), w = data.dim(data.rank() - 1);
    std::vector<std::uint8_t> bytes;
    bytes.reserve(16 + 4 * data.size());
    put(bytes, static_cast<std::uint32_t>(h));
    put(bytes, static_cast<std::uint32_t>(w));
    put(bytes, static_cast<float>(scale));
    put(bytes, std::uint32_t{0});
    for (double v : data.data) put(bytes, static_cast<float>(v));
    write_bytes(path, bytes);
}

Raster read_raster(const fs::path& path) {
    const auto bytes = read_bytes(path);
    const std::string what = "raster " + path.string();
    if (bytes.size() < 16) fail(Errc::malformed_file, what + ": shorter than its 16-byte header");
    Reader r(bytes, bytes.size(), Errc::malformed_file, what);
    const auto h = r.get<std::uint32_t>();
    const auto w = r.get<std::uint32_t>();
    const auto scale = r.get<float>();
    r.get<std::uint32_t>();
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    if (plane == 0) fail(Errc::malformed_file, what + ": zero-sized header " + std::to_string(h) + "x" + std::to_string(w));
    if (r.remaining() % (4 * plane) != 0 || r.remaining() == 0) {
        fail(Errc::malformed_file, what + ": payload of " + std::to_string(r.remaining()) +
                                       " bytes is not a whole number of " + std::to_string(h) + "x" +
                                       std::to_string(w) + " float planes");
    }
    if (!std::isfinite(scale)) fail(Errc::malformed_file, what + ": non-finite scale");
    const std::size_t channels = r.remaining() / (4 * plane);
    Raster out;
    out.scale = scale;
    out.data = Array({channels, h, w});
    for (double& v : out.data.data) v = r.get<float>();
    return out;
}

void write_depth(const fs::path& path, const DepthRaster& depth) {
    Array a({depth.height, depth.width});
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = depth.mask[i] ? depth.values[i] : 0.0;
    write_raster(path, a, depth.scale);
}

DepthRaster read_depth(const fs::path& path) {
    const Raster r = read_raster(path);
    if (r.data.dim(0) != 1) {
        fail(Errc::malformed_file, "depth raster " + path.string() + " has " + std::to_string(r.data.dim(0)) + " channels");
    }
    DepthRaster d(r.data.dim(1), r.data.dim(2));
    d.scale = r.scale;
    for (std::size_t i = 0; i < d.values.size(); ++i) {
        const double v = r.data[i];
        if (!(v >= 0.0) || !std::isfinite(v)) fail(Errc::malformed_file, "depth raster " + path.string() + " has a negative value");
        d.values[i] = v;
        d.mask[i] = v > 0.0 ? 1 : 0;
    }
    return d;
}

// ---- cameras ----

void write_cameras(const fs::path& path, const std::vector<Camera>& cameras) {
    std::string text;
    for (const auto& c : cameras) {
        const double vals[] = {c.k.fx, c.k.fy, c.k.cx, c.k.cy, c.pose.q.w, c.pose.q.x, c.pose.q.y, c.pose.q.z,
                               c.pose.t.x(), c.pose.t.y(), c.pose.t.z()};
        for (std::size_t i = 0; i < 11; ++i) text += (i ? " " : "") + fmt(vals[i]);
        text += '\n';
    }
    write_text(path, text);
}

std::vector<Camera> read_cameras(const fs::path& path) {
    std::ifstream in(path);
    if (!in) fail(Errc::io, "cannot open " + path.string());
    std::vector<Camera> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos || line[first] == '#') continue;
        std::istringstream ls(line);
        double v[11];
        for (double& x : v) {
            if (!(ls >> x)) fail(Errc::malformed_file, path.string() + ":" + std::to_string(lineno) + ": expected 11 numbers");
        }
        std::string extra;
        if (ls >> extra) fail(Errc::malformed_file, path.string() + ":" + std::to_string(lineno) + ": trailing data");
        Camera c;
        c.k = {v[0], v[1], v[2], v[3]};
        c.pose.q = {v[4], v[5], v[6], v[7]};
        c.pose.t = {v[8], v[9], v[10]};
        const double n = c.pose.q.norm();
        if (!(n > 0.0)) fail(Errc::invalid_quaternion, path.string() + ":" + std::to_string(lineno) + ": zero quaternion");
        // text round trips lose the last ulp or so; renormalise
        c.pose.q = {c.pose.q.w / n, c.pose.q.x / n, c.pose.q.y / n, c.pose.q.z / n};
        c.k.validate();
        out.push_back(c);
    }
    return out;
}

// ---- container ----

std::vector<std::uint8_t> encode_container(const std::vector<Record>& records) {
    std::vector<std::uint8_t> out(kMagic, kMagic + 8);
    for (const auto& r : records) {
        put(out, static_cast<std::uint64_t>(r.name.size()));
        out.insert(out.end(), r.name.begin(), r.name.end());
        put(out, static_cast<std::uint64_t>(r.value.rank()));
        for (std::size_t e : r.value.shape) put(out, static_cast<std::uint64_t>(e));
        for (double v : r.value.data) put(out, v);
    }
    const auto crc = static_cast<std::uint32_t>(::crc32(0L, out.data(), static_cast<uInt>(out.size())));
    put(out, crc);
    return out;
}

std::vector<Record> decode_container(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 8) != 0) {
        fail(Errc::corrupt_checkpoint, "missing GCUT3R01 magic");
    }
    const std::size_t body = bytes.size() - 4;
    std::uint32_t stored;
    std::memcpy(&stored, bytes.data() + body, 4);
    const auto crc = static_cast<std::uint32_t>(::crc32(0L, bytes.data(), static_cast<uInt>(body)));
    if (crc != stored) fail(Errc::corrupt_checkpoint, "CRC mismatch");

    Reader r(bytes, body, Errc::corrupt_checkpoint, "checkpoint");
    r.str(8);
    std::vector<Record> out;
    while (r.remaining() > 0) {
        Record rec;
        const auto len = r.get<std::uint64_t>();
        if (len > r.remaining()) fail(Errc::corrupt_checkpoint, "record name overruns the file");
        rec.name = r.str(len);
        const auto rank = r.get<std::uint64_t>();
        if (rank > 8) fail(Errc::corrupt_checkpoint, "implausible rank for " + rec.name);
        Shape shape(rank);
        std::size_t n = 1;
        for (auto& e : shape) {
            e = r.get<std::uint64_t>();
            n *= e;
        }
        if (n > r.remaining() / 8) fail(Errc::corrupt_checkpoint, "record " + rec.name + " overruns the file");
        rec.value = Array(shape);
        for (double& v : rec.value.data) v = r.get<double>();
        out.push_back(std::move(rec));
    }
    return out;
}

void write_container(const fs::path& path, const std::vector<Record>& records) {
    write_bytes(path, encode_container(records));
}

std::vector<Record> read_container(const fs::path& path) {
    const std::string what = path.string();
    try {
        return decode_container(read_bytes(path));
    } catch (const Error& e) {
        if (e.code() == Errc::corrupt_checkpoint) fail(Errc::corrupt_checkpoint, what + ": " + e.what());
        throw;
    }
}

// ---- config ----

std::map<std::string, ConfigEntry> parse_config(const std::string& text, const std::string& origin) {
    std::map<std::string, ConfigEntry> out;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string{};
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    };
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        const std::string where = origin + ":" + std::to_string(lineno);
        if (eq == std::string::npos) fail(Errc::config, where + ": expected 'key = value'");
        const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
        if (key.empty()) fail(Errc::config, where + ": empty key");
        if (value.empty()) fail(Errc::config, where + ": empty value for '" + key + "'");
        if (out.count(key)) {
            fail(Errc::config, where + ": duplicate key '" + key + "' (first set on line " +
                                   std::to_string(out[key].line) + ")");
        }
        out[key] = {value, lineno};
    }
    return out;
}

std::map<std::string, ConfigEntry> read_config(const fs::path& path) {
    const auto bytes = read_bytes(path);
    return parse_config(std::string(bytes.begin(), bytes.end()), path.string());
}

// ---- corpus ----

std::string CorpusEntry::id() const {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << seed;
    return os.str();
}

std::vector<CorpusEntry> Corpus::split(const std::string& name) const {
    std::vector<CorpusEntry> out;
    for (const auto& e : entries) {
        if (e.split == name) out.push_back(e);
    }
    return out;
}

SceneSample Corpus::sample(const CorpusEntry& entry) const {
    SceneConfig sc;
    sc.image_size = image_size;
    return gen_sequence(entry.seed, NoiseConfig::profile(entry.profile), sc);
}

void write_sample(const fs::path& dir, const SceneSample& sample) {
    fs::create_directories(dir);
    std::vector<Camera> gt, guide;
    for (std::size_t k = 0; k < sample.frames.size(); ++k) {
        const auto& f = sample.frames[k];
        const std::string n = std::to_string(k);
        write_raster(dir / ("image_" + n + ".bin"), f.image);
        write_depth(dir / ("depth_" + n + ".bin"), f.gt_depth);
        write_raster(dir / ("pointmap_" + n + ".bin"), f.gt_pointmap);
        const auto& g = sample.guidance[k];
        if (g.depth) write_depth(dir / ("guidance_depth_" + n + ".bin"), *g.depth);
        gt.push_back({f.intrinsics, f.relative_pose});
        guide.push_back({g.intrinsics.value_or(f.intrinsics), g.pose.value_or(Pose::identity())});
    }
    write_cameras(dir / "cameras.txt", gt);
    write_cameras(dir / "guidance_cameras.txt", guide);
}

namespace {

void write_manifest(const Corpus& c) {
    std::string text = "# gcut3r corpus image_size=" + std::to_string(c.image_size) + "\n";
    for (const auto& e : c.entries) text += std::to_string(e.seed) + " " + e.profile + " " + e.split + "\n";
    write_text(c.root / "manifest", text);
}

}  // namespace

Corpus generate_corpus(const fs::path& root, std::size_t count, std::uint64_t seed, const std::string& profile,
                       double split_frac, std::size_t image_size) {
    if (!NoiseConfig::is_profile(profile)) NoiseConfig::profile(profile);  // throws the usage error
    if (!(split_frac >= 0.0 && split_frac <= 1.0)) fail(Errc::usage, "split fraction must lie in [0, 1]");
    std::error_code ec;
    fs::create_directories(root, ec);
    if (ec || !fs::is_directory(root)) fail(Errc::io, "cannot create corpus directory " + root.string());
    Corpus c;
    c.root = root;
    c.image_size = image_size;
    const auto holdout = static_cast<std::size_t>(std::llround(static_cast<double>(count) * split_frac));
    for (std::size_t i = 0; i < count; ++i) {
        c.entries.push_back({derive_seed(seed, "sample", i), profile, i + holdout >= count ? "holdout" : "train"});
    }
    for (const auto& e : c.entries) write_sample(root / e.id(), c.sample(e));
    write_manifest(c);
    return c;
}

Corpus load_corpus(const fs::path& root) {
    std::ifstream in(root / "manifest");
    if (!in) fail(Errc::io, "no manifest in " + root.string());
    Corpus c;
    c.root = root;
    std::string line;
    std::size_t lineno = 0;
    bool header = false;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string where = (root / "manifest").string() + ":" + std::to_string(lineno);
        if (line.rfind("#", 0) == 0) {
            const auto pos = line.find("image_size=");
            if (pos != std::string::npos) {
                c.image_size = std::stoul(line.substr(pos + 11));
                header = true;
            }
            continue;
        }
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::istringstream ls(line);
        CorpusEntry e;
        std::string extra;
        if (!(ls >> e.seed >> e.profile >> e.split) || (ls >> extra)) {
            fail(Errc::malformed_file, where + ": expected 'seed noise-profile split'");
        }
        if (!NoiseConfig::is_profile(e.profile)) fail(Errc::malformed_file, where + ": unknown profile " + e.profile);
        if (e.split != "train" && e.split != "holdout") fail(Errc::malformed_file, where + ": unknown split " + e.split);
        c.entries.push_back(e);
    }
    if (!header) fail(Errc::malformed_file, "manifest in " + root.string() + " lacks its image_size header");
    return c;
}

// ---- hashing ----

std::string git_blob_hash(const std::vector<std::uint8_t>& content) {
    const std::string header = "blob " + std::to_string(content.size()) + std::string(1, '\0');
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    const bool ok = ctx && EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) &&
                    EVP_DigestUpdate(ctx, header.data(), header.size()) &&
                    EVP_DigestUpdate(ctx, content.data(), content.size()) && EVP_DigestFinal_ex(ctx, digest, &len);
    EVP_MD_CTX_free(ctx);
    if (!ok) fail(Errc::io, "SHA-1 digest failed");
    std::ostringstream os;
    for (unsigned i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
    return os.str();
}

}  // namespace gcut3r::io
