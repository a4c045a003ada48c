#include "fedseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <numbers>
#include <sstream>

#include "fedseg/binio.hpp"
#include "fedseg/parallel.hpp"

namespace fedseg {
namespace {

constexpr float kBackground = 0.05f;
constexpr float kBodyBase = 0.35f;
constexpr float kTextureAmp = 0.05f;
constexpr int kTextureGrid = 8;
constexpr float kCoverageCap = 0.45f;

struct Ellipse {
    double cx, cy, r1, r2, cos_t, sin_t;
    bool contains(double x, double y) const {
        const double dx = x - cx, dy = y - cy;
        const double u = (cos_t * dx + sin_t * dy) / r1;
        const double v = (-sin_t * dx + cos_t * dy) / r2;
        return u * u + v * v <= 1.0;
    }
};

void check_spec(const ClientSpec& spec) {
    if (!(spec.radius_min_frac > 0.0f && spec.radius_min_frac < spec.radius_max_frac &&
          spec.radius_max_frac < 0.5f))
        throw ConfigError("tumor radius range must satisfy 0 < min < max < 0.5, got [" +
                          std::to_string(spec.radius_min_frac) + ", " +
                          std::to_string(spec.radius_max_frac) + "]");
    if (spec.noise_sigma < 0.0f) throw ConfigError("noise_sigma must be >= 0");
    if (spec.n_train < 0) throw ConfigError("n_train must be >= 0");
}

// Bilinear sample of a kTextureGrid^2 lattice stretched over the image.
float texture_at(const std::vector<float>& grid, double fx, double fy) {
    const double gx = fx * (kTextureGrid - 1);
    const double gy = fy * (kTextureGrid - 1);
    const int x0 = std::min(static_cast<int>(gx), kTextureGrid - 2);
    const int y0 = std::min(static_cast<int>(gy), kTextureGrid - 2);
    const double ax = gx - x0, ay = gy - y0;
    const double v00 = grid[static_cast<std::size_t>(y0) * kTextureGrid + x0];
    const double v01 = grid[static_cast<std::size_t>(y0) * kTextureGrid + x0 + 1];
    const double v10 = grid[static_cast<std::size_t>(y0 + 1) * kTextureGrid + x0];
    const double v11 = grid[static_cast<std::size_t>(y0 + 1) * kTextureGrid + x0 + 1];
    return static_cast<float>((1 - ay) * ((1 - ax) * v00 + ax * v01) +
                              ay * ((1 - ax) * v10 + ax * v11));
}

std::string format_float(float v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
    return buf;
}

std::string radius_mode_name(RadiusMode m) {
    switch (m) {
        case RadiusMode::LargeSkew: return "large_skew";
        case RadiusMode::SmallSkew: return "small_skew";
        case RadiusMode::Uniform: return "uniform";
    }
    throw UsageError("bad radius mode");
}

RadiusMode parse_radius_mode(const std::string& s) {
    if (s == "large_skew") return RadiusMode::LargeSkew;
    if (s == "small_skew") return RadiusMode::SmallSkew;
    if (s == "uniform") return RadiusMode::Uniform;
    throw FormatError("unknown radius mode '" + s + "'", 0);
}

}  // namespace

Scale parse_scale(const std::string& s) {
    if (s == "desk") return Scale::Desk;
    if (s == "paper") return Scale::Paper;
    throw ConfigError("unknown scale '" + s + "' (expected desk|paper)");
}

std::string scale_name(Scale s) { return s == Scale::Desk ? "desk" : "paper"; }

int scale_image_size(Scale s) { return s == Scale::Desk ? 32 : 256; }

SliceSample generate_slice(RngStream rng, const ClientSpec& spec, int height, int width,
                           const SliceOptions& opt) {
    if (height < 16 || width < 16 || height % 4 != 0 || width % 4 != 0)
        throw ConfigError("slice size must be >= 16 and divisible by 4, got " +
                          std::to_string(height) + "x" + std::to_string(width));
    check_spec(spec);

    SliceSample s;
    s.h = height;
    s.w = width;
    s.meta.client_id = spec.client_id;
    s.meta.seed_used = rng.key();
    const std::size_t npx = static_cast<std::size_t>(height) * width;
    s.image.assign(npx, kBackground);
    s.mask.assign(npx, 0);

    // Body ellipse: jittered center, axes 0.35-0.45 of each dimension.
    const double body_cx = (0.5 + rng.next_uniform(-0.05, 0.05)) * width;
    const double body_cy = (0.5 + rng.next_uniform(-0.05, 0.05)) * height;
    const double body_ax = rng.next_uniform(0.35, 0.45) * width;
    const double body_ay = rng.next_uniform(0.35, 0.45) * height;
    const Ellipse body{body_cx, body_cy, body_ax, body_ay, 1.0, 0.0};

    std::vector<float> tex;
    if (opt.texture) {
        tex.resize(kTextureGrid * kTextureGrid);
        for (auto& v : tex) v = static_cast<float>(rng.next_uniform(-1.0, 1.0));
    }
    const float contrast =
        spec.contrast_delta +
        static_cast<float>(rng.next_uniform(-1.0, 1.0)) * opt.contrast_jitter;

    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            const double px = x + 0.5, py = y + 0.5;
            if (!body.contains(px, py)) continue;
            float v = kBodyBase;
            if (opt.texture)
                v += kTextureAmp * texture_at(tex, px / width, py / height);
            s.image[static_cast<std::size_t>(y) * width + x] = v;
        }

    // Tumors: uniform k in {1,2,3}; radius by the spec's skew; random
    // orientation and eccentricity; center rejection-sampled inside the body.
    const int k = 1 + static_cast<int>(rng.next_below(3));
    const double lo = spec.radius_min_frac, hi = spec.radius_max_frac;
    const double mid = 0.5 * (lo + hi);
    std::size_t coverage = 0;
    for (int t = 0; t < k; ++t) {
        const bool upper = rng.next_double() < 0.7;
        double frac;
        switch (spec.radius_mode) {
            case RadiusMode::LargeSkew:
                frac = upper ? rng.next_uniform(mid, hi) : rng.next_uniform(lo, mid);
                break;
            case RadiusMode::SmallSkew:
                frac = upper ? rng.next_uniform(lo, mid) : rng.next_uniform(mid, hi);
                break;
            case RadiusMode::Uniform:
            default:
                frac = rng.next_uniform(lo, hi);
                break;
        }
        // Semi-axes floored at 0.75 px: any ellipse that wide covers at least
        // one pixel center, keeping every mask non-empty at small scales.
        const double r1 = std::max(frac * width, 0.75);
        const double r2 = std::max(r1 * rng.next_uniform(0.6, 1.0), 0.75);
        const double theta = rng.next_uniform(0.0, std::numbers::pi);

        bool placed = false;
        double tcx = 0.0, tcy = 0.0;
        for (int attempt = 0; attempt < 100; ++attempt) {
            const double x = rng.next_uniform(0.0, width);
            const double y = rng.next_uniform(0.0, height);
            const double dx = (x - body_cx) / (0.8 * body_ax);
            const double dy = (y - body_cy) / (0.8 * body_ay);
            if (dx * dx + dy * dy <= 1.0) {
                tcx = x;
                tcy = y;
                placed = true;
                break;
            }
        }
        if (!placed)
            throw GenerationError("tumor center sampling failed 100 times for client " +
                                  std::to_string(spec.client_id));

        const Ellipse tumor{tcx, tcy, r1, r2, std::cos(theta), std::sin(theta)};
        const int x0 = std::max(0, static_cast<int>(std::floor(tcx - r1 - 1)));
        const int x1 = std::min(width - 1, static_cast<int>(std::ceil(tcx + r1 + 1)));
        const int y0 = std::max(0, static_cast<int>(std::floor(tcy - r1 - 1)));
        const int y1 = std::min(height - 1, static_cast<int>(std::ceil(tcy + r1 + 1)));
        std::vector<std::size_t> added;
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                const std::size_t i = static_cast<std::size_t>(y) * width + x;
                if (s.mask[i]) continue;
                if (tumor.contains(x + 0.5, y + 0.5)) {
                    s.mask[i] = 1;
                    added.push_back(i);
                }
            }
        const bool over = static_cast<double>(coverage + added.size()) >
                          kCoverageCap * static_cast<double>(npx);
        if (over && s.meta.n_tumors > 0) {
            for (std::size_t i : added) s.mask[i] = 0;  // drop this tumor, stop adding
            break;
        }
        coverage += added.size();
        s.meta.n_tumors += 1;
        s.meta.radius_fracs.push_back(static_cast<float>(frac));
        for (std::size_t i : added) {
            float v = kBodyBase + contrast;
            if (opt.texture) {
                const int yy = static_cast<int>(i) / width;
                const int xx = static_cast<int>(i) % width;
                v += kTextureAmp * texture_at(tex, (xx + 0.5) / width, (yy + 0.5) / height);
            }
            s.image[i] = v;
        }
    }

    if (spec.noise_sigma > 0.0f)
        for (std::size_t i = 0; i < npx; ++i)
            s.image[i] += spec.noise_sigma * static_cast<float>(rng.next_gaussian());
    for (std::size_t i = 0; i < npx; ++i) s.image[i] = std::clamp(s.image[i], 0.0f, 1.0f);
    return s;
}

std::vector<ClientSpec> federation_specs(Scale scale) {
    const bool desk = scale == Scale::Desk;
    const int big = desk ? 200 : 1000;
    const int small = desk ? 100 : 500;
    std::vector<ClientSpec> specs(5);
    for (int i = 0; i < 5; ++i) {
        specs[i].client_id = i + 1;
        specs[i].n_train = i < 3 ? big : small;
        specs[i].radius_mode = RadiusMode::Uniform;
        specs[i].noise_sigma = 0.03f;
    }
    specs[0].radius_mode = RadiusMode::LargeSkew;
    specs[0].radius_min_frac = 0.08f;
    specs[0].radius_max_frac = 0.25f;
    specs[1].radius_mode = RadiusMode::SmallSkew;
    specs[1].radius_min_frac = 0.03f;
    specs[1].radius_max_frac = 0.10f;
    specs[2].noise_sigma = 0.10f;
    return specs;
}

FederationData build_federation(std::uint64_t global_seed, Scale scale, int threads) {
    if (threads <= 0) threads = default_threads();
    const int size = scale_image_size(scale);
    const RngStream root = RngStream::from_seed(global_seed);
    const std::vector<ClientSpec> specs = federation_specs(scale);

    FederationData data;
    data.manifest.global_seed = global_seed;
    data.manifest.scale = scale_name(scale);
    data.manifest.image_size = size;

    auto gen_series = [&](const RngStream& base, const ClientSpec& spec, int count,
                          std::vector<SliceSample>& out) {
        out.resize(static_cast<std::size_t>(count));
        parallel_for(static_cast<std::size_t>(count), threads, [&](std::size_t i) {
            out[i] = generate_slice(base.split("sample", i), spec, size, size);
            out[i].meta.sample_index = static_cast<int>(i);
        });
    };
    // Mixture series cycle through the five specs sample by sample.
    auto gen_mixture = [&](const RngStream& base, int count, std::vector<SliceSample>& out) {
        out.resize(static_cast<std::size_t>(count));
        parallel_for(static_cast<std::size_t>(count), threads, [&](std::size_t i) {
            out[i] = generate_slice(base.split("sample", i), specs[i % specs.size()], size, size);
            out[i].meta.sample_index = static_cast<int>(i);
        });
    };

    for (const auto& spec : specs) {
        // The validation split (20% of the generated pool, rounded down) is
        // generated on top of the training count from the same stream.
        const int n_train = spec.n_train;
        const int n_val = spec.n_train / 4;
        std::vector<SliceSample> all;
        gen_series(root.split("client", static_cast<std::uint64_t>(spec.client_id)), spec,
                   n_train + n_val, all);
        ClientData cd;
        cd.spec = spec;
        cd.train.assign(all.begin(), all.begin() + n_train);
        cd.val.assign(all.begin() + n_train, all.end());
        data.clients.push_back(std::move(cd));
        ManifestClient mc;
        mc.spec = spec;
        mc.n_train = n_train;
        mc.n_val = n_val;
        data.manifest.clients.push_back(std::move(mc));
    }

    const int n_test = scale == Scale::Desk ? 200 : 1000;
    const int n_shadow = scale == Scale::Desk ? 200 : 1000;
    gen_mixture(root.split("test"), n_test, data.test);
    std::vector<SliceSample> shadow;
    gen_mixture(root.split("shadow"), n_shadow, shadow);
    const int half = n_shadow / 2;
    data.shadow_members.assign(shadow.begin(), shadow.begin() + half);
    data.shadow_nonmembers.assign(shadow.begin() + half, shadow.end());
    data.manifest.n_test = n_test;
    data.manifest.n_shadow_members = half;
    data.manifest.n_shadow_nonmembers = n_shadow - half;
    return data;
}

void write_slices(const std::vector<SliceSample>& samples, const std::string& path) {
    binio::Writer w;
    w.bytes("FOBD", 4);
    w.u32(kDatasetVersion);
    w.u32(static_cast<std::uint32_t>(samples.size()));
    const int H = samples.empty() ? 0 : samples.front().h;
    const int W = samples.empty() ? 0 : samples.front().w;
    w.u16(static_cast<std::uint16_t>(H));
    w.u16(static_cast<std::uint16_t>(W));
    for (const auto& s : samples) {
        if (s.h != H || s.w != W)
            throw UsageError("mixed slice sizes in one dataset file");
        if (s.meta.client_id < 0 || s.meta.client_id > 255)
            throw UsageError("client_id out of u8 range");
        w.f32_array(s.image.data(), s.image.size());
        w.bytes(s.mask.data(), s.mask.size());
        w.u8(static_cast<std::uint8_t>(s.meta.client_id));
        w.u32(static_cast<std::uint32_t>(s.meta.sample_index));
        w.u64(s.meta.seed_used);
        w.u8(static_cast<std::uint8_t>(s.meta.n_tumors));
    }
    binio::write_file(path, w.str());
}

std::vector<SliceSample> read_slices(const std::string& path) {
    binio::Reader r(binio::read_file(path));
    if (r.bytes(4) != "FOBD") throw FormatError("bad dataset magic in " + path, 0);
    const std::uint32_t version = r.u32();
    if (version != kDatasetVersion)
        throw FormatError("unsupported dataset version " + std::to_string(version), 4);
    const std::uint32_t count = r.u32();
    const int H = r.u16();
    const int W = r.u16();
    const std::size_t npx = static_cast<std::size_t>(H) * W;
    std::vector<SliceSample> out(count);
    for (auto& s : out) {
        s.h = H;
        s.w = W;
        s.image = r.f32_array(npx);
        const std::string mask = r.bytes(npx);
        s.mask.resize(npx);
        for (std::size_t i = 0; i < npx; ++i) {
            const auto m = static_cast<std::uint8_t>(mask[i]);
            if (m > 1) throw FormatError("mask byte out of {0,1} in " + path, r.pos());
            s.mask[i] = m;
        }
        s.meta.client_id = r.u8();
        s.meta.sample_index = static_cast<int>(r.u32());
        s.meta.seed_used = r.u64();
        s.meta.n_tumors = r.u8();
    }
    if (!r.at_end()) throw FormatError("trailing bytes in dataset " + path, r.pos());
    return out;
}

void write_manifest(const DatasetManifest& m, const std::string& path) {
    std::ostringstream os;
    os << "format_version = " << m.format_version << "\n";
    os << "global_seed = " << m.global_seed << "\n";
    os << "scale = " << m.scale << "\n";
    os << "image_size = " << m.image_size << "\n";
    os << "clients = " << m.clients.size() << "\n";
    for (const auto& c : m.clients) {
        const std::string p = "client" + std::to_string(c.spec.client_id) + ".";
        os << p << "file = " << c.file << "\n";
        os << p << "n_train = " << c.n_train << "\n";
        os << p << "n_val = " << c.n_val << "\n";
        os << p << "radius_min_frac = " << format_float(c.spec.radius_min_frac) << "\n";
        os << p << "radius_max_frac = " << format_float(c.spec.radius_max_frac) << "\n";
        os << p << "radius_mode = " << radius_mode_name(c.spec.radius_mode) << "\n";
        os << p << "noise_sigma = " << format_float(c.spec.noise_sigma) << "\n";
        os << p << "contrast_delta = " << format_float(c.spec.contrast_delta) << "\n";
    }
    os << "test.file = " << m.test_file << "\n";
    os << "test.count = " << m.n_test << "\n";
    os << "shadow.file = " << m.shadow_file << "\n";
    os << "shadow.members = " << m.n_shadow_members << "\n";
    os << "shadow.nonmembers = " << m.n_shadow_nonmembers << "\n";
    binio::write_file(path, os.str());
}

DatasetManifest read_manifest(const std::string& path) {
    const std::string text = binio::read_file(path);
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto eq = line.find(" = ");
        if (eq == std::string::npos)
            throw FormatError("manifest line " + std::to_string(line_no) + " is not 'key = value'",
                              line_no);
        kv[line.substr(0, eq)] = line.substr(eq + 3);
    }
    auto get = [&](const std::string& key) -> const std::string& {
        auto it = kv.find(key);
        if (it == kv.end()) throw FormatError("manifest missing key '" + key + "'", 0);
        return it->second;
    };

    DatasetManifest m;
    m.format_version = std::stoi(get("format_version"));
    if (m.format_version != 1)
        throw FormatError("unsupported manifest version " + get("format_version"), 0);
    m.global_seed = std::stoull(get("global_seed"));
    m.scale = get("scale");
    parse_scale(m.scale);
    m.image_size = std::stoi(get("image_size"));
    const int n_clients = std::stoi(get("clients"));
    for (int i = 1; i <= n_clients; ++i) {
        const std::string p = "client" + std::to_string(i) + ".";
        ManifestClient c;
        c.spec.client_id = i;
        c.file = get(p + "file");
        c.n_train = std::stoi(get(p + "n_train"));
        c.n_val = std::stoi(get(p + "n_val"));
        c.spec.n_train = c.n_train;
        c.spec.radius_min_frac = std::stof(get(p + "radius_min_frac"));
        c.spec.radius_max_frac = std::stof(get(p + "radius_max_frac"));
        c.spec.radius_mode = parse_radius_mode(get(p + "radius_mode"));
        c.spec.noise_sigma = std::stof(get(p + "noise_sigma"));
        c.spec.contrast_delta = std::stof(get(p + "contrast_delta"));
        m.clients.push_back(std::move(c));
    }
    m.test_file = get("test.file");
    m.n_test = std::stoi(get("test.count"));
    m.shadow_file = get("shadow.file");
    m.n_shadow_members = std::stoi(get("shadow.members"));
    m.n_shadow_nonmembers = std::stoi(get("shadow.nonmembers"));
    return m;
}

DatasetManifest write_federation(const FederationData& data, const std::string& out_dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create output directory " + out_dir + ": " + ec.message());

    DatasetManifest m = data.manifest;
    for (std::size_t i = 0; i < data.clients.size(); ++i) {
        const auto& cd = data.clients[i];
        auto& mc = m.clients.at(i);
        mc.file = "client" + std::to_string(cd.spec.client_id) + ".fobd";
        std::vector<SliceSample> all = cd.train;
        all.insert(all.end(), cd.val.begin(), cd.val.end());
        write_slices(all, (fs::path(out_dir) / mc.file).string());
    }
    m.test_file = "test.fobd";
    write_slices(data.test, (fs::path(out_dir) / m.test_file).string());
    m.shadow_file = "shadow.fobd";
    std::vector<SliceSample> shadow = data.shadow_members;
    shadow.insert(shadow.end(), data.shadow_nonmembers.begin(), data.shadow_nonmembers.end());
    write_slices(shadow, (fs::path(out_dir) / m.shadow_file).string());
    write_manifest(m, (fs::path(out_dir) / "manifest.txt").string());
    return m;
}

FederationData load_federation(const std::string& manifest_path) {
    namespace fs = std::filesystem;
    FederationData data;
    data.manifest = read_manifest(manifest_path);
    const fs::path dir = fs::path(manifest_path).parent_path();
    for (const auto& mc : data.manifest.clients) {
        std::vector<SliceSample> all = read_slices((dir / mc.file).string());
        if (static_cast<int>(all.size()) != mc.n_train + mc.n_val)
            throw FormatError("client file " + mc.file + " holds " +
                                  std::to_string(all.size()) + " samples, manifest says " +
                                  std::to_string(mc.n_train + mc.n_val),
                              0);
        ClientData cd;
        cd.spec = mc.spec;
        cd.train.assign(all.begin(), all.begin() + mc.n_train);
        cd.val.assign(all.begin() + mc.n_train, all.end());
        data.clients.push_back(std::move(cd));
    }
    data.test = read_slices((dir / data.manifest.test_file).string());
    if (static_cast<int>(data.test.size()) != data.manifest.n_test)
        throw FormatError("test file count mismatch vs manifest", 0);
    std::vector<SliceSample> shadow = read_slices((dir / data.manifest.shadow_file).string());
    const int nm = data.manifest.n_shadow_members;
    if (static_cast<int>(shadow.size()) != nm + data.manifest.n_shadow_nonmembers)
        throw FormatError("shadow file count mismatch vs manifest", 0);
    data.shadow_members.assign(shadow.begin(), shadow.begin() + nm);
    data.shadow_nonmembers.assign(shadow.begin() + nm, shadow.end());
    return data;
}

SegBatch make_batch(const std::vector<const SliceSample*>& samples) {
    if (samples.empty()) throw UsageError("make_batch on empty sample list");
    const int H = samples.front()->h, W = samples.front()->w;
    const int N = static_cast<int>(samples.size());
    const std::size_t npx = static_cast<std::size_t>(H) * W;
    std::vector<float> images(static_cast<std::size_t>(N) * npx);
    std::vector<float> masks(static_cast<std::size_t>(N) * npx);
    for (int n = 0; n < N; ++n) {
        const SliceSample& s = *samples[static_cast<std::size_t>(n)];
        if (s.h != H || s.w != W) throw UsageError("mixed slice sizes in one batch");
        std::copy(s.image.begin(), s.image.end(),
                  images.begin() + static_cast<std::ptrdiff_t>(n * npx));
        for (std::size_t i = 0; i < npx; ++i)
            masks[static_cast<std::size_t>(n) * npx + i] = static_cast<float>(s.mask[i]);
    }
    SegBatch b;
    b.images = Tensor::from_data({N, 1, H, W}, std::move(images));
    b.masks = Tensor::from_data({N, 1, H, W}, std::move(masks));
    return b;
}

}  // namespace fedseg
