#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedseg/rng.hpp"
#include "fedseg/tensor.hpp"

namespace fedseg {

enum class RadiusMode { LargeSkew, SmallSkew, Uniform };
enum class Scale { Desk, Paper };

Scale parse_scale(const std::string& s);     // "desk" | "paper"
std::string scale_name(Scale s);
int scale_image_size(Scale s);               // desk 32, paper 256

// Per-client generation profile. Radius fractions are of image width;
// large-skew draws 70% of radii from the upper half of [min, max], small-skew
// 70% from the lower half.
struct ClientSpec {
    int client_id = 0;
    int n_train = 0;   // training samples; a 25% validation split rides on top
    float radius_min_frac = 0.05f;
    float radius_max_frac = 0.18f;
    RadiusMode radius_mode = RadiusMode::Uniform;
    float noise_sigma = 0.03f;
    float contrast_delta = 0.3f;
};

struct SliceMeta {
    int client_id = 0;
    int sample_index = 0;
    std::uint64_t seed_used = 0;
    int n_tumors = 0;
    std::vector<float> radius_fracs;  // kept tumors, draw order (not persisted)
};

struct SliceSample {
    int h = 0, w = 0;
    std::vector<float> image;       // row-major, values in [0, 1]
    std::vector<std::uint8_t> mask; // 1 inside a tumor ellipse
    SliceMeta meta;
};

struct SliceOptions {
    bool texture = true;            // low-frequency body texture on/off (debug)
    float contrast_jitter = 0.1f;   // per-slice uniform offset on contrast_delta
};

// Procedural slice: body ellipse + texture, 1-3 tumor ellipses with
// spec-driven radii, additive Gaussian scanner noise, clamp to [0, 1].
// Fully determined by the rng stream. A tumor whose addition would push mask
// coverage above 45% of the image is dropped (never the first).
SliceSample generate_slice(RngStream rng, const ClientSpec& spec, int height, int width,
                           const SliceOptions& opt = {});

struct ClientData {
    ClientSpec spec;
    std::vector<SliceSample> train, val;
};

struct ManifestClient {
    ClientSpec spec;
    std::string file;  // relative to the manifest
    int n_train = 0, n_val = 0;
};

struct DatasetManifest {
    int format_version = 1;
    std::uint64_t global_seed = 0;
    std::string scale;  // "desk" | "paper"
    int image_size = 0;
    std::vector<ManifestClient> clients;
    std::string test_file;
    int n_test = 0;
    std::string shadow_file;
    int n_shadow_members = 0, n_shadow_nonmembers = 0;
};

struct FederationData {
    DatasetManifest manifest;
    std::vector<ClientData> clients;
    std::vector<SliceSample> test;             // equal mixture of all specs
    std::vector<SliceSample> shadow_members;   // shadow-model training half
    std::vector<SliceSample> shadow_nonmembers;
};

// The five client profiles: 1 large-skew, 2 small-skew, 3 uniform with high
// noise (0.10), 4-5 uniform at default noise. Desk counts [200,200,200,100,100],
// paper counts [1000,1000,1000,500,500].
std::vector<ClientSpec> federation_specs(Scale scale);

// Deterministic in-memory dataset build (file fields of the manifest unset).
FederationData build_federation(std::uint64_t global_seed, Scale scale, int threads = 0);

// Dataset file ("FOBD"): header magic/version/count/H/W, then per sample the
// image (f32 LE), mask (u8), and meta (client_id u8, sample_index u32,
// seed_used u64, n_tumors u8).
void write_slices(const std::vector<SliceSample>& samples, const std::string& path);
std::vector<SliceSample> read_slices(const std::string& path);

void write_manifest(const DatasetManifest& m, const std::string& path);
DatasetManifest read_manifest(const std::string& path);

// Writes per-client FOBD files, test/shadow files, and manifest.txt into
// out_dir; returns the manifest with file fields set.
DatasetManifest write_federation(const FederationData& data, const std::string& out_dir);
FederationData load_federation(const std::string& manifest_path);

// Batch assembly for training/evaluation.
struct SegBatch {
    Tensor images;  // (N, 1, H, W)
    Tensor masks;   // (N, 1, H, W), values in {0, 1}
};
SegBatch make_batch(const std::vector<const SliceSample*>& samples);

constexpr std::uint32_t kDatasetVersion = 1;

}  // namespace fedseg
