#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "kansae/model.hpp"
#include "kansae/optim.hpp"
#include "kansae/store.hpp"

namespace kansae {

// ---------------------------------------------------------------------------
// KACT v1 — activation container.
// Layout (all little-endian):
//   "KACT" | version u32=1 | N u64 | d u32 | flags u32 (bit0: grid meta)
//   [ n_days u32 | H u32 | W u32 | lat0 f64 | dlat f64 | lon0 f64 | dlon f64 ]
//   N*d f32, row-major.
// ---------------------------------------------------------------------------
void write_activations(const ActivationStore& store, const std::string& path);
ActivationStore read_activations(const std::string& path);

// ---------------------------------------------------------------------------
// KSCK v1 — checkpoint container.
// Layout: "KSCK" | version u32=1 | header_len u64 | UTF-8 JSON header |
// f64 blobs in declared order: W_enc, W_dec, b_pre, b_enc, c (kan only),
// then optionally the Adam first/second moments in the same block order.
// Both weight blobs are M x d feature-major (row j = encoder row j /
// decoder column j). Knot vectors are rebuilt from the per-feature spans
// recorded in the header. Round trip is bit-exact.
// ---------------------------------------------------------------------------
struct Checkpoint {
    SaeParams params;
    std::optional<AdamState> adam;
    std::optional<double> tau;     // resolved alive threshold, if known
    int epochs_done = 0;
    nlohmann::json train_config;   // echo of the run configuration (may be null)
};

void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// ---------------------------------------------------------------------------
// Synthetic superposition generator: x = sum_j g_j(a_j) d_j + b + eps.
// ---------------------------------------------------------------------------
enum class GateKind { none, threshold, saturate, both };

const char* gate_kind_name(GateKind k);

struct GateSpec {
    GateKind kind = GateKind::none;
    double theta = 0.5;  // threshold offset
    double sat = 1.5;    // saturation level

    double apply(double a) const;
};

struct SynthConfig {
    uint32_t n_true = 64;
    uint32_t d = 32;
    uint64_t n_tokens = 200000;
    double p_active = 0.03;
    double mix_none = 0.0;
    double mix_threshold = 0.5;
    double mix_saturate = 0.5;
    double mix_both = 0.0;
    double theta = 0.5;
    double sat = 1.5;
    double noise_sigma = 0.01;
    uint64_t seed = 0;
    std::optional<GridMeta> grid;  // if set, grid.tokens() must equal n_tokens

    void validate() const;
};

// Sparse codes are recorded per fire event in token order; alpha is the
// post-gate amplitude (a threshold gate can leave it at exactly 0).
struct SynthGroundTruth {
    Mat dictionary;  // n_true x d, unit rows
    std::vector<GateSpec> gates;
    Vec bias;  // d
    double noise_sigma = 0.0;
    double p_active = 0.0;
    uint64_t seed = 0;
    std::vector<uint64_t> code_token;
    std::vector<uint32_t> code_feature;
    std::vector<float> code_alpha;
};

std::pair<ActivationStore, SynthGroundTruth> synth_generate(const SynthConfig& cfg);

// Ground-truth sidecar: JSON (dictionary, gates, bias, scalars) plus a raw
// binary codes file ("KCOD" | version u32=1 | count u64 | count x
// { token u64, feature u32, alpha f32 }).
void write_ground_truth(const SynthGroundTruth& gt, const std::string& json_path,
                        const std::string& codes_path);
SynthGroundTruth read_ground_truth(const std::string& json_path,
                                   const std::string& codes_path);

// Uniform sample of n rows without replacement, deterministic per seed.
ActivationStore sample_calibration(const ActivationStore& store, uint64_t n, uint64_t seed);

}  // namespace kansae
