#pragma once

#include <cstdint>
#include <string>

#include "jem/core.hpp"
#include "jem/data.hpp"

namespace jem {

struct ModelDims {
    std::size_t feat_dim = 32;    // D_img
    std::size_t word_dim = 300;   // d_w
    std::size_t embed_dim = 64;   // d (joint space)
    std::size_t n_subsets = 0;    // N (CE classes)
    std::size_t n_quant = 0;      // N_q
    std::size_t vocab_size = 0;
};

// All trainable parameters of the two-branch encoder and its heads.
struct ModelParams {
    ModelDims dims;

    Mat w_img;   // feat_dim x embed_dim
    Vec b_img;   // embed_dim
    Mat e_tok;   // vocab_size x word_dim
    Mat w_txt;   // word_dim x embed_dim
    Vec b_txt;   // embed_dim
    Mat w_ce_img;  // embed_dim x n_subsets
    Vec b_ce_img;  // n_subsets
    Mat w_ce_txt;  // embed_dim x n_subsets
    Vec b_ce_txt;  // n_subsets
    Mat w_q;     // embed_dim x n_quant (shared across branches)
    Vec b_q;     // n_quant
};

struct CenterBank {
    Mat centers;            // M x embed_dim
    bool quantized = false;
};

struct EmptyCaptionError : std::runtime_error {
    explicit EmptyCaptionError(const std::string& m) : std::runtime_error(m) {}
};
struct LabelOutOfRangeError : std::runtime_error {
    explicit LabelOutOfRangeError(const std::string& m) : std::runtime_error(m) {}
};
struct TooFewPointsError : std::runtime_error {
    explicit TooFewPointsError(const std::string& m) : std::runtime_error(m) {}
};

// Glorot-uniform weights, zero biases; deterministic under seed.
ModelParams init_params(const ModelDims& dims, std::uint64_t seed);

enum class Branch { Image, Text };

Vec embed_image(const ModelParams& p, const Vec& feat);
Vec embed_caption(const ModelParams& p, const Tokens& tokens);
Vec ce_logits(const ModelParams& p, const Vec& emb, Branch branch);
Vec assign_soft(const ModelParams& p, const Vec& emb);

// Lloyd's algorithm with k-means++ seeding. Empty clusters are re-seeded to
// the point farthest from its assigned center.
CenterBank kmeans_init(const Mat& points, std::size_t n_quant,
                       std::uint64_t seed, std::size_t max_iters = 100);

double kmeans_objective(const Mat& points, const Mat& centers);

// Adaptive-margin controller state; serialized with checkpoints.
struct MarginState {
    double m_x = 0.2;
    double m_y = 0.2;
    std::size_t acc_violations_x = 0;
    std::size_t acc_violations_y = 0;
    std::size_t acc_count = 0;      // triplets accumulated in current window
    std::size_t acc_batches = 0;     // batches in current window
    std::size_t window_batches = 500;  // q
    double mult = 1.03;              // c
    double ratio_threshold = 0.8;    // r
};

// Checkpoint file: magic "JEM1", version, dims, parameter tensors, center
// bank, margin state. binary64 LE throughout.
void save_checkpoint(const std::string& path, const ModelParams& params,
                     const CenterBank& bank, const MarginState& margins);
void load_checkpoint(const std::string& path, ModelParams& params,
                     CenterBank& bank, MarginState& margins);

}  // namespace jem
