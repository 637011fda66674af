#pragma once

#include <vector>

#include "jem/core.hpp"
#include "jem/model.hpp"

namespace jem {

struct LossConfig {
    double delta = 0.1;       // center-loss hinge slack
    double alpha = 1.0;       // repulsion weight
    double margin_fixed = 0.2;  // baseline losses
};

struct LossBreakdown {
    double l_center = 0.0;
    double l_triplet = 0.0;
    double l_ce_img = 0.0;
    double l_ce_txt = 0.0;
    double total = 0.0;
};

struct WeightsNotNormalizedError : std::runtime_error {
    explicit WeightsNotNormalizedError(const std::string& m)
        : std::runtime_error(m) {}
};
struct NonFinitePartError : std::runtime_error {
    explicit NonFinitePartError(const std::string& m) : std::runtime_error(m) {}
};
struct EmptyBatchError : std::runtime_error {
    explicit EmptyBatchError(const std::string& m) : std::runtime_error(m) {}
};

inline double hinge(double z) { return z > 0.0 ? z : 0.0; }

// Unquantized center loss: the same center serves both modalities.
double center_loss(const std::vector<Vec>& img_embs,
                   const std::vector<Vec>& txt_embs,
                   const std::vector<std::size_t>& subset_labels,
                   const CenterBank& bank, double delta);

// Soft-quantized center loss with center repulsion over unordered pairs.
double quantized_center_loss(const std::vector<Vec>& img_embs,
                             const std::vector<Vec>& txt_embs,
                             const std::vector<Vec>& w_img,
                             const std::vector<Vec>& w_txt,
                             const CenterBank& bank, double delta,
                             double alpha);

// Symmetric triplet loss with per-direction margins.
double triplet_adaptive(const std::vector<Vec>& img_embs,
                        const std::vector<Vec>& pos_txt,
                        const std::vector<Vec>& neg_txt,
                        const std::vector<Vec>& txt_embs,
                        const std::vector<Vec>& pos_img,
                        const std::vector<Vec>& neg_img, double m_x,
                        double m_y);

double contrastive_baseline(const std::vector<std::pair<Vec, Vec>>& pos_pairs,
                            const std::vector<std::pair<Vec, Vec>>& neg_pairs,
                            double margin);

double cross_entropy(const Vec& logits, std::size_t label);

LossBreakdown total_loss(double l_center, double l_triplet, double l_ce_img,
                         double l_ce_txt);

// Violation ratios M_x, M_y: fraction of strictly positive hinge arguments.
std::pair<double, double> margin_ratios(const std::vector<double>& img_args,
                                        const std::vector<double>& txt_args);

}  // namespace jem
