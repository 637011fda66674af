#include "jem/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace jem {

namespace {

Vec affine(const Mat& w, const Vec& b, const Vec& x) {
    Vec out(b);
    for (std::size_t i = 0; i < w.rows; ++i) {
        const double* wi = w.row(i);
        double xi = x[i];
        for (std::size_t j = 0; j < w.cols; ++j) out[j] += xi * wi[j];
    }
    return out;
}

struct ImgCache {
    Vec pre;     // affine output before normalization
    double nrm = 0.0;
    Vec emb;
};

struct TxtCache {
    Vec mean;    // mean token embedding
    Vec pre;
    double nrm = 0.0;
    Vec emb;
};

ImgCache img_forward(const ModelParams& p, const Vec& feat) {
    ImgCache c;
    c.pre = affine(p.w_img, p.b_img, feat);
    c.nrm = norm2(c.pre);
    if (c.nrm <= kNormEps) throw ZeroNormError("image embedding collapsed");
    c.emb.resize(c.pre.size());
    for (std::size_t j = 0; j < c.pre.size(); ++j) c.emb[j] = c.pre[j] / c.nrm;
    return c;
}

TxtCache txt_forward(const ModelParams& p, const Tokens& toks) {
    if (toks.empty()) throw EmptyCaptionError("caption has no tokens");
    TxtCache c;
    c.mean.assign(p.dims.word_dim, 0.0);
    for (std::uint32_t t : toks) {
        if (t >= p.dims.vocab_size)
            throw TokenOutOfRangeError("token out of vocab in batch");
        const double* row = p.e_tok.row(t);
        for (std::size_t j = 0; j < p.dims.word_dim; ++j) c.mean[j] += row[j];
    }
    for (double& x : c.mean) x /= double(toks.size());
    c.pre = affine(p.w_txt, p.b_txt, c.mean);
    c.nrm = norm2(c.pre);
    if (c.nrm <= kNormEps) throw ZeroNormError("text embedding collapsed");
    c.emb.resize(c.pre.size());
    for (std::size_t j = 0; j < c.pre.size(); ++j) c.emb[j] = c.pre[j] / c.nrm;
    return c;
}

// d(pre) = (d(emb) - emb * <emb, d(emb)>) / ||pre||
Vec norm_backward(const Vec& emb, double nrm, const Vec& demb) {
    double proj = 0.0;
    for (std::size_t j = 0; j < emb.size(); ++j) proj += emb[j] * demb[j];
    Vec dpre(emb.size());
    for (std::size_t j = 0; j < emb.size(); ++j)
        dpre[j] = (demb[j] - emb[j] * proj) / nrm;
    return dpre;
}

void img_backward(const ModelParams& p, const Vec& feat, const ImgCache& c,
                  const Vec& demb, Gradients& g) {
    Vec dpre = norm_backward(c.emb, c.nrm, demb);
    for (std::size_t i = 0; i < p.dims.feat_dim; ++i) {
        double fi = feat[i];
        double* gw = g.params.w_img.row(i);
        for (std::size_t j = 0; j < p.dims.embed_dim; ++j)
            gw[j] += fi * dpre[j];
    }
    for (std::size_t j = 0; j < p.dims.embed_dim; ++j)
        g.params.b_img[j] += dpre[j];
}

void txt_backward(const ModelParams& p, const Tokens& toks, const TxtCache& c,
                  const Vec& demb, Gradients& g) {
    Vec dpre = norm_backward(c.emb, c.nrm, demb);
    for (std::size_t i = 0; i < p.dims.word_dim; ++i) {
        double mi = c.mean[i];
        double* gw = g.params.w_txt.row(i);
        for (std::size_t j = 0; j < p.dims.embed_dim; ++j)
            gw[j] += mi * dpre[j];
    }
    for (std::size_t j = 0; j < p.dims.embed_dim; ++j)
        g.params.b_txt[j] += dpre[j];
    // dmean = W_txt * dpre, spread over the tokens with multiplicity.
    Vec dmean(p.dims.word_dim, 0.0);
    for (std::size_t i = 0; i < p.dims.word_dim; ++i) {
        const double* wi = p.w_txt.row(i);
        double s = 0.0;
        for (std::size_t j = 0; j < p.dims.embed_dim; ++j) s += wi[j] * dpre[j];
        dmean[i] = s;
    }
    double inv = 1.0 / double(toks.size());
    for (std::uint32_t t : toks) {
        double* ge = g.params.e_tok.row(t);
        for (std::size_t i = 0; i < p.dims.word_dim; ++i)
            ge[i] += dmean[i] * inv;
    }
}

// CE on one embedding: returns loss, accumulates head and embedding grads.
double ce_term(const ModelParams& p, const Vec& emb, std::size_t label,
               Branch branch, Gradients* g, Vec* demb) {
    const Mat& w = branch == Branch::Image ? p.w_ce_img : p.w_ce_txt;
    const Vec& b = branch == Branch::Image ? p.b_ce_img : p.b_ce_txt;
    if (label >= b.size())
        throw LabelOutOfRangeError("CE label out of range");
    Vec logits = affine(w, b, emb);
    double loss = log_sum_exp(logits) - logits[label];
    if (g) {
        Vec probs = softmax(logits);
        probs[label] -= 1.0;  // dL/dlogits
        Mat& gw = branch == Branch::Image ? g->params.w_ce_img
                                          : g->params.w_ce_txt;
        Vec& gb = branch == Branch::Image ? g->params.b_ce_img
                                          : g->params.b_ce_txt;
        for (std::size_t i = 0; i < w.rows; ++i) {
            double ei = emb[i];
            double* gwi = gw.row(i);
            const double* wi = w.row(i);
            double de = 0.0;
            for (std::size_t j = 0; j < w.cols; ++j) {
                gwi[j] += ei * probs[j];
                de += wi[j] * probs[j];
            }
            (*demb)[i] += de;
        }
        for (std::size_t j = 0; j < w.cols; ++j) gb[j] += probs[j];
    }
    return loss;
}

// Quantized center data term for one embedding: soft weights times hinged
// squared distances, with gradient flowing through the softmax Jacobian.
double quantized_term(const ModelParams& p, const CenterBank& bank,
                      const Vec& emb, double delta,
                      std::vector<std::uint8_t>& signature, Gradients* g,
                      Vec* demb) {
    std::size_t nq = bank.centers.rows;
    Vec z = affine(p.w_q, p.b_q, emb);
    Vec w = softmax(z);
    Vec h(nq);
    std::vector<std::uint8_t> active(nq);
    double loss = 0.0;
    for (std::size_t j = 0; j < nq; ++j) {
        double d2 = sq_euclidean(emb, bank.centers.row_vec(j));
        double arg = d2 - delta;
        active[j] = arg > 0.0;
        h[j] = active[j] ? arg : 0.0;
        loss += w[j] * h[j];
        signature.push_back(active[j]);
    }
    if (g) {
        // Distance path.
        for (std::size_t j = 0; j < nq; ++j) {
            if (!active[j]) continue;
            const double* cj = bank.centers.row(j);
            double* gc = g->centers.row(j);
            for (std::size_t a = 0; a < emb.size(); ++a) {
                double diff = 2.0 * w[j] * (emb[a] - cj[a]);
                (*demb)[a] += diff;
                gc[a] -= diff;
            }
        }
        // Softmax-Jacobian path: dz_k = w_k (h_k - <w, h>).
        double wh = 0.0;
        for (std::size_t j = 0; j < nq; ++j) wh += w[j] * h[j];
        Vec dz(nq);
        for (std::size_t k = 0; k < nq; ++k) dz[k] = w[k] * (h[k] - wh);
        for (std::size_t a = 0; a < emb.size(); ++a) {
            double ea = emb[a];
            double* gwq = g->params.w_q.row(a);
            const double* wq = p.w_q.row(a);
            double de = 0.0;
            for (std::size_t k = 0; k < nq; ++k) {
                gwq[k] += ea * dz[k];
                de += wq[k] * dz[k];
            }
            (*demb)[a] += de;
        }
        for (std::size_t k = 0; k < nq; ++k) g->params.b_q[k] += dz[k];
    }
    return loss;
}

BatchResult run_batch(const ModelParams& params, const CenterBank& bank,
                      const TripletBatch& batch, const LossConfig& cfg,
                      double m_x, double m_y, bool quantized,
                      Gradients* grads) {
    std::size_t b = batch.size();
    std::size_t d = params.dims.embed_dim;

    std::vector<ImgCache> anchors(b), neg_imgs(b);
    std::vector<TxtCache> pos_txts(b), neg_txts(b);
    for (std::size_t i = 0; i < b; ++i) {
        anchors[i] = img_forward(params, batch.anchor_img_feats[i]);
        neg_imgs[i] = img_forward(params, batch.neg_img_feats[i]);
        pos_txts[i] = txt_forward(params, batch.pos_captions[i]);
        neg_txts[i] = txt_forward(params, batch.neg_captions[i]);
    }

    std::vector<Vec> d_anchor(b, Vec(d, 0.0)), d_neg_img(b, Vec(d, 0.0));
    std::vector<Vec> d_pos_txt(b, Vec(d, 0.0)), d_neg_txt(b, Vec(d, 0.0));

    BatchResult res;

    // Center loss.
    double l_center = 0.0;
    if (!quantized) {
        if (bank.quantized)
            throw PhaseOrderError("phase-1 loss with a quantized bank");
        for (std::size_t i = 0; i < b; ++i) {
            std::size_t n = batch.subset_labels[i];
            if (n >= bank.centers.rows)
                throw LabelOutOfRangeError("subset label out of center bank");
            const double* c = bank.centers.row(n);
            for (int side = 0; side < 2; ++side) {
                const Vec& e = side == 0 ? anchors[i].emb : pos_txts[i].emb;
                Vec& de = side == 0 ? d_anchor[i] : d_pos_txt[i];
                double d2 = 0.0;
                for (std::size_t a = 0; a < d; ++a) {
                    double diff = e[a] - c[a];
                    d2 += diff * diff;
                }
                bool active = d2 - cfg.delta > 0.0;
                res.hinge_signature.push_back(active);
                if (active) {
                    l_center += d2 - cfg.delta;
                    if (grads) {
                        double* gc = grads->centers.row(n);
                        for (std::size_t a = 0; a < d; ++a) {
                            double diff = 2.0 * (e[a] - c[a]);
                            de[a] += diff;
                            gc[a] -= diff;
                        }
                    }
                }
            }
        }
    } else {
        if (!bank.quantized)
            throw PhaseOrderError("quantized loss with an unquantized bank");
        for (std::size_t i = 0; i < b; ++i)
            l_center += quantized_term(params, bank, anchors[i].emb, cfg.delta,
                                       res.hinge_signature, grads,
                                       &d_anchor[i]);
        for (std::size_t i = 0; i < b; ++i)
            l_center += quantized_term(params, bank, pos_txts[i].emb,
                                       cfg.delta, res.hinge_signature, grads,
                                       &d_pos_txt[i]);
        // Repulsion between quantized centers.
        std::size_t nq = bank.centers.rows;
        for (std::size_t k1 = 0; k1 < nq; ++k1) {
            for (std::size_t k2 = k1 + 1; k2 < nq; ++k2) {
                double d2 = sq_euclidean(bank.centers.row_vec(k1),
                                         bank.centers.row_vec(k2));
                double arg = 2.0 * cfg.delta - d2;
                bool active = arg > 0.0;
                res.hinge_signature.push_back(active);
                if (active) {
                    l_center += cfg.alpha * arg;
                    if (grads) {
                        const double* c1 = bank.centers.row(k1);
                        const double* c2 = bank.centers.row(k2);
                        double* g1 = grads->centers.row(k1);
                        double* g2 = grads->centers.row(k2);
                        for (std::size_t a = 0; a < d; ++a) {
                            double diff = 2.0 * cfg.alpha * (c1[a] - c2[a]);
                            g1[a] -= diff;
                            g2[a] += diff;
                        }
                    }
                }
            }
        }
    }

    // Symmetric triplet loss.
    double l_triplet = 0.0;
    res.img_triplet_args.resize(b);
    res.txt_triplet_args.resize(b);
    for (std::size_t i = 0; i < b; ++i) {
        double arg = sq_euclidean(anchors[i].emb, pos_txts[i].emb) -
                     sq_euclidean(anchors[i].emb, neg_txts[i].emb) + m_x;
        res.img_triplet_args[i] = arg;
        bool active = arg > 0.0;
        res.hinge_signature.push_back(active);
        if (active) {
            l_triplet += arg;
            if (grads) {
                for (std::size_t a = 0; a < d; ++a) {
                    d_anchor[i][a] +=
                        2.0 * (neg_txts[i].emb[a] - pos_txts[i].emb[a]);
                    d_pos_txt[i][a] -=
                        2.0 * (anchors[i].emb[a] - pos_txts[i].emb[a]);
                    d_neg_txt[i][a] +=
                        2.0 * (anchors[i].emb[a] - neg_txts[i].emb[a]);
                }
            }
        }
    }
    for (std::size_t i = 0; i < b; ++i) {
        double arg = sq_euclidean(pos_txts[i].emb, anchors[i].emb) -
                     sq_euclidean(pos_txts[i].emb, neg_imgs[i].emb) + m_y;
        res.txt_triplet_args[i] = arg;
        bool active = arg > 0.0;
        res.hinge_signature.push_back(active);
        if (active) {
            l_triplet += arg;
            if (grads) {
                for (std::size_t a = 0; a < d; ++a) {
                    d_pos_txt[i][a] +=
                        2.0 * (neg_imgs[i].emb[a] - anchors[i].emb[a]);
                    d_anchor[i][a] -=
                        2.0 * (pos_txts[i].emb[a] - anchors[i].emb[a]);
                    d_neg_img[i][a] +=
                        2.0 * (pos_txts[i].emb[a] - neg_imgs[i].emb[a]);
                }
            }
        }
    }

    // Cross-entropy heads on anchor image and positive caption.
    double l_ce_img = 0.0, l_ce_txt = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        std::size_t n = batch.subset_labels[i];
        l_ce_img += ce_term(params, anchors[i].emb, n, Branch::Image, grads,
                            &d_anchor[i]);
        l_ce_txt += ce_term(params, pos_txts[i].emb, n, Branch::Text, grads,
                            &d_pos_txt[i]);
    }

    if (grads) {
        for (std::size_t i = 0; i < b; ++i) {
            img_backward(params, batch.anchor_img_feats[i], anchors[i],
                         d_anchor[i], *grads);
            img_backward(params, batch.neg_img_feats[i], neg_imgs[i],
                         d_neg_img[i], *grads);
            txt_backward(params, batch.pos_captions[i], pos_txts[i],
                         d_pos_txt[i], *grads);
            txt_backward(params, batch.neg_captions[i], neg_txts[i],
                         d_neg_txt[i], *grads);
        }
    }

    res.loss = total_loss(l_center, l_triplet, l_ce_img, l_ce_txt);
    return res;
}

}  // namespace

Gradients zero_gradients(const ModelParams& params, const CenterBank& bank) {
    Gradients g;
    g.params = params;
    for (auto& [name, vec] : param_tensors(g.params))
        std::fill(vec->begin(), vec->end(), 0.0);
    g.centers = Mat(bank.centers.rows, bank.centers.cols);
    return g;
}

std::vector<std::pair<std::string, std::vector<double>*>> param_tensors(
    ModelParams& p) {
    return {
        {"w_img", &p.w_img.data},       {"b_img", &p.b_img},
        {"e_tok", &p.e_tok.data},       {"w_txt", &p.w_txt.data},
        {"b_txt", &p.b_txt},            {"w_ce_img", &p.w_ce_img.data},
        {"b_ce_img", &p.b_ce_img},      {"w_ce_txt", &p.w_ce_txt.data},
        {"b_ce_txt", &p.b_ce_txt},      {"w_q", &p.w_q.data},
        {"b_q", &p.b_q},
    };
}

std::vector<std::pair<std::string, const std::vector<double>*>> param_tensors(
    const ModelParams& p) {
    auto mut = param_tensors(const_cast<ModelParams&>(p));
    std::vector<std::pair<std::string, const std::vector<double>*>> out;
    for (auto& [name, vec] : mut) out.emplace_back(name, vec);
    return out;
}

BatchResult forward_total(const ModelParams& params, const CenterBank& bank,
                          const TripletBatch& batch, const LossConfig& cfg,
                          double m_x, double m_y, bool quantized) {
    return run_batch(params, bank, batch, cfg, m_x, m_y, quantized, nullptr);
}

BatchResult backward_total(const ModelParams& params, const CenterBank& bank,
                           const TripletBatch& batch, const LossConfig& cfg,
                           double m_x, double m_y, bool quantized,
                           Gradients& grads) {
    grads = zero_gradients(params, bank);
    BatchResult res =
        run_batch(params, bank, batch, cfg, m_x, m_y, quantized, &grads);
    for (auto& [name, vec] : param_tensors(grads.params))
        if (!all_finite(*vec))
            throw NonFiniteGradientError("non-finite gradient in " +
                                         std::string(name));
    if (!all_finite(grads.centers))
        throw NonFiniteGradientError("non-finite gradient in centers");
    return res;
}

std::vector<GradCheckEntry> grad_check(const ModelParams& params,
                                       const CenterBank& bank,
                                       const TripletBatch& batch,
                                       const LossConfig& cfg, double m_x,
                                       double m_y, bool quantized, double h,
                                       std::uint64_t seed,
                                       std::size_t coords_per_tensor) {
    Gradients analytic;
    backward_total(params, bank, batch, cfg, m_x, m_y, quantized, analytic);

    ModelParams work_params = params;
    CenterBank work_bank = bank;

    auto tensors = param_tensors(work_params);
    tensors.emplace_back("centers", &work_bank.centers.data);
    auto grad_tensors = param_tensors(analytic.params);
    grad_tensors.emplace_back("centers", &analytic.centers.data);

    std::mt19937_64 rng(seed);
    std::vector<GradCheckEntry> report;
    for (std::size_t t = 0; t < tensors.size(); ++t) {
        auto& [name, vec] = tensors[t];
        const std::vector<double>& gvec = *grad_tensors[t].second;
        GradCheckEntry entry;
        entry.tensor = name;

        std::vector<std::size_t> coords;
        if (vec->size() <= coords_per_tensor) {
            coords.resize(vec->size());
            for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
        } else {
            std::set<std::size_t> picked;
            std::uniform_int_distribution<std::size_t> pick(0, vec->size() - 1);
            while (picked.size() < coords_per_tensor) picked.insert(pick(rng));
            coords.assign(picked.begin(), picked.end());
        }

        for (std::size_t idx : coords) {
            double saved = (*vec)[idx];
            (*vec)[idx] = saved + h;
            BatchResult plus = forward_total(work_params, work_bank, batch,
                                             cfg, m_x, m_y, quantized);
            (*vec)[idx] = saved - h;
            BatchResult minus = forward_total(work_params, work_bank, batch,
                                              cfg, m_x, m_y, quantized);
            (*vec)[idx] = saved;

            if (plus.hinge_signature != minus.hinge_signature) {
                ++entry.skipped_kinks;
                continue;
            }
            double numeric = (plus.loss.total - minus.loss.total) / (2.0 * h);
            double a = gvec[idx];
            double rel = std::abs(a - numeric) /
                         std::max({std::abs(a), std::abs(numeric), 1e-8});
            entry.max_rel_err = std::max(entry.max_rel_err, rel);
            ++entry.checked;
        }
        report.push_back(std::move(entry));
    }
    return report;
}

AdamState init_adam(const ModelParams& params) {
    AdamState s;
    for (auto& [name, vec] : param_tensors(params)) {
        s.m1.emplace_back(vec->size(), 0.0);
        s.m2.emplace_back(vec->size(), 0.0);
    }
    return s;
}

void adam_step(AdamState& state, ModelParams& params, const Gradients& grads,
               double lr, const std::vector<std::string>& frozen) {
    auto tensors = param_tensors(params);
    auto grad_tensors = param_tensors(grads.params);
    if (state.m1.size() != tensors.size())
        throw ShapeMismatchError("adam state does not match parameter set");
    ++state.step;
    double bc1 = 1.0 - std::pow(state.beta1, double(state.step));
    double bc2 = 1.0 - std::pow(state.beta2, double(state.step));
    for (std::size_t t = 0; t < tensors.size(); ++t) {
        auto& [name, vec] = tensors[t];
        if (std::find(frozen.begin(), frozen.end(), name) != frozen.end())
            continue;
        const std::vector<double>& g = *grad_tensors[t].second;
        if (g.size() != vec->size())
            throw ShapeMismatchError("gradient shape mismatch for " +
                                     std::string(name));
        std::vector<double>& m1 = state.m1[t];
        std::vector<double>& m2 = state.m2[t];
        for (std::size_t i = 0; i < vec->size(); ++i) {
            m1[i] = state.beta1 * m1[i] + (1.0 - state.beta1) * g[i];
            m2[i] = state.beta2 * m2[i] + (1.0 - state.beta2) * g[i] * g[i];
            double mhat = m1[i] / bc1;
            double vhat = m2[i] / bc2;
            (*vec)[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

void sgd_center_step(CenterBank& bank, const Mat& center_grads, double lr) {
    if (bank.centers.rows != center_grads.rows ||
        bank.centers.cols != center_grads.cols)
        throw ShapeMismatchError("center gradient shape mismatch");
    for (std::size_t i = 0; i < bank.centers.data.size(); ++i)
        bank.centers.data[i] -= lr * center_grads.data[i];
}

double lr_schedule(std::size_t epoch, double base_lr, double decay_factor,
                   std::size_t every_epochs) {
    if (every_epochs == 0) return base_lr;
    return base_lr * std::pow(decay_factor, double(epoch / every_epochs));
}

MarginState update_margins(const MarginState& state, bool invert_ratio) {
    if (state.acc_batches != state.window_batches)
        throw WindowIncompleteError(
            "update_margins called mid-window (" +
            std::to_string(state.acc_batches) + "/" +
            std::to_string(state.window_batches) + " batches)");
    if (state.acc_count == 0)
        throw EmptyBatchError("margin window holds no triplets");
    double ratio_x = double(state.acc_violations_x) / double(state.acc_count);
    double ratio_y = double(state.acc_violations_y) / double(state.acc_count);
    auto fires = [&](double ratio) {
        return invert_ratio ? (1.0 - ratio) > state.ratio_threshold
                            : ratio > state.ratio_threshold;
    };
    MarginState out = state;
    if (fires(ratio_x)) out.m_x *= state.mult;
    if (fires(ratio_y)) out.m_y *= state.mult;
    out.acc_violations_x = 0;
    out.acc_violations_y = 0;
    out.acc_count = 0;
    out.acc_batches = 0;
    return out;
}

void write_metrics_header(std::ostream& out) {
    out << "step,phase,epoch,l_center,l_triplet,l_ce_img,l_ce_txt,total,"
           "m_x,m_y,M_x,M_y,lr\n";
}

void run_phase(int phase_id, const Dataset& train, TrainState& state,
               const PhasePlan& plan, const LossConfig& loss_cfg,
               std::uint64_t seed, std::ostream& metrics,
               const std::string& ckpt_path) {
    if (phase_id < 1 || phase_id > 3)
        throw PhaseOrderError("phase id must be 1, 2 or 3");
    bool quantized = phase_id >= 2;
    bool adaptive = phase_id == 3;

    if (phase_id == 1) {
        if (state.bank.quantized)
            throw PhaseOrderError("phase 1 cannot run on a quantized bank");
        if (state.bank.centers.rows != train.size())
            throw PhaseOrderError("phase 1 bank must hold one center per subset");
    } else if (phase_id == 2) {
        if (state.bank.quantized)
            throw PhaseOrderError("phase 2 expects the phase-1 bank");
        state.bank =
            kmeans_init(state.bank.centers, plan.n_quant, seed ^ 0x6b6d);
        // Seed the fresh assignment head from the centers so its softmax
        // starts as a distance-based soft assignment: with unit embeddings,
        // s·(2c_j·e - |c_j|^2) orders exactly like -s·|e - c_j|^2. A random
        // head would need far more than the warmup budget to learn this map.
        {
            const double s = 10.0;
            ModelDims& d = state.params.dims;
            for (std::size_t j = 0; j < plan.n_quant; ++j) {
                Vec c = state.bank.centers.row_vec(j);
                for (std::size_t r = 0; r < d.embed_dim; ++r)
                    state.params.w_q.at(r, j) = 2.0 * s * c[r];
                state.params.b_q[j] = -s * dot(c, c);
            }
        }
    } else {
        if (!state.bank.quantized)
            throw PhaseOrderError("phase 3 requires a quantized bank");
    }

    std::size_t epochs = phase_id == 1   ? plan.phase1_epochs
                         : phase_id == 2 ? plan.phase2_epochs
                                         : plan.phase3_epochs;
    double base_lr = phase_id == 1 ? plan.lr_phase1 : plan.lr_phase23;

    std::mt19937_64 rng(seed ^ (0x9e3779b97f4a7c15ULL * std::uint64_t(phase_id)));
    BatchSampler sampler(train, plan.batch_size, seed + std::uint64_t(phase_id));
    AdamState adam = init_adam(state.params);

    std::vector<std::string> all_but_quant_head;
    for (auto& [name, vec] : param_tensors(state.params))
        if (name != std::string("w_q") && name != std::string("b_q"))
            all_but_quant_head.push_back(name);

    Gradients grads;
    metrics.precision(17);
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        double lr = plan.decay_center_only
                        ? base_lr
                        : lr_schedule(epoch, base_lr, plan.lr_decay_factor,
                                      plan.lr_decay_every);
        double center_lr = lr_schedule(epoch, plan.center_lr,
                                       plan.lr_decay_factor,
                                       plan.lr_decay_every);
        bool frozen_warmup =
            phase_id == 2 && epoch < plan.freeze_warmup_epochs;

        sampler.start_epoch();
        TripletBatch batch;
        for (;;) {
            const Mat* emb_mat = nullptr;
            const std::vector<std::vector<Vec>>* cap_mat = nullptr;
            Mat img_embs;
            std::vector<std::vector<Vec>> cap_embs;
            if (plan.sampling == SamplingMode::HardestInBatch) {
                auto members = sampler.upcoming();
                img_embs = Mat(train.size(), state.params.dims.embed_dim);
                cap_embs.resize(train.size());
                for (std::size_t n : members) {
                    const SubsetRecord& rec = train.records[n];
                    img_embs.set_row(n, embed_image(state.params,
                                                    rec.image_feat));
                    for (const Tokens& cap : rec.captions)
                        cap_embs[n].push_back(
                            embed_caption(state.params, cap));
                }
                emb_mat = &img_embs;
                cap_mat = &cap_embs;
            }
            if (!sampler.next_batch(batch, plan.sampling, rng, emb_mat,
                                    cap_mat))
                break;

            BatchResult res =
                backward_total(state.params, state.bank, batch, loss_cfg,
                               state.margins.m_x, state.margins.m_y,
                               quantized, grads);
            if (!std::isfinite(res.loss.total))
                throw NonFiniteLossError("loss diverged at step " +
                                         std::to_string(state.global_step));

            // Warmup batches train only the fresh quantization head, at its
            // own (larger) rate: at the shared fine-tuning lr the head could
            // not approach convergence within a short warmup.
            adam_step(adam, state.params, grads,
                      frozen_warmup ? plan.warmup_lr : lr,
                      frozen_warmup ? all_but_quant_head
                                    : std::vector<std::string>{});
            // Average the batch-sum center gradient per contributing term
            // before the SGD step (the classic center-loss update); the raw
            // sum has per-center curvature 2·terms, so lr 0.5 would sit at
            // the oscillation boundary and never settle.
            {
                std::vector<double> terms(state.bank.centers.rows, 0.0);
                if (quantized) {
                    double t = 2.0 * double(batch.size()) +
                               double(state.bank.centers.rows - 1);
                    for (double& x : terms) x = t;
                } else {
                    for (std::size_t lbl : batch.subset_labels)
                        terms[lbl] += 2.0;
                }
                Mat scaled = grads.centers;
                for (std::size_t r = 0; r < scaled.rows; ++r)
                    for (std::size_t c = 0; c < scaled.cols; ++c)
                        scaled.at(r, c) /= 1.0 + terms[r];
                sgd_center_step(state.bank, scaled, center_lr);
            }

            auto [ratio_x, ratio_y] = margin_ratios(res.img_triplet_args,
                                                    res.txt_triplet_args);
            if (adaptive) {
                for (double a : res.img_triplet_args)
                    if (a > 0.0) ++state.margins.acc_violations_x;
                for (double a : res.txt_triplet_args)
                    if (a > 0.0) ++state.margins.acc_violations_y;
                state.margins.acc_count += res.img_triplet_args.size();
                ++state.margins.acc_batches;
                if (state.margins.acc_batches == state.margins.window_batches)
                    state.margins =
                        update_margins(state.margins, plan.invert_ratio);
            }

            ++state.global_step;
            metrics << state.global_step << ',' << phase_id << ',' << epoch
                    << ',' << res.loss.l_center << ',' << res.loss.l_triplet
                    << ',' << res.loss.l_ce_img << ',' << res.loss.l_ce_txt
                    << ',' << res.loss.total << ',' << state.margins.m_x
                    << ',' << state.margins.m_y << ',' << ratio_x << ','
                    << ratio_y << ',' << lr << '\n';
        }
        if (!ckpt_path.empty())
            save_checkpoint(ckpt_path, state.params, state.bank,
                            state.margins);
    }
}

namespace {

bool parse_bool(const std::string& v) {
    return v == "1" || v == "true" || v == "yes";
}

}  // namespace

TrainConfig parse_train_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config: " + path);
    TrainConfig cfg;
    auto dir = std::filesystem::path(path).parent_path();
    auto resolve = [&dir](const std::string& p) {
        std::filesystem::path fp(p);
        return fp.is_absolute() ? fp.string() : (dir / fp).string();
    };
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw MalformedLineError("config line without '=': " + line);
        std::string key = line.substr(0, eq);
        std::string val = line.substr(eq + 1);
        PhasePlan& p = cfg.plan;
        if (key == "phase1_epochs") p.phase1_epochs = std::stoull(val);
        else if (key == "phase2_epochs") p.phase2_epochs = std::stoull(val);
        else if (key == "phase3_epochs") p.phase3_epochs = std::stoull(val);
        else if (key == "lr_phase1") p.lr_phase1 = std::stod(val);
        else if (key == "lr_phase23") p.lr_phase23 = std::stod(val);
        else if (key == "center_lr") p.center_lr = std::stod(val);
        else if (key == "lr_decay_factor") p.lr_decay_factor = std::stod(val);
        else if (key == "lr_decay_every") p.lr_decay_every = std::stoull(val);
        else if (key == "batch_size") p.batch_size = std::stoull(val);
        else if (key == "freeze_warmup_epochs")
            p.freeze_warmup_epochs = std::stoull(val);
        else if (key == "warmup_lr") p.warmup_lr = std::stod(val);
        else if (key == "n_quant") p.n_quant = std::stoull(val);
        else if (key == "q_window") p.q_window = std::stoull(val);
        else if (key == "margin_mult") p.margin_mult = std::stod(val);
        else if (key == "margin_ratio") p.margin_ratio_r = std::stod(val);
        else if (key == "margin_init") p.margin_init = std::stod(val);
        else if (key == "invert_ratio") p.invert_ratio = parse_bool(val);
        else if (key == "decay_center_only")
            p.decay_center_only = parse_bool(val);
        else if (key == "sampling")
            p.sampling = val == "hardest" ? SamplingMode::HardestInBatch
                                          : SamplingMode::Random;
        else if (key == "delta") cfg.loss.delta = std::stod(val);
        else if (key == "alpha") cfg.loss.alpha = std::stod(val);
        else if (key == "margin_fixed") cfg.loss.margin_fixed = std::stod(val);
        else if (key == "embed_dim") cfg.embed_dim = std::stoull(val);
        else if (key == "word_dim") cfg.word_dim = std::stoull(val);
        else if (key == "seed") cfg.seed = std::stoull(val);
        else if (key == "train_manifest") cfg.train_manifest = resolve(val);
        else if (key == "val_manifest") cfg.val_manifest = resolve(val);
        else if (key == "out_dir") cfg.out_dir = resolve(val);
        else if (key == "synthetic") cfg.synthetic = parse_bool(val);
        else if (key == "synth_concepts")
            cfg.synth_spec.n_concepts = std::stoull(val);
        else if (key == "synth_subsets_per_concept")
            cfg.synth_spec.subsets_per_concept = std::stoull(val);
        else if (key == "synth_feat_dim")
            cfg.synth_spec.feat_dim = std::stoull(val);
        else if (key == "synth_vocab")
            cfg.synth_spec.vocab_size = std::stoull(val);
        else if (key == "synth_tokens_per_caption")
            cfg.synth_spec.tokens_per_caption = std::stoull(val);
        else if (key == "synth_k")
            cfg.synth_spec.captions_per_subset = std::stoull(val);
        else if (key == "synth_noise")
            cfg.synth_spec.noise_sigma = std::stod(val);
        else if (key == "synth_seed") cfg.synth_spec.seed = std::stoull(val);
        else if (key == "synth_test_per_concept")
            cfg.synth_test_per_concept = std::stoull(val);
        else throw MalformedLineError("unknown config key: " + key);
    }
    return cfg;
}

TrainOutput train(const TrainConfig& cfg, const Dataset& train_set) {
    std::filesystem::create_directories(cfg.out_dir);
    auto out_path = [&cfg](const std::string& name) {
        return (std::filesystem::path(cfg.out_dir) / name).string();
    };

    ModelDims dims;
    dims.feat_dim = train_set.feat_dim;
    dims.word_dim = cfg.word_dim;
    dims.embed_dim = cfg.embed_dim;
    dims.n_subsets = train_set.size();
    dims.n_quant = cfg.plan.n_quant;
    dims.vocab_size = train_set.vocab_size;

    TrainOutput out;
    out.state.params = init_params(dims, cfg.seed);
    out.state.margins.m_x = cfg.plan.margin_init;
    out.state.margins.m_y = cfg.plan.margin_init;
    out.state.margins.window_batches = cfg.plan.q_window;
    out.state.margins.mult = cfg.plan.margin_mult;
    out.state.margins.ratio_threshold = cfg.plan.margin_ratio_r;

    // Unquantized centers start at each subset's mean initial embedding.
    out.state.bank.quantized = false;
    out.state.bank.centers = Mat(train_set.size(), dims.embed_dim);
    for (std::size_t n = 0; n < train_set.size(); ++n) {
        const SubsetRecord& rec = train_set.records[n];
        Vec mean = embed_image(out.state.params, rec.image_feat);
        for (const Tokens& cap : rec.captions) {
            Vec e = embed_caption(out.state.params, cap);
            for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += e[j];
        }
        for (double& x : mean) x /= double(1 + rec.captions.size());
        out.state.bank.centers.set_row(n, mean);
    }

    out.metrics_path = out_path("metrics.csv");
    std::ofstream metrics(out.metrics_path);
    write_metrics_header(metrics);

    if (cfg.plan.phase1_epochs > 0) {
        std::string ckpt = out_path("phase1.ckpt");
        run_phase(1, train_set, out.state, cfg.plan, cfg.loss, cfg.seed,
                  metrics, ckpt);
        save_checkpoint(ckpt, out.state.params, out.state.bank,
                        out.state.margins);
        out.checkpoint_paths.push_back(ckpt);
    }
    if (cfg.plan.phase2_epochs > 0 || cfg.plan.phase3_epochs > 0) {
        std::string ckpt = out_path("phase2.ckpt");
        run_phase(2, train_set, out.state, cfg.plan, cfg.loss, cfg.seed,
                  metrics, ckpt);
        save_checkpoint(ckpt, out.state.params, out.state.bank,
                        out.state.margins);
        out.checkpoint_paths.push_back(ckpt);
    }
    if (cfg.plan.phase3_epochs > 0) {
        std::string ckpt = out_path("phase3.ckpt");
        run_phase(3, train_set, out.state, cfg.plan, cfg.loss, cfg.seed,
                  metrics, ckpt);
        save_checkpoint(ckpt, out.state.params, out.state.bank,
                        out.state.margins);
        out.checkpoint_paths.push_back(ckpt);
    }
    return out;
}

}  // namespace jem
