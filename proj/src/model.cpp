#include "jem/model.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>

namespace jem {

namespace {

void glorot_fill(Mat& m, std::mt19937_64& rng) {
    double a = std::sqrt(6.0 / double(m.rows + m.cols));
    std::uniform_real_distribution<double> unif(-a, a);
    for (double& x : m.data) x = unif(rng);
}

Vec affine(const Mat& w, const Vec& b, const Vec& x) {
    // w is in_dim x out_dim; result = w^T x + b.
    Vec out(b);
    for (std::size_t i = 0; i < w.rows; ++i) {
        const double* wi = w.row(i);
        double xi = x[i];
        for (std::size_t j = 0; j < w.cols; ++j) out[j] += xi * wi[j];
    }
    return out;
}

}  // namespace

ModelParams init_params(const ModelDims& dims, std::uint64_t seed) {
    if (dims.feat_dim == 0 || dims.word_dim == 0 || dims.embed_dim == 0 ||
        dims.vocab_size == 0)
        throw std::invalid_argument("model dims must be positive");
    std::mt19937_64 rng(seed);
    ModelParams p;
    p.dims = dims;
    p.w_img = Mat(dims.feat_dim, dims.embed_dim);
    p.b_img = Vec(dims.embed_dim, 0.0);
    p.e_tok = Mat(dims.vocab_size, dims.word_dim);
    p.w_txt = Mat(dims.word_dim, dims.embed_dim);
    p.b_txt = Vec(dims.embed_dim, 0.0);
    p.w_ce_img = Mat(dims.embed_dim, dims.n_subsets);
    p.b_ce_img = Vec(dims.n_subsets, 0.0);
    p.w_ce_txt = Mat(dims.embed_dim, dims.n_subsets);
    p.b_ce_txt = Vec(dims.n_subsets, 0.0);
    p.w_q = Mat(dims.embed_dim, dims.n_quant);
    p.b_q = Vec(dims.n_quant, 0.0);
    glorot_fill(p.w_img, rng);
    glorot_fill(p.e_tok, rng);
    glorot_fill(p.w_txt, rng);
    if (dims.n_subsets) {
        glorot_fill(p.w_ce_img, rng);
        glorot_fill(p.w_ce_txt, rng);
    }
    if (dims.n_quant) glorot_fill(p.w_q, rng);
    return p;
}

Vec embed_image(const ModelParams& p, const Vec& feat) {
    if (feat.size() != p.dims.feat_dim)
        throw DimMismatchError("embed_image: feature dim mismatch");
    return l2_normalize(affine(p.w_img, p.b_img, feat));
}

Vec embed_caption(const ModelParams& p, const Tokens& tokens) {
    if (tokens.empty()) throw EmptyCaptionError("caption has no tokens");
    Vec mean(p.dims.word_dim, 0.0);
    for (std::uint32_t t : tokens) {
        if (t >= p.dims.vocab_size)
            throw TokenOutOfRangeError("token " + std::to_string(t) +
                                       " out of vocab");
        const double* row = p.e_tok.row(t);
        for (std::size_t j = 0; j < p.dims.word_dim; ++j) mean[j] += row[j];
    }
    for (double& x : mean) x /= double(tokens.size());
    return l2_normalize(affine(p.w_txt, p.b_txt, mean));
}

Vec ce_logits(const ModelParams& p, const Vec& emb, Branch branch) {
    const Mat& w = branch == Branch::Image ? p.w_ce_img : p.w_ce_txt;
    const Vec& b = branch == Branch::Image ? p.b_ce_img : p.b_ce_txt;
    return affine(w, b, emb);
}

Vec assign_soft(const ModelParams& p, const Vec& emb) {
    return softmax(affine(p.w_q, p.b_q, emb));
}

double kmeans_objective(const Mat& points, const Mat& centers) {
    double obj = 0.0;
    for (std::size_t i = 0; i < points.rows; ++i) {
        double best = std::numeric_limits<double>::infinity();
        Vec pt = points.row_vec(i);
        for (std::size_t j = 0; j < centers.rows; ++j)
            best = std::min(best, sq_euclidean(pt, centers.row_vec(j)));
        obj += best;
    }
    return obj;
}

CenterBank kmeans_init(const Mat& points, std::size_t n_quant,
                       std::uint64_t seed, std::size_t max_iters) {
    if (points.rows < n_quant || n_quant == 0)
        throw TooFewPointsError("kmeans needs at least n_quant points");
    std::mt19937_64 rng(seed);
    std::size_t n = points.rows, d = points.cols;

    // k-means++ seeding.
    Mat centers(n_quant, d);
    std::uniform_int_distribution<std::size_t> first(0, n - 1);
    centers.set_row(0, points.row_vec(first(rng)));
    std::vector<double> min_d2(n, std::numeric_limits<double>::infinity());
    for (std::size_t c = 1; c < n_quant; ++c) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double d2 = sq_euclidean(points.row_vec(i), centers.row_vec(c - 1));
            min_d2[i] = std::min(min_d2[i], d2);
            total += min_d2[i];
        }
        std::size_t pick = 0;
        if (total > 0) {
            std::uniform_real_distribution<double> unif(0.0, total);
            double target = unif(rng), acc = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                acc += min_d2[i];
                if (acc >= target) {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = first(rng);  // all points identical
        }
        centers.set_row(c, points.row_vec(pick));
    }

    std::vector<std::size_t> assign(n, 0), prev(n, n_quant);
    for (std::size_t iter = 0; iter < max_iters; ++iter) {
        for (std::size_t i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            std::size_t bj = 0;
            Vec pt = points.row_vec(i);
            for (std::size_t j = 0; j < n_quant; ++j) {
                double d2 = sq_euclidean(pt, centers.row_vec(j));
                if (d2 < best) {
                    best = d2;
                    bj = j;
                }
            }
            assign[i] = bj;
        }
        if (assign == prev) break;
        prev = assign;

        Mat sums(n_quant, d);
        std::vector<std::size_t> counts(n_quant, 0);
        for (std::size_t i = 0; i < n; ++i) {
            ++counts[assign[i]];
            const double* pi = points.row(i);
            double* s = sums.row(assign[i]);
            for (std::size_t j = 0; j < d; ++j) s[j] += pi[j];
        }
        for (std::size_t c = 0; c < n_quant; ++c) {
            if (counts[c] > 0) {
                for (std::size_t j = 0; j < d; ++j)
                    centers.at(c, j) = sums.at(c, j) / double(counts[c]);
            } else {
                // Re-seed an empty cluster to the point farthest from its
                // current center.
                double worst = -1.0;
                std::size_t pick = 0;
                for (std::size_t i = 0; i < n; ++i) {
                    double d2 = sq_euclidean(points.row_vec(i),
                                             centers.row_vec(assign[i]));
                    if (d2 > worst) {
                        worst = d2;
                        pick = i;
                    }
                }
                centers.set_row(c, points.row_vec(pick));
            }
        }
    }

    CenterBank bank;
    bank.centers = std::move(centers);
    bank.quantized = true;
    return bank;
}

namespace {

constexpr char kCkptMagic[4] = {'J', 'E', 'M', '1'};
constexpr std::uint32_t kCkptVersion = 1;

void put_u32(std::ostream& o, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    o.write(reinterpret_cast<char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw TruncatedFileError("checkpoint truncated");
    return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) |
           (std::uint32_t(b[2]) << 16) | (std::uint32_t(b[3]) << 24);
}

void put_f64(std::ostream& o, double v) {
    std::uint64_t u;
    std::memcpy(&u, &v, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
    o.write(reinterpret_cast<char*>(b), 8);
}

double get_f64(std::istream& in) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    if (!in) throw TruncatedFileError("checkpoint truncated");
    std::uint64_t u = 0;
    for (int i = 0; i < 8; ++i) u |= std::uint64_t(b[i]) << (8 * i);
    double v;
    std::memcpy(&v, &u, 8);
    return v;
}

void put_array(std::ostream& o, const std::vector<double>& a) {
    put_u32(o, static_cast<std::uint32_t>(a.size()));
    for (double v : a) put_f64(o, v);
}

void get_array(std::istream& in, std::vector<double>& a) {
    std::uint32_t n = get_u32(in);
    a.resize(n);
    for (auto& v : a) v = get_f64(in);
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelParams& params,
                     const CenterBank& bank, const MarginState& margins) {
    // Write to a temp file then rename so readers never see a partial file.
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write checkpoint: " + tmp);
        out.write(kCkptMagic, 4);
        put_u32(out, kCkptVersion);
        const ModelDims& d = params.dims;
        put_u32(out, static_cast<std::uint32_t>(d.feat_dim));
        put_u32(out, static_cast<std::uint32_t>(d.word_dim));
        put_u32(out, static_cast<std::uint32_t>(d.embed_dim));
        put_u32(out, static_cast<std::uint32_t>(d.n_subsets));
        put_u32(out, static_cast<std::uint32_t>(d.n_quant));
        put_u32(out, static_cast<std::uint32_t>(d.vocab_size));
        put_array(out, params.w_img.data);
        put_array(out, params.b_img);
        put_array(out, params.e_tok.data);
        put_array(out, params.w_txt.data);
        put_array(out, params.b_txt);
        put_array(out, params.w_ce_img.data);
        put_array(out, params.b_ce_img);
        put_array(out, params.w_ce_txt.data);
        put_array(out, params.b_ce_txt);
        put_array(out, params.w_q.data);
        put_array(out, params.b_q);
        put_u32(out, static_cast<std::uint32_t>(bank.centers.rows));
        put_u32(out, static_cast<std::uint32_t>(bank.centers.cols));
        put_u32(out, bank.quantized ? 1 : 0);
        put_array(out, bank.centers.data);
        put_f64(out, margins.m_x);
        put_f64(out, margins.m_y);
        put_u32(out, static_cast<std::uint32_t>(margins.acc_violations_x));
        put_u32(out, static_cast<std::uint32_t>(margins.acc_violations_y));
        put_u32(out, static_cast<std::uint32_t>(margins.acc_count));
        put_u32(out, static_cast<std::uint32_t>(margins.acc_batches));
        put_u32(out, static_cast<std::uint32_t>(margins.window_batches));
        put_f64(out, margins.mult);
        put_f64(out, margins.ratio_threshold);
    }
    std::filesystem::rename(tmp, path);
}

void load_checkpoint(const std::string& path, ModelParams& params,
                     CenterBank& bank, MarginState& margins) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kCkptMagic, 4) != 0)
        throw BadMagicError("bad checkpoint magic: " + path);
    std::uint32_t version = get_u32(in);
    if (version != kCkptVersion)
        throw std::runtime_error("unsupported checkpoint version " +
                                 std::to_string(version));
    ModelDims d;
    d.feat_dim = get_u32(in);
    d.word_dim = get_u32(in);
    d.embed_dim = get_u32(in);
    d.n_subsets = get_u32(in);
    d.n_quant = get_u32(in);
    d.vocab_size = get_u32(in);
    params = ModelParams{};
    params.dims = d;
    params.w_img = Mat(d.feat_dim, d.embed_dim);
    params.e_tok = Mat(d.vocab_size, d.word_dim);
    params.w_txt = Mat(d.word_dim, d.embed_dim);
    params.w_ce_img = Mat(d.embed_dim, d.n_subsets);
    params.w_ce_txt = Mat(d.embed_dim, d.n_subsets);
    params.w_q = Mat(d.embed_dim, d.n_quant);
    get_array(in, params.w_img.data);
    get_array(in, params.b_img);
    get_array(in, params.e_tok.data);
    get_array(in, params.w_txt.data);
    get_array(in, params.b_txt);
    get_array(in, params.w_ce_img.data);
    get_array(in, params.b_ce_img);
    get_array(in, params.w_ce_txt.data);
    get_array(in, params.b_ce_txt);
    get_array(in, params.w_q.data);
    get_array(in, params.b_q);
    std::uint32_t crows = get_u32(in);
    std::uint32_t ccols = get_u32(in);
    bank.quantized = get_u32(in) != 0;
    bank.centers = Mat(crows, ccols);
    get_array(in, bank.centers.data);
    if (bank.centers.data.size() != std::size_t(crows) * ccols)
        throw TruncatedFileError("center bank size mismatch");
    margins.m_x = get_f64(in);
    margins.m_y = get_f64(in);
    margins.acc_violations_x = get_u32(in);
    margins.acc_violations_y = get_u32(in);
    margins.acc_count = get_u32(in);
    margins.acc_batches = get_u32(in);
    margins.window_batches = get_u32(in);
    margins.mult = get_f64(in);
    margins.ratio_threshold = get_f64(in);
}

}  // namespace jem
