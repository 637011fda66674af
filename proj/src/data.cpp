#include "jem/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace jem {

namespace {

constexpr char kFeatureMagic[4] = {'J', 'E', 'F', '1'};

std::uint32_t read_u32_le(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw TruncatedFileError("unexpected end of file in header");
    return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) |
           (std::uint32_t(b[2]) << 16) | (std::uint32_t(b[3]) << 24);
}

void write_u32_le(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    out.write(reinterpret_cast<char*>(b), 4);
}

float read_f32_le(std::istream& in) {
    std::uint32_t u = read_u32_le(in);
    float f;
    std::memcpy(&f, &u, 4);
    return f;
}

void write_f32_le(std::ostream& out, float f) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    write_u32_le(out, u);
}

}  // namespace

Mat load_features(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open feature file: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kFeatureMagic, 4) != 0)
        throw BadMagicError("bad magic in feature file: " + path);
    std::uint32_t n = read_u32_le(in);
    std::uint32_t d = read_u32_le(in);
    Mat m(n, d);
    for (std::size_t i = 0; i < std::size_t(n) * d; ++i) {
        unsigned char b[4];
        in.read(reinterpret_cast<char*>(b), 4);
        if (!in)
            throw TruncatedFileError("feature file truncated: " + path);
        std::uint32_t u = std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) |
                          (std::uint32_t(b[2]) << 16) |
                          (std::uint32_t(b[3]) << 24);
        float f;
        std::memcpy(&f, &u, 4);
        if (!std::isfinite(f))
            throw NonFiniteValueError("non-finite feature value in " + path);
        m.data[i] = f;
    }
    return m;
}

void write_features(const std::string& path, const Mat& m) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write feature file: " + path);
    out.write(kFeatureMagic, 4);
    write_u32_le(out, static_cast<std::uint32_t>(m.rows));
    write_u32_le(out, static_cast<std::uint32_t>(m.cols));
    for (double v : m.data) write_f32_le(out, static_cast<float>(v));
}

std::vector<std::pair<std::size_t, Tokens>> load_captions(
    const std::string& path, std::size_t vocab_size) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open caption file: " + path);
    std::vector<std::pair<std::size_t, Tokens>> result;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto tab = line.find('\t');
        if (tab == std::string::npos)
            throw MalformedLineError("caption line " + std::to_string(lineno) +
                                     ": missing tab");
        std::size_t subset;
        try {
            subset = std::stoull(line.substr(0, tab));
        } catch (const std::exception&) {
            throw MalformedLineError("caption line " + std::to_string(lineno) +
                                     ": bad subset index");
        }
        Tokens toks;
        std::istringstream rest(line.substr(tab + 1));
        std::string tok;
        while (rest >> tok) {
            std::uint64_t id;
            try {
                id = std::stoull(tok);
            } catch (const std::exception&) {
                throw MalformedLineError("caption line " +
                                         std::to_string(lineno) +
                                         ": bad token id '" + tok + "'");
            }
            if (id >= vocab_size)
                throw TokenOutOfRangeError(
                    "token " + std::to_string(id) + " >= vocab size " +
                    std::to_string(vocab_size) + " at line " +
                    std::to_string(lineno));
            toks.push_back(static_cast<std::uint32_t>(id));
        }
        result.emplace_back(subset, std::move(toks));
    }
    return result;
}

void write_captions(const std::string& path,
                    const std::vector<std::pair<std::size_t, Tokens>>& lines) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write caption file: " + path);
    for (const auto& [subset, toks] : lines) {
        out << subset << '\t';
        for (std::size_t i = 0; i < toks.size(); ++i) {
            if (i) out << ' ';
            out << toks[i];
        }
        out << '\n';
    }
}

std::vector<std::string> load_vocab(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open vocab file: " + path);
    std::vector<std::string> vocab;
    std::string line;
    while (std::getline(in, line)) vocab.push_back(line);
    return vocab;
}

Manifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open manifest: " + path);
    Manifest m;
    std::string line;
    auto dir = std::filesystem::path(path).parent_path();
    auto resolve = [&dir](const std::string& p) {
        std::filesystem::path fp(p);
        return fp.is_absolute() ? fp.string() : (dir / fp).string();
    };
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw MalformedLineError("manifest line without '=': " + line);
        std::string key = line.substr(0, eq);
        std::string val = line.substr(eq + 1);
        if (key == "features") m.features = resolve(val);
        else if (key == "captions") m.captions = resolve(val);
        else if (key == "vocab") m.vocab = resolve(val);
        else if (key == "k") m.captions_per_subset = std::stoull(val);
        else if (key == "split") m.split = val;
        else throw MalformedLineError("unknown manifest key: " + key);
    }
    return m;
}

void write_manifest(const std::string& path, const Manifest& m) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write manifest: " + path);
    auto rel = [&path](const std::string& p) {
        auto dir = std::filesystem::path(path).parent_path();
        return std::filesystem::relative(p, dir).string();
    };
    out << "features=" << rel(m.features) << '\n'
        << "captions=" << rel(m.captions) << '\n'
        << "vocab=" << rel(m.vocab) << '\n'
        << "k=" << m.captions_per_subset << '\n'
        << "split=" << m.split << '\n';
}

Dataset load_dataset(const Manifest& manifest) {
    Dataset ds;
    Mat feats = load_features(manifest.features);
    auto vocab = load_vocab(manifest.vocab);
    ds.vocab_size = vocab.size();
    ds.feat_dim = feats.cols;
    ds.split = manifest.split;

    auto lines = load_captions(manifest.captions, ds.vocab_size);
    std::map<std::size_t, std::vector<Tokens>> grouped;
    for (auto& [subset, toks] : lines) grouped[subset].push_back(std::move(toks));

    if (grouped.size() != feats.rows)
        throw UnevenKError("caption subsets (" + std::to_string(grouped.size()) +
                           ") != feature rows (" + std::to_string(feats.rows) +
                           ")");
    std::size_t k = manifest.captions_per_subset;
    if (k == 0 && !grouped.empty()) k = grouped.begin()->second.size();
    ds.captions_per_subset = k;

    std::size_t expected = 0;
    for (auto& [subset, caps] : grouped) {
        if (subset != expected)
            throw MalformedLineError("subset indices not contiguous at " +
                                     std::to_string(subset));
        if (caps.size() != k)
            throw UnevenKError("subset " + std::to_string(subset) + " has " +
                               std::to_string(caps.size()) + " captions, want " +
                               std::to_string(k));
        SubsetRecord rec;
        rec.subset_index = subset;
        rec.image_feat = feats.row_vec(subset);
        rec.captions = std::move(caps);
        ds.records.push_back(std::move(rec));
        ++expected;
    }
    return ds;
}

SyntheticData synth_dataset(const SyntheticSpec& spec) {
    if (spec.n_concepts == 0 || spec.subsets_per_concept == 0 ||
        spec.feat_dim == 0 || spec.vocab_size == 0 ||
        spec.tokens_per_caption == 0 || spec.captions_per_subset == 0 ||
        spec.noise_sigma < 0)
        throw SpecInvalidError("synthetic spec fields must be positive");
    if (spec.vocab_size < spec.n_concepts)
        throw SpecInvalidError("vocab too small for one topical block per concept");

    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> gauss(0.0, 1.0);

    // Concept prototypes: unit Gaussian directions on the sphere.
    std::vector<Vec> prototypes(spec.n_concepts);
    for (auto& p : prototypes) {
        p.resize(spec.feat_dim);
        for (double& x : p) x = gauss(rng);
        p = l2_normalize(p);
    }

    // Token space: the front half is split into per-concept topical blocks,
    // the back half is shared across all concepts.
    std::size_t topical_total = spec.vocab_size / 2;
    std::size_t block = std::max<std::size_t>(1, topical_total / spec.n_concepts);
    std::size_t shared_begin = spec.vocab_size / 2;
    std::uniform_int_distribution<std::size_t> shared_tok(
        shared_begin, spec.vocab_size - 1);
    std::uniform_real_distribution<double> unif(0.0, 1.0);

    SyntheticData out;
    out.dataset.vocab_size = spec.vocab_size;
    out.dataset.feat_dim = spec.feat_dim;
    out.dataset.captions_per_subset = spec.captions_per_subset;

    std::size_t subset_index = 0;
    for (std::size_t g = 0; g < spec.n_concepts; ++g) {
        std::size_t block_begin = std::min(g * block, topical_total - 1);
        std::size_t block_end = std::min(block_begin + block, topical_total);
        std::uniform_int_distribution<std::size_t> topical_tok(block_begin,
                                                               block_end - 1);
        for (std::size_t s = 0; s < spec.subsets_per_concept; ++s) {
            SubsetRecord rec;
            rec.subset_index = subset_index++;
            rec.image_feat = prototypes[g];
            for (double& x : rec.image_feat) x += spec.noise_sigma * gauss(rng);
            for (std::size_t cidx = 0; cidx < spec.captions_per_subset; ++cidx) {
                Tokens toks(spec.tokens_per_caption);
                for (auto& t : toks) {
                    // 75% topical, 25% shared filler.
                    bool topical = unif(rng) < 0.75;
                    t = static_cast<std::uint32_t>(topical ? topical_tok(rng)
                                                           : shared_tok(rng));
                }
                rec.captions.push_back(std::move(toks));
            }
            out.dataset.records.push_back(std::move(rec));
            out.concept_labels.push_back(g);
        }
    }
    return out;
}

void write_synthetic(const SyntheticData& data, const std::string& dir) {
    std::filesystem::create_directories(dir);
    auto p = [&dir](const std::string& name) {
        return (std::filesystem::path(dir) / name).string();
    };
    const Dataset& ds = data.dataset;

    Mat feats(ds.size(), ds.feat_dim);
    for (std::size_t i = 0; i < ds.size(); ++i)
        feats.set_row(i, ds.records[i].image_feat);
    write_features(p("features.jef"), feats);

    std::vector<std::pair<std::size_t, Tokens>> lines;
    for (const auto& rec : ds.records)
        for (const auto& cap : rec.captions)
            lines.emplace_back(rec.subset_index, cap);
    write_captions(p("captions.tsv"), lines);

    std::ofstream vout(p("vocab.txt"));
    for (std::size_t i = 0; i < ds.vocab_size; ++i)
        vout << "tok" << i << '\n';

    std::ofstream lout(p("concept_labels.txt"));
    for (std::size_t g : data.concept_labels) lout << g << '\n';

    Manifest m;
    m.features = p("features.jef");
    m.captions = p("captions.tsv");
    m.vocab = p("vocab.txt");
    m.captions_per_subset = ds.captions_per_subset;
    m.split = ds.split;
    write_manifest(p("manifest.txt"), m);
}

std::pair<SyntheticData, SyntheticData> split_synthetic(
    const SyntheticData& data, std::size_t test_per_concept) {
    SyntheticData train, test;
    auto init = [&data](SyntheticData& d, const char* split) {
        d.dataset.vocab_size = data.dataset.vocab_size;
        d.dataset.feat_dim = data.dataset.feat_dim;
        d.dataset.captions_per_subset = data.dataset.captions_per_subset;
        d.dataset.split = split;
    };
    init(train, "train");
    init(test, "test");

    // Count subsets per concept (labels are grouped by construction).
    std::map<std::size_t, std::size_t> per_concept;
    for (std::size_t g : data.concept_labels) ++per_concept[g];

    std::map<std::size_t, std::size_t> seen;
    for (std::size_t i = 0; i < data.dataset.size(); ++i) {
        std::size_t g = data.concept_labels[i];
        std::size_t pos = seen[g]++;
        bool to_test = pos >= per_concept[g] - test_per_concept;
        SyntheticData& side = to_test ? test : train;
        SubsetRecord rec = data.dataset.records[i];
        rec.subset_index = side.dataset.size();
        side.dataset.records.push_back(std::move(rec));
        side.concept_labels.push_back(g);
    }
    return {std::move(train), std::move(test)};
}

BatchSampler::BatchSampler(const Dataset& dataset, std::size_t batch_size,
                           std::uint64_t seed)
    : dataset_(dataset), batch_size_(batch_size), perm_rng_(seed) {
    if (batch_size_ < 2)
        throw BatchTooSmallError("batch size must be >= 2");
    if (dataset_.size() < 2)
        throw BatchTooSmallError("dataset must span >= 2 subsets");
    order_.resize(dataset_.size());
    std::iota(order_.begin(), order_.end(), std::size_t(0));
    start_epoch();
}

std::vector<std::size_t> BatchSampler::upcoming() const {
    std::size_t count = std::min(batch_size_, order_.size() - cursor_);
    return std::vector<std::size_t>(order_.begin() + cursor_,
                                    order_.begin() + cursor_ + count);
}

void BatchSampler::start_epoch() {
    std::shuffle(order_.begin(), order_.end(), perm_rng_);
    cursor_ = 0;
}

bool BatchSampler::next_batch(TripletBatch& out, SamplingMode mode,
                              std::mt19937_64& rng, const Mat* img_embs,
                              const std::vector<std::vector<Vec>>* cap_embs) {
    if (cursor_ >= order_.size()) return false;
    std::size_t count = std::min(batch_size_, order_.size() - cursor_);
    if (count < 2) {
        // Tail batch of one subset cannot supply a negative; fold it into
        // nothing and end the epoch.
        cursor_ = order_.size();
        return false;
    }

    out = TripletBatch{};
    std::vector<std::size_t> members(order_.begin() + cursor_,
                                     order_.begin() + cursor_ + count);
    cursor_ += count;

    // Candidate negatives per anchor: (subset, caption index) pairs of the
    // other batch members.
    for (std::size_t i = 0; i < count; ++i) {
        const SubsetRecord& rec = dataset_.records[members[i]];
        std::uniform_int_distribution<std::size_t> cap_pick(
            0, rec.captions.size() - 1);
        std::size_t pos_cap = cap_pick(rng);

        std::size_t neg_subset = 0, neg_cap = 0;
        if (mode == SamplingMode::Random) {
            std::uniform_int_distribution<std::size_t> other(0, count - 2);
            std::size_t j = other(rng);
            if (j >= i) ++j;
            neg_subset = members[j];
            const auto& nrec = dataset_.records[neg_subset];
            std::uniform_int_distribution<std::size_t> ncap(
                0, nrec.captions.size() - 1);
            neg_cap = ncap(rng);
        } else {
            if (!img_embs || !cap_embs)
                throw std::invalid_argument(
                    "hardest mode needs current embeddings");
            Vec anchor = img_embs->row_vec(rec.subset_index);
            double best = std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < count; ++j) {
                if (j == i) continue;
                std::size_t cand = members[j];
                const auto& embs = (*cap_embs)[cand];
                for (std::size_t k = 0; k < embs.size(); ++k) {
                    double d = sq_euclidean(anchor, embs[k]);
                    if (d < best) {
                        best = d;
                        neg_subset = cand;
                        neg_cap = k;
                    }
                }
            }
        }

        out.anchor_img_feats.push_back(rec.image_feat);
        out.pos_captions.push_back(rec.captions[pos_cap]);
        out.neg_captions.push_back(dataset_.records[neg_subset].captions[neg_cap]);
        out.neg_img_feats.push_back(dataset_.records[neg_subset].image_feat);
        out.subset_labels.push_back(rec.subset_index);
        out.neg_subset_labels.push_back(neg_subset);
    }
    return true;
}

}  // namespace jem
