#include "pedrisk/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "pedrisk/error.hpp"

namespace pedrisk::model {

// ---------------------------------------------------------------------------
// Config and calibration
// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
    auto require = [](bool ok, const char* what) {
        if (!ok) throw Error(ErrorCode::InvalidConfig, what);
    };
    require(vocab_size > 0, "vocab_size must be > 0");
    require(embed_dim > 0, "embed_dim must be > 0");
    require(lstm_hidden > 0, "lstm_hidden must be > 0");
    require(lstm_layers > 0, "lstm_layers must be > 0");
    require(attention_dim > 0, "attention_dim must be > 0");
    require(demo_embed_dim > 0, "demo_embed_dim must be > 0");
    require(head_hidden1 > 0 && head_hidden2 > 0, "head dims must be > 0");
    require(leaky_relu_slope > 0 && leaky_relu_slope < 1, "leaky_relu_slope must be in (0, 1)");
    require(dropout >= 0 && dropout < 1, "dropout must be in [0, 1)");
    require(horizons == kHorizons, "horizons must be 3");
    require(loss_lambda >= 0, "loss_lambda must be >= 0");
    require(bmi_scale > 0, "bmi_scale must be > 0");
    for (int c : demo_cardinalities.sizes) require(c > 0, "demographic cardinalities must be > 0");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"vocab_size", c.vocab_size},
                       {"embed_dim", c.embed_dim},
                       {"lstm_hidden", c.lstm_hidden},
                       {"lstm_layers", c.lstm_layers},
                       {"attention_dim", c.attention_dim},
                       {"demo_embed_dim", c.demo_embed_dim},
                       {"demo_cardinalities", c.demo_cardinalities.sizes},
                       {"head_hidden1", c.head_hidden1},
                       {"head_hidden2", c.head_hidden2},
                       {"leaky_relu_slope", c.leaky_relu_slope},
                       {"dropout", c.dropout},
                       {"horizons", c.horizons},
                       {"loss_lambda", c.loss_lambda},
                       {"bmi_offset", c.bmi_offset},
                       {"bmi_scale", c.bmi_scale},
                       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    ModelConfig d;
    c.vocab_size = j.value("vocab_size", d.vocab_size);
    c.embed_dim = j.value("embed_dim", d.embed_dim);
    c.lstm_hidden = j.value("lstm_hidden", d.lstm_hidden);
    c.lstm_layers = j.value("lstm_layers", d.lstm_layers);
    c.attention_dim = j.value("attention_dim", d.attention_dim);
    c.demo_embed_dim = j.value("demo_embed_dim", d.demo_embed_dim);
    c.demo_cardinalities.sizes = j.value("demo_cardinalities", d.demo_cardinalities.sizes);
    c.head_hidden1 = j.value("head_hidden1", d.head_hidden1);
    c.head_hidden2 = j.value("head_hidden2", d.head_hidden2);
    c.leaky_relu_slope = j.value("leaky_relu_slope", d.leaky_relu_slope);
    c.dropout = j.value("dropout", d.dropout);
    c.horizons = j.value("horizons", d.horizons);
    c.loss_lambda = j.value("loss_lambda", d.loss_lambda);
    c.bmi_offset = j.value("bmi_offset", d.bmi_offset);
    c.bmi_scale = j.value("bmi_scale", d.bmi_scale);
    c.seed = j.value("seed", d.seed);
}

double ConformalCalibration::half_width(int window_end_age_years, int horizon_index) const {
    auto it = by_window.find(window_end_age_years);
    const auto& row = it == by_window.end() ? pooled : it->second;
    return row.at(static_cast<std::size_t>(horizon_index));
}

void to_json(nlohmann::json& j, const ConformalCalibration& c) {
    nlohmann::json windows = nlohmann::json::object();
    for (const auto& [w, hw] : c.by_window) windows[std::to_string(w)] = hw;
    j = nlohmann::json{{"alpha", c.alpha}, {"pooled", c.pooled}, {"by_window", windows}};
}

void from_json(const nlohmann::json& j, ConformalCalibration& c) {
    c.alpha = j.value("alpha", 0.1);
    c.pooled = j.value("pooled", std::array<double, kHorizons>{});
    c.by_window.clear();
    if (auto it = j.find("by_window"); it != j.end()) {
        for (const auto& [k, v] : it->items()) c.by_window[std::stoi(k)] = v.get<std::array<double, kHorizons>>();
    }
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

template <typename Scalar>
BasicModelWeights<Scalar> init_weights(const ModelConfig& config) {
    config.validate();
    std::mt19937_64 rng(config.seed);
    std::normal_distribution<double> small_normal(0.0, 0.1);

    auto normal = [&](int rows, int cols) {
        Mat<Scalar> m(rows, cols);
        for (Eigen::Index c = 0; c < m.cols(); ++c)
            for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = static_cast<Scalar>(small_normal(rng));
        return m;
    };
    auto uniform = [&](int rows, int cols, int fan_in) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        Mat<Scalar> m(rows, cols);
        for (Eigen::Index c = 0; c < m.cols(); ++c)
            for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = static_cast<Scalar>(dist(rng));
        return m;
    };
    auto zeros = [](int rows) { return Mat<Scalar>::Zero(rows, 1).eval(); };

    const int H = config.lstm_hidden;
    BasicModelWeights<Scalar> w;
    w.config = config;
    auto& p = w.params;
    p.embedding = normal(config.embed_dim, config.vocab_size);
    for (int l = 0; l < config.lstm_layers; ++l) {
        const int in = l == 0 ? config.embed_dim : H;
        typename Parameters<Scalar>::Lstm layer;
        layer.w_input = uniform(4 * H, in, in);
        layer.w_recurrent = uniform(4 * H, H, H);
        layer.bias = zeros(4 * H);
        layer.bias.middleRows(H, H).setOnes();  // forget gate
        p.lstm.push_back(std::move(layer));
    }
    p.attn_w = uniform(config.attention_dim, H, H);
    p.attn_v = uniform(config.attention_dim, 1, config.attention_dim);
    for (int card : config.demo_cardinalities.sizes) p.demo.push_back(normal(config.demo_embed_dim, card));
    const int z = H + config.demo_width();
    for (int k = 0; k < config.horizons; ++k) {
        typename Parameters<Scalar>::Head h;
        h.w1 = uniform(config.head_hidden1, z, z);
        h.b1 = zeros(config.head_hidden1);
        h.w2 = uniform(config.head_hidden2, config.head_hidden1, config.head_hidden1);
        h.b2 = zeros(config.head_hidden2);
        h.w_cls = uniform(2, config.head_hidden2, config.head_hidden2);
        h.b_cls = zeros(2);
        h.w_reg = uniform(1, config.head_hidden2, config.head_hidden2);
        h.b_reg = zeros(1);
        p.heads.push_back(std::move(h));
    }
    return w;
}

ModelWeights init(const ModelConfig& config) { return init_weights<float>(config); }

// ---------------------------------------------------------------------------
// Batched forward / backward. Columns of every activation matrix are laid out
// as t * B + b (bin-major), so one GEMM covers a whole layer for all bins.
// ---------------------------------------------------------------------------

namespace {

template <typename S>
struct LayerCache {
    Mat<S> input;      // in x TB
    Mat<S> gates;      // 4H x TB, post-activation
    Mat<S> cell;       // H x TB
    Mat<S> cell_tanh;  // H x TB
    Mat<S> hidden;     // H x TB
};

template <typename S>
struct HeadCache {
    Mat<S> pre1, act1, pre2, act2;
    Mat<S> drop_mask;  // empty when dropout is inactive
    Mat<S> act2d;
    Mat<S> probs;  // 2 x B
    Mat<S> reg;    // 1 x B, final BMI prediction
};

template <typename S>
struct BatchCache {
    int T = 0;
    int B = 0;
    std::vector<LayerCache<S>> layers;
    Mat<S> attn_u;  // A x TB
    Mat<S> alpha;   // T x B
    Mat<S> z;       // (H + demo) x B
    std::vector<HeadCache<S>> heads;
};

template <typename S>
Mat<S> sigmoid(const Mat<S>& x) {
    return (S(1) / (S(1) + (-x.array()).exp())).matrix();
}

template <typename S>
Mat<S> leaky(const Mat<S>& x, S slope) {
    return x.unaryExpr([slope](S v) { return v > S(0) ? v : slope * v; });
}

template <typename S>
Mat<S> leaky_grad(const Mat<S>& pre, const Mat<S>& upstream, S slope) {
    return upstream.binaryExpr(pre, [slope](S g, S v) { return v > S(0) ? g : slope * g; });
}

template <typename S>
BatchCache<S> run_forward(const BasicModelWeights<S>& w, std::span<const Sample* const> samples, bool train,
                          std::mt19937_64* rng) {
    const auto& cfg = w.config;
    const auto& p = w.params;
    BatchCache<S> c;
    c.B = static_cast<int>(samples.size());
    c.T = static_cast<int>(samples.front()->sequence->bins.size());
    const int B = c.B, T = c.T, H = cfg.lstm_hidden, TB = T * B;

    Mat<S> x = Mat<S>::Zero(cfg.embed_dim, TB);
    for (int b = 0; b < B; ++b) {
        const auto& bins = samples[b]->sequence->bins;
        if (static_cast<int>(bins.size()) != T) throw Error(ErrorCode::ShapeMismatch, "batch mixes sequence lengths");
        for (int t = 0; t < T; ++t) {
            for (int id : bins[t]) {
                if (id < 0 || id >= cfg.vocab_size) throw Error(ErrorCode::UnknownId, "input id " + std::to_string(id));
                x.col(t * B + b) += p.embedding.col(id);
            }
        }
    }

    Mat<S> layer_in = std::move(x);
    for (int l = 0; l < cfg.lstm_layers; ++l) {
        const auto& L = p.lstm[l];
        LayerCache<S> lc;
        lc.input = std::move(layer_in);
        lc.gates.noalias() = L.w_input * lc.input;
        lc.gates.colwise() += L.bias.col(0);
        lc.cell.resize(H, TB);
        lc.cell_tanh.resize(H, TB);
        lc.hidden.resize(H, TB);
        Mat<S> h_prev = Mat<S>::Zero(H, B);
        Mat<S> c_prev = Mat<S>::Zero(H, B);
        for (int t = 0; t < T; ++t) {
            auto g = lc.gates.middleCols(t * B, B);
            g.noalias() += L.w_recurrent * h_prev;
            g.topRows(2 * H) = sigmoid<S>(g.topRows(2 * H));
            g.middleRows(2 * H, H) = g.middleRows(2 * H, H).array().tanh().matrix();
            g.bottomRows(H) = sigmoid<S>(g.bottomRows(H));
            auto cell = lc.cell.middleCols(t * B, B);
            cell = g.middleRows(H, H).cwiseProduct(c_prev) + g.topRows(H).cwiseProduct(g.middleRows(2 * H, H));
            lc.cell_tanh.middleCols(t * B, B) = cell.array().tanh().matrix();
            lc.hidden.middleCols(t * B, B) = g.bottomRows(H).cwiseProduct(lc.cell_tanh.middleCols(t * B, B));
            h_prev = lc.hidden.middleCols(t * B, B);
            c_prev = cell;
        }
        layer_in = lc.hidden;
        c.layers.push_back(std::move(lc));
    }
    const Mat<S>& top = c.layers.back().hidden;

    c.attn_u = (p.attn_w * top).array().tanh().matrix();
    const Mat<S> scores = p.attn_v.transpose() * c.attn_u;  // 1 x TB
    c.alpha.resize(T, B);
    Mat<S> context = Mat<S>::Zero(H, B);
    for (int b = 0; b < B; ++b) {
        if (T == 0) continue;
        S mx = scores(0, b);
        for (int t = 1; t < T; ++t) mx = std::max(mx, scores(0, t * B + b));
        S sum = 0;
        for (int t = 0; t < T; ++t) {
            c.alpha(t, b) = std::exp(scores(0, t * B + b) - mx);
            sum += c.alpha(t, b);
        }
        for (int t = 0; t < T; ++t) {
            c.alpha(t, b) /= sum;
            context.col(b) += c.alpha(t, b) * top.col(t * B + b);
        }
    }

    const int De = cfg.demo_embed_dim;
    c.z.resize(H + cfg.demo_width(), B);
    c.z.topRows(H) = context;
    for (int b = 0; b < B; ++b) {
        const auto& demo = *samples[b]->demo;
        for (std::size_t f = 0; f < features::kDemoFields; ++f) {
            const int idx = demo.indices[f];
            if (idx < 0 || idx >= p.demo[f].cols()) throw Error(ErrorCode::ShapeMismatch, "demographic index out of range");
            c.z.block(H + static_cast<int>(f) * De, b, De, 1) = p.demo[f].col(idx);
        }
    }

    const S slope = static_cast<S>(cfg.leaky_relu_slope);
    const bool use_dropout = train && cfg.dropout > 0 && rng != nullptr;
    const double keep = 1.0 - cfg.dropout;
    for (const auto& head : p.heads) {
        HeadCache<S> hc;
        hc.pre1 = head.w1 * c.z;
        hc.pre1.colwise() += head.b1.col(0);
        hc.act1 = leaky<S>(hc.pre1, slope);
        hc.pre2 = head.w2 * hc.act1;
        hc.pre2.colwise() += head.b2.col(0);
        hc.act2 = leaky<S>(hc.pre2, slope);
        if (use_dropout) {
            std::bernoulli_distribution keep_unit(keep);
            hc.drop_mask.resize(hc.act2.rows(), hc.act2.cols());
            for (Eigen::Index j = 0; j < hc.drop_mask.cols(); ++j)
                for (Eigen::Index i = 0; i < hc.drop_mask.rows(); ++i)
                    hc.drop_mask(i, j) = keep_unit(*rng) ? static_cast<S>(1.0 / keep) : S(0);
            hc.act2d = hc.act2.cwiseProduct(hc.drop_mask);
        } else {
            hc.act2d = hc.act2;
        }
        Mat<S> logits = head.w_cls * hc.act2d;
        logits.colwise() += head.b_cls.col(0);
        hc.probs.resize(2, B);
        for (int b = 0; b < B; ++b) {
            const S mx = std::max(logits(0, b), logits(1, b));
            const S e0 = std::exp(logits(0, b) - mx), e1 = std::exp(logits(1, b) - mx);
            hc.probs(0, b) = e0 / (e0 + e1);
            hc.probs(1, b) = e1 / (e0 + e1);
        }
        Mat<S> lin = head.w_reg * hc.act2d;
        lin.colwise() += head.b_reg.col(0);
        hc.reg = (lin.array() * static_cast<S>(cfg.bmi_scale) + static_cast<S>(cfg.bmi_offset)).matrix();
        c.heads.push_back(std::move(hc));
    }
    return c;
}

constexpr double kProbFloor = 1e-12;

int unmasked(const Targets& t) { return static_cast<int>(std::count(t.mask.begin(), t.mask.end(), true)); }

/// Accumulates d(sum_b weight * loss_b)/d(params) into `g`; returns the unweighted loss sum.
template <typename S>
double run_backward(const BasicModelWeights<S>& w, const BatchCache<S>& c, std::span<const Sample* const> samples,
                    double example_weight, Parameters<S>& g) {
    const auto& cfg = w.config;
    const auto& p = w.params;
    const int B = c.B, T = c.T, H = cfg.lstm_hidden, TB = T * B;
    const S slope = static_cast<S>(cfg.leaky_relu_slope);
    const double lambda = cfg.loss_lambda;

    double loss_sum = 0;
    Mat<S> dz = Mat<S>::Zero(c.z.rows(), B);
    for (std::size_t k = 0; k < p.heads.size(); ++k) {
        const auto& head = p.heads[k];
        const auto& hc = c.heads[k];
        auto& gh = g.heads[k];
        Mat<S> dlogits = Mat<S>::Zero(2, B);
        Mat<S> dlin = Mat<S>::Zero(1, B);
        for (int b = 0; b < B; ++b) {
            const Targets& tg = *samples[b]->targets;
            if (!tg.mask[k]) continue;
            const double n = unmasked(tg);
            const double y = tg.obese[k] ? 1.0 : 0.0;
            const double p1 = hc.probs(1, b), p0 = hc.probs(0, b);
            const double err = static_cast<double>(hc.reg(0, b)) - tg.bmi[k];
            loss_sum += (-std::log(std::max(y > 0.5 ? p1 : p0, kProbFloor)) + lambda * err * err) / n;
            const double coef = example_weight / n;
            dlogits(0, b) = static_cast<S>(coef * (p0 - (1.0 - y)));
            dlogits(1, b) = static_cast<S>(coef * (p1 - y));
            dlin(0, b) = static_cast<S>(coef * lambda * 2.0 * err * cfg.bmi_scale);
        }
        gh.w_cls.noalias() += dlogits * hc.act2d.transpose();
        gh.b_cls += dlogits.rowwise().sum();
        gh.w_reg.noalias() += dlin * hc.act2d.transpose();
        gh.b_reg += dlin.rowwise().sum();
        Mat<S> da2 = head.w_cls.transpose() * dlogits;
        da2.noalias() += head.w_reg.transpose() * dlin;
        if (hc.drop_mask.size() != 0) da2 = da2.cwiseProduct(hc.drop_mask);
        const Mat<S> dp2 = leaky_grad<S>(hc.pre2, da2, slope);
        gh.w2.noalias() += dp2 * hc.act1.transpose();
        gh.b2 += dp2.rowwise().sum();
        const Mat<S> da1 = head.w2.transpose() * dp2;
        const Mat<S> dp1 = leaky_grad<S>(hc.pre1, da1, slope);
        gh.w1.noalias() += dp1 * c.z.transpose();
        gh.b1 += dp1.rowwise().sum();
        dz.noalias() += head.w1.transpose() * dp1;
    }

    const int De = cfg.demo_embed_dim;
    for (int b = 0; b < B; ++b) {
        const auto& demo = *samples[b]->demo;
        for (std::size_t f = 0; f < features::kDemoFields; ++f) {
            g.demo[f].col(demo.indices[f]) += dz.block(H + static_cast<int>(f) * De, b, De, 1);
        }
    }
    if (T == 0) return loss_sum;

    const Mat<S>& top = c.layers.back().hidden;
    Mat<S> dtop = Mat<S>::Zero(H, TB);
    Mat<S> dscore(1, TB);
    std::vector<S> dalpha(static_cast<std::size_t>(T));
    for (int b = 0; b < B; ++b) {
        const auto dctx = dz.col(b).head(H);
        S weighted = 0;
        for (int t = 0; t < T; ++t) {
            const int col = t * B + b;
            dtop.col(col) += c.alpha(t, b) * dctx;
            dalpha[t] = dctx.dot(top.col(col));
            weighted += c.alpha(t, b) * dalpha[t];
        }
        for (int t = 0; t < T; ++t) dscore(0, t * B + b) = c.alpha(t, b) * (dalpha[t] - weighted);
    }
    g.attn_v.noalias() += c.attn_u * dscore.transpose();
    const Mat<S> du = (p.attn_v * dscore).cwiseProduct((S(1) - c.attn_u.array().square()).matrix());
    g.attn_w.noalias() += du * top.transpose();
    dtop.noalias() += p.attn_w.transpose() * du;

    Mat<S> dhidden = std::move(dtop);
    for (int l = cfg.lstm_layers - 1; l >= 0; --l) {
        const auto& L = p.lstm[l];
        const auto& lc = c.layers[l];
        auto& gl = g.lstm[l];
        Mat<S> dgates(4 * H, TB);
        Mat<S> dh_next = Mat<S>::Zero(H, B);
        Mat<S> dc_next = Mat<S>::Zero(H, B);
        const Mat<S> zero = Mat<S>::Zero(H, B);
        for (int t = T - 1; t >= 0; --t) {
            const auto gates = lc.gates.middleCols(t * B, B);
            const auto i = gates.topRows(H).array();
            const auto f = gates.middleRows(H, H).array();
            const auto gg = gates.middleRows(2 * H, H).array();
            const auto o = gates.bottomRows(H).array();
            const auto tc = lc.cell_tanh.middleCols(t * B, B).array();
            const auto c_prev = t > 0 ? lc.cell.middleCols((t - 1) * B, B) : zero.middleCols(0, B);

            const Mat<S> dh = dhidden.middleCols(t * B, B) + dh_next;
            const auto dha = dh.array();
            const Mat<S> dc = (dha * o * (S(1) - tc.square())).matrix() + dc_next;
            const auto dca = dc.array();
            auto dg = dgates.middleCols(t * B, B);
            dg.topRows(H) = (dca * gg * i * (S(1) - i)).matrix();
            dg.middleRows(H, H) = (dca * c_prev.array() * f * (S(1) - f)).matrix();
            dg.middleRows(2 * H, H) = (dca * i * (S(1) - gg.square())).matrix();
            dg.bottomRows(H) = (dha * tc * o * (S(1) - o)).matrix();
            dc_next = (dca * f).matrix();
            dh_next.noalias() = L.w_recurrent.transpose() * dg;
        }
        gl.w_input.noalias() += dgates * lc.input.transpose();
        if (T > 1) gl.w_recurrent.noalias() += dgates.rightCols((T - 1) * B) * lc.hidden.leftCols((T - 1) * B).transpose();
        gl.bias += dgates.rowwise().sum();
        Mat<S> dinput = L.w_input.transpose() * dgates;
        if (l > 0) {
            dhidden = std::move(dinput);
            continue;
        }
        for (int b = 0; b < B; ++b) {
            const auto& bins = samples[b]->sequence->bins;
            for (int t = 0; t < T; ++t) {
                for (int id : bins[t]) g.embedding.col(id) += dinput.col(t * B + b);
            }
        }
    }
    return loss_sum;
}

/// Groups samples by sequence length, preserving first-appearance order.
std::vector<std::vector<const Sample*>> group_by_length(std::span<const Sample> batch) {
    std::vector<std::vector<const Sample*>> groups;
    std::map<std::size_t, std::size_t> slot;
    for (const auto& s : batch) {
        if (s.sequence == nullptr || s.demo == nullptr || s.targets == nullptr) {
            throw Error(ErrorCode::ShapeMismatch, "incomplete sample");
        }
        if (unmasked(*s.targets) == 0) throw Error(ErrorCode::AllMasked, "sample without any labelled horizon");
        const auto len = s.sequence->bins.size();
        auto [it, fresh] = slot.emplace(len, groups.size());
        if (fresh) groups.emplace_back();
        groups[it->second].push_back(&s);
    }
    return groups;
}

template <typename S>
void check_shapes(const BasicModelWeights<S>& w) {
    const auto& cfg = w.config;
    const auto& p = w.params;
    auto expect = [](const Mat<S>& m, Eigen::Index r, Eigen::Index c, const char* what) {
        if (m.rows() != r || m.cols() != c) throw Error(ErrorCode::ShapeMismatch, what);
    };
    const int H = cfg.lstm_hidden;
    expect(p.embedding, cfg.embed_dim, cfg.vocab_size, "embedding");
    if (static_cast<int>(p.lstm.size()) != cfg.lstm_layers) throw Error(ErrorCode::ShapeMismatch, "lstm layers");
    for (int l = 0; l < cfg.lstm_layers; ++l) {
        expect(p.lstm[l].w_input, 4 * H, l == 0 ? cfg.embed_dim : H, "lstm w_input");
        expect(p.lstm[l].w_recurrent, 4 * H, H, "lstm w_recurrent");
        expect(p.lstm[l].bias, 4 * H, 1, "lstm bias");
    }
    expect(p.attn_w, cfg.attention_dim, H, "attention w");
    expect(p.attn_v, cfg.attention_dim, 1, "attention v");
    if (p.demo.size() != features::kDemoFields) throw Error(ErrorCode::ShapeMismatch, "demo tables");
    for (std::size_t f = 0; f < features::kDemoFields; ++f) {
        expect(p.demo[f], cfg.demo_embed_dim, cfg.demo_cardinalities.sizes[f], "demo table");
    }
    if (static_cast<int>(p.heads.size()) != cfg.horizons) throw Error(ErrorCode::ShapeMismatch, "heads");
    for (const auto& h : p.heads) {
        expect(h.w1, cfg.head_hidden1, H + cfg.demo_width(), "head w1");
        expect(h.b1, cfg.head_hidden1, 1, "head b1");
        expect(h.w2, cfg.head_hidden2, cfg.head_hidden1, "head w2");
        expect(h.b2, cfg.head_hidden2, 1, "head b2");
        expect(h.w_cls, 2, cfg.head_hidden2, "head w_cls");
        expect(h.b_cls, 2, 1, "head b_cls");
        expect(h.w_reg, 1, cfg.head_hidden2, "head w_reg");
        expect(h.b_reg, 1, 1, "head b_reg");
    }
}

}  // namespace

template <typename Scalar>
ModelOutput forward(const BasicModelWeights<Scalar>& weights, const features::TimeBinnedSequence& sequence,
                    const features::DemographicVector& demo, bool train_mode, std::mt19937_64* rng) {
    check_shapes(weights);
    Targets none;
    const Sample sample{&sequence, &demo, &none};
    const Sample* ptr = &sample;
    const auto cache = run_forward<Scalar>(weights, std::span<const Sample* const>(&ptr, 1), train_mode, rng);

    ModelOutput out;
    for (int k = 0; k < kHorizons; ++k) {
        out.horizons[k].prob_not_obese = cache.heads[k].probs(0, 0);
        out.horizons[k].prob_obese = cache.heads[k].probs(1, 0);
        out.horizons[k].bmi_pred = cache.heads[k].reg(0, 0);
    }
    out.attention.resize(static_cast<std::size_t>(cache.T));
    for (int t = 0; t < cache.T; ++t) out.attention[t] = cache.alpha(t, 0);

    std::vector<double> norms(static_cast<std::size_t>(weights.config.vocab_size), 0.0);
    for (const auto& bin : sequence.bins)
        for (int id : bin) norms[id] = static_cast<double>(weights.params.embedding.col(id).norm());
    out.salience = feature_salience(out.attention, sequence, norms);
    return out;
}

double loss(const ModelOutput& output, const Targets& targets, double lambda) {
    const int n = unmasked(targets);
    if (n == 0) throw Error(ErrorCode::AllMasked, "every horizon is masked");
    double total = 0;
    for (int k = 0; k < kHorizons; ++k) {
        if (!targets.mask[k]) continue;
        const auto& h = output.horizons[k];
        const double p = targets.obese[k] ? h.prob_obese : h.prob_not_obese;
        const double err = h.bmi_pred - targets.bmi[k];
        total += -std::log(std::max(p, kProbFloor)) + lambda * err * err;
    }
    return total / n;
}

template <typename Scalar>
GradientResult<Scalar> compute_gradients(const BasicModelWeights<Scalar>& weights, std::span<const Sample> batch,
                                         bool train_mode, std::mt19937_64* rng) {
    if (batch.empty()) throw Error(ErrorCode::TooSmall, "empty batch");
    check_shapes(weights);
    GradientResult<Scalar> result;
    result.grads = Parameters<Scalar>::zeros_like(weights.params);
    const double weight = 1.0 / static_cast<double>(batch.size());
    double total = 0;
    for (const auto& group : group_by_length(batch)) {
        const std::span<const Sample* const> view(group.data(), group.size());
        const auto cache = run_forward<Scalar>(weights, view, train_mode, rng);
        total += run_backward<Scalar>(weights, cache, view, weight, result.grads);
    }
    result.loss = total * weight;
    return result;
}

template <typename Scalar>
double batch_loss(const BasicModelWeights<Scalar>& weights, std::span<const Sample> batch) {
    if (batch.empty()) throw Error(ErrorCode::TooSmall, "empty batch");
    check_shapes(weights);
    double total = 0;
    for (const auto& group : group_by_length(batch)) {
        const std::span<const Sample* const> view(group.data(), group.size());
        const auto cache = run_forward<Scalar>(weights, view, false, nullptr);
        for (std::size_t b = 0; b < group.size(); ++b) {
            const Targets& tg = *group[b]->targets;
            const double n = unmasked(tg);
            for (int k = 0; k < kHorizons; ++k) {
                if (!tg.mask[k]) continue;
                const double p = tg.obese[k] ? cache.heads[k].probs(1, b) : cache.heads[k].probs(0, b);
                const double err = static_cast<double>(cache.heads[k].reg(0, b)) - tg.bmi[k];
                total += (-std::log(std::max(p, kProbFloor)) + weights.config.loss_lambda * err * err) / n;
            }
        }
    }
    return total / static_cast<double>(batch.size());
}

template <typename Scalar>
std::vector<std::array<HorizonOutput, kHorizons>> predict_batch(const BasicModelWeights<Scalar>& weights,
                                                                 std::span<const Sample> samples) {
    check_shapes(weights);
    constexpr std::size_t kChunk = 256;
    std::vector<std::array<HorizonOutput, kHorizons>> out(samples.size());
    std::map<std::size_t, std::vector<std::size_t>> by_length;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (samples[i].sequence == nullptr || samples[i].demo == nullptr) {
            throw Error(ErrorCode::ShapeMismatch, "incomplete sample");
        }
        by_length[samples[i].sequence->bins.size()].push_back(i);
    }
    for (const auto& [len, idx] : by_length) {
        for (std::size_t start = 0; start < idx.size(); start += kChunk) {
            std::vector<const Sample*> group;
            for (std::size_t j = start; j < std::min(idx.size(), start + kChunk); ++j) group.push_back(&samples[idx[j]]);
            const auto cache = run_forward<Scalar>(weights, std::span<const Sample* const>(group.data(), group.size()),
                                                   false, nullptr);
            for (std::size_t b = 0; b < group.size(); ++b) {
                auto& o = out[idx[start + b]];
                for (int k = 0; k < kHorizons; ++k) {
                    o[k].prob_not_obese = cache.heads[k].probs(0, b);
                    o[k].prob_obese = cache.heads[k].probs(1, b);
                    o[k].bmi_pred = cache.heads[k].reg(0, b);
                }
            }
        }
    }
    return out;
}

AdamState AdamState::for_weights(const ModelWeights& weights) {
    AdamState s;
    s.m = Parameters<float>::zeros_like(weights.params);
    s.v = Parameters<float>::zeros_like(weights.params);
    return s;
}

StepMetrics backward_and_step(ModelWeights& weights, std::span<const Sample> batch, AdamState& opt,
                              double learning_rate, std::mt19937_64& rng) {
    auto result = compute_gradients<float>(weights, batch, true, &rng);
    double sq = 0;
    bool finite = std::isfinite(result.loss);
    result.grads.for_each([&](const std::string&, const Mat<float>& g) {
        if (!g.allFinite()) finite = false;
        sq += static_cast<double>(g.template cast<double>().squaredNorm());
    });
    if (!finite || !std::isfinite(sq)) throw Error(ErrorCode::NonFiniteGradient, "non-finite loss or gradient");
    StepMetrics metrics{result.loss, std::sqrt(sq)};
    const double scale = metrics.grad_norm > opt.clip_norm ? opt.clip_norm / metrics.grad_norm : 1.0;

    ++opt.step;
    const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.step));
    const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.step));
    const float b1 = static_cast<float>(opt.beta1), b2 = static_cast<float>(opt.beta2);
    const float step_size = static_cast<float>(learning_rate / bc1);
    const float inv_bc2 = static_cast<float>(1.0 / bc2);
    const float eps = static_cast<float>(opt.epsilon);
    const float fscale = static_cast<float>(scale);

    std::vector<Mat<float>*> params, grads, ms, vs;
    weights.params.for_each([&](const std::string&, Mat<float>& m) { params.push_back(&m); });
    result.grads.for_each([&](const std::string&, Mat<float>& m) { grads.push_back(&m); });
    opt.m.for_each([&](const std::string&, Mat<float>& m) { ms.push_back(&m); });
    opt.v.for_each([&](const std::string&, Mat<float>& m) { vs.push_back(&m); });
    if (learning_rate == 0.0) return metrics;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto g = (grads[i]->array() * fscale).eval();
        ms[i]->array() = b1 * ms[i]->array() + (1.0f - b1) * g;
        vs[i]->array() = b2 * vs[i]->array() + (1.0f - b2) * g.square();
        params[i]->array() -= step_size * ms[i]->array() / ((vs[i]->array() * inv_bc2).sqrt() + eps);
    }
    return metrics;
}

std::map<int, double> feature_salience(std::span<const double> attention, const features::TimeBinnedSequence& sequence,
                                       std::span<const double> embedding_norms) {
    std::map<int, double> sal;
    for (std::size_t t = 0; t < sequence.bins.size() && t < attention.size(); ++t) {
        for (int id : sequence.bins[t]) {
            const double norm = static_cast<std::size_t>(id) < embedding_norms.size() ? embedding_norms[id] : 0.0;
            sal[id] += attention[t] * norm;
        }
    }
    double total = 0;
    for (const auto& [id, v] : sal) total += v;
    if (total > 0) {
        for (auto& [id, v] : sal) v /= total;
    }
    return sal;
}

std::vector<RiskFactor> rank_risk_factors(const ModelOutput& output, const features::TimeBinnedSequence& sequence,
                                          const vocab::FeatureRegistry& registry, std::size_t k) {
    std::map<int, double> by_feature;
    for (const auto& bin : sequence.bins) {
        for (int id : bin) by_feature.emplace(registry.feature_of_input(id).first, 0.0);
    }
    for (const auto& [id, score] : output.salience) by_feature[registry.feature_of_input(id).first] += score;

    std::vector<std::pair<int, double>> ranked(by_feature.begin(), by_feature.end());
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    if (ranked.size() > k) ranked.resize(k);
    double total = 0;
    for (const auto& [f, s] : ranked) total += s;

    std::vector<RiskFactor> out;
    for (const auto& [f, s] : ranked) {
        const auto& spec = registry.feature(f);
        out.push_back({spec.label, spec.domain, total > 0 ? s / total : 1.0 / static_cast<double>(ranked.size())});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Serialization: "PRSK", u16 version, u32 header length + JSON header
// (config, fingerprint, calibration, tensor directory), then raw float32
// little-endian tensor data in directory order.
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void put_le(std::string& out, T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

template <typename T>
T get_le(const std::string& in, std::size_t& pos) {
    if (pos + sizeof(T) > in.size()) throw Error(ErrorCode::Corrupt, "truncated weight file");
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
    pos += sizeof(T);
    return static_cast<T>(v);
}

}  // namespace

void save(const ModelWeights& weights, const std::filesystem::path& path) {
    check_shapes(weights);
    nlohmann::json header;
    header["config"] = weights.config;
    header["registry_fingerprint"] = weights.registry_fingerprint;
    header["calibration"] = weights.calibration;
    header["model_version"] = weights.model_version;
    header["schedule"] = weights.schedule;
    nlohmann::json dir = nlohmann::json::array();
    std::string data;
    weights.params.for_each([&](const std::string& name, const Mat<float>& m) {
        dir.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
        for (Eigen::Index i = 0; i < m.size(); ++i) put_le<std::uint32_t>(data, std::bit_cast<std::uint32_t>(m.data()[i]));
    });
    header["tensors"] = dir;
    const std::string header_text = header.dump();

    std::string out(kMagic, sizeof kMagic);
    put_le<std::uint16_t>(out, kFormatVersion);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(header_text.size()));
    out += header_text;
    put_le<std::uint64_t>(out, data.size());
    out += data;

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error(ErrorCode::Io, "cannot write " + path.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw Error(ErrorCode::Io, "write failed for " + path.string());
}

ModelWeights load(const std::filesystem::path& path, const std::string& expected_fingerprint) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error(ErrorCode::Io, "cannot open " + path.string());
    const std::string in((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (in.size() < sizeof kMagic || std::memcmp(in.data(), kMagic, sizeof kMagic) != 0) {
        throw Error(ErrorCode::Corrupt, "not a PRSK weight file");
    }
    std::size_t pos = sizeof kMagic;
    const auto version = get_le<std::uint16_t>(in, pos);
    if (version != kFormatVersion) {
        throw Error(ErrorCode::VersionMismatch, "format version " + std::to_string(version) + ", expected " +
                                                    std::to_string(kFormatVersion));
    }
    const auto header_len = get_le<std::uint32_t>(in, pos);
    if (pos + header_len > in.size()) throw Error(ErrorCode::Corrupt, "truncated header");
    const auto header = nlohmann::json::parse(in.begin() + static_cast<std::ptrdiff_t>(pos),
                                              in.begin() + static_cast<std::ptrdiff_t>(pos + header_len), nullptr, false);
    pos += header_len;
    if (header.is_discarded() || !header.is_object()) throw Error(ErrorCode::Corrupt, "unreadable header");

    ModelWeights w;
    try {
        w.config = header.at("config").get<ModelConfig>();
        w.registry_fingerprint = header.at("registry_fingerprint").get<std::string>();
        w.calibration = header.at("calibration").get<ConformalCalibration>();
        w.model_version = header.value("model_version", std::string("unknown"));
        w.schedule = header.value("schedule", features::ScheduleConfig::monthly_bimonthly());
        w.config.validate();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::Corrupt, std::string("bad header: ") + e.what());
    }
    if (!expected_fingerprint.empty() && expected_fingerprint != w.registry_fingerprint) {
        throw Error(ErrorCode::FingerprintMismatch, "weights were trained with registry " + w.registry_fingerprint);
    }

    // Materialize shapes from the config, then fill in directory order.
    w.params = init_weights<float>(w.config).params;
    const auto data_len = get_le<std::uint64_t>(in, pos);
    if (pos + data_len != in.size()) throw Error(ErrorCode::Corrupt, "tensor data length mismatch");
    const auto& dir = header.at("tensors");
    std::size_t index = 0;
    w.params.for_each([&](const std::string& name, Mat<float>& m) {
        if (index >= dir.size()) throw Error(ErrorCode::Corrupt, "tensor directory too short");
        const auto& d = dir[index++];
        if (d.value("name", std::string{}) != name || d.value("rows", -1L) != m.rows() || d.value("cols", -1L) != m.cols()) {
            throw Error(ErrorCode::ShapeMismatch, "tensor " + name + " does not match the stored config");
        }
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = std::bit_cast<float>(get_le<std::uint32_t>(in, pos));
    });
    if (index != dir.size() || pos != in.size()) throw Error(ErrorCode::Corrupt, "trailing tensor data");
    return w;
}

template BasicModelWeights<float> init_weights<float>(const ModelConfig&);
template BasicModelWeights<double> init_weights<double>(const ModelConfig&);
template ModelOutput forward<float>(const BasicModelWeights<float>&, const features::TimeBinnedSequence&,
                                    const features::DemographicVector&, bool, std::mt19937_64*);
template ModelOutput forward<double>(const BasicModelWeights<double>&, const features::TimeBinnedSequence&,
                                     const features::DemographicVector&, bool, std::mt19937_64*);
template GradientResult<float> compute_gradients<float>(const BasicModelWeights<float>&, std::span<const Sample>, bool,
                                                        std::mt19937_64*);
template GradientResult<double> compute_gradients<double>(const BasicModelWeights<double>&, std::span<const Sample>,
                                                          bool, std::mt19937_64*);
template double batch_loss<float>(const BasicModelWeights<float>&, std::span<const Sample>);
template double batch_loss<double>(const BasicModelWeights<double>&, std::span<const Sample>);

template std::vector<std::array<HorizonOutput, kHorizons>> predict_batch<float>(const BasicModelWeights<float>&,
                                                                                   std::span<const Sample>);
template std::vector<std::array<HorizonOutput, kHorizons>> predict_batch<double>(const BasicModelWeights<double>&,
                                                                                    std::span<const Sample>);

}  // namespace pedrisk::model
