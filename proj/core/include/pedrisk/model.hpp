#pragma once

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "pedrisk/sequencer.hpp"
#include "pedrisk/vocab.hpp"

/// Recurrent obesity-risk model: summed feature embeddings per bin feed a
/// stacked LSTM, additive attention pools the top layer, and the pooled state
/// concatenated with demographic embeddings drives one head per horizon.
namespace pedrisk::model {

inline constexpr int kHorizons = 3;

struct ModelConfig {
    int vocab_size = 0;
    int embed_dim = 256;
    int lstm_hidden = 512;
    int lstm_layers = 2;
    int attention_dim = 128;
    int demo_embed_dim = 8;  // per demographic field, concatenated
    features::DemographicCardinalities demo_cardinalities;
    int head_hidden1 = 512;
    int head_hidden2 = 256;
    double leaky_relu_slope = 0.1;
    double dropout = 0.2;
    int horizons = kHorizons;
    double loss_lambda = 1.0;
    // The regression output is bmi_offset + bmi_scale * (linear unit).
    double bmi_offset = 18.0;
    double bmi_scale = 4.0;
    std::uint64_t seed = 0;

    /// Throws Error(InvalidConfig) when a dimension or rate is out of range.
    void validate() const;
    [[nodiscard]] int demo_width() const { return demo_embed_dim * static_cast<int>(features::kDemoFields); }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

/// All learnable tensors. Biases are single-column matrices so every block can
/// be visited uniformly by the optimizer, the serializer and gradient checks.
template <typename Scalar>
struct Parameters {
    struct Lstm {
        Mat<Scalar> w_input;      // 4H x in, gate order (input, forget, cell, output)
        Mat<Scalar> w_recurrent;  // 4H x H
        Mat<Scalar> bias;         // 4H x 1
    };
    struct Head {
        Mat<Scalar> w1, b1;        // head_hidden1 x (H + demo)
        Mat<Scalar> w2, b2;        // head_hidden2 x head_hidden1
        Mat<Scalar> w_cls, b_cls;  // 2 x head_hidden2; row 1 is "obese"
        Mat<Scalar> w_reg, b_reg;  // 1 x head_hidden2
    };

    Mat<Scalar> embedding;  // embed_dim x vocab_size (one column per input id)
    std::vector<Lstm> lstm;
    Mat<Scalar> attn_w;  // attention_dim x H
    Mat<Scalar> attn_v;  // attention_dim x 1
    std::vector<Mat<Scalar>> demo;  // per field: demo_embed_dim x cardinality
    std::vector<Head> heads;

    template <typename F>
    void for_each(F&& f) {
        f("embedding", embedding);
        for (std::size_t l = 0; l < lstm.size(); ++l) {
            const std::string p = "lstm" + std::to_string(l) + ".";
            f(p + "w_input", lstm[l].w_input);
            f(p + "w_recurrent", lstm[l].w_recurrent);
            f(p + "bias", lstm[l].bias);
        }
        f("attention.w", attn_w);
        f("attention.v", attn_v);
        for (std::size_t i = 0; i < demo.size(); ++i) f("demo" + std::to_string(i), demo[i]);
        for (std::size_t k = 0; k < heads.size(); ++k) {
            const std::string p = "head" + std::to_string(k) + ".";
            auto& h = heads[k];
            f(p + "w1", h.w1);
            f(p + "b1", h.b1);
            f(p + "w2", h.w2);
            f(p + "b2", h.b2);
            f(p + "w_cls", h.w_cls);
            f(p + "b_cls", h.b_cls);
            f(p + "w_reg", h.w_reg);
            f(p + "b_reg", h.b_reg);
        }
    }
    template <typename F>
    void for_each(F&& f) const {
        const_cast<Parameters*>(this)->for_each([&](const std::string& n, Mat<Scalar>& m) { f(n, std::as_const(m)); });
    }

    /// Same shapes as `like`, all zeros.
    static Parameters zeros_like(const Parameters& like);
    template <typename Other>
    [[nodiscard]] Parameters<Other> cast() const;
};

template <typename Scalar>
Parameters<Scalar> Parameters<Scalar>::zeros_like(const Parameters& like) {
    Parameters out = like;
    out.for_each([](const std::string&, Mat<Scalar>& m) { m.setZero(); });
    return out;
}

template <typename Scalar>
template <typename Other>
Parameters<Other> Parameters<Scalar>::cast() const {
    Parameters<Other> out;
    out.embedding = embedding.template cast<Other>();
    for (const auto& l : lstm) {
        out.lstm.push_back({l.w_input.template cast<Other>(), l.w_recurrent.template cast<Other>(),
                            l.bias.template cast<Other>()});
    }
    out.attn_w = attn_w.template cast<Other>();
    out.attn_v = attn_v.template cast<Other>();
    for (const auto& d : demo) out.demo.push_back(d.template cast<Other>());
    for (const auto& h : heads) {
        out.heads.push_back({h.w1.template cast<Other>(), h.b1.template cast<Other>(), h.w2.template cast<Other>(),
                             h.b2.template cast<Other>(), h.w_cls.template cast<Other>(),
                             h.b_cls.template cast<Other>(), h.w_reg.template cast<Other>(),
                             h.b_reg.template cast<Other>()});
    }
    return out;
}

/// Split-conformal half-widths for the BMI regression, per input window and horizon.
struct ConformalCalibration {
    double alpha = 0.1;
    std::array<double, kHorizons> pooled{};  // used when a window has no entry
    std::map<int, std::array<double, kHorizons>> by_window;

    [[nodiscard]] double half_width(int window_end_age_years, int horizon_index) const;
    friend bool operator==(const ConformalCalibration&, const ConformalCalibration&) = default;
};

void to_json(nlohmann::json& j, const ConformalCalibration& c);
void from_json(const nlohmann::json& j, ConformalCalibration& c);

template <typename Scalar>
struct BasicModelWeights {
    ModelConfig config;
    Parameters<Scalar> params;
    std::string registry_fingerprint;
    ConformalCalibration calibration;
    features::ScheduleConfig schedule = features::ScheduleConfig::monthly_bimonthly();  // binning used in training
    std::string model_version = "untrained";
};

using ModelWeights = BasicModelWeights<float>;

template <typename Scalar>
BasicModelWeights<Scalar> init_weights(const ModelConfig& config);

/// Deterministic given config.seed.
ModelWeights init(const ModelConfig& config);

struct HorizonOutput {
    double prob_obese = 0;
    double prob_not_obese = 0;
    double bmi_pred = 0;
};

struct ModelOutput {
    std::array<HorizonOutput, kHorizons> horizons{};
    std::vector<double> attention;     // one weight per bin, sums to 1
    std::map<int, double> salience;    // input id -> normalized salience
};

/// Single-example inference. `rng` is only consulted for dropout in train mode.
template <typename Scalar>
ModelOutput forward(const BasicModelWeights<Scalar>& weights, const features::TimeBinnedSequence& sequence,
                    const features::DemographicVector& demo, bool train_mode = false,
                    std::mt19937_64* rng = nullptr);

struct Targets {
    std::array<bool, kHorizons> obese{};
    std::array<double, kHorizons> bmi{};
    std::array<bool, kHorizons> mask{};  // true where ground truth exists
};

/// Mean over unmasked horizons of cross-entropy + lambda * squared BMI error.
double loss(const ModelOutput& output, const Targets& targets, double lambda);

struct Sample {
    const features::TimeBinnedSequence* sequence = nullptr;
    const features::DemographicVector* demo = nullptr;
    const Targets* targets = nullptr;
};

/// Exact loss gradient for a batch (mean of per-example losses).
template <typename Scalar>
struct GradientResult {
    double loss = 0;
    Parameters<Scalar> grads;
};

template <typename Scalar>
GradientResult<Scalar> compute_gradients(const BasicModelWeights<Scalar>& weights, std::span<const Sample> batch,
                                         bool train_mode = false, std::mt19937_64* rng = nullptr);

/// Batched inference with dropout off, in input order. Targets may be null.
template <typename Scalar>
std::vector<std::array<HorizonOutput, kHorizons>> predict_batch(const BasicModelWeights<Scalar>& weights,
                                                                 std::span<const Sample> samples);

/// Mean batch loss without gradients (dropout off).
template <typename Scalar>
double batch_loss(const BasicModelWeights<Scalar>& weights, std::span<const Sample> batch);

struct AdamState {
    Parameters<float> m;
    Parameters<float> v;
    std::int64_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double clip_norm = 5.0;

    static AdamState for_weights(const ModelWeights& weights);
};

struct StepMetrics {
    double loss = 0;
    double grad_norm = 0;  // before clipping
};

/// One Adam step on the batch loss. Throws Error(NonFiniteGradient) without
/// touching the weights when any gradient entry is NaN or infinite.
StepMetrics backward_and_step(ModelWeights& weights, std::span<const Sample> batch, AdamState& optimizer,
                              double learning_rate, std::mt19937_64& rng);

/// salience(id) = sum over bins t of attention_t * [id active in t] * ||embedding(id)||, normalized.
std::map<int, double> feature_salience(std::span<const double> attention, const features::TimeBinnedSequence& sequence,
                                       std::span<const double> embedding_norms);

struct RiskFactor {
    std::string label;
    Domain domain = Domain::condition;
    double score = 0;
};

/// Salience summed per registry feature, top-k, scores renormalized over the returned items.
std::vector<RiskFactor> rank_risk_factors(const ModelOutput& output, const features::TimeBinnedSequence& sequence,
                                          const vocab::FeatureRegistry& registry, std::size_t k);

inline constexpr char kMagic[4] = {'P', 'R', 'S', 'K'};
inline constexpr std::uint16_t kFormatVersion = 1;

void save(const ModelWeights& weights, const std::filesystem::path& path);
/// Validates shapes against the stored config; when `expected_fingerprint` is
/// non-empty it must equal the stored registry fingerprint.
ModelWeights load(const std::filesystem::path& path, const std::string& expected_fingerprint = {});

}  // namespace pedrisk::model
