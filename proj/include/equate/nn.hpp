#pragma once

// Data encoder, LSTM equation encoder, attentive fusion, evaluator head and
// transformer decoder, all sharing one named parameter store.

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "equate/autodiff.hpp"
#include "equate/data.hpp"
#include "equate/expr.hpp"
#include "json.hpp"

namespace equate::nn {

using ad::Tensor;
using nlohmann::json;

struct ModelConfig {
    int d_model = 64;
    int n_heads = 4;
    int n_encoder_layers = 2;
    int n_decoder_layers = 2;
    int ffn_hidden = 128;
    int evaluator_hidden = 128;
    int value_dim = 16;     // per-value numeric embedding width
    int token_dim = 32;     // equation-encoder token embedding width
    int lstm_hidden = 64;
    int memory_slots = 4;   // decoder cross-attention positions derived from E_f
    int max_len = 200;      // L
    bool multi_slot = true;
    std::string dtype = "float64";  // checkpoint storage: float64 | float32

    /// Throws Error("InvalidConfig") naming the offending field.
    void validate() const;
};

json to_json(const ModelConfig& c);
/// Missing keys keep their defaults; unknown keys are rejected.
ModelConfig model_config_from_json(const json& j);

/// Sign / 4-digit mantissa / exponent code of one real value:
/// |v| ~ mantissa * 10^exponent with mantissa in [1000, 9999] and exponent
/// clamped to [-8, 8]. Zero is (+, 0, -8).
struct NumericCode {
    int negative = 0;
    int mantissa = 0;
    int exponent = 0;
    bool operator==(const NumericCode&) const = default;
};
NumericCode encode_number(double v);

inline constexpr int kMinExponent = -8;
inline constexpr int kMaxExponent = 8;

enum class DecodeMode { Greedy, Sample };

struct Generation {
    expr::TokenSeq tokens;  // without BOS/EOS
    bool valid = false;     // passes the prefix scan and ended with EOS
    bool hit_eos = false;
};

struct EquationStates {
    Tensor states;   // [T x d] per-token projected states
    Tensor summary;  // [1 x d] final state projection, E_s
};

struct Fusion {
    Tensor fused;    // E_f [1 x d]
    Tensor weights;  // attention weights [1 x slots]
    Tensor context;  // [1 x d]
};

class Model {
public:
    Model(const ModelConfig& cfg, std::uint64_t init_seed);

    /// Deep copy with independent parameter storage.
    std::unique_ptr<Model> clone() const;

    const ModelConfig& config() const { return cfg_; }
    ad::ParamStore& params() { return store_; }
    const ad::ParamStore& params() const { return store_; }

    /// E_n for a subset: rows of (features, label), mean pooled. [1 x d]
    Tensor encode_data(const DataMatrix& x, std::span<const double> y) const;

    EquationStates encode_equation_states(const expr::TokenSeq& tokens) const;
    Tensor encode_equation(const expr::TokenSeq& tokens) const {
        return encode_equation_states(tokens).summary;
    }

    /// scores = Q(E_n) K(S)^T / sqrt(d), context = softmax(scores) V(S),
    /// E_f = E_n + context. S holds every per-token state when multi_slot is
    /// on, otherwise only E_s.
    Fusion attentive_fuse(const Tensor& e_n, const EquationStates& eq) const;
    /// Attention over an explicit key/value matrix [slots x d].
    Fusion attentive_fuse(const Tensor& e_n, const Tensor& key_values) const;
    /// Ablation switch: when off, attentive_fuse returns E_f = E_n.
    void set_equation_encoder_enabled(bool on) { eq_encoder_enabled_ = on; }
    bool equation_encoder_enabled() const { return eq_encoder_enabled_; }

    /// r-hat, shape [1 x 1].
    Tensor evaluate_fitness(const Tensor& e_f) const;
    /// Test mode: identity instead of tanh between the evaluator layers.
    void set_evaluator_linear(bool on) { evaluator_linear_ = on; }

    /// Cross-attention memory [memory_slots x d] derived from E_f.
    Tensor memory(const Tensor& e_f) const;
    /// Teacher-forced logits [n x vocab] for input ids (BOS first).
    Tensor decoder_logits(const Tensor& e_f, std::span<const int> input_ids) const;
    /// Teacher-forced reconstruction loss: summed cross entropy of
    /// target tokens followed by EOS.
    Tensor reconstruction_loss(const Tensor& e_f, const expr::TokenSeq& target) const;

    /// Next-token distribution after BOS + prefix.
    std::vector<double> decode_step(const Tensor& e_f, const expr::TokenSeq& prefix) const;

    /// Autoregressive decoding from BOS until EOS or max_len tokens. Also stops
    /// as soon as the sequence can no longer become valid (a special token,
    /// or a token after a complete expression); such outputs are flagged
    /// invalid exactly like any other malformed decode.
    Generation generate(const Tensor& e_f, DecodeMode mode, double temperature, Rng& rng,
                        std::size_t max_len = 0) const;

    /// Marks every parameter whose name matches one of the glob patterns as
    /// frozen. Throws Error("PatternMatchesNothing").
    void freeze(std::span<const std::string> patterns);
    void unfreeze_all();

    /// Hash of frozen parameters (or of any name-selected subset).
    std::uint64_t frozen_hash() const;

private:
    struct Impl;
    ModelConfig cfg_;
    ad::ParamStore store_;
    std::shared_ptr<const Impl> impl_;
    bool evaluator_linear_ = false;
    bool eq_encoder_enabled_ = true;
};

/// Default fine-tuning freeze policy: data encoder plus every decoder part
/// except the last transformer layer.
std::vector<std::string> default_freeze_patterns(const ModelConfig& cfg);

bool glob_match(std::string_view pattern, std::string_view name);

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// File layout: "EQCK", u32 version, u64 header length, JSON header
/// (config, manifest, freeze flags, seed, metadata), tensor segments.
std::string checkpoint_bytes(const Model& model, std::uint64_t seed, const json& metadata = json::object());
void save_checkpoint(const std::string& path, const Model& model, std::uint64_t seed,
                     const json& metadata = json::object());

struct LoadedCheckpoint {
    std::unique_ptr<Model> model;
    std::uint64_t seed = 0;
    json metadata;
};
/// Errors: BadMagic, VersionMismatch, CorruptSegment, Io.
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace equate::nn
