#pragma once

#include <cstdint>
#include <filesystem>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "itupred/cohort.h"
#include "itupred/decision.h"
#include "itupred/rng.h"

namespace itupred {

// ---------------------------------------------------------------------------
// Note encoding

/// Per-dimension log1p standardization over the selected vocabulary columns.
/// Statistics come from training notes only.
struct EncoderStats {
  std::vector<std::size_t> columns;
  std::vector<double> mean;
  std::vector<double> std;  // zero-variance dimensions are stored as 1

  std::size_t dim() const { return columns.size(); }
};

/// Mean/std of log(1 + count) over every note of `train`. Throws DataError
/// when there are no notes or a column is out of range.
EncoderStats fit_encoder(const std::vector<PatientSequence>& train,
                         const std::vector<std::size_t>& columns);

/// One row per note, order preserved. Throws DataError on an empty sequence
/// or a vocabulary size smaller than the encoder expects.
Eigen::MatrixXd encode_sequence(const PatientSequence& sequence, const EncoderStats& stats);

// ---------------------------------------------------------------------------
// LSTM

enum class Precision { High, Standard };  // double / float arithmetic

struct LstmConfig {
  std::size_t epochs = 15;
  std::size_t hidden_size = 128;
  std::size_t batch_size = 4;
  std::size_t num_layers = 1;
  double dropout = 0.5;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  Precision precision = Precision::Standard;
};

/// Throws ConfigError on hidden_size/batch_size/num_layers out of range or
/// dropout outside [0,1).
void validate_lstm_config(const LstmConfig& config);

/// Single-layer LSTM with gates stacked [input, forget, cell, output]:
/// z_t = W [x_t; h_{t-1}] + b, final h_T -> sigmoid(w_out . h_T + b_out).
struct LstmModel {
  LstmConfig config;
  EncoderStats encoder;       // empty when trained on pre-encoded input
  std::size_t input_size = 0;
  Eigen::MatrixXd W;          // 4H x (K + H)
  Eigen::VectorXd b;          // 4H
  Eigen::VectorXd w_out;      // H
  double b_out = 0.0;
  std::vector<double> epoch_loss;

  std::size_t hidden_size() const { return static_cast<std::size_t>(w_out.size()); }
};

/// U(-1/sqrt(H), 1/sqrt(H)) weights, zero biases except forget-gate +1.
LstmModel init_lstm(std::size_t input_size, const LstmConfig& config);

/// Positive-class probability for one encoded sequence (rows = notes).
/// With `dropout_active` an inverted dropout mask drawn from `rng` is applied
/// to the final hidden state. Throws NumericError on non-finite parameters or
/// input and DataError on an empty sequence or width mismatch.
double forward(const LstmModel& model, const Eigen::MatrixXd& encoded,
               bool dropout_active = false, Rng* rng = nullptr);

/// Mini-batch SGD on mean binary cross-entropy. Each epoch shuffles, then
/// stable-sorts by length so batches hold similar lengths, then shuffles the
/// batch order. Gradients are per-sample BPTT averaged over the batch.
/// Throws DataError on an empty or single-class training set.
LstmModel fit_lstm(const std::vector<Eigen::MatrixXd>& encoded, const std::vector<int>& labels,
                   const LstmConfig& config);

/// Fits the encoder on `train` and trains on its encodings.
LstmModel train_sequence_model(const std::vector<PatientSequence>& train,
                               const std::vector<std::size_t>& columns,
                               const LstmConfig& config);

/// Encodes with the model's encoder and returns one probability per sequence.
std::vector<double> predict_sequences(const LstmModel& model,
                                      const std::vector<PatientSequence>& sequences);

/// Loss of one sample without dropout.
double sample_loss(const LstmModel& model, const Eigen::MatrixXd& encoded, int label);

/// Max over every parameter of |g_a - g_n| / max(|g_a|, |g_n|, 1e-12), with
/// g_n from central differences. Always computed in double precision.
double gradient_check(const LstmModel& model, const Eigen::MatrixXd& encoded, int label,
                      double epsilon = 1e-5);

// ---------------------------------------------------------------------------
// Serialization

inline constexpr int kLstmFormatVersion = 1;

void save_lstm(const LstmModel& model, const std::filesystem::path& path,
               std::string_view lineage = {});
/// Throws ParseError on malformed files or unknown versions.
LstmModel load_lstm(const std::filesystem::path& path);

}  // namespace itupred
