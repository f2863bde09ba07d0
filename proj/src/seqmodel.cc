#include "itupred/seqmodel.h"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "itupred/error.h"
#include "itupred/io.h"
#include "json.hpp"

namespace itupred {

// ---------------------------------------------------------------------------
// Note encoding

EncoderStats fit_encoder(const std::vector<PatientSequence>& train,
                         const std::vector<std::size_t>& columns) {
  EncoderStats stats;
  stats.columns = columns;
  const std::size_t k = columns.size();
  std::vector<double> sum(k, 0.0), sum_sq(k, 0.0);
  std::size_t notes = 0;
  for (const auto& s : train)
    for (const auto& counts : s.notes) {
      ++notes;
      for (std::size_t j = 0; j < k; ++j) {
        if (columns[j] >= counts.size())
          throw DataError(fmt::format("fit_encoder: column {} out of range", columns[j]));
        const double v = std::log1p(static_cast<double>(counts[columns[j]]));
        sum[j] += v;
        sum_sq[j] += v * v;
      }
    }
  if (notes == 0) throw DataError("fit_encoder: training set has no notes");
  stats.mean.resize(k);
  stats.std.resize(k);
  const double n = static_cast<double>(notes);
  for (std::size_t j = 0; j < k; ++j) {
    stats.mean[j] = sum[j] / n;
    const double var = std::max(0.0, sum_sq[j] / n - stats.mean[j] * stats.mean[j]);
    stats.std[j] = var > 1e-12 ? std::sqrt(var) : 1.0;
  }
  return stats;
}

Eigen::MatrixXd encode_sequence(const PatientSequence& sequence, const EncoderStats& stats) {
  if (sequence.notes.empty())
    throw DataError(fmt::format("encode_sequence: patient {} has no notes", sequence.patient_id));
  const auto T = static_cast<Eigen::Index>(sequence.notes.size());
  const auto K = static_cast<Eigen::Index>(stats.dim());
  Eigen::MatrixXd out(T, K);
  for (Eigen::Index t = 0; t < T; ++t) {
    const auto& counts = sequence.notes[static_cast<std::size_t>(t)];
    for (Eigen::Index j = 0; j < K; ++j) {
      const std::size_t col = stats.columns[static_cast<std::size_t>(j)];
      if (col >= counts.size())
        throw DataError(fmt::format("encode_sequence: column {} out of range", col));
      out(t, j) = (std::log1p(static_cast<double>(counts[col])) - stats.mean[j]) / stats.std[j];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Network arithmetic, templated on the scalar type

void validate_lstm_config(const LstmConfig& c) {
  if (c.hidden_size < 1) throw ConfigError("lstm.hidden_size must be >= 1");
  if (c.batch_size < 1) throw ConfigError("lstm.batch_size must be >= 1");
  if (c.num_layers != 1) throw ConfigError("lstm.num_layers must be 1");
  if (!(c.dropout >= 0.0 && c.dropout < 1.0)) throw ConfigError("lstm.dropout must be in [0,1)");
  if (!(c.learning_rate >= 0.0) || !std::isfinite(c.learning_rate))
    throw ConfigError("lstm.learning_rate must be finite and >= 0");
}

namespace {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

template <typename S>
S sigmoid(S x) {
  return x >= S(0) ? S(1) / (S(1) + std::exp(-x)) : std::exp(x) / (S(1) + std::exp(x));
}

template <typename S>
struct Params {
  Mat<S> W;
  Vec<S> b;
  Vec<S> v;
  S c = S(0);

  void zero_like(const Params& o) {
    W = Mat<S>::Zero(o.W.rows(), o.W.cols());
    b = Vec<S>::Zero(o.b.size());
    v = Vec<S>::Zero(o.v.size());
    c = S(0);
  }
};

template <typename S>
Params<S> params_from(const LstmModel& m) {
  return {m.W.cast<S>(), m.b.cast<S>(), m.w_out.cast<S>(), static_cast<S>(m.b_out)};
}

template <typename S>
void params_to(const Params<S>& p, LstmModel& m) {
  m.W = p.W.template cast<double>();
  m.b = p.b.template cast<double>();
  m.w_out = p.v.template cast<double>();
  m.b_out = static_cast<double>(p.c);
}

// Activations kept for the backward pass.
template <typename S>
struct Trace {
  std::vector<Vec<S>> xh;  // [x_t; h_{t-1}]
  std::vector<Vec<S>> gates;  // activated [i, f, g, o]
  std::vector<Vec<S>> c;      // c_0 .. c_T
  Vec<S> h_last;
  Vec<S> mask;                // dropout multipliers (ones when inactive)
  S p = S(0);
};

template <typename S>
S run_forward(const Params<S>& P, const Mat<S>& X, const Vec<S>* mask, Trace<S>* trace) {
  const Eigen::Index H = P.v.size(), K = X.cols(), T = X.rows();
  Vec<S> h = Vec<S>::Zero(H), c = Vec<S>::Zero(H), xh(K + H), z(4 * H);
  if (trace) {
    trace->xh.clear();
    trace->gates.clear();
    trace->c.assign(1, c);
  }
  for (Eigen::Index t = 0; t < T; ++t) {
    xh.head(K) = X.row(t).transpose();
    xh.tail(H) = h;
    z.noalias() = P.W * xh;
    z += P.b;
    for (Eigen::Index k = 0; k < H; ++k) {
      z[k] = sigmoid(z[k]);
      z[H + k] = sigmoid(z[H + k]);
      z[2 * H + k] = std::tanh(z[2 * H + k]);
      z[3 * H + k] = sigmoid(z[3 * H + k]);
    }
    c = z.segment(H, H).cwiseProduct(c) + z.head(H).cwiseProduct(z.segment(2 * H, H));
    h = z.tail(H).cwiseProduct(c.array().tanh().matrix());
    if (trace) {
      trace->xh.push_back(xh);
      trace->gates.push_back(z);
      trace->c.push_back(c);
    }
  }
  const Vec<S> hd = mask ? Vec<S>(h.cwiseProduct(*mask)) : h;
  const S p = sigmoid(P.v.dot(hd) + P.c);
  if (trace) {
    trace->h_last = h;
    trace->mask = mask ? *mask : Vec<S>::Ones(H);
    trace->p = p;
  }
  return p;
}

template <typename S>
S bce(S p, int y) {
  const S eps = std::numeric_limits<S>::min();
  return y ? -std::log(std::max(p, eps)) : -std::log(std::max(S(1) - p, eps));
}

// Accumulates d(loss)/d(params) into G.
template <typename S>
void run_backward(const Params<S>& P, const Trace<S>& tr, int y, Params<S>& G) {
  const Eigen::Index H = P.v.size();
  const auto T = tr.gates.size();
  const S dlogit = tr.p - static_cast<S>(y);
  const Vec<S> hd = tr.h_last.cwiseProduct(tr.mask);
  G.v += dlogit * hd;
  G.c += dlogit;
  Vec<S> dh = dlogit * P.v.cwiseProduct(tr.mask);
  Vec<S> dc = Vec<S>::Zero(H), dz(4 * H), dxh;
  for (std::size_t t = T; t-- > 0;) {
    const Vec<S>& g = tr.gates[t];
    const auto gi = g.head(H), gf = g.segment(H, H), gg = g.segment(2 * H, H), go = g.tail(H);
    const Vec<S> tc = tr.c[t + 1].array().tanh().matrix();
    dc += dh.cwiseProduct(go).cwiseProduct((S(1) - tc.array().square()).matrix());
    dz.head(H) = dc.cwiseProduct(gg).cwiseProduct(gi.cwiseProduct((S(1) - gi.array()).matrix()));
    dz.segment(H, H) =
        dc.cwiseProduct(tr.c[t]).cwiseProduct(gf.cwiseProduct((S(1) - gf.array()).matrix()));
    dz.segment(2 * H, H) = dc.cwiseProduct(gi).cwiseProduct((S(1) - gg.array().square()).matrix());
    dz.tail(H) = dh.cwiseProduct(tc).cwiseProduct(go.cwiseProduct((S(1) - go.array()).matrix()));
    G.W.noalias() += dz * tr.xh[t].transpose();
    G.b += dz;
    dxh.noalias() = P.W.transpose() * dz;
    dh = dxh.tail(H);
    dc = dc.cwiseProduct(gf);
  }
}

template <typename S>
Vec<S> dropout_mask(Eigen::Index H, double rate, Rng& rng) {
  Vec<S> m(H);
  std::bernoulli_distribution keep(1.0 - rate);
  const S scale = static_cast<S>(1.0 / (1.0 - rate));
  for (Eigen::Index k = 0; k < H; ++k) m[k] = keep(rng) ? scale : S(0);
  return m;
}

void check_finite(const LstmModel& m) {
  if (!m.W.allFinite() || !m.b.allFinite() || !m.w_out.allFinite() || !std::isfinite(m.b_out))
    throw NumericError("LSTM parameters are not finite");
}

void check_input(const LstmModel& m, const Eigen::MatrixXd& X) {
  if (X.rows() == 0) throw DataError("LSTM input sequence is empty");
  if (static_cast<std::size_t>(X.cols()) != m.input_size)
    throw DataError(fmt::format("LSTM input width {} does not match model input size {}",
                                X.cols(), m.input_size));
  if (!X.allFinite()) throw NumericError("LSTM input is not finite");
}

template <typename S>
void train(LstmModel& model, const std::vector<Eigen::MatrixXd>& encoded,
           const std::vector<int>& labels) {
  const LstmConfig& cfg = model.config;
  Params<S> P = params_from<S>(model);
  Params<S> G;
  G.zero_like(P);
  std::vector<Mat<S>> X;
  X.reserve(encoded.size());
  for (const auto& e : encoded) X.push_back(e.cast<S>());

  const Eigen::Index H = P.v.size();
  const S lr = static_cast<S>(cfg.learning_rate);
  Rng rng = make_rng(cfg.seed, 1);
  Trace<S> trace;
  std::vector<std::size_t> order(encoded.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return X[a].rows() < X[b].rows();
    });
    std::vector<std::pair<std::size_t, std::size_t>> batches;
    for (std::size_t s = 0; s < order.size(); s += cfg.batch_size)
      batches.emplace_back(s, std::min(order.size(), s + cfg.batch_size));
    std::shuffle(batches.begin(), batches.end(), rng);

    double loss_sum = 0.0;
    for (const auto& [begin, end] : batches) {
      G.W.setZero();
      G.b.setZero();
      G.v.setZero();
      G.c = S(0);
      for (std::size_t k = begin; k < end; ++k) {
        const std::size_t i = order[k];
        Vec<S> mask = cfg.dropout > 0.0 ? dropout_mask<S>(H, cfg.dropout, rng) : Vec<S>::Ones(H);
        run_forward(P, X[i], &mask, &trace);
        const S loss = bce(trace.p, labels[i]);
        if (!std::isfinite(static_cast<double>(loss)))
          throw NumericError(fmt::format("non-finite loss in epoch {}", epoch + 1));
        loss_sum += static_cast<double>(loss);
        run_backward(P, trace, labels[i], G);
      }
      const S step = lr / static_cast<S>(end - begin);
      P.W -= step * G.W;
      P.b -= step * G.b;
      P.v -= step * G.v;
      P.c -= step * G.c;
    }
    model.epoch_loss.push_back(loss_sum / static_cast<double>(order.size()));
  }
  params_to(P, model);
  check_finite(model);
}

}  // namespace

LstmModel init_lstm(std::size_t input_size, const LstmConfig& config) {
  validate_lstm_config(config);
  LstmModel m;
  m.config = config;
  m.input_size = input_size;
  const auto H = static_cast<Eigen::Index>(config.hidden_size);
  const auto K = static_cast<Eigen::Index>(input_size);
  const double r = 1.0 / std::sqrt(static_cast<double>(config.hidden_size));
  Rng rng = make_rng(config.seed, 0);
  std::uniform_real_distribution<double> u(-r, r);
  m.W.resize(4 * H, K + H);
  for (Eigen::Index j = 0; j < m.W.cols(); ++j)
    for (Eigen::Index i = 0; i < m.W.rows(); ++i) m.W(i, j) = u(rng);
  m.b = Eigen::VectorXd::Zero(4 * H);
  m.b.segment(H, H).setOnes();
  m.w_out.resize(H);
  for (Eigen::Index k = 0; k < H; ++k) m.w_out[k] = u(rng);
  m.b_out = 0.0;
  return m;
}

double forward(const LstmModel& model, const Eigen::MatrixXd& encoded, bool dropout_active,
               Rng* rng) {
  check_finite(model);
  check_input(model, encoded);
  const Params<double> P = params_from<double>(model);
  if (dropout_active && model.config.dropout > 0.0) {
    if (!rng) throw DataError("forward: dropout requires a random stream");
    const auto mask = dropout_mask<double>(P.v.size(), model.config.dropout, *rng);
    return run_forward<double>(P, encoded, &mask, nullptr);
  }
  return run_forward<double>(P, encoded, nullptr, nullptr);
}

LstmModel fit_lstm(const std::vector<Eigen::MatrixXd>& encoded, const std::vector<int>& labels,
                   const LstmConfig& config) {
  if (encoded.empty()) throw DataError("fit_lstm: empty training set");
  if (encoded.size() != labels.size())
    throw DataError("fit_lstm: sequences and labels differ in length");
  std::size_t pos = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw DataError("fit_lstm: labels must be 0/1");
    pos += static_cast<std::size_t>(y);
  }
  if (pos == 0 || pos == labels.size()) throw DataError("fit_lstm: labels contain a single class");
  LstmModel model = init_lstm(static_cast<std::size_t>(encoded.front().cols()), config);
  for (const auto& e : encoded) check_input(model, e);
  if (config.precision == Precision::High) train<double>(model, encoded, labels);
  else train<float>(model, encoded, labels);
  return model;
}

LstmModel train_sequence_model(const std::vector<PatientSequence>& train_set,
                               const std::vector<std::size_t>& columns,
                               const LstmConfig& config) {
  EncoderStats stats = fit_encoder(train_set, columns);
  std::vector<Eigen::MatrixXd> encoded;
  std::vector<int> labels;
  for (const auto& s : train_set) {
    encoded.push_back(encode_sequence(s, stats));
    labels.push_back(s.itu() ? 1 : 0);
  }
  LstmModel model = fit_lstm(encoded, labels, config);
  model.encoder = std::move(stats);
  return model;
}

std::vector<double> predict_sequences(const LstmModel& model,
                                      const std::vector<PatientSequence>& sequences) {
  std::vector<double> out;
  out.reserve(sequences.size());
  for (const auto& s : sequences) out.push_back(forward(model, encode_sequence(s, model.encoder)));
  return out;
}

double sample_loss(const LstmModel& model, const Eigen::MatrixXd& encoded, int label) {
  return bce(forward(model, encoded), label);
}

double gradient_check(const LstmModel& model, const Eigen::MatrixXd& encoded, int label,
                      double epsilon) {
  check_finite(model);
  check_input(model, encoded);
  Params<double> P = params_from<double>(model);
  Params<double> G;
  G.zero_like(P);
  Trace<double> trace;
  run_forward<double>(P, encoded, nullptr, &trace);
  run_backward<double>(P, trace, label, G);

  double worst = 0.0;
  auto probe = [&](double& param, double analytic) {
    const double saved = param;
    param = saved + epsilon;
    const double up = bce(run_forward<double>(P, encoded, nullptr, nullptr), label);
    param = saved - epsilon;
    const double down = bce(run_forward<double>(P, encoded, nullptr, nullptr), label);
    param = saved;
    const double numeric = (up - down) / (2.0 * epsilon);
    const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-12});
    worst = std::max(worst, std::fabs(analytic - numeric) / denom);
  };
  for (Eigen::Index j = 0; j < P.W.cols(); ++j)
    for (Eigen::Index i = 0; i < P.W.rows(); ++i) probe(P.W(i, j), G.W(i, j));
  for (Eigen::Index i = 0; i < P.b.size(); ++i) probe(P.b[i], G.b[i]);
  for (Eigen::Index i = 0; i < P.v.size(); ++i) probe(P.v[i], G.v[i]);
  probe(P.c, G.c);
  return worst;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

std::vector<double> flatten(const Eigen::MatrixXd& m) {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) out.push_back(m(i, j));
  return out;
}

}  // namespace

void save_lstm(const LstmModel& model, const std::filesystem::path& path,
               std::string_view lineage) {
  using nlohmann::json;
  const auto& c = model.config;
  json doc{
      {"format_version", kLstmFormatVersion},
      {"kind", "lstm"},
      {"lineage", std::string(lineage)},
      {"config",
       {{"epochs", c.epochs},
        {"hidden_size", c.hidden_size},
        {"batch_size", c.batch_size},
        {"num_layers", c.num_layers},
        {"dropout", c.dropout},
        {"learning_rate", c.learning_rate},
        {"seed", c.seed},
        {"precision", c.precision == Precision::High ? "high" : "standard"}}},
      {"encoder",
       {{"columns", model.encoder.columns},
        {"mean", model.encoder.mean},
        {"std", model.encoder.std}}},
      {"input_size", model.input_size},
      {"W", flatten(model.W)},
      {"b", std::vector<double>(model.b.data(), model.b.data() + model.b.size())},
      {"w_out", std::vector<double>(model.w_out.data(), model.w_out.data() + model.w_out.size())},
      {"b_out", model.b_out},
      {"epoch_loss", model.epoch_loss}};
  auto out = io::open_output(path);
  out << doc.dump() << '\n';
}

LstmModel load_lstm(const std::filesystem::path& path) {
  using nlohmann::json;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("cannot open " + path.string());
  const std::string src = path.string();
  json doc = json::parse(in, nullptr, false);
  if (doc.is_discarded()) throw ParseError(src, 1, "<document>", "malformed JSON");
  try {
    const int version = doc.at("format_version").get<int>();
    if (version != kLstmFormatVersion)
      throw ParseError(src, 1, "format_version", fmt::format("unsupported version {}", version));
    if (doc.at("kind").get<std::string>() != "lstm")
      throw ParseError(src, 1, "kind", "not an lstm model");
    LstmModel m;
    const auto& c = doc.at("config");
    m.config.epochs = c.at("epochs").get<std::size_t>();
    m.config.hidden_size = c.at("hidden_size").get<std::size_t>();
    m.config.batch_size = c.at("batch_size").get<std::size_t>();
    m.config.num_layers = c.at("num_layers").get<std::size_t>();
    m.config.dropout = c.at("dropout").get<double>();
    m.config.learning_rate = c.at("learning_rate").get<double>();
    m.config.seed = c.at("seed").get<std::uint64_t>();
    m.config.precision =
        c.at("precision").get<std::string>() == "high" ? Precision::High : Precision::Standard;
    const auto& e = doc.at("encoder");
    m.encoder.columns = e.at("columns").get<std::vector<std::size_t>>();
    m.encoder.mean = e.at("mean").get<std::vector<double>>();
    m.encoder.std = e.at("std").get<std::vector<double>>();
    m.input_size = doc.at("input_size").get<std::size_t>();
    const auto H = static_cast<Eigen::Index>(m.config.hidden_size);
    const auto K = static_cast<Eigen::Index>(m.input_size);
    const auto W = doc.at("W").get<std::vector<double>>();
    const auto b = doc.at("b").get<std::vector<double>>();
    const auto w = doc.at("w_out").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(W.size()) != 4 * H * (K + H) ||
        static_cast<Eigen::Index>(b.size()) != 4 * H || static_cast<Eigen::Index>(w.size()) != H)
      throw ParseError(src, 1, "W", "parameter shapes do not match config");
    if (!m.encoder.columns.empty() &&
        (m.encoder.columns.size() != m.input_size || m.encoder.mean.size() != m.input_size ||
         m.encoder.std.size() != m.input_size))
      throw ParseError(src, 1, "encoder", "encoder size does not match input size");
    m.W.resize(4 * H, K + H);
    for (Eigen::Index i = 0; i < m.W.rows(); ++i)
      for (Eigen::Index j = 0; j < m.W.cols(); ++j)
        m.W(i, j) = W[static_cast<std::size_t>(i * m.W.cols() + j)];
    m.b = Eigen::Map<const Eigen::VectorXd>(b.data(), 4 * H);
    m.w_out = Eigen::Map<const Eigen::VectorXd>(w.data(), H);
    m.b_out = doc.at("b_out").get<double>();
    m.epoch_loss = doc.at("epoch_loss").get<std::vector<double>>();
    check_finite(m);
    return m;
  } catch (const json::exception& ex) {
    throw ParseError(src, 1, "<document>", ex.what());
  }
}

}  // namespace itupred
