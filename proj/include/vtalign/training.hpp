#pragma once

// Optimization loop, adaptive-moment optimizer, flat key=value configuration,
// and the checkpoint container.
//
// Checkpoint file:
//   magic "VCKP", version u16 LE, dtype u8, pad u8, epoch u64 LE,
//   config_len u32 LE + canonical config text,
//   count u32 LE, then per tensor: name_len u16 LE + name + VTEN blob.
// The config text is re-serialized canonically on save, so load-then-save
// reproduces the file byte for byte.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "vtalign/dataset.hpp"
#include "vtalign/model.hpp"
#include "vtalign/objectives.hpp"
#include "vtalign/tensor_io.hpp"

namespace vtalign {

struct TrainConfig {
  std::size_t c = 16;  // embedding width of all three spaces
  std::size_t e = 16;  // token embedding width
  std::size_t v = 0;   // vocabulary size; 0 = take from the vocabulary file
  double alpha = 0.2;
  // Training temperature 0.3: sharp maps (0.1) concentrate the alignment
  // updates on single argmax voxels and can lock whole verbs onto background
  // positions; a warmer map lets the planted signal win, then sharpen.
  double beta_train = 0.3;
  double lambda_m = 1.0;
  double lambda_s = 1.0;
  double lr = 0.003;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 0.0;  // 0 disables global-norm clipping
  std::size_t batch_size = 8;
  std::size_t epochs = 60;
  std::uint64_t seed = 1234;
  Dtype dtype = Dtype::f64;

  void check() const {
    if (c == 0 || e == 0) throw std::invalid_argument("config: C and E must be positive");
    if (alpha < 0) throw std::invalid_argument("config: alpha must be >= 0");
    if (beta_train <= 0) throw std::invalid_argument("config: beta_train must be positive");
    if (lr < 0 || adam_eps <= 0 || grad_clip < 0) {
      throw std::invalid_argument("config: lr, adam_eps, grad_clip out of range");
    }
    if (adam_beta1 < 0 || adam_beta1 >= 1 || adam_beta2 < 0 || adam_beta2 >= 1) {
      throw std::invalid_argument("config: moment decays must lie in [0,1)");
    }
    if (batch_size < 2) throw std::invalid_argument("config: batch size must be >= 2");
    if (epochs == 0) throw std::invalid_argument("config: epochs must be positive");
  }

  LossHyper hyper() const { return {alpha, beta_train, lambda_m, lambda_s}; }

  std::string to_text() const {
    std::ostringstream os;
    char num[64];
    auto put_f = [&](const char* key, double val) {
      std::snprintf(num, sizeof num, "%.17g", val);
      os << key << '=' << num << '\n';
    };
    os << "C=" << c << '\n';
    os << "E=" << e << '\n';
    os << "V=" << v << '\n';
    put_f("alpha", alpha);
    put_f("beta_train", beta_train);
    put_f("lambda_m", lambda_m);
    put_f("lambda_s", lambda_s);
    put_f("lr", lr);
    put_f("adam_beta1", adam_beta1);
    put_f("adam_beta2", adam_beta2);
    put_f("adam_eps", adam_eps);
    put_f("grad_clip", grad_clip);
    os << "batch_size=" << batch_size << '\n';
    os << "epochs=" << epochs << '\n';
    os << "seed=" << seed << '\n';
    os << "dtype=" << (dtype == Dtype::f64 ? "f64" : "f32") << '\n';
    return os.str();
  }

  static TrainConfig from_text(const std::string& text, const std::string& origin = "config") {
    TrainConfig cfg;
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.empty() || line[0] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": expected key=value");
      }
      const std::string key = line.substr(0, eq);
      const std::string val = line.substr(eq + 1);
      if (key == "C") cfg.c = std::stoull(val);
      else if (key == "E") cfg.e = std::stoull(val);
      else if (key == "V") cfg.v = std::stoull(val);
      else if (key == "alpha") cfg.alpha = std::stod(val);
      else if (key == "beta_train") cfg.beta_train = std::stod(val);
      else if (key == "lambda_m") cfg.lambda_m = std::stod(val);
      else if (key == "lambda_s") cfg.lambda_s = std::stod(val);
      else if (key == "lr") cfg.lr = std::stod(val);
      else if (key == "adam_beta1") cfg.adam_beta1 = std::stod(val);
      else if (key == "adam_beta2") cfg.adam_beta2 = std::stod(val);
      else if (key == "adam_eps") cfg.adam_eps = std::stod(val);
      else if (key == "grad_clip") cfg.grad_clip = std::stod(val);
      else if (key == "batch_size") cfg.batch_size = std::stoull(val);
      else if (key == "epochs") cfg.epochs = std::stoull(val);
      else if (key == "seed") cfg.seed = std::stoull(val);
      else if (key == "dtype") {
        if (val == "f64") cfg.dtype = Dtype::f64;
        else if (val == "f32") cfg.dtype = Dtype::f32;
        else throw std::runtime_error(origin + ": dtype must be f64 or f32, got '" + val + "'");
      } else {
        throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": unknown key '" +
                                 key + "'");
      }
    }
    cfg.check();
    return cfg;
  }

  static TrainConfig load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error(path + ": cannot open");
    std::ostringstream os;
    os << f.rdbuf();
    return from_text(os.str(), path);
  }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error(path + ": cannot open for writing");
    f << to_text();
  }
};

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::size_t step = 0;
};

// m <- b1 m + (1-b1) g ; v <- b2 v + (1-b2) g^2 ; bias-corrected;
// theta <- theta - lr * m^ / (sqrt(v^) + eps).
inline void optimizer_step(std::vector<std::pair<std::string, Tensor>>& params, AdamState& state,
                           const TrainConfig& cfg) {
  if (state.m.empty()) {
    for (auto& [name, p] : params) {
      state.m.emplace_back(p.size(), 0.0);
      state.v.emplace_back(p.size(), 0.0);
    }
  }
  std::vector<std::vector<double>> grads;
  grads.reserve(params.size());
  for (auto& [name, p] : params) {
    auto g = p.grad_or_zeros();
    for (double x : g) {
      if (!std::isfinite(x)) {
        throw std::runtime_error("optimizer_step: non-finite gradient in parameter '" + name +
                                 "'");
      }
    }
    grads.push_back(std::move(g));
  }
  if (cfg.grad_clip > 0.0) {
    double ss = 0.0;
    for (const auto& g : grads) {
      for (double x : g) ss += x * x;
    }
    const double norm = std::sqrt(ss);
    if (norm > cfg.grad_clip) {
      const double s = cfg.grad_clip / norm;
      for (auto& g : grads) {
        for (double& x : g) x *= s;
      }
    }
  }
  ++state.step;
  const double corr1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(state.step));
  const double corr2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(state.step));
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& theta = params[pi].second.mutable_values();
    auto& m = state.m[pi];
    auto& v = state.v[pi];
    const auto& g = grads[pi];
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = cfg.adam_beta1 * m[i] + (1.0 - cfg.adam_beta1) * g[i];
      v[i] = cfg.adam_beta2 * v[i] + (1.0 - cfg.adam_beta2) * g[i] * g[i];
      const double mhat = m[i] / corr1;
      const double vhat = v[i] / corr2;
      theta[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Checkpoint
// ---------------------------------------------------------------------------

struct Checkpoint {
  TrainConfig config;
  std::uint64_t epoch = 0;
  std::vector<std::pair<std::string, Tensor>> tensors;

  Model to_model() const { return Model::from_tensors(tensors); }

  std::string to_bytes() const {
    std::string out;
    out += "VCKP";
    detail::put_u16(out, 1);
    out.push_back(static_cast<char>(config.dtype));
    out.push_back('\0');
    detail::put_u64(out, epoch);
    const std::string cfg_text = config.to_text();
    detail::put_u32(out, static_cast<std::uint32_t>(cfg_text.size()));
    out += cfg_text;
    detail::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
      detail::put_u16(out, static_cast<std::uint16_t>(name.size()));
      out += name;
      out += tensor_to_bytes(t, config.dtype);
    }
    return out;
  }

  static Checkpoint from_bytes(const std::string& bytes, const std::string& origin) {
    detail::ByteReader r{bytes, 0, origin};
    r.need(4, "magic");
    if (bytes.compare(0, 4, "VCKP") != 0) {
      throw FormatError(origin + ": bad magic at offset 0 (expected VCKP)");
    }
    r.pos += 4;
    const std::uint16_t version = r.u16("version");
    if (version != 1) {
      throw FormatError(origin + ": unsupported checkpoint version " + std::to_string(version));
    }
    const std::uint8_t dtype_code = r.u8("dtype");
    if (dtype_code > 1) {
      throw FormatError(origin + ": unknown dtype code " + std::to_string(dtype_code));
    }
    r.u8("pad");
    Checkpoint ckpt;
    ckpt.epoch = r.u64("epoch");
    const std::uint32_t cfg_len = r.u32("config length");
    r.need(cfg_len, "config text");
    ckpt.config = TrainConfig::from_text(bytes.substr(r.pos, cfg_len), origin);
    r.pos += cfg_len;
    if (static_cast<Dtype>(dtype_code) != ckpt.config.dtype) {
      throw FormatError(origin + ": header dtype disagrees with config dtype");
    }
    const std::uint32_t count = r.u32("tensor count");
    for (std::uint32_t i = 0; i < count; ++i) {
      const std::uint16_t name_len = r.u16("tensor name length");
      r.need(name_len, "tensor name");
      std::string name = bytes.substr(r.pos, name_len);
      r.pos += name_len;
      Tensor t = tensor_from_bytes(r);
      ckpt.tensors.emplace_back(std::move(name), std::move(t));
    }
    if (r.pos != bytes.size()) {
      throw FormatError(origin + ": " + std::to_string(bytes.size() - r.pos) +
                        " trailing bytes at offset " + std::to_string(r.pos));
    }
    return ckpt;
  }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError(path + ": cannot open for writing");
    const std::string bytes = to_bytes();
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw FormatError(path + ": write failed");
  }

  static Checkpoint load(const std::string& path) {
    return from_bytes(read_file_bytes(path), path);
  }
};

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochLog {
  std::size_t epoch = 0;
  double l_joint = 0, l_mot = 0, l_vis = 0, l_total = 0;  // means over batches
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochLog> log;
};

inline void write_loss_log(const std::vector<EpochLog>& log, std::ostream& os) {
  for (const auto& e : log) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "epoch=%zu l_joint=%.9g l_mot=%.9g l_vis=%.9g l_total=%.9g\n",
                  e.epoch, e.l_joint, e.l_mot, e.l_vis, e.l_total);
    os << buf;
  }
}

// Seed substreams: parameter init, batch shuffling and negative sampling each
// draw from their own generator so config toggles do not shift the others.
inline TrainResult train(const Dataset& ds, TrainConfig cfg, std::ostream* progress = nullptr) {
  cfg.check();
  if (cfg.v == 0) {
    cfg.v = ds.vocab.size();
  } else if (cfg.v != ds.vocab.size()) {
    throw std::invalid_argument("train: config V=" + std::to_string(cfg.v) +
                                " but vocabulary has " + std::to_string(ds.vocab.size()) +
                                " tokens");
  }
  if (ds.videos.size() < 2) throw std::invalid_argument("train: need at least 2 videos");

  Rng init_rng(cfg.seed);
  Rng batch_rng(cfg.seed ^ 0x9E3779B97F4A7C15ull);
  Rng neg_rng(cfg.seed ^ 0xBF58476D1CE4E5B9ull);

  const std::size_t c_slow = ds.slow_volume(0).channels();
  const std::size_t c_fast = ds.fast_volume(0).channels();
  Model model = Model::init(cfg.c, cfg.e, cfg.v, c_slow, c_fast, init_rng);
  auto params = model.parameters();

  AdamState opt;
  TrainResult result;
  const LossHyper hyper = cfg.hyper();
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto batches = assemble_batches(ds, cfg.batch_size, batch_rng);
    EpochLog log{epoch, 0, 0, 0, 0};
    for (const auto& batch : batches) {
      model.zero_grads();
      LossBreakdown lb = total_loss(batch, ds, model, hyper, neg_rng);
      backward(lb.l_total);
      optimizer_step(params, opt, cfg);
      log.l_joint += lb.l_joint.item();
      log.l_mot += lb.l_mot.item();
      log.l_vis += lb.l_vis.item();
      log.l_total += lb.l_total.item();
    }
    const double n = static_cast<double>(batches.size());
    log.l_joint /= n;
    log.l_mot /= n;
    log.l_vis /= n;
    log.l_total /= n;
    result.log.push_back(log);
    if (progress) {
      char buf[160];
      std::snprintf(buf, sizeof buf,
                    "epoch=%zu l_joint=%.6f l_mot=%.6f l_vis=%.6f l_total=%.6f\n", epoch,
                    log.l_joint, log.l_mot, log.l_vis, log.l_total);
      *progress << buf << std::flush;
    }
  }

  result.checkpoint.config = cfg;
  result.checkpoint.epoch = cfg.epochs;
  result.checkpoint.tensors = model.parameters();
  return result;
}

}  // namespace vtalign
