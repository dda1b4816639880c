#pragma once

// All trainable parameters in one place. The embedding table is shared by the
// token and caption encoders; nothing else is shared between modules.

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "vtalign/encoders.hpp"
#include "vtalign/rng.hpp"
#include "vtalign/tensor.hpp"
#include "vtalign/video_heads.hpp"

namespace vtalign {

struct Model {
  std::size_t c = 0, e = 0, v = 0;
  Tensor embedding;  // [V, E]
  TokenEncoderParams tok;
  CaptionEncoderParams cap;
  ProjectionHead proj_mot;  // fast -> motion, [C_fast, C]
  ProjectionHead proj_vis;  // slow -> visual, [C_slow, C]
  JointFusionParams joint;  // [2C, C]

  // uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)); biases use their matrix's fan-in.
  static Model init(std::size_t c, std::size_t e, std::size_t v, std::size_t c_slow,
                    std::size_t c_fast, Rng& rng) {
    Model m;
    m.c = c;
    m.e = e;
    m.v = v;
    auto u = [&](Shape shape, std::size_t fan_in) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      return random_uniform(std::move(shape), -bound, bound, rng, true);
    };
    m.embedding = u({v, e}, e);
    m.tok.w1 = u({e, c}, e);
    m.tok.b1 = u({c}, e);
    m.tok.w2 = u({e, c}, e);
    m.tok.b2 = u({c}, e);
    m.tok.w3 = u({e, c}, e);
    m.tok.b3 = u({c}, e);
    m.tok.w4 = u({e, c}, e);
    m.tok.b4 = u({c}, e);
    m.cap.wz = u({e, c}, e);
    m.cap.uz = u({c, c}, c);
    m.cap.bz = u({c}, c);
    m.cap.wr = u({e, c}, e);
    m.cap.ur = u({c, c}, c);
    m.cap.br = u({c}, c);
    m.cap.wn = u({e, c}, e);
    m.cap.un = u({c, c}, c);
    m.cap.bn = u({c}, c);
    m.proj_mot.w = u({c_fast, c}, c_fast);
    m.proj_mot.b = u({c}, c_fast);
    m.proj_vis.w = u({c_slow, c}, c_slow);
    m.proj_vis.b = u({c}, c_slow);
    m.joint.w = u({2 * c, c}, 2 * c);
    m.joint.b = u({c}, 2 * c);
    m.name_parameters();
    return m;
  }

  // Canonical (name, tensor) list; checkpoint files follow this order.
  std::vector<std::pair<std::string, Tensor>> parameters() {
    return {
        {"embedding", embedding},
        {"tok.w1", tok.w1},     {"tok.b1", tok.b1},
        {"tok.w2", tok.w2},     {"tok.b2", tok.b2},
        {"tok.w3", tok.w3},     {"tok.b3", tok.b3},
        {"tok.w4", tok.w4},     {"tok.b4", tok.b4},
        {"cap.wz", cap.wz},     {"cap.uz", cap.uz},     {"cap.bz", cap.bz},
        {"cap.wr", cap.wr},     {"cap.ur", cap.ur},     {"cap.br", cap.br},
        {"cap.wn", cap.wn},     {"cap.un", cap.un},     {"cap.bn", cap.bn},
        {"proj_mot.w", proj_mot.w}, {"proj_mot.b", proj_mot.b},
        {"proj_vis.w", proj_vis.w}, {"proj_vis.b", proj_vis.b},
        {"joint.w", joint.w},   {"joint.b", joint.b},
    };
  }

  std::vector<Tensor> parameter_tensors() {
    std::vector<Tensor> out;
    for (auto& [name, t] : parameters()) out.push_back(t);
    return out;
  }

  void zero_grads() {
    for (auto& [name, t] : parameters()) t.zero_grad();
  }

  void name_parameters() {
    for (auto& [name, t] : parameters()) t.set_name(name);
  }

  // Rebuild from a named tensor list (checkpoint load).
  static Model from_tensors(const std::vector<std::pair<std::string, Tensor>>& tensors) {
    Model m;
    auto find = [&](const std::string& name) -> Tensor {
      for (const auto& [n, t] : tensors) {
        if (n == name) return t;
      }
      throw std::runtime_error("model: checkpoint is missing tensor '" + name + "'");
    };
    m.embedding = find("embedding");
    m.tok.w1 = find("tok.w1");
    m.tok.b1 = find("tok.b1");
    m.tok.w2 = find("tok.w2");
    m.tok.b2 = find("tok.b2");
    m.tok.w3 = find("tok.w3");
    m.tok.b3 = find("tok.b3");
    m.tok.w4 = find("tok.w4");
    m.tok.b4 = find("tok.b4");
    m.cap.wz = find("cap.wz");
    m.cap.uz = find("cap.uz");
    m.cap.bz = find("cap.bz");
    m.cap.wr = find("cap.wr");
    m.cap.ur = find("cap.ur");
    m.cap.br = find("cap.br");
    m.cap.wn = find("cap.wn");
    m.cap.un = find("cap.un");
    m.cap.bn = find("cap.bn");
    m.proj_mot.w = find("proj_mot.w");
    m.proj_mot.b = find("proj_mot.b");
    m.proj_vis.w = find("proj_vis.w");
    m.proj_vis.b = find("proj_vis.b");
    m.joint.w = find("joint.w");
    m.joint.b = find("joint.b");
    m.v = m.embedding.shape()[0];
    m.e = m.embedding.shape()[1];
    m.c = m.tok.b1.shape()[0];
    m.name_parameters();
    return m;
  }
};

}  // namespace vtalign
