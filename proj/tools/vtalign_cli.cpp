// vtalign: train motion/visual/joint video-text embeddings, retrieve, and
// export token-conditioned action-highlight maps.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>

#include "vtalign/dataset.hpp"
#include "vtalign/grad_check.hpp"
#include "vtalign/highlight.hpp"
#include "vtalign/model.hpp"
#include "vtalign/objectives.hpp"
#include "vtalign/retrieval.hpp"
#include "vtalign/training.hpp"

namespace {

using namespace vtalign;

void print_metrics(const char* prefix, const MetricsReport& rep) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%s.r1=%.6f\n%s.r5=%.6f\n%s.r10=%.6f\n%s.medr=%.1f\n", prefix,
                rep.r1, prefix, rep.r5, prefix, rep.r10, prefix, rep.med_r);
  std::cout << buf;
}

int cmd_gen_synthetic(const std::string& spec_path, const std::string& out_dir) {
  const SyntheticSpec spec = SyntheticSpec::load(spec_path);
  generate_synthetic(spec, out_dir);
  std::cout << "generated " << spec.videos << " videos ("
            << spec.videos - spec.videos_test << " train, " << spec.videos_test << " test) in "
            << out_dir << "\n";
  return 0;
}

int cmd_train(const std::string& data, const std::string& config_path, const std::string& out) {
  const TrainConfig cfg = TrainConfig::load(config_path);
  const Dataset ds = Dataset::load(data);
  TrainResult result = train(ds, cfg, &std::cout);
  result.checkpoint.save(out);
  std::ofstream log(out + ".log", std::ios::trunc);
  write_loss_log(result.log, log);
  std::cout << "checkpoint written to " << out << "\n";
  return 0;
}

struct EvalSetup {
  Dataset ds;
  Model model;
  VideoEmbeddings videos;
  CaptionEmbeddings caps;
};

EvalSetup load_eval(const std::string& data, const std::string& ckpt_path) {
  Checkpoint ckpt = Checkpoint::load(ckpt_path);
  EvalSetup s{Dataset::load(data), ckpt.to_model(), {}, {}};
  s.videos = embed_videos(s.ds, s.model);
  s.caps = embed_captions(s.ds, s.model);
  return s;
}

int cmd_eval(const std::string& data, const std::string& ckpt_path, bool do_rerank,
             const std::string& median) {
  const MedianRule rule = median == "midpoint" ? MedianRule::midpoint : MedianRule::lower;
  EvalSetup s = load_eval(data, ckpt_path);
  const auto c2v_pos = caption_to_video_positives(s.ds);
  const auto v2c_pos = video_to_caption_positives(s.ds);

  auto c2v = rank(s.videos.joint, s.caps.joint, Direction::caption_to_video);
  auto v2c = rank(s.videos.joint, s.caps.joint, Direction::video_to_caption);
  print_metrics("c2v", metrics(c2v, c2v_pos, rule));
  print_metrics("v2c", metrics(v2c, v2c_pos, rule));
  if (do_rerank) {
    auto c2v_r = rerank(c2v, s.videos.mot, s.videos.vis, s.caps.tokens);
    auto v2c_r = rerank(v2c, s.videos.mot, s.videos.vis, s.caps.tokens);
    print_metrics("c2v.rerank", metrics(c2v_r, c2v_pos, rule));
    print_metrics("v2c.rerank", metrics(v2c_r, v2c_pos, rule));
  }
  return 0;
}

std::string find_manifest(const std::string& index_dir) {
  namespace fs = std::filesystem;
  for (const char* name : {"manifest.tsv", "manifest_test.tsv", "manifest_train.tsv"}) {
    const fs::path p = fs::path(index_dir) / name;
    if (fs::exists(p)) return p.string();
  }
  throw std::runtime_error(index_dir + ": no manifest found");
}

int cmd_retrieve(const std::string& ckpt_path, const std::string& query,
                 const std::string& index_dir, std::size_t topk) {
  Checkpoint ckpt = Checkpoint::load(ckpt_path);
  Model model = ckpt.to_model();
  const Dataset ds = Dataset::load(find_manifest(index_dir));

  // whitespace tokenization against the stored vocabulary; unknown tokens are
  // skipped with a warning but the joint ranking still runs
  std::vector<std::size_t> token_ids;
  std::vector<Pos> token_pos;
  {
    std::istringstream is(query);
    std::string word;
    while (is >> word) {
      const auto id = ds.vocab.lookup(word);
      if (!id) {
        std::cerr << "warning: token '" << word << "' not in vocabulary, skipped\n";
        continue;
      }
      token_ids.push_back(*id);
      token_pos.push_back(ds.vocab.pos(*id));
    }
  }
  if (token_ids.empty()) {
    throw std::runtime_error("retrieve: no query token is in the vocabulary");
  }

  VideoEmbeddings videos = embed_videos(ds, model);
  const Tensor c_joi = detach(encode_caption(token_ids, model.cap, model.embedding).vec);

  CaptionRecord pseudo;
  pseudo.token_ids = token_ids;
  pseudo.token_pos = token_pos;
  const CaptionTokenSummary tokens = summarize_caption_tokens(pseudo, model);

  auto base = rank(videos.joint, {c_joi}, Direction::caption_to_video);
  auto table = rerank(base, videos.mot, videos.vis, {tokens});
  const auto& q = table.queries[0];
  const std::size_t n = std::min<std::size_t>(topk, q.candidate_order.size());
  for (std::size_t k = 0; k < n; ++k) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%zu\t%s\t%.6f\n", k + 1,
                  ds.videos[q.candidate_order[k]].video_id.c_str(), q.scores[k]);
    std::cout << buf;
  }
  return 0;
}

int cmd_highlight(const std::string& ckpt_path, const std::string& data,
                  const std::string& video_id, const std::string& token,
                  const std::string& pos_str, double beta, const std::string& out_dir,
                  std::size_t frames, std::size_t height, std::size_t width,
                  const std::string& interp_str) {
  Checkpoint ckpt = Checkpoint::load(ckpt_path);
  Model model = ckpt.to_model();
  const Dataset ds = Dataset::load(data);
  const auto pos = parse_pos(pos_str);
  if (!pos || *pos == Pos::other) {
    throw std::runtime_error("highlight: --pos must be VERB or NOUN");
  }
  const Interp interp = interp_str == "nearest" ? Interp::nearest : Interp::trilinear;
  HighlightExport hl =
      make_highlight(model, ds, video_id, token, *pos, beta, frames, height, width, interp);
  write_highlight(hl, out_dir);
  const Tensor& exported = hl.upsampled_map.defined() ? hl.upsampled_map : hl.raw_map;
  std::cout << "highlight map " << shape_str(exported.shape()) << " for token '" << token
            << "' (" << space_name(hl.space) << " space) written to " << out_dir << "\n";
  return 0;
}

// Random tiny instances at the config's widths: finite-difference verification
// of the full objective, resampling any instance that lands on a hinge.
int cmd_gradcheck(const std::string& config_path, std::size_t instances) {
  const TrainConfig cfg = TrainConfig::load(config_path);
  namespace fs = std::filesystem;
  const fs::path scratch =
      fs::temp_directory_path() / ("vtalign_gradcheck_" + std::to_string(cfg.seed));
  fs::remove_all(scratch);

  double worst = 0.0;
  std::size_t checked = 0, done = 0;
  std::uint64_t seed = cfg.seed;
  while (done < instances) {
    SyntheticSpec spec;
    spec.videos = 3;
    spec.captions_per_video = 2;
    spec.vocab_verbs = 3;
    spec.vocab_nouns = 3;
    spec.vocab_others = 4;
    spec.c_slow = 2;
    spec.c_fast = 2;
    spec.t_slow = 2;
    spec.t_fast = 2;
    spec.height = 2;
    spec.width = 2;
    spec.noise = 0.3;
    spec.seed = ++seed;
    generate_synthetic(spec, scratch.string());
    Dataset ds = Dataset::load((scratch / "manifest_train.tsv").string());

    Rng mrng(seed * 31 + 7);
    Model model = Model::init(std::min<std::size_t>(cfg.c, 8), std::min<std::size_t>(cfg.e, 8),
                              ds.vocab.size(), spec.c_slow, spec.c_fast, mrng);
    Batch batch;
    batch.items = {{0, 0}, {1, 2}, {2, 4}};
    auto fn = [&]() {
      Rng neg(seed * 131 + 5);
      return total_loss(batch, ds, model, cfg.hyper(), neg).l_total;
    };
    auto report = grad_check(fn, model.parameter_tensors());
    if (report.at_kink) continue;  // resample away from hinges
    worst = std::max(worst, report.max_rel_err);
    checked += report.elements_checked;
    ++done;
  }
  fs::remove_all(scratch);
  char buf[128];
  std::snprintf(buf, sizeof buf, "max_rel_err=%.3g elements=%zu instances=%zu\n", worst, checked,
                done);
  std::cout << buf;
  return worst < 1e-4 ? 0 : 1;
}

int cmd_validate(const std::string& data) {
  const Dataset ds = Dataset::load(data);
  const std::size_t checked = ds.validate();
  std::cout << "ok: " << ds.videos.size() << " videos, " << ds.captions.size() << " captions, "
            << checked << " feature pairs checked\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"video-text alignment: training, retrieval and action highlighting"};
  app.require_subcommand(1);

  std::string spec_path, out_dir, data, config_path, ckpt_path, query, index_dir;
  std::string video_id, token, pos_str, median = "lower", interp = "trilinear";
  std::size_t topk = 10, frames = 0, height = 0, width = 0, instances = 5;
  double beta = 0.1;
  bool do_rerank = false;

  auto* gen = app.add_subcommand("gen-synthetic", "generate a planted-correspondence dataset");
  gen->add_option("--spec", spec_path, "generator spec (key=value)")->required();
  gen->add_option("--out", out_dir, "output directory")->required();

  auto* tr = app.add_subcommand("train", "train embeddings on a dataset manifest");
  tr->add_option("--data", data, "dataset manifest")->required();
  tr->add_option("--config", config_path, "training config (key=value)")->required();
  tr->add_option("--out", ckpt_path, "checkpoint output path")->required();

  auto* ev = app.add_subcommand("eval", "retrieval metrics for both directions");
  ev->add_option("--data", data, "dataset manifest")->required();
  ev->add_option("--ckpt", ckpt_path, "checkpoint")->required();
  ev->add_flag("--rerank", do_rerank, "also report pooled-similarity reranking");
  ev->add_option("--median", median, "median convention: lower|midpoint")
      ->check(CLI::IsMember({"lower", "midpoint"}));

  auto* re = app.add_subcommand("retrieve", "rank videos for a free-text query");
  re->add_option("--ckpt", ckpt_path, "checkpoint")->required();
  re->add_option("--query", query, "query text (whitespace tokenized)")->required();
  re->add_option("--index", index_dir, "dataset directory")->required();
  re->add_option("--topk", topk, "results to print");

  auto* hl = app.add_subcommand("highlight", "export a token-conditioned relevance map");
  hl->add_option("--ckpt", ckpt_path, "checkpoint")->required();
  hl->add_option("--data", data, "dataset manifest")->required();
  hl->add_option("--video", video_id, "video id")->required();
  hl->add_option("--token", token, "token text")->required();
  hl->add_option("--pos", pos_str, "VERB or NOUN")->required();
  hl->add_option("--beta", beta, "inference temperature")->required();
  hl->add_option("--out", out_dir, "output directory")->required();
  hl->add_option("--frames", frames, "upsampled frame count (0 = raw grid)");
  hl->add_option("--height", height, "upsampled height in pixels");
  hl->add_option("--width", width, "upsampled width in pixels");
  hl->add_option("--interp", interp, "trilinear|nearest")
      ->check(CLI::IsMember({"trilinear", "nearest"}));

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  gc->add_option("--config", config_path, "training config")->required();
  gc->add_option("--instances", instances, "random instances to check");

  auto* va = app.add_subcommand("validate", "validate a dataset manifest and its files");
  va->add_option("--data", data, "dataset manifest")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_synthetic(spec_path, out_dir);
    if (tr->parsed()) return cmd_train(data, config_path, ckpt_path);
    if (ev->parsed()) return cmd_eval(data, ckpt_path, do_rerank, median);
    if (re->parsed()) return cmd_retrieve(ckpt_path, query, index_dir, topk);
    if (hl->parsed()) {
      return cmd_highlight(ckpt_path, data, video_id, token, pos_str, beta, out_dir, frames,
                           height, width, interp);
    }
    if (gc->parsed()) return cmd_gradcheck(config_path, instances);
    if (va->parsed()) return cmd_validate(data);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
