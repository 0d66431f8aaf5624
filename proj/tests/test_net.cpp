#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "oracles.hpp"
#include "tsi/net.hpp"
#include "tsi/ops.hpp"

using namespace tsi;
using oracle::Buf;
using Tp = Tape<double>;

namespace {

Buf relu(Buf x) {
  for (auto& v : x.data()) v = std::max(v, 0.0);
  return x;
}

Buf add(Buf a, const Buf& b) {
  for (std::size_t i = 0; i < a.numel(); ++i) a[i] += b[i];
  return a;
}

Buf bn(const Buf& x, const NormParams<double>& p) { return oracle::batch_norm_train(x, p.gamma.value, p.beta.value, p.stats.eps); }

Buf clip_rows(const Buf& x, std::int64_t first, std::int64_t count) {
  Shape s = x.shape();
  s[0] = count;
  Buf y(s);
  const std::size_t row = x.numel() / x.dim(0);
  std::copy_n(x.raw() + first * row, y.numel(), y.raw());
  return y;
}

void put_rows(Buf& dst, const Buf& src, std::int64_t first) {
  const std::size_t row = dst.numel() / dst.dim(0);
  std::copy_n(src.raw(), src.numel(), dst.raw() + first * row);
}

/// Temporal section from the scalar oracles, one clip at a time.
Buf temporal_oracle(const Buf& h, BlockParams<double>& p, const BlockConfig& cfg) {
  if (!cfg.use_sme && !cfg.use_cti) return h;
  const std::int64_t clips = h.dim(0) / cfg.frames;
  auto sme = [&](const Buf& in) {
    oracle::SmeWeights w{p.sme->reduce_proj.value, {}, p.sme->recover_proj.value, p.sme->recover_bias.value};
    for (auto& k : p.sme->pyramid_kernels) w.kernels.push_back(k.value);
    Buf out(in.shape());
    for (std::int64_t c = 0; c < clips; ++c)
      put_rows(out,
               oracle::sme_forward(clip_rows(in, c * cfg.frames, cfg.frames), w,
                                   cfg.sme.alignment == AlignmentOp::kMultiply, cfg.sme.motion == MotionMode::kPyramidal),
               c * cfg.frames);
    return out;
  };
  auto cti = [&](const Buf& in) {
    std::vector<Buf> ks, fcs, bs;
    for (auto& k : p.cti->temporal_kernels) ks.push_back(k.value);
    for (auto& k : p.cti->integration_fc) fcs.push_back(k.value);
    for (auto& k : p.cti->integration_bias) bs.push_back(k.value);
    Buf out(in.shape());
    for (std::int64_t c = 0; c < clips; ++c)
      put_rows(out, oracle::cti_forward(clip_rows(in, c * cfg.frames, cfg.frames), cfg.cti.groups, ks, fcs, bs),
               c * cfg.frames);
    return out;
  };
  if (!cfg.use_cti) return sme(h);
  if (!cfg.use_sme) return cti(h);
  switch (cfg.fusion) {
    case Fusion::kCascade:
      return cti(sme(h));
    case Fusion::kSummation:
      return add(sme(h), cti(h));
    case Fusion::kConcatenation: {
      const Buf a = oracle::conv2d(sme(h), p.sme_merge.value, 1, 0, 1);
      const Buf b = oracle::conv2d(cti(h), p.cti_merge.value, 1, 0, 1);
      const std::int64_t n = a.dim(0), ca = a.dim(1), hw = a.dim(2) * a.dim(3);
      Buf out({n, 2 * ca, a.dim(2), a.dim(3)});
      for (std::int64_t i = 0; i < n; ++i) {
        std::copy_n(a.raw() + i * ca * hw, ca * hw, out.raw() + i * 2 * ca * hw);
        std::copy_n(b.raw() + i * ca * hw, ca * hw, out.raw() + (i * 2 + 1) * ca * hw);
      }
      return out;
    }
  }
  return h;
}

/// Bottleneck residual block in train-mode normalization.
Buf block_oracle(const Buf& x, BlockParams<double>& p, const BlockConfig& cfg) {
  Buf h = relu(bn(oracle::conv2d(x, p.conv1.value, 1, 0, 1), p.bn1));
  h = relu(bn(oracle::conv2d(h, p.conv2.value, cfg.stride, 1, 1), p.bn2));
  h = temporal_oracle(h, p, cfg);
  h = bn(oracle::conv2d(h, p.conv3.value, 1, 0, 1), p.bn3);
  Buf sc = x;
  if (cfg.has_projection()) sc = bn(oracle::conv2d(x, p.shortcut.value, cfg.stride, 0, 1), p.bn_shortcut);
  return relu(add(h, sc));
}

BlockConfig block_config(std::int64_t in, std::int64_t b, std::int64_t out, std::int64_t stride, std::int64_t frames) {
  BlockConfig c;
  c.in_channels = in;
  c.bottleneck_channels = b;
  c.out_channels = out;
  c.stride = stride;
  c.frames = frames;
  c.sme.reduction = 4;
  c.cti.groups = 4;
  c.validate();
  return c;
}

void perturb(std::vector<Parameter<double>*> ps, std::uint64_t seed, double stddev) {
  Rng rng(seed);
  for (auto* p : ps)
    for (auto& v : p->value.data()) v += stddev * rng.normal();
}

Buf run_block(const Buf& x, BlockParams<double>& p, const BlockConfig& cfg) {
  Tp t;
  return block_forward(t.constant(x), p, cfg, ops::NormMode::kTrain).value();
}

ModelSpec tiny_spec() {
  ModelSpec s;
  s.name = "tiny";
  s.frames = 3;
  s.num_classes = 5;
  s.stem_channels = 8;
  s.stem_kernel = 3;
  s.stem_stride = 1;
  s.stages = {{1, 16, 8, 1, {}}, {1, 16, 8, 2, {}}};
  s.sme.reduction = 4;
  s.cti.groups = 4;
  return s;
}

Buf run_model(Model<double>& m, const Buf& clips, ops::NormMode mode = ops::NormMode::kEval) {
  Tp t;
  return model_forward(t.constant(clips), m, mode).value();
}

}  // namespace

TEST_SUITE("net") {

TEST_CASE("block config validation") {
  auto c = block_config(16, 8, 16, 1, 2);
  CHECK(c.sme.channels == 8);
  CHECK(c.cti.channels == 8);
  CHECK_FALSE(c.has_projection());
  CHECK(block_config(16, 8, 32, 1, 2).has_projection());
  CHECK(block_config(16, 8, 16, 2, 2).has_projection());
  BlockConfig bad = c;
  bad.bottleneck_channels = 6;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.fusion = Fusion::kConcatenation;
  bad.bottleneck_channels = 4;
  bad.sme.reduction = 1;
  bad.cti.groups = 1;
  CHECK_NOTHROW(bad.validate());
  bad.bottleneck_channels = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("dead residual branch leaves the shortcut") {
  auto cfg = block_config(8, 8, 8, 1, 2);
  Rng rng(1);
  auto p = BlockParams<double>::init(cfg, rng, "b");
  p.conv3.value = Buf(p.conv3.value.shape());
  auto x = oracle::random({4, 8, 5, 5}, 2);
  for (auto& v : x.data()) v = std::abs(v);
  // bn3 of an all-zero map is beta = 0, so relu(0 + x) = x for x >= 0.
  CHECK(run_block(x, p, cfg) == x);
}

TEST_CASE("block output shape contract") {
  for (std::int64_t stride : {1, 2}) {
    auto cfg = block_config(8, 8, 16, stride, 2);
    Rng rng(3);
    auto p = BlockParams<double>::init(cfg, rng, "b");
    const auto y = run_block(oracle::random({4, 8, 6, 6}, 4), p, cfg);
    CHECK(y.shape() == Shape{4, 16, 6 / stride, 6 / stride});
  }
  auto cfg = block_config(8, 8, 16, 1, 2);
  Rng rng(5);
  auto p = BlockParams<double>::init(cfg, rng, "b");
  Tp t;
  CHECK_THROWS_AS(block_forward(t.constant(Buf({3, 8, 4, 4})), p, cfg, ops::NormMode::kTrain), ShapeError);
  CHECK_THROWS_AS(block_forward(t.constant(Buf({4, 6, 4, 4})), p, cfg, ops::NormMode::kTrain), ShapeError);
}

TEST_CASE("block matches the composition oracle for every fusion") {
  for (auto fusion : {Fusion::kCascade, Fusion::kSummation, Fusion::kConcatenation}) {
    for (std::int64_t stride : {1, 2}) {
      auto cfg = block_config(8, 8, 12, stride, 2);
      cfg.fusion = fusion;
      cfg.validate();
      Rng rng(6);
      auto p = BlockParams<double>::init(cfg, rng, "b");
      perturb(p.cti->parameters(), 7, 0.5);
      perturb({&p.sme->recover_bias}, 8, 0.5);
      perturb({&p.bn1.gamma, &p.bn2.beta, &p.bn3.gamma}, 9, 0.3);
      const auto x = oracle::random({4, 8, 6, 6}, 10);
      INFO("fusion " << fusion_name(fusion) << " stride " << stride);
      CHECK(oracle::max_abs_diff(run_block(x, p, cfg), block_oracle(x, p, cfg)) < 1e-10);
    }
  }
}

TEST_CASE("disabling both modules gives a plain residual block") {
  auto cfg = block_config(8, 8, 8, 1, 2);
  cfg.use_sme = cfg.use_cti = false;
  cfg.validate();
  Rng rng(11);
  auto p = BlockParams<double>::init(cfg, rng, "b");
  CHECK_FALSE(p.sme.has_value());
  CHECK_FALSE(p.cti.has_value());
  const auto x = oracle::random({4, 8, 5, 5}, 12);
  CHECK(oracle::max_abs_diff(run_block(x, p, cfg), block_oracle(x, p, cfg)) < 1e-12);

  // Same conv weights as a full TSI block built from the same stream.
  auto full = block_config(8, 8, 8, 1, 2);
  Rng rng2(11);
  auto q = BlockParams<double>::init(full, rng2, "b");
  CHECK(q.conv1.value == p.conv1.value);
  CHECK(q.conv2.value == p.conv2.value);
  CHECK(q.conv3.value == p.conv3.value);
}

TEST_CASE("block parameters and state are uniquely named") {
  auto cfg = block_config(8, 8, 16, 2, 2);
  cfg.fusion = Fusion::kConcatenation;
  cfg.validate();
  Rng rng(13);
  auto p = BlockParams<double>::init(cfg, rng, "blk");
  std::set<std::string> names;
  for (auto* q : p.parameters()) CHECK(names.insert(q->name).second);
  CHECK(names.count("blk.sme_merge"));
  CHECK(names.count("blk.shortcut"));
  CHECK(p.state().size() > p.parameters().size());
  for (auto* q : p.parameters()) {
    const bool no_decay = q->name.find("bn") != std::string::npos || q->name.find("bias") != std::string::npos;
    CHECK(q->decay == !no_decay);
  }
}

TEST_CASE("model spec expands into block configs") {
  auto s = tiny_spec();
  s.stages[1].blocks = 3;
  s.stages[1].tsi = {true, false, true};
  const auto cs = s.block_configs();
  REQUIRE(cs.size() == 4);
  CHECK(cs[1].stride == 2);
  CHECK(cs[2].stride == 1);
  CHECK(cs[1].in_channels == 16);
  CHECK_FALSE(cs[2].use_sme);
  CHECK(cs[3].use_cti);
  s.stages[1].tsi = {true};
  CHECK_THROWS_AS(s.block_configs(), ConfigError);
  auto empty = tiny_spec();
  empty.stages.clear();
  CHECK_THROWS_AS(empty.validate(), ConfigError);
}

TEST_CASE("model spec JSON round trip and strict keys") {
  auto s = tiny_spec();
  s.fusion = Fusion::kSummation;
  s.sme.alignment = AlignmentOp::kAdd;
  s.cti.integration = IntegrationMode::kIndependent;
  s.stages[0].tsi = {false};
  const auto j = to_json(s);
  const auto back = model_spec_from_json(j);
  CHECK(to_json(back) == j);
  auto typo = j;
  typo["temporal"]["use_smee"] = true;
  CHECK_THROWS_AS(model_spec_from_json(typo), ConfigError);
  CHECK(load_model_spec(TSI_SOURCE_DIR "/configs/resnet50_tsi.json").block_configs().size() == 16);
  CHECK_FALSE(load_model_spec(TSI_SOURCE_DIR "/configs/resnet50_tsn.json").use_sme);
  CHECK_THROWS_AS(parse_fusion("sideways"), ConfigError);
}

TEST_CASE("zero head weights give the bias") {
  auto s = tiny_spec();
  auto m = Model<double>::init(s, 1);
  m.fc_weight.value = Buf(m.fc_weight.value.shape());
  m.fc_bias.value = Buf({5}, std::vector<double>{0.5, -1, 2, 0, 3});
  const auto y = run_model(m, oracle::random({2, 3, 3, 8, 8}, 2));
  for (int n = 0; n < 2; ++n)
    for (int k = 0; k < 5; ++k) CHECK(y[n * 5 + k] == doctest::Approx(m.fc_bias.value[k]).epsilon(1e-15));
}

TEST_CASE("scores permute with the clips") {
  auto m = Model<double>::init(tiny_spec(), 3);
  const auto x = oracle::random({3, 3, 3, 8, 8}, 4);
  const std::int64_t clip = x.numel() / 3;
  Buf xp(x.shape());
  const int perm[3] = {2, 0, 1};
  for (int i = 0; i < 3; ++i) std::copy_n(x.raw() + perm[i] * clip, clip, xp.raw() + i * clip);
  const auto y = run_model(m, x), yp = run_model(m, xp);
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 5; ++k) CHECK(yp[i * 5 + k] == doctest::Approx(y[perm[i] * 5 + k]).epsilon(1e-12));
}

TEST_CASE("model matches a layer-by-layer trace") {
  auto s = tiny_spec();
  auto m = Model<double>::init(s, 5);
  for (auto& b : m.blocks) {
    perturb(b.cti->parameters(), 6, 0.5);
    perturb({&b.sme->recover_bias}, 7, 0.5);
  }
  perturb({&m.fc_bias}, 8, 1.0);
  const auto clips = oracle::random({2, 3, 3, 8, 8}, 9);
  const auto y = run_model(m, clips, ops::NormMode::kTrain);

  Buf h = clips.reshaped({6, 3, 8, 8});
  h = relu(bn(oracle::conv2d(h, m.stem.value, 1, 1, 1), m.stem_bn));
  for (std::size_t i = 0; i < m.blocks.size(); ++i) h = block_oracle(h, m.blocks[i], m.configs[i]);
  const std::int64_t f = h.dim(1), hw = h.dim(2) * h.dim(3);
  Buf ref({2, 5});
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t k = 0; k < 5; ++k) {
      double acc = 0.0;
      for (std::int64_t t = 0; t < 3; ++t) {
        double logit = m.fc_bias.value[k];
        for (std::int64_t c = 0; c < f; ++c) {
          double mean = 0.0;
          for (std::int64_t i = 0; i < hw; ++i) mean += h[((n * 3 + t) * f + c) * hw + i];
          logit += m.fc_weight.value[k * f + c] * mean / static_cast<double>(hw);
        }
        acc += logit;
      }
      ref[n * 5 + k] = acc / 3.0;
    }
  CHECK(oracle::max_abs_diff(y, ref) < 1e-10);
}

TEST_CASE("temporal sensitivity") {
  const auto x = oracle::random({2, 3, 3, 8, 8}, 10);
  const std::int64_t frame = 3 * 8 * 8;
  Buf rev(x.shape());
  for (int n = 0; n < 2; ++n)
    for (int t = 0; t < 3; ++t) std::copy_n(x.raw() + (n * 3 + t) * frame, frame, rev.raw() + (n * 3 + 2 - t) * frame);

  auto with_cti = tiny_spec();
  with_cti.use_sme = false;
  auto m = Model<double>::init(with_cti, 11);
  for (auto& b : m.blocks) perturb(b.cti->parameters(), 12, 0.5);
  CHECK(oracle::max_abs_diff(run_model(m, x), run_model(m, rev)) > 1e-6);

  auto plain = tiny_spec();
  plain.use_sme = plain.use_cti = false;
  auto p = Model<double>::init(plain, 11);
  CHECK(oracle::max_abs_diff(run_model(p, x), run_model(p, rev)) < 1e-12);
}

TEST_CASE("toggling temporal modules keeps the backbone initialization") {
  auto a = tiny_spec();
  auto b = tiny_spec();
  b.use_sme = false;
  b.use_cti = false;
  auto ma = Model<double>::init(a, 21), mb = Model<double>::init(b, 21);
  CHECK(ma.stem.value == mb.stem.value);
  CHECK(ma.blocks[1].conv2.value == mb.blocks[1].conv2.value);
  CHECK(ma.fc_weight.value == mb.fc_weight.value);
  CHECK(ma.parameter_count() > mb.parameter_count());
}

TEST_CASE("model forward is deterministic") {
  auto m1 = Model<double>::init(tiny_spec(), 13), m2 = Model<double>::init(tiny_spec(), 13);
  const auto x = oracle::random({2, 3, 3, 8, 8}, 14);
  CHECK(run_model(m1, x, ops::NormMode::kTrain) == run_model(m2, x, ops::NormMode::kTrain));
  Tp t;
  CHECK_THROWS_AS(model_forward(t.constant(Buf({2, 4, 3, 8, 8})), m1, ops::NormMode::kEval), ShapeError);
}

}  // TEST_SUITE
