// Copyright 2026 The lowbit-attn Authors
// SPDX-License-Identifier: Apache-2.0

// lowbit-attn: command-line driver. Every subcommand prints one JSON
// document on stdout. Exit status: 0 ok, 1 verdict failed, 2 bad usage or
// bad input.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "lowbit_attn/lowbit_attn.hpp"

namespace la = lowbit_attn;
using json = nlohmann::ordered_json;

namespace {

constexpr int kExitVerdict = 1;
constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flags shared by the subcommands that build inputs or an AttentionConfig.
struct CommonFlags {
  std::uint64_t seed = 1;
  std::optional<std::size_t> n;
  std::optional<std::size_t> d;
  std::size_t bq = 64;
  std::size_t bkv = 64;
  std::string quant = "nvfp4";
  std::string pscale = "twolevel";
  bool no_sm_scale = false;
  bool no_smooth_q = false;
  bool no_smooth_k = false;
  std::optional<std::string> dist;
  std::optional<std::size_t> outlier_channels;
  std::optional<float> outlier_scale;
  std::optional<float> channel_bias;
  std::optional<float> value_bias;
  std::string csv;
};

void add_common(CLI::App* app, CommonFlags& f, bool with_config) {
  app->add_option("--seed", f.seed, "Seed of the synthetic inputs");
  app->add_option("--n", f.n, "Sequence length N")->check(CLI::PositiveNumber);
  app->add_option("--d", f.d, "Head dimension d")->check(CLI::PositiveNumber);
  app->add_option("--dist", f.dist, "Synthetic distribution")
      ->check(CLI::IsMember({"gaussian", "outlier", "softmax"}));
  app->add_option("--outlier-channels", f.outlier_channels, "Outlier columns of K");
  app->add_option("--outlier-scale", f.outlier_scale, "Factor applied to outlier columns");
  app->add_option("--channel-bias", f.channel_bias, "Std-dev of the per-channel means of Q, K");
  app->add_option("--value-bias", f.value_bias, "Std-dev of the per-channel means of V, dO");
  app->add_option("--csv", f.csv, "Also write flat rows to this CSV file");
  if (!with_config) return;
  app->add_option("--bq", f.bq, "Query tile rows B_q")->check(CLI::PositiveNumber);
  app->add_option("--bkv", f.bkv, "Key/value tile rows B_kv")->check(CLI::PositiveNumber);
  app->add_option("--quant", f.quant, "Forward quantization")
      ->check(CLI::IsMember({"fp", "nvfp4", "mxfp4"}));
  app->add_option("--pscale", f.pscale, "Scaling of P")->check(CLI::IsMember({"direct", "twolevel"}));
  app->add_flag("--no-sm-scale", f.no_sm_scale, "Do not multiply S by 1/sqrt(d)");
  app->add_flag("--no-smooth-q", f.no_smooth_q, "Disable smoothing of Q");
  app->add_flag("--no-smooth-k", f.no_smooth_k, "Disable smoothing of K");
}

la::Distribution parse_distribution(const std::string& s) {
  if (s == "gaussian") return la::Distribution::kGaussian;
  if (s == "outlier") return la::Distribution::kGaussianOutlierChannels;
  if (s == "softmax") return la::Distribution::kSoftmaxLogits;
  throw UsageError("unknown distribution '" + s + "'");
}

la::SyntheticSpec make_spec(const CommonFlags& f, la::SyntheticSpec spec = {}) {
  spec.seed = f.seed;
  if (f.n) spec.n = *f.n;
  if (f.d) spec.d = *f.d;
  if (f.dist) spec.distribution = parse_distribution(*f.dist);
  if (f.outlier_channels) spec.outlier_channels = *f.outlier_channels;
  if (f.outlier_scale) spec.outlier_scale = *f.outlier_scale;
  if (f.channel_bias) spec.channel_bias = *f.channel_bias;
  if (f.value_bias) spec.value_bias = *f.value_bias;
  spec.validate();
  return spec;
}

la::AttentionConfig make_config(const CommonFlags& f) {
  la::AttentionConfig cfg;
  cfg.block_q = f.bq;
  cfg.block_kv = f.bkv;
  cfg.quant = f.quant == "fp"      ? la::QuantMode::kFullPrecision
              : f.quant == "mxfp4" ? la::QuantMode::kMXFP4
                                   : la::QuantMode::kNVFP4;
  cfg.p_scale = f.pscale == "direct" ? la::PScaleMode::kDirect : la::PScaleMode::kTwoLevel;
  cfg.apply_sm_scale = !f.no_sm_scale;
  cfg.smooth_q = !f.no_smooth_q;
  cfg.smooth_k = !f.no_smooth_k;
  return cfg;
}

json to_json(const la::AccuracyReport& r) {
  return {{"cos_sim", r.cos_sim}, {"l1", r.l1}, {"rmse", r.rmse}};
}

json to_json(const la::AttentionConfig& c) {
  return {{"block_q", c.block_q},       {"block_kv", c.block_kv},
          {"quant", la::to_string(c.quant)}, {"p_scale", la::to_string(c.p_scale)},
          {"smooth_q", c.smooth_q},     {"smooth_k", c.smooth_k},
          {"apply_sm_scale", c.apply_sm_scale}};
}

json to_json(const la::SyntheticSpec& s) {
  return {{"distribution", la::to_string(s.distribution)},
          {"n", s.n},
          {"d", s.d},
          {"outlier_channels", s.outlier_channels},
          {"outlier_scale", s.outlier_scale},
          {"channel_bias", s.channel_bias},
          {"value_bias", s.value_bias},
          {"seed", s.seed}};
}

std::ofstream open_csv(const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw UsageError("cannot write " + path);
  out.precision(17);
  return out;
}

void write_report_csv(const std::string& path, const std::string& key,
                      const std::vector<std::pair<std::string, la::AccuracyReport>>& rows) {
  std::ofstream out = open_csv(path);
  out << key << ",cos_sim,l1,rmse\n";
  for (const auto& [id, r] : rows) out << id << ',' << r.cos_sim << ',' << r.l1 << ',' << r.rmse << '\n';
}

void emit(const json& doc) { std::cout << doc.dump(2) << '\n'; }

// Q, K, V (and dO) come either all from files or all from the generator.
struct Inputs {
  la::SyntheticTensors t;
  json source;
};

Inputs load_inputs(const CommonFlags& f, const std::vector<std::string>& paths, bool need_do) {
  std::size_t given = 0;
  for (const auto& p : paths) given += p.empty() ? 0 : 1;
  Inputs in;
  if (given == 0) {
    const la::SyntheticSpec spec = make_spec(f);
    in.t = la::generate_synthetic(spec);
    in.source = {{"synthetic", to_json(spec)}};
    return in;
  }
  if (given != paths.size()) throw UsageError("give either all input tensors or none");
  in.t.q = la::load_tensor(paths[0]);
  const std::pair shape{in.t.q.rows(), in.t.q.cols()};
  in.t.k = la::load_tensor(paths[1], shape);
  in.t.v = la::load_tensor(paths[2], shape);
  if (need_do) in.t.d_o = la::load_tensor(paths[3], shape);
  in.source = {{"files", paths}};
  return in;
}

// --- quantize -------------------------------------------------------------

struct QuantizeArgs {
  std::string input;
  std::string tensor = "k";
  std::string format = "nvfp4";
  std::string dump;
};

void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw UsageError("cannot write " + path.string());
}

int run_quantize(const CommonFlags& f, const QuantizeArgs& a) {
  json doc;
  doc["command"] = "quantize";
  la::Tensor x;
  if (!a.input.empty()) {
    x = la::load_tensor(a.input);
    doc["input"] = {{"file", a.input}};
  } else {
    const la::SyntheticSpec spec = make_spec(f);
    const la::SyntheticTensors t = la::generate_synthetic(spec);
    x = a.tensor == "q" ? t.q : a.tensor == "v" ? t.v : a.tensor == "do" ? t.d_o : t.k;
    doc["input"] = {{"synthetic", to_json(spec)}, {"tensor", a.tensor}};
  }
  doc["shape"] = {x.rows(), x.cols()};
  doc["format"] = a.format;

  la::Tensor recon;
  if (a.format == "int8") {
    const la::BlockQuantizedInt8 q = la::psi(x);
    recon = la::dequantize(q);
    doc["scale"] = q.scale;
    if (!a.dump.empty()) {
      std::vector<std::uint8_t> bytes(q.codes.size());
      for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = static_cast<std::uint8_t>(q.codes[i]);
      write_bytes(a.dump + ".codes.u8", bytes);
    }
  } else {
    const la::Microscaling fmt =
        a.format == "mxfp4" ? la::Microscaling::kMXFP4 : la::Microscaling::kNVFP4;
    const la::MicroscaledMatrix q = la::phi(x, fmt);
    recon = la::phi_inv(q);
    const la::ScaleUsage u = la::scale_usage(q);
    doc["block_width"] = q.block_width();
    doc["scale_format"] = q.scale_format() == la::ScaleFormat::kE4M3 ? "e4m3" : "e8m0";
    doc["scale_usage"] = {{"blocks", u.blocks},
                          {"distinct_codes", u.distinct_codes},
                          {"upper_half_fraction", u.upper_half_fraction},
                          {"code_quantile_range", u.code_quantile_range}};
    if (!a.dump.empty()) {
      write_bytes(a.dump + ".codes.u8", q.codes());
      write_bytes(a.dump + ".scales.u8", q.scale_codes());
    }
  }
  if (!a.dump.empty()) la::save_tensor(recon, a.dump + ".f32");
  const la::AccuracyReport r = la::accuracy_metrics(x, recon);
  double max_abs = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    max_abs = std::max(max_abs, std::fabs(static_cast<double>(x.data()[i]) - recon.data()[i]));
  }
  doc["reconstruction"] = to_json(r);
  doc["reconstruction"]["max_abs_error"] = max_abs;
  if (!f.csv.empty()) write_report_csv(f.csv, "format", {{a.format, r}});
  emit(doc);
  return 0;
}

// --- fwd ------------------------------------------------------------------

struct FwdArgs {
  std::string impl = "sage3";
  std::string q, k, v, out;
};

int run_fwd(const CommonFlags& f, const FwdArgs& a) {
  const Inputs in = load_inputs(f, {a.q, a.k, a.v}, false);
  la::AttentionConfig cfg = make_config(f);
  la::Tensor o;
  if (a.impl == "reference") {
    o = la::reference_attention(in.t.q, in.t.k, in.t.v, cfg.apply_sm_scale);
  } else if (a.impl == "sagebwd") {
    o = la::sagebwd_forward(in.t.q, in.t.k, in.t.v, cfg).o;
  } else {
    o = la::sageattention3_forward(in.t.q, in.t.k, in.t.v, cfg);
  }
  using MD = la::Matrix<double>;
  const MD ref = la::reference_attention(MD::cast_from(in.t.q), MD::cast_from(in.t.k),
                                         MD::cast_from(in.t.v), cfg.apply_sm_scale);
  const la::AccuracyReport r = la::accuracy_metrics(ref, o);
  if (!a.out.empty()) la::save_tensor(o, a.out);

  json doc;
  doc["command"] = "fwd";
  doc["impl"] = a.impl;
  doc["input"] = in.source;
  doc["config"] = to_json(cfg);
  doc["shape"] = {o.rows(), o.cols()};
  doc["accuracy"] = to_json(r);
  if (!f.csv.empty()) write_report_csv(f.csv, "impl", {{a.impl, r}});
  emit(doc);
  return 0;
}

// --- bwd ------------------------------------------------------------------

struct BwdArgs {
  std::string dov = "fp16";
  bool dequantized_v = false;
  std::string q, k, v, d_o, out_prefix;
};

int run_bwd(const CommonFlags& f, const BwdArgs& a) {
  const Inputs in = load_inputs(f, {a.q, a.k, a.v, a.d_o}, true);
  const la::AttentionConfig cfg = make_config(f);
  const auto st = la::sagebwd_forward(in.t.q, in.t.k, in.t.v, cfg);
  la::BackwardOptions opts;
  opts.dov = a.dov == "int8" ? la::DovPrecision::kINT8 : la::DovPrecision::kFP16;
  opts.v_source = a.dequantized_v ? la::DpVSource::kDequantized : la::DpVSource::kOriginal;
  const la::GradTriple<float> g = la::sagebwd_backward(st, in.t.d_o, cfg, opts);

  using MD = la::Matrix<double>;
  const MD qd = MD::cast_from(in.t.q), kd = MD::cast_from(in.t.k), vd = MD::cast_from(in.t.v);
  const la::GradTriple<double> ref =
      la::reference_attention_backward(qd, kd, vd, MD::cast_from(in.t.d_o), cfg.apply_sm_scale);
  const MD o_ref = la::reference_attention(qd, kd, vd, cfg.apply_sm_scale);

  const std::vector<std::pair<std::string, la::AccuracyReport>> rows = {
      {"o", la::accuracy_metrics(o_ref, st.o)},
      {"dq", la::accuracy_metrics(ref.dq, g.dq)},
      {"dk", la::accuracy_metrics(ref.dk, g.dk)},
      {"dv", la::accuracy_metrics(ref.dv, g.dv)}};
  if (!a.out_prefix.empty()) {
    la::save_tensor(g.dq, a.out_prefix + ".dq.f32");
    la::save_tensor(g.dk, a.out_prefix + ".dk.f32");
    la::save_tensor(g.dv, a.out_prefix + ".dv.f32");
  }

  json doc;
  doc["command"] = "bwd";
  doc["input"] = in.source;
  doc["config"] = {{"block_q", cfg.block_q},
                   {"block_kv", cfg.block_kv},
                   {"smooth_k", cfg.smooth_k},
                   {"apply_sm_scale", cfg.apply_sm_scale},
                   {"dov", a.dov},
                   {"dov_v", a.dequantized_v ? "dequantized" : "original"}};
  doc["shape"] = {st.o.rows(), st.o.cols()};
  for (const auto& [id, r] : rows) doc["accuracy"][id] = to_json(r);
  if (!f.csv.empty()) write_report_csv(f.csv, "tensor", rows);
  emit(doc);
  return 0;
}

// --- ablate ---------------------------------------------------------------

struct AblateArgs {
  std::string experiment;
  std::vector<std::uint64_t> seeds;
};

int run_ablate(const CommonFlags& f, const AblateArgs& a) {
  const la::Experiment e = la::parse_experiment(a.experiment);
  const la::SyntheticSpec spec = make_spec(f, la::default_ablation_spec(e));
  const la::AttentionConfig cfg = make_config(f);
  const std::vector<std::uint64_t> seeds = a.seeds.empty() ? la::default_seed_battery() : a.seeds;
  const la::AblationResult res = la::run_ablation(e, spec, cfg, seeds);

  json doc;
  doc["command"] = "ablate";
  doc["experiment"] = res.experiment;
  doc["claim"] = res.claim;
  json sj = to_json(spec);
  sj.erase("seed");
  doc["spec"] = sj;
  doc["config"] = to_json(cfg);
  doc["seeds"] = res.seeds;
  doc["variants"] = json::array();
  for (const auto& v : res.variants) {
    json per_seed = json::array();
    for (std::size_t s = 0; s < v.per_seed.size(); ++s) {
      json row = to_json(v.per_seed[s]);
      row["seed"] = res.seeds[s];
      per_seed.push_back(row);
    }
    doc["variants"].push_back({{"id", v.id}, {"mean", to_json(v.mean)}, {"per_seed", per_seed}});
  }
  if (!res.extras.empty()) doc["extras"] = res.extras;
  doc["verdict"] = res.verdict ? "pass" : "fail";
  if (!f.csv.empty()) la::write_ablation_csv(res, f.csv);
  emit(doc);
  return res.verdict ? 0 : kExitVerdict;
}

// --- enumerate ------------------------------------------------------------

struct EnumerateArgs {
  std::string format;
  double lo = 0.0;
  double hi = 0.0;
};

int run_enumerate(const CommonFlags& f, const EnumerateArgs& a) {
  const la::ElementFormat fmt = a.format == "e2m1" ? la::ElementFormat::kE2M1 : la::ElementFormat::kE4M3;
  const std::vector<float> values =
      la::enumerate_representable(fmt, static_cast<float>(a.lo), static_cast<float>(a.hi));
  json doc;
  doc["command"] = "enumerate";
  doc["format"] = a.format;
  doc["lo"] = a.lo;
  doc["hi"] = a.hi;
  doc["count"] = values.size();
  doc["values"] = values;
  if (!f.csv.empty()) {
    std::ofstream out = open_csv(f.csv);
    out << "format,value\n";
    for (float v : values) out << a.format << ',' << v << '\n';
  }
  emit(doc);
  return 0;
}

// --- gradcheck ------------------------------------------------------------

struct GradcheckArgs {
  std::size_t instances = 20;
  std::size_t max_n = 16;
  std::size_t max_d = 8;
  double epsilon = 1e-4;
  double tolerance = 1e-4;
};

int run_gradcheck(const CommonFlags& f, const GradcheckArgs& a) {
  if (a.epsilon < 1e-5 || a.epsilon > 1e-3) throw UsageError("--eps must lie in [1e-5, 1e-3]");
  la::Rng rng(f.seed);
  json rows = json::array();
  std::ofstream csv;
  if (!f.csv.empty()) {
    csv = open_csv(f.csv);
    csv << "instance,n,d,max_rel_dq,max_rel_dk,max_rel_dv\n";
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < a.instances; ++i) {
    const std::size_t n = 1 + rng.below(a.max_n);
    const std::size_t d = 1 + rng.below(a.max_d);
    const la::Tensor q = la::gaussian_tensor(n, d, rng);
    const la::Tensor k = la::gaussian_tensor(n, d, rng);
    const la::Tensor v = la::gaussian_tensor(n, d, rng);
    const la::Tensor d_o = la::gaussian_tensor(n, d, rng);
    const la::FiniteDifferenceReport r =
        la::finite_difference_check(q, k, v, d_o, a.epsilon, !f.no_sm_scale);
    worst = std::max(worst, r.worst());
    rows.push_back({{"instance", i},
                    {"n", n},
                    {"d", d},
                    {"max_rel_dq", r.max_rel_dq},
                    {"max_rel_dk", r.max_rel_dk},
                    {"max_rel_dv", r.max_rel_dv}});
    if (csv.is_open()) {
      csv << i << ',' << n << ',' << d << ',' << r.max_rel_dq << ',' << r.max_rel_dk << ','
          << r.max_rel_dv << '\n';
    }
  }
  const bool pass = worst <= a.tolerance;
  json doc;
  doc["command"] = "gradcheck";
  doc["seed"] = f.seed;
  doc["epsilon"] = a.epsilon;
  doc["tolerance"] = a.tolerance;
  doc["instances"] = rows;
  doc["max_rel_deviation"] = worst;
  doc["verdict"] = pass ? "pass" : "fail";
  emit(doc);
  return pass ? 0 : kExitVerdict;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Low-bit attention reference and accuracy harness"};
  app.require_subcommand(1);

  CommonFlags flags;

  QuantizeArgs qa;
  CLI::App* quantize = app.add_subcommand("quantize", "Quantize a tensor and report the reconstruction error");
  add_common(quantize, flags, false);
  quantize->add_option("input", qa.input, "Tensor file (default: a synthetic tensor)");
  quantize->add_option("--tensor", qa.tensor, "Synthetic tensor to quantize")
      ->check(CLI::IsMember({"q", "k", "v", "do"}));
  quantize->add_option("--quant", qa.format, "Format")->check(CLI::IsMember({"nvfp4", "mxfp4", "int8"}));
  quantize->add_option("--dump", qa.dump, "Write codes, scales and the reconstruction under this prefix");

  FwdArgs fa;
  CLI::App* fwd = app.add_subcommand("fwd", "Run a forward pass and compare it with the reference");
  add_common(fwd, flags, true);
  fwd->add_option("--impl", fa.impl, "Implementation")
      ->check(CLI::IsMember({"reference", "sage3", "sagebwd"}));
  fwd->add_option("--q", fa.q, "Q tensor file");
  fwd->add_option("--k", fa.k, "K tensor file");
  fwd->add_option("--v", fa.v, "V tensor file");
  fwd->add_option("--out", fa.out, "Write O to this file");

  BwdArgs ba;
  CLI::App* bwd = app.add_subcommand("bwd", "Run the INT8 backward pass and compare it with the reference");
  add_common(bwd, flags, true);
  bwd->add_option("--dov", ba.dov, "Precision of dO V^T")->check(CLI::IsMember({"fp16", "int8"}));
  bwd->add_flag("--dequantized-v", ba.dequantized_v, "Use the dequantized V in dO V^T");
  bwd->add_option("--q", ba.q, "Q tensor file");
  bwd->add_option("--k", ba.k, "K tensor file");
  bwd->add_option("--v", ba.v, "V tensor file");
  bwd->add_option("--do", ba.d_o, "dO tensor file");
  bwd->add_option("--out-prefix", ba.out_prefix, "Write dQ, dK, dV under this prefix");

  AblateArgs aa;
  CLI::App* ablate = app.add_subcommand("ablate", "Run an ablation over a seed battery");
  add_common(ablate, flags, true);
  ablate->add_option("experiment", aa.experiment, "fp4_type | p_scale | dov_precision | smoothing")
      ->required()
      ->check(CLI::IsMember({"fp4_type", "p_scale", "dov_precision", "smoothing"}));
  ablate->add_option("--seeds", aa.seeds, "Seed battery (default 1..10)")->delimiter(',');

  EnumerateArgs ea;
  CLI::App* enumerate = app.add_subcommand("enumerate", "List representable values in [lo, hi]");
  enumerate->add_option("format", ea.format, "e2m1 | e4m3")->required()->check(CLI::IsMember({"e2m1", "e4m3"}));
  enumerate->add_option("lo", ea.lo, "Lower bound")->required();
  enumerate->add_option("hi", ea.hi, "Upper bound")->required();
  enumerate->add_option("--csv", flags.csv, "Also write the values to this CSV file");

  GradcheckArgs ga;
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of the analytic backward");
  gradcheck->add_option("--seed", flags.seed, "Seed of the random instances");
  gradcheck->add_option("--instances", ga.instances, "Number of instances");
  gradcheck->add_option("--max-n", ga.max_n, "Largest N")->check(CLI::Range(1, 16));
  gradcheck->add_option("--max-d", ga.max_d, "Largest d")->check(CLI::Range(1, 8));
  gradcheck->add_option("--eps", ga.epsilon, "Central-difference step");
  gradcheck->add_option("--tol", ga.tolerance, "Largest accepted relative deviation");
  gradcheck->add_flag("--no-sm-scale", flags.no_sm_scale, "Do not multiply S by 1/sqrt(d)");
  gradcheck->add_option("--csv", flags.csv, "Also write per-instance rows to this CSV file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*quantize) return run_quantize(flags, qa);
    if (*fwd) return run_fwd(flags, fa);
    if (*bwd) return run_bwd(flags, ba);
    if (*ablate) return run_ablate(flags, aa);
    if (*enumerate) return run_enumerate(flags, ea);
    if (*gradcheck) return run_gradcheck(flags, ga);
  } catch (const std::exception& e) {
    std::cerr << "lowbit-attn: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}
