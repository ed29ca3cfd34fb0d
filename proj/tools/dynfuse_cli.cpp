#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "dynfuse/config.hpp"
#include "dynfuse/data.hpp"
#include "dynfuse/gradcheck_suite.hpp"
#include "dynfuse/metrics.hpp"
#include "dynfuse/optim.hpp"
#include "dynfuse/rankpool.hpp"

using namespace dynfuse;

namespace {

// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
constexpr int kOk = 0, kFail = 1, kUsage = 2;

struct Globals {
  std::size_t threads = 0;
  bool threads_set = false;
  std::string config;
};

RunConfig load_config(const Globals& g) {
  RunConfig c = g.config.empty() ? run_config_from_json(Json::object()) : load_run_config(g.config);
  if (g.threads_set) c.threads = g.threads;
  return c;
}

void write_text(const fs::path& p, const std::string& s) {
  if (p.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(p.parent_path(), ec);
  }
  detail::write_bytes(p, s);
}

void ensure_dir(const fs::path& d) {
  std::error_code ec;
  fs::create_directories(d, ec);
  if (ec || !fs::is_directory(d)) throw IoError("cannot create directory " + d.string());
}

std::string fmt(double v, int prec = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

// ---- gen-data ----------------------------------------------------------------

int cmd_gen_data(const Globals& g, const std::string& out_dir) {
  const auto cfg = load_config(g);
  const fs::path dir(out_dir);
  auto man = generate_phantom_dataset(cfg.phantom(), dir);
  man = split_dataset(man, cfg.split_ratio, cfg.seed);
  const auto path = dir / "manifest.json";
  save_manifest(path, man);
  std::cout << path.string() << "\n";
  return kOk;
}

// ---- fuse ----------------------------------------------------------------------

struct FuseMethod {
  std::string name;
  std::size_t k = 0;
};

FuseMethod parse_method(const std::string& m) {
  if (m == "exact" || m == "approx" || m == "max") return {m, 0};
  if (m.rfind("chunked:", 0) == 0) {
    const auto num = m.substr(8);
    std::size_t k = 0;
    try {
      std::size_t used = 0;
      k = std::stoul(num, &used);
      if (used != num.size()) k = 0;
    } catch (const std::exception&) {
      k = 0;
    }
    if (k >= 1) return {"chunked", k};
  }
  throw ConfigError("unknown fusion method '" + m + "' (expected exact, approx, chunked:k or max)");
}

int cmd_fuse(const std::string& input, const std::string& method, const std::string& out,
             double lambda) {
  const auto how = parse_method(method);
  const auto vol = load_volume(input);
  const auto [D, H, W] = vol.dims;
  std::vector<Tensor<double>> slices;
  for (std::size_t z = 0; z < D; ++z) {
    slices.emplace_back(Shape{H, W}, std::vector<double>(vol.data.begin() + z * H * W,
                                                         vol.data.begin() + (z + 1) * H * W));
  }
  const SliceSequence<double> seq(std::move(slices));
  std::vector<double> pixels;
  std::size_t rows = H;
  if (how.name == "exact") {
    RankSolverConfig rc;
    rc.lambda = lambda;
    const auto u = ranksvm_solve(seq, rc);
    std::cout << "objective " << std::setprecision(17) << ranksvm_objective(u, smooth_sequence(seq), rc)
              << "\n";
    pixels = u.value.vec();
  } else if (how.name == "approx") {
    pixels = approx_rank_pool(seq).value.vec();
  } else if (how.name == "max") {
    pixels = maxpool_fuse(seq).value.vec();
  } else {
    // one image per chunk, stacked top to bottom
    const auto chunks = chunked_fuse(seq, how.k);
    for (const auto& c : chunks.items()) pixels.insert(pixels.end(), c.vec().begin(), c.vec().end());
    rows = H * chunks.depth();
  }
  write_pgm(out, rows, W, pixels);
  std::cout << out << "\n";
  return kOk;
}

// ---- train / eval ----------------------------------------------------------------

template <typename S>
int train_impl(const RunConfig& rc, const std::string& manifest, const fs::path& out_dir) {
  const auto tc = rc.train_config();
  const auto tr = load_split<S>(manifest, "train", rc.model().input_channels);
  const auto te = load_split<S>(manifest, "test", rc.model().input_channels);
  ensure_dir(out_dir);
  const auto curve_path = out_dir / "curve.csv";
  std::vector<CurveRow> rows;
  write_text(curve_path, curve_csv(rows));
  auto res = train<S>(tc, tr, &te, [&](const CurveRow& r) {
    rows.push_back(r);
    write_text(curve_path, curve_csv(rows));
    std::cerr << "epoch " << r.epoch << " train_loss " << fmt(r.train_loss) << " eval_loss "
              << fmt(r.eval_loss) << "\n";
  });
  auto snapshot = [&](std::size_t e) {
    const auto& r = res.curve[e - 1];
    CheckpointInfo info;
    info.epoch = e;
    info.metrics = Json{{"train_loss", r.train_loss}, {"eval_loss", r.eval_loss}};
    return info;
  };
  checkpoint_save(out_dir / "final.json", res.final_model, snapshot(res.curve.size()));
  checkpoint_save(out_dir / "best.json", res.best_model, snapshot(res.best_epoch));
  std::cout << (out_dir / "final.json").string() << "\n";
  return kOk;
}

int cmd_train(const Globals& g, const std::string& manifest, const std::string& out_dir,
              std::size_t epochs) {
  auto rc = load_config(g);
  if (epochs > 0) rc.train.epochs = epochs;
  return rc.train.precision == Precision::F32 ? train_impl<float>(rc, manifest, out_dir)
                                              : train_impl<double>(rc, manifest, out_dir);
}

template <typename S>
EvalResult evaluate_model(const ModelInstance<S>& m, const Dataset<S>& ds, std::size_t threads) {
  const auto p = forward(m, ds.x, threads);
  return evaluate(ds.labels, std::vector<double>(p.vec().begin(), p.vec().end()));
}

template <typename S>
int eval_impl(const RunConfig& rc, const std::string& ckpt, const std::string& manifest,
              const std::string& split, const std::string& out) {
  const auto m = checkpoint_load<S>(ckpt);
  const auto ds = load_split<S>(manifest, split, m.config.input_channels);
  const auto r = evaluate_model(m, ds, rc.threads);
  for (const auto& w : metric_warnings(r)) std::cerr << "warning: " << w << "\n";
  const auto text = to_json(r).dump(2) + "\n";
  if (!out.empty()) write_text(out, text);
  std::cout << text;
  return kOk;
}

int cmd_eval(const Globals& g, const std::string& ckpt, const std::string& manifest,
             const std::string& split, const std::string& out) {
  const auto rc = load_config(g);
  Json man;
  try {
    man = Json::parse(detail::read_bytes(ckpt));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed checkpoint manifest " + ckpt + ": " + e.what());
  }
  const bool f32 = man.value("dtype", std::string("f64le")) == "f32le";
  return f32 ? eval_impl<float>(rc, ckpt, manifest, split, out)
             : eval_impl<double>(rc, ckpt, manifest, split, out);
}

// ---- bench ---------------------------------------------------------------------

ModelConfig with_variant(ModelConfig m, Variant v) {
  m.variant = v;
  if (v == Variant::Conv3dBaseline) {
    m.use_cbam = false;
    m.fusion = FusionKind::RankPool;
  }
  return m;
}

template <typename S>
int bench_impl(const RunConfig& rc, const std::string& manifest,
               const std::vector<Variant>& variants, std::size_t epochs, const std::string& out) {
  const auto tr = load_split<S>(manifest, "train", rc.model().input_channels);
  std::string csv = "variant,median_s_per_epoch\n";
  for (auto v : variants) {
    auto tc = rc.train_config();
    tc.model = with_variant(tc.model, v);
    Trainer<S> trainer(tc, tr);
    trainer.run_epoch();  // warm-up
    std::vector<double> secs;
    for (std::size_t e = 0; e < epochs; ++e) {
      const auto t0 = std::chrono::steady_clock::now();
      trainer.run_epoch();
      secs.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    std::sort(secs.begin(), secs.end());
    const std::size_t n = secs.size();
    const double median = n % 2 ? secs[n / 2] : 0.5 * (secs[n / 2 - 1] + secs[n / 2]);
    csv += to_string(v) + "," + fmt(median) + "\n";
    std::cerr << to_string(v) << " median " << fmt(median, 3) << " s/epoch\n";
  }
  if (!out.empty()) write_text(out, csv);
  std::cout << csv;
  return kOk;
}

int cmd_bench(const Globals& g, const std::string& manifest, const std::string& variants,
              std::size_t epochs, const std::string& out) {
  const auto rc = load_config(g);
  std::vector<Variant> vs;
  for (const auto& name : split_list(variants)) vs.push_back(enum_parse(name, variant_names(), "variant"));
  if (vs.empty()) throw ConfigError("no variants requested");
  if (epochs < 3) throw ConfigError("bench needs at least 3 timed epochs");
  return rc.train.precision == Precision::F32 ? bench_impl<float>(rc, manifest, vs, epochs, out)
                                              : bench_impl<double>(rc, manifest, vs, epochs, out);
}

// ---- gradcheck -------------------------------------------------------------------

int cmd_gradcheck(const Globals& g, const std::string& fault, std::size_t nseeds,
                  const std::string& only, const std::string& out) {
  if (!fault.empty()) {
    const auto& ops = recorded_op_names();
    if (std::find(ops.begin(), ops.end(), fault) == ops.end()) {
      std::string allowed;
      for (const auto& o : ops) allowed += (allowed.empty() ? "" : ", ") + o;
      throw ConfigError("unknown op '" + fault + "' for --inject-fault (expected one of: " +
                        allowed + ")");
    }
  }
  if (only != "all" && only != "ops" && only != "pipelines")
    throw ConfigError("--only must be all, ops or pipelines");
  if (nseeds < 1) throw ConfigError("--seeds must be >= 1");
  std::vector<GradCase> cases;
  if (only != "pipelines") cases = op_grad_cases();
  if (only != "ops")
    for (auto& c : pipeline_grad_cases()) cases.push_back(std::move(c));
  std::vector<std::uint64_t> seeds;
  for (std::size_t s = 1; s <= nseeds; ++s) seeds.push_back(s);

  std::vector<GradCaseResult> results(cases.size() * seeds.size());
  parallel_for(results.size(), g.threads_set ? g.threads : 0, [&](std::size_t i) {
    results[i] = run_grad_case(cases[i / seeds.size()], seeds[i % seeds.size()], fault);
  });

  Json report = Json::array();
  bool all_ok = true;
  const GradCaseResult* worst = nullptr;
  for (std::size_t c = 0; c < cases.size(); ++c) {
    double worst_err = 0.0;
    bool ok = true;
    std::string err;
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      const auto& r = results[c * seeds.size() + s];
      ok = ok && r.passed;
      if (!r.error.empty()) err = r.error;
      worst_err = std::max(worst_err, r.max_rel_error);
      const double rank = r.error.empty() ? r.max_rel_error : INFINITY;
      const double wrank =
          worst ? (worst->error.empty() ? worst->max_rel_error : INFINITY) : -1.0;
      if (rank > wrank) worst = &r;
      report.push_back({{"case", r.name},
                        {"kind", r.kind},
                        {"seed", r.seed},
                        {"max_rel_error", r.max_rel_error},
                        {"threshold", r.threshold},
                        {"coords", r.coords},
                        {"passed", r.passed},
                        {"error", r.error}});
    }
    all_ok = all_ok && ok;
    char line[256];
    std::snprintf(line, sizeof line, "%-4s %-8s %-40s max_rel_error %.3e (threshold %.0e, %zu seeds)",
                  ok ? "PASS" : "FAIL", cases[c].kind.c_str(), cases[c].name.c_str(), worst_err,
                  cases[c].threshold, seeds.size());
    std::cout << line;
    if (!err.empty()) std::cout << "  error: " << err;
    std::cout << "\n";
  }
  if (worst) {
    std::cout << "worst offender: " << worst->name << " seed " << worst->seed << " max_rel_error "
              << worst->max_rel_error << (worst->error.empty() ? "" : " (" + worst->error + ")")
              << "\n";
  }
  if (!fault.empty()) std::cout << "fault injected into op: " << fault << "\n";
  std::cout << (all_ok ? "gradcheck: all checks passed" : "gradcheck: FAILED") << "\n";
  if (!out.empty()) write_text(out, report.dump(2) + "\n");
  return all_ok ? kOk : kFail;
}

// ---- ablate ----------------------------------------------------------------------

struct AblationRow {
  std::string name;
  ModelConfig model;
};

std::vector<AblationRow> ablation_rows(const ModelConfig& base, bool with_3d) {
  auto a = with_variant(base, Variant::PostFusionA);
  a.use_cbam = true;
  a.fusion = FusionKind::RankPool;
  a.head = HeadKind::Fc;
  std::vector<AblationRow> rows{{"post_fusion_a", a},
                                {"post_fusion_b", with_variant(a, Variant::PostFusionB)},
                                {"pre_fusion", with_variant(a, Variant::PreFusion)}};
  auto svm = a;
  svm.head = HeadKind::Svm;
  rows.push_back({"post_fusion_svm_head", svm});
  auto no_cbam = a;
  no_cbam.use_cbam = false;
  rows.push_back({"post_fusion_no_cbam", no_cbam});
  auto maxp = a;
  maxp.fusion = FusionKind::MaxPool;
  rows.push_back({"post_fusion_maxpool", maxp});
  if (with_3d) rows.push_back({"conv3d_baseline", with_variant(a, Variant::Conv3dBaseline)});
  return rows;
}

template <typename S>
int ablate_impl(const RunConfig& rc, const std::string& manifest, std::size_t nseeds,
                bool with_3d, const fs::path& out_dir) {
  const auto tr = load_split<S>(manifest, "train", rc.model().input_channels);
  const auto te = load_split<S>(manifest, "test", rc.model().input_channels);
  ensure_dir(out_dir);
  const auto rows = ablation_rows(rc.model(), with_3d);
  static const char* kMetrics[] = {"acc", "auc", "f1", "precision", "recall", "ap"};
  std::string csv = "model,seed,acc,auc,f1,precision,recall,ap\n";
  std::vector<std::vector<std::vector<double>>> vals(rows.size());  // row, metric, seed
  for (std::size_t i = 0; i < rows.size(); ++i) {
    vals[i].assign(6, {});
    for (std::size_t s = 0; s < nseeds; ++s) {
      auto tc = rc.train_config();
      tc.model = rows[i].model;
      tc.seed = rc.seed + s;
      const auto res = train<S>(tc, tr, &te);
      const auto r = evaluate_model(res.final_model, te, tc.threads);
      const double m[6] = {r.acc, r.auc, r.f1, r.precision, r.recall, r.ap};
      csv += rows[i].name + "," + std::to_string(tc.seed);
      for (int k = 0; k < 6; ++k) {
        vals[i][k].push_back(m[k]);
        csv += "," + fmt(m[k]);
      }
      csv += "\n";
      std::cerr << rows[i].name << " seed " << tc.seed << " acc " << fmt(r.acc, 3) << "\n";
    }
  }
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  auto sd = [&](const std::vector<double>& v) {
    const double mu = mean(v);
    double s = 0.0;
    for (double x : v) s += (x - mu) * (x - mu);
    return std::sqrt(s / static_cast<double>(v.size()));
  };
  std::string summary = "model,metric,mean,std\n";
  std::string md = "# Ablation table\n\nMean (std) over " + std::to_string(nseeds) +
                   " training seeds, evaluated on the held-out split.\n\n"
                   "| model | acc | auc | f1 | precision | recall | ap |\n"
                   "|---|---|---|---|---|---|---|\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    md += "| " + rows[i].name + " |";
    for (int k = 0; k < 6; ++k) {
      summary += rows[i].name + "," + kMetrics[k] + "," + fmt(mean(vals[i][k])) + "," +
                 fmt(sd(vals[i][k])) + "\n";
      md += " " + fmt(mean(vals[i][k]), 3) + " (" + fmt(sd(vals[i][k]), 3) + ") |";
    }
    md += "\n";
  }
  // Directional claims of the reference ordering: post_fusion_a ahead of
  // every other row on accuracy.
  md += "\n## Directional effects (mean accuracy)\n\n";
  const double a_acc = mean(vals[0][0]);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const double o = mean(vals[i][0]);
    const char* verdict = a_acc > o ? "reproduced" : (a_acc == o ? "tie" : "not reproduced");
    md += "- post_fusion_a (" + fmt(a_acc, 3) + ") > " + rows[i].name + " (" + fmt(o, 3) +
          "): " + verdict + "\n";
  }
  write_text(out_dir / "ablation.csv", csv);
  write_text(out_dir / "ablation_summary.csv", summary);
  write_text(out_dir / "ablation.md", md);
  std::cout << md;
  return kOk;
}

int cmd_ablate(const Globals& g, const std::string& manifest, std::size_t nseeds,
               std::size_t epochs, bool with_3d, const std::string& out_dir) {
  auto rc = load_config(g);
  if (epochs > 0) rc.train.epochs = epochs;
  if (nseeds < 1) throw ConfigError("--seeds must be >= 1");
  return rc.train.precision == Precision::F32
             ? ablate_impl<float>(rc, manifest, nseeds, with_3d, out_dir)
             : ablate_impl<double>(rc, manifest, nseeds, with_3d, out_dir);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Slice-fusion 3D volume classifier: data, fusion, training, evaluation, checks"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  auto* threads_opt =
      app.add_option("--threads", g.threads, "Worker thread cap (0 = hardware concurrency)");
  app.add_option("--config", g.config, "Run configuration JSON (see docs/config.md)");

  std::string out_dir, input, method, out, manifest, ckpt, split = "test", fault, only = "all";
  std::string variants = "post_fusion_b,post_fusion_a,conv3d_baseline";
  std::size_t epochs = 0, bench_epochs = 3, nseeds = 5, ablate_seeds = 3;
  double lambda = 1.0;
  bool with_3d = false;

  auto* gen = app.add_subcommand("gen-data", "Generate the phantom dataset and its split manifest");
  gen->add_option("--out-dir", out_dir, "Output directory")->required();

  auto* fuse = app.add_subcommand("fuse", "Fuse a volume's depth slices into a PGM image");
  fuse->add_option("--input", input, "Input .vol file")->required();
  fuse->add_option("--method", method, "exact | approx | chunked:k | max")->required();
  fuse->add_option("--out", out, "Output .pgm path")->required();
  fuse->add_option("--lambda", lambda, "Hinge weight of the exact ranking objective");

  auto* tr = app.add_subcommand("train", "Train a model; writes curve.csv, best and final checkpoints");
  tr->add_option("--manifest", manifest, "Dataset manifest")->required();
  tr->add_option("--out-dir", out_dir, "Output directory")->required();
  tr->add_option("--epochs", epochs, "Override train.epochs");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint; prints the metrics JSON");
  ev->add_option("--checkpoint", ckpt, "Checkpoint manifest (.json)")->required();
  ev->add_option("--manifest", manifest, "Dataset manifest")->required();
  ev->add_option("--split", split, "train | test")->check(CLI::IsMember({"train", "test"}));
  ev->add_option("--out", out, "Also write the metrics JSON here");

  auto* bench = app.add_subcommand("bench", "Median seconds per training epoch for each variant");
  bench->add_option("--manifest", manifest, "Dataset manifest")->required();
  bench->add_option("--variants", variants, "Comma-separated variant list");
  bench->add_option("--epochs", bench_epochs, "Timed epochs after one warm-up epoch (>= 3)");
  bench->add_option("--out", out, "Also write the CSV here");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference checks of every op and pipeline");
  gc->add_option("--inject-fault", fault, "Bend the backward of this op (harness self-test)");
  gc->add_option("--seeds", nseeds, "Seeds per case");
  gc->add_option("--only", only, "all | ops | pipelines");
  gc->add_option("--out", out, "Write the per-seed JSON report here");

  auto* ab = app.add_subcommand("ablate", "Train and evaluate every ablation row over several seeds");
  ab->add_option("--manifest", manifest, "Dataset manifest")->required();
  ab->add_option("--out-dir", out_dir, "Output directory")->required();
  ab->add_option("--seeds", ablate_seeds, "Training seeds per row (config seed + 0..n-1)");
  ab->add_option("--epochs", epochs, "Override train.epochs");
  ab->add_flag("--with-3d", with_3d, "Also include the 3D convolution baseline row");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }
  g.threads_set = threads_opt->count() > 0;

  try {
    if (*gen) return cmd_gen_data(g, out_dir);
    if (*fuse) return cmd_fuse(input, method, out, lambda);
    if (*tr) return cmd_train(g, manifest, out_dir, epochs);
    if (*ev) return cmd_eval(g, ckpt, manifest, split, out);
    if (*bench) return cmd_bench(g, manifest, variants, bench_epochs, out);
    if (*gc) return cmd_gradcheck(g, fault, nseeds, only, out);
    if (*ab) return cmd_ablate(g, manifest, ablate_seeds, epochs, with_3d, out_dir);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFail;
  }
  return kUsage;
}
