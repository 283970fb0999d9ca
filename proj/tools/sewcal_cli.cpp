#include "sewcal/sewcal.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using namespace sewcal;

namespace {

constexpr const char* kToolVersion = "0.1.0";

// FNV-1a over the serialized config; stable across platforms and builds.
std::string config_hash(const std::string& text) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void write_json(const std::string& path, const nlohmann::json& j) {
  if (const auto dir = fs::path(path).parent_path(); !dir.empty()) fs::create_directories(dir);
  detail::write_file(path, j.dump(2) + "\n");
}

std::string history_csv(const TrainReport& r) {
  std::ostringstream out;
  out.precision(17);
  out << "epoch,step,pull_i2t,push_i2t,pull_t2i,push_t2i,cls_i2t,cls_t2i,sew,mcm,total,grad_norm\n";
  for (const auto& s : r.history) {
    out << s.epoch << ',' << s.step << ',' << s.pull_i2t << ',' << s.push_i2t << ',' << s.pull_t2i << ','
        << s.push_t2i << ',' << s.cls_i2t << ',' << s.cls_t2i << ',' << s.sew << ',' << s.mcm << ',' << s.total << ','
        << s.grad_norm << '\n';
  }
  return out.str();
}

// ---- subcommand state ----

struct SynthArgs {
  CorpusConfig corpus;
  std::uint64_t seed = 1;
  std::string out = "corpus.json";
};

struct TrainArgs {
  std::string config_file;
  std::map<std::string, std::string> overrides;  // key -> raw value, flags win over the file
  bool quiet = false;
};

struct FeatureArgs {
  std::string checkpoint;
  std::string corpus;
  std::string split = "train";
  bool bn_at_eval = false;
  bool strip_decoder = false;
  std::string out;
};

struct EvalArgs {
  FeatureArgs f;
  bool rerank = false;
  RerankParams rp;
};

struct GradArgs {
  std::string loss = "all";
  NamedCheckConfig nc;
};

ModelParams load_model(const FeatureArgs& a) {
  ModelParams p = load_checkpoint(a.checkpoint);
  if (a.strip_decoder) p = deserialize_checkpoint(serialize_checkpoint(p.without_decoder()));
  return p;
}

SplitFeatures features_for(const FeatureArgs& a) {
  const Corpus corpus = load_corpus(a.corpus);
  return split_features(corpus, parse_split(a.split), load_model(a), a.bn_at_eval);
}

// ---- subcommands ----

int run_synth(const SynthArgs& a) {
  const Corpus c = generate_corpus(a.corpus, a.seed);
  if (const auto dir = fs::path(a.out).parent_path(); !dir.empty()) fs::create_directories(dir);
  save_corpus(c, a.out);
  std::cout << "wrote " << a.out << ": " << c.images.size() << " images, " << c.captions.size() << " captions, "
            << c.train_identities.size() << " train / " << c.test_identities.size() << " test identities\n";
  return 0;
}

int run_train(const TrainArgs& a) {
  ExperimentConfig cfg;
  if (!a.config_file.empty()) parse_config_into(cfg, detail::read_file(a.config_file));
  for (const auto& [key, value] : a.overrides) set_config_value(cfg, key, value);
  validate(cfg);
  require(!cfg.corpus_path.empty(), ErrorKind::kValue, "no corpus given (config key 'corpus' or --corpus)");
  const Corpus corpus = load_corpus(cfg.corpus_path);

  const fs::path out(cfg.out_dir);
  fs::create_directories(out);
  const std::string cfg_text = serialize_config(cfg);
  const int spe = steps_per_epoch(corpus, cfg.train.batch_size);
  auto result = train(corpus, cfg, [&](const StepRecord& s) {
    if (!a.quiet && (s.step + 1) % spe == 0) {
      std::cout << "epoch " << s.epoch + 1 << "/" << cfg.train.epochs << "  total " << s.total << "  sew " << s.sew
                << "  mcm " << s.mcm << "\n";
    }
  });

  save_checkpoint(result.params, (out / "model.ckpt").string());
  save_checkpoint(result.params.without_decoder(), (out / "model.nodec.ckpt").string());
  detail::write_file((out / "config.cfg").string(), cfg_text);
  detail::write_file((out / "report.csv").string(), history_csv(result.report));
  const auto& h = result.report.history;
  write_json((out / "report.json").string(),
             {{"epochs", cfg.train.epochs},
              {"steps_per_epoch", result.report.steps_per_epoch},
              {"steps", h.size()},
              {"wall_seconds", result.report.wall_seconds},
              {"epoch_mean_total", result.report.epoch_mean_total},
              {"final_total", h.empty() ? 0.0 : h.back().total},
              {"final_sew", h.empty() ? 0.0 : h.back().sew},
              {"final_mcm", h.empty() ? 0.0 : h.back().mcm}});
  write_json((out / "manifest.json").string(),
             {{"config_hash", config_hash(cfg_text)},
              {"seed", cfg.train.seed},
              {"corpus", cfg.corpus_path},
              {"versions",
               {{"tool", kToolVersion},
                {"config", kConfigVersion},
                {"corpus", kCorpusVersion},
                {"checkpoint", kCheckpointVersion}}},
              {"artifacts", {"model.ckpt", "model.nodec.ckpt", "config.cfg", "report.csv", "report.json"}}});
  std::cout << "wrote " << (out / "model.ckpt").string() << " (" << result.report.wall_seconds << " s)\n";
  return 0;
}

int run_eval(const EvalArgs& a) {
  const auto f = features_for(a.f);
  EvalOptions opt;
  opt.rerank = a.rerank;
  opt.rerank_params = a.rp;
  const auto r = evaluate_features(f, opt);
  const nlohmann::json metrics = {{"rank1", r.rank1},
                                  {"rank5", r.rank5},
                                  {"rank10", r.rank10},
                                  {"reranked", r.reranked},
                                  {"gap", svd_spectrum_gap(f.image_cls, f.text_cls).gap}};
  if (!a.f.out.empty()) write_json(a.f.out, metrics);
  std::cout << metrics.dump() << "\n";
  return 0;
}

int run_gap(const FeatureArgs& a) {
  const auto f = features_for(a);
  const auto r = svd_spectrum_gap(f.image_cls, f.text_cls);
  const nlohmann::json j = {{"gap", r.gap},
                            {"image_singular_values", r.image_singular_values},
                            {"text_singular_values", r.text_singular_values}};
  if (!a.out.empty()) write_json(a.out, j);
  std::cout << "gap " << r.gap << "\n";
  return 0;
}

int run_dump(const FeatureArgs& a) {
  const auto f = features_for(a);
  if (const auto dir = fs::path(a.out).parent_path(); !dir.empty()) fs::create_directories(dir);
  detail::write_file(a.out, features_to_csv(f));
  std::cout << "wrote " << a.out << ": " << f.image_cls.rows() << " image rows, " << f.text_cls.rows()
            << " text rows\n";
  return 0;
}

int run_grad_check(const GradArgs& a) {
  std::vector<std::string> names;
  if (a.loss == "all") {
    names = {"sew", "cls", "mcm", "total"};
  } else {
    names = {a.loss};
  }
  bool ok = true;
  for (const auto& n : names) {
    const auto r = run_named_grad_check(n, a.nc);
    const bool pass = r.max_rel_err <= 1e-4;
    ok &= pass;
    std::cout << n << ": max_rel_err " << r.max_rel_err << " over " << r.checked << " coordinates "
              << (pass ? "(ok)" : "(exceeds 1e-4)") << "\n";
  }
  return ok ? 0 : 1;
}

void add_feature_options(CLI::App* sub, FeatureArgs& f, bool out_required, const std::string& out_help) {
  sub->add_option("--checkpoint", f.checkpoint, "model checkpoint")->required();
  sub->add_option("--corpus", f.corpus, "corpus JSON")->required();
  sub->add_option("--split", f.split, "split to evaluate (train|test)")
      ->check(CLI::IsMember({"train", "test"}))
      ->capture_default_str();
  sub->add_flag("--bn-at-eval", f.bn_at_eval, "apply running-statistics BatchNorm to the [CLS] features");
  sub->add_flag("--strip-decoder", f.strip_decoder, "drop decoder parameters before evaluating");
  auto* o = sub->add_option("-o,--out", f.out, out_help);
  if (out_required) o->required();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-encoder text-to-person retrieval trainer and analysis tool"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "generate a synthetic person/caption corpus");
  s->add_option("--ids", synth.corpus.num_identities, "number of identities")->capture_default_str();
  s->add_option("--images-per-id", synth.corpus.images_per_identity, "images per identity")->capture_default_str();
  s->add_option("--captions-per-image", synth.corpus.captions_per_image, "captions per image")->capture_default_str();
  s->add_option("--test-ids", synth.corpus.test_identities, "held-out identities (-1: a quarter)")
      ->capture_default_str();
  s->add_option("--len-min", synth.corpus.verbosity_min, "shortest caption in tokens")->capture_default_str();
  s->add_option("--len-max", synth.corpus.verbosity_max, "longest caption in tokens")->capture_default_str();
  s->add_option("--grid", synth.corpus.grid_size, "patch grid side")->capture_default_str();
  s->add_option("--noise", synth.corpus.noise_prob, "patch noise probability")->capture_default_str();
  s->add_option("--seed", synth.seed, "generator seed")->capture_default_str();
  s->add_option("-o,--out", synth.out, "output corpus JSON")->capture_default_str();

  TrainArgs train_args;
  auto* t = app.add_subcommand("train", "train the dual encoder (config file plus flag overrides)");
  t->add_option("-c,--config", train_args.config_file, "config file (key = value, version = train_v1)")
      ->check(CLI::ExistingFile);
  t->add_flag("-q,--quiet", train_args.quiet, "no per-epoch progress");
  std::map<std::string, std::string> raw;
  for (const auto& f : config_fields()) {
    auto* opt = t->add_option("--" + f.key, raw[f.key], f.help);
    if (f.is_flag) {
      opt->expected(0, 1)->type_name("[true|false]");  // a bare switch means true
    } else {
      opt->type_name("VALUE");
    }
  }

  EvalArgs eval_args;
  auto* e = app.add_subcommand("eval", "text-to-image Rank@k on one split; writes metrics JSON");
  add_feature_options(e, eval_args.f, false, "metrics JSON path");
  e->add_flag("--rerank", eval_args.rerank, "apply k-reciprocal re-ranking");
  e->add_option("--k1", eval_args.rp.k1, "re-ranking neighbourhood size")->capture_default_str();
  e->add_option("--k2", eval_args.rp.k2, "re-ranking query-expansion size")->capture_default_str();
  e->add_option("--lambda-mix", eval_args.rp.lambda_mix, "weight of the original distance")->capture_default_str();

  FeatureArgs gap_args;
  auto* g = app.add_subcommand("analyze-gap", "covariance spectra of image and text [CLS] features");
  add_feature_options(g, gap_args, false, "report JSON path");

  FeatureArgs dump_args;
  auto* d = app.add_subcommand("dump-features", "write [CLS] features of a split as CSV");
  add_feature_options(d, dump_args, true, "feature CSV path");

  GradArgs grad_args;
  auto* gc = app.add_subcommand("grad-check", "analytic vs finite-difference gradients (n = 8, d = 16)");
  gc->add_option("--loss", grad_args.loss, "sew | cls | mcm | total | all")
      ->check(CLI::IsMember({"sew", "cls", "mcm", "total", "all"}))
      ->capture_default_str();
  gc->add_option("--trials", grad_args.nc.trials, "random coordinates per check")->capture_default_str();
  gc->add_option("--eps", grad_args.nc.eps, "central-difference step")->capture_default_str();
  gc->add_option("--seed", grad_args.nc.seed, "seed for data, parameters and coordinates")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForVersion& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    std::cerr << "error[usage]: " << ex.what() << "\n";
    std::cerr << "run with --help for usage\n";
    return 2;
  }

  try {
    if (*s) return run_synth(synth);
    if (*t) {
      for (const auto& f : config_fields()) {
        auto* opt = t->get_option("--" + f.key);
        if (opt->count() == 0) continue;
        const std::string& v = raw[f.key];
        train_args.overrides[f.key] = (f.is_flag && v.empty()) ? "true" : v;
      }
      return run_train(train_args);
    }
    if (*e) return run_eval(eval_args);
    if (*g) return run_gap(gap_args);
    if (*d) return run_dump(dump_args);
    if (*gc) return run_grad_check(grad_args);
  } catch (const Error& ex) {
    std::cerr << "error[" << error_kind_name(ex.kind()) << "]: " << ex.what() << "\n";
    return 1;
  } catch (const std::exception& ex) {
    std::cerr << "error[internal]: " << ex.what() << "\n";
    return 1;
  }
  return 2;
}
