#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "glaucad/glaucad.hpp"
#include "glaucad/service.hpp"

using namespace glaucad;
namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitRuntime = 4;

std::string fmt(double v, int decimals = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

nlohmann::json read_json(const fs::path& path) {
  try {
    return nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

// Model config for a weight file: an explicit JSON (a ModelConfig, or a
// checkpoint sidecar holding one under "model"), else best.json next to the
// weights, else the variant recorded in the container.
ModelConfig resolve_model(const fs::path& weights, const std::string& config_path) {
  fs::path cfg_file = config_path;
  if (cfg_file.empty() && fs::exists(weights.parent_path() / "best.json")) cfg_file = weights.parent_path() / "best.json";
  if (!cfg_file.empty()) {
    const auto j = read_json(cfg_file);
    return (j.contains("model") ? j.at("model") : j).get<ModelConfig>();
  }
  const auto decoded = decode_weights<float>(detail::read_file(weights));
  return ModelConfig::named(decoded.manifest.variant);
}

struct TrainFlags {
  std::string model = "tiny64";
  std::string model_config;
  std::string init_weights;
  std::size_t epochs = 120;
  std::size_t patience = 10;
  std::size_t batch = 32;
  std::size_t folds = 5;
  double lr = 1e-4;
  std::uint64_t seed = 0;
  bool no_augment = false;
  double crop_fraction = 0.9;
  double flip_probability = 0.5;
  double brightness_sigma = 0.8;
  double dropout = -1;

  void add_to(CLI::App* app) {
    app->add_option("--model", model, "Model variant: tiny, tiny64, vgg16_fcn")->capture_default_str();
    app->add_option("--model-config", model_config, "ModelConfig JSON (overrides --model)");
    app->add_option("--init", init_weights, "Weights to start from; missing layers are freshly initialized");
    app->add_option("--epochs", epochs, "Maximum epochs")->capture_default_str();
    app->add_option("--patience", patience, "Early-stopping patience")->capture_default_str();
    app->add_option("--batch", batch, "Batch size")->capture_default_str();
    app->add_option("--lr", lr, "ADAM learning rate")->capture_default_str();
    app->add_option("--seed", seed, "Training seed")->capture_default_str();
    app->add_flag("--no-augment", no_augment, "Disable augmentation");
    app->add_option("--crop-fraction", crop_fraction, "Random crop fraction (1 disables cropping)")->capture_default_str();
    app->add_option("--flip-probability", flip_probability)->capture_default_str();
    app->add_option("--brightness-sigma", brightness_sigma)->capture_default_str();
    app->add_option("--dropout", dropout, "Override the model's dropout rate");
  }

  ModelConfig model_config_value() const {
    ModelConfig cfg = model_config.empty() ? ModelConfig::named(model)
                                           : [&] {
                                               const auto j = read_json(model_config);
                                               return (j.contains("model") ? j.at("model") : j).get<ModelConfig>();
                                             }();
    if (dropout >= 0) cfg.dropout_rate = dropout;
    cfg.validate();
    return cfg;
  }

  TrainConfig train_config() const {
    TrainConfig tc;
    tc.max_epochs = epochs;
    tc.patience = patience;
    tc.batch_size = batch;
    tc.num_folds = folds;
    tc.seed = seed;
    tc.augment = !no_augment;
    tc.augment_config = {crop_fraction, flip_probability, brightness_sigma};
    tc.adam.learning_rate = lr;
    tc.validate();
    return tc;
  }

  ModelWeights<float> initial_weights(const ModelConfig& cfg) const {
    if (init_weights.empty()) {
      Rng rng(seed);
      return build_model<float>(cfg, rng);
    }
    auto loaded = load_weights<float>(init_weights, cfg, true, seed);
    for (const auto& name : loaded.fresh) std::cerr << "init: fresh " << name << '\n';
    for (const auto& name : loaded.ignored) std::cerr << "init: ignored " << name << '\n';
    return std::move(loaded.weights);
  }
};

void print_epoch(const EpochRecord& r, const std::string& prefix = "") {
  std::cout << prefix << "epoch " << r.epoch << " train_loss " << fmt(r.train_loss) << " train_acc "
            << fmt(r.train_acc) << " val_loss " << fmt(r.val_loss) << " val_acc " << fmt(r.val_acc) << std::endl;
}

nlohmann::json train_report_json(const TrainReport& r) {
  return {{"best_epoch", r.best_epoch},
          {"stopped_epoch", r.stopped_epoch},
          {"early_stopped", r.early_stopped},
          {"best_val_loss", r.best_val_loss},
          {"checkpoint_id", r.checkpoint_id},
          {"val_metrics", r.val_metrics}};
}

// ---- curves -----------------------------------------------------------------

struct Series {
  std::string name;
  std::vector<double> x, y;
  std::string color;
};

std::string svg_plot(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                     const std::vector<Series>& series, std::array<double, 4> box = {0, 0, 0, 0}) {
  const double W = 640, H = 420, L = 70, R = 20, T = 40, B = 55;
  double x0 = box[0], x1 = box[1], y0 = box[2], y1 = box[3];
  if (x0 == x1) {
    x0 = y0 = std::numeric_limits<double>::infinity();
    x1 = y1 = -std::numeric_limits<double>::infinity();
    for (const auto& s : series)
      for (std::size_t i = 0; i < s.x.size(); ++i) {
        x0 = std::min(x0, s.x[i]);
        x1 = std::max(x1, s.x[i]);
        y0 = std::min(y0, s.y[i]);
        y1 = std::max(y1, s.y[i]);
      }
    if (!(x1 > x0)) x1 = x0 + 1;
    if (!(y1 > y0)) y1 = y0 + 1;
    y0 = std::min(y0, 0.0);
  }
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  std::ostringstream os;
  os << R"(<svg xmlns="http://www.w3.org/2000/svg" width=")" << W << R"(" height=")" << H
     << R"(" font-family="sans-serif" font-size="12">)" << '\n';
  os << R"(<rect width="100%" height="100%" fill="white"/>)" << '\n';
  os << R"(<text x=")" << W / 2 << R"(" y="22" text-anchor="middle" font-size="15">)" << title << "</text>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4, yv = y0 + (y1 - y0) * i / 4;
    os << "<text x=\"" << px(xv) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << fmt(xv, 2)
       << "</text>\n";
    os << "<text x=\"" << L - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << fmt(yv, 2) << "</text>\n";
  }
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">" << xlabel
     << "</text>\n";
  os << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
     << (T + H - B) / 2 << ")\">" << ylabel << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    os << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i) os << (i ? " " : "") << fmt(px(s.x[i]), 2) << ',' << fmt(py(s.y[i]), 2);
    os << "\"/>\n";
    os << "<text x=\"" << W - R - 130 << "\" y=\"" << T + 16 * (k + 1) << "\" fill=\"" << s.color << "\">"
       << s.name << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

// ---- verbs --------------------------------------------------------------------

int run_synth(const fs::path& out, const SyntheticConfig& cfg) {
  const auto corpus = generate_synthetic_corpus(cfg, out);
  for (const auto& [split, m] : corpus.splits) {
    const auto c = m.class_counts();
    std::cout << split << ": " << m.size() << " images (" << c[0] << " normal, " << c[1] << " glaucoma)\n";
  }
  std::cout << "metadata: " << corpus.metadata_path.string() << '\n';
  return kExitOk;
}

int run_train(const TrainFlags& f, const fs::path& data, const std::string& train_manifest,
              const std::string& val_manifest, const fs::path& out) {
  const auto cfg = f.model_config_value();
  auto tc = f.train_config();
  tc.checkpoint_dir = out;
  fs::create_directories(out);
  const auto tm = load_manifest(train_manifest.empty() ? data / "train.tsv" : fs::path(train_manifest));
  const auto vm = load_manifest(val_manifest.empty() ? data / "val.tsv" : fs::path(val_manifest));
  const auto train = load_samples(tm, cfg.input_size), val = load_samples(vm, cfg.input_size);
  std::cout << "model " << cfg.variant_name << " (" << parameter_count(cfg) << " parameters), " << train.size()
            << " train / " << val.size() << " val" << std::endl;
  const auto res = fit_with_early_stopping<float>(tc, cfg, f.initial_weights(cfg), train, val,
                                                  [](const EpochRecord& r) { print_epoch(r); });
  write_json(out / "report.json", train_report_json(res.report));
  write_text(out / "roc.csv", roc_csv(res.report.val_metrics.roc));
  std::cout << "best epoch " << res.report.best_epoch << " val_loss " << fmt(res.report.best_val_loss)
            << (res.report.early_stopped ? " (early stop at " + std::to_string(res.report.stopped_epoch) + ")" : "")
            << "\ncheckpoint " << (out / "best.mdnw").string() << '\n';
  return kExitOk;
}

int run_cv(const TrainFlags& f, const fs::path& manifest, const fs::path& out) {
  const auto cfg = f.model_config_value();
  auto tc = f.train_config();
  tc.checkpoint_dir = out;
  fs::create_directories(out);
  const auto m = load_manifest(manifest);
  const auto samples = load_samples(m, cfg.input_size);
  try {
    const auto rep = cross_validate<float>(tc, cfg, samples, [](std::size_t k, const EpochRecord& r) {
      print_epoch(r, "fold " + std::to_string(k + 1) + " ");
    });
    write_json(out / "cv.json", cross_val_json(rep));
    for (const auto& [k, ms] : rep.aggregate) std::cout << k << ' ' << format_mean_std(ms) << '\n';
    std::cout << "pooled_auc " << fmt(rep.pooled_auc) << '\n';
  } catch (const CrossValidationError& e) {
    write_json(out / "cv.json", cross_val_json(e.partial()));
    throw;
  }
  return kExitOk;
}

int run_eval(const fs::path& manifest, const fs::path& weights, const std::string& model_config,
             const fs::path& out, const std::string& scores_out, const std::string& roc_out) {
  const auto m = load_manifest(manifest);
  const auto cfg = resolve_model(weights, model_config);
  const auto loaded = load_weights<float>(weights, cfg);
  const auto ev = evaluate_model<float>(cfg, loaded.weights, load_samples(m, cfg.input_size));
  const auto report = evaluate_scores(ev.scores, ev.labels);
  write_text(out, metric_report_json(report));
  if (!scores_out.empty()) {
    std::ostringstream os;
    os.precision(17);
    os << "image,label,p_glaucoma,predicted\n";
    for (std::size_t i = 0; i < ev.scores.size(); ++i)
      os << m.entries[i].image << ',' << ev.labels[i] << ',' << ev.scores[i] << ','
         << class_name(ev.predictions[i].predicted_class) << '\n';
    write_text(scores_out, os.str());
  }
  if (!roc_out.empty()) write_text(roc_out, roc_csv(report.roc));
  std::cout << "accuracy " << fmt(report.accuracy) << " precision " << fmt(report.precision) << " recall "
            << fmt(report.recall) << " f1 " << fmt(report.f1) << " auc " << fmt(report.auc) << '\n';
  return kExitOk;
}

int run_infer(const fs::path& image, const fs::path& weights, const std::string& model_config,
              const std::string& gradcam_out, const std::string& overlay_out, const std::string& mask) {
  const auto cfg = resolve_model(weights, model_config);
  const auto loaded = load_weights<float>(weights, cfg);
  ImageSample s;
  s.pixels = read_image(image);
  if (!mask.empty()) s.lesion_mask = read_mask(mask);
  const auto prepared = center_crop_resize(s, cfg.input_size);
  const auto loc = localize(cfg, loaded.weights, prepared.pixels);
  nlohmann::json j{{"image", image.string()},
                   {"probability_glaucoma", loc.prediction.p_glaucoma},
                   {"probability_normal", loc.prediction.p_normal},
                   {"predicted_class", class_name(loc.prediction.predicted_class)},
                   {"localized", loc.gated}};
  if (loc.gated) {
    if (!gradcam_out.empty()) {
      write_png(heatmap_to_image(*loc.heatmap), gradcam_out);
      j["heatmap_png"] = gradcam_out;
    }
    if (!overlay_out.empty()) {
      write_png(*loc.overlay, overlay_out);
      j["overlay_png"] = overlay_out;
    }
    if (prepared.lesion_mask) j["pointing_hit"] = pointing_hit(*loc.heatmap, *prepared.lesion_mask);
  } else if (!gradcam_out.empty() || !overlay_out.empty()) {
    j["note"] = "predicted normal: no localization map produced";
  }
  std::cout << j.dump(2) << '\n';
  return kExitOk;
}

int run_curves(const std::string& epochs, const std::string& roc, const std::string& report, const fs::path& out) {
  if (epochs.empty() && roc.empty() && report.empty()) throw ConfigError("curves: give --epochs, --roc or --report");
  fs::create_directories(out);
  if (!epochs.empty()) {
    const auto recs = parse_epochs_csv(read_text(epochs));
    Series tl{"train loss", {}, {}, "#1f77b4"}, vl{"validation loss", {}, {}, "#d62728"};
    Series ta{"train accuracy", {}, {}, "#1f77b4"}, va{"validation accuracy", {}, {}, "#d62728"};
    for (const auto& r : recs) {
      for (auto* s : {&tl, &vl, &ta, &va}) s->x.push_back(static_cast<double>(r.epoch));
      tl.y.push_back(r.train_loss);
      vl.y.push_back(r.val_loss);
      ta.y.push_back(r.train_acc);
      va.y.push_back(r.val_acc);
    }
    write_text(out / "loss.svg", svg_plot("Loss", "epoch", "cross-entropy", {tl, vl}));
    const double e1 = recs.empty() ? 1.0 : static_cast<double>(recs.back().epoch);
    write_text(out / "accuracy.svg", svg_plot("Accuracy", "epoch", "accuracy", {ta, va}, {1.0, std::max(e1, 2.0), 0, 1}));
    std::cout << "wrote " << (out / "loss.svg").string() << ", " << (out / "accuracy.svg").string() << '\n';
  }
  std::vector<RocPoint> points;
  if (!report.empty()) {
    const auto j = read_json(report);
    const auto& m = j.contains("val_metrics") ? j.at("val_metrics") : j;
    for (const auto& p : m.at("roc"))
      points.push_back({p.at("threshold").is_null() ? std::numeric_limits<double>::infinity()
                                                    : p.at("threshold").get<double>(),
                        p.at("fpr").get<double>(), p.at("tpr").get<double>()});
  } else if (!roc.empty()) {
    std::istringstream in(read_text(roc));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      RocPoint p;
      char th[64];
      if (std::sscanf(line.c_str(), "%63[^,],%lf,%lf", th, &p.fpr, &p.tpr) != 3)
        throw DataError("roc CSV: malformed row '" + line + "'");
      p.threshold = std::string(th) == "inf" ? std::numeric_limits<double>::infinity() : std::stod(th);
      points.push_back(p);
    }
  }
  if (!points.empty()) {
    Series curve{"ROC", {}, {}, "#d62728"}, chance{"chance", {0, 1}, {0, 1}, "#999999"};
    for (const auto& p : points) {
      curve.x.push_back(p.fpr);
      curve.y.push_back(p.tpr);
    }
    write_text(out / "roc.svg", svg_plot("ROC", "false positive rate", "true positive rate", {curve, chance}, {0, 1, 0, 1}));
    std::cout << "wrote " << (out / "roc.svg").string() << '\n';
  }
  return kExitOk;
}

httplib::Server* g_server = nullptr;

int run_serve(ServiceConfig scfg, const std::string& config_path) {
  if (!config_path.empty()) {
    const auto j = read_json(config_path);
    scfg = service_config_from_json(j);
  }
  if (scfg.weights.empty()) throw ConfigError("serve: --weights or --config with \"weights\" is required");
  const auto svc = InferenceService::from_config(scfg);
  httplib::Server server;
  svc->install(server);
  g_server = &server;
  std::signal(SIGINT, [](int) {
    if (g_server) g_server->stop();
  });
  std::signal(SIGTERM, [](int) {
    if (g_server) g_server->stop();
  });
  std::cout << "serving " << svc->model_id() << " on http://" << scfg.host << ':' << scfg.port << std::endl;
  if (!server.listen(scfg.host, scfg.port)) throw Error("serve: cannot listen on " + scfg.host + ":" + std::to_string(scfg.port));
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Glaucoma detection and localization toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "glaucad 1.0.0");

  SyntheticConfig synth_cfg;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic fundus corpus");
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--seed", synth_cfg.seed)->capture_default_str();
  synth->add_option("--train", synth_cfg.train_count)->capture_default_str();
  synth->add_option("--val", synth_cfg.val_count)->capture_default_str();
  synth->add_option("--test", synth_cfg.test_count)->capture_default_str();
  synth->add_option("--extent", synth_cfg.image_extent, "Image height in pixels")->capture_default_str();
  synth->add_option("--noise", synth_cfg.noise_sigma)->capture_default_str();

  TrainFlags train_flags;
  std::string train_data, train_manifest, val_manifest, train_out;
  auto* train = app.add_subcommand("train", "Train with early stopping and checkpoint the best epoch");
  train_flags.add_to(train);
  train->add_option("--data", train_data, "Corpus directory holding train.tsv and val.tsv");
  train->add_option("--train-manifest", train_manifest);
  train->add_option("--val-manifest", val_manifest);
  train->add_option("--out", train_out, "Checkpoint directory")->required();

  TrainFlags cv_flags;
  std::string cv_manifest, cv_out;
  auto* cv = app.add_subcommand("cv", "Stratified k-fold cross-validation");
  cv_flags.add_to(cv);
  cv->add_option("--manifest", cv_manifest)->required();
  cv->add_option("--folds", cv_flags.folds)->capture_default_str();
  cv->add_option("--out", cv_out)->required();

  std::string eval_manifest, eval_weights, eval_model, eval_out, eval_scores, eval_roc;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest");
  eval->add_option("--manifest", eval_manifest)->required();
  eval->add_option("--weights", eval_weights)->required();
  eval->add_option("--model-config", eval_model);
  eval->add_option("--out", eval_out, "MetricReport JSON path")->required();
  eval->add_option("--scores", eval_scores, "Per-image scores CSV");
  eval->add_option("--roc", eval_roc, "ROC CSV");

  std::string infer_image, infer_weights, infer_model, infer_gradcam, infer_overlay, infer_mask;
  auto* infer = app.add_subcommand("infer", "Classify one image and localize if glaucomatous");
  infer->add_option("--image", infer_image)->required();
  infer->add_option("--weights", infer_weights)->required();
  infer->add_option("--model-config", infer_model);
  infer->add_option("--gradcam-out", infer_gradcam, "Heatmap PNG path");
  infer->add_option("--overlay-out", infer_overlay, "Overlay PNG path");
  infer->add_option("--mask", infer_mask, "Lesion mask for a pointing-game check");

  std::string curves_epochs, curves_roc, curves_report, curves_out;
  auto* curves = app.add_subcommand("curves", "Render loss, accuracy and ROC plots as SVG");
  curves->add_option("--epochs", curves_epochs, "epochs.csv");
  curves->add_option("--roc", curves_roc, "roc.csv");
  curves->add_option("--report", curves_report, "MetricReport or training report JSON");
  curves->add_option("--out", curves_out)->required();

  ServiceConfig serve_cfg;
  std::string serve_config, serve_weights, serve_model;
  auto* serve = app.add_subcommand("serve", "Run the HTTP inference service");
  serve->add_option("--config", serve_config, "Service config JSON");
  serve->add_option("--weights", serve_weights);
  serve->add_option("--model-config", serve_model);
  serve->add_option("--host", serve_cfg.host)->capture_default_str();
  serve->add_option("--port", serve_cfg.port)->capture_default_str();
  serve->add_option("--max-upload-bytes", serve_cfg.max_upload_bytes)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*synth) return run_synth(synth_out, synth_cfg);
    if (*train) {
      if (train_data.empty() && (train_manifest.empty() || val_manifest.empty()))
        throw ConfigError("train: give --data or both --train-manifest and --val-manifest");
      return run_train(train_flags, train_data, train_manifest, val_manifest, train_out);
    }
    if (*cv) return run_cv(cv_flags, cv_manifest, cv_out);
    if (*eval) return run_eval(eval_manifest, eval_weights, eval_model, eval_out, eval_scores, eval_roc);
    if (*infer) return run_infer(infer_image, infer_weights, infer_model, infer_gradcam, infer_overlay, infer_mask);
    if (*curves) return run_curves(curves_epochs, curves_roc, curves_report, curves_out);
    if (*serve) {
      if (!serve_weights.empty()) serve_cfg.weights = serve_weights;
      if (!serve_model.empty()) serve_cfg.model_config = serve_model;
      return run_serve(serve_cfg, serve_config);
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
