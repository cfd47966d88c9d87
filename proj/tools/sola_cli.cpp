// Command-line front end. Every failure prints {"error": kind, "message": ...}
// on stderr and exits non-zero.

#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "sola/sola.hpp"

namespace {

using nlohmann::json;

int fail(const std::string& kind, const std::string& message, int code) {
  std::cerr << json{{"error", kind}, {"message", message}}.dump() << std::endl;
  return code;
}

sola::data::BlendRecipe recipe_from(const std::string& family, const std::string& donor, double blur, double lo,
                                    double hi) {
  sola::data::BlendRecipe r;
  r.family = sola::data::blend_family_from_string(family);
  r.donor = sola::data::donor_strategy_from_string(donor);
  r.blur_sigma = blur;
  r.area_lo = lo;
  r.area_hi = hi;
  r.validate();
  return r;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sola: local-anomaly forgery detection toolkit"};
  app.require_subcommand(1);

  // generate-data
  auto* gen = app.add_subcommand("generate-data", "write a synthetic blended-forgery dataset");
  std::string gen_out, gen_family = "ellipse", gen_donor = "other-image", gen_sources;
  int n_real = 100, n_fake = 100;
  std::uint64_t gen_seed = 0, pool_seed = 1;
  double blur = 3.0, area_lo = 0.08, area_hi = 0.35, src_begin = 0.0, src_end = 1.0;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--n-real", n_real);
  gen->add_option("--n-fake", n_fake);
  gen->add_option("--seed", gen_seed);
  gen->add_option("--family", gen_family, "ellipse|rectangle|polygon");
  gen->add_option("--donor", gen_donor, "other-image|color-jittered-self");
  gen->add_option("--blur", blur, "boundary blur sigma (pixels)");
  gen->add_option("--area-lo", area_lo);
  gen->add_option("--area-hi", area_hi);
  gen->add_option("--pool-seed", pool_seed, "seed of the procedural source pool (use different seeds for train/test)");
  gen->add_option("--sources", gen_sources, "folder of PNG source images instead of procedural sources");
  gen->add_option("--sources-begin", src_begin, "start of the used fraction of the sorted source list");
  gen->add_option("--sources-end", src_end, "end of the used fraction of the sorted source list");

  // make-gt
  auto* mgt = app.add_subcommand("make-gt", "turn a mask PNG into packed anomaly ground truth");
  std::string gt_mask, gt_out, gt_preview;
  int gt_patch = 16;
  mgt->add_option("--mask", gt_mask)->required();
  mgt->add_option("--out", gt_out)->required();
  mgt->add_option("--patch", gt_patch, "patch size in pixels");
  mgt->add_option("--preview", gt_preview, "directory for grayscale previews");

  // train
  auto* tr = app.add_subcommand("train", "train a model; config keys may be overridden with SOLA_<KEY>");
  std::string tr_config;
  std::vector<std::string> tr_set;
  tr->add_option("--config", tr_config, "JSON config file");
  tr->add_option("--set", tr_set, "key=value override (JSON value), applied after the environment");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "score a labelled dataset and report AUC");
  std::string ev_ckpt, ev_data, ev_out;
  ev->add_option("--checkpoint", ev_ckpt)->required();
  ev->add_option("--data", ev_data)->required();
  ev->add_option("--out", ev_out, "write the full per-image report here");

  // gradcam
  auto* gc = app.add_subcommand("gradcam", "class-score Grad-CAM overlay for one image");
  std::string gc_ckpt, gc_image, gc_layer = "features", gc_out, gc_heat;
  gc->add_option("--checkpoint", gc_ckpt)->required();
  gc->add_option("--image", gc_image)->required();
  gc->add_option("--layer", gc_layer, "stage1..stageK or features");
  gc->add_option("--out", gc_out, "overlay PNG")->required();
  gc->add_option("--heat", gc_heat, "raw heat map PNG");

  // dump-filters
  auto* df = app.add_subcommand("dump-filters", "per-epoch ASRM kernels, responses and constraint report");
  std::string df_run, df_out, df_probe;
  df->add_option("--run", df_run, "training output directory")->required();
  df->add_option("--out", df_out)->required();
  df->add_option("--probe", df_probe, "probe image (defaults to a procedural image)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), 64);
  }

  try {
    if (*gen) {
      const auto recipe = recipe_from(gen_family, gen_donor, blur, area_lo, area_hi);
      const auto pool = gen_sources.empty() ? sola::data::procedural_pool(pool_seed)
                                            : sola::data::folder_pool(gen_sources, src_begin, src_end);
      sola::data::generate_dataset(pool, recipe, n_real, n_fake, gen_seed, gen_out);
      std::cout << json{{"out", gen_out}, {"n_real", n_real}, {"n_fake", n_fake}, {"pool", pool.name}}.dump() << "\n";
    } else if (*mgt) {
      const auto gt = sola::make_gt(gt_mask, gt_out, gt_patch, gt_preview);
      json counts = json::object();
      for (sola::Group g : sola::kGroups) {
        const int k = static_cast<int>(g);
        auto ones = [](const sola::BinaryGrid& b) { return std::count(b.cells.begin(), b.cells.end(), 1); };
        counts[sola::kGroupNames[k]] = {{"first", ones(gt.first.labels[k])}, {"second", ones(gt.second.labels[k])}};
      }
      std::cout << json{{"out", gt_out}, {"rows", gt.first.labels[0].rows}, {"positives", counts}}.dump() << "\n";
    } else if (*tr) {
      json j = json::object();
      if (!tr_config.empty()) {
        std::ifstream in(tr_config);
        if (!in) throw sola::ConfigError("cannot open config '" + tr_config + "'");
        try {
          j = json::parse(in);
        } catch (const json::exception& e) {
          throw sola::ConfigError("config '" + tr_config + "' is not valid JSON: " + e.what());
        }
      }
      j = sola::apply_env_overrides(std::move(j));
      for (const auto& kv : tr_set) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw sola::ConfigError("--set expects key=value, got '" + kv + "'");
        const std::string key = kv.substr(0, eq), value = kv.substr(eq + 1);
        try {
          j[key] = json::parse(value);
        } catch (const json::exception&) {
          j[key] = value;  // bare strings
        }
      }
      const auto cfg = sola::RunConfig::from_json(j);
      const auto res = sola::train(cfg);
      json hist = json::array();
      for (const auto& e : res.history) {
        json r{{"epoch", e.epoch}, {"loss", e.loss}, {"train_auc", e.train_auc}};
        if (e.test_auc) r["test_auc"] = *e.test_auc;
        hist.push_back(r);
      }
      std::cout << json{{"config_hash", res.config_hash}, {"steps", res.steps}, {"best_auc", res.best_auc},
                        {"best_epoch", res.best_epoch}, {"best_checkpoint", res.best_checkpoint},
                        {"last_checkpoint", res.last_checkpoint}, {"metrics", res.metrics_log}, {"epochs", hist}}
                       .dump(2)
                << "\n";
    } else if (*ev) {
      const auto report = sola::evaluate(ev_ckpt, ev_data);
      if (!ev_out.empty()) {
        std::ofstream out(ev_out);
        if (!out) throw sola::LoadError("cannot write '" + ev_out + "'");
        out << report.to_json(true).dump(2) << "\n";
      }
      std::cout << report.to_json(false).dump(2) << "\n";
    } else if (*gc) {
      auto lm = sola::load_checkpoint(gc_ckpt);
      sola::data::Sample s;
      s.image = sola::read_png(gc_image, 3);
      s.file = gc_image;
      const auto heat = sola::gradcam(*lm.model, s, gc_layer);
      sola::write_png(gc_out, sola::overlay(s.image, heat));
      if (!gc_heat.empty()) sola::write_png(gc_heat, sola::to_gray_u8(heat.values, heat.height, heat.width));
      std::cout << json{{"out", gc_out}, {"layer", gc_layer}, {"height", heat.height}, {"width", heat.width}}.dump()
                << "\n";
    } else if (*df) {
      std::optional<sola::ImageU8> probe;
      if (!df_probe.empty()) probe = sola::read_png(df_probe, 3);
      const auto report = sola::dump_filters(df_run, df_out, probe);
      std::cout << report.to_json().dump(2) << "\n";
    }
  } catch (const sola::Error& e) {
    return fail(e.kind(), e.what(), 2);
  } catch (const std::exception& e) {
    return fail("internal", e.what(), 1);
  }
  return 0;
}
