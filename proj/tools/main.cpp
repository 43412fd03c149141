// SPDX-License-Identifier: Apache-2.0
// csmap: generate data, train a VAE, build concepts, and render concept saliency.
// Exit codes: 0 ok, 1 usage, 2 data/shape/io, 3 numerical.
#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <memory>

#include "commands.hpp"
#include "csmap/error.hpp"
#include "json_config.hpp"

using namespace csmap::cli;

namespace {

int exit_code_for(const csmap::Error& e) {
  switch (e.kind()) {
    case csmap::ErrorKind::usage: return 1;
    case csmap::ErrorKind::numerical: return 3;
    case csmap::ErrorKind::data:
    case csmap::ErrorKind::io: return 2;
  }
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Concept saliency maps for convolutional VAEs"};
  app.config_formatter(std::make_shared<JsonConfig>());
  app.set_config("--config", "", "JSON config; flags on the command line take precedence");
  app.require_subcommand(1);
  std::uint64_t seed = 0;
  app.add_option("--seed", seed, "Seed for data generation, training order and SmoothGrad noise")
      ->capture_default_str();

  // gen
  auto* gen = app.add_subcommand("gen", "Generate or import a dataset");
  gen->require_subcommand(1);
  GenSquaresOptions sq;
  auto* squares = gen->add_subcommand("squares", "Synthetic images, some with a square");
  squares->add_option("--n", sq.n, "Number of images")->capture_default_str();
  squares->add_option("--image-size", sq.image_size)->capture_default_str();
  squares->add_option("--channels", sq.channels)->check(CLI::IsMember({1, 3}))->capture_default_str();
  squares->add_option("--side", sq.side, "Square side in pixels")->capture_default_str();
  squares->add_option("--brightness", sq.brightness)->check(CLI::IsMember({"bright", "dark"}))->capture_default_str();
  squares->add_option("--color", sq.color, "Square colour, one value per channel")->expected(1, 3);
  squares->add_option("--fraction-with", sq.fraction_with, "Share of images with a square")->capture_default_str();
  squares->add_option("--background-amplitude", sq.background_amplitude)->capture_default_str();
  squares->add_option("--out", sq.out, "Dataset file")->required();

  GenStOptions st;
  auto* st_cmd = gen->add_subcommand("st", "Synthetic layered gene-expression grids");
  st_cmd->add_option("--genes", st.genes)->capture_default_str();
  st_cmd->add_option("--layers", st.layers, "Number of ring templates")->capture_default_str();
  st_cmd->add_option("--noise", st.noise)->capture_default_str();
  st_cmd->add_option("--grid", st.grid)->capture_default_str();
  st_cmd->add_option("--out", st.out, "Dataset file")->required();

  GenStLoadOptions stl;
  auto* st_load = gen->add_subcommand("st-load", "Bin gene-by-spot counts onto a grid");
  st_load->add_option("--matrix", stl.matrix, "Gene x spot count matrix (TSV)")->required()->check(CLI::ExistingFile);
  st_load->add_option("--spots", stl.spots, "Spot coordinates (TSV)")->required()->check(CLI::ExistingFile);
  st_load->add_option("--height", stl.height)->capture_default_str();
  st_load->add_option("--width", stl.width)->capture_default_str();
  st_load->add_option("--bounds", stl.bounds, "x_min x_max y_min y_max")->expected(4);
  st_load->add_option("--out", stl.out, "Dataset file")->required();

  // train
  TrainOptions tr;
  auto* train = app.add_subcommand("train", "Train a VAE and write a checkpoint");
  train->add_option("--data", tr.data, "Dataset file")->required();
  train->add_option("--preset", tr.preset)->check(CLI::IsMember({"st", "celeba"}))->capture_default_str();
  train->add_option("--latent-dim", tr.latent_dim, "Override latent size (0 keeps preset)")->capture_default_str();
  train->add_flag("--upsample-decoder", tr.upsample_decoder, "Nearest upsample + conv instead of transposed conv");
  train->add_option("--epochs", tr.epochs)->check(CLI::PositiveNumber)->capture_default_str();
  train->add_option("--lr", tr.learning_rate)->check(CLI::PositiveNumber)->capture_default_str();
  train->add_option("--batch-size", tr.batch_size)->check(CLI::PositiveNumber)->capture_default_str();
  train->add_option("--init-seed", tr.init_seed, "Weight init seed (defaults to --seed)");
  train->add_option("--out", tr.out, "Checkpoint file")->required();

  // concept
  ConceptOptions co;
  auto* concept_cmd = app.add_subcommand("concept", "Build a concept vector and its score report");
  concept_cmd->add_option("--model", co.model)->required();
  concept_cmd->add_option("--data", co.data)->required();
  auto* attr = concept_cmd->add_option("--attr", co.attr, "Binary label to contrast");
  auto* anchors = concept_cmd->add_option("--anchors", co.anchors, "Sample ids for correlation mode");
  attr->excludes(anchors);
  concept_cmd->add_option("--k", co.k, "Top correlated samples in correlation mode")->capture_default_str();
  concept_cmd->add_option("--n-per-group", co.n_per_group, "Cap per label group")->capture_default_str();
  concept_cmd->add_option("--bins", co.bins, "Histogram bins in the report")->capture_default_str();
  concept_cmd->add_option("--name", co.name);
  concept_cmd->add_option("--eval-data", co.eval_data, "Score report on this dataset instead");
  concept_cmd->add_option("--out", co.out, "Concept file")->required();
  concept_cmd->add_option("--report", co.report, "Report path (default <out>.report.json)");

  // saliency
  SaliencyOptions so;
  auto* sal = app.add_subcommand("saliency", "Render concept saliency maps");
  sal->add_option("--model", so.model)->required();
  sal->add_option("--concept", so.concept_file)->required();
  sal->add_option("--data", so.data)->required();
  sal->add_option("--ids", so.ids, "Sample ids (default: the first --limit samples)");
  sal->add_option("--limit", so.limit)->capture_default_str();
  sal->add_option("--rule", so.rules, "vanilla, guided or rectgrad; repeatable")->capture_default_str();
  auto* tau = sal->add_option("--tau", so.tau, "Absolute rectgrad threshold");
  auto* tau_q = sal->add_option("--tau-percentile", so.tau_percentile, "Percentile rectgrad threshold");
  tau->excludes(tau_q);
  sal->add_option("--smoothgrad-samples", so.smoothgrad_samples, "0 or 1 disables SmoothGrad")->capture_default_str();
  sal->add_option("--smoothgrad-sigma", so.smoothgrad_sigma)->capture_default_str();
  sal->add_option("--post", so.post)->check(CLI::IsMember({"raw", "clip", "clip-negative", "abs"}))->capture_default_str();
  sal->add_flag("--clip", so.clip, "Same as --post clip");
  sal->add_option("--channel-reduce", so.channel_reduce)->check(CLI::IsMember({"max-abs", "sum", "none"}))->capture_default_str();
  sal->add_option("--colormap", so.colormap)->check(CLI::IsMember({"gray", "jet"}))->capture_default_str();
  sal->add_option("--format", so.format)->check(CLI::IsMember({"png", "pgm", "ppm"}))->capture_default_str();
  sal->add_option("--precision", so.precision)->check(CLI::IsMember({"f32", "f64"}))->capture_default_str();
  sal->add_option("--out-dir", so.out_dir)->required();

  // manipulate
  ManipulateOptions mo;
  auto* man = app.add_subcommand("manipulate", "Decode mu(x) + alpha * concept over a list of alphas");
  man->add_option("--model", mo.model)->required();
  man->add_option("--concept", mo.concept_file)->required();
  man->add_option("--data", mo.data)->required();
  man->add_option("--id", mo.id, "Sample id (default: first sample)");
  man->add_option("--alphas", mo.alphas)->capture_default_str();
  man->add_option("--out", mo.out, "Image strip (.png, .pgm or .ppm)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    const nlohmann::json resolved = JsonConfig::resolved(&app);
    if (squares->parsed()) run_gen_squares(sq, seed, resolved);
    else if (st_cmd->parsed()) run_gen_st(st, seed, resolved);
    else if (st_load->parsed()) run_gen_st_load(stl, resolved);
    else if (train->parsed()) run_train(tr, seed, resolved);
    else if (concept_cmd->parsed()) run_concept(co, resolved);
    else if (sal->parsed()) run_saliency(so, seed, resolved);
    else if (man->parsed()) run_manipulate(mo, resolved);
  } catch (const csmap::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
