// omnidrl command-line front end.

#include <cstdlib>
#include <iostream>
#include <sstream>

#include <opencv2/core/utility.hpp>

#include "CLI11.hpp"
#include "omnidrl/harness.hpp"

namespace {

std::vector<double> parse_numbers(const std::string& text, std::size_t expected, const char* what) {
  std::vector<double> v;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) v.push_back(std::stod(item));
  if (v.size() != expected) {
    throw std::invalid_argument(std::string(what) + " needs " + std::to_string(expected) + " comma-separated numbers");
  }
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  if (const char* t = std::getenv("OMNIDRL_THREADS")) cv::setNumThreads(std::max(1, std::atoi(t)));

  CLI::App app{"Pedestrian localisation in omnidirectional images with deep reinforcement learning"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON run configuration");
    sub->add_option("--seed", seed, "Override the configured seed");
    sub->add_option("--override", overrides, "key=value, dotted keys (repeatable)");
  };

  std::string out_dir, dataset_dir, checkpoint, agent = "network", image, box, line;
  bool fresh = false, quiet = false;

  auto* gen = app.add_subcommand("generate", "Render a synthetic dataset");
  common(gen);
  gen->add_option("--out", out_dir, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Train the agent");
  common(train);
  train->add_option("--dataset", dataset_dir, "Dataset directory")->required();
  train->add_option("--out", out_dir, "Run directory")->required();
  train->add_flag("--fresh", fresh, "Ignore an existing trainer state");
  train->add_flag("--quiet", quiet, "No progress output");

  auto* eval = app.add_subcommand("eval", "Evaluate on the test split");
  common(eval);
  eval->add_option("--dataset", dataset_dir, "Dataset directory")->required();
  eval->add_option("--checkpoint", checkpoint, "Model checkpoint");
  eval->add_option("--out", out_dir, "Output directory")->required();
  eval->add_option("--agent", agent, "network | oracle | planner");

  auto* render = app.add_subcommand("render", "Draw projected boxes or segments over an image");
  common(render);
  render->add_option("--image", image, "Input image")->required();
  render->add_option("--box", box, "rho,beta,z,w,h");
  render->add_option("--line", line, "x1,y1,z1,x2,y2,z2");
  render->add_option("--out", out_dir, "Output PNG")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    const std::optional<std::filesystem::path> cfg_path =
        config_path.empty() ? std::nullopt : std::optional<std::filesystem::path>(config_path);
    const omnidrl::RunConfig cfg = omnidrl::load_run_config(cfg_path, overrides, seed);

    if (gen->parsed()) {
      omnidrl::cmd_generate(cfg, out_dir);
      std::cout << "dataset written to " << out_dir << " (config " << omnidrl::config_hash(cfg) << ")\n";
    } else if (train->parsed()) {
      const auto res = omnidrl::cmd_train(cfg, dataset_dir, out_dir, !fresh, !quiet);
      std::cout << "trained " << res.steps << " steps; checkpoint " << res.checkpoint.string() << '\n';
    } else if (eval->parsed()) {
      const auto res = omnidrl::cmd_eval(cfg, checkpoint.empty() ? std::nullopt : std::optional<std::filesystem::path>(checkpoint),
                                         dataset_dir, out_dir, omnidrl::eval_agent_from(agent));
      std::cout << omnidrl::summary_json(res.summary).dump(2) << '\n';
    } else if (render->parsed()) {
      omnidrl::RenderRequest req;
      if (!box.empty()) {
        const auto v = parse_numbers(box, 5, "--box");
        req.box = omnidrl::CylBox{v[0], v[1], v[2], v[3], v[4]};
      }
      if (!line.empty()) {
        const auto v = parse_numbers(line, 6, "--line");
        req.segment = std::make_pair(omnidrl::Point3(v[0], v[1], v[2]), omnidrl::Point3(v[3], v[4], v[5]));
      }
      if (!req.box && !req.segment) throw std::invalid_argument("render needs --box or --line");
      omnidrl::cmd_render(cfg, image, req, out_dir);
      std::cout << "wrote " << out_dir << '\n';
    }
  } catch (const omnidrl::GeometryError& e) {
    std::cerr << "geometry error: " << e.what() << '\n';
    return 3;
  } catch (const omnidrl::TrainingDiverged& e) {
    std::cerr << "training diverged: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
