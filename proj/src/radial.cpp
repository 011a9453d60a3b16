#include "radnet/radial.hpp"

namespace radnet {

nlohmann::json paths_json(std::span<const TokenPath> paths) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& p : paths) {
    out.push_back({{"token_index", p.token_index}, {"path", p.path}, {"exit", exit_reason_name(p.exit)}});
  }
  return out;
}

TensorArchive router_archive(const RouterMLP<float>& router) {
  router.validate();
  TensorArchive a;
  a.header = {{"kind", "router"},
              {"n_layers", router.n_layers()},
              {"d_model", router.d_model()},
              {"d_hidden", router.d_hidden()},
              {"activation", activation_name(router.act)}};
  a.tensors["router.fc1.weight"] = Tensor<float>::from(router.w1);
  a.tensors["router.fc1.bias"] = Tensor<float>::from(router.b1);
  a.tensors["router.fc2.weight"] = Tensor<float>::from(router.w2);
  a.tensors["router.fc2.bias"] = Tensor<float>::from(router.b2);
  return a;
}

RouterMLP<float> router_from_archive(const TensorArchive& a) {
  if (a.header.value("kind", "") != "router") throw Error(Errc::format, "archive is not a router checkpoint");
  std::size_t n_layers = 0, d_model = 0, d_hidden = 0;
  RouterMLP<float> r;
  try {
    n_layers = a.header.at("n_layers").get<std::size_t>();
    d_model = a.header.at("d_model").get<std::size_t>();
    d_hidden = a.header.at("d_hidden").get<std::size_t>();
    r.act = parse_activation(a.header.at("activation").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::format, std::string("router header: ") + e.what());
  }
  auto fetch = [&](const std::string& name, const Shape& shape) -> const Tensor<float>& {
    auto it = a.tensors.find(name);
    if (it == a.tensors.end()) throw Error(Errc::mapping, "router checkpoint is missing '" + name + "'");
    if (it->second.shape != shape) {
      throw Error(Errc::shape_mismatch, "router parameter '" + name + "' has shape " +
                                            shape_string(it->second.shape) + ", expected " + shape_string(shape));
    }
    return it->second;
  };
  r.w1 = fetch("router.fc1.weight", {d_hidden, d_model}).matrix();
  r.b1 = fetch("router.fc1.bias", {d_hidden}).vector();
  r.w2 = fetch("router.fc2.weight", {n_layers + 1, d_hidden}).matrix();
  r.b2 = fetch("router.fc2.bias", {n_layers + 1}).vector();
  r.validate();
  return r;
}

void save_router(const RouterMLP<float>& router, const std::filesystem::path& path) {
  write_archive(router_archive(router), path);
}

RouterMLP<float> load_router(const std::filesystem::path& path) { return router_from_archive(read_archive(path)); }

}  // namespace radnet
