#include <sstream>
#include <stdexcept>

#define TOML_EXCEPTIONS 1
#include "toml.hpp"
#include "posh/trainer.hpp"
#include "posh/util.hpp"

namespace posh::trainer {

std::string read_config_json(const std::string& path) {
  if (ends_with(path, ".json")) return read_file(path);
  try {
    auto tbl = toml::parse(read_file(path), path);
    std::ostringstream out;
    out << toml::json_formatter{tbl};
    return out.str();
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << path << ":" << e.source().begin.line << ": " << e.description();
    throw std::runtime_error(msg.str());
  }
}

}  // namespace posh::trainer
