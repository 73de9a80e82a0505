#include "raven/version.hpp"

namespace raven {

const char* version_string() { return "raven 0.1.0"; }

}  // namespace raven
